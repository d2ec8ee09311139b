#![allow(dead_code)]

use dtrattunet::engine::gradcheck::{self, GradCheckReport, REL_TOL, STEP};
use dtrattunet::engine::{Declarations, Graph, Mode, ParamKind, ParamStore, Scope, Tensor, Var};
use dtrattunet::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

pub fn store(decl: &Declarations, seed: u64) -> ParamStore {
    ParamStore::initialize(decl.specs(), &mut rng(seed))
}

/// Give normalization layers non-trivial affine parameters and running
/// statistics so eval-mode paths are exercised with generic values.
pub fn perturb_norms(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let t = store.get(&name).unwrap().clone();
        let shape = t.shape().to_vec();
        let replacement = if name.ends_with("running_var") {
            Some(Tensor::uniform(&shape, 0.5, 1.5, &mut r))
        } else if name.ends_with("running_mean") {
            Some(Tensor::uniform(&shape, -0.2, 0.2, &mut r))
        } else if (name.contains("bn") || name.contains("ln")) && name.ends_with(".weight") {
            Some(Tensor::uniform(&shape, 0.7, 1.3, &mut r))
        } else if (name.contains("bn") || name.contains("ln")) && name.ends_with(".bias") {
            Some(Tensor::uniform(&shape, -0.2, 0.2, &mut r))
        } else {
            None
        };
        if let Some(t) = replacement {
            store.set(&name, t).unwrap();
        }
    }
}

pub type BlockFn<'f> = dyn Fn(&mut Graph, &Scope<'_>, Var) -> Result<Var> + 'f;

/// Finite-difference check of `Σ block(x) ⊙ r` with respect to the input and
/// up to `per_param` coordinates of every trainable tensor.
pub fn grad_check_block(
    params: &ParamStore,
    input: &Tensor,
    mode: Mode,
    per_input: usize,
    per_param: usize,
    block: &BlockFn<'_>,
) -> GradCheckReport {
    let out_shape = {
        let mut g = Graph::new(mode);
        let x = g.constant(input.clone());
        let y = block(&mut g, &params.scope(""), x).unwrap();
        g.shape(y).to_vec()
    };
    let weights = Tensor::uniform(&out_shape, -1.0, 1.0, &mut rng(4242));
    let loss_of = |store: &ParamStore, x: &Tensor| -> Result<f64> {
        let mut g = Graph::new(mode);
        let xv = g.constant(x.clone());
        let y = block(&mut g, &store.scope(""), xv)?;
        let w = g.constant(weights.clone());
        let prod = g.mul(y, w)?;
        let loss = g.sum(prod);
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new(mode);
    let x = g.input(input.clone());
    let y = block(&mut g, &params.scope(""), x).unwrap();
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    let input_grad = grads.get(x).cloned().unwrap();
    let param_grads = g.param_grads(&grads);

    let coords = gradcheck::spread_coords(input.numel(), per_input);
    let mut report = gradcheck::check(|t| loss_of(params, t), input, &input_grad, &coords, STEP, REL_TOL).unwrap();
    for (name, entry) in params.iter() {
        if entry.kind != ParamKind::Trainable {
            continue;
        }
        let Some(analytic) = param_grads.get(name) else {
            continue;
        };
        let coords = gradcheck::spread_coords(entry.value.numel(), per_param);
        let mut probe_store = params.clone();
        let r = gradcheck::check(
            |t| {
                probe_store.set(name, t.clone())?;
                loss_of(&probe_store, input)
            },
            &entry.value,
            analytic,
            &coords,
            STEP,
            REL_TOL,
        )
        .unwrap();
        report.merge(r);
    }
    report
}

/// Minimal NIfTI-1 writer for int16 volumes in x-fastest order.
pub fn write_nifti_i16(path: &std::path::Path, nx: usize, ny: usize, nz: usize, data: &[i16], gzip: bool) {
    use std::io::Write;
    assert_eq!(data.len(), nx * ny * nz);
    let mut header = vec![0u8; 352];
    header[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dims = [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        header[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    header[70..72].copy_from_slice(&4i16.to_le_bytes());
    header[72..74].copy_from_slice(&16i16.to_le_bytes());
    header[108..112].copy_from_slice(&352f32.to_le_bytes());
    header[112..116].copy_from_slice(&1f32.to_le_bytes());
    header[344..348].copy_from_slice(b"n+1\0");
    let mut bytes = header;
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let file = std::fs::File::create(path).unwrap();
    if gzip {
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::fast());
        enc.write_all(&bytes).unwrap();
        enc.finish().unwrap();
    } else {
        let mut file = file;
        file.write_all(&bytes).unwrap();
    }
}

/// 32² geometry with very narrow widths for fast training tests.
pub fn tiny_config() -> dtrattunet::ModelConfig {
    dtrattunet::ModelConfig {
        image_size: 32,
        embed_dim: 16,
        depth: 4,
        heads: 2,
        mlp_dim: 32,
        tap_layers: [1, 2, 3, 4],
        encoder_channels: [4, 8, 8, 16, 16],
        ..dtrattunet::ModelConfig::default()
    }
}

pub fn prepared(n: usize, size: usize, task: dtrattunet::Task, seed: u64) -> Vec<dtrattunet::data::Prepared> {
    let pc = dtrattunet::data::PreprocessConfig {
        image_size: size,
        ..Default::default()
    };
    dtrattunet::data::synthetic::synthetic_slices(n, size, task, seed)
        .iter()
        .map(|s| dtrattunet::data::preprocess(s, &pc, task).unwrap())
        .collect()
}

/// Straight-line per-head attention over plain vectors.
pub fn naive_msa(p: &ParamStore, s: &Tensor, heads: usize) -> Vec<f64> {
    let (tokens, dim) = (s.dim(1), s.dim(2));
    let width = dim / heads;
    let lin = |name: &str, x: &[f64]| -> Vec<f64> {
        let w = p.get(&format!("layer.attn.{name}.weight")).unwrap();
        let b = p.get(&format!("layer.attn.{name}.bias")).unwrap();
        (0..dim)
            .map(|o| b.data()[o] + (0..dim).map(|i| w.data()[o * dim + i] * x[i]).sum::<f64>())
            .collect()
    };
    let rows: Vec<&[f64]> = s.data().chunks(dim).collect();
    let q: Vec<Vec<f64>> = rows.iter().map(|r| lin("query", r)).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|r| lin("key", r)).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| lin("value", r)).collect();
    let mut concat = vec![vec![0.0; dim]; tokens];
    for h in 0..heads {
        let span = h * width..(h + 1) * width;
        for i in 0..tokens {
            let scores: Vec<f64> = (0..tokens)
                .map(|j| span.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (width as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in span.clone() {
                concat[i][c] = (0..tokens).map(|j| exps[j] / total * v[j][c]).sum();
            }
        }
    }
    concat.iter().flat_map(|row| lin("out", row)).collect()
}
