mod common;

use common::{grad_check_block, naive_msa, perturb_norms, rand_tensor, store};
use dtrattunet::blocks::{self, attention_gate_with_map, msa_with_weights};
use dtrattunet::engine::{Declarations, Graph, Mode, ParamStore, Tensor};
use dtrattunet::Error;

fn res_params(in_c: usize, out_c: usize, seed: u64) -> ParamStore {
    let mut d = Declarations::new();
    blocks::declare_res_block(&mut d, "block", in_c, out_c);
    store(&d, seed)
}

fn gate_params(x_c: usize, g_c: usize, seed: u64) -> ParamStore {
    let mut d = Declarations::new();
    blocks::declare_attention_gate(&mut d, "gate", x_c, g_c, blocks::gate_channels(x_c));
    store(&d, seed)
}

fn layer_params(dim: usize, mlp: usize, seed: u64) -> ParamStore {
    let mut d = Declarations::new();
    blocks::declare_transformer_layer(&mut d, "layer", dim, mlp);
    store(&d, seed)
}

fn zero_all(store: &mut ParamStore, prefix: &str) {
    store.map_prefix(prefix, |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
}

// ---- res_block ----

#[test]
fn res_block_shape() {
    let p = res_params(64, 128, 1);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(rand_tensor(&[2, 64, 56, 56], 2));
    let y = blocks::res_block(&mut g, &p.scope("block"), x).unwrap();
    assert_eq!(g.shape(y), &[2, 128, 56, 56]);
}

#[test]
fn res_block_zero_weights_give_zero() {
    let mut p = res_params(3, 8, 3);
    for name in ["conv1", "conv2", "skip", "bn1", "bn2", "skip_bn"] {
        p.map_prefix(&format!("block.{name}.weight"), |_, t| {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0)
        });
        p.map_prefix(&format!("block.{name}.bias"), |_, t| {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0)
        });
    }
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new(mode);
        let x = g.constant(rand_tensor(&[2, 3, 8, 8], 4));
        let y = blocks::res_block(&mut g, &p.scope("block"), x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn res_block_output_nonnegative() {
    let mut p = res_params(4, 6, 5);
    perturb_norms(&mut p, 6);
    for (seed, mode) in [(7, Mode::Train), (8, Mode::Eval)] {
        let mut g = Graph::new(mode);
        let x = g.constant(rand_tensor(&[2, 4, 8, 8], seed));
        let y = blocks::res_block(&mut g, &p.scope("block"), x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn res_block_rejects_non_finite_input() {
    let p = res_params(2, 2, 9);
    let mut bad = rand_tensor(&[1, 2, 4, 4], 10);
    bad.data_mut()[5] = f64::NAN;
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(bad);
    assert!(matches!(
        blocks::res_block(&mut g, &p.scope("block"), x),
        Err(Error::Validation(_))
    ));
}

#[test]
fn res_block_gradient_matches_finite_differences() {
    let p = res_params(3, 8, 11);
    let x = rand_tensor(&[1, 3, 16, 16], 12);
    let report = grad_check_block(&p, &x, Mode::Train, 200, 12, &|g, s, x| {
        blocks::res_block(g, &s.sub("block"), x)
    });
    assert!(
        report.pass_fraction() >= 0.95,
        "{}/{} worst {:?}",
        report.passed(),
        report.checked(),
        report.worst()
    );
}

// ---- up_res_block ----

#[test]
fn up_res_block_shape() {
    let p = res_params(768, 256, 13);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(rand_tensor(&[2, 768, 14, 14], 14));
    let y = blocks::up_res_block(&mut g, &p.scope("block"), x).unwrap();
    assert_eq!(g.shape(y), &[2, 256, 28, 28]);
}

#[test]
fn upsampling_preserves_constant_plane() {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::full(&[1, 2, 5, 7], -1.75));
    let up = g.upsample2(x).unwrap();
    assert_eq!(g.shape(up), &[1, 2, 10, 14]);
    assert!(g.value(up).data().iter().all(|&v| v == -1.75));
}

#[test]
fn up_res_block_then_avg_pool_gradient() {
    let p = res_params(4, 4, 15);
    let x = rand_tensor(&[1, 4, 8, 8], 16);
    let report = grad_check_block(&p, &x, Mode::Train, 256, 12, &|g, s, x| {
        let y = blocks::up_res_block(g, &s.sub("block"), x)?;
        g.avg_pool2(y)
    });
    assert!(
        report.pass_fraction() >= 0.95,
        "{}/{} worst {:?}",
        report.passed(),
        report.checked(),
        report.worst()
    );
}

// ---- attention gate ----

#[test]
fn attention_gate_shape() {
    let p = gate_params(64, 128, 17);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(rand_tensor(&[1, 64, 112, 112], 18));
    let gate = g.constant(rand_tensor(&[1, 128, 112, 112], 19));
    let y = blocks::attention_gate(&mut g, &p.scope("gate"), x, gate).unwrap();
    assert_eq!(g.shape(y), &[1, 64, 112, 112]);
}

#[test]
fn attention_gate_zeroed_psi_halves_input() {
    let mut p = gate_params(4, 6, 20);
    perturb_norms(&mut p, 21);
    zero_all(&mut p, "gate.psi");
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new(mode);
        let xt = rand_tensor(&[2, 4, 8, 8], 22);
        let x = g.constant(xt.clone());
        let gate = g.constant(rand_tensor(&[2, 6, 8, 8], 23));
        let y = blocks::attention_gate(&mut g, &p.scope("gate"), x, gate).unwrap();
        for (o, i) in g.value(y).data().iter().zip(xt.data()) {
            assert!((o - 0.5 * i).abs() <= 1e-6);
        }
    }
}

#[test]
fn attention_gate_ratio_in_unit_interval() {
    let mut p = gate_params(4, 4, 24);
    perturb_norms(&mut p, 25);
    let mut g = Graph::new(Mode::Eval);
    let xt = rand_tensor(&[1, 4, 8, 8], 26);
    let x = g.constant(xt.clone());
    let gate = g.constant(rand_tensor(&[1, 4, 8, 8], 27));
    let (y, coeff) = attention_gate_with_map(&mut g, &p.scope("gate"), x, gate).unwrap();
    assert_eq!(g.shape(coeff), &[1, 1, 8, 8]);
    assert!(g.value(coeff).data().iter().all(|&m| m > 0.0 && m < 1.0));
    for (o, i) in g.value(y).data().iter().zip(xt.data()) {
        if *i != 0.0 {
            let ratio = o / i;
            assert!((0.0..=1.0).contains(&ratio));
        }
    }
}

#[test]
fn attention_gate_rejects_spatial_mismatch() {
    let p = gate_params(4, 4, 28);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(rand_tensor(&[1, 4, 8, 8], 29));
    let gate = g.constant(rand_tensor(&[1, 4, 4, 4], 30));
    assert!(matches!(
        blocks::attention_gate(&mut g, &p.scope("gate"), x, gate),
        Err(Error::Validation(_))
    ));
}

#[test]
fn attention_gate_gradient_matches_finite_differences() {
    let p = gate_params(4, 6, 31);
    let gate_t = rand_tensor(&[2, 6, 8, 8], 32);
    let x = rand_tensor(&[2, 4, 8, 8], 33);
    let report = grad_check_block(&p, &x, Mode::Train, 256, 10, &|g, s, x| {
        let gate = g.constant(gate_t.clone());
        blocks::attention_gate(g, &s.sub("gate"), x, gate)
    });
    assert!(
        report.pass_fraction() >= 0.95,
        "{}/{} worst {:?}",
        report.passed(),
        report.checked(),
        report.worst()
    );
}

// ---- patch embedding ----

fn patch_params(in_c: usize, patch: usize, dim: usize, tokens: usize, seed: u64) -> ParamStore {
    let mut d = Declarations::new();
    blocks::declare_patch_embed(&mut d, "embed", in_c, patch, dim, tokens);
    store(&d, seed)
}

#[test]
fn patch_counts() {
    let p = patch_params(1, 16, 8, 196, 34);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(rand_tensor(&[1, 1, 224, 224], 35));
    let z = blocks::patch_embed(&mut g, &p.scope("embed"), x).unwrap();
    assert_eq!(g.shape(z), &[1, 196, 8]);

    let p = patch_params(1, 16, 8, 4, 36);
    let x = g.constant(rand_tensor(&[2, 1, 32, 32], 37));
    let z = blocks::patch_embed(&mut g, &p.scope("embed"), x).unwrap();
    assert_eq!(g.shape(z), &[2, 4, 8]);
}

#[test]
fn patch_embed_rejects_indivisible_input() {
    let p = patch_params(1, 16, 8, 4, 38);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(rand_tensor(&[1, 1, 40, 32], 39));
    assert!(matches!(
        blocks::patch_embed(&mut g, &p.scope("embed"), x),
        Err(Error::Validation(_))
    ));
}

#[test]
fn one_hot_pixel_changes_exactly_one_token() {
    let p = patch_params(3, 16, 12, 16, 40);
    let mut g = Graph::new(Mode::Eval);
    let zero = g.constant(Tensor::zeros(&[1, 3, 64, 64]));
    let mut hot = Tensor::zeros(&[1, 3, 64, 64]);
    // channel 1, row 37, col 21 -> patch (2, 1) -> token 9
    hot.data_mut()[64 * 64 + 37 * 64 + 21] = 1.0;
    let hot = g.constant(hot);
    let a = blocks::patch_project(&mut g, &p.scope("embed"), zero).unwrap();
    let b = blocks::patch_project(&mut g, &p.scope("embed"), hot).unwrap();
    let (a, b) = (g.value(a).clone(), g.value(b).clone());
    let changed: Vec<usize> = (0..16)
        .filter(|&t| (0..12).any(|k| a.data()[t * 12 + k] != b.data()[t * 12 + k]))
        .collect();
    assert_eq!(changed, vec![9]);
}

// ---- transformer layer & msa ----

#[test]
fn transformer_layer_preserves_shape() {
    let p = layer_params(768, 3072, 41);
    let mut g = Graph::new(Mode::Eval);
    let z = g.constant(rand_tensor(&[2, 196, 768], 42));
    let y = blocks::transformer_layer(&mut g, &p.scope("layer"), z, 12).unwrap();
    assert_eq!(g.shape(y), &[2, 196, 768]);
}

#[test]
fn transformer_layer_rejects_indivisible_heads() {
    let p = layer_params(786, 64, 43);
    let mut g = Graph::new(Mode::Eval);
    let z = g.constant(rand_tensor(&[1, 4, 786], 44));
    assert!(matches!(
        blocks::transformer_layer(&mut g, &p.scope("layer"), z, 12),
        Err(Error::Config(_))
    ));
    // 786 works with 6 heads
    assert!(blocks::transformer_layer(&mut g, &p.scope("layer"), z, 6).is_ok());
}

#[test]
fn transformer_layer_is_permutation_equivariant() {
    let mut p = layer_params(16, 32, 45);
    perturb_norms(&mut p, 46);
    let z = rand_tensor(&[1, 6, 16], 47);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let mut zp = Tensor::zeros(&[1, 6, 16]);
    for (dst, &src) in perm.iter().enumerate() {
        zp.data_mut()[dst * 16..(dst + 1) * 16].copy_from_slice(&z.data()[src * 16..(src + 1) * 16]);
    }
    let mut g = Graph::new(Mode::Eval);
    let a = g.constant(z);
    let b = g.constant(zp);
    let ya = blocks::transformer_layer(&mut g, &p.scope("layer"), a, 4).unwrap();
    let yb = blocks::transformer_layer(&mut g, &p.scope("layer"), b, 4).unwrap();
    let (ya, yb) = (g.value(ya), g.value(yb));
    for (dst, &src) in perm.iter().enumerate() {
        for k in 0..16 {
            assert!((yb.data()[dst * 16 + k] - ya.data()[src * 16 + k]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let p = layer_params(24, 48, 48);
    let mut g = Graph::new(Mode::Eval);
    let s = g.constant(rand_tensor(&[2, 7, 24], 49));
    let (_, attn) = msa_with_weights(&mut g, &p.scope("layer.attn"), s, 3).unwrap();
    assert_eq!(g.shape(attn), &[6, 7, 7]);
    for row in g.value(attn).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zeroed_residual_branches_give_identity() {
    let mut p = layer_params(16, 32, 50);
    perturb_norms(&mut p, 51);
    zero_all(&mut p, "layer.attn.out");
    zero_all(&mut p, "layer.mlp.fc2");
    let zt = rand_tensor(&[2, 6, 16], 52);
    let mut g = Graph::new(Mode::Eval);
    let z = g.constant(zt.clone());
    let y = blocks::transformer_layer(&mut g, &p.scope("layer"), z, 4).unwrap();
    for (a, b) in g.value(y).data().iter().zip(zt.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn single_token_attention_is_value_projection() {
    let p = layer_params(24, 48, 53);
    let mut g = Graph::new(Mode::Eval);
    let s = g.constant(rand_tensor(&[1, 1, 24], 54));
    let (out, attn) = msa_with_weights(&mut g, &p.scope("layer.attn"), s, 3).unwrap();
    assert!(g.value(attn).data().iter().all(|&w| w == 1.0));
    let a = p.scope("layer.attn");
    let v = a.var(&mut g, "value.weight").unwrap();
    let vb = a.var(&mut g, "value.bias").unwrap();
    let o = a.var(&mut g, "out.weight").unwrap();
    let ob = a.var(&mut g, "out.bias").unwrap();
    let proj = g.linear(s, v, Some(vb)).unwrap();
    let expected = g.linear(proj, o, Some(ob)).unwrap();
    for (x, y) in g.value(out).data().iter().zip(g.value(expected).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn msa_matches_naive_oracle() {
    let p = layer_params(24, 48, 55);
    let s = rand_tensor(&[1, 5, 24], 56);
    let expected = naive_msa(&p, &s, 3);
    let mut g = Graph::new(Mode::Eval);
    let sv = g.constant(s);
    let out = blocks::msa(&mut g, &p.scope("layer.attn"), sv, 3).unwrap();
    for (a, b) in g.value(out).data().iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-5);
    }
}

#[test]
fn transformer_layer_gradient_matches_finite_differences() {
    let mut p = layer_params(16, 32, 57);
    // larger weights so the attention pattern is far from uniform
    p.map_prefix("layer.attn", |_, t| t.scale_inplace(20.0));
    let x = rand_tensor(&[1, 6, 16], 58);
    let report = grad_check_block(&p, &x, Mode::Train, 96, 16, &|g, s, z| {
        blocks::transformer_layer(g, &s.sub("layer"), z, 4)
    });
    assert!(
        report.pass_fraction() >= 0.95,
        "{}/{} worst {:?}",
        report.passed(),
        report.checked(),
        report.worst()
    );
}

// ---- token reshaping ----

#[test]
fn reshape_tokens_shapes_and_roundtrip() {
    let mut g = Graph::new(Mode::Eval);
    let z = g.constant(rand_tensor(&[2, 196, 768], 59));
    let x = blocks::reshape_tokens(&mut g, z).unwrap();
    assert_eq!(g.shape(x), &[2, 768, 14, 14]);
    let back = blocks::flatten_tokens(&mut g, x).unwrap();
    assert_eq!(g.value(back), g.value(z));

    let small = g.constant(Tensor::new(&[1, 4, 8], (0..32).map(f64::from).collect()).unwrap());
    let m = blocks::reshape_tokens(&mut g, small).unwrap();
    assert_eq!(g.shape(m), &[1, 8, 2, 2]);
    // channel k of the map holds feature k of every token in raster order
    assert_eq!(&g.value(m).data()[4..8], &[1.0, 9.0, 17.0, 25.0]);
}

#[test]
fn reshape_tokens_rejects_non_square() {
    let mut g = Graph::new(Mode::Eval);
    let z = g.constant(rand_tensor(&[1, 6, 4], 60));
    assert!(matches!(blocks::reshape_tokens(&mut g, z), Err(Error::Validation(_))));
}

// ---- invariants ----

#[test]
fn blocks_stay_finite_over_seeded_trials() {
    let res = res_params(3, 4, 61);
    let gate = gate_params(4, 3, 62);
    let layer = layer_params(16, 32, 63);
    let embed = patch_params(3, 4, 16, 4, 64);
    for trial in 0..100u64 {
        let mut g = Graph::new(if trial % 2 == 0 { Mode::Train } else { Mode::Eval });
        let x = g.constant(rand_tensor(&[2, 3, 8, 8], 1000 + trial).map(|v| v * 10.0));
        let r = blocks::res_block(&mut g, &res.scope("block"), x).unwrap();
        let u = blocks::up_res_block(&mut g, &res.scope("block"), x).unwrap();
        let a = blocks::attention_gate(&mut g, &gate.scope("gate"), r, x).unwrap();
        let z = blocks::patch_embed(&mut g, &embed.scope("embed"), x).unwrap();
        let t = blocks::transformer_layer(&mut g, &layer.scope("layer"), z, 4).unwrap();
        for v in [r, u, a, z, t] {
            assert!(g.value(v).is_finite(), "trial {trial}");
        }
    }
}
