//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a gradient-requiring leaf. Graphs are built
//! per forward pass and dropped afterwards; parameters live in a
//! [`ParamStore`](super::ParamStore) and enter the tape as shared leaves.

use std::collections::BTreeMap;
use std::sync::Arc;

use indexmap::IndexMap;

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Normalization layers use batch statistics in `Train` and running
/// statistics in `Eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a training-mode batch normalization, to be
/// folded into the running statistics once the forward pass is done.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub key: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulSpatial {
        x: Var,
        m: Var,
    },
    Scale(Var, f64),
    AddSuffix {
        x: Var,
        b: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        x: Var,
        target: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        x: Var,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    params: Vec<(Var, String)>,
    bn_updates: Vec<BnUpdate>,
    block_calls: BTreeMap<&'static str, usize>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

pub const NORM_EPS: f64 = 1e-5;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn std_normal_cdf(v: f64) -> f64 {
    0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(v: f64) -> f64 {
    (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            params: Vec::new(),
            bn_updates: Vec::new(),
            block_calls: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), false)
    }

    /// Input leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), true)
    }

    /// Register a named parameter as a trainable leaf.
    pub fn param(&mut self, name: &str, value: Arc<Tensor>) -> Var {
        let var = self.leaf(value, true);
        self.params.push((var, name.to_string()));
        var
    }

    fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Statistics gathered by training-mode batch normalization.
    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Count an invocation of a named block (used for structural checks).
    pub fn note_block(&mut self, name: &'static str) {
        *self.block_calls.entry(name).or_default() += 1;
    }

    pub fn block_calls(&self, name: &str) -> usize {
        self.block_calls.get(name).copied().unwrap_or(0)
    }

    pub fn ensure_finite(&self, var: Var, what: &str) -> Result<()> {
        if !self.value(var).is_finite() {
            return Err(Error::Validation(format!("{what}: input contains NaN or Inf")));
        }
        Ok(())
    }

    // ---- convolution and pooling ----

    /// 2-D convolution, NCHW input and `out×in×kh×kw` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("conv2d: input {xs:?} with weight {ws:?}")));
        }
        if stride == 0 || xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return Err(Error::Shape(format!("conv2d: kernel {ws:?} does not fit input {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::Shape(format!(
                    "conv2d: bias {:?} for {} outputs",
                    self.shape(b),
                    ws[0]
                )));
            }
        }
        let geo = ConvGeometry {
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
        };
        let (batch, out_c) = (xs[0], ws[0]);
        let (ho, wo) = (geo.out_height(), geo.out_width());
        let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
        let in_plane = xs[1] * xs[2] * xs[3];
        let out_plane = out_c * ho * wo;
        let mut out = vec![0.0; batch * out_plane];
        let mut cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * cols_n]
        };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for n in 0..batch {
                let image = &xv[n * in_plane..(n + 1) * in_plane];
                let col: &[f64] = if geo.is_pointwise() {
                    image
                } else {
                    kernels::im2col(image, &geo, &mut cols);
                    &cols
                };
                let dst = &mut out[n * out_plane..(n + 1) * out_plane];
                kernels::gemm(out_c, rows, cols_n, wv, false, col, false, dst, false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for n in 0..batch {
                    for (c, &bias) in bv.iter().enumerate() {
                        let start = n * out_plane + c * ho * wo;
                        out[start..start + ho * wo].iter_mut().for_each(|v| *v += bias);
                    }
                }
            }
        }
        let value = Tensor::new(&[batch, out_c, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geo }, &inputs))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Shape(format!("max_pool2 needs even spatial size, got {s:?}")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(&[s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2 needs even spatial size, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() / 4);
        for plane in src.chunks(h * w) {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let i = 2 * oy * w + 2 * ox;
                    out.push(0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]));
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], h / 2, w / 2], out)?;
        Ok(self.push(value, Op::AvgPool2(x), &[x]))
    }

    /// Bilinear ×2 upsampling with half-pixel centres (no corner alignment).
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample2 expects NCHW, got {s:?}")));
        }
        let out = kernels::upsample2_forward(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(&[s[0], s[1], 2 * s[2], 2 * s[3]], out)?;
        Ok(self.push(value, Op::Upsample2(x), &[x]))
    }

    // ---- normalization ----

    /// Batch normalization over axis 1 of an `N×C×…` tensor.
    ///
    /// `running` holds `(mean, var)`; in eval mode they normalize the input,
    /// in train mode the batch statistics are used and recorded under `key`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: (&Tensor, &Tensor), key: &str) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("batch_norm expects N×C×…, got {s:?}")));
        }
        let c = s[1];
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::Shape(format!(
                    "batch_norm {what} {:?} for {c} channels",
                    self.shape(v)
                )));
            }
        }
        let inner: usize = s[2..].iter().product();
        let count = s[0] * inner;
        let xv = self.value(x).data();
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for n in 0..s[0] {
                for ch in 0..c {
                    let start = (n * c + ch) * inner;
                    mean[ch] += xv[start..start + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for n in 0..s[0] {
                for ch in 0..c {
                    let start = (n * c + ch) * inner;
                    var[ch] += xv[start..start + inner]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            (mean, var)
        } else {
            (running.0.data().to_vec(), running.1.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for n in 0..s[0] {
            for ch in 0..c {
                let start = (n * c + ch) * inner;
                for i in start..start + inner {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        if batch_stats {
            let correction = count as f64 / (count.saturating_sub(1).max(1)) as f64;
            self.bn_updates.push(BnUpdate {
                key: key.to_string(),
                mean,
                var: var.iter().map(|v| v * correction).collect(),
            });
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        if self.shape(gamma) != [k] || self.shape(beta) != [k] {
            return Err(Error::Shape(format!("layer_norm affine params do not match width {k}")));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / k;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * k..(r + 1) * k];
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64;
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(istd);
            for j in 0..k {
                let xh = (row[j] - mean) * istd;
                xhat[r * k + j] = xh;
                out[r * k + j] = gv[j] * xh + bv[j];
            }
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- pointwise ----

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * std_normal_cdf(v));
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `x ⊙ m` where `m` is `N×1×H×W`, broadcast over the channels of `x`.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m).to_vec();
        if xs.len() != 4 || ms != [xs[0], 1, xs[2], xs[3]] {
            return Err(Error::Shape(format!("mul_spatial: {xs:?} by {ms:?}")));
        }
        let plane = xs[2] * xs[3];
        let mv = self.value(m).data();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
            let n = i / xs[1];
            let mask = &mv[n * plane..(n + 1) * plane];
            chunk.iter_mut().zip(mask).for_each(|(v, f)| *v *= f);
        }
        Ok(self.push(value, Op::MulSpatial { x, m }, &[x, m]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// `x + b` where the shape of `b` equals a trailing suffix of `x`'s shape.
    pub fn add_suffix(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != bs[..] {
            return Err(Error::Shape(format!("add_suffix: {bs:?} is not a suffix of {xs:?}")));
        }
        let bv = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(bv.len()) {
            chunk.iter_mut().zip(&bv).for_each(|(v, a)| *v += a);
        }
        Ok(self.push(value, Op::AddSuffix { x, b }, &[x, b]))
    }

    // ---- layout ----

    /// Concatenate along axis 1.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.len() < 2 || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::Shape(format!("concat: {:?} vs {:?}", s, first)));
            }
            channels += s[1];
        }
        let inner: usize = first[2..].iter().product();
        let mut data = Vec::with_capacity(first[0] * channels * inner);
        for n in 0..first[0] {
            for &v in inputs {
                let t = self.value(v);
                let block = t.dim(1) * inner;
                data.extend_from_slice(&t.data()[n * block..(n + 1) * block]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permute {perm:?} on rank {rank}")));
        }
        let value = self.value(x).permuted(perm);
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    // ---- dense ----

    /// `x·wᵀ + b` over the last axis, `w` stored `out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k_in = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[1] != k_in {
            return Err(Error::Shape(format!("linear: input {xs:?} with weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} for {} outputs",
                    self.shape(b),
                    ws[0]
                )));
            }
        }
        let rows = self.value(x).numel() / k_in;
        let mut out = vec![0.0; rows * ws[0]];
        kernels::gemm(
            rows,
            k_in,
            ws[0],
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(ws[0]) {
                row.iter_mut().zip(bv).for_each(|(v, a)| *v += a);
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().expect("non-empty") = ws[0];
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Batched product of rank-3 tensors with optional per-operand transposes.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Error::Shape(format!("batch_matmul: {as_:?} by {bs:?}")));
        }
        let (m, k) = if trans_a { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (k2, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if k != k2 {
            return Err(Error::Shape(format!("batch_matmul inner dims {k} vs {k2}")));
        }
        let batch = as_[0];
        let mut out = vec![0.0; batch * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                trans_a,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_a, trans_b }, &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| Error::Shape("softmax on a scalar".into()))?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Mean sigmoid binary cross-entropy; `target` holds probabilities in [0, 1].
    pub fn bce_with_logits(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != target.len() {
            return Err(Error::Shape(format!(
                "bce: {} logits for {} targets",
                xv.len(),
                target.len()
            )));
        }
        let total: f64 = xv
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / xv.len() as f64);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                x,
                target: target.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean softmax cross-entropy over axis 1 of `N×C×H×W` logits with
    /// integer labels laid out `N×H×W`.
    pub fn softmax_cross_entropy(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || labels.len() != s[0] * s[2] * s[3] {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let (c, plane) = (s[1], s[2] * s[3]);
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Validation(format!("label {bad} out of range for {c} classes")));
        }
        let xv = self.value(x).data();
        let mut total = 0.0;
        for n in 0..s[0] {
            for p in 0..plane {
                let at = |ch: usize| xv[(n * c + ch) * plane + p];
                let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..c).map(|ch| (at(ch) - max).exp()).sum::<f64>().ln();
                total += lse - at(labels[n * plane + p]);
            }
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                x,
                labels: labels.to_vec(),
            },
            &[x],
        ))
    }

    // ---- backward ----

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(node, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geo } => {
                let xs = self.shape(*x).to_vec();
                let out_c = self.shape(*w)[0];
                let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
                let in_plane = xs[1] * xs[2] * xs[3];
                let out_plane = out_c * cols_n;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gv = gy.data();
                let need_x = self.requires_grad(*x);
                let need_w = self.requires_grad(*w);
                let mut gx = vec![0.0; if need_x { xv.len() } else { 0 }];
                let mut gw = vec![0.0; if need_w { wv.len() } else { 0 }];
                let mut cols = vec![0.0; if geo.is_pointwise() { 0 } else { rows * cols_n }];
                let mut gcols = vec![0.0; rows * cols_n];
                for n in 0..xs[0] {
                    let gout = &gv[n * out_plane..(n + 1) * out_plane];
                    if need_w {
                        let image = &xv[n * in_plane..(n + 1) * in_plane];
                        let col: &[f64] = if geo.is_pointwise() {
                            image
                        } else {
                            kernels::im2col(image, geo, &mut cols);
                            &cols
                        };
                        kernels::gemm(out_c, cols_n, rows, gout, false, col, true, &mut gw, true);
                    }
                    if need_x {
                        let dst = &mut gx[n * in_plane..(n + 1) * in_plane];
                        if geo.is_pointwise() {
                            kernels::gemm(rows, out_c, cols_n, wv, true, gout, false, dst, true);
                        } else {
                            kernels::gemm(rows, out_c, cols_n, wv, true, gout, false, &mut gcols, false);
                            kernels::col2im(&gcols, geo, dst);
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(&xs, gx)?);
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), gw)?);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; out_c];
                    for (i, plane) in gv.chunks(cols_n).enumerate() {
                        gb[i % out_c] += plane.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, Tensor::new(&[out_c], gb)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*x).to_vec();
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let count = (s[0] * inner) as f64;
                let gv = gy.data();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for n in 0..s[0] {
                    for ch in 0..c {
                        let start = (n * c + ch) * inner;
                        for i in start..start + inner {
                            sum_g[ch] += gv[i];
                            sum_gx[ch] += gv[i] * xhat[i];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; gv.len()];
                    for n in 0..s[0] {
                        for ch in 0..c {
                            let start = (n * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            for i in start..start + inner {
                                gx[i] = if *batch_stats {
                                    k * (gv[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                                } else {
                                    k * gv[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(&s, gx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], sum_gx)?);
                self.accumulate(grads, *beta, Tensor::new(&[c], sum_g)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let k = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                let gv = gy.data();
                let mut ggam = vec![0.0; k];
                let mut gbeta = vec![0.0; k];
                let mut gx = vec![0.0; gv.len()];
                for (r, &istd) in inv_std.iter().enumerate() {
                    let range = r * k..(r + 1) * k;
                    let (g_row, xh_row) = (&gv[range.clone()], &xhat[range.clone()]);
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..k {
                        ggam[j] += g_row[j] * xh_row[j];
                        gbeta[j] += g_row[j];
                        let d = g_row[j] * gam[j];
                        sum_d += d;
                        sum_dx += d * xh_row[j];
                    }
                    for j in 0..k {
                        let d = g_row[j] * gam[j];
                        gx[r * k + j] = istd * (d - sum_d / k as f64 - xh_row[j] * sum_dx / k as f64);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
                self.accumulate(grads, *gamma, Tensor::new(&[k], ggam)?);
                self.accumulate(grads, *beta, Tensor::new(&[k], gbeta)?);
            }
            Op::Relu(x) => {
                let data = gy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, &o)| if o > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(y.shape(), data)?);
            }
            Op::Sigmoid(x) => {
                let data = gy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, &o)| g * o * (1.0 - o))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(y.shape(), data)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let data = gy
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| g * (std_normal_cdf(v) + v * std_normal_pdf(v)))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(y.shape(), data)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = gy.data().iter().zip(bv.data()).map(|(g, v)| g * v).collect();
                let gb = gy.data().iter().zip(av.data()).map(|(g, v)| g * v).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape(), ga)?);
                self.accumulate(grads, *b, Tensor::new(y.shape(), gb)?);
            }
            Op::MulSpatial { x, m } => {
                let s = self.shape(*x).to_vec();
                let plane = s[2] * s[3];
                let xv = self.value(*x).data();
                let mv = self.value(*m).data();
                let gv = gy.data();
                let mut gx = vec![0.0; gv.len()];
                let mut gm = vec![0.0; mv.len()];
                for n in 0..s[0] {
                    for ch in 0..s[1] {
                        let start = (n * s[1] + ch) * plane;
                        for p in 0..plane {
                            gx[start + p] = gv[start + p] * mv[n * plane + p];
                            gm[n * plane + p] += gv[start + p] * xv[start + p];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&s, gx)?);
                self.accumulate(grads, *m, Tensor::new(self.shape(*m), gm)?);
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, gy.map(|g| g * factor));
            }
            Op::AddSuffix { x, b } => {
                let bn = self.value(*b).numel();
                let mut gb = vec![0.0; bn];
                for chunk in gy.data().chunks(bn) {
                    gb.iter_mut().zip(chunk).for_each(|(a, g)| *a += g);
                }
                self.accumulate(grads, *x, gy.clone());
                self.accumulate(grads, *b, Tensor::new(self.shape(*b), gb)?);
            }
            Op::Concat { inputs } => {
                let s = y.shape();
                let inner: usize = s[2..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    let mut g = Vec::with_capacity(s[0] * c * inner);
                    for n in 0..s[0] {
                        let start = (n * s[1] + offset) * inner;
                        g.extend_from_slice(&gy.data()[start..start + c * inner]);
                    }
                    self.accumulate(grads, v, Tensor::new(self.shape(v), g)?);
                    offset += c;
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (g, &src) in gy.data().iter().zip(argmax) {
                    gx[src] += g;
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (p, gplane) in gy.data().chunks((h / 2) * (w / 2)).enumerate() {
                    let base = p * h * w;
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let g = 0.25 * gplane[oy * (w / 2) + ox];
                            let i = base + 2 * oy * w + 2 * ox;
                            gx[i] += g;
                            gx[i + 1] += g;
                            gx[i + w] += g;
                            gx[i + w + 1] += g;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&s, gx)?);
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x).to_vec();
                let gx = kernels::upsample2_backward(gy.data(), s[0] * s[1], s[2], s[3]);
                self.accumulate(grads, *x, Tensor::new(&s, gx)?);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gy.clone().reshaped(self.shape(*x))?);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.accumulate(grads, *x, gy.permuted(&inverse));
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w).to_vec();
                let (out_f, in_f) = (ws[0], ws[1]);
                let rows = gy.numel() / out_f;
                let gv = gy.data();
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; rows * in_f];
                    kernels::gemm(
                        rows,
                        out_f,
                        in_f,
                        gv,
                        false,
                        self.value(*w).data(),
                        false,
                        &mut gx,
                        false,
                    );
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; out_f * in_f];
                    kernels::gemm(
                        out_f,
                        rows,
                        in_f,
                        gv,
                        true,
                        self.value(*x).data(),
                        false,
                        &mut gw,
                        false,
                    );
                    self.accumulate(grads, *w, Tensor::new(&ws, gw)?);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; out_f];
                    for row in gv.chunks(out_f) {
                        gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    self.accumulate(grads, *b, Tensor::new(&[out_f], gb)?);
                }
            }
            Op::BatchMatMul { a, b, trans_a, trans_b } => {
                let (ta, tb) = (*trans_a, *trans_b);
                let as_ = self.shape(*a).to_vec();
                let bs = self.shape(*b).to_vec();
                let (m, k) = if ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
                let n = if tb { bs[1] } else { bs[2] };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let gv = gy.data();
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for i in 0..as_[0] {
                    let a_i = &av[i * m * k..(i + 1) * m * k];
                    let b_i = &bv[i * k * n..(i + 1) * k * n];
                    let g_i = &gv[i * m * n..(i + 1) * m * n];
                    let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                    if ta {
                        // stored k×m: op(B)·dCᵀ
                        kernels::gemm(k, n, m, b_i, tb, g_i, true, ga_i, false);
                    } else {
                        // m×k: dC·op(B)ᵀ
                        kernels::gemm(m, n, k, g_i, false, b_i, !tb, ga_i, false);
                    }
                    let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                    if tb {
                        // stored n×k: dCᵀ·op(A)
                        kernels::gemm(n, m, k, g_i, true, a_i, ta, gb_i, false);
                    } else {
                        // k×n: op(A)ᵀ·dC
                        kernels::gemm(k, m, n, a_i, !ta, g_i, false, gb_i, false);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(&as_, ga)?);
                self.accumulate(grads, *b, Tensor::new(&bs, gb)?);
            }
            Op::Softmax(x) => {
                let k = *y.shape().last().expect("softmax rank");
                let mut gx = vec![0.0; y.numel()];
                for ((row_y, row_g), out) in y.data().chunks(k).zip(gy.data().chunks(k)).zip(gx.chunks_mut(k)) {
                    let dot: f64 = row_y.iter().zip(row_g).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        out[j] = row_y[j] * (row_g[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), gx)?);
            }
            Op::Sum(x) => {
                let g = gy.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let g = gy.data()[0] / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::BceWithLogits { x, target } => {
                let g = gy.data()[0] / target.len() as f64;
                let data = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| g * (sigmoid(z) - t))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), data)?);
            }
            Op::SoftmaxCrossEntropy { x, labels } => {
                let s = self.shape(*x).to_vec();
                let (c, plane) = (s[1], s[2] * s[3]);
                let g = gy.data()[0] / labels.len() as f64;
                let xv = self.value(*x).data();
                let mut gx = vec![0.0; xv.len()];
                for n in 0..s[0] {
                    for p in 0..plane {
                        let at = |ch: usize| (n * c + ch) * plane + p;
                        let max = (0..c).map(|ch| xv[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
                        let total: f64 = (0..c).map(|ch| (xv[at(ch)] - max).exp()).sum();
                        for ch in 0..c {
                            let prob = (xv[at(ch)] - max).exp() / total;
                            let onehot = if labels[n * plane + p] == ch { 1.0 } else { 0.0 };
                            gx[at(ch)] = g * (prob - onehot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&s, gx)?);
            }
        }
        Ok(())
    }

    /// Gradients of every registered parameter, keyed by name. Parameters
    /// unreachable from the root get a zero tensor.
    pub fn param_grads(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        let mut out: IndexMap<String, Tensor> = IndexMap::new();
        for (var, name) in &self.params {
            let g = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.shape(*var)));
            match out.get_mut(name) {
                Some(existing) => existing.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}
