//! Reusable building blocks: residual convolution blocks, the attention
//! gate, patch embedding and the pre-norm transformer layer.
//!
//! Each block comes as a `declare_*` function registering its parameters
//! under a dotted prefix and a forward function reading them back through a
//! [`Scope`]. Feature maps are `N×C×H×W`, token sequences `N×tokens×dim`.

use crate::engine::{Declarations, Graph, Init, Scope, Var};
use crate::error::{Error, Result};

fn batch_norm(g: &mut Graph, p: &Scope<'_>, x: Var) -> Result<Var> {
    let gamma = p.var(g, "weight")?;
    let beta = p.var(g, "bias")?;
    let mean = p.tensor("running_mean")?;
    let var = p.tensor("running_var")?;
    g.batch_norm(x, gamma, beta, (mean, var), p.prefix())
}

/// conv → BN → ReLU
fn conv_bn_relu(g: &mut Graph, p: &Scope<'_>, conv: &str, bn: &str, x: Var, padding: usize) -> Result<Var> {
    let w = p.var(g, &format!("{conv}.weight"))?;
    let y = g.conv2d(x, w, None, 1, padding)?;
    let y = batch_norm(g, &p.sub(bn), y)?;
    Ok(g.relu(y))
}

fn dims4(g: &Graph, x: Var, what: &str) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [n, c, h, w] if n > 0 && c > 0 && h > 0 && w > 0 => Ok([n, c, h, w]),
        ref s => Err(Error::Shape(format!(
            "{what}: expected a non-empty N×C×H×W map, got {s:?}"
        ))),
    }
}

// ---- residual blocks ----

pub fn declare_res_block(d: &mut Declarations, prefix: &str, in_channels: usize, out_channels: usize) {
    d.conv(&format!("{prefix}.conv1"), in_channels, out_channels, 3, false);
    d.batch_norm(&format!("{prefix}.bn1"), out_channels);
    d.conv(&format!("{prefix}.conv2"), out_channels, out_channels, 3, false);
    d.batch_norm(&format!("{prefix}.bn2"), out_channels);
    d.conv(&format!("{prefix}.skip"), in_channels, out_channels, 1, false);
    d.batch_norm(&format!("{prefix}.skip_bn"), out_channels);
}

/// Two 3×3 conv-BN-ReLU stages plus a 1×1 conv-BN-ReLU shortcut, summed.
///
/// The output width is fixed by the parameters under `p`. Both branches end
/// in a ReLU, so the output is elementwise non-negative.
pub fn res_block(g: &mut Graph, p: &Scope<'_>, x: Var) -> Result<Var> {
    dims4(g, x, "res_block")?;
    g.ensure_finite(x, "res_block")?;
    g.note_block("res_block");
    let main = conv_bn_relu(g, p, "conv1", "bn1", x, 1)?;
    let main = conv_bn_relu(g, p, "conv2", "bn2", main, 1)?;
    let shortcut = conv_bn_relu(g, p, "skip", "skip_bn", x, 0)?;
    g.add(main, shortcut)
}

/// Bilinear ×2 upsampling followed by [`res_block`]. Shares the residual
/// block's parameter layout.
pub fn up_res_block(g: &mut Graph, p: &Scope<'_>, x: Var) -> Result<Var> {
    dims4(g, x, "up_res_block")?;
    g.ensure_finite(x, "up_res_block")?;
    let up = g.upsample2(x)?;
    res_block(g, p, up)
}

// ---- attention gate ----

/// Intermediate width of an attention gate on a skip connection with
/// `skip_channels` channels.
pub fn gate_channels(skip_channels: usize) -> usize {
    (skip_channels / 2).max(1)
}

pub fn declare_attention_gate(
    d: &mut Declarations,
    prefix: &str,
    skip_channels: usize,
    gate_channels: usize,
    inter: usize,
) {
    d.conv(&format!("{prefix}.w_x"), skip_channels, inter, 1, false);
    d.batch_norm(&format!("{prefix}.bn_x"), inter);
    d.conv(&format!("{prefix}.w_g"), gate_channels, inter, 1, false);
    d.batch_norm(&format!("{prefix}.bn_g"), inter);
    d.conv(&format!("{prefix}.psi"), inter, 1, 1, false);
    d.batch_norm(&format!("{prefix}.psi_bn"), 1);
}

/// Attention gate returning the gated skip map and the `N×1×H×W`
/// coefficient map.
pub fn attention_gate_with_map(g: &mut Graph, p: &Scope<'_>, x: Var, gate: Var) -> Result<(Var, Var)> {
    let xs = dims4(g, x, "attention_gate skip")?;
    let gs = dims4(g, gate, "attention_gate gating signal")?;
    if xs[0] != gs[0] || xs[2..] != gs[2..] {
        return Err(Error::Validation(format!(
            "attention_gate: skip {xs:?} and gating signal {gs:?} differ in batch or spatial size"
        )));
    }
    g.ensure_finite(x, "attention_gate")?;
    g.ensure_finite(gate, "attention_gate")?;
    g.note_block("attention_gate");
    let wx = p.var(g, "w_x.weight")?;
    let theta = g.conv2d(x, wx, None, 1, 0)?;
    let theta = batch_norm(g, &p.sub("bn_x"), theta)?;
    let wg = p.var(g, "w_g.weight")?;
    let phi = g.conv2d(gate, wg, None, 1, 0)?;
    let phi = batch_norm(g, &p.sub("bn_g"), phi)?;
    let joint = g.add(theta, phi)?;
    let joint = g.relu(joint);
    let wpsi = p.var(g, "psi.weight")?;
    let psi = g.conv2d(joint, wpsi, None, 1, 0)?;
    let psi = batch_norm(g, &p.sub("psi_bn"), psi)?;
    let coeff = g.sigmoid(psi);
    let out = g.mul_spatial(x, coeff)?;
    Ok((out, coeff))
}

/// Reweights every channel of the skip map `x` by a per-pixel coefficient in
/// (0, 1) computed from `x` and the gating signal `gate` (same spatial size).
pub fn attention_gate(g: &mut Graph, p: &Scope<'_>, x: Var, gate: Var) -> Result<Var> {
    attention_gate_with_map(g, p, x, gate).map(|(out, _)| out)
}

// ---- transformer path ----

pub fn declare_patch_embed(
    d: &mut Declarations,
    prefix: &str,
    in_channels: usize,
    patch: usize,
    dim: usize,
    tokens: usize,
) {
    d.conv(&format!("{prefix}.proj"), in_channels, dim, patch, true);
    d.trainable(
        format!("{prefix}.position"),
        &[tokens, dim],
        Init::TruncNormal { std: 0.02 },
    );
}

/// Non-overlapping patch projection to `N×tokens×dim`, without position
/// embeddings. The patch size is the projection kernel size.
pub fn patch_project(g: &mut Graph, p: &Scope<'_>, x: Var) -> Result<Var> {
    let [n, _, h, w] = dims4(g, x, "patch_embed")?;
    let weight = p.tensor("proj.weight")?;
    let (dim, patch) = (weight.dim(0), weight.dim(2));
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Validation(format!(
            "patch_embed: {h}×{w} input is not divisible by patch size {patch}"
        )));
    }
    let wv = p.var(g, "proj.weight")?;
    let bv = p.var(g, "proj.bias")?;
    let y = g.conv2d(x, wv, Some(bv), patch, 0)?;
    let tokens = (h / patch) * (w / patch);
    let y = g.reshape(y, &[n, dim, tokens])?;
    g.permute(y, &[0, 2, 1])
}

/// Patch projection plus learned 1-D position embeddings.
pub fn patch_embed(g: &mut Graph, p: &Scope<'_>, x: Var) -> Result<Var> {
    let z = patch_project(g, p, x)?;
    let pos_shape = p.tensor("position")?.shape().to_vec();
    if pos_shape[..] != g.shape(z)[1..] {
        return Err(Error::Validation(format!(
            "patch_embed: {:?} tokens do not match position table {pos_shape:?}",
            &g.shape(z)[1..]
        )));
    }
    let pos = p.var(g, "position")?;
    g.add_suffix(z, pos)
}

pub fn declare_transformer_layer(d: &mut Declarations, prefix: &str, dim: usize, mlp_dim: usize) {
    d.layer_norm(&format!("{prefix}.ln1"), dim);
    for name in ["query", "key", "value", "out"] {
        d.linear(&format!("{prefix}.attn.{name}"), dim, dim);
    }
    d.layer_norm(&format!("{prefix}.ln2"), dim);
    d.linear(&format!("{prefix}.mlp.fc1"), dim, mlp_dim);
    d.linear(&format!("{prefix}.mlp.fc2"), mlp_dim, dim);
}

fn head_width(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "embedding width {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(dim / heads)
}

fn linear(g: &mut Graph, p: &Scope<'_>, x: Var) -> Result<Var> {
    let w = p.var(g, "weight")?;
    let b = p.opt_var(g, "bias")?;
    g.linear(x, w, b)
}

/// Multi-head self-attention returning the mixed output and the attention
/// probabilities as `(N·heads)×tokens×tokens`.
pub fn msa_with_weights(g: &mut Graph, p: &Scope<'_>, s: Var, heads: usize) -> Result<(Var, Var)> {
    let (n, tokens, dim) = match *g.shape(s) {
        [n, t, k] => (n, t, k),
        ref other => return Err(Error::Shape(format!("msa expects N×tokens×dim, got {other:?}"))),
    };
    let width = head_width(dim, heads)?;
    let split = |g: &mut Graph, v: Var| -> Result<Var> {
        let v = g.reshape(v, &[n, tokens, heads, width])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        g.reshape(v, &[n * heads, tokens, width])
    };
    let q = linear(g, &p.sub("query"), s)?;
    let q = split(g, q)?;
    let k = linear(g, &p.sub("key"), s)?;
    let k = split(g, k)?;
    let v = linear(g, &p.sub("value"), s)?;
    let v = split(g, v)?;
    let scores = g.batch_matmul(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (width as f64).sqrt());
    let attn = g.softmax(scores)?;
    let ctx = g.batch_matmul(attn, v, false, false)?;
    let ctx = g.reshape(ctx, &[n, heads, tokens, width])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[n, tokens, dim])?;
    let out = linear(g, &p.sub("out"), ctx)?;
    Ok((out, attn))
}

/// `heads` scaled dot-product attention heads of width `dim/heads`,
/// concatenated and mixed by the output projection. Expects already
/// layer-normalized tokens.
pub fn msa(g: &mut Graph, p: &Scope<'_>, s: Var, heads: usize) -> Result<Var> {
    msa_with_weights(g, p, s, heads).map(|(out, _)| out)
}

/// Pre-norm transformer layer:
/// `z' = MSA(LN(z)) + z`, then `MLP(LN(z')) + z'` with a GELU MLP.
pub fn transformer_layer(g: &mut Graph, p: &Scope<'_>, z: Var, heads: usize) -> Result<Var> {
    let dim = *g.shape(z).last().unwrap_or(&0);
    head_width(dim, heads)?;
    g.note_block("transformer_layer");
    let ln1 = p.sub("ln1");
    let (gamma, beta) = (ln1.var(g, "weight")?, ln1.var(g, "bias")?);
    let s = g.layer_norm(z, gamma, beta)?;
    let attended = msa(g, &p.sub("attn"), s, heads)?;
    let z_mid = g.add(attended, z)?;
    let ln2 = p.sub("ln2");
    let (gamma, beta) = (ln2.var(g, "weight")?, ln2.var(g, "bias")?);
    let s2 = g.layer_norm(z_mid, gamma, beta)?;
    let hidden = linear(g, &p.sub("mlp.fc1"), s2)?;
    let hidden = g.gelu(hidden);
    let mlp = linear(g, &p.sub("mlp.fc2"), hidden)?;
    g.add(mlp, z_mid)
}

/// `N×tokens×dim` → `N×dim×√tokens×√tokens`.
pub fn reshape_tokens(g: &mut Graph, z: Var) -> Result<Var> {
    let (n, tokens, dim) = match *g.shape(z) {
        [n, t, k] => (n, t, k),
        ref other => {
            return Err(Error::Shape(format!(
                "reshape_tokens expects N×tokens×dim, got {other:?}"
            )))
        }
    };
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens {
        return Err(Error::Validation(format!(
            "reshape_tokens: {tokens} tokens do not form a square grid"
        )));
    }
    let t = g.permute(z, &[0, 2, 1])?;
    g.reshape(t, &[n, dim, side, side])
}

/// Inverse of [`reshape_tokens`].
pub fn flatten_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let [n, c, h, w] = dims4(g, x, "flatten_tokens")?;
    let t = g.reshape(x, &[n, c, h * w])?;
    g.permute(t, &[0, 2, 1])
}
