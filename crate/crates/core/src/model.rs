//! The dual-decoder transformer/CNN network and its ablation variants.
//!
//! Data flow for a `224²` input with the default widths:
//!
//! ```text
//! x ─┬─ patch embed ─ 12 transformer layers ─ taps after layers 4/7/10/12
//!    │                    z1 ─ 3× UpResBlock ─► 112²  ┐
//!    │                    z2 ─ 2× UpResBlock ─►  56²  │ injections
//!    │                    z3 ─ 1× UpResBlock ─►  28²  │
//!    │                    z4 ─    ResBlock   ─►  14²  ┘
//!    └─ x1 = Res(x); x(i+1) = Res([inj_i, maxpool(x_i)])   (encoder fusion)
//!
//! each decoder: d = Res([Gate(skip, up(prev)), up(prev)]) ×4 → 1×1 head
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, attention_gate, gate_channels, res_block, up_res_block};
use crate::config::{ModelConfig, Variant};
use crate::engine::{Declarations, Graph, Mode, ParamKind, ParamSpec, ParamStore, Scope, Tensor, Var};
use crate::error::{Error, Result};
use crate::training::checkpoint;

pub const INFECTION_DECODER: &str = "infection_decoder";
pub const LUNG_DECODER: &str = "lung_decoder";

/// Encoder feature maps x1…x5 at full, 1/2, 1/4, 1/8 and 1/16 resolution.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBundle {
    pub stages: [Var; 5],
}

/// Head outputs on the tape. `lung` is absent for single-decoder variants.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub infection: Var,
    pub lung: Option<Var>,
}

/// Evaluated logits at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DualOutput {
    pub infection_logits: Tensor,
    pub lung_logits: Option<Tensor>,
}

/// Transformer layers actually built: everything up to the last tap.
fn built_layers(config: &ModelConfig) -> usize {
    config.tap_layers[3]
}

/// Output widths of the upsampling ladder for each injection, in order.
/// Each step halves the width so the last one lands on the injection width.
fn ladder_widths(config: &ModelConfig) -> [Vec<usize>; 4] {
    let inj = config.injection_channels();
    std::array::from_fn(|i| {
        let steps = 3 - i;
        if steps == 0 {
            vec![inj[i]]
        } else {
            (0..steps).rev().map(|s| inj[i] << s).collect()
        }
    })
}

/// Parameter declarations for the configured variant.
pub fn declare(config: &ModelConfig) -> Result<Declarations> {
    config.validate()?;
    let mut d = Declarations::new();
    let c = config.encoder_channels;
    let k = config.embed_dim;

    if config.use_transformer_encoder {
        blocks::declare_patch_embed(
            &mut d,
            "transformer.embed",
            config.input_channels,
            config.patch_size,
            k,
            config.num_tokens(),
        );
        for layer in 0..built_layers(config) {
            blocks::declare_transformer_layer(&mut d, &format!("transformer.layers.{layer}"), k, config.mlp_dim);
        }
        for (i, widths) in ladder_widths(config).iter().enumerate() {
            let mut in_c = k;
            for (j, &w) in widths.iter().enumerate() {
                blocks::declare_res_block(&mut d, &format!("ladder.z{}.{}", i + 1, j), in_c, w);
                in_c = w;
            }
        }
    }

    blocks::declare_res_block(&mut d, "encoder.stage1", config.input_channels, c[0]);
    let inj = config.injection_channels();
    for i in 0..4 {
        let extra = if config.use_transformer_encoder { inj[i] } else { 0 };
        blocks::declare_res_block(&mut d, &format!("encoder.stage{}", i + 2), extra + c[i], c[i + 1]);
    }

    let mut decoders = vec![INFECTION_DECODER];
    if config.use_dual_decoder {
        decoders.push(LUNG_DECODER);
    }
    for name in decoders {
        declare_decoder(&mut d, name, config);
    }
    d.conv("infection_head", c[0], config.num_infection_classes, 1, true);
    if config.use_dual_decoder {
        d.conv("lung_head", c[0], 1, 1, true);
    }
    Ok(d)
}

fn declare_decoder(d: &mut Declarations, prefix: &str, config: &ModelConfig) {
    let c = config.encoder_channels;
    let out = config.decoder_channels();
    let mut up_c = c[4];
    for (i, level) in [4usize, 3, 2, 1].into_iter().enumerate() {
        let skip_c = c[level - 1];
        if config.use_attention_gates {
            blocks::declare_attention_gate(
                d,
                &format!("{prefix}.stage{level}.gate"),
                skip_c,
                up_c,
                gate_channels(skip_c),
            );
        }
        blocks::declare_res_block(d, &format!("{prefix}.stage{level}.res"), skip_c + up_c, out[i]);
        up_c = out[i];
    }
}

/// One pass of the transformer stack; returns the token sequences after the
/// four tap layers.
pub fn transformer_path(g: &mut Graph, p: &Scope<'_>, x: Var, config: &ModelConfig) -> Result<[Var; 4]> {
    let mut z = blocks::patch_embed(g, &p.sub("embed"), x)?;
    let mut taps = Vec::with_capacity(4);
    for layer in 1..=built_layers(config) {
        z = blocks::transformer_layer(g, &p.sub(&format!("layers.{}", layer - 1)), z, config.heads)?;
        if config.tap_layers.contains(&layer) {
            taps.push(z);
        }
    }
    Ok([taps[0], taps[1], taps[2], taps[3]])
}

/// Reshape the tapped tokens to square maps and bring them to encoder
/// resolutions: ×8, ×4, ×2 via UpResBlocks, and a plain ResBlock for z4.
pub fn transformer_ladder(g: &mut Graph, p: &Scope<'_>, taps: [Var; 4]) -> Result<[Var; 4]> {
    let mut out = Vec::with_capacity(4);
    for (i, z) in taps.into_iter().enumerate() {
        let mut y = blocks::reshape_tokens(g, z)?;
        let ladder = p.sub(&format!("z{}", i + 1));
        let steps = 3 - i;
        if steps == 0 {
            y = res_block(g, &ladder.sub("0"), y)?;
        }
        for j in 0..steps {
            y = up_res_block(g, &ladder.sub(&j.to_string()), y)?;
        }
        out.push(y);
    }
    Ok([out[0], out[1], out[2], out[3]])
}

/// CNN encoder; with `injections` each later stage consumes
/// `[injection, maxpool(previous)]`.
pub fn encoder_fusion(g: &mut Graph, p: &Scope<'_>, x: Var, injections: Option<[Var; 4]>) -> Result<EncoderBundle> {
    let mut stages = vec![res_block(g, &p.sub("stage1"), x)?];
    for i in 0..4 {
        let pooled = g.max_pool2(stages[i])?;
        let input = match injections {
            Some(inj) => {
                let (zs, ps) = (g.shape(inj[i]).to_vec(), g.shape(pooled).to_vec());
                if zs[0] != ps[0] || zs[2..] != ps[2..] {
                    return Err(Error::Validation(format!(
                        "encoder stage {}: injection {zs:?} does not align with pooled features {ps:?}",
                        i + 2
                    )));
                }
                g.concat(&[inj[i], pooled])?
            }
            None => pooled,
        };
        stages.push(res_block(g, &p.sub(&format!("stage{}", i + 2)), input)?);
    }
    Ok(EncoderBundle {
        stages: [stages[0], stages[1], stages[2], stages[3], stages[4]],
    })
}

/// One decoder: four upsample / gate / concat / ResBlock stages from x5
/// back to full resolution. Returns the last feature map (before the head).
pub fn decoder_forward(g: &mut Graph, p: &Scope<'_>, bundle: &EncoderBundle, use_attention_gates: bool) -> Result<Var> {
    let mut prev = bundle.stages[4];
    for level in [4usize, 3, 2, 1] {
        let stage = p.sub(&format!("stage{level}"));
        // the same upsampled map gates the skip and joins the concat
        let up = g.upsample2(prev)?;
        let skip = bundle.stages[level - 1];
        let skip = if use_attention_gates {
            attention_gate(g, &stage.sub("gate"), skip, up)?
        } else {
            skip
        };
        let joined = g.concat(&[skip, up])?;
        prev = res_block(g, &stage.sub("res"), joined)?;
    }
    Ok(prev)
}

fn head(g: &mut Graph, p: &Scope<'_>, x: Var) -> Result<Var> {
    let w = p.var(g, "weight")?;
    let b = p.var(g, "bias")?;
    g.conv2d(x, w, Some(b), 1, 0)
}

/// A configured network with its parameters.
#[derive(Clone, Debug)]
pub struct DTrAttUnet {
    config: ModelConfig,
    params: ParamStore,
}

/// Construct the variant selected by the config flags.
pub fn build_variant(config: &ModelConfig, seed: u64) -> Result<DTrAttUnet> {
    DTrAttUnet::new(config.clone(), seed)
}

impl DTrAttUnet {
    /// Freshly initialized model; loads pretrained transformer weights when
    /// the config names a checkpoint.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let decl = declare(&config)?;
        let params = ParamStore::initialize(decl.specs(), &mut ChaCha8Rng::seed_from_u64(seed));
        let mut model = Self { config, params };
        if let Some(path) = model.config.pretrained_transformer.clone() {
            model.load_pretrained_transformer(&path)?;
        }
        Ok(model)
    }

    /// Wrap existing parameters, checking names and shapes against the config.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let decl = declare(&config)?;
        if decl.specs().len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                decl.specs().len(),
                params.len()
            )));
        }
        for spec in decl.specs() {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{}: expected {:?}, found {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable()
    }

    /// Copy `transformer.*` tensors of matching shape from a checkpoint.
    pub fn load_pretrained_transformer(&mut self, path: &Path) -> Result<usize> {
        if !self.config.use_transformer_encoder {
            return Err(Error::Config(
                "pretrained transformer weights given, but the transformer encoder is off".into(),
            ));
        }
        let tensors = checkpoint::read_tensors(path)?;
        let mut loaded = 0;
        for (name, tensor) in tensors {
            if !name.starts_with("transformer.") {
                continue;
            }
            self.params.set(&name, tensor)?;
            loaded += 1;
        }
        if loaded == 0 {
            return Err(Error::Checkpoint(format!(
                "{} holds no transformer tensors",
                path.display()
            )));
        }
        Ok(loaded)
    }

    /// Build the network on `g` for an `N×C×S×S` input.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ForwardOutput> {
        let c = &self.config;
        let expected = [c.input_channels, c.image_size, c.image_size];
        if g.shape(x).len() != 4 || g.shape(x)[1..] != expected || g.shape(x)[0] == 0 {
            return Err(Error::Validation(format!(
                "model input {:?} does not match N×{}×{}×{}",
                g.shape(x),
                expected[0],
                expected[1],
                expected[2]
            )));
        }
        g.ensure_finite(x, "model input")?;
        let root = self.params.scope("");
        let injections = if c.use_transformer_encoder {
            let taps = transformer_path(g, &root.sub("transformer"), x, c)?;
            Some(transformer_ladder(g, &root.sub("ladder"), taps)?)
        } else {
            None
        };
        let bundle = encoder_fusion(g, &root.sub("encoder"), x, injections)?;
        let d_inf = decoder_forward(g, &root.sub(INFECTION_DECODER), &bundle, c.use_attention_gates)?;
        let infection = head(g, &root.sub("infection_head"), d_inf)?;
        let lung = if c.use_dual_decoder {
            let d_lung = decoder_forward(g, &root.sub(LUNG_DECODER), &bundle, c.use_attention_gates)?;
            Some(head(g, &root.sub("lung_head"), d_lung)?)
        } else {
            None
        };
        Ok(ForwardOutput { infection, lung })
    }

    /// Evaluation-mode forward pass on a batch.
    pub fn predict(&self, images: &Tensor) -> Result<DualOutput> {
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, x)?;
        Ok(DualOutput {
            infection_logits: g.value(out.infection).clone(),
            lung_logits: out.lung.map(|v| g.value(v).clone()),
        })
    }

    pub fn manifest(&self) -> LayerManifest {
        LayerManifest::from_specs(&self.config, declare(&self.config).expect("validated").specs())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub kind: ParamKind,
}

/// Every named tensor of a configuration, for diffing variants.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub variant: String,
    pub config_hash: String,
    pub total_trainable: usize,
    pub total_buffers: usize,
    pub entries: Vec<ManifestEntry>,
}

impl LayerManifest {
    /// Computed from declarations alone; nothing is allocated.
    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        Ok(Self::from_specs(config, declare(config)?.specs()))
    }

    fn from_specs(config: &ModelConfig, specs: &[ParamSpec]) -> Self {
        let entries: Vec<ManifestEntry> = specs
            .iter()
            .map(|s| ManifestEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
                count: s.numel(),
                kind: s.kind,
            })
            .collect();
        let total = |kind| entries.iter().filter(|e| e.kind == kind).map(|e| e.count).sum();
        Self {
            variant: config.variant().display_name().to_string(),
            config_hash: config.config_hash(),
            total_trainable: total(ParamKind::Trainable),
            total_buffers: total(ParamKind::Buffer),
            entries,
        }
    }

    pub fn to_text(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "# {} config {}", self.variant, self.config_hash);
        let _ = writeln!(out, "{:<width$}  {:<20}  {:>10}  kind", "name", "shape", "count");
        for e in &self.entries {
            let kind = match e.kind {
                ParamKind::Trainable => "param",
                ParamKind::Buffer => "buffer",
            };
            let _ = writeln!(
                out,
                "{:<width$}  {:<20}  {:>10}  {kind}",
                e.name,
                format!("{:?}", e.shape),
                e.count
            );
        }
        let _ = writeln!(
            out,
            "trainable {}  buffers {}",
            self.total_trainable, self.total_buffers
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_widths_halve_towards_injection() {
        let c = ModelConfig::default();
        assert_eq!(
            ladder_widths(&c),
            [vec![256, 128, 64], vec![256, 128], vec![256], vec![512]]
        );
    }

    #[test]
    fn default_manifest_without_allocation() {
        let m = LayerManifest::from_config(&ModelConfig::default()).unwrap();
        assert_eq!(m.variant, "D-TrAttUnet");
        let tr_layers = m
            .entries
            .iter()
            .filter(|e| e.name.ends_with("attn.query.weight"))
            .count();
        assert_eq!(tr_layers, 12);
        let pos = m
            .entries
            .iter()
            .find(|e| e.name == "transformer.embed.position")
            .unwrap();
        assert_eq!(pos.shape, vec![196, 768]);
        assert!(m.to_text().contains("infection_head.weight"));
    }

    #[test]
    fn decoder_stage_widths() {
        let m = LayerManifest::from_config(&ModelConfig::default()).unwrap();
        let shape = |n: &str| m.entries.iter().find(|e| e.name == n).unwrap().shape.clone();
        // stage 4 consumes [gated x4 (512), up(x5) (1024)]
        assert_eq!(
            shape("infection_decoder.stage4.res.conv1.weight"),
            vec![512, 1536, 3, 3]
        );
        assert_eq!(shape("infection_decoder.stage1.res.conv1.weight"), vec![64, 192, 3, 3]);
        assert_eq!(shape("infection_decoder.stage4.gate.w_x.weight"), vec![256, 512, 1, 1]);
        assert_eq!(shape("infection_decoder.stage4.gate.w_g.weight"), vec![256, 1024, 1, 1]);
        assert_eq!(shape("encoder.stage2.conv1.weight"), vec![128, 128, 3, 3]);
        assert_eq!(shape("lung_head.weight"), vec![1, 64, 1, 1]);
    }
}
