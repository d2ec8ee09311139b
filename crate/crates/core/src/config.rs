use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Segmentation task, decided by the infection head width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// One sigmoid channel: infected vs. not.
    Binary,
    /// Softmax over background, GGO and consolidation.
    Multiclass,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::Multiclass => "multiclass",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Task::Binary),
            "multiclass" | "multi-class" => Ok(Task::Multiclass),
            other => Err(Error::Config(format!("unknown task `{other}` (binary|multiclass)"))),
        }
    }
}

/// The eight attention-gate / dual-decoder / transformer-encoder
/// combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Unet,
    AttUnet,
    DUnet,
    TrUnet,
    DTrUnet,
    DAttUnet,
    TrAttUnet,
    DTrAttUnet,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Unet,
        Variant::AttUnet,
        Variant::DUnet,
        Variant::TrUnet,
        Variant::DTrUnet,
        Variant::DAttUnet,
        Variant::TrAttUnet,
        Variant::DTrAttUnet,
    ];

    /// `(attention gates, dual decoder, transformer encoder)`
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Unet => (false, false, false),
            Variant::AttUnet => (true, false, false),
            Variant::DUnet => (false, true, false),
            Variant::TrUnet => (false, false, true),
            Variant::DTrUnet => (false, true, true),
            Variant::DAttUnet => (true, true, false),
            Variant::TrAttUnet => (true, false, true),
            Variant::DTrAttUnet => (true, true, true),
        }
    }

    pub fn from_flags(attention_gates: bool, dual_decoder: bool, transformer: bool) -> Self {
        *Self::ALL
            .iter()
            .find(|v| v.flags() == (attention_gates, dual_decoder, transformer))
            .expect("all eight combinations are listed")
    }

    /// Display name, e.g. `D-TrAttUnet`.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Unet => "Unet",
            Variant::AttUnet => "AttUnet",
            Variant::DUnet => "D-Unet",
            Variant::TrUnet => "TrUnet",
            Variant::DTrUnet => "D-TrUnet",
            Variant::DAttUnet => "D-AttUnet",
            Variant::TrAttUnet => "TrAttUnet",
            Variant::DTrAttUnet => "D-TrAttUnet",
        }
    }

    /// Lower-case command-line name, e.g. `d-trattunet`.
    pub fn cli_name(self) -> String {
        self.display_name().to_ascii_lowercase()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.cli_name() == wanted)
            .ok_or_else(|| {
                let names: Vec<String> = Self::ALL.iter().map(|v| v.cli_name()).collect();
                Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Every architecture hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Token width. 768 = 12 heads × 64.
    pub embed_dim: usize,
    /// Number of transformer layers.
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// 1-based transformer layers whose outputs are injected into encoder
    /// stages 2–5.
    pub tap_layers: [usize; 4],
    pub encoder_channels: [usize; 5],
    /// 1 for the binary task, 3 (background, GGO, consolidation) for multiclass.
    pub num_infection_classes: usize,
    pub use_attention_gates: bool,
    pub use_dual_decoder: bool,
    pub use_transformer_encoder: bool,
    /// Checkpoint whose `transformer.*` tensors initialize the transformer path.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained_transformer: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_dim: 3072,
            tap_layers: [4, 7, 10, 12],
            encoder_channels: [64, 128, 256, 512, 1024],
            num_infection_classes: 1,
            use_attention_gates: true,
            use_dual_decoder: true,
            use_transformer_encoder: true,
            pretrained_transformer: None,
        }
    }
}

impl ModelConfig {
    /// Reduced configuration for CPU-scale checks.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            embed_dim: 96,
            depth: 4,
            heads: 4,
            mlp_dim: 384,
            tap_layers: [1, 2, 3, 4],
            encoder_channels: [16, 32, 64, 128, 256],
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        let (ag, dd, tr) = variant.flags();
        self.use_attention_gates = ag;
        self.use_dual_decoder = dd;
        self.use_transformer_encoder = tr;
        self
    }

    pub fn with_task(mut self, task: Task) -> Self {
        self.num_infection_classes = match task {
            Task::Binary => 1,
            Task::Multiclass => 3,
        };
        self
    }

    pub fn variant(&self) -> Variant {
        Variant::from_flags(
            self.use_attention_gates,
            self.use_dual_decoder,
            self.use_transformer_encoder,
        )
    }

    pub fn task(&self) -> Task {
        if self.num_infection_classes == 1 {
            Task::Binary
        } else {
            Task::Multiclass
        }
    }

    /// Side of the square token grid.
    pub fn token_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.token_grid() * self.token_grid()
    }

    /// Widths of the four transformer injections: half of the encoder stage
    /// they feed (stages 2–5).
    pub fn injection_channels(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.encoder_channels[i + 1] / 2)
    }

    /// Output widths of decoder stages 4, 3, 2, 1 (mirror of the encoder).
    pub fn decoder_channels(&self) -> [usize; 4] {
        [
            self.encoder_channels[3],
            self.encoder_channels[2],
            self.encoder_channels[1],
            self.encoder_channels[0],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.input_channels == 0 {
            return fail("input_channels must be positive".into());
        }
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of 16 (four 2× poolings)",
                self.image_size
            ));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return fail(format!("encoder_channels {:?} must be positive", self.encoder_channels));
        }
        if !matches!(self.num_infection_classes, 1 | 3) {
            return fail(format!(
                "num_infection_classes {} must be 1 (binary) or 3 (background, GGO, consolidation)",
                self.num_infection_classes
            ));
        }
        if !self.use_transformer_encoder {
            return Ok(());
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        // z1 is upsampled ×8 to meet stage 2 at half resolution
        if self.token_grid() * 8 != self.image_size / 2 {
            return fail(format!(
                "patch_size {} gives a {}² token grid that does not align with the encoder stages (needs image_size/16)",
                self.patch_size,
                self.token_grid()
            ));
        }
        if self.encoder_channels[1..].iter().any(|&c| c < 2) {
            return fail("encoder stages 2-5 need at least 2 channels to host a transformer injection".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_dim == 0 || self.depth == 0 {
            return fail("depth and mlp_dim must be positive".into());
        }
        let taps = self.tap_layers;
        if taps[0] == 0 || taps.windows(2).any(|w| w[0] >= w[1]) || taps[3] > self.depth {
            return fail(format!(
                "tap_layers {:?} must be strictly increasing, 1-based and at most depth {}",
                taps, self.depth
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every field that shapes the
    /// parameter set.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.pretrained_transformer = None;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_desk_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        for v in Variant::ALL {
            ModelConfig::desk().with_variant(v).validate().unwrap();
        }
    }

    #[test]
    fn default_token_grid_is_14() {
        let c = ModelConfig::default();
        assert_eq!(c.token_grid(), 14);
        assert_eq!(c.num_tokens(), 196);
        assert_eq!(c.injection_channels(), [64, 128, 256, 512]);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            ModelConfig {
                embed_dim: 786,
                ..ModelConfig::default()
            },
            ModelConfig {
                tap_layers: [4, 4, 10, 12],
                ..ModelConfig::default()
            },
            ModelConfig {
                tap_layers: [4, 7, 10, 13],
                ..ModelConfig::default()
            },
            ModelConfig {
                patch_size: 8,
                ..ModelConfig::default()
            },
            ModelConfig {
                image_size: 200,
                ..ModelConfig::default()
            },
            ModelConfig {
                num_infection_classes: 2,
                ..ModelConfig::default()
            },
            ModelConfig {
                encoder_channels: [64, 0, 256, 512, 1024],
                ..ModelConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        // 786 is usable with 6 heads
        ModelConfig {
            embed_dim: 786,
            heads: 6,
            ..ModelConfig::default()
        }
        .validate()
        .unwrap();
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            let (a, d, t) = v.flags();
            assert_eq!(Variant::from_flags(a, d, t), v);
            assert_eq!(v.cli_name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(Variant::from_flags(true, true, true).display_name(), "D-TrAttUnet");
        assert_eq!(Variant::from_flags(false, false, false).display_name(), "Unet");
        assert!("transunet".parse::<Variant>().is_err());
    }

    #[test]
    fn hash_tracks_task() {
        let binary = ModelConfig::desk();
        let multi = ModelConfig::desk().with_task(Task::Multiclass);
        assert_ne!(binary.config_hash(), multi.config_hash());
        assert_eq!(binary.config_hash(), ModelConfig::desk().config_hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"image_size": 64, "colour": 1}"#);
        assert!(err.is_err());
    }
}
