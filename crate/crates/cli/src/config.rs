//! Run configuration: a TOML file with flat dotted keys, environment and
//! command-line overrides, and resolution into validated library configs.

use std::path::{Path, PathBuf};

use dtrattunet::data::{Layout, PreprocessConfig, SplitSpec};
use dtrattunet::training::TrainConfig;
use dtrattunet::{ModelConfig, Task, Variant};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::Failure;

pub const OUTPUT_ROOT_ENV: &str = "DTRATTUNET_OUTPUT_ROOT";

/// Keys that are derived from `task`, `variant` or `model.*` and so cannot
/// be set directly.
const DERIVED: [(&str, &str); 7] = [
    ("model.num_infection_classes", "task"),
    ("model.use_attention_gates", "variant"),
    ("model.use_dual_decoder", "variant"),
    ("model.use_transformer_encoder", "variant"),
    ("train.task", "task"),
    ("preprocess.image_size", "model.image_size"),
    ("preprocess.input_channels", "model.input_channels"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    /// Held-out corpus; without it the manifest subsets or `split.*` decide.
    pub test_root: Option<PathBuf>,
    pub layout: Layout,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            test_root: None,
            layout: Layout::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub variant: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Binary,
            variant: Variant::DTrAttUnet.cli_name(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
            data: DataConfig::default(),
            split: SplitSpec::default(),
            output: OutputConfig::default(),
        }
    }
}

/// A resolved configuration plus where each setting came from.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub file: Option<PathBuf>,
    pub env_output_root: Option<String>,
    pub overrides: Vec<String>,
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn insert(table: &mut Table, key: &str, value: Value) -> Result<(), Failure> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Failure::config(format!("empty key in `{key}`")))?;
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Failure::config(format!("`{key}`: `{part}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn contains(table: &Table, key: &str) -> bool {
    let mut node = table;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        match node.get(part) {
            Some(_) if parts.peek().is_none() => return true,
            Some(Value::Table(t)) => node = t,
            _ => return false,
        }
    }
    false
}

/// Parse `key=value` where the value is any TOML literal; bare words become
/// strings.
pub fn parse_override(raw: &str) -> Result<(String, Value), Failure> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("override `{raw}` is not of the form key=value")))?;
    Ok((key.trim().to_string(), parse_value(value.trim())))
}

impl Loaded {
    /// Read `file` (if any), apply the output-root environment variable and
    /// then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let mut table = match file {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
                toml::from_str::<Table>(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        let env_output_root = std::env::var(OUTPUT_ROOT_ENV).ok().filter(|v| !v.is_empty());
        if let Some(root) = &env_output_root {
            insert(&mut table, "output.dir", Value::String(root.clone()))?;
        }
        for raw in overrides {
            let (key, value) = parse_override(raw)?;
            insert(&mut table, &key, value)?;
        }
        for (key, source) in DERIVED {
            if contains(&table, key) {
                return Err(Failure::config(format!("`{key}` is derived; set `{source}` instead")));
            }
        }
        let config: RunConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Failure::config(format!("`{path}`: {}", e.into_inner()))
        })?;
        let config = config.resolve()?;
        Ok(Self {
            config,
            file: file.map(Path::to_path_buf),
            env_output_root,
            overrides: overrides.to_vec(),
        })
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "config_file": self.file,
            "env_output_root": self.env_output_root,
            "overrides": self.overrides,
            "config_hash": self.config.model.config_hash(),
            "variant": self.config.model.variant().display_name(),
            "resolved": self.config,
        })
    }
}

impl RunConfig {
    /// Propagate `task`, `variant` and the model geometry into the derived
    /// settings and validate everything.
    pub fn resolve(mut self) -> Result<Self, Failure> {
        let variant: Variant = self
            .variant
            .parse()
            .map_err(|e| Failure::config(format!("`variant`: {e}")))?;
        self.variant = variant.cli_name();
        self.model = self.model.with_task(self.task).with_variant(variant);
        self.train.task = self.task;
        self.preprocess.image_size = self.model.image_size;
        self.preprocess.input_channels = self.model.input_channels;
        self.model
            .validate()
            .map_err(|e| Failure::config(format!("`model`: {e}")))?;
        self.train
            .validate()
            .map_err(|e| Failure::config(format!("`train`: {e}")))?;
        self.preprocess
            .validate()
            .map_err(|e| Failure::config(format!("`preprocess`: {e}")))?;
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Failure::config(format!(
                "`split.train_fraction`: {} must lie strictly between 0 and 1",
                self.split.train_fraction
            )));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_values_are_typed() {
        assert_eq!(parse_override("train.epochs=3").unwrap().1, Value::Integer(3));
        assert_eq!(
            parse_override("model.tap_layers=[1,2,3,4]")
                .unwrap()
                .1
                .as_array()
                .unwrap()
                .len(),
            4
        );
        assert_eq!(parse_override("variant=unet").unwrap().1, Value::String("unet".into()));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn dotted_insert_builds_tables() {
        let mut t = Table::new();
        insert(&mut t, "data.layout.images", Value::String("img".into())).unwrap();
        assert!(contains(&t, "data.layout.images"));
        assert!(!contains(&t, "data.layout.lung_masks"));
        assert!(insert(&mut t, "data.layout.images.x", Value::Integer(1)).is_err());
    }

    #[test]
    fn resolution_propagates_task_and_variant() {
        let mut c = RunConfig {
            task: Task::Multiclass,
            variant: "unet".into(),
            ..RunConfig::default()
        };
        c.model.image_size = 64;
        let c = c.resolve().unwrap();
        assert_eq!(c.model.num_infection_classes, 3);
        assert_eq!(c.model.variant(), Variant::Unet);
        assert_eq!(c.train.task, Task::Multiclass);
        assert_eq!(c.preprocess.image_size, 64);
    }
}
