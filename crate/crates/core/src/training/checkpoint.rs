//! Single-file checkpoint container.
//!
//! Layout: `DTAUCKPT`, format version (u32 LE), manifest length (u64 LE),
//! the JSON manifest, then every tensor as raw f64 LE in manifest order:
//! parameters first, followed by the optimizer's first and second moments.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::config::{ModelConfig, Task};
use crate::engine::{Adam, AdamConfig, ParamKind, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::DTrAttUnet;

const MAGIC: &[u8; 8] = b"DTAUCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub config: AdamConfig,
    pub step: u64,
    /// Tensors with stored moments, in blob order.
    pub moments: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub variant: String,
    pub task: Task,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub loss_weights: [f64; 2],
    pub model: ModelConfig,
    pub train_state: Option<TrainState>,
    pub tensors: Vec<TensorRecord>,
    pub optimizer: Option<OptimizerRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: DTrAttUnet,
    pub optimizer: Option<Adam>,
}

/// Metadata written alongside the parameters.
#[derive(Clone, Debug, Default)]
pub struct SaveMeta<'a> {
    pub state: Option<&'a TrainState>,
    pub metrics: BTreeMap<String, f64>,
    pub loss_weights: Option<[f64; 2]>,
    pub optimizer: Option<&'a Adam>,
}

fn write_blob(out: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Write `model` (and optionally training and optimizer state) to `path`.
pub fn save_checkpoint(path: &Path, model: &DTrAttUnet, meta: SaveMeta<'_>) -> Result<()> {
    let config = model.config();
    let tensors: Vec<TensorRecord> = model
        .params()
        .iter()
        .map(|(name, e)| TensorRecord {
            name: name.to_string(),
            shape: e.value.shape().to_vec(),
            kind: e.kind,
        })
        .collect();
    let optimizer = meta.optimizer.map(|adam| OptimizerRecord {
        config: adam.config,
        step: adam.steps(),
        moments: adam
            .moments()
            .map(|(name, m, _)| TensorRecord {
                name: name.to_string(),
                shape: m.shape().to_vec(),
                kind: ParamKind::Trainable,
            })
            .collect(),
    });
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash: config.config_hash(),
        variant: config.variant().display_name().to_string(),
        task: config.task(),
        epoch: meta.state.map_or(0, |s| s.epoch),
        metrics: meta.metrics,
        loss_weights: meta.loss_weights.unwrap_or([0.7, 0.3]),
        model: config.clone(),
        train_state: meta.state.cloned(),
        tensors,
        optimizer,
    };
    let json = serde_json::to_vec(&manifest)?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write to a sibling and rename so a crash never leaves a torn file
    let tmp = path.with_extension("ckpt.tmp");
    let io = |e| Error::io(&tmp, e);
    let file = fs::File::create(&tmp).map_err(io)?;
    let mut out = BufWriter::new(file);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    for (_, e) in model.params().iter() {
        write_blob(&mut out, &e.value).map_err(io)?;
    }
    if let Some(adam) = meta.optimizer {
        for (_, m, v) in adam.moments() {
            write_blob(&mut out, m).map_err(io)?;
            write_blob(&mut out, v).map_err(io)?;
        }
    }
    out.into_inner()
        .map_err(|e| io(e.into_error()))?
        .sync_all()
        .map_err(io)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Raw {
    manifest: CheckpointManifest,
    blobs: Vec<f64>,
}

fn read_raw(path: &Path) -> Result<Raw> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(body)?;
    let rest = &bytes[20 + len..];
    if rest.len() % 8 != 0 {
        return Err(bad("tensor data is not a whole number of f64 values"));
    }
    let blobs = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Raw { manifest, blobs })
}

fn take(blobs: &[f64], offset: &mut usize, record: &TensorRecord, path: &Path) -> Result<Tensor> {
    let n: usize = record.shape.iter().product();
    let data = blobs
        .get(*offset..*offset + n)
        .ok_or_else(|| Error::Checkpoint(format!("{}: data ends inside tensor `{}`", path.display(), record.name)))?;
    *offset += n;
    Tensor::new(&record.shape, data.to_vec())
}

/// Parameter tensors of a checkpoint, without building a model.
pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let raw = read_raw(path)?;
    let mut offset = 0;
    raw.manifest
        .tensors
        .iter()
        .map(|r| Ok((r.name.clone(), take(&raw.blobs, &mut offset, r, path)?)))
        .collect()
}

/// Load a checkpoint. With `expected` set, a config-hash mismatch is refused
/// unless `allow_mismatch` is true; the model is always rebuilt from the
/// checkpoint's own config.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>, allow_mismatch: bool) -> Result<Checkpoint> {
    let raw = read_raw(path)?;
    let manifest = raw.manifest;
    let stored = manifest.model.config_hash();
    if stored != manifest.config_hash {
        return Err(Error::Checkpoint(format!(
            "{}: manifest config does not match its recorded hash",
            path.display()
        )));
    }
    if let Some(expected) = expected {
        let want = expected.config_hash();
        if want != stored && !allow_mismatch {
            return Err(Error::Checkpoint(format!(
                "{}: config hash mismatch: checkpoint {} ({}, {}) vs requested {} ({}, {}); \
                 pass the override flag to load anyway",
                path.display(),
                &stored[..12],
                manifest.variant,
                manifest.task,
                &want[..12],
                expected.variant().display_name(),
                expected.task()
            )));
        }
    }
    let mut offset = 0;
    let mut params = ParamStore::default();
    for r in &manifest.tensors {
        params.insert(r.name.clone(), take(&raw.blobs, &mut offset, r, path)?, r.kind);
    }
    let optimizer = match &manifest.optimizer {
        Some(o) => {
            let mut moments = Vec::with_capacity(o.moments.len());
            for r in &o.moments {
                let m = take(&raw.blobs, &mut offset, r, path)?;
                let v = take(&raw.blobs, &mut offset, r, path)?;
                moments.push((r.name.clone(), m, v));
            }
            Some(Adam::restore(o.config, o.step, moments))
        }
        None => None,
    };
    if offset != raw.blobs.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing values",
            path.display(),
            raw.blobs.len() - offset
        )));
    }
    let mut config = manifest.model.clone();
    config.pretrained_transformer = None;
    let model = DTrAttUnet::from_parts(config, params)?;
    Ok(Checkpoint {
        manifest,
        model,
        optimizer,
    })
}
