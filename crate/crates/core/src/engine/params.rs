use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::graph::{BnUpdate, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Receives gradients and optimizer updates.
    Trainable,
    /// Normalization running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    HeNormal {
        fan_in: usize,
    },
    /// Normal with the given std, resampled outside ±2 std.
    TruncNormal {
        std: f64,
    },
    Zeros,
    Ones,
}

impl Init {
    fn sample<R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor {
        match *self {
            Init::HeNormal { fan_in } => Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng),
            Init::TruncNormal { std } => {
                let numel = shape.iter().product();
                let data = (0..numel)
                    .map(|_| loop {
                        let v: f64 = StandardNormal.sample(rng);
                        if v.abs() <= 2.0 {
                            break v * std;
                        }
                    })
                    .collect();
                Tensor::new(shape, data).expect("shape and data agree")
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
        }
    }
}

/// Declaration of one named tensor, before any allocation.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects [`ParamSpec`]s under dotted name paths.
#[derive(Clone, Debug, Default)]
pub struct Declarations {
    specs: Vec<ParamSpec>,
}

impl Declarations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trainable(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.push(name.into(), shape, ParamKind::Trainable, init);
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.push(name.into(), shape, ParamKind::Buffer, init);
    }

    fn push(&mut self, name: String, shape: &[usize], kind: ParamKind, init: Init) {
        debug_assert!(self.specs.iter().all(|s| s.name != name), "duplicate parameter {name}");
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            kind,
            init,
        });
    }

    /// Convolution weight `out×in×k×k`, He-normal.
    pub fn conv(&mut self, prefix: &str, in_c: usize, out_c: usize, kernel: usize, bias: bool) {
        self.trainable(
            format!("{prefix}.weight"),
            &[out_c, in_c, kernel, kernel],
            Init::HeNormal {
                fan_in: in_c * kernel * kernel,
            },
        );
        if bias {
            self.trainable(format!("{prefix}.bias"), &[out_c], Init::Zeros);
        }
    }

    pub fn batch_norm(&mut self, prefix: &str, channels: usize) {
        self.trainable(format!("{prefix}.weight"), &[channels], Init::Ones);
        self.trainable(format!("{prefix}.bias"), &[channels], Init::Zeros);
        self.buffer(format!("{prefix}.running_mean"), &[channels], Init::Zeros);
        self.buffer(format!("{prefix}.running_var"), &[channels], Init::Ones);
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.trainable(format!("{prefix}.weight"), &[width], Init::Ones);
        self.trainable(format!("{prefix}.bias"), &[width], Init::Zeros);
    }

    /// Dense layer stored `out×in`, truncated normal (std 0.02).
    pub fn linear(&mut self, prefix: &str, in_f: usize, out_f: usize) {
        self.trainable(
            format!("{prefix}.weight"),
            &[out_f, in_f],
            Init::TruncNormal { std: 0.02 },
        );
        self.trainable(format!("{prefix}.bias"), &[out_f], Init::Zeros);
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Arc<Tensor>,
    pub kind: ParamKind,
}

/// Named tensors of a model, in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn initialize<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let entries = specs
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    ParamEntry {
                        value: Arc::new(s.init.sample(&s.shape, rng)),
                        kind: s.kind,
                    },
                )
            })
            .collect();
        Self { entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                value: Arc::new(value),
                kind,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replace a tensor's contents, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: stored {:?}, given {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access; copies only if a graph still shares the tensor.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        Ok(Arc::make_mut(&mut entry.value))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Apply `f` to every tensor whose name starts with `prefix`.
    pub fn map_prefix(&mut self, prefix: &str, mut f: impl FnMut(&str, &mut Tensor)) {
        for (name, entry) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                f(name, Arc::make_mut(&mut entry.value));
            }
        }
    }

    /// Fold training-mode batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) -> Result<()> {
        for update in updates {
            let mean = self.get_mut(&format!("{}.running_mean", update.key))?;
            for (r, b) in mean.data_mut().iter_mut().zip(&update.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            let var = self.get_mut(&format!("{}.running_var", update.key))?;
            for (r, b) in var.data_mut().iter_mut().zip(&update.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        Ok(())
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_> {
        Scope {
            store: self,
            prefix: prefix.to_string(),
        }
    }
}

/// A view into a [`ParamStore`] rooted at a dotted prefix.
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&self, name: &str) -> Scope<'a> {
        Scope {
            store: self.store,
            prefix: self.path(name),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&'a Arc<Tensor>> {
        self.store.get(&self.path(name))
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(&self.path(name))
    }

    /// Put a named parameter on the tape.
    pub fn var(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let path = self.path(name);
        let value = self.store.get(&path)?.clone();
        Ok(g.param(&path, value))
    }

    pub fn opt_var(&self, g: &mut Graph, name: &str) -> Result<Option<Var>> {
        if self.has(name) {
            self.var(g, name).map(Some)
        } else {
            Ok(None)
        }
    }
}
