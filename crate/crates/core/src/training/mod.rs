//! Optimization protocol: joint dual-task loss, step schedule, the epoch
//! loop, repeated runs and checkpoints.

pub mod checkpoint;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::engine::{AdamConfig, Graph, Var};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};
pub use trainer::{
    run_protocol, train, EpochRecord, ProtocolOutcome, ProtocolRun, RunOutcome, RunSpec, StepOutcome, TrainData,
    Trainer,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// 0-based epoch indices at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// `[infection, lung]`.
    pub loss_weights: [f64; 2],
    pub task: Task,
    pub runs: usize,
    /// One seed per run; empty means `0..runs`.
    pub seeds: Vec<u64>,
    /// Share of the training split held out for checkpoint selection.
    pub validation_fraction: f64,
    pub augment: bool,
    pub bn_momentum: f64,
    /// Stop after this many optimizer steps (for short runs and smoke tests).
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            base_lr: 0.1,
            decay_epochs: vec![30, 50],
            decay_factor: 0.1,
            batch_size: 6,
            adam: AdamConfig::default(),
            loss_weights: [0.7, 0.3],
            task: Task::Binary,
            runs: 5,
            seeds: Vec::new(),
            validation_fraction: 0.1,
            augment: true,
            bn_momentum: 0.1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 || self.runs == 0 {
            return fail("epochs, batch_size and runs must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr {} must be positive", self.base_lr));
        }
        let [a, b] = self.loss_weights;
        if a < 0.0 || b < 0.0 || (a + b - 1.0).abs() > 1e-12 {
            return fail(format!(
                "loss_weights {:?} must be non-negative and sum to 1",
                self.loss_weights
            ));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!(
                "decay_epochs {:?} must be strictly increasing",
                self.decay_epochs
            ));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return fail(format!(
                "decay_epochs {:?} must be below epochs {}",
                self.decay_epochs, self.epochs
            ));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.runs {
            return fail(format!("{} seeds given for {} runs", self.seeds.len(), self.runs));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail(format!(
                "validation_fraction {} must lie in [0, 1)",
                self.validation_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail(format!("bn_momentum {} must lie in [0, 1]", self.bn_momentum));
        }
        Ok(())
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.runs as u64).collect()
        } else {
            self.seeds.clone()
        }
    }
}

/// Piecewise-constant learning rate for a 0-based epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::Validation(format!("epoch {epoch} outside 0..{}", config.epochs)));
    }
    let decays = config.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    Ok(config.base_lr * config.decay_factor.powi(decays as i32))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub path: String,
    pub epoch: usize,
    pub val_f1: Option<f64>,
}

/// Progress of one run; persisted inside every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub global_step: u64,
    pub best_val_f1: Option<f64>,
    pub seed: u64,
    /// Epoch index the next epoch's shuffle and augmentation streams use.
    pub rng_stream: u64,
    pub checkpoints: Vec<CheckpointRecord>,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            epoch: 0,
            global_step: 0,
            best_val_f1: None,
            seed,
            rng_stream: 0,
            checkpoints: Vec::new(),
            history: Vec::new(),
        }
    }
}

/// Loss nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub infection: Var,
    pub lung: Option<Var>,
}

/// `w_inf·L_inf + w_lung·L_lung`, or `L_inf` alone without a lung branch.
pub fn combine(infection: f64, lung: Option<f64>, weights: [f64; 2]) -> f64 {
    match lung {
        Some(l) => weights[0] * infection + weights[1] * l,
        None => infection,
    }
}

/// Pixel-mean BCE (binary) or softmax CE (multiclass) on the infection head
/// plus BCE on the lung head, weighted by `weights`.
///
/// Targets are label maps in `N·H·W` order.
pub fn joint_loss(
    g: &mut Graph,
    infection_logits: Var,
    lung_logits: Option<Var>,
    infection_target: &[u8],
    lung_target: Option<&[u8]>,
    task: Task,
    weights: [f64; 2],
) -> Result<JointLoss> {
    let shape = g.shape(infection_logits).to_vec();
    let channels = match task {
        Task::Binary => 1,
        Task::Multiclass => 3,
    };
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::Validation(format!(
            "{task} task expects {channels} infection channels, logits are {shape:?}"
        )));
    }
    let pixels = shape[0] * shape[2] * shape[3];
    if infection_target.len() != pixels {
        return Err(Error::Validation(format!(
            "infection target has {} labels for {pixels} pixels",
            infection_target.len()
        )));
    }
    let infection = match task {
        Task::Binary => {
            let t: Vec<f64> = infection_target.iter().map(|&v| f64::from(v.min(1))).collect();
            g.bce_with_logits(infection_logits, &t)?
        }
        Task::Multiclass => {
            if let Some(bad) = infection_target.iter().find(|&&v| v > 2) {
                return Err(Error::Validation(format!("multiclass label {bad} outside {{0,1,2}}")));
            }
            let t: Vec<usize> = infection_target.iter().map(|&v| v as usize).collect();
            g.softmax_cross_entropy(infection_logits, &t)?
        }
    };
    let Some(lung_logits) = lung_logits else {
        return Ok(JointLoss {
            total: infection,
            infection,
            lung: None,
        });
    };
    let lung_shape = g.shape(lung_logits).to_vec();
    if lung_shape != [shape[0], 1, shape[2], shape[3]] {
        return Err(Error::Validation(format!(
            "lung logits {lung_shape:?} do not match infection logits {shape:?}"
        )));
    }
    let lung_target = lung_target
        .ok_or_else(|| Error::Validation("dual-decoder model needs lung masks for every training sample".into()))?;
    if lung_target.len() != pixels {
        return Err(Error::Validation(format!(
            "lung target has {} labels for {pixels} pixels",
            lung_target.len()
        )));
    }
    let t: Vec<f64> = lung_target.iter().map(|&v| f64::from(v.min(1))).collect();
    let lung = g.bce_with_logits(lung_logits, &t)?;
    let a = g.scale(infection, weights[0]);
    let b = g.scale(lung, weights[1]);
    let total = g.add(a, b)?;
    Ok(JointLoss {
        total,
        infection,
        lung: Some(lung),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c).unwrap(), 0.1);
        assert_eq!(lr_at(29, &c).unwrap(), 0.1);
        assert!((lr_at(30, &c).unwrap() - 0.01).abs() < 1e-15);
        assert!((lr_at(50, &c).unwrap() - 0.001).abs() < 1e-15);
        assert!((lr_at(59, &c).unwrap() - 0.001).abs() < 1e-15);
        assert!(lr_at(60, &c).is_err());
    }

    #[test]
    fn combine_weights() {
        assert!((combine(0.4, Some(1.0), [0.7, 0.3]) - 0.58).abs() < 1e-15);
        assert_eq!(combine(0.4, None, [0.7, 0.3]), 0.4);
    }

    #[test]
    fn validation_rules() {
        TrainConfig::default().validate().unwrap();
        let bad = [
            TrainConfig {
                loss_weights: [0.7, 0.4],
                ..Default::default()
            },
            TrainConfig {
                decay_epochs: vec![50, 30],
                ..Default::default()
            },
            TrainConfig {
                decay_epochs: vec![30, 60],
                ..Default::default()
            },
            TrainConfig {
                seeds: vec![1, 2],
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
