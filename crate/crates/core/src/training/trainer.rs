use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, SaveMeta};
use super::{joint_loss, lr_at, CheckpointRecord, JointLoss, TrainConfig, TrainState};
use crate::config::ModelConfig;
use crate::data::{split_indices, AugmentConfig, Batch, EpochBatches, Granularity, Prepared, SplitSpec};
use crate::engine::{Adam, Graph, Mode};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, evaluate, AggregateReport, MetricsReport};
use crate::model::DTrAttUnet;

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_f1: Option<f64>,
    pub val_dice: Option<f64>,
    pub val_iou: Option<f64>,
    pub seconds: f64,
}

/// Training samples and the held-out validation share.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<Prepared>,
    pub val: Vec<Prepared>,
}

impl TrainData {
    /// Hold out `fraction` of `samples` (seeded, slice level). Too few
    /// samples to spare one leaves the validation side empty.
    pub fn carve(samples: Vec<Prepared>, fraction: f64, seed: u64) -> Result<Self> {
        if fraction == 0.0 || samples.len() < 2 {
            return Ok(Self {
                train: samples,
                val: Vec::new(),
            });
        }
        let spec = SplitSpec {
            train_fraction: 1.0 - fraction,
            seed,
            granularity: Granularity::Slice,
        };
        let (train_idx, val_idx) = match split_indices(&samples, &spec) {
            Ok(v) => v,
            Err(Error::Validation(_)) => {
                return Ok(Self {
                    train: samples,
                    val: Vec::new(),
                })
            }
            Err(e) => return Err(e),
        };
        let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
        Ok(Self {
            train: pick(&train_idx),
            val: pick(&val_idx),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub infection_loss: f64,
    pub lung_loss: Option<f64>,
}

/// Model, optimizer and progress of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: DTrAttUnet,
    optimizer: Adam,
    config: TrainConfig,
    state: TrainState,
}

impl Trainer {
    pub fn new(model: DTrAttUnet, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if model.config().task() != config.task {
            return Err(Error::Config(format!(
                "model has a {} head but training is configured for the {} task",
                model.config().task(),
                config.task
            )));
        }
        Ok(Self {
            model,
            optimizer: Adam::new(config.adam),
            config,
            state: TrainState::new(seed),
        })
    }

    /// Continue from a checkpoint written by [`Trainer::fit`].
    pub fn resume(path: &Path, config: TrainConfig, expected: Option<&ModelConfig>) -> Result<Self> {
        let ckpt = load_checkpoint(path, expected, false)?;
        let state = ckpt
            .manifest
            .train_state
            .ok_or_else(|| Error::Checkpoint(format!("{} holds no training state", path.display())))?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Checkpoint(format!("{} holds no optimizer state", path.display())))?;
        let mut trainer = Self::new(ckpt.model, config, state.seed)?;
        trainer.optimizer = optimizer;
        trainer.state = state;
        Ok(trainer)
    }

    pub fn model(&self) -> &DTrAttUnet {
        &self.model
    }

    pub fn into_model(self) -> DTrAttUnet {
        self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    /// Loss of a batch without touching parameters.
    pub fn batch_loss(&self, batch: &Batch, mode: Mode) -> Result<StepOutcome> {
        let mut g = Graph::new(mode);
        self.forward_loss(&mut g, batch)
    }

    fn forward_loss(&self, g: &mut Graph, batch: &Batch) -> Result<StepOutcome> {
        let loss = self.build_loss(g, batch)?;
        Ok(outcome(g, &loss))
    }

    fn build_loss(&self, g: &mut Graph, batch: &Batch) -> Result<JointLoss> {
        let x = g.constant(batch.images.clone());
        let out = self.model.forward(g, x)?;
        joint_loss(
            g,
            out.infection,
            out.lung,
            &batch.infection,
            batch.lung.as_deref(),
            self.config.task,
            self.config.loss_weights,
        )
    }

    /// One optimizer step on `batch`; returns the pre-update loss.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<StepOutcome> {
        let mut g = Graph::new(Mode::Train);
        let loss = self.build_loss(&mut g, batch)?;
        let value = g.value(loss.total).data()[0];
        let non_finite = || Error::NonFiniteLoss {
            step: self.state.global_step + 1,
            lr,
            batch_hash: batch.content_hash(),
        };
        if !value.is_finite() {
            return Err(non_finite());
        }
        let grads = g.backward(loss.total)?;
        let grads = g.param_grads(&grads);
        if grads.values().any(|t| !t.is_finite()) {
            return Err(non_finite());
        }
        let bn = g.take_bn_updates();
        self.optimizer.step(self.model.params_mut(), &grads, lr)?;
        self.model.params_mut().apply_bn_updates(&bn, self.config.bn_momentum)?;
        self.state.global_step += 1;
        Ok(outcome(&g, &loss))
    }

    fn save(&self, path: &Path, metrics: BTreeMap<String, f64>) -> Result<()> {
        save_checkpoint(
            path,
            &self.model,
            SaveMeta {
                state: Some(&self.state),
                metrics,
                loss_weights: Some(self.config.loss_weights),
                optimizer: Some(&self.optimizer),
            },
        )
    }

    fn budget_spent(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.state.global_step >= m)
    }

    /// Run the remaining epochs: augmentation, schedule, per-epoch
    /// validation, JSON-lines log and best/last checkpoints.
    pub fn fit(mut self, data: &TrainData, spec: &RunSpec) -> Result<RunOutcome> {
        if data.train.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        if let Some(dir) = &spec.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let augment = self.config.augment.then(AugmentConfig::default);
        let mut step_losses = Vec::new();
        let mut best = self.model.clone();
        if let Some(path) = spec
            .out_dir
            .as_ref()
            .map(|d| d.join("best.ckpt"))
            .filter(|p| self.state.epoch > 0 && p.is_file())
        {
            best = load_checkpoint(&path, Some(self.model.config()), false)?.model;
        }

        while self.state.epoch < self.config.epochs && !self.budget_spent() {
            let epoch = self.state.epoch;
            let started = Instant::now();
            let lr = lr_at(epoch, &self.config)?;
            let (mut sum, mut count) = (0.0, 0usize);
            for batch in EpochBatches::new(
                &data.train,
                self.config.batch_size,
                augment.clone(),
                self.state.seed,
                epoch,
            ) {
                let batch = batch?;
                let outcome = match self.step(&batch, lr) {
                    Err(e @ Error::NonFiniteLoss { .. }) => {
                        if let Some(dir) = &spec.out_dir {
                            write_nan_snapshot(dir, &e, epoch, &batch)?;
                        }
                        return Err(e);
                    }
                    other => other?,
                };
                step_losses.push(outcome.loss);
                sum += outcome.loss;
                count += 1;
                if self.budget_spent() {
                    break;
                }
            }
            let val = if data.val.is_empty() {
                None
            } else {
                Some(evaluate(&self.model, &data.val, spec.eval_batch_size)?.summary())
            };
            let record = EpochRecord {
                epoch,
                lr,
                train_loss: sum / count.max(1) as f64,
                val_f1: val.map(|v| v.0),
                val_dice: val.map(|v| v.1),
                val_iou: val.map(|v| v.2),
                seconds: started.elapsed().as_secs_f64(),
            };
            self.state.epoch += 1;
            self.state.rng_stream = self.state.epoch as u64;
            self.state.history.push(record.clone());

            // without a validation set the latest epoch counts as best
            let improved = match (val, self.state.best_val_f1) {
                (Some((f1, _, _)), Some(b)) => f1 > b,
                _ => true,
            };
            if improved {
                if let Some((f1, _, _)) = val {
                    self.state.best_val_f1 = Some(f1);
                }
                best = self.model.clone();
            }
            if let Some(dir) = &spec.out_dir {
                append_log(&dir.join("log.jsonl"), &record)?;
                let mut metrics = BTreeMap::from([("train_loss".to_string(), record.train_loss)]);
                if let Some((f1, dice, iou)) = val {
                    metrics.extend([
                        ("val_f1".into(), f1),
                        ("val_dice".into(), dice),
                        ("val_iou".into(), iou),
                    ]);
                }
                if improved {
                    let path = dir.join("best.ckpt");
                    self.state.checkpoints.retain(|c| !c.path.ends_with("best.ckpt"));
                    self.state.checkpoints.push(CheckpointRecord {
                        path: path.display().to_string(),
                        epoch,
                        val_f1: val.map(|v| v.0),
                    });
                    self.save(&path, metrics.clone())?;
                }
                self.save(&dir.join("last.ckpt"), metrics)?;
            }
        }
        Ok(RunOutcome {
            state: self.state,
            step_losses,
            best,
            last: self.model,
        })
    }
}

fn outcome(g: &Graph, loss: &JointLoss) -> StepOutcome {
    let scalar = |v| g.value(v).data()[0];
    StepOutcome {
        loss: scalar(loss.total),
        infection_loss: scalar(loss.infection),
        lung_loss: loss.lung.map(scalar),
    }
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn write_nan_snapshot(dir: &Path, err: &Error, epoch: usize, batch: &Batch) -> Result<()> {
    let Error::NonFiniteLoss { step, lr, batch_hash } = err else {
        return Ok(());
    };
    let snapshot = serde_json::json!({
        "step": step,
        "epoch": epoch,
        "lr": lr,
        "batch_hash": batch_hash,
        "source_ids": batch.source_ids,
    });
    let path = dir.join("nan_snapshot.json");
    fs::write(&path, serde_json::to_string_pretty(&snapshot)?).map_err(|e| Error::io(&path, e))
}

/// Where and how one run executes.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub out_dir: Option<PathBuf>,
    pub eval_batch_size: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            out_dir: None,
            eval_batch_size: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    /// Pre-update loss of every step taken in this call.
    pub step_losses: Vec<f64>,
    /// Model at the best validation F1 (the last epoch without validation).
    pub best: DTrAttUnet,
    pub last: DTrAttUnet,
}

/// Train a freshly built model for one seed.
pub fn train(
    model: DTrAttUnet,
    data: &TrainData,
    config: &TrainConfig,
    seed: u64,
    spec: &RunSpec,
) -> Result<RunOutcome> {
    Trainer::new(model, config.clone(), seed)?.fit(data, spec)
}

#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub seed: u64,
    pub state: TrainState,
    pub test: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    pub runs: Vec<ProtocolRun>,
    pub aggregate: AggregateReport,
}

/// Repeat training once per seed, evaluate each run's best model on the
/// test set and aggregate mean ± std. Run `k` writes to `out_root/run_<seed>`.
pub fn run_protocol(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_samples: &[Prepared],
    test_samples: &[Prepared],
    out_root: Option<&Path>,
) -> Result<ProtocolOutcome> {
    config.validate()?;
    let mut runs = Vec::new();
    for seed in config.run_seeds() {
        let data = TrainData::carve(train_samples.to_vec(), config.validation_fraction, seed)?;
        let model = DTrAttUnet::new(model_config.clone(), seed)?;
        let spec = RunSpec {
            out_dir: out_root.map(|r| r.join(format!("run_{seed}"))),
            ..RunSpec::default()
        };
        let outcome = train(model, &data, config, seed, &spec)?;
        let test = evaluate(&outcome.best, test_samples, spec.eval_batch_size)?;
        if let Some(dir) = &spec.out_dir {
            let path = dir.join("test_metrics.json");
            fs::write(&path, serde_json::to_string_pretty(&test)?).map_err(|e| Error::io(&path, e))?;
        }
        runs.push(ProtocolRun {
            seed,
            state: outcome.state,
            test,
        });
    }
    let mut aggregate = aggregate(&runs.iter().map(|r| r.test.clone()).collect::<Vec<_>>())?;
    aggregate.config_hash = Some(model_config.config_hash());
    aggregate.variant = Some(model_config.variant().display_name().to_string());
    Ok(ProtocolOutcome { runs, aggregate })
}
