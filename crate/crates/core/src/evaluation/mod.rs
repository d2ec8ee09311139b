//! Discretization, confusion counting, micro F1/IoU, macro Dice, and
//! report emission.

mod overlay;
mod report;

use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::data::{Batch, Prepared};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::model::DTrAttUnet;

pub use overlay::{overlay_rgb, save_label_map, save_overlay, CONSOLIDATION_RGB, GGO_RGB, LUNG_RGB};
pub use report::{aggregate, mean_std, write_per_image_csv, write_report, AggregateReport, AggregateRow, Stat};

pub const THRESHOLD: f64 = 0.5;

/// Label maps, one `H·W` vector per image.
///
/// Binary: `sigmoid(logit) > threshold`. Multiclass: per-pixel argmax with
/// ties going to the lowest class index.
pub fn discretize(logits: &Tensor, task: Task, threshold: f64) -> Result<Vec<Vec<u8>>> {
    let shape = logits.shape();
    let channels = match task {
        Task::Binary => 1,
        Task::Multiclass => 3,
    };
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::Validation(format!(
            "{task} discretization expects N×{channels}×H×W, got {shape:?}"
        )));
    }
    let plane = shape[2] * shape[3];
    let data = logits.data();
    Ok((0..shape[0])
        .map(|n| {
            let base = n * channels * plane;
            (0..plane)
                .map(|p| match task {
                    Task::Binary => {
                        let prob = 1.0 / (1.0 + (-data[base + p]).exp());
                        (prob > threshold) as u8
                    }
                    Task::Multiclass => {
                        let mut best = 0;
                        for c in 1..channels {
                            if data[base + c * plane + p] > data[base + best * plane + p] {
                                best = c;
                            }
                        }
                        best as u8
                    }
                })
                .collect()
        })
        .collect())
}

/// One-vs-rest pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with prediction and ground truth exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            fp: self.fn_,
            fn_: self.fp,
            ..*self
        }
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), |a, b| a + b)
    }
}

pub fn confusion(pred: &[u8], gt: &[u8], class_id: u8) -> Result<Counts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == class_id, g == class_id) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `100·2TP/(2TP+FP+FN)`. With nothing to find and nothing predicted the
/// score is 100; this rule applies to every overlap metric here.
pub fn dice_score(c: &Counts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        100.0
    } else {
        100.0 * (2 * c.tp) as f64 / denom as f64
    }
}

pub fn f1_micro(pooled: &Counts) -> f64 {
    dice_score(pooled)
}

pub fn iou_micro(pooled: &Counts) -> f64 {
    let denom = pooled.tp + pooled.fp + pooled.fn_;
    if denom == 0 {
        100.0
    } else {
        100.0 * pooled.tp as f64 / denom as f64
    }
}

/// Mean of per-image Dice scores.
pub fn dice_macro(per_image: &[Counts]) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::Validation("macro Dice over zero images".into()));
    }
    Ok(per_image.iter().map(dice_score).sum::<f64>() / per_image.len() as f64)
}

/// Reported classes as `(label, name)`; background is never reported.
pub fn report_classes(task: Task) -> &'static [(u8, &'static str)] {
    match task {
        Task::Binary => &[(1, "infection")],
        Task::Multiclass => &[(1, "GGO"), (2, "Consolidation")],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub f1: f64,
    pub dice: f64,
    pub iou: f64,
    pub pooled: Counts,
    pub per_image: Vec<Counts>,
}

impl ClassMetrics {
    pub fn from_counts(class: &str, per_image: Vec<Counts>) -> Result<Self> {
        let pooled: Counts = per_image.iter().copied().sum();
        Ok(Self {
            class: class.to_string(),
            f1: f1_micro(&pooled),
            dice: dice_macro(&per_image)?,
            iou: iou_micro(&pooled),
            pooled,
            per_image,
        })
    }
}

/// Metrics of one model on one evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub n_images: usize,
    pub source_ids: Vec<String>,
    pub classes: Vec<ClassMetrics>,
}

impl MetricsReport {
    /// Mean over reported classes of `(f1, dice, iou)`; used for checkpoint
    /// selection.
    pub fn summary(&self) -> (f64, f64, f64) {
        let k = self.classes.len().max(1) as f64;
        let sum = |f: fn(&ClassMetrics) -> f64| self.classes.iter().map(f).sum::<f64>() / k;
        (sum(|c| c.f1), sum(|c| c.dice), sum(|c| c.iou))
    }
}

/// Score label maps against ground truth.
pub fn score_predictions(
    preds: &[Vec<u8>],
    gts: &[Vec<u8>],
    task: Task,
    source_ids: Vec<String>,
) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let classes = report_classes(task)
        .iter()
        .map(|&(label, name)| {
            let per_image = preds
                .iter()
                .zip(gts)
                .map(|(p, g)| confusion(p, g, label))
                .collect::<Result<Vec<_>>>()?;
            ClassMetrics::from_counts(name, per_image)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        task,
        n_images: preds.len(),
        source_ids,
        classes,
    })
}

/// Predicted infection label maps in sample order.
pub fn predict_labels(model: &DTrAttUnet, samples: &[Prepared], batch_size: usize) -> Result<Vec<Vec<u8>>> {
    let task = model.config().task();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images = Tensor::stack(&chunk.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?;
        let logits = model.predict(&images)?;
        out.extend(discretize(&logits.infection_logits, task, THRESHOLD)?);
    }
    Ok(out)
}

/// Evaluate a model on prepared samples that all carry infection masks.
pub fn evaluate(model: &DTrAttUnet, samples: &[Prepared], batch_size: usize) -> Result<MetricsReport> {
    let missing: Vec<&str> = samples
        .iter()
        .filter(|s| s.infection.is_none())
        .map(|s| s.source_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "samples without infection ground truth: {}",
            missing.join(", ")
        )));
    }
    if samples.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let preds = predict_labels(model, samples, batch_size)?;
    let gts: Vec<Vec<u8>> = samples
        .iter()
        .map(|s| s.infection.clone().unwrap_or_default())
        .collect();
    score_predictions(
        &preds,
        &gts,
        model.config().task(),
        samples.iter().map(|s| s.source_id.clone()).collect(),
    )
}

/// Dice of thresholded lung predictions on a batch, pooled per image.
pub fn lung_dice(logits: &Tensor, batch: &Batch) -> Result<Option<f64>> {
    let Some(gt) = &batch.lung else { return Ok(None) };
    let preds = discretize(logits, Task::Binary, THRESHOLD)?;
    let plane = gt.len() / preds.len().max(1);
    let per_image = preds
        .iter()
        .enumerate()
        .map(|(i, p)| confusion(p, &gt[i * plane..(i + 1) * plane], 1))
        .collect::<Result<Vec<_>>>()?;
    dice_macro(&per_image).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_logit_is_background() {
        let t = Tensor::new(&[1, 1, 1, 2], vec![0.0, 1e-9]).unwrap();
        assert_eq!(discretize(&t, Task::Binary, 0.5).unwrap(), vec![vec![0, 1]]);
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new(&[1, 3, 1, 1], vec![0.2, 0.9, 0.9]).unwrap();
        assert_eq!(discretize(&t, Task::Multiclass, 0.5).unwrap(), vec![vec![1]]);
    }

    #[test]
    fn hand_cases() {
        let perfect = Counts {
            tp: 5,
            tn: 3,
            ..Default::default()
        };
        let half = Counts {
            tp: 1,
            fp: 1,
            fn_: 1,
            tn: 0,
        };
        assert_eq!(dice_macro(&[perfect, half]).unwrap(), 75.0);
        assert_eq!(f1_micro(&half), 50.0);
        assert!((iou_micro(&half) - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_ground_truth_rule() {
        assert_eq!(
            dice_score(&Counts {
                tn: 10,
                ..Default::default()
            }),
            100.0
        );
        assert_eq!(
            dice_score(&Counts {
                fp: 1,
                tn: 9,
                ..Default::default()
            }),
            0.0
        );
    }
}
