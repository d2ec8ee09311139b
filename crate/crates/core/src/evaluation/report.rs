use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{dice_score, MetricsReport};
use crate::config::Task;
use crate::error::{Error, Result};

/// Mean and population standard deviation (divisor `n`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub class: String,
    pub f1: Stat,
    pub dice: Stat,
    pub iou: Stat,
    pub n_images: usize,
    pub per_run_f1: Vec<f64>,
}

/// Per-class metrics over repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub task: Task,
    pub runs: usize,
    pub config_hash: Option<String>,
    pub variant: Option<String>,
    pub rows: Vec<AggregateRow>,
}

pub fn aggregate(runs: &[MetricsReport]) -> Result<AggregateReport> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Validation("no runs to aggregate".into()))?;
    for r in runs {
        let same = r.task == first.task
            && r.classes.len() == first.classes.len()
            && r.classes.iter().zip(&first.classes).all(|(a, b)| a.class == b.class);
        if !same {
            return Err(Error::Validation("runs report different tasks or classes".into()));
        }
    }
    let rows = first
        .classes
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let col = |f: fn(&super::ClassMetrics) -> f64| runs.iter().map(|r| f(&r.classes[k])).collect::<Vec<_>>();
            let f1 = col(|m| m.f1);
            AggregateRow {
                class: c.class.clone(),
                f1: Stat::of(&f1),
                dice: Stat::of(&col(|m| m.dice)),
                iou: Stat::of(&col(|m| m.iou)),
                n_images: first.n_images,
                per_run_f1: f1,
            }
        })
        .collect();
    Ok(AggregateReport {
        task: first.task,
        runs: runs.len(),
        config_hash: None,
        variant: None,
        rows,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::data(path, e.to_string())
}

/// Write `<stem>.csv` and `<stem>.json` into `dir`; returns both paths.
///
/// CSV columns: `task,class,f1,dice,iou,n_images,runs,mean,std`, where the
/// metric cells read `mean±std` and `mean`/`std` repeat the F1 statistic
/// numerically.
pub fn write_report(dir: &Path, stem: &str, report: &AggregateReport) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    w.write_record(["task", "class", "f1", "dice", "iou", "n_images", "runs", "mean", "std"])
        .map_err(|e| csv_error(&csv_path, e))?;
    for row in &report.rows {
        w.write_record([
            report.task.as_str().to_string(),
            row.class.clone(),
            row.f1.to_string(),
            row.dice.to_string(),
            row.iou.to_string(),
            row.n_images.to_string(),
            report.runs.to_string(),
            format!("{:.4}", row.f1.mean),
            format!("{:.4}", row.f1.std),
        ])
        .map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

/// Per-image confusion counts and Dice for each run and class.
pub fn write_per_image_csv(path: &Path, runs: &[MetricsReport]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["run", "class", "source_id", "tp", "fp", "fn", "dice"])
        .map_err(|e| csv_error(path, e))?;
    for (run, report) in runs.iter().enumerate() {
        for class in &report.classes {
            for (id, c) in report.source_ids.iter().zip(&class.per_image) {
                w.write_record([
                    run.to_string(),
                    class.class.clone(),
                    id.clone(),
                    c.tp.to_string(),
                    c.fp.to_string(),
                    c.fn_.to_string(),
                    format!("{:.6}", dice_score(c)),
                ])
                .map_err(|e| csv_error(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
