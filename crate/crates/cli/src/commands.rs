use std::fs;
use std::path::{Path, PathBuf};

use dtrattunet::data::{
    load_dataset, nearest_resize, predefined_split, preprocess, read_image, split, Intensity, Layout, Plane, Prepared,
    PreprocessConfig, SliceSample,
};
use dtrattunet::engine::Tensor;
use dtrattunet::evaluation::{
    aggregate, discretize, evaluate as score, save_label_map, save_overlay, write_per_image_csv, write_report,
    AggregateReport, MetricsReport, THRESHOLD,
};
use dtrattunet::model::LayerManifest;
use dtrattunet::training::{load_checkpoint, run_protocol, Checkpoint};
use dtrattunet::{ModelConfig, Task};

use crate::config::{Loaded, OUTPUT_ROOT_ENV};
use crate::{CheckpointArgs, EvaluateArgs, Failure, PredictArgs, SummarizeArgs, TrainArgs};

const EVAL_BATCH: usize = 4;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn output_root() -> PathBuf {
    std::env::var(OUTPUT_ROOT_ENV)
        .ok()
        .filter(|v| !v.is_empty())
        .map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn print_report(report: &AggregateReport) {
    for row in &report.rows {
        println!(
            "{:<14} F1 {}  Dice {}  IoU {}  ({} runs, {} images)",
            row.class, row.f1, row.dice, row.iou, report.runs, row.n_images
        );
    }
}

fn prepare(samples: &[SliceSample], config: &PreprocessConfig, task: Task) -> Result<Vec<Prepared>, Failure> {
    samples
        .iter()
        .map(|s| preprocess(s, config, task).map_err(Failure::from))
        .collect()
}

pub fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut sets = args.sets.clone();
    if let Some(v) = &args.variant {
        sets.push(format!("variant={v}"));
    }
    let seeds = args.seeds.clone().or(args.seed.map(|s| vec![s]));
    if let Some(seeds) = &seeds {
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        sets.push(format!("train.seeds=[{}]", list.join(",")));
        sets.push(format!("train.runs={}", seeds.len()));
    }
    let loaded = Loaded::load(args.config.as_deref(), &sets)?;
    let cfg = &loaded.config;
    println!("config hash: {}", cfg.model.config_hash());

    if args.dry_run {
        print!("{}", LayerManifest::from_config(&cfg.model)?.to_text());
        let seeds: Vec<String> = cfg.train.run_seeds().iter().map(u64::to_string).collect();
        println!("seeds: {}", seeds.join(","));
        println!("output: {}", cfg.output.dir.display());
        return Ok(());
    }

    let root = cfg
        .data
        .root
        .as_ref()
        .ok_or_else(|| Failure::config("`data.root` is not set"))?;
    let samples = load_dataset(root, &cfg.data.layout)?;
    if samples.is_empty() {
        return Err(Failure::config(format!("{}: no images found", root.display())));
    }
    let (train_set, test_set) = match &cfg.data.test_root {
        Some(test_root) => (samples, load_dataset(test_root, &cfg.data.layout)?),
        None => match predefined_split(&samples) {
            Some(parts) => parts?,
            None => split(&samples, &cfg.split)?,
        },
    };
    let train_p = prepare(&train_set, &cfg.preprocess, cfg.task)?;
    let test_p = prepare(&test_set, &cfg.preprocess, cfg.task)?;
    if cfg.model.use_dual_decoder {
        let missing: Vec<&str> = train_p
            .iter()
            .filter(|p| p.lung.is_none())
            .map(|p| p.source_id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Failure::config(format!(
                "variant {} needs lung masks; missing for {} training slices (first: {})",
                cfg.model.variant(),
                missing.len(),
                missing[..missing.len().min(5)].join(", ")
            )));
        }
    }

    let out = &cfg.output.dir;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let mut manifest = loaded.manifest();
    manifest["command"] = "train".into();
    manifest["train_slices"] = train_p.len().into();
    manifest["test_slices"] = test_p.len().into();
    write_json(&out.join("run_manifest.json"), &manifest)?;
    eprintln!(
        "training {} on {} slices, testing on {}, seeds {:?} -> {}",
        cfg.model.variant(),
        train_p.len(),
        test_p.len(),
        cfg.train.run_seeds(),
        out.display()
    );

    let outcome = run_protocol(&cfg.model, &cfg.train, &train_p, &test_p, Some(out))?;
    write_report(out, "summary", &outcome.aggregate)?;
    if args.per_image {
        let tests: Vec<MetricsReport> = outcome.runs.iter().map(|r| r.test.clone()).collect();
        write_per_image_csv(&out.join("per_image.csv"), &tests)?;
    }
    print_report(&outcome.aggregate);
    Ok(())
}

struct Opened {
    checkpoint: Checkpoint,
    preprocess: PreprocessConfig,
    layout: Layout,
}

/// Load a checkpoint, refusing it when its config hash differs from the one
/// implied by `--config` and/or `task` unless the override flag is set.
fn open(args: &CheckpointArgs, task: Option<Task>) -> Result<Opened, Failure> {
    let from_file = args.config.as_deref().map(|p| Loaded::load(Some(p), &[])).transpose()?;
    let checkpoint = load_checkpoint(&args.checkpoint, None, true)?;
    let stored = &checkpoint.manifest;
    println!("config hash: {}", stored.config_hash);

    let requested: Option<ModelConfig> = match (&from_file, task) {
        (Some(l), Some(t)) => Some(l.config.model.clone().with_task(t)),
        (Some(l), None) => Some(l.config.model.clone()),
        (None, Some(t)) => Some(stored.model.clone().with_task(t)),
        (None, None) => None,
    };
    if let Some(want) = requested {
        let hash = want.config_hash();
        if hash != stored.config_hash {
            let message = format!(
                "{}: config hash mismatch: checkpoint {} ({}, {}) vs requested {} ({}, {})",
                args.checkpoint.display(),
                stored.config_hash,
                stored.variant,
                stored.task,
                hash,
                want.variant(),
                want.task()
            );
            if !args.allow_config_mismatch {
                return Err(Failure::config(format!(
                    "{message}; pass --allow-config-mismatch to load it anyway"
                )));
            }
            eprintln!("warning: {message}");
        }
    }
    let model = checkpoint.model.config();
    let (mut preprocess, layout) = match from_file {
        Some(l) => (l.config.preprocess, l.config.data.layout),
        None => (PreprocessConfig::default(), Layout::default()),
    };
    preprocess.image_size = model.image_size;
    preprocess.input_channels = model.input_channels;
    Ok(Opened {
        checkpoint,
        preprocess,
        layout,
    })
}

fn parse_task(raw: Option<&str>) -> Result<Option<Task>, Failure> {
    raw.map(|t| t.parse::<Task>().map_err(|e| Failure::config(format!("--task: {e}"))))
        .transpose()
}

pub fn evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let task = parse_task(args.task.as_deref())?;
    let opened = open(&args.checkpoint, task)?;
    let model = &opened.checkpoint.model;
    let task = model.config().task();
    let samples = load_dataset(&args.data, &opened.layout)?;
    if samples.is_empty() {
        return Err(Failure::config(format!("{}: no images found", args.data.display())));
    }
    let prepared = prepare(&samples, &opened.preprocess, task)?;
    let report = score(model, &prepared, EVAL_BATCH)?;

    let out = args.out.unwrap_or_else(|| output_root().join("eval"));
    let mut summary = aggregate(std::slice::from_ref(&report))?;
    summary.config_hash = Some(opened.checkpoint.manifest.config_hash.clone());
    summary.variant = Some(opened.checkpoint.manifest.variant.clone());
    write_report(&out, "metrics", &summary)?;
    if args.per_image {
        write_per_image_csv(&out.join("per_image.csv"), std::slice::from_ref(&report))?;
    }
    print_report(&summary);
    Ok(())
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let supported = |p: &Path| {
        let name = p
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        [".png", ".nii", ".nii.gz"].iter().any(|s| name.ends_with(s))
    };
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| Failure::config(format!("{}: {e}", input.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && supported(p))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(Failure::config("no input images"));
    }
    Ok(files)
}

/// Display intensities in [0, 1], using the same rescaling as the model input.
fn display_gray(image: &Plane<f64>, config: &PreprocessConfig) -> Plane<f64> {
    let data = match config.intensity() {
        Intensity::MinMax => {
            let (lo, hi) = image
                .data
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            image
                .data
                .iter()
                .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
                .collect()
        }
        Intensity::Window { low, high } => image
            .data
            .iter()
            .map(|v| (v.clamp(low, high) - low) / (high - low))
            .collect(),
    };
    Plane {
        height: image.height,
        width: image.width,
        data,
    }
}

fn predict_one(
    opened: &Opened,
    id: &str,
    image: Plane<f64>,
    out: &Path,
    overlay: Option<bool>,
) -> Result<Vec<PathBuf>, Failure> {
    let model = &opened.checkpoint.model;
    let task = model.config().task();
    let sample = SliceSample {
        image,
        infection_mask: None,
        lung_mask: None,
        source_id: id.to_string(),
        scan_id: id.to_string(),
        subset: None,
    };
    let prepared = preprocess(&sample, &opened.preprocess, task)?;
    let s = prepared.size();
    let logits = model.predict(&Tensor::stack(&[prepared.input])?)?;
    let (h, w) = (sample.image.height, sample.image.width);
    let back = |labels: Vec<u8>| -> Result<Plane<u8>, Failure> { Ok(nearest_resize(&Plane::new(s, s, labels)?, h, w)) };
    let infection = back(discretize(&logits.infection_logits, task, THRESHOLD)?.remove(0))?;
    let lung = match &logits.lung_logits {
        Some(l) => Some(back(discretize(l, Task::Binary, THRESHOLD)?.remove(0))?),
        None => None,
    };

    let mut written = Vec::new();
    match overlay {
        None => {
            let path = out.join(format!("{id}_infection.png"));
            save_label_map(&path, &infection)?;
            written.push(path);
            if let Some(lung) = &lung {
                let path = out.join(format!("{id}_lung.png"));
                save_label_map(&path, lung)?;
                written.push(path);
            }
        }
        Some(contour) => {
            let path = out.join(format!("{id}_overlay.png"));
            let gray = display_gray(&sample.image, &opened.preprocess);
            save_overlay(&path, &gray, &infection, lung.as_ref().filter(|_| contour))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Label maps (`overlay == None`) or overlays (`Some(draw lung contour)`).
pub fn predict(args: PredictArgs, overlay: Option<bool>) -> Result<(), Failure> {
    let opened = open(&args.checkpoint, None)?;
    let files = collect_inputs(&args.inputs)?;
    fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;
    let (mut written, mut failed) = (0usize, 0usize);
    for file in &files {
        let slices = match read_image(file) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("warning: skipping {e}");
                failed += 1;
                continue;
            }
        };
        for (id, image) in slices {
            match predict_one(&opened, &id, image, &args.out, overlay) {
                Ok(paths) => written += paths.len(),
                Err(e) => {
                    eprintln!("warning: skipping {id}: {e}");
                    failed += 1;
                }
            }
        }
    }
    println!("wrote {written} files to {}", args.out.display());
    if written == 0 && failed > 0 {
        return Err(Failure::runtime(format!("all {failed} inputs failed")));
    }
    Ok(())
}

pub fn summarize(args: SummarizeArgs) -> Result<(), Failure> {
    let entries = fs::read_dir(&args.dir).map_err(|e| Failure::config(format!("{}: {e}", args.dir.display())))?;
    let mut runs: Vec<(u64, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_str()?.to_string();
            let seed = name.strip_prefix("run_")?.parse().ok()?;
            let path = e.path().join("test_metrics.json");
            path.is_file().then_some((seed, path))
        })
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Failure::config(format!(
            "{}: no run_<seed>/test_metrics.json found",
            args.dir.display()
        )));
    }
    let reports = runs
        .iter()
        .map(|(_, path)| {
            let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<MetricsReport>(&text)
                .map_err(|e| Failure::config(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut summary = aggregate(&reports)?;
    let manifest_path = args.dir.join("run_manifest.json");
    if let Some(m) = fs::read_to_string(&manifest_path)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
    {
        summary.config_hash = m["config_hash"].as_str().map(str::to_string);
        summary.variant = m["variant"].as_str().map(str::to_string);
    }
    println!("config hash: {}", summary.config_hash.as_deref().unwrap_or("unknown"));
    let out = args.out.unwrap_or_else(|| args.dir.clone());
    write_report(&out, "summary", &summary)?;
    if args.per_image {
        write_per_image_csv(&out.join("per_image.csv"), &reports)?;
    }
    print_report(&summary);
    Ok(())
}
