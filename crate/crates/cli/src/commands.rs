use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cign_core::dataio::{dataset_dir, load_split, LabeledDataset, Split};
use cign_core::graph::{self, load_checkpoint, preset, save_checkpoint, Cign, ParamReport};
use cign_core::report::{
    read_metrics, read_metrics_dir, summarize, ExperimentConfig, LeafHistogram, MetricRecord, MetricsWriter,
    OutputLock, Precision,
};
use cign_core::trainer::{self, GridAxis, ScheduleSet, TrainEvent, TrainOptions};
use cign_core::{CignError, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::Common;

const METRICS_FILE: &str = "metrics.jsonl";

fn config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Err(CignError::Config("--config is required for this command".into()).into()),
    }
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

fn seeds(common: &Common, cfg: &ExperimentConfig) -> Vec<u64> {
    common.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

fn load_data(cfg: &ExperimentConfig, split: Split) -> Result<LabeledDataset> {
    let dir = dataset_dir(cfg.dataset, cfg.data_dir.as_deref())?;
    let data = load_split(&dir, split)?;
    let limit = match split {
        Split::Train => cfg.train_limit,
        Split::Test => cfg.test_limit,
    };
    Ok(match limit {
        Some(n) => data.head(n),
        None => data,
    })
}

fn budget(report: &ParamReport) -> usize {
    report.paths.iter().map(|p| p.budget()).max().unwrap_or(0)
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    schedule: ScheduleSet,
    train: &'a LabeledDataset,
    test: &'a LabeledDataset,
    label: String,
    seed: u64,
}

/// Trains one model; metrics go to `writer`, the checkpoint to `checkpoint` if given.
fn run_one<T: Scalar>(run: &Run, writer: &mut MetricsWriter, checkpoint: Option<&Path>) -> Result<f64> {
    let tree = run.cfg.tree()?;
    let counts = graph::count_params(&tree)?;
    let id = format!("{}-seed{}", run.label, run.seed);
    writer.write(&MetricRecord::RunStart {
        run: id.clone(),
        label: run.label.clone(),
        seed: run.seed,
        config: serde_json::json!({ "experiment": run.cfg, "schedule": run.schedule }),
    })?;
    let mut model: Cign<T> = Cign::new(tree, &mut ChaCha8Rng::seed_from_u64(run.seed))?;
    let opts =
        TrainOptions { check_invariants: run.cfg.check_invariants, keep_steps: false, ..TrainOptions::default() };
    let record = trainer::train(&mut model, run.train, Some(run.test), &run.schedule, run.seed, &opts, |ev| {
        let rec = match ev {
            TrainEvent::Step(s) => MetricRecord::Step { run: id.clone(), step: s.clone() },
            TrainEvent::Epoch(e) => MetricRecord::Epoch { run: id.clone(), epoch: e.clone() },
            TrainEvent::Diverged { iteration, epoch, detail } => {
                MetricRecord::Diverged { run: id.clone(), iteration: *iteration, epoch: *epoch, detail: detail.clone() }
            }
        };
        writer.write(&rec)
    })?;
    let accuracy = record.final_test_accuracy.unwrap_or(0.0);
    writer.write(&MetricRecord::RunEnd {
        run: id,
        label: run.label.clone(),
        seed: run.seed,
        test_accuracy: accuracy,
        iterations: record.iterations,
        total_params: counts.total(),
        per_sample_params: budget(&counts),
    })?;
    if let Some(path) = checkpoint {
        let meta = serde_json::json!({
            "label": run.label,
            "seed": run.seed,
            "iterations": record.iterations,
            "test_accuracy": accuracy,
        });
        save_checkpoint(&model, meta, path)?;
        log::info!("checkpoint written to {}", path.display());
    }
    Ok(accuracy)
}

fn dispatch(run: &Run, writer: &mut MetricsWriter, checkpoint: Option<&Path>) -> Result<f64> {
    match run.cfg.precision {
        Precision::F32 => run_one::<f32>(run, writer, checkpoint),
        Precision::F64 => run_one::<f64>(run, writer, checkpoint),
    }
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = config(common)?;
    let out = out_dir(common, &cfg);
    let _lock = OutputLock::acquire(&out)?;
    let train = load_data(&cfg, Split::Train)?;
    let test = load_data(&cfg, Split::Test)?;
    let mut writer = MetricsWriter::open(out.join(METRICS_FILE))?;
    let label = cfg.label();
    for seed in seeds(common, &cfg) {
        let run = Run { cfg: &cfg, schedule: cfg.schedule(), train: &train, test: &test, label: label.clone(), seed };
        let ckpt = out.join(format!("{label}-seed{seed}.ckpt"));
        let acc = dispatch(&run, &mut writer, Some(&ckpt))?;
        println!("{label} seed {seed}: test accuracy {:.2}%", 100.0 * acc);
    }
    Ok(())
}

fn load_model<T: Scalar>(path: &Path, cfg: &ExperimentConfig) -> Result<Cign<T>> {
    let (model, _) = load_checkpoint::<T>(path)?;
    let expected = cfg.tree()?;
    if model.spec() != &expected {
        bail!(CignError::Checkpoint(format!(
            "{} holds a different architecture than the config describes",
            path.display()
        )));
    }
    Ok(model)
}

fn evaluate_with<T: Scalar>(common: &Common, cfg: &ExperimentConfig, checkpoint: &Path) -> Result<()> {
    let model = load_model::<T>(checkpoint, cfg)?;
    let test = load_data(cfg, Split::Test)?;
    let ev = trainer::evaluate(&model, &test, 500)?;
    println!("accuracy {:.4}% ({} / {})", 100.0 * ev.accuracy, ev.correct, ev.total);
    if let Some(out) = &common.out {
        let _lock = OutputLock::acquire(out)?;
        MetricsWriter::open(out.join(METRICS_FILE))?.write(&MetricRecord::Evaluation {
            label: cfg.label(),
            checkpoint: checkpoint.display().to_string(),
            correct: ev.correct,
            total: ev.total,
            accuracy: ev.accuracy,
        })?;
    }
    Ok(())
}

pub fn evaluate(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = config(common)?;
    match cfg.precision {
        Precision::F32 => evaluate_with::<f32>(common, &cfg, checkpoint),
        Precision::F64 => evaluate_with::<f64>(common, &cfg, checkpoint),
    }
}

fn histogram_with<T: Scalar>(
    common: &Common,
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    train_split: bool,
) -> Result<()> {
    let model = load_model::<T>(checkpoint, cfg)?;
    let data = load_data(cfg, if train_split { Split::Train } else { Split::Test })?;
    let h = LeafHistogram::build(&model, &data, cfg.dataset.class_names(), 500)?;
    let text = h.render_text();
    print!("{text}");
    if let Some(out) = &common.out {
        let _lock = OutputLock::acquire(out)?;
        write(&out.join("histogram.txt"), &text)?;
        write(&out.join("histogram.csv"), &h.render_csv())?;
    }
    Ok(())
}

pub fn histogram(common: &Common, checkpoint: &Path, train_split: bool) -> Result<()> {
    let cfg = config(common)?;
    match cfg.precision {
        Precision::F32 => histogram_with::<f32>(common, &cfg, checkpoint, train_split),
        Precision::F64 => histogram_with::<f64>(common, &cfg, checkpoint, train_split),
    }
}

pub fn count_params(common: &Common, model: Option<&str>, csv: bool) -> Result<()> {
    let (title, tree) = match (model, &common.config) {
        (Some(name), None) => (name.to_string(), preset(name)?.spec),
        (None, Some(_)) => {
            let cfg = config(common)?;
            (cfg.label(), cfg.tree()?)
        }
        _ => bail!(CignError::Config("pass exactly one of --model and --config".into())),
    };
    let report = graph::count_params(&tree)?;
    let text = if csv { report.render_csv() } else { report.render_text(&title) };
    print!("{text}");
    if let Some(out) = &common.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write(&out.join("params.txt"), &report.render_text(&title))?;
        write(&out.join("params.csv"), &report.render_csv())?;
    }
    Ok(())
}

pub fn grid(common: &Common) -> Result<()> {
    let cfg = config(common)?;
    if cfg.grid.is_empty() {
        bail!(CignError::Usage("the config has no [[grid]] axes".into()));
    }
    let out = out_dir(common, &cfg);
    let _lock = OutputLock::acquire(&out)?;
    let train = load_data(&cfg, Split::Train)?;
    let test = load_data(&cfg, Split::Test)?;
    let writer = std::sync::Mutex::new(MetricsWriter::open(out.join(METRICS_FILE))?);
    let seed = seeds(common, &cfg)[0];
    let axes: Vec<(GridAxis, Vec<f64>)> =
        cfg.grid.iter().map(|g| Ok((g.axis, g.points()?))).collect::<cign_core::Result<_>>()?;
    let label = cfg.label();
    let (best, results) = trainer::sequential_search(&cfg.schedule(), &axes, |schedule, _, value| {
        let axis = axes.iter().find(|(a, _)| a.apply(schedule, value) == *schedule).map_or("value", |(a, _)| a.name());
        let run = Run {
            cfg: &cfg,
            schedule: schedule.clone(),
            train: &train,
            test: &test,
            label: format!("{label}/{axis}={value}"),
            seed,
        };
        let mut w = writer.lock().expect("metrics writer");
        dispatch(&run, &mut w, None).map_err(|e| match e.downcast::<CignError>() {
            Ok(c) => c,
            Err(other) => CignError::Usage(other.to_string()),
        })
    })?;
    let mut text = String::new();
    for r in &results {
        text.push_str(&format!("axis {}\n", r.axis.name()));
        for p in &r.points {
            text.push_str(&format!("  {:<12} {:.4}%\n", p.value, 100.0 * p.accuracy));
        }
        text.push_str(&format!("  best {} ({:.4}%)\n", r.best.value, 100.0 * r.best.accuracy));
    }
    text.push_str(&format!("selected schedule:\n{}", schedule_json(&best)?));
    print!("{text}");
    write(&out.join("grid.txt"), &text)
}

fn schedule_json(s: &ScheduleSet) -> Result<String> {
    Ok(serde_json::to_string_pretty(s)? + "\n")
}

pub fn report(common: &Common, metrics: &[PathBuf]) -> Result<()> {
    let out = match (&common.out, &common.config) {
        (Some(o), _) => o.clone(),
        (None, Some(_)) => config(common)?.out_dir,
        (None, None) if !metrics.is_empty() => PathBuf::from("."),
        (None, None) => bail!(CignError::Config("pass --out, --config or metrics files".into())),
    };
    let records = if metrics.is_empty() {
        read_metrics_dir(&out)?
    } else {
        let mut all = Vec::new();
        for m in metrics {
            all.extend(read_metrics(m)?);
        }
        all
    };
    let table = summarize(&records);
    if table.rows.is_empty() {
        bail!(CignError::Usage("no finished runs found in the metrics".into()));
    }
    let text = table.render_text();
    print!("{text}");
    if common.out.is_some() || common.config.is_some() {
        write(&out.join("report.txt"), &text)?;
        write(&out.join("report.csv"), &table.render_csv())?;
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CignError::io(path, e).into())
}
