//! Runs adaptation experiments and writes their artifacts:
//!
//! - `runs/<run_id>.csv`: one row per batch.
//! - `summary.json`: per method (or ablation rung / sweep value) the mean and
//!   population standard deviation of cumulative accuracy over seeds.
//! - `metadata.json`: timestamps and source-model accuracy; kept apart so the
//!   other files are reproducible byte for byte.
//! - `sweep_<param>.csv` for sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;
use tta_core::adapt::{accuracy, adapt_stream, train_source, Ablation, AdaptConfig, Method, Metrics};
use tta_core::data::{make_covariate_benchmark, make_label_shift_benchmark, stream_batches, Benchmark, LabeledSet};
use tta_core::model::{init_model, Model};

use crate::config::{BenchmarkKind, FilterCount, RunConfig};
use crate::CliError;

pub const CSV_HEADER: &str = "run_id,method,seed,batch_index,batch_accuracy,cumulative_accuracy,loss,num_reliable,bank_size";

/// Benchmark, target samples and source model for one seed.
pub struct Prepared {
    pub seed: u64,
    pub benchmark: Benchmark,
    pub target: LabeledSet,
    pub model: Model,
    pub source_val_accuracy: Option<f64>,
}

fn benchmark(cfg: &RunConfig, seed: u64) -> Result<Benchmark, CliError> {
    let b = match cfg.benchmark {
        BenchmarkKind::Covariate => make_covariate_benchmark(seed, cfg.num_sources, cfg.shift_strength),
        BenchmarkKind::LabelShift => make_label_shift_benchmark(seed, cfg.num_sources, &cfg.label_prior),
    };
    b.map_err(|e| CliError::Config(e.to_string()))
}

/// Builds the benchmark for `seed` and trains (or loads) its source model.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared, CliError> {
    let bench = benchmark(cfg, seed)?;
    let (c, d) = (bench.target.num_classes, bench.target.input_dim);
    let target = match &cfg.target_csv {
        Some(path) => {
            let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let set = LabeledSet::read_csv(BufReader::new(f))?;
            if set.dim() != d || set.labels().iter().any(|&y| y >= c) {
                return Err(CliError::Config(format!(
                    "target_csv: expected {d} inputs and labels below {c}"
                )));
            }
            set
        }
        None => bench.target.sample()?,
    };
    let (model, source_val_accuracy) = match &cfg.checkpoint {
        Some(path) => {
            let model = Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if model.input_dim() != d || model.num_classes() != c {
                return Err(CliError::Config(format!(
                    "checkpoint: model expects {} inputs and {} classes, benchmark has {d} and {c}",
                    model.input_dim(),
                    model.num_classes()
                )));
            }
            (model, None)
        }
        None => {
            if cfg.layer_dims[0] != d {
                return Err(CliError::Config(format!("layer_dims: first entry must be the input width {d}")));
            }
            let fresh = init_model(seed, &cfg.layer_dims, c)?;
            let (model, report) = train_source(fresh, &[bench.source_set()?], &cfg.source_config(seed))?;
            (model, Some(report.best_val_accuracy))
        }
    };
    Ok(Prepared {
        seed,
        benchmark: bench,
        target,
        model,
        source_val_accuracy,
    })
}

/// One adaptation run: a label for the summary plus its settings.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub run_id: String,
    pub label: String,
    pub seed: u64,
    pub adapt: AdaptConfig,
}

pub struct RunResult {
    pub spec: RunSpec,
    pub metrics: Metrics,
}

pub fn execute(prepared: &[Prepared], spec: &RunSpec) -> Result<RunResult, CliError> {
    let p = prepared
        .iter()
        .find(|p| p.seed == spec.seed)
        .ok_or_else(|| anyhow::anyhow!("no prepared benchmark for seed {}", spec.seed))?;
    let stream = stream_batches(&p.target, spec.adapt.batch_size, spec.seed)?;
    let mut model = p.model.clone();
    let metrics = adapt_stream(&mut model, &stream, &spec.adapt)
        .with_context(|| format!("run {}", spec.run_id))?;
    Ok(RunResult {
        spec: spec.clone(),
        metrics,
    })
}

/// Per-batch rows in the fixed column order.
pub fn write_run_csv<W: Write>(mut w: W, r: &RunResult) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    let m = &r.metrics;
    let cumulative = m.cumulative_trace();
    for i in 0..m.per_batch_accuracy.len() {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.spec.run_id,
            r.spec.label,
            r.spec.seed,
            i,
            m.per_batch_accuracy[i],
            cumulative[i],
            m.per_batch_loss[i],
            m.per_batch_reliable[i],
            m.per_batch_bank_size[i]
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupSummary {
    pub mean: f64,
    pub std: f64,
    pub per_seed: BTreeMap<String, f64>,
    pub skipped_batches: BTreeMap<String, usize>,
    /// Seeds whose run hit non-finite losses or gradients.
    pub flagged: Vec<u64>,
    pub config_echo: serde_json::Value,
}

pub type Summary = BTreeMap<String, GroupSummary>;

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn echo(spec: &RunSpec, cfg: &RunConfig) -> serde_json::Value {
    let mut v = cfg.to_json();
    let a = &spec.adapt;
    if let Some(o) = v.as_object_mut() {
        o.insert("method".into(), a.method.name().into());
        o.insert("lr".into(), a.lr.into());
        o.insert("lambda".into(), a.lambda.into());
        o.insert("k".into(), a.k.into());
        o.insert("m".into(), serde_json::to_value(FilterCount(a.m)).expect("serializes"));
        o.insert("sd".into(), a.ablation.sd.into());
        o.insert("ef".into(), a.ablation.ef.into());
        o.insert("cf".into(), a.ablation.cf.into());
        o.insert("mslc".into(), a.ablation.mslc.into());
        o.remove("methods");
        o.remove("seeds");
    }
    v
}

pub fn summarize(results: &[RunResult], cfg: &RunConfig) -> Summary {
    let mut groups: BTreeMap<String, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups.entry(r.spec.label.clone()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(label, runs)| {
            let accs: Vec<f64> = runs.iter().map(|r| r.metrics.cumulative_accuracy).collect();
            let (mean, std) = mean_std(&accs);
            let s = GroupSummary {
                mean,
                std,
                per_seed: runs.iter().map(|r| (r.spec.seed.to_string(), r.metrics.cumulative_accuracy)).collect(),
                skipped_batches: runs.iter().map(|r| (r.spec.seed.to_string(), r.metrics.skipped_batches)).collect(),
                flagged: runs.iter().filter(|r| r.metrics.nonfinite_batches > 0).map(|r| r.spec.seed).collect(),
                config_echo: echo(&runs[0].spec, cfg),
            };
            (label, s)
        })
        .collect()
}

/// Everything an experiment produced.
pub struct Outcome {
    pub results: Vec<RunResult>,
    pub summary: Summary,
    pub output_dir: PathBuf,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).context("serializing json")?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn prepare_all(cfg: &RunConfig) -> Result<Vec<Prepared>, CliError> {
    let prepared: Vec<Prepared> = cfg.seeds.par_iter().map(|&s| prepare(cfg, s)).collect::<Result<_, _>>()?;
    let dir = cfg.output_dir.join("checkpoints");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for p in &prepared {
        if p.source_val_accuracy.is_some() {
            p.model.save(dir.join(format!("source-seed{}.ckpt", p.seed)))?;
        }
        if cfg.export_data {
            let data = cfg.output_dir.join("data");
            fs::create_dir_all(&data)?;
            let write = |name: String, set: &LabeledSet| -> Result<(), CliError> {
                let f = fs::File::create(data.join(name))?;
                set.write_csv(BufWriter::new(f))?;
                Ok(())
            };
            write(format!("source-seed{}.csv", p.seed), &p.benchmark.source_set()?)?;
            write(format!("target-seed{}.csv", p.seed), &p.target)?;
        }
    }
    Ok(prepared)
}

/// Prepares every seed, executes `specs` in parallel and writes all
/// artifacts under `cfg.output_dir`.
pub fn run_specs(cfg: &RunConfig, specs: Vec<RunSpec>, command: &str) -> Result<Outcome, CliError> {
    let started = unix_now();
    let clock = Instant::now();
    let prepared = prepare_all(cfg)?;
    let results: Vec<RunResult> = specs.par_iter().map(|s| execute(&prepared, s)).collect::<Result<_, _>>()?;

    let runs_dir = cfg.output_dir.join("runs");
    fs::create_dir_all(&runs_dir).with_context(|| format!("creating {}", runs_dir.display()))?;
    for r in &results {
        let path = runs_dir.join(format!("{}.csv", file_stem(&r.spec.run_id)));
        let f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        let mut w = BufWriter::new(f);
        write_run_csv(&mut w, r)?;
        w.flush()?;
    }
    let summary = summarize(&results, cfg);
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;

    let source: BTreeMap<String, Option<f64>> =
        prepared.iter().map(|p| (p.seed.to_string(), p.source_val_accuracy)).collect();
    let meta = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix": started,
        "finished_unix": unix_now(),
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
        "source_val_accuracy": source,
        "runs": results.len(),
    });
    write_json(&cfg.output_dir.join("metadata.json"), &meta)?;
    Ok(Outcome {
        results,
        summary,
        output_dir: cfg.output_dir.clone(),
    })
}

fn file_stem(run_id: &str) -> String {
    run_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Every configured method on every seed.
pub fn run(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let mut specs = Vec::new();
    for method in cfg.methods()? {
        for &seed in &cfg.seeds {
            specs.push(RunSpec {
                run_id: format!("{method}-seed{seed}"),
                label: method.name().to_string(),
                seed,
                adapt: cfg.adapt_config(method, seed),
            });
        }
    }
    run_specs(cfg, specs, "run")
}

/// Like [`run`], but requires a source checkpoint instead of training one.
pub fn adapt(cfg: &RunConfig) -> Result<Outcome, CliError> {
    if cfg.checkpoint.is_none() {
        return Err(CliError::Config("checkpoint: adapt needs a source checkpoint".into()));
    }
    let mut specs = Vec::new();
    for method in cfg.methods()? {
        for &seed in &cfg.seeds {
            specs.push(RunSpec {
                run_id: format!("{method}-seed{seed}"),
                label: method.name().to_string(),
                seed,
                adapt: cfg.adapt_config(method, seed),
            });
        }
    }
    run_specs(cfg, specs, "adapt")
}

/// The four cumulative rungs of the full method, keyed `SD` .. `SD+EF+CF+MSLC`.
pub fn ablate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let mut specs = Vec::new();
    for (name, ablation) in Ablation::ladder() {
        for &seed in &cfg.seeds {
            specs.push(RunSpec {
                run_id: format!("{name}-seed{seed}"),
                label: name.to_string(),
                seed,
                adapt: AdaptConfig {
                    ablation,
                    ..cfg.adapt_config(Method::Ours, seed)
                },
            });
        }
    }
    run_specs(cfg, specs, "ablate")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    K,
    M,
    Lambda,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::K => "k",
            SweepParam::M => "m",
            SweepParam::Lambda => "lambda",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(SweepParam::K),
            "m" => Ok(SweepParam::M),
            "lambda" => Ok(SweepParam::Lambda),
            _ => Err(CliError::Config(format!("sweep parameter `{s}` is not one of k, m, lambda"))),
        }
    }
}

/// A sweep table row.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub mean_accuracy: f64,
    pub std: f64,
}

fn apply_value(base: &AdaptConfig, param: SweepParam, value: &str) -> Result<AdaptConfig, CliError> {
    let bad = || CliError::Config(format!("{}: cannot use sweep value `{value}`", param.name()));
    let mut a = base.clone();
    match param {
        SweepParam::K => a.k = value.trim().parse().map_err(|_| bad())?,
        SweepParam::M => a.m = value.parse::<FilterCount>().map_err(|_| bad())?.0,
        SweepParam::Lambda => a.lambda = value.trim().parse().map_err(|_| bad())?,
    }
    a.validate().map_err(|e| CliError::Config(format!("{}: {e}", param.name())))?;
    Ok(a)
}

/// One run of the full method per (value, seed); writes `sweep_<param>.csv`
/// with columns `value,mean_accuracy,std`.
pub fn sweep(cfg: &RunConfig, param: SweepParam, values: &[String]) -> Result<(Outcome, Vec<SweepRow>), CliError> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let mut specs = Vec::new();
    let mut labels = Vec::new();
    for value in values {
        let label = format!("{}={}", param.name(), value.trim());
        for &seed in &cfg.seeds {
            let adapt = apply_value(&cfg.adapt_config(Method::Ours, seed), param, value)?;
            specs.push(RunSpec {
                run_id: format!("{}{}-seed{seed}", param.name(), value.trim()),
                label: label.clone(),
                seed,
                adapt,
            });
        }
        labels.push((value.trim().to_string(), label));
    }
    let outcome = run_specs(cfg, specs, "sweep")?;
    let rows: Vec<SweepRow> = labels
        .into_iter()
        .map(|(value, label)| {
            let g = &outcome.summary[&label];
            SweepRow {
                value,
                mean_accuracy: g.mean,
                std: g.std,
            }
        })
        .collect();
    let path = cfg.output_dir.join(format!("sweep_{}.csv", param.name()));
    let mut text = String::from("value,mean_accuracy,std\n");
    for r in &rows {
        text += &format!("{},{},{}\n", r.value, r.mean_accuracy, r.std);
    }
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok((outcome, rows))
}

/// Trains and saves the source model of every seed. Returns held-out source
/// accuracy per seed.
pub fn train_sources(cfg: &RunConfig) -> Result<Vec<(u64, f64)>, CliError> {
    let prepared = prepare_all(cfg)?;
    prepared
        .iter()
        .map(|p| {
            let acc = match p.source_val_accuracy {
                Some(a) => a,
                None => accuracy(&p.model, &p.benchmark.source_set()?)?,
            };
            Ok((p.seed, acc))
        })
        .collect()
}
