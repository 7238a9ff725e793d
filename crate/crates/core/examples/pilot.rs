//! Pilot run over the covariate and label-shift benchmarks.
//!
//! Prints the cumulative target accuracy of every method and ablation rung.
//! Benchmark overrides come from `PILOT_PARAMS` (`key=value,...`); seeds are
//! `PILOT_SEED_BASE..PILOT_SEED_BASE + PILOT_SEEDS`.

use std::time::Instant;

use tta_core::adapt::{adapt_stream, train_source, Ablation, AdaptConfig, Method, SourceConfig};
use tta_core::data::{
    labelme_prior, make_covariate_benchmark_with, make_label_shift_benchmark_with, stream_batches, Benchmark,
    BenchmarkParams,
};
use tta_core::model::init_model;

fn run(bench: &Benchmark, model: &tta_core::model::Model, cfg: &AdaptConfig) -> f64 {
    let target = bench.target.sample().unwrap();
    let stream = stream_batches(&target, cfg.batch_size, cfg.seed).unwrap();
    let mut m = model.clone();
    adapt_stream(&mut m, &stream, cfg).unwrap().cumulative_accuracy
}

fn params() -> BenchmarkParams {
    let mut bp = BenchmarkParams::default();
    let spec = std::env::var("PILOT_PARAMS").unwrap_or_default();
    for kv in spec.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').expect("key=value");
        let x: f64 = v.parse().expect("number");
        match k {
            "class_cov_scale" => bp.class_cov_scale = x,
            "noise_unit" => bp.noise_unit = x,
            "max_rotation" => bp.max_rotation = x,
            "max_translation" => bp.max_translation = x,
            "max_noise" => bp.max_noise = x,
            "source_rotation_jitter" => bp.source_rotation_jitter = x,
            "source_translation_jitter" => bp.source_translation_jitter = x,
            "source_scale_jitter" => bp.source_scale_jitter = x,
            "label_shift_strength" => bp.label_shift_strength = x,
            "aligned_plane" => bp.aligned_plane = x != 0.0,
            _ => panic!("unknown key {k}"),
        }
    }
    bp
}

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() {
    let bp = params();
    println!("{bp:?}");
    let base = AdaptConfig {
        lr: env("PILOT_LR", 1e-3),
        k: env("PILOT_K", 3),
        lambda: env("PILOT_LAMBDA", 0.1),
        m: Some(env("PILOT_M", 20)),
        ..AdaptConfig::default()
    };
    let seeds = env("PILOT_SEEDS", 3u64);
    let seed_base = env("PILOT_SEED_BASE", 0u64);
    let mut cov: Vec<Vec<f64>> = vec![Vec::new(); 5];
    let mut lab: Vec<Vec<f64>> = vec![Vec::new(); 5];
    let mut ladder: Vec<Vec<f64>> = vec![Vec::new(); 4];
    let mut source = Vec::new();
    let start = Instant::now();
    for seed in seed_base..seed_base + seeds {
        let cb = make_covariate_benchmark_with(&bp, seed, 3, 1.0).unwrap();
        let lb = make_label_shift_benchmark_with(&bp, seed, 3, &labelme_prior()).unwrap();
        let model = init_model(seed, &[16, 64, 64, 32], 5).unwrap();
        let scfg = SourceConfig { seed, ..SourceConfig::default() };
        let (model, report) = train_source(model, &[cb.source_set().unwrap()], &scfg).unwrap();
        source.push(report.best_val_accuracy);
        for (i, method) in Method::ALL.into_iter().enumerate() {
            let cfg = AdaptConfig { method, seed, ..base.clone() };
            cov[i].push(run(&cb, &model, &cfg));
            lab[i].push(run(&lb, &model, &cfg));
        }
        for (i, (_, ablation)) in Ablation::ladder().into_iter().enumerate() {
            let cfg = AdaptConfig { seed, ablation, ..base.clone() };
            ladder[i].push(run(&cb, &model, &cfg));
        }
    }
    println!("source val {:.4} ({:?})", mean(&source), start.elapsed());
    for (i, method) in Method::ALL.into_iter().enumerate() {
        println!(
            "{:5} cov {:.4} {:?}  label {:.4} {:?}",
            method.name(),
            mean(&cov[i]),
            cov[i].iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            mean(&lab[i]),
            lab[i].iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
    }
    let names: Vec<&str> = Ablation::ladder().iter().map(|(n, _)| *n).collect();
    for (i, n) in names.iter().enumerate() {
        println!("{n:14} {:.4}", mean(&ladder[i]));
    }
    let c: Vec<f64> = cov.iter().map(|v| mean(v)).collect();
    let l: Vec<f64> = lab.iter().map(|v| mean(v)).collect();
    let (erm, bn, tent, pl, ours) = (0, 1, 2, 3, 4);
    println!("drop erm vs source {:.2} pts", 100.0 * (mean(&source) - c[erm]));
    println!("ours-erm {:+.2}  ours-max(others) {:+.2}", 100.0 * (c[ours] - c[erm]), 100.0 * (c[ours] - c[tent].max(c[pl]).max(c[bn])));
    let lm: Vec<f64> = ladder.iter().map(|v| mean(v)).collect();
    println!(
        "ladder steps {:+.2} {:+.2} {:+.2}  full-sd {:+.2}",
        100.0 * (lm[1] - lm[0]),
        100.0 * (lm[2] - lm[1]),
        100.0 * (lm[3] - lm[2]),
        100.0 * (lm[3] - lm[0])
    );
    for m in [ours, tent, pl] {
        println!(
            "gain {:5} label {:+.2} cov {:+.2}",
            Method::ALL[m].name(),
            100.0 * (l[m] - l[erm]),
            100.0 * (c[m] - c[erm])
        );
    }
}
