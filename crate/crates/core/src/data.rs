//! Synthetic multi-domain Gaussian benchmarks and batch streaming.
//!
//! Every domain draws `x = s·R(θ)(μ_y + σε) + t + ν·η` with `ε, η ~ N(0, I)`,
//! where `R(θ)` rotates the first two coordinates, `t` is a translation and
//! `ν` the noise severity times the spec's noise unit.

use std::f64::consts::FRAC_PI_4;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 5;
pub const INPUT_DIM: usize = 16;
pub const SOURCE_SIZE: usize = 2000;
pub const TARGET_SIZE: usize = 5000;
pub const DEFAULT_BATCH_SIZE: usize = 64;

/// Internal constants of the generated benchmarks. [`Default`] holds the
/// calibrated values.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkParams {
    pub num_classes: usize,
    pub input_dim: usize,
    pub source_size: usize,
    pub target_size: usize,
    /// Within-class standard deviation, relative to the unit distance
    /// between class means.
    pub class_cov_scale: f64,
    /// Standard deviation of the extra target noise at severity 1.
    pub noise_unit: f64,
    /// Target transform at full shift strength.
    pub max_rotation: f64,
    pub max_translation: f64,
    pub max_noise: f64,
    /// Per-domain jitter of the source domains.
    pub source_rotation_jitter: f64,
    pub source_translation_jitter: f64,
    pub source_scale_jitter: f64,
    /// Shift strength of the covariate transform of label-shift targets.
    pub label_shift_strength: f64,
    /// Lay the first two simplex axes along the rotation plane.
    pub aligned_plane: bool,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        BenchmarkParams {
            num_classes: NUM_CLASSES,
            input_dim: INPUT_DIM,
            source_size: SOURCE_SIZE,
            target_size: TARGET_SIZE,
            class_cov_scale: 0.2,
            noise_unit: 0.15,
            max_rotation: FRAC_PI_4,
            max_translation: 0.5,
            max_noise: 1.0,
            source_rotation_jitter: 0.1,
            source_translation_jitter: 0.2,
            source_scale_jitter: 0.05,
            label_shift_strength: 0.2,
            aligned_plane: true,
        }
    }
}

/// Class counts of a strongly imbalanced five-class domain (LabelMe).
pub const LABELME_COUNTS: [f64; 5] = [80.0, 1209.0, 88.0, 42.0, 1237.0];

/// [`LABELME_COUNTS`] normalised to a probability vector.
pub fn labelme_prior() -> Vec<f64> {
    let total: f64 = LABELME_COUNTS.iter().sum();
    LABELME_COUNTS.iter().map(|c| c / total).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainTransform {
    /// Radians, applied in the plane of the first two coordinates.
    pub rotation: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
}

impl DomainTransform {
    pub fn identity(dim: usize) -> Self {
        DomainTransform {
            rotation: 0.0,
            translation: vec![0.0; dim],
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: &mut [f64]) {
        if x.len() >= 2 {
            let (s, c) = self.rotation.sin_cos();
            let (a, b) = (x[0], x[1]);
            x[0] = c * a - s * b;
            x[1] = s * a + c * b;
        }
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v = self.scale * *v + t;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub class_means: Vec<Vec<f64>>,
    pub class_cov_scale: f64,
    pub transform: DomainTransform,
    pub noise_severity: f64,
    /// Noise standard deviation per unit of severity.
    pub noise_unit: f64,
    pub label_prior: Vec<f64>,
    pub size: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let (c, d) = (self.num_classes, self.input_dim);
        if c < 2 || d < 2 {
            return Err(Error::invalid("a domain needs at least 2 classes and 2 input dimensions"));
        }
        if self.class_means.len() != c || self.class_means.iter().any(|m| m.len() != d) {
            return Err(Error::invalid("class means must be num_classes vectors of length input_dim"));
        }
        if self.transform.translation.len() != d {
            return Err(Error::invalid("translation length differs from input_dim"));
        }
        if !(self.class_cov_scale >= 0.0) || !(self.noise_severity >= 0.0) || !(self.noise_unit >= 0.0) || !(self.transform.scale > 0.0) {
            return Err(Error::invalid("scales and noise severity must be nonnegative"));
        }
        validate_prior(&self.label_prior, c)
    }

    /// Draws `size` labeled samples; deterministic in `seed`.
    pub fn sample(&self) -> Result<LabeledSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let labels = WeightedIndex::new(&self.label_prior).map_err(|e| Error::invalid(e.to_string()))?;
        let d = self.input_dim;
        let mut x = Vec::with_capacity(self.size * d);
        let mut y = Vec::with_capacity(self.size);
        let mut row = vec![0.0; d];
        for _ in 0..self.size {
            let k = labels.sample(&mut rng);
            for (v, m) in row.iter_mut().zip(&self.class_means[k]) {
                let e: f64 = rng.sample(StandardNormal);
                *v = m + self.class_cov_scale * e;
            }
            self.transform.apply(&mut row);
            for v in row.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v += self.noise_severity * self.noise_unit * e;
            }
            x.extend_from_slice(&row);
            y.push(k);
        }
        LabeledSet::new(d, x, y)
    }
}

fn validate_prior(prior: &[f64], c: usize) -> Result<()> {
    if prior.len() != c {
        return Err(Error::invalid(format!("label prior has {} entries, expected {c}", prior.len())));
    }
    if prior.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid("label prior entries must be finite and nonnegative"));
    }
    let total: f64 = prior.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("label prior sums to {total}, not 1")));
    }
    Ok(())
}

/// Source domains plus one target domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub sources: Vec<DomainSpec>,
    pub target: DomainSpec,
}

impl Benchmark {
    /// Pooled samples of every source domain.
    pub fn source_set(&self) -> Result<LabeledSet> {
        let sets = self.sources.iter().map(DomainSpec::sample).collect::<Result<Vec<_>>>()?;
        LabeledSet::concat(&sets)
    }
}

/// Vertices of a regular simplex with unit edge length, placed in a random
/// orientation of `dim`-dimensional space.
fn simplex_means(rng: &mut ChaCha8Rng, c: usize, dim: usize, aligned_plane: bool) -> Vec<Vec<f64>> {
    // columns of a random orthonormal frame via Gram-Schmidt
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(c);
    while frame.len() < c {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if aligned_plane && frame.len() < 2 {
            v = (0..dim).map(|j| if j == frame.len() { 1.0 } else { 0.0 }).collect();
        }
        for u in &frame {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            frame.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let centre = 1.0 / c as f64;
    let edge = std::f64::consts::SQRT_2;
    (0..c)
        .map(|k| {
            let mut m = vec![0.0; dim];
            for (j, u) in frame.iter().enumerate() {
                let coef = (if j == k { 1.0 } else { 0.0 } - centre) / edge;
                m.iter_mut().zip(u).for_each(|(a, b)| *a += coef * b);
            }
            m
        })
        .collect()
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

struct Layout {
    means: Vec<Vec<f64>>,
    sources: Vec<DomainSpec>,
    target_direction: Vec<f64>,
    target_seed: u64,
}

fn layout(bp: &BenchmarkParams, seed: u64, num_sources: usize) -> Result<Layout> {
    if num_sources < 2 {
        return Err(Error::invalid("at least 2 source domains are required"));
    }
    if bp.num_classes < 2 || bp.input_dim < bp.num_classes.max(2) {
        return Err(Error::invalid("input_dim must be at least num_classes (and 2)"));
    }
    let (c, d) = (bp.num_classes, bp.input_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = simplex_means(&mut rng, c, d, bp.aligned_plane);
    let uniform = vec![1.0 / c as f64; c];
    let sources = (0..num_sources)
        .map(|_| {
            let direction = random_direction(&mut rng, d);
            let rot = bp.source_rotation_jitter;
            let sc = bp.source_scale_jitter;
            let transform = DomainTransform {
                rotation: if rot > 0.0 { rng.random_range(-rot..=rot) } else { 0.0 },
                translation: direction.iter().map(|v| v * bp.source_translation_jitter).collect(),
                scale: 1.0 + if sc > 0.0 { rng.random_range(-sc..=sc) } else { 0.0 },
            };
            DomainSpec {
                num_classes: c,
                input_dim: d,
                class_means: means.clone(),
                class_cov_scale: bp.class_cov_scale,
                transform,
                noise_severity: 0.0,
                noise_unit: bp.noise_unit,
                label_prior: uniform.clone(),
                size: bp.source_size,
                seed: rng.next_u64(),
            }
        })
        .collect();
    let target_direction = random_direction(&mut rng, d);
    Ok(Layout {
        means,
        sources,
        target_direction,
        target_seed: rng.next_u64(),
    })
}

fn shifted_target(bp: &BenchmarkParams, l: &Layout, strength: f64, prior: Vec<f64>) -> DomainSpec {
    DomainSpec {
        num_classes: bp.num_classes,
        input_dim: bp.input_dim,
        class_means: l.means.clone(),
        class_cov_scale: bp.class_cov_scale,
        transform: DomainTransform {
            rotation: strength * bp.max_rotation,
            translation: l.target_direction.iter().map(|v| v * strength * bp.max_translation).collect(),
            scale: 1.0,
        },
        noise_severity: strength * bp.max_noise,
        noise_unit: bp.noise_unit,
        label_prior: prior,
        size: bp.target_size,
        seed: l.target_seed,
    }
}

/// Source domains with small per-domain transforms and a target whose
/// rotation, translation and noise grow linearly with `shift_strength`.
pub fn make_covariate_benchmark(seed: u64, num_sources: usize, shift_strength: f64) -> Result<Benchmark> {
    make_covariate_benchmark_with(&BenchmarkParams::default(), seed, num_sources, shift_strength)
}

pub fn make_covariate_benchmark_with(
    bp: &BenchmarkParams,
    seed: u64,
    num_sources: usize,
    shift_strength: f64,
) -> Result<Benchmark> {
    if !(0.0..=1.0).contains(&shift_strength) {
        return Err(Error::invalid(format!("shift_strength {shift_strength} outside [0, 1]")));
    }
    let l = layout(bp, seed, num_sources)?;
    let target = shifted_target(bp, &l, shift_strength, vec![1.0 / bp.num_classes as f64; bp.num_classes]);
    Ok(Benchmark {
        sources: l.sources,
        target,
    })
}

/// Same sources as [`make_covariate_benchmark`] for this seed; the target
/// follows `prior` under a mild covariate transform.
pub fn make_label_shift_benchmark(seed: u64, num_sources: usize, prior: &[f64]) -> Result<Benchmark> {
    make_label_shift_benchmark_with(&BenchmarkParams::default(), seed, num_sources, prior)
}

pub fn make_label_shift_benchmark_with(
    bp: &BenchmarkParams,
    seed: u64,
    num_sources: usize,
    prior: &[f64],
) -> Result<Benchmark> {
    validate_prior(prior, bp.num_classes)?;
    let l = layout(bp, seed, num_sources)?;
    let target = shifted_target(bp, &l, bp.label_shift_strength, prior.to_vec());
    Ok(Benchmark {
        sources: l.sources,
        target,
    })
}

/// Row-major inputs with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    dim: usize,
    x: Vec<f64>,
    y: Vec<usize>,
}

impl LabeledSet {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<usize>) -> Result<Self> {
        if dim == 0 || x.len() != dim * y.len() {
            return Err(Error::invalid(format!("{} values do not form {} rows of width {dim}", x.len(), y.len())));
        }
        Ok(LabeledSet { dim, x, y })
    }

    pub fn concat(sets: &[LabeledSet]) -> Result<Self> {
        let dim = sets.first().map(|s| s.dim).ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        if sets.iter().any(|s| s.dim != dim) {
            return Err(Error::invalid("sets differ in input width"));
        }
        Ok(LabeledSet {
            dim,
            x: sets.iter().flat_map(|s| s.x.iter().copied()).collect(),
            y: sets.iter().flat_map(|s| s.y.iter().copied()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            dim: self.dim,
            x: idx.iter().flat_map(|&i| self.input(i).iter().copied()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Inputs as a `[n, dim]` matrix.
    pub fn inputs(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.x.clone()).expect("consistent by construction")
    }

    /// Seeded shuffle, then the first `train_fraction` of rows for training
    /// and the rest for validation.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::invalid("train fraction must lie in (0, 1)"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = (self.len() as f64 * train_fraction).round() as usize;
        Ok((self.subset(&idx[..cut]), self.subset(&idx[cut..])))
    }

    /// CSV with header `y,x0,x1,...`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("y".to_string()).chain((0..self.dim).map(|j| format!("x{j}"))).collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.input(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{}", self.y[i], row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let dim = cols.len().saturating_sub(1);
        let well_formed = cols.first() == Some(&"y") && cols[1..].iter().enumerate().all(|(j, c)| *c == format!("x{j}"));
        if dim == 0 || !well_formed {
            return Err(Error::Format(format!("unexpected header `{header}`")));
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::Format(format!("row {} has {} fields", n + 1, fields.len())));
            }
            let bad = |f: &str| Error::Format(format!("row {}: cannot parse `{f}`", n + 1));
            y.push(fields[0].parse::<usize>().map_err(|_| bad(fields[0]))?);
            for f in &fields[1..] {
                x.push(f.parse::<f64>().map_err(|_| bad(f))?);
            }
        }
        LabeledSet::new(dim, x, y)
    }
}

/// Labels of a streamed batch, usable only for scoring predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of predictions that match the hidden labels.
    pub fn correct(&self, predictions: &[usize]) -> usize {
        self.0.iter().zip(predictions).filter(|(a, b)| a == b).count()
    }
}

/// One batch of a target stream: unlabeled inputs plus hidden labels.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub inputs: Tensor,
    pub labels: HiddenLabels,
}

impl StreamBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Shuffles once with `seed`, then cuts contiguous batches; the last batch
/// may be short.
pub fn stream_batches(set: &LabeledSet, batch_size: usize, seed: u64) -> Result<Vec<StreamBatch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if set.is_empty() {
        return Err(Error::invalid("cannot stream an empty sample set"));
    }
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx
        .chunks(batch_size)
        .map(|chunk| {
            let part = set.subset(chunk);
            StreamBatch {
                inputs: part.inputs(),
                labels: HiddenLabels(part.y),
            }
        })
        .collect())
}
