//! Toy classifier `g = h ∘ f`: a fully-connected backbone with per-feature
//! normalization after every hidden linear layer, followed by a linear head.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{column_moments, Tape, Tensor};
use crate::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_NORM_EPS: f64 = 1e-10;

const CHECKPOINT_MAGIC: &str = "tta-checkpoint v1";

/// Which statistics the normalization layers use in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    /// Running statistics, left untouched.
    Frozen,
    /// Current-batch statistics; running statistics follow by EMA.
    Refresh,
}

/// Which parameters an optimizer may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UpdateScope {
    #[default]
    All,
    /// Only the normalization scale and shift.
    AffineOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Normalization scale or shift.
    pub affine: bool,
}

/// Running statistics of one per-feature normalization layer. Its trainable
/// scale and shift live in the model's parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSlots {
    weight: usize,
    bias: usize,
    /// (scale, shift, index into `norms`)
    norm: Option<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layer_dims: Vec<usize>,
    num_classes: usize,
    params: Vec<Param>,
    norms: Vec<FeatureNorm>,
    layers: Vec<LayerSlots>,
    head: (usize, usize),
}

/// Builds a model with fan-in scaled uniform weights drawn from `seed`.
///
/// `layer_dims = [input, hidden.., feature_dim]`; every linear layer except
/// the last backbone one is followed by normalization and relu.
pub fn init_model(seed: u64, layer_dims: &[usize], num_classes: usize) -> Result<Model> {
    if layer_dims.is_empty() {
        return Err(Error::invalid("layer_dims must be nonempty"));
    }
    if layer_dims.contains(&0) {
        return Err(Error::invalid("layer dimensions must be positive"));
    }
    if num_classes < 2 {
        return Err(Error::invalid("num_classes must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::skeleton(layer_dims, num_classes);
    // biases share the fan-in of their weight matrix
    let slots: Vec<(usize, usize, usize)> = model
        .layers
        .iter()
        .map(|l| (l.weight, l.bias, model.params[l.weight].shape[1]))
        .chain(std::iter::once((
            model.head.0,
            model.head.1,
            model.params[model.head.0].shape[1],
        )))
        .collect();
    for (w, b, fan_in) in slots {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in model.params[w].values.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        for v in model.params[b].values.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(model)
}

impl Model {
    fn skeleton(layer_dims: &[usize], num_classes: usize) -> Model {
        let mut params = Vec::new();
        let mut norms = Vec::new();
        let mut layers = Vec::new();
        let n_linear = layer_dims.len() - 1;
        let push = |params: &mut Vec<Param>, name: String, shape: Vec<usize>, fill: f64, affine| {
            let n = shape.iter().product();
            params.push(Param {
                name,
                shape,
                values: vec![fill; n],
                affine,
            });
            params.len() - 1
        };
        for i in 0..n_linear {
            let (fan_in, fan_out) = (layer_dims[i], layer_dims[i + 1]);
            let weight = push(&mut params, format!("backbone.{i}.weight"), vec![fan_out, fan_in], 0.0, false);
            let bias = push(&mut params, format!("backbone.{i}.bias"), vec![fan_out], 0.0, false);
            let norm = if i + 1 < n_linear {
                let scale = push(&mut params, format!("norm.{i}.scale"), vec![fan_out], 1.0, true);
                let shift = push(&mut params, format!("norm.{i}.shift"), vec![fan_out], 0.0, true);
                norms.push(FeatureNorm {
                    running_mean: vec![0.0; fan_out],
                    running_var: vec![1.0; fan_out],
                    momentum: DEFAULT_MOMENTUM,
                    eps: DEFAULT_NORM_EPS,
                });
                Some((scale, shift, norms.len() - 1))
            } else {
                None
            };
            layers.push(LayerSlots { weight, bias, norm });
        }
        let d = *layer_dims.last().expect("nonempty");
        let hw = push(&mut params, "head.weight".into(), vec![num_classes, d], 0.0, false);
        let hb = push(&mut params, "head.bias".into(), vec![num_classes], 0.0, false);
        Model {
            layer_dims: layer_dims.to_vec(),
            num_classes,
            params,
            norms,
            layers,
            head: (hw, hb),
        }
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_dims.last().expect("nonempty")
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Every trainable array exactly once, in a fixed order.
    pub fn parameters(&self) -> &[Param] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn norms(&self) -> &[FeatureNorm] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [FeatureNorm] {
        &mut self.norms
    }

    /// Head weight matrix `W` with shape `C×d`.
    pub fn head_weights(&self) -> Tensor {
        let p = &self.params[self.head.0];
        Tensor::new(p.shape.clone(), p.values.clone()).expect("param shape is consistent")
    }

    pub fn head_bias(&self) -> &[f64] {
        &self.params[self.head.1].values
    }

    /// Whether parameter `index` is moved under `scope`.
    pub fn is_trainable(&self, index: usize, scope: UpdateScope) -> bool {
        match scope {
            UpdateScope::All => true,
            UpdateScope::AffineOnly => self.params[index].affine,
        }
    }

    /// Places every parameter on `tape`: leaves when trainable under `scope`,
    /// constants otherwise (`None` makes everything constant).
    pub fn bind(&self, tape: &mut Tape, scope: Option<UpdateScope>) -> Vec<Tensor> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let t = Tensor::new(p.shape.clone(), p.values.clone()).expect("param shape is consistent");
                match scope {
                    Some(s) if self.is_trainable(i, s) => tape.leaf(t),
                    _ => tape.constant(t),
                }
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("expected a batch of width {}, got shape {:?}", self.input_dim(), x.shape()),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape` using parameter handles from
    /// [`Model::bind`]. Returns `(z, p)`. Refresh mode updates running
    /// statistics by exponential moving average.
    pub fn forward_on(
        &mut self,
        tape: &mut Tape,
        bound: &[Tensor],
        x: &Tensor,
        mode: StatsMode,
    ) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        if mode == StatsMode::Refresh && x.shape()[0] < 2 {
            return Err(Error::invalid("refresh-mode normalization needs a batch of at least 2"));
        }
        let mut h = x.clone();
        for slot in self.layers.clone() {
            h = linear(tape, &h, &bound[slot.weight], &bound[slot.bias])?;
            if let Some((scale, shift, ni)) = slot.norm {
                let standardized = match mode {
                    StatsMode::Frozen => self.frozen_standardize(tape, &h, ni)?,
                    StatsMode::Refresh => {
                        let (m, n) = (h.shape()[0], h.shape()[1]);
                        let (mean, var) = column_moments(h.values(), m, n);
                        let norm = &mut self.norms[ni];
                        let out = tape.batch_standardize(&h, norm.eps)?;
                        let mom = norm.momentum;
                        for (r, b) in norm.running_mean.iter_mut().zip(&mean) {
                            *r = (1.0 - mom) * *r + mom * b;
                        }
                        for (r, b) in norm.running_var.iter_mut().zip(&var) {
                            *r = (1.0 - mom) * *r + mom * b;
                        }
                        out
                    }
                };
                let scaled = tape.mul_row(&standardized, &bound[scale])?;
                let shifted = tape.add_row(&scaled, &bound[shift])?;
                h = tape.relu(&shifted)?;
            }
        }
        let z = h;
        let p = linear(tape, &z, &bound[self.head.0], &bound[self.head.1])?;
        Ok((z, p))
    }

    fn frozen_standardize(&self, tape: &mut Tape, h: &Tensor, ni: usize) -> Result<Tensor> {
        let norm = &self.norms[ni];
        let neg_mean = Tensor::vector(norm.running_mean.iter().map(|m| -m).collect());
        let inv_std = Tensor::vector(norm.running_var.iter().map(|v| 1.0 / (v + norm.eps).sqrt()).collect());
        let centered = tape.add_row(h, &neg_mean)?;
        tape.mul_row(&centered, &inv_std)
    }

    /// Gradient-free forward pass returning `(z, p)` values.
    pub fn forward(&mut self, x: &Tensor, mode: StatsMode) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, None);
        let (z, p) = self.forward_on(&mut tape, &bound, x, mode)?;
        Ok((z.detach(), p.detach()))
    }

    /// Frozen-mode forward that leaves the model untouched.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.clone().forward(x, StatsMode::Frozen)
    }

    /// Replaces every normalization layer's running statistics with the
    /// statistics of `x` (test-time statistics refresh). Weights are untouched.
    pub fn update_norm_stats(&mut self, x: &Tensor) -> Result<()> {
        self.check_input(x)?;
        if x.shape()[0] < 2 {
            return Err(Error::invalid("statistics refresh needs a batch of at least 2"));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, None);
        let mut h = x.clone();
        for slot in self.layers.clone() {
            h = linear(&mut tape, &h, &bound[slot.weight], &bound[slot.bias])?;
            if let Some((scale, shift, ni)) = slot.norm {
                let (m, n) = (h.shape()[0], h.shape()[1]);
                let (mean, var) = column_moments(h.values(), m, n);
                self.norms[ni].running_mean = mean;
                self.norms[ni].running_var = var;
                let standardized = self.frozen_standardize(&mut tape, &h, ni)?;
                let scaled = tape.mul_row(&standardized, &bound[scale])?;
                let shifted = tape.add_row(&scaled, &bound[shift])?;
                h = tape.relu(&shifted)?;
            }
        }
        Ok(())
    }

    /// Writes a line-oriented checkpoint; values are stored as raw IEEE-754
    /// bits so a reload is bit-exact.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "dims {}", join(&self.layer_dims, ","))?;
        writeln!(w, "classes {}", self.num_classes)?;
        for p in &self.params {
            writeln!(w, "{}", array_line(&p.name, &p.shape, &p.values))?;
        }
        for (i, n) in self.norms.iter().enumerate() {
            let len = n.running_mean.len();
            writeln!(w, "{}", array_line(&format!("norm.{i}.running_mean"), &[len], &n.running_mean))?;
            writeln!(w, "{}", array_line(&format!("norm.{i}.running_var"), &[len], &n.running_var))?;
            writeln!(w, "{}", array_line(&format!("norm.{i}.momentum"), &[1], &[n.momentum]))?;
            writeln!(w, "{}", array_line(&format!("norm.{i}.eps"), &[1], &[n.eps]))?;
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Model> {
        let mut lines = BufReader::new(r).lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Format("unexpected end of checkpoint".into()))?
                .map_err(Error::from)
        };
        if next()?.trim() != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing checkpoint header".into()));
        }
        let dims_line = next()?;
        let dims = dims_line
            .strip_prefix("dims ")
            .ok_or_else(|| Error::Format("expected dims line".into()))?
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|e| Error::Format(format!("bad dim: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let classes_line = next()?;
        let classes = classes_line
            .strip_prefix("classes ")
            .ok_or_else(|| Error::Format("expected classes line".into()))?
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Format(format!("bad class count: {e}")))?;
        if dims.is_empty() || dims.contains(&0) || classes < 2 {
            return Err(Error::Format("invalid architecture in checkpoint".into()));
        }
        let mut model = Model::skeleton(&dims, classes);
        let mut seen = vec![false; model.params.len()];
        let mut seen_norm = vec![[false; 4]; model.norms.len()];
        loop {
            let line = next()?;
            if line.trim() == "end" {
                break;
            }
            let (name, shape, values) = parse_array_line(&line)?;
            if let Some(i) = model.params.iter().position(|p| p.name == name) {
                if model.params[i].shape != shape {
                    return Err(Error::Format(format!("shape mismatch for {name}")));
                }
                model.params[i].values = values;
                seen[i] = true;
                continue;
            }
            let rest = name
                .strip_prefix("norm.")
                .and_then(|r| r.split_once('.'))
                .ok_or_else(|| Error::Format(format!("unknown array {name}")))?;
            let ni: usize = rest.0.parse().map_err(|_| Error::Format(format!("unknown array {name}")))?;
            let norm = model
                .norms
                .get_mut(ni)
                .ok_or_else(|| Error::Format(format!("unknown array {name}")))?;
            let width = norm.running_mean.len();
            let field = match rest.1 {
                "running_mean" if values.len() == width => {
                    norm.running_mean = values;
                    0
                }
                "running_var" if values.len() == width => {
                    norm.running_var = values;
                    1
                }
                "momentum" if values.len() == 1 => {
                    norm.momentum = values[0];
                    2
                }
                "eps" if values.len() == 1 => {
                    norm.eps = values[0];
                    3
                }
                _ => return Err(Error::Format(format!("unexpected array {name}"))),
            };
            seen_norm[ni][field] = true;
        }
        if seen.iter().any(|s| !s) || seen_norm.iter().flatten().any(|s| !s) {
            return Err(Error::Format("checkpoint is missing arrays".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Model> {
        Model::read_checkpoint(std::fs::File::open(path)?)
    }
}

fn linear(tape: &mut Tape, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let wt = tape.transpose(weight)?;
    let h = tape.matmul(x, &wt)?;
    tape.add_row(&h, bias)
}

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

fn array_line(name: &str, shape: &[usize], values: &[f64]) -> String {
    let mut s = format!("array {name} {}", join(shape, "x"));
    for v in values {
        let _ = write!(s, " {:016x}", v.to_bits());
    }
    s
}

fn parse_array_line(line: &str) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("array") {
        return Err(Error::Format(format!("expected an array line, got {line:?}")));
    }
    let name = parts
        .next()
        .ok_or_else(|| Error::Format("array without name".into()))?
        .to_string();
    let shape = parts
        .next()
        .ok_or_else(|| Error::Format(format!("array {name} without shape")))?
        .split('x')
        .map(|d| d.parse::<usize>().map_err(|_| Error::Format(format!("bad shape for {name}"))))
        .collect::<Result<Vec<_>>>()?;
    let values = parts
        .map(|h| {
            u64::from_str_radix(h, 16)
                .map(f64::from_bits)
                .map_err(|_| Error::Format(format!("bad value in {name}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != shape.iter().product::<usize>() {
        return Err(Error::Format(format!("array {name} has the wrong number of values")));
    }
    Ok((name, shape, values))
}
