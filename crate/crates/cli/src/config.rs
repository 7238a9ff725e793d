//! Flat TOML run configuration.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected with their name.
//!
//! | key | default |
//! |-----|---------|
//! | `methods` | `["erm", "bn", "tent", "pl", "ours"]` |
//! | `lr` | `1e-3` |
//! | `lambda` | `0.1` |
//! | `k` | `3` |
//! | `m` | `20` (`"NA"` disables the entropy filter) |
//! | `batch_size` | `64` |
//! | `pl_threshold` | `0.9` |
//! | `update_scope` | `"all"` or `"affine-only"` |
//! | `benchmark` | `"covariate"` or `"label-shift"` |
//! | `shift_strength` | `1.0` |
//! | `num_sources` | `3` |
//! | `label_prior` | five-class LabelMe-shaped prior |
//! | `seeds` | `[0, 1, 2]` |
//! | `output_dir` | `"runs"` |
//! | `sd`, `ef`, `cf`, `mslc` | `true` |
//! | `predict_after_update` | `false` |
//! | `insert_before_prototypes` | `true` |
//! | `bank_cap` | unbounded |
//! | `source_epochs`, `source_lr`, `source_batch_size` | `30`, `1e-3`, `64` |
//! | `layer_dims` | `[16, 64, 64, 32]` |
//! | `checkpoint` | train a source model per seed |
//! | `target_csv` | generated target domain |
//! | `export_data` | `false` |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tta_core::adapt::{Ablation, AdaptConfig, Method, SourceConfig};
use tta_core::data::labelme_prior;
use tta_core::model::UpdateScope;

use crate::CliError;

/// Entropy filter setting: a per-class count or disabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterCount(pub Option<usize>);

impl fmt::Display for FilterCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(m) => write!(f, "{m}"),
            None => f.write_str("NA"),
        }
    }
}

impl FromStr for FilterCount {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "NA" | "na" | "disabled" | "none" => Ok(FilterCount(None)),
            v => v
                .parse()
                .map(|m| FilterCount(Some(m)))
                .map_err(|_| format!("expected a count or NA, got `{v}`")),
        }
    }
}

impl Serialize for FilterCount {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Some(m) => s.serialize_u64(m as u64),
            None => s.serialize_str("NA"),
        }
    }
}

impl<'de> Deserialize<'de> for FilterCount {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(m) => Ok(FilterCount(Some(m as usize))),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkKind {
    Covariate,
    LabelShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    All,
    AffineOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub methods: Vec<String>,
    pub lr: f64,
    pub lambda: f64,
    pub k: usize,
    pub m: FilterCount,
    pub batch_size: usize,
    pub pl_threshold: f64,
    pub update_scope: Scope,
    pub benchmark: BenchmarkKind,
    pub shift_strength: f64,
    pub num_sources: usize,
    pub label_prior: Vec<f64>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub sd: bool,
    pub ef: bool,
    pub cf: bool,
    pub mslc: bool,
    pub predict_after_update: bool,
    pub insert_before_prototypes: bool,
    pub bank_cap: Option<usize>,
    pub source_epochs: usize,
    pub source_lr: f64,
    pub source_batch_size: usize,
    pub layer_dims: Vec<usize>,
    pub checkpoint: Option<PathBuf>,
    pub target_csv: Option<PathBuf>,
    pub export_data: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adapt = AdaptConfig::default();
        let source = SourceConfig::default();
        RunConfig {
            methods: Method::ALL.iter().map(|m| m.name().to_string()).collect(),
            lr: adapt.lr,
            lambda: adapt.lambda,
            k: adapt.k,
            m: FilterCount(adapt.m),
            batch_size: adapt.batch_size,
            pl_threshold: adapt.pl_threshold,
            update_scope: Scope::All,
            benchmark: BenchmarkKind::Covariate,
            shift_strength: 1.0,
            num_sources: 3,
            label_prior: labelme_prior(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            sd: true,
            ef: true,
            cf: true,
            mslc: true,
            predict_after_update: false,
            insert_before_prototypes: true,
            bank_cap: None,
            source_epochs: source.epochs,
            source_lr: source.lr,
            source_batch_size: source.batch_size,
            layer_dims: vec![16, 64, 64, 32],
            checkpoint: None,
            target_csv: None,
            export_data: false,
        }
    }
}

/// Parses a `key=value` override; the value is read as a TOML value and
/// falls back to a plain string.
pub fn parse_override(kv: &str) -> Result<(String, toml::Value), CliError> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{kv}` is not key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

impl RunConfig {
    /// Parses TOML text, applies `overrides` on top, and validates.
    pub fn from_toml(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, toml::Value)]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn methods(&self) -> Result<Vec<Method>, CliError> {
        self.methods
            .iter()
            .map(|m| m.parse().map_err(|e: tta_core::Error| CliError::Config(format!("methods: {e}"))))
            .collect()
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            sd: self.sd,
            ef: self.ef,
            cf: self.cf,
            mslc: self.mslc,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.methods.is_empty() {
            return bad("methods: at least one method is required".into());
        }
        self.methods()?;
        if self.seeds.is_empty() {
            return bad("seeds: at least one seed is required".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr: must be positive, got {}", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda: must be nonnegative, got {}", self.lambda));
        }
        if self.k == 0 {
            return bad("k: must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size: must be at least 1".into());
        }
        if !(self.pl_threshold > 0.0 && self.pl_threshold < 1.0) {
            return bad(format!("pl_threshold: must lie in (0, 1), got {}", self.pl_threshold));
        }
        if !(0.0..=1.0).contains(&self.shift_strength) {
            return bad(format!("shift_strength: must lie in [0, 1], got {}", self.shift_strength));
        }
        if self.num_sources < 2 {
            return bad("num_sources: at least 2 source domains are required".into());
        }
        if !self.sd && (self.ef || self.cf || self.mslc) {
            return bad("sd: ef, cf and mslc require sd = true".into());
        }
        if self.source_epochs == 0 || self.source_batch_size < 2 || !(self.source_lr > 0.0) {
            return bad("source_epochs/source_batch_size/source_lr: need epochs ≥ 1, batch ≥ 2, lr > 0".into());
        }
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return bad("layer_dims: need an input and a feature width, all positive".into());
        }
        Ok(())
    }

    /// Adaptation settings for one method and seed.
    pub fn adapt_config(&self, method: Method, seed: u64) -> AdaptConfig {
        AdaptConfig {
            method,
            lr: self.lr,
            lambda: self.lambda,
            k: self.k,
            m: self.m.0,
            batch_size: self.batch_size,
            pl_threshold: self.pl_threshold,
            update_scope: match self.update_scope {
                Scope::All => UpdateScope::All,
                Scope::AffineOnly => UpdateScope::AffineOnly,
            },
            seed,
            ablation: self.ablation(),
            predict_after_update: self.predict_after_update,
            bank_cap: self.bank_cap,
            insert_before_prototypes: self.insert_before_prototypes,
        }
    }

    pub fn source_config(&self, seed: u64) -> SourceConfig {
        SourceConfig {
            epochs: self.source_epochs,
            lr: self.source_lr,
            batch_size: self.source_batch_size,
            seed,
            ..SourceConfig::default()
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
