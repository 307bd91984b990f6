//! Run configuration in a bracketed-section `key = value` format.
//!
//! ```text
//! # comment
//! [run]
//! method = domain_aware
//! split = ND
//! ```
//!
//! Unknown sections, unknown keys and repeated keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::DEFAULT_HIDDEN;
use crate::error::{Error, Result};
use crate::mixture::DEFAULT_KAPPA;
use crate::streams::{SplitMode, SynthConfig};
use crate::structure::{ReductionConfig, DEFAULT_EXPANSION};
use crate::trainer::{LossConfig, StructurePolicy, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DomainAware,
    ReplayBaseline,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "domain_aware" => Ok(Method::DomainAware),
            "replay_baseline" => Ok(Method::ReplayBaseline),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::DomainAware => "domain_aware",
            Method::ReplayBaseline => "replay_baseline",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthConfig),
    Vmfs { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kappa: f64,
    pub backbone: BackboneKind,
    pub hidden: usize,
    pub freeze_backbone: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { kappa: DEFAULT_KAPPA, backbone: BackboneKind::Mlp, hidden: DEFAULT_HIDDEN, freeze_backbone: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub split: SplitMode,
    pub sessions: usize,
    pub seed: u64,
    pub data: DataSource,
    pub model: ModelConfig,
    pub expansion: usize,
    pub reduction: ReductionConfig,
    pub loss: LossConfig,
    pub memory_budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::DomainAware,
            split: SplitMode::NCD,
            sessions: 5,
            seed: 1993,
            data: DataSource::Synthetic(SynthConfig::default()),
            model: ModelConfig::default(),
            expansion: DEFAULT_EXPANSION,
            reduction: ReductionConfig::default(),
            loss: LossConfig::default(),
            memory_budget: 120,
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse {value:?}")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key}: expected a boolean, got {value:?}"))),
    }
}

impl RunConfig {
    /// Parses a config; relative VMFS paths resolve against `base`.
    pub fn parse_str(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut synth = SynthConfig::default();
        let mut synth_seed: Option<u64> = None;
        let mut source = "synthetic".to_string();
        let mut train_path: Option<PathBuf> = None;
        let mut test_path: Option<PathBuf> = None;
        let mut section = String::new();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["run", "data", "synthetic", "model", "structure", "loss", "memory"].contains(&name) {
                    return Err(Error::Config(format!("line {}: unknown section [{name}]", lineno + 1)));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            if section.is_empty() {
                return Err(Error::Config(format!("line {}: key {key:?} outside any section", lineno + 1)));
            }
            if !seen.insert(format!("{section}.{key}")) {
                return Err(Error::Config(format!("line {}: [{section}] {key} set twice", lineno + 1)));
            }
            let s = section.as_str();
            match (s, key) {
                ("run", "method") => cfg.method = value.parse()?,
                ("run", "split") => cfg.split = value.parse()?,
                ("run", "sessions") => cfg.sessions = parse(s, key, value)?,
                ("run", "seed") => cfg.seed = parse(s, key, value)?,
                ("data", "source") => source = value.to_string(),
                ("data", "train") => train_path = Some(PathBuf::from(value)),
                ("data", "test") => test_path = Some(PathBuf::from(value)),
                ("synthetic", "num_classes") => synth.num_classes = parse(s, key, value)?,
                ("synthetic", "domains_per_class") => synth.domains_per_class = parse(s, key, value)?,
                ("synthetic", "dim") => synth.dim = parse(s, key, value)?,
                ("synthetic", "kappa_true") => synth.kappa_true = parse(s, key, value)?,
                ("synthetic", "train_per_pair") => synth.train_per_pair = parse(s, key, value)?,
                ("synthetic", "test_per_pair") => synth.test_per_pair = parse(s, key, value)?,
                ("synthetic", "min_separation_deg") => synth.min_separation_deg = parse(s, key, value)?,
                ("synthetic", "seed") => synth_seed = Some(parse(s, key, value)?),
                ("model", "kappa") => cfg.model.kappa = parse(s, key, value)?,
                ("model", "backbone") => {
                    cfg.model.backbone = match value {
                        "mlp" => BackboneKind::Mlp,
                        "identity" => BackboneKind::Identity,
                        _ => return Err(Error::Config(format!("[model] backbone: unknown kind {value:?}"))),
                    }
                }
                ("model", "hidden") => cfg.model.hidden = parse(s, key, value)?,
                ("model", "freeze_backbone") => cfg.model.freeze_backbone = parse_bool(s, key, value)?,
                ("structure", "m") => cfg.expansion = parse(s, key, value)?,
                ("structure", "delta") => cfg.reduction.delta = parse(s, key, value)?,
                ("structure", "min_components") => cfg.reduction.min_components = parse(s, key, value)?,
                ("loss", "lambda_max") => cfg.loss.lambda_max = parse(s, key, value)?,
                ("loss", "lambda_warmup_epochs") => cfg.loss.lambda_warmup_epochs = parse(s, key, value)?,
                ("loss", "beta") => cfg.loss.beta = parse(s, key, value)?,
                ("loss", "eta") => cfg.loss.eta = parse(s, key, value)?,
                ("loss", "epochs") => cfg.loss.epochs = parse(s, key, value)?,
                ("loss", "batch_size") => cfg.loss.batch_size = parse(s, key, value)?,
                ("loss", "lr") => cfg.loss.lr = parse(s, key, value)?,
                ("loss", "weight_decay") => cfg.loss.weight_decay = parse(s, key, value)?,
                ("memory", "budget") => cfg.memory_budget = parse(s, key, value)?,
                _ => return Err(Error::Config(format!("line {}: unknown key [{section}] {key}", lineno + 1))),
            }
        }
        synth.seed = synth_seed.unwrap_or(cfg.seed);
        cfg.data = match source.as_str() {
            "synthetic" => {
                if train_path.is_some() || test_path.is_some() {
                    return Err(Error::Config("[data] train/test are only valid with source = vmfs".into()));
                }
                DataSource::Synthetic(synth)
            }
            "vmfs" => {
                let resolve = |p: Option<PathBuf>, which: &str| -> Result<PathBuf> {
                    let p = p.ok_or_else(|| Error::Config(format!("[data] {which} is required for source = vmfs")))?;
                    Ok(match base {
                        Some(b) if p.is_relative() => b.join(p),
                        _ => p,
                    })
                };
                DataSource::Vmfs { train: resolve(train_path, "train")?, test: resolve(test_path, "test")? }
            }
            other => return Err(Error::Config(format!("[data] source: unknown source {other:?}"))),
        };
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text, path.parent())
    }

    /// Re-seeds the run; a synthetic pool follows the run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let DataSource::Synthetic(s) = &mut self.data {
            s.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.sessions == 0 {
            return Err(Error::Config("[run] sessions must be >= 1".into()));
        }
        if !(self.model.kappa >= 0.0) || !self.model.kappa.is_finite() {
            return Err(Error::Config("[model] kappa must be finite and >= 0".into()));
        }
        if self.expansion == 0 {
            return Err(Error::Config("[structure] m must be >= 1".into()));
        }
        self.reduction.validate()?;
        self.loss.validate()?;
        if let DataSource::Vmfs { train, test } = &self.data {
            for p in [train, test] {
                if !p.is_file() {
                    return Err(Error::Config(format!("data file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let structure = match self.method {
            Method::DomainAware => StructurePolicy::ExpandReduce { m: self.expansion, reduction: self.reduction },
            Method::ReplayBaseline => StructurePolicy::Fixed,
        };
        TrainConfig { loss: self.loss.clone(), structure, freeze_backbone: self.model.freeze_backbone }
    }
}
