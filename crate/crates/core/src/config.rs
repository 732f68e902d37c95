//! Run configuration: model choice, ablation switches and hyperparameters,
//! read from flat `key = value` text.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svd::SvdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Matrix factorization: no propagation, no social towers.
    Bpr,
    /// Interaction-graph propagation only.
    LightGcn,
    /// Interaction, social and reconstructed towers with alignment and fusion.
    ClsRec,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpr" => Ok(ModelKind::Bpr),
            "lightgcn" => Ok(ModelKind::LightGcn),
            "clsrec" => Ok(ModelKind::ClsRec),
            other => Err(Error::Config(format!(
                "unknown model {other:?} (bpr, lightgcn, clsrec)"
            ))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Bpr => "bpr",
            ModelKind::LightGcn => "lightgcn",
            ModelKind::ClsRec => "clsrec",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    /// Contrastive weight forced to zero.
    NoCl,
    /// Additionally replaces alignment and gating with `(E_u + Ê_u) / 2`.
    NoClIia,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-cl" => Ok(Ablation::NoCl),
            "no-cl-iia" => Ok(Ablation::NoClIia),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (none, no-cl, no-cl-iia)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::NoCl => "no-cl",
            Ablation::NoClIia => "no-cl-iia",
        })
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub ablation: Ablation,
    pub seed: u64,

    pub dim: usize,
    pub layers: usize,
    pub init_std: f64,

    pub svd_rank: usize,
    pub svd_oversampling: usize,
    pub svd_power_iters: usize,
    pub svd_on_raw: bool,

    pub tau: f64,
    pub alpha: f64,
    pub lambda: f64,
    /// Behavior-side isolation threshold; `None` means `1/dim`.
    pub gamma_b: Option<f64>,
    /// Social-side isolation threshold; `None` means `1/dim`.
    pub gamma_s: Option<f64>,
    pub gate_hidden: usize,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub patience: usize,

    pub cl_full_batch: bool,
    pub reg_batch_rows: bool,

    pub ks: Vec<usize>,
    pub cold_threshold: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::ClsRec,
            ablation: Ablation::None,
            seed: 2024,
            dim: 64,
            layers: 3,
            init_std: 0.1,
            svd_rank: 5,
            svd_oversampling: 10,
            svd_power_iters: 4,
            svd_on_raw: false,
            tau: 0.2,
            alpha: 0.1,
            lambda: 1e-4,
            gamma_b: None,
            gamma_s: None,
            gate_hidden: 16,
            lr: 1e-3,
            batch_size: 2048,
            epochs: 1000,
            eval_every: 5,
            patience: 10,
            cl_full_batch: false,
            reg_batch_rows: false,
            ks: vec![10, 20],
            cold_threshold: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn new(model: ModelKind) -> Self {
        RunConfig {
            model,
            ..Self::default()
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        match key {
            "model" => self.model = value.parse()?,
            "ablation" => self.ablation = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "svd_rank" => self.svd_rank = parse(key, value)?,
            "svd_oversampling" => self.svd_oversampling = parse(key, value)?,
            "svd_power_iters" => self.svd_power_iters = parse(key, value)?,
            "svd_on_raw" => self.svd_on_raw = parse_bool(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "gamma_b" => self.gamma_b = Some(parse(key, value)?),
            "gamma_s" => self.gamma_s = Some(parse(key, value)?),
            "gate_hidden" => self.gate_hidden = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "cl_full_batch" => self.cl_full_batch = parse_bool(key, value)?,
            "reg_batch_rows" => self.reg_batch_rows = parse_bool(key, value)?,
            "ks" => {
                self.ks = value
                    .split(',')
                    .map(|k| parse(key, k.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "cold_threshold" => self.cold_threshold = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(key, value)
    }

    /// Enforces the model/ablation invariants and value ranges, applying the
    /// implied settings (`bpr` has no propagation, `no-cl` has `alpha = 0`).
    pub fn finalize(mut self) -> Result<Self> {
        if self.ablation != Ablation::None && self.model != ModelKind::ClsRec {
            return Err(Error::Config(format!(
                "ablation {} requires model clsrec, got {}",
                self.ablation, self.model
            )));
        }
        if self.model == ModelKind::Bpr {
            self.layers = 0;
        }
        if self.ablation != Ablation::None {
            self.alpha = 0.0;
        }
        let checks = [
            (self.dim >= 1, "dim must be >= 1"),
            (self.tau > 0.0, "tau must be > 0"),
            (self.alpha >= 0.0, "alpha must be >= 0"),
            (self.lambda >= 0.0, "lambda must be >= 0"),
            (self.lr > 0.0, "lr must be > 0"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.eval_every >= 1, "eval_every must be >= 1"),
            (self.svd_rank >= 1, "svd_rank must be >= 1"),
            (self.gate_hidden >= 1, "gate_hidden must be >= 1"),
            (
                self.init_std >= 0.0 && self.init_std.is_finite(),
                "init_std must be finite and >= 0",
            ),
            (
                !self.ks.is_empty() && self.ks.iter().all(|&k| k >= 1),
                "ks must be non-empty positive",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(self)
    }

    pub fn gamma_behavior(&self) -> f64 {
        self.gamma_b.unwrap_or(1.0 / self.dim as f64)
    }

    pub fn gamma_social(&self) -> f64 {
        self.gamma_s.unwrap_or(1.0 / self.dim as f64)
    }

    pub fn svd(&self) -> SvdConfig {
        SvdConfig {
            rank: self.svd_rank,
            oversampling: self.svd_oversampling,
            power_iters: self.svd_power_iters,
        }
    }

    pub fn uses_social(&self) -> bool {
        self.model == ModelKind::ClsRec
    }

    pub fn uses_alignment(&self) -> bool {
        self.model == ModelKind::ClsRec && self.ablation != Ablation::NoClIia
    }
}
