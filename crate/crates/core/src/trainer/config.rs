//! Training hyperparameters and their flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{PintError, Result};
use crate::model::ModelConfig;
use crate::noise::{PerturbationSpec, PseudoLabelMode};

/// Which loss drives training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Plain cross-entropy on the given labels, two-phase schedule.
    BaselineCe,
    /// Pixel-rectified loss for every step, phase-1 schedule throughout.
    Pnt,
    /// Image-rectified loss for every step, phase-2 schedule throughout.
    Int,
    /// Pixel-rectified phase 1 followed by image-rectified phase 2.
    Pint,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::BaselineCe, Strategy::Pnt, Strategy::Int, Strategy::Pint];

    pub fn name(self) -> &'static str {
        match self {
            Self::BaselineCe => "baseline-ce",
            Self::Pnt => "pnt",
            Self::Int => "int",
            Self::Pint => "pint",
        }
    }
}

impl FromStr for Strategy {
    type Err = PintError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PintError::Config(format!("unknown strategy {s:?}")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub lr_phase1: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub lr_phase2: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub perturbation: PerturbationSpec,
    pub pseudo_label: PseudoLabelMode,
    pub normalize_uncertainty: bool,
    pub seed: u64,
    pub eval_every: usize,
    pub model: ModelConfig,
    /// Write elapsed seconds into the metrics log; off keeps logs
    /// byte-reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Pint,
            phase1_iters: 1500,
            phase2_iters: 500,
            lr_phase1: 0.01,
            lr_decay_every: 625,
            lr_decay_factor: 10.0,
            lr_phase2: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            ema_decay: 0.99,
            perturbation: PerturbationSpec::default(),
            pseudo_label: PseudoLabelMode::Soft,
            normalize_uncertainty: true,
            seed: 0,
            eval_every: 100,
            model: ModelConfig::default(),
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// Iteration counts of the full-size protocol (6000 + 2000, decay every
    /// 2500).
    pub fn full_scale() -> Self {
        Self {
            phase1_iters: 6000,
            phase2_iters: 2000,
            lr_decay_every: 2500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_phase1", self.lr_phase1),
            ("lr_phase2", self.lr_phase2),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(PintError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(PintError::Config("batch_size must be >= 1".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(PintError::Config("lr_decay_every must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(PintError::Config("eval_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PintError::Config(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(PintError::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(PintError::Config(format!("ema_decay {} outside [0,1]", self.ema_decay)));
        }
        self.perturbation.validate()?;
        self.model.validate()
    }

    /// Learning rate of the `i`-th step (0-based) of the phase-1 schedule.
    pub fn phase1_lr(&self, i: usize) -> f64 {
        let drops = (i / self.lr_decay_every) as i32;
        self.lr_phase1 * self.lr_decay_factor.powi(-drops)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let widths: Vec<String> = self.model.widths.iter().map(|w| w.to_string()).collect();
        let entries: Vec<(&str, String)> = vec![
            ("strategy", self.strategy.to_string()),
            ("phase1_iters", self.phase1_iters.to_string()),
            ("phase2_iters", self.phase2_iters.to_string()),
            ("lr_phase1", self.lr_phase1.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("lr_phase2", self.lr_phase2.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("mc_passes", self.perturbation.passes.to_string()),
            ("perturb_sigma", self.perturbation.gaussian_sigma.to_string()),
            ("teacher_dropout", self.perturbation.teacher_dropout_active.to_string()),
            ("pseudo_label", self.pseudo_label.to_string()),
            ("normalize_uncertainty", self.normalize_uncertainty.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("widths", widths.join(",")),
            ("num_classes", self.model.num_classes.to_string()),
            ("dropout_rate", self.model.dropout_rate.to_string()),
            ("log_wall_time", self.log_wall_time.to_string()),
        ];
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses a config file over the defaults. Blank lines and `#` comments
    /// are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PintError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| PintError::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "strategy" => self.strategy = value.parse()?,
            "phase1_iters" => self.phase1_iters = num(key, value)?,
            "phase2_iters" => self.phase2_iters = num(key, value)?,
            "lr_phase1" => self.lr_phase1 = num(key, value)?,
            "lr_decay_every" => self.lr_decay_every = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "lr_phase2" => self.lr_phase2 = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "ema_decay" => self.ema_decay = num(key, value)?,
            "mc_passes" => self.perturbation.passes = num(key, value)?,
            "perturb_sigma" => self.perturbation.gaussian_sigma = num(key, value)?,
            "teacher_dropout" => self.perturbation.teacher_dropout_active = num(key, value)?,
            "pseudo_label" => self.pseudo_label = value.parse()?,
            "normalize_uncertainty" => self.normalize_uncertainty = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "widths" => {
                self.model.widths = value
                    .split(',')
                    .map(|w| num(key, w.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "num_classes" => self.model.num_classes = num(key, value)?,
            "dropout_rate" => self.model.dropout_rate = num(key, value)?,
            "log_wall_time" => self.log_wall_time = num(key, value)?,
            other => return Err(PintError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
