//! Experiment configuration: a flat TOML file, every key optional.
//!
//! Unknown keys are rejected. Errors carry the line of the offending key
//! when it can be located in the source text.

use std::fmt;
use std::path::{Path, PathBuf};

use dwmt_core::data::{DifficultySpec, TaskSpec};
use dwmt_core::losses::{check_simplex, LossConfig};
use dwmt_core::trainer::{LossSignal, Strategy, TrainerConfig};
use dwmt_core::{Activation, NetConfig, WeightGradMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Dynamic,
    Naive,
    Fixed,
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Relu,
    Tanh,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradModeName {
    Paper,
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalName {
    Smoothed,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_name: String,
    /// Not part of the config hash.
    pub out_dir: PathBuf,
    pub seed: u64,

    pub task_classes: Vec<usize>,
    pub task_sigma: Vec<f64>,
    pub task_noise: Vec<f64>,
    pub task_samples: Vec<usize>,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub prototype_scale: f64,
    pub modality_shift: f64,

    pub trunk_layers: Vec<usize>,
    pub branch_hidden: usize,
    pub embed_dim: usize,
    pub activation: ActivationName,

    pub strategy: StrategyName,
    pub fixed_weights: Option<Vec<f64>>,
    pub single_task: usize,
    pub eta_theta: f64,
    pub eta_psi: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_mode: GradModeName,
    pub smoothing_window: usize,
    pub loss_signal: SignalName,

    pub alpha: f64,
    pub loss_floor: f64,
    pub center_loss: bool,
    pub center_rate: f64,

    pub eval_samples: usize,
    pub eval_pairs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let spec = DifficultySpec::default();
        let net = NetConfig::default();
        let tr = TrainerConfig::default();
        Self {
            run_name: "default".into(),
            out_dir: PathBuf::from("runs/default"),
            seed: tr.seed,
            task_classes: spec.tasks.iter().map(|t| t.classes).collect(),
            task_sigma: spec.tasks.iter().map(|t| t.sigma).collect(),
            task_noise: spec.tasks.iter().map(|t| t.noise).collect(),
            task_samples: spec.tasks.iter().map(|t| t.samples).collect(),
            latent_dim: spec.latent_dim,
            input_dim: spec.input_dim,
            prototype_scale: spec.prototype_scale,
            modality_shift: spec.modality_shift,
            trunk_layers: net.trunk_layers,
            branch_hidden: net.branch_hidden,
            embed_dim: net.embed_dim,
            activation: ActivationName::Relu,
            strategy: StrategyName::Dynamic,
            fixed_weights: None,
            single_task: 0,
            eta_theta: tr.eta_theta,
            eta_psi: tr.eta_psi,
            steps: tr.steps,
            batch_size: tr.batch_size,
            grad_mode: GradModeName::Paper,
            smoothing_window: tr.smoothing_window,
            loss_signal: SignalName::Smoothed,
            alpha: tr.loss.alpha,
            loss_floor: tr.loss.loss_floor,
            center_loss: true,
            center_rate: tr.center_rate,
            eval_samples: 512,
            eval_pairs: 1000,
        }
    }
}

#[derive(Debug)]
pub struct ConfigError {
    pub source: String,
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{l}: {}", self.source, self.msg),
            None => write!(f, "{}: {}", self.source, self.msg),
        }
    }
}

/// Line of the first `key = ...` assignment in `text`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

impl ExperimentConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError {
            source: source.into(),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1),
            msg: e.message().trim().to_string(),
        })?;
        cfg.validate().map_err(|(key, msg)| ConfigError {
            source: source.into(),
            line: line_of(text, key),
            msg: format!("{key}: {msg}"),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source: source.clone(),
            line: None,
            msg: e.to_string(),
        })?;
        Self::parse(&text, &source)
    }

    pub fn tasks(&self) -> usize {
        self.task_classes.len()
    }

    /// Checks every key; the error names the key at fault.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let t = self.tasks();
        if t < 2 {
            return Err(("task_classes", format!("need at least 2 tasks, got {t}")));
        }
        for (key, len) in [
            ("task_sigma", self.task_sigma.len()),
            ("task_noise", self.task_noise.len()),
            ("task_samples", self.task_samples.len()),
        ] {
            if len != t {
                return Err((key, format!("has {len} entries but task_classes has {t}")));
            }
        }
        if self.task_classes.iter().any(|&k| k < 2) {
            return Err(("task_classes", "every task needs at least 2 classes".into()));
        }
        if self.task_sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(("task_sigma", "spreads must be finite and > 0".into()));
        }
        if self.task_noise.iter().any(|n| !(0.0..0.5).contains(n)) {
            return Err(("task_noise", "noise rates must be in [0, 0.5)".into()));
        }
        for (i, (&n, &k)) in self.task_samples.iter().zip(&self.task_classes).enumerate() {
            if n < k || n < self.batch_size {
                return Err((
                    "task_samples",
                    format!(
                        "task {} has {n} samples, fewer than its classes or batch_size",
                        i + 1
                    ),
                ));
            }
        }
        if self.latent_dim == 0 {
            return Err(("latent_dim", "must be ≥ 1".into()));
        }
        if self.input_dim == 0 {
            return Err(("input_dim", "must be ≥ 1".into()));
        }
        if !(self.prototype_scale > 0.0 && self.prototype_scale.is_finite()) {
            return Err(("prototype_scale", "must be finite and > 0".into()));
        }
        if !(self.modality_shift >= 0.0 && self.modality_shift.is_finite()) {
            return Err(("modality_shift", "must be finite and ≥ 0".into()));
        }
        if self.trunk_layers.is_empty() || self.trunk_layers.contains(&0) {
            return Err((
                "trunk_layers",
                "need at least one layer, all widths ≥ 1".into(),
            ));
        }
        if self.branch_hidden == 0 {
            return Err(("branch_hidden", "must be ≥ 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(("embed_dim", "must be ≥ 1".into()));
        }
        match self.strategy {
            StrategyName::Fixed => match &self.fixed_weights {
                None => return Err(("fixed_weights", "required by strategy = \"fixed\"".into())),
                Some(w) => check_simplex(w, t).map_err(|e| ("fixed_weights", e.to_string()))?,
            },
            StrategyName::Single if self.single_task >= t => {
                return Err((
                    "single_task",
                    format!("task index {} out of range for {t} tasks", self.single_task),
                ))
            }
            _ => {}
        }
        if !(self.eta_theta > 0.0 && self.eta_theta.is_finite()) {
            return Err(("eta_theta", "must be finite and > 0".into()));
        }
        if !(self.eta_psi > 0.0 && self.eta_psi.is_finite()) {
            return Err(("eta_psi", "must be finite and > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(("batch_size", "must be ≥ 1".into()));
        }
        if self.smoothing_window == 0 {
            return Err(("smoothing_window", "must be ≥ 1".into()));
        }
        let loss = LossConfig {
            alpha: self.alpha,
            loss_floor: self.loss_floor,
        };
        if !self.alpha.is_finite() {
            return Err(("alpha", "must be finite".into()));
        }
        loss.validate().map_err(|e| ("loss_floor", e.to_string()))?;
        if !(self.center_rate > 0.0 && self.center_rate <= 1.0) {
            return Err(("center_rate", "must be in (0, 1]".into()));
        }
        if self.eval_samples < 4 {
            return Err(("eval_samples", "must be ≥ 4".into()));
        }
        if self.eval_pairs < 2 {
            return Err(("eval_pairs", "must be ≥ 2".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the config as JSON, with the
    /// output directory blanked.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canon).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    pub fn difficulty_spec(&self) -> DifficultySpec {
        DifficultySpec {
            tasks: (0..self.tasks())
                .map(|i| TaskSpec {
                    classes: self.task_classes[i],
                    sigma: self.task_sigma[i],
                    noise: self.task_noise[i],
                    samples: self.task_samples[i],
                })
                .collect(),
            latent_dim: self.latent_dim,
            input_dim: self.input_dim,
            prototype_scale: self.prototype_scale,
            modality_shift: self.modality_shift,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            input_dim: self.input_dim,
            trunk_layers: self.trunk_layers.clone(),
            branch_hidden: self.branch_hidden,
            embed_dim: self.embed_dim,
            classes_per_task: self.task_classes.clone(),
            activation: match self.activation {
                ActivationName::Relu => Activation::Relu,
                ActivationName::Tanh => Activation::Tanh,
                ActivationName::Identity => Activation::Identity,
            },
        }
    }

    pub fn core_strategy(&self) -> Strategy {
        match self.strategy {
            StrategyName::Dynamic => Strategy::DynamicOurs,
            StrategyName::Naive => Strategy::NaiveDynamic,
            StrategyName::Fixed => {
                Strategy::FixedWeights(self.fixed_weights.clone().unwrap_or_default())
            }
            StrategyName::Single => Strategy::SingleTask(self.single_task),
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            strategy: self.core_strategy(),
            eta_theta: self.eta_theta,
            eta_psi: self.eta_psi,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            grad_mode: match self.grad_mode {
                GradModeName::Paper => WeightGradMode::PaperSimplified,
                GradModeName::Exact => WeightGradMode::ExactL4,
            },
            smoothing_window: self.smoothing_window,
            loss_signal: match self.loss_signal {
                SignalName::Smoothed => LossSignal::Smoothed,
                SignalName::Raw => LossSignal::Raw,
            },
            loss: LossConfig {
                alpha: self.alpha,
                loss_floor: self.loss_floor,
            },
            center_rate: self.center_rate,
        }
    }

    /// The task whose one-hot weights this run uses, if any.
    pub fn degenerate_task(&self) -> Option<usize> {
        match self.strategy {
            StrategyName::Single => Some(self.single_task),
            StrategyName::Fixed => {
                let w = self.fixed_weights.as_ref()?;
                let hot: Vec<usize> = (0..w.len()).filter(|&i| w[i] != 0.0).collect();
                (hot.len() == 1 && w[hot[0]] == 1.0).then(|| hot[0])
            }
            _ => None,
        }
    }
}
