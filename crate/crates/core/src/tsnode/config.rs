use serde::{Deserialize, Serialize};

use crate::diffnet::Activation;
use crate::systems::System;

/// Which trainer to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Tsnode,
    WhiteNoise,
    Rescale,
    NoFeedback,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Tsnode,
        Variant::WhiteNoise,
        Variant::Rescale,
        Variant::NoFeedback,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Tsnode => "tsnode",
            Variant::WhiteNoise => "white_noise",
            Variant::Rescale => "rescale",
            Variant::NoFeedback => "no_feedback",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s.replace('-', "_"))
    }

    /// Variants that train a student on pseudo rollouts.
    pub fn uses_student(self) -> bool {
        matches!(self, Variant::Tsnode | Variant::NoFeedback)
    }
}

/// How the student's improvement feeds back into the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// `h = L_S - L_S'` measured each iteration.
    #[default]
    Measured,
    /// No feedback gradient; the teacher sees its labeled loss only.
    Off,
    /// `h` clamped to a constant.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Hidden width 256, 10000 iterations.
    Paper,
    /// Hidden width 64, 3000 iterations.
    Desk,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "paper" => Some(Profile::Paper),
            "desk" => Some(Profile::Desk),
            _ => None,
        }
    }
}

/// Hyperparameters of every trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub eta_t: f64,
    pub eta_s: f64,
    /// Per-element std of the noisy teacher.
    pub sigma: f64,
    pub iterations: usize,
    /// Supervised-only teacher iterations before the teacher-student loop.
    pub warmup: usize,
    pub seg_len: usize,
    pub label_batch: usize,
    pub pseudo_batch: usize,
    /// Grid points per pseudo rollout; 0 means `seg_len`.
    pub pseudo_len: usize,
    pub pseudo_ic_std: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub substeps: usize,
    /// Perturb the first row of each pseudo rollout like every other row.
    pub noisy_initial_row: bool,
    pub feedback: FeedbackMode,
    pub aug_noise_std: f64,
    pub aug_scale: f64,
    /// Fraction of skipped iterations that fails the run.
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta_t: 0.002,
            eta_s: 0.002,
            sigma: 0.1,
            iterations: 10_000,
            warmup: 200,
            seg_len: 10,
            label_batch: 50,
            pseudo_batch: 200,
            pseudo_len: 0,
            pseudo_ic_std: 0.1,
            eval_every: 100,
            seed: 0,
            hidden: vec![256],
            activation: Activation::Tanh,
            substeps: 1,
            noisy_initial_row: true,
            feedback: FeedbackMode::Measured,
            aug_noise_std: 0.01,
            aug_scale: 0.95,
            max_skip_fraction: 0.1,
        }
    }
}

/// Noisy-teacher std used for each benchmark system.
pub fn default_sigma(system: &System) -> f64 {
    match system {
        System::Cubic { .. } => 0.005,
        System::LotkaVolterra { .. } => 0.1,
        System::Pendulum { .. } => 0.005,
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile, system: &System) -> Self {
        let base = Self { sigma: default_sigma(system), ..Self::default() };
        match profile {
            Profile::Paper => base,
            Profile::Desk => Self { hidden: vec![64], iterations: 3000, ..base },
        }
    }

    pub fn pseudo_len(&self) -> usize {
        if self.pseudo_len == 0 {
            self.seg_len
        } else {
            self.pseudo_len
        }
    }

    pub fn layer_sizes(&self, dim: usize) -> Vec<usize> {
        let mut sizes = vec![dim];
        sizes.extend(&self.hidden);
        sizes.push(dim);
        sizes
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("eta_t", self.eta_t),
            ("eta_s", self.eta_s),
            ("pseudo_ic_std", self.pseudo_ic_std + 1.0),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(format!("{name} must be positive"));
            }
        }
        if !(self.sigma >= 0.0) {
            return Err("sigma must be non-negative".into());
        }
        if self.iterations == 0 || self.warmup >= self.iterations {
            return Err("need 0 <= warmup < iterations".into());
        }
        if self.seg_len < 2 || self.pseudo_len() < 2 {
            return Err("segments need at least two points".into());
        }
        if self.label_batch == 0 || self.eval_every == 0 || self.substeps == 0 {
            return Err("label_batch, eval_every and substeps must be positive".into());
        }
        if self.hidden.contains(&0) {
            return Err("hidden widths must be positive".into());
        }
        Ok(())
    }
}
