use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::NegativeMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    UnionsTune,
    VanillaTune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::UnionsTune => "unions_tune",
            Phase::VanillaTune => "vanilla_tune",
        }
    }

    pub fn is_tune(self) -> bool {
        self != Phase::Pretrain
    }

    /// Mixed into every derived seed. Both tuning phases share one salt so
    /// that a zero-weight UNIONS run retraces the vanilla run exactly.
    pub(crate) fn seed_salt(self) -> u64 {
        match self {
            Phase::Pretrain => 0x7072_6574_7261_696e,
            Phase::UnionsTune | Phase::VanillaTune => 0x7475_6e65_7475_6e65,
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "unions" | "unions_tune" => Ok(Phase::UnionsTune),
            "vanilla" | "vanilla_tune" => Ok(Phase::VanillaTune),
            _ => Err(Error::config(format!("unknown phase {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub max_tokens_per_batch: usize,
    pub smoothing: f64,
    pub ul_weight: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Direction sampling temperature.
    pub temperature: f64,
    pub negative_mode: NegativeMode,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            lr: 3e-3,
            warmup_steps: 200,
            total_steps: 8000,
            max_tokens_per_batch: 600,
            smoothing: 0.1,
            ul_weight: 0.0,
            checkpoint_every: 1000,
            seed: 1,
            temperature: 5.0,
            negative_mode: NegativeMode::PerBatch,
            adam: AdamConfig::default(),
        }
    }

    /// Tuning defaults: warmup 1, 500 updates, a checkpoint every 50.
    pub fn tune(phase: Phase) -> Self {
        TrainConfig {
            phase,
            lr: 1e-3,
            warmup_steps: 1,
            total_steps: 500,
            checkpoint_every: 50,
            ul_weight: if phase == Phase::UnionsTune { 1.0 } else { 0.0 },
            ..TrainConfig::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::config("warmup_steps must be at least 1"));
        }
        if self.checkpoint_every < 1 || self.total_steps < self.checkpoint_every {
            return Err(Error::config(format!(
                "need 1 <= checkpoint_every ({}) <= total_steps ({})",
                self.checkpoint_every, self.total_steps
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..0.5).contains(&self.smoothing) {
            return Err(Error::config(format!("smoothing {} outside [0, 0.5)", self.smoothing)));
        }
        if !(self.ul_weight >= 0.0 && self.ul_weight.is_finite()) {
            return Err(Error::config(format!("ul_weight {} must be non-negative", self.ul_weight)));
        }
        if self.phase != Phase::UnionsTune && self.ul_weight != 0.0 {
            return Err(Error::config(format!("ul_weight must be 0 in phase {}", self.phase)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.max_tokens_per_batch < 4 {
            return Err(Error::config("max_tokens_per_batch is too small"));
        }
        let a = self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("invalid Adam hyperparameters"));
        }
        Ok(())
    }

    /// `lr * min(t / warmup, sqrt(warmup / t))` for 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        let (t, w) = (t.max(1) as f64, self.warmup_steps as f64);
        self.lr * (t / w).min((w / t).sqrt())
    }
}
