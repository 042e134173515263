use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, NceOptions};
use crate::metrics::{Aggregation, EvalConfig, Threshold};

pub const SEED_ENV: &str = "COLEAF_SEED";

/// Flat training configuration. Every field can be set by name in a TOML
/// file; missing fields take the desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Pseudo-label threshold.
    pub theta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub lambda_evt: f64,
    pub lambda_kd: f64,
    pub lambda_cls: f64,
    /// Epochs trained with the video-level losses only.
    pub warmup_epochs: usize,
    /// Drop cross-modal attention from the anchor branch.
    pub unimodal_only: bool,
    pub disable_evt: bool,
    pub disable_kd: bool,
    pub disable_cls: bool,
    pub disable_ref_video: bool,
    pub disable_class_tokens: bool,
    /// Keep the positive pair in the contrastive normaliser.
    pub nce_include_positive: bool,
    pub seed: u64,
    pub eval_threshold: Threshold,
    pub eval_iou: f64,
    pub eval_aggregation: Aggregation,
    /// Segment probabilities of a class are zeroed in a modality whose
    /// video-level probability for that class is below this value. 0 keeps
    /// them all.
    pub video_gate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-2,
            lr_decay_factor: 0.25,
            lr_decay_every_epochs: 6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            theta: 0.5,
            tau: 0.2,
            lambda_evt: 1.0,
            lambda_kd: 1.0,
            lambda_cls: 1.0,
            warmup_epochs: 0,
            unimodal_only: false,
            disable_evt: false,
            disable_kd: false,
            disable_cls: false,
            disable_ref_video: false,
            disable_class_tokens: false,
            nce_include_positive: false,
            seed: 0,
            eval_threshold: Threshold::default(),
            eval_iou: 0.5,
            eval_aggregation: Aggregation::Micro,
            video_gate: 0.5,
        }
    }
}

impl TrainConfig {
    /// The published recipe: lr 5e-4, batch 128, 15 epochs, decay 0.25
    /// every 6 epochs.
    pub fn paper() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 128,
            epochs: 15,
            lr_decay_factor: 0.25,
            lr_decay_every_epochs: 6,
            ..TrainConfig::default()
        }
    }

    /// Video-level losses only: the three collaborative terms are off.
    pub fn anchor_only(mut self) -> Self {
        self.disable_evt = true;
        self.disable_kd = true;
        self.disable_cls = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        if self.lr_decay_every_epochs == 0 {
            return bad("lr_decay_every_epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must lie in (0, 1), got {}", self.theta));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return bad(format!(
                "eval_iou must lie in (0, 1], got {}",
                self.eval_iou
            ));
        }
        if !(0.0..1.0).contains(&self.video_gate) {
            return bad(format!(
                "video_gate must lie in [0, 1), got {}",
                self.video_gate
            ));
        }
        self.eval_threshold.validate(None)?;
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            evt: self.lambda_evt,
            kd: self.lambda_kd,
            cls: self.lambda_cls,
        }
    }

    pub fn nce(&self) -> NceOptions {
        NceOptions {
            tau: self.tau,
            include_positive: self.nce_include_positive,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            iou: self.eval_iou,
            aggregation: self.eval_aggregation,
        }
    }

    /// `lr₀ · factor^⌊epoch / every⌋`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.lr_decay_every_epochs) as i32;
        self.learning_rate * self.lr_decay_factor.powi(k)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `COLEAF_SEED` when it is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Some(seed) = env_seed()? {
            self.seed = seed;
        }
        Ok(self)
    }
}

/// The seed named by the environment override, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Error::Config(format!("{SEED_ENV} must be an unsigned integer, got '{v}'"))
        }),
        Err(_) => Ok(None),
    }
}
