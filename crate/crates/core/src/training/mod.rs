//! The annealed ELBO objective, mini-batch Adam, checkpoints, and the four
//! ablation variants.

mod adam;
mod baseline;
mod checkpoint;
mod model;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneError, HeadKind};
use crate::diffgraph::GraphError;
use crate::varembed::{GateConfig, VarEmbedError};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use baseline::DeepFmBaseline;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use model::{elbo_grad_check, Noise, VelfModel};
pub use trainer::{derive_seed, evaluate_objective, train, train_steps, EpochRecord, Objective, TrainOutcome};

/// Learning-rate search grid.
pub const LR_GRID: [f64; 7] = [1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    VarEmbed(#[from] VarEmbedError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("non-finite {component} at step {step}")]
    NonFinite { step: usize, component: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("gradient for {name} has shape {got:?}, parameter has {expected:?}")]
    GradShape { name: String, expected: Vec<usize>, got: Vec<usize> },
}

/// Which terms of the objective are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Posterior KL to the learned prior plus the prior's KL to `N(0, I)`.
    #[default]
    Full,
    /// Posterior KL to the learned prior only.
    NoR,
    /// Posterior KL to `N(0, I)`; the prior network is unused.
    Fixed,
    /// Deterministic embeddings `z = mu_q`; no KL terms.
    Point,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoR, Variant::Fixed, Variant::Point];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoR => "no_r",
            Variant::Fixed => "fixed",
            Variant::Point => "point",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Whether the learned prior network takes part in training.
    pub fn uses_prior_net(self) -> bool {
        matches!(self, Variant::Full | Variant::NoR)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Steps over which the KL weight ramps from 0 to 1; one epoch if unset.
    pub anneal_steps: Option<usize>,
    pub seed: u64,
    /// Monte Carlo samples per instance for the log-loss.
    pub monte_carlo: usize,
    pub gate_eps: f64,
    pub hidden: Vec<usize>,
    pub prior_hidden: Vec<usize>,
    pub head: HeadKind,
    pub attrs_in_backbone: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Full,
            dim: 8,
            batch_size: 256,
            lr: 1e-3,
            epochs: 1,
            anneal_steps: None,
            seed: 0,
            monte_carlo: 1,
            gate_eps: 1e-3,
            hidden: vec![200, 200, 200],
            prior_hidden: vec![200, 200, 200],
            head: HeadKind::DeepFm,
            attrs_in_backbone: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_string()));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.anneal_steps == Some(0) {
            return bad("anneal_steps must be at least 1");
        }
        if self.monte_carlo < 1 {
            return bad("monte_carlo must be at least 1");
        }
        if self.dim < 1 {
            return bad("dim must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.gate_eps >= 0.0) {
            return bad("gate_eps must be non-negative");
        }
        Ok(())
    }

    pub fn gate(&self) -> GateConfig {
        GateConfig { stability_eps: self.gate_eps }
    }
}

/// Components of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub log_loss: f64,
    pub kl_user_post: f64,
    pub kl_item_post: f64,
    pub kl_user_prior_reg: f64,
    pub kl_item_prior_reg: f64,
    pub alpha: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn kl_sum(&self) -> f64 {
        self.kl_user_post + self.kl_item_post + self.kl_user_prior_reg + self.kl_item_prior_reg
    }

    /// Fill `total = log_loss + alpha * (sum of KL terms)`.
    pub fn with_total(mut self) -> Self {
        self.total = self.log_loss + self.alpha * self.kl_sum();
        self
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("log_loss", self.log_loss),
            ("kl_user_post", self.kl_user_post),
            ("kl_item_post", self.kl_item_post),
            ("kl_user_prior_reg", self.kl_user_prior_reg),
            ("kl_item_prior_reg", self.kl_item_prior_reg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Linear KL warm-up, `min(step / T, 1)`.
pub fn anneal_alpha(step: usize, anneal_steps: usize) -> f64 {
    (step as f64 / anneal_steps.max(1) as f64).min(1.0)
}
