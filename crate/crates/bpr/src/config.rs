//! Training and run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::critic::{CriticHyper, Regime};
use crate::ebm::EbmConfig;
use crate::error::{BprError, Result};
use crate::policy::SamplingMode;

/// Every knob of one training run. Paper-scale values sit behind
/// [`TrainConfig::full_fidelity`]; the default and the per-task presets
/// are desk-scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Tradeoff between behavioral consistency and value fitting.
    pub lambda: f64,
    /// Entropy temperature in soft Bellman targets.
    pub alpha: f64,
    pub gamma: f64,
    /// Target-network soft-update coefficient.
    pub tau: f64,
    /// Ensemble pessimism coefficient.
    pub omega: f64,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub ebm_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Interleaved (or phase-2 policy) training steps.
    pub steps: u64,
    /// Phase-1 value-training budget for the on-policy pipelines.
    pub critic_steps: u64,
    pub ebm_steps: u64,
    pub ebm_batch: usize,
    pub ebm_negatives: usize,
    pub seed: u64,
    pub regime: Regime,
    pub mode: SamplingMode,
    /// Reward multiplier applied to the dataset before training.
    pub reward_scale: f32,
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub ebm_hidden: Vec<usize>,
    pub eval_interval: u64,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            alpha: 0.2,
            gamma: 0.99,
            tau: 0.005,
            omega: 2.0,
            policy_lr: 3e-4,
            critic_lr: 3e-4,
            ebm_lr: 3e-4,
            weight_decay: 0.0,
            batch_size: 128,
            steps: 100_000,
            critic_steps: 30_000,
            ebm_steps: 20_000,
            ebm_batch: 32,
            ebm_negatives: 256,
            seed: 1,
            regime: Regime::OffPolicy,
            mode: SamplingMode::SelfPlay,
            reward_scale: 1.0,
            policy_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            ebm_hidden: vec![64, 64],
            eval_interval: 5_000,
            eval_episodes: 10,
        }
    }
}

impl TrainConfig {
    /// Paper-scale widths, batch, and step counts.
    pub fn full_fidelity() -> Self {
        TrainConfig {
            steps: 1_000_000,
            ebm_steps: 200_000,
            batch_size: 512,
            ebm_batch: 64,
            policy_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            ebm_hidden: vec![512, 512, 512, 512],
            eval_interval: 50_000,
            ..TrainConfig::default()
        }
    }

    /// One-dimensional bandit protocol: tiny networks, the published
    /// 100 000-step budget.
    pub fn bandit_desk(seed: u64) -> Self {
        TrainConfig {
            seed,
            steps: 100_000,
            ebm_steps: 1_500,
            ebm_batch: 8,
            batch_size: 4,
            policy_hidden: vec![32, 32],
            critic_hidden: vec![32, 32],
            ebm_hidden: vec![32, 32],
            eval_interval: 20_000,
            eval_episodes: 10,
            ..TrainConfig::default()
        }
    }

    /// Dense point-mass task.
    pub fn pointmass_dense_desk(seed: u64) -> Self {
        TrainConfig {
            seed,
            steps: 8_000,
            ebm_steps: 2_000,
            ebm_batch: 8,
            batch_size: 64,
            policy_hidden: vec![32, 32],
            critic_hidden: vec![32, 32],
            ebm_hidden: vec![48, 48],
            eval_interval: 2_000,
            eval_episodes: 10,
            ..TrainConfig::default()
        }
    }

    /// Sparse stitching task: long-horizon discount, scaled rewards,
    /// two-phase on-policy pipelines. The scaled rewards make the value
    /// term two orders of magnitude larger than the energy term, so the
    /// consistency weight drops accordingly.
    pub fn pointmass_stitch_desk(seed: u64, regime: Regime) -> Self {
        TrainConfig {
            seed,
            regime,
            lambda: 0.1,
            gamma: 0.999,
            reward_scale: 100.0,
            steps: 6_000,
            critic_steps: 20_000,
            ebm_steps: 2_000,
            ebm_batch: 8,
            batch_size: 64,
            policy_hidden: vec![32, 32],
            critic_hidden: vec![32, 32],
            ebm_hidden: vec![48, 48],
            eval_interval: 2_000,
            eval_episodes: 100,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 {
            return Err(BprError::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        for (name, v) in [
            ("policy_lr", self.policy_lr),
            ("critic_lr", self.critic_lr),
            ("ebm_lr", self.ebm_lr),
        ] {
            if v <= 0.0 {
                return Err(BprError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(BprError::Config(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        if self.alpha < 0.0 || self.omega < 0.0 {
            return Err(BprError::Config("alpha and omega must be nonnegative".into()));
        }
        if !(self.reward_scale > 0.0) {
            return Err(BprError::Config("reward scale must be positive".into()));
        }
        if self.batch_size == 0 || self.ebm_batch == 0 || self.ebm_negatives == 0 {
            return Err(BprError::Config("batch sizes and negative count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn ebm_config(&self) -> EbmConfig {
        EbmConfig {
            hidden: self.ebm_hidden.clone(),
            steps: self.ebm_steps,
            batch: self.ebm_batch,
            negatives: self.ebm_negatives,
            learning_rate: self.ebm_lr,
            weight_decay: self.weight_decay,
            log_every: 500,
        }
    }

    pub fn critic_hyper(&self) -> CriticHyper {
        CriticHyper {
            tau: self.tau,
            alpha: self.alpha,
            gamma: self.gamma,
            omega: self.omega,
        }
    }
}

/// A full run: training knobs plus environment, dataset, and output
/// locations. The normalization snapshot is filled in when training
/// starts so evaluation can map raw environment states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Environment tag, matching the dataset header (`bandit`,
    /// `pm-dense-*`, `pm-stitch`).
    pub env: String,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub full_fidelity: bool,
    /// Optional pretrained behavior-model checkpoint to load instead of
    /// training one.
    pub ebm_checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    #[serde(default)]
    pub state_mean: Vec<f32>,
    #[serde(default)]
    pub state_std: Vec<f32>,
}

impl RunConfig {
    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
