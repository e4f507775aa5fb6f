//! Synthetic environments and scripted behavior policies: a 1-D bimodal
//! bandit, a point-mass box in dense and sparse-stitching variants, and
//! finite tabular MDPs.

pub mod bandit;
pub mod pointmass;
pub mod tabular;

pub use bandit::{generate_bandit_dataset, BanditSpec};
pub use pointmass::{BehaviorKind, PmState, PointMassEnv, RewardMode};
pub use tabular::TabularMdp;

use rand::Rng;

use crate::dataset::{OfflineDataset, Transition};
use crate::error::{BprError, Result};

/// A runnable environment, reconstructed from a dataset's env tag.
#[derive(Debug, Clone)]
pub enum EnvHandle {
    Bandit(BanditSpec),
    PointMass(PointMassEnv),
}

impl EnvHandle {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "bandit" => Ok(EnvHandle::Bandit(BanditSpec::default())),
            "pm-dense-expert" | "pm-dense-medium" | "pm-dense-mixed" => {
                Ok(EnvHandle::PointMass(PointMassEnv::dense()))
            }
            "pm-stitch" => Ok(EnvHandle::PointMass(PointMassEnv::sparse_stitch())),
            other => Err(BprError::Config(format!("unknown environment tag '{other}'"))),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            EnvHandle::Bandit(_) => 1,
            EnvHandle::PointMass(_) => 4,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            EnvHandle::Bandit(_) => 1,
            EnvHandle::PointMass(_) => 2,
        }
    }
}

/// Mixture recipe for point-mass datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetQuality {
    /// Goal-seeking controller only.
    Expert,
    /// Noisy half-gain controller only.
    Medium,
    /// Half expert episodes, half decoy episodes driven at the waypoint;
    /// the two controller modes diverge from the very first state.
    Mixed,
    /// Half first-leg episodes, the rest split between goal-bound and
    /// decoy-bound second legs; no single trajectory solves the task.
    Stitch,
}

impl DatasetQuality {
    pub fn tag(&self) -> &'static str {
        match self {
            DatasetQuality::Stitch => "pm-stitch",
            DatasetQuality::Expert => "pm-dense-expert",
            DatasetQuality::Medium => "pm-dense-medium",
            DatasetQuality::Mixed => "pm-dense-mixed",
        }
    }
}

/// Roll scripted controllers into an offline dataset of `episodes`
/// episodes. Next actions are the controller's action at the successor
/// state, so on-policy targets need no behavior-policy queries later;
/// terminal rows store a zero next action.
pub fn generate_pointmass_dataset<R: Rng>(
    env: &PointMassEnv,
    quality: DatasetQuality,
    episodes: usize,
    rng: &mut R,
) -> Result<OfflineDataset> {
    if episodes == 0 {
        return Err(BprError::Dataset("need at least one episode".into()));
    }
    enum Leg {
        Scripted(BehaviorKind),
        Decoy,
    }
    let mut transitions = Vec::new();
    for ep in 0..episodes {
        let leg = match quality {
            DatasetQuality::Expert => Leg::Scripted(BehaviorKind::Expert),
            DatasetQuality::Medium => Leg::Scripted(BehaviorKind::Medium),
            DatasetQuality::Mixed => {
                if ep % 2 == 0 {
                    Leg::Scripted(BehaviorKind::Expert)
                } else {
                    Leg::Scripted(BehaviorKind::StitchA)
                }
            }
            DatasetQuality::Stitch => match ep % 4 {
                0 | 2 => Leg::Scripted(BehaviorKind::StitchA),
                1 => Leg::Scripted(BehaviorKind::StitchB),
                _ => Leg::Decoy,
            },
        };
        let steps = match &leg {
            Leg::Scripted(kind) => pointmass::rollout_scripted(*kind, env, rng)?.0,
            Leg::Decoy => pointmass::rollout_decoy(env, rng)?.0,
        };
        for (state, action, reward, next_state, done) in &steps {
            let next_action = if *done {
                [0.0, 0.0]
            } else {
                match &leg {
                    Leg::Scripted(kind) => pointmass::scripted_behavior(*kind, env, *next_state, rng),
                    Leg::Decoy => pointmass::decoy_action(env, *next_state),
                }
            };
            transitions.push(Transition {
                state: state.to_vec().iter().map(|&v| v as f32).collect(),
                action: vec![action[0] as f32, action[1] as f32],
                reward: *reward as f32,
                next_state: next_state.to_vec().iter().map(|&v| v as f32).collect(),
                next_action: vec![next_action[0] as f32, next_action[1] as f32],
                done: *done,
            });
        }
    }
    OfflineDataset::from_transitions(4, 2, quality.tag(), &transitions)
}
