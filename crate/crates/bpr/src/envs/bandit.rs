//! One-dimensional bandit with a bimodal behavior distribution and a
//! quadratic reward whose global maximizer sits outside dataset support.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{OfflineDataset, Transition};
use crate::error::{BprError, Result};

#[derive(Debug, Clone, Copy)]
pub struct Mode {
    pub center: f64,
    pub std: f64,
    pub weight: f64,
}

/// Two-mode behavior mixture on the action interval [−1, 1], with reward
/// r(a) = 1 − (a − peak)².
#[derive(Debug, Clone, Copy)]
pub struct BanditSpec {
    pub modes: [Mode; 2],
    pub reward_peak: f64,
}

impl Default for BanditSpec {
    fn default() -> Self {
        BanditSpec {
            modes: [
                Mode { center: -0.5, std: 0.05, weight: 0.5 },
                Mode { center: 0.5, std: 0.05, weight: 0.5 },
            ],
            reward_peak: 0.8,
        }
    }
}

impl BanditSpec {
    pub fn validate(&self) -> Result<()> {
        let wsum: f64 = self.modes.iter().map(|m| m.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(BprError::Domain(format!("mode weights sum to {wsum}, not 1")));
        }
        for m in &self.modes {
            if !(-1.0 < m.center && m.center < 1.0) {
                return Err(BprError::Domain(format!("mode center {} outside (−1, 1)", m.center)));
            }
            if m.std <= 0.0 {
                return Err(BprError::Domain("mode std must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Deterministic reward; errors outside the action interval.
    pub fn reward(&self, a: f64) -> Result<f64> {
        if !(-1.0..=1.0).contains(&a) {
            return Err(BprError::Domain(format!("action {a} outside [−1, 1]")));
        }
        let d = a - self.reward_peak;
        Ok(1.0 - d * d)
    }

    /// Exact mixture density at an action.
    pub fn behavior_density(&self, a: f64) -> f64 {
        self.modes
            .iter()
            .map(|m| {
                let z = (a - m.center) / m.std;
                m.weight * (-0.5 * z * z).exp() / (m.std * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum()
    }

    /// Draw one action from the behavior mixture, clipped to the interval.
    pub fn sample_behavior<R: Rng>(&self, rng: &mut R) -> f64 {
        let pick: f64 = rng.random_range(0.0..1.0);
        let mode = if pick < self.modes[0].weight { self.modes[0] } else { self.modes[1] };
        let normal = Normal::new(mode.center, mode.std).expect("valid mode std");
        normal.sample(rng).clamp(-1.0, 1.0)
    }
}

/// Single-step transitions: dummy state, behavior-mixture action, exact
/// reward, terminal.
pub fn generate_bandit_dataset<R: Rng>(
    spec: &BanditSpec,
    n: usize,
    rng: &mut R,
) -> Result<OfflineDataset> {
    if n < 2 {
        return Err(BprError::Dataset("bandit dataset needs n >= 2".into()));
    }
    spec.validate()?;
    let transitions: Vec<Transition> = (0..n)
        .map(|_| {
            // round to storage width first so the stored reward column is
            // exactly the reward function of the stored action column
            let a = spec.sample_behavior(rng) as f32 as f64;
            let r = spec.reward(a).expect("sampled action in range") as f32;
            Transition {
                state: vec![0.0],
                action: vec![a as f32],
                reward: r,
                next_state: vec![0.0],
                next_action: vec![0.0],
                done: true,
            }
        })
        .collect();
    OfflineDataset::from_transitions(1, 1, "bandit", &transitions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reward_peaks_at_chosen_maximum() {
        let spec = BanditSpec::default();
        assert_relative_eq!(spec.reward(0.8).unwrap(), 1.0);
        assert_relative_eq!(spec.reward(0.5).unwrap(), 0.91);
        assert!(spec.reward(-0.5).unwrap() < spec.reward(0.5).unwrap());
        assert!(spec.reward(1.5).is_err());
    }

    #[test]
    fn degenerate_mixture_hits_the_mode_centers() {
        let spec = BanditSpec {
            modes: [
                Mode { center: -0.5, std: 1e-12, weight: 0.5 },
                Mode { center: 0.5, std: 1e-12, weight: 0.5 },
            ],
            reward_peak: 0.8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ds = generate_bandit_dataset(&spec, 1000, &mut rng).unwrap();
        let mut low = 0usize;
        for i in 0..ds.len() {
            let a = ds.transition(i).action[0];
            assert!((a + 0.5).abs() < 1e-6 || (a - 0.5).abs() < 1e-6);
            if a < 0.0 {
                low += 1;
            }
        }
        // binomial(1000, 0.5): 3σ ≈ 47
        assert!((low as f64 - 500.0).abs() < 3.0 * (1000.0f64 * 0.25).sqrt() + 1.0);
    }

    #[test]
    fn empirical_action_mean_is_centered() {
        let spec = BanditSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let ds = generate_bandit_dataset(&spec, n, &mut rng).unwrap();
        let mean: f64 = (0..n).map(|i| ds.transition(i).action[0] as f64).sum::<f64>() / n as f64;
        // mixture std ≈ 0.5; standard error ≈ 0.5/√n
        let se = 0.51 / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn rewards_column_matches_reward_function() {
        let spec = BanditSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = generate_bandit_dataset(&spec, 100, &mut rng).unwrap();
        for i in 0..ds.len() {
            let t = ds.transition(i);
            assert_eq!(t.reward, spec.reward(t.action[0] as f64).unwrap() as f32);
            assert!(t.done);
        }
    }
}
