//! Finite tabular MDPs for exact verification.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{BprError, Result};

/// Dirichlet(1, …, 1) sample of length `n`: normalized iid Exp(1) draws.
fn flat_dirichlet<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    for d in &mut draws {
        *d /= sum;
    }
    draws
}

const STOCHASTIC_TOL: f64 = 1e-12;

/// M = (S, A, R, P, p0, γ) with a row-stochastic transition tensor.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// P\[s, a, s′\] ≥ 0, rows summing to 1.
    pub transition: Array3<f64>,
    /// R\[s, a\].
    pub reward: Array2<f64>,
    pub initial: Array1<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        reward: Array2<f64>,
        initial: Array1<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let (s, a, s2) = transition.dim();
        if s != s2 {
            return Err(BprError::shape("TabularMdp", format!("{s}×{a}×{s}"), format!("{s}×{a}×{s2}")));
        }
        if reward.dim() != (s, a) {
            return Err(BprError::shape("TabularMdp reward", format!("{s}×{a}"), format!("{:?}", reward.dim())));
        }
        if initial.len() != s {
            return Err(BprError::shape("TabularMdp p0", format!("{s}"), format!("{}", initial.len())));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(BprError::Domain(format!("gamma {gamma} outside [0, 1)")));
        }
        for si in 0..s {
            for ai in 0..a {
                let row = transition.slice(ndarray::s![si, ai, ..]);
                if row.iter().any(|&p| p < 0.0) {
                    return Err(BprError::Domain(format!("negative transition probability at ({si}, {ai})")));
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(BprError::Domain(format!(
                        "transition row ({si}, {ai}) sums to {sum}, not 1"
                    )));
                }
            }
        }
        let p0_sum: f64 = initial.sum();
        if (p0_sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(BprError::Domain(format!("p0 sums to {p0_sum}, not 1")));
        }
        Ok(TabularMdp {
            n_states: s,
            n_actions: a,
            transition,
            reward,
            initial,
            gamma,
        })
    }

    /// Random instance: Dirichlet(1) transition rows, rewards U[0, 1],
    /// initial distribution Dirichlet(1).
    pub fn random<R: Rng>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Self {
        let mut transition = Array3::zeros((n_states, n_actions, n_states));
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = flat_dirichlet(n_states, rng);
                for (s2, p) in row.into_iter().enumerate() {
                    transition[(s, a, s2)] = p;
                }
            }
        }
        let reward = Array2::from_shape_fn((n_states, n_actions), |_| rng.random_range(0.0..1.0));
        let initial = Array1::from_vec(flat_dirichlet(n_states, rng));
        TabularMdp::new(transition, reward, initial, gamma).expect("random MDP is valid")
    }
}

/// A stochastic policy as a row-stochastic |S|×|A| matrix.
pub fn validate_policy(mdp: &TabularMdp, pi: &Array2<f64>) -> Result<()> {
    if pi.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(BprError::shape(
            "policy",
            format!("{}×{}", mdp.n_states, mdp.n_actions),
            format!("{:?}", pi.dim()),
        ));
    }
    for s in 0..mdp.n_states {
        let sum: f64 = pi.row(s).sum();
        if (sum - 1.0).abs() > 1e-9 || pi.row(s).iter().any(|&p| p < 0.0) {
            return Err(BprError::Domain(format!("policy row {s} is not a distribution")));
        }
    }
    Ok(())
}

/// Deterministic policy (one action per state) as a matrix.
pub fn deterministic_policy(mdp: &TabularMdp, actions: &[usize]) -> Array2<f64> {
    let mut pi = Array2::zeros((mdp.n_states, mdp.n_actions));
    for (s, &a) in actions.iter().enumerate() {
        pi[(s, a)] = 1.0;
    }
    pi
}

/// Random stochastic policy with Dirichlet(1) rows.
pub fn random_policy<R: Rng>(mdp: &TabularMdp, rng: &mut R) -> Array2<f64> {
    let mut pi = Array2::zeros((mdp.n_states, mdp.n_actions));
    for s in 0..mdp.n_states {
        for (a, p) in flat_dirichlet(mdp.n_actions, rng).into_iter().enumerate() {
            pi[(s, a)] = p;
        }
    }
    pi
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn row_stochasticity_is_enforced() {
        let bad = Array3::from_shape_fn((2, 1, 2), |_| 0.4);
        let r = Array2::zeros((2, 1));
        let p0 = array![0.5, 0.5];
        assert!(TabularMdp::new(bad, r, p0, 0.9).is_err());
    }

    #[test]
    fn random_instances_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
            assert_eq!(mdp.n_states, 5);
            let pi = random_policy(&mdp, &mut rng);
            validate_policy(&mdp, &pi).unwrap();
        }
    }

    #[test]
    fn gamma_bounds_are_checked() {
        let p = Array3::from_shape_fn((1, 1, 1), |_| 1.0);
        let r = Array2::zeros((1, 1));
        assert!(TabularMdp::new(p.clone(), r.clone(), array![1.0], 1.0).is_err());
        assert!(TabularMdp::new(p, r, array![1.0], 0.0).is_ok());
    }
}
