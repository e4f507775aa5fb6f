//! Exact tabular machinery: value iteration, policy evaluation by linear
//! solve, occupancy measures, the performance-difference identity, the
//! implicit preference value Q̃ = Q + (1/λ)·log π_β, and executable forms
//! of the perfect- and noisy-preference statements with their occupancy
//! bounds.
//!
//! Everything here is f64-exact linear algebra on small matrices; the
//! learned components elsewhere in the crate are tested against these
//! fixed points.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::envs::tabular::{deterministic_policy, validate_policy, TabularMdp};
use crate::error::Result;

/// Solved quantities for one policy (or the optimal one).
#[derive(Debug, Clone)]
pub struct TabularSolution {
    /// |S|×|A| action values.
    pub q: Array2<f64>,
    /// |S| state values.
    pub v: Array1<f64>,
    /// Discounted state occupancy, total mass 1/(1−γ).
    pub rho: Array1<f64>,
    /// Expected discounted return from p0.
    pub eta: f64,
}

/// Error bounds for the noisy-preference check: `eps_behavior` bounds the
/// injected error at behavior actions, `eps_learned` at learned-policy
/// actions.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub eps_behavior: f64,
    pub eps_learned: f64,
    pub seed: u64,
}

pub const VALUE_ITERATION_TOL: f64 = 1e-12;

/// Sup-norm-converged optimal action values.
pub fn value_iteration(mdp: &TabularMdp) -> Array2<f64> {
    let (s_n, a_n) = (mdp.n_states, mdp.n_actions);
    let mut q = Array2::zeros((s_n, a_n));
    loop {
        let v: Array1<f64> = (0..s_n)
            .map(|s| q.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut next = Array2::zeros((s_n, a_n));
        for s in 0..s_n {
            for a in 0..a_n {
                let mut exp_v = 0.0;
                for s2 in 0..s_n {
                    exp_v += mdp.transition[(s, a, s2)] * v[s2];
                }
                next[(s, a)] = mdp.reward[(s, a)] + mdp.gamma * exp_v;
            }
        }
        let delta = (&next - &q).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        q = next;
        if delta <= VALUE_ITERATION_TOL {
            return q;
        }
    }
}

/// ‖TQ − Q‖∞ under the optimality operator.
pub fn bellman_residual(mdp: &TabularMdp, q: &Array2<f64>) -> f64 {
    let v: Array1<f64> = (0..mdp.n_states)
        .map(|s| q.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut worst = 0.0f64;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut exp_v = 0.0;
            for s2 in 0..mdp.n_states {
                exp_v += mdp.transition[(s, a, s2)] * v[s2];
            }
            let t = mdp.reward[(s, a)] + mdp.gamma * exp_v;
            worst = worst.max((t - q[(s, a)]).abs());
        }
    }
    worst
}

fn policy_transition(mdp: &TabularMdp, pi: &Array2<f64>) -> Array2<f64> {
    let mut p = Array2::zeros((mdp.n_states, mdp.n_states));
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let w = pi[(s, a)];
            if w == 0.0 {
                continue;
            }
            for s2 in 0..mdp.n_states {
                p[(s, s2)] += w * mdp.transition[(s, a, s2)];
            }
        }
    }
    p
}

fn solve_linear(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let m = nalgebra::DMatrix::from_row_iterator(n, n, a.iter().cloned());
    let rhs = nalgebra::DVector::from_iterator(n, b.iter().cloned());
    let sol = m.lu().solve(&rhs).expect("(I − γP) is nonsingular for γ < 1");
    Array1::from_iter(sol.iter().cloned())
}

/// Exact policy evaluation: V_π from (I − γP_π)V = R_π, Q_π from one
/// Bellman backup, occupancy from the transposed system.
pub fn policy_evaluation(mdp: &TabularMdp, pi: &Array2<f64>) -> Result<TabularSolution> {
    validate_policy(mdp, pi)?;
    let p_pi = policy_transition(mdp, pi);
    let r_pi: Array1<f64> = (0..mdp.n_states)
        .map(|s| (0..mdp.n_actions).map(|a| pi[(s, a)] * mdp.reward[(s, a)]).sum())
        .collect();

    let n = mdp.n_states;
    let mut system = Array2::eye(n);
    system.scaled_add(-mdp.gamma, &p_pi);
    let v = solve_linear(&system, &r_pi);

    let mut q = Array2::zeros((n, mdp.n_actions));
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let mut exp_v = 0.0;
            for s2 in 0..n {
                exp_v += mdp.transition[(s, a, s2)] * v[s2];
            }
            q[(s, a)] = mdp.reward[(s, a)] + mdp.gamma * exp_v;
        }
    }

    let mut system_t = Array2::eye(n);
    system_t.scaled_add(-mdp.gamma, &p_pi.t().to_owned());
    let rho = solve_linear(&system_t, &mdp.initial);

    let eta = mdp.initial.dot(&v);
    Ok(TabularSolution { q, v, rho, eta })
}

/// η(π) = p0 · V_π.
pub fn exact_return(mdp: &TabularMdp, pi: &Array2<f64>) -> Result<f64> {
    Ok(policy_evaluation(mdp, pi)?.eta)
}

/// Discounted occupancy ρ = (I − γ P_πᵀ)⁻¹ p0; Σ_s ρ(s) = 1/(1−γ).
pub fn occupancy(mdp: &TabularMdp, pi: &Array2<f64>) -> Result<Array1<f64>> {
    Ok(policy_evaluation(mdp, pi)?.rho)
}

/// Entropy-regularized evaluation fixed point:
/// Q(s,a) = R + γ E_{s′} Σ_{a′} π(a′|s′)(Q(s′,a′) − α log π(a′|s′)).
pub fn soft_policy_evaluation(mdp: &TabularMdp, pi: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    validate_policy(mdp, pi)?;
    // entropy bonus per next state: −α Σ π log π (0 · log 0 = 0)
    let bonus: Array1<f64> = (0..mdp.n_states)
        .map(|s| {
            -alpha
                * (0..mdp.n_actions)
                    .map(|a| {
                        let p = pi[(s, a)];
                        if p > 0.0 {
                            p * p.ln()
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>()
        })
        .collect();
    // V_soft = Σ_a π(Q − α log π) solves (I − γP_π)V = R_π + γ? — fold the
    // bonus into an augmented reward instead and reuse plain evaluation.
    let p_pi = policy_transition(mdp, pi);
    let r_pi: Array1<f64> = (0..mdp.n_states)
        .map(|s| (0..mdp.n_actions).map(|a| pi[(s, a)] * mdp.reward[(s, a)]).sum())
        .collect();
    // V(s) = R_π(s) + bonus(s)·0 … derive directly:
    // V(s) = Σ_a π(Q(s,a) − α log π(a|s)) = R_π(s) + bonus(s) + γ P_π V
    let rhs = &r_pi + &bonus;
    let n = mdp.n_states;
    let mut system = Array2::eye(n);
    system.scaled_add(-mdp.gamma, &p_pi);
    let v = solve_linear(&system, &rhs);
    let mut q = Array2::zeros((n, mdp.n_actions));
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let mut exp_v = 0.0;
            for s2 in 0..n {
                exp_v += mdp.transition[(s, a, s2)] * v[s2];
            }
            q[(s, a)] = mdp.reward[(s, a)] + mdp.gamma * exp_v;
        }
    }
    Ok(q)
}

/// |(η(π1) − η(π2)) − Σ_s ρ_{π1}(s) E_{a∼π1}[Q_{π2}(s,a) − V_{π2}(s)]|,
/// the performance-difference identity as an exact residual.
pub fn pdl_check(mdp: &TabularMdp, pi1: &Array2<f64>, pi2: &Array2<f64>) -> Result<f64> {
    let sol1 = policy_evaluation(mdp, pi1)?;
    let sol2 = policy_evaluation(mdp, pi2)?;
    let mut rhs = 0.0;
    for s in 0..mdp.n_states {
        let mut adv = 0.0;
        for a in 0..mdp.n_actions {
            adv += pi1[(s, a)] * (sol2.q[(s, a)] - sol2.v[s]);
        }
        rhs += sol1.rho[s] * adv;
    }
    Ok(((sol1.eta - sol2.eta) - rhs).abs())
}

/// Q̃ = Q + (1/λ)·log π_β, with −∞ sentinels where π_β assigns zero mass
/// (out-of-support actions are strictly dominated).
pub fn implicit_q(q: &Array2<f64>, pi_beta: &Array2<f64>, lambda: f64) -> Array2<f64> {
    assert!(lambda > 0.0, "lambda must be positive");
    let mut out = q.clone();
    for ((s, a), slot) in out.indexed_iter_mut() {
        let p = pi_beta[(s, a)];
        if p > 0.0 {
            *slot += p.ln() / lambda;
        } else {
            *slot = f64::NEG_INFINITY;
        }
    }
    out
}

/// Signed preference P(s, a1, a2) = Q̃(s, a1) − Q̃(s, a2).
pub fn soft_preference(q_tilde: &Array2<f64>, s: usize, a1: usize, a2: usize) -> f64 {
    q_tilde[(s, a1)] - q_tilde[(s, a2)]
}

/// Greedy action per state, skipping −∞ sentinels.
pub fn greedy(q_tilde: &Array2<f64>) -> Vec<usize> {
    (0..q_tilde.nrows())
        .map(|s| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for a in 0..q_tilde.ncols() {
                let v = q_tilde[(s, a)];
                if v.is_finite() && v > best_v {
                    best_v = v;
                    best = a;
                }
            }
            best
        })
        .collect()
}

/// Most-likely action per state of a stochastic policy.
pub fn mode_policy(pi: &Array2<f64>) -> Vec<usize> {
    (0..pi.nrows())
        .map(|s| {
            let mut best = 0;
            for a in 1..pi.ncols() {
                if pi[(s, a)] > pi[(s, best)] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

/// Behavior policy proportional to exp(κ·Q) per state.
pub fn softmax_policy(q: &Array2<f64>, kappa: f64) -> Array2<f64> {
    let mut pi = Array2::zeros(q.raw_dim());
    for s in 0..q.nrows() {
        let row = q.row(s);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for a in 0..q.ncols() {
            let e = (kappa * (row[a] - mx)).exp();
            pi[(s, a)] = e;
            z += e;
        }
        for a in 0..q.ncols() {
            pi[(s, a)] /= z;
        }
    }
    pi
}

/// All ordered pairs where the behavior likelihood prefers a1 but the
/// preference value disagrees: π_β(a1|s) ≥ π_β(a2|s) yet P < −1e-12.
pub fn assumption1_check(q_tilde: &Array2<f64>, pi_beta: &Array2<f64>) -> Vec<(usize, usize, usize)> {
    let mut violations = Vec::new();
    for s in 0..pi_beta.nrows() {
        for a1 in 0..pi_beta.ncols() {
            for a2 in 0..pi_beta.ncols() {
                if a1 == a2 {
                    continue;
                }
                if pi_beta[(s, a1)] >= pi_beta[(s, a2)] {
                    let p = soft_preference(q_tilde, s, a1, a2);
                    if p < -1e-12 {
                        violations.push((s, a1, a2));
                    }
                }
            }
        }
    }
    violations
}

#[derive(Debug, Clone, Serialize)]
pub struct Prop1Report {
    /// Σ_s ρ_{π_β}(s)·(Q̃(s, π̃(s)) − Q̃(s, π_β(s))), the surrogate gap.
    pub surrogate: f64,
    pub surrogate_nonneg: bool,
    /// Exact η(π̃) − η(π_β) for comparison against the surrogate.
    pub eta_gap: f64,
}

/// Perfect-preference check: the greedy policy of Q̃ = Q* + (1/λ)·log π_β
/// pointwise dominates the behavior mode under Q̃, so the occupancy-
/// weighted surrogate is nonnegative by construction; the exact return
/// gap is reported alongside.
pub fn prop1_check(mdp: &TabularMdp, pi_beta: &Array2<f64>, lambda: f64) -> Result<Prop1Report> {
    let q_star = value_iteration(mdp);
    let q_tilde = implicit_q(&q_star, pi_beta, lambda);
    let pi_tilde = greedy(&q_tilde);
    let beta_mode = mode_policy(pi_beta);

    let beta_det = deterministic_policy(mdp, &beta_mode);
    let rho_beta = occupancy(mdp, &beta_det)?;

    let mut surrogate = 0.0;
    for s in 0..mdp.n_states {
        surrogate += rho_beta[s] * (q_tilde[(s, pi_tilde[s])] - q_tilde[(s, beta_mode[s])]);
    }
    let eta_gap = exact_return(mdp, &deterministic_policy(mdp, &pi_tilde))?
        - exact_return(mdp, &beta_det)?;
    Ok(Prop1Report {
        surrogate,
        surrogate_nonneg: surrogate >= -1e-12,
        eta_gap,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Prop2Report {
    /// Bound slack: [E-term + 2ρ_max(ε̃+ε)] − [η(π̃) − η(π_β)].
    pub slack: f64,
    pub holds: bool,
    /// D = max_s |ρ_{π̃}(s) − ρ_{π_β}(s)|; the bound's derivation replaces
    /// ρ_{π̃} with ρ_{π_β}, so large D instances are reported, not asserted.
    pub occupancy_mismatch: f64,
    pub eta_gap: f64,
    pub expectation_term: f64,
    pub rho_max: f64,
}

/// Noisy-preference check: perturb Q̃ within the stated error bounds,
/// re-derive the greedy policy, and test the return-gap bound.
pub fn prop2_check(
    mdp: &TabularMdp,
    pi_beta: &Array2<f64>,
    lambda: f64,
    noise: &NoiseSpec,
) -> Result<Prop2Report> {
    assert!(noise.eps_behavior >= 0.0 && noise.eps_learned >= 0.0);
    let q_star = value_iteration(mdp);
    let q_tilde = implicit_q(&q_star, pi_beta, lambda);
    let beta_mode = mode_policy(pi_beta);

    // δ within ε̃ everywhere (any action can end up as the learned
    // policy's choice), tightened to min(ε, ε̃) at the behavior action.
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let tight = noise.eps_behavior.min(noise.eps_learned);
    let mut delta = Array2::zeros(q_tilde.raw_dim());
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let bound = if a == beta_mode[s] { tight } else { noise.eps_learned };
            delta[(s, a)] = if bound > 0.0 {
                rng.random_range(-bound..=bound)
            } else {
                0.0
            };
        }
    }
    let q_minus = &q_tilde + &delta;
    let pi_tilde = greedy(&q_minus);

    // post-injection verification of the stated bounds
    for s in 0..mdp.n_states {
        debug_assert!(delta[(s, pi_tilde[s])].abs() <= noise.eps_learned + 1e-15);
        debug_assert!(delta[(s, beta_mode[s])].abs() <= noise.eps_behavior + 1e-15);
    }

    let beta_det = deterministic_policy(mdp, &beta_mode);
    let tilde_det = deterministic_policy(mdp, &pi_tilde);
    let rho_beta = occupancy(mdp, &beta_det)?;
    let rho_tilde = occupancy(mdp, &tilde_det)?;
    let rho_max = rho_beta.iter().cloned().fold(0.0f64, f64::max);

    let mut e_term = 0.0;
    for s in 0..mdp.n_states {
        e_term += rho_beta[s] * (q_minus[(s, pi_tilde[s])] - q_minus[(s, beta_mode[s])]);
    }
    let eta_gap = exact_return(mdp, &tilde_det)? - exact_return(mdp, &beta_det)?;
    let slack = e_term + 2.0 * rho_max * (noise.eps_behavior + noise.eps_learned) - eta_gap;
    let occupancy_mismatch = rho_tilde
        .iter()
        .zip(rho_beta.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    Ok(Prop2Report {
        slack,
        holds: slack >= -1e-9,
        occupancy_mismatch,
        eta_gap,
        expectation_term: e_term,
        rho_max,
    })
}

/// 1/(N(1−γ)) ≤ max_s ρ(s) ≤ 1/(1−γ): the max dominates the mean of a
/// vector with total mass 1/(1−γ), and no state exceeds the total mass.
pub fn rho_bounds_check(mdp: &TabularMdp, pi: &Array2<f64>) -> Result<bool> {
    let rho = occupancy(mdp, pi)?;
    let rho_max = rho.iter().cloned().fold(0.0f64, f64::max);
    let lower = 1.0 / (mdp.n_states as f64 * (1.0 - mdp.gamma));
    let upper = 1.0 / (1.0 - mdp.gamma);
    Ok(rho_max >= lower - 1e-12 && rho_max <= upper + 1e-12)
}

/// Total variation distance as the maximum over events: Σ_{u>v}(u − v).
pub fn tvd_event_max(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v.iter())
        .map(|(a, b)| (a - b).max(0.0))
        .sum()
}

/// Total variation distance as half the L1 distance.
pub fn tvd_half_l1(u: &[f64], v: &[f64]) -> f64 {
    0.5 * u.iter().zip(v.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// One row of the machine-verification report.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub instances: usize,
    pub violations: usize,
    pub worst_slack: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Run the full verification suite on random instances.
///
/// `worst_slack` is check-specific: the largest residual for identity
/// checks, the most negative slack for bound checks.
pub fn run_suite(instances: usize, seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // Performance-difference identity and occupancy mass.
    let mut pdl_worst = 0.0f64;
    let mut pdl_viol = 0;
    let mut mass_worst = 0.0f64;
    let mut mass_viol = 0;
    for _ in 0..instances {
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
        let pi1 = crate::envs::tabular::random_policy(&mdp, &mut rng);
        let pi2 = crate::envs::tabular::random_policy(&mdp, &mut rng);
        let residual = pdl_check(&mdp, &pi1, &pi2).expect("valid policies");
        pdl_worst = pdl_worst.max(residual);
        if residual > 1e-10 {
            pdl_viol += 1;
        }
        let rho = occupancy(&mdp, &pi1).expect("valid policy");
        let mass_err = (rho.sum() - 1.0 / (1.0 - mdp.gamma)).abs();
        mass_worst = mass_worst.max(mass_err);
        if mass_err > 1e-9 {
            mass_viol += 1;
        }
    }
    reports.push(CheckReport {
        check: "pdl_identity".into(),
        instances,
        violations: pdl_viol,
        worst_slack: pdl_worst,
    });
    reports.push(CheckReport {
        check: "occupancy_mass".into(),
        instances,
        violations: mass_viol,
        worst_slack: mass_worst,
    });

    // Occupancy bounds on a larger draw.
    let rho_instances = 1000;
    let mut rho_viol = 0;
    for _ in 0..rho_instances {
        let mdp = TabularMdp::random(4, 3, 0.9, &mut rng);
        let pi = crate::envs::tabular::random_policy(&mdp, &mut rng);
        if !rho_bounds_check(&mdp, &pi).expect("valid policy") {
            rho_viol += 1;
        }
    }
    reports.push(CheckReport {
        check: "rho_max_bounds".into(),
        instances: rho_instances,
        violations: rho_viol,
        worst_slack: 0.0,
    });

    // Perfect preference surrogate.
    let mut p1_viol = 0;
    let mut p1_worst = f64::INFINITY;
    for _ in 0..instances {
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
        let q_star = value_iteration(&mdp);
        let kappa = rng.random_range(1.0..6.0);
        let pi_beta = softmax_policy(&q_star, kappa);
        let lambda = [0.5, 1.0, 2.0][rng.random_range(0..3)];
        let report = prop1_check(&mdp, &pi_beta, lambda).expect("valid instance");
        p1_worst = p1_worst.min(report.surrogate);
        if !report.surrogate_nonneg {
            p1_viol += 1;
        }
    }
    reports.push(CheckReport {
        check: "prop1_surrogate_nonneg".into(),
        instances,
        violations: p1_viol,
        worst_slack: p1_worst,
    });

    // Noisy preference bound, asserted on small-occupancy-mismatch
    // instances, reported on the rest.
    let mut p2_checked = 0;
    let mut p2_viol = 0;
    let mut p2_worst = f64::INFINITY;
    let d_threshold = 0.05 / (1.0 - 0.9);
    for _ in 0..instances {
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
        let q_star = value_iteration(&mdp);
        let kappa = rng.random_range(1.0..6.0);
        let pi_beta = softmax_policy(&q_star, kappa);
        let lambda = [0.5, 1.0, 2.0][rng.random_range(0..3)];
        let noise = NoiseSpec {
            eps_behavior: 0.1,
            eps_learned: 0.1,
            seed: rng.random(),
        };
        let report = prop2_check(&mdp, &pi_beta, lambda, &noise).expect("valid instance");
        if report.occupancy_mismatch <= d_threshold {
            p2_checked += 1;
            p2_worst = p2_worst.min(report.slack);
            if !report.holds {
                p2_viol += 1;
            }
        }
    }
    reports.push(CheckReport {
        check: "prop2_bound_small_mismatch".into(),
        instances: p2_checked,
        violations: p2_viol,
        worst_slack: if p2_worst.is_finite() { p2_worst } else { 0.0 },
    });

    // TVD identity.
    let mut tvd_worst = 0.0f64;
    let mut tvd_viol = 0;
    for _ in 0..instances {
        let n = rng.random_range(2..8);
        let u = crate::envs::tabular::random_policy(
            &TabularMdp::random(1, n, 0.5, &mut rng),
            &mut rng,
        );
        let v = crate::envs::tabular::random_policy(
            &TabularMdp::random(1, n, 0.5, &mut rng),
            &mut rng,
        );
        let (u, v) = (u.row(0).to_vec(), v.row(0).to_vec());
        let d = (tvd_event_max(&u, &v) - tvd_half_l1(&u, &v)).abs();
        tvd_worst = tvd_worst.max(d);
        if d > 1e-12 {
            tvd_viol += 1;
        }
    }
    reports.push(CheckReport {
        check: "tvd_identity".into(),
        instances,
        violations: tvd_viol,
        worst_slack: tvd_worst,
    });

    reports
}
