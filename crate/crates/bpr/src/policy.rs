//! Tanh-squashed Gaussian actor and the paired-sample regression
//! objective.
//!
//! The per-state residual regresses the policy's log-density difference
//! onto the behavior energy difference, offset by the value difference:
//!
//!   [(E(s,a₂) − E(s,a₁)) − λ((log π(a₁|s) − Q(s,a₁)) − (log π(a₂|s) − Q(s,a₂)))]²
//!
//! Gradients flow only through the two log π terms. Sampled actions,
//! energies, and values enter as constants; the sampling itself carries
//! no reparameterized gradient path. Adding any state-dependent constant
//! to E(s,·) or to Q(s,·) cancels inside the residual, which is the
//! operational form of never computing a partition function.

use std::cell::Cell;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::critic::{TargetPolicy, ValueSource};
use crate::ebm::EnergySource;
use crate::error::{BprError, Result};
use crate::nn::optim::AdamW;
use crate::nn::tape::{NodeId, Tape};
use crate::nn::{DenseNet, NetSpec, ParamBindings};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Inverse-tanh clipping bound for externally supplied actions.
pub const ATANH_CLIP: f64 = 1.0 - 1e-6;
const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Which distributions supply the compared action pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Both actions drawn from the current policy.
    SelfPlay,
    /// First action from the dataset, second from the current policy.
    Reference,
}

/// Squashed-Gaussian actor: the network maps a state to a mean and a
/// per-state log standard deviation (clamped to [−5, 2]); actions are
/// tanh of Gaussian draws, with the exact change-of-variables density.
pub struct TanhGaussianPolicy {
    pub net: DenseNet,
    pub state_dim: usize,
    pub action_dim: usize,
    sample_count: Cell<u64>,
}

impl TanhGaussianPolicy {
    pub fn new<R: Rng>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        TanhGaussianPolicy {
            net: DenseNet::new(state_dim, hidden, 2 * action_dim, NetSpec::plain(), rng),
            state_dim,
            action_dim,
            sample_count: Cell::new(0),
        }
    }

    pub fn from_net(net: DenseNet, state_dim: usize, action_dim: usize) -> Result<Self> {
        if net.input_dim != state_dim || net.output_dim != 2 * action_dim {
            return Err(BprError::shape(
                "policy net",
                format!("{state_dim} → {}", 2 * action_dim),
                format!("{} → {}", net.input_dim, net.output_dim),
            ));
        }
        Ok(TanhGaussianPolicy {
            net,
            state_dim,
            action_dim,
            sample_count: Cell::new(0),
        })
    }

    /// Number of sampling calls; the on-policy value-training phase must
    /// leave this at zero.
    pub fn sample_count(&self) -> u64 {
        self.sample_count.get()
    }

    /// Mean and clamped log-std for a state batch (no gradients).
    pub fn mean_logstd(&self, states: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.net.forward(states)?;
        let mean = out.slice(ndarray::s![.., ..self.action_dim]).to_owned();
        let log_std = out
            .slice(ndarray::s![.., self.action_dim..])
            .mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok((mean, log_std))
    }

    /// Draw a ∼ tanh(N(μ, σ²)) per row; returns actions and their exact
    /// log-densities. The draws carry no gradient path.
    pub fn sample(&self, states: &Array2<f64>, rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Array1<f64>)> {
        self.sample_count.set(self.sample_count.get() + 1);
        let (mean, log_std) = self.mean_logstd(states)?;
        let b = states.nrows();
        let mut actions = Array2::zeros((b, self.action_dim));
        let mut logp = Array1::zeros(b);
        for i in 0..b {
            let mut lp = 0.0;
            for j in 0..self.action_dim {
                let eps: f64 = rng.sample(StandardNormal);
                let std = log_std[(i, j)].exp();
                let u = mean[(i, j)] + std * eps;
                let a = u.tanh();
                actions[(i, j)] = a;
                // log N(u; μ, σ) − log(1 − tanh(u)²), the latter via the
                // softplus form for stability at large |u|
                lp += -0.5 * eps * eps - log_std[(i, j)] - HALF_LN_TWO_PI - log_one_minus_tanh_sq(u);
            }
            logp[i] = lp;
        }
        Ok((actions, logp))
    }

    /// Draw two independent action sets from one network forward.
    pub fn sample_pair(
        &self,
        states: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.sample_count.set(self.sample_count.get() + 2);
        let (mean, log_std) = self.mean_logstd(states)?;
        let b = states.nrows();
        let mut first = Array2::zeros((b, self.action_dim));
        let mut second = Array2::zeros((b, self.action_dim));
        for (out, _) in [(&mut first, 0), (&mut second, 1)] {
            for i in 0..b {
                for j in 0..self.action_dim {
                    let eps: f64 = rng.sample(StandardNormal);
                    out[(i, j)] = (mean[(i, j)] + log_std[(i, j)].exp() * eps).tanh();
                }
            }
        }
        Ok((first, second))
    }

    /// Deterministic evaluation action: tanh of the mean.
    pub fn deterministic_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        let s = Array2::from_shape_vec((1, state.len()), state.to_vec())
            .map_err(|e| BprError::shape("deterministic_action", "state row", e.to_string()))?;
        let (mean, _) = self.mean_logstd(&s)?;
        Ok(mean.row(0).iter().map(|&m| m.tanh()).collect())
    }

    /// Exact log-density of given actions (no gradients). Actions are
    /// clipped to ±(1 − 1e-6) before the inverse tanh.
    pub fn log_prob(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>> {
        let (mean, log_std) = self.mean_logstd(states)?;
        let b = states.nrows();
        let mut out = Array1::zeros(b);
        for i in 0..b {
            let mut lp = 0.0;
            for j in 0..self.action_dim {
                let a = actions[(i, j)].clamp(-ATANH_CLIP, ATANH_CLIP);
                let u = a.atanh();
                let std = log_std[(i, j)].exp();
                let z = (u - mean[(i, j)]) / std;
                lp += -0.5 * z * z - log_std[(i, j)] - HALF_LN_TWO_PI - (1.0 - a * a).ln();
            }
            out[i] = lp;
        }
        Ok(out)
    }

    /// Record log π(a|s) for each provided action set on the tape, sharing
    /// one network forward. Returns one B×1 node per action set.
    pub fn log_prob_graph(
        &self,
        tape: &mut Tape,
        states: &Array2<f64>,
        action_sets: &[&Array2<f64>],
    ) -> Result<(Vec<NodeId>, ParamBindings)> {
        let (out, bindings) = self.net.forward_tape(tape, states)?;
        let mean = tape.cols(out, 0, self.action_dim);
        let log_std_raw = tape.cols(out, self.action_dim, 2 * self.action_dim);
        let log_std = tape.clamp(log_std_raw, LOG_STD_MIN, LOG_STD_MAX);
        let neg_log_std = tape.neg(log_std);
        let inv_std = tape.exp(neg_log_std);

        let mut nodes = Vec::with_capacity(action_sets.len());
        for &actions in action_sets {
            let clipped = actions.mapv(|a| a.clamp(-ATANH_CLIP, ATANH_CLIP));
            let u = clipped.mapv(f64::atanh);
            // per-element Jacobian and normalization constants
            let const_terms = clipped.mapv(|a| -(1.0 - a * a).ln() - HALF_LN_TWO_PI);
            let u_node = tape.constant(u);
            let diff = tape.sub(u_node, mean);
            let z = tape.mul(diff, inv_std);
            let z2 = tape.square(z);
            let quad = tape.scale(z2, -0.5);
            let with_std = tape.sub(quad, log_std);
            let consts = tape.constant(const_terms);
            let full = tape.add(with_std, consts);
            nodes.push(tape.row_sum(full));
        }
        Ok((nodes, bindings))
    }
}

impl TargetPolicy for TanhGaussianPolicy {
    fn sample_actions(&self, states: &Array2<f64>, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array1<f64>) {
        self.sample(states, rng).expect("policy sampling failed")
    }
}

/// log(1 − tanh(u)²) = 2(ln 2 − u − softplus(−2u)).
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// The paired regression residual as a recorded loss:
/// mean over rows of [k − λ(lp₁ − lp₂)]² with
/// k = (E₂ − E₁) + λ(Q₁ − Q₂) held constant.
pub fn paired_regression_loss(
    tape: &mut Tape,
    e1: &Array1<f64>,
    e2: &Array1<f64>,
    q1: &Array1<f64>,
    q2: &Array1<f64>,
    lp1: NodeId,
    lp2: NodeId,
    lambda: f64,
) -> NodeId {
    let b = e1.len();
    let k: Array1<f64> = (0..b)
        .map(|i| (e2[i] - e1[i]) + lambda * (q1[i] - q2[i]))
        .collect();
    let k_node = tape.constant(k.into_shape_with_order((b, 1)).unwrap());
    let lp_diff = tape.sub(lp1, lp2);
    let model = tape.scale(lp_diff, lambda);
    let residual = tape.sub(k_node, model);
    let sq = tape.square(residual);
    tape.mean_all(sq)
}

/// A fully built policy-loss evaluation.
pub struct BprLossGraph {
    pub tape: Tape,
    pub loss: NodeId,
    pub bindings: ParamBindings,
    pub value: f64,
    /// Per-row regression target E(s,a₂) − E(s,a₁).
    pub target_diff: Array1<f64>,
    /// Per-row model term λ((lp₁ − Q₁) − (lp₂ − Q₂)).
    pub model_diff: Array1<f64>,
}

/// Build the paired-sample loss for one state batch. In self-play both
/// actions come from the policy; in reference mode the first slot is the
/// dataset action. Only the log-density terms are differentiable.
pub fn bpr_loss_graph(
    lambda: f64,
    mode: SamplingMode,
    policy: &TanhGaussianPolicy,
    energy: &dyn EnergySource,
    value: &dyn ValueSource,
    states: &Array2<f64>,
    dataset_actions: Option<&Array2<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<BprLossGraph> {
    if !energy.is_trained() {
        return Err(BprError::Config(
            "behavior energy model must be trained before policy regression".into(),
        ));
    }
    if lambda <= 0.0 {
        return Err(BprError::Config(format!("lambda must be positive, got {lambda}")));
    }
    let (a1, a2) = match mode {
        SamplingMode::SelfPlay => policy.sample_pair(states, rng)?,
        SamplingMode::Reference => {
            let a1 = dataset_actions
                .ok_or_else(|| BprError::Config("reference sampling needs dataset actions".into()))?
                .clone();
            let a2 = policy.sample(states, rng)?.0;
            (a1, a2)
        }
    };

    // one stacked no-gradient evaluation per source covers both slots
    let stacked_states = ndarray::concatenate(ndarray::Axis(0), &[states.view(), states.view()])
        .expect("state stacking");
    let stacked_actions = ndarray::concatenate(ndarray::Axis(0), &[a1.view(), a2.view()])
        .expect("action stacking");
    let e_all = energy.energy_batch(&stacked_states, &stacked_actions)?;
    let q_all = value.q_batch(&stacked_states, &stacked_actions)?;
    let b_rows = states.nrows();
    let e1 = e_all.slice(ndarray::s![..b_rows]).to_owned();
    let e2 = e_all.slice(ndarray::s![b_rows..]).to_owned();
    let q1 = q_all.slice(ndarray::s![..b_rows]).to_owned();
    let q2 = q_all.slice(ndarray::s![b_rows..]).to_owned();

    let mut tape = Tape::new();
    let (lps, bindings) = policy.log_prob_graph(&mut tape, states, &[&a1, &a2])?;
    let loss = paired_regression_loss(&mut tape, &e1, &e2, &q1, &q2, lps[0], lps[1], lambda);
    let value_scalar = tape.scalar(loss);

    let lp1 = tape.value(lps[0]).column(0).to_owned();
    let lp2 = tape.value(lps[1]).column(0).to_owned();
    let b = states.nrows();
    let mut target_diff = Array1::zeros(b);
    let mut model_diff = Array1::zeros(b);
    for i in 0..b {
        target_diff[i] = e2[i] - e1[i];
        model_diff[i] = lambda * ((lp1[i] - q1[i]) - (lp2[i] - q2[i]));
    }

    Ok(BprLossGraph {
        tape,
        loss,
        bindings,
        value: value_scalar,
        target_diff,
        model_diff,
    })
}

/// Scalar convenience wrapper around [`bpr_loss_graph`].
#[allow(clippy::too_many_arguments)]
pub fn bpr_loss(
    lambda: f64,
    mode: SamplingMode,
    policy: &TanhGaussianPolicy,
    energy: &dyn EnergySource,
    value: &dyn ValueSource,
    states: &Array2<f64>,
    dataset_actions: Option<&Array2<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    Ok(bpr_loss_graph(lambda, mode, policy, energy, value, states, dataset_actions, rng)?.value)
}

/// One batch of the paired regression: build the loss, backpropagate
/// through the log-density terms, and apply one optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn policy_step(
    lambda: f64,
    mode: SamplingMode,
    policy: &mut TanhGaussianPolicy,
    optimizer: &mut AdamW,
    energy: &dyn EnergySource,
    value: &dyn ValueSource,
    states: &Array2<f64>,
    dataset_actions: Option<&Array2<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let graph = bpr_loss_graph(lambda, mode, policy, energy, value, states, dataset_actions, rng)?;
    if !graph.value.is_finite() {
        return Err(BprError::NonFinite(format!(
            "policy loss (targets {:?})",
            graph.target_diff.iter().take(4).collect::<Vec<_>>()
        )));
    }
    let BprLossGraph { tape, loss, bindings, value: loss_value, .. } = graph;
    let mut grads = tape.backward(loss)?;
    let grad_arrays = bindings.collect(&tape, &mut grads);
    let names: Vec<String> = (0..grad_arrays.len()).map(|i| policy.net.param_name(i)).collect();
    optimizer.step(policy.net.visit_params_mut(), &grad_arrays, |i| names[i].clone())?;
    Ok(loss_value)
}

/// Behavioral-cloning step: maximize log π(a|s) over dataset pairs.
pub fn bc_step(
    policy: &mut TanhGaussianPolicy,
    optimizer: &mut AdamW,
    states: &Array2<f64>,
    actions: &Array2<f64>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (lps, bindings) = policy.log_prob_graph(&mut tape, states, &[actions])?;
    let mean_lp = tape.mean_all(lps[0]);
    let loss = tape.neg(mean_lp);
    let loss_value = tape.scalar(loss);
    if !loss_value.is_finite() {
        return Err(BprError::NonFinite("behavioral cloning loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    let grad_arrays = bindings.collect(&tape, &mut grads);
    let names: Vec<String> = (0..grad_arrays.len()).map(|i| policy.net.param_name(i)).collect();
    optimizer.step(policy.net.visit_params_mut(), &grad_arrays, |i| names[i].clone())?;
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::FnValue;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;

    struct FnEnergy<F: Fn(&[f64], &[f64]) -> f64>(F);

    impl<F: Fn(&[f64], &[f64]) -> f64> EnergySource for FnEnergy<F> {
        fn energy_batch(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>> {
            let mut out = Array1::zeros(states.nrows());
            for i in 0..states.nrows() {
                out[i] = (self.0)(
                    states.row(i).to_slice().unwrap(),
                    actions.row(i).to_slice().unwrap(),
                );
            }
            Ok(out)
        }
    }

    fn toy_policy(seed: u64) -> TanhGaussianPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TanhGaussianPolicy::new(2, 1, &[16, 16], &mut rng)
    }

    /// Policy with exactly μ = 0 and a fixed log-std.
    fn centered_policy(log_std: f64) -> TanhGaussianPolicy {
        let mut p = toy_policy(0);
        let last = p.net.layers.len() - 1;
        p.net.layers[last].weight.fill(0.0);
        p.net.layers[last].bias = array![[0.0, log_std]];
        p
    }

    #[test]
    fn tiny_std_collapses_to_tanh_mean() {
        let p = centered_policy(LOG_STD_MIN);
        let mut with_mean = p;
        let last = with_mean.net.layers.len() - 1;
        with_mean.net.layers[last].bias = array![[0.7, -20.0]]; // clamps to −5
        let states = array![[0.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, _) = with_mean.sample(&states, &mut rng).unwrap();
        assert_relative_eq!(a[(0, 0)], 0.7f64.tanh(), epsilon = 0.05);
    }

    #[test]
    fn standard_normal_density_at_the_mean() {
        // μ = 0, σ = 1, u drawn at 0 → a = 0, log density −½·ln 2π
        let p = centered_policy(0.0);
        let states = array![[0.0, 0.0]];
        let lp = p.log_prob(&states, &array![[0.0]]).unwrap();
        assert_relative_eq!(lp[0], -HALF_LN_TWO_PI, epsilon = 1e-9);
        assert_relative_eq!(lp[0], -0.918939, epsilon = 1e-6);
    }

    #[test]
    fn log_prob_matches_sampled_density() {
        let p = toy_policy(3);
        let states = Array2::from_shape_fn((32, 2), |_| 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (actions, lp) = p.sample(&states, &mut rng).unwrap();
        let lp2 = p.log_prob(&states, &actions).unwrap();
        for i in 0..32 {
            assert!(
                (lp[i] - lp2[i]).abs() < 1e-5,
                "row {i}: sampled {} vs evaluated {}",
                lp[i],
                lp2[i]
            );
        }
    }

    #[test]
    fn symmetric_policy_has_symmetric_density() {
        let p = centered_policy(-0.3);
        let states = array![[0.1, -0.4]];
        for a in [0.2, 0.55, 0.9] {
            let lp_pos = p.log_prob(&states, &array![[a]]).unwrap()[0];
            let lp_neg = p.log_prob(&states, &array![[-a]]).unwrap()[0];
            assert_relative_eq!(lp_pos, lp_neg, epsilon = 1e-12);
        }
    }

    #[test]
    fn density_integrates_to_one_in_one_dimension() {
        // 2001-point trapezoid over the open interval
        let p = toy_policy(5);
        let states = array![[0.25, -0.75]];
        let n = 2001;
        let h = 2.0 / (n as f64 + 1.0);
        let mut integral = 0.0;
        for k in 1..=n {
            let a = -1.0 + h * k as f64;
            let lp = p.log_prob(&states, &array![[a]]).unwrap()[0];
            integral += lp.exp() * h;
        }
        assert!((integral - 1.0).abs() <= 1e-3, "integral {integral}");
    }

    #[test]
    fn taped_log_prob_matches_plain_evaluation() {
        let p = toy_policy(6);
        let states = Array2::from_shape_fn((8, 2), |(i, j)| 0.1 * i as f64 - 0.2 * j as f64);
        let actions = Array2::from_shape_fn((8, 1), |(i, _)| -0.9 + 0.2 * i as f64);
        let plain = p.log_prob(&states, &actions).unwrap();
        let mut tape = Tape::new();
        let (nodes, _) = p.log_prob_graph(&mut tape, &states, &[&actions]).unwrap();
        let taped = tape.value(nodes[0]).column(0).to_owned();
        for i in 0..8 {
            assert_relative_eq!(plain[i], taped[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let p = toy_policy(7);
        let states = Array2::from_shape_fn((4, 2), |(i, j)| 0.2 * i as f64 + 0.1 * j as f64);
        let actions = array![[0.3], [-0.5], [0.8], [0.0]];
        let params: Vec<Array2<f64>> = p.net.visit_params().iter().map(|x| (*x).clone()).collect();
        let f = |ps: &[Array2<f64>]| {
            let mut q = toy_policy(7);
            for (dst, src) in q.net.visit_params_mut().into_iter().zip(ps.iter()) {
                dst.assign(src);
            }
            let mut tape = Tape::new();
            let (nodes, bindings) = q.log_prob_graph(&mut tape, &states, &[&actions]).unwrap();
            let loss = tape.mean_all(nodes[0]);
            let mut grads = tape.backward(loss).unwrap();
            (tape.scalar(loss), bindings.collect(&tape, &mut grads))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let err = crate::nn::gradcheck::grad_check(f, &params, 25, &mut rng);
        assert!(err <= 1e-4, "gradient error {err}");
    }

    #[test]
    fn identical_pair_gives_zero_loss() {
        let mut tape = Tape::new();
        let lp = tape.constant(array![[-1.2], [0.3]]);
        let e = array![0.4, -0.1];
        let q = array![1.0, 2.0];
        let loss = paired_regression_loss(&mut tape, &e, &e, &q, &q, lp, lp, 1.0);
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn hand_example_residual() {
        // E₁ = 1, E₂ = 2, Q₁ = 0.5, Q₂ = 0, log π₁ = −1, log π₂ = −2, λ = 1:
        // target 1.0, model term 0.5, loss 0.25
        let mut tape = Tape::new();
        let lp1 = tape.constant(array![[-1.0]]);
        let lp2 = tape.constant(array![[-2.0]]);
        let loss = paired_regression_loss(
            &mut tape,
            &array![1.0],
            &array![2.0],
            &array![0.5],
            &array![0.0],
            lp1,
            lp2,
            1.0,
        );
        assert_relative_eq!(tape.scalar(loss), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn pair_swap_leaves_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = toy_policy(9);
        let states = Array2::from_shape_fn((6, 2), |_| rng.random_range(-0.5..0.5));
        let a1 = Array2::from_shape_fn((6, 1), |_| rng.random_range(-0.9..0.9));
        let a2 = Array2::from_shape_fn((6, 1), |_| rng.random_range(-0.9..0.9));
        let energy = FnEnergy(|_: &[f64], a: &[f64]| a[0] * a[0] - 0.3 * a[0]);
        let value = FnValue(|s: &[f64], a: &[f64]| s[0] + 2.0 * a[0]);

        let eval_pair = |first: &Array2<f64>, second: &Array2<f64>| -> f64 {
            let e1 = energy.energy_batch(&states, first).unwrap();
            let e2 = energy.energy_batch(&states, second).unwrap();
            let q1 = value.q_batch(&states, first).unwrap();
            let q2 = value.q_batch(&states, second).unwrap();
            let mut tape = Tape::new();
            let (lps, _) = p.log_prob_graph(&mut tape, &states, &[first, second]).unwrap();
            let loss = paired_regression_loss(&mut tape, &e1, &e2, &q1, &q2, lps[0], lps[1], 1.3);
            tape.scalar(loss)
        };
        let forward = eval_pair(&a1, &a2);
        let swapped = eval_pair(&a2, &a1);
        assert_relative_eq!(forward, swapped, epsilon = 1e-12);
    }

    #[test]
    fn state_dependent_shifts_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = toy_policy(10);
        let states = Array2::from_shape_fn((16, 2), |_| rng.random_range(-0.5..0.5));
        let energy = FnEnergy(|_: &[f64], a: &[f64]| a[0] * a[0]);
        let value = FnValue(|s: &[f64], a: &[f64]| s[1] - a[0]);
        let shifted_energy = crate::ebm::ShiftedEnergy {
            inner: &energy,
            shift: |s: &[f64]| 7.0 * s[0] - 2.0,
        };
        let shifted_value = crate::critic::ShiftedValue {
            inner: &value,
            shift: |s: &[f64]| -3.0 * s[1] + 11.0,
        };
        // identical RNG streams so the sampled pairs agree
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let mut r3 = ChaCha8Rng::seed_from_u64(42);
        let base = bpr_loss(1.0, SamplingMode::SelfPlay, &p, &energy, &value, &states, None, &mut r1).unwrap();
        let e_shift = bpr_loss(1.0, SamplingMode::SelfPlay, &p, &shifted_energy, &value, &states, None, &mut r2).unwrap();
        let q_shift = bpr_loss(1.0, SamplingMode::SelfPlay, &p, &energy, &shifted_value, &states, None, &mut r3).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
        assert!(rel(base, e_shift) <= 1e-6, "energy shift changed loss: {base} vs {e_shift}");
        assert!(rel(base, q_shift) <= 1e-6, "value shift changed loss: {base} vs {q_shift}");
    }

    #[test]
    fn lambda_scales_the_model_term_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = toy_policy(11);
        let states = Array2::from_shape_fn((8, 2), |_| rng.random_range(-0.5..0.5));
        let energy = FnEnergy(|_: &[f64], a: &[f64]| a[0]);
        let value = FnValue(|_: &[f64], a: &[f64]| -a[0]);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let g1 = bpr_loss_graph(1.0, SamplingMode::SelfPlay, &p, &energy, &value, &states, None, &mut r1).unwrap();
        let g2 = bpr_loss_graph(2.0, SamplingMode::SelfPlay, &p, &energy, &value, &states, None, &mut r2).unwrap();
        for i in 0..8 {
            assert_relative_eq!(g2.model_diff[i], 2.0 * g1.model_diff[i], epsilon = 1e-12);
            assert_relative_eq!(g2.target_diff[i], g1.target_diff[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn untrained_energy_model_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let em = crate::ebm::EnergyModel::new(2, 1, &[8], &mut rng);
        let p = toy_policy(12);
        let value = FnValue(|_: &[f64], _: &[f64]| 0.0);
        let states = array![[0.0, 0.0]];
        let err = bpr_loss(1.0, SamplingMode::SelfPlay, &p, &em, &value, &states, None, &mut rng);
        assert!(matches!(err, Err(BprError::Config(_))));
    }

    #[test]
    fn reference_mode_requires_dataset_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = toy_policy(13);
        let energy = FnEnergy(|_: &[f64], _: &[f64]| 0.0);
        let value = FnValue(|_: &[f64], _: &[f64]| 0.0);
        let states = array![[0.0, 0.0]];
        let err = bpr_loss(1.0, SamplingMode::Reference, &p, &energy, &value, &states, None, &mut rng);
        assert!(matches!(err, Err(BprError::Config(_))));
    }

    #[test]
    fn policy_step_never_touches_energy_or_value_state() {
        // gradients must exist only for policy parameters; the energy and
        // value sources are queried, never differentiated
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut p = toy_policy(14);
        let mut opt = AdamW::new(3e-4, 0.0, &p.net.param_shapes());
        let em = {
            let mut m = crate::ebm::EnergyModel::new(2, 1, &[8], &mut rng);
            m.trained = true;
            m
        };
        let em_params: Vec<Array2<f64>> = em.net.visit_params().iter().map(|x| (*x).clone()).collect();
        let value = FnValue(|_: &[f64], a: &[f64]| a[0]);
        let states = Array2::from_shape_fn((8, 2), |_| rng.random_range(-0.5..0.5));
        let before = p.net.visit_params()[0].clone();
        policy_step(1.0, SamplingMode::SelfPlay, &mut p, &mut opt, &em, &value, &states, None, &mut rng)
            .unwrap();
        assert_ne!(&before, p.net.visit_params()[0], "policy must update");
        for (a, b) in em.net.visit_params().iter().zip(em_params.iter()) {
            assert_eq!(*a, b, "energy model drifted during a policy step");
        }
    }

    #[test]
    fn full_policy_loss_gradient_matches_finite_differences() {
        let p = toy_policy(15);
        let states = Array2::from_shape_fn((4, 2), |(i, j)| 0.15 * i as f64 - 0.1 * j as f64);
        let energy = FnEnergy(|_: &[f64], a: &[f64]| 0.5 * a[0] * a[0]);
        let value = FnValue(|s: &[f64], a: &[f64]| s[0] + a[0]);
        // freeze the sampled pair so the loss is a deterministic function
        // of the parameters
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (a1, _) = p.sample(&states, &mut rng).unwrap();
        let (a2, _) = p.sample(&states, &mut rng).unwrap();
        let e1 = energy.energy_batch(&states, &a1).unwrap();
        let e2 = energy.energy_batch(&states, &a2).unwrap();
        let q1 = value.q_batch(&states, &a1).unwrap();
        let q2 = value.q_batch(&states, &a2).unwrap();

        let params: Vec<Array2<f64>> = p.net.visit_params().iter().map(|x| (*x).clone()).collect();
        let f = |ps: &[Array2<f64>]| {
            let mut q = toy_policy(15);
            for (dst, src) in q.net.visit_params_mut().into_iter().zip(ps.iter()) {
                dst.assign(src);
            }
            let mut tape = Tape::new();
            let (lps, bindings) = q.log_prob_graph(&mut tape, &states, &[&a1, &a2]).unwrap();
            let loss = paired_regression_loss(&mut tape, &e1, &e2, &q1, &q2, lps[0], lps[1], 1.0);
            let mut grads = tape.backward(loss).unwrap();
            (tape.scalar(loss), bindings.collect(&tape, &mut grads))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let err = crate::nn::gradcheck::grad_check(f, &params, 25, &mut rng);
        assert!(err <= 1e-4, "gradient error {err}");
    }

    #[test]
    fn same_seed_policy_steps_are_bit_identical() {
        let energy = FnEnergy(|_: &[f64], a: &[f64]| a[0] * a[0]);
        let value = FnValue(|_: &[f64], a: &[f64]| a[0]);
        let run = || {
            let mut p = toy_policy(18);
            let mut opt = AdamW::new(3e-4, 0.0, &p.net.param_shapes());
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let states = Array2::from_shape_fn((8, 2), |_| 0.1);
            for _ in 0..100 {
                policy_step(1.0, SamplingMode::SelfPlay, &mut p, &mut opt, &energy, &value, &states, None, &mut rng)
                    .unwrap();
            }
            p.net.visit_params().iter().map(|x| (*x).clone()).collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
