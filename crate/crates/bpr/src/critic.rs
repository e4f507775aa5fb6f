//! Value learning in three regimes: entropy-regularized off-policy
//! learning with clipped double-Q targets, on-policy (SARSA) evaluation
//! of the behavior policy from stored next actions, and independent
//! ensembles aggregated as a lower confidence bound.

use std::cell::Cell;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::error::{BprError, Result};
use crate::nn::optim::AdamW;
use crate::nn::tape::Tape;
use crate::nn::{DenseNet, NetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    OffPolicy,
    Onestep,
    EnsembleLcb,
}

impl Regime {
    pub fn member_count(self) -> usize {
        match self {
            Regime::OffPolicy | Regime::Onestep => 2,
            Regime::EnsembleLcb => 4,
        }
    }
}

/// Action sampler used for off-policy bootstrap targets.
pub trait TargetPolicy {
    /// Sample one action per state row; returns (actions, log-densities).
    fn sample_actions(&self, states: &Array2<f64>, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array1<f64>);
}

/// Anything that scores (state, action) pairs for the policy objective.
pub trait ValueSource {
    fn q_batch(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>>;
}

/// Regime-matched regression targets: one shared column for the
/// clipped-double-Q regimes, one column per member for independent
/// ensembles.
#[derive(Debug, Clone)]
pub enum CriticTargets {
    Shared(Array1<f64>),
    PerMember(Array2<f64>),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CriticHyper {
    /// Soft target-update coefficient.
    pub tau: f64,
    /// Entropy temperature for soft Bellman targets.
    pub alpha: f64,
    pub gamma: f64,
    /// Ensemble pessimism coefficient.
    pub omega: f64,
}

impl Default for CriticHyper {
    fn default() -> Self {
        CriticHyper { tau: 0.005, alpha: 0.2, gamma: 0.99, omega: 2.0 }
    }
}

pub struct CriticSet {
    pub members: Vec<DenseNet>,
    pub targets: Vec<DenseNet>,
    pub regime: Regime,
    pub hyper: CriticHyper,
    optimizers: Vec<AdamW>,
    state_dim: usize,
    action_dim: usize,
    eval_count: Cell<u64>,
}

impl CriticSet {
    pub fn new<R: Rng>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        regime: Regime,
        hyper: CriticHyper,
        learning_rate: f64,
        weight_decay: f64,
        rng: &mut R,
    ) -> Self {
        let members: Vec<DenseNet> = (0..regime.member_count())
            .map(|_| DenseNet::new(state_dim + action_dim, hidden, 1, NetSpec::layer_normed(), rng))
            .collect();
        Self::from_nets(members, regime, hyper, learning_rate, weight_decay, state_dim, action_dim)
    }

    /// Build from explicit member networks (tabular one-hot tables in the
    /// fixed-point tests use this).
    pub fn from_nets(
        members: Vec<DenseNet>,
        regime: Regime,
        hyper: CriticHyper,
        learning_rate: f64,
        weight_decay: f64,
        state_dim: usize,
        action_dim: usize,
    ) -> Self {
        assert_eq!(
            members.len(),
            regime.member_count(),
            "member count must match the regime"
        );
        let targets = members.clone();
        let optimizers = members
            .iter()
            .map(|m| AdamW::new(learning_rate, weight_decay, &m.param_shapes()))
            .collect();
        CriticSet {
            members,
            targets,
            regime,
            hyper,
            optimizers,
            state_dim,
            action_dim,
            eval_count: Cell::new(0),
        }
    }

    pub fn eval_count(&self) -> u64 {
        self.eval_count.get()
    }

    fn stack(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array2<f64>> {
        if states.ncols() != self.state_dim || actions.ncols() != self.action_dim {
            return Err(BprError::shape(
                "critic input",
                format!("({}, {})", self.state_dim, self.action_dim),
                format!("({}, {})", states.ncols(), actions.ncols()),
            ));
        }
        let mut x = Array2::zeros((states.nrows(), self.state_dim + self.action_dim));
        x.slice_mut(ndarray::s![.., ..self.state_dim]).assign(states);
        x.slice_mut(ndarray::s![.., self.state_dim..]).assign(actions);
        Ok(x)
    }

    fn member_values(net: &DenseNet, x: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(net.forward(x)?.column(0).to_owned())
    }

    /// Soft Bellman target for the off-policy regime:
    /// y = r + (1−done)·γ·(min_i Q̄_i(s′, a′) − α·log π(a′|s′)), a′ ∼ π.
    pub fn soft_bellman_target(
        &self,
        batch: &Batch,
        policy: &dyn TargetPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array1<f64>> {
        if self.regime != Regime::OffPolicy {
            return Err(BprError::Config(format!(
                "soft_bellman_target requires the off-policy regime, got {:?}",
                self.regime
            )));
        }
        let (next_actions, logp) = policy.sample_actions(&batch.next_states, rng);
        let x = self.stack(&batch.next_states, &next_actions)?;
        let mut min_q = Self::member_values(&self.targets[0], &x)?;
        for t in &self.targets[1..] {
            let q = Self::member_values(t, &x)?;
            for (m, v) in min_q.iter_mut().zip(q.iter()) {
                *m = m.min(*v);
            }
        }
        let mut y = Array1::zeros(batch.len());
        for i in 0..batch.len() {
            let boot = if batch.dones[i] { 0.0 } else { 1.0 };
            y[i] = batch.rewards[i]
                + boot * self.hyper.gamma * (min_q[i] - self.hyper.alpha * logp[i]);
            if !y[i].is_finite() {
                return Err(BprError::NonFinite(format!(
                    "soft Bellman target at row {i} (r={}, q={}, logp={})",
                    batch.rewards[i], min_q[i], logp[i]
                )));
            }
        }
        Ok(y)
    }

    /// On-policy target from the dataset's stored next action:
    /// y = r + (1−done)·γ·min_i Q̄_i(s′, a′_data). No entropy term — the
    /// evaluated policy is the behavior policy, which has no temperature.
    pub fn sarsa_target(&self, batch: &Batch) -> Result<Array1<f64>> {
        if self.regime != Regime::Onestep {
            return Err(BprError::Config(format!(
                "sarsa_target requires the onestep regime, got {:?}",
                self.regime
            )));
        }
        self.check_next_actions(batch)?;
        let x = self.stack(&batch.next_states, &batch.next_actions)?;
        let mut min_q = Self::member_values(&self.targets[0], &x)?;
        for t in &self.targets[1..] {
            let q = Self::member_values(t, &x)?;
            for (m, v) in min_q.iter_mut().zip(q.iter()) {
                *m = m.min(*v);
            }
        }
        let mut y = Array1::zeros(batch.len());
        for i in 0..batch.len() {
            let boot = if batch.dones[i] { 0.0 } else { 1.0 };
            y[i] = batch.rewards[i] + boot * self.hyper.gamma * min_q[i];
        }
        Ok(y)
    }

    /// Independent SARSA targets, one column per member: each member
    /// bootstraps from its own target copy with no min across the
    /// ensemble.
    pub fn ensemble_sarsa_targets(&self, batch: &Batch) -> Result<Array2<f64>> {
        if self.regime != Regime::EnsembleLcb {
            return Err(BprError::Config(format!(
                "ensemble_sarsa_targets requires the ensemble regime, got {:?}",
                self.regime
            )));
        }
        self.check_next_actions(batch)?;
        let x = self.stack(&batch.next_states, &batch.next_actions)?;
        let mut y = Array2::zeros((batch.len(), self.targets.len()));
        for (k, t) in self.targets.iter().enumerate() {
            let q = Self::member_values(t, &x)?;
            for i in 0..batch.len() {
                let boot = if batch.dones[i] { 0.0 } else { 1.0 };
                y[(i, k)] = batch.rewards[i] + boot * self.hyper.gamma * q[i];
            }
        }
        Ok(y)
    }

    fn check_next_actions(&self, batch: &Batch) -> Result<()> {
        for i in 0..batch.len() {
            if !batch.dones[i] && batch.next_actions.row(i).iter().any(|v| !v.is_finite()) {
                return Err(BprError::Dataset(format!(
                    "non-terminal row {i} is missing a usable next action"
                )));
            }
        }
        Ok(())
    }

    /// Regress every member onto its target with one optimizer step each;
    /// targets are constants. Returns the per-member mean squared errors.
    pub fn critic_update(&mut self, batch: &Batch, targets: &CriticTargets) -> Result<Vec<f64>> {
        let x = self.stack(&batch.states, &batch.actions)?;
        let mut losses = Vec::with_capacity(self.members.len());
        for k in 0..self.members.len() {
            let y: Array1<f64> = match targets {
                CriticTargets::Shared(y) => y.clone(),
                CriticTargets::PerMember(m) => m.column(k).to_owned(),
            };
            let n = y.len();
            let y_col = y.into_shape_with_order((n, 1)).expect("column reshape");

            let mut tape = Tape::new();
            let (q, bindings) = self.members[k].forward_tape(&mut tape, &x)?;
            let y_node = tape.constant(y_col);
            let diff = tape.sub(q, y_node);
            let sq = tape.square(diff);
            let loss = tape.mean_all(sq);
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(BprError::NonFinite(format!("critic {k} TD loss")));
            }
            let mut grads = tape.backward(loss)?;
            let grad_arrays = bindings.collect(&tape, &mut grads);
            let names: Vec<String> = (0..grad_arrays.len())
                .map(|i| format!("critic{k}.{}", self.members[k].param_name(i)))
                .collect();
            self.optimizers[k].step(self.members[k].visit_params_mut(), &grad_arrays, |i| {
                names[i].clone()
            })?;
            self.members[k].spectral_tick();
            losses.push(loss_value);
        }
        Ok(losses)
    }

    /// θ̄ ← (1−τ)·θ̄ + τ·θ for every member/target pair.
    pub fn target_soft_update(&mut self) {
        for (target, member) in self.targets.iter_mut().zip(&self.members) {
            target.soft_update_from(member, self.hyper.tau);
        }
    }

    /// Ensemble mean minus ω times the population variance across members.
    pub fn q_lcb(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>> {
        if self.members.len() < 2 {
            return Err(BprError::Config("LCB needs at least 2 members".into()));
        }
        let x = self.stack(states, actions)?;
        let values: Vec<Array1<f64>> = self
            .members
            .iter()
            .map(|m| Self::member_values(m, &x))
            .collect::<Result<_>>()?;
        let n = self.members.len() as f64;
        let mut out = Array1::zeros(states.nrows());
        for i in 0..states.nrows() {
            let mean = values.iter().map(|v| v[i]).sum::<f64>() / n;
            let var = values.iter().map(|v| (v[i] - mean) * (v[i] - mean)).sum::<f64>() / n;
            out[i] = mean - self.hyper.omega * var;
        }
        Ok(out)
    }

    /// The scalar consumed by the policy objective, dispatched by regime:
    /// min over members for the clipped-double-Q regimes, the lower
    /// confidence bound for ensembles. Never differentiated.
    pub fn q_value_batch(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>> {
        self.eval_count.set(self.eval_count.get() + 1);
        match self.regime {
            Regime::OffPolicy | Regime::Onestep => {
                let x = self.stack(states, actions)?;
                let mut min_q = Self::member_values(&self.members[0], &x)?;
                for m in &self.members[1..] {
                    let q = Self::member_values(m, &x)?;
                    for (mq, v) in min_q.iter_mut().zip(q.iter()) {
                        *mq = mq.min(*v);
                    }
                }
                Ok(min_q)
            }
            Regime::EnsembleLcb => self.q_lcb(states, actions),
        }
    }
}

impl ValueSource for CriticSet {
    fn q_batch(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>> {
        self.q_value_batch(states, actions)
    }
}

/// A base value plus a state-dependent constant; the policy loss must be
/// invariant to the added term.
pub struct ShiftedValue<'a, F: Fn(&[f64]) -> f64> {
    pub inner: &'a dyn ValueSource,
    pub shift: F,
}

impl<'a, F: Fn(&[f64]) -> f64> ValueSource for ShiftedValue<'a, F> {
    fn q_batch(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>> {
        let mut q = self.inner.q_batch(states, actions)?;
        for (i, row) in states.rows().into_iter().enumerate() {
            q[i] += (self.shift)(row.to_slice().expect("contiguous state row"));
        }
        Ok(q)
    }
}

/// Fixed value function defined by a closure (tests and the zero-critic
/// degenerate path).
pub struct FnValue<F: Fn(&[f64], &[f64]) -> f64>(pub F);

impl<F: Fn(&[f64], &[f64]) -> f64> ValueSource for FnValue<F> {
    fn q_batch(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(states.nrows());
        for i in 0..states.nrows() {
            out[i] = (self.0)(
                states.row(i).to_slice().expect("contiguous"),
                actions.row(i).to_slice().expect("contiguous"),
            );
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn toy_batch() -> Batch {
        Batch {
            states: ndarray::array![[0.1], [0.2], [0.3]],
            actions: ndarray::array![[0.0], [0.1], [-0.1]],
            rewards: ndarray::array![1.0, 0.5, -0.2],
            next_states: ndarray::array![[0.2], [0.3], [0.4]],
            next_actions: ndarray::array![[0.1], [-0.1], [0.0]],
            dones: vec![false, false, true],
        }
    }

    fn constant_net(value: f64) -> DenseNet {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = DenseNet::new(2, &[], 1, NetSpec::plain(), &mut rng);
        net.layers[0].weight.fill(0.0);
        net.layers[0].bias.fill(value);
        net
    }

    fn constant_critics(values: &[f64], regime: Regime, hyper: CriticHyper) -> CriticSet {
        let members = values.iter().map(|&v| constant_net(v)).collect();
        CriticSet::from_nets(members, regime, hyper, 3e-4, 0.0, 1, 1)
    }

    struct FixedPolicy {
        logp: f64,
    }

    impl TargetPolicy for FixedPolicy {
        fn sample_actions(&self, states: &Array2<f64>, _rng: &mut ChaCha8Rng) -> (Array2<f64>, Array1<f64>) {
            (
                Array2::zeros((states.nrows(), 1)),
                Array1::from_elem(states.nrows(), self.logp),
            )
        }
    }

    #[test]
    fn soft_bellman_terminal_and_hand_arithmetic() {
        // members/targets constant 2.0; r = 1, γ = 0.99, log π = −1, α = 0.2
        // → y = 1 + 0.99·(2 + 0.2) = 3.178; terminal rows give y = r
        let hyper = CriticHyper { gamma: 0.99, alpha: 0.2, ..CriticHyper::default() };
        let cs = constant_critics(&[2.0, 2.0], Regime::OffPolicy, hyper);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = cs
            .soft_bellman_target(&toy_batch(), &FixedPolicy { logp: -1.0 }, &mut rng)
            .unwrap();
        assert_relative_eq!(y[0], 3.178, epsilon = 1e-12);
        assert_relative_eq!(y[2], -0.2, epsilon = 1e-12);

        // γ = 0 → y = r everywhere
        let hyper0 = CriticHyper { gamma: 0.0, ..hyper };
        let cs0 = constant_critics(&[2.0, 2.0], Regime::OffPolicy, hyper0);
        let y0 = cs0
            .soft_bellman_target(&toy_batch(), &FixedPolicy { logp: -1.0 }, &mut rng)
            .unwrap();
        for i in 0..3 {
            assert_relative_eq!(y0[i], toy_batch().rewards[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn sarsa_target_hand_arithmetic() {
        // r = 0.5, γ = 0.999, min Q̄ = 10 → 10.49
        let hyper = CriticHyper { gamma: 0.999, ..CriticHyper::default() };
        let cs = constant_critics(&[10.0, 12.0], Regime::Onestep, hyper);
        let y = cs.sarsa_target(&toy_batch()).unwrap();
        assert_relative_eq!(y[1], 0.5 + 0.999 * 10.0, epsilon = 1e-12);
        // terminal row bootstraps nothing
        assert_relative_eq!(y[2], -0.2, epsilon = 1e-12);

        // zero-initialized targets → y = r everywhere on step 1
        let cs0 = constant_critics(&[0.0, 0.0], Regime::Onestep, hyper);
        let y0 = cs0.sarsa_target(&toy_batch()).unwrap();
        for i in 0..3 {
            assert_relative_eq!(y0[i], toy_batch().rewards[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn regime_mismatch_is_a_config_error() {
        let cs = constant_critics(&[0.0, 0.0], Regime::Onestep, CriticHyper::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(cs
            .soft_bellman_target(&toy_batch(), &FixedPolicy { logp: 0.0 }, &mut rng)
            .is_err());
        let cs2 = constant_critics(&[0.0, 0.0], Regime::OffPolicy, CriticHyper::default());
        assert!(cs2.sarsa_target(&toy_batch()).is_err());
        assert!(cs2.ensemble_sarsa_targets(&toy_batch()).is_err());
    }

    #[test]
    fn ensemble_targets_are_independent_per_member() {
        let hyper = CriticHyper { gamma: 0.5, ..CriticHyper::default() };
        let cs = constant_critics(&[1.0, 2.0, 3.0, 4.0], Regime::EnsembleLcb, hyper);
        let y = cs.ensemble_sarsa_targets(&toy_batch()).unwrap();
        // row 0: r = 1, non-terminal → y_k = 1 + 0.5·k-th target value
        for (k, expect) in [1.5, 2.0, 2.5, 3.0].iter().enumerate() {
            assert_relative_eq!(y[(0, k)], *expect, epsilon = 1e-12);
        }
        // terminal row: every member's target is just r
        for k in 0..4 {
            assert_relative_eq!(y[(2, k)], -0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_fit_gives_zero_loss_and_no_drift() {
        // members output exactly the target constant; wd = 0
        let mut cs = constant_critics(&[0.7, 0.7], Regime::Onestep, CriticHyper::default());
        let batch = toy_batch();
        let y = Array1::from_elem(3, 0.7);
        let before: Vec<_> = cs.members[0].visit_params().iter().map(|p| (*p).clone()).collect();
        let losses = cs.critic_update(&batch, &CriticTargets::Shared(y)).unwrap();
        for l in &losses {
            assert!(l.abs() <= 1e-24);
        }
        for (a, b) in cs.members[0].visit_params().iter().zip(before.iter()) {
            assert_eq!(*a, b, "zero loss must not move parameters");
        }
    }

    #[test]
    fn constant_offset_loss_is_squared_delta() {
        let mut cs = constant_critics(&[1.0, 1.0], Regime::Onestep, CriticHyper::default());
        let batch = toy_batch();
        let delta = 0.3;
        let y = Array1::from_elem(3, 1.0 + delta);
        let losses = cs.critic_update(&batch, &CriticTargets::Shared(y)).unwrap();
        for l in losses {
            assert_relative_eq!(l, delta * delta, epsilon = 1e-12);
        }
    }

    #[test]
    fn target_updates_only_via_soft_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cs = CriticSet::new(
            1,
            1,
            &[8],
            Regime::OffPolicy,
            CriticHyper { tau: 0.0, ..CriticHyper::default() },
            3e-4,
            0.0,
            &mut rng,
        );
        let snapshot: Vec<Vec<Array2<f64>>> = cs
            .targets
            .iter()
            .map(|t| t.visit_params().iter().map(|p| (*p).clone()).collect())
            .collect();
        let batch = toy_batch();
        let y = Array1::zeros(3);
        cs.critic_update(&batch, &CriticTargets::Shared(y)).unwrap();
        cs.target_soft_update(); // τ = 0: bit-identical targets
        for (t, snap) in cs.targets.iter().zip(snapshot.iter()) {
            for (a, b) in t.visit_params().iter().zip(snap.iter()) {
                assert_eq!(*a, b);
            }
        }
    }

    #[test]
    fn lcb_hand_arithmetic() {
        // members {1, 3}: mean 2, population variance 1, ω = 2 → 0
        let hyper = CriticHyper { omega: 2.0, ..CriticHyper::default() };
        let members = vec![constant_net(1.0), constant_net(3.0), constant_net(1.0), constant_net(3.0)];
        let cs = CriticSet::from_nets(members, Regime::EnsembleLcb, hyper, 3e-4, 0.0, 1, 1);
        // {1, 3, 1, 3}: mean 2, var 1 → LCB = 0
        let s = ndarray::array![[0.0]];
        let a = ndarray::array![[0.0]];
        let v = cs.q_lcb(&s, &a).unwrap();
        assert_relative_eq!(v[0], 0.0, epsilon = 1e-12);

        // identical members → variance 0 → the common value
        let same = constant_critics(&[2.5, 2.5, 2.5, 2.5], Regime::EnsembleLcb, hyper);
        assert_relative_eq!(same.q_lcb(&s, &a).unwrap()[0], 2.5, epsilon = 1e-12);

        // ω = 0 → plain ensemble mean
        let hyper0 = CriticHyper { omega: 0.0, ..hyper };
        let mixed = constant_critics(&[1.0, 1.0, 3.0, 3.0], Regime::EnsembleLcb, hyper0);
        assert_relative_eq!(mixed.q_lcb(&s, &a).unwrap()[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn q_value_dispatches_by_regime() {
        let s = ndarray::array![[0.0]];
        let a = ndarray::array![[0.0]];
        // off-policy: min over members {4, 5} → 4
        let cs = constant_critics(&[4.0, 5.0], Regime::OffPolicy, CriticHyper::default());
        assert_relative_eq!(cs.q_value_batch(&s, &a).unwrap()[0], 4.0, epsilon = 1e-12);
        // ensemble {1, 1, 3, 3}, ω = 2 → mean 2 − 2·1 = 0
        let hyper = CriticHyper { omega: 2.0, ..CriticHyper::default() };
        let ens = constant_critics(&[1.0, 1.0, 3.0, 3.0], Regime::EnsembleLcb, hyper);
        assert_relative_eq!(ens.q_value_batch(&s, &a).unwrap()[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn terminal_rows_never_bootstrap() {
        let hyper = CriticHyper { gamma: 0.99, ..CriticHyper::default() };
        let cs = constant_critics(&[100.0, 100.0], Regime::Onestep, hyper);
        let mut batch = toy_batch();
        batch.dones = vec![true, true, true];
        let y = cs.sarsa_target(&batch).unwrap();
        for i in 0..3 {
            assert_relative_eq!(y[i], batch.rewards[i], epsilon = 1e-12);
        }
    }
}
