//! Implicit behavior model: an energy function E(s, a) whose Boltzmann
//! form is the behavior density. Only energy *differences* are consumed
//! downstream, so the normalizer is never computed; the discretized
//! density here exists purely as a diagnostic.

use std::cell::Cell;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::OfflineDataset;
use crate::error::{BprError, Result};
use crate::nn::optim::AdamW;
use crate::nn::tape::Tape;
use crate::nn::{DenseNet, NetSpec};

/// Anything that scores (state, action) pairs with an energy. Lower
/// energy means higher behavior likelihood. Implementations other than
/// [`EnergyModel`] exist for shift-invariance tests.
pub trait EnergySource {
    fn energy_batch(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>>;

    fn is_trained(&self) -> bool {
        true
    }
}

/// Configuration for EBM pretraining.
#[derive(Debug, Clone)]
pub struct EbmConfig {
    pub hidden: Vec<usize>,
    pub steps: u64,
    pub batch: usize,
    /// Uniform box negatives per positive.
    pub negatives: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Loss-trace logging stride.
    pub log_every: u64,
}

impl Default for EbmConfig {
    fn default() -> Self {
        EbmConfig {
            hidden: vec![64, 64],
            steps: 20_000,
            batch: 32,
            negatives: 256,
            learning_rate: 3e-4,
            weight_decay: 0.0,
            log_every: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub net: DenseNet,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Action box for negative sampling.
    pub action_low: f64,
    pub action_high: f64,
    pub trained: bool,
    eval_count: Cell<u64>,
}

impl EnergyModel {
    /// Layer-normalized, spectrally normalized GELU network mapping
    /// concat(s, a) to a scalar energy.
    pub fn new<R: Rng>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let net = DenseNet::new(state_dim + action_dim, hidden, 1, NetSpec::normalized(), rng);
        EnergyModel {
            net,
            state_dim,
            action_dim,
            action_low: -1.0,
            action_high: 1.0,
            trained: false,
            eval_count: Cell::new(0),
        }
    }

    /// Number of (batched) energy evaluations since construction; used to
    /// assert that policy updates never backpropagate through the EBM.
    pub fn eval_count(&self) -> u64 {
        self.eval_count.get()
    }

    pub fn energy(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let s = Array2::from_shape_vec((1, state.len()), state.to_vec())
            .map_err(|e| BprError::shape("energy", "state row", e.to_string()))?;
        let a = Array2::from_shape_vec((1, action.len()), action.to_vec())
            .map_err(|e| BprError::shape("energy", "action row", e.to_string()))?;
        Ok(self.energy_batch(&s, &a)?[0])
    }

    fn stack_inputs(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array2<f64>> {
        if states.ncols() != self.state_dim || actions.ncols() != self.action_dim {
            return Err(BprError::shape(
                "energy",
                format!("dims ({}, {})", self.state_dim, self.action_dim),
                format!("({}, {})", states.ncols(), actions.ncols()),
            ));
        }
        if states.nrows() != actions.nrows() {
            return Err(BprError::shape(
                "energy",
                "matching row counts",
                format!("{} vs {}", states.nrows(), actions.nrows()),
            ));
        }
        let mut x = Array2::zeros((states.nrows(), self.state_dim + self.action_dim));
        x.slice_mut(ndarray::s![.., ..self.state_dim]).assign(states);
        x.slice_mut(ndarray::s![.., self.state_dim..]).assign(actions);
        Ok(x)
    }

    /// Normalized density over a finite action grid at one state:
    /// softmax of −E with max subtraction.
    pub fn density_grid(&self, state: &[f64], grid: &[Vec<f64>]) -> Result<Vec<f64>> {
        if grid.is_empty() {
            return Err(BprError::Domain("density grid must be nonempty".into()));
        }
        let states = Array2::from_shape_fn((grid.len(), state.len()), |(_, j)| state[j]);
        let mut actions = Array2::zeros((grid.len(), self.action_dim));
        for (i, a) in grid.iter().enumerate() {
            for j in 0..self.action_dim {
                actions[(i, j)] = a[j];
            }
        }
        let energies = self.energy_batch(&states, &actions)?;
        let neg_max = energies.iter().map(|&e| -e).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = energies.iter().map(|&e| (-e - neg_max).exp()).collect();
        let z: f64 = weights.iter().sum();
        Ok(weights.into_iter().map(|w| w / z).collect())
    }

    /// Contrastive loss against the provided negatives at a single state,
    /// with max subtraction for stability: the negative log-probability of
    /// the positive under a softmax over {positive} ∪ negatives.
    pub fn infonce_loss(&self, state: &[f64], a_pos: &[f64], negatives: &[Vec<f64>]) -> Result<f64> {
        if negatives.is_empty() {
            return Err(BprError::Domain("need at least one negative".into()));
        }
        let rows = 1 + negatives.len();
        let states = Array2::from_shape_fn((rows, state.len()), |(_, j)| state[j]);
        let mut actions = Array2::zeros((rows, self.action_dim));
        for j in 0..self.action_dim {
            actions[(0, j)] = a_pos[j];
        }
        for (i, a) in negatives.iter().enumerate() {
            for j in 0..self.action_dim {
                actions[(i + 1, j)] = a[j];
            }
        }
        let e = self.energy_batch(&states, &actions)?;
        let neg: Vec<f64> = e.iter().map(|&x| -x).collect();
        let mx = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + neg.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
        Ok(e[0] + lse)
    }
}

impl EnergySource for EnergyModel {
    fn energy_batch(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>> {
        let x = self.stack_inputs(states, actions)?;
        self.eval_count.set(self.eval_count.get() + 1);
        let out = self.net.forward(&x)?;
        Ok(out.column(0).to_owned())
    }

    fn is_trained(&self) -> bool {
        self.trained
    }
}

/// A base energy plus a state-dependent constant; downstream losses must
/// be invariant to the added term.
pub struct ShiftedEnergy<'a, F: Fn(&[f64]) -> f64> {
    pub inner: &'a dyn EnergySource,
    pub shift: F,
}

impl<'a, F: Fn(&[f64]) -> f64> EnergySource for ShiftedEnergy<'a, F> {
    fn energy_batch(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>> {
        let mut e = self.inner.energy_batch(states, actions)?;
        for (i, row) in states.rows().into_iter().enumerate() {
            e[i] += (self.shift)(row.to_slice().expect("contiguous state row"));
        }
        Ok(e)
    }
}

/// Training statistics returned alongside the model.
#[derive(Debug, Clone, Default)]
pub struct EbmTrace {
    /// (step, loss) pairs at the logging stride.
    pub losses: Vec<(u64, f64)>,
}

/// Pretrain an energy model on the dataset with InfoNCE against uniform
/// box negatives. Zero steps returns the freshly initialized model with
/// its `trained` flag unset.
pub fn train_ebm(
    ds: &OfflineDataset,
    cfg: &EbmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(EnergyModel, EbmTrace)> {
    if ds.is_empty() {
        return Err(BprError::Dataset("cannot train an EBM on an empty dataset".into()));
    }
    let mut model = EnergyModel::new(ds.state_dim, ds.action_dim, &cfg.hidden, rng);
    let mut trace = EbmTrace::default();
    if cfg.steps == 0 {
        return Ok((model, trace));
    }
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, &model.net.param_shapes());
    let k = cfg.negatives;

    for step in 0..cfg.steps {
        let batch = ds.sample_batch(cfg.batch, rng)?;
        let b = batch.len();
        let rows = b * (k + 1);
        let mut states = Array2::zeros((rows, ds.state_dim));
        let mut actions = Array2::zeros((rows, ds.action_dim));
        for i in 0..b {
            for slot in 0..k + 1 {
                let r = i * (k + 1) + slot;
                for j in 0..ds.state_dim {
                    states[(r, j)] = batch.states[(i, j)];
                }
                for j in 0..ds.action_dim {
                    actions[(r, j)] = if slot == 0 {
                        batch.actions[(i, j)]
                    } else {
                        rng.random_range(model.action_low..model.action_high)
                    };
                }
            }
        }

        let x = model.stack_inputs(&states, &actions)?;
        let mut tape = Tape::new();
        let (out, bindings) = model.net.forward_tape(&mut tape, &x)?;
        // rows × 1 energies → batch × (1 + K); column 0 is the positive
        let e = tape.reshape(out, b, k + 1);
        let e_pos = tape.cols(e, 0, 1);
        let neg_e = tape.neg(e);
        let lse = tape.logsumexp_row(neg_e);
        let per_row = tape.add(e_pos, lse);
        let loss = tape.mean_all(per_row);
        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(BprError::TrainingAborted {
                step,
                message: format!("EBM loss diverged to {loss_value}"),
            });
        }
        let mut grads = tape.backward(loss)?;
        let grad_arrays = bindings.collect(&tape, &mut grads);
        let names: Vec<String> = (0..grad_arrays.len()).map(|i| model.net.param_name(i)).collect();
        opt.step(model.net.visit_params_mut(), &grad_arrays, |i| names[i].clone())
            .map_err(|e| BprError::TrainingAborted { step, message: e.to_string() })?;
        model.net.spectral_tick();

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            trace.losses.push((step, loss_value));
        }
    }
    model.trained = true;
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::bandit::{generate_bandit_dataset, BanditSpec};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn toy_model(seed: u64) -> EnergyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EnergyModel::new(1, 1, &[16, 16], &mut rng)
    }

    #[test]
    fn energy_is_deterministic_and_checks_dims() {
        let m = toy_model(0);
        let a = m.energy(&[0.3], &[0.5]).unwrap();
        let b = m.energy(&[0.3], &[0.5]).unwrap();
        assert_eq!(a, b);
        assert!(m.energy(&[0.3, 0.1], &[0.5]).is_err());
    }

    #[test]
    fn symmetric_two_way_softmax_gives_log_two() {
        // equal energies: loss = −log(1/2) = log 2, for any energy value
        let m = toy_model(1);
        let loss = m.infonce_loss(&[0.0], &[0.4], &[vec![0.4]]).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
        // K equal-energy negatives → log(K + 1)
        for k in [3usize, 7] {
            let negs = vec![vec![0.4]; k];
            let loss = m.infonce_loss(&[0.0], &[0.4], &negs).unwrap();
            assert_relative_eq!(loss, ((k + 1) as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_computed_infonce_value() {
        // E⁺ = 0, one negative with E⁻ = ln 3 → log(4/3). Build a model
        // whose energy is exactly its input action via an identity net.
        let mut m = toy_model(2);
        m.net = DenseNet::new(2, &[], 1, NetSpec::plain(), &mut ChaCha8Rng::seed_from_u64(0));
        m.net.layers[0].weight = ndarray::array![[0.0, 1.0]]; // energy = action
        let loss = m.infonce_loss(&[0.0], &[0.0], &[vec![3.0f64.ln()]]).unwrap();
        assert_relative_eq!(loss, (4.0f64 / 3.0).ln(), epsilon = 1e-12);
        assert_relative_eq!(loss, 0.287682, epsilon = 1e-6);
    }

    #[test]
    fn density_grid_normalizes_and_handles_uniform_energies() {
        let mut m = toy_model(3);
        // constant-output net: zero final layer
        let last = m.net.layers.len() - 1;
        m.net.layers[last].weight.fill(0.0);
        m.net.layers[last].bias.fill(1.7);
        let grid: Vec<Vec<f64>> = (0..11).map(|i| vec![-1.0 + 0.2 * i as f64]).collect();
        let probs = m.density_grid(&[0.0], &grid).unwrap();
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() <= 1e-9);
        for p in &probs {
            assert_relative_eq!(*p, 1.0 / 11.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn density_grid_shift_invariance() {
        // adding a state-dependent constant to every energy leaves the
        // grid density unchanged (the normalizer cancels)
        let m = toy_model(4);
        let grid: Vec<Vec<f64>> = (0..21).map(|i| vec![-1.0 + 0.1 * i as f64]).collect();
        let base = m.density_grid(&[0.2], &grid).unwrap();

        let shifted = ShiftedEnergy { inner: &m, shift: |s: &[f64]| 3.25 + s[0] };
        // evaluate the shifted density through the same softmax path
        let states = Array2::from_shape_fn((grid.len(), 1), |_| 0.2);
        let actions = Array2::from_shape_fn((grid.len(), 1), |(i, _)| grid[i][0]);
        let e = shifted.energy_batch(&states, &actions).unwrap();
        let mx = e.iter().map(|&x| -x).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = e.iter().map(|&x| (-x - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        for (a, b) in base.iter().zip(w.iter().map(|x| x / z)) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_point_grid_hand_softmax() {
        // energies {0, ln 2} → probabilities {2/3, 1/3}
        let mut m = toy_model(5);
        m.net = DenseNet::new(2, &[], 1, NetSpec::plain(), &mut ChaCha8Rng::seed_from_u64(0));
        m.net.layers[0].weight = ndarray::array![[0.0, 1.0]];
        let probs = m.density_grid(&[0.0], &[vec![0.0], vec![2.0f64.ln()]]).unwrap();
        assert_relative_eq!(probs[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(probs[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_steps_returns_untrained_model() {
        let spec = BanditSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = generate_bandit_dataset(&spec, 100, &mut rng).unwrap();
        let cfg = EbmConfig { steps: 0, ..EbmConfig::default() };
        let (model, trace) = train_ebm(&ds, &cfg, &mut rng).unwrap();
        assert!(!model.trained);
        assert!(trace.losses.is_empty());
    }

    #[test]
    fn short_training_reduces_infonce_loss() {
        let spec = BanditSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ds = generate_bandit_dataset(&spec, 2000, &mut rng).unwrap();
        let cfg = EbmConfig {
            hidden: vec![32, 32],
            steps: 300,
            batch: 16,
            negatives: 64,
            log_every: 10,
            ..EbmConfig::default()
        };
        let (model, trace) = train_ebm(&ds, &cfg, &mut rng).unwrap();
        assert!(model.trained);
        let first = trace.losses.first().unwrap().1;
        let last = trace.losses.last().unwrap().1;
        assert!(last < first, "no improvement: first {first}, last {last}");
    }
}
