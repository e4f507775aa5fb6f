//! Dense-network substrate: forward evaluation, reverse-mode gradients,
//! layer/spectral normalization, and a decoupled-weight-decay optimizer.
//!
//! Everything learned in this crate (energy model, critics, policy) is a
//! [`DenseNet`]: a stack of fully connected layers with optional layer
//! normalization and spectral normalization, evaluated either directly
//! ([`DenseNet::forward`], no gradients) or onto a [`tape::Tape`]
//! ([`DenseNet::forward_tape`]) for training.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod spectral;
pub mod tape;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BprError, Result};
use tape::{NodeId, Tape};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Gelu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Gelu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            other => Err(BprError::Format {
                offset: 0,
                message: format!("unknown activation code {other}"),
            }),
        }
    }
}

/// Affine layer-norm parameters (gain, shift), both 1×out.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Array2<f64>,
    pub shift: Array2<f64>,
}

/// Persisted power-iteration state for a spectrally normalized weight.
#[derive(Debug, Clone)]
pub struct SpectralState {
    /// Left singular-vector estimate, length = rows of the weight.
    pub u: Array1<f64>,
    /// Right singular-vector estimate, length = cols of the weight.
    pub v: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// out × in.
    pub weight: Array2<f64>,
    /// 1 × out.
    pub bias: Array2<f64>,
    pub activation: Activation,
    pub layer_norm: Option<LayerNorm>,
    pub spectral: Option<SpectralState>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// σ̂ = uᵀ W v from the persisted power-iteration vectors.
    pub fn sigma_estimate(&self) -> Option<f64> {
        self.spectral
            .as_ref()
            .map(|s| spectral::rayleigh(&self.weight, &s.u, &s.v))
    }

    /// Weight actually used in forward passes: W/σ̂ when spectral
    /// normalization is active, W otherwise.
    pub fn effective_weight(&self) -> Array2<f64> {
        match self.sigma_estimate() {
            Some(sigma) if sigma.abs() > 1e-300 => self.weight.mapv(|w| w / sigma),
            _ => self.weight.clone(),
        }
    }
}

/// Architecture switches shared by the network constructors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NetSpec {
    pub activation: Activation,
    pub layer_norm: bool,
    pub spectral_norm: bool,
}

impl NetSpec {
    pub fn plain() -> Self {
        NetSpec {
            activation: Activation::Gelu,
            layer_norm: false,
            spectral_norm: false,
        }
    }

    pub fn layer_normed() -> Self {
        NetSpec {
            layer_norm: true,
            ..Self::plain()
        }
    }

    pub fn normalized() -> Self {
        NetSpec {
            layer_norm: true,
            spectral_norm: true,
            ..Self::plain()
        }
    }
}

/// Multi-layer perceptron with consecutive layer dimensions chained.
#[derive(Debug, Clone)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl DenseNet {
    /// Fan-in-scaled uniform weights, zero biases. Hidden layers take the
    /// spec's activation and normalization; the output layer is a plain
    /// linear map.
    pub fn new<R: Rng>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        spec: NetSpec,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);

        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight =
                Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
            let is_output = k == dims.len() - 2;
            let layer_norm = (!is_output && spec.layer_norm).then(|| LayerNorm {
                gain: Array2::ones((1, fan_out)),
                shift: Array2::zeros((1, fan_out)),
            });
            let spectral = (!is_output && spec.spectral_norm).then(|| {
                let mut s = SpectralState {
                    u: Array1::from_shape_fn(fan_out, |_| rng.random_range(-1.0..1.0f64)),
                    v: Array1::zeros(fan_in),
                };
                spectral::power_iterate(&weight, &mut s, spectral::INIT_ITERS);
                s
            });
            layers.push(Layer {
                weight,
                bias: Array2::zeros((1, fan_out)),
                activation: if is_output {
                    Activation::Identity
                } else {
                    spec.activation
                },
                layer_norm,
                spectral,
            });
        }

        DenseNet {
            layers,
            input_dim,
            output_dim,
        }
    }

    /// Batched forward pass without gradient recording.
    ///
    /// Rows of `x` are independent inputs of length `input_dim`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(BprError::shape(
                "forward",
                format!("input dim {}", self.input_dim),
                format!("{}", x.ncols()),
            ));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let w_eff = layer.effective_weight();
            h = h.dot(&w_eff.t()) + &layer.bias;
            if let Some(ln) = &layer.layer_norm {
                standardize_rows(&mut h);
                h = h * &ln.gain + &ln.shift;
            }
            match layer.activation {
                Activation::Gelu => h.mapv_inplace(tape::gelu),
                Activation::Tanh => h.mapv_inplace(f64::tanh),
                Activation::Identity => {}
            }
        }
        Ok(h)
    }

    /// Single-vector convenience wrapper around [`DenseNet::forward`].
    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let arr = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .map_err(|e| BprError::shape("forward", "row vector", e.to_string()))?;
        Ok(self.forward(&arr)?.row(0).to_vec())
    }

    /// Forward pass recorded on a tape. Parameters enter as trainable
    /// leaves; the returned bindings map tape nodes back to this network's
    /// parameter arrays in [`DenseNet::visit_params`] order. The spectral
    /// σ̂ is built from the persisted vectors, so its dependence on the
    /// weight is part of the recorded graph.
    pub fn forward_tape(&self, tape: &mut Tape, x: &Array2<f64>) -> Result<(NodeId, ParamBindings)> {
        if x.ncols() != self.input_dim {
            return Err(BprError::shape(
                "forward_tape",
                format!("input dim {}", self.input_dim),
                format!("{}", x.ncols()),
            ));
        }
        let mut bindings = Vec::new();
        let mut h = tape.constant(x.clone());
        for layer in &self.layers {
            let w = tape.param(layer.weight.clone());
            bindings.push(w);
            let w_used = if let Some(s) = &layer.spectral {
                let n_u = s.u.len();
                let n_v = s.v.len();
                let u_row = tape.constant(s.u.clone().into_shape_with_order((1, n_u)).unwrap());
                let v_col = tape.constant(s.v.clone().into_shape_with_order((n_v, 1)).unwrap());
                let wv = tape.matmul(w, v_col);
                let sigma = tape.matmul(u_row, wv);
                tape.div_scalar(w, sigma)
            } else {
                w
            };
            h = tape.matmul_nt(h, w_used);
            let b = tape.param(layer.bias.clone());
            bindings.push(b);
            h = tape.add_row(h, b);
            if let Some(ln) = &layer.layer_norm {
                h = tape.row_standardize(h, LAYER_NORM_EPS);
                let gain = tape.param(ln.gain.clone());
                bindings.push(gain);
                h = tape.mul_row(h, gain);
                let shift = tape.param(ln.shift.clone());
                bindings.push(shift);
                h = tape.add_row(h, shift);
            }
            h = match layer.activation {
                Activation::Gelu => tape.gelu(h),
                Activation::Tanh => tape.tanh(h),
                Activation::Identity => h,
            };
        }
        Ok((h, ParamBindings { nodes: bindings }))
    }

    /// One power-iteration tick on every spectrally normalized layer.
    /// Called once per optimizer step, outside any recorded computation.
    pub fn spectral_tick(&mut self) {
        for layer in &mut self.layers {
            if let Some(s) = &mut layer.spectral {
                spectral::power_iterate(&layer.weight, s, 1);
            }
        }
    }

    /// Visit parameter arrays in a fixed order: per layer, weight, bias,
    /// then layer-norm gain and shift when present.
    pub fn visit_params<'a>(&'a self) -> Vec<&'a Array2<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
            if let Some(ln) = &layer.layer_norm {
                out.push(&ln.gain);
                out.push(&ln.shift);
            }
        }
        out
    }

    pub fn visit_params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if let Some(ln) = &mut layer.layer_norm {
                out.push(&mut ln.gain);
                out.push(&mut ln.shift);
            }
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.visit_params().iter().map(|p| p.dim()).collect()
    }

    /// Human-readable name for the i-th parameter array.
    pub fn param_name(&self, index: usize) -> String {
        let mut i = 0;
        for (l, layer) in self.layers.iter().enumerate() {
            let names: &[&str] = if layer.layer_norm.is_some() {
                &["weight", "bias", "ln_gain", "ln_shift"]
            } else {
                &["weight", "bias"]
            };
            for n in names {
                if i == index {
                    return format!("layer{l}.{n}");
                }
                i += 1;
            }
        }
        format!("param{index}")
    }

    pub fn all_finite(&self) -> bool {
        self.visit_params()
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Interpolate parameters toward `source`: θ ← (1−τ)·θ + τ·θ_src.
    pub fn soft_update_from(&mut self, source: &DenseNet, tau: f64) {
        let src: Vec<Array2<f64>> = source.visit_params().iter().map(|p| (*p).clone()).collect();
        for (dst, s) in self.visit_params_mut().into_iter().zip(src) {
            dst.zip_mut_with(&s, |d, s| *d = (1.0 - tau) * *d + tau * s);
        }
        // Keep target power-iteration state aligned with its weights.
        for (dst, s) in self.layers.iter_mut().zip(&source.layers) {
            if let (Some(d), Some(s)) = (&mut dst.spectral, &s.spectral) {
                d.u.zip_mut_with(&s.u, |d, s| *d = (1.0 - tau) * *d + tau * s);
                d.v.zip_mut_with(&s.v, |d, s| *d = (1.0 - tau) * *d + tau * s);
            }
        }
    }
}

/// Tape leaves corresponding to one network's parameters.
pub struct ParamBindings {
    nodes: Vec<NodeId>,
}

impl ParamBindings {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// Collect gradients in `visit_params` order (zeros where no path
    /// reached the parameter).
    pub fn collect(&self, tape: &Tape, grads: &mut tape::Grads) -> Vec<Array2<f64>> {
        self.nodes
            .iter()
            .map(|&id| {
                let shape = tape.value(id).dim();
                grads.take_or_zeros(id, shape)
            })
            .collect()
    }
}

/// In-place per-row standardization used by the no-tape forward pass.
fn standardize_rows(h: &mut Array2<f64>) {
    let n = h.ncols() as f64;
    for mut row in h.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / n;
        let r = (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|e| (e - mean) / r);
    }
}
