//! Bias-corrected adaptive optimizer with decoupled weight decay.

use ndarray::Array2;

use crate::error::{BprError, Result};

/// Per-network optimizer state: first/second moment buffers shape-matched
/// to the parameter arrays, plus the step counter and hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step_count: u64,
    first_moment: Vec<Array2<f64>>,
    second_moment: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64, shapes: &[(usize, usize)]) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            step_count: 0,
            first_moment: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            second_moment: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. Weight decay is applied multiplicatively to the
    /// parameters, not folded into the gradients. A non-finite gradient
    /// rejects the whole step and names the offending parameter.
    pub fn step<'a, I, F>(&mut self, params: I, grads: &[Array2<f64>], name: F) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Array2<f64>>,
        F: Fn(usize) -> String,
    {
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(BprError::NonFinite(format!("gradient of {}", name(i))));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (i, p) in params.into_iter().enumerate() {
            let g = &grads[i];
            debug_assert_eq!(p.dim(), g.dim(), "grad shape mismatch at {}", name(i));
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            for ((pe, &me), &ve) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = me / bc1;
                let v_hat = ve / bc2;
                *pe -= self.learning_rate * (m_hat / (v_hat.sqrt() + self.epsilon))
                    + self.learning_rate * self.weight_decay * *pe;
            }
        }
        Ok(())
    }
}
