//! Spectral normalization via power iteration.

use ndarray::{Array1, Array2};

use super::SpectralState;

/// Iterations used when a spectral state is first initialized.
pub const INIT_ITERS: usize = 50;

/// Run `iters` power iterations in place: v ← normalize(Wᵀu),
/// u ← normalize(Wv). Degenerate (zero) matrices leave the state alone.
pub fn power_iterate(weight: &Array2<f64>, state: &mut SpectralState, iters: usize) {
    for _ in 0..iters {
        let v_raw = weight.t().dot(&state.u);
        let v_norm = l2(&v_raw);
        if v_norm < 1e-300 {
            return;
        }
        state.v = v_raw / v_norm;
        let u_raw = weight.dot(&state.v);
        let u_norm = l2(&u_raw);
        if u_norm < 1e-300 {
            return;
        }
        state.u = u_raw / u_norm;
    }
}

/// σ̂ = uᵀ W v.
pub fn rayleigh(weight: &Array2<f64>, u: &Array1<f64>, v: &Array1<f64>) -> f64 {
    u.dot(&weight.dot(v))
}

/// Normalize a weight by its power-iteration spectral-norm estimate.
///
/// Returns the effective weight and the updated iteration vector pair.
/// A zero matrix is returned unchanged (σ̂ treated as 1).
pub fn spectral_normalize(
    weight: &Array2<f64>,
    state: &SpectralState,
    n_iters: usize,
) -> (Array2<f64>, SpectralState) {
    assert!(n_iters >= 1, "spectral_normalize requires n_iters >= 1");
    let mut next = state.clone();
    power_iterate(weight, &mut next, n_iters);
    let sigma = rayleigh(weight, &next.u, &next.v);
    if sigma.abs() < 1e-300 {
        return (weight.clone(), next);
    }
    (weight.mapv(|w| w / sigma), next)
}

fn l2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn fresh_state(rows: usize, cols: usize, seed: u64) -> SpectralState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpectralState {
            u: Array1::from_shape_fn(rows, |_| rng.random_range(-1.0..1.0f64)),
            v: Array1::zeros(cols),
        }
    }

    #[test]
    fn one_by_one_matrix_normalizes_to_unit() {
        let w = array![[3.0]];
        let (eff, _) = spectral_normalize(&w, &fresh_state(1, 1, 0), 10);
        assert_relative_eq!(eff[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn scalar_matrix_normalizes_to_identity() {
        let w = array![[2.0, 0.0], [0.0, 2.0]];
        let (eff, _) = spectral_normalize(&w, &fresh_state(2, 2, 1), 50);
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(eff[(i, j)], expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn zero_matrix_is_left_unchanged() {
        let w = Array2::<f64>::zeros((3, 3));
        let (eff, _) = spectral_normalize(&w, &fresh_state(3, 3, 2), 5);
        assert_eq!(eff, w);
    }

    #[test]
    fn power_iteration_matches_svd_oracle() {
        // Oracle: largest singular value from an independent Jacobi SVD
        // (via nalgebra) on random 4×4 matrices.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let w = Array2::from_shape_fn((4, 4), |_| rng.random_range(-2.0..2.0f64));
            let state = fresh_state(4, 4, rng.random());
            let mut s = state.clone();
            power_iterate(&w, &mut s, 50);
            let sigma = rayleigh(&w, &s.u, &s.v);

            let m = nalgebra::DMatrix::from_row_iterator(4, 4, w.iter().cloned());
            let svd = m.svd(false, false);
            let sigma_true = svd.singular_values.max();

            assert_relative_eq!(sigma, sigma_true, epsilon = 1e-6);
        }
    }
}
