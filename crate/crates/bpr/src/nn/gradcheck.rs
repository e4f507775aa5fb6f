//! Finite-difference verification of analytic gradients.

use ndarray::Array2;
use rand::Rng;

/// Compare analytic gradients against central finite differences on
/// `probes` randomly selected parameter entries, at float64.
///
/// `f` evaluates the loss at the given parameters and returns its value
/// together with the analytic gradient arrays (shape-matched to `params`).
/// Relative error is |a − n| / max(|a|, |n|, 1e-3); the floor makes
/// agreement below 1e-7 absolute count as agreement regardless of scale.
/// Returns the worst error over all probes.
pub fn grad_check<F, R>(f: F, params: &[Array2<f64>], probes: usize, rng: &mut R) -> f64
where
    F: Fn(&[Array2<f64>]) -> (f64, Vec<Array2<f64>>),
    R: Rng,
{
    assert!(probes >= 1, "probe_count must be >= 1");
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient count mismatch");

    let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    assert!(total > 0, "no parameters to probe");

    let mut worst = 0.0f64;
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let (rows, cols) = params[which].dim();
        let (i, j) = (flat / cols, flat % cols);
        let _ = rows;

        let p0 = params[which][(i, j)];
        let h = 1e-5 * p0.abs().max(1.0);

        let mut perturbed: Vec<Array2<f64>> = params.to_vec();
        perturbed[which][(i, j)] = p0 + h;
        let (f_plus, _) = f(&perturbed);
        perturbed[which][(i, j)] = p0 - h;
        let (f_minus, _) = f(&perturbed);

        let numeric = (f_plus - f_minus) / (2.0 * h);
        let a = analytic[which][(i, j)];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_loss_is_exact() {
        // ‖p‖²: analytic 2p, finite differences exact for polynomials
        let params = vec![array![[0.3, -1.2], [2.0, 0.5]]];
        let f = |ps: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let p = tape.param(ps[0].clone());
            let sq = tape.square(p);
            let loss = tape.sum_all(sq);
            let mut grads = tape.backward(loss).unwrap();
            (tape.scalar(loss), vec![grads.take_or_zeros(p, ps[0].dim())])
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = grad_check(f, &params, 8, &mut rng);
        assert!(err <= 1e-8, "quadratic check err {err}");
    }

    #[test]
    fn no_gradient_branch_reports_zero() {
        // loss ignores the second array entirely → 0 vs 0 on its probes
        let params = vec![array![[1.0]], array![[5.0, 7.0]]];
        let f = |ps: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let a = tape.param(ps[0].clone());
            let _b = tape.param(ps[1].clone());
            let loss = tape.square(a);
            let mut grads = tape.backward(loss).unwrap();
            (
                tape.scalar(loss),
                vec![
                    grads.take_or_zeros(a, ps[0].dim()),
                    grads.take_or_zeros(_b, ps[1].dim()),
                ],
            )
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = grad_check(f, &params, 20, &mut rng);
        assert!(err <= 1e-8, "err {err}");
    }
}
