//! Central-finite-difference verification utilities.
//!
//! These helpers only evaluate a caller-supplied closure; they are
//! independent of how any analytic gradient was produced, which is the
//! point — they are the oracle the hand-written backward passes are
//! checked against.

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] -= 2.0 * h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Guarded relative error: |a-b| / max(|a|+|b|, floor). The floor keeps
/// finite-difference noise on true-zero coordinates from registering as a
/// huge relative error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-3)
}

/// Check `grad` against central differences of `f` on `n_coords` randomly
/// chosen coordinates plus one random direction. Returns the worst offender
/// on failure.
pub fn check_against_fd<F: Fn(&[f64]) -> f64>(
    f: &F,
    x: &[f64],
    grad: &[f64],
    n_coords: usize,
    tol: f64,
    seed: u64,
) -> Result<f64, String> {
    assert_eq!(x.len(), grad.len());
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;

    for _ in 0..n_coords.min(x.len()) {
        let i = rng.gen_range(0..x.len());
        let h = 1e-5 * x[i].abs().max(1.0);
        let fd = central_difference(f, x, i, h);
        let err = rel_err(grad[i], fd);
        if err > worst {
            worst = err;
        }
        if err > tol {
            return Err(format!(
                "coordinate {i}: analytic {} vs central-difference {fd} (rel err {err:.3e})",
                grad[i]
            ));
        }
    }

    // Directional derivative along a random unit-ish vector.
    let dir: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let h = 1e-6;
    let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + h * d / norm).collect();
    let xm: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - h * d / norm).collect();
    let fd = (f(&xp) - f(&xm)) / (2.0 * h);
    let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d / norm).sum();
    let err = rel_err(analytic, fd);
    if err > worst {
        worst = err;
    }
    if err > tol {
        return Err(format!(
            "directional derivative: analytic {analytic} vs central-difference {fd} (rel err {err:.3e})"
        ));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_wrong_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let x = [2.0, 5.0];
        let good = [4.0, 3.0];
        assert!(check_against_fd(&f, &x, &good, 2, 1e-6, 1).is_ok());
        let bad = [4.1, 3.0];
        assert!(check_against_fd(&f, &x, &bad, 2, 1e-6, 1).is_err());
    }
}
