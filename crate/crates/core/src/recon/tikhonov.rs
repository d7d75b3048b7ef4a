use nalgebra::{DMatrix, DVector};

use super::check_system;
use crate::error::{Error, Result};

/// Minimizer of `||J x - b||^2 + tau ||x||^2`.
///
/// Uses whichever of the equivalent forms `(J^T J + tau I)^-1 J^T b` and
/// `J^T (J J^T + tau I)^-1 b` has the smaller system.
pub fn solve(j: &DMatrix<f64>, b: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_system(j, b)?;
    if !(tau > 0.0) {
        return Err(Error::Param(format!("tau must be positive, got {tau}")));
    }
    let b = DVector::from_column_slice(b);
    let (m, n) = j.shape();
    let fail = || Error::Solver("Tikhonov normal matrix is not positive definite".into());
    let x = if m <= n {
        let mut g = j * j.transpose();
        for i in 0..m {
            g[(i, i)] += tau;
        }
        let y = g.cholesky().ok_or_else(fail)?.solve(&b);
        j.transpose() * y
    } else {
        let mut g = j.transpose() * j;
        for i in 0..n {
            g[(i, i)] += tau;
        }
        g.cholesky().ok_or_else(fail)?.solve(&(j.transpose() * b))
    };
    Ok(x.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn objective(j: &DMatrix<f64>, b: &[f64], tau: f64, x: &[f64]) -> f64 {
        let r = j * DVector::from_column_slice(x) - DVector::from_column_slice(b);
        r.norm_squared() + tau * x.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn zero_data_and_large_tau() {
        let j = random(12, 30, 1);
        assert!(solve(&j, &[0.0; 12], 1e-3).unwrap().iter().all(|&x| x == 0.0));
        let b: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        assert!(solve(&j, &b, 1e9).unwrap().iter().all(|x| x.abs() < 1e-6));
        assert!(solve(&j, &b, 0.0).is_err());
    }

    #[test]
    fn perturbation_never_improves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (m, n) in [(10, 25), (25, 10)] {
            let j = random(m, n, 3);
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = solve(&j, &b, 0.05).unwrap();
            let f0 = objective(&j, &b, 0.05, &x);
            for _ in 0..20 {
                let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + 1e-4 * d).collect();
                assert!(objective(&j, &b, 0.05, &y) >= f0);
            }
        }
    }

    #[test]
    fn primal_and_dual_forms_agree() {
        let j = random(8, 8, 4);
        let b: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        let x = solve(&j, &b, 0.3).unwrap();
        let mut g = j.transpose() * &j;
        for i in 0..8 {
            g[(i, i)] += 0.3;
        }
        let expect = g.lu().solve(&(j.transpose() * DVector::from_column_slice(&b))).unwrap();
        for (a, e) in x.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}
