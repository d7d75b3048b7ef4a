use nalgebra::{DMatrix, DVector};

use super::check_system;
use crate::error::{Error, Result};

/// Relative objective change that ends the iteration.
pub const OBJECTIVE_TOLERANCE: f64 = 1e-8;
const POWER_ITERATIONS: usize = 20;

#[derive(Debug, Clone)]
pub struct L1Solution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub objective: f64,
    pub restarts: usize,
    /// Step constant in use at exit.
    pub lipschitz: f64,
    /// Objective after each accepted step, starting from `x = 0`.
    pub history: Vec<f64>,
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// `0.5 ||J x - b||^2 + tau ||x||_1`
pub fn objective(j: &DMatrix<f64>, b: &DVector<f64>, tau: f64, x: &DVector<f64>) -> f64 {
    0.5 * (j * x - b).norm_squared() + tau * x.lp_norm(1)
}

/// Largest eigenvalue of `J^T J` by power iteration from a fixed start.
pub fn lipschitz(j: &DMatrix<f64>) -> f64 {
    let n = j.ncols();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w = j.transpose() * (j * &v);
        lambda = w.norm();
        if lambda == 0.0 {
            return 0.0;
        }
        v = w / lambda;
    }
    lambda
}

/// Accelerated proximal gradient (FISTA) on the l1-regularized least squares
/// problem. A step that would raise the objective is rejected and the
/// momentum restarted from the last accepted point, so the accepted
/// objectives never increase. Momentum is also restarted when it opposes the
/// latest step, and the iteration ends once a plain proximal step from the
/// current point changes the objective by less than [`OBJECTIVE_TOLERANCE`]. The power-iteration estimate of the step
/// approaches the largest eigenvalue from below; if even a plain proximal
/// step from the accepted point fails to descend, the estimate is doubled.
pub fn solve(j: &DMatrix<f64>, b: &[f64], tau: f64, max_iters: usize) -> Result<L1Solution> {
    check_system(j, b)?;
    if !(tau > 0.0) {
        return Err(Error::Param(format!("tau must be positive, got {tau}")));
    }
    if max_iters == 0 {
        return Err(Error::Param("max_iters must be at least 1".into()));
    }
    let b = DVector::from_column_slice(b);
    let n = j.ncols();
    let mut l = lipschitz(j);
    let mut x = DVector::zeros(n);
    let mut f = objective(j, &b, tau, &x);
    if l == 0.0 {
        return Ok(L1Solution { x: x.iter().copied().collect(), iterations: 1, objective: f, restarts: 0, lipschitz: l, history: vec![f] });
    }
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut fresh = true;
    let mut restarts = 0;
    let mut iterations = max_iters;
    let mut history = vec![f];
    for it in 1..=max_iters {
        let grad = j.transpose() * (j * &y - &b);
        let z = (&y - grad / l).map(|v| soft_threshold(v, tau / l));
        let fz = objective(j, &b, tau, &z);
        if !fz.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        if fz > f {
            if fresh {
                l *= 2.0;
            } else {
                // restart momentum from the accepted point
                restarts += 1;
                y = x.clone();
                t = 1.0;
                fresh = true;
            }
            continue;
        }
        let change = (f - fz).abs() / f.abs().max(f64::MIN_POSITIVE);
        let was_fresh = fresh;
        fresh = false;
        // momentum is dropped when it points against the last step
        let against = (&y - &z).dot(&(&z - &x)) > 0.0;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let next_y = &z + (&z - &x) * ((t - 1.0) / t_next);
        x = z;
        f = fz;
        history.push(f);
        if change < OBJECTIVE_TOLERANCE {
            if was_fresh {
                // a plain proximal step also stalls
                iterations = it;
                break;
            }
            y = x.clone();
            t = 1.0;
            fresh = true;
        } else if against {
            restarts += 1;
            y = x.clone();
            t = 1.0;
            fresh = true;
        } else {
            y = next_y;
            t = t_next;
        }
    }
    Ok(L1Solution { x: x.iter().copied().collect(), iterations, objective: f, restarts, lipschitz: l, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_matches_soft_threshold() {
        let j = DMatrix::identity(4, 4);
        let s = solve(&j, &[3.0, 1.0, 0.5, 0.0], 1.0, 400).unwrap();
        for (a, e) in s.x.iter().zip([2.0, 0.0, 0.0, 0.0]) {
            assert!((a - e).abs() < 1e-8);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s = solve(&DMatrix::identity(9, 9), &b, 0.7, 400).unwrap();
        for (a, d) in s.x.iter().zip(&b) {
            assert!((a - soft_threshold(*d, 0.7)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_data_stops_at_once() {
        let j = DMatrix::from_fn(5, 7, |i, k| (i + 2 * k) as f64 * 0.1 - 0.3);
        let s = solve(&j, &[0.0; 5], 1e-3, 400).unwrap();
        assert_eq!(s.iterations, 1);
        assert!(s.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_tau_kills_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let j = DMatrix::from_fn(10, 20, |_, _| rng.random_range(-1.0..1.0));
        let b: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tau = (j.transpose() * DVector::from_column_slice(&b)).amax();
        assert!(solve(&j, &b, tau, 400).unwrap().x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn returned_point_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let j = DMatrix::from_fn(15, 40, |_, _| rng.random_range(-1.0..1.0));
        let b: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = solve(&j, &b, 0.05, 20000).unwrap();
        let x = DVector::from_column_slice(&s.x);
        let l = s.lipschitz;
        let grad = j.transpose() * (&j * &x - DVector::from_column_slice(&b));
        let next = (&x - grad / l).map(|v| soft_threshold(v, 0.05 / l));
        assert!(s.history.windows(2).all(|w| w[1] <= w[0]));
        let moved = (next - x).amax();
        assert!(moved < 1e-6, "moved {moved} after {} iterations", s.iterations);
    }

    #[test]
    fn power_iteration_bounds_spectrum() {
        let j = DMatrix::from_fn(6, 6, |i, k| if i == k { (i + 1) as f64 } else { 0.0 });
        assert!((lipschitz(&j) - 36.0).abs() < 1.0);
    }
}
