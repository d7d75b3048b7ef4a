//! Pattern-coupled sparse Bayesian learning.
//!
//! Model: `b = J x + n`, `n ~ N(0, s2 I)`, `x_q ~ N(0, 1 / g_q)` with the
//! effective precision `g_q = (1 - c) a_q + c mean(a over q's cluster)`.
//! Clusters are contiguous blocks of `cluster_size` points in grid order.
//! Hyperparameters follow EM updates; the posterior is evaluated in the
//! `m x m` Woodbury form.

use nalgebra::{DMatrix, DVector};

use super::{check_system, ReconParams};
use crate::error::{Error, Result};

pub const NOISE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SblOptions {
    pub max_iters: usize,
    pub cluster_size: usize,
    pub tolerance: f64,
    pub coupling: f64,
    pub noise_variance: Option<f64>,
}

impl From<&ReconParams> for SblOptions {
    fn from(p: &ReconParams) -> Self {
        SblOptions {
            max_iters: p.max_iters,
            cluster_size: p.cluster_size,
            tolerance: p.tolerance,
            coupling: p.coupling,
            noise_variance: p.noise_variance,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SblSolution {
    pub mean: Vec<f64>,
    /// Hyperparameters `a` at exit.
    pub alpha: Vec<f64>,
    pub noise_variance: f64,
    pub iterations: usize,
}

/// Initial noise variance: a hundredth of the mean data power.
pub fn initial_noise(b: &[f64]) -> f64 {
    let power = b.iter().map(|v| v * v).sum::<f64>() / b.len().max(1) as f64;
    (0.01 * power).max(NOISE_FLOOR)
}

fn cluster_mean(v: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (chunk, o) in v.chunks(size).zip(out.chunks_mut(size)) {
        let m = chunk.iter().sum::<f64>() / chunk.len() as f64;
        o.fill(m);
    }
    out
}

fn couple(v: &[f64], size: usize, c: f64) -> Vec<f64> {
    if c == 0.0 {
        return v.to_vec();
    }
    cluster_mean(v, size).iter().zip(v).map(|(m, x)| (1.0 - c) * x + c * m).collect()
}

pub fn solve(j: &DMatrix<f64>, b: &[f64], opt: &SblOptions) -> Result<SblSolution> {
    check_system(j, b)?;
    if opt.max_iters == 0 || opt.cluster_size == 0 || !(0.0..1.0).contains(&opt.coupling) {
        return Err(Error::Param(format!("invalid SBL options {opt:?}")));
    }
    let (m, n) = j.shape();
    let bv = DVector::from_column_slice(b);
    let mut alpha = vec![1.0; n];
    let mut s2 = opt.noise_variance.unwrap_or_else(|| initial_noise(b));
    let mut mean = vec![0.0; n];
    let mut iterations = opt.max_iters;

    for it in 1..=opt.max_iters {
        let gamma = couple(&alpha, opt.cluster_size, opt.coupling);
        let d: Vec<f64> = gamma.iter().map(|g| 1.0 / g).collect();
        // C = s2 I + J D J^T
        let jd = DMatrix::from_fn(m, n, |k, q| j[(k, q)] * d[q]);
        let mut c = &jd * j.transpose();
        for k in 0..m {
            c[(k, k)] += s2;
        }
        let chol = c
            .cholesky()
            .ok_or_else(|| Error::Solver(format!("SBL marginal covariance is singular at iteration {it}")))?;
        let y = chol.solve(&bv);
        let cj = chol.solve(j);
        let mu: Vec<f64> = (0..n).map(|q| d[q] * j.column(q).dot(&y)).collect();
        let sigma_diag: Vec<f64> = (0..n).map(|q| d[q] - d[q] * d[q] * j.column(q).dot(&cj.column(q))).collect();
        let e: Vec<f64> = mu.iter().zip(&sigma_diag).map(|(u, s)| u * u + s).collect();

        let e_eff = couple(&e, opt.cluster_size, opt.coupling);
        let new_alpha: Vec<f64> = e_eff.iter().map(|v| 1.0 / v.max(f64::MIN_POSITIVE)).collect();

        if opt.noise_variance.is_none() {
            let resid = (j * DVector::from_column_slice(&mu) - &bv).norm_squared();
            let dof: f64 = gamma.iter().zip(&sigma_diag).map(|(g, s)| 1.0 - g * s).sum();
            let next = (resid + s2 * dof) / m as f64;
            if !next.is_finite() || next < 0.0 {
                return Err(Error::NoiseCollapse(next));
            }
            s2 = next.max(NOISE_FLOOR);
        }

        let scale = alpha.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let change = alpha.iter().zip(&new_alpha).fold(0.0f64, |a, (x, y)| a.max((x - y).abs())) / scale;
        alpha = new_alpha;
        mean = mu;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration: it });
        }
        if change < opt.tolerance {
            iterations = it;
            break;
        }
    }
    Ok(SblSolution { mean, alpha, noise_variance: s2, iterations })
}
