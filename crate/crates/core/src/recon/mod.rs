//! Classical time-difference reconstruction from a normalized Jacobian.
//!
//! All solvers work on the linear model `dv = J dsigma`, where `dv` comes
//! from [`normalized_difference`] and `J` is a [`SensitivityKind::Normalized`]
//! Jacobian, so that a touch shows up as a positive `dsigma`.

pub mod l1;
pub mod sbl;
pub mod tikhonov;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{normalized_difference, Jacobian, MeasurementFrame, SensitivityKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMethod {
    Tikhonov,
    L1,
    Sbl,
}

impl std::fmt::Display for ReconMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReconMethod::Tikhonov => "tikhonov",
            ReconMethod::L1 => "l1",
            ReconMethod::Sbl => "sbl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconParams {
    pub method: ReconMethod,
    /// `tau`; ignored by SBL.
    #[serde(default = "default_reg")]
    pub reg_factor: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default = "default_cluster")]
    pub cluster_size: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub coupling: f64,
    /// Fixed SBL noise variance. `None` re-estimates it every iteration.
    #[serde(default)]
    pub noise_variance: Option<f64>,
}

fn default_reg() -> f64 {
    1e-3
}
fn default_iters() -> usize {
    400
}
fn default_cluster() -> usize {
    1
}
fn default_tolerance() -> f64 {
    1e-4
}

impl ReconParams {
    pub fn tikhonov(reg_factor: f64) -> Self {
        ReconParams {
            method: ReconMethod::Tikhonov,
            reg_factor,
            max_iters: 1,
            cluster_size: 1,
            tolerance: default_tolerance(),
            coupling: 0.0,
            noise_variance: None,
        }
    }

    pub fn l1(reg_factor: f64, max_iters: usize) -> Self {
        ReconParams { method: ReconMethod::L1, max_iters, ..Self::tikhonov(reg_factor) }
    }

    pub fn sbl(max_iters: usize, cluster_size: usize, tolerance: f64, coupling: f64) -> Self {
        ReconParams {
            method: ReconMethod::Sbl,
            reg_factor: default_reg(),
            max_iters,
            cluster_size,
            tolerance,
            coupling,
            noise_variance: None,
        }
    }

    /// The comparison settings: Tikhonov 1e-3; l1 1e-3 with 400 iterations;
    /// SBL with 5 iterations, clusters of 4, tolerance 1e-4, coupling 0.3.
    pub fn defaults(method: ReconMethod) -> Self {
        match method {
            ReconMethod::Tikhonov => Self::tikhonov(1e-3),
            ReconMethod::L1 => Self::l1(1e-3, 400),
            ReconMethod::Sbl => Self::sbl(5, 4, 1e-4, 0.3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(format!("{}: {msg}", self.method)));
        match self.method {
            ReconMethod::Tikhonov | ReconMethod::L1 => {
                if !(self.reg_factor > 0.0) || !self.reg_factor.is_finite() {
                    return bad(format!("reg_factor must be positive, got {}", self.reg_factor));
                }
                if self.method == ReconMethod::L1 && self.max_iters == 0 {
                    return bad("max_iters must be at least 1".into());
                }
            }
            ReconMethod::Sbl => {
                if self.max_iters == 0 {
                    return bad("max_iters must be at least 1".into());
                }
                if self.cluster_size == 0 {
                    return bad("cluster_size must be at least 1".into());
                }
                if !(0.0..1.0).contains(&self.coupling) {
                    return bad(format!("coupling must lie in [0, 1), got {}", self.coupling));
                }
                if !(self.tolerance > 0.0) {
                    return bad(format!("tolerance must be positive, got {}", self.tolerance));
                }
                if let Some(s) = self.noise_variance {
                    if !(s > 0.0) || !s.is_finite() {
                        return bad(format!("noise_variance must be positive, got {s}"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Normalized conductivity change on the reconstruction grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TactileMap {
    pub delta_sigma: Vec<f64>,
    pub grid_id: String,
}

impl TactileMap {
    pub fn validate(&self, grid_len: usize) -> Result<()> {
        if self.delta_sigma.len() != grid_len {
            return Err(Error::Shape { what: "tactile map", expected: grid_len, found: self.delta_sigma.len() });
        }
        if self.delta_sigma.iter().any(|x| !x.is_finite()) {
            return Err(Error::Param("tactile map contains non-finite entries".into()));
        }
        Ok(())
    }

    /// Map scaled so that its largest magnitude is 1 (a zero map stays zero).
    pub fn peak_normalized(&self) -> Vec<f64> {
        let peak = self.delta_sigma.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if peak == 0.0 {
            return self.delta_sigma.clone();
        }
        self.delta_sigma.iter().map(|x| x / peak).collect()
    }
}

fn check_system(j: &DMatrix<f64>, dv: &[f64]) -> Result<()> {
    if j.nrows() != dv.len() {
        return Err(Error::Shape { what: "voltage difference", expected: j.nrows(), found: dv.len() });
    }
    Ok(())
}

fn normalized(j: &Jacobian) -> Result<std::borrow::Cow<'_, Jacobian>> {
    Ok(match j.kind {
        SensitivityKind::Normalized => std::borrow::Cow::Borrowed(j),
        SensitivityKind::Raw => std::borrow::Cow::Owned(j.normalized()?),
    })
}

/// Solves for `dsigma` with the selected method.
pub fn solve(j: &Jacobian, dv: &[f64], p: &ReconParams) -> Result<TactileMap> {
    p.validate()?;
    let jn = normalized(j)?;
    let x = match p.method {
        ReconMethod::Tikhonov => tikhonov::solve(&jn.matrix, dv, p.reg_factor)?,
        ReconMethod::L1 => l1::solve(&jn.matrix, dv, p.reg_factor, p.max_iters)?.x,
        ReconMethod::Sbl => sbl::solve(&jn.matrix, dv, &sbl::SblOptions::from(p))?.mean,
    };
    Ok(TactileMap { delta_sigma: x, grid_id: jn.grid_id.clone() })
}

/// Time-difference reconstruction of `touched` against `reference`.
///
/// `grid_id` identifies the (deformed) recon grid of the configuration the
/// frames belong to. The Jacobian may come from a different, coarser mesh
/// but must be linearized on that same grid.
pub fn reconstruct(
    touched: &MeasurementFrame,
    reference: &MeasurementFrame,
    j: &Jacobian,
    grid_id: &str,
    p: &ReconParams,
) -> Result<TactileMap> {
    if j.grid_id != grid_id {
        return Err(Error::Provenance { expected: grid_id.to_string(), found: j.grid_id.clone() });
    }
    let dv = normalized_difference(touched, reference)?;
    solve(j, &dv, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validate_per_method() {
        assert!(ReconParams::tikhonov(0.0).validate().is_err());
        assert!(ReconParams::defaults(ReconMethod::Sbl).validate().is_ok());
        let mut p = ReconParams::defaults(ReconMethod::Sbl);
        p.coupling = 1.0;
        assert!(p.validate().is_err());
        // SBL ignores tau
        p = ReconParams::defaults(ReconMethod::Sbl);
        p.reg_factor = -1.0;
        assert!(p.validate().is_ok());
        let json = r#"{"method":"l1","reg_factor":0.001,"max_iters":400}"#;
        let q: ReconParams = serde_json::from_str(json).unwrap();
        assert_eq!(q, ReconParams::defaults(ReconMethod::L1).with_cluster(1));
        assert!(serde_json::from_str::<ReconParams>(r#"{"method":"l1","tau":1}"#).is_err());
    }

    impl ReconParams {
        fn with_cluster(mut self, c: usize) -> Self {
            self.cluster_size = c;
            self
        }
    }
}
