//! Finite-element forward model of the conductive sheet.
//!
//! Linear triangles on the (possibly bent) surface with piecewise-constant
//! conductivity, shunt electrodes, and the adjacent drive / adjacent measure
//! protocol. Voltages are in volts, conductivity in S/m, lengths in mm.

mod fem;
mod jacobian;
pub mod sparse;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use fem::{assemble_system, solve_frame, ForwardModel, FrameSolution};
pub use jacobian::{compute_jacobian, jacobian_from_model, Jacobian, SensitivityKind};

use crate::error::{Error, Result};
use crate::geometry::ReconGrid;

pub const BACKGROUND_SIGMA: f64 = 1.0;
pub const TOUCH_SIGMA: f64 = 50.0;
/// Drive current in mA.
pub const DEFAULT_CURRENT_MA: f64 = 1.0;

/// Per-recon-point conductivity in S/m.
#[derive(Debug, Clone)]
pub struct ConductivityField {
    pub values: Vec<f64>,
    pub grid: Arc<ReconGrid>,
}

impl ConductivityField {
    pub fn uniform(grid: Arc<ReconGrid>, value: f64) -> Self {
        ConductivityField { values: vec![value; grid.len()], grid }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.grid.len() {
            return Err(Error::Shape { what: "conductivity field", expected: self.grid.len(), found: self.values.len() });
        }
        match self.values.iter().position(|&s| !(s > 0.0) || !s.is_finite()) {
            Some(index) => Err(Error::NonPositiveConductivity { index, value: self.values[index] }),
            None => Ok(()),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ConductivityField { values: self.values.iter().map(|s| s * factor).collect(), grid: self.grid.clone() }
    }
}

/// Adjacent-drive / adjacent-measure protocol.
///
/// Drive pair `d` injects current into electrode `d` and extracts it from
/// `d + 1` (mod n). The retained measurements are the pairs `(d, m)` with
/// `d < m` whose electrode sets are disjoint; by reciprocity these are the
/// independent half of the full sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensingProtocol {
    pub n_electrodes: usize,
    pub drive_pairs: Vec<(usize, usize)>,
    /// `(drive pair index, measure pair index)` in canonical order.
    pub measurements: Vec<(usize, usize)>,
}

impl SensingProtocol {
    pub fn adjacent(n_electrodes: usize) -> Self {
        let drive_pairs: Vec<(usize, usize)> = (0..n_electrodes).map(|i| (i, (i + 1) % n_electrodes)).collect();
        let mut measurements = Vec::new();
        for d in 0..n_electrodes {
            for m in d + 1..n_electrodes {
                if Self::disjoint(&drive_pairs, d, m) {
                    measurements.push((d, m));
                }
            }
        }
        SensingProtocol { n_electrodes, drive_pairs, measurements }
    }

    fn disjoint(pairs: &[(usize, usize)], d: usize, m: usize) -> bool {
        let (a, b) = pairs[d];
        let (c, e) = pairs[m];
        a != c && a != e && b != c && b != e
    }

    pub fn independent_count(&self) -> usize {
        self.measurements.len()
    }

    /// Full sweep: for each drive pair, every disjoint measure pair in
    /// increasing index order (`n * (n - 3)` entries).
    pub fn full_sweep(&self) -> Vec<(usize, usize)> {
        let n = self.drive_pairs.len();
        (0..n)
            .flat_map(|d| (0..n).filter(move |&m| m != d).map(move |m| (d, m)))
            .filter(|&(d, m)| Self::disjoint(&self.drive_pairs, d, m))
            .collect()
    }

    /// Column labels such as `d01-02_m03-04` (1-based electrodes).
    pub fn labels(&self) -> Vec<String> {
        self.measurements
            .iter()
            .map(|&(d, m)| {
                let (a, b) = self.drive_pairs[d];
                let (c, e) = self.drive_pairs[m];
                format!("d{:02}-{:02}_m{:02}-{:02}", a + 1, b + 1, c + 1, e + 1)
            })
            .collect()
    }

    /// Index of the retained measurement for an unordered pair of pair indices.
    pub fn index_of(&self, p: usize, q: usize) -> Option<usize> {
        let key = (p.min(q), p.max(q));
        self.measurements.iter().position(|&m| m == key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    ReferenceFlat,
    ReferenceDeformed,
    Touched,
}

/// One protocol sweep of boundary voltages.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFrame {
    pub voltages: Vec<f64>,
    pub n_electrodes: usize,
    pub kind: FrameKind,
}

impl MeasurementFrame {
    pub fn validate(&self, protocol: &SensingProtocol) -> Result<()> {
        if self.voltages.len() != protocol.independent_count() {
            return Err(Error::Shape {
                what: "measurement frame",
                expected: protocol.independent_count(),
                found: self.voltages.len(),
            });
        }
        if self.voltages.iter().any(|v| !v.is_finite()) {
            return Err(Error::Param("measurement frame contains non-finite voltages".into()));
        }
        Ok(())
    }

    pub fn with_kind(mut self, kind: FrameKind) -> Self {
        self.kind = kind;
        self
    }
}

/// Normalized time difference `(v_ref - v_t) / v_ref`, positive where the
/// touched frame reads a smaller voltage than the reference.
pub fn normalized_difference(v_t: &MeasurementFrame, v_ref: &MeasurementFrame) -> Result<Vec<f64>> {
    if v_t.voltages.len() != v_ref.voltages.len() || v_t.n_electrodes != v_ref.n_electrodes {
        return Err(Error::Shape { what: "frame pair", expected: v_ref.voltages.len(), found: v_t.voltages.len() });
    }
    v_t.voltages
        .iter()
        .zip(&v_ref.voltages)
        .enumerate()
        .map(|(index, (&t, &r))| if r == 0.0 { Err(Error::ZeroReference { index }) } else { Ok((r - t) / r) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(v: Vec<f64>) -> MeasurementFrame {
        MeasurementFrame { voltages: v, n_electrodes: 16, kind: FrameKind::Touched }
    }

    #[test]
    fn protocol_counts() {
        let p = SensingProtocol::adjacent(16);
        assert_eq!(p.independent_count(), 104);
        assert_eq!(p.full_sweep().len(), 208);
        assert_eq!(p.measurements[0], (0, 2));
        assert_eq!(p.labels()[0], "d01-02_m03-04");
        // the (16,1) pair never meets drive (1,2)
        assert!(!p.measurements.contains(&(0, 15)));
        assert_eq!(SensingProtocol::adjacent(8).independent_count(), 20);
    }

    #[test]
    fn normalized_difference_cases() {
        let r = frame(vec![1.0, -2.0, 0.5]);
        assert_eq!(normalized_difference(&r, &r).unwrap(), vec![0.0; 3]);
        let t = frame(r.voltages.iter().map(|v| 1.1 * v).collect());
        for x in normalized_difference(&t, &r).unwrap() {
            assert!((x.abs() - 0.1).abs() < 1e-12);
        }
        let z = frame(vec![1.0, 0.0, 0.5]);
        assert!(matches!(normalized_difference(&t, &z), Err(Error::ZeroReference { index: 1 })));
    }
}
