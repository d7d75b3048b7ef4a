use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{ConductivityField, ForwardModel, SensingProtocol};
use crate::error::{Error, Result};
use crate::geometry::{Mesh, ReconGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityKind {
    /// `dV_k / d sigma_q` in V per S/m.
    Raw,
    /// Maps normalized conductivity change to normalized voltage difference,
    /// with the sign convention of [`super::normalized_difference`].
    Normalized,
}

/// Sensitivity of every retained measurement to every recon point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub matrix: DMatrix<f64>,
    pub kind: SensitivityKind,
    pub mesh_id: String,
    pub grid_id: String,
    /// Voltages at the linearization point.
    pub reference: Vec<f64>,
    /// Conductivity at the linearization point.
    pub sigma0: Vec<f64>,
}

impl Jacobian {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Converts a raw Jacobian to the normalized form
    /// `-sigma0_q / V0_k * dV_k / d sigma_q`.
    pub fn normalized(&self) -> Result<Jacobian> {
        match self.kind {
            SensitivityKind::Normalized => Ok(self.clone()),
            SensitivityKind::Raw => {
                if let Some(index) = self.reference.iter().position(|&v| v == 0.0) {
                    return Err(Error::ZeroReference { index });
                }
                let matrix = DMatrix::from_fn(self.rows(), self.cols(), |k, q| {
                    -self.matrix[(k, q)] * self.sigma0[q] / self.reference[k]
                });
                Ok(Jacobian { matrix, kind: SensitivityKind::Normalized, ..self.clone() })
            }
        }
    }

    pub fn check_provenance(&self, mesh_id: &str, grid_id: &str) -> Result<()> {
        if self.mesh_id != mesh_id {
            return Err(Error::Provenance { expected: mesh_id.to_string(), found: self.mesh_id.clone() });
        }
        if self.grid_id != grid_id {
            return Err(Error::Provenance { expected: grid_id.to_string(), found: self.grid_id.clone() });
        }
        Ok(())
    }
}

/// Raw Jacobian by the adjoint-field formula
/// `dV_(d,m) / d sigma_q = -(1/I) sum_(e in q) u_m^T K_e u_d`,
/// which is the exact derivative of the discrete forward map.
pub fn compute_jacobian(
    mesh: &Mesh,
    sigma0: &ConductivityField,
    protocol: &SensingProtocol,
    grid: &ReconGrid,
) -> Result<Jacobian> {
    if sigma0.grid.id() != grid.id() {
        return Err(Error::Provenance { expected: grid.id().to_string(), found: sigma0.grid.id().to_string() });
    }
    let model = ForwardModel::new(mesh, grid)?;
    jacobian_from_model(&model, sigma0, protocol)
}

/// Raw Jacobian on an already assembled model.
pub fn jacobian_from_model(
    model: &ForwardModel,
    sigma0: &ConductivityField,
    protocol: &SensingProtocol,
) -> Result<Jacobian> {
    let sol = model.solve(sigma0, protocol, super::DEFAULT_CURRENT_MA)?;
    let n_drive = protocol.drive_pairs.len();
    let mut matrix = DMatrix::zeros(protocol.independent_count(), sigma0.values.len());
    let mut local = vec![[0.0; 3]; n_drive];
    let mut weighted = vec![[0.0; 3]; n_drive];
    for (dofs, point, k) in model.elements() {
        for d in 0..n_drive {
            let u = &sol.potentials[d];
            local[d] = [u[dofs[0]], u[dofs[1]], u[dofs[2]]];
            for a in 0..3 {
                weighted[d][a] = k[3 * a] * local[d][0] + k[3 * a + 1] * local[d][1] + k[3 * a + 2] * local[d][2];
            }
        }
        for (row, &(d, m)) in protocol.measurements.iter().enumerate() {
            let s = local[m][0] * weighted[d][0] + local[m][1] * weighted[d][1] + local[m][2] * weighted[d][2];
            matrix[(row, point)] -= s / sol.current_a;
        }
    }
    Ok(Jacobian {
        matrix,
        kind: SensitivityKind::Raw,
        mesh_id: model.mesh_id().to_string(),
        grid_id: model.grid_id().to_string(),
        reference: sol.frame.voltages,
        sigma0: sigma0.values.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::BACKGROUND_SIGMA;
    use crate::geometry::{make_mesh, make_recon_grid, DeformationState, SensorGeometry};
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    #[test]
    fn matches_finite_differences() {
        let g = SensorGeometry::default();
        let d = DeformationState::bent(0.8);
        let mesh = make_mesh(&g, &d, 1500).unwrap();
        let grid = Arc::new(make_recon_grid(&g, &d).unwrap());
        let protocol = SensingProtocol::adjacent(16);
        let sigma = ConductivityField::uniform(grid.clone(), BACKGROUND_SIGMA);
        let model = ForwardModel::new(&mesh, &grid).unwrap();
        let j = jacobian_from_model(&model, &sigma, &protocol).unwrap();
        assert_eq!((j.rows(), j.cols()), (104, 1350));
        let base = model.solve(&sigma, &protocol, 1.0).unwrap().frame.voltages;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-4;
        for _ in 0..5 {
            let (k, q) = (rng.random_range(0..104), rng.random_range(0..1350));
            let mut s = sigma.clone();
            s.values[q] += eps;
            let v = model.solve(&s, &protocol, 1.0).unwrap().frame.voltages[k];
            let fd = (v - base[k]) / eps;
            let a = j.matrix[(k, q)];
            assert!((a - fd).abs() / a.abs().max(eps) < 1e-3, "({k},{q}): {a} vs {fd}");
        }
    }

    fn flat_jacobian() -> (SensorGeometry, Arc<ReconGrid>, SensingProtocol, Jacobian) {
        let g = SensorGeometry::default();
        let d = DeformationState::flat();
        let mesh = make_mesh(&g, &d, 3000).unwrap();
        let grid = Arc::new(make_recon_grid(&g, &d).unwrap());
        let protocol = SensingProtocol::adjacent(16);
        let sigma = ConductivityField::uniform(grid.clone(), BACKGROUND_SIGMA);
        let j = compute_jacobian(&mesh, &sigma, &protocol, &grid).unwrap();
        (g, grid, protocol, j)
    }

    /// Electrode whose center is the image of electrode `k` under `f`.
    fn image_electrode(g: &SensorGeometry, k: usize, f: impl Fn([f64; 2]) -> [f64; 2]) -> usize {
        let c = f(g.boundary_point(g.electrode_positions[k]));
        (0..g.electrode_count)
            .min_by(|&a, &b| {
                let da = g.boundary_point(g.electrode_positions[a]);
                let db = g.boundary_point(g.electrode_positions[b]);
                let dist = |p: [f64; 2]| (p[0] - c[0]).hypot(p[1] - c[1]);
                dist(da).total_cmp(&dist(db))
            })
            .unwrap()
    }

    #[test]
    fn mirror_symmetric_on_flat_sheet() {
        let (g, grid, protocol, j) = flat_jacobian();
        let (w, h) = (g.width, g.height);
        let mirrors: [fn([f64; 2], f64, f64) -> [f64; 2]; 2] =
            [|p, w, _| [w - p[0], p[1]], |p, _, h| [p[0], h - p[1]]];
        let scale = j.matrix.amax();
        for mirror in mirrors {
            let f = |p: [f64; 2]| mirror(p, w, h);
            let e: Vec<usize> = (0..16).map(|k| image_electrode(&g, k, f)).collect();
            // the image of pair {a, b} is the pair {e[a], e[b]}
            let pair_image = |p: usize| {
                let (a, b) = protocol.drive_pairs[p];
                let (x, y) = (e[a], e[b]);
                protocol.drive_pairs.iter().position(|&(c, d)| (c, d) == (x, y) || (c, d) == (y, x)).unwrap()
            };
            let point_image: Vec<usize> = (0..grid.len()).map(|q| grid.nearest(f(grid.flat[q]))).collect();
            for (row, &(dp, mp)) in protocol.measurements.iter().enumerate() {
                // both pairs flip orientation, so the voltage keeps its sign
                let image_row = protocol.index_of(pair_image(dp), pair_image(mp)).unwrap();
                for q in 0..grid.len() {
                    let a = j.matrix[(row, q)];
                    let b = j.matrix[(image_row, point_image[q])];
                    assert!((a - b).abs() <= 1e-6 * scale, "row {row} q {q}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn conductive_gap_lowers_measured_voltage() {
        let (g, grid, protocol, j) = flat_jacobian();
        let jn = j.normalized().unwrap();
        let half = 0.5 * g.electrode_spacing();
        for (row, &(_, m)) in protocol.measurements.iter().enumerate() {
            let (a, _) = protocol.drive_pairs[m];
            let q = grid.nearest(g.boundary_point(g.electrode_positions[a] + half));
            assert!(jn.matrix[(row, q)] > 0.0, "row {row}: {}", jn.matrix[(row, q)]);
        }
    }
}
