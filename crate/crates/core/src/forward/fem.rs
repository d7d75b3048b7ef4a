use super::sparse::{CsrMatrix, SkylineCholesky};
use super::{ConductivityField, FrameKind, MeasurementFrame, SensingProtocol};
use crate::error::{Error, Result};
use crate::geometry::{Mesh, ReconGrid};

/// Mesh-dependent precomputation shared by every conductivity evaluated on
/// the same mesh and reconstruction grid.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    mesh_id: String,
    grid_id: String,
    n_dofs: usize,
    electrode_dof: Vec<usize>,
    elem_dofs: Vec<[usize; 3]>,
    elem_point: Vec<usize>,
    /// Stiffness of each element at unit conductivity, row-major 3x3, in S per S/m.
    elem_unit: Vec<[f64; 9]>,
    elem_pos: Vec<[usize; 9]>,
    pattern: CsrMatrix,
}

/// Potentials and voltages of one full protocol sweep.
#[derive(Debug, Clone)]
pub struct FrameSolution {
    /// DOF potentials per drive pair, ground included as zero.
    pub potentials: Vec<Vec<f64>>,
    /// Electrode potentials per drive pair.
    pub electrode_potentials: Vec<Vec<f64>>,
    pub current_a: f64,
    pub frame: MeasurementFrame,
}

impl FrameSolution {
    /// Voltage on measure pair `m` while driving pair `d`.
    pub fn voltage(&self, protocol: &SensingProtocol, d: usize, m: usize) -> f64 {
        let (c, e) = protocol.drive_pairs[m];
        self.electrode_potentials[d][c] - self.electrode_potentials[d][e]
    }

    /// All `n * (n - 3)` voltages in [`SensingProtocol::full_sweep`] order.
    pub fn full_sweep(&self, protocol: &SensingProtocol) -> Vec<f64> {
        protocol.full_sweep().into_iter().map(|(d, m)| self.voltage(protocol, d, m)).collect()
    }
}

impl ForwardModel {
    pub fn new(mesh: &Mesh, grid: &ReconGrid) -> Result<Self> {
        if (grid.width - mesh.flat.iter().map(|p| p[0]).fold(0.0, f64::max)).abs() > 1e-9 * grid.width
            || (grid.height - mesh.flat.iter().map(|p| p[1]).fold(0.0, f64::max)).abs() > 1e-9 * grid.height
        {
            return Err(Error::Provenance {
                expected: format!("mesh spanning {} x {}", grid.width, grid.height),
                found: "mesh with a different footprint".into(),
            });
        }

        // electrode vertices collapse onto one DOF, numbered at first occurrence
        let nv = mesh.vertices.len();
        let mut electrode_of = vec![usize::MAX; nv];
        for (k, nodes) in mesh.electrode_nodes.iter().enumerate() {
            if nodes.is_empty() {
                return Err(Error::Meshing(format!("electrode {k} has no nodes")));
            }
            for &n in nodes {
                electrode_of[n] = k;
            }
        }
        let mut electrode_dof = vec![usize::MAX; mesh.electrode_nodes.len()];
        let mut dof_of_vertex = vec![0usize; nv];
        let mut n_dofs = 0;
        for v in 0..nv {
            let e = electrode_of[v];
            if e == usize::MAX {
                dof_of_vertex[v] = n_dofs;
                n_dofs += 1;
            } else {
                if electrode_dof[e] == usize::MAX {
                    electrode_dof[e] = n_dofs;
                    n_dofs += 1;
                }
                dof_of_vertex[v] = electrode_dof[e];
            }
        }
        if electrode_dof.contains(&(n_dofs - 1)) {
            return Err(Error::Meshing("ground vertex lies on an electrode".into()));
        }

        let elem_dofs: Vec<[usize; 3]> = mesh.triangles.iter().map(|t| t.map(|v| dof_of_vertex[v])).collect();
        let elem_point: Vec<usize> = (0..mesh.triangles.len()).map(|t| grid.nearest(mesh.flat_centroid(t))).collect();
        let elem_unit: Vec<[f64; 9]> = (0..mesh.triangles.len()).map(|t| unit_stiffness(mesh, t)).collect::<Result<_>>()?;

        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_dofs];
        for dofs in &elem_dofs {
            for &a in dofs {
                rows[a].extend_from_slice(dofs);
            }
        }
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
        }
        let pattern = CsrMatrix::from_pattern(&rows);
        let elem_pos = elem_dofs
            .iter()
            .map(|d| {
                let mut pos = [0usize; 9];
                for a in 0..3 {
                    for b in 0..3 {
                        pos[3 * a + b] = pattern.position(d[a], d[b]).expect("pattern covers element");
                    }
                }
                pos
            })
            .collect();

        Ok(ForwardModel {
            mesh_id: mesh.id().to_string(),
            grid_id: grid.id().to_string(),
            n_dofs,
            electrode_dof,
            elem_dofs,
            elem_point,
            elem_unit,
            elem_pos,
            pattern,
        })
    }

    pub fn mesh_id(&self) -> &str {
        &self.mesh_id
    }

    pub fn grid_id(&self) -> &str {
        &self.grid_id
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn electrode_dof(&self, k: usize) -> usize {
        self.electrode_dof[k]
    }

    pub(crate) fn elements(&self) -> impl Iterator<Item = (&[usize; 3], usize, &[f64; 9])> {
        self.elem_dofs.iter().zip(&self.elem_point).zip(&self.elem_unit).map(|((d, &p), k)| (d, p, k))
    }

    fn check_field(&self, sigma: &ConductivityField) -> Result<()> {
        if sigma.grid.id() != self.grid_id {
            return Err(Error::Provenance { expected: self.grid_id.clone(), found: sigma.grid.id().to_string() });
        }
        sigma.validate()
    }

    /// Ungrounded system matrix in DOF space (electrodes merged).
    pub fn assemble(&self, sigma: &ConductivityField) -> Result<CsrMatrix> {
        self.check_field(sigma)?;
        let mut a = self.pattern.clone();
        for ((pos, k), &p) in self.elem_pos.iter().zip(&self.elem_unit).zip(&self.elem_point) {
            let s = sigma.values[p];
            for i in 0..9 {
                a.values[pos[i]] += s * k[i];
            }
        }
        Ok(a)
    }

    pub fn solve(&self, sigma: &ConductivityField, protocol: &SensingProtocol, current_ma: f64) -> Result<FrameSolution> {
        if protocol.n_electrodes != self.electrode_dof.len() {
            return Err(Error::Shape {
                what: "protocol electrodes",
                expected: self.electrode_dof.len(),
                found: protocol.n_electrodes,
            });
        }
        let a = self.assemble(sigma)?;
        // the last DOF is grounded
        let chol = SkylineCholesky::factor(&a, self.n_dofs - 1)?;
        let current_a = 1e-3 * current_ma;
        let mut potentials = Vec::with_capacity(protocol.drive_pairs.len());
        for &(src, sink) in &protocol.drive_pairs {
            let mut x = vec![0.0; self.n_dofs];
            x[self.electrode_dof[src]] += current_a;
            x[self.electrode_dof[sink]] -= current_a;
            chol.solve_in_place(&mut x[..self.n_dofs - 1]);
            x[self.n_dofs - 1] = 0.0;
            potentials.push(x);
        }
        let electrode_potentials: Vec<Vec<f64>> =
            potentials.iter().map(|u| self.electrode_dof.iter().map(|&d| u[d]).collect()).collect();
        let mut sol = FrameSolution {
            potentials,
            electrode_potentials,
            current_a,
            frame: MeasurementFrame { voltages: Vec::new(), n_electrodes: protocol.n_electrodes, kind: FrameKind::Touched },
        };
        sol.frame.voltages = protocol.measurements.iter().map(|&(d, m)| sol.voltage(protocol, d, m)).collect();
        if sol.frame.voltages.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver("non-finite voltages".into()));
        }
        Ok(sol)
    }
}

/// Element stiffness at unit conductivity.
///
/// Works in material coordinates: the pulled-back metric of the deformed
/// triangle accounts for the embedding and the sheet material scales the
/// conductance along the bend direction.
fn unit_stiffness(mesh: &Mesh, t: usize) -> Result<[f64; 9]> {
    let tri = mesh.triangles[t];
    let [p0, p1, p2] = tri.map(|v| mesh.flat[v]);
    let [x0, x1, x2] = tri.map(|v| mesh.vertices[v]);
    let e = [[p1[0] - p0[0], p2[0] - p0[0]], [p1[1] - p0[1], p2[1] - p0[1]]];
    let det_e = e[0][0] * e[1][1] - e[0][1] * e[1][0];
    if det_e.abs() < 1e-14 {
        return Err(Error::Meshing(format!("degenerate triangle {t}")));
    }
    let e_inv = [[e[1][1] / det_e, -e[0][1] / det_e], [-e[1][0] / det_e, e[0][0] / det_e]];
    let area = 0.5 * det_e.abs();

    // deformation gradient F = X E^-1 (3x2), metric G = F^T F
    let xe = [[x1[0] - x0[0], x2[0] - x0[0]], [x1[1] - x0[1], x2[1] - x0[1]], [x1[2] - x0[2], x2[2] - x0[2]]];
    let mut f = [[0.0; 2]; 3];
    for r in 0..3 {
        for c in 0..2 {
            f[r][c] = xe[r][0] * e_inv[0][c] + xe[r][1] * e_inv[1][c];
        }
    }
    let mut g = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            g[a][b] = (0..3).map(|r| f[r][a] * f[r][b]).sum();
        }
    }
    let det_g = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    let g_inv = [[g[1][1] / det_g, -g[0][1] / det_g], [-g[1][0] / det_g, g[0][0] / det_g]];
    let sq = mesh.material.conductance_scale.map(f64::sqrt);
    let jac = det_g.sqrt();
    let mut tensor = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            tensor[a][b] = sq[a] * jac * g_inv[a][b] * sq[b];
        }
    }

    // barycentric gradients in material coordinates
    let g1 = [e_inv[0][0], e_inv[0][1]];
    let g2 = [e_inv[1][0], e_inv[1][1]];
    let grads = [[-g1[0] - g2[0], -g1[1] - g2[1]], g1, g2];
    let thickness_m = 1e-3 * mesh.material.thickness;
    let mut k = [0.0; 9];
    for a in 0..3 {
        for b in 0..3 {
            let mut s = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    s += grads[a][i] * tensor[i][j] * grads[b][j];
                }
            }
            k[3 * a + b] = thickness_m * area * s;
        }
    }
    Ok(k)
}

/// Assembles the ungrounded system for one conductivity.
pub fn assemble_system(mesh: &Mesh, sigma: &ConductivityField) -> Result<CsrMatrix> {
    ForwardModel::new(mesh, &sigma.grid)?.assemble(sigma)
}

/// Simulates one protocol sweep; `current_ma` is the drive current in mA.
pub fn solve_frame(
    mesh: &Mesh,
    sigma: &ConductivityField,
    protocol: &SensingProtocol,
    current_ma: f64,
) -> Result<MeasurementFrame> {
    Ok(ForwardModel::new(mesh, &sigma.grid)?.solve(sigma, protocol, current_ma)?.frame)
}
