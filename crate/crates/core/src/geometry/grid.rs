use super::{wrap, DeformationState, SensorGeometry};
use crate::error::Result;
use crate::hash::Digest;

/// Lattice rows, along the sheet height.
pub const GRID_ROWS: usize = 27;
/// Lattice columns, along the sheet width.
pub const GRID_COLS: usize = 50;
pub const UNIT_ROWS: usize = 9;
pub const UNIT_COLS: usize = 14;

/// The 27 x 50 lattice of reconstruction points, grouped into 9 x 14 touch
/// units. Point `row * 50 + col` sits at the center of its lattice cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconGrid {
    pub width: f64,
    pub height: f64,
    pub flat: Vec<[f64; 2]>,
    pub points: Vec<[f64; 3]>,
    pub unit_of_point: Vec<usize>,
    id: String,
}

pub fn make_recon_grid(g: &SensorGeometry, d: &DeformationState) -> Result<ReconGrid> {
    g.validate()?;
    d.validate()?;
    let (du, dv) = (g.width / GRID_COLS as f64, g.height / GRID_ROWS as f64);
    let (uu, uv) = (g.width / UNIT_COLS as f64, g.height / UNIT_ROWS as f64);
    let mut flat = Vec::with_capacity(GRID_ROWS * GRID_COLS);
    let mut unit_of_point = Vec::with_capacity(GRID_ROWS * GRID_COLS);
    for r in 0..GRID_ROWS {
        for c in 0..GRID_COLS {
            let p = [(c as f64 + 0.5) * du, (r as f64 + 0.5) * dv];
            // nearest unit center on a regular grid is the containing cell
            let uc = ((p[0] / uu) as usize).min(UNIT_COLS - 1);
            let ur = ((p[1] / uv) as usize).min(UNIT_ROWS - 1);
            flat.push(p);
            unit_of_point.push(ur * UNIT_COLS + uc);
        }
    }
    let points = flat.iter().map(|&p| wrap(g, p, d)).collect();
    let mut grid = ReconGrid { width: g.width, height: g.height, flat, points, unit_of_point, id: String::new() };
    let mut h = Digest::new("recon-grid");
    for p in &grid.flat {
        h.f64s(p);
    }
    for p in &grid.points {
        h.f64s(p);
    }
    h.usizes(&grid.unit_of_point);
    grid.id = h.finish();
    Ok(grid)
}

impl ReconGrid {
    pub fn new(g: &SensorGeometry, d: &DeformationState) -> Result<Self> {
        make_recon_grid(g, d)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn unit_count(&self) -> usize {
        UNIT_ROWS * UNIT_COLS
    }

    pub fn pitch(&self) -> [f64; 2] {
        [self.width / GRID_COLS as f64, self.height / GRID_ROWS as f64]
    }

    /// Index of the recon point whose lattice cell contains material point `p`.
    /// Points on a shared cell edge go to the cell nearer the sheet center,
    /// which keeps the assignment mirror symmetric.
    pub fn nearest(&self, p: [f64; 2]) -> usize {
        let [du, dv] = self.pitch();
        let axis = |x: f64, pitch: f64, n: usize| {
            let t = x / pitch;
            let mut k = t.round();
            if (t - k).abs() > 1e-9 {
                k = t.floor();
            } else if k < 0.5 * n as f64 {
                // on the edge between cells k - 1 and k; k is the inner one
            } else {
                k -= 1.0;
            }
            (k.max(0.0) as usize).min(n - 1)
        };
        axis(p[1], dv, GRID_ROWS) * GRID_COLS + axis(p[0], du, GRID_COLS)
    }

    pub fn points_of_unit(&self, unit: usize) -> impl Iterator<Item = usize> + '_ {
        self.unit_of_point.iter().enumerate().filter(move |(_, &u)| u == unit).map(|(i, _)| i)
    }

    /// Material-coordinate rectangle covered by recon point `i`'s cell.
    pub fn cell(&self, i: usize) -> super::Rect {
        let [du, dv] = self.pitch();
        let [u, v] = self.flat[i];
        super::Rect { u0: u - 0.5 * du, u1: u + 0.5 * du, v0: v - 0.5 * dv, v1: v + 0.5 * dv }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn counts_and_ownership() {
        let g = SensorGeometry::default();
        let grid = make_recon_grid(&g, &DeformationState::flat()).unwrap();
        assert_eq!(grid.len(), 1350);
        assert_eq!(grid.unit_count(), 126);
        let mut owned = vec![0usize; 126];
        for &u in &grid.unit_of_point {
            owned[u] += 1;
        }
        // 3 lattice rows per unit row, 3 or 4 lattice columns per unit column
        assert!(owned.iter().all(|&n| n == 9 || n == 12), "{owned:?}");
        assert_eq!(owned.iter().sum::<usize>(), 1350);
    }

    #[test]
    fn bent_grid_same_counts_on_surface() {
        let g = SensorGeometry::default();
        let d = DeformationState::bent(PI / 2.0);
        let flat = make_recon_grid(&g, &DeformationState::flat()).unwrap();
        let bent = make_recon_grid(&g, &d).unwrap();
        assert_eq!(bent.len(), 1350);
        assert_eq!(bent.unit_of_point, flat.unit_of_point);
        let r = d.radius(&g);
        for p in &bent.points {
            let dist = ((p[0] - 75.0).powi(2) + (p[2] + r).powi(2)).sqrt();
            assert!((dist - r).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic() {
        let g = SensorGeometry::default();
        let d = DeformationState::bent(1.0);
        let a = make_recon_grid(&g, &d).unwrap();
        let b = make_recon_grid(&g, &d).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id(), b.id());
    }

    #[test]
    fn nearest_matches_cells() {
        let g = SensorGeometry::default();
        let grid = make_recon_grid(&g, &DeformationState::flat()).unwrap();
        for i in (0..grid.len()).step_by(37) {
            assert_eq!(grid.nearest(grid.flat[i]), i);
            assert!(grid.cell(i).contains(grid.flat[i][0], grid.flat[i][1], 0.0));
        }
    }
}
