//! Sensor sheet geometry, cylindrical bending, meshes and the reconstruction grid.
//!
//! All geometry is parameterized by *material* (flat) coordinates `(u, v)` on
//! the `width x height` rectangle with the origin at a corner. Bending maps the
//! flat sheet isometrically onto a cylinder, so distances measured in material
//! coordinates are geodesic distances on the bent surface.

mod cloud;
mod grid;
mod mesh;

pub use cloud::emit_point_cloud;
pub use grid::{make_recon_grid, ReconGrid, GRID_COLS, GRID_ROWS, UNIT_COLS, UNIT_ROWS};
pub use mesh::{make_mesh, Mesh, SheetMaterial};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sensing-layer footprint and electrode layout.
pub const DEFAULT_WIDTH: f64 = 150.0;
pub const DEFAULT_HEIGHT: f64 = 100.0;
pub const DEFAULT_ELECTRODES: usize = 16;
pub const DEFAULT_CONTACT: f64 = 4.0;
pub const DEFAULT_THICKNESS: f64 = 2.0;
/// Distance between the conductive layer midplane and the neutral surface of
/// the bent body, in mm. Positive means the layer sits on the convex side.
/// The default places the skin on the outer face of a 16 mm foam pad.
pub const DEFAULT_LAYER_OFFSET: f64 = 8.0;

/// Which side of the boundary an electrode sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Edge {
    Bottom,
    Right,
    Top,
    Left,
}

/// Axis-aligned rectangle in material coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub u0: f64,
    pub u1: f64,
    pub v0: f64,
    pub v1: f64,
}

impl Rect {
    pub fn contains(&self, u: f64, v: f64, tol: f64) -> bool {
        u >= self.u0 - tol && u <= self.u1 + tol && v >= self.v0 - tol && v <= self.v1 + tol
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.u0 < other.u1 && other.u0 < self.u1 && self.v0 < other.v1 && other.v0 < self.v1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorGeometry {
    /// Extent along material `u`, mm.
    pub width: f64,
    /// Extent along material `v`, mm.
    pub height: f64,
    /// Conductive layer thickness, mm.
    pub thickness: f64,
    /// Offset of the conductive layer from the bending neutral surface, mm.
    pub layer_offset: f64,
    pub electrode_count: usize,
    /// Side length of the square electrode contact, mm.
    pub electrode_contact: f64,
    /// Arc-length coordinate of each electrode center, counter-clockwise from
    /// the `(0, 0)` corner.
    pub electrode_positions: Vec<f64>,
}

impl Default for SensorGeometry {
    fn default() -> Self {
        make_geometry(DEFAULT_WIDTH, DEFAULT_HEIGHT, DEFAULT_ELECTRODES)
            .expect("default geometry is valid")
    }
}

/// Builds a sheet with `n_electrodes` spread at equal arc-length spacing.
///
/// The first electrode is placed so that the layout is mirror symmetric about
/// both midlines whenever that is possible without an electrode straddling a
/// corner; otherwise it is shifted by half a spacing.
pub fn make_geometry(width: f64, height: f64, n_electrodes: usize) -> Result<SensorGeometry> {
    if !(width > 0.0 && height > 0.0) || !width.is_finite() || !height.is_finite() {
        return Err(Error::Geometry(format!("dimensions must be positive, got {width} x {height}")));
    }
    if n_electrodes < 8 || n_electrodes % 2 != 0 {
        return Err(Error::Geometry(format!(
            "electrode count must be even and at least 8, got {n_electrodes}"
        )));
    }
    let perimeter = 2.0 * (width + height);
    let spacing = perimeter / n_electrodes as f64;
    let contact = DEFAULT_CONTACT.min(0.5 * spacing);

    let first = (0.5 * width) % spacing;
    let candidates = [first, (first + 0.5 * spacing) % spacing];
    for start in candidates {
        let geom = SensorGeometry {
            width,
            height,
            thickness: DEFAULT_THICKNESS,
            layer_offset: DEFAULT_LAYER_OFFSET,
            electrode_count: n_electrodes,
            electrode_contact: contact,
            electrode_positions: (0..n_electrodes).map(|k| start + k as f64 * spacing).collect(),
        };
        if geom.validate().is_ok() {
            return Ok(geom);
        }
    }
    Err(Error::Geometry(format!(
        "cannot place {n_electrodes} electrodes of {contact} mm on a {width} x {height} mm boundary"
    )))
}

impl SensorGeometry {
    pub fn perimeter(&self) -> f64 {
        2.0 * (self.width + self.height)
    }

    pub fn electrode_spacing(&self) -> f64 {
        self.perimeter() / self.electrode_count as f64
    }

    /// Edge and along-edge coordinate (from the edge's start corner) of an
    /// arc-length position.
    pub fn edge_of_arc(&self, s: f64) -> (Edge, f64) {
        let (w, h) = (self.width, self.height);
        let s = s.rem_euclid(self.perimeter());
        if s < w {
            (Edge::Bottom, s)
        } else if s < w + h {
            (Edge::Right, s - w)
        } else if s < 2.0 * w + h {
            (Edge::Top, s - w - h)
        } else {
            (Edge::Left, s - 2.0 * w - h)
        }
    }

    /// Material point on the boundary at arc length `s`.
    pub fn boundary_point(&self, s: f64) -> [f64; 2] {
        let (w, h) = (self.width, self.height);
        match self.edge_of_arc(s) {
            (Edge::Bottom, t) => [t, 0.0],
            (Edge::Right, t) => [w, t],
            (Edge::Top, t) => [w - t, h],
            (Edge::Left, t) => [0.0, h - t],
        }
    }

    /// Contact footprint of electrode `k`: a square of side
    /// `electrode_contact` against the boundary.
    pub fn electrode_footprint(&self, k: usize) -> Rect {
        let c = self.electrode_contact;
        let [u, v] = self.boundary_point(self.electrode_positions[k]);
        match self.edge_of_arc(self.electrode_positions[k]).0 {
            Edge::Bottom => Rect { u0: u - c / 2.0, u1: u + c / 2.0, v0: 0.0, v1: c },
            Edge::Top => Rect { u0: u - c / 2.0, u1: u + c / 2.0, v0: self.height - c, v1: self.height },
            Edge::Right => Rect { u0: self.width - c, u1: self.width, v0: v - c / 2.0, v1: v + c / 2.0 },
            Edge::Left => Rect { u0: 0.0, u1: c, v0: v - c / 2.0, v1: v + c / 2.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0 && self.thickness > 0.0) {
            return Err(Error::Geometry("width, height and thickness must be positive".into()));
        }
        if self.electrode_count < 8 || self.electrode_count % 2 != 0 {
            return Err(Error::Geometry(format!(
                "electrode count must be even and at least 8, got {}",
                self.electrode_count
            )));
        }
        if !self.layer_offset.is_finite() {
            return Err(Error::Geometry("layer offset must be finite".into()));
        }
        if self.electrode_positions.len() != self.electrode_count {
            return Err(Error::Geometry("electrode position list length differs from count".into()));
        }
        if !self.layer_offset.is_finite() {
            return Err(Error::Geometry("layer offset must be finite".into()));
        }
        let c = self.electrode_contact;
        if !(c > 0.0) || 2.0 * c > self.width.min(self.height) {
            return Err(Error::Geometry(format!("electrode contact {c} mm does not fit the sheet")));
        }
        for (k, &s) in self.electrode_positions.iter().enumerate() {
            let (edge, t) = self.edge_of_arc(s);
            let len = match edge {
                Edge::Bottom | Edge::Top => self.width,
                Edge::Left | Edge::Right => self.height,
            };
            if t - c / 2.0 < -1e-9 || t + c / 2.0 > len + 1e-9 {
                return Err(Error::Geometry(format!("electrode {k} straddles a corner")));
            }
        }
        for a in 0..self.electrode_count {
            for b in a + 1..self.electrode_count {
                if self.electrode_footprint(a).overlaps(&self.electrode_footprint(b)) {
                    return Err(Error::Geometry(format!("electrodes {a} and {b} overlap")));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        let tol = 1e-9 * self.width.max(self.height);
        u >= -tol && u <= self.width + tol && v >= -tol && v <= self.height + tol
    }

    /// Extent of the sheet along the bending direction.
    pub fn bend_length(&self, axis: BendAxis) -> f64 {
        match axis {
            BendAxis::AlongU => self.width,
            BendAxis::AlongV => self.height,
        }
    }
}

/// Direction in which the sheet curves. `AlongU` wraps the `width` extent
/// around a cylinder whose axis is parallel to `v`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BendAxis {
    #[default]
    AlongU,
    AlongV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationState {
    /// Total subtended arc of the bent sheet, radians in `[0, 2pi)`.
    pub bend_angle: f64,
    pub axis: BendAxis,
    #[serde(default)]
    pub label: String,
}

impl DeformationState {
    pub fn flat() -> Self {
        Self { bend_angle: 0.0, axis: BendAxis::AlongU, label: "flat".into() }
    }

    pub fn bent(bend_angle: f64) -> Self {
        Self { bend_angle, axis: BendAxis::AlongU, label: format!("bend {bend_angle:.4}") }
    }

    pub fn is_flat(&self) -> bool {
        self.bend_angle == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::TAU).contains(&self.bend_angle) {
            return Err(Error::Geometry(format!(
                "bend angle must lie in [0, 2pi), got {}",
                self.bend_angle
            )));
        }
        Ok(())
    }

    /// Cylinder radius `L / theta`, infinite when flat.
    pub fn radius(&self, g: &SensorGeometry) -> f64 {
        g.bend_length(self.axis) / self.bend_angle
    }

    /// Membrane stretch of the conductive layer along the bend direction.
    pub fn stretch(&self, g: &SensorGeometry) -> f64 {
        1.0 + g.layer_offset * self.bend_angle / g.bend_length(self.axis)
    }
}

/// Maps a material point onto the bent surface.
///
/// The sheet is wrapped around a cylinder of radius `L / theta`, keeping the
/// center line of the bend direction fixed and the sheet convex towards `+z`.
pub fn deform_point(g: &SensorGeometry, p: [f64; 2], d: &DeformationState) -> Result<[f64; 3]> {
    if !g.contains(p[0], p[1]) {
        return Err(Error::OutsideDomain { u: p[0], v: p[1], width: g.width, height: g.height });
    }
    d.validate()?;
    Ok(wrap(g, p, d))
}

pub(crate) fn wrap(g: &SensorGeometry, [u, v]: [f64; 2], d: &DeformationState) -> [f64; 3] {
    if d.is_flat() {
        return [u, v, 0.0];
    }
    let r = d.radius(g);
    let (along, center) = match d.axis {
        BendAxis::AlongU => (u, 0.5 * g.width),
        BendAxis::AlongV => (v, 0.5 * g.height),
    };
    let phi = (along - center) / r;
    let a = center + r * phi.sin();
    // 1 - cos(phi) without cancellation
    let z = -2.0 * r * (0.5 * phi).sin().powi(2);
    match d.axis {
        BendAxis::AlongU => [a, v, z],
        BendAxis::AlongV => [u, a, z],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn default_layout() {
        let g = make_geometry(150.0, 100.0, 16).unwrap();
        assert_eq!(g.electrode_count, 16);
        assert_eq!(g.perimeter(), 500.0);
        assert_eq!(g.electrode_spacing(), 31.25);
        for w in g.electrode_positions.windows(2) {
            assert!((w[1] - w[0] - 31.25).abs() < 1e-12);
        }
        // symmetric layout: an electrode at the middle of each edge
        let mids: Vec<[f64; 2]> = g.electrode_positions.iter().map(|&s| g.boundary_point(s)).collect();
        for m in [[75.0, 0.0], [150.0, 50.0], [75.0, 100.0], [0.0, 50.0]] {
            assert!(mids.iter().any(|p| (p[0] - m[0]).abs() < 1e-9 && (p[1] - m[1]).abs() < 1e-9));
        }
    }

    #[test]
    fn square_eight_electrodes() {
        let g = make_geometry(100.0, 100.0, 8).unwrap();
        assert_eq!(g.electrode_spacing(), 50.0);
        g.validate().unwrap();
    }

    #[test]
    fn rejects_bad_counts_and_dims() {
        assert!(make_geometry(150.0, 100.0, 15).is_err());
        assert!(make_geometry(150.0, 100.0, 6).is_err());
        assert!(make_geometry(0.0, 100.0, 16).is_err());
        assert!(make_geometry(150.0, -1.0, 16).is_err());
    }

    #[test]
    fn identity_when_flat() {
        let g = SensorGeometry::default();
        let p = deform_point(&g, [75.0, 50.0], &DeformationState::flat()).unwrap();
        assert_eq!(p, [75.0, 50.0, 0.0]);
    }

    #[test]
    fn outside_point_rejected() {
        let g = SensorGeometry::default();
        assert!(matches!(
            deform_point(&g, [151.0, 50.0], &DeformationState::flat()),
            Err(Error::OutsideDomain { .. })
        ));
    }

    #[test]
    fn half_cylinder_radius_and_chord() {
        let g = SensorGeometry::default();
        let d = DeformationState::bent(PI);
        let r = 150.0 / PI;
        assert!((d.radius(&g) - r).abs() < 1e-12);
        let a = deform_point(&g, [0.0, 50.0], &d).unwrap();
        let b = deform_point(&g, [150.0, 50.0], &d).unwrap();
        let chord = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        assert!((chord - 2.0 * r).abs() < 1e-9, "chord {chord}");
        // distance from the cylinder axis at (75, *, -r)
        let axis_dist = ((a[0] - 75.0).powi(2) + (a[2] + r).powi(2)).sqrt();
        assert!((axis_dist - r).abs() < 1e-9);
    }

    #[test]
    fn image_arc_length_is_preserved() {
        // numeric integration of the image curve of the v = 50 line
        let g = SensorGeometry::default();
        let d = DeformationState::bent(PI);
        let n = 200_000;
        let mut len = 0.0;
        let mut prev = wrap(&g, [0.0, 50.0], &d);
        for k in 1..=n {
            let q = wrap(&g, [150.0 * k as f64 / n as f64, 50.0], &d);
            len += ((q[0] - prev[0]).powi(2) + (q[1] - prev[1]).powi(2) + (q[2] - prev[2]).powi(2)).sqrt();
            prev = q;
        }
        assert!((len - 150.0).abs() < 1e-6, "arc length {len}");
    }

    #[test]
    fn tiny_bend_is_nearly_flat() {
        let g = SensorGeometry::default();
        let d = DeformationState::bent(1e-6);
        let mut max_z: f64 = 0.0;
        for i in 0..=30 {
            for j in 0..=20 {
                let p = wrap(&g, [5.0 * i as f64, 5.0 * j as f64], &d);
                max_z = max_z.max(p[2].abs());
            }
        }
        assert!(max_z < 0.01);
    }

    #[test]
    fn bend_angle_range_checked() {
        let g = SensorGeometry::default();
        let d = DeformationState::bent(7.0);
        assert!(deform_point(&g, [1.0, 1.0], &d).is_err());
    }
}
