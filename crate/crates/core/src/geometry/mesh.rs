use serde::{Deserialize, Serialize};

use super::{wrap, BendAxis, DeformationState, SensorGeometry};
use crate::error::{Error, Result};
use crate::hash::Digest;

/// Conduction properties of the sheet carried with every mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SheetMaterial {
    /// Conductive layer thickness in mm.
    pub thickness: f64,
    /// Sheet conductance multipliers along material `u` and `v`.
    ///
    /// An incompressible layer stretched by `lambda` along the bend direction
    /// conducts `lambda^-2` times as well along that direction and `lambda`
    /// times as well across it, per unit material length.
    pub conductance_scale: [f64; 2],
}

/// Triangulated sheet. Vertices are stored both in material coordinates
/// (`flat`) and on the deformed surface (`vertices`).
#[derive(Debug, Clone)]
pub struct Mesh {
    pub flat: Vec<[f64; 2]>,
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub electrode_nodes: Vec<Vec<usize>>,
    pub boundary_flags: Vec<bool>,
    pub material: SheetMaterial,
    pub deformation: DeformationState,
    /// Vertex lattice size `(nu, nv)`; vertex `(i, j)` has index `i * nv + j`.
    pub lattice: (usize, usize),
    id: String,
}

pub const MIN_VERTICES: usize = 500;

/// Structured triangulation of the sheet with roughly `target_vertex_count`
/// vertices, mapped through the bending deformation.
///
/// Grid lines are placed on every electrode footprint edge so each electrode
/// covers exactly its contact patch at any resolution. Cell diagonals
/// alternate in a checkerboard pattern and both midlines are grid lines, so the
/// triangulation shares the mirror symmetries of a symmetric electrode layout.
pub fn make_mesh(g: &SensorGeometry, d: &DeformationState, target_vertex_count: usize) -> Result<Mesh> {
    if target_vertex_count < MIN_VERTICES {
        return Err(Error::Meshing(format!(
            "target vertex count {target_vertex_count} is below the minimum of {MIN_VERTICES}"
        )));
    }
    g.validate()?;
    d.validate()?;

    let (bu, bv) = breakpoints(g);
    // Scan spacings around the nominal one and keep the candidate whose
    // vertex count is near the target and whose largest cell is closest to
    // the nominal spacing, so refinement behaves uniformly.
    let nominal = (g.width * g.height / target_vertex_count as f64).sqrt();
    let mut best: Option<(f64, f64)> = None;
    let mut closest: Option<(f64, f64)> = None;
    for k in 0..=600 {
        let h = nominal * (0.6 + 0.8 * k as f64 / 600.0);
        let us = subdivide(&bu, h);
        let vs = subdivide(&bv, h);
        let n = (us.len() * vs.len()) as f64;
        let count_err = (n / target_vertex_count as f64 - 1.0).abs();
        if closest.is_none_or(|(e, _)| count_err < e) {
            closest = Some((count_err, h));
        }
        if count_err > 0.08 {
            continue;
        }
        let diagonal = max_step(&us).hypot(max_step(&vs));
        let score = (diagonal / (nominal * std::f64::consts::SQRT_2) - 1.0).abs() + count_err;
        if best.is_none_or(|(s, _)| score < s) {
            best = Some((score, h));
        }
    }
    // coarse grids are dominated by the fixed breakpoints and only reach a
    // few distinct counts; fall back to the nearest one
    let h = match best.or(closest) {
        Some((_, h)) => h,
        None => return Err(Error::Meshing("empty spacing scan".into())),
    };
    let us = subdivide(&bu, h);
    let vs = subdivide(&bv, h);
    let n = us.len() * vs.len();
    if (n as f64 - target_vertex_count as f64).abs() > 0.25 * target_vertex_count as f64 {
        return Err(Error::Meshing(format!(
            "closest structured grid has {n} vertices ({} x {}), target {target_vertex_count}",
            us.len(),
            vs.len()
        )));
    }
    Ok(build(g, d, &us, &vs))
}

fn build(g: &SensorGeometry, d: &DeformationState, us: &[f64], vs: &[f64]) -> Mesh {
    let (nu, nv) = (us.len(), vs.len());
    let mut flat = Vec::with_capacity(nu * nv);
    for &u in us {
        for &v in vs {
            flat.push([u, v]);
        }
    }
    let vertices: Vec<[f64; 3]> = flat.iter().map(|&p| wrap(g, p, d)).collect();

    let idx = |i: usize, j: usize| i * nv + j;
    let mut triangles = Vec::with_capacity(2 * (nu - 1) * (nv - 1));
    for i in 0..nu - 1 {
        for j in 0..nv - 1 {
            let (a, b, c, e) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            if (i + j) % 2 == 0 {
                triangles.push([a, b, c]);
                triangles.push([a, c, e]);
            } else {
                triangles.push([a, b, e]);
                triangles.push([b, c, e]);
            }
        }
    }

    let tol = 1e-9 * g.width.max(g.height);
    let electrode_nodes = (0..g.electrode_count)
        .map(|k| {
            let fp = g.electrode_footprint(k);
            (0..flat.len()).filter(|&n| fp.contains(flat[n][0], flat[n][1], tol)).collect()
        })
        .collect();
    let boundary_flags = flat
        .iter()
        .map(|&[u, v]| u.abs() < tol || v.abs() < tol || (u - g.width).abs() < tol || (v - g.height).abs() < tol)
        .collect();

    let lambda = d.stretch(g);
    let (along, across) = (lambda.powi(-2), lambda);
    let conductance_scale = match d.axis {
        BendAxis::AlongU => [along, across],
        BendAxis::AlongV => [across, along],
    };

    let mut mesh = Mesh {
        flat,
        vertices,
        triangles,
        electrode_nodes,
        boundary_flags,
        material: SheetMaterial { thickness: g.thickness, conductance_scale },
        deformation: d.clone(),
        lattice: (nu, nv),
        id: String::new(),
    };
    mesh.id = mesh.digest();
    mesh
}

/// Coordinates that must appear as grid lines: the sheet edges, the inner
/// edge of the contact patches and every electrode's lateral edges.
fn breakpoints(g: &SensorGeometry) -> (Vec<f64>, Vec<f64>) {
    let c = g.electrode_contact;
    let mut bu = vec![0.0, g.width, c, g.width - c];
    let mut bv = vec![0.0, g.height, c, g.height - c];
    for k in 0..g.electrode_count {
        let fp = g.electrode_footprint(k);
        bu.extend([fp.u0, fp.u1]);
        bv.extend([fp.v0, fp.v1]);
    }
    let tidy = |mut b: Vec<f64>, len: f64| {
        let tol = 1e-9 * len;
        b.sort_by(|x, y| x.total_cmp(y));
        b.push(0.5 * len);
        b.sort_by(|x, y| x.total_cmp(y));
        b.dedup_by(|x, y| (*x - *y).abs() < tol);
        b
    };
    (tidy(bu, g.width), tidy(bv, g.height))
}

fn max_step(xs: &[f64]) -> f64 {
    xs.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

/// Subdivides every breakpoint interval to spacing at most `h`. Mirror
/// images of a cell then carry opposite diagonals, as the checkerboard needs.
fn subdivide(breaks: &[f64], h: f64) -> Vec<f64> {
    let len = breaks[breaks.len() - 1] - breaks[0];
    let counts: Vec<usize> = breaks
        .windows(2)
        .map(|w| ((w[1] - w[0]) / h - 1e-9).ceil().max(1.0) as usize)
        .collect();
    let mut out = Vec::with_capacity(counts.iter().sum::<usize>() + 1);
    for (w, &n) in breaks.windows(2).zip(&counts) {
        for s in 0..n {
            out.push(w[0] + (w[1] - w[0]) * s as f64 / n as f64);
        }
    }
    out.push(breaks[breaks.len() - 1]);
    debug_assert!(out.windows(2).all(|w| w[1] - w[0] > 1e-12 * len));
    out
}

impl Mesh {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    fn digest(&self) -> String {
        let mut h = Digest::new("mesh");
        for p in &self.flat {
            h.f64s(p);
        }
        for p in &self.vertices {
            h.f64s(p);
        }
        for t in &self.triangles {
            h.usizes(t);
        }
        for e in &self.electrode_nodes {
            h.usizes(e);
        }
        h.f64s(&[self.material.thickness]);
        h.f64s(&self.material.conductance_scale);
        h.finish()
    }

    /// Area of triangle `t` on the deformed surface.
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        let e1 = sub(b, a);
        let e2 = sub(c, a);
        0.5 * norm(cross(e1, e2))
    }

    /// Interior angles of triangle `t`, radians.
    pub fn triangle_angles(&self, t: usize) -> [f64; 3] {
        let p = self.triangles[t].map(|i| self.vertices[i]);
        let mut out = [0.0; 3];
        for k in 0..3 {
            let e1 = sub(p[(k + 1) % 3], p[k]);
            let e2 = sub(p[(k + 2) % 3], p[k]);
            out[k] = (dot(e1, e2) / (norm(e1) * norm(e2))).clamp(-1.0, 1.0).acos();
        }
        out
    }

    pub fn min_angle(&self) -> f64 {
        (0..self.triangles.len())
            .flat_map(|t| self.triangle_angles(t))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_edge_length(&self) -> f64 {
        self.triangles
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .map(|(a, b)| norm(sub(self.vertices[a], self.vertices[b])))
            .fold(0.0, f64::max)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Centroid of triangle `t` in material coordinates.
    pub fn flat_centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t].map(|i| self.flat[i]);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Writes the line-oriented text format: one `x y z` vertex per line, a
    /// `#faces` sentinel, then one `i j k` triangle per line.
    pub fn write_text<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.vertices {
            writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
        }
        writeln!(w, "#faces")?;
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    /// Wavefront OBJ (1-based face indices).
    pub fn write_obj<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# e-skin mesh {}", self.id)?;
        for p in &self.vertices {
            writeln!(w, "v {} {} {}", p[0], p[1], p[2])?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::f64::consts::PI;

    #[test]
    fn fine_flat_mesh_hits_target_and_area() {
        let g = SensorGeometry::default();
        let m = make_mesh(&g, &DeformationState::flat(), 8671).unwrap();
        let n = m.vertex_count() as f64;
        assert!((n - 8671.0).abs() <= 867.1, "{n} vertices");
        assert!((m.total_area() - 15000.0).abs() < 15.0);
        assert!(m.min_angle() >= 15f64.to_radians());
        for t in 0..m.triangles.len() {
            assert!(m.triangle_area(t) > 1e-9);
        }
    }

    #[test]
    fn below_minimum_rejected() {
        let g = SensorGeometry::default();
        assert!(matches!(make_mesh(&g, &DeformationState::flat(), 100), Err(Error::Meshing(_))));
    }

    #[test]
    fn electrodes_are_nonempty_blocks() {
        let g = SensorGeometry::default();
        for target in [500, 2000, 8671] {
            let m = make_mesh(&g, &DeformationState::flat(), target).unwrap();
            let (_, nv) = m.lattice;
            for nodes in &m.electrode_nodes {
                assert!(!nodes.is_empty());
                let is: HashSet<usize> = nodes.iter().map(|n| n / nv).collect();
                let js: HashSet<usize> = nodes.iter().map(|n| n % nv).collect();
                // a full rectangular block of lattice indices
                assert_eq!(is.len() * js.len(), nodes.len());
                let (imin, imax) = (is.iter().min().unwrap(), is.iter().max().unwrap());
                let (jmin, jmax) = (js.iter().min().unwrap(), js.iter().max().unwrap());
                assert_eq!(imax - imin + 1, is.len());
                assert_eq!(jmax - jmin + 1, js.len());
            }
        }
    }

    #[test]
    fn watertight_edges() {
        // interior edges are shared by exactly two triangles, boundary edges by one
        let g = SensorGeometry::default();
        let m = make_mesh(&g, &DeformationState::bent(PI / 2.0), 1200).unwrap();
        let mut edges = std::collections::HashMap::new();
        for t in &m.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        for ((a, b), count) in edges {
            let on_boundary = m.boundary_flags[a] && m.boundary_flags[b] && {
                let (pa, pb) = (m.flat[a], m.flat[b]);
                (pa[0] == pb[0] && (pa[0] == 0.0 || pa[0] == 150.0))
                    || (pa[1] == pb[1] && (pa[1] == 0.0 || pa[1] == 100.0))
            };
            assert_eq!(count, if on_boundary { 1 } else { 2 });
        }
    }

    #[test]
    fn refinement_shrinks_edges() {
        let g = SensorGeometry::default();
        for target in [1000, 2000, 4000] {
            let a = make_mesh(&g, &DeformationState::flat(), target).unwrap();
            let b = make_mesh(&g, &DeformationState::flat(), 2 * target).unwrap();
            let ratio = a.max_edge_length() / b.max_edge_length();
            assert!((1.2..=1.6).contains(&ratio), "target {target}: ratio {ratio}");
        }
    }

    #[test]
    fn mirror_symmetric_lattice() {
        let g = SensorGeometry::default();
        let m = make_mesh(&g, &DeformationState::flat(), 8671).unwrap();
        let (nu, nv) = m.lattice;
        assert!(nu % 2 == 1 && nv % 2 == 1, "even cell counts give odd vertex counts");
        for i in 0..nu {
            let a = m.flat[i * nv][0];
            let b = m.flat[(nu - 1 - i) * nv][0];
            assert!((a + b - 150.0).abs() < 1e-9);
        }
        let mut tris: Vec<[usize; 3]> = m.triangles.iter().map(|t| sorted(*t)).collect();
        tris.sort();
        let flips: [&dyn Fn(usize, usize) -> (usize, usize); 2] = [&|i, j| (nu - 1 - i, j), &|i, j| (i, nv - 1 - j)];
        for flip in flips {
            let mut image: Vec<[usize; 3]> = m
                .triangles
                .iter()
                .map(|t| {
                    sorted(t.map(|v| {
                        let (i, j) = flip(v / nv, v % nv);
                        i * nv + j
                    }))
                })
                .collect();
            image.sort();
            assert_eq!(tris, image);
        }
    }

    fn sorted(mut t: [usize; 3]) -> [usize; 3] {
        t.sort();
        t
    }

    #[test]
    fn bent_mesh_keeps_area_and_quality() {
        let g = SensorGeometry::default();
        let m = make_mesh(&g, &DeformationState::bent(2.0 * PI / 3.0), 8671).unwrap();
        assert!((m.total_area() - 15000.0).abs() < 15.0);
        assert!(m.min_angle() >= 15f64.to_radians());
        assert!(m.material.conductance_scale[0] < 1.0 && m.material.conductance_scale[1] > 1.0);
    }

    #[test]
    fn text_format_has_sentinel() {
        let g = SensorGeometry::default();
        let m = make_mesh(&g, &DeformationState::flat(), 600).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[m.vertex_count()], "#faces");
        assert_eq!(lines.len(), m.vertex_count() + 1 + m.triangles.len());
    }
}
