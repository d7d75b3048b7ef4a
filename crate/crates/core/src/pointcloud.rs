//! Point cloud pre-processing: outlier removal, principal-axis alignment,
//! radial-basis-function surface fitting and resampling to a fixed height
//! field.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BendAxis, DeformationState, SensorGeometry, GRID_COLS, GRID_ROWS};

pub const MIN_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudSource {
    Synthetic,
    External,
}

/// Unordered 3-D points in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCloud {
    pub points: Vec<[f64; 3]>,
    pub source: CloudSource,
}

impl RawCloud {
    pub fn new(points: Vec<[f64; 3]>, source: CloudSource) -> Result<Self> {
        let c = RawCloud { points, source };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < MIN_POINTS {
            return Err(Error::Cloud(format!(
                "cloud has {} points, at least {MIN_POINTS} are required",
                self.points.len()
            )));
        }
        if let Some(i) = self.points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Cloud(format!("point {i} has a non-finite coordinate")));
        }
        Ok(())
    }

    /// Parses whitespace-delimited `x y z` lines; blank lines and lines
    /// starting with `#` are skipped.
    pub fn read_xyz<R: std::io::BufRead>(r: R, source: CloudSource) -> Result<Self> {
        let mut points = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let v: Vec<f64> = t
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Cloud(format!("line {}: {e}", n + 1)))?;
            if v.len() != 3 {
                return Err(Error::Cloud(format!("line {}: expected 3 values, found {}", n + 1, v.len())));
            }
            points.push([v[0], v[1], v[2]]);
        }
        RawCloud::new(points, source)
    }

    pub fn write_xyz<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.points {
            writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
        }
        Ok(())
    }
}

/// `p -> rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    /// Rotation by `angle` radians about the z axis.
    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RigidTransform { rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], ..Self::identity() }
    }
}

fn knn_stats(points: &[[f64; 3]], k: usize) -> Vec<(f64, f64)> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            // k smallest squared distances, ascending
            let mut best = vec![f64::INFINITY; k];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best[k - 1] {
                    let pos = best.partition_point(|&b| b <= d);
                    best.insert(pos, d);
                    best.pop();
                }
            }
            let mean = best.iter().map(|d| d.sqrt()).sum::<f64>() / k as f64;
            (best[0].sqrt(), mean)
        })
        .collect()
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Statistical outlier removal.
///
/// A point is dropped when its mean distance to its `k` nearest neighbors
/// exceeds the cloud mean of that statistic by more than `z_thresh` standard
/// deviations, and its nearest-neighbor distance is likewise anomalous. The
/// second test keeps the rim of a regular sampling, whose neighborhoods are
/// one-sided but not sparse.
pub fn remove_outliers(c: &RawCloud, k: usize, z_thresh: f64) -> Result<RawCloud> {
    if k < 3 {
        return Err(Error::Param(format!("k must be at least 3, got {k}")));
    }
    c.validate()?;
    if c.points.len() <= k {
        return Err(Error::Cloud(format!("cloud of {} points is too small for k = {k}", c.points.len())));
    }
    let stats = knn_stats(&c.points, k);
    let (m1, s1) = mean_std(stats.iter().map(|s| s.0));
    let (mk, sk) = mean_std(stats.iter().map(|s| s.1));
    let keep: Vec<[f64; 3]> = c
        .points
        .iter()
        .zip(&stats)
        .filter(|(_, &(d1, dk))| !(dk > mk + z_thresh * sk && d1 > m1 + z_thresh * s1))
        .map(|(p, _)| *p)
        .collect();
    if keep.len() < MIN_POINTS {
        return Err(Error::Cloud(format!("only {} points remain after outlier removal", keep.len())));
    }
    Ok(RawCloud { points: keep, source: c.source })
}

/// Rigid alignment of the cloud to its principal axes.
///
/// The centroid moves to the origin, the direction of largest spread becomes
/// `x` and the second `y`. Signs: `x` points along the input `x` axis (third
/// moment as a tie-break), `z` is chosen so a bent sheet bulges toward `+z`
/// (input `z` axis for a flat sheet), and `y = z x x`.
pub fn align(c: &RawCloud) -> Result<(RawCloud, RigidTransform)> {
    c.validate()?;
    let n = c.points.len() as f64;
    let mut centroid = Vector3::zeros();
    for p in &c.points {
        centroid += Vector3::from(*p);
    }
    centroid /= n;
    let mut cov = Matrix3::zeros();
    for p in &c.points {
        let d = Vector3::from(*p) - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lam: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    if !(lam[1] > 1e-10 * lam[0]) {
        return Err(Error::Cloud("cloud is degenerate (collinear or a single point)".into()));
    }
    let axis = |i: usize| -> Vector3<f64> { eig.eigenvectors.column(order[i]).into_owned() };
    let centered: Vec<Vector3<f64>> = c.points.iter().map(|p| Vector3::from(*p) - centroid).collect();

    let mut ex = axis(0);
    if ex.x.abs() > 1e-9 {
        if ex.x < 0.0 {
            ex = -ex;
        }
    } else if centered.iter().map(|d| d.dot(&ex).powi(3)).sum::<f64>() < 0.0 {
        ex = -ex;
    }
    let mut ez = axis(2);
    // curvature test: a bulge toward +z has low z where x^2 is large
    let xs: Vec<f64> = centered.iter().map(|d| d.dot(&ex)).collect();
    let mean_x2 = xs.iter().map(|x| x * x).sum::<f64>() / n;
    let bulge: f64 = centered.iter().zip(&xs).map(|(d, x)| d.dot(&ez) * (x * x - mean_x2)).sum::<f64>() / n;
    let scale = lam[0] * lam[2].sqrt();
    if bulge.abs() > 1e-6 * scale {
        if bulge > 0.0 {
            ez = -ez;
        }
    } else if ez.z < 0.0 {
        ez = -ez;
    }
    let ey = ez.cross(&ex);
    let rot = Matrix3::from_rows(&[ex.transpose(), ey.transpose(), ez.transpose()]);
    let t = -(rot * centroid);
    let transform = RigidTransform {
        rotation: [
            [rot[(0, 0)], rot[(0, 1)], rot[(0, 2)]],
            [rot[(1, 0)], rot[(1, 1)], rot[(1, 2)]],
            [rot[(2, 0)], rot[(2, 1)], rot[(2, 2)]],
        ],
        translation: [t.x, t.y, t.z],
    };
    let points = c.points.iter().map(|&p| transform.apply(p)).collect();
    Ok((RawCloud { points, source: c.source }, transform))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RbfKernel {
    ThinPlate,
    /// `exp(-(r / width)^2)`
    Gaussian { width: f64 },
}

impl RbfKernel {
    fn phi(&self, r: f64) -> f64 {
        match *self {
            RbfKernel::ThinPlate => {
                if r == 0.0 {
                    0.0
                } else {
                    r * r * r.ln()
                }
            }
            RbfKernel::Gaussian { width } => (-(r / width).powi(2)).exp(),
        }
    }
}

/// Fitted surface `z(x, y) = sum w_i phi(|p - c_i|) + a0 + a1 x + a2 y`.
#[derive(Debug, Clone)]
pub struct HeightFunction {
    pub kernel: RbfKernel,
    pub centers: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub affine: [f64; 3],
    /// Bounding box of the sites: `[x0, x1, y0, y1]`.
    pub extent: [f64; 4],
    hull: Vec<[f64; 2]>,
}

impl HeightFunction {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let mut z = self.affine[0] + self.affine[1] * x + self.affine[2] * y;
        for (c, w) in self.centers.iter().zip(&self.weights) {
            z += w * self.kernel.phi((x - c[0]).hypot(y - c[1]));
        }
        z
    }

    /// Whether `(x, y)` lies inside (or on) the convex hull of the sites.
    pub fn inside_hull(&self, x: f64, y: f64) -> bool {
        let tol = 1e-9 * (self.extent[1] - self.extent[0]).max(self.extent[3] - self.extent[2]);
        let h = &self.hull;
        (0..h.len()).all(|i| {
            let (a, b) = (h[i], h[(i + 1) % h.len()]);
            let cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
            cross >= -tol * (b[0] - a[0]).hypot(b[1] - a[1])
        })
    }
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], q) <= 0.0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], q) <= 0.0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Fits a height function through the cloud's `(x, y) -> z` samples.
///
/// `smoothing` is added to the kernel diagonal; 0 interpolates exactly.
pub fn rbf_fit(c: &RawCloud, kernel: RbfKernel, smoothing: f64) -> Result<HeightFunction> {
    if !(smoothing >= 0.0) {
        return Err(Error::Param(format!("smoothing must be non-negative, got {smoothing}")));
    }
    if let RbfKernel::Gaussian { width } = kernel {
        if !(width > 0.0) {
            return Err(Error::Param(format!("Gaussian width must be positive, got {width}")));
        }
    }
    let sites: Vec<[f64; 2]> = c.points.iter().map(|p| [p[0], p[1]]).collect();
    let n = sites.len();
    if n < 3 {
        return Err(Error::Cloud(format!("RBF fit needs at least 3 sites, got {n}")));
    }
    let extent = sites.iter().fold([f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY], |e, s| {
        [e[0].min(s[0]), e[1].max(s[0]), e[2].min(s[1]), e[3].max(s[1])]
    });
    let tol = 1e-9 * (extent[1] - extent[0]).max(extent[3] - extent[2]).max(1.0);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| sites[a][0].total_cmp(&sites[b][0]));
    let mut dups = Vec::new();
    for (k, &a) in idx.iter().enumerate() {
        for &b in &idx[k + 1..] {
            if sites[b][0] - sites[a][0] > tol {
                break;
            }
            if (sites[b][1] - sites[a][1]).abs() <= tol {
                dups.push((a.min(b), a.max(b)));
            }
        }
    }
    if !dups.is_empty() {
        dups.sort_unstable();
        let shown: Vec<String> = dups.iter().take(5).map(|(a, b)| format!("{a}/{b}")).collect();
        return Err(Error::Cloud(format!(
            "{} duplicate (x, y) sites, e.g. points {}",
            dups.len(),
            shown.join(", ")
        )));
    }

    let m = n + 3;
    let mut a = DMatrix::zeros(m, m);
    for i in 0..n {
        for j in 0..i {
            let v = kernel.phi((sites[i][0] - sites[j][0]).hypot(sites[i][1] - sites[j][1]));
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
        a[(i, i)] = kernel.phi(0.0) + smoothing;
        let row = [1.0, sites[i][0], sites[i][1]];
        for (k, v) in row.into_iter().enumerate() {
            a[(i, n + k)] = v;
            a[(n + k, i)] = v;
        }
    }
    let mut rhs = DVector::zeros(m);
    for i in 0..n {
        rhs[i] = c.points[i][2];
    }
    let sol = a
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Cloud("RBF system is singular (sites may be collinear)".into()))?;
    Ok(HeightFunction {
        kernel,
        centers: sites.clone(),
        weights: sol.rows(0, n).iter().copied().collect(),
        affine: [sol[n], sol[n + 1], sol[n + 2]],
        extent,
        hull: convex_hull(&sites),
    })
}

/// Height field on a fixed `27 x 50` lattice over the aligned footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationDescriptor {
    /// Row-major heights in mm, row index along `y`, relative to their mean.
    pub heights: Vec<f64>,
    pub frame: RigidTransform,
    /// Sampled footprint `[x0, x1, y0, y1]` in the aligned frame.
    pub extent: [f64; 4],
    /// Number of samples outside the convex hull of the fitted sites.
    pub extrapolated: usize,
}

pub const DESCRIPTOR_LEN: usize = GRID_ROWS * GRID_COLS;

/// Lattice node positions: the footprint corners are sample points.
pub fn sample_positions(extent: [f64; 4]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(DESCRIPTOR_LEN);
    for r in 0..GRID_ROWS {
        for c in 0..GRID_COLS {
            let x = extent[0] + (extent[1] - extent[0]) * c as f64 / (GRID_COLS - 1) as f64;
            let y = extent[2] + (extent[3] - extent[2]) * r as f64 / (GRID_ROWS - 1) as f64;
            out.push([x, y]);
        }
    }
    out
}

fn demean(mut v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
    v
}

/// Samples `f` over its site footprint.
pub fn resample(f: &HeightFunction) -> DeformationDescriptor {
    let pos = sample_positions(f.extent);
    let extrapolated = pos.iter().filter(|p| !f.inside_hull(p[0], p[1])).count();
    let heights = demean(pos.par_iter().map(|p| f.eval(p[0], p[1])).collect());
    DeformationDescriptor { heights, frame: RigidTransform::identity(), extent: f.extent, extrapolated }
}

/// Reduces a cloud to at most `max_sites` sites on a node lattice spanning
/// its `(x, y)` bounding box, corners included.
///
/// Every point goes to its nearest node. A node with at least three
/// non-collinear points gets the height of a local least-squares plane
/// evaluated at the node; otherwise the mean of its points is used.
pub fn decimate(c: &RawCloud, max_sites: usize) -> RawCloud {
    if c.points.len() <= max_sites {
        return c.clone();
    }
    let e = c.points.iter().fold([f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY], |e, p| {
        [e[0].min(p[0]), e[1].max(p[0]), e[2].min(p[1]), e[3].max(p[1])]
    });
    let (w, h) = ((e[1] - e[0]).max(1e-12), (e[3] - e[2]).max(1e-12));
    let nx = ((max_sites as f64 * w / h).sqrt().floor() as usize).max(2);
    let ny = (max_sites / nx).max(2);
    let (sx, sy) = (w / (nx - 1) as f64, h / (ny - 1) as f64);
    let mut bins: Vec<Vec<[f64; 3]>> = vec![Vec::new(); nx * ny];
    for p in &c.points {
        let i = (((p[0] - e[0]) / sx).round() as usize).min(nx - 1);
        let j = (((p[1] - e[2]) / sy).round() as usize).min(ny - 1);
        bins[j * nx + i].push(*p);
    }
    let mut points = Vec::with_capacity(bins.len());
    for (k, bin) in bins.iter().enumerate() {
        if bin.is_empty() {
            continue;
        }
        let node = [e[0] + (k % nx) as f64 * sx, e[2] + (k / nx) as f64 * sy];
        points.push(local_plane(bin, node).unwrap_or_else(|| {
            let mut m = [0.0; 3];
            for p in bin {
                for a in 0..3 {
                    m[a] += p[a] / bin.len() as f64;
                }
            }
            m
        }));
    }
    RawCloud { points, source: c.source }
}

fn local_plane(pts: &[[f64; 3]], node: [f64; 2]) -> Option<[f64; 3]> {
    if pts.len() < 3 {
        return None;
    }
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = Vector3::zeros();
    for p in pts {
        let row = Vector3::new(1.0, p[0] - node[0], p[1] - node[1]);
        ata += row * row.transpose();
        atb += row * p[2];
    }
    let scale = ata[(1, 1)].max(ata[(2, 2)]).max(1e-300);
    if ata.determinant().abs() < 1e-9 * ata[(0, 0)] * scale * scale {
        return None;
    }
    let sol = ata.lu().solve(&atb)?;
    Some([node[0], node[1], sol[0]])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloudOptions {
    pub k: usize,
    pub z_thresh: f64,
    pub kernel: RbfKernel,
    pub smoothing: f64,
    /// Clouds with more points are binned down before fitting.
    pub max_sites: usize,
}

impl Default for CloudOptions {
    fn default() -> Self {
        CloudOptions { k: 8, z_thresh: 3.0, kernel: RbfKernel::ThinPlate, smoothing: 0.0, max_sites: 1400 }
    }
}

/// Full pipeline: outlier removal, alignment, binning, RBF fit, resampling.
pub fn process_cloud(c: &RawCloud, opt: &CloudOptions) -> Result<DeformationDescriptor> {
    let clean = remove_outliers(c, opt.k, opt.z_thresh)?;
    let (aligned, frame) = align(&clean)?;
    let sites = decimate(&aligned, opt.max_sites);
    let f = rbf_fit(&sites, opt.kernel, opt.smoothing)?;
    // sample over the full aligned footprint, not just the fitted sites
    let mut f = f;
    f.extent = footprint_extent(&aligned.points);
    let mut d = resample(&f);
    d.frame = frame;
    Ok(d)
}

/// `[x_min, x_max, y_min, y_max]` of a sampled footprint.
///
/// Each side is the median, over bands one mean point spacing wide, of the
/// most extreme point per band. A noiseless rim gives the exact edge; scan
/// noise does not push the edge outward the way the raw bounding box does.
pub fn footprint_extent(points: &[[f64; 3]]) -> [f64; 4] {
    let bbox = points.iter().fold([f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY], |e, p| {
        [e[0].min(p[0]), e[1].max(p[0]), e[2].min(p[1]), e[3].max(p[1])]
    });
    let spacing = ((bbox[1] - bbox[0]) * (bbox[3] - bbox[2]) / points.len().max(1) as f64).sqrt();
    if !(spacing > 0.0) {
        return bbox;
    }
    // extremes of coordinate `a` within bands along coordinate `b`
    let side = |a: usize, b: usize, lo: f64, hi: f64| -> [f64; 2] {
        let nb = (((hi - lo) / spacing).floor() as usize).max(1);
        let mut ext = vec![[f64::INFINITY, f64::NEG_INFINITY]; nb];
        for p in points {
            let k = (((p[b] - lo) / (hi - lo) * nb as f64) as usize).min(nb - 1);
            ext[k] = [ext[k][0].min(p[a]), ext[k][1].max(p[a])];
        }
        let mut mins: Vec<f64> = ext.iter().filter(|e| e[0].is_finite()).map(|e| e[0]).collect();
        let mut maxs: Vec<f64> = ext.iter().filter(|e| e[0].is_finite()).map(|e| e[1]).collect();
        [median(&mut mins), median(&mut maxs)]
    };
    let [x0, x1] = side(0, 1, bbox[2], bbox[3]);
    let [y0, y1] = side(1, 0, bbox[0], bbox[1]);
    [x0, x1, y0, y1]
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Exact descriptor of a cylindrical bend, in the same convention as
/// [`process_cloud`] applied to a cloud of the deformed sheet.
pub fn analytic_descriptor(g: &SensorGeometry, d: &DeformationState) -> Result<DeformationDescriptor> {
    d.validate()?;
    let (len, across) = match d.axis {
        BendAxis::AlongU => (g.width, g.height),
        BendAxis::AlongV => (g.height, g.width),
    };
    let (half_chord, radius) = if d.is_flat() {
        (0.5 * len, f64::INFINITY)
    } else {
        let r = len / d.bend_angle;
        (r * (0.5 * d.bend_angle).sin(), r)
    };
    if d.bend_angle > std::f64::consts::PI {
        return Err(Error::Geometry("bends beyond a half circle are not height fields".into()));
    }
    let height = |s: f64| if radius.is_finite() { (radius * radius - s * s).max(0.0).sqrt() - radius } else { 0.0 };
    // the longer footprint side is the aligned x axis
    let bend_is_x = 2.0 * half_chord >= across;
    let extent = if bend_is_x {
        [-half_chord, half_chord, -0.5 * across, 0.5 * across]
    } else {
        [-0.5 * across, 0.5 * across, -half_chord, half_chord]
    };
    let heights =
        demean(sample_positions(extent).iter().map(|p| height(if bend_is_x { p[0] } else { p[1] })).collect());
    Ok(DeformationDescriptor { heights, frame: RigidTransform::identity(), extent, extrapolated: 0 })
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    rows: usize,
    cols: usize,
    frame: RigidTransform,
    extent: [f64; 4],
    extrapolated: usize,
}

impl DeformationDescriptor {
    /// CSV with 27 rows of 50 heights.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.heights.chunks(GRID_COLS) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// JSON sidecar with the transform, footprint and extrapolation count.
    pub fn sidecar_json(&self) -> String {
        let s = Sidecar {
            rows: GRID_ROWS,
            cols: GRID_COLS,
            frame: self.frame,
            extent: self.extent,
            extrapolated: self.extrapolated,
        };
        serde_json::to_string_pretty(&s).expect("sidecar serializes")
    }

    pub fn from_csv(csv: &str, sidecar_json: &str) -> Result<Self> {
        let s: Sidecar = serde_json::from_str(sidecar_json)?;
        if (s.rows, s.cols) != (GRID_ROWS, GRID_COLS) {
            return Err(Error::Shape { what: "descriptor sidecar", expected: DESCRIPTOR_LEN, found: s.rows * s.cols });
        }
        let mut heights = Vec::with_capacity(DESCRIPTOR_LEN);
        for (n, line) in csv.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let row: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Cloud(format!("descriptor row {}: {e}", n + 1)))?;
            if row.len() != GRID_COLS {
                return Err(Error::Shape { what: "descriptor row", expected: GRID_COLS, found: row.len() });
            }
            heights.extend(row);
        }
        if heights.len() != DESCRIPTOR_LEN {
            return Err(Error::Shape { what: "descriptor", expected: DESCRIPTOR_LEN, found: heights.len() });
        }
        Ok(DeformationDescriptor { heights, frame: s.frame, extent: s.extent, extrapolated: s.extrapolated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{emit_point_cloud, make_mesh};
    use std::f64::consts::PI;

    fn lattice(nx: usize, ny: usize, step: f64) -> RawCloud {
        let mut pts = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                pts.push([i as f64 * step, j as f64 * step, 0.0]);
            }
        }
        RawCloud::new(pts, CloudSource::Synthetic).unwrap()
    }

    #[test]
    fn outlier_removal() {
        let c = lattice(40, 30, 2.0);
        assert_eq!(remove_outliers(&c, 8, 3.0).unwrap(), c);
        let mut dirty = c.clone();
        dirty.points.push([30.0, 30.0, 100.0]);
        let cleaned = remove_outliers(&dirty, 8, 3.0).unwrap();
        assert_eq!(cleaned.points.len(), c.points.len());
        assert!(!cleaned.points.contains(&[30.0, 30.0, 100.0]));
        let small = RawCloud { points: c.points[..50].to_vec(), source: CloudSource::Synthetic };
        assert!(remove_outliers(&small, 8, 3.0).is_err());
    }

    #[test]
    fn alignment_recovers_rotation() {
        let mut c = lattice(31, 21, 5.0);
        for p in &mut c.points {
            p[0] -= 75.0;
            p[1] -= 50.0;
        }
        let (_, t) = align(&c).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((t.rotation[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
        let rot = RigidTransform::rotation_z(PI / 6.0);
        let turned = RawCloud { points: c.points.iter().map(|&p| rot.apply(p)).collect(), ..c.clone() };
        let (_, t) = align(&turned).unwrap();
        let expect = RigidTransform::rotation_z(-PI / 6.0);
        for i in 0..3 {
            for j in 0..3 {
                assert!((t.rotation[i][j] - expect.rotation[i][j]).abs() < 1e-6);
            }
        }
        let line: Vec<[f64; 3]> = (0..200).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        assert!(align(&RawCloud::new(line, CloudSource::External).unwrap()).is_err());
    }

    #[test]
    fn rbf_interpolates_and_smooths() {
        let pts: Vec<[f64; 3]> = (0..120)
            .map(|i| {
                let (x, y) = ((i as f64 * 0.37).sin() * 40.0, (i as f64 * 0.91).cos() * 30.0 + i as f64 * 0.01);
                [x, y, (x / 20.0).sin() + 0.01 * y * y]
            })
            .collect();
        let c = RawCloud::new(pts.clone(), CloudSource::Synthetic).unwrap();
        let f = rbf_fit(&c, RbfKernel::ThinPlate, 0.0).unwrap();
        for p in &pts {
            assert!((f.eval(p[0], p[1]) - p[2]).abs() < 1e-8);
        }
        let mut last = 0.0;
        for s in [0.0, 0.01, 0.1, 1.0, 10.0] {
            let f = rbf_fit(&c, RbfKernel::ThinPlate, s).unwrap();
            let res = pts.iter().map(|p| (f.eval(p[0], p[1]) - p[2]).powi(2)).sum::<f64>().sqrt();
            assert!(res >= last - 1e-12);
            last = res;
        }
        let g = rbf_fit(&c, RbfKernel::Gaussian { width: 15.0 }, 0.0).unwrap();
        assert!((g.eval(pts[3][0], pts[3][1]) - pts[3][2]).abs() < 1e-6);
        let mut dup = pts.clone();
        dup.push(pts[10]);
        let err = rbf_fit(&RawCloud::new(dup, CloudSource::Synthetic).unwrap(), RbfKernel::ThinPlate, 0.0).unwrap_err();
        assert!(err.to_string().contains("10/120"), "{err}");
    }

    #[test]
    fn plane_gives_zero_surface() {
        let c = lattice(12, 10, 7.0);
        let f = rbf_fit(&c, RbfKernel::ThinPlate, 0.0).unwrap();
        for p in sample_positions(f.extent) {
            assert!(f.eval(p[0], p[1]).abs() < 1e-10);
        }
        let d = resample(&f);
        assert_eq!(d.heights.len(), DESCRIPTOR_LEN);
        assert!(d.heights.iter().all(|h| h.abs() < 1e-10));
    }

    #[test]
    fn cylinder_heights_at_held_out_sites() {
        let r = 150.0 / PI;
        let z = |x: f64| (r * r - x * x).sqrt() - r;
        let mut pts = Vec::new();
        for i in 0..30 {
            for j in 0..20 {
                let x = -0.9 * r + 1.8 * r * i as f64 / 29.0;
                let y = -50.0 + 100.0 * j as f64 / 19.0;
                pts.push([x, y, z(x)]);
            }
        }
        let f = rbf_fit(&RawCloud::new(pts, CloudSource::Synthetic).unwrap(), RbfKernel::ThinPlate, 0.0).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..40 {
            for j in 0..25 {
                let x = -0.85 * r + 1.7 * r * (i as f64 + 0.5) / 40.0;
                let y = -48.0 + 96.0 * (j as f64 + 0.5) / 25.0;
                worst = worst.max((f.eval(x, y) - z(x)).abs());
            }
        }
        assert!(worst < 0.1, "max error {worst}");
    }

    fn bent_cloud(theta: f64, noise: f64, seed: u64) -> (RawCloud, DeformationDescriptor) {
        let g = SensorGeometry::default();
        let d = DeformationState::bent(theta);
        let mesh = make_mesh(&g, &d, 8671).unwrap();
        let pts = emit_point_cloud(&mesh, noise, 0.0, seed).unwrap();
        (RawCloud::new(pts, CloudSource::Synthetic).unwrap(), analytic_descriptor(&g, &d).unwrap())
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn round_trip_matches_analytic_cylinder() {
        let (c, truth) = bent_cloud(PI / 2.0, 0.0, 1);
        let d = process_cloud(&c, &CloudOptions::default()).unwrap();
        assert_eq!(d.heights.len(), DESCRIPTOR_LEN);
        assert!(max_diff(&d.heights, &truth.heights) < 0.2, "{}", max_diff(&d.heights, &truth.heights));
        for i in 0..4 {
            assert!((d.extent[i] - truth.extent[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn pipeline_properties() {
        let opt = CloudOptions::default();
        let (c, _) = bent_cloud(PI / 3.0, 0.0, 2);
        let base = process_cloud(&c, &opt).unwrap();

        // idempotence on the processed lattice
        let pos = sample_positions(base.extent);
        let lattice_cloud: Vec<[f64; 3]> = pos.iter().zip(&base.heights).map(|(p, h)| [p[0], p[1], *h]).collect();
        let again = process_cloud(&RawCloud::new(lattice_cloud, CloudSource::Synthetic).unwrap(), &opt).unwrap();
        assert!(max_diff(&again.heights, &base.heights) < 1e-6, "{}", max_diff(&again.heights, &base.heights));

        // rigid invariance
        let mut moved = RigidTransform::rotation_z(0.4);
        moved.translation = [12.0, -40.0, 7.0];
        let tilt = {
            let (s, c) = 0.2f64.sin_cos();
            RigidTransform { rotation: [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]], translation: [0.0; 3] }
        };
        let pts: Vec<[f64; 3]> = c.points.iter().map(|&p| moved.apply(tilt.apply(p))).collect();
        let d = process_cloud(&RawCloud::new(pts, CloudSource::External).unwrap(), &opt).unwrap();
        assert!(max_diff(&d.heights, &base.heights) < 0.1, "{}", max_diff(&d.heights, &base.heights));

        // scanner-resolution noise
        let (noisy, _) = bent_cloud(PI / 3.0, 0.1, 3);
        let d = process_cloud(&noisy, &opt).unwrap();
        assert!(max_diff(&d.heights, &base.heights) < 0.3, "{}", max_diff(&d.heights, &base.heights));
    }

    #[test]
    fn descriptor_csv_round_trip() {
        let d = analytic_descriptor(&SensorGeometry::default(), &DeformationState::bent(1.0)).unwrap();
        let back = DeformationDescriptor::from_csv(&d.to_csv(), &d.sidecar_json()).unwrap();
        assert_eq!(back, d);
        assert!(analytic_descriptor(&SensorGeometry::default(), &DeformationState::flat())
            .unwrap()
            .heights
            .iter()
            .all(|h| *h == 0.0));
    }
}
