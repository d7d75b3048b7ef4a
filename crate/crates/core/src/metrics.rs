//! Image-quality metrics for tactile maps.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ReconGrid, GRID_COLS, GRID_ROWS};

/// Fraction of the map maximum used to segment touch regions.
pub const DE_THRESHOLD: f64 = 0.5;

fn same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape { what: "metric input", expected: y.len(), found: x.len() });
    }
    Ok(())
}

/// Pearson correlation coefficient.
pub fn cc(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y)?;
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 && syy == 0.0 {
        return Err(Error::Metric("correlation of two constant maps is undefined".into()));
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Peak signal-to-noise ratio, or a flag when the images are identical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.4}"),
            Psnr::Identical => f.write_str("inf"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Db(v) => s.serialize_f64(*v),
            Psnr::Identical => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Db(v)),
            Raw::Text(t) if t == "inf" => Ok(Psnr::Identical),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid PSNR {t:?}"))),
        }
    }
}

/// `10 log10(peak^2 / MSE)` with `peak = max |truth|`.
pub fn psnr(x: &[f64], truth: &[f64]) -> Result<Psnr> {
    same_len(x, truth)?;
    let mse = x.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr::Identical);
    }
    let peak = truth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Metric("PSNR needs a truth map with a nonzero peak".into()));
    }
    Ok(Psnr::Db(10.0 * (peak * peak / mse).log10()))
}

/// Relative image error `||x - y|| / ||y||`.
pub fn rie(x: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(x, truth)?;
    let den = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::Metric("relative image error needs a nonzero truth map".into()));
    }
    Ok(x.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / den)
}

/// `|D - D_r| / D_r`.
pub fn distance_error_value(measured: f64, reference: f64) -> Result<f64> {
    if !(reference > 0.0) {
        return Err(Error::Metric(format!("reference distance must be positive, got {reference}")));
    }
    Ok((measured - reference).abs() / reference)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMeasure {
    /// Gap between the two closest regions, mm.
    pub distance: f64,
    pub error: f64,
    pub components: usize,
}

/// 4-connected components of the lattice points where `mask` holds, each as a
/// sorted list of point indices, ordered by smallest index.
pub fn components(mask: &[bool]) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut stack = vec![start];
        let mut members = Vec::new();
        label[start] = id;
        while let Some(p) = stack.pop() {
            members.push(p);
            let (r, c) = (p / GRID_COLS, p % GRID_COLS);
            let mut next = Vec::with_capacity(4);
            if r > 0 {
                next.push(p - GRID_COLS);
            }
            if r + 1 < GRID_ROWS {
                next.push(p + GRID_COLS);
            }
            if c > 0 {
                next.push(p - 1);
            }
            if c + 1 < GRID_COLS {
                next.push(p + 1);
            }
            for q in next {
                if mask[q] && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Distance error of a reconstructed map against a known gap `true_distance`.
///
/// The map is thresholded at `threshold` times its maximum, split into
/// 4-connected regions, and the smallest edge-to-edge gap between the cells
/// of any two regions is measured in material coordinates. Bending is
/// isometric, so this equals the distance along the surface.
pub fn distance_error(map: &[f64], grid: &ReconGrid, threshold: f64, true_distance: f64) -> Result<DistanceMeasure> {
    if map.len() != grid.len() {
        return Err(Error::Shape { what: "tactile map", expected: grid.len(), found: map.len() });
    }
    let peak = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Metric("map has no positive region".into()));
    }
    let mask: Vec<bool> = map.iter().map(|&v| v >= threshold * peak).collect();
    let comps = components(&mask);
    if comps.len() < 2 {
        return Err(Error::Metric(format!("distance error needs two regions, found {}", comps.len())));
    }
    let boundary = |comp: &[usize]| -> Vec<usize> {
        comp.iter()
            .copied()
            .filter(|&p| {
                let (r, c) = (p / GRID_COLS, p % GRID_COLS);
                r == 0
                    || r + 1 == GRID_ROWS
                    || c == 0
                    || c + 1 == GRID_COLS
                    || !mask[p - GRID_COLS]
                    || !mask[p + GRID_COLS]
                    || !mask[p - 1]
                    || !mask[p + 1]
            })
            .collect()
    };
    let edges: Vec<Vec<usize>> = comps.iter().map(|c| boundary(c)).collect();
    let mut best = f64::INFINITY;
    for a in 0..edges.len() {
        for b in a + 1..edges.len() {
            for &p in &edges[a] {
                for &q in &edges[b] {
                    best = best.min(box_gap(grid, p, q));
                }
            }
        }
    }
    Ok(DistanceMeasure { distance: best, error: distance_error_value(best, true_distance)?, components: comps.len() })
}

fn box_gap(grid: &ReconGrid, p: usize, q: usize) -> f64 {
    let (a, b) = (grid.cell(p), grid.cell(q));
    let du = (a.u0 - b.u1).max(b.u0 - a.u1).max(0.0);
    let dv = (a.v0 - b.v1).max(b.v0 - a.v1).max(0.0);
    du.hypot(dv)
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub phantom: String,
    pub method: String,
    pub cc: f64,
    pub psnr: Psnr,
    pub rie: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub de: Option<f64>,
}

impl MetricReport {
    pub fn compute(phantom: &str, method: &str, x: &[f64], truth: &[f64]) -> Result<Self> {
        Ok(MetricReport {
            phantom: phantom.to_string(),
            method: method.to_string(),
            cc: cc(x, truth)?,
            psnr: psnr(x, truth)?,
            rie: rie(x, truth)?,
            de: None,
        })
    }

    pub const CSV_HEADER: &'static str = "phantom,method,cc,psnr,rie,de";

    pub fn csv_row(&self) -> String {
        let de = self.de.map(|d| format!("{d:.6}")).unwrap_or_default();
        format!("{},{},{:.6},{},{:.6},{}", self.phantom, self.method, self.cc, self.psnr, self.rie, de)
    }
}

/// CSV table with one row per phantom and method.
pub fn report_csv(rows: &[MetricReport]) -> String {
    let mut out = String::from(MetricReport::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_recon_grid, DeformationState, SensorGeometry};

    #[test]
    fn correlation_cases() {
        let x = [1.0, 3.0, -2.0, 0.5];
        assert!((cc(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((cc(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        let aff: Vec<f64> = x.iter().map(|v| 3.0 * v + 7.0).collect();
        assert!((cc(&x, &aff).unwrap() - 1.0).abs() < 1e-14);
        assert!(cc(&[2.0; 4], &[1.0; 4]).is_err());
        // a hand-computed case: x = (1,2,3), y = (1,3,2) -> 0.5
        assert!((cc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn psnr_cases() {
        let y = [10.0, 0.0, 0.0, 0.0];
        // MSE = 1 = peak^2 / 100
        let x = [9.0, 1.0, -1.0, 1.0];
        assert!((psnr(&x, &y).unwrap().db().unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&y, &y).unwrap(), Psnr::Identical);
        let x2: Vec<f64> = x.iter().zip(&y).map(|(a, b)| b + 2.0 * (a - b)).collect();
        let drop = psnr(&x, &y).unwrap().db().unwrap() - psnr(&x2, &y).unwrap().db().unwrap();
        assert!((drop - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert!((drop - 6.0206).abs() < 1e-4);
        assert_eq!(serde_json::to_string(&Psnr::Identical).unwrap(), "\"inf\"");
    }

    #[test]
    fn rie_cases() {
        let y = [1.0, -2.0, 2.0];
        assert_eq!(rie(&y, &y).unwrap(), 0.0);
        assert_eq!(rie(&[0.0; 3], &y).unwrap(), 1.0);
        assert_eq!(rie(&[2.0, -4.0, 4.0], &y).unwrap(), 1.0);
        assert!(rie(&y, &[0.0; 3]).is_err());
    }

    #[test]
    fn worked_distance_example() {
        let de = distance_error_value(86.7, 90.0).unwrap();
        assert!((de - 0.0367).abs() < 5e-5);
        assert!((de - 3.3 / 90.0).abs() < 1e-15);
        assert_eq!(distance_error_value(90.0, 90.0).unwrap(), 0.0);
    }

    #[test]
    fn two_blobs_with_known_gap() {
        let g = SensorGeometry::default();
        let grid = make_recon_grid(&g, &DeformationState::flat()).unwrap();
        // two blocks of columns [5, 10) and [20, 25): 10 columns of 3 mm apart
        let map: Vec<f64> = (0..grid.len())
            .map(|p| {
                let (r, c) = (p / GRID_COLS, p % GRID_COLS);
                let on = (10..15).contains(&r) && ((5..10).contains(&c) || (20..25).contains(&c));
                if on {
                    1.0
                } else {
                    0.1
                }
            })
            .collect();
        let m = distance_error(&map, &grid, DE_THRESHOLD, 30.0).unwrap();
        assert_eq!(m.components, 2);
        assert!((m.distance - 30.0).abs() < 1e-9);
        assert!(m.error < 1e-12);
        let one: Vec<f64> = map.iter().enumerate().map(|(p, &v)| if p % GRID_COLS >= 15 { 0.0 } else { v }).collect();
        let err = distance_error(&one, &grid, DE_THRESHOLD, 30.0).unwrap_err();
        assert!(err.to_string().contains("found 1"));
    }
}
