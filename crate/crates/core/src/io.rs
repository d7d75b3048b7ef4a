//! File formats shared by the command-line tools.
//!
//! | artifact | format |
//! |---|---|
//! | measurement frames | CSV, one row per frame: `kind` then one column per retained measurement |
//! | Jacobian | binary: magic `ESKJAC01`, `u64` LE header length, JSON header, row-major LE `f64` matrix |
//! | tactile map | CSV: `# grid <id>` line, `index,value` header, one row per recon point |
//! | heat map | binary PGM (`P5`), one pixel per recon point, top row = largest `v` |
//! | loss curves | CSV `epoch,train_loss,val_loss` |
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! text format reads back bit-exactly.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{FrameKind, Jacobian, MeasurementFrame, SensingProtocol, SensitivityKind};
use crate::geometry::{GRID_COLS, GRID_ROWS};
use crate::recon::TactileMap;
use crate::vd2t::TrainReport;

fn kind_name(k: FrameKind) -> &'static str {
    match k {
        FrameKind::ReferenceFlat => "reference_flat",
        FrameKind::ReferenceDeformed => "reference_deformed",
        FrameKind::Touched => "touched",
    }
}

fn parse_kind(s: &str) -> Option<FrameKind> {
    Some(match s {
        "reference_flat" => FrameKind::ReferenceFlat,
        "reference_deformed" => FrameKind::ReferenceDeformed,
        "touched" => FrameKind::Touched,
        _ => return None,
    })
}

pub fn write_frames_csv<W: Write>(frames: &[MeasurementFrame], protocol: &SensingProtocol, mut w: W) -> Result<()> {
    writeln!(w, "kind,{}", protocol.labels().join(","))?;
    for f in frames {
        f.validate(protocol)?;
        let v: Vec<String> = f.voltages.iter().map(f64::to_string).collect();
        writeln!(w, "{},{}", kind_name(f.kind), v.join(","))?;
    }
    Ok(())
}

pub fn read_frames_csv<R: BufRead>(r: R, protocol: &SensingProtocol, path: &Path) -> Result<Vec<MeasurementFrame>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty frame file"))??;
    let expected = format!("kind,{}", protocol.labels().join(","));
    if header.trim() != expected {
        return Err(Error::format(path, "frame header does not match the sensing protocol"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::format(path, format!("row {}: {m}", i + 1));
        let mut cells = line.trim().split(',');
        let kind = parse_kind(cells.next().unwrap_or("")).ok_or_else(|| bad("unknown frame kind"))?;
        let voltages = cells.map(|c| c.parse::<f64>().map_err(|_| bad("bad number"))).collect::<Result<Vec<_>>>()?;
        let f = MeasurementFrame { voltages, n_electrodes: protocol.n_electrodes, kind };
        f.validate(protocol).map_err(|e| bad(&e.to_string()))?;
        out.push(f);
    }
    Ok(out)
}

pub const JACOBIAN_MAGIC: &[u8; 8] = b"ESKJAC01";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JacobianHeader {
    rows: usize,
    cols: usize,
    kind: SensitivityKind,
    mesh_id: String,
    grid_id: String,
    reference: Vec<f64>,
    sigma0: Vec<f64>,
    matrix_sha256: String,
}

pub fn write_jacobian<W: Write>(j: &Jacobian, mut w: W) -> Result<()> {
    let mut body = Vec::with_capacity(8 * j.rows() * j.cols());
    for r in 0..j.rows() {
        for c in 0..j.cols() {
            body.extend_from_slice(&j.matrix[(r, c)].to_le_bytes());
        }
    }
    let header = JacobianHeader {
        rows: j.rows(),
        cols: j.cols(),
        kind: j.kind,
        mesh_id: j.mesh_id.clone(),
        grid_id: j.grid_id.clone(),
        reference: j.reference.clone(),
        sigma0: j.sigma0.clone(),
        matrix_sha256: crate::hash::sha256_hex(&body),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(JACOBIAN_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&body)?;
    Ok(())
}

pub fn read_jacobian<R: Read>(mut r: R, path: &Path) -> Result<Jacobian> {
    let bad = |m: &str| Error::format(path, m);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated Jacobian file"))?;
    if &magic != JACOBIAN_MAGIC {
        return Err(bad("not a Jacobian file"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated Jacobian file"))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 26 {
        return Err(bad("Jacobian header too large"));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated Jacobian file"))?;
    let h: JacobianHeader = serde_json::from_slice(&json).map_err(|e| bad(&e.to_string()))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != 8 * h.rows * h.cols {
        return Err(bad("Jacobian body has the wrong length"));
    }
    if crate::hash::sha256_hex(&body) != h.matrix_sha256 {
        return Err(bad("Jacobian checksum mismatch"));
    }
    if h.reference.len() != h.rows || h.sigma0.len() != h.cols {
        return Err(bad("Jacobian linearization point has the wrong shape"));
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Jacobian {
        matrix: DMatrix::from_row_slice(h.rows, h.cols, &vals),
        kind: h.kind,
        mesh_id: h.mesh_id,
        grid_id: h.grid_id,
        reference: h.reference,
        sigma0: h.sigma0,
    })
}

pub fn write_map_csv<W: Write>(map: &TactileMap, mut w: W) -> Result<()> {
    writeln!(w, "# grid {}", map.grid_id)?;
    writeln!(w, "index,value")?;
    for (i, v) in map.delta_sigma.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    Ok(())
}

pub fn read_map_csv<R: BufRead>(r: R, path: &Path) -> Result<TactileMap> {
    let mut grid_id = None;
    let mut values = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if let Some(id) = line.strip_prefix("# grid ") {
            grid_id = Some(id.trim().to_string());
            continue;
        }
        if line.is_empty() || line == "index,value" {
            continue;
        }
        let bad = || Error::format(path, format!("line {}: expected `index,value`", i + 1));
        let (idx, v) = line.split_once(',').ok_or_else(bad)?;
        if idx.parse::<usize>().map_err(|_| bad())? != values.len() {
            return Err(Error::format(path, format!("line {}: indices must be consecutive", i + 1)));
        }
        values.push(v.parse::<f64>().map_err(|_| bad())?);
    }
    let grid_id = grid_id.ok_or_else(|| Error::format(path, "missing `# grid` line"))?;
    Ok(TactileMap { delta_sigma: values, grid_id })
}

/// How map values become gray levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatScale {
    /// Probabilities: 0 is black, 1 is white, values clamped.
    Unit,
    /// Signed maps: `[-m, m]` spans black to white with `m` the map's
    /// largest magnitude, so zero is mid gray.
    Symmetric,
}

/// Renders a recon-grid map as a `50 x 27` binary PGM.
pub fn heat_map_pgm(values: &[f64], scale: HeatScale) -> Result<Vec<u8>> {
    if values.len() != GRID_ROWS * GRID_COLS {
        return Err(Error::Shape { what: "heat map", expected: GRID_ROWS * GRID_COLS, found: values.len() });
    }
    let level = |v: f64| -> u8 {
        let t = match scale {
            HeatScale::Unit => v,
            HeatScale::Symmetric => {
                let m = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                if m == 0.0 {
                    0.5
                } else {
                    0.5 + 0.5 * v / m
                }
            }
        };
        (t.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    let mut out = format!("P5\n{GRID_COLS} {GRID_ROWS}\n255\n").into_bytes();
    for r in (0..GRID_ROWS).rev() {
        out.extend(values[r * GRID_COLS..(r + 1) * GRID_COLS].iter().map(|&v| level(v)));
    }
    Ok(out)
}

pub fn write_loss_csv<W: Write>(report: &TrainReport, mut w: W) -> Result<()> {
    writeln!(w, "epoch,train_loss,val_loss")?;
    for (i, (t, v)) in report.train_loss.iter().zip(&report.val_loss).enumerate() {
        writeln!(w, "{},{t},{v}", i + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn protocol() -> SensingProtocol {
        SensingProtocol::adjacent(16)
    }

    #[test]
    fn frames_round_trip() {
        let p = protocol();
        let frames: Vec<MeasurementFrame> = (0..3)
            .map(|k| MeasurementFrame {
                voltages: (0..104).map(|i| (i as f64 * 0.37 + k as f64).sin() / 3.0).collect(),
                n_electrodes: 16,
                kind: [FrameKind::Touched, FrameKind::ReferenceFlat, FrameKind::ReferenceDeformed][k],
            })
            .collect();
        let mut buf = Vec::new();
        write_frames_csv(&frames, &p, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 105);
        assert_eq!(read_frames_csv(buf.as_slice(), &p, Path::new("f")).unwrap(), frames);
        let short = text.replacen(",", ";", 2);
        assert!(read_frames_csv(short.as_bytes(), &p, Path::new("f")).is_err());
    }

    #[test]
    fn jacobian_round_trip_is_bit_exact() {
        let j = Jacobian {
            matrix: DMatrix::from_fn(4, 3, |r, c| (r as f64 + 0.1).powf(c as f64 + 0.3) * 1e-7),
            kind: SensitivityKind::Raw,
            mesh_id: "m".into(),
            grid_id: "g".into(),
            reference: vec![1.0 / 3.0; 4],
            sigma0: vec![1.0, 2.0, f64::MIN_POSITIVE],
        };
        let mut buf = Vec::new();
        write_jacobian(&j, &mut buf).unwrap();
        let back = read_jacobian(buf.as_slice(), Path::new("j")).unwrap();
        assert_eq!(back, j);
        let n = buf.len();
        buf[n - 3] ^= 0x10;
        assert!(read_jacobian(buf.as_slice(), Path::new("j")).is_err());
        assert!(read_jacobian(&buf[..n - 8], Path::new("j")).is_err());
    }

    #[test]
    fn map_round_trip() {
        let m = TactileMap { delta_sigma: (0..1350).map(|i| (i as f64).sqrt() - 7.0).collect(), grid_id: "abc".into() };
        let mut buf = Vec::new();
        write_map_csv(&m, &mut buf).unwrap();
        assert_eq!(read_map_csv(buf.as_slice(), Path::new("m")).unwrap(), m);
        assert!(read_map_csv(&b"index,value\n0,1\n"[..], Path::new("m")).is_err());
    }

    #[test]
    fn pgm_layout_and_scales() {
        let mut v = vec![0.0; 1350];
        v[0] = 1.0; // first row is drawn last
        v[1349] = -2.0;
        let img = heat_map_pgm(&v, HeatScale::Unit).unwrap();
        let header = b"P5\n50 27\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px = &img[header.len()..];
        assert_eq!(px.len(), 50 * 27);
        assert_eq!(px[26 * 50], 255);
        assert_eq!(px[49], 0);
        let sym = heat_map_pgm(&v, HeatScale::Symmetric).unwrap();
        let px = &sym[header.len()..];
        assert_eq!((px[26 * 50], px[49], px[1]), (191, 0, 128));
        assert!(heat_map_pgm(&v[1..], HeatScale::Unit).is_err());
    }

    #[test]
    fn loss_csv_rows() {
        let r = TrainReport { train_loss: vec![0.5, 0.25], val_loss: vec![0.4, 0.3], ..TrainReport::default() };
        let mut buf = Vec::new();
        write_loss_csv(&r, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,val_loss\n1,0.5,0.4\n2,0.25,0.3\n");
    }
}
