//! Simulated training data: touch patterns on the 9 x 14 unit grid, a sweep
//! of bend states, forward solves on the fine mesh and noisy normalized
//! voltage differences against one flat untouched reference.
//!
//! Shard layout (all integers and floats little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic | 8 bytes `ESKSHRD1` |
//! | header length | u32 |
//! | header | UTF-8 JSON, [`ShardHeader`] |
//! | descriptor | `descriptor_len` x f64 |
//! | per sample: pattern id length | u32 |
//! | per sample: pattern id | UTF-8 |
//! | per sample: noise seed | u64 |
//! | per sample: dv | `dv_len` x f64 |
//! | per sample: target | `target_len` x u8 (0 or 1) |

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{
    jacobian_from_model, normalized_difference, ConductivityField, Jacobian, ForwardModel, FrameKind, MeasurementFrame, SensingProtocol,
    BACKGROUND_SIGMA, DEFAULT_CURRENT_MA, TOUCH_SIGMA,
};
use crate::geometry::{make_mesh, make_recon_grid, DeformationState, ReconGrid, SensorGeometry, UNIT_COLS, UNIT_ROWS};
use crate::hash::sha256_hex;
use crate::pointcloud::{analytic_descriptor, DeformationDescriptor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const SHARD_MAGIC: &[u8; 8] = b"ESKSHRD1";
pub const DEFAULT_SNR_DB: f64 = 50.0;
/// Vertex target of the fine forward mesh.
pub const FINE_MESH_VERTICES: usize = 8671;
/// Mesh size for reconstruction Jacobians, coarser than the data mesh so
/// that classical methods do not invert their own forward model.
pub const JACOBIAN_MESH_VERTICES: usize = 4000;
pub const UNIT_COUNT: usize = UNIT_ROWS * UNIT_COLS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    SingleUnit,
    Square,
    RandomUnits,
}

impl PatternKind {
    pub const ALL: [PatternKind; 3] = [PatternKind::SingleUnit, PatternKind::Square, PatternKind::RandomUnits];

    pub fn name(self) -> &'static str {
        match self {
            PatternKind::SingleUnit => "single_unit",
            PatternKind::Square => "square",
            PatternKind::RandomUnits => "random_units",
        }
    }
}

/// A set of touched units, `unit = row * 14 + col`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TouchPattern {
    pub kind: PatternKind,
    /// Sorted, distinct.
    pub units: Vec<usize>,
}

impl TouchPattern {
    pub fn new(kind: PatternKind, mut units: Vec<usize>) -> Result<Self> {
        units.sort_unstable();
        units.dedup();
        let p = TouchPattern { kind, units };
        p.validate()?;
        Ok(p)
    }

    /// The `s x s` block with top-left unit `(row, col)`.
    pub fn square(row: usize, col: usize, s: usize) -> Result<Self> {
        if row + s > UNIT_ROWS || col + s > UNIT_COLS {
            return Err(Error::Param(format!("{s}x{s} block at ({row}, {col}) leaves the unit grid")));
        }
        let units = (row..row + s).flat_map(|r| (col..col + s).map(move |c| r * UNIT_COLS + c)).collect();
        TouchPattern::new(PatternKind::Square, units)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&u) = self.units.iter().find(|&&u| u >= UNIT_COUNT) {
            return Err(Error::Param(format!("unit {u} outside 0..{UNIT_COUNT}")));
        }
        let n = self.units.len();
        let ok = match self.kind {
            PatternKind::SingleUnit => n == 1,
            PatternKind::RandomUnits => (2..=4).contains(&n),
            PatternKind::Square => {
                let s = (n as f64).sqrt().round() as usize;
                let (r0, c0) = (self.units[0] / UNIT_COLS, self.units[0] % UNIT_COLS);
                (2..=9).contains(&s)
                    && s * s == n
                    && self.units.iter().all(|&u| {
                        let (r, c) = (u / UNIT_COLS, u % UNIT_COLS);
                        r >= r0 && r < r0 + s && c >= c0 && c < c0 + s
                    })
            }
        };
        if !ok {
            return Err(Error::Param(format!("{:?} is not a valid {} pattern", self.units, self.kind.name())));
        }
        Ok(())
    }

    /// Stable identifier, e.g. `square:2x2@17` or `random_units:3-40-41`.
    pub fn id(&self) -> String {
        match self.kind {
            PatternKind::Square => {
                let s = (self.units.len() as f64).sqrt().round() as usize;
                format!("square:{s}x{s}@{}", self.units[0])
            }
            _ => {
                let u: Vec<String> = self.units.iter().map(usize::to_string).collect();
                format!("{}:{}", self.kind.name(), u.join("-"))
            }
        }
    }
}

/// All patterns of a kind. `count_for_random` and `seed` only affect
/// [`PatternKind::RandomUnits`], which draws that many distinct sets of 2 to
/// 4 units.
pub fn enumerate_patterns(kind: PatternKind, count_for_random: usize, seed: u64) -> Vec<TouchPattern> {
    match kind {
        PatternKind::SingleUnit => {
            (0..UNIT_COUNT).map(|u| TouchPattern { kind, units: vec![u] }).collect()
        }
        PatternKind::Square => {
            let mut out = Vec::new();
            for s in 2..=UNIT_ROWS {
                for r in 0..=UNIT_ROWS - s {
                    for c in 0..=UNIT_COLS - s {
                        out.push(TouchPattern::square(r, c, s).expect("placement fits"));
                    }
                }
            }
            out
        }
        PatternKind::RandomUnits => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seen = BTreeSet::new();
            let mut out = Vec::with_capacity(count_for_random);
            while out.len() < count_for_random {
                let n = rng.random_range(2..=4);
                let mut units = sample_indices(&mut rng, UNIT_COUNT, n).into_vec();
                units.sort_unstable();
                if seen.insert(units.clone()) {
                    out.push(TouchPattern { kind, units });
                }
            }
            out
        }
    }
}

/// Touch phantom on `grid`: 50 S/m on points of touched units, 1 S/m
/// elsewhere, plus the binary occupancy target.
pub fn pattern_to_field(units: &[usize], grid: &Arc<ReconGrid>) -> (ConductivityField, Vec<f64>) {
    let touched: BTreeSet<usize> = units.iter().copied().collect();
    let target: Vec<f64> =
        grid.unit_of_point.iter().map(|u| if touched.contains(u) { 1.0 } else { 0.0 }).collect();
    let values = target.iter().map(|&t| if t > 0.0 { TOUCH_SIGMA } else { BACKGROUND_SIGMA }).collect();
    (ConductivityField { values, grid: grid.clone() }, target)
}

/// Adds white Gaussian noise at `snr_db` relative to the frame's mean power.
pub fn add_noise(frame: &MeasurementFrame, snr_db: f64, seed: u64) -> Result<MeasurementFrame> {
    if !snr_db.is_finite() {
        return Err(Error::Param(format!("SNR must be finite, got {snr_db}")));
    }
    let n = frame.voltages.len().max(1) as f64;
    let power = frame.voltages.iter().map(|v| v * v).sum::<f64>() / n;
    let sd = (power * 10f64.powf(-snr_db / 10.0)).sqrt();
    let mut out = frame.clone();
    if sd == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sd).map_err(|e| Error::Param(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut out.voltages {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Seed of sample `index` in shard `shard`: a keystream word of the master
/// seed's generator at a position fixed by the pair, so generation order
/// does not matter.
pub fn sample_seed(master: u64, shard: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(shard as u64 + 1);
    rng.set_word_pos(2 * index as u128);
    rng.random()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Bend angles in radians.
    pub bends: Vec<f64>,
    pub kinds: Vec<PatternKind>,
    pub random_count: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub mesh_vertices: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            bends: default_bends(),
            kinds: PatternKind::ALL.to_vec(),
            random_count: 100,
            snr_db: DEFAULT_SNR_DB,
            seed: 2024,
            mesh_vertices: FINE_MESH_VERTICES,
        }
    }
}

pub fn default_bends() -> Vec<f64> {
    vec![0.0, PI / 6.0, PI / 3.0, PI / 2.0, 2.0 * PI / 3.0]
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bends.is_empty() || self.kinds.is_empty() {
            return Err(Error::Param("dataset needs at least one bend and one pattern kind".into()));
        }
        for &b in &self.bends {
            DeformationState::bent(b).validate()?;
            if b > PI {
                return Err(Error::Param(format!("bend {b} exceeds a half circle; its scan is not a height field")));
            }
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Param("snr_db must be finite".into()));
        }
        Ok(())
    }

    /// The patterns applied at every bend, in generation order.
    pub fn patterns(&self) -> Vec<TouchPattern> {
        let mut kinds = self.kinds.clone();
        kinds.sort();
        kinds.dedup();
        kinds.iter().flat_map(|&k| enumerate_patterns(k, self.random_count, self.seed)).collect()
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub dv: Vec<f64>,
    /// Deformation descriptor heights, shared by the samples of one bend.
    pub descriptor: Arc<[f64]>,
    pub target: Vec<f64>,
    pub bend_angle: f64,
    pub pattern_id: String,
    pub noise_seed: u64,
    /// Reference the voltage difference was taken against.
    pub reference: FrameKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardHeader {
    pub version: u32,
    pub bend_angle: f64,
    pub samples: usize,
    pub dv_len: usize,
    pub descriptor_len: usize,
    pub target_len: usize,
    pub reference: FrameKind,
    pub mesh_id: String,
    pub grid_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardEntry {
    pub file: String,
    pub bend_angle: f64,
    pub samples: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkippedSample {
    pub bend_angle: f64,
    pub pattern_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub pattern_counts: Vec<(PatternKind, usize)>,
    pub sample_count: usize,
    pub reference_mesh_id: String,
    pub shards: Vec<ShardEntry>,
    pub skipped: Vec<SkippedSample>,
}

/// Solver setup for one bend state.
pub struct BendModel {
    pub deformation: DeformationState,
    pub grid: Arc<ReconGrid>,
    pub model: ForwardModel,
}

impl BendModel {
    pub fn new(g: &SensorGeometry, bend_angle: f64, vertices: usize) -> Result<Self> {
        let deformation = DeformationState::bent(bend_angle);
        let mesh = make_mesh(g, &deformation, vertices)?;
        let grid = Arc::new(make_recon_grid(g, &deformation)?);
        let model = ForwardModel::new(&mesh, &grid)?;
        Ok(BendModel { deformation, grid, model })
    }

    /// Noiseless frame of a touch pattern (empty = untouched).
    pub fn frame(&self, units: &[usize], protocol: &SensingProtocol) -> Result<MeasurementFrame> {
        let (sigma, _) = pattern_to_field(units, &self.grid);
        Ok(self.model.solve(&sigma, protocol, DEFAULT_CURRENT_MA)?.frame)
    }

    /// Normalized Jacobian at the uniform background conductivity.
    pub fn jacobian(&self, protocol: &SensingProtocol) -> Result<Jacobian> {
        let sigma0 = ConductivityField::uniform(self.grid.clone(), BACKGROUND_SIGMA);
        jacobian_from_model(&self.model, &sigma0, protocol)?.normalized()
    }
}

/// Flat untouched reference frame on a mesh of `vertices` vertices.
pub fn flat_reference(g: &SensorGeometry, vertices: usize) -> Result<(MeasurementFrame, String)> {
    let flat = BendModel::new(g, 0.0, vertices)?;
    let frame = flat.frame(&[], &SensingProtocol::adjacent(g.electrode_count))?;
    Ok((frame.with_kind(FrameKind::ReferenceFlat), flat.model.mesh_id().to_string()))
}

/// Samples of one bend state. Failed solves are returned separately.
pub fn generate_bend(
    g: &SensorGeometry,
    cfg: &DatasetConfig,
    shard: usize,
    patterns: &[TouchPattern],
    reference: &MeasurementFrame,
) -> Result<(BendModel, Vec<Sample>, Vec<SkippedSample>)> {
    let bend = cfg.bends[shard];
    let bm = BendModel::new(g, bend, cfg.mesh_vertices)?;
    let protocol = SensingProtocol::adjacent(g.electrode_count);
    let descriptor: Arc<[f64]> = analytic_descriptor(g, &bm.deformation)?.heights.into();
    let results: Vec<std::result::Result<Sample, SkippedSample>> = patterns
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let noise_seed = sample_seed(cfg.seed, shard, i);
            let (sigma, target) = pattern_to_field(&p.units, &bm.grid);
            let run = || -> Result<Vec<f64>> {
                let frame = bm.model.solve(&sigma, &protocol, DEFAULT_CURRENT_MA)?.frame;
                let noisy = add_noise(&frame, cfg.snr_db, noise_seed)?;
                normalized_difference(&noisy, reference)
            };
            match run() {
                Ok(dv) => Ok(Sample {
                    dv,
                    descriptor: descriptor.clone(),
                    target,
                    bend_angle: bend,
                    pattern_id: p.id(),
                    noise_seed,
                    reference: reference.kind,
                }),
                Err(e) => Err(SkippedSample { bend_angle: bend, pattern_id: p.id(), reason: e.to_string() }),
            }
        })
        .collect();
    let mut samples = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(s) => {
                log::warn!("skipping {} at bend {}: {}", s.pattern_id, s.bend_angle, s.reason);
                skipped.push(s);
            }
        }
    }
    Ok((bm, samples, skipped))
}

/// Generates the dataset into `out` and writes the manifest last.
pub fn generate(g: &SensorGeometry, cfg: &DatasetConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let patterns = cfg.patterns();
    let (reference, reference_mesh_id) = flat_reference(g, cfg.mesh_vertices)?;
    let mut shards = Vec::new();
    let mut skipped = Vec::new();
    let mut sample_count = 0;
    for shard in 0..cfg.bends.len() {
        let (bm, samples, mut skip) = generate_bend(g, cfg, shard, &patterns, &reference)?;
        let header = ShardHeader {
            version: MANIFEST_VERSION,
            bend_angle: cfg.bends[shard],
            samples: samples.len(),
            dv_len: reference.voltages.len(),
            descriptor_len: crate::pointcloud::DESCRIPTOR_LEN,
            target_len: bm.grid.len(),
            reference: reference.kind,
            mesh_id: bm.model.mesh_id().to_string(),
            grid_id: bm.grid.id().to_string(),
        };
        let bytes = encode_shard(&header, &samples)?;
        let file = format!("shard_{shard:02}.bin");
        fs::write(out.join(&file), &bytes)?;
        shards.push(ShardEntry { file, bend_angle: cfg.bends[shard], samples: samples.len(), sha256: sha256_hex(&bytes) });
        sample_count += samples.len();
        skipped.append(&mut skip);
    }
    let mut kinds = cfg.kinds.clone();
    kinds.sort();
    kinds.dedup();
    let pattern_counts = kinds
        .iter()
        .map(|&k| (k, patterns.iter().filter(|p| p.kind == k).count()))
        .collect();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        pattern_counts,
        sample_count,
        reference_mesh_id,
        shards,
        skipped,
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn encode_shard(header: &ShardHeader, samples: &[Sample]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SHARD_MAGIC);
    let json = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let descriptor: &[f64] = samples.first().map(|s| &s.descriptor[..]).unwrap_or(&[]);
    let zeros = vec![0.0; header.descriptor_len];
    let descriptor = if descriptor.is_empty() { &zeros[..] } else { descriptor };
    for x in descriptor {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for s in samples {
        if s.dv.len() != header.dv_len || s.target.len() != header.target_len {
            return Err(Error::Shape { what: "sample", expected: header.dv_len, found: s.dv.len() });
        }
        buf.extend_from_slice(&(s.pattern_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.pattern_id.as_bytes());
        buf.extend_from_slice(&s.noise_seed.to_le_bytes());
        for x in &s.dv {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.extend(s.target.iter().map(|&t| u8::from(t > 0.5)));
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode_shard(bytes: &[u8], path: &Path) -> Result<(ShardHeader, Vec<Sample>)> {
    let mut c = Cursor { bytes, at: 0, path };
    if c.take(8)? != SHARD_MAGIC {
        return Err(Error::format(path, "not a dataset shard"));
    }
    let len = c.u32()? as usize;
    let header: ShardHeader = serde_json::from_slice(c.take(len)?)
        .map_err(|e| Error::format(path, format!("bad shard header: {e}")))?;
    let descriptor: Arc<[f64]> = c.f64s(header.descriptor_len)?.into();
    let mut samples = Vec::with_capacity(header.samples);
    for _ in 0..header.samples {
        let n = c.u32()? as usize;
        let pattern_id = String::from_utf8(c.take(n)?.to_vec()).map_err(|e| Error::format(path, e.to_string()))?;
        let noise_seed = c.u64()?;
        let dv = c.f64s(header.dv_len)?;
        let target = c.take(header.target_len)?.iter().map(|&b| f64::from(b)).collect();
        samples.push(Sample {
            dv,
            descriptor: descriptor.clone(),
            target,
            bend_angle: header.bend_angle,
            pattern_id,
            noise_seed,
            reference: header.reference,
        });
    }
    if c.at != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - c.at)));
    }
    Ok((header, samples))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Loads every shard listed in the manifest, checking digests and counts.
pub fn load(dir: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = read_manifest(dir)?;
    let mut all = Vec::with_capacity(manifest.sample_count);
    for entry in &manifest.shards {
        let path: PathBuf = dir.join(&entry.file);
        let mut bytes = Vec::new();
        fs::File::open(&path)?.read_to_end(&mut bytes)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::format(&path, "digest does not match the manifest"));
        }
        let (header, mut samples) = decode_shard(&bytes, &path)?;
        if header.samples != entry.samples {
            return Err(Error::format(&path, format!("{} samples, manifest says {}", header.samples, entry.samples)));
        }
        all.append(&mut samples);
    }
    if all.len() != manifest.sample_count {
        return Err(Error::format(dir.join(MANIFEST_FILE), "sample count does not match the shards"));
    }
    Ok((manifest, all))
}

/// Writes the samples' voltage differences as CSV, one row per sample.
pub fn write_dv_csv<W: Write>(samples: &[Sample], labels: &[String], mut w: W) -> Result<()> {
    writeln!(w, "pattern,bend_angle,{}", labels.join(","))?;
    for s in samples {
        let dv: Vec<String> = s.dv.iter().map(|x| format!("{x:e}")).collect();
        writeln!(w, "{},{},{}", s.pattern_id, s.bend_angle, dv.join(","))?;
    }
    Ok(())
}

/// A held-out evaluation phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub id: String,
    pub units: Vec<usize>,
    pub bend_angle: f64,
    /// Edge-to-edge gap in mm between the two touched regions, if there are two.
    pub gap_mm: Option<f64>,
}

fn block(r0: usize, r1: usize, c0: usize, c1: usize) -> Vec<usize> {
    (r0..=r1).flat_map(|r| (c0..=c1).map(move |c| r * UNIT_COLS + c)).collect()
}

fn points(cells: &[(usize, usize)]) -> Vec<usize> {
    cells.iter().map(|&(r, c)| r * UNIT_COLS + c).collect()
}

/// Eight evaluation phantoms, from flat to strongly bent. Their shapes (five
/// or six separate points, bars, L shapes, block pairs) are not produced by
/// any [`PatternKind`]. The two-region phantoms carry the edge gap between
/// their regions' bounding boxes.
pub fn held_out_phantoms(g: &SensorGeometry) -> Vec<Phantom> {
    let (uw, uh) = (g.width / UNIT_COLS as f64, g.height / UNIT_ROWS as f64);
    let mut ell6 = block(2, 6, 3, 3);
    ell6.push(6 * UNIT_COLS + 4);
    let mut ell5 = block(3, 6, 9, 9);
    ell5.push(6 * UNIT_COLS + 10);
    let mut pair = block(2, 3, 2, 2);
    pair.extend(block(5, 6, 8, 10));
    let mut bar_square = block(2, 2, 2, 4);
    bar_square.extend(block(5, 6, 9, 10));
    let list = [
        ("p1_five_points", points(&[(1, 2), (1, 11), (4, 7), (7, 2), (7, 11)]), 0.0, None),
        ("p2_bar_1x6", block(4, 4, 4, 9), PI / 6.0, None),
        ("p3_ell_6", ell6, PI / 3.0, None),
        ("p4_five_points", points(&[(2, 3), (2, 10), (5, 6), (7, 1), (7, 12)]), PI / 2.0, None),
        ("p5_two_rects", pair, 2.0 * PI / 3.0, Some(((8.0 - 3.0) * uw).hypot((5.0 - 4.0) * uh))),
        ("p6_ell_5", ell5, PI / 3.0, None),
        ("p7_bar_and_square", bar_square, PI / 2.0, Some(((9.0 - 5.0) * uw).hypot((5.0 - 3.0) * uh))),
        ("p8_six_points", points(&[(1, 1), (1, 6), (1, 12), (7, 1), (7, 6), (7, 12)]), 2.0 * PI / 3.0, None),
    ];
    list.into_iter()
        .map(|(id, mut units, bend_angle, gap_mm)| {
            units.sort_unstable();
            units.dedup();
            Phantom { id: id.to_string(), units, bend_angle, gap_mm }
        })
        .collect()
}

/// Everything needed to reconstruct one phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub touched: MeasurementFrame,
    pub reference_flat: MeasurementFrame,
    pub reference_deformed: MeasurementFrame,
    pub descriptor: DeformationDescriptor,
    /// Binary occupancy of the recon points.
    pub truth: Vec<f64>,
    /// Id of the deformed recon grid.
    pub grid_id: String,
}

/// Simulates `p` on the fine mesh with noise on the touched frame only.
/// `flat` is the flat untouched reference from [`flat_reference`].
pub fn simulate_phantom(
    g: &SensorGeometry,
    p: &Phantom,
    flat: &MeasurementFrame,
    snr_db: f64,
    seed: u64,
) -> Result<PhantomCase> {
    let bm = BendModel::new(g, p.bend_angle, FINE_MESH_VERTICES)?;
    let protocol = SensingProtocol::adjacent(g.electrode_count);
    let touched = add_noise(&bm.frame(&p.units, &protocol)?, snr_db, seed)?.with_kind(FrameKind::Touched);
    let reference_deformed = bm.frame(&[], &protocol)?.with_kind(FrameKind::ReferenceDeformed);
    let (_, truth) = pattern_to_field(&p.units, &bm.grid);
    Ok(PhantomCase {
        touched,
        reference_flat: flat.clone().with_kind(FrameKind::ReferenceFlat),
        reference_deformed,
        descriptor: analytic_descriptor(g, &bm.deformation)?,
        truth,
        grid_id: bm.grid.id().to_string(),
    })
}
