use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use eskin::dataset::{self, held_out_phantoms, simulate_phantom, BendModel, FINE_MESH_VERTICES};
use eskin::forward::{normalized_difference, FrameKind, MeasurementFrame, SensingProtocol};
use eskin::geometry::{make_recon_grid, DeformationState};
use eskin::hash::sha256_hex;
use eskin::io::{self, HeatScale};
use eskin::metrics::{MetricReport, Psnr};
use eskin::pointcloud::{process_cloud, CloudSource, DeformationDescriptor, RawCloud};
use eskin::recon::{reconstruct, ReconMethod, TactileMap};
use eskin::vd2t::{self, Batch, CheckpointMeta, Vd2tConfig, Vd2tModel};

use crate::config::RunConfig;
use crate::{CliError, CliResult, CloudArgs, EvalArgs, GenArgs, JacobianArgs, Method, PhantomArgs, ReconArgs, Reference, TrainArgs};

/// Validates the resolved config, logs it and stores it next to the outputs.
fn record(cfg: &RunConfig, command: &str) -> CliResult<()> {
    cfg.validate()?;
    let json = serde_json::to_string_pretty(cfg).map_err(eskin::Error::from)?;
    log::info!("{command} with resolved config:\n{json}");
    mkdir(&cfg.paths.out_dir)?;
    write(&cfg.paths.out_dir.join(format!("{command}.config.json")), json.as_bytes())
}

fn mkdir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| eskin::Error::Io(e).into())
}

fn write(p: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = p.parent() {
        mkdir(dir)?;
    }
    fs::write(p, bytes).map_err(|e| eskin::Error::Io(e).into())
}

fn read(p: &Path) -> CliResult<Vec<u8>> {
    fs::read(p).map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))
}

fn open(p: &Path) -> CliResult<BufReader<fs::File>> {
    fs::File::open(p).map(BufReader::new).map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))
}

pub fn gen(cfg: &mut RunConfig, a: &GenArgs) -> CliResult<()> {
    if let Some(s) = a.seed {
        cfg.dataset.seed = s;
    }
    if let Some(n) = a.random_count {
        cfg.dataset.random_count = n;
    }
    if let Some(s) = a.snr_db {
        cfg.dataset.snr_db = s;
    }
    record(cfg, "gen")?;
    let dir = cfg.paths.dataset();
    let m = dataset::generate(&cfg.geometry, &cfg.dataset, &dir)?;
    println!("dataset: {}", dir.display());
    for (kind, n) in &m.pattern_counts {
        println!("  {:<13} {n} patterns", kind.name());
    }
    println!("  bends         {}", m.shards.len());
    println!("  samples       {}", m.sample_count);
    println!("  skipped       {}", m.skipped.len());
    let manifest = read(&dir.join(dataset::MANIFEST_FILE))?;
    println!("  manifest      sha256 {}", sha256_hex(&manifest));
    Ok(())
}

pub fn train(cfg: &mut RunConfig, a: &TrainArgs) -> CliResult<()> {
    if a.desk {
        let d = Vd2tConfig::desk();
        cfg.model.learning_rate = d.learning_rate;
        cfg.model.batch_size = d.batch_size;
        cfg.model.epochs = d.epochs;
    }
    if let Some(e) = a.epochs {
        cfg.model.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.model.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.model.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.model.batch_size = b;
    }
    record(cfg, "train")?;
    let dir = a.dataset.clone().unwrap_or_else(|| cfg.paths.dataset());
    let manifest = dir.join(dataset::MANIFEST_FILE);
    if !manifest.exists() {
        return Err(CliError::Missing(format!("no dataset manifest at {}", manifest.display())));
    }
    let manifest_hash = sha256_hex(&read(&manifest)?);
    let (_, samples) = dataset::load(&dir)?;
    let (model, report) = vd2t::train(&samples, &cfg.model, |e, t, v| log::info!("epoch {e}: train {t:.5} val {v:.5}"))?;
    let meta = CheckpointMeta { epoch: report.best_epoch, val_loss: report.best_val_loss, dataset: Some(manifest_hash) };
    let mut ckpt = Vec::new();
    model.save(&meta, &mut ckpt)?;
    write(&cfg.paths.checkpoint(), &ckpt)?;
    let mut loss = Vec::new();
    io::write_loss_csv(&report, &mut loss)?;
    write(&cfg.paths.model().join("loss.csv"), &loss)?;
    println!("checkpoint: {}", cfg.paths.checkpoint().display());
    println!("  samples       {} train / {} val", report.train_len, report.val_len);
    println!("  best epoch    {} of {}", report.best_epoch, cfg.model.epochs);
    println!("  val loss      {:.6}", report.best_val_loss);
    println!("  sha256        {}", sha256_hex(&ckpt));
    Ok(())
}

pub fn jacobian(cfg: &mut RunConfig, a: &JacobianArgs) -> CliResult<()> {
    if let Some(v) = a.vertices {
        cfg.solver.jacobian_vertices = v;
    }
    record(cfg, "jacobian")?;
    let bm = BendModel::new(&cfg.geometry, a.bend, cfg.solver.jacobian_vertices)?;
    let j = bm.jacobian(&SensingProtocol::adjacent(cfg.geometry.electrode_count))?;
    let out = a.output.clone().unwrap_or_else(|| cfg.paths.jacobians().join(format!("bend_{:.4}.jac", a.bend)));
    let mut buf = Vec::new();
    io::write_jacobian(&j, &mut buf)?;
    write(&out, &buf)?;
    println!("jacobian: {} ({} x {})", out.display(), j.rows(), j.cols());
    println!("  mesh          {}", j.mesh_id);
    println!("  grid          {}", j.grid_id);
    Ok(())
}

pub fn phantom(cfg: &mut RunConfig, a: &PhantomArgs) -> CliResult<()> {
    record(cfg, "phantom")?;
    let all = held_out_phantoms(&cfg.geometry);
    let chosen: Vec<_> = if a.ids.is_empty() {
        all
    } else {
        let unknown: Vec<&String> = a.ids.iter().filter(|id| !all.iter().any(|p| &p.id == *id)).collect();
        if !unknown.is_empty() {
            return Err(CliError::Config(format!("unknown phantom ids: {unknown:?}")));
        }
        all.into_iter().filter(|p| a.ids.contains(&p.id)).collect()
    };
    let (flat, _) = dataset::flat_reference(&cfg.geometry, FINE_MESH_VERTICES)?;
    let protocol = SensingProtocol::adjacent(cfg.geometry.electrode_count);
    let seed = a.seed.unwrap_or(cfg.dataset.seed);
    for (i, p) in chosen.iter().enumerate() {
        let case = simulate_phantom(&cfg.geometry, p, &flat, cfg.dataset.snr_db, seed.wrapping_add(i as u64))?;
        let dir = cfg.paths.phantoms().join(&p.id);
        let mut frames = Vec::new();
        io::write_frames_csv(&[case.touched, case.reference_flat, case.reference_deformed], &protocol, &mut frames)?;
        write(&dir.join("frames.csv"), &frames)?;
        write(&dir.join("descriptor.csv"), case.descriptor.to_csv().as_bytes())?;
        write(&dir.join("descriptor.json"), case.descriptor.sidecar_json().as_bytes())?;
        let meta = serde_json::to_string_pretty(p).map_err(eskin::Error::from)?;
        write(&dir.join("phantom.json"), meta.as_bytes())?;
        let mut truth = Vec::new();
        io::write_map_csv(&TactileMap { delta_sigma: case.truth, grid_id: case.grid_id }, &mut truth)?;
        write(&cfg.paths.truth().join(format!("{}.csv", p.id)), &truth)?;
        println!("{:<18} bend {:.4}  {} units  -> {}", p.id, p.bend_angle, p.units.len(), dir.display());
    }
    Ok(())
}

fn pick(frames: &[MeasurementFrame], kind: FrameKind, path: &Path) -> CliResult<MeasurementFrame> {
    frames
        .iter()
        .find(|f| f.kind == kind)
        .cloned()
        .ok_or_else(|| CliError::Missing(format!("{} has no {kind:?} frame", path.display())))
}

fn default_name(frames: &Path) -> String {
    let stem = frames.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "frames" {
        if let Some(dir) = frames.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

fn load_descriptor(path: &Path) -> CliResult<DeformationDescriptor> {
    let csv = String::from_utf8_lossy(&read(path)?).into_owned();
    let side = String::from_utf8_lossy(&read(&path.with_extension("json"))?).into_owned();
    Ok(DeformationDescriptor::from_csv(&csv, &side)?)
}

/// Map values scored against the truth: classical maps are scaled to unit
/// peak, network maps are probabilities already.
fn scored(method: &str, map: &TactileMap) -> Vec<f64> {
    if method == "vd2t" {
        map.delta_sigma.clone()
    } else {
        map.peak_normalized()
    }
}

pub fn recon(cfg: &mut RunConfig, a: &ReconArgs) -> CliResult<()> {
    record(cfg, "recon")?;
    if a.method == Method::Vd2t && a.reference == Some(Reference::Deformed) {
        return Err(CliError::Config("VD2T requires the flat reference".into()));
    }
    let protocol = SensingProtocol::adjacent(cfg.geometry.electrode_count);
    let frames = io::read_frames_csv(open(&a.frames)?, &protocol, &a.frames)?;
    let touched = pick(&frames, FrameKind::Touched, &a.frames)?;
    let grid = make_recon_grid(&cfg.geometry, &DeformationState::bent(a.bend))?;
    let map = match a.method {
        Method::Vd2t => {
            let ckpt = a.checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint());
            if !ckpt.exists() {
                return Err(CliError::Missing(format!("no checkpoint at {}", ckpt.display())));
            }
            let descriptor = a
                .descriptor
                .as_ref()
                .ok_or_else(|| CliError::Missing("vd2t needs --descriptor".into()))?;
            let d = load_descriptor(descriptor)?;
            let (mut model, _) = Vd2tModel::load(open(&ckpt)?, &ckpt)?;
            let reference = pick(&frames, FrameKind::ReferenceFlat, &a.frames)?;
            let mut b = Batch::default();
            b.push(&normalized_difference(&touched, &reference)?, &d.heights, &[]);
            TactileMap { delta_sigma: model.predict(&b)?, grid_id: grid.id().to_string() }
        }
        m => {
            let method = match m {
                Method::Tikhonov => ReconMethod::Tikhonov,
                Method::L1 => ReconMethod::L1,
                _ => ReconMethod::Sbl,
            };
            let jpath = a
                .jacobian
                .as_ref()
                .ok_or_else(|| CliError::Missing(format!("{} needs --jacobian", m.name())))?;
            let j = io::read_jacobian(open(jpath)?, jpath)?;
            let kind = match a.reference.unwrap_or(Reference::Deformed) {
                Reference::Flat => FrameKind::ReferenceFlat,
                Reference::Deformed => FrameKind::ReferenceDeformed,
            };
            let reference = pick(&frames, kind, &a.frames)?;
            reconstruct(&touched, &reference, &j, grid.id(), cfg.solver.params(method))?
        }
    };
    let name = a.name.clone().unwrap_or_else(|| default_name(&a.frames));
    let stem = cfg.paths.recon().join(format!("{name}_{}", a.method.name()));
    let mut csv = Vec::new();
    io::write_map_csv(&map, &mut csv)?;
    write(&stem.with_extension("csv"), &csv)?;
    let scale = if a.method == Method::Vd2t { HeatScale::Unit } else { HeatScale::Symmetric };
    write(&stem.with_extension("pgm"), &io::heat_map_pgm(&map.delta_sigma, scale)?)?;
    println!("map: {}", stem.with_extension("csv").display());
    if let Some(t) = &a.truth {
        let truth = io::read_map_csv(open(t)?, t)?;
        let r = MetricReport::compute(&name, a.method.name(), &scored(a.method.name(), &map), &truth.delta_sigma)?;
        println!("  cc {:.4}  psnr {}  rie {:.4}", r.cc, r.psnr, r.rie);
    }
    Ok(())
}

const METHODS: [&str; 4] = ["tikhonov", "l1", "sbl", "vd2t"];

/// `cc`, `psnr` and `rie` names for the metrics where `row` is the best of
/// its phantom's rows, joined by `;`.
fn best_marks(row: &MetricReport, rows: &[&MetricReport]) -> String {
    let psnr = |p: Psnr| p.db().unwrap_or(f64::INFINITY);
    let mut marks = Vec::new();
    if rows.iter().all(|r| r.cc <= row.cc) {
        marks.push("cc");
    }
    if rows.iter().all(|r| psnr(r.psnr) <= psnr(row.psnr)) {
        marks.push("psnr");
    }
    if rows.iter().all(|r| r.rie >= row.rie) {
        marks.push("rie");
    }
    marks.join(";")
}

/// Table with one row per phantom and available method, plus a column
/// marking the best value per phantom.
pub fn eval_table(results: &Path, truth: &Path) -> CliResult<String> {
    let list = |dir: &Path| -> CliResult<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::Missing(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        v.sort();
        Ok(v)
    };
    let mut truths = BTreeMap::new();
    for p in list(truth)? {
        let id = p.file_stem().unwrap().to_string_lossy().into_owned();
        truths.insert(id, io::read_map_csv(open(&p)?, &p)?);
    }
    let mut maps = BTreeMap::new();
    let mut unmatched = Vec::new();
    for p in list(results)? {
        let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
        let split = METHODS.iter().find_map(|m| stem.strip_suffix(&format!("_{m}")).map(|id| (id.to_string(), *m)));
        match split {
            Some((id, m)) if truths.contains_key(&id) => {
                maps.insert((id, m), io::read_map_csv(open(&p)?, &p)?);
            }
            _ => unmatched.push(stem),
        }
    }
    if !unmatched.is_empty() {
        return Err(CliError::Missing(format!("results without matching truth: {}", unmatched.join(", "))));
    }
    let mut rows = Vec::new();
    for (id, truth) in &truths {
        for m in METHODS {
            match maps.get(&(id.clone(), m)) {
                Some(map) => rows.push(MetricReport::compute(id, m, &scored(m, map), &truth.delta_sigma)?),
                None => log::warn!("no {m} result for {id}; row omitted"),
            }
        }
    }
    let mut out = format!("{},best\n", MetricReport::CSV_HEADER);
    for r in &rows {
        let group: Vec<&MetricReport> = rows.iter().filter(|o| o.phantom == r.phantom).collect();
        out.push_str(&format!("{},{}\n", r.csv_row(), best_marks(r, &group)));
    }
    Ok(out)
}

pub fn eval(cfg: &mut RunConfig, a: &EvalArgs) -> CliResult<()> {
    record(cfg, "eval")?;
    let results = a.results.clone().unwrap_or_else(|| cfg.paths.recon());
    let truth = a.truth.clone().unwrap_or_else(|| cfg.paths.truth());
    let table = eval_table(&results, &truth)?;
    let out = a.output.clone().unwrap_or_else(|| cfg.paths.out_dir.join("eval.csv"));
    write(&out, table.as_bytes())?;
    print!("{table}");
    println!("report: {} (sha256 {})", out.display(), sha256_hex(table.as_bytes()));
    Ok(())
}

pub fn cloud_process(cfg: &mut RunConfig, a: &CloudArgs) -> CliResult<()> {
    record(cfg, "cloud-process")?;
    let cloud = RawCloud::read_xyz(open(&a.input)?, CloudSource::External)?;
    let d = process_cloud(&cloud, &cfg.cloud)?;
    let prefix = a.output.clone().unwrap_or_else(|| cfg.paths.out_dir.join("descriptor"));
    let csv = PathBuf::from(format!("{}.csv", prefix.display()));
    write(&csv, d.to_csv().as_bytes())?;
    write(&PathBuf::from(format!("{}.json", prefix.display())), d.sidecar_json().as_bytes())?;
    println!("descriptor: {} ({} of {} samples extrapolated)", csv.display(), d.extrapolated, d.heights.len());
    Ok(())
}
