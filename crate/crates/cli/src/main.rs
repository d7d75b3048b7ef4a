//! `eskin`: dataset generation, training, reconstruction and evaluation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing or unreadable
//! input, 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{RunConfig, OUT_DIR_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error(transparent)]
    Core(#[from] eskin::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use eskin::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Core(e) => match e {
                E::Param(_) | E::Geometry(_) | E::OutsideDomain { .. } | E::Provenance { .. } | E::Shape { .. } => 2,
                E::Io(_) | E::Format { .. } | E::Json(_) => 3,
                _ => 4,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "eskin", version, about = "EIT e-skin simulation, training and tactile reconstruction")]
struct Cli {
    /// TOML or JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config and the environment.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the simulated training set.
    Gen(GenArgs),
    /// Train the network on a generated dataset.
    Train(TrainArgs),
    /// Compute a normalized Jacobian for one bend state.
    Jacobian(JacobianArgs),
    /// Simulate held-out phantoms: frames, descriptor and ground truth.
    Phantom(PhantomArgs),
    /// Reconstruct a tactile map from a frames file.
    Recon(ReconArgs),
    /// Score reconstructions against ground truth.
    Eval(EvalArgs),
    /// Turn a surface scan into a deformation descriptor.
    CloudProcess(CloudArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub random_count: Option<usize>,
    #[arg(long)]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Start from the desk-scale schedule before applying other flags.
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Dataset directory; defaults to `<out>/dataset`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct JacobianArgs {
    /// Bend angle in radians.
    #[arg(long, default_value_t = 0.0)]
    pub bend: f64,
    #[arg(long)]
    pub vertices: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom ids; all eight when omitted.
    pub ids: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Tikhonov,
    L1,
    Sbl,
    Vd2t,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Tikhonov => "tikhonov",
            Method::L1 => "l1",
            Method::Sbl => "sbl",
            Method::Vd2t => "vd2t",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Reference {
    Flat,
    Deformed,
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    /// Frames CSV holding one touched frame and the reference frames.
    #[arg(long)]
    pub frames: PathBuf,
    /// Reference frame to difference against. Classical methods default to
    /// the deformed reference; the network only accepts the flat one.
    #[arg(long, value_enum)]
    pub reference: Option<Reference>,
    /// Declared bend angle in radians; the Jacobian must match it.
    #[arg(long, default_value_t = 0.0)]
    pub bend: f64,
    #[arg(long)]
    pub jacobian: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Descriptor CSV; its JSON sidecar must sit next to it.
    #[arg(long)]
    pub descriptor: Option<PathBuf>,
    /// Ground-truth map CSV; prints metrics when given.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Output name; defaults to the frames file's directory or stem.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `<phantom>_<method>.csv` maps.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Directory of `<phantom>.csv` ground-truth maps.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CloudArgs {
    /// Whitespace-separated `x y z` scan.
    #[arg(long)]
    pub input: PathBuf,
    /// Output path prefix; `.csv` and `.json` are appended.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
        cfg.paths.out_dir = dir.into();
    }
    if let Some(dir) = &cli.out {
        cfg.paths.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = resolve(&cli)?;
    match cli.cmd {
        Cmd::Gen(a) => commands::gen(&mut cfg, &a),
        Cmd::Train(a) => commands::train(&mut cfg, &a),
        Cmd::Jacobian(a) => commands::jacobian(&mut cfg, &a),
        Cmd::Phantom(a) => commands::phantom(&mut cfg, &a),
        Cmd::Recon(a) => commands::recon(&mut cfg, &a),
        Cmd::Eval(a) => commands::eval(&mut cfg, &a),
        Cmd::CloudProcess(a) => commands::cloud_process(&mut cfg, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
