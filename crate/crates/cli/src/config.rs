use std::path::{Path, PathBuf};

use eskin::dataset::{DatasetConfig, JACOBIAN_MESH_VERTICES};
use eskin::geometry::SensorGeometry;
use eskin::pointcloud::CloudOptions;
use eskin::recon::{ReconMethod, ReconParams};
use eskin::vd2t::Vd2tConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Overrides `paths.out_dir`.
pub const OUT_DIR_ENV: &str = "ESKIN_OUT_DIR";

/// One file governs every command. Missing blocks take their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: SensorGeometry,
    pub dataset: DatasetConfig,
    pub solver: SolverConfig,
    pub model: Vd2tConfig,
    pub cloud: CloudOptions,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tikhonov: ReconParams,
    pub l1: ReconParams,
    pub sbl: ReconParams,
    /// Vertex target of the meshes Jacobians are computed on.
    pub jacobian_vertices: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tikhonov: ReconParams::defaults(ReconMethod::Tikhonov),
            l1: ReconParams::defaults(ReconMethod::L1),
            sbl: ReconParams::defaults(ReconMethod::Sbl),
            jacobian_vertices: JACOBIAN_MESH_VERTICES,
        }
    }
}

impl SolverConfig {
    pub fn params(&self, m: ReconMethod) -> &ReconParams {
        match m {
            ReconMethod::Tikhonov => &self.tikhonov,
            ReconMethod::L1 => &self.l1,
            ReconMethod::Sbl => &self.sbl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { out_dir: PathBuf::from("out") }
    }
}

impl Paths {
    pub fn dataset(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }
    pub fn model(&self) -> PathBuf {
        self.out_dir.join("model")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.model().join("checkpoint.bin")
    }
    pub fn jacobians(&self) -> PathBuf {
        self.out_dir.join("jacobian")
    }
    pub fn phantoms(&self) -> PathBuf {
        self.out_dir.join("phantoms")
    }
    pub fn truth(&self) -> PathBuf {
        self.out_dir.join("truth")
    }
    pub fn recon(&self) -> PathBuf {
        self.out_dir.join("recon")
    }
}

impl RunConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Missing(format!("config {}: {e}", path.display())))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: eskin::Error| CliError::Config(e.to_string());
        self.geometry.validate().map_err(cfg)?;
        self.dataset.validate().map_err(cfg)?;
        self.model.validate().map_err(cfg)?;
        for m in [ReconMethod::Tikhonov, ReconMethod::L1, ReconMethod::Sbl] {
            let p = self.solver.params(m);
            if p.method != m {
                return Err(CliError::Config(format!("solver.{m} has method {}", p.method)));
            }
            p.validate().map_err(cfg)?;
        }
        if self.solver.jacobian_vertices < 100 {
            return Err(CliError::Config("solver.jacobian_vertices must be at least 100".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
    }

    #[test]
    fn partial_blocks_and_unknown_keys() {
        let c: RunConfig = toml::from_str("[model]\nepochs = 3\n[solver.l1]\nmethod = \"l1\"\nreg_factor = 0.01\n").unwrap();
        assert_eq!(c.model.epochs, 3);
        assert_eq!(c.solver.l1.reg_factor, 0.01);
        assert_eq!(c.dataset, DatasetConfig::default());
        let e = toml::from_str::<RunConfig>("[model]\nepochz = 3\n").unwrap_err().to_string();
        assert!(e.contains("epochz"), "{e}");
    }

    #[test]
    fn book_example_parses() {
        let md = include_str!("../../../book/src/cli.md");
        let block = md.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
        let c: RunConfig = toml::from_str(block).unwrap();
        c.validate().unwrap();
        assert_eq!(c.solver.sbl.cluster_size, 3);
        assert_eq!(c.dataset.random_count, 200);
    }
}
