//! Experiment configuration and run manifests.
//!
//! One JSON document configures a whole experiment; unknown keys are
//! rejected so that the manifest hash is meaningful. Command-line flags
//! override individual fields after loading.

use crate::error::{FlowError, Result};
use crate::grid::GridShape;
use crate::loss::LossWeights;
use crate::model::{FlowArch, OpticalArch};
use crate::render::KernelSpec;
use crate::sim::{MotionModel, SimConfig};
use crate::train::{ActiveConfig, SelectorKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub sim: SimSection,
    pub kernel: KernelSection,
    pub train: TrainSection,
    pub active: ActiveSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub rows: usize,
    pub cols: usize,
    pub cell_px: usize,
    pub n_agents: usize,
    pub speed_max: f64,
    pub entry_rate: f64,
    pub exit_enabled: bool,
    pub motion_model: MotionModel,
    pub n_frames: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            rows: 16,
            cols: 16,
            cell_px: 8,
            n_agents: 100,
            speed_max: 0.5,
            entry_rate: 0.0,
            exit_enabled: false,
            motion_model: MotionModel::Lanes,
            n_frames: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    /// Image-plane sigma in cells.
    pub sigma: f64,
    pub truncation_radius: f64,
    /// Ground-plane sigma in meters.
    pub ground_sigma_m: f64,
    /// Ground-plane cell side in meters.
    pub ground_cell_m: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection {
            sigma: 2.0,
            truncation_radius: 4.0,
            ground_sigma_m: 0.3,
            ground_cell_m: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub v: usize,
    pub batch: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub enc_channels: [usize; 3],
    pub dec_hidden: usize,
    pub fo_hidden: usize,
    pub fo_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainSection {
            v: 1,
            batch: 2,
            max_steps: 500,
            learning_rate: 1e-4,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            delta: w.delta,
            enc_channels: [8, 16, 16],
            dec_hidden: 16,
            fo_hidden: 8,
            fo_steps: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActiveSection {
    pub patch_n: usize,
    pub iterations: usize,
    pub initial_fraction: f64,
    pub select_fraction: f64,
    pub selector: SelectorKind,
    pub steps_initial: usize,
    pub steps_per_iteration: usize,
    pub validation_fraction: f64,
}

impl Default for ActiveSection {
    fn default() -> Self {
        let d = ActiveConfig::default();
        ActiveSection {
            patch_n: d.patch_n,
            iterations: d.iterations,
            initial_fraction: d.initial_fraction,
            select_fraction: d.select_fraction,
            selector: d.selector,
            steps_initial: d.steps_initial,
            steps_per_iteration: d.steps_per_iteration,
            validation_fraction: d.validation_fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub eval_dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub fo_checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| FlowError::Parse {
            file: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn grid_shape(&self) -> Result<GridShape> {
        GridShape::new(self.sim.rows, self.sim.cols, self.sim.cell_px)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let config = SimConfig {
            shape: self.grid_shape()?,
            n_agents: self.sim.n_agents,
            speed_max: self.sim.speed_max,
            entry_rate: self.sim.entry_rate,
            exit_enabled: self.sim.exit_enabled,
            motion_model: self.sim.motion_model,
            seed: crate::seed::derive_seed(self.seed, "simulate"),
            n_frames: self.sim.n_frames,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.train.alpha,
            beta: self.train.beta,
            gamma: self.train.gamma,
            delta: self.train.delta,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let config = TrainConfig {
            keyframe_interval: self.train.v,
            batch: self.train.batch,
            max_steps: self.train.max_steps,
            learning_rate: self.train.learning_rate,
            weights: self.weights(),
            seed: crate::seed::derive_seed(self.seed, "train"),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn active_config(&self) -> ActiveConfig {
        ActiveConfig {
            patch_n: self.active.patch_n,
            iterations: self.active.iterations,
            initial_fraction: self.active.initial_fraction,
            select_fraction: self.active.select_fraction,
            selector: self.active.selector,
            steps_initial: self.active.steps_initial,
            steps_per_iteration: self.active.steps_per_iteration,
            validation_fraction: self.active.validation_fraction,
        }
    }

    pub fn flow_arch(&self, cell_px: usize) -> FlowArch {
        FlowArch {
            cell_px,
            enc_channels: self.train.enc_channels,
            dec_hidden: self.train.dec_hidden,
        }
    }

    pub fn optical_arch(&self) -> OpticalArch {
        OpticalArch {
            hidden: self.train.fo_hidden,
        }
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        KernelSpec::new(self.kernel.sigma, self.kernel.truncation_radius)
    }

    /// Canonical JSON string; field order is fixed by the struct layout.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.canonical_json()?.as_bytes());
        Ok(hex_string(&h.finalize()))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// What every command leaves behind in its output directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Result<Self> {
        // The output directory is implied by the manifest's own location;
        // keeping it out of the record makes artifacts byte-identical no
        // matter where they are written.
        let mut config = config.clone();
        config.paths.out = None;
        Ok(RunManifest {
            command: command.to_string(),
            seed: config.seed,
            config_hash: config.hash()?,
            config,
            artifacts: Vec::new(),
            summary: None,
        })
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("run_manifest.json");
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        fs::write(path, json)?;
        Ok(())
    }
}

/// Exclusive ownership of an artifact directory for the duration of a run.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(FlowError::Config(
                format!("another run holds the lock on {}", dir.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_object() {
        let config: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config.sim.cell_px, 8);
        assert_eq!(config.train.learning_rate, 1e-4);
        assert_eq!(config.train.alpha, 1.0);
        assert_eq!(config.train.beta, 1e-4);
        assert_eq!(config.active.patch_n, 4);
        assert_eq!(config.active.iterations, 5);
        assert_eq!(config.active.initial_fraction, 0.25);
        assert_eq!(config.active.select_fraction, 0.15);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sima": {}}"#).is_err());
        assert!(
            serde_json::from_str::<ExperimentConfig>(r#"{"sim": {"rowz": 4}}"#).is_err()
        );
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a: ExperimentConfig = serde_json::from_str("{}").unwrap();
        let b: ExperimentConfig = serde_json::from_str(r#"{"seed": 1}"#).unwrap();
        assert_eq!(a.hash().unwrap(), a.hash().unwrap());
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn lock_is_exclusive() {
        let tmp = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(tmp.path()).unwrap();
        assert!(DirLock::acquire(tmp.path()).is_err());
        drop(lock);
        assert!(DirLock::acquire(tmp.path()).is_ok());
    }
}
