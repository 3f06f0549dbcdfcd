//! Run configuration: one JSON document describing every pipeline stage.
//!
//! A run is reproducible from the config file plus the resolved seed; the
//! resolved form is copied next to each command's outputs. Unknown keys are
//! rejected everywhere so typos fail loudly instead of silently using
//! defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cureonet::eki::EkiConfig;
use cureonet::operator::Architecture;
use cureonet::opt::OptProblem;
use cureonet::sim::{DeformationParams, GridSpec, KineticsParams, ProfileAnchors};
use cureonet::train::TrainConfig;
use cureonet::transfer::TransferConfig;
use cureonet::{Error, Result};

/// Environment variable consulted for the default seed when no `--seed` flag
/// is given. A config-file seed ranks below it; the built-in default is 0.
pub const SEED_ENV: &str = "CUREONET_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed for every stochastic stage. Precedence: `--seed` flag, then
    /// the `CUREONET_SEED` environment variable, then this field, then 0.
    pub seed: Option<u64>,
    /// Rayon worker threads; absent means the machine default, 1 runs the
    /// pipeline single-threaded.
    pub workers: Option<usize>,
    /// Directory that anchors every relative path in this file.
    pub out_dir: PathBuf,
    pub generate: GenerateBlock,
    pub train: TrainBlock,
    pub ensemble: EnsembleBlock,
    pub eki_train: EkiTrainBlock,
    pub transfer: TransferBlock,
    pub eki_transfer: EkiTransferBlock,
    pub predict: PredictBlock,
    pub bands: BandsBlock,
    pub optimize: OptimizeBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            workers: None,
            out_dir: PathBuf::from("runs"),
            generate: GenerateBlock::default(),
            train: TrainBlock::default(),
            ensemble: EnsembleBlock::default(),
            eki_train: EkiTrainBlock::default(),
            transfer: TransferBlock::default(),
            eki_transfer: EkiTransferBlock::default(),
            predict: PredictBlock::default(),
            bands: BandsBlock::default(),
            optimize: OptimizeBlock::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateBlock {
    pub anchors: ProfileAnchors,
    pub kinetics: KineticsParams,
    pub deformation: DeformationParams,
    pub grid: GridSpec,
    /// Dataset directory, relative to `out_dir` unless absolute.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    /// Dataset directory produced by `generate`.
    pub dataset: Option<PathBuf>,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub val_fraction: f64,
    /// Seed for the train/validation split; defaults to the run seed.
    pub split_seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Default for TrainBlock {
    fn default() -> Self {
        Self {
            dataset: None,
            arch: Architecture::default(),
            train: TrainConfig::default(),
            val_fraction: 0.25,
            split_seed: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleBlock {
    pub dataset: Option<PathBuf>,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub val_fraction: f64,
    pub split_seed: Option<u64>,
    /// Member count when no explicit seed list is given; members are seeded
    /// run seed, run seed + 1, and so on.
    pub n_members: usize,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
}

impl Default for EnsembleBlock {
    fn default() -> Self {
        Self {
            dataset: None,
            arch: Architecture::default(),
            train: TrainConfig::default(),
            val_fraction: 0.25,
            split_seed: None,
            n_members: 5,
            seeds: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkiTrainBlock {
    pub dataset: Option<PathBuf>,
    pub arch: Architecture,
    pub eki: EkiConfig,
    /// Relative amplitude of the noise folded into the training targets.
    pub noise_rel: f64,
    /// Keep every n-th trajectory point when assembling the observation
    /// vector.
    pub time_stride: usize,
    /// Seed for the target noise; defaults to the run seed plus one.
    pub noise_seed: Option<u64>,
    pub val_fraction: f64,
    pub split_seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Default for EkiTrainBlock {
    fn default() -> Self {
        Self {
            dataset: None,
            arch: Architecture::compact(),
            eki: EkiConfig::default(),
            noise_rel: 0.01,
            time_stride: 4,
            noise_seed: None,
            val_fraction: 0.25,
            split_seed: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferBlock {
    /// Pretrained surrogate file produced by `train`.
    pub model: Option<PathBuf>,
    /// Measured temperature history, CSV with a `time_min,temp_C` header.
    pub experiment: Option<PathBuf>,
    /// JSON sidecar holding the terminal deformation, initial cure state,
    /// and label.
    pub experiment_meta: Option<PathBuf>,
    pub transfer: TransferConfig,
    pub out: Option<PathBuf>,
}

impl Default for TransferBlock {
    fn default() -> Self {
        Self {
            model: None,
            experiment: None,
            experiment_meta: None,
            transfer: TransferConfig::default(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkiTransferBlock {
    /// Checkpoint directory produced by `eki-train`.
    pub checkpoint: Option<PathBuf>,
    pub experiment: Option<PathBuf>,
    pub experiment_meta: Option<PathBuf>,
    pub eki: EkiConfig,
    pub out: Option<PathBuf>,
}

impl Default for EkiTransferBlock {
    fn default() -> Self {
        Self {
            checkpoint: None,
            experiment: None,
            experiment_meta: None,
            eki: EkiConfig {
                ensemble_size: 500,
                iterations: 100,
                process_noise: 0.01,
                ..EkiConfig::default()
            },
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictBlock {
    pub model: Option<PathBuf>,
    pub anchors: ProfileAnchors,
    /// Intermediate profile point, minutes and Celsius.
    pub t1: f64,
    pub temp1: f64,
    pub doc0: f64,
    pub n_points: usize,
    pub out: Option<PathBuf>,
}

impl Default for PredictBlock {
    fn default() -> Self {
        Self {
            model: None,
            anchors: ProfileAnchors::default(),
            t1: 20.0,
            temp1: 120.0,
            doc0: 0.3,
            n_points: 128,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandsBlock {
    /// Seed-ensemble directory produced by `ensemble`; mutually exclusive
    /// with `checkpoint`.
    pub ensemble: Option<PathBuf>,
    /// Kalman checkpoint directory produced by `eki-train` or
    /// `eki-transfer`.
    pub checkpoint: Option<PathBuf>,
    pub anchors: ProfileAnchors,
    pub t1: f64,
    pub temp1: f64,
    pub doc0: f64,
    pub n_points: usize,
    /// Also write every particle trajectory, not just the band summary.
    pub include_particles: bool,
    pub out: Option<PathBuf>,
}

impl Default for BandsBlock {
    fn default() -> Self {
        Self {
            ensemble: None,
            checkpoint: None,
            anchors: ProfileAnchors::default(),
            t1: 20.0,
            temp1: 120.0,
            doc0: 0.3,
            n_points: 128,
            include_particles: false,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeBlock {
    pub model: Option<PathBuf>,
    pub problem: OptProblem,
    /// Re-check the winning schedule with the cure simulator and fall back
    /// to the next best cell when it fails.
    pub verify: bool,
    pub kinetics: KineticsParams,
    pub deformation: DeformationParams,
    pub out: Option<PathBuf>,
}

impl Default for OptimizeBlock {
    fn default() -> Self {
        Self {
            model: None,
            problem: OptProblem::default(),
            verify: true,
            kinetics: KineticsParams::default(),
            deformation: DeformationParams::default(),
            out: None,
        }
    }
}

/// Scalar overrides taken from the command line; flags beat the environment,
/// which beats the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Loads a config file, or starts from defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::config(format!("cannot parse config {}: {e}", p.display()))
                })
            }
        }
    }

    /// Applies scalar overrides and pins the seed so the stored copy replays
    /// identically.
    pub fn resolve(mut self, over: &Overrides) -> Result<Self> {
        let env_seed = match std::env::var(SEED_ENV) {
            Err(_) => None,
            Ok(raw) => Some(raw.parse::<u64>().map_err(|e| {
                Error::config(format!("{SEED_ENV} must be an unsigned integer, got {raw:?}: {e}"))
            })?),
        };
        self.seed = over.seed.or(env_seed).or(self.seed).or(Some(0));
        self.workers = over.workers.or(self.workers);
        if let Some(dir) = &over.out_dir {
            self.out_dir = dir.clone();
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers must be at least 1"));
        }
        Ok(self)
    }

    /// The pinned seed; `resolve` guarantees it is present.
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Resolves a configured path against `out_dir`, falling back to a
    /// conventional location so stages chain without explicit wiring.
    pub fn path(&self, configured: &Option<PathBuf>, default_rel: &str) -> PathBuf {
        let rel = configured
            .clone()
            .unwrap_or_else(|| PathBuf::from(default_rel));
        if rel.is_absolute() {
            rel
        } else {
            self.out_dir.join(rel)
        }
    }

    /// Writes the resolved config next to a command's outputs.
    pub fn save_resolved(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config(format!("cannot serialize resolved config: {e}")))?;
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved_config.json"), json + "\n")?;
        Ok(())
    }
}
