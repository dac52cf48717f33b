use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgta::pipeline::TrackerConfig;
use sgta::simulator::SimConfig;

use crate::CliError;

pub const FORMAT_VERSION: u32 = 1;

/// Stream ids added to the run seed for each derived generator.
pub const STREAM_RANSAC: u64 = 1;
pub const STREAM_WEIGHTS: u64 = 2;
pub const STREAM_PRIOR: u64 = 3;
pub const STREAM_MULTIFRAME: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiframeConfig {
    /// Frames per static-camera video taken as the position pool `L`.
    pub positions: usize,
    /// Values of `l` to evaluate.
    pub sweep: Vec<usize>,
    /// Cap on combinations per video and `l`; below it all are enumerated.
    pub max_combinations: usize,
}

impl Default for MultiframeConfig {
    fn default() -> Self {
        MultiframeConfig {
            positions: 20,
            sweep: vec![1, 2, 5, 10, 15, 20],
            max_combinations: 2500,
        }
    }
}

impl MultiframeConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.positions == 0 || self.max_combinations == 0 {
            return Err(CliError::Config("positions and max_combinations must be positive".into()));
        }
        if let Some(l) = self.sweep.iter().find(|&&l| l == 0 || l > self.positions) {
            return Err(CliError::Config(format!("sweep value {l} outside 1..={}", self.positions)));
        }
        Ok(())
    }
}

/// Everything a command reads besides its positional inputs. Loaded from
/// TOML, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Kinematic chain JSON; the bundled arm when absent.
    pub chain: Option<PathBuf>,
    pub sim: SimConfig,
    pub tracker: TrackerConfig,
    pub multiframe: MultiframeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            format_version: FORMAT_VERSION,
            seed: None,
            out: None,
            chain: None,
            sim: SimConfig::default(),
            tracker: TrackerConfig::default(),
            multiframe: MultiframeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(ExperimentConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.format_version != FORMAT_VERSION {
            return Err(CliError::Config(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                cfg.format_version
            )));
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("no seed given (set `seed` in the config or pass --seed)".into()))
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory given (set `out` or pass --out)".into()))
    }

    /// Derives every generator seed from the run seed.
    pub fn apply_seed(&mut self) -> Result<u64, CliError> {
        let seed = self.seed()?;
        self.sim.seed = seed;
        self.tracker.ransac.seed = seed.wrapping_add(STREAM_RANSAC);
        self.tracker.seed = seed.wrapping_add(STREAM_PRIOR);
        Ok(seed)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}
