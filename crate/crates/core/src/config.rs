//! Run configuration: a TOML file of `key = value` lines in sections.
//!
//! ```toml
//! seed = 7
//! seeds = [0, 1, 2]
//!
//! [model]
//! num_layers = 6
//!
//! [maps]
//! dir = "maps"
//! count = 20
//!
//! [train]
//! pretrain_epochs = 10
//!
//! [quantize]
//! scheme = "nf4"
//!
//! [eval]
//! episodes = 200
//! ```
//!
//! Every section and key is optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, QuantizeOptions};
use crate::navsim::{default_tau_grid, NavConfig, MAX_WALL_DENSITY};
use crate::quantizer::Scheme;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapsConfig {
    /// Directory of `map_NNN.txt` files.
    pub dir: PathBuf,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub density: f64,
}

impl Default for MapsConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("maps"),
            count: 20,
            width: 15,
            height: 15,
            density: 0.2,
        }
    }
}

/// Which maps each stage uses: index `i` is held out for testing when
/// `i % 5 == 4`, used for validation and calibration when `i % 5 == 3`,
/// and used for training otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MapSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl MapsConfig {
    pub fn splits(&self) -> MapSplits {
        let pick = |r: usize| (0..self.count).filter(|i| i % 5 == r).collect::<Vec<_>>();
        MapSplits {
            train: (0..self.count).filter(|i| i % 5 < 3).collect(),
            val: pick(3),
            test: pick(4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizeConfig {
    /// `nf4`, `uniform4` or `uniform8`.
    pub scheme: String,
    /// Quantize every block projection, not only query and value.
    pub all_linear: bool,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self {
            scheme: "nf4".into(),
            all_linear: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub calibration_episodes: usize,
    pub max_steps: usize,
    pub success_radius: usize,
    /// Thresholds for sweeps and calibration; defaults to 0.05..=0.95.
    pub tau_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            calibration_episodes: 50,
            max_steps: 200,
            success_radius: 1,
            tau_grid: default_tau_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed of single-run commands.
    pub seed: u64,
    /// Seeds over which `eval` repeats and reports mean and spread.
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub maps: MapsConfig,
    pub train: TrainConfig,
    pub quantize: QuantizeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2],
            model: ModelConfig::default(),
            maps: MapsConfig::default(),
            train: TrainConfig::default(),
            quantize: QuantizeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.train.alphas(self.model.exit_layers.len()).map_err(config_err)?;
        self.quantize_options()?;
        let m = &self.maps;
        if m.count < 5 {
            return Err(config_err("maps.count must be at least 5 so every split has a map"));
        }
        if !(0.0..=MAX_WALL_DENSITY).contains(&m.density) {
            return Err(config_err(format!("maps.density must lie in [0, {MAX_WALL_DENSITY}]")));
        }
        if m.width < 5 || m.height < 5 {
            return Err(config_err("maps must be at least 5x5"));
        }
        if !(0.0..1.0).contains(&self.train.explore_prob) {
            return Err(config_err("train.explore_prob must lie in [0, 1)"));
        }
        let e = &self.eval;
        if e.episodes == 0 || e.calibration_episodes == 0 || e.max_steps == 0 {
            return Err(config_err("episode counts and max_steps must be positive"));
        }
        if e.tau_grid.is_empty() || e.tau_grid.iter().any(|t| !t.is_finite()) {
            return Err(config_err("eval.tau_grid must be a non-empty list of finite thresholds"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        Ok(())
    }

    pub fn quantize_options(&self) -> Result<QuantizeOptions> {
        Ok(QuantizeOptions {
            scheme: Scheme::parse(&self.quantize.scheme).map_err(config_err)?,
            all_linear: self.quantize.all_linear,
            attach_lora: true,
        })
    }

    pub fn nav(&self) -> NavConfig {
        NavConfig {
            window_size: self.model.window,
            success_radius: self.eval.success_radius,
            max_steps: self.eval.max_steps,
        }
    }
}
