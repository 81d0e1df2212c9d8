//! The declarative run configuration (JSON). Every field has a default, so
//! a config file only needs the fields it changes.

use crate::error::{io_err, CliError, Result};
use rq_core::stage1::Stage1Config;
use rq_transformer::{ModelConfig, SampleConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory of `.ppm` training images.
    pub data_dir: Option<PathBuf>,
    /// Directory of held-out `.ppm` images for sweeps.
    pub heldout_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Output of a previous `train-stage1` run.
    pub stage1_dir: Option<PathBuf>,
    pub stage1: Stage1Config,
    /// `t`, `d`, `k`, `n_z` and `code_tables` are taken from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampling: SamplingParams,
    pub sweep: SweepParams,
    pub synth: SynthParams,
    pub bench: BenchParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: None,
            heldout_dir: None,
            out_dir: PathBuf::from("out"),
            stage1_dir: None,
            stage1: Stage1Config::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                soft_label: None,
                stochastic: None,
                ..TrainConfig::default()
            },
            sampling: SamplingParams::default(),
            sweep: SweepParams::default(),
            synth: SynthParams::default(),
            bench: BenchParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub count: usize,
    pub batch_size: usize,
    pub filter: SampleConfig,
    pub class: Option<usize>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            count: 8,
            batch_size: 8,
            filter: SampleConfig::default(),
            class: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepParams {
    pub codebook_sizes: Vec<usize>,
    pub depths: Vec<usize>,
    pub betas: Vec<f64>,
    /// Each entry runs the grid once with shared (false) or per-depth
    /// (true) codebooks.
    pub per_depth_codebooks: Vec<bool>,
    /// Synthetic images used when no data directory is given.
    pub train_images: usize,
    pub heldout_images: usize,
    pub image_size: usize,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            codebook_sizes: vec![64, 4096],
            depths: vec![1, 4],
            betas: vec![0.25, 1.0],
            per_depth_codebooks: vec![false],
            train_images: 64,
            heldout_images: 32,
            image_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub count: usize,
    pub size: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { count: 64, size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchParams {
    /// Architecture of the RQ model; the baseline gets
    /// `n_spatial + n_depth` layers of the same width.
    pub model: ModelConfig,
    pub batch_sizes: Vec<usize>,
    /// Images generated per batch-size measurement.
    pub images: usize,
    /// Geometry whose attention cost ratio is reported.
    pub flops: ModelConfig,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                n_spatial: 6,
                n_depth: 2,
                n_e: 64,
                heads: 4,
                t: 64,
                d: 4,
                k: 64,
                n_z: 16,
                ..ModelConfig::default()
            },
            batch_sizes: vec![1, 4, 16, 64],
            images: 64,
            flops: ModelConfig {
                n_spatial: 24,
                n_depth: 4,
                n_e: 8,
                heads: 2,
                t: 64,
                d: 4,
                k: 64,
                n_z: 4,
                ..ModelConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes `run_config.json` into the output directory.
    pub fn write_to_out(&self) -> Result<()> {
        let path = self.out_dir.join("run_config.json");
        std::fs::create_dir_all(&self.out_dir).map_err(io_err(&self.out_dir))?;
        std::fs::write(&path, self.to_json() + "\n").map_err(io_err(path))
    }

    pub fn stage1_config(&self) -> Stage1Config {
        Stage1Config {
            seed: self.seed,
            ..self.stage1.clone()
        }
    }
}
