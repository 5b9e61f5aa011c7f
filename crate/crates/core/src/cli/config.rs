//! Run configuration: strict JSON with unknown-key rejection, cross-
//! field validation up front, and content hashes that let artifacts
//! refuse to mix across configurations.

use crate::error::ConfigError;
use crate::nnet::UNetConfig;
use crate::synthdata::GeneratorConfig;
use crate::tryon::{ConditioningMode, SamplerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Satt,
    Channel,
}

impl Mode {
    pub fn conditioning(self) -> ConditioningMode {
        match self {
            Mode::Satt => ConditioningMode::SpatialConcat,
            Mode::Channel => ConditioningMode::ChannelConcat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub height: usize,
    pub width: usize,
    pub bbox_margin: usize,
    pub count: usize,
    /// Leading samples used for training; the rest are held out.
    pub train_count: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { height: 32, width: 24, bbox_margin: 1, count: 16, train_count: 16, seed: 7 }
    }
}

impl DatasetSection {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig { height: self.height, width: self.width, bbox_margin: self.bbox_margin }
    }

    pub fn sample_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub num_res_blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub num_heads: usize,
    pub norm_groups: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            attention_levels: vec![1, 2],
            num_res_blocks_per_level: 1,
            time_embed_dim: 128,
            num_heads: 4,
            norm_groups: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    /// The beta range is scaled up from the 1000-step convention so
    /// the 200-step schedule still ends near isotropic noise
    /// (alpha_bar[T-1] ~ 4e-5); a short schedule with the long-
    /// schedule betas would retain ~37% signal amplitude at t = T-1
    /// and mismatch the pure-noise start of sampling.
    fn default() -> Self {
        ScheduleSection { timesteps: 200, beta_start: 5e-4, beta_end: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub stage1_threshold: f64,
    pub dilate_radius: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { steps: 50, eta: 0.0, seed: 0, stage1_threshold: 0.5, dilate_radius: 1 }
    }
}

impl SamplerSection {
    pub fn sampler_config(&self, sample_index: usize) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            eta: self.eta,
            seed: self.seed.wrapping_add(sample_index as u64),
            stage1_threshold: self.stage1_threshold,
            dilate_radius: self.dilate_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            steps: 3000,
            checkpoint_interval: 1000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    pub training: TrainingSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: Mode::Satt,
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            sampler: SamplerSection::default(),
            training: TrainingSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The full UNet architecture, with channel counts fixed by the
    /// conditioning mode.
    pub fn unet_config(&self) -> UNetConfig {
        let mode = self.mode.conditioning();
        UNetConfig {
            in_channels: mode.in_channels(),
            out_channels: crate::tryon::STATE_CHANNELS,
            base_channels: self.model.base_channels,
            channel_mults: self.model.channel_mults.clone(),
            attention_levels: self.model.attention_levels.clone(),
            num_res_blocks_per_level: self.model.num_res_blocks_per_level,
            time_embed_dim: self.model.time_embed_dim,
            num_heads: self.model.num_heads,
            norm_groups: self.model.norm_groups,
        }
    }

    pub fn canvas(&self) -> (usize, usize) {
        (self.mode.conditioning().canvas_height(self.dataset.height), self.dataset.width)
    }

    /// Every cross-field constraint, checked before any work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| ConfigError::Invalid(m);
        self.dataset.generator().validate().map_err(|e| err(e.to_string()))?;
        if self.dataset.count == 0 {
            return Err(err("empty dataset (count = 0)".into()));
        }
        if self.dataset.train_count == 0 || self.dataset.train_count > self.dataset.count {
            return Err(err(format!(
                "train_count {} must be in [1, count {}]",
                self.dataset.train_count, self.dataset.count
            )));
        }
        if self.schedule.timesteps == 0 {
            return Err(err("schedule needs at least one timestep".into()));
        }
        if !(self.schedule.beta_start > 0.0
            && self.schedule.beta_start <= self.schedule.beta_end
            && self.schedule.beta_end < 1.0)
        {
            return Err(err(format!(
                "beta range [{}, {}] invalid",
                self.schedule.beta_start, self.schedule.beta_end
            )));
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule.timesteps {
            return Err(err(format!(
                "sampler steps {} must be in [1, T = {}]",
                self.sampler.steps, self.schedule.timesteps
            )));
        }
        if !(0.0..=1.0).contains(&self.sampler.eta) {
            return Err(err(format!("eta {} outside [0,1]", self.sampler.eta)));
        }
        if self.training.batch_size == 0 || self.training.steps == 0 {
            return Err(err("training batch_size and steps must be positive".into()));
        }
        if self.training.checkpoint_interval == 0 {
            return Err(err("checkpoint_interval must be positive".into()));
        }
        let unet = self.unet_config();
        let (ch, cw) = self.canvas();
        unet.validate(Some((ch, cw))).map_err(|e| err(e.to_string()))?;
        Ok(())
    }

    /// Hex hash of the dataset-generator settings (must match the
    /// dataset manifest).
    pub fn dataset_hash(&self) -> String {
        self.dataset.generator().hash()
    }

    /// 64-bit hash over everything that defines the trained model:
    /// mode, dataset, architecture, schedule, and training settings.
    /// Sampler settings and paths are inference-time choices and stay
    /// out of it.
    pub fn model_hash(&self) -> u64 {
        #[derive(Serialize)]
        struct ModelIdentity<'a> {
            seed: u64,
            mode: &'a Mode,
            dataset: &'a DatasetSection,
            model: &'a ModelSection,
            schedule: &'a ScheduleSection,
            training: &'a TrainingSection,
        }
        let id = ModelIdentity {
            seed: self.seed,
            mode: &self.mode,
            dataset: &self.dataset,
            model: &self.model,
            schedule: &self.schedule,
            training: &self.training,
        };
        let json = serde_json::to_string(&id).expect("identity serializes");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}
