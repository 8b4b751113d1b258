//! Toy conditional DDPM over 2-D points.

mod denoiser;
mod sampler;
mod schedule;
mod train;

pub use denoiser::{time_features, AdapterVars, Denoiser, DenoiserShape, DenoiserVars};
pub use sampler::{cfg_predict, guided_predict, sample, write_samples_csv, InferenceMode, SampleBatch};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind};
pub use train::train_base;

use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::lora::LoraTarget;

/// `diffusion` config section: schedule, architecture and base training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    pub hidden_widths: Vec<usize>,
    pub lora_targets: Vec<LoraTarget>,
    pub time_features: usize,
    pub train_steps: usize,
    pub batch: usize,
    /// Probability of swapping `c` for the null embedding during training.
    pub p_uncond: f64,
    /// Probability of replacing a base embedding by a fresh perturbation of it.
    pub p_syn_aug: f64,
    pub adam: AdamConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.05,
            schedule: ScheduleKind::Linear,
            hidden_widths: vec![128, 128, 128],
            lora_targets: vec![LoraTarget::Cond, LoraTarget::Out],
            time_features: 8,
            train_steps: 3000,
            batch: 128,
            p_uncond: 0.1,
            p_syn_aug: 0.5,
            adam: AdamConfig::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.schedule)
            .map_err(|e| Error::Config(format!("diffusion: {e}")))?;
        for (name, p) in [("p_uncond", self.p_uncond), ("p_syn_aug", self.p_syn_aug)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("diffusion.{name} must be in [0, 1], got {p}")));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("diffusion.batch must be positive".into()));
        }
        if !(self.adam.lr >= 0.0) {
            return Err(Error::Config("diffusion.adam.lr must be >= 0".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.schedule)
    }

    pub fn shape(&self, embed_dim: usize) -> DenoiserShape {
        DenoiserShape {
            data_dim: 2,
            time_features: self.time_features,
            embed_dim,
            hidden_widths: self.hidden_widths.clone(),
            horizon: self.steps,
        }
    }
}
