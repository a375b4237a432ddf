//! Run configuration and the training/loading sequence built on it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::{train_codec, Codec, CodecConfig};
use crate::denoiser::{train_denoiser, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::perceptual::{train_perceptual, AlignmentModel, PerceptualConfig, PerceptualLogs, PerceptualNet};
use crate::pipeline::dataset::{generate_dataset, DatasetSpec, Split};
use crate::pipeline::{Models, PipelineConfig};
use crate::prompt::Prompt;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::Tensor;
use crate::train::TrainLog;

pub const CODEC_FILE: &str = "codec.ckpt";
pub const DENOISER_FILE: &str = "denoiser.ckpt";
pub const PERCEPTUAL_FILE: &str = "perceptual.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Training timesteps.
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Strided subset of timesteps used for inversion and sampling.
    pub inference_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::Linear,
            beta_min: 1e-4,
            beta_max: 0.02,
            inference_steps: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.kind, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub schedule: ScheduleConfig,
    pub codec: CodecConfig,
    pub denoiser: DenoiserConfig,
    pub perceptual: PerceptualConfig,
    pub guidance: GuidanceConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSpec::default(),
            schedule: ScheduleConfig::default(),
            codec: CodecConfig::default(),
            denoiser: DenoiserConfig::default(),
            perceptual: PerceptualConfig::default(),
            guidance: GuidanceConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.schedule.build()?;
        if self.schedule.inference_steps == 0 || self.schedule.inference_steps > self.schedule.steps {
            return Err(Error::InvalidSchedule(format!(
                "inference_steps must be in 1..={}, got {}",
                self.schedule.steps, self.schedule.inference_steps
            )));
        }
        self.denoiser.validate()?;
        self.guidance.validate(self.schedule.inference_steps)?;
        self.pipeline.edit_slot_index()?;
        if !(self.perceptual.temperature > 0.0) {
            return Err(Error::InvalidArgument("perceptual.temperature must be positive".into()));
        }
        Ok(())
    }

    /// Pipeline settings with the schedule's inference step count filled in.
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            inference_steps: self.schedule.inference_steps,
            ..self.pipeline.clone()
        }
    }

    pub fn codec_seed(&self) -> u64 {
        self.seed
    }

    pub fn denoiser_seed(&self) -> u64 {
        self.seed.wrapping_add(1_000)
    }

    pub fn perceptual_seed(&self) -> u64 {
        self.seed.wrapping_add(2_000)
    }
}

/// Training images and prompts from the configured dataset.
pub fn training_set(cfg: &RunConfig) -> Result<(Vec<Tensor>, Vec<Prompt>)> {
    Ok(generate_dataset(&cfg.dataset, Split::Train)?
        .into_iter()
        .map(|s| (s.image, s.prompt))
        .unzip())
}

pub fn fit_codec(cfg: &RunConfig, images: &[Tensor]) -> Result<(Codec, TrainLog)> {
    let refs: Vec<&Tensor> = images.iter().collect();
    train_codec(&refs, &cfg.codec, cfg.dataset.image_size, cfg.codec_seed())
}

pub fn fit_denoiser(
    cfg: &RunConfig,
    codec: &Codec,
    images: &[Tensor],
    prompts: &[Prompt],
) -> Result<(Denoiser, TrainLog)> {
    let latents = images.iter().map(|x| codec.encode(x)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = latents.iter().collect();
    train_denoiser(
        &refs,
        prompts,
        &cfg.schedule.build()?,
        &cfg.denoiser,
        cfg.denoiser_seed(),
    )
}

pub fn fit_perceptual(
    cfg: &RunConfig,
    images: &[Tensor],
    prompts: &[Prompt],
) -> Result<(PerceptualNet, AlignmentModel, PerceptualLogs)> {
    let refs: Vec<&Tensor> = images.iter().collect();
    train_perceptual(&refs, prompts, &cfg.perceptual, cfg.perceptual_seed())
}

#[derive(Clone, Debug, Default)]
pub struct TrainingLogs {
    pub codec: TrainLog,
    pub denoiser: TrainLog,
    pub perceptual: PerceptualLogs,
}

/// Train every component in order: codec, denoiser (on codec latents), perceptual.
pub fn train_all(cfg: &RunConfig) -> Result<(Models, TrainingLogs)> {
    cfg.validate()?;
    let (images, prompts) = training_set(cfg)?;
    let (codec, codec_log) = fit_codec(cfg, &images)?;
    let (denoiser, den_log) = fit_denoiser(cfg, &codec, &images, &prompts)?;
    let (perceptual, alignment, perc_logs) = fit_perceptual(cfg, &images, &prompts)?;
    Ok((
        Models {
            schedule: cfg.schedule.build()?,
            codec,
            denoiser,
            perceptual,
            alignment,
        },
        TrainingLogs {
            codec: codec_log,
            denoiser: den_log,
            perceptual: perc_logs,
        },
    ))
}

pub fn codec_checkpoint(codec: &Codec) -> Checkpoint {
    let mut ck = Checkpoint::default();
    codec.save_into(&mut ck);
    ck
}

pub fn denoiser_checkpoint(denoiser: &Denoiser) -> Checkpoint {
    let mut ck = Checkpoint::default();
    denoiser.save_into(&mut ck);
    ck
}

pub fn perceptual_checkpoint(net: &PerceptualNet, align: &AlignmentModel) -> Checkpoint {
    let mut ck = Checkpoint::default();
    net.save_into(&mut ck);
    align.save_into(&mut ck);
    ck
}

fn load_existing(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "missing checkpoint (run `train` first)".into(),
        });
    }
    Checkpoint::load(path)
}

pub fn load_codec(dir: &Path) -> Result<Codec> {
    Codec::load_from(&load_existing(&dir.join(CODEC_FILE))?)
}

/// Load every checkpoint from `dir`.
pub fn load_models(cfg: &RunConfig, dir: &Path) -> Result<Models> {
    let perc = load_existing(&dir.join(PERCEPTUAL_FILE))?;
    Ok(Models {
        schedule: cfg.schedule.build()?,
        codec: load_codec(dir)?,
        denoiser: Denoiser::load_from(&load_existing(&dir.join(DENOISER_FILE))?)?,
        perceptual: PerceptualNet::load_from(&perc)?,
        alignment: AlignmentModel::load_from(&perc)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
        assert_eq!(RunConfig::default().pipeline_config().inference_steps, 50);
    }

    #[test]
    fn range_beyond_inference_steps_rejected() {
        let mut cfg = RunConfig::default();
        cfg.schedule.inference_steps = 10;
        assert!(cfg.validate().is_err());
        cfg.guidance = GuidanceConfig::with_default_ranges(10);
        cfg.validate().unwrap();
    }

    #[test]
    fn missing_checkpoint_names_path() {
        let err = load_models(&RunConfig::default(), Path::new("/nonexistent/run")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run/perceptual.ckpt"));
    }
}
