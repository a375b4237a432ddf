//! Loading the run config, applying flag overrides and hashing the result.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use dualguide_core::config::RunConfig;
use dualguide_core::guidance::{StepRange, UpdateOrder, Variant};
use dualguide_core::pipeline::InversionConditioning;

use crate::output::sha256_hex;

pub const OUTPUT_DIR_ENV: &str = "DUALGUIDE_OUTPUT_DIR";

/// Parse a TOML run config; unknown or mistyped keys are reported with their path.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_string();
        if path == "." || path.is_empty() {
            anyhow::anyhow!("{msg}")
        } else {
            anyhow::anyhow!("key `{path}`: {msg}")
        }
    })?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            parse_config(&text).with_context(|| format!("invalid config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    Ok(cfg)
}

/// Hash of the effective config. The output directory is excluded: it only
/// says where artifacts go, not what they contain.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::new();
    sha256_hex(serde_json::to_string(&c).expect("config serialises").as_bytes())
}

/// Flags mirroring the guidance and schedule fields of the run config.
#[derive(Args, Debug, Default, Clone)]
pub struct GuidanceFlags {
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub inner_iters: Option<usize>,
    /// `src_anchor` or `null_anchor`.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Inclusive `first:last` reverse-step range, or `none`.
    #[arg(long)]
    pub text_range: Option<StepRange>,
    /// Inclusive `first:last` reverse-step range, or `none`.
    #[arg(long)]
    pub perceptual_range: Option<StepRange>,
    #[arg(long)]
    pub backtrack: Option<bool>,
    /// `before_step` or `after_step`.
    #[arg(long, value_parser = parse_order)]
    pub order: Option<UpdateOrder>,
    #[arg(long)]
    pub inference_steps: Option<usize>,
    /// `source`, `null` or `guided`.
    #[arg(long, value_parser = parse_inversion)]
    pub inversion: Option<InversionConditioning>,
}

impl GuidanceFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let g = &mut cfg.guidance;
        if let Some(v) = self.gamma {
            g.gamma = v;
        }
        if let Some(v) = self.beta {
            g.beta = v;
        }
        if let Some(v) = self.lambda {
            g.lambda = v;
        }
        if let Some(v) = self.inner_iters {
            g.inner_iters = v;
        }
        if let Some(v) = self.variant {
            g.variant = v;
        }
        if let Some(v) = self.text_range {
            g.text_range = v;
        }
        if let Some(v) = self.perceptual_range {
            g.perceptual_range = v;
        }
        if let Some(v) = self.backtrack {
            g.backtrack = v;
        }
        if let Some(v) = self.order {
            g.order = v;
        }
        if let Some(v) = self.inference_steps {
            cfg.schedule.inference_steps = v;
        }
        if let Some(v) = self.inversion {
            cfg.pipeline.inversion = v;
        }
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    parse_enum(s)
}

fn parse_order(s: &str) -> Result<UpdateOrder, String> {
    parse_enum(s)
}

fn parse_inversion(s: &str) -> Result<InversionConditioning, String> {
    parse_enum(s)
}
