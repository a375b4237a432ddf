//! Inversion, guided editing and metric evaluation.

pub mod dataset;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::guidance::{
    compose, gate, noise_cond, perceptual_update, GuidanceConfig, PerceptualObjective, UpdateDiagnostics, UpdateOrder,
    Variant,
};
use crate::perceptual::{psnr, AlignmentModel, PerceptualNet};
use crate::prompt::Prompt;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

use dataset::{generate_sample, DatasetSpec, Split};

/// Trained components needed for inversion and editing.
#[derive(Clone, Debug)]
pub struct Models {
    pub schedule: NoiseSchedule,
    pub codec: Codec,
    pub denoiser: Denoiser,
    pub perceptual: PerceptualNet,
    pub alignment: AlignmentModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NullText,
    TextOpt,
    TextOptPlusPerceptual,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::NullText, Mode::TextOpt, Mode::TextOptPlusPerceptual];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::NullText => "null_text",
            Mode::TextOpt => "text_opt",
            Mode::TextOptPlusPerceptual => "text_opt_plus_perceptual",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown mode `{s}` (expected null_text, text_opt or text_opt_plus_perceptual)"
            ))
        })
    }
}

/// Which noise prediction drives inversion (and plain reconstruction).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionConditioning {
    /// Source prompt, no guidance.
    Source,
    /// Null prompt.
    Null,
    /// Source-prompt classifier-free guidance with the configured gamma.
    Guided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Filled from the schedule section of a run config.
    #[serde(skip)]
    pub inference_steps: usize,
    pub inversion: InversionConditioning,
    pub retain_trajectory: bool,
    /// Number of single-attribute edits in an evaluation batch.
    pub edit_count: usize,
    /// Attribute changed by evaluation edits: `shape`, `position` or `intensity`.
    pub edit_slot: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inference_steps: 50,
            inversion: InversionConditioning::Source,
            retain_trajectory: false,
            edit_count: 36,
            edit_slot: "shape".into(),
        }
    }
}

impl PipelineConfig {
    pub fn edit_slot_index(&self) -> Result<usize> {
        crate::prompt::SLOT_NAMES
            .iter()
            .position(|s| *s == self.edit_slot)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "edit_slot `{}` must be shape, position or intensity",
                    self.edit_slot
                ))
            })
    }
}

/// Per-prompt embeddings computed once per edit.
struct Embeddings {
    null: Tensor,
    src: Tensor,
    edit: Tensor,
}

fn predict(models: &Models, z: &Tensor, e: &Tensor, t: usize) -> Result<Tensor> {
    models.denoiser.predict_noise(z, e, t, &models.schedule)
}

fn conditioned(
    models: &Models,
    emb: &Embeddings,
    z: &Tensor,
    t: usize,
    how: InversionConditioning,
    gamma: f64,
) -> Result<Tensor> {
    match how {
        InversionConditioning::Source => predict(models, z, &emb.src, t),
        InversionConditioning::Null => predict(models, z, &emb.null, t),
        InversionConditioning::Guided => source_cfg(models, emb, z, t, gamma),
    }
}

fn source_cfg(models: &Models, emb: &Embeddings, z: &Tensor, t: usize, gamma: f64) -> Result<Tensor> {
    let src = predict(models, z, &emb.src, t)?;
    if gamma == 1.0 {
        return Ok(src);
    }
    noise_cond(&predict(models, z, &emb.null, t)?, &src, gamma)
}

fn embeddings(models: &Models, p_src: &Prompt, p_edit: &Prompt) -> Result<Embeddings> {
    Ok(Embeddings {
        null: models.denoiser.embed(&Prompt::NULL)?,
        src: models.denoiser.embed(p_src)?,
        edit: models.denoiser.embed(p_edit)?,
    })
}

fn prev_timestep(ts: &[usize], i: usize) -> Option<usize> {
    if i == 0 {
        None
    } else {
        Some(ts[i - 1])
    }
}

/// DDIM inversion of `x_src`. Returns the latent trajectory from the encoding
/// through every inference timestep, noisiest last.
pub fn invert(
    x_src: &Tensor,
    p_src: &Prompt,
    models: &Models,
    steps: usize,
    conditioning: InversionConditioning,
    gamma: f64,
) -> Result<Vec<Tensor>> {
    let ts = models.schedule.inference_timesteps(steps)?;
    let emb = embeddings(models, p_src, p_src)?;
    let mut z = models.codec.encode(x_src)?;
    let mut trajectory = Vec::with_capacity(ts.len() + 1);
    trajectory.push(z.clone());
    for i in 0..ts.len() {
        let eps = conditioned(models, &emb, &z, ts[i], conditioning, gamma)?;
        z = models
            .schedule
            .ddim_invert_step(&z, &eps, prev_timestep(&ts, i), ts[i])?;
        trajectory.push(z.clone());
    }
    Ok(trajectory)
}

/// Unguided resampling from the noisiest latent; returns the decoded image.
pub fn reconstruct(
    z_end: &Tensor,
    p_src: &Prompt,
    models: &Models,
    steps: usize,
    conditioning: InversionConditioning,
    gamma: f64,
) -> Result<Tensor> {
    let ts = models.schedule.inference_timesteps(steps)?;
    let emb = embeddings(models, p_src, p_src)?;
    let mut z = z_end.clone();
    for i in (0..ts.len()).rev() {
        let eps = conditioned(models, &emb, &z, ts[i], conditioning, gamma)?;
        z = models.schedule.ddim_step(&z, &eps, ts[i], prev_timestep(&ts, i))?;
    }
    models.codec.decode(&z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Reverse step index, 0 is the noisiest.
    pub step: usize,
    pub t: usize,
    pub text_active: bool,
    pub perceptual_active: bool,
    pub perceptual: Option<UpdateDiagnostics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub perceptual: f64,
    pub alignment: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditResult {
    pub mode: Mode,
    pub source_index: Option<usize>,
    pub src_prompt: Prompt,
    pub edit_prompt: Prompt,
    pub source: Tensor,
    pub edited: Tensor,
    /// Reverse-sampling latents, only when retention is on.
    pub trajectory: Option<Vec<Tensor>>,
    pub steps: Vec<StepRecord>,
    pub metrics: Metrics,
}

pub fn compute_metrics(source: &Tensor, edited: &Tensor, edit_prompt: &Prompt, models: &Models) -> Result<Metrics> {
    Ok(Metrics {
        psnr: psnr(source, edited, 1.0)?,
        perceptual: models.perceptual.distance(edited, source)?,
        alignment: models.alignment.score(edited, edit_prompt)?,
    })
}

/// Everything an edit needs besides the models.
#[derive(Clone, Copy, Debug)]
pub struct EditRequest<'a> {
    pub x_src: &'a Tensor,
    pub p_src: Prompt,
    pub p_edit: Prompt,
    pub source_index: Option<usize>,
}

/// Guided reverse sampling from an existing inversion trajectory end.
pub fn edit_from_inversion(
    req: &EditRequest<'_>,
    z_end: &Tensor,
    models: &Models,
    guidance: &GuidanceConfig,
    pipeline: &PipelineConfig,
    mode: Mode,
) -> Result<EditResult> {
    if req.p_src == req.p_edit {
        return Err(Error::NothingToEdit);
    }
    let steps = pipeline.inference_steps;
    guidance.validate(steps)?;
    let ts = models.schedule.inference_timesteps(steps)?;
    let emb = embeddings(models, &req.p_src, &req.p_edit)?;
    let sched = &models.schedule;
    let mut z = z_end.clone();
    let mut records = Vec::with_capacity(ts.len());
    let mut trajectory = pipeline.retain_trajectory.then(|| vec![z.clone()]);

    for k in 0..ts.len() {
        let i = ts.len() - 1 - k;
        let (t, prev) = (ts[i], prev_timestep(&ts, i));
        let g = gate(k, guidance);
        let text_active = g.text_active && mode != Mode::NullText;
        let perceptual_active = g.perceptual_active && mode == Mode::TextOptPlusPerceptual;

        let eps = if text_active {
            let src = predict(models, &z, &emb.src, t)?;
            let null_needed =
                guidance.gamma != 1.0 || (guidance.variant == Variant::NullAnchor && guidance.beta != 0.0);
            let null = if null_needed {
                predict(models, &z, &emb.null, t)?
            } else {
                src.clone()
            };
            let edit = if guidance.beta != 0.0 {
                predict(models, &z, &emb.edit, t)?
            } else {
                src.clone()
            };
            compose(guidance.variant, &null, &src, &edit, guidance.gamma, guidance.beta)?
        } else {
            source_cfg(models, &emb, &z, t, guidance.gamma)?
        };

        let mut diag = None;
        match (perceptual_active, guidance.order) {
            (true, UpdateOrder::BeforeStep) => {
                let objective = PerceptualObjective {
                    t,
                    eps_pred: &eps,
                    x_src: req.x_src,
                    codec: &models.codec,
                    perceptual: &models.perceptual,
                    sched,
                };
                let (updated, d) = perceptual_update(&z, &objective, guidance)?;
                z = sched.ddim_step(&updated, &eps, t, prev)?;
                diag = Some(d);
            }
            (true, UpdateOrder::AfterStep) => {
                z = sched.ddim_step(&z, &eps, t, prev)?;
                // the final step lands on the virtual timestep, which has no Tweedie estimate to refine
                if let Some(tp) = prev {
                    let objective = PerceptualObjective {
                        t: tp,
                        eps_pred: &eps,
                        x_src: req.x_src,
                        codec: &models.codec,
                        perceptual: &models.perceptual,
                        sched,
                    };
                    let (updated, d) = perceptual_update(&z, &objective, guidance)?;
                    z = updated;
                    diag = Some(d);
                }
            }
            (false, _) => z = sched.ddim_step(&z, &eps, t, prev)?,
        }
        if let Some(tr) = trajectory.as_mut() {
            tr.push(z.clone());
        }
        records.push(StepRecord {
            step: k,
            t,
            text_active,
            perceptual_active,
            perceptual: diag,
        });
    }

    let edited = models.codec.decode(&z)?;
    let metrics = compute_metrics(req.x_src, &edited, &req.p_edit, models)?;
    Ok(EditResult {
        mode,
        source_index: req.source_index,
        src_prompt: req.p_src,
        edit_prompt: req.p_edit,
        source: req.x_src.clone(),
        edited,
        trajectory,
        steps: records,
        metrics,
    })
}

/// Invert `x_src` and edit it under one mode.
pub fn edit(
    req: &EditRequest<'_>,
    models: &Models,
    guidance: &GuidanceConfig,
    pipeline: &PipelineConfig,
    mode: Mode,
) -> Result<EditResult> {
    if req.p_src == req.p_edit {
        return Err(Error::NothingToEdit);
    }
    let traj = invert(
        req.x_src,
        &req.p_src,
        models,
        pipeline.inference_steps,
        pipeline.inversion,
        guidance.gamma,
    )?;
    edit_from_inversion(
        req,
        traj.last().expect("non-empty trajectory"),
        models,
        guidance,
        pipeline,
        mode,
    )
}

/// Invert once and edit under every mode, in [`Mode::ALL`] order.
pub fn edit_all_modes(
    req: &EditRequest<'_>,
    models: &Models,
    guidance: &GuidanceConfig,
    pipeline: &PipelineConfig,
) -> Result<Vec<EditResult>> {
    if req.p_src == req.p_edit {
        return Err(Error::NothingToEdit);
    }
    let traj = invert(
        req.x_src,
        &req.p_src,
        models,
        pipeline.inference_steps,
        pipeline.inversion,
        guidance.gamma,
    )?;
    let z_end = traj.last().expect("non-empty trajectory");
    Mode::ALL
        .iter()
        .map(|&m| edit_from_inversion(req, z_end, models, guidance, pipeline, m))
        .collect()
}

/// One held-out source image and a single-attribute edit of its prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct EditPair {
    pub source_index: usize,
    pub image: Tensor,
    pub src_prompt: Prompt,
    pub edit_prompt: Prompt,
}

/// Evaluation edits: one held-out image per prompt combination (cycling through
/// further samples if more are requested), with `slot` advanced to the next id.
pub fn default_edit_pairs(spec: &DatasetSpec, slot: usize, count: usize) -> Result<Vec<EditPair>> {
    let combos = Prompt::all_specified().len();
    let per = spec.eval_samples_per_combination;
    if per == 0 || count == 0 {
        return Err(Error::EmptyDataset);
    }
    let vocab = crate::prompt::VOCAB[slot] - 1;
    (0..count.min(combos * per))
        .map(|k| {
            let (combo, rep) = (k % combos, k / combos);
            let s = generate_sample(spec, Split::Eval, combo * per + rep)?;
            let id = s.prompt.slots()[slot];
            let edit_prompt = s.prompt.with_slot(slot, id % vocab + 1)?;
            Ok(EditPair {
                source_index: s.index,
                image: s.image,
                src_prompt: s.prompt,
                edit_prompt,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: Mode,
    pub n: usize,
    pub psnr_mean: f64,
    pub perceptual_mean: f64,
    pub alignment_mean: f64,
}

/// Per-mode metric means, rows in [`Mode::ALL`] order (absent modes skipped).
pub fn evaluate(results: &[EditResult]) -> Result<Vec<SummaryRow>> {
    let pairs: Vec<(Mode, Metrics)> = results.iter().map(|r| (r.mode, r.metrics)).collect();
    summarize(&pairs)
}

/// [`evaluate`] over bare `(mode, metrics)` pairs.
pub fn summarize(results: &[(Mode, Metrics)]) -> Result<Vec<SummaryRow>> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty result list".into()));
    }
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        let ms: Vec<&Metrics> = results.iter().filter(|(m, _)| *m == mode).map(|(_, r)| r).collect();
        if ms.is_empty() {
            continue;
        }
        let n = ms.len() as f64;
        rows.push(SummaryRow {
            mode,
            n: ms.len(),
            psnr_mean: ms.iter().map(|m| m.psnr).sum::<f64>() / n,
            perceptual_mean: ms.iter().map(|m| m.perceptual).sum::<f64>() / n,
            alignment_mean: ms.iter().map(|m| m.alignment).sum::<f64>() / n,
        });
    }
    Ok(rows)
}

/// One row of the per-edit detail table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub seed: u64,
    pub src_prompt: String,
    pub edit_prompt: String,
    pub source_index: Option<usize>,
    pub mode: Mode,
    pub psnr: f64,
    pub perceptual: f64,
    pub alignment: f64,
}

impl DetailRow {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            psnr: self.psnr,
            perceptual: self.perceptual,
            alignment: self.alignment,
        }
    }

    pub fn new(seed: u64, r: &EditResult) -> Self {
        Self {
            seed,
            src_prompt: r.src_prompt.to_string(),
            edit_prompt: r.edit_prompt.to_string(),
            source_index: r.source_index,
            mode: r.mode,
            psnr: r.metrics.psnr,
            perceptual: r.metrics.perceptual,
            alignment: r.metrics.alignment,
        }
    }
}

/// Per-step diagnostics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub t: usize,
    pub text_active: bool,
    pub perceptual_active: bool,
    pub objective_before: Option<f64>,
    pub objective_after: Option<f64>,
    pub accepted_steps: Option<usize>,
    pub halvings: Option<usize>,
    pub aborted: Option<String>,
}

impl From<&StepRecord> for StepRow {
    fn from(s: &StepRecord) -> Self {
        let d = s.perceptual.as_ref();
        Self {
            step: s.step,
            t: s.t,
            text_active: s.text_active,
            perceptual_active: s.perceptual_active,
            objective_before: d.and_then(|d| d.objective_before),
            objective_after: d.and_then(|d| d.objective_after),
            accepted_steps: d.map(|d| d.accepted_steps),
            halvings: d.map(|d| d.halvings),
            aborted: d.and_then(|d| d.aborted.clone()),
        }
    }
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned, R: std::io::Read>(input: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(csv_error)
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(mode: Mode, psnr: f64, perceptual: f64, alignment: f64) -> EditResult {
        let x = Tensor::zeros(&[1, 1, 4, 4]).unwrap();
        EditResult {
            mode,
            source_index: Some(0),
            src_prompt: Prompt::new(1, 1, 1).unwrap(),
            edit_prompt: Prompt::new(2, 1, 1).unwrap(),
            source: x.clone(),
            edited: x,
            trajectory: None,
            steps: vec![],
            metrics: Metrics {
                psnr,
                perceptual,
                alignment,
            },
        }
    }

    #[test]
    fn summary_rows_in_fixed_order() {
        let rs = vec![
            result(Mode::TextOptPlusPerceptual, 20.0, 0.1, 0.5),
            result(Mode::NullText, 30.0, 0.2, 0.1),
            result(Mode::TextOpt, 25.0, 0.3, 0.4),
            result(Mode::NullText, 40.0, 0.4, 0.3),
        ];
        let rows = evaluate(&rs).unwrap();
        let modes: Vec<Mode> = rows.iter().map(|r| r.mode).collect();
        assert_eq!(modes, Mode::ALL.to_vec());
        assert_eq!(rows[0].n, 2);
        assert_eq!(rows[0].psnr_mean, 35.0);
        assert!((rows[0].alignment_mean - 0.2).abs() < 1e-15);
        assert!(evaluate(&[]).is_err());
    }

    #[test]
    fn perfect_reconstruction_row() {
        let rows = evaluate(&[result(Mode::NullText, 99.0, 0.0, 1.0)]).unwrap();
        assert_eq!(rows[0].psnr_mean, 99.0);
        assert_eq!(rows[0].perceptual_mean, 0.0);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = evaluate(&[result(Mode::TextOpt, 1.0 / 3.0, 0.1 + 0.2, 2f64.sqrt())]).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("mode,n,psnr_mean,perceptual_mean,alignment_mean\n"));
        let back: Vec<SummaryRow> = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn modes_parse() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("perceptual".parse::<Mode>().is_err());
    }

    #[test]
    fn edit_pairs_change_exactly_one_slot() {
        let pairs = default_edit_pairs(&DatasetSpec::default(), 0, 36).unwrap();
        assert_eq!(pairs.len(), 36);
        for p in &pairs {
            assert_eq!(p.src_prompt.differing_slots(&p.edit_prompt), 1);
            assert_ne!(p.src_prompt.shape, p.edit_prompt.shape);
        }
        let mut srcs: Vec<Prompt> = pairs.iter().map(|p| p.src_prompt).collect();
        srcs.dedup();
        assert_eq!(srcs.len(), 36);
    }
}
