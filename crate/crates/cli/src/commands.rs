use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dualguide_core::config::{
    codec_checkpoint, denoiser_checkpoint, fit_codec, fit_denoiser, fit_perceptual, load_codec, load_models,
    perceptual_checkpoint, training_set, RunConfig, CODEC_FILE, DENOISER_FILE, PERCEPTUAL_FILE,
};
use dualguide_core::perceptual::psnr;
use dualguide_core::pipeline::dataset::{generate_dataset, generate_sample, Split};
use dualguide_core::pipeline::{
    self as pipeline, default_edit_pairs, edit_all_modes, read_csv, reconstruct, summarize, write_csv, DetailRow,
    EditPair, EditRequest, EditResult, Mode, StepRow, SummaryRow,
};
use dualguide_core::prompt::Prompt;
use rayon::prelude::*;
use serde::Serialize;

use crate::output::{decode_pgm, encode_pgm, sha256_hex, strip, tensor_file, Panel, Staging};
use crate::settings::{config_hash, GuidanceFlags};
use crate::{Component, SplitArg};

const CHECKPOINT_FILES: [&str; 3] = [CODEC_FILE, DENOISER_FILE, PERCEPTUAL_FILE];

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("checkpoints")
}

/// sha256 of each checkpoint currently on disk (or staged), keyed by file name.
fn checkpoint_hashes(dir: &Path, staging: Option<&Staging>) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for name in CHECKPOINT_FILES {
        let path = dir.join(name);
        let bytes = match staging.and_then(|s| s.staged(&path)) {
            Some(b) => Some(b),
            None if path.exists() => Some(fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?),
            None => None,
        };
        if let Some(b) = bytes {
            out.insert(name.to_string(), sha256_hex(&b));
        }
    }
    Ok(out)
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(buf)
}

#[derive(Serialize)]
struct TrainManifest {
    config_sha256: String,
    seed: u64,
    trained: Vec<&'static str>,
    checkpoints: BTreeMap<String, String>,
    epoch_losses: BTreeMap<&'static str, Vec<f64>>,
}

pub fn train(cfg: RunConfig, component: Component) -> Result<()> {
    cfg.validate()?;
    let dir = checkpoint_dir(&cfg);
    let (images, prompts) = training_set(&cfg)?;
    let mut staging = Staging::new();
    let mut trained = Vec::new();
    let mut losses = BTreeMap::new();
    let want = |c: Component| component == Component::All || component == c;

    let mut codec = None;
    if want(Component::Codec) {
        eprintln!("training codec on {} images", images.len());
        let (c, log) = fit_codec(&cfg, &images)?;
        staging.write(&dir.join(CODEC_FILE), &codec_checkpoint(&c).to_bytes())?;
        trained.push("codec");
        losses.insert("codec", log.epoch_losses);
        codec = Some(c);
    }
    if want(Component::Denoiser) {
        let codec = match codec {
            Some(c) => c,
            None => load_codec(&dir)?,
        };
        eprintln!("training denoiser");
        let (d, log) = fit_denoiser(&cfg, &codec, &images, &prompts)?;
        staging.write(&dir.join(DENOISER_FILE), &denoiser_checkpoint(&d).to_bytes())?;
        trained.push("denoiser");
        losses.insert("denoiser", log.epoch_losses);
    }
    if want(Component::Perceptual) {
        eprintln!("training perceptual and alignment models");
        let (net, align, logs) = fit_perceptual(&cfg, &images, &prompts)?;
        staging.write(
            &dir.join(PERCEPTUAL_FILE),
            &perceptual_checkpoint(&net, &align).to_bytes(),
        )?;
        trained.push("perceptual");
        losses.insert("perceptual_classifier", logs.classifier.epoch_losses);
        losses.insert("alignment", logs.alignment.epoch_losses);
    }

    let manifest = TrainManifest {
        config_sha256: config_hash(&cfg),
        seed: cfg.seed,
        trained,
        checkpoints: checkpoint_hashes(&dir, Some(&staging))?,
        epoch_losses: losses,
    };
    staging.write(&cfg.output_dir.join("train_manifest.json"), &to_json(&manifest)?)?;
    for p in staging.commit()? {
        println!("{}", p.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct InvertManifest {
    config_sha256: String,
    seed: u64,
    checkpoints: BTreeMap<String, String>,
    source_index: usize,
    prompt: String,
    inference_steps: usize,
    psnr_db: f64,
}

fn invert_dir(cfg: &RunConfig, index: usize) -> PathBuf {
    cfg.output_dir.join("invert").join(format!("{index:03}"))
}

pub fn invert(mut cfg: RunConfig, index: usize, flags: &GuidanceFlags) -> Result<()> {
    flags.apply(&mut cfg);
    cfg.validate()?;
    let dir = checkpoint_dir(&cfg);
    let models = load_models(&cfg, &dir)?;
    let sample = generate_sample(&cfg.dataset, Split::Eval, index)?;
    let steps = cfg.schedule.inference_steps;
    let (how, gamma) = (cfg.pipeline.inversion, cfg.guidance.gamma);
    let traj = pipeline::invert(&sample.image, &sample.prompt, &models, steps, how, gamma)?;
    let z_end = traj.last().expect("trajectory has the encoding");
    let recon = reconstruct(z_end, &sample.prompt, &models, steps, how, gamma)?;
    let score = psnr(&sample.image, &recon, 1.0)?;

    let out = invert_dir(&cfg, index);
    let mut staging = Staging::new();
    staging.write(&out.join("source.pgm"), &encode_pgm(&sample.image)?)?;
    staging.write(&out.join("reconstruction.pgm"), &encode_pgm(&recon)?)?;
    staging.write(&out.join("latent.tensor"), &tensor_file("latent", z_end))?;
    let manifest = InvertManifest {
        config_sha256: config_hash(&cfg),
        seed: cfg.seed,
        checkpoints: checkpoint_hashes(&dir, None)?,
        source_index: index,
        prompt: sample.prompt.to_string(),
        inference_steps: steps,
        psnr_db: score,
    };
    staging.write(&out.join("manifest.json"), &to_json(&manifest)?)?;
    staging.commit()?;
    println!("{} psnr {score:.3} dB -> {}", sample.prompt, out.display());
    Ok(())
}

/// Directory name for one source/edit pair, e.g. `007_square-nw-high`.
fn edit_key(index: usize, edit_prompt: &Prompt) -> String {
    format!("{index:03}_{}", edit_prompt.to_string().replace('/', "-"))
}

#[derive(Serialize)]
struct EditManifest<'a> {
    config_sha256: &'a str,
    seed: u64,
    checkpoints: &'a BTreeMap<String, String>,
    mode: Mode,
    source_index: Option<usize>,
    src_prompt: String,
    edit_prompt: String,
    psnr: f64,
    perceptual: f64,
    alignment: f64,
}

fn stage_edit(
    staging: &mut Staging,
    root: &Path,
    cfg: &RunConfig,
    hash: &str,
    checkpoints: &BTreeMap<String, String>,
    r: &EditResult,
) -> Result<PathBuf> {
    let index = r.source_index.context("edit result lacks a source index")?;
    let dir = root.join(edit_key(index, &r.edit_prompt)).join(r.mode.as_str());
    staging.write(&dir.join("source.pgm"), &encode_pgm(&r.source)?)?;
    staging.write(&dir.join("edited.pgm"), &encode_pgm(&r.edited)?)?;
    staging.write(&dir.join("source.tensor"), &tensor_file("source", &r.source))?;
    staging.write(&dir.join("edited.tensor"), &tensor_file("edited", &r.edited))?;
    let steps: Vec<StepRow> = r.steps.iter().map(StepRow::from).collect();
    staging.write(&dir.join("steps.csv"), &csv_bytes(&steps)?)?;
    staging.write(&dir.join("result.csv"), &csv_bytes(&[DetailRow::new(cfg.seed, r)])?)?;
    let manifest = EditManifest {
        config_sha256: hash,
        seed: cfg.seed,
        checkpoints,
        mode: r.mode,
        source_index: r.source_index,
        src_prompt: r.src_prompt.to_string(),
        edit_prompt: r.edit_prompt.to_string(),
        psnr: r.metrics.psnr,
        perceptual: r.metrics.perceptual,
        alignment: r.metrics.alignment,
    };
    staging.write(&dir.join("manifest.json"), &to_json(&manifest)?)?;
    Ok(dir)
}

pub fn edit(
    mut cfg: RunConfig,
    index: usize,
    edit_prompt: Option<&str>,
    mode: &str,
    flags: &GuidanceFlags,
) -> Result<()> {
    flags.apply(&mut cfg);
    cfg.validate()?;
    let mode: Mode = mode.parse()?;
    let dir = checkpoint_dir(&cfg);
    let models = load_models(&cfg, &dir)?;
    let sample = generate_sample(&cfg.dataset, Split::Eval, index)?;
    let p_edit = match edit_prompt {
        Some(s) => s.parse::<Prompt>()?,
        None => {
            let slot = cfg.pipeline.edit_slot_index()?;
            let vocab = dualguide_core::prompt::VOCAB[slot] - 1;
            sample.prompt.with_slot(slot, sample.prompt.slots()[slot] % vocab + 1)?
        }
    };
    let req = EditRequest {
        x_src: &sample.image,
        p_src: sample.prompt,
        p_edit,
        source_index: Some(index),
    };
    let result = pipeline::edit(&req, &models, &cfg.guidance, &cfg.pipeline_config(), mode)?;
    let mut staging = Staging::new();
    let hash = config_hash(&cfg);
    let out = stage_edit(
        &mut staging,
        &cfg.output_dir.join("edits"),
        &cfg,
        &hash,
        &checkpoint_hashes(&dir, None)?,
        &result,
    )?;
    staging.commit()?;
    let m = result.metrics;
    println!(
        "{} -> {} [{mode}] psnr {:.3} perceptual {:.4} alignment {:.4} -> {}",
        sample.prompt,
        p_edit,
        m.psnr,
        m.perceptual,
        m.alignment,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalManifest {
    config_sha256: String,
    seed: u64,
    checkpoints: BTreeMap<String, String>,
    results_dir: String,
    edits: usize,
    summary: Vec<SummaryRow>,
}

fn run_batch(cfg: &RunConfig, root: &Path) -> Result<()> {
    let dir = checkpoint_dir(cfg);
    let models = load_models(cfg, &dir)?;
    let slot = cfg.pipeline.edit_slot_index()?;
    let pairs = default_edit_pairs(&cfg.dataset, slot, cfg.pipeline.edit_count)?;
    let pipeline = cfg.pipeline_config();
    eprintln!("editing {} pairs under {} modes", pairs.len(), Mode::ALL.len());
    // every pair is independent and deterministic, and collect keeps input order
    let results: Vec<Vec<EditResult>> = pairs
        .par_iter()
        .map(|p: &EditPair| {
            let req = EditRequest {
                x_src: &p.image,
                p_src: p.src_prompt,
                p_edit: p.edit_prompt,
                source_index: Some(p.source_index),
            };
            edit_all_modes(&req, &models, &cfg.guidance, &pipeline)
        })
        .collect::<dualguide_core::Result<_>>()?;
    let hash = config_hash(cfg);
    let ckpts = checkpoint_hashes(&dir, None)?;
    let mut staging = Staging::new();
    for r in results.iter().flatten() {
        stage_edit(&mut staging, root, cfg, &hash, &ckpts, r)?;
    }
    staging.commit()?;
    Ok(())
}

/// Result rows and edited images for one edit key, in [`Mode::ALL`] order.
fn load_key(dir: &Path) -> Result<(Vec<DetailRow>, Vec<Panel>)> {
    let present: Vec<&str> = Mode::ALL
        .iter()
        .map(|m| m.as_str())
        .filter(|m| dir.join(m).join("result.csv").exists())
        .collect();
    if present.len() != Mode::ALL.len() {
        bail!(
            "{} is missing modes; present: [{}], expected: [{}]",
            dir.display(),
            present.join(", "),
            Mode::ALL.map(|m| m.as_str()).join(", ")
        );
    }
    let mut rows = Vec::new();
    let source = fs::read(dir.join(Mode::ALL[0].as_str()).join("source.pgm"))?;
    let mut panels = vec![decode_pgm(&source)?];
    for m in Mode::ALL {
        let d = dir.join(m.as_str());
        let f = fs::File::open(d.join("result.csv")).with_context(|| format!("cannot open {}", d.display()))?;
        let mut r: Vec<DetailRow> = read_csv(f).with_context(|| format!("bad result.csv in {}", d.display()))?;
        if r.len() != 1 || r[0].mode != m {
            bail!("{} must hold exactly one {m} row", d.join("result.csv").display());
        }
        rows.append(&mut r);
        let img = fs::read(d.join("edited.pgm")).with_context(|| format!("cannot read {}/edited.pgm", d.display()))?;
        panels.push(decode_pgm(&img)?);
    }
    Ok((rows, panels))
}

pub fn eval(mut cfg: RunConfig, results: Option<PathBuf>, run: bool, flags: &GuidanceFlags) -> Result<()> {
    flags.apply(&mut cfg);
    cfg.validate()?;
    let root = results.unwrap_or_else(|| cfg.output_dir.join("edits"));
    if run {
        run_batch(&cfg, &root)?;
    }
    let mut keys: Vec<PathBuf> = fs::read_dir(&root)
        .with_context(|| format!("cannot read results directory {}", root.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    keys.retain(|p| p.is_dir());
    keys.sort();
    if keys.is_empty() {
        bail!("no edit results under {}", root.display());
    }

    let out = cfg.output_dir.join("eval");
    let mut staging = Staging::new();
    let mut details = Vec::new();
    for key in &keys {
        let (mut rows, panels) = load_key(key)?;
        let name = key.file_name().expect("directory entry").to_string_lossy();
        staging.write(&out.join("strips").join(format!("{name}.pgm")), &strip(&panels)?)?;
        details.append(&mut rows);
    }
    let pairs: Vec<_> = details.iter().map(|r| (r.mode, r.metrics())).collect();
    let summary = summarize(&pairs)?;
    staging.write(&out.join("details.csv"), &csv_bytes(&details)?)?;
    staging.write(&out.join("summary.csv"), &csv_bytes(&summary)?)?;
    let manifest = EvalManifest {
        config_sha256: config_hash(&cfg),
        seed: cfg.seed,
        checkpoints: checkpoint_hashes(&checkpoint_dir(&cfg), None)?,
        // relative when possible so the manifest does not depend on where the run lives
        results_dir: root
            .strip_prefix(&cfg.output_dir)
            .unwrap_or(&root)
            .display()
            .to_string(),
        edits: keys.len(),
        summary: summary.clone(),
    };
    staging.write(&out.join("manifest.json"), &to_json(&manifest)?)?;
    staging.commit()?;

    println!(
        "{:<26} {:>4} {:>9} {:>11} {:>10}",
        "mode", "n", "psnr", "perceptual", "alignment"
    );
    for r in &summary {
        println!(
            "{:<26} {:>4} {:>9.3} {:>11.4} {:>10.4}",
            r.mode.as_str(),
            r.n,
            r.psnr_mean,
            r.perceptual_mean,
            r.alignment_mean
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct IndexRow {
    index: usize,
    prompt: String,
    file: String,
}

pub fn dataset(cfg: RunConfig, split: SplitArg) -> Result<()> {
    cfg.dataset.validate()?;
    let (split, name) = match split {
        SplitArg::Train => (Split::Train, "train"),
        SplitArg::Eval => (Split::Eval, "eval"),
    };
    let out = cfg.output_dir.join("dataset").join(name);
    let mut staging = Staging::new();
    let mut index = Vec::new();
    for s in generate_dataset(&cfg.dataset, split)? {
        let file = format!("{:04}.pgm", s.index);
        staging.write(&out.join(&file), &encode_pgm(&s.image)?)?;
        index.push(IndexRow {
            index: s.index,
            prompt: s.prompt.to_string(),
            file,
        });
    }
    staging.write(&out.join("index.csv"), &csv_bytes(&index)?)?;
    staging.commit()?;
    println!("{} images -> {}", index.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_keys_are_path_safe() {
        let p: Prompt = "square/nw/high".parse().unwrap();
        assert_eq!(edit_key(7, &p), "007_square-nw-high");
    }
}
