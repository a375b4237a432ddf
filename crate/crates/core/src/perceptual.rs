//! Perceptual distance, PSNR and a two-tower prompt alignment score.
//!
//! The perceptual feature net is a three-stage conv trunk trained as an
//! attribute classifier. Distances compare per-channel L2-normalised feature
//! maps, weighted and summed over channels, averaged over positions and
//! summed over stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::codec::check_pixel_range;
use crate::error::{Error, Result};
use crate::nn::{init_conv, init_linear, one_hot, Bound, Optimizer, OptimizerKind, ParamStore};
use crate::pipeline::dataset::batch;
use crate::prompt::{Prompt, VOCAB};
use crate::tensor::Tensor;
use crate::train::{shuffled_batches, TrainLog};

pub const PSNR_CAP_DB: f64 = 99.0;

const STAGE_WIDTHS: [usize; 3] = [8, 16, 32];
const NORM_EPS: f64 = 1e-10;
const UNIT_EPS: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trunk {
    /// Trunk trained as an attribute classifier.
    Trained,
    /// Fixed random weights.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub trunk: Trunk,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub align_epochs: usize,
    pub align_dim: usize,
    pub align_learning_rate: f64,
    pub temperature: f64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            trunk: Trunk::Trained,
            epochs: 15,
            batch_size: 32,
            learning_rate: 3e-3,
            align_epochs: 30,
            align_dim: 16,
            align_learning_rate: 3e-3,
            temperature: 0.1,
        }
    }
}

/// `10 log10(max^2 / mse)`, capped at [`PSNR_CAP_DB`] when the images are equal.
pub fn psnr(x: &Tensor, y: &Tensor, max_value: f64) -> Result<f64> {
    if !(max_value > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "max_value must be positive, got {max_value}"
        )));
    }
    let mse = x.sub(y)?.square().mean_value();
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualNet {
    image_size: usize,
    params: ParamStore,
    /// Non-negative per-channel weights, one vector per stage.
    channel_weights: [Tensor; 3],
}

impl PerceptualNet {
    pub fn init(image_size: usize, seed: u64) -> Result<Self> {
        if image_size == 0 || !image_size.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "perceptual net needs an image size divisible by 4, got {image_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut prev = 1;
        for (i, &w) in STAGE_WIDTHS.iter().enumerate() {
            init_conv(&mut p, &format!("s{}", i + 1), prev, w, 3, 1.0, &mut rng);
            prev = w;
        }
        let flat = STAGE_WIDTHS[2] * (image_size / 4) * (image_size / 4);
        for (name, &v) in ["head.shape", "head.position", "head.intensity"]
            .iter()
            .zip(VOCAB.iter())
        {
            init_linear(&mut p, name, flat, v - 1, &mut rng);
        }
        Ok(Self {
            image_size,
            params: p,
            channel_weights: STAGE_WIDTHS.map(|w| Tensor::ones(&[w]).expect("positive")),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn channel_weights(&self) -> &[Tensor; 3] {
        &self.channel_weights
    }

    pub fn set_channel_weights(&mut self, weights: [Tensor; 3]) -> Result<()> {
        for (w, &c) in weights.iter().zip(STAGE_WIDTHS.iter()) {
            if w.shape() != [c] {
                return Err(Error::shape("channel_weights", w.shape(), &[c]));
            }
            if w.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(
                    "channel weights must be finite and non-negative".into(),
                ));
            }
        }
        self.channel_weights = weights;
        Ok(())
    }

    fn check(&self, x: &[usize]) -> Result<()> {
        let want = [1, self.image_size, self.image_size];
        if x.len() != 4 || x[1..] != want {
            return Err(Error::shape(
                "perceptual",
                x,
                &[x.first().copied().unwrap_or(1), 1, self.image_size, self.image_size],
            ));
        }
        Ok(())
    }

    fn features<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Result<[Var<'t>; 3]> {
        let f1 = b.conv("s1", x)?.silu();
        let f2 = b.conv("s2", &f1.avg_pool2()?)?.silu();
        let f3 = b.conv("s3", &f2.avg_pool2()?)?.silu();
        Ok([f1, f2, f3])
    }

    fn logits<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Result<[Var<'t>; 3]> {
        let [_, _, f3] = self.features(b, x)?;
        let n = x.shape()[0];
        let flat = f3.reshape(&[n, f3.value().numel() / n])?;
        Ok([
            b.linear("head.shape", &flat)?,
            b.linear("head.position", &flat)?,
            b.linear("head.intensity", &flat)?,
        ])
    }

    /// Distance between `x` (on any tape) and the constant image `y`, batch-averaged.
    pub fn distance_var<'t>(&self, x: &Var<'t>, y: &Tensor) -> Result<Var<'t>> {
        self.check(x.shape())?;
        if x.shape() != y.shape() {
            return Err(Error::shape("perceptual_distance", x.shape(), y.shape()));
        }
        check_pixel_range(x.value())?;
        check_pixel_range(y)?;
        let tape = x.tape();
        let b = self.params.bind(tape, false);
        let fx = self.features(&b, x)?;
        let fy = self.features(&b, &tape.constant(y.clone()))?;
        let n = x.shape()[0];
        let mut total: Option<Var<'t>> = None;
        for ((a, c), w) in fx.iter().zip(fy.iter()).zip(self.channel_weights.iter()) {
            let d = a
                .l2_normalize_channels(NORM_EPS)?
                .sub(&c.l2_normalize_channels(NORM_EPS)?)?
                .square();
            let rows = vec![w.reshape(&[1, w.numel()])?; n];
            let w = tape.constant(Tensor::stack_rows(&rows)?);
            let zero = tape.constant(Tensor::zeros(w.shape())?);
            // weighted sum over channels, mean over positions and batch
            let channels = d.shape()[1] as f64;
            let stage = d.channel_affine(&w, &zero)?.mean().scale(channels);
            total = Some(match total {
                None => stage,
                Some(t) => t.add(&stage)?,
            });
        }
        Ok(total.expect("three stages"))
    }

    pub fn distance(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let tape = Tape::untraced();
        self.distance_var(&tape.constant(x.clone()), y)?.value().item()
    }

    /// Top-1 accuracy over all three attribute heads (a sample counts only if all are right).
    pub fn classifier_accuracy(&self, images: &[&Tensor], prompts: &[Prompt]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let tape = Tape::untraced();
        let b = self.params.bind(&tape, false);
        let logits = self.logits(&b, &tape.constant(batch(images)?))?;
        let mut correct = 0;
        for (i, p) in prompts.iter().enumerate() {
            let ok = logits.iter().zip(p.slots()).all(|(l, truth)| {
                let k = l.shape()[1];
                let row = &l.value().data()[i * k..(i + 1) * k];
                let best = (0..k).fold(0, |m, j| if row[j] > row[m] { j } else { m });
                best + 1 == truth
            });
            correct += ok as usize;
        }
        Ok(correct as f64 / images.len() as f64)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.meta
            .insert("perceptual.image_size".into(), self.image_size.to_string());
        ck.meta.insert("perceptual.signature".into(), self.params.signature());
        self.params.extend_checkpoint(ck, "perceptual.net");
        for (i, w) in self.channel_weights.iter().enumerate() {
            ck.tensors
                .push((format!("perceptual.channel_weights.s{}", i + 1), w.clone()));
        }
    }

    pub fn load_from(ck: &Checkpoint) -> Result<Self> {
        let size: usize = ck
            .meta
            .get("perceptual.image_size")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Architecture("checkpoint lacks `perceptual.image_size`".into()))?;
        let mut net = Self::init(size, 0)?;
        let params = ParamStore::from_checkpoint_prefix(ck, "perceptual.net");
        if params.signature() != net.params.signature() {
            return Err(Error::Architecture(format!(
                "perceptual parameters `{}` do not match architecture `{}`",
                params.signature(),
                net.params.signature()
            )));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("perceptual checkpoint"));
        }
        let mut weights = Vec::new();
        for i in 1..=3 {
            let name = format!("perceptual.channel_weights.s{i}");
            weights.push(ck.get(&name).ok_or(Error::MissingParam(name))?.clone());
        }
        net.params = params;
        net.set_channel_weights(weights.try_into().expect("three stages"))?;
        Ok(net)
    }
}

/// Two-tower image/prompt embedding model with unit-norm outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentModel {
    image_size: usize,
    dim: usize,
    trained: bool,
    params: ParamStore,
}

impl AlignmentModel {
    pub fn init(image_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if image_size == 0 || !image_size.is_multiple_of(4) || dim == 0 {
            return Err(Error::InvalidArgument(
                "alignment model needs image size divisible by 4 and dim > 0".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        init_conv(&mut p, "img.c1", 1, 8, 3, 1.0, &mut rng);
        init_conv(&mut p, "img.c2", 8, 16, 3, 1.0, &mut rng);
        init_linear(
            &mut p,
            "img.proj",
            16 * (image_size / 4) * (image_size / 4),
            dim,
            &mut rng,
        );
        for (s, &v) in VOCAB.iter().enumerate() {
            p.insert(format!("txt.table{s}"), Tensor::randn(&[v, dim], &mut rng)?);
        }
        init_linear(&mut p, "txt.proj", dim, dim, &mut rng);
        Ok(Self {
            image_size,
            dim,
            trained: false,
            params: p,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn image_graph<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let want = [1, self.image_size, self.image_size];
        if x.shape().len() != 4 || x.shape()[1..] != want {
            return Err(Error::shape(
                "alignment image",
                x.shape(),
                &[1, 1, self.image_size, self.image_size],
            ));
        }
        let n = x.shape()[0];
        let h = b.conv("img.c1", x)?.silu().avg_pool2()?;
        let h = b.conv("img.c2", &h)?.silu().avg_pool2()?;
        let flat = h.reshape(&[n, h.value().numel() / n])?;
        b.linear("img.proj", &flat)?.l2_normalize_rows(UNIT_EPS)
    }

    fn prompt_graph<'t>(&self, b: &Bound<'t>, prompts: &[Prompt]) -> Result<Var<'t>> {
        let tape = b.get("txt.proj.w")?.tape();
        let mut acc: Option<Var<'t>> = None;
        for (s, &v) in VOCAB.iter().enumerate() {
            let ids: Vec<usize> = prompts.iter().map(|p| p.slots()[s]).collect();
            let rows = tape
                .constant(one_hot(&ids, v))
                .matmul(b.get(&format!("txt.table{s}"))?)?;
            acc = Some(match acc {
                None => rows,
                Some(a) => a.add(&rows)?,
            });
        }
        b.linear("txt.proj", &acc.expect("three slots"))?
            .l2_normalize_rows(UNIT_EPS)
    }

    /// Unit-norm image embeddings `[N, dim]`.
    pub fn embed_images(&self, x: &Tensor) -> Result<Tensor> {
        check_pixel_range(x)?;
        let tape = Tape::untraced();
        let b = self.params.bind(&tape, false);
        Ok(self.image_graph(&b, &tape.constant(x.clone()))?.value().clone())
    }

    /// Unit-norm prompt embeddings `[N, dim]`.
    pub fn embed_prompts(&self, prompts: &[Prompt]) -> Result<Tensor> {
        for p in prompts {
            p.validate()?;
        }
        let tape = Tape::untraced();
        let b = self.params.bind(&tape, false);
        Ok(self.prompt_graph(&b, prompts)?.value().clone())
    }

    /// Cosine similarity between one image `[1, 1, S, S]` and a prompt.
    pub fn score(&self, x: &Tensor, p: &Prompt) -> Result<f64> {
        if !self.trained {
            return Err(Error::InvalidArgument("alignment model has not been trained".into()));
        }
        if x.shape().first() != Some(&1) {
            return Err(Error::shape(
                "alignment_score",
                x.shape(),
                &[1, 1, self.image_size, self.image_size],
            ));
        }
        Ok(cosine(&self.embed_images(x)?, &self.embed_prompts(&[*p])?))
    }

    /// Mean matched score minus mean mismatched score over `(image, prompt)` pairs.
    pub fn margin(&self, images: &[&Tensor], prompts: &[Prompt]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let all = Prompt::all_specified();
        let txt = self.embed_prompts(&all)?;
        let img = self.embed_images(&batch(images)?)?;
        let sims = img.matmul(&txt.transpose()?)?;
        let k = all.len();
        let (mut matched, mut mismatched, mut nm) = (0.0, 0.0, 0);
        for (i, p) in prompts.iter().enumerate() {
            for (j, q) in all.iter().enumerate() {
                let s = sims.data()[i * k + j];
                if p == q {
                    matched += s;
                } else {
                    mismatched += s;
                    nm += 1;
                }
            }
        }
        Ok(matched / prompts.len() as f64 - mismatched / nm as f64)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.meta
            .insert("alignment.image_size".into(), self.image_size.to_string());
        ck.meta.insert("alignment.dim".into(), self.dim.to_string());
        ck.meta.insert("alignment.trained".into(), self.trained.to_string());
        ck.meta.insert("alignment.signature".into(), self.params.signature());
        self.params.extend_checkpoint(ck, "alignment.net");
    }

    pub fn load_from(ck: &Checkpoint) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            ck.meta
                .get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Architecture(format!("checkpoint lacks `{k}`")))
        };
        let mut m = Self::init(num("alignment.image_size")?, num("alignment.dim")?, 0)?;
        let params = ParamStore::from_checkpoint_prefix(ck, "alignment.net");
        if params.signature() != m.params.signature() {
            return Err(Error::Architecture(format!(
                "alignment parameters `{}` do not match architecture `{}`",
                params.signature(),
                m.params.signature()
            )));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("alignment checkpoint"));
        }
        m.params = params;
        m.trained = ck.meta.get("alignment.trained").map(String::as_str) == Some("true");
        Ok(m)
    }
}

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerceptualLogs {
    pub classifier: TrainLog,
    pub alignment: TrainLog,
}

/// Train the classifier trunk (unless a random trunk is requested) and the
/// alignment towers.
pub fn train_perceptual(
    images: &[&Tensor],
    prompts: &[Prompt],
    cfg: &PerceptualConfig,
    seed: u64,
) -> Result<(PerceptualNet, AlignmentModel, PerceptualLogs)> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if images.len() != prompts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} prompts",
            images.len(),
            prompts.len()
        )));
    }
    let size = images[0].shape().last().copied().unwrap_or(0);
    for (x, p) in images.iter().zip(prompts) {
        check_pixel_range(x)?;
        if p.slots().contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "training prompt {p} is not fully specified"
            )));
        }
    }
    let mut logs = PerceptualLogs::default();
    let mut net = PerceptualNet::init(size, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    if cfg.trunk == Trunk::Trained {
        let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, &net.params);
        for _ in 0..cfg.epochs {
            let (mut total, mut count) = (0.0, 0);
            for idx in shuffled_batches(images.len(), cfg.batch_size, &mut rng) {
                let x = batch(&idx.iter().map(|&i| images[i]).collect::<Vec<_>>())?;
                let tape = Tape::new();
                let b = net.params.bind(&tape, true);
                let logits = net.logits(&b, &tape.constant(x))?;
                let mut loss: Option<Var> = None;
                for (s, l) in logits.iter().enumerate() {
                    let ids: Vec<usize> = idx.iter().map(|&i| prompts[i].slots()[s] - 1).collect();
                    let target = tape.constant(one_hot(&ids, VOCAB[s] - 1));
                    let ce = l.log_softmax_rows()?.mul(&target)?.sum().scale(-1.0 / idx.len() as f64);
                    loss = Some(match loss {
                        None => ce,
                        Some(acc) => acc.add(&ce)?,
                    });
                }
                let loss = loss.expect("three heads");
                let grads = tape.backward(&loss)?;
                opt.step(&mut net.params, &b.gradients(&grads));
                total += loss.value().item()? * idx.len() as f64;
                count += idx.len();
            }
            logs.classifier.epoch_losses.push(total / count as f64);
        }
        if !net.params.is_finite() {
            return Err(Error::NonFinite("classifier training"));
        }
    }

    let mut align = AlignmentModel::init(size, cfg.align_dim, seed.wrapping_add(2))?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.align_learning_rate, &align.params);
    let inv_tau = 1.0 / cfg.temperature;
    for _ in 0..cfg.align_epochs {
        let (mut total, mut count) = (0.0, 0);
        for idx in shuffled_batches(images.len(), cfg.batch_size, &mut rng) {
            let n = idx.len();
            let x = batch(&idx.iter().map(|&i| images[i]).collect::<Vec<_>>())?;
            let ps: Vec<Prompt> = idx.iter().map(|&i| prompts[i]).collect();
            // soft targets: every batch entry with the same prompt is a positive
            let mut target = vec![0.0; n * n];
            for i in 0..n {
                let pos: Vec<usize> = (0..n).filter(|&j| ps[j] == ps[i]).collect();
                for &j in &pos {
                    target[i * n + j] = 1.0 / pos.len() as f64;
                }
            }
            let tape = Tape::new();
            let b = align.params.bind(&tape, true);
            let img = align.image_graph(&b, &tape.constant(x))?;
            let txt = align.prompt_graph(&b, &ps)?;
            let logits = img.matmul(&txt.transpose()?)?.scale(inv_tau);
            let target = tape.constant(Tensor::new(vec![n, n], target)?);
            let i2t = logits.log_softmax_rows()?.mul(&target)?.sum();
            let t2i = logits.transpose()?.log_softmax_rows()?.mul(&target)?.sum();
            let loss = i2t.add(&t2i)?.scale(-0.5 / n as f64);
            let grads = tape.backward(&loss)?;
            opt.step(&mut align.params, &b.gradients(&grads));
            total += loss.value().item()? * n as f64;
            count += n;
        }
        logs.alignment.epoch_losses.push(total / count as f64);
    }
    if !align.params.is_finite() {
        return Err(Error::NonFinite("alignment training"));
    }
    align.trained = true;
    Ok((net, align, logs))
}
