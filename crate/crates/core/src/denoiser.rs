//! Conditional noise-prediction network and its training loop.
//!
//! A small residual conv net over the latent with two 2x downsampling stages.
//! The prompt embedding (per-slot table rows summed, then an affine map) and a
//! sinusoidal timestep embedding are combined into a conditioning vector that
//! modulates every residual block with a per-channel scale and shift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{init_conv, init_linear, one_hot, sinusoidal_embedding, Bound, Optimizer, OptimizerKind, ParamStore};
use crate::prompt::{Prompt, VOCAB};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::train::{shuffled_batches, TrainLog};

const BLOCKS: [&str; 5] = ["r1", "r2", "r3", "r4", "r5"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub embed_dim: usize,
    pub width: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Probability of replacing a training prompt with the null prompt.
    pub null_prob: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            width: 32,
            time_dim: 32,
            cond_dim: 64,
            epochs: 120,
            batch_size: 32,
            learning_rate: 2e-3,
            optimizer: OptimizerKind::Adam,
            null_prob: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.width == 0 || self.time_dim < 2 || self.cond_dim == 0 {
            return Err(Error::InvalidArgument("denoiser dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.null_prob) {
            return Err(Error::InvalidArgument(format!(
                "null_prob must be in [0, 1], got {}",
                self.null_prob
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    latent_shape: [usize; 3],
    embed_dim: usize,
    width: usize,
    time_dim: usize,
    cond_dim: usize,
    params: ParamStore,
}

impl Denoiser {
    pub fn init(cfg: &DenoiserConfig, latent_shape: [usize; 3], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let [c, h, w] = latent_shape;
        if c == 0 || h == 0 || h % 4 != 0 || w % 4 != 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "latent spatial size must be a positive multiple of 4, got {latent_shape:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, wd) = (cfg.embed_dim, cfg.width);
        let mut p = ParamStore::new();
        for (s, &v) in VOCAB.iter().enumerate() {
            p.insert(format!("embed.table{s}"), Tensor::randn(&[v, e], &mut rng)?);
        }
        init_linear(&mut p, "embed.proj", e, e, &mut rng);
        init_linear(&mut p, "cond.t", cfg.time_dim, cfg.cond_dim, &mut rng);
        init_linear(&mut p, "cond.e", e, cfg.cond_dim, &mut rng);
        init_linear(&mut p, "cond.out", cfg.cond_dim, cfg.cond_dim, &mut rng);
        init_conv(&mut p, "conv_in", c, wd, 3, 1.0, &mut rng);
        for name in BLOCKS {
            init_conv(&mut p, &format!("{name}.c1"), wd, wd, 3, 1.0, &mut rng);
            init_linear(&mut p, &format!("{name}.mod"), cfg.cond_dim, 2 * wd, &mut rng);
            init_conv(&mut p, &format!("{name}.c2"), wd, wd, 3, 0.1, &mut rng);
        }
        init_conv(&mut p, "conv_out", wd, c, 3, 0.1, &mut rng);
        Ok(Self {
            latent_shape,
            embed_dim: e,
            width: wd,
            time_dim: cfg.time_dim,
            cond_dim: cfg.cond_dim,
            params: p,
        })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.latent_shape
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Prompt embedding `[1, embed_dim]`.
    pub fn embed(&self, p: &Prompt) -> Result<Tensor> {
        p.validate()?;
        let tape = Tape::untraced();
        let b = self.params.bind(&tape, false);
        Ok(embed_graph(&b, &[*p])?.value().clone())
    }

    /// Noise prediction for a batch `zt: [N, C, H, W]` sharing one embedding and timestep.
    pub fn predict_noise(&self, zt: &Tensor, e: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
        let n = self.check_latent(zt)?;
        if t >= sched.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: sched.steps(),
            });
        }
        if e.shape() != [1, self.embed_dim] {
            return Err(Error::shape("predict_noise", e.shape(), &[1, self.embed_dim]));
        }
        let emb = if n == 1 {
            e.clone()
        } else {
            Tensor::stack_rows(&vec![e.clone(); n])?
        };
        let tape = Tape::untraced();
        let b = self.params.bind(&tape, false);
        let out = self.forward(&b, &tape.constant(zt.clone()), &tape.constant(emb), &vec![t; n])?;
        Ok(out.value().clone())
    }

    fn check_latent(&self, zt: &Tensor) -> Result<usize> {
        let s = zt.shape();
        if s.len() != 4 || s[1..] != self.latent_shape {
            let mut want = vec![s.first().copied().unwrap_or(1)];
            want.extend(self.latent_shape);
            return Err(Error::shape("predict_noise", s, &want));
        }
        Ok(s[0])
    }

    fn forward<'t>(&self, b: &Bound<'t>, zt: &Var<'t>, emb: &Var<'t>, ts: &[usize]) -> Result<Var<'t>> {
        let tape = zt.tape();
        let temb = tape.constant(sinusoidal_embedding(ts, self.time_dim));
        let cond = b.linear("cond.t", &temb)?.add(&b.linear("cond.e", emb)?)?.silu();
        let cond = b.linear("cond.out", &cond)?.silu();

        let h = b.conv("conv_in", zt)?;
        let s1 = self.block(b, "r1", &h, &cond)?;
        let s2 = self.block(b, "r2", &s1.avg_pool2()?, &cond)?;
        let h = self.block(b, "r3", &s2.avg_pool2()?, &cond)?;
        let h = self.block(b, "r4", &h.upsample2()?.add(&s2)?, &cond)?;
        let h = self.block(b, "r5", &h.upsample2()?.add(&s1)?, &cond)?;
        b.conv("conv_out", &h.silu())
    }

    fn block<'t>(&self, b: &Bound<'t>, name: &str, h: &Var<'t>, cond: &Var<'t>) -> Result<Var<'t>> {
        let w = self.width;
        let a = b.conv(&format!("{name}.c1"), &h.silu())?;
        let m = b.linear(&format!("{name}.mod"), cond)?;
        let scale = m.slice(1, 0, w)?.add_scalar(1.0);
        let shift = m.slice(1, w, 2 * w)?;
        let a = a.channel_affine(&scale, &shift)?;
        let a = b.conv(&format!("{name}.c2"), &a.silu())?;
        h.add(&a)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        let shape: Vec<String> = self.latent_shape.iter().map(usize::to_string).collect();
        ck.meta.insert("denoiser.latent_shape".into(), shape.join("x"));
        ck.meta.insert("denoiser.embed_dim".into(), self.embed_dim.to_string());
        ck.meta.insert("denoiser.width".into(), self.width.to_string());
        ck.meta.insert("denoiser.time_dim".into(), self.time_dim.to_string());
        ck.meta.insert("denoiser.cond_dim".into(), self.cond_dim.to_string());
        ck.meta.insert("denoiser.signature".into(), self.params.signature());
        self.params.extend_checkpoint(ck, "denoiser.net");
    }

    pub fn load_from(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| Error::Architecture(format!("checkpoint lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Architecture(format!("`{k}` is not an integer")))
        };
        let dims: Vec<usize> = meta("denoiser.latent_shape")?
            .split('x')
            .map(|d| {
                d.parse()
                    .map_err(|_| Error::Architecture("bad denoiser.latent_shape".into()))
            })
            .collect::<Result<_>>()?;
        let latent_shape: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::Architecture("denoiser.latent_shape must have 3 dims".into()))?;
        let cfg = DenoiserConfig {
            embed_dim: num("denoiser.embed_dim")?,
            width: num("denoiser.width")?,
            time_dim: num("denoiser.time_dim")?,
            cond_dim: num("denoiser.cond_dim")?,
            ..Default::default()
        };
        let mut d = Self::init(&cfg, latent_shape, 0)?;
        let params = ParamStore::from_checkpoint_prefix(ck, "denoiser.net");
        if params.signature() != d.params.signature() || params.signature() != *meta("denoiser.signature")? {
            return Err(Error::Architecture(format!(
                "denoiser parameters `{}` do not match architecture `{}`",
                params.signature(),
                d.params.signature()
            )));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("denoiser checkpoint"));
        }
        d.params = params;
        Ok(d)
    }

    /// Mean squared noise-prediction error on `latents` with seeded timesteps and noise.
    pub fn noise_mse(&self, latents: &[&Tensor], prompts: &[Prompt], sched: &NoiseSchedule, seed: u64) -> Result<f64> {
        if latents.is_empty() || latents.len() != prompts.len() {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (zt, eps, ts) = noisy_batch(latents, sched, &mut rng)?;
        let tape = Tape::untraced();
        let b = self.params.bind(&tape, false);
        let emb = embed_graph(&b, prompts)?;
        let pred = self.forward(&b, &tape.constant(zt), &emb, &ts)?;
        Ok(pred.value().sub(&eps)?.square().mean_value())
    }
}

/// Summed per-slot table rows followed by the affine map, `[N, embed_dim]`.
fn embed_graph<'t>(b: &Bound<'t>, prompts: &[Prompt]) -> Result<Var<'t>> {
    let tape = b.get("embed.proj.w")?.tape();
    let mut acc: Option<Var<'t>> = None;
    for (s, &v) in VOCAB.iter().enumerate() {
        let ids: Vec<usize> = prompts.iter().map(|p| p.slots()[s]).collect();
        let rows = tape
            .constant(one_hot(&ids, v))
            .matmul(b.get(&format!("embed.table{s}"))?)?;
        acc = Some(match acc {
            None => rows,
            Some(a) => a.add(&rows)?,
        });
    }
    b.linear("embed.proj", &acc.expect("three slots"))
}

/// Per-sample uniform timesteps and standard normal noise applied to `latents`.
fn noisy_batch<R: Rng + ?Sized>(
    latents: &[&Tensor],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let mut zt = Vec::with_capacity(latents.len());
    let mut eps = Vec::with_capacity(latents.len());
    let mut ts = Vec::with_capacity(latents.len());
    for z0 in latents {
        let t = rng.gen_range(0..sched.steps());
        let e = Tensor::randn(z0.shape(), rng)?;
        zt.push(sched.add_noise(z0, &e, t)?);
        eps.push(e);
        ts.push(t);
    }
    Ok((Tensor::stack_rows(&zt)?, Tensor::stack_rows(&eps)?, ts))
}

/// Fit the denoiser by noise-prediction MSE with null-prompt dropout.
pub fn train_denoiser(
    latents: &[&Tensor],
    prompts: &[Prompt],
    sched: &NoiseSchedule,
    cfg: &DenoiserConfig,
    seed: u64,
) -> Result<(Denoiser, TrainLog)> {
    if latents.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if latents.len() != prompts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} latents but {} prompts",
            latents.len(),
            prompts.len()
        )));
    }
    for p in prompts {
        p.validate()?;
    }
    let s = latents[0].shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "training latents must be [1, C, H, W]".into(),
        });
    }
    let mut model = Denoiser::init(cfg, [s[1], s[2], s[3]], seed)?;
    for z in latents {
        model.check_latent(z)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model.params);
    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        let (mut total, mut count) = (0.0, 0);
        for idx in shuffled_batches(latents.len(), cfg.batch_size, &mut rng) {
            let z0: Vec<&Tensor> = idx.iter().map(|&i| latents[i]).collect();
            let ps: Vec<Prompt> = idx
                .iter()
                .map(|&i| {
                    if rng.gen::<f64>() < cfg.null_prob {
                        Prompt::NULL
                    } else {
                        prompts[i]
                    }
                })
                .collect();
            let (zt, eps, ts) = noisy_batch(&z0, sched, &mut rng)?;
            let tape = Tape::new();
            let b = model.params.bind(&tape, true);
            let emb = embed_graph(&b, &ps)?;
            let pred = model.forward(&b, &tape.constant(zt), &emb, &ts)?;
            let loss = pred.sub(&tape.constant(eps))?.square().mean();
            let grads = tape.backward(&loss)?;
            opt.step(&mut model.params, &b.gradients(&grads));
            total += loss.value().item()? * idx.len() as f64;
            count += idx.len();
        }
        log.epoch_losses.push(total / count as f64);
    }
    if !model.params.is_finite() {
        return Err(Error::NonFinite("denoiser training"));
    }
    Ok((model, log))
}

/// Deterministic DDIM sampling from seeded Gaussian noise under one prompt.
pub fn sample(
    model: &Denoiser,
    sched: &NoiseSchedule,
    prompt: &Prompt,
    count: usize,
    inference_steps: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let ts = sched.inference_timesteps(inference_steps)?;
    let e = model.embed(prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = model.latent_shape;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut z = Tensor::randn(&[1, c, h, w], &mut rng)?;
        for i in (0..ts.len()).rev() {
            let eps = model.predict_noise(&z, &e, ts[i], sched)?;
            let prev = if i == 0 { None } else { Some(ts[i - 1]) };
            z = sched.ddim_step(&z, &eps, ts[i], prev)?;
        }
        out.push(z);
    }
    Ok(out)
}
