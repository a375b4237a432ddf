//! Image <-> latent encoder/decoder.
//!
//! `Identity` passes images through unchanged (decode clamps to [0, 1]).
//! `Autoencoder` is a small conv net with one 2x downsampling stage; its
//! decoder ends in `0.5 * (tanh(u) + 1)` so outputs stay in [0, 1] while
//! gradients stay non-zero at saturated pixels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{init_conv, Bound, Optimizer, OptimizerKind, ParamStore};
use crate::pipeline::dataset::batch;
use crate::tensor::Tensor;
use crate::train::{shuffled_batches, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    Identity,
    Autoencoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub latent_channels: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            mode: CodecMode::Autoencoder,
            latent_channels: 4,
            hidden: 16,
            epochs: 60,
            batch_size: 16,
            learning_rate: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    mode: CodecMode,
    image_size: usize,
    latent_channels: usize,
    hidden: usize,
    /// Multiplier applied to raw encoder output so latents have unit spread.
    latent_scale: f64,
    params: ParamStore,
}

impl Codec {
    pub fn identity(image_size: usize) -> Self {
        Self {
            mode: CodecMode::Identity,
            image_size,
            latent_channels: 1,
            hidden: 0,
            latent_scale: 1.0,
            params: ParamStore::new(),
        }
    }

    pub fn init(cfg: &CodecConfig, image_size: usize, seed: u64) -> Result<Self> {
        if cfg.mode == CodecMode::Identity {
            return Ok(Self::identity(image_size));
        }
        if !image_size.is_multiple_of(2) || cfg.latent_channels == 0 || cfg.hidden == 0 {
            return Err(Error::InvalidArgument(
                "autoencoder needs even image size and non-zero widths".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, c) = (cfg.hidden, cfg.latent_channels);
        let mut p = ParamStore::new();
        init_conv(&mut p, "enc1", 1, h, 3, 1.0, &mut rng);
        init_conv(&mut p, "enc2", h, h, 3, 1.0, &mut rng);
        init_conv(&mut p, "enc3", h, h, 3, 1.0, &mut rng);
        init_conv(&mut p, "enc_out", h, c, 3, 1.0, &mut rng);
        init_conv(&mut p, "dec1", c, h, 3, 1.0, &mut rng);
        init_conv(&mut p, "dec2", h, h, 3, 1.0, &mut rng);
        init_conv(&mut p, "dec3", h, h, 3, 1.0, &mut rng);
        init_conv(&mut p, "dec_out", h, 1, 3, 1.0, &mut rng);
        Ok(Self {
            mode: CodecMode::Autoencoder,
            image_size,
            latent_channels: c,
            hidden: h,
            latent_scale: 1.0,
            params: p,
        })
    }

    pub fn mode(&self) -> CodecMode {
        self.mode
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [1, self.image_size, self.image_size]
    }

    /// `[C, H, W]` of one latent.
    pub fn latent_shape(&self) -> [usize; 3] {
        match self.mode {
            CodecMode::Identity => self.image_shape(),
            CodecMode::Autoencoder => [self.latent_channels, self.image_size / 2, self.image_size / 2],
        }
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.image_shape() {
            let mut want = vec![s.first().copied().unwrap_or(1)];
            want.extend(self.image_shape());
            return Err(Error::shape("encode", s, &want));
        }
        check_pixel_range(x)
    }

    fn check_latents(&self, z: &[usize]) -> Result<()> {
        if z.len() != 4 || z[1..] != self.latent_shape() {
            let mut want = vec![z.first().copied().unwrap_or(1)];
            want.extend(self.latent_shape());
            return Err(Error::shape("decode", z, &want));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        match self.mode {
            CodecMode::Identity => Ok(x.clone()),
            CodecMode::Autoencoder => {
                let tape = Tape::untraced();
                let b = self.params.bind(&tape, false);
                Ok(self.encode_graph(&b, &tape.constant(x.clone()))?.value().clone())
            }
        }
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::untraced();
        Ok(self.decode_var(&tape.constant(z.clone()))?.value().clone())
    }

    /// Decode on `z`'s tape, differentiable with respect to `z`.
    pub fn decode_var<'t>(&self, z: &Var<'t>) -> Result<Var<'t>> {
        self.check_latents(z.shape())?;
        match self.mode {
            CodecMode::Identity => Ok(z.clamp(0.0, 1.0)),
            CodecMode::Autoencoder => {
                let b = self.params.bind(z.tape(), false);
                self.decode_graph(&b, z)
            }
        }
    }

    fn encode_graph<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = b.conv("enc1", x)?.silu();
        let h = b.conv("enc2", &h)?.silu();
        let h = h.avg_pool2()?;
        let h = b.conv("enc3", &h)?.silu();
        Ok(b.conv("enc_out", &h)?.scale(self.latent_scale))
    }

    fn decode_graph<'t>(&self, b: &Bound<'t>, z: &Var<'t>) -> Result<Var<'t>> {
        let z = z.scale(1.0 / self.latent_scale);
        let h = b.conv("dec1", &z)?.silu();
        let h = b.conv("dec2", &h)?.silu();
        let h = h.upsample2()?;
        let h = b.conv("dec3", &h)?.silu();
        let u = b.conv("dec_out", &h)?;
        Ok(u.tanh().add_scalar(1.0).scale(0.5))
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        let mode = match self.mode {
            CodecMode::Identity => "identity",
            CodecMode::Autoencoder => "autoencoder",
        };
        ck.meta.insert("codec.mode".into(), mode.into());
        ck.meta.insert("codec.image_size".into(), self.image_size.to_string());
        ck.meta
            .insert("codec.latent_channels".into(), self.latent_channels.to_string());
        ck.meta.insert("codec.hidden".into(), self.hidden.to_string());
        ck.meta.insert("codec.signature".into(), self.params.signature());
        ck.tensors
            .push(("codec.latent_scale".into(), Tensor::scalar(self.latent_scale)));
        self.params.extend_checkpoint(ck, "codec.net");
    }

    pub fn load_from(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Architecture(format!("checkpoint lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Architecture(format!("`{k}` is not an integer")))
        };
        let image_size = num("codec.image_size")?;
        match meta("codec.mode")?.as_str() {
            "identity" => Ok(Self::identity(image_size)),
            "autoencoder" => {
                let cfg = CodecConfig {
                    mode: CodecMode::Autoencoder,
                    latent_channels: num("codec.latent_channels")?,
                    hidden: num("codec.hidden")?,
                    ..Default::default()
                };
                let mut codec = Self::init(&cfg, image_size, 0)?;
                let params = ParamStore::from_checkpoint_prefix(ck, "codec.net");
                if params.signature() != codec.params.signature() || params.signature() != meta("codec.signature")? {
                    return Err(Error::Architecture(format!(
                        "codec parameters `{}` do not match architecture `{}`",
                        params.signature(),
                        codec.params.signature()
                    )));
                }
                if !params.is_finite() {
                    return Err(Error::NonFinite("codec checkpoint"));
                }
                codec.params = params;
                codec.latent_scale = ck
                    .get("codec.latent_scale")
                    .ok_or_else(|| Error::MissingParam("codec.latent_scale".into()))?
                    .item()?;
                Ok(codec)
            }
            other => Err(Error::Architecture(format!("unknown codec mode `{other}`"))),
        }
    }

    /// Mean squared reconstruction error over `images`.
    pub fn reconstruction_mse(&self, images: &[&Tensor]) -> Result<f64> {
        let x = batch(images)?;
        let y = self.decode(&self.encode(&x)?)?;
        Ok(y.sub(&x)?.square().mean_value())
    }
}

pub(crate) fn check_pixel_range(x: &Tensor) -> Result<()> {
    match x.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(Error::PixelOutOfRange {
            value: x.data()[index],
            index,
        }),
        None => Ok(()),
    }
}

/// Fit the autoencoder to `images` by pixel MSE, then rescale latents to unit
/// standard deviation over the training set.
pub fn train_codec(images: &[&Tensor], cfg: &CodecConfig, image_size: usize, seed: u64) -> Result<(Codec, TrainLog)> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut codec = Codec::init(cfg, image_size, seed)?;
    let mut log = TrainLog::default();
    if codec.mode == CodecMode::Identity {
        return Ok((codec, log));
    }
    for x in images {
        codec.check_images(x)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, &codec.params);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let mut count = 0;
        for idx in shuffled_batches(images.len(), cfg.batch_size, &mut rng) {
            let x = batch(&idx.iter().map(|&i| images[i]).collect::<Vec<_>>())?;
            let tape = Tape::new();
            let b = codec.params.bind(&tape, true);
            let xv = tape.constant(x);
            let z = codec.encode_graph(&b, &xv)?;
            let y = codec.decode_graph(&b, &z)?;
            let loss = y.sub(&xv)?.square().mean();
            let grads = tape.backward(&loss)?;
            opt.step(&mut codec.params, &b.gradients(&grads));
            total += loss.value().item()? * idx.len() as f64;
            count += idx.len();
        }
        log.epoch_losses.push(total / count as f64);
    }
    if !codec.params.is_finite() {
        return Err(Error::NonFinite("codec training"));
    }

    let x = batch(images)?;
    let z = codec.encode(&x)?;
    let mean = z.mean_value();
    let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.numel() as f64;
    if var > 0.0 {
        codec.latent_scale = 1.0 / var.sqrt();
    }
    Ok((codec, log))
}
