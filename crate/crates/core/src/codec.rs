//! Per-frame convolutional autoencoder mapping RGB frames to 4-channel
//! latents at a quarter of the resolution.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::denoiser::conv_params;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{clip_global_norm, Adam, Graph, ParamStore, Trainable};
use crate::schedule::LatentSequence;
use crate::tensor::Tensor;
use crate::video::{derive_rng, VideoSegment};

/// Spatial downsampling factor of the encoder.
pub const CODEC_FACTOR: usize = 4;
pub const LATENT_CHANNELS: usize = 4;
const SCALE_PARAM: &str = "latent_scale";

#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    hidden: usize,
    params: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay of the learning rate down to this fraction.
    pub final_lr_fraction: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 40,
            batch_size: 8,
            learning_rate: 1.5e-3,
            final_lr_fraction: 0.05,
        }
    }
}

impl Codec {
    pub fn init(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(invalid!("codec hidden width must be positive"));
        }
        let mut p = ParamStore::new();
        conv_params(&mut p, "enc.conv_in", 3, hidden, 3, false, seed);
        conv_params(&mut p, "enc.down.0", hidden, hidden, 3, false, seed);
        conv_params(&mut p, "enc.down.1", hidden, hidden, 3, false, seed);
        conv_params(&mut p, "enc.conv_out", hidden, LATENT_CHANNELS, 3, false, seed);
        conv_params(&mut p, "dec.conv_in", LATENT_CHANNELS, hidden, 3, false, seed);
        // Transposed-conv weights are (C_in, C_out, k, k).
        for i in 0..2 {
            let name = format!("dec.up.{i}");
            let mut rng = derive_rng(seed, &name);
            p.insert(
                format!("{name}.weight"),
                crate::nn::he_normal(&[hidden, hidden, 4, 4], hidden * 4, &mut rng),
            );
            p.insert(format!("{name}.bias"), Tensor::zeros(&[hidden]));
        }
        conv_params(&mut p, "dec.conv_out", hidden, 3, 3, false, seed);
        p.insert(SCALE_PARAM, Tensor::full(&[1], 1.0));
        Ok(Self { hidden, params: p })
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let hidden = params
            .get("enc.conv_in.weight")
            .map(|w| w.dim(0))
            .ok_or_else(|| invalid!("codec parameters lack `enc.conv_in.weight`"))?;
        let reference = Self::init(hidden, 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(invalid!("codec parameter `{name}` missing or misshapen")),
            }
        }
        if params.len() != reference.params.len() {
            return Err(invalid!("codec parameter set has unexpected entries"));
        }
        Ok(Self { hidden, params })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Multiplier applied to raw encoder output so latents have roughly unit
    /// spread.
    pub fn latent_scale(&self) -> f64 {
        self.params.get(SCALE_PARAM).map(|t| t.data()[0]).unwrap_or(1.0)
    }

    /// Unscaled encoder, x (N, 3, H, W) -> (N, 4, H/4, W/4).
    pub fn encode_graph(g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = conv(g, x, "enc.conv_in", 1, 1)?;
        for i in 0..2 {
            h = g.silu(h);
            h = conv(g, h, &format!("enc.down.{i}"), 2, 1)?;
        }
        h = g.silu(h);
        conv(g, h, "enc.conv_out", 1, 1)
    }

    /// Unscaled, unclamped decoder.
    pub fn decode_graph(g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let mut h = conv(g, z, "dec.conv_in", 1, 1)?;
        for i in 0..2 {
            h = g.silu(h);
            let w = g.p(&format!("dec.up.{i}.weight"))?;
            let b = g.p(&format!("dec.up.{i}.bias"))?;
            h = g.conv_transpose2d(h, w, Some(b), 2, 1)?;
        }
        h = g.silu(h);
        conv(g, h, "dec.conv_out", 1, 1)
    }

    pub fn encode_frames(&self, frames: &Tensor) -> Result<Tensor> {
        check_pixels(frames)?;
        let mut g = Graph::frozen(&self.params);
        let x = g.constant(frames.clone());
        let z = Self::encode_graph(&mut g, x)?;
        let s = self.latent_scale();
        Ok(g.value(z).map(|v| v * s))
    }

    pub fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 4 || z.dim(1) != LATENT_CHANNELS {
            return Err(shape_err!(
                "latents must be (L, {}, h, w), got {:?}",
                LATENT_CHANNELS,
                z.shape()
            ));
        }
        let mut g = Graph::frozen(&self.params);
        let s = self.latent_scale();
        let zv = g.constant(z.map(|v| v / s));
        let x = Self::decode_graph(&mut g, zv)?;
        g.ensure_finite(x, "codec decoder")?;
        Ok(g.value(x).map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn encode(&self, frames: &VideoSegment) -> Result<LatentSequence> {
        LatentSequence::new(self.encode_frames(frames.frames())?)
    }

    pub fn decode(&self, z: &LatentSequence) -> Result<VideoSegment> {
        VideoSegment::new(self.decode_latents(z.data())?, "decoded", 0)
    }
}

pub fn encode(frames: &VideoSegment, codec: &Codec) -> Result<LatentSequence> {
    codec.encode(frames)
}

pub fn decode(z: &LatentSequence, codec: &Codec) -> Result<VideoSegment> {
    codec.decode(z)
}

fn check_pixels(frames: &Tensor) -> Result<()> {
    if frames.rank() != 4 || frames.dim(1) != 3 {
        return Err(shape_err!("frames must be (L, 3, H, W), got {:?}", frames.shape()));
    }
    let (h, w) = (frames.dim(2), frames.dim(3));
    if h % CODEC_FACTOR != 0 || w % CODEC_FACTOR != 0 || h == 0 || w == 0 {
        return Err(shape_err!(
            "frame size {h}x{w} is not divisible by the codec factor {CODEC_FACTOR}"
        ));
    }
    Ok(())
}

fn conv(g: &mut Graph<'_>, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
    let w = g.p(&format!("{prefix}.weight"))?;
    let b = g.p(&format!("{prefix}.bias"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

fn is_network_param(name: &str) -> bool {
    name != SCALE_PARAM
}

/// Result of codec pre-training.
#[derive(Clone, Debug)]
pub struct CodecTraining {
    pub codec: Codec,
    /// Mean reconstruction MSE per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains the autoencoder on individual frames with a reconstruction MSE
/// and sets the latent scale to the inverse latent standard deviation.
pub fn pretrain_codec(
    dataset: &[VideoSegment],
    cfg: &CodecTrainConfig,
    seed: u64,
) -> Result<CodecTraining> {
    let frames: Vec<Tensor> = dataset
        .iter()
        .flat_map(|s| (0..s.len()).map(move |i| s.frame(i)))
        .collect();
    let first = frames.first().ok_or_else(|| invalid!("codec dataset is empty"))?;
    let fshape = first.shape().to_vec();
    if frames.iter().any(|f| f.shape() != fshape.as_slice()) {
        return Err(invalid!("codec dataset frames must share one size"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(invalid!("codec training needs positive epochs, batch size and learning rate"));
    }
    check_pixels(&first.clone().reshape(&[1, fshape[0], fshape[1], fshape[2]])?)?;

    let mut codec = Codec::init(cfg.hidden, seed)?;
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let progress = epoch as f64 / cfg.epochs as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let lr = cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
        let mut rng = derive_rng(seed, &format!("codec.epoch.{epoch}"));
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let parts: Vec<&Tensor> = chunk.iter().map(|&i| &frames[i]).collect();
            let x = Tensor::concat(&parts, 0)?.reshape(&[chunk.len(), fshape[0], fshape[1], fshape[2]])?;
            let mut grads = {
                let mut g = Graph::new(&codec.params, Trainable::Predicate(is_network_param));
                let xv = g.constant(x);
                let z = Codec::encode_graph(&mut g, xv)?;
                let y = Codec::decode_graph(&mut g, z)?;
                let loss = g.mse(y, xv)?;
                g.ensure_finite(loss, "codec loss")?;
                total += g.value(loss).item();
                g.param_grads(loss)?
            };
            clip_global_norm(&mut grads, 1.0);
            adam.update(&mut codec.params, &grads, lr)?;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }

    let mut sq = 0.0;
    let mut count = 0usize;
    for f in &frames {
        let z = codec.encode_frames(&f.clone().reshape(&[1, fshape[0], fshape[1], fshape[2]])?)?;
        sq += z.sq_norm();
        count += z.len();
    }
    let std = (sq / count as f64).sqrt();
    if std > 1e-12 {
        codec.params.insert(SCALE_PARAM, Tensor::full(&[1], 1.0 / std));
    }
    Ok(CodecTraining { codec, epoch_losses })
}
