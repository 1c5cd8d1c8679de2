//! Two-stage training. Stage 1 fits the spatial backbone and semantic
//! blocks on independent frames; stage 2 adds the temporal modules and
//! trains only those, with every other parameter frozen bit-for-bit.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, StageTag};
use crate::codec::{pretrain_codec, Codec};
use crate::config::RunConfig;
use crate::degrade::{degrade_segment, upsample_x4, DegradeConfig};
use crate::denoiser::{is_stage2_param, DenoiserConfig, DenoiserNetwork};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{clip_global_norm, Adam, Graph, Trainable};
use crate::schedule::NoiseSchedule;
use crate::seam::{EncoderRegistry, SemanticEncoder};
use crate::tensor::Tensor;
use crate::video::{derive_rng, derive_seed, VideoSegment};

pub const CHECKPOINT_KIND: &str = "denoiser-checkpoint";
pub const CODEC_KIND: &str = "codec";

/// Resolved per-stage optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: StageTag,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl TrainConfig {
    pub fn from_run(run: &RunConfig, stage: StageTag, seed: u64) -> Self {
        let t = &run.train;
        Self {
            stage,
            batch_size: t.batch_size,
            learning_rate: match stage {
                StageTag::Stage1 => t.stage1_learning_rate,
                StageTag::Stage2 => t.stage2_learning_rate,
            },
            steps: t.steps,
            seed,
            clip_norm: t.clip_norm,
        }
    }
}

/// One training segment in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    /// Clean latents of the high-quality frames, (L, C, h, w).
    pub z0: Tensor,
    /// Latents of the ×4-upsampled low-quality frames, same shape.
    pub lr: Tensor,
    /// Semantic tokens of the low-quality frames, (L, N, d).
    pub semantic: Option<Tensor>,
}

impl TrainingExample {
    pub fn frames(&self) -> usize {
        self.z0.dim(0)
    }
}

/// Noise draws for one batch: a timestep per segment and unit Gaussian
/// noise for every latent element.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub timesteps: Vec<usize>,
    pub eps: Tensor,
}

pub fn draw_noise<R: Rng + ?Sized>(
    batch: &[&TrainingExample],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<NoiseDraw> {
    let first = batch.first().ok_or_else(|| invalid!("empty training batch"))?;
    let timesteps = batch
        .iter()
        .map(|_| rng.random_range(0..schedule.steps()))
        .collect();
    let mut shape = first.z0.shape().to_vec();
    shape[0] *= batch.len();
    let n: usize = shape.iter().product();
    let eps = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(NoiseDraw {
        timesteps,
        eps: Tensor::from_vec(&shape, eps)?,
    })
}

struct Stacked {
    z_t: Tensor,
    lr: Tensor,
    semantic: Option<Tensor>,
    frame_timesteps: Vec<usize>,
    frames: usize,
}

fn stack(
    batch: &[&TrainingExample],
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
    with_semantic: bool,
) -> Result<Stacked> {
    let first = batch.first().ok_or_else(|| invalid!("empty training batch"))?;
    let frames = first.frames();
    if batch.iter().any(|e| e.z0.shape() != first.z0.shape() || e.lr.shape() != e.z0.shape()) {
        return Err(shape_err!("training batch mixes segment shapes"));
    }
    if draw.timesteps.len() != batch.len() || draw.eps.dim(0) != frames * batch.len() {
        return Err(shape_err!("noise draw does not match the batch"));
    }
    let per = first.z0.len();
    let mut z_t = Vec::with_capacity(per * batch.len());
    let mut frame_timesteps = Vec::with_capacity(frames * batch.len());
    for (i, (e, &t)) in batch.iter().zip(&draw.timesteps).enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let eps = &draw.eps.data()[i * per..(i + 1) * per];
        z_t.extend(e.z0.data().iter().zip(eps).map(|(z, n)| a * z + b * n));
        frame_timesteps.extend(std::iter::repeat_n(t, frames));
    }
    let lr: Vec<&Tensor> = batch.iter().map(|e| &e.lr).collect();
    let semantic = if with_semantic {
        let s = batch
            .iter()
            .map(|e| e.semantic.as_ref().ok_or_else(|| invalid!("example lacks semantic tokens")))
            .collect::<Result<Vec<_>>>()?;
        Some(Tensor::concat(&s, 0)?)
    } else {
        None
    };
    Ok(Stacked {
        z_t: Tensor::from_vec(draw.eps.shape(), z_t)?,
        lr: Tensor::concat(&lr, 0)?,
        semantic,
        frame_timesteps,
        frames,
    })
}

fn loss_and_grads(
    net: &DenoiserNetwork,
    trainable: Trainable,
    batch: &[&TrainingExample],
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
    want_grads: bool,
) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
    let s = stack(batch, draw, schedule, net.config().semantic_enabled)?;
    let mut g = Graph::new(net.params(), trainable);
    let z = g.constant(s.z_t);
    let lr = g.constant(s.lr);
    let sem = s.semantic.map(|t| g.constant(t));
    let eps_hat = net.forward_graph(&mut g, z, lr, sem, &s.frame_timesteps, s.frames)?;
    let eps = g.constant(draw.eps.clone());
    let loss = g.mse(eps_hat, eps)?;
    g.ensure_finite(loss, "denoising loss")?;
    let value = g.value(loss).item();
    let grads = if want_grads {
        g.param_grads(loss)?
    } else {
        Default::default()
    };
    Ok((value, grads))
}

/// Denoising loss of `net` on a fixed batch and noise draw, no update.
pub fn evaluate_loss(
    net: &DenoiserNetwork,
    batch: &[&TrainingExample],
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    Ok(loss_and_grads(net, Trainable::Nothing, batch, draw, schedule, false)?.0)
}

/// Checksum of every parameter stage 2 must leave untouched.
pub fn frozen_checksum(net: &DenoiserNetwork) -> String {
    net.params().checksum_where(|n| !is_stage2_param(n))
}

/// Number of parameters stage 2 trains.
pub fn stage2_trainable_count(net: &DenoiserNetwork) -> usize {
    net.params().count_where(is_stage2_param)
}

/// One update of a stage-1 network on a fixed noise draw.
pub fn stage1_update(
    net: &mut DenoiserNetwork,
    opt: &mut Adam,
    batch: &[&TrainingExample],
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
    lr: f64,
    clip_norm: f64,
) -> Result<f64> {
    let cfg = net.config();
    if cfg.temporal_enabled || cfg.tsam_enabled {
        return Err(Error::Contract(
            "stage 1 runs with the temporal modules switched off".into(),
        ));
    }
    let (loss, mut grads) = loss_and_grads(net, Trainable::Everything, batch, draw, schedule, true)?;
    if let Some(name) = grads.keys().find(|n| is_stage2_param(n)) {
        return Err(Error::Contract(format!("temporal parameter `{name}` received a stage-1 gradient")));
    }
    clip_global_norm(&mut grads, clip_norm);
    opt.update(net.params_mut(), &grads, lr)?;
    Ok(loss)
}

/// One update of the temporal modules only; any change to a frozen
/// parameter is reported as a contract violation.
pub fn stage2_update(
    net: &mut DenoiserNetwork,
    opt: &mut Adam,
    batch: &[&TrainingExample],
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
    lr: f64,
    clip_norm: f64,
) -> Result<f64> {
    let cfg = net.config();
    if !cfg.temporal_enabled && !cfg.tsam_enabled {
        return Err(Error::Contract("stage 2 needs at least one temporal module".into()));
    }
    let before = frozen_checksum(net);
    let (loss, mut grads) = loss_and_grads(
        net,
        Trainable::Predicate(is_stage2_param),
        batch,
        draw,
        schedule,
        true,
    )?;
    if let Some(name) = grads.keys().find(|n| !is_stage2_param(n)) {
        return Err(Error::Contract(format!("frozen parameter `{name}` received a gradient")));
    }
    clip_global_norm(&mut grads, clip_norm);
    opt.update(net.params_mut(), &grads, lr)?;
    if frozen_checksum(net) != before {
        return Err(Error::Contract("frozen parameters changed during stage 2".into()));
    }
    Ok(loss)
}

/// Draws noise from `rng`, then performs one stage-1 update.
pub fn stage1_step<R: Rng + ?Sized>(
    net: &mut DenoiserNetwork,
    opt: &mut Adam,
    batch: &[&TrainingExample],
    schedule: &NoiseSchedule,
    rng: &mut R,
    cfg: &TrainConfig,
) -> Result<f64> {
    let draw = draw_noise(batch, schedule, rng)?;
    stage1_update(net, opt, batch, &draw, schedule, cfg.learning_rate, cfg.clip_norm)
}

pub fn stage2_step<R: Rng + ?Sized>(
    net: &mut DenoiserNetwork,
    opt: &mut Adam,
    batch: &[&TrainingExample],
    schedule: &NoiseSchedule,
    rng: &mut R,
    cfg: &TrainConfig,
) -> Result<f64> {
    let draw = draw_noise(batch, schedule, rng)?;
    stage2_update(net, opt, batch, &draw, schedule, cfg.learning_rate, cfg.clip_norm)
}

/// Random square crops of single frames for codec pre-training.
pub fn codec_crops(videos: &[VideoSegment], count: usize, crop: usize, seed: u64) -> Result<Vec<VideoSegment>> {
    (0..count)
        .map(|i| {
            let mut rng = derive_rng(seed, &format!("codec-crop.{i}"));
            let v = &videos[rng.random_range(0..videos.len())];
            random_crop(v, 1, crop, &mut rng)
        })
        .collect()
}

fn random_crop<R: Rng + ?Sized>(v: &VideoSegment, frames: usize, crop: usize, rng: &mut R) -> Result<VideoSegment> {
    if v.len() < frames || v.height() < crop || v.width() < crop {
        return Err(invalid!(
            "video `{}` ({} frames, {}x{}) is too small for {frames}-frame {crop}px crops",
            v.source_id,
            v.len(),
            v.height(),
            v.width()
        ));
    }
    let start = rng.random_range(0..=v.len() - frames);
    let top = rng.random_range(0..=v.height() - crop);
    let left = rng.random_range(0..=v.width() - crop);
    v.slice(start, frames)?.crop(top, left, crop, crop)
}

/// Turns one high-quality segment into a latent training example.
pub fn make_example(
    hq: &VideoSegment,
    codec: &Codec,
    encoder: Option<&dyn SemanticEncoder>,
    degrade: &DegradeConfig,
    seed: u64,
) -> Result<TrainingExample> {
    let lq = degrade_segment(hq, seed, degrade)?;
    let lr = codec.encode(&upsample_x4(&lq)?)?.into_data();
    let z0 = codec.encode(hq)?.into_data();
    let semantic = encoder
        .map(|e| e.encode(&lq).map(|s| s.into_tensor()))
        .transpose()?;
    Ok(TrainingExample { z0, lr, semantic })
}

/// A fixed pool of training examples, each a random `frames`-frame crop.
#[allow(clippy::too_many_arguments)]
pub fn build_examples(
    videos: &[VideoSegment],
    count: usize,
    frames: usize,
    crop: usize,
    codec: &Codec,
    encoder: Option<&dyn SemanticEncoder>,
    degrade: &DegradeConfig,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    if videos.is_empty() {
        return Err(invalid!("no training videos"));
    }
    (0..count)
        .map(|i| {
            let label = format!("example.{frames}.{i}");
            let mut rng = derive_rng(seed, &label);
            let v = &videos[rng.random_range(0..videos.len())];
            let hq = random_crop(v, frames, crop, &mut rng)?;
            make_example(&hq, codec, encoder, degrade, derive_seed(seed, &label))
        })
        .collect()
}

/// Everything needed to continue or use a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub stage: StageTag,
    /// Completed optimizer steps in the current stage.
    pub step: usize,
    pub seed: u64,
    pub run: RunConfig,
    pub net: DenoiserNetwork,
    pub codec: Codec,
    pub optimizer: Adam,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    seed: u64,
    denoiser: DenoiserConfig,
    adam_step: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
}

impl TrainingState {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_KIND);
        c.stage = Some(self.stage);
        c.config = serde_json::to_value(&self.run).map_err(|e| Error::Format(e.to_string()))?;
        c.meta = serde_json::to_value(StateMeta {
            step: self.step,
            seed: self.seed,
            denoiser: self.net.config().clone(),
            adam_step: self.optimizer.step,
            adam_beta1: self.optimizer.beta1,
            adam_beta2: self.optimizer.beta2,
            adam_eps: self.optimizer.eps,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        c.tensors.graft("denoiser", self.net.params());
        c.tensors.graft("codec", self.codec.params());
        c.tensors.graft("adam.first", &self.optimizer.first);
        c.tensors.graft("adam.second", &self.optimizer.second);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let stage = c
            .stage
            .ok_or_else(|| Error::Contract("checkpoint carries no stage tag".into()))?;
        let run: RunConfig =
            serde_json::from_value(c.config.clone()).map_err(|e| Error::Format(format!("config echo: {e}")))?;
        let meta: StateMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let net = DenoiserNetwork::from_parts(meta.denoiser, c.tensors.subtree("denoiser"))?;
        let codec = Codec::from_params(c.tensors.subtree("codec"))?;
        let optimizer = Adam {
            beta1: meta.adam_beta1,
            beta2: meta.adam_beta2,
            eps: meta.adam_eps,
            step: meta.adam_step,
            first: c.tensors.subtree("adam.first"),
            second: c.tensors.subtree("adam.second"),
        };
        Ok(Self {
            stage,
            step: meta.step,
            seed: meta.seed,
            run,
            net,
            codec,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

pub fn save_codec(path: &Path, codec: &Codec) -> Result<()> {
    let mut c = Container::new(CODEC_KIND);
    c.tensors = codec.params().clone();
    c.save(path)
}

pub fn load_codec(path: &Path) -> Result<Codec> {
    let c = Container::load(path)?;
    c.expect_kind(CODEC_KIND)?;
    Codec::from_params(c.tensors)
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Where the loss log for checkpoint `out` goes.
pub fn log_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".log.jsonl");
    out.with_file_name(name)
}

#[derive(Clone, Debug)]
pub struct TrainingReport {
    pub state: TrainingState,
    pub records: Vec<LossRecord>,
    pub codec_epoch_losses: Vec<f64>,
}

/// How a run starts.
#[derive(Clone, Debug)]
pub enum RunStart {
    /// Stage 1 from scratch: pre-trains the codec, then the denoiser.
    Fresh,
    /// Continue from a checkpoint (stage 2 from a stage-1 checkpoint, or
    /// either stage from its own checkpoint).
    From(TrainingState),
}

/// Runs stage `stage` until `run.train.steps` steps are completed, writing
/// the checkpoint to `out` (also every `checkpoint_every` steps) and the
/// loss log next to it.
pub fn run_training(
    run: &RunConfig,
    stage: StageTag,
    videos: &[VideoSegment],
    start: RunStart,
    seed: u64,
    out: Option<&Path>,
) -> Result<TrainingReport> {
    run.validate()?;
    if videos.is_empty() {
        return Err(invalid!("no training videos"));
    }
    let mut codec_epoch_losses = vec![];
    let mut state = match (stage, start) {
        (StageTag::Stage1, RunStart::Fresh) => {
            let crops = codec_crops(videos, run.train.codec_crops, run.train.crop, derive_seed(seed, "codec-data"))?;
            let trained = pretrain_codec(&crops, &run.codec, derive_seed(seed, "codec"))?;
            codec_epoch_losses = trained.epoch_losses;
            TrainingState {
                stage,
                step: 0,
                seed,
                run: run.clone(),
                net: DenoiserNetwork::build(&run.denoiser.spatial_only(), derive_seed(seed, "denoiser"))?,
                codec: trained.codec,
                optimizer: Adam::default(),
            }
        }
        (StageTag::Stage2, RunStart::Fresh) => {
            return Err(Error::Contract("stage 2 must start from a stage-1 checkpoint".into()))
        }
        (_, RunStart::From(prev)) => {
            if prev.seed != seed {
                return Err(Error::Config(format!(
                    "checkpoint was trained with seed {}, run requests {seed}",
                    prev.seed
                )));
            }
            match (stage, prev.stage) {
                (StageTag::Stage1, StageTag::Stage1) | (StageTag::Stage2, StageTag::Stage2) => {
                    if prev.net.config().spatial_only() != run.denoiser.spatial_only() {
                        return Err(Error::Config("checkpoint network does not match the config".into()));
                    }
                    TrainingState { run: run.clone(), ..prev }
                }
                (StageTag::Stage2, StageTag::Stage1) => TrainingState {
                    stage,
                    step: 0,
                    seed,
                    run: run.clone(),
                    net: prev.net.extend_to(&run.denoiser, derive_seed(seed, "denoiser.stage2"))?,
                    codec: prev.codec,
                    optimizer: Adam::default(),
                },
                (StageTag::Stage1, StageTag::Stage2) => {
                    return Err(Error::Contract("stage 1 cannot resume from a stage-2 checkpoint".into()))
                }
            }
        }
    };

    let cfg = TrainConfig::from_run(run, stage, seed);
    let frames = match stage {
        StageTag::Stage1 => 1,
        StageTag::Stage2 => run.train.segment_length,
    };
    let registry = EncoderRegistry::default();
    let encoder = registry.create(&run.encoder.id, &run.encoder.options())?;
    let use_semantic = state.net.config().semantic_enabled;
    let examples = build_examples(
        videos,
        run.train.examples,
        frames,
        run.train.crop,
        &state.codec,
        use_semantic.then_some(encoder.as_ref()),
        &run.degrade,
        derive_seed(seed, "examples"),
    )?;
    let schedule = NoiseSchedule::default();
    let codec_sum = state.codec.checksum();

    let mut log = match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let lp = log_path(p);
            // Keep only lines up to the resumed step; a later periodic
            // checkpoint may have been followed by more logged steps.
            let kept = if state.step > 0 && lp.exists() {
                read_log(&lp)?
                    .into_iter()
                    .filter(|r| r.stage == stage.number() && r.step <= state.step)
                    .collect()
            } else {
                vec![]
            };
            let f = fs::File::create(&lp).map_err(|e| Error::io(&lp, e))?;
            let mut w = BufWriter::new(f);
            for r in &kept {
                write_record(&mut w, &lp, r)?;
            }
            let f = w;
            Some((lp, f))
        }
        None => None,
    };
    let started = Instant::now();
    let mut records = vec![];
    while state.step < cfg.steps {
        let mut rng = derive_rng(seed, &format!("train.stage{}.step.{}", stage.number(), state.step));
        let batch: Vec<&TrainingExample> = (0..cfg.batch_size)
            .map(|_| &examples[rng.random_range(0..examples.len())])
            .collect();
        let loss = match stage {
            StageTag::Stage1 => stage1_step(&mut state.net, &mut state.optimizer, &batch, &schedule, &mut rng, &cfg)?,
            StageTag::Stage2 => stage2_step(&mut state.net, &mut state.optimizer, &batch, &schedule, &mut rng, &cfg)?,
        };
        state.step += 1;
        let rec = LossRecord {
            step: state.step,
            stage: stage.number(),
            loss,
            lr: cfg.learning_rate,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some((lp, w)) = log.as_mut() {
            write_record(w, lp, &rec)?;
        }
        records.push(rec);
        if let Some(p) = out {
            if run.train.checkpoint_every > 0 && state.step % run.train.checkpoint_every == 0 {
                if let Some((lp, w)) = log.as_mut() {
                    w.flush().map_err(|e| Error::io(lp.as_path(), e))?;
                }
                state.save(p)?;
            }
        }
    }
    if state.codec.checksum() != codec_sum {
        return Err(Error::Contract("codec parameters changed during diffusion training".into()));
    }
    if let Some((lp, mut w)) = log {
        w.flush().map_err(|e| Error::io(lp.as_path(), e))?;
    }
    if let Some(p) = out {
        state.save(p)?;
    }
    Ok(TrainingReport {
        state,
        records,
        codec_epoch_losses,
    })
}

fn write_record(w: &mut impl Write, path: &Path, rec: &LossRecord) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Reads a loss log back.
pub fn read_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}
