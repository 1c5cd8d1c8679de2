//! End-to-end inference: split a low-quality video into fixed-length
//! segments, run reverse diffusion on each in latent space and decode.

use crate::codec::Codec;
use crate::degrade::upsample_x4;
use crate::denoiser::{ConditioningBundle, DenoiserNetwork};
use crate::error::{invalid, shape_err, Result};
use crate::schedule::{ddpm_reverse_step, subsample_timesteps, LatentSequence, NoiseSchedule};
use crate::seam::{SemanticEmbedding, SemanticEncoder};
use crate::tensor::Tensor;
use crate::video::{derive_rng, VideoSegment};

/// A segment of exactly the requested length; the last `pad` frames repeat
/// the final real frame and are dropped after decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedSegment {
    pub video: VideoSegment,
    pub pad: usize,
}

pub fn segment_video(video: &VideoSegment, len: usize) -> Result<Vec<PaddedSegment>> {
    if len == 0 {
        return Err(invalid!("segment length must be positive"));
    }
    let total = video.len();
    let mut out = vec![];
    let mut start = 0;
    while start < total {
        let real = len.min(total - start);
        let mut seg = video.slice(start, real)?;
        let pad = len - real;
        if pad > 0 {
            let last = seg.slice(real - 1, 1)?;
            let mut parts = vec![seg];
            parts.extend(std::iter::repeat_n(last, pad));
            seg = VideoSegment::concat(&parts)?;
        }
        out.push(PaddedSegment { video: seg, pad });
        start += real;
    }
    Ok(out)
}

/// Drops each segment's padding and concatenates the rest in order.
pub fn join_segments(parts: &[PaddedSegment]) -> Result<VideoSegment> {
    let trimmed = parts
        .iter()
        .map(|p| p.video.slice(0, p.video.len() - p.pad))
        .collect::<Result<Vec<_>>>()?;
    VideoSegment::concat(&trimmed)
}

/// Anything that predicts the noise in `z_t`; the trained network or a
/// test oracle.
pub trait NoisePredictor {
    fn predict(&self, z_t: &LatentSequence, cond: &ConditioningBundle) -> Result<LatentSequence>;

    fn uses_semantic(&self) -> bool {
        false
    }

    /// Latent height and width must be multiples of this.
    fn spatial_divisor(&self) -> usize {
        1
    }

    fn max_frames(&self) -> Option<usize> {
        None
    }
}

impl NoisePredictor for DenoiserNetwork {
    fn predict(&self, z_t: &LatentSequence, cond: &ConditioningBundle) -> Result<LatentSequence> {
        self.predict_noise(z_t, cond)
    }

    fn uses_semantic(&self) -> bool {
        self.config().semantic_enabled
    }

    fn spatial_divisor(&self) -> usize {
        self.config().spatial_divisor()
    }

    fn max_frames(&self) -> Option<usize> {
        Some(self.config().max_frames)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub segment_length: usize,
    pub seed: u64,
}

/// Reverse diffusion from `z_T` over `steps` strided timesteps. Step noise
/// comes from `rng`; the final step injects none.
pub fn reverse_diffusion<R: rand::Rng + ?Sized>(
    predictor: &dyn NoisePredictor,
    z_start: LatentSequence,
    lr_latents: &LatentSequence,
    semantic: Option<&SemanticEmbedding>,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<LatentSequence> {
    let ts = subsample_timesteps(schedule.steps(), steps)?;
    let mut z = z_start;
    for (i, &t) in ts.iter().enumerate() {
        let cond = ConditioningBundle {
            lr_latents: lr_latents.clone(),
            semantic: semantic.cloned(),
            timestep: t,
        };
        let eps_hat = predictor.predict(&z, &cond)?;
        let t_prev = ts.get(i + 1).copied();
        let noise = match t_prev {
            Some(_) => Tensor::randn(z.shape(), 1.0, rng),
            None => Tensor::zeros(z.shape()),
        };
        z = ddpm_reverse_step(&z, &eps_hat, t, t_prev, schedule, &LatentSequence::new(noise)?)?;
    }
    Ok(z)
}

/// Stream label of a segment's sampling noise, fixed by its position in the
/// source video so segments can be processed in any order.
pub fn segment_label(segment: &VideoSegment) -> String {
    format!("sample.{}.{}", segment.source_id, segment.frame_offset)
}

/// Super-resolves one padded-length segment of low-quality frames.
pub fn super_resolve_segment(
    predictor: &dyn NoisePredictor,
    codec: &Codec,
    encoder: Option<&dyn SemanticEncoder>,
    lq: &VideoSegment,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<VideoSegment> {
    let lr = codec.encode(&upsample_x4(lq)?)?;
    let semantic = if predictor.uses_semantic() {
        let enc = encoder.ok_or_else(|| invalid!("the network needs a semantic encoder"))?;
        Some(enc.encode(lq)?)
    } else {
        None
    };
    let mut rng = derive_rng(cfg.seed, &segment_label(lq));
    let z_start = LatentSequence::new(Tensor::randn(lr.shape(), 1.0, &mut rng))?;
    let z0 = reverse_diffusion(
        predictor,
        z_start,
        &lr,
        semantic.as_ref(),
        schedule,
        cfg.steps,
        &mut rng,
    )?;
    let out = codec.decode(&z0)?;
    VideoSegment::new(out.into_frames(), lq.source_id.clone(), lq.frame_offset)
}

/// Super-resolves a whole low-quality video to 4x its resolution.
pub fn super_resolve(
    predictor: &dyn NoisePredictor,
    codec: &Codec,
    encoder: Option<&dyn SemanticEncoder>,
    lq: &VideoSegment,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<VideoSegment> {
    let div = predictor.spatial_divisor();
    if lq.height() % div != 0 || lq.width() % div != 0 {
        return Err(shape_err!(
            "low-quality frames {}x{} must be multiples of {div}",
            lq.height(),
            lq.width()
        ));
    }
    if let Some(max) = predictor.max_frames() {
        if cfg.segment_length > max {
            return Err(invalid!("segment length {} exceeds the network's {max} frames", cfg.segment_length));
        }
    }
    let mut parts = segment_video(lq, cfg.segment_length)?;
    for p in &mut parts {
        p.video = super_resolve_segment(predictor, codec, encoder, &p.video, schedule, cfg)?;
    }
    join_segments(&parts)
}
