//! Procedural toy videos: a smooth colour gradient background with soft
//! blobs drifting at constant velocity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use crate::video::{derive_rng, VideoSegment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub blobs: usize,
    /// Blob drift in pixels per frame (upper bound per axis).
    pub max_speed: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 4,
            frames: 8,
            height: 64,
            width: 64,
            blobs: 3,
            max_speed: 1.5,
        }
    }
}

struct Blob {
    color: [f64; 3],
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
    radius: f64,
}

/// One procedural video; identical for identical `(seed, index, cfg)`.
pub fn synth_video(cfg: &SynthConfig, seed: u64, index: usize) -> Result<VideoSegment> {
    if cfg.frames == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(invalid!("synthetic videos need positive frames, height and width"));
    }
    let mut rng = derive_rng(seed, &format!("synth.{index}"));
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let grad_y: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
    let grad_x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let blobs: Vec<Blob> = (0..cfg.blobs)
        .map(|_| Blob {
            color: std::array::from_fn(|_| rng.random_range(-0.3..0.3)),
            y: rng.random_range(0.0..h),
            x: rng.random_range(0.0..w),
            vy: rng.random_range(-cfg.max_speed..=cfg.max_speed),
            vx: rng.random_range(-cfg.max_speed..=cfg.max_speed),
            radius: rng.random_range(0.15..0.35) * h.min(w),
        })
        .collect();

    let mut data = Vec::with_capacity(cfg.frames * 3 * cfg.height * cfg.width);
    for t in 0..cfg.frames {
        let t = t as f64;
        for c in 0..3 {
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let (yf, xf) = (y as f64, x as f64);
                    let mut v = base[c] + grad_y[c] * (yf / h - 0.5) + grad_x[c] * (xf / w - 0.5);
                    for b in &blobs {
                        let dy = yf - (b.y + b.vy * t);
                        let dx = xf - (b.x + b.vx * t);
                        v += b.color[c] * (-(dy * dy + dx * dx) / (2.0 * b.radius * b.radius)).exp();
                    }
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    let frames = Tensor::from_vec(&[cfg.frames, 3, cfg.height, cfg.width], data)?;
    VideoSegment::new(frames, format!("synth_{index:03}"), 0)
}

pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<Vec<VideoSegment>> {
    (0..cfg.videos).map(|i| synth_video(cfg, seed, i)).collect()
}
