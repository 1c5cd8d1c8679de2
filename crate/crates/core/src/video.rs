//! Pixel-space frame containers and the feature-map layout used inside the
//! denoiser.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Tolerance on the `[0, 1]` pixel range.
pub const RANGE_SLACK: f64 = 1e-6;

/// A block of consecutive RGB frames, shape (L, 3, H, W), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSegment {
    frames: Tensor,
    pub source_id: String,
    pub frame_offset: usize,
}

impl VideoSegment {
    pub fn new(frames: Tensor, source_id: impl Into<String>, frame_offset: usize) -> Result<Self> {
        if frames.rank() != 4 || frames.dim(0) == 0 || frames.dim(1) != 3 {
            return Err(shape_err!(
                "video segment must be (L>=1, 3, H, W), got {:?}",
                frames.shape()
            ));
        }
        if !frames.all_finite() {
            return Err(Error::NonFinite {
                layer: "video frames".into(),
            });
        }
        if frames
            .data()
            .iter()
            .any(|v| *v < -RANGE_SLACK || *v > 1.0 + RANGE_SLACK)
        {
            return Err(Error::InvalidArgument(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            frames,
            source_id: source_id.into(),
            frame_offset,
        })
    }

    /// Clamps into `[0, 1]` before validating.
    pub fn from_clamped(frames: Tensor, source_id: impl Into<String>, frame_offset: usize) -> Result<Self> {
        Self::new(frames.map(|v| v.clamp(0.0, 1.0)), source_id, frame_offset)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim(2)
    }

    pub fn width(&self) -> usize {
        self.frames.dim(3)
    }

    /// Frame `i` as a (3, H, W) tensor.
    pub fn frame(&self, i: usize) -> Tensor {
        let (h, w) = (self.height(), self.width());
        self.frames
            .narrow(0, i, 1)
            .and_then(|t| t.reshape(&[3, h, w]))
            .expect("frame index in range")
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            frames: self.frames.narrow(0, start, len)?,
            source_id: self.source_id.clone(),
            frame_offset: self.frame_offset + start,
        })
    }

    /// Spatial crop of every frame.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let f = self.frames.narrow(2, top, h)?.narrow(3, left, w)?;
        Ok(Self {
            frames: f,
            source_id: self.source_id.clone(),
            frame_offset: self.frame_offset,
        })
    }

    pub fn concat(parts: &[VideoSegment]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("no segments to join"))?;
        let frames: Vec<&Tensor> = parts.iter().map(|p| &p.frames).collect();
        Ok(Self {
            frames: Tensor::concat(&frames, 0)?,
            source_id: first.source_id.clone(),
            frame_offset: first.frame_offset,
        })
    }
}

/// Denoiser activation for one segment, shape (L, C, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
    pub level: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, level: usize) -> Result<Self> {
        if data.rank() != 4 || data.dim(0) == 0 {
            return Err(shape_err!(
                "feature map must be (L>=1, C, H, W), got {:?}",
                data.shape()
            ));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite {
                layer: format!("feature map (level {level})"),
            });
        }
        Ok(Self { data, level })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn frames(&self) -> usize {
        self.data.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.data.dim(1)
    }
}

/// Deterministic generator for a labelled sub-stream of `seed`.
pub fn derive_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Mixes `seed` and `label` into a new 64-bit seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
