//! Full-reference fidelity and temporal-consistency measures.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;
use crate::video::VideoSegment;

/// Reported PSNR for identical frames (and the ceiling for near-identical ones).
pub const PSNR_CAP_DB: f64 = 99.0;

/// Mean over frames of `10 log10(1 / MSE)`, pixel range `[0, 1]`.
pub fn psnr(a: &VideoSegment, b: &VideoSegment) -> Result<f64> {
    psnr_frames(a.frames(), b.frames())
}

pub fn psnr_frames(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 4 || a.dim(0) == 0 {
        return Err(shape_err!("psnr of {:?} vs {:?}", a.shape(), b.shape()));
    }
    let l = a.dim(0);
    let per = a.len() / l;
    let mut total = 0.0;
    for f in 0..l {
        let range = f * per..(f + 1) * per;
        let mse = a.data()[range.clone()]
            .iter()
            .zip(&b.data()[range])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / per as f64;
        total += psnr_from_mse(mse);
    }
    Ok(total / l as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Pixel row `row` of every frame stacked over time, shape (L, W, 3).
pub fn temporal_profile(video: &VideoSegment, row: usize) -> Result<Tensor> {
    let f = video.frames();
    let (l, h, w) = (f.dim(0), f.dim(2), f.dim(3));
    if row >= h {
        return Err(invalid!("profile row {row} outside frame height {h}"));
    }
    let mut out = vec![0.0; l * w * 3];
    for t in 0..l {
        for c in 0..3 {
            for x in 0..w {
                out[(t * w + x) * 3 + c] = f.data()[((t * 3 + c) * h + row) * w + x];
            }
        }
    }
    Tensor::from_vec(&[l, w, 3], out)
}

/// Inverse of [`temporal_profile`]: writes the profile back into `frames`.
pub fn write_profile(frames: &mut Tensor, profile: &Tensor, row: usize) -> Result<()> {
    let (l, h, w) = (frames.dim(0), frames.dim(2), frames.dim(3));
    if profile.shape() != [l, w, 3] || row >= h {
        return Err(shape_err!(
            "profile {:?} does not fit frames {:?} at row {row}",
            profile.shape(),
            frames.shape()
        ));
    }
    let data = frames.data_mut();
    for t in 0..l {
        for c in 0..3 {
            for x in 0..w {
                data[((t * 3 + c) * h + row) * w + x] = profile.data()[(t * w + x) * 3 + c];
            }
        }
    }
    Ok(())
}

/// Mean absolute difference between consecutive frames.
pub fn flicker_index(video: &VideoSegment) -> Result<f64> {
    let f = video.frames();
    let l = f.dim(0);
    if l < 2 {
        return Err(invalid!("flicker index needs at least 2 frames, got {l}"));
    }
    let per = f.len() / l;
    let d = f.data();
    let total: f64 = (0..l - 1)
        .map(|t| {
            (0..per)
                .map(|i| (d[(t + 1) * per + i] - d[t * per + i]).abs())
                .sum::<f64>()
        })
        .sum();
    Ok(total / ((l - 1) * per) as f64)
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flicker: Option<f64>,
    pub config: String,
}
