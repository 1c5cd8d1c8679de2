//! Synthetic low-quality frame generation: Gaussian blur, antialiased
//! bicubic ×4 downsampling, additive Gaussian noise and 8×8 block-DCT
//! quantization. Stage parameters are drawn once per segment.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::video::{derive_rng, VideoSegment};

/// Super-resolution factor per spatial axis.
pub const SCALE_FACTOR: usize = 4;
pub const DCT_BLOCK: usize = 8;

pub fn scale_factor() -> usize {
    SCALE_FACTOR
}

/// Sampling ranges, each inclusive `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    pub blur_sigma: [f64; 2],
    pub noise_std: [f64; 2],
    pub quality: [u8; 2],
    pub quantize: bool,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            blur_sigma: [0.2, 2.0],
            noise_std: [0.0, 0.05],
            quality: [60, 95],
            quantize: true,
        }
    }
}

impl DegradeConfig {
    /// Blur, noise and quantization switched off.
    pub fn downsample_only() -> Self {
        Self {
            blur_sigma: [0.0, 0.0],
            noise_std: [0.0, 0.0],
            quality: [95, 95],
            quantize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && 0.0 <= r[0] && r[0] <= r[1];
        if !ok(self.blur_sigma) {
            return Err(Error::Config(format!("bad blur_sigma range {:?}", self.blur_sigma)));
        }
        if !ok(self.noise_std) {
            return Err(Error::Config(format!("bad noise_std range {:?}", self.noise_std)));
        }
        if self.quantize && (self.quality[0] == 0 || self.quality[0] > self.quality[1] || self.quality[1] > 100) {
            return Err(Error::Config(format!("bad quality range {:?}", self.quality)));
        }
        Ok(())
    }
}

/// Stage parameters applied to every frame of one segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub blur_sigma: f64,
    pub noise_std: f64,
    pub quality: Option<u8>,
}

fn draw(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

pub fn draw_params(cfg: &DegradeConfig, seed: u64) -> Result<DegradeParams> {
    cfg.validate()?;
    let mut rng = derive_rng(seed, "degrade.params");
    let blur_sigma = draw(cfg.blur_sigma, &mut rng);
    let noise_std = draw(cfg.noise_std, &mut rng);
    let quality = cfg
        .quantize
        .then(|| rng.random_range(cfg.quality[0]..=cfg.quality[1]));
    Ok(DegradeParams {
        blur_sigma,
        noise_std,
        quality,
    })
}

pub fn degrade_segment(hq: &VideoSegment, seed: u64, cfg: &DegradeConfig) -> Result<VideoSegment> {
    Ok(degrade_segment_with_params(hq, seed, cfg)?.0)
}

/// Also returns the drawn stage parameters (for manifests).
pub fn degrade_segment_with_params(
    hq: &VideoSegment,
    seed: u64,
    cfg: &DegradeConfig,
) -> Result<(VideoSegment, DegradeParams)> {
    let (h, w) = (hq.height(), hq.width());
    if h % SCALE_FACTOR != 0 || w % SCALE_FACTOR != 0 {
        return Err(shape_err!(
            "frame size {h}x{w} is not divisible by the scale factor {SCALE_FACTOR}"
        ));
    }
    let (lh, lw) = (h / SCALE_FACTOR, w / SCALE_FACTOR);
    if cfg.quantize && (lh % DCT_BLOCK != 0 || lw % DCT_BLOCK != 0) {
        return Err(shape_err!(
            "low-quality size {lh}x{lw} is not divisible by the DCT block {DCT_BLOCK}; \
             use frame sizes divisible by {}",
            SCALE_FACTOR * DCT_BLOCK
        ));
    }
    let params = draw_params(cfg, seed)?;
    let mut x = hq.frames().clone();
    if params.blur_sigma > 0.0 {
        x = gaussian_blur(&x, params.blur_sigma)?;
    }
    x = resize_bicubic(&x, lh, lw)?;
    if params.noise_std > 0.0 {
        let mut rng = derive_rng(seed, "degrade.noise");
        let normal = Normal::new(0.0, params.noise_std).map_err(|e| invalid!("{e}"))?;
        for v in x.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    x = x.map(|v| v.clamp(0.0, 1.0));
    if let Some(q) = params.quality {
        x = dct_quantize(&x, q)?;
    }
    let lq = VideoSegment::from_clamped(x, hq.source_id.clone(), hq.frame_offset)?;
    Ok((lq, params))
}

/// Normalized 1-D Gaussian taps over `[-ceil(3σ), ceil(3σ)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur over the last two axes with edge replication.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    if x.rank() < 2 || !(sigma > 0.0) {
        return Err(invalid!("gaussian_blur needs sigma > 0 and a 2-D trailing shape"));
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (x.dim(x.rank() - 2), x.dim(x.rank() - 1));
    let mut out = x.clone();
    let mut tmp = vec![0.0; h * w];
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h {
            for xx in 0..w {
                tmp[y * w + xx] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        let sx = (xx as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                        kv * plane[y * w + sx]
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for xx in 0..w {
                plane[y * w + xx] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                        kv * tmp[sy * w + xx]
                    })
                    .sum();
            }
        }
    }
    Ok(out)
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-sample (first input index, normalized taps). Downscaling
/// stretches the kernel by the scale ratio (antialiasing).
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(isize, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<f64> = (lo..=hi)
                .map(|j| cubic((j as f64 - center) / stretch))
                .collect();
            let s: f64 = taps.iter().sum();
            taps.iter_mut().for_each(|v| *v /= s);
            (lo, taps)
        })
        .collect()
}

/// Separable bicubic resize of the last two axes; borders are replicated.
pub fn resize_bicubic(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.rank() < 2 || out_h == 0 || out_w == 0 {
        return Err(invalid!("resize needs a 2-D trailing shape and a positive output size"));
    }
    let r = x.rank();
    let (h, w) = (x.dim(r - 2), x.dim(r - 1));
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let planes = x.len() / (h * w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let mut rows = vec![0.0; h * out_w];
    for plane in x.data().chunks(h * w) {
        for y in 0..h {
            for (o, (lo, taps)) in tx.iter().enumerate() {
                rows[y * out_w + o] = taps
                    .iter()
                    .enumerate()
                    .map(|(i, t)| t * plane[y * w + (lo + i as isize).clamp(0, w as isize - 1) as usize])
                    .sum();
            }
        }
        for (lo, taps) in &ty {
            for o in 0..out_w {
                out.push(
                    taps.iter()
                        .enumerate()
                        .map(|(i, t)| t * rows[(lo + i as isize).clamp(0, h as isize - 1) as usize * out_w + o])
                        .sum(),
                );
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Tensor::from_vec(&shape, out)
}

/// Bicubic ×4 upsampling, clamped to `[0, 1]`.
pub fn upsample_x4(frames: &VideoSegment) -> Result<VideoSegment> {
    let up = resize_bicubic(
        frames.frames(),
        frames.height() * SCALE_FACTOR,
        frames.width() * SCALE_FACTOR,
    )?;
    VideoSegment::from_clamped(up, frames.source_id.clone(), frames.frame_offset)
}

const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16.,
    24., 40., 57., 69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109.,
    103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120.,
    101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Luminance quantization table scaled for `quality` in [1, 100].
pub fn quant_table(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let s = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    LUMA_TABLE.map(|t| ((t * s + 50.0) / 100.0).floor().clamp(1.0, 255.0))
}

fn dct_basis() -> [[f64; DCT_BLOCK]; DCT_BLOCK] {
    let n = DCT_BLOCK as f64;
    std::array::from_fn(|u| {
        std::array::from_fn(|x| {
            let c = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            c * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2.0 * n)).cos()
        })
    })
}

/// Orthonormal 8×8 DCT, coefficient rounding to the quality table, inverse
/// DCT. Applied independently to each channel on the 8-bit scale.
pub fn dct_quantize(x: &Tensor, quality: u8) -> Result<Tensor> {
    let r = x.rank();
    let (h, w) = (x.dim(r - 2), x.dim(r - 1));
    if h % DCT_BLOCK != 0 || w % DCT_BLOCK != 0 {
        return Err(shape_err!("{h}x{w} is not divisible by the DCT block {DCT_BLOCK}"));
    }
    let table = quant_table(quality);
    let b = dct_basis();
    let mut out = x.clone();
    let mut block = [[0.0; DCT_BLOCK]; DCT_BLOCK];
    for plane in out.data_mut().chunks_mut(h * w) {
        for by in (0..h).step_by(DCT_BLOCK) {
            for bx in (0..w).step_by(DCT_BLOCK) {
                for (y, row) in block.iter_mut().enumerate() {
                    for (xx, v) in row.iter_mut().enumerate() {
                        *v = plane[(by + y) * w + bx + xx] * 255.0 - 128.0;
                    }
                }
                let coef = transform(&b, &block, false);
                let mut q = [[0.0; DCT_BLOCK]; DCT_BLOCK];
                for u in 0..DCT_BLOCK {
                    for v in 0..DCT_BLOCK {
                        let step = table[u * DCT_BLOCK + v];
                        q[u][v] = (coef[u][v] / step).round() * step;
                    }
                }
                let back = transform(&b, &q, true);
                for (y, row) in back.iter().enumerate() {
                    for (xx, v) in row.iter().enumerate() {
                        plane[(by + y) * w + bx + xx] = ((v + 128.0) / 255.0).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

type Block = [[f64; DCT_BLOCK]; DCT_BLOCK];

/// `B X Bᵀ` (forward) or `Bᵀ X B` (inverse).
fn transform(b: &Block, x: &Block, inverse: bool) -> Block {
    let m = |i: usize, j: usize| if inverse { b[j][i] } else { b[i][j] };
    let mut tmp = [[0.0; DCT_BLOCK]; DCT_BLOCK];
    for i in 0..DCT_BLOCK {
        for j in 0..DCT_BLOCK {
            tmp[i][j] = (0..DCT_BLOCK).map(|k| m(i, k) * x[k][j]).sum();
        }
    }
    let mut out = [[0.0; DCT_BLOCK]; DCT_BLOCK];
    for i in 0..DCT_BLOCK {
        for j in 0..DCT_BLOCK {
            out[i][j] = (0..DCT_BLOCK).map(|k| tmp[i][k] * m(j, k)).sum();
        }
    }
    out
}
