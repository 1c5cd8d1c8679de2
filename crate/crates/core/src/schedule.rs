//! Linear-beta noise schedule, forward noising, the epsilon-prediction loss
//! and ancestral reverse steps over a strided timestep subset.
//!
//! Everything here is a pure function; stochastic inputs (the forward noise
//! and the noise injected by reverse steps) are always supplied by the caller.

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid!("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alphas_cumprod = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        Ok(Self {
            betas,
            alphas_cumprod,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| invalid!("timestep {t} outside [0, {})", self.steps()))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap()
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

/// Latent codes for one segment, shape (L, C, h, w). Clean latents carry no
/// timestep; noised latents carry the timestep they were noised to.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    data: Tensor,
    timestep: Option<usize>,
}

impl LatentSequence {
    pub fn new(data: Tensor) -> Result<Self> {
        Self::validate(&data)?;
        Ok(Self {
            data,
            timestep: None,
        })
    }

    pub fn at_timestep(data: Tensor, t: usize) -> Result<Self> {
        Self::validate(&data)?;
        Ok(Self {
            data,
            timestep: Some(t),
        })
    }

    fn validate(data: &Tensor) -> Result<()> {
        if data.rank() != 4 || data.dim(0) == 0 {
            return Err(shape_err!(
                "latents must be (L>=1, C, h, w), got {:?}",
                data.shape()
            ));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite {
                layer: "latents".into(),
            });
        }
        Ok(())
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn timestep(&self) -> Option<usize> {
        self.timestep
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn frames(&self) -> usize {
        self.data.dim(0)
    }
}

/// Forward process: `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn q_sample(
    z0: &LatentSequence,
    t: usize,
    eps: &LatentSequence,
    schedule: &NoiseSchedule,
) -> Result<LatentSequence> {
    let ab = schedule.alpha_bar(t)?;
    let zt = mix(z0.data(), eps.data(), ab)?;
    LatentSequence::at_timestep(zt, t)
}

fn mix(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// Mean over all elements of `(eps - eps_hat)^2`.
pub fn denoising_loss(eps: &LatentSequence, eps_hat: &LatentSequence) -> Result<f64> {
    let d = eps.data().zip_map(eps_hat.data(), |a, b| (a - b) * (a - b))?;
    Ok(d.mean())
}

/// `steps` timesteps in strictly decreasing order with uniform stride
/// `total / steps`, ending at 0.
pub fn subsample_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(invalid!("need 1 <= steps <= {total}, got {steps}"));
    }
    let stride = total / steps;
    Ok((0..steps).rev().map(|i| i * stride).collect())
}

/// Clean-latent estimate implied by a noise prediction at timestep `t`.
pub fn predict_x0(
    z_t: &LatentSequence,
    eps_hat: &LatentSequence,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    z_t.data().zip_map(eps_hat.data(), |z, e| (z - sb * e) / sa)
}

/// One ancestral step from `t` to `t_prev` (`None` = final step, which
/// returns the clean-latent estimate and ignores `noise`). Uses the posterior
/// variance of the strided chain.
pub fn ddpm_reverse_step(
    z_t: &LatentSequence,
    eps_hat: &LatentSequence,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
    noise: &LatentSequence,
) -> Result<LatentSequence> {
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(invalid!("reverse step must go backwards: {t} -> {tp}"));
        }
    }
    z_t.data().expect_same_shape(eps_hat.data())?;
    let x0 = predict_x0(z_t, eps_hat, t, schedule)?;
    let Some(tp) = t_prev else {
        return LatentSequence::new(x0);
    };
    noise.data().expect_same_shape(z_t.data())?;
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(tp)?;
    let beta = 1.0 - ab_t / ab_prev;
    let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let coef_zt = (ab_t / ab_prev).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt();
    let mean = x0.zip_map(z_t.data(), |x, z| coef_x0 * x + coef_zt * z)?;
    let out = mean.zip_map(noise.data(), |m, n| m + sigma * n)?;
    LatentSequence::at_timestep(out, tp)
}
