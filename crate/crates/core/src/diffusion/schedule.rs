use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear-beta schedule with cumulative products `alpha_bar[t - 1]`, t in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("beta range [{beta_start}, {beta_end}]")));
        }
        let mut prod = 1.0;
        let alpha_bar = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                prod *= 1.0 - (beta_start + (beta_end - beta_start) * frac);
                prod
            })
            .collect();
        Ok(Self { alpha_bar })
    }

    /// A schedule with explicit cumulative products (used by tests and oracles).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() || alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::arg("alpha_bar values must lie in [0, 1]"));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(Error::arg(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(self.alpha_bar[t - 1])
    }

    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(1..=self.steps())
    }

    /// `sqrt(ab) z0 + sqrt(1 - ab) eps`.
    pub fn add_noise(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z0.zip_map(eps, |z, e| a * z + b * e)
    }

    /// Descending DDIM timesteps with a uniform stride, ending at the smallest.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::arg(format!("{steps} DDIM steps for a {total}-step schedule")));
        }
        Ok((0..steps).rev().map(|i| (i + 1) * total / steps).collect())
    }
}

pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

/// Classifier-free guidance `eps_u + s (eps_c - eps_u)`; exactly `eps_c` at `s = 1`.
pub fn guide(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_uncond.zip_map(eps_cond, |u, c| u + scale * (c - u))
}

/// Deterministic (eta = 0) DDIM from `x_T = noise`.
///
/// `predict(x_t, t, conditional)` returns the noise estimate of one branch.
/// With `guidance == 1` only the conditional branch is evaluated. The last
/// step uses `alpha_bar_prev = 1`, so it returns the predicted `x_0`.
/// With `clip = Some((lo, hi))` each predicted `x_0` is clamped to `[lo, hi]`.
pub fn ddim_sample<F>(
    schedule: &NoiseSchedule,
    steps: usize,
    guidance: f64,
    clip: Option<(f64, f64)>,
    noise: Tensor,
    mut predict: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize, bool) -> Result<Tensor>,
{
    if !(guidance >= 0.0) || !guidance.is_finite() {
        return Err(Error::arg(format!("guidance scale {guidance}")));
    }
    let ts = schedule.ddim_timesteps(steps)?;
    let mut x = noise;
    for (k, &t) in ts.iter().enumerate() {
        let eps_c = predict(&x, t, true)?;
        let eps = if guidance == 1.0 {
            eps_c
        } else {
            let eps_u = predict(&x, t, false)?;
            guide(&eps_u, &eps_c, guidance)?
        };
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = match ts.get(k + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        x = x.zip_map(&eps, |xt, e| {
            let mut x0 = (xt - sb * e) / sa;
            if let Some((lo, hi)) = clip {
                x0 = x0.clamp(lo, hi);
            }
            pa * x0 + pb * e
        })?;
        x.check_finite("ddim step")?;
    }
    Ok(x)
}
