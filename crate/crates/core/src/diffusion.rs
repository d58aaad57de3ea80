//! DDPM machinery: schedule, forward noising, reverse posterior steps and the
//! chain sampler.
//!
//! Timesteps are 1-based (`t = 1..=T`). Noise is always passed in by the
//! caller or drawn from an explicitly seeded generator.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    /// Cumulative product up to `t`; `alpha_bar(0)` is 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Reverse-process variance `(1 - ᾱ_{t-1}) / (1 - ᾱ_t) · β_t`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.index(t)?;
        let ab = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar(t - 1)?;
        Ok((1.0 - ab_prev) / (1.0 - ab) * self.beta(t)?)
    }

    /// Maps a timestep defined against a 1000-step schedule onto this one.
    pub fn rescale(&self, t_ref: usize) -> usize {
        let t = (t_ref as f64 * self.steps() as f64 / 1000.0).round() as usize;
        t.clamp(1, self.steps())
    }
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    NoiseSchedule::from_betas(beta)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Closed-form marginal `I_t = √ᾱ_t·I₀ + √(1−ᾱ_t)·ε`.
pub fn q_sample(i0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(i0, eps, "q_sample noise")?;
    sched.index(t)?;
    let ab = sched.alpha_bar(t)?;
    Ok(((i0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// [`q_sample`] with one timestep per batch element (dim 0).
pub fn q_sample_batch(
    i0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(i0, eps, "q_sample noise")?;
    if i0.dim(0)? != ts.len() {
        return Err(Error::Dimension(format!(
            "{} timesteps for a batch of {}",
            ts.len(),
            i0.dim(0)?
        )));
    }
    let mut keep = Vec::with_capacity(ts.len());
    let mut noise = Vec::with_capacity(ts.len());
    for &t in ts {
        sched.index(t)?;
        let ab = sched.alpha_bar(t)?;
        keep.push(ab.sqrt());
        noise.push((1.0 - ab).sqrt());
    }
    let mut coef_shape = vec![ts.len()];
    coef_shape.extend(std::iter::repeat_n(1, i0.rank() - 1));
    let keep = Tensor::from_vec(keep, coef_shape.as_slice(), i0.device())?.to_dtype(i0.dtype())?;
    let noise = Tensor::from_vec(noise, coef_shape.as_slice(), i0.device())?.to_dtype(i0.dtype())?;
    Ok((i0.broadcast_mul(&keep)? + eps.broadcast_mul(&noise)?)?)
}

/// Single Markov transition `I_t = √α_t·I_{t−1} + √(1−α_t)·ε`.
pub fn q_step(prev: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(prev, eps, "q_step noise")?;
    let a = sched.alpha(t)?;
    Ok(((prev * a.sqrt())? + (eps * (1.0 - a).sqrt())?)?)
}

/// Posterior mean `(I_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`.
pub fn posterior_mean(
    i_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(i_t, eps_hat, "posterior_step prediction")?;
    let a = sched.alpha(t)?;
    let b = sched.beta(t)?;
    let ab = sched.alpha_bar(t)?;
    let scaled = (eps_hat * (b / (1.0 - ab).sqrt()))?;
    Ok(((i_t - scaled)? * (1.0 / a.sqrt()))?)
}

/// One reverse step `I_{t−1} = μ + σ_t·z`. At `t = 1` the variance is zero
/// and `z` is ignored.
pub fn posterior_step(
    i_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    z: Option<&Tensor>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let mean = posterior_mean(i_t, t, eps_hat, sched)?;
    let sigma = sched.posterior_variance(t)?.sqrt();
    match z {
        Some(z) if t > 1 && sigma > 0.0 => {
            same_shape(i_t, z, "posterior_step noise")?;
            Ok((mean + (z * sigma)?)?)
        }
        _ => Ok(mean),
    }
}

/// Estimate of the clean sample implied by a noise prediction.
pub fn predict_x0(i_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(i_t, eps_hat, "predict_x0")?;
    sched.index(t)?;
    let ab = sched.alpha_bar(t)?;
    Ok(((i_t - (eps_hat * (1.0 - ab).sqrt())?)? * (1.0 / ab.sqrt()))?)
}

/// Mean squared error between true and predicted noise.
pub fn diffusion_loss(eps_true: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    same_shape(eps_true, eps_hat, "diffusion_loss")?;
    Ok((eps_true - eps_hat)?.sqr()?.mean_all()?)
}

/// Standard-normal tensor from an explicit generator.
pub fn gaussian(
    shape: impl Into<Shape>,
    rng: &mut ChaCha8Rng,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let values: Vec<f64> = (0..shape.elem_count())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Generator for the noise of one named purpose under a run seed.
pub fn noise_rng(seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, purpose))
}

/// Output of one noise-prediction call.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub eps: Tensor,
    /// Decoder feature maps at full resolution, one per tapped level.
    pub features: Vec<Tensor>,
}

/// Anything that predicts `ε` from `(I_t, t)`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Prediction>;
}

#[derive(Debug, Clone, Default)]
pub struct ChainOptions {
    /// Add `σ_t·z` at each step (the last step is always deterministic).
    pub posterior_noise: bool,
    /// Timesteps at which predictor features are recorded.
    pub record: BTreeSet<usize>,
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub sample: Tensor,
    pub trace: BTreeMap<usize, Vec<Tensor>>,
}

/// Noises `condition` to `t_start` and runs the reverse chain down to `t = 1`.
pub fn sample_chain(
    condition: &Tensor,
    t_start: usize,
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    rng_seed: u64,
    opts: &ChainOptions,
) -> Result<ChainOutput> {
    sched.index(t_start)?;
    let mut rng = noise_rng(rng_seed, "sample_chain");
    let eps = gaussian(condition.shape(), &mut rng, condition.dtype(), condition.device())?;
    let mut x = q_sample(condition, t_start, &eps, sched)?;
    let mut trace = BTreeMap::new();
    for t in (1..=t_start).rev() {
        let pred = predictor.predict(&x, t).map_err(|e| Error::ChainStep {
            step: t,
            source: Box::new(e),
        })?;
        if opts.record.contains(&t) {
            trace.insert(t, pred.features.clone());
        }
        let z = if opts.posterior_noise && t > 1 {
            Some(gaussian(x.shape(), &mut rng, x.dtype(), x.device())?)
        } else {
            None
        };
        x = posterior_step(&x, t, &pred.eps, z.as_ref(), sched)?;
    }
    Ok(ChainOutput { sample: x, trace })
}

/// Predicts the exact noise consistent with a known clean sample.
pub struct OraclePredictor<'a> {
    pub clean: &'a Tensor,
    pub sched: &'a NoiseSchedule,
}

impl NoisePredictor for OraclePredictor<'_> {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Prediction> {
        let ab = self.sched.alpha_bar(t)?;
        let eps = ((x_t - (self.clean * ab.sqrt())?)? * (1.0 / (1.0 - ab).sqrt()))?;
        Ok(Prediction {
            eps,
            features: Vec::new(),
        })
    }
}
