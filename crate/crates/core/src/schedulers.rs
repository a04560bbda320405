//! Noise schedules for the two sampler families.
//!
//! Diffusion levels are 0-based: `alpha_bars[0]` is the least noisy level.
//! The reverse chain counts `k = K, ..., 1` and step `k` acts on level `k - 1`.
//! Flow time runs from `t = 1` (noise) to `t = 0` (data) on the linear path
//! `x_t = (1 - t) x0 + t eps`.

use minitensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Diffusion,
    Flow,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Diffusion => "diffusion",
            Family::Flow => "flow",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(Family::Diffusion),
            "flow" => Ok(Family::Flow),
            other => Err(Error::invalid(format!("unknown family `{other}`"))),
        }
    }
}

/// Where a sample sits on its noising process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseTime {
    /// Diffusion level index, `0 <= level < K`.
    Level(usize),
    /// Flow time in `[0, 1]`.
    Continuous(f64),
}

impl NoiseTime {
    pub fn family(self) -> Family {
        match self {
            NoiseTime::Level(_) => Family::Diffusion,
            NoiseTime::Continuous(_) => Family::Flow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    SquaredCosine,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpmSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

fn cosine_alpha_bar(t: f64) -> f64 {
    ((t + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

impl DdpmSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("a DDPM schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Squared-cosine schedule with betas capped at 0.999.
    pub fn squared_cosine(steps: usize) -> Result<Self> {
        let k = steps as f64;
        let betas = (0..steps)
            .map(|i| {
                let b = 1.0 - cosine_alpha_bar((i + 1) as f64 / k) / cosine_alpha_bar(i as f64 / k);
                b.min(0.999)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn new(steps: usize, kind: BetaSchedule) -> Result<Self> {
        match kind {
            BetaSchedule::SquaredCosine => Self::squared_cosine(steps),
            BetaSchedule::Linear => Self::linear(steps, 1e-4, 0.02),
        }
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_level(&self, level: usize) -> Result<f64> {
        self.alpha_bars.get(level).copied().ok_or_else(|| {
            Error::invalid(format!("diffusion level {level} outside [0, {})", self.num_steps()))
        })
    }

    /// `sqrt(abar) x0 + sqrt(1 - abar) eps` at `level`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, level: usize) -> Result<Tensor> {
        let ab = self.check_level(level)?;
        Ok(x0.scale(ab.sqrt()).axpy((1.0 - ab).sqrt(), eps)?)
    }

    /// One ancestral step from counter `k` (level `k - 1`) to `k - 1`.
    /// `noise` is consumed only when the posterior variance is positive.
    pub fn step(&self, x: &Tensor, eps: &Tensor, k: usize, noise: impl FnOnce() -> Tensor) -> Result<Tensor> {
        if k == 0 || k > self.num_steps() {
            return Err(Error::invalid(format!("ddpm step counter {k} outside [1, {}]", self.num_steps())));
        }
        if !eps.all_finite() {
            return Err(Error::NonFinite("predicted noise".into()));
        }
        let level = k - 1;
        let ab = self.alpha_bars[level];
        let ab_prev = if level == 0 { 1.0 } else { self.alpha_bars[level - 1] };
        let beta = 1.0 - ab / ab_prev;
        let alpha = 1.0 - beta;
        let x0_hat = x.axpy(-(1.0 - ab).sqrt(), eps)?.scale(1.0 / ab.sqrt());
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mean = x0_hat.scale(c0).axpy(ct, x)?;
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        if var > 0.0 {
            Ok(mean.axpy(var.sqrt(), &noise())?)
        } else {
            Ok(mean)
        }
    }
}

/// Linear interpolation path with `N` uniform Euler steps from `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FmPath {
    pub num_steps: usize,
}

impl FmPath {
    pub fn new(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("flow path needs at least one step"));
        }
        Ok(Self { num_steps })
    }

    pub fn dt(&self) -> f64 {
        -1.0 / self.num_steps as f64
    }

    /// Pre-update time of counter `k = N, ..., 1`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.num_steps as f64
    }
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::invalid(format!("flow time {t} outside [0, 1]")))
    }
}

pub fn fm_interpolate(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    check_unit(t)?;
    Ok(x0.scale(1.0 - t).axpy(t, eps)?)
}

/// `eps - x0`, the path derivative in `t`.
pub fn fm_conditional_velocity(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    Ok(eps.sub(x0)?)
}

/// `(a_t, b_t)` with `u_t(x) = a_t x + b_t grad log p_t(x)` on the linear path.
pub fn marginal_fm_coefficients(t: f64) -> Result<(f64, f64)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!("marginal coefficients need t in (0, 1), got {t}")));
    }
    Ok((-1.0 / (1.0 - t), -t / (1.0 - t)))
}

/// Scale multiplying the score gradient in the guided update.
pub fn guidance_coefficient(schedule: &DdpmSchedule, time: NoiseTime) -> Result<f64> {
    match time {
        NoiseTime::Level(level) => Ok((1.0 - schedule.check_level(level)?).sqrt()),
        NoiseTime::Continuous(t) => flow_guidance_coefficient(t),
    }
}

pub fn flow_guidance_coefficient(t: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::invalid(format!("flow guidance coefficient undefined at t = {t}")));
    }
    Ok(t / (1.0 - t))
}

/// The full noising process for one family.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSchedule {
    Diffusion(DdpmSchedule),
    Flow(FmPath),
}

impl NoiseSchedule {
    pub fn family(&self) -> Family {
        match self {
            NoiseSchedule::Diffusion(_) => Family::Diffusion,
            NoiseSchedule::Flow(_) => Family::Flow,
        }
    }

    pub fn num_steps(&self) -> usize {
        match self {
            NoiseSchedule::Diffusion(s) => s.num_steps(),
            NoiseSchedule::Flow(p) => p.num_steps,
        }
    }

    /// Noise time visited by reverse counter `k` (`K..=1`).
    pub fn time_at(&self, k: usize) -> NoiseTime {
        match self {
            NoiseSchedule::Diffusion(_) => NoiseTime::Level(k - 1),
            NoiseSchedule::Flow(p) => NoiseTime::Continuous(p.time(k)),
        }
    }

    /// Corrupts clean `x0` with `eps` to a geometric `level` where 0 is clean.
    /// Diffusion level `g >= 1` uses index `g - 1`; flow uses `t = g / N`.
    pub fn corrupt(&self, x0: &Tensor, eps: &Tensor, level: usize) -> Result<Tensor> {
        if level == 0 {
            return Ok(x0.clone());
        }
        match self {
            NoiseSchedule::Diffusion(s) => s.add_noise(x0, eps, level - 1),
            NoiseSchedule::Flow(p) => fm_interpolate(x0, eps, (level as f64 / p.num_steps as f64).min(1.0)),
        }
    }

    /// Time matching a geometric corruption level, `None` for clean.
    pub fn corruption_time(&self, level: usize) -> Option<NoiseTime> {
        match (self, level) {
            (_, 0) => None,
            (NoiseSchedule::Diffusion(_), g) => Some(NoiseTime::Level(g - 1)),
            (NoiseSchedule::Flow(p), g) => Some(NoiseTime::Continuous((g as f64 / p.num_steps as f64).min(1.0))),
        }
    }
}

/// Truncated geometric distribution over noise levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricNoiseSampler {
    p: f64,
    max_level: Option<usize>,
}

impl GeometricNoiseSampler {
    pub fn new(p: f64, max_level: Option<usize>) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid(format!("geometric p = {p} outside (0, 1]")));
        }
        Ok(Self { p, max_level })
    }

    /// Always returns level 0.
    pub fn clean() -> Self {
        Self {
            p: 1.0,
            max_level: Some(0),
        }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn max_level(&self) -> Option<usize> {
        self.max_level
    }

    /// Normalized pmf at `level`.
    pub fn pmf(&self, level: usize) -> f64 {
        if self.max_level.is_some_and(|m| level > m) {
            return 0.0;
        }
        let q = 1.0 - self.p;
        let z = match self.max_level {
            Some(m) => 1.0 - q.powi(m as i32 + 1),
            None => 1.0,
        };
        self.p * q.powi(level as i32) / z
    }

    /// Inverse-CDF draw.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        if self.p >= 1.0 || self.max_level == Some(0) {
            return 0;
        }
        let q = 1.0 - self.p;
        let z = match self.max_level {
            Some(m) => 1.0 - q.powi(m as i32 + 1),
            None => 1.0,
        };
        let u: f64 = rng.random();
        let k = ((1.0 - u * z).ln() / q.ln()).floor();
        let k = if k.is_finite() && k >= 0.0 { k as usize } else { 0 };
        match self.max_level {
            Some(m) => k.min(m),
            None => k,
        }
    }
}

/// Fills a tensor of `shape` with standard normal draws.
pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}
