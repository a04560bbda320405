//! Closed-form Gaussian-mixture models used to check the samplers.
//!
//! Every function here acts coordinate-wise: a tensor is treated as a batch
//! of independent scalars drawn from the same 1D mixture.

use minitensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::schedulers::{marginal_fm_coefficients, DdpmSchedule, Family, NoiseSchedule, NoiseTime};
use crate::steering::{guided_sample, Denoiser, Guidance, GuidanceConfig, GuidanceScore};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: f64,
    pub variance: f64,
    pub weight: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub components: Vec<MixtureComponent>,
}

/// Mixture after pushing through the forward process.
#[derive(Debug, Clone)]
struct Marginal {
    weight: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + (2.0 * std::f64::consts::PI * var).ln())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Marginal {
    fn log_terms(&self, x: f64) -> Vec<f64> {
        (0..self.weight.len())
            .map(|i| self.weight[i].ln() + log_normal(x, self.mean[i], self.var[i]))
            .collect()
    }

    fn responsibilities(&self, x: f64, subset: impl Fn(usize) -> bool) -> Vec<f64> {
        let terms: Vec<f64> = self
            .log_terms(x)
            .into_iter()
            .enumerate()
            .map(|(i, v)| if subset(i) { v } else { f64::NEG_INFINITY })
            .collect();
        let z = log_sum_exp(&terms);
        terms.iter().map(|v| (v - z).exp()).collect()
    }

    fn score_over(&self, x: f64, subset: impl Fn(usize) -> bool) -> f64 {
        self.responsibilities(x, subset)
            .iter()
            .enumerate()
            .map(|(i, r)| if *r == 0.0 { 0.0 } else { -r * (x - self.mean[i]) / self.var[i] })
            .sum()
    }
}

impl GaussianMixtureSpec {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let spec = Self { components };
        spec.validate()?;
        Ok(spec)
    }

    /// Two-class mixture with one component per class.
    pub fn two_class(means: [f64; 2], stds: [f64; 2], weights: [f64; 2]) -> Result<Self> {
        Self::new(
            (0..2)
                .map(|i| MixtureComponent {
                    mean: means[i],
                    variance: stds[i] * stds[i],
                    weight: weights[i],
                    label: i,
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::invalid("mixture has no components"));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        for c in &self.components {
            if !(c.weight > 0.0 && c.variance > 0.0 && c.mean.is_finite()) {
                return Err(Error::invalid(format!("invalid mixture component {c:?}")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.components.iter().map(|c| c.label + 1).max().unwrap_or(0)
    }

    pub fn class_weight(&self, label: usize) -> f64 {
        self.components.iter().filter(|c| c.label == label).map(|c| c.weight).sum()
    }

    fn scaled(&self, a: f64, noise_var: f64) -> Marginal {
        Marginal {
            weight: self.components.iter().map(|c| c.weight).collect(),
            mean: self.components.iter().map(|c| a * c.mean).collect(),
            var: self.components.iter().map(|c| a * a * c.variance + noise_var).collect(),
        }
    }

    /// Flow marginal at `t`: means `(1-t) mu`, variances `(1-t)^2 s^2 + t^2`.
    fn flow_marginal(&self, t: f64) -> Marginal {
        self.scaled(1.0 - t, t * t)
    }

    fn diffusion_marginal(&self, alpha_bar: f64) -> Marginal {
        self.scaled(alpha_bar.sqrt(), 1.0 - alpha_bar)
    }

    fn clean(&self) -> Marginal {
        self.scaled(1.0, 0.0)
    }

    pub fn density(&self, x: f64) -> f64 {
        log_sum_exp(&self.clean().log_terms(x)).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| {
                c.weight
                    * Normal::new(c.mean, c.variance.sqrt())
                        .expect("validated variance")
                        .cdf(x)
            })
            .sum()
    }

    /// `d/dx log p_t(x)` under the flow path.
    pub fn flow_score(&self, x: f64, t: f64) -> f64 {
        self.flow_marginal(t).score_over(x, |_| true)
    }

    /// Most probable class of a clean sample.
    pub fn classify(&self, x: f64) -> usize {
        let m = self.clean();
        let terms = m.log_terms(x);
        (0..self.num_classes())
            .max_by(|&a, &b| {
                let la = log_sum_exp(&self.masked(&terms, a));
                let lb = log_sum_exp(&self.masked(&terms, b));
                la.total_cmp(&lb)
            })
            .unwrap_or(0)
    }

    fn masked(&self, terms: &[f64], label: usize) -> Vec<f64> {
        terms
            .iter()
            .zip(&self.components)
            .map(|(v, c)| if c.label == label { *v } else { f64::NEG_INFINITY })
            .collect()
    }

    /// `log p(y | x)` for a clean sample.
    pub fn log_class_posterior(&self, x: f64, label: usize) -> f64 {
        let terms = self.clean().log_terms(x);
        log_sum_exp(&self.masked(&terms, label)) - log_sum_exp(&terms)
    }

    pub fn draw(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let last = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc || i == last {
                let z: f64 = rng.sample(StandardNormal);
                return c.mean + c.variance.sqrt() * z;
            }
        }
        unreachable!()
    }

    /// `E[x0 | x_t = x]` under the flow path.
    pub fn flow_posterior_mean(&self, x: f64, t: f64) -> f64 {
        let m = self.flow_marginal(t);
        let r = m.responsibilities(x, |_| true);
        self.components
            .iter()
            .zip(&r)
            .zip(&m.var)
            .map(|((c, ri), vi)| ri * (c.mean + (1.0 - t) * c.variance / vi * (x - (1.0 - t) * c.mean)))
            .sum()
    }
}

/// `a_t x + b_t d/dx log p_t(x)`, the marginal velocity of the linear path.
pub fn marginal_velocity_oracle(spec: &GaussianMixtureSpec, x: f64, t: f64) -> Result<f64> {
    let (a, b) = marginal_fm_coefficients(t)?;
    Ok(a * x + b * spec.flow_score(x, t))
}

/// `E[eps - x0 | x_t = x] = (x - E[x0 | x]) / t`; defined on `(0, 1]`.
pub fn posterior_velocity(spec: &GaussianMixtureSpec, x: f64, t: f64) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("posterior velocity needs t in (0, 1], got {t}")));
    }
    Ok((x - spec.flow_posterior_mean(x, t)) / t)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub effective_samples: f64,
}

/// Monte Carlo `E[eps - x0 | x_t = x]` from `n` prior draws of `x0`,
/// self-normalized by the path likelihood `N(x; (1-t) x0, t^2)`.
pub fn mc_conditional_velocity(spec: &GaussianMixtureSpec, x: f64, t: f64, n: usize, rng: &mut impl Rng) -> Result<McEstimate> {
    if !(t > 0.0 && t < 1.0) || n < 2 {
        return Err(Error::invalid("monte carlo estimate needs t in (0, 1) and n >= 2"));
    }
    let mut logw = Vec::with_capacity(n);
    let mut f = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = spec.draw(rng);
        logw.push(log_normal(x, (1.0 - t) * x0, t * t));
        // eps implied by the path through x
        let eps = (x - (1.0 - t) * x0) / t;
        f.push(eps - x0);
    }
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
    let sw: f64 = w.iter().sum();
    let mean = w.iter().zip(&f).map(|(wi, fi)| wi * fi).sum::<f64>() / sw;
    let var = w.iter().zip(&f).map(|(wi, fi)| (wi * (fi - mean)).powi(2)).sum::<f64>() / (sw * sw);
    let sw2: f64 = w.iter().map(|wi| wi * wi).sum();
    Ok(McEstimate {
        mean,
        std_error: var.sqrt(),
        effective_samples: sw * sw / sw2,
    })
}

/// Exact denoiser for a mixture: velocity (flow) or noise (diffusion).
pub struct MixtureDenoiser<'a> {
    pub spec: &'a GaussianMixtureSpec,
    pub schedule: &'a NoiseSchedule,
}

impl Denoiser for MixtureDenoiser<'_> {
    fn family(&self) -> Family {
        self.schedule.family()
    }

    fn predict(&self, x: &Tensor, time: NoiseTime) -> Result<Tensor> {
        let out: Result<Vec<f64>> = match (self.schedule, time) {
            (NoiseSchedule::Flow(_), NoiseTime::Continuous(t)) => {
                x.data().iter().map(|&v| posterior_velocity(self.spec, v, t)).collect()
            }
            (NoiseSchedule::Diffusion(s), NoiseTime::Level(level)) => {
                let ab = alpha_bar(s, level)?;
                let m = self.spec.diffusion_marginal(ab);
                Ok(x.data().iter().map(|&v| -(1.0 - ab).sqrt() * m.score_over(v, |_| true)).collect())
            }
            _ => Err(Error::FamilyMismatch {
                expected: self.schedule.family(),
                got: time.family(),
            }),
        };
        Ok(Tensor::new(x.shape(), out?)?)
    }
}

fn alpha_bar(s: &DdpmSchedule, level: usize) -> Result<f64> {
    s.alpha_bars()
        .get(level)
        .copied()
        .ok_or_else(|| Error::invalid(format!("diffusion level {level} out of range")))
}

/// `d/dx log p(y | x_t)` for the mixture, exact at every noise time.
pub struct ExactClassifier<'a> {
    pub spec: &'a GaussianMixtureSpec,
    pub schedule: &'a NoiseSchedule,
    pub label: usize,
}

impl GuidanceScore for ExactClassifier<'_> {
    fn gradient(&self, x: &Tensor, time: NoiseTime) -> Result<Tensor> {
        let m = match (self.schedule, time) {
            (NoiseSchedule::Flow(_), NoiseTime::Continuous(t)) => self.spec.flow_marginal(t),
            (NoiseSchedule::Diffusion(s), NoiseTime::Level(level)) => self.spec.diffusion_marginal(alpha_bar(s, level)?),
            _ => {
                return Err(Error::FamilyMismatch {
                    expected: self.schedule.family(),
                    got: time.family(),
                })
            }
        };
        let labels: Vec<usize> = self.spec.components.iter().map(|c| c.label).collect();
        let data = x
            .data()
            .iter()
            .map(|&v| m.score_over(v, |i| labels[i] == self.label) - m.score_over(v, |_| true))
            .collect();
        Ok(Tensor::new(x.shape(), data)?)
    }
}

/// Statistics of a batch of 1D samples against one class.
#[derive(Debug, Clone, Serialize)]
pub struct SampleSummary {
    pub target_mass: f64,
    pub mean: f64,
    pub variance: f64,
}

pub fn summarize(spec: &GaussianMixtureSpec, samples: &[f64], label: usize) -> SampleSummary {
    let hits = samples.iter().filter(|&&x| spec.classify(x) == label).count();
    SampleSummary {
        target_mass: hits as f64 / samples.len() as f64,
        mean: stats::mean(samples),
        variance: stats::variance(samples),
    }
}

/// Draws `n` scalar samples with optional exact-classifier guidance.
pub fn sample_mixture(
    spec: &GaussianMixtureSpec,
    schedule: &NoiseSchedule,
    guidance: Option<(&GuidanceConfig, usize)>,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let model = MixtureDenoiser { spec, schedule };
    let seeds: Vec<u64> = (0..n as u64).map(|i| seed.wrapping_mul(1_000_003).wrapping_add(i)).collect();
    let out = match guidance {
        None => guided_sample(&model, schedule, None, &[1], &seeds)?,
        Some((config, label)) => {
            let score = ExactClassifier { spec, schedule, label };
            let g = Guidance { score: &score, config };
            guided_sample(&model, schedule, Some(g), &[1], &seeds)?
        }
    };
    Ok(out.into_data())
}

/// Density proportional to `p(x) p(y | x)^eta` on a grid, for comparisons.
#[derive(Debug, Clone)]
pub struct TemperedPosterior {
    grid: Vec<f64>,
    cdf: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

impl TemperedPosterior {
    pub fn new(spec: &GaussianMixtureSpec, label: usize, eta: f64) -> Self {
        let lo = spec
            .components
            .iter()
            .map(|c| c.mean - 10.0 * c.variance.sqrt())
            .fold(f64::INFINITY, f64::min);
        let hi = spec
            .components
            .iter()
            .map(|c| c.mean + 10.0 * c.variance.sqrt())
            .fold(f64::NEG_INFINITY, f64::max);
        let n = 40_001;
        let h = (hi - lo) / (n - 1) as f64;
        let grid: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
        let dens: Vec<f64> = grid
            .iter()
            .map(|&x| {
                let lp = if eta == 0.0 { 0.0 } else { eta * spec.log_class_posterior(x, label) };
                spec.density(x) * lp.exp()
            })
            .collect();
        let mut cdf = vec![0.0; n];
        for i in 1..n {
            cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i] + dens[i - 1]);
        }
        let z = cdf[n - 1];
        cdf.iter_mut().for_each(|c| *c /= z);
        let mean = grid.iter().zip(&dens).map(|(x, d)| x * d).sum::<f64>() * h / z;
        let variance = grid.iter().zip(&dens).map(|(x, d)| (x - mean).powi(2) * d).sum::<f64>() * h / z;
        Self { grid, cdf, mean, variance }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self.grid.binary_search_by(|g| g.total_cmp(&x)) {
            Ok(i) => self.cdf[i],
            Err(0) => 0.0,
            Err(i) if i >= self.grid.len() => 1.0,
            Err(i) => {
                let (x0, x1) = (self.grid[i - 1], self.grid[i]);
                let w = (x - x0) / (x1 - x0);
                self.cdf[i - 1] * (1.0 - w) + self.cdf[i] * w
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GuidanceCheckRow {
    pub eta: f64,
    pub target_mass: f64,
    pub mean: f64,
    pub variance: f64,
    pub reference_mean: f64,
    pub reference_variance: f64,
    pub ks: f64,
}

/// Guided sampling with the exact classifier over a grid of scales, each
/// row compared with the tempered posterior `p(x) p(y|x)^eta`. `base`
/// supplies everything but the scale.
pub fn analytic_guidance_check(
    spec: &GaussianMixtureSpec,
    label: usize,
    etas: &[f64],
    schedule: &NoiseSchedule,
    base: &GuidanceConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<GuidanceCheckRow>> {
    if spec.num_classes() < 2 {
        return Err(Error::invalid("guidance check needs at least two classes"));
    }
    etas.iter()
        .map(|&eta| {
            let config = GuidanceConfig { eta, ..base.clone() };
            let samples = sample_mixture(spec, schedule, Some((&config, label)), n, seed)?;
            let s = summarize(spec, &samples, label);
            let reference = TemperedPosterior::new(spec, label, eta);
            Ok(GuidanceCheckRow {
                eta,
                target_mass: s.target_mass,
                mean: s.mean,
                variance: s.variance,
                reference_mean: reference.mean,
                reference_variance: reference.variance,
                ks: stats::ks_statistic(&samples, |x| reference.cdf(x)),
            })
        })
        .collect()
}
