//! Guided sampling for both families.
//!
//! Any [`Denoiser`] can be steered by any [`GuidanceScore`]: the learned
//! policy with the contact model, or the analytic mixture with its exact
//! classifier. Steering is applied only in the late window of the chain.

use std::time::Instant;

use minitensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedulers::{
    flow_guidance_coefficient, guidance_coefficient, standard_normal, DdpmSchedule, Family, NoiseSchedule, NoiseTime,
};

/// Predicts noise (diffusion) or velocity (flow) for a batch `[B, ...]`.
pub trait Denoiser {
    fn family(&self) -> Family;
    fn predict(&self, x: &Tensor, time: NoiseTime) -> Result<Tensor>;
}

/// Gradient of a per-sample score with respect to the noisy sample.
pub trait GuidanceScore {
    fn gradient(&self, x: &Tensor, time: NoiseTime) -> Result<Tensor>;
}

/// How the flow update scales the score gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowCoefficient {
    /// `t / (1 - t)`.
    #[default]
    Odds,
    /// `t` alone; only used to show that the check above catches it.
    Time,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub eta: f64,
    /// Diffusion: number of final steps (integer). Flow: largest guided `t`.
    pub window: f64,
    /// Per-sample gradient max-norm clip. Off by default.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub flow_coefficient: FlowCoefficient,
}

impl GuidanceConfig {
    pub fn new(eta: f64, window: f64) -> Self {
        Self {
            eta,
            window,
            max_grad_norm: None,
            flow_coefficient: FlowCoefficient::Odds,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("guidance scale {} must be finite and >= 0", self.eta)));
        }
        match schedule {
            NoiseSchedule::Diffusion(s) => {
                let ok = self.window >= 0.0 && self.window.fract() == 0.0 && self.window <= s.num_steps() as f64;
                if !ok {
                    return Err(Error::invalid(format!(
                        "diffusion guidance window must be an integer in [0, {}], got {}",
                        s.num_steps(),
                        self.window
                    )));
                }
            }
            NoiseSchedule::Flow(_) => {
                if !(0.0..1.0).contains(&self.window) {
                    return Err(Error::invalid(format!(
                        "flow guidance window must lie in [0, 1), got {}",
                        self.window
                    )));
                }
            }
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("max_grad_norm must be positive"));
            }
        }
        Ok(())
    }

    /// Whether reverse counter `k` falls inside the window.
    pub fn is_active(&self, schedule: &NoiseSchedule, k: usize) -> bool {
        if self.eta == 0.0 {
            return false;
        }
        match schedule {
            NoiseSchedule::Diffusion(_) => (k as f64) <= self.window,
            NoiseSchedule::Flow(p) => {
                let t = p.time(k);
                t < 1.0 && t <= self.window + 1e-12
            }
        }
    }

    /// Steps covered by the window, whatever the scale.
    pub fn window_steps(&self, schedule: &NoiseSchedule) -> usize {
        let probe = GuidanceConfig {
            eta: 1.0,
            ..self.clone()
        };
        probe.active_steps(schedule)
    }

    /// Number of guided steps in a full chain.
    pub fn active_steps(&self, schedule: &NoiseSchedule) -> usize {
        (1..=schedule.num_steps()).filter(|&k| self.is_active(schedule, k)).count()
    }
}

/// `eps - eta * sqrt(1 - abar) * grad`.
pub fn guided_epsilon(eps: &Tensor, grad: &Tensor, level: usize, eta: f64, schedule: &DdpmSchedule) -> Result<Tensor> {
    if !grad.all_finite() {
        return Err(Error::NonFinite("score gradient".into()));
    }
    let c = guidance_coefficient(schedule, NoiseTime::Level(level))?;
    Ok(eps.axpy(-eta * c, grad)?)
}

/// `u - eta * t / (1 - t) * grad`.
pub fn guided_velocity(u: &Tensor, grad: &Tensor, t: f64, eta: f64) -> Result<Tensor> {
    guided_velocity_with(u, grad, t, eta, FlowCoefficient::Odds)
}

pub fn guided_velocity_with(u: &Tensor, grad: &Tensor, t: f64, eta: f64, rule: FlowCoefficient) -> Result<Tensor> {
    if !grad.all_finite() {
        return Err(Error::NonFinite("score gradient".into()));
    }
    let c = match rule {
        FlowCoefficient::Odds => flow_guidance_coefficient(t)?,
        FlowCoefficient::Time => {
            flow_guidance_coefficient(t)?;
            t
        }
    };
    Ok(u.axpy(-eta * c, grad)?)
}

/// A score plus the settings that control it.
#[derive(Clone, Copy)]
pub struct Guidance<'a> {
    pub score: &'a dyn GuidanceScore,
    pub config: &'a GuidanceConfig,
}

const INIT_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

/// Per-sample random streams: one for the initial noise, one for
/// ancestral-step noise.
pub struct RowStreams {
    init: Vec<ChaCha8Rng>,
    step: Vec<ChaCha8Rng>,
}

impl RowStreams {
    pub fn new(seeds: &[u64]) -> Self {
        let make = |stream| {
            seeds
                .iter()
                .map(|&s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    rng.set_stream(stream);
                    rng
                })
                .collect()
        };
        Self {
            init: make(INIT_STREAM),
            step: make(STEP_STREAM),
        }
    }

    fn draw(rngs: &mut [ChaCha8Rng], row_shape: &[usize]) -> Tensor {
        let rows: Vec<Tensor> = rngs.iter_mut().map(|r| standard_normal(row_shape, r)).collect();
        Tensor::stack(&rows).expect("rows share a shape")
    }
}

fn clip_rows(grad: Tensor, max_norm: f64) -> Tensor {
    let shape = grad.shape().to_vec();
    let stride: usize = shape[1..].iter().product();
    let mut data = grad.into_data();
    for row in data.chunks_mut(stride.max(1)) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > max_norm {
            let s = max_norm / n;
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
    Tensor::new(&shape, data).expect("shape preserved")
}

/// Runs the full reverse chain for `seeds.len()` samples of `row_shape`.
/// Without guidance (or with `eta = 0` / an empty window) this is the plain
/// sampler, and the two paths share every random draw.
pub fn guided_sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    guidance: Option<Guidance<'_>>,
    row_shape: &[usize],
    seeds: &[u64],
) -> Result<Tensor> {
    if denoiser.family() != schedule.family() {
        return Err(Error::FamilyMismatch {
            expected: schedule.family(),
            got: denoiser.family(),
        });
    }
    if seeds.is_empty() {
        return Err(Error::invalid("sampling needs at least one seed"));
    }
    if let Some(g) = guidance {
        g.config.validate(schedule)?;
    }
    let mut streams = RowStreams::new(seeds);
    let mut x = RowStreams::draw(&mut streams.init, row_shape);
    let total = schedule.num_steps();
    for k in (1..=total).rev() {
        let time = schedule.time_at(k);
        let pred = denoiser.predict(&x, time)?;
        if pred.shape() != x.shape() {
            return Err(Error::invalid(format!(
                "denoiser returned shape {:?} for input {:?}",
                pred.shape(),
                x.shape()
            )));
        }
        let active = guidance.filter(|g| g.config.is_active(schedule, k));
        let pred = match active {
            None => pred,
            Some(g) => {
                let mut grad = g.score.gradient(&x, time)?;
                if let Some(c) = g.config.max_grad_norm {
                    grad = clip_rows(grad, c);
                }
                match (schedule, time) {
                    (NoiseSchedule::Diffusion(s), NoiseTime::Level(level)) => {
                        guided_epsilon(&pred, &grad, level, g.config.eta, s)?
                    }
                    (NoiseSchedule::Flow(_), NoiseTime::Continuous(t)) => {
                        guided_velocity_with(&pred, &grad, t, g.config.eta, g.config.flow_coefficient)?
                    }
                    _ => unreachable!("schedule and time agree"),
                }
            }
        };
        x = match schedule {
            NoiseSchedule::Diffusion(s) => s.step(&x, &pred, k, || RowStreams::draw(&mut streams.step, row_shape))?,
            NoiseSchedule::Flow(p) => x.axpy(p.dt(), &pred)?,
        };
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("sample at step {k}")));
        }
    }
    Ok(x)
}

pub fn sample_unguided(denoiser: &dyn Denoiser, schedule: &NoiseSchedule, row_shape: &[usize], seeds: &[u64]) -> Result<Tensor> {
    guided_sample(denoiser, schedule, None, row_shape, seeds)
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub window: f64,
    pub guided_steps: usize,
    pub unguided_ms: f64,
    pub guided_ms: f64,
    pub overhead_pct: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall time per chunk with and without guidance. `prepare` runs
/// before each guided chunk and is timed with it (e.g. encoding the
/// observation once per chunk).
pub fn latency_probe<'a, S: GuidanceScore + 'a>(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    prepare: impl Fn() -> Result<S>,
    config: &GuidanceConfig,
    row_shape: &[usize],
    trials: usize,
) -> Result<LatencyReport> {
    if trials == 0 {
        return Err(Error::invalid("latency probe needs at least one trial"));
    }
    // warm-up
    sample_unguided(denoiser, schedule, row_shape, &[0])?;
    let mut plain = Vec::with_capacity(trials);
    let mut guided = Vec::with_capacity(trials);
    for trial in 0..trials {
        let seeds = [trial as u64];
        let start = Instant::now();
        sample_unguided(denoiser, schedule, row_shape, &seeds)?;
        plain.push(start.elapsed().as_secs_f64() * 1e3);

        let start = Instant::now();
        let score = prepare()?;
        let g = Guidance { score: &score, config };
        guided_sample(denoiser, schedule, Some(g), row_shape, &seeds)?;
        guided.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let unguided_ms = median(plain);
    let guided_ms = median(guided);
    Ok(LatencyReport {
        window: config.window,
        guided_steps: config.active_steps(schedule),
        unguided_ms,
        guided_ms,
        overhead_pct: 100.0 * (guided_ms - unguided_ms) / unguided_ms,
    })
}
