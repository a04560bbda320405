//! Vision-conditioned generative action policies.
//!
//! One network shape serves both families: an MLP over the flattened noisy
//! chunk, a sinusoidal embedding of the noise time, and the normalized
//! condition (visual features plus absolute pose). It predicts noise for
//! diffusion and velocity for flow matching.

use std::path::Path;

use minitensor::nn::{Activation, Bound, Mlp, ParamStore};
use minitensor::optim::{AdamConfig, AdamW};
use minitensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_rows, ChunkSample, Normalizer};
use crate::error::{Error, Result};
use crate::pose::ActionParam;
use crate::schedulers::{
    fm_conditional_velocity, fm_interpolate, standard_normal, BetaSchedule, DdpmSchedule, Family, FmPath,
    NoiseSchedule, NoiseTime,
};
use crate::steering::Denoiser;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub family: Family,
    pub horizon: usize,
    pub action_param: ActionParam,
    pub hidden: usize,
    /// Number of sinusoid frequencies in the time embedding.
    pub time_frequencies: usize,
    pub diffusion_steps: usize,
    pub beta_schedule: BetaSchedule,
    pub flow_steps: usize,
    /// Chunk steps executed before replanning.
    pub execute_steps: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            family: Family::Diffusion,
            horizon: 8,
            action_param: ActionParam::Planar,
            hidden: 256,
            time_frequencies: 16,
            diffusion_steps: 100,
            beta_schedule: BetaSchedule::SquaredCosine,
            flow_steps: 10,
            execute_steps: 4,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.hidden == 0 || self.time_frequencies == 0 {
            return Err(Error::Config("policy horizon, hidden and time_frequencies must be positive".into()));
        }
        if self.execute_steps == 0 || self.execute_steps > self.horizon {
            return Err(Error::Config("policy.execute_steps must lie in [1, horizon]".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(match self.family {
            Family::Diffusion => NoiseSchedule::Diffusion(DdpmSchedule::new(self.diffusion_steps, self.beta_schedule)?),
            Family::Flow => NoiseSchedule::Flow(FmPath::new(self.flow_steps)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-3,
            epochs: 600,
            seed: 0,
            warmup_steps: 100,
            weight_decay: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size, epochs and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal features of a noise time mapped to `[0, 1]`.
pub fn time_embedding(time: NoiseTime, schedule: &NoiseSchedule, frequencies: usize) -> Result<Vec<f64>> {
    let tau = match (schedule, time) {
        (NoiseSchedule::Diffusion(s), NoiseTime::Level(l)) if l < s.num_steps() => (l + 1) as f64 / s.num_steps() as f64,
        (NoiseSchedule::Flow(_), NoiseTime::Continuous(t)) if (0.0..=1.0).contains(&t) => t,
        (s, t) if s.family() == t.family() => {
            return Err(Error::invalid(format!("noise time {t:?} out of range")));
        }
        (s, t) => {
            return Err(Error::FamilyMismatch {
                expected: s.family(),
                got: t.family(),
            })
        }
    };
    let mut out = Vec::with_capacity(2 * frequencies);
    for i in 0..frequencies {
        let w = if frequencies == 1 {
            1.0
        } else {
            200f64.powf(i as f64 / (frequencies - 1) as f64)
        };
        out.push((w * tau).sin());
        out.push((w * tau).cos());
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyMeta {
    config: PolicyConfig,
    cond_dim: usize,
    action_norm: Normalizer,
    cond_norm: Normalizer,
    trained_steps: usize,
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    schedule: NoiseSchedule,
    store: ParamStore,
    net: Mlp,
    pub action_norm: Normalizer,
    pub cond_norm: Normalizer,
    cond_dim: usize,
    trained_steps: usize,
}

impl Policy {
    pub fn new(config: PolicyConfig, cond_norm: Normalizer, action_norm: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let cond_dim = cond_norm.width();
        let d = config.action_param.dim();
        if action_norm.width() != d {
            return Err(Error::invalid(format!(
                "action normalizer has width {}, expected {d}",
                action_norm.width()
            )));
        }
        let chunk = config.horizon * d;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = chunk + 2 * config.time_frequencies + cond_dim;
        let net = Mlp::new(
            &mut store,
            "policy",
            &[input, config.hidden, config.hidden, chunk],
            Activation::Gelu,
            &mut rng,
        );
        Ok(Self {
            config,
            schedule,
            store,
            net,
            action_norm,
            cond_norm,
            cond_dim,
            trained_steps: 0,
        })
    }

    /// Fits normalizers on `samples` and initializes weights from `seed`.
    pub fn for_samples(config: PolicyConfig, samples: &[ChunkSample], seed: u64) -> Result<Self> {
        let d = config.action_param.dim();
        let actions: Vec<&[f64]> = samples.iter().map(|s| s.actions.as_slice()).collect();
        let conds: Vec<Vec<f64>> = samples.iter().map(|s| s.condition()).collect();
        let cond_refs: Vec<&[f64]> = conds.iter().map(|c| c.as_slice()).collect();
        Self::new(
            config,
            Normalizer::fit_standard(&cond_refs),
            Normalizer::fit_range(&actions, d),
            seed,
        )
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn chunk_shape(&self) -> [usize; 2] {
        [self.config.horizon, self.config.action_param.dim()]
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn trained_steps(&self) -> usize {
        self.trained_steps
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Sets every weight to zero.
    pub fn zero_weights(&mut self) {
        let ids: Vec<_> = self.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in ids {
            let id = self.store.id(&name).expect("listed");
            let shape = self.store.get(id).shape().to_vec();
            self.store.set(id, Tensor::zeros(&shape)).expect("same shape");
        }
    }

    /// Normalized condition rows `[B, C]` from raw condition vectors.
    pub fn condition_tensor(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        if let Some(r) = rows.iter().find(|r| r.len() != self.cond_dim) {
            return Err(Error::invalid(format!(
                "condition has {} values, policy expects {}",
                r.len(),
                self.cond_dim
            )));
        }
        let normed: Vec<Vec<f64>> = rows.iter().map(|r| self.cond_norm.apply(r)).collect();
        stack_rows(normed.iter().map(|r| r.as_slice()), &[self.cond_dim])
    }

    fn time_rows(&self, time: NoiseTime, batch: usize) -> Result<Tensor> {
        let emb = time_embedding(time, &self.schedule, self.config.time_frequencies)?;
        let rows: Vec<&[f64]> = (0..batch).map(|_| emb.as_slice()).collect();
        stack_rows(rows, &[emb.len()])
    }

    fn time_rows_mixed(&self, times: &[NoiseTime]) -> Result<Tensor> {
        let embs: Result<Vec<Vec<f64>>> = times
            .iter()
            .map(|&t| time_embedding(t, &self.schedule, self.config.time_frequencies))
            .collect();
        let embs = embs?;
        stack_rows(embs.iter().map(|e| e.as_slice()), &[2 * self.config.time_frequencies])
    }

    fn forward<'t>(&self, p: &Bound<'t>, tape: &'t Tape, x: &Tensor, temb: Tensor, cond: Tensor) -> Result<Var<'t>> {
        let b = x.shape()[0];
        let input = Var::concat(
            &[
                tape.constant(x.reshape(&[b, x.len() / b.max(1)])?),
                tape.constant(temb),
                tape.constant(cond),
            ],
            1,
        )?;
        Ok(self.net.forward(p, input)?)
    }

    /// Noise or velocity prediction for `x`: `[B, H, D]` at `time`.
    pub fn predict(&self, x: &Tensor, time: NoiseTime, cond: &Tensor) -> Result<Tensor> {
        let [h, d] = self.chunk_shape();
        let b = x.shape().first().copied().unwrap_or(0);
        if x.shape() != [b, h, d] || cond.shape() != [b, self.cond_dim] {
            return Err(Error::invalid(format!(
                "policy input shapes {:?} / {:?} do not match chunk [{b}, {h}, {d}] and condition [{b}, {}]",
                x.shape(),
                cond.shape(),
                self.cond_dim
            )));
        }
        let temb = self.time_rows(time, b)?;
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let out = self.forward(&p, &tape, x, temb, cond.clone())?;
        Ok(out.value().reshape(&[b, h, d])?)
    }

    pub fn conditioned<'a>(&'a self, cond: &'a Tensor) -> ConditionedPolicy<'a> {
        ConditionedPolicy { policy: self, cond }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(dir.join("weights.mtck"))?;
        let meta = PolicyMeta {
            config: self.config.clone(),
            cond_dim: self.cond_dim,
            action_norm: self.action_norm.clone(),
            cond_norm: self.cond_norm.clone(),
            trained_steps: self.trained_steps,
        };
        let path = dir.join("policy.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("policy.json");
        let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: PolicyMeta = serde_json::from_slice(&text)?;
        if meta.cond_norm.width() != meta.cond_dim {
            return Err(Error::invalid("policy metadata is inconsistent"));
        }
        let mut policy = Policy::new(meta.config, meta.cond_norm, meta.action_norm, 0)?;
        policy.store.load(dir.join("weights.mtck"))?;
        policy.trained_steps = meta.trained_steps;
        Ok(policy)
    }
}

/// A policy with its condition bound, usable by the samplers.
pub struct ConditionedPolicy<'a> {
    pub policy: &'a Policy,
    pub cond: &'a Tensor,
}

impl Denoiser for ConditionedPolicy<'_> {
    fn family(&self) -> Family {
        self.policy.family()
    }

    fn predict(&self, x: &Tensor, time: NoiseTime) -> Result<Tensor> {
        self.policy.predict(x, time, self.cond)
    }
}

/// Training targets for one batch of clean, normalized chunks.
fn corrupt_batch(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<NoiseTime>, Tensor)> {
    let b = x0.shape()[0];
    let row: Vec<usize> = x0.shape()[1..].to_vec();
    let mut noisy = Vec::with_capacity(x0.len());
    let mut targets = Vec::with_capacity(x0.len());
    let mut times = Vec::with_capacity(b);
    for i in 0..b {
        let clean = x0.row(i)?;
        let eps = standard_normal(&row, rng);
        let (x, target, time) = match schedule {
            NoiseSchedule::Diffusion(s) => {
                let level = rng.random_range(0..s.num_steps());
                (s.add_noise(&clean, &eps, level)?, eps, NoiseTime::Level(level))
            }
            NoiseSchedule::Flow(_) => {
                let t: f64 = rng.random();
                (
                    fm_interpolate(&clean, &eps, t)?,
                    fm_conditional_velocity(&clean, &eps)?,
                    NoiseTime::Continuous(t),
                )
            }
        };
        noisy.extend_from_slice(x.data());
        targets.extend_from_slice(target.data());
        times.push(time);
    }
    Ok((
        Tensor::new(x0.shape(), noisy)?,
        times,
        Tensor::new(x0.shape(), targets)?,
    ))
}

/// Denoising regression on expert chunks. Returns `(step, loss)` pairs.
pub fn train_policy(
    policy: &mut Policy,
    samples: &[ChunkSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let [h, d] = policy.chunk_shape();
    if let Some(s) = samples.iter().find(|s| s.actions.len() != h * d) {
        return Err(Error::invalid(format!("sample chunk has {} values, expected {}", s.actions.len(), h * d)));
    }
    let actions: Vec<Vec<f64>> = samples.iter().map(|s| policy.action_norm.apply(&s.actions)).collect();
    let conds: Vec<Vec<f64>> = samples.iter().map(|s| policy.cond_norm.apply(&s.condition())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let batches_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total = batches_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(AdamConfig {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        warmup_steps: cfg.warmup_steps,
        decay_steps: Some(total),
        max_grad_norm: Some(1.0),
        ..Default::default()
    });
    let mut curve = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let start = policy.trained_steps;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let x0 = stack_rows(batch.iter().map(|&i| actions[i].as_slice()), &[h, d])?;
            let cond = stack_rows(batch.iter().map(|&i| conds[i].as_slice()), &[policy.cond_dim])?;
            let (x, times, target) = corrupt_batch(&policy.schedule, &x0, &mut rng)?;
            let temb = policy.time_rows_mixed(&times)?;
            let tape = Tape::new();
            let p = policy.store.bind(&tape, true);
            let pred = policy.forward(&p, &tape, &x, temb, cond)?;
            let diff = pred.sub(tape.constant(target.reshape(&[b, h * d])?))?;
            let loss = diff.mul(diff)?.mean();
            let value = loss.value().item()?;
            let step = start + curve.len();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("policy loss is {value}"),
                });
            }
            let grads = p.gradients(&loss.backward()?);
            opt.step(&mut policy.store, &grads)?;
            if !policy.store.all_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite policy parameters".into(),
                });
            }
            curve.push((step, value));
            on_step(step, value);
        }
    }
    policy.trained_steps = start + curve.len();
    Ok(curve)
}
