//! Contact feasibility model.
//!
//! Visual and tactile features are encoded into tokens, fused by a small
//! transformer and pooled into a unit observation embedding. Action chunks
//! pass through a temporal convolution and an MLP into a unit embedding of
//! the same size. The feasibility score is their dot product, and training
//! is symmetric InfoNCE over in-batch pairs with a learnable temperature.
//!
//! Action inputs live in the policy's normalized action space, which is also
//! the space the sampler works in; visual and tactile inputs are raw
//! features and are normalized internally.

use std::path::Path;

use minitensor::nn::{Activation, Bound, Conv1d, LayerNorm, Linear, Mlp, ParamId, ParamStore, TransformerEncoderLayer};
use minitensor::optim::{AdamConfig, AdamW};
use minitensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_rows, ChunkSample, Normalizer};
use crate::error::{Error, Result};
use crate::schedulers::{standard_normal, GeometricNoiseSampler, NoiseSchedule, NoiseTime};
use crate::steering::GuidanceScore;

/// Which observation streams feed the fusion transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Both,
    VisionOnly,
    TouchOnly,
}

impl Modality {
    fn uses_vision(self) -> bool {
        self != Modality::TouchOnly
    }

    fn uses_touch(self) -> bool {
        self != Modality::VisionOnly
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Modality::Both),
            "vision_only" | "vision" => Ok(Modality::VisionOnly),
            "touch_only" | "touch" => Ok(Modality::TouchOnly),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpmConfig {
    pub modality: Modality,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Tokens emitted by each modality encoder.
    pub tokens_per_modality: usize,
    pub encoder_hidden: usize,
    pub embed_dim: usize,
    pub conv_channels: usize,
    pub action_hidden: [usize; 2],
    pub temperature_init: f64,
}

impl Default for CpmConfig {
    fn default() -> Self {
        Self {
            modality: Modality::Both,
            model_dim: 64,
            heads: 4,
            layers: 2,
            ffn_dim: 128,
            tokens_per_modality: 2,
            encoder_hidden: 128,
            embed_dim: 64,
            conv_channels: 32,
            action_hidden: [256, 128],
            temperature_init: 0.1,
        }
    }
}

impl CpmConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.model_dim,
            self.heads,
            self.layers,
            self.ffn_dim,
            self.tokens_per_modality,
            self.encoder_hidden,
            self.embed_dim,
            self.conv_channels,
            self.action_hidden[0],
            self.action_hidden[1],
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("cpm sizes must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config("cpm.model_dim must be divisible by cpm.heads".into()));
        }
        if !(self.temperature_init > 0.0 && self.temperature_init.is_finite()) {
            return Err(Error::Config("cpm.temperature_init must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpmTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Corrupt training actions to geometric noise levels.
    pub augment: bool,
    pub geometric_p: f64,
    /// Highest corruption level; `None` uses the guidance window.
    pub max_level: Option<usize>,
}

impl Default for CpmTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            epochs: 150,
            seed: 0,
            warmup_steps: 50,
            weight_decay: 1e-4,
            augment: true,
            geometric_p: 0.1,
            max_level: None,
        }
    }
}

impl CpmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("cpm batch_size, epochs and learning_rate must be positive".into()));
        }
        GeometricNoiseSampler::new(self.geometric_p, self.max_level)?;
        Ok(())
    }

    pub fn sampler(&self, window_level: usize) -> Result<GeometricNoiseSampler> {
        if !self.augment {
            return Ok(GeometricNoiseSampler::clean());
        }
        GeometricNoiseSampler::new(self.geometric_p, Some(self.max_level.unwrap_or(window_level)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CpmMeta {
    config: CpmConfig,
    horizon: usize,
    action_dim: usize,
    visual_norm: Normalizer,
    tactile_norm: Normalizer,
    action_norm: Normalizer,
    trained_steps: usize,
}

#[derive(Debug, Clone)]
pub struct Cpm {
    pub config: CpmConfig,
    store: ParamStore,
    visual_encoder: Mlp,
    tactile_encoder: Mlp,
    token_embedding: ParamId,
    fusion: Vec<TransformerEncoderLayer>,
    obs_norm: LayerNorm,
    obs_head: Linear,
    conv: Conv1d,
    action_mlp: Mlp,
    action_norm_layer: LayerNorm,
    action_head: Linear,
    log_tau: ParamId,
    pub visual_norm: Normalizer,
    pub tactile_norm: Normalizer,
    /// Maps raw relative actions into the space the model reads.
    pub action_norm: Normalizer,
    horizon: usize,
    action_dim: usize,
    trained_steps: usize,
}

impl Cpm {
    pub fn new(
        config: CpmConfig,
        visual_norm: Normalizer,
        tactile_norm: Normalizer,
        action_norm: Normalizer,
        horizon: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let action_dim = action_norm.width();
        if horizon == 0 || action_dim == 0 {
            return Err(Error::invalid("cpm needs a non-empty action chunk"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, tpm, hid) = (config.model_dim, config.tokens_per_modality, config.encoder_hidden);
        let visual_encoder = Mlp::new(
            &mut store,
            "cpm.visual",
            &[visual_norm.width(), hid, d * tpm],
            Activation::Gelu,
            &mut rng,
        );
        let tactile_encoder = Mlp::new(
            &mut store,
            "cpm.tactile",
            &[tactile_norm.width(), hid, d * tpm],
            Activation::Gelu,
            &mut rng,
        );
        let token_embedding = store.insert(
            "cpm.tokens",
            standard_normal(&[2 * tpm, d], &mut rng).scale(0.02),
        );
        let fusion = (0..config.layers)
            .map(|i| TransformerEncoderLayer::new(&mut store, &format!("cpm.fusion.{i}"), d, config.heads, config.ffn_dim, &mut rng))
            .collect();
        let obs_norm = LayerNorm::new(&mut store, "cpm.obs_norm", d);
        let obs_head = Linear::new(&mut store, "cpm.obs_head", d, config.embed_dim, &mut rng);
        let conv = Conv1d::new(&mut store, "cpm.action_conv", action_dim, config.conv_channels, 3, 1, &mut rng);
        let [h1, h2] = config.action_hidden;
        let action_mlp = Mlp::new(
            &mut store,
            "cpm.action_mlp",
            &[config.conv_channels * horizon, h1, h2],
            Activation::Gelu,
            &mut rng,
        );
        let action_norm_layer = LayerNorm::new(&mut store, "cpm.action_norm", h2);
        let action_head = Linear::new(&mut store, "cpm.action_head", h2, config.embed_dim, &mut rng);
        let log_tau = store.insert("cpm.log_tau", Tensor::scalar(config.temperature_init.ln()));
        Ok(Self {
            config,
            store,
            visual_encoder,
            tactile_encoder,
            token_embedding,
            fusion,
            obs_norm,
            obs_head,
            conv,
            action_mlp,
            action_norm_layer,
            action_head,
            log_tau,
            visual_norm,
            tactile_norm,
            action_norm,
            horizon,
            action_dim,
            trained_steps: 0,
        })
    }

    /// Fits feature normalizers on `samples` and initializes from `seed`.
    /// `action_norm` should be the policy's, so both read the same space.
    pub fn for_samples(config: CpmConfig, samples: &[ChunkSample], action_norm: Normalizer, horizon: usize, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("cpm needs at least one sample"));
        }
        let vis: Vec<&[f64]> = samples.iter().map(|s| s.visual.as_slice()).collect();
        let tac: Vec<&[f64]> = samples.iter().map(|s| s.tactile.as_slice()).collect();
        Self::new(
            config,
            Normalizer::fit_standard(&vis),
            Normalizer::fit_standard(&tac),
            action_norm,
            horizon,
            seed,
        )
    }

    pub fn chunk_shape(&self) -> [usize; 2] {
        [self.horizon, self.action_dim]
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn trained_steps(&self) -> usize {
        self.trained_steps
    }

    pub fn temperature(&self) -> f64 {
        self.store.get(self.log_tau).data()[0].exp()
    }

    pub fn set_temperature(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("temperature {tau} must be positive")));
        }
        self.store.set(self.log_tau, Tensor::scalar(tau.ln()))?;
        Ok(())
    }

    /// Zeroes the visual and tactile encoder weights.
    pub fn zero_modality_encoders(&mut self) {
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(n, _)| n.starts_with("cpm.visual.") || n.starts_with("cpm.tactile."))
            .map(|(n, _)| n.to_string())
            .collect();
        for n in names {
            let id = self.store.id(&n).expect("listed");
            let shape = self.store.get(id).shape().to_vec();
            self.store.set(id, Tensor::zeros(&shape)).expect("same shape");
        }
    }

    /// Zeroes the action encoder's convolution and MLP weights.
    pub fn zero_action_encoder(&mut self) {
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(n, _)| n.starts_with("cpm.action_conv.") || n.starts_with("cpm.action_mlp."))
            .map(|(n, _)| n.to_string())
            .collect();
        for n in names {
            let id = self.store.id(&n).expect("listed");
            let shape = self.store.get(id).shape().to_vec();
            self.store.set(id, Tensor::zeros(&shape)).expect("same shape");
        }
    }

    fn check_features(&self, visual: &Tensor, tactile: &Tensor) -> Result<usize> {
        let b = visual.shape().first().copied().unwrap_or(0);
        if visual.shape() != [b, self.visual_norm.width()] || tactile.shape() != [b, self.tactile_norm.width()] {
            return Err(Error::invalid(format!(
                "cpm observation shapes {:?} / {:?}, expected [B, {}] / [B, {}]",
                visual.shape(),
                tactile.shape(),
                self.visual_norm.width(),
                self.tactile_norm.width()
            )));
        }
        Ok(b)
    }

    fn check_actions(&self, actions: &Tensor) -> Result<usize> {
        let b = actions.shape().first().copied().unwrap_or(0);
        if actions.shape() != [b, self.horizon, self.action_dim] {
            return Err(Error::invalid(format!(
                "action chunk shape {:?}, expected [B, {}, {}]",
                actions.shape(),
                self.horizon,
                self.action_dim
            )));
        }
        Ok(b)
    }

    fn normalized(norm: &Normalizer, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::new(x.shape(), norm.apply(x.data()))?)
    }

    /// Pre-normalization observation activation `[B, E]`.
    fn observation_features<'t>(&self, p: &Bound<'t>, tape: &'t Tape, visual: &Tensor, tactile: &Tensor) -> Result<Var<'t>> {
        let b = self.check_features(visual, tactile)?;
        let (d, tpm) = (self.config.model_dim, self.config.tokens_per_modality);
        let tokens_all = p.get(self.token_embedding);
        let mut parts = Vec::with_capacity(2);
        if self.config.modality.uses_vision() {
            let v = tape.constant(Self::normalized(&self.visual_norm, visual)?);
            let v = self.visual_encoder.forward(p, v)?.reshape(&[b, tpm, d])?;
            parts.push(v.add(tokens_all.narrow(0, 0, tpm)?)?);
        }
        if self.config.modality.uses_touch() {
            let t = tape.constant(Self::normalized(&self.tactile_norm, tactile)?);
            let t = self.tactile_encoder.forward(p, t)?.reshape(&[b, tpm, d])?;
            parts.push(t.add(tokens_all.narrow(0, tpm, tpm)?)?);
        }
        let mut x = if parts.len() == 1 { parts[0] } else { Var::concat(&parts, 1)? };
        for layer in &self.fusion {
            x = layer.forward(p, x)?;
        }
        let pooled = x.mean_axis(1)?;
        Ok(self.obs_head.forward(p, self.obs_norm.forward(p, pooled)?)?)
    }

    fn action_features<'t>(&self, p: &Bound<'t>, actions: Var<'t>) -> minitensor::Result<Var<'t>> {
        let b = actions.shape()[0];
        let h = self.conv.forward(p, actions.permute(&[0, 2, 1])?)?.gelu();
        let h = h.reshape(&[b, self.config.conv_channels * self.horizon])?;
        let h = self.action_mlp.forward(p, h)?.gelu();
        self.action_head.forward(p, self.action_norm_layer.forward(p, h)?)
    }

    fn observation_var<'t>(&self, p: &Bound<'t>, tape: &'t Tape, visual: &Tensor, tactile: &Tensor) -> Result<Var<'t>> {
        Ok(self.observation_features(p, tape, visual, tactile)?.l2_normalize()?)
    }

    fn action_var<'t>(&self, p: &Bound<'t>, actions: Var<'t>) -> Result<Var<'t>> {
        Ok(self.action_features(p, actions)?.l2_normalize()?)
    }

    /// Unit observation embeddings `[B, E]` from raw visual `[B, V]` and
    /// tactile `[B, T]` features.
    pub fn encode_observation(&self, visual: &Tensor, tactile: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        Ok((*self.observation_var(&p, &tape, visual, tactile)?.value()).clone())
    }

    /// Unit action embeddings `[B, E]` from normalized chunks `[B, H, D]`.
    pub fn encode_action(&self, actions: &Tensor) -> Result<Tensor> {
        self.check_actions(actions)?;
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        Ok((*self.action_var(&p, tape.constant(actions.clone()))?.value()).clone())
    }

    /// Per-row `O_i . a_i`.
    pub fn feasibility_score(&self, visual: &Tensor, tactile: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        let o = self.encode_observation(visual, tactile)?;
        let a = self.encode_action(actions)?;
        if o.shape()[0] != a.shape()[0] {
            return Err(Error::invalid("observation and action batches differ in size"));
        }
        Ok(row_dots(&o, &a))
    }

    /// All-pairs scores `S[i, j] = O_i . a_j`.
    pub fn score_matrix(&self, visual: &Tensor, tactile: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let o = self.encode_observation(visual, tactile)?;
        let a = self.encode_action(actions)?;
        let tape = Tape::new();
        Ok((*tape.constant(o).matmul(tape.constant(a).transpose()?)?.value()).clone())
    }

    /// Gradient of each row's score with respect to its action chunk, with
    /// the observation held fixed.
    pub fn score_gradient(&self, visual: &Tensor, tactile: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let o = self.encode_observation(visual, tactile)?;
        self.score_gradient_cached(&o, actions)
    }

    /// As [`score_gradient`](Self::score_gradient) with precomputed
    /// observation embeddings.
    pub fn score_gradient_cached(&self, observation: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let b = self.check_actions(actions)?;
        if observation.shape() != [b, self.config.embed_dim] {
            return Err(Error::invalid(format!(
                "observation embedding shape {:?}, expected [{b}, {}]",
                observation.shape(),
                self.config.embed_dim
            )));
        }
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let x = tape.leaf(actions.clone().with_requires_grad(true));
        let a = self.action_var(&p, x)?;
        let s = a.mul(tape.constant(observation.clone()))?.sum();
        let grads = s.backward()?;
        Ok(grads.get_or_zeros(x))
    }

    /// Central-difference check of `d/dA sum_i O_i . a_i(A)`, the gradient
    /// used for steering. Returns the norm-relative error.
    pub fn score_path_grad_check(&self, visual: &Tensor, tactile: &Tensor, actions: &Tensor, step: f64) -> Result<f64> {
        let b = self.check_actions(actions)?;
        let o = self.encode_observation(visual, tactile)?;
        if o.shape()[0] != b {
            return Err(Error::invalid("observation and action batches differ in size"));
        }
        let err = minitensor::grad_check(
            |tape, x| {
                let p = self.store.bind(tape, false);
                let a = self.action_features(&p, x)?.l2_normalize()?;
                Ok(a.mul(tape.constant(o.clone()))?.sum())
            },
            actions,
            step,
        )?;
        Ok(err)
    }

    /// Symmetric in-batch InfoNCE on a batch of aligned triples.
    pub fn contrastive_loss(&self, batch: &ContrastiveBatch) -> Result<f64> {
        batch.validate()?;
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let o = self.observation_var(&p, &tape, &batch.visual, &batch.tactile)?;
        let a = self.action_var(&p, tape.constant(batch.actions.clone()))?;
        Ok(symmetric_info_nce(o, a, p.get(self.log_tau))?.value().item()?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(dir.join("weights.mtck"))?;
        let meta = CpmMeta {
            config: self.config.clone(),
            horizon: self.horizon,
            action_dim: self.action_dim,
            visual_norm: self.visual_norm.clone(),
            tactile_norm: self.tactile_norm.clone(),
            action_norm: self.action_norm.clone(),
            trained_steps: self.trained_steps,
        };
        let path = dir.join("cpm.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("cpm.json");
        let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CpmMeta = serde_json::from_slice(&text)?;
        if meta.action_norm.width() != meta.action_dim {
            return Err(Error::invalid("cpm metadata is inconsistent"));
        }
        let mut cpm = Cpm::new(
            meta.config,
            meta.visual_norm,
            meta.tactile_norm,
            meta.action_norm,
            meta.horizon,
            0,
        )?;
        cpm.store.load(dir.join("weights.mtck"))?;
        cpm.trained_steps = meta.trained_steps;
        Ok(cpm)
    }
}

/// Rows of `o aᵀ` whose maximum sits on the diagonal.
fn diagonal_hits(o: &Tensor, a: &Tensor) -> usize {
    let (m, w) = (o.shape()[0], o.shape()[1]);
    (0..m)
        .filter(|&i| {
            let oi = &o.data()[i * w..(i + 1) * w];
            let score = |j: usize| -> f64 { oi.iter().zip(&a.data()[j * w..(j + 1) * w]).map(|(x, y)| x * y).sum() };
            let own = score(i);
            (0..m).all(|j| j == i || score(j) < own)
        })
        .count()
}

fn row_dots(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let w = a.shape()[1];
    a.data()
        .chunks(w)
        .zip(b.data().chunks(w))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
        .collect()
}

/// `½ (L_{O→a} + L_{a→O})` with logits `O aᵀ / τ`, `τ = exp(log_tau)`.
/// `o` and `a` are `[M, E]`; `log_tau` is a scalar.
pub fn symmetric_info_nce<'t>(o: Var<'t>, a: Var<'t>, log_tau: Var<'t>) -> Result<Var<'t>> {
    let m = o.shape()[0];
    if m == 0 || a.shape()[0] != m {
        return Err(Error::invalid(format!(
            "contrastive loss needs matching non-empty batches, got {} and {}",
            m,
            a.shape()[0]
        )));
    }
    let tape = o.tape();
    let inv_tau = log_tau.neg().exp();
    let logits = o.matmul(a.transpose()?)?.mul(inv_tau)?;
    let eye = tape.constant(Tensor::eye(m));
    let scale = -1.0 / m as f64;
    let obs_to_act = logits.log_softmax()?.mul(eye)?.sum().scale(scale);
    let act_to_obs = logits.transpose()?.log_softmax()?.mul(eye)?.sum().scale(scale);
    Ok(obs_to_act.add(act_to_obs)?.scale(0.5))
}

/// `M` aligned observation/action triples. `actions` are normalized and
/// possibly corrupted; `levels` records each row's corruption level.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub visual: Tensor,
    pub tactile: Tensor,
    pub actions: Tensor,
    pub levels: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        let m = self.actions.shape().first().copied().unwrap_or(0);
        if m == 0 {
            return Err(Error::invalid("contrastive batch is empty"));
        }
        if self.visual.shape().first() != Some(&m) || self.tactile.shape().first() != Some(&m) || self.levels.len() != m {
            return Err(Error::invalid("contrastive batch parts disagree on M"));
        }
        Ok(())
    }

    /// Builds a batch from `samples`, corrupting each chunk to a level drawn
    /// from `sampler` (or a fixed level when `fixed` is set).
    pub fn assemble(
        samples: &[&ChunkSample],
        action_norm: &Normalizer,
        shape: [usize; 2],
        schedule: &NoiseSchedule,
        level: LevelChoice<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut actions = Vec::with_capacity(samples.len() * shape[0] * shape[1]);
        let mut levels = Vec::with_capacity(samples.len());
        for s in samples {
            let clean = Tensor::new(&shape, action_norm.apply(&s.actions))?;
            let g = match level {
                LevelChoice::Fixed(g) => g,
                LevelChoice::Sampled(sampler) => sampler.sample(rng),
            };
            let x = if g == 0 {
                clean
            } else {
                schedule.corrupt(&clean, &standard_normal(&shape, rng), g)?
            };
            actions.extend_from_slice(x.data());
            levels.push(g);
        }
        let m = samples.len();
        Ok(Self {
            visual: stack_rows(samples.iter().map(|s| s.visual.as_slice()), &[samples.first().map_or(0, |s| s.visual.len())])?,
            tactile: stack_rows(samples.iter().map(|s| s.tactile.as_slice()), &[samples.first().map_or(0, |s| s.tactile.len())])?,
            actions: Tensor::new(&[m, shape[0], shape[1]], actions)?,
            levels,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum LevelChoice<'a> {
    Fixed(usize),
    Sampled(&'a GeometricNoiseSampler),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CpmTrainRecord {
    pub step: usize,
    pub loss: f64,
    pub temperature: f64,
    /// In-batch top-1 retrieval of each row's own action.
    pub retrieval: f64,
}

/// Contrastive training. Each batch draws distinct `(episode, step)`
/// samples and corrupts their actions with `sampler`.
pub fn train_cpm(
    cpm: &mut Cpm,
    samples: &[ChunkSample],
    schedule: &NoiseSchedule,
    sampler: &GeometricNoiseSampler,
    cfg: &CpmTrainConfig,
    mut on_step: impl FnMut(&CpmTrainRecord),
) -> Result<Vec<CpmTrainRecord>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("cannot train the cpm on an empty dataset"));
    }
    let shape = cpm.chunk_shape();
    if let Some(s) = samples.iter().find(|s| s.actions.len() != shape[0] * shape[1]) {
        return Err(Error::invalid(format!("sample chunk has {} values, expected {}", s.actions.len(), shape[0] * shape[1])));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(AdamConfig {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        warmup_steps: cfg.warmup_steps,
        decay_steps: Some(per_epoch * cfg.epochs),
        max_grad_norm: Some(1.0),
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(per_epoch * cfg.epochs);
    let start = cpm.trained_steps;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 && samples.len() >= 2 {
                continue;
            }
            let picked: Vec<&ChunkSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch = ContrastiveBatch::assemble(&picked, &cpm.action_norm, shape, schedule, LevelChoice::Sampled(sampler), &mut rng)?;
            let tape = Tape::new();
            let p = cpm.store.bind(&tape, true);
            let o = cpm.observation_var(&p, &tape, &batch.visual, &batch.tactile)?;
            let a = cpm.action_var(&p, tape.constant(batch.actions.clone()))?;
            let loss = symmetric_info_nce(o, a, p.get(cpm.log_tau))?;
            let value = loss.value().item()?;
            let retrieval = diagonal_hits(&o.value(), &a.value()) as f64 / chunk.len() as f64;
            let step = start + log.len();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("cpm loss is {value}"),
                });
            }
            let grads = p.gradients(&loss.backward()?);
            opt.step(&mut cpm.store, &grads)?;
            let temperature = cpm.temperature();
            if !cpm.store.all_finite() || !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite cpm parameters".into(),
                });
            }
            let rec = CpmTrainRecord {
                step,
                loss: value,
                temperature,
                retrieval,
            };
            on_step(&rec);
            log.push(rec);
        }
    }
    cpm.trained_steps = start + log.len();
    Ok(log)
}

/// Matched-pair retrieval on held-out samples: the fraction of rows whose
/// own (corrupted) action scores highest among `batch` candidates. Averaged
/// over `levels`, each level using a fresh shuffle.
pub fn retrieval_accuracy(
    cpm: &Cpm,
    samples: &[ChunkSample],
    schedule: &NoiseSchedule,
    levels: &[usize],
    batch: usize,
    seed: u64,
) -> Result<f64> {
    if samples.len() < 2 || batch < 2 || levels.is_empty() {
        return Err(Error::invalid("retrieval needs at least two samples, a batch of two and one level"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for &level in levels {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let picked: Vec<&ChunkSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let b = ContrastiveBatch::assemble(&picked, &cpm.action_norm, cpm.chunk_shape(), schedule, LevelChoice::Fixed(level), &mut rng)?;
            let o = cpm.encode_observation(&b.visual, &b.tactile)?;
            let a = cpm.encode_action(&b.actions)?;
            hits += diagonal_hits(&o, &a);
            total += chunk.len();
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Scores of matched pairs and of same-episode pairs from other steps.
#[derive(Debug, Clone, Serialize)]
pub struct SeparationReport {
    pub matched: Vec<f64>,
    pub mismatched: Vec<f64>,
}

impl SeparationReport {
    /// Fraction of matched scores above the `q` quantile of mismatched ones.
    pub fn fraction_above(&self, q: f64) -> f64 {
        let mut sorted = self.mismatched.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.is_empty() {
            return 1.0;
        }
        let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
        let thresh = sorted[idx];
        self.matched.iter().filter(|&&s| s > thresh).count() as f64 / self.matched.len().max(1) as f64
    }
}

/// Brute force over every pair of steps within each held-out episode,
/// using clean actions.
pub fn separation_report(cpm: &Cpm, samples: &[ChunkSample]) -> Result<SeparationReport> {
    let mut by_episode: std::collections::BTreeMap<usize, Vec<&ChunkSample>> = Default::default();
    for s in samples {
        by_episode.entry(s.episode).or_default().push(s);
    }
    let mut report = SeparationReport {
        matched: Vec::new(),
        mismatched: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let schedule = NoiseSchedule::Flow(crate::schedulers::FmPath::new(1)?);
    for group in by_episode.values() {
        let b = ContrastiveBatch::assemble(group, &cpm.action_norm, cpm.chunk_shape(), &schedule, LevelChoice::Fixed(0), &mut rng)?;
        let s = cpm.score_matrix(&b.visual, &b.tactile, &b.actions)?;
        let m = group.len();
        for (i, row) in s.data().chunks(m).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i == j {
                    report.matched.push(v);
                } else {
                    report.mismatched.push(v);
                }
            }
        }
    }
    Ok(report)
}

/// Steering signal from a CPM with observation embeddings computed once per
/// chunk.
pub struct CpmGuide<'a> {
    cpm: &'a Cpm,
    observation: Tensor,
}

impl<'a> CpmGuide<'a> {
    pub fn new(cpm: &'a Cpm, visual: &Tensor, tactile: &Tensor) -> Result<Self> {
        Ok(Self {
            cpm,
            observation: cpm.encode_observation(visual, tactile)?,
        })
    }

    pub fn observation(&self) -> &Tensor {
        &self.observation
    }
}

impl GuidanceScore for CpmGuide<'_> {
    fn gradient(&self, x: &Tensor, _time: NoiseTime) -> Result<Tensor> {
        self.cpm.score_gradient_cached(&self.observation, x)
    }
}
