//! Closed-loop control: sampling action chunks from a trained policy,
//! optionally steered by a CPM, and turning them into gripper targets.

use minitensor::Tensor;

use crate::cpm::{Cpm, CpmGuide};
use crate::data::{condition_vector, stack_rows};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::sim::{gripper_pose, ChunkPolicy, SimObservation, SimState};
use crate::steering::{guided_sample, Guidance, GuidanceConfig};

/// A policy, with steering when `guide` is set.
pub struct PolicyAgent<'a> {
    pub policy: &'a Policy,
    pub guide: Option<(&'a Cpm, &'a GuidanceConfig)>,
}

impl<'a> PolicyAgent<'a> {
    pub fn unguided(policy: &'a Policy) -> Self {
        Self { policy, guide: None }
    }

    pub fn guided(policy: &'a Policy, cpm: &'a Cpm, config: &'a GuidanceConfig) -> Result<Self> {
        if cpm.chunk_shape() != policy.chunk_shape() {
            return Err(Error::invalid(format!(
                "cpm chunk {:?} does not match policy chunk {:?}",
                cpm.chunk_shape(),
                policy.chunk_shape()
            )));
        }
        config.validate(policy.schedule())?;
        Ok(Self {
            policy,
            guide: Some((cpm, config)),
        })
    }

    /// Normalized chunks `[B, H, D]` for a batch of observations.
    pub fn sample_chunks(&self, observations: &[SimObservation], states: &[SimState], seeds: &[u64]) -> Result<Tensor> {
        let conds: Vec<Vec<f64>> = observations
            .iter()
            .zip(states)
            .map(|(o, s)| condition_vector(&o.visual, s.gripper))
            .collect();
        let cond = self.policy.condition_tensor(&conds)?;
        let denoiser = self.policy.conditioned(&cond);
        let shape = self.policy.chunk_shape();
        match self.guide {
            None => guided_sample(&denoiser, self.policy.schedule(), None, &shape, seeds),
            Some((cpm, config)) => {
                let vis = stack_rows(observations.iter().map(|o| o.visual.as_slice()), &[cpm.visual_norm.width()])?;
                let tac = stack_rows(observations.iter().map(|o| o.tactile.as_slice()), &[cpm.tactile_norm.width()])?;
                let score = CpmGuide::new(cpm, &vis, &tac)?;
                let g = Guidance { score: &score, config };
                guided_sample(&denoiser, self.policy.schedule(), Some(g), &shape, seeds)
            }
        }
    }
}

/// Absolute planar targets from a normalized chunk relative to `gripper`.
pub fn chunk_to_targets(policy: &Policy, chunk: &[f64], gripper: [f64; 3]) -> Result<Vec<[f64; 3]>> {
    let raw = policy.action_norm.invert(chunk);
    let base = gripper_pose(gripper);
    let param = policy.config.action_param;
    raw.chunks(param.dim())
        .map(|row| {
            let p = base.compose(&param.decode(row)?);
            Ok([p.translation().x, p.translation().y, p.yaw()])
        })
        .collect()
}

impl ChunkPolicy for PolicyAgent<'_> {
    fn plan(&self, observations: &[SimObservation], states: &[SimState], seeds: &[u64]) -> Result<Vec<Vec<[f64; 3]>>> {
        let chunks = self.sample_chunks(observations, states, seeds)?;
        let stride = chunks.len() / states.len().max(1);
        chunks
            .data()
            .chunks(stride)
            .zip(states)
            .map(|(c, s)| chunk_to_targets(self.policy, c, s.gripper))
            .collect()
    }
}
