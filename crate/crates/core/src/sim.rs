//! Planar peg-in-slot insertion with a hidden in-hand grasp offset.
//!
//! The gripper holds a peg of length `L`. The peg root sits `offset` across
//! the jaws and the peg is tilted by `tilt` relative to the gripper. Vision
//! sees the gripper, the slot and where the tip *would* be with a perfect
//! grasp; touch sees contact force and a pressure profile that moves with
//! the grasp. Only the tip collides: with the surface `y = 0` and with the
//! walls and floor of the slot `[slot_x - h, slot_x + h] x [-depth, 0]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{Episode, EpisodeMeta, EpisodeStep};
use crate::error::{Error, Result};
use crate::pose::Se3Pose;
use crate::stats;

pub const TASK_NAME: &str = "peg_in_slot";
pub const VISUAL_DIM: usize = 9;
pub const PRESSURE_CELLS: usize = 8;
pub const TACTILE_DIM: usize = 2 + PRESSURE_CELLS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub slot_half_width: f64,
    pub slot_depth: f64,
    pub slot_range: f64,
    pub peg_length: f64,
    /// Grasp offset is uniform on `[-offset_max, offset_max]`.
    pub offset_max: f64,
    pub tilt_max: f64,
    pub start_lateral: f64,
    pub start_height_min: f64,
    pub start_height_max: f64,
    pub start_yaw: f64,
    pub max_translation_step: f64,
    pub max_rotation_step: f64,
    pub stiffness: f64,
    pub seat_tolerance: f64,
    pub angle_tolerance: f64,
    pub clearance: f64,
    pub pressure_width: f64,
    pub max_steps: usize,
    pub rate_hz: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            slot_half_width: 0.02,
            slot_depth: 0.05,
            slot_range: 0.3,
            peg_length: 0.1,
            offset_max: 0.04,
            tilt_max: 0.05,
            start_lateral: 0.15,
            start_height_min: 0.15,
            start_height_max: 0.25,
            start_yaw: 0.1,
            max_translation_step: 0.03,
            max_rotation_step: 0.05,
            stiffness: 100.0,
            seat_tolerance: 0.005,
            angle_tolerance: 0.15,
            clearance: 0.02,
            pressure_width: 0.35,
            max_steps: 29,
            rate_hz: 10.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("slot_half_width", self.slot_half_width),
            ("slot_depth", self.slot_depth),
            ("peg_length", self.peg_length),
            ("max_translation_step", self.max_translation_step),
            ("max_rotation_step", self.max_rotation_step),
            ("stiffness", self.stiffness),
            ("pressure_width", self.pressure_width),
            ("rate_hz", self.rate_hz),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("task.{name} must be positive, got {v}")));
            }
        }
        if self.offset_max < 0.0 || self.tilt_max < 0.0 || self.start_height_min > self.start_height_max {
            return Err(Error::Config("task ranges are inconsistent".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("task.max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimState {
    /// `(x, y, yaw)` of the gripper.
    pub gripper: [f64; 3],
    pub offset: f64,
    pub tilt: f64,
    pub slot_x: f64,
    pub contact: bool,
    pub force: [f64; 2],
    pub steps: usize,
    pub tip_in_slot: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimObservation {
    pub visual: Vec<f64>,
    pub tactile: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: SimState,
    pub observation: SimObservation,
    pub done: bool,
    pub success: bool,
    /// The requested action exceeded the per-step bounds and was clamped.
    pub clamped: bool,
}

fn rot(theta: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

#[derive(Debug, Clone, Default)]
pub struct ContactSim {
    pub params: SimParams,
}

impl ContactSim {
    pub fn new(params: SimParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn reset(&self, seed: u64) -> SimState {
        let p = &self.params;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sym = |rng: &mut ChaCha8Rng, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let offset = sym(&mut rng, p.offset_max);
        let tilt = sym(&mut rng, p.tilt_max);
        let slot_x = sym(&mut rng, p.slot_range);
        let gx = slot_x + sym(&mut rng, p.start_lateral);
        let yaw = sym(&mut rng, p.start_yaw);
        let height = rng.random_range(p.start_height_min..=p.start_height_max);
        let mut state = SimState {
            gripper: [gx, 0.0, yaw],
            offset,
            tilt,
            slot_x,
            contact: false,
            force: [0.0; 2],
            steps: 0,
            tip_in_slot: false,
        };
        // place the tip `height` above the surface
        let tip = self.tip(&state);
        state.gripper[1] = height - tip[1];
        state
    }

    /// Peg tip with the true grasp.
    pub fn tip(&self, s: &SimState) -> [f64; 2] {
        self.tip_with(s.gripper, s.offset, s.tilt)
    }

    fn tip_with(&self, g: [f64; 3], offset: f64, tilt: f64) -> [f64; 2] {
        let root = rot(g[2], [offset, 0.0]);
        let shaft = rot(g[2] + tilt, [0.0, -self.params.peg_length]);
        [g[0] + root[0] + shaft[0], g[1] + root[1] + shaft[1]]
    }

    pub fn observe(&self, s: &SimState) -> SimObservation {
        let g = s.gripper;
        let nominal = self.tip_with(g, 0.0, 0.0);
        let visual = vec![
            g[0],
            g[1],
            g[2].sin(),
            g[2].cos(),
            s.slot_x,
            nominal[0],
            nominal[1],
            nominal[0] - s.slot_x,
            nominal[1] + self.params.slot_depth,
        ];
        let p = &self.params;
        let o = if p.offset_max > 0.0 { s.offset / p.offset_max } else { 0.0 };
        let d = if p.tilt_max > 0.0 { s.tilt / p.tilt_max } else { 0.0 };
        let mut tactile = Vec::with_capacity(TACTILE_DIM);
        tactile.push(s.force[0] / p.stiffness * 10.0);
        tactile.push(s.force[1] / p.stiffness * 10.0);
        for j in 0..PRESSURE_CELLS {
            let c = -1.0 + 2.0 * j as f64 / (PRESSURE_CELLS - 1) as f64;
            let bump = (-(c - o).powi(2) / (2.0 * p.pressure_width.powi(2))).exp();
            tactile.push(bump + 0.3 * d * c);
        }
        SimObservation { visual, tactile }
    }

    /// Clamps `action` to the per-step bounds; returns whether it changed.
    pub fn clamp_action(&self, action: [f64; 3]) -> ([f64; 3], bool) {
        let t = self.params.max_translation_step;
        let r = self.params.max_rotation_step;
        let a = [
            action[0].clamp(-t, t),
            action[1].clamp(-t, t),
            action[2].clamp(-r, r),
        ];
        let clamped = a != action;
        (a, clamped)
    }

    fn resolve_in_slot(&self, slot_x: f64, mut tip: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        let p = &self.params;
        let (lo, hi) = (slot_x - p.slot_half_width, slot_x + p.slot_half_width);
        let mut push = [0.0; 2];
        if tip[0] > hi {
            push[0] = hi - tip[0];
            tip[0] = hi;
        } else if tip[0] < lo {
            push[0] = lo - tip[0];
            tip[0] = lo;
        }
        if tip[1] < -p.slot_depth {
            push[1] = -p.slot_depth - tip[1];
            tip[1] = -p.slot_depth;
        }
        (tip, push)
    }

    pub fn step(&self, s: &SimState, action: [f64; 3]) -> StepOutcome {
        let p = &self.params;
        let finite = action.iter().all(|v| v.is_finite());
        let (a, mut clamped) = self.clamp_action(if finite { action } else { [0.0; 3] });
        clamped |= !finite;
        let prev_tip = self.tip(s);
        let mut next = s.clone();
        next.gripper = [s.gripper[0] + a[0], s.gripper[1] + a[1], s.gripper[2] + a[2]];
        let target = self.tip(&next);

        let (lo, hi) = (s.slot_x - p.slot_half_width, s.slot_x + p.slot_half_width);
        let (resolved, push, in_slot) = if target[1] >= 0.0 {
            (target, [0.0; 2], false)
        } else if s.tip_in_slot {
            let (t, push) = self.resolve_in_slot(s.slot_x, target);
            (t, push, true)
        } else {
            // crossing of the surface line along the tip's path
            let dy = target[1] - prev_tip[1];
            let frac = if dy != 0.0 { (0.0 - prev_tip[1]) / dy } else { 0.0 };
            let xc = prev_tip[0] + frac.clamp(0.0, 1.0) * (target[0] - prev_tip[0]);
            if (lo..=hi).contains(&xc) {
                let (t, push) = self.resolve_in_slot(s.slot_x, target);
                (t, push, true)
            } else {
                ([target[0], 0.0], [0.0, -target[1]], false)
            }
        };
        next.gripper[0] += resolved[0] - target[0];
        next.gripper[1] += resolved[1] - target[1];
        next.tip_in_slot = in_slot;
        next.force = [p.stiffness * push[0], p.stiffness * push[1]];
        let touching = resolved[1] == 0.0 && !in_slot
            || in_slot && (resolved[0] == lo || resolved[0] == hi || resolved[1] == -p.slot_depth);
        next.contact = push != [0.0; 2] || touching;
        next.steps += 1;
        let success = self.is_success(&next);
        let done = success || next.steps >= p.max_steps;
        StepOutcome {
            observation: self.observe(&next),
            state: next,
            done,
            success,
            clamped,
        }
    }

    pub fn is_success(&self, s: &SimState) -> bool {
        let p = &self.params;
        let tip = self.tip(s);
        s.tip_in_slot
            && tip[1] <= -p.slot_depth + p.seat_tolerance
            && (s.gripper[2] + s.tilt).abs() <= p.angle_tolerance
    }

    /// Scripted insertion using the full state. With `in_hand = false` the
    /// expert assumes a perfect grasp.
    pub fn expert_action(&self, s: &SimState, in_hand: bool) -> [f64; 3] {
        let p = &self.params;
        let (o, d) = if in_hand { (s.offset, s.tilt) } else { (0.0, 0.0) };
        let yaw = -d;
        let root = rot(yaw, [o, 0.0]);
        let believed = self.tip_with(s.gripper, o, d);
        let aligned = (believed[0] - s.slot_x).abs() < 1e-9 && (s.gripper[2] - yaw).abs() < 1e-9;
        let above = believed[1] >= p.clearance - 1e-9;
        let gx = s.slot_x - root[0];
        let tip_y = if aligned && (!above || (believed[1] - p.clearance).abs() < 1e-9) {
            -p.slot_depth - 0.002
        } else {
            p.clearance
        };
        let gy = tip_y - root[1] + p.peg_length;
        let (a, _) = self.clamp_action([gx - s.gripper[0], gy - s.gripper[1], yaw - s.gripper[2]]);
        a
    }
}

/// Planar gripper pose as an SE(3) pose.
pub fn gripper_pose(g: [f64; 3]) -> Se3Pose {
    Se3Pose::planar(g[0], g[1], g[2])
}

pub fn rollout_expert(sim: &ContactSim, seed: u64, in_hand: bool) -> (bool, usize) {
    let mut s = sim.reset(seed);
    loop {
        let out = sim.step(&s, sim.expert_action(&s, in_hand));
        s = out.state;
        if out.done {
            return (out.success, s.steps);
        }
    }
}

/// One expert episode, or `None` if the expert failed.
pub fn expert_episode(sim: &ContactSim, seed: u64) -> Option<Episode> {
    let mut s = sim.reset(seed);
    let mut obs = sim.observe(&s);
    let mut steps = Vec::new();
    loop {
        let a = sim.expert_action(&s, true);
        let command = [s.gripper[0] + a[0], s.gripper[1] + a[1], s.gripper[2] + a[2]];
        steps.push(EpisodeStep {
            timestamp: steps.len() as f64 / sim.params.rate_hz,
            visual: obs.visual.clone(),
            tactile: obs.tactile.clone(),
            pose: gripper_pose(s.gripper),
            gripper: 1.0,
            command: gripper_pose(command),
        });
        let out = sim.step(&s, a);
        s = out.state;
        obs = out.observation;
        if out.done {
            if !out.success {
                return None;
            }
            return Some(Episode {
                meta: EpisodeMeta {
                    task: TASK_NAME.into(),
                    seed,
                    source: "scripted_expert".into(),
                    rate_hz: sim.params.rate_hz,
                },
                steps,
            });
        }
    }
}

/// Per-item seed derived from a root seed; distinct streams for distinct
/// `(root, tag, index)`.
pub fn derive_seed(root: u64, tag: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(tag);
    rng.set_word_pos(index as u128 * 2);
    rng.random()
}

pub const SEED_TAG_DEMOS: u64 = 11;
pub const SEED_TAG_EVAL: u64 = 12;
pub const SEED_TAG_SAMPLING: u64 = 13;
pub const SEED_TAG_HELD_OUT: u64 = 14;

/// `n` successful expert episodes; failures are skipped and replaced.
pub fn collect_demonstrations(sim: &ContactSim, n: usize, seed: u64) -> Result<Vec<Episode>> {
    collect_tagged(sim, n, seed, SEED_TAG_DEMOS)
}

pub fn collect_tagged(sim: &ContactSim, n: usize, seed: u64, tag: u64) -> Result<Vec<Episode>> {
    if n == 0 {
        return Err(Error::invalid("collect needs n >= 1"));
    }
    let mut out = Vec::with_capacity(n);
    let mut i = 0u64;
    while out.len() < n {
        if i > 20 * n as u64 + 100 {
            return Err(Error::invalid("expert keeps failing; check task parameters"));
        }
        if let Some(ep) = expert_episode(sim, derive_seed(seed, tag, i)) {
            out.push(ep);
        }
        i += 1;
    }
    Ok(out)
}

/// Produces the next targets for a batch of live rollouts.
pub trait ChunkPolicy {
    /// For each rollout, absolute gripper targets `(x, y, yaw)` for the next
    /// steps. Learned policies read only the observation and the gripper
    /// pose; the full state is there for scripted baselines. `seeds[i]`
    /// seeds any sampling for rollout `i`.
    fn plan(&self, observations: &[SimObservation], states: &[SimState], seeds: &[u64]) -> Result<Vec<Vec<[f64; 3]>>>;
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutLog {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub final_tip: [f64; 2],
    pub slot_x: f64,
    pub offset: f64,
    pub clamped_actions: usize,
    pub max_force: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub success_rate: f64,
    pub mean_steps: f64,
    pub rollouts: Vec<RolloutLog>,
}

impl EvalReport {
    pub fn to_jsonl(&self) -> String {
        self.rollouts
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect()
    }
}

/// Rollout seeds used by [`evaluate`] for `(seed, n)`.
pub fn eval_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(seed, SEED_TAG_EVAL, i)).collect()
}

/// Runs `n` rollouts in lockstep, replanning every `execute` steps.
pub fn evaluate(sim: &ContactSim, policy: &dyn ChunkPolicy, n: usize, seed: u64, execute: usize) -> EvalReport {
    let seeds = eval_seeds(seed, n);
    let mut states: Vec<SimState> = seeds.iter().map(|&s| sim.reset(s)).collect();
    let mut obs: Vec<SimObservation> = states.iter().map(|s| sim.observe(s)).collect();
    let mut logs: Vec<RolloutLog> = seeds
        .iter()
        .zip(&states)
        .map(|(&seed, s)| RolloutLog {
            seed,
            success: false,
            steps: 0,
            final_tip: sim.tip(s),
            slot_x: s.slot_x,
            offset: s.offset,
            clamped_actions: 0,
            max_force: 0.0,
            error: None,
        })
        .collect();
    let mut live: Vec<usize> = (0..n).collect();
    let mut chunk = 0u64;
    while !live.is_empty() {
        let batch_obs: Vec<SimObservation> = live.iter().map(|&i| obs[i].clone()).collect();
        let batch_states: Vec<SimState> = live.iter().map(|&i| states[i].clone()).collect();
        let batch_seeds: Vec<u64> = live
            .iter()
            .map(|&i| derive_seed(seeds[i], SEED_TAG_SAMPLING, chunk))
            .collect();
        let plans = match policy.plan(&batch_obs, &batch_states, &batch_seeds) {
            Ok(p) if p.len() == live.len() => p,
            Ok(_) => {
                fail_all(&mut logs, &live, "policy returned the wrong number of plans");
                break;
            }
            Err(e) => {
                fail_all(&mut logs, &live, &e.to_string());
                break;
            }
        };
        let mut still = Vec::with_capacity(live.len());
        for (&i, plan) in live.iter().zip(&plans) {
            let mut done = plan.is_empty();
            for target in plan.iter().take(execute.max(1)) {
                let g = states[i].gripper;
                let out = sim.step(&states[i], [target[0] - g[0], target[1] - g[1], target[2] - g[2]]);
                let log = &mut logs[i];
                log.clamped_actions += out.clamped as usize;
                log.max_force = log.max_force.max(out.state.force[0].hypot(out.state.force[1]));
                states[i] = out.state;
                obs[i] = out.observation;
                if out.done {
                    log.success = out.success;
                    done = true;
                    break;
                }
            }
            let log = &mut logs[i];
            log.steps = states[i].steps;
            log.final_tip = sim.tip(&states[i]);
            if plan.is_empty() {
                log.error = Some("empty plan".into());
            }
            if !done {
                still.push(i);
            }
        }
        live = still;
        chunk += 1;
    }
    let successes: Vec<f64> = logs.iter().map(|l| l.success as u8 as f64).collect();
    let steps: Vec<f64> = logs.iter().map(|l| l.steps as f64).collect();
    EvalReport {
        success_rate: stats::mean(&successes),
        mean_steps: stats::mean(&steps),
        rollouts: logs,
    }
}

fn fail_all(logs: &mut [RolloutLog], live: &[usize], msg: &str) {
    for &i in live {
        logs[i].success = false;
        logs[i].error = Some(msg.to_string());
    }
}

/// Replans every step with the scripted expert.
pub struct ExpertPolicy<'a> {
    pub sim: &'a ContactSim,
    pub in_hand: bool,
}

impl ChunkPolicy for ExpertPolicy<'_> {
    fn plan(&self, _: &[SimObservation], states: &[SimState], _: &[u64]) -> Result<Vec<Vec<[f64; 3]>>> {
        Ok(states
            .iter()
            .map(|s| {
                let a = self.sim.expert_action(s, self.in_hand);
                vec![[s.gripper[0] + a[0], s.gripper[1] + a[1], s.gripper[2] + a[2]]]
            })
            .collect())
    }
}

/// Uniform random actions within the step bounds.
pub struct RandomPolicy {
    pub params: SimParams,
    pub horizon: usize,
}

impl ChunkPolicy for RandomPolicy {
    fn plan(&self, _: &[SimObservation], states: &[SimState], seeds: &[u64]) -> Result<Vec<Vec<[f64; 3]>>> {
        let t = self.params.max_translation_step;
        let r = self.params.max_rotation_step;
        Ok(states
            .iter()
            .zip(seeds)
            .map(|(g, &seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut cur = g.gripper;
                (0..self.horizon)
                    .map(|_| {
                        cur = [
                            cur[0] + rng.random_range(-t..=t),
                            cur[1] + rng.random_range(-t..=t),
                            cur[2] + rng.random_range(-r..=r),
                        ];
                        cur
                    })
                    .collect()
            })
            .collect())
    }
}
