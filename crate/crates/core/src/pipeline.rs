//! End-to-end toy experiment: demonstrations, base policy, CPM variants,
//! retrieval and steered rollouts, plus the hyperparameter sweep grid.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::agent::PolicyAgent;
use crate::config::RunConfig;
use crate::cpm::{retrieval_accuracy, train_cpm, Cpm, CpmTrainRecord, Modality};
use crate::data::{chunk_samples, ChunkSample};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::policy::{train_policy, Policy};
use crate::schedulers::NoiseSchedule;
use crate::sim::{collect_tagged, derive_seed, evaluate, ChunkPolicy, ContactSim, EvalReport, SEED_TAG_DEMOS, SEED_TAG_HELD_OUT};
use crate::stats;
use crate::steering::GuidanceConfig;

pub const SEED_TAG_POLICY: u64 = 21;
pub const SEED_TAG_CPM: u64 = 22;
pub const SEED_TAG_RETRIEVAL: u64 = 23;
pub const SEED_TAG_REPEAT: u64 = 24;

pub struct Datasets {
    pub demos: Vec<Episode>,
    pub held_out: Vec<Episode>,
    pub train: Vec<ChunkSample>,
    pub test: Vec<ChunkSample>,
}

pub fn build_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let sim = ContactSim::new(cfg.task.clone())?;
    let root = cfg.seeds.root;
    let demos = collect_tagged(&sim, cfg.data.demos, root, SEED_TAG_DEMOS)?;
    let held_out = collect_tagged(&sim, cfg.data.held_out, root, SEED_TAG_HELD_OUT)?;
    let (h, param) = (cfg.policy.horizon, cfg.policy.action_param);
    let train = chunk_samples(&demos, h, param)?;
    let test = if held_out.is_empty() {
        Vec::new()
    } else {
        chunk_samples(&held_out, h, param)?
    };
    Ok(Datasets {
        demos,
        held_out,
        train,
        test,
    })
}

pub fn train_base_policy(
    cfg: &RunConfig,
    samples: &[ChunkSample],
    on_step: impl FnMut(usize, f64),
) -> Result<(Policy, Vec<(usize, f64)>)> {
    let root = cfg.seeds.root;
    let mut policy = Policy::for_samples(cfg.policy_config(), samples, derive_seed(root, SEED_TAG_POLICY, 0))?;
    let mut train = cfg.policy.train.clone();
    train.seed ^= derive_seed(root, SEED_TAG_POLICY, 1);
    let curve = train_policy(&mut policy, samples, &train, on_step)?;
    Ok((policy, curve))
}

/// One CPM configuration in the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CpmVariant {
    pub modality: Modality,
    pub augment: bool,
}

impl CpmVariant {
    pub const FULL: CpmVariant = CpmVariant {
        modality: Modality::Both,
        augment: true,
    };
    pub const NO_AUGMENT: CpmVariant = CpmVariant {
        modality: Modality::Both,
        augment: false,
    };
    pub const VISION_ONLY: CpmVariant = CpmVariant {
        modality: Modality::VisionOnly,
        augment: true,
    };
    pub const TOUCH_ONLY: CpmVariant = CpmVariant {
        modality: Modality::TouchOnly,
        augment: true,
    };

    pub fn label(&self) -> String {
        let m = match self.modality {
            Modality::Both => "both",
            Modality::VisionOnly => "vision_only",
            Modality::TouchOnly => "touch_only",
        };
        if self.augment {
            m.to_string()
        } else {
            format!("{m}_no_augment")
        }
    }
}

/// Trains a CPM reading `policy`'s action space. Geometric corruption is
/// capped at the guidance window unless the config sets its own cap.
pub fn train_cpm_variant(
    cfg: &RunConfig,
    policy: &Policy,
    samples: &[ChunkSample],
    variant: CpmVariant,
    on_step: impl FnMut(&CpmTrainRecord),
) -> Result<(Cpm, Vec<CpmTrainRecord>)> {
    let root = cfg.seeds.root;
    let mut model = cfg.cpm.model.clone();
    model.modality = variant.modality;
    let mut train = cfg.cpm.train.clone();
    train.augment = variant.augment;
    train.seed ^= derive_seed(root, SEED_TAG_CPM, 1);
    let sampler = train.sampler(window_level(cfg, policy.schedule()))?;
    let mut cpm = Cpm::for_samples(
        model,
        samples,
        policy.action_norm.clone(),
        policy.config.horizon,
        derive_seed(root, SEED_TAG_CPM, 0),
    )?;
    let log = train_cpm(&mut cpm, samples, policy.schedule(), &sampler, &train, on_step)?;
    Ok((cpm, log))
}

/// Geometric level matching the end of the guidance window.
pub fn window_level(cfg: &RunConfig, schedule: &NoiseSchedule) -> usize {
    cfg.guidance().window_steps(schedule)
}

/// Held-out retrieval averaged over the levels inside the guidance window.
pub fn window_retrieval(cfg: &RunConfig, cpm: &Cpm, schedule: &NoiseSchedule, test: &[ChunkSample]) -> Result<f64> {
    let levels: Vec<usize> = (1..=window_level(cfg, schedule).max(1)).collect();
    retrieval_accuracy(
        cpm,
        test,
        schedule,
        &levels,
        cfg.eval.retrieval_batch,
        derive_seed(cfg.seeds.root, SEED_TAG_RETRIEVAL, 0),
    )
}

/// Success rates over independent evaluation repeats.
#[derive(Debug, Clone, Serialize)]
pub struct SuccessSummary {
    pub rates: Vec<f64>,
    pub mean: f64,
    pub sem: f64,
}

impl SuccessSummary {
    pub fn from_rates(rates: Vec<f64>) -> Self {
        let mean = stats::mean(&rates);
        let sem = if rates.len() > 1 { stats::sem(&rates) } else { 0.0 };
        Self { rates, mean, sem }
    }

    /// `mean ± k·sem`.
    pub fn interval(&self, k: f64) -> (f64, f64) {
        (self.mean - k * self.sem, self.mean + k * self.sem)
    }

    /// Whether `self` lies entirely above `other` at `± k·sem`.
    pub fn separated_above(&self, other: &SuccessSummary, k: f64) -> bool {
        self.interval(k).0 > other.interval(k).1
    }
}

/// Evaluation seed for repeat `r`.
pub fn repeat_seed(cfg: &RunConfig, r: usize) -> u64 {
    derive_seed(cfg.seeds.root, SEED_TAG_REPEAT, r as u64)
}

/// Runs `cfg.eval.repeats` evaluations of `cfg.eval.rollouts` rollouts.
pub fn repeated_success(cfg: &RunConfig, agent: &dyn ChunkPolicy, mut on_report: impl FnMut(usize, &EvalReport)) -> Result<SuccessSummary> {
    let sim = ContactSim::new(cfg.task.clone())?;
    let rates = (0..cfg.eval.repeats)
        .map(|r| {
            let report = evaluate(&sim, agent, cfg.eval.rollouts, repeat_seed(cfg, r), cfg.policy.execute_steps);
            on_report(r, &report);
            report.success_rate
        })
        .collect();
    Ok(SuccessSummary::from_rates(rates))
}

pub fn steered_success(cfg: &RunConfig, policy: &Policy, cpm: &Cpm, guidance: &GuidanceConfig) -> Result<SuccessSummary> {
    let agent = PolicyAgent::guided(policy, cpm, guidance)?;
    repeated_success(cfg, &agent, |_, _| {})
}

/// One cell of a sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub eta: f64,
    pub window: f64,
    pub mean: f64,
    pub std_error: f64,
    pub repeats: usize,
}

/// Evaluates `metric(eta, window, repeat)` over the grid in row-major
/// order, `repeats` times per cell.
pub fn sweep_grid(
    etas: &[f64],
    windows: &[f64],
    repeats: usize,
    mut metric: impl FnMut(f64, f64, usize) -> Result<f64>,
) -> Result<Vec<SweepRow>> {
    if repeats == 0 {
        return Err(Error::invalid("a sweep needs at least one repeat"));
    }
    let mut rows = Vec::with_capacity(etas.len() * windows.len());
    for &eta in etas {
        for &window in windows {
            let values = (0..repeats).map(|r| metric(eta, window, r)).collect::<Result<Vec<f64>>>()?;
            rows.push(SweepRow {
                eta,
                window,
                mean: stats::mean(&values),
                std_error: if repeats > 1 { stats::sem(&values) } else { 0.0 },
                repeats,
            });
        }
    }
    Ok(rows)
}

/// Highest-mean row; ties go to the smaller `eta`, then smaller window.
pub fn best_row(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
        Some(b) if b.mean >= r.mean => Some(b),
        _ => Some(r),
    })
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("eta,window,mean,std_error,repeats\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.eta, r.window, r.mean, r.std_error, r.repeats));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
