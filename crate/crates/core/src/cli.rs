//! Command-line front end. Exit codes: 0 success, 1 failed run or failed
//! validation, 2 usage error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::agent::PolicyAgent;
use crate::config::RunConfig;
use crate::cpm::{train_cpm, Cpm, CpmGuide, Modality};
use crate::data::{chunk_samples, stack_rows, ChunkSample, Normalizer};
use crate::episode::{load_dataset, save_dataset};
use crate::error::{Error, Result};
use crate::pipeline::{best_row, sweep_grid, window_level, write_sweep_csv, SuccessSummary, SEED_TAG_CPM, SEED_TAG_POLICY, SEED_TAG_REPEAT};
use crate::policy::{train_policy, Policy};
use crate::sim::{collect_demonstrations, derive_seed, evaluate, ChunkPolicy, ContactSim, EvalReport, TASK_NAME};
use crate::stats;
use crate::steering::{latency_probe, FlowCoefficient, GuidanceConfig};
use crate::validate::{run_math_checks, MathCheckOptions};

#[derive(Debug, Parser)]
#[command(name = "tguide", version, about = "Contact-aware steering of generative action policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record scripted-expert demonstrations.
    Collect(CollectArgs),
    /// Train the vision-only base policy.
    TrainPolicy(TrainArgs),
    /// Train the contact feasibility model.
    TrainCpm(TrainCpmArgs),
    /// Roll out a policy, steered when a CPM is given.
    Eval(EvalArgs),
    /// Check the analytic identities and gradients.
    ValidateMath(ValidateArgs),
    /// Sweep the guidance scale or window.
    Sweep(SweepArgs),
    /// Time guided against unguided chunk generation.
    Latency(LatencyArgs),
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint already in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Override the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainCpmArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum)]
    pub modality: Option<ModalityArg>,
    /// Train on clean actions only.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModalityArg {
    Both,
    VisionOnly,
    TouchOnly,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Both => Modality::Both,
            ModalityArg::VisionOnly => Modality::VisionOnly,
            ModalityArg::TouchOnly => Modality::TouchOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub cpm: Option<PathBuf>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Guidance window: final steps (diffusion) or largest guided t (flow).
    #[arg(long)]
    pub ktg: Option<f64>,
    #[arg(long)]
    pub rollouts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// JSON mixture spec used for the guidance checks.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Path samples per Monte Carlo point.
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace the flow coefficient t/(1-t) with t; the checks must fail.
    #[arg(long)]
    pub mutate_coefficient: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Eta,
    Ktg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub cpm: PathBuf,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    /// Value of the parameter not being swept.
    #[arg(long)]
    pub fixed: Option<f64>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 20)]
    pub rollouts: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LatencyArgs {
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub cpm: PathBuf,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub ktg: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Collect(a) => collect(a),
        Command::TrainPolicy(a) => train_policy_cmd(a),
        Command::TrainCpm(a) => train_cpm_cmd(a),
        Command::Eval(a) => eval(a),
        Command::ValidateMath(a) => validate(a),
        Command::Sweep(a) => sweep(a),
        Command::Latency(a) => latency(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.toml"), &cfg.to_toml()?)
}

fn collect(a: CollectArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(n) = a.n {
        cfg.data.demos = n;
    }
    if let Some(s) = a.seed {
        cfg.seeds.root = s;
    }
    if cfg.data.demos == 0 {
        return Err(Error::invalid("--n must be at least 1"));
    }
    let sim = ContactSim::new(cfg.task.clone())?;
    let episodes = collect_demonstrations(&sim, cfg.data.demos, cfg.seeds.root)?;
    let manifest = save_dataset(&a.out, TASK_NAME, cfg.seeds.root, &episodes)?;
    prepare_out(&a.out, &cfg)?;
    println!(
        "collected {} episodes into {} (manifest sha256 {})",
        manifest.count,
        a.out.display(),
        manifest.digest()
    );
    Ok(())
}

fn load_samples(data: &Path, cfg: &RunConfig) -> Result<Vec<ChunkSample>> {
    let (_, episodes) = load_dataset(data)?;
    chunk_samples(&episodes, cfg.policy.horizon, cfg.policy.action_param)
}

fn append_csv(path: &Path, header: &str, rows: &str, resume: bool) -> Result<()> {
    use std::io::Write;
    let fresh = !resume || !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        f.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    f.write_all(rows.as_bytes()).map_err(|e| Error::io(path, e))
}

fn train_policy_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.policy.train.epochs = e;
    }
    cfg.validate()?;
    let samples = load_samples(&a.data, &cfg)?;
    let mut policy = if a.resume {
        let p = Policy::load(&a.out)?;
        if p.config != cfg.policy_config() {
            return Err(Error::Config("checkpoint was trained with a different policy configuration".into()));
        }
        p
    } else {
        Policy::for_samples(
            cfg.policy_config(),
            &samples,
            derive_seed(cfg.seeds.root, SEED_TAG_POLICY, 0),
        )?
    };
    let mut train = cfg.policy.train.clone();
    train.seed ^= derive_seed(cfg.seeds.root, SEED_TAG_POLICY, 1 + policy.trained_steps() as u64);
    let curve = train_policy(&mut policy, &samples, &train, |_, _| {})?;
    prepare_out(&a.out, &cfg)?;
    policy.save(&a.out)?;
    let mut rows = String::new();
    for (step, loss) in &curve {
        let _ = writeln!(rows, "{step},{loss}");
    }
    append_csv(&a.out.join("loss.csv"), "step,loss\n", &rows, a.resume)?;
    println!(
        "trained {} steps (total {}), final loss {:.5}",
        curve.len(),
        policy.trained_steps(),
        curve.last().map_or(f64::NAN, |c| c.1)
    );
    Ok(())
}

fn train_cpm_cmd(a: TrainCpmArgs) -> Result<()> {
    let mut cfg = load_config(a.train.config.as_deref())?;
    if let Some(e) = a.train.epochs {
        cfg.cpm.train.epochs = e;
    }
    if let Some(m) = a.modality {
        cfg.cpm.model.modality = m.into();
    }
    if a.no_augment {
        cfg.cpm.train.augment = false;
    }
    cfg.validate()?;
    let samples = load_samples(&a.train.data, &cfg)?;
    let schedule = cfg.policy_config().schedule()?;
    let d = cfg.policy.action_param.dim();
    let actions: Vec<&[f64]> = samples.iter().map(|s| s.actions.as_slice()).collect();
    let action_norm = Normalizer::fit_range(&actions, d);
    let mut cpm = if a.train.resume {
        let c = Cpm::load(&a.train.out)?;
        if c.config != cfg.cpm.model {
            return Err(Error::Config("checkpoint was trained with a different cpm configuration".into()));
        }
        c
    } else {
        Cpm::for_samples(
            cfg.cpm.model.clone(),
            &samples,
            action_norm,
            cfg.policy.horizon,
            derive_seed(cfg.seeds.root, SEED_TAG_CPM, 0),
        )?
    };
    let mut train = cfg.cpm.train.clone();
    train.seed ^= derive_seed(cfg.seeds.root, SEED_TAG_CPM, 1 + cpm.trained_steps() as u64);
    let sampler = train.sampler(window_level(&cfg, &schedule))?;
    let log = train_cpm(&mut cpm, &samples, &schedule, &sampler, &train, |_| {})?;
    prepare_out(&a.train.out, &cfg)?;
    cpm.save(&a.train.out)?;
    let mut rows = String::new();
    for r in &log {
        let _ = writeln!(rows, "{},{},{},{}", r.step, r.loss, r.temperature, r.retrieval);
    }
    append_csv(&a.train.out.join("metrics.csv"), "step,loss,temperature,retrieval\n", &rows, a.train.resume)?;
    println!(
        "trained {} steps (total {}), final loss {:.5}, temperature {:.4}",
        log.len(),
        cpm.trained_steps(),
        log.last().map_or(f64::NAN, |r| r.loss),
        cpm.temperature()
    );
    Ok(())
}

fn check_pair(policy: &Policy, cpm: &Cpm) -> Result<()> {
    if cpm.chunk_shape() != policy.chunk_shape() {
        return Err(Error::invalid("cpm and policy chunk shapes differ"));
    }
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs()));
    if !close(&cpm.action_norm.shift, &policy.action_norm.shift) || !close(&cpm.action_norm.scale, &policy.action_norm.scale) {
        return Err(Error::invalid(
            "cpm and policy read different action spaces; train both on the same dataset",
        ));
    }
    Ok(())
}

fn guidance_for(cfg: &RunConfig, policy: &Policy, eta: Option<f64>, ktg: Option<f64>) -> Result<GuidanceConfig> {
    let mut g = cfg.guidance.resolve(policy.family());
    if let Some(e) = eta {
        g.eta = e;
    }
    if let Some(k) = ktg {
        g.window = k;
    }
    g.validate(policy.schedule())?;
    Ok(g)
}

fn summary_over(reports: &[EvalReport]) -> SuccessSummary {
    if reports.len() == 1 {
        let outcomes: Vec<f64> = reports[0].rollouts.iter().map(|r| r.success as u8 as f64).collect();
        SuccessSummary {
            rates: vec![reports[0].success_rate],
            mean: reports[0].success_rate,
            sem: if outcomes.len() > 1 { stats::sem(&outcomes) } else { 0.0 },
        }
    } else {
        SuccessSummary::from_rates(reports.iter().map(|r| r.success_rate).collect())
    }
}

/// Evaluation seed for repeat `r`, as in the library pipeline.
fn repeat_seed(seed: u64, r: usize) -> u64 {
    derive_seed(seed, SEED_TAG_REPEAT, r as u64)
}

fn run_repeats(cfg: &RunConfig, agent: &dyn ChunkPolicy, rollouts: usize, seed: u64, repeats: usize, execute: usize) -> Result<Vec<EvalReport>> {
    let sim = ContactSim::new(cfg.task.clone())?;
    Ok((0..repeats.max(1))
        .map(|r| {
            evaluate(&sim, agent, rollouts, repeat_seed(seed, r), execute)
        })
        .collect())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let policy = Policy::load(&a.policy)?;
    let rollouts = a.rollouts.unwrap_or(cfg.eval.rollouts);
    let seed = a.seed.unwrap_or(cfg.seeds.root);
    let execute = policy.config.execute_steps;
    let cpm = a.cpm.as_deref().map(Cpm::load).transpose()?;
    let guidance = guidance_for(&cfg, &policy, a.eta, a.ktg)?;
    let reports = match &cpm {
        Some(c) => {
            check_pair(&policy, c)?;
            let agent = PolicyAgent::guided(&policy, c, &guidance)?;
            run_repeats(&cfg, &agent, rollouts, seed, a.repeats, execute)?
        }
        None => run_repeats(&cfg, &PolicyAgent::unguided(&policy), rollouts, seed, a.repeats, execute)?,
    };
    let summary = summary_over(&reports);
    let mode = match &cpm {
        Some(_) => format!("steered (eta {}, window {})", guidance.eta, guidance.window),
        None => "unguided".to_string(),
    };
    println!(
        "{mode}: success {:.4} ± {:.4} over {} x {rollouts} rollouts",
        summary.mean,
        summary.sem,
        reports.len()
    );
    if let Some(out) = &a.out {
        prepare_out(out, &cfg)?;
        let logs: String = reports.iter().map(|r| r.to_jsonl()).collect();
        write_file(&out.join("rollouts.jsonl"), &logs)?;
        let mut csv = String::from("repeat,success_rate,mean_steps\n");
        for (i, r) in reports.iter().enumerate() {
            let _ = writeln!(csv, "{i},{},{}", r.success_rate, r.mean_steps);
        }
        write_file(&out.join("metrics.csv"), &csv)?;
    }
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let spec: crate::mixture::GaussianMixtureSpec = serde_json::from_slice(&text)?;
            spec.validate()?;
            Some(spec)
        }
        None => None,
    };
    let options = MathCheckOptions {
        mc_samples: a.samples,
        seed: a.seed,
        coefficient: if a.mutate_coefficient {
            FlowCoefficient::Time
        } else {
            FlowCoefficient::Odds
        },
        spec,
        ..Default::default()
    };
    let report = run_math_checks(&options)?;
    for line in report.lines() {
        println!("{line}");
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_file(&out.join("validate_math.csv"), &report.to_csv())?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{} math check(s) failed", report.failures())))
    }
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let policy = Policy::load(&a.policy)?;
    let cpm = Cpm::load(&a.cpm)?;
    check_pair(&policy, &cpm)?;
    let base = guidance_for(&cfg, &policy, None, None)?;
    let (etas, windows) = match a.param {
        SweepParam::Eta => (a.grid.clone(), vec![a.fixed.unwrap_or(base.window)]),
        SweepParam::Ktg => (vec![a.fixed.unwrap_or(base.eta)], a.grid.clone()),
    };
    let seed = a.seed.unwrap_or(cfg.seeds.root);
    let sim = ContactSim::new(cfg.task.clone())?;
    let rows = sweep_grid(&etas, &windows, a.repeats, |eta, window, r| {
        let g = GuidanceConfig { eta, window, ..base.clone() };
        g.validate(policy.schedule())?;
        let agent = PolicyAgent::guided(&policy, &cpm, &g)?;
        Ok(evaluate(&sim, &agent, a.rollouts, repeat_seed(seed, r), policy.config.execute_steps).success_rate)
    })?;
    println!("eta,window,mean,std_error");
    for r in &rows {
        println!("{},{},{:.4},{:.4}", r.eta, r.window, r.mean, r.std_error);
    }
    if let Some(best) = best_row(&rows) {
        println!("best: eta {} window {} -> {:.4} ± {:.4}", best.eta, best.window, best.mean, best.std_error);
    }
    if let Some(out) = &a.out {
        prepare_out(out, &cfg)?;
        write_sweep_csv(out.join("sweep.csv"), &rows)?;
    }
    Ok(())
}

fn latency(a: LatencyArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let policy = Policy::load(&a.policy)?;
    let cpm = Cpm::load(&a.cpm)?;
    check_pair(&policy, &cpm)?;
    let sim = ContactSim::new(cfg.task.clone())?;
    let state = sim.reset(cfg.seeds.root);
    let obs = sim.observe(&state);
    let cond = policy.condition_tensor(&[crate::data::condition_vector(&obs.visual, state.gripper)])?;
    let vis = stack_rows([obs.visual.as_slice()], &[obs.visual.len()])?;
    let tac = stack_rows([obs.tactile.as_slice()], &[obs.tactile.len()])?;
    let denoiser = policy.conditioned(&cond);
    let base = guidance_for(&cfg, &policy, a.eta, None)?;
    let windows = if a.ktg.is_empty() { vec![base.window] } else { a.ktg.clone() };
    let mut csv = String::from("window,guided_steps,unguided_ms,guided_ms,overhead_pct\n");
    println!("window  steps  unguided_ms  guided_ms  overhead_%");
    for w in windows {
        let g = GuidanceConfig { window: w, ..base.clone() };
        g.validate(policy.schedule())?;
        let r = latency_probe(&denoiser, policy.schedule(), || CpmGuide::new(&cpm, &vis, &tac), &g, &policy.chunk_shape(), a.trials)?;
        println!(
            "{:<7} {:<6} {:<12.3} {:<10.3} {:.1}",
            r.window, r.guided_steps, r.unguided_ms, r.guided_ms, r.overhead_pct
        );
        let _ = writeln!(csv, "{},{},{},{},{}", r.window, r.guided_steps, r.unguided_ms, r.guided_ms, r.overhead_pct);
    }
    if let Some(out) = &a.out {
        prepare_out(out, &cfg)?;
        write_file(&out.join("latency.csv"), &csv)?;
    }
    Ok(())
}
