//! Numerical self-checks behind `validate-math`: the marginal-velocity
//! identity by Monte Carlo, exact-classifier steering for both sampler
//! families, and central-difference gradient checks.

use std::fmt::Write as _;

use minitensor::gradcheck::{check_case, op_suite, sample_case_input};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mixture::{
    analytic_guidance_check, marginal_velocity_oracle, mc_conditional_velocity, sample_mixture, summarize, GaussianMixtureSpec,
    MixtureComponent,
};
use crate::pipeline::{best_row, sweep_grid};
use crate::schedulers::{BetaSchedule, DdpmSchedule, FmPath, NoiseSchedule};
use crate::sim::derive_seed;
use crate::steering::{FlowCoefficient, GuidanceConfig};

/// Required target-class mass under guidance at `eta = 1`.
pub const TARGET_MASS: f64 = 0.95;
/// Allowed gap between unguided target mass and the prior class weight.
pub const PRIOR_TOLERANCE: f64 = 0.05;
/// Monte Carlo agreement in standard errors.
pub const MC_SIGMAS: f64 = 3.0;
/// Max relative error of a gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const GRAD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct MathCheckOptions {
    /// Path samples per Monte Carlo estimate.
    pub mc_samples: usize,
    /// Random mixtures for the velocity identity when no spec is given.
    pub mc_specs: usize,
    /// `(x, t)` points per mixture.
    pub mc_points: usize,
    /// Draws per guided-sampling check.
    pub guidance_samples: usize,
    pub seed: u64,
    pub coefficient: FlowCoefficient,
    /// Mixture for every check; `None` uses random specs for the identity
    /// and [`benchmark_spec`] for steering.
    pub spec: Option<GaussianMixtureSpec>,
    pub flow_steps: usize,
    /// Path resolution for the distribution-level comparison at `eta = 1`.
    pub fine_flow_steps: usize,
    /// Largest guided `t` in the flow check.
    pub flow_window: f64,
    pub diffusion_steps: usize,
    /// Candidate scales for the diffusion calibration sweep.
    pub diffusion_etas: Vec<f64>,
    /// Random points per op in the gradient suite; 0 skips it.
    pub grad_instances: usize,
}

impl Default for MathCheckOptions {
    fn default() -> Self {
        Self {
            mc_samples: 1_000_000,
            mc_specs: 3,
            mc_points: 20,
            guidance_samples: 10_000,
            seed: 0,
            coefficient: FlowCoefficient::Odds,
            spec: None,
            flow_steps: 10,
            fine_flow_steps: 250,
            flow_window: 0.9,
            diffusion_steps: 100,
            diffusion_etas: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            grad_instances: 10,
        }
    }
}

/// Two well-separated classes with a 0.7 / 0.3 prior.
pub fn benchmark_spec() -> GaussianMixtureSpec {
    GaussianMixtureSpec::two_class([-2.0, 2.0], [0.5, 0.5], [0.7, 0.3]).expect("valid benchmark mixture")
}

/// Two or three components with labels alternating between two classes.
pub fn random_spec(rng: &mut impl Rng) -> GaussianMixtureSpec {
    let n = rng.random_range(2..=3);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let components = raw
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let std: f64 = rng.random_range(0.3..1.2);
            MixtureComponent {
                mean: rng.random_range(-3.0..3.0),
                variance: std * std,
                weight: w / total,
                label: i % 2,
            }
        })
        .collect();
    GaussianMixtureSpec::new(components).expect("weights normalized above")
}

/// Class with the smallest prior weight.
pub fn minority_class(spec: &GaussianMixtureSpec) -> usize {
    (0..spec.num_classes())
        .min_by(|&a, &b| spec.class_weight(a).total_cmp(&spec.class_weight(b)))
        .unwrap_or(0)
}

#[derive(Debug, Clone, Serialize)]
pub struct MathCheck {
    pub group: &'static str,
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MathReport {
    pub checks: Vec<MathCheck>,
}

impl MathReport {
    fn push(&mut self, group: &'static str, name: String, value: f64, bound: f64, passed: bool) {
        self.checks.push(MathCheck {
            group,
            name,
            value,
            bound,
            passed,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn group<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a MathCheck> + 'a {
        self.checks.iter().filter(move |c| c.group == group)
    }

    /// One line per check group, then one per failed check.
    pub fn lines(&self) -> Vec<String> {
        let mut groups: Vec<&str> = Vec::new();
        for c in &self.checks {
            if !groups.contains(&c.group) {
                groups.push(c.group);
            }
        }
        let mut out: Vec<String> = groups
            .iter()
            .map(|g| {
                let n = self.group(g).count();
                let bad = self.group(g).filter(|c| !c.passed).count();
                let status = if bad == 0 { "PASS" } else { "FAIL" };
                format!("{status} {g}: {}/{n} checks within tolerance", n - bad)
            })
            .collect();
        out.extend(
            self.checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| format!("  failed {} {}: value {:.6e}, bound {:.6e}", c.group, c.name, c.value, c.bound)),
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,name,value,bound,passed\n");
        for c in &self.checks {
            let _ = writeln!(s, "{},{},{},{},{}", c.group, c.name, c.value, c.bound, c.passed);
        }
        s
    }
}

pub fn run_math_checks(opts: &MathCheckOptions) -> Result<MathReport> {
    if let Some(spec) = &opts.spec {
        spec.validate()?;
        if spec.num_classes() < 2 {
            return Err(Error::invalid("steering checks need a mixture with at least two classes"));
        }
    }
    let mut report = MathReport::default();
    velocity_identity(opts, &mut report)?;
    let spec = opts.spec.clone().unwrap_or_else(benchmark_spec);
    flow_steering(opts, &spec, &mut report)?;
    diffusion_steering(opts, &spec, &mut report)?;
    if opts.grad_instances > 0 {
        gradient_suite(opts, &mut report)?;
    }
    Ok(report)
}

fn velocity_identity(opts: &MathCheckOptions, report: &mut MathReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 31, 0));
    let specs: Vec<GaussianMixtureSpec> = match &opts.spec {
        Some(s) => vec![s.clone()],
        None => (0..opts.mc_specs).map(|_| random_spec(&mut rng)).collect(),
    };
    for (si, spec) in specs.iter().enumerate() {
        for pi in 0..opts.mc_points {
            let t: f64 = rng.random_range(0.05..0.95);
            // a point drawn from p_t, so the estimate has support
            let x = (1.0 - t) * spec.draw(&mut rng) + t * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let oracle = marginal_velocity_oracle(spec, x, t)?;
            let mc = mc_conditional_velocity(spec, x, t, opts.mc_samples, &mut rng)?;
            let z = (mc.mean - oracle).abs() / mc.std_error;
            report.push(
                "velocity_identity",
                format!("spec{si}_point{pi}_t{t:.3}_x{x:.3}"),
                z,
                MC_SIGMAS,
                z <= MC_SIGMAS,
            );
        }
    }
    Ok(())
}

fn flow_steering(opts: &MathCheckOptions, spec: &GaussianMixtureSpec, report: &mut MathReport) -> Result<()> {
    let schedule = NoiseSchedule::Flow(FmPath::new(opts.flow_steps)?);
    let label = minority_class(spec);
    let prior = spec.class_weight(label);
    let n = opts.guidance_samples;
    let seed = derive_seed(opts.seed, 32, 0);
    let unguided = summarize(spec, &sample_mixture(spec, &schedule, None, n, seed)?, label);
    report.push(
        "flow_steering",
        "unguided_target_mass_gap".into(),
        (unguided.target_mass - prior).abs(),
        PRIOR_TOLERANCE,
        (unguided.target_mass - prior).abs() <= PRIOR_TOLERANCE,
    );
    let base = GuidanceConfig {
        flow_coefficient: opts.coefficient,
        ..GuidanceConfig::new(1.0, opts.flow_window)
    };
    let rows = analytic_guidance_check(spec, label, &[1.0], &schedule, &base, n, seed)?;
    let row = &rows[0];
    report.push(
        "flow_steering",
        "eta1_target_mass".into(),
        row.target_mass,
        TARGET_MASS,
        row.target_mass >= TARGET_MASS,
    );
    report.push("flow_steering_info", "eta1_ks_vs_class_conditional".into(), row.ks, f64::NAN, true);
    // a fine path removes the Euler error, leaving only sampling noise
    let fine = FmPath::new(opts.fine_flow_steps)?;
    let fine_base = GuidanceConfig {
        window: 1.0 + fine.dt(),
        ..base
    };
    let rows = analytic_guidance_check(spec, label, &[1.0], &NoiseSchedule::Flow(fine), &fine_base, n, seed)?;
    let bound = 2.0 / (n as f64).sqrt();
    report.push(
        "flow_class_conditional",
        format!("eta1_ks_{}_steps", opts.fine_flow_steps),
        rows[0].ks,
        bound,
        rows[0].ks <= bound,
    );
    Ok(())
}

fn diffusion_steering(opts: &MathCheckOptions, spec: &GaussianMixtureSpec, report: &mut MathReport) -> Result<()> {
    let schedule = NoiseSchedule::Diffusion(DdpmSchedule::new(opts.diffusion_steps, BetaSchedule::SquaredCosine)?);
    let label = minority_class(spec);
    let prior = spec.class_weight(label);
    let n = opts.guidance_samples;
    let seed = derive_seed(opts.seed, 33, 0);
    let unguided = summarize(spec, &sample_mixture(spec, &schedule, None, n, seed)?, label);
    report.push(
        "diffusion_steering",
        "unguided_target_mass_gap".into(),
        (unguided.target_mass - prior).abs(),
        PRIOR_TOLERANCE,
        (unguided.target_mass - prior).abs() <= PRIOR_TOLERANCE,
    );
    let window = opts.diffusion_steps as f64;
    let rows = sweep_grid(&opts.diffusion_etas, &[window], 1, |eta, window, _| {
        let config = GuidanceConfig::new(eta, window);
        let samples = sample_mixture(spec, &schedule, Some((&config, label)), n, seed)?;
        Ok(summarize(spec, &samples, label).target_mass)
    })?;
    for r in &rows {
        report.push("diffusion_steering_info", format!("eta{}_target_mass", r.eta), r.mean, f64::NAN, true);
    }
    let best = best_row(&rows).ok_or_else(|| Error::invalid("diffusion calibration needs at least one scale"))?;
    report.push(
        "diffusion_steering",
        format!("calibrated_eta{}_target_mass", best.eta),
        best.mean,
        TARGET_MASS,
        best.mean >= TARGET_MASS,
    );
    Ok(())
}

fn gradient_suite(opts: &MathCheckOptions, report: &mut MathReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 34, 0));
    for case in op_suite() {
        let mut worst = 0.0f64;
        for _ in 0..opts.grad_instances {
            let x = sample_case_input(&case, &mut rng);
            worst = worst.max(check_case(&case, &x, GRAD_STEP)?);
        }
        report.push("gradients", case.name.to_string(), worst, GRAD_TOLERANCE, worst < GRAD_TOLERANCE);
    }
    Ok(())
}
