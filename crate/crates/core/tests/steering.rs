use std::cell::RefCell;

use minitensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tactile_guidance::mixture::*;
use tactile_guidance::schedulers::*;
use tactile_guidance::stats;
use tactile_guidance::steering::*;
use tactile_guidance::Result;

fn two_class() -> GaussianMixtureSpec {
    GaussianMixtureSpec::two_class([-2.0, 2.0], [0.5, 0.5], [0.7, 0.3]).unwrap()
}

fn gaussian(mean: f64, std: f64) -> GaussianMixtureSpec {
    GaussianMixtureSpec::new(vec![MixtureComponent {
        mean,
        variance: std * std,
        weight: 1.0,
        label: 0,
    }])
    .unwrap()
}

/// Joint-Gaussian regression of `eps - x0` on `x_t` for `x0 ~ N(mu, s^2)`.
fn gaussian_velocity(mu: f64, s: f64, x: f64, t: f64) -> f64 {
    let var = (1.0 - t).powi(2) * s * s + t * t;
    let cov = t - (1.0 - t) * s * s;
    -mu + cov / var * (x - (1.0 - t) * mu)
}

#[test]
fn guided_epsilon_examples() {
    let s = DdpmSchedule::from_betas(vec![0.75]).unwrap();
    let eps = Tensor::from_slice(&[0.3, -0.2, 1.0]);
    let ones = Tensor::from_slice(&[1.0; 3]);
    let zeros = Tensor::zeros(&[3]);
    assert_eq!(guided_epsilon(&eps, &ones, 0, 0.0, &s).unwrap().data(), eps.data());
    assert_eq!(guided_epsilon(&eps, &zeros, 0, 4.0, &s).unwrap().data(), eps.data());
    // abar = 0.25, so sqrt(1 - abar) = sqrt(0.75)
    let c = (1.0f64 - (1.0 - 0.75)).sqrt();
    let out = guided_epsilon(&eps, &ones, 0, 4.0, &s).unwrap();
    for (o, e) in out.data().iter().zip(eps.data()) {
        assert!((o - (e - 4.0 * c)).abs() < 1e-15);
    }
    let half = DdpmSchedule::from_betas(vec![0.25]).unwrap();
    let out = guided_epsilon(&eps, &ones, 0, 4.0, &half).unwrap();
    for (o, e) in out.data().iter().zip(eps.data()) {
        assert!((o - (e - 2.0)).abs() < 1e-15);
    }
    let bad = Tensor::from_slice(&[f64::NAN, 0.0, 0.0]);
    assert!(guided_epsilon(&eps, &bad, 0, 1.0, &s).is_err());
}

#[test]
fn guided_velocity_examples() {
    let u = Tensor::from_slice(&[0.5, -1.5]);
    let g = Tensor::from_slice(&[2.0, 3.0]);
    assert_eq!(guided_velocity(&u, &g, 0.0, 7.0).unwrap().data(), u.data());
    let out = guided_velocity(&u, &g, 0.3, 10.0).unwrap();
    for ((o, a), b) in out.data().iter().zip(u.data()).zip(g.data()) {
        assert!((o - (a - 30.0 / 7.0 * b)).abs() < 1e-12);
    }
    assert!(guided_velocity(&u, &g, 1.0, 1.0).is_err());
    let time = guided_velocity_with(&u, &g, 0.3, 10.0, FlowCoefficient::Time).unwrap();
    assert!((time.data()[0] - (0.5 - 3.0 * 2.0)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn larger_scale_moves_against_the_gradient(u in -5.0f64..5.0, g in -5.0f64..5.0, t in 0.01f64..0.95, e1 in 0.0f64..10.0, de in 0.01f64..10.0) {
        let ut = Tensor::from_slice(&[u]);
        let gt = Tensor::from_slice(&[g]);
        let a = guided_velocity(&ut, &gt, t, e1).unwrap().data()[0];
        let b = guided_velocity(&ut, &gt, t, e1 + de).unwrap().data()[0];
        prop_assert!((b - a) * g <= 0.0);
        if g != 0.0 {
            prop_assert!((b - a) * g < 0.0);
        }
        // linear in the scale
        let c = guided_velocity(&ut, &gt, t, e1 + 2.0 * de).unwrap().data()[0];
        prop_assert!(((c - b) - (b - a)).abs() < 1e-9 * (1.0 + a.abs() + c.abs()));
    }
}

/// Records the times at which the gradient is requested.
struct Recording<'a> {
    inner: ExactClassifier<'a>,
    calls: RefCell<Vec<NoiseTime>>,
}

impl GuidanceScore for Recording<'_> {
    fn gradient(&self, x: &Tensor, time: NoiseTime) -> Result<Tensor> {
        self.calls.borrow_mut().push(time);
        self.inner.gradient(x, time)
    }
}

fn schedules() -> [NoiseSchedule; 2] {
    [
        NoiseSchedule::Flow(FmPath::new(10).unwrap()),
        NoiseSchedule::Diffusion(DdpmSchedule::squared_cosine(30).unwrap()),
    ]
}

fn run(schedule: &NoiseSchedule, config: Option<&GuidanceConfig>, seeds: &[u64]) -> (Tensor, Vec<NoiseTime>) {
    let spec = two_class();
    let model = MixtureDenoiser { spec: &spec, schedule };
    let score = Recording {
        inner: ExactClassifier { spec: &spec, schedule, label: 1 },
        calls: RefCell::new(Vec::new()),
    };
    let out = guided_sample(&model, schedule, config.map(|c| Guidance { score: &score, config: c }), &[2], seeds).unwrap();
    (out, score.calls.into_inner())
}

#[test]
fn zero_scale_or_empty_window_is_the_plain_sampler() {
    let seeds: Vec<u64> = (0..64).collect();
    for schedule in schedules() {
        let (plain, _) = run(&schedule, None, &seeds);
        let window = if schedule.family() == Family::Flow { 0.9 } else { 30.0 };
        let (zero_eta, calls) = run(&schedule, Some(&GuidanceConfig::new(0.0, window)), &seeds);
        assert!(calls.is_empty());
        assert_eq!(plain.data(), zero_eta.data());
        let (closed, calls) = run(&schedule, Some(&GuidanceConfig::new(3.0, 0.0)), &seeds);
        assert_eq!(plain.data(), closed.data());
        assert!(calls.is_empty());
        let (guided, _) = run(&schedule, Some(&GuidanceConfig::new(3.0, window)), &seeds);
        assert_ne!(plain.data(), guided.data());
    }
}

#[test]
fn guidance_is_applied_exactly_inside_the_window() {
    let flow = NoiseSchedule::Flow(FmPath::new(10).unwrap());
    let (_, calls) = run(&flow, Some(&GuidanceConfig::new(1.0, 0.3)), &[1]);
    let ts: Vec<f64> = calls
        .iter()
        .map(|t| match t {
            NoiseTime::Continuous(t) => *t,
            _ => panic!(),
        })
        .collect();
    assert_eq!(ts.len(), 3);
    for (t, want) in ts.iter().zip([0.3, 0.2, 0.1]) {
        assert!((t - want).abs() < 1e-12);
    }
    let diff = NoiseSchedule::Diffusion(DdpmSchedule::squared_cosine(30).unwrap());
    let (_, calls) = run(&diff, Some(&GuidanceConfig::new(1.0, 10.0)), &[1]);
    let levels: Vec<NoiseTime> = (0..10).rev().map(NoiseTime::Level).collect();
    assert_eq!(calls, levels);
}

#[test]
fn sampling_errors() {
    let spec = two_class();
    let flow = NoiseSchedule::Flow(FmPath::new(10).unwrap());
    let diff = NoiseSchedule::Diffusion(DdpmSchedule::squared_cosine(10).unwrap());
    let model = MixtureDenoiser { spec: &spec, schedule: &flow };
    assert!(sample_unguided(&model, &diff, &[1], &[0]).is_err());
    assert!(sample_unguided(&model, &flow, &[1], &[]).is_err());
    assert!(GuidanceConfig::new(-1.0, 0.5).validate(&flow).is_err());
    assert!(GuidanceConfig::new(1.0, 1.0).validate(&flow).is_err());
    assert!(GuidanceConfig::new(1.0, 2.5).validate(&diff).is_err());
    assert!(GuidanceConfig::new(1.0, 11.0).validate(&diff).is_err());
}

#[test]
fn exact_classifier_steers_flow_samples_to_the_target() {
    let spec = two_class();
    let flow = NoiseSchedule::Flow(FmPath::new(10).unwrap());
    let n = 10_000;
    let plain = summarize(&spec, &sample_mixture(&spec, &flow, None, n, 1).unwrap(), 1);
    assert!((plain.target_mass - 0.3).abs() < 0.05, "{}", plain.target_mass);
    let config = GuidanceConfig::new(1.0, 0.9);
    let guided = summarize(&spec, &sample_mixture(&spec, &flow, Some((&config, 1)), n, 1).unwrap(), 1);
    assert!(guided.target_mass >= 0.95, "{}", guided.target_mass);
}

#[test]
fn any_positive_scale_beats_unguided() {
    let spec = two_class();
    let flow = NoiseSchedule::Flow(FmPath::new(10).unwrap());
    let etas = [0.0, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0];
    let rows = analytic_guidance_check(&spec, 1, &etas, &flow, &GuidanceConfig::new(1.0, 0.9), 10_000, 3).unwrap();
    for r in &rows[1..] {
        assert!(r.target_mass > rows[0].target_mass, "eta {}: {}", r.eta, r.target_mass);
    }
    // scale zero reproduces the unconditional mixture
    let zero = &rows[0];
    assert!((zero.reference_mean - (0.7 * -2.0 + 0.3 * 2.0)).abs() < 1e-6);
    assert!((zero.target_mass - 0.3).abs() < 0.05, "{}", zero.target_mass);
}

#[test]
fn velocity_oracle_examples() {
    let centred = gaussian(0.0, 1.3);
    for t in [0.1, 0.5, 0.9] {
        assert!(marginal_velocity_oracle(&centred, 0.0, t).unwrap().abs() < 1e-12);
    }
    assert!(marginal_velocity_oracle(&centred, 0.0, 0.0).is_err());
    assert!(marginal_velocity_oracle(&centred, 0.0, 1.0).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (mu, s) = (rng.random_range(-3.0..3.0), rng.random_range(0.1..2.0));
        let (x, t) = (rng.random_range(-4.0..4.0), rng.random_range(0.01..0.99));
        let got = marginal_velocity_oracle(&gaussian(mu, s), x, t).unwrap();
        let want = gaussian_velocity(mu, s, x, t);
        assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()), "{got} vs {want}");
    }
}

#[test]
fn velocity_oracle_matches_monte_carlo() {
    let spec = two_class();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (x, t) in [(-1.0, 0.3), (0.5, 0.6), (1.8, 0.2), (0.0, 0.85)] {
        let mc = mc_conditional_velocity(&spec, x, t, 200_000, &mut rng).unwrap();
        let oracle = marginal_velocity_oracle(&spec, x, t).unwrap();
        let z = (mc.mean - oracle).abs() / mc.std_error;
        assert!(z <= 3.0, "x {x} t {t}: z {z}");
    }
}

#[test]
fn oracle_transport_reaches_the_mixture() {
    let spec = two_class();
    let flow = NoiseSchedule::Flow(FmPath::new(1000).unwrap());
    let xs = sample_mixture(&spec, &flow, None, 10_000, 5).unwrap();
    let ks = stats::ks_statistic(&xs, |x| spec.cdf(x));
    assert!(ks < 0.02, "ks {ks}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn gating_follows_the_window(steps in 1usize..60, frac in 0.0f64..0.999, eta in 0.0f64..5.0) {
        let flow = NoiseSchedule::Flow(FmPath::new(steps).unwrap());
        let c = GuidanceConfig::new(eta, frac);
        for k in 1..=steps {
            let t = k as f64 / steps as f64;
            prop_assert_eq!(c.is_active(&flow, k), eta > 0.0 && t < 1.0 && t <= frac + 1e-12);
        }
        let diff = NoiseSchedule::Diffusion(DdpmSchedule::squared_cosine(steps).unwrap());
        let w = (frac * steps as f64).floor();
        let c = GuidanceConfig::new(eta, w);
        prop_assert_eq!(c.window_steps(&diff), w as usize);
        for k in 1..=steps {
            prop_assert_eq!(c.is_active(&diff, k), eta > 0.0 && k as f64 <= w);
        }
    }
}
