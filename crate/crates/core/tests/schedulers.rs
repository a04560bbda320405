use minitensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tactile_guidance::mixture::{sample_mixture, GaussianMixtureSpec, MixtureComponent};
use tactile_guidance::schedulers::*;
use tactile_guidance::stats;

fn brute_force_cosine_alpha_bars(k: usize) -> Vec<f64> {
    let f = |t: f64| ((t + 0.008) / 1.008 * std::f64::consts::PI / 2.0).cos().powi(2);
    let mut out = Vec::new();
    let mut prod = 1.0;
    for i in 0..k {
        let beta = (1.0 - f((i + 1) as f64 / k as f64) / f(i as f64 / k as f64)).min(0.999);
        prod *= 1.0 - beta;
        out.push(prod);
    }
    out
}

#[test]
fn alpha_bars_decrease_and_start_near_one() {
    for kind in [BetaSchedule::SquaredCosine, BetaSchedule::Linear] {
        let s = DdpmSchedule::new(100, kind).unwrap();
        let ab = s.alpha_bars();
        assert!(ab[0] >= 0.99 && ab[0] <= 1.0);
        assert!(ab.windows(2).all(|w| w[1] < w[0]));
        assert!(ab.iter().all(|&a| a > 0.0 && a <= 1.0));
    }
}

#[test]
fn add_noise_last_level_matches_brute_force() {
    let s = DdpmSchedule::squared_cosine(100).unwrap();
    let oracle = brute_force_cosine_alpha_bars(100);
    let x = s.add_noise(&Tensor::zeros(&[3]), &Tensor::from_slice(&[1.0; 3]), 99).unwrap();
    for v in x.data() {
        assert!((v - (1.0 - oracle[99]).sqrt()).abs() < 1e-12);
    }
    assert!(s.add_noise(&Tensor::zeros(&[3]), &Tensor::zeros(&[3]), 100).is_err());
}

#[test]
fn add_noise_limits() {
    let x0 = Tensor::from_slice(&[0.3, -1.2]);
    let eps = Tensor::from_slice(&[2.0, 0.5]);
    // abar essentially 1 and essentially 0
    let clean = DdpmSchedule::from_betas(vec![1e-300]).unwrap();
    assert_eq!(clean.add_noise(&x0, &eps, 0).unwrap().data(), x0.data());
    let noisy = DdpmSchedule::from_betas(vec![1.0 - 1e-15]).unwrap();
    let out = noisy.add_noise(&x0, &eps, 0).unwrap();
    for (a, b) in out.data().iter().zip(eps.data()) {
        assert!((a - b).abs() < 1e-7);
    }
}

#[test]
fn one_step_schedule_inverts_exactly() {
    let s = DdpmSchedule::from_betas(vec![0.3]).unwrap();
    let x0 = Tensor::from_slice(&[0.7, -0.1, 2.0]);
    let eps = Tensor::from_slice(&[-1.0, 0.4, 0.2]);
    let x1 = s.add_noise(&x0, &eps, 0).unwrap();
    let back = s.step(&x1, &eps, 1, || panic!("no noise at the last step")).unwrap();
    for (a, b) in back.data().iter().zip(x0.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ddpm_step_errors() {
    let s = DdpmSchedule::squared_cosine(10).unwrap();
    let x = Tensor::zeros(&[2]);
    assert!(s.step(&x, &x, 0, || Tensor::zeros(&[2])).is_err());
    let bad = Tensor::from_slice(&[f64::NAN, 0.0]);
    assert!(s.step(&x, &bad, 3, || Tensor::zeros(&[2])).is_err());
}

#[test]
fn ddpm_step_is_deterministic_per_seed() {
    let s = DdpmSchedule::squared_cosine(20).unwrap();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = standard_normal(&[4], &mut rng);
        for k in (1..=20).rev() {
            let eps = x.scale(0.5);
            x = s.step(&x, &eps, k, || standard_normal(&[4], &mut rng)).unwrap();
        }
        x
    };
    assert_eq!(run().data(), run().data());
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

#[test]
fn exact_denoiser_chain_reaches_target_gaussian() {
    const K: usize = 1000;
    let (mu, sd) = (1.5, 0.6);
    let spec = gaussian(mu, sd);
    let schedule = NoiseSchedule::Diffusion(DdpmSchedule::squared_cosine(K).unwrap());
    let n = 10_000;
    let xs = sample_mixture(&spec, &schedule, None, n, 3).unwrap();
    let m = stats::mean(&xs);
    let v = stats::variance(&xs);
    let se_mean = sd / (n as f64).sqrt();
    let se_var = sd * sd * (2.0 / (n as f64 - 1.0)).sqrt();
    assert!((m - mu).abs() < 3.0 * se_mean, "mean {m}");
    assert!((v - sd * sd).abs() < 3.0 * se_var, "variance {v}");
}

#[test]
fn fm_interpolation_examples() {
    let x0 = Tensor::from_slice(&[2.0]);
    let eps = Tensor::from_slice(&[0.0]);
    assert_eq!(fm_interpolate(&x0, &eps, 0.0).unwrap().data(), &[2.0]);
    assert_eq!(fm_interpolate(&x0, &eps, 1.0).unwrap().data(), &[0.0]);
    assert_eq!(fm_interpolate(&x0, &eps, 0.5).unwrap().data(), &[1.0]);
    assert!(fm_interpolate(&x0, &eps, 1.5).is_err());
    assert!(fm_interpolate(&x0, &eps, -0.1).is_err());
}

#[test]
fn conditional_velocity_examples() {
    let a = Tensor::from_slice(&[0.3, -0.7]);
    assert_eq!(fm_conditional_velocity(&a, &a).unwrap().data(), &[0.0, 0.0]);
    let v = fm_conditional_velocity(&Tensor::from_slice(&[0.0]), &Tensor::from_slice(&[1.0])).unwrap();
    assert_eq!(v.data(), &[1.0]);
}

#[test]
fn guidance_coefficients() {
    assert_eq!(flow_guidance_coefficient(0.5).unwrap(), 1.0);
    assert!((flow_guidance_coefficient(0.3).unwrap() - 3.0 / 7.0).abs() < 1e-15);
    assert!(flow_guidance_coefficient(1.0).is_err());
    let s = DdpmSchedule::from_betas(vec![1e-4, 0.02]).unwrap();
    let c = guidance_coefficient(&s, NoiseTime::Level(0)).unwrap();
    assert!((c - 0.01).abs() < 1e-12);
}

#[test]
fn marginal_coefficients() {
    assert_eq!(marginal_fm_coefficients(0.5).unwrap(), (-2.0, -1.0));
    assert!(marginal_fm_coefficients(0.0).is_err());
    assert!(marginal_fm_coefficients(1.0).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let t: f64 = rand::Rng::random_range(&mut rng, 0.001..0.999);
        // alpha = 1 - t, sigma = t, alpha' = -1, sigma' = 1
        let symbolic = (-1.0 / (1.0 - t) - 1.0 / t) * t * t;
        let (_, b) = marginal_fm_coefficients(t).unwrap();
        assert!((b - symbolic).abs() < 1e-12);
        assert_eq!(-b, flow_guidance_coefficient(t).unwrap());
    }
}

#[test]
fn geometric_degenerate_and_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let one = GeometricNoiseSampler::new(1.0, None).unwrap();
    assert!((0..1000).all(|_| one.sample(&mut rng) == 0));
    let half = GeometricNoiseSampler::new(0.5, None).unwrap();
    let n = 100_000;
    let mean = (0..n).map(|_| half.sample(&mut rng) as f64).sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
    assert!(GeometricNoiseSampler::new(0.0, None).is_err());
}

#[test]
fn geometric_pmf_matches_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (p, m) in [(0.1, 10), (0.3, 4), (0.05, 30)] {
        let s = GeometricNoiseSampler::new(p, Some(m)).unwrap();
        let n = 100_000;
        let mut counts = vec![0.0; m + 1];
        for _ in 0..n {
            let k = s.sample(&mut rng);
            assert!(k <= m);
            counts[k] += 1.0 / n as f64;
        }
        // independent truncated pmf
        let raw: Vec<f64> = (0..=m).map(|k| p * (1.0 - p).powi(k as i32)).collect();
        let z: f64 = raw.iter().sum();
        let pmf: Vec<f64> = raw.iter().map(|r| r / z).collect();
        for (k, q) in pmf.iter().enumerate() {
            assert!((s.pmf(k) - q).abs() < 1e-12);
        }
        let tv = stats::total_variation(&counts, &pmf);
        assert!(tv < 0.01, "p={p}: tv {tv}");
    }
}

#[test]
fn corruption_levels_map_onto_both_families() {
    let d = NoiseSchedule::Diffusion(DdpmSchedule::squared_cosine(100).unwrap());
    let f = NoiseSchedule::Flow(FmPath::new(10).unwrap());
    assert_eq!(d.corruption_time(0), None);
    assert_eq!(d.corruption_time(3), Some(NoiseTime::Level(2)));
    assert_eq!(f.corruption_time(3), Some(NoiseTime::Continuous(0.3)));
    let x0 = Tensor::from_slice(&[1.0]);
    let eps = Tensor::from_slice(&[0.0]);
    assert!((f.corrupt(&x0, &eps, 3).unwrap().data()[0] - 0.7).abs() < 1e-15);
}

proptest! {
    #[test]
    fn interpolation_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, t in 0.0f64..=1.0, s in -3.0f64..3.0) {
        let x = Tensor::from_slice(&[a]);
        let y = Tensor::from_slice(&[b]);
        let e = Tensor::from_slice(&[c]);
        let lhs = fm_interpolate(&x.scale(s).add(&y).unwrap(), &e, t).unwrap().data()[0];
        let rhs = s * fm_interpolate(&x, &e, t).unwrap().data()[0] + fm_interpolate(&y, &e, t).unwrap().data()[0]
            - s * t * c;
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn path_derivative_is_the_conditional_velocity(a in -5.0f64..5.0, c in -5.0f64..5.0, t in 0.0f64..0.9, h in 1e-3f64..0.1) {
        let x0 = Tensor::from_slice(&[a]);
        let e = Tensor::from_slice(&[c]);
        let d = fm_interpolate(&x0, &e, t + h).unwrap().data()[0] - fm_interpolate(&x0, &e, t).unwrap().data()[0];
        let v = fm_conditional_velocity(&x0, &e).unwrap().data()[0];
        prop_assert!((d - h * v).abs() < 1e-12);
    }

    #[test]
    fn flow_coefficient_increases(t in 0.0f64..0.99, dt in 1e-6f64..0.01) {
        prop_assert!(flow_guidance_coefficient(t + dt).unwrap() > flow_guidance_coefficient(t).unwrap());
    }

    #[test]
    fn random_schedules_keep_invariants(betas in proptest::collection::vec(1e-5f64..0.5, 1..50)) {
        let s = DdpmSchedule::from_betas(betas).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a <= 1.0));
    }
}
