use std::sync::OnceLock;

use minitensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tactile_guidance::data::{ChunkSample, Normalizer};
use tactile_guidance::mixture::{marginal_velocity_oracle, GaussianMixtureSpec, MixtureComponent};
use tactile_guidance::policy::*;
use tactile_guidance::schedulers::*;
use tactile_guidance::sim::VISUAL_DIM;
use tactile_guidance::stats;
use tactile_guidance::steering::sample_unguided;

const MU: f64 = 0.5;
const SD: f64 = 0.3;
const COND: usize = VISUAL_DIM + 3;

fn identity(width: usize) -> Normalizer {
    Normalizer {
        shift: vec![0.0; width],
        scale: vec![1.0; width],
    }
}

fn config(family: Family) -> PolicyConfig {
    PolicyConfig {
        family,
        horizon: 1,
        hidden: 64,
        execute_steps: 1,
        ..Default::default()
    }
}

fn new_policy(family: Family, seed: u64) -> Policy {
    Policy::new(config(family), identity(COND), identity(3), seed).unwrap()
}

/// Chunks of three iid `N(MU, SD^2)` values with a constant zero condition.
fn gaussian_samples(n: usize, seed: u64) -> Vec<ChunkSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| ChunkSample {
            episode: 0,
            step: i,
            visual: vec![0.0; VISUAL_DIM],
            tactile: Vec::new(),
            state: [0.0; 3],
            actions: (0..3).map(|_| MU + SD * rng.sample::<f64, _>(StandardNormal)).collect(),
        })
        .collect()
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 256,
        learning_rate: 3e-3,
        epochs,
        seed: 1,
        warmup_steps: 50,
        weight_decay: 0.0,
    }
}

fn trained(family: Family) -> &'static Policy {
    static DIFFUSION: OnceLock<Policy> = OnceLock::new();
    static FLOW: OnceLock<Policy> = OnceLock::new();
    let cell = if family == Family::Diffusion { &DIFFUSION } else { &FLOW };
    cell.get_or_init(|| {
        let mut p = new_policy(family, 3);
        train_policy(&mut p, &gaussian_samples(4000, 2), &train_config(150), |_, _| {}).unwrap();
        p
    })
}

fn zero_cond(b: usize) -> Tensor {
    Tensor::zeros(&[b, COND])
}

fn column(x: f64) -> Tensor {
    Tensor::from_slice(&[x, x, x]).reshape(&[1, 1, 3]).unwrap()
}

fn gaussian_spec() -> GaussianMixtureSpec {
    GaussianMixtureSpec::new(vec![MixtureComponent {
        mean: MU,
        variance: SD * SD,
        weight: 1.0,
        label: 0,
    }])
    .unwrap()
}

#[test]
fn zero_weights_give_zero_output() {
    for family in [Family::Diffusion, Family::Flow] {
        let mut p = new_policy(family, 0);
        p.zero_weights();
        let time = p.schedule().time_at(3);
        let out = p.predict(&column(0.7), time, &zero_cond(1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn initialization_and_prediction_are_deterministic() {
    let a = new_policy(Family::Flow, 5);
    let b = new_policy(Family::Flow, 5);
    let c = new_policy(Family::Flow, 6);
    let t = NoiseTime::Continuous(0.4);
    let x = column(-0.2);
    let pa = a.predict(&x, t, &zero_cond(1)).unwrap();
    assert_eq!(pa.data(), a.predict(&x, t, &zero_cond(1)).unwrap().data());
    assert_eq!(pa.data(), b.predict(&x, t, &zero_cond(1)).unwrap().data());
    assert_ne!(pa.data(), c.predict(&x, t, &zero_cond(1)).unwrap().data());
}

#[test]
fn shape_and_family_errors() {
    let p = new_policy(Family::Flow, 0);
    assert!(p.predict(&column(0.0), NoiseTime::Level(3), &zero_cond(1)).is_err());
    assert!(p.predict(&Tensor::zeros(&[1, 2, 3]), NoiseTime::Continuous(0.5), &zero_cond(1)).is_err());
    assert!(p.predict(&column(0.0), NoiseTime::Continuous(0.5), &zero_cond(2)).is_err());
    let diff = NoiseSchedule::Diffusion(DdpmSchedule::squared_cosine(10).unwrap());
    assert!(sample_unguided(&p.conditioned(&zero_cond(1)), &diff, &[1, 3], &[0]).is_err());
    assert!(Policy::new(config(Family::Flow), identity(COND), identity(12), 0).is_err());
    let mut q = new_policy(Family::Flow, 0);
    assert!(train_policy(&mut q, &[], &train_config(1), |_, _| {}).is_err());
}

#[test]
fn sampled_chunks_have_the_configured_shape() {
    let p = new_policy(Family::Diffusion, 0);
    let cond = zero_cond(4);
    let out = sample_unguided(&p.conditioned(&cond), p.schedule(), &p.chunk_shape(), &[1, 2, 3, 4]).unwrap();
    assert_eq!(out.shape(), &[4, 1, 3]);
}

#[test]
fn diffusion_net_learns_the_optimal_denoiser() {
    let p = trained(Family::Diffusion);
    let NoiseSchedule::Diffusion(s) = p.schedule() else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut sq = 0.0;
    let n = 2000;
    for _ in 0..n {
        let level = rng.random_range(0..s.num_steps());
        let ab = s.alpha_bars()[level];
        let x0 = MU + SD * rng.sample::<f64, _>(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        let x = ab.sqrt() * x0 + (1.0 - ab).sqrt() * e;
        let oracle = (1.0 - ab).sqrt() * (x - ab.sqrt() * MU) / (ab * SD * SD + 1.0 - ab);
        let pred = p.predict(&column(x), NoiseTime::Level(level), &zero_cond(1)).unwrap();
        sq += (pred.data()[0] - oracle).powi(2);
    }
    let rms = (sq / n as f64).sqrt();
    assert!(rms < 0.05, "rms {rms}");
}

fn flow_velocity_rms(p: &Policy) -> f64 {
    let spec = gaussian_spec();
    let mut sq = 0.0;
    let mut count = 0;
    for i in 1..10 {
        let t = i as f64 / 10.0;
        let centre = (1.0 - t) * MU;
        let spread = ((1.0 - t).powi(2) * SD * SD + t * t).sqrt();
        for j in -4..=4 {
            let x = centre + 0.5 * j as f64 * spread;
            let pred = p.predict(&column(x), NoiseTime::Continuous(t), &zero_cond(1)).unwrap();
            sq += (pred.data()[0] - marginal_velocity_oracle(&spec, x, t).unwrap()).powi(2);
            count += 1;
        }
    }
    (sq / count as f64).sqrt()
}

#[test]
fn flow_net_learns_the_marginal_velocity() {
    let rms = flow_velocity_rms(trained(Family::Flow));
    assert!(rms < 0.1, "rms {rms}");
}

#[test]
fn flow_velocity_error_falls_with_training() {
    let data = gaussian_samples(2000, 8);
    let mut p = new_policy(Family::Flow, 9);
    let mut errors = vec![flow_velocity_rms(&p)];
    for epochs in [5, 20, 60] {
        train_policy(&mut p, &data, &train_config(epochs), |_, _| {}).unwrap();
        errors.push(flow_velocity_rms(&p));
    }
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
}

#[test]
fn flow_samples_match_the_target_moments() {
    let p = trained(Family::Flow);
    let n = 10_000;
    let seeds: Vec<u64> = (0..n as u64).collect();
    let cond = zero_cond(n);
    let out = sample_unguided(&p.conditioned(&cond), p.schedule(), &p.chunk_shape(), &seeds).unwrap();
    let xs: Vec<f64> = out.data().iter().step_by(3).copied().collect();
    let m = stats::mean(&xs);
    let v = stats::variance(&xs);
    let se_mean = SD / (n as f64).sqrt();
    let se_var = SD * SD * (2.0 / (n as f64 - 1.0)).sqrt();
    // MC error plus the ten-step Euler bias of even the exact field
    let exact = {
        let spec = gaussian_spec();
        let flow = NoiseSchedule::Flow(FmPath::new(10).unwrap());
        tactile_guidance::mixture::sample_mixture(&spec, &flow, None, n, 1).unwrap()
    };
    let (em, ev) = (stats::mean(&exact), stats::variance(&exact));
    assert!((m - em).abs() < 3.0 * se_mean * 2f64.sqrt() + 0.01, "mean {m} vs {em}");
    assert!((v - ev).abs() < 3.0 * se_var * 2f64.sqrt() + 0.01, "variance {v} vs {ev}");
}

#[test]
fn a_single_repeated_sample_is_memorized() {
    for family in [Family::Diffusion, Family::Flow] {
        let one = gaussian_samples(1, 4).pop().unwrap();
        let data = vec![one; 256];
        let mut p = new_policy(family, 1);
        let curve = train_policy(&mut p, &data, &train_config(600), |_, _| {}).unwrap();
        let head: Vec<f64> = curve[..20].iter().map(|c| c.1).collect();
        let tail: Vec<f64> = curve[curve.len() - 50..].iter().map(|c| c.1).collect();
        let (start, end) = (stats::mean(&head), stats::mean(&tail));
        assert!(end < 0.05 * start, "{family:?}: {start} -> {end}");
    }
}

#[test]
fn training_is_seed_deterministic_and_checkpoints_round_trip() {
    let data = gaussian_samples(500, 5);
    let run = || {
        let mut p = new_policy(Family::Diffusion, 2);
        let curve = train_policy(&mut p, &data, &train_config(3), |_, _| {}).unwrap();
        (p, curve)
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(ca, cb);
    let x = column(0.3);
    let t = NoiseTime::Level(40);
    let pa = a.predict(&x, t, &zero_cond(1)).unwrap();
    assert_eq!(pa.data(), b.predict(&x, t, &zero_cond(1)).unwrap().data());

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let back = Policy::load(dir.path()).unwrap();
    assert_eq!(back.config, a.config);
    assert_eq!(back.trained_steps(), a.trained_steps());
    assert_eq!(back.predict(&x, t, &zero_cond(1)).unwrap().data(), pa.data());
}

#[test]
fn time_embedding_is_bounded_and_distinct() {
    let s = NoiseSchedule::Flow(FmPath::new(10).unwrap());
    let a = time_embedding(NoiseTime::Continuous(0.2), &s, 8).unwrap();
    let b = time_embedding(NoiseTime::Continuous(0.3), &s, 8).unwrap();
    assert_eq!(a.len(), 16);
    assert!(a.iter().all(|v| v.abs() <= 1.0));
    assert_ne!(a, b);
    assert!(time_embedding(NoiseTime::Level(2), &s, 8).is_err());
}

#[test]
fn loss_falls_during_training() {
    let data = gaussian_samples(1000, 6);
    let mut p = new_policy(Family::Flow, 4);
    let curve = train_policy(&mut p, &data, &train_config(40), |_, _| {}).unwrap();
    let head = stats::mean(&curve[..10].iter().map(|c| c.1).collect::<Vec<_>>());
    let tail = stats::mean(&curve[curve.len() - 10..].iter().map(|c| c.1).collect::<Vec<_>>());
    assert!(tail < head, "{head} -> {tail}");
    assert_eq!(p.trained_steps(), curve.len());
}
