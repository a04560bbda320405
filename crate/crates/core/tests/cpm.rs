use minitensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tactile_guidance::cpm::*;
use tactile_guidance::data::{chunk_samples, Normalizer};
use tactile_guidance::pose::ActionParam;
use tactile_guidance::schedulers::*;
use tactile_guidance::sim::{collect_demonstrations, ContactSim};

const H: usize = 8;
const D: usize = 3;

fn identity(width: usize) -> Normalizer {
    Normalizer {
        shift: vec![0.0; width],
        scale: vec![1.0; width],
    }
}

fn small() -> CpmConfig {
    CpmConfig {
        model_dim: 32,
        ffn_dim: 64,
        encoder_hidden: 48,
        embed_dim: 32,
        conv_channels: 16,
        action_hidden: [64, 48],
        ..Default::default()
    }
}

fn model(config: CpmConfig, v: usize, t: usize, seed: u64) -> Cpm {
    Cpm::new(config, identity(v), identity(t), identity(D), H, seed).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    standard_normal(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn norms(x: &Tensor) -> Vec<f64> {
    let w = x.shape()[1];
    x.data().chunks(w).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

#[test]
fn embeddings_have_unit_norm() {
    let cpm = model(CpmConfig::default(), 9, 10, 1);
    for seed in 0..5 {
        let o = cpm.encode_observation(&randn(&[7, 9], seed), &randn(&[7, 10], seed + 100)).unwrap();
        let a = cpm.encode_action(&randn(&[7, H, D], seed + 200)).unwrap();
        for n in norms(&o).into_iter().chain(norms(&a)) {
            assert!((n - 1.0).abs() < 1e-12);
        }
        let again = cpm.encode_action(&randn(&[7, H, D], seed + 200)).unwrap();
        assert_eq!(a.data(), again.data());
    }
}

#[test]
fn encoders_are_modality_specific() {
    let cpm = model(small(), 6, 6, 2);
    let (v, t) = (randn(&[3, 6], 1), randn(&[3, 6], 2));
    let a = cpm.encode_observation(&v, &t).unwrap();
    let b = cpm.encode_observation(&t, &v).unwrap();
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-3, "{diff}");
}

#[test]
fn zeroed_encoders_on_zero_inputs_stay_finite() {
    let mut cpm = model(CpmConfig::default(), 9, 10, 3);
    cpm.zero_modality_encoders();
    cpm.zero_action_encoder();
    let o = cpm.encode_observation(&Tensor::zeros(&[2, 9]), &Tensor::zeros(&[2, 10])).unwrap();
    let a = cpm.encode_action(&Tensor::zeros(&[2, H, D])).unwrap();
    assert!(o.all_finite() && a.all_finite());
    for n in norms(&o).into_iter().chain(norms(&a)) {
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn scores_are_bounded_cosines() {
    let cpm = model(small(), 9, 10, 4);
    let (v, t, a) = (randn(&[6, 9], 1), randn(&[6, 10], 2), randn(&[6, H, D], 3));
    let s = cpm.feasibility_score(&v, &t, &a).unwrap();
    let m = cpm.score_matrix(&v, &t, &a).unwrap();
    for (i, si) in s.iter().enumerate() {
        assert!(si.abs() <= 1.0 + 1e-9);
        assert!((m.data()[i * 6 + i] - si).abs() < 1e-12);
    }
    assert!(cpm.feasibility_score(&v, &t, &randn(&[5, H, D], 3)).is_err());
    assert!(cpm.encode_action(&randn(&[2, H, 4], 3)).is_err());
}

/// Direct evaluation of the two-sided softmax cross-entropy.
fn info_nce_oracle(o: &[Vec<f64>], a: &[Vec<f64>], tau: f64) -> f64 {
    let m = o.len();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let s: Vec<Vec<f64>> = o.iter().map(|oi| a.iter().map(|aj| dot(oi, aj) / tau).collect()).collect();
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..m {
        let zr: f64 = (0..m).map(|j| s[i][j].exp()).sum();
        let zc: f64 = (0..m).map(|j| s[j][i].exp()).sum();
        rows += -(s[i][i].exp() / zr).ln();
        cols += -(s[i][i].exp() / zc).ln();
    }
    0.5 * (rows + cols) / m as f64
}

fn loss_of(o: &[Vec<f64>], a: &[Vec<f64>], tau: f64) -> f64 {
    let tape = Tape::new();
    let e = o[0].len();
    let flat = |x: &[Vec<f64>]| Tensor::new(&[x.len(), e], x.concat()).unwrap();
    let ov = tape.constant(flat(o));
    let av = tape.constant(flat(a));
    let lt = tape.constant(Tensor::scalar(tau.ln()));
    symmetric_info_nce(ov, av, lt).unwrap().value().item().unwrap()
}

fn unit_rows(m: usize, e: usize, seed: u64) -> Vec<Vec<f64>> {
    let x = randn(&[m, e], seed);
    x.data()
        .chunks(e)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

#[test]
fn loss_examples() {
    let one = unit_rows(1, 5, 1);
    assert_eq!(loss_of(&one, &unit_rows(1, 5, 2), 0.1), 0.0);
    let basis: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
    let want = (1.0 + 3.0 * (-1.0f64).exp()).ln();
    assert!((info_nce_oracle(&basis, &basis, 1.0) - want).abs() < 1e-12);
    assert!((loss_of(&basis, &basis, 1.0) - want).abs() < 1e-12);
    assert!((want - 0.743668).abs() < 1e-6);
    let empty = Tape::new();
    let z = empty.constant(Tensor::zeros(&[0, 3]));
    assert!(symmetric_info_nce(z, z, empty.constant(Tensor::scalar(0.0))).is_err());
}

#[test]
fn model_loss_on_a_single_pair_is_zero() {
    let cpm = model(small(), 9, 10, 5);
    let batch = ContrastiveBatch {
        visual: randn(&[1, 9], 1),
        tactile: randn(&[1, 10], 2),
        actions: randn(&[1, H, D], 3),
        levels: vec![0],
    };
    assert_eq!(cpm.contrastive_loss(&batch).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn loss_matches_oracle_and_ignores_pair_order(m in 1usize..8, e in 2usize..10, tau in 0.05f64..2.0, seed in any::<u64>(), shift in 0usize..8) {
        let o = unit_rows(m, e, seed);
        let a = unit_rows(m, e, seed ^ 0xabcd);
        let l = loss_of(&o, &a, tau);
        prop_assert!(l >= 0.0);
        prop_assert!((l - info_nce_oracle(&o, &a, tau)).abs() < 1e-10 * (1.0 + l));
        let mut po = o.clone();
        let mut pa = a.clone();
        po.rotate_left(shift % m);
        pa.rotate_left(shift % m);
        po.swap(0, m - 1);
        pa.swap(0, m - 1);
        prop_assert!((loss_of(&po, &pa, tau) - l).abs() < 1e-12 * (1.0 + l));
    }
}

/// Central differences of `sum_i s_i` through the public scoring call.
fn public_fd(cpm: &Cpm, v: &Tensor, t: &Tensor, a: &Tensor, h: f64) -> Vec<f64> {
    let total = |x: &Tensor| cpm.feasibility_score(v, t, x).unwrap().iter().sum::<f64>();
    (0..a.len())
        .map(|i| {
            let mut plus = a.data().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let p = total(&Tensor::new(a.shape(), plus).unwrap());
            let m = total(&Tensor::new(a.shape(), minus).unwrap());
            (p - m) / (2.0 * h)
        })
        .collect()
}

#[test]
fn score_gradient_matches_finite_differences() {
    let cpm = model(CpmConfig::default(), 9, 10, 6);
    for seed in 0..5 {
        let (v, t, a) = (randn(&[2, 9], seed), randn(&[2, 10], seed + 10), randn(&[2, H, D], seed + 20));
        let g = cpm.score_gradient(&v, &t, &a).unwrap();
        assert_eq!(g.shape(), a.shape());
        let fd = public_fd(&cpm, &v, &t, &a, 1e-5);
        let num: f64 = g.data().iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|y| y * y).sum::<f64>().sqrt();
        assert!(num / den < 1e-5, "{}", num / den);
        let coordinate = cpm.score_path_grad_check(&v, &t, &a, 1e-5).unwrap();
        assert!(coordinate < 1e-5, "{coordinate}");
    }
}

#[test]
fn score_changes_to_first_order_along_the_gradient() {
    let cpm = model(CpmConfig::default(), 9, 10, 7);
    let (v, t, a) = (randn(&[1, 9], 1), randn(&[1, 10], 2), randn(&[1, H, D], 3));
    let g = cpm.score_gradient(&v, &t, &a).unwrap();
    let s0 = cpm.feasibility_score(&v, &t, &a).unwrap()[0];
    let eps = 1e-9;
    let s1 = cpm.feasibility_score(&v, &t, &a.scale(1.0 + eps)).unwrap()[0];
    let predicted: f64 = g.data().iter().zip(a.data()).map(|(gi, ai)| gi * ai * eps).sum();
    assert!(((s1 - s0) - predicted).abs() < 1e-3 * predicted.abs() + 1e-15, "{} vs {predicted}", s1 - s0);
}

fn scale_param(cpm: &mut Cpm, name: &str, c: f64) {
    let store = cpm.params_mut();
    let id = store.id(name).unwrap();
    let scaled = store.get(id).scale(c);
    store.set(id, scaled).unwrap();
}

#[test]
fn scores_ignore_the_scale_of_pre_norm_activations() {
    let mut cpm = model(small(), 9, 10, 8);
    let (v, t, a) = (randn(&[4, 9], 1), randn(&[4, 10], 2), randn(&[4, H, D], 3));
    let before = cpm.feasibility_score(&v, &t, &a).unwrap();
    for (head, c) in [("cpm.obs_head", 3.7), ("cpm.action_head", 0.2)] {
        scale_param(&mut cpm, &format!("{head}.weight"), c);
        scale_param(&mut cpm, &format!("{head}.bias"), c);
    }
    let after = cpm.feasibility_score(&v, &t, &a).unwrap();
    for (x, y) in before.iter().zip(&after) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn temperature_must_stay_positive() {
    let mut cpm = model(small(), 9, 10, 9);
    assert!((cpm.temperature() - 0.1).abs() < 1e-12);
    assert!(cpm.set_temperature(0.0).is_err());
    assert!(cpm.set_temperature(f64::NAN).is_err());
    cpm.set_temperature(0.5).unwrap();
    assert!((cpm.temperature() - 0.5).abs() < 1e-12);
    let bad = CpmConfig {
        temperature_init: -1.0,
        ..small()
    };
    assert!(Cpm::new(bad, identity(9), identity(10), identity(D), H, 0).is_err());
}

fn toy_samples(n: usize, seed: u64) -> Vec<tactile_guidance::data::ChunkSample> {
    let eps = collect_demonstrations(&ContactSim::default(), n, seed).unwrap();
    chunk_samples(&eps, H, ActionParam::Planar).unwrap()
}

#[test]
fn level_zero_batches_hold_clean_actions() {
    let samples = toy_samples(2, 1);
    let picked: Vec<_> = samples.iter().take(6).collect();
    let norm = Normalizer::fit_range(&samples.iter().map(|s| s.actions.as_slice()).collect::<Vec<_>>(), D);
    let schedule = NoiseSchedule::Diffusion(DdpmSchedule::squared_cosine(100).unwrap());
    let clean = GeometricNoiseSampler::clean();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = ContrastiveBatch::assemble(&picked, &norm, [H, D], &schedule, LevelChoice::Sampled(&clean), &mut rng).unwrap();
    assert!(b.levels.iter().all(|&l| l == 0));
    for (row, s) in b.actions.data().chunks(H * D).zip(&picked) {
        assert_eq!(row, norm.apply(&s.actions).as_slice());
    }
    let b = ContrastiveBatch::assemble(&picked, &norm, [H, D], &schedule, LevelChoice::Fixed(5), &mut rng).unwrap();
    assert!(b.levels.iter().all(|&l| l == 5));
    assert_ne!(&b.actions.data()[..H * D], norm.apply(&picked[0].actions).as_slice());
}

#[test]
fn training_lowers_the_loss_and_round_trips() {
    let samples = toy_samples(10, 2);
    let norm = Normalizer::fit_range(&samples.iter().map(|s| s.actions.as_slice()).collect::<Vec<_>>(), D);
    let mut cpm = Cpm::for_samples(small(), &samples, norm, H, 3).unwrap();
    let schedule = NoiseSchedule::Flow(FmPath::new(10).unwrap());
    let cfg = CpmTrainConfig {
        batch_size: 32,
        epochs: 30,
        warmup_steps: 10,
        ..Default::default()
    };
    let sampler = cfg.sampler(3).unwrap();
    let log = train_cpm(&mut cpm, &samples, &schedule, &sampler, &cfg, |_| {}).unwrap();
    assert!(log.iter().all(|r| r.temperature > 0.0 && r.temperature.is_finite()));
    let mean = |r: &[CpmTrainRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&log[..10]), mean(&log[log.len() - 10..]));
    assert!(tail < head, "{head} -> {tail}");
    assert_eq!(cpm.trained_steps(), log.len());

    let dir = tempfile::tempdir().unwrap();
    cpm.save(dir.path()).unwrap();
    let back = Cpm::load(dir.path()).unwrap();
    let s = &samples[..4];
    let v = Tensor::new(&[4, 9], s.iter().flat_map(|x| x.visual.clone()).collect()).unwrap();
    let t = Tensor::new(&[4, 10], s.iter().flat_map(|x| x.tactile.clone()).collect()).unwrap();
    let a = randn(&[4, H, D], 1);
    assert_eq!(
        cpm.feasibility_score(&v, &t, &a).unwrap(),
        back.feasibility_score(&v, &t, &a).unwrap()
    );
    assert_eq!(back.temperature(), cpm.temperature());
}
