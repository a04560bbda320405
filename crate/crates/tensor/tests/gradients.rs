use minitensor::gradcheck::{check_case, op_suite, sample_case_input};
use minitensor::nn::{Activation, Mlp, ParamStore, TransformerEncoderLayer};
use minitensor::{grad_check, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()).unwrap()
}

#[test]
fn every_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in op_suite() {
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let x = sample_case_input(&case, &mut rng);
            worst = worst.max(check_case(&case, &x, 1e-5).unwrap());
        }
        assert!(worst < 1e-6, "{}: max rel error {worst:e}", case.name);
    }
}

#[test]
fn l2_normalize_then_dot_with_unit_vector() {
    let u = Tensor::from_slice(&[0.6, 0.0, -0.8]);
    let err = grad_check(
        |tape, x| Ok(x.l2_normalize()?.mul(tape.constant(u.clone()))?.sum()),
        &Tensor::from_slice(&[0.3, -0.7, 0.5]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn two_layer_mlp_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[5, 16, 3], Activation::Gelu, &mut rng);
    let x = uniform(&mut rng, &[2, 5]);
    let err = grad_check(
        |tape, x| {
            let p = store.bind(tape, false);
            Ok(mlp.forward(&p, x)?.tanh().sum())
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn attention_block_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let layer = TransformerEncoderLayer::new(&mut store, "enc", 8, 2, 16, &mut rng);
    let x = uniform(&mut rng, &[2, 3, 8]);
    let w = uniform(&mut rng, &[2, 3, 8]);
    let err = grad_check(
        |tape, x| {
            let p = store.bind(tape, false);
            Ok(layer.forward(&p, x)?.mul(tape.constant(w.clone()))?.sum())
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn parameter_gradients_flow_through_bound_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[3, 4, 1], Activation::Relu, &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape, true);
    let y = mlp.forward(&p, tape.constant(uniform(&mut rng, &[6, 3]))).unwrap().sum();
    let grads = p.gradients(&y.backward().unwrap());
    assert_eq!(grads.len(), store.len());
    for ((_, param), g) in store.iter().zip(&grads) {
        assert_eq!(param.shape(), g.shape());
    }
    // output bias gradient is the batch size
    assert_eq!(grads[3].data(), &[6.0]);
}
