//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Var;

/// Outcome of a gradient check at one point.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `||autodiff - fd|| / (||fd|| + 1e-12)` in the Euclidean norm.
    pub rel_error: f64,
    /// Max over coordinates of `|autodiff - fd| / (|fd| + 1e-12)`. Blows up
    /// where a true partial crosses zero, so it is reported but not used.
    pub max_coord_rel_error: f64,
    pub worst_index: usize,
    pub autodiff: Tensor,
    pub finite_difference: Tensor,
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.constant(point.clone());
    let y = f(&tape, x)?.value().item()?;
    if !y.is_finite() {
        return Err(TensorError::NonFinite {
            context: "grad_check function value".into(),
        });
    }
    Ok(y)
}

/// Compares the tape gradient of scalar `f` at `point` with central
/// differences of step `step` and returns the full comparison.
pub fn grad_check_report<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !point.all_finite() {
        return Err(TensorError::NonFinite {
            context: "grad_check point".into(),
        });
    }
    let tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true));
    let y = f(&tape, x)?;
    if !y.value().all_finite() {
        return Err(TensorError::NonFinite {
            context: "grad_check function value".into(),
        });
    }
    let autodiff = y.backward()?.get_or_zeros(x);
    if !autodiff.all_finite() {
        return Err(TensorError::NonFinite {
            context: "grad_check autodiff gradient".into(),
        });
    }

    let mut fd = vec![0.0; point.len()];
    let mut probe = point.clone();
    for (i, slot) in fd.iter_mut().enumerate() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * step);
    }

    let mut max_coord_rel_error = 0.0;
    let mut worst_index = 0;
    let mut diff_sq = 0.0;
    let mut fd_sq = 0.0;
    for (i, (a, d)) in autodiff.data().iter().zip(&fd).enumerate() {
        diff_sq += (a - d) * (a - d);
        fd_sq += d * d;
        let rel = (a - d).abs() / (d.abs() + 1e-12);
        if rel > max_coord_rel_error {
            max_coord_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        rel_error: diff_sq.sqrt() / (fd_sq.sqrt() + 1e-12),
        max_coord_rel_error,
        worst_index,
        autodiff,
        finite_difference: Tensor::from_parts(point.shape().to_vec(), fd),
    })
}

/// Norm-relative error between autodiff and central differences.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_report(f, point, step).map(|r| r.rel_error)
}

/// A primitive op wrapped as a vector-valued function of a single input.
pub type OpFn = for<'t> fn(&'t Tape, Var<'t>) -> Result<Var<'t>>;

/// One entry of the per-op gradient suite.
#[derive(Clone)]
pub struct OpCase {
    pub name: &'static str,
    pub input_shape: &'static [usize],
    pub f: OpFn,
    /// Inputs closer than this to zero are resampled (kinks).
    pub min_abs_input: f64,
}

/// Fixed positive weights in `[0.5, 1.5)` used to reduce an op's output to
/// a scalar without collapsing its Jacobian.
pub fn readout_weights(n: usize) -> Tensor {
    let data = (0..n)
        .map(|i| 0.5 + ((i as f64) * 0.618_033_988_749_895 + 0.3).fract())
        .collect();
    Tensor::from_parts(vec![n], data)
}

/// `sum_i w_i y_i` with [`readout_weights`].
pub fn weighted_readout<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    let shape = y.shape();
    let w = readout_weights(shape.iter().product()).reshape(&shape)?;
    Ok(y.mul(tape.constant(w))?.sum())
}

fn split<'t>(x: Var<'t>, first: &[usize], second: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
    let n1: usize = first.iter().product();
    let n2: usize = second.iter().product();
    Ok((
        x.narrow(0, 0, n1)?.reshape(first)?,
        x.narrow(0, n1, n2)?.reshape(second)?,
    ))
}

/// Every primitive op, each exercised through all of its differentiable
/// inputs. Flat inputs are split into operands where an op takes several.
pub fn op_suite() -> Vec<OpCase> {
    fn case(name: &'static str, input_shape: &'static [usize], f: OpFn) -> OpCase {
        OpCase {
            name,
            input_shape,
            f,
            min_abs_input: 0.0,
        }
    }
    let mut cases = vec![
        case("add", &[12], |_, x| {
            let (a, b) = split(x, &[2, 3], &[2, 3])?;
            a.add(b)
        }),
        case("add_broadcast", &[15], |_, x| {
            let (a, b) = split(x, &[4, 3], &[3])?;
            a.add(b)
        }),
        case("sub", &[12], |_, x| {
            let (a, b) = split(x, &[2, 3], &[2, 3])?;
            a.sub(b)
        }),
        case("mul", &[12], |_, x| {
            let (a, b) = split(x, &[2, 3], &[2, 3])?;
            a.mul(b)
        }),
        case("mul_broadcast", &[15], |_, x| {
            let (a, b) = split(x, &[4, 3], &[3])?;
            a.mul(b)
        }),
        case("scale", &[6], |_, x| Ok(x.scale(-2.5))),
        case("neg", &[6], |_, x| Ok(x.neg())),
        case("add_scalar", &[6], |_, x| Ok(x.add_scalar(0.75))),
        case("matmul", &[20], |_, x| {
            let (a, b) = split(x, &[3, 4], &[4, 2])?;
            a.matmul(b)
        }),
        case("matmul_batched", &[40], |_, x| {
            let (a, b) = split(x, &[2, 3, 4], &[2, 4, 2])?;
            a.matmul(b)
        }),
        case("matmul_leading", &[32], |_, x| {
            let (a, b) = split(x, &[2, 3, 4], &[4, 2])?;
            a.matmul(b)
        }),
        case("gelu", &[8], |_, x| Ok(x.gelu())),
        case("tanh", &[8], |_, x| Ok(x.tanh())),
        case("exp", &[8], |_, x| Ok(x.exp())),
        case("ln", &[8], |_, x| Ok(x.mul(x)?.add_scalar(0.5).ln())),
        case("layer_norm", &[3, 5], |_, x| x.layer_norm(1e-5)),
        case("softmax", &[3, 5], |_, x| x.softmax()),
        case("log_softmax", &[3, 5], |_, x| x.log_softmax()),
        case("l2_normalize", &[3, 4], |_, x| x.l2_normalize()),
        case("sum", &[2, 3], |_, x| Ok(x.sum())),
        case("mean", &[2, 3], |_, x| Ok(x.mean())),
        case("sum_axis", &[2, 3, 4], |_, x| x.sum_axis(1)),
        case("mean_axis", &[2, 3, 4], |_, x| x.mean_axis(0)),
        case("reshape", &[2, 3, 4], |_, x| x.reshape(&[4, 6])),
        case("permute", &[2, 3, 4], |_, x| x.permute(&[2, 0, 1])),
        case("transpose", &[2, 3, 4], |_, x| x.transpose()),
        case("narrow", &[2, 5, 3], |_, x| x.narrow(1, 1, 3)),
        case("concat", &[2, 6], |_, x| {
            let a = x.narrow(1, 0, 2)?;
            let b = x.narrow(1, 2, 4)?;
            Var::concat(&[b, a], 1)
        }),
        case("conv1d", &[70], |_, x| {
            let (input, rest) = split(x, &[2, 3, 5], &[40])?;
            let (weight, bias) = split(rest, &[4, 3, 3], &[4])?;
            input.conv1d(weight, bias, 1)
        }),
    ];
    cases.push(OpCase {
        name: "relu",
        input_shape: &[8],
        f: |_, x| Ok(x.relu()),
        min_abs_input: 1e-3,
    });
    cases
}

/// Draws an input for `case` uniformly from `[-1, 1]`.
pub fn sample_case_input(case: &OpCase, rng: &mut impl rand::Rng) -> Tensor {
    let n: usize = case.input_shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..=1.0);
            if v.abs() >= case.min_abs_input {
                break v;
            }
        })
        .collect();
    Tensor::from_parts(case.input_shape.to_vec(), data)
}

/// Grad-checks `case` at `point` through [`weighted_readout`].
pub fn check_case(case: &OpCase, point: &Tensor, step: f64) -> Result<f64> {
    let f = case.f;
    grad_check(|tape, x| weighted_readout(tape, f(tape, x)?), point, step)
}
