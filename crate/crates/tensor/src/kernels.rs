//! Raw numeric kernels shared by forward and backward passes.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// `c (+)= op(a) * op(b)` for row-major buffers. `a` holds an `[m,k]` matrix
/// (stored `[k,m]` when `ta`), `b` holds `[k,n]` (stored `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if m == 1 {
        // a single row needs no packing; `a` is contiguous either way
        gemv(k, n, &a[..k], b, tb, &mut c[..n], beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe in-bounds
    // row-major (or transposed) layouts of exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (+)= a * op(b)` for a row vector `a` of length `k`.
fn gemv(k: usize, n: usize, a: &[f64], b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if beta == 0.0 {
        c.fill(0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
    if tb {
        for (j, cj) in c.iter_mut().enumerate() {
            let row = &b[j * k..(j + 1) * k];
            *cj += a.iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
        }
    } else {
        for (p, &ap) in a.iter().enumerate() {
            let row = &b[p * n..(p + 1) * n];
            c.iter_mut().zip(row).for_each(|(cj, bj)| *cj += ap * bj);
        }
    }
}

enum MatMulForm {
    /// `[m,k] x [k,n]`, possibly with `m` the flattened leading dims.
    Flat { m: usize, k: usize, n: usize },
    Batched { b: usize, m: usize, k: usize, n: usize },
}

fn matmul_form(a: &[usize], b: &[usize]) -> Result<MatMulForm> {
    let bad = || TensorError::shape("matmul", &[a, b]);
    match (a.len(), b.len()) {
        (na, 2) if na >= 2 => {
            let k = a[na - 1];
            if k != b[0] {
                return Err(bad());
            }
            Ok(MatMulForm::Flat {
                m: a[..na - 1].iter().product(),
                k,
                n: b[1],
            })
        }
        (3, 3) => {
            if a[0] != b[0] || a[2] != b[1] {
                return Err(bad());
            }
            Ok(MatMulForm::Batched {
                b: a[0],
                m: a[1],
                k: a[2],
                n: b[2],
            })
        }
        _ => Err(bad()),
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match matmul_form(a.shape(), b.shape())? {
        MatMulForm::Flat { m, k, n } => {
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Ok(Tensor::from_parts(shape, out))
        }
        MatMulForm::Batched { b: batch, m, k, n } => {
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..],
                    false,
                    &b.data()[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    0.0,
                );
            }
            Ok(Tensor::from_parts(vec![batch, m, n], out))
        }
    }
}

/// Gradients of `a @ b` given the upstream gradient of the product. Only
/// the operands flagged in `need` are computed.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, grad: &[f64], need: (bool, bool)) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let form = matmul_form(a.shape(), b.shape()).expect("shapes validated in forward");
    let mut ga = need.0.then(|| vec![0.0; a.len()]);
    let mut gb = need.1.then(|| vec![0.0; b.len()]);
    match form {
        MatMulForm::Flat { m, k, n } => {
            // dA = dC B^T ; dB = A^T dC
            if let Some(ga) = ga.as_mut() {
                gemm(m, n, k, grad, false, b.data(), true, ga, 0.0);
            }
            if let Some(gb) = gb.as_mut() {
                gemm(k, m, n, a.data(), true, grad, false, gb, 0.0);
            }
        }
        MatMulForm::Batched { b: batch, m, k, n } => {
            for i in 0..batch {
                let g = &grad[i * m * n..];
                if let Some(ga) = ga.as_mut() {
                    gemm(m, n, k, g, false, &b.data()[i * k * n..], true, &mut ga[i * m * k..], 0.0);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(k, m, n, &a.data()[i * m * k..], true, g, false, &mut gb[i * k * n..], 0.0);
                }
            }
        }
    }
    (ga, gb)
}

/// Returns `(shape, data)` with output axis `i` taken from input axis `perm[i]`.
pub(crate) fn permute(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn conv1d(x: &Tensor, w: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    let ok = xs.len() == 3
        && ws.len() == 3
        && xs[1] == ws[1]
        && bias.shape() == [ws[0]]
        && xs[2] + 2 * padding >= ws[2];
    if !ok {
        return Err(TensorError::shape("conv1d", &[xs, ws, bias.shape()]));
    }
    let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
    let (c_out, k) = (ws[0], ws[2]);
    let out_len = len + 2 * padding - k + 1;
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());
    let mut out = vec![0.0; batch * c_out * out_len];
    for b in 0..batch {
        for o in 0..c_out {
            let row = &mut out[(b * c_out + o) * out_len..(b * c_out + o + 1) * out_len];
            row.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..c_in {
                let xin = &xd[(b * c_in + c) * len..(b * c_in + c + 1) * len];
                let wk = &wd[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                for (l, slot) in row.iter_mut().enumerate() {
                    for (j, wv) in wk.iter().enumerate() {
                        let pos = l + j;
                        if pos >= padding && pos - padding < len {
                            *slot += wv * xin[pos - padding];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![batch, c_out, out_len], out))
}

/// Input, weight and bias gradients of [`conv1d`]; weight and bias are
/// skipped unless `need_params`.
pub(crate) fn conv1d_backward(x: &Tensor, w: &Tensor, padding: usize, grad: &[f64], need_params: bool) -> (Vec<f64>, Option<(Vec<f64>, Vec<f64>)>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
    let (c_out, k) = (ws[0], ws[2]);
    let out_len = len + 2 * padding - k + 1;
    let (xd, wd) = (x.data(), w.data());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; if need_params { w.len() } else { 0 }];
    let mut gb = vec![0.0; if need_params { c_out } else { 0 }];
    for b in 0..batch {
        for o in 0..c_out {
            let g = &grad[(b * c_out + o) * out_len..(b * c_out + o + 1) * out_len];
            if need_params {
                gb[o] += g.iter().sum::<f64>();
            }
            for c in 0..c_in {
                let xoff = (b * c_in + c) * len;
                let woff = (o * c_in + c) * k;
                for (l, gv) in g.iter().enumerate() {
                    for j in 0..k {
                        let pos = l + j;
                        if pos >= padding && pos - padding < len {
                            let xi = xoff + pos - padding;
                            if need_params {
                                gw[woff + j] += gv * xd[xi];
                            }
                            gx[xi] += gv * wd[woff + j];
                        }
                    }
                }
            }
        }
    }
    (gx, need_params.then_some((gw, gb)))
}
