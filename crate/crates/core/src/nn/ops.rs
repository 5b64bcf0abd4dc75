//! Row-major kernels for the predictor with their reverse-mode counterparts.
//!
//! Matrices are flat slices; `n` is always the row count. Backward functions
//! *accumulate* into parameter gradients and into `dx`.

use crate::scalar::{Scalar, View};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct NormTape<S> {
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
}

pub fn layer_norm<S: Scalar>(x: &[S], d: usize, gain: &[S], bias: &[S], out: &mut [S]) -> NormTape<S> {
    let n = x.len() / d;
    let eps = S::lit(LN_EPS);
    let inv_d = S::one() / S::from_usize(d).unwrap();
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n);
    for ((row, xh), o) in x.chunks_exact(d).zip(xhat.chunks_exact_mut(d)).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let is = S::one() / (var + eps).sqrt();
        for i in 0..d {
            xh[i] = (row[i] - mean) * is;
            o[i] = xh[i] * gain[i] + bias[i];
        }
        inv_std.push(is);
    }
    NormTape { xhat, inv_std }
}

pub fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    d: usize,
    tape: &NormTape<S>,
    gain: &[S],
    dgain: &mut [S],
    dbias: &mut [S],
    dx: &mut [S],
) {
    let inv_d = S::one() / S::from_usize(d).unwrap();
    let mut dxh = vec![S::zero(); d];
    for (r, ((dyr, xh), dxr)) in dy.chunks_exact(d).zip(tape.xhat.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate() {
        let mut mean_dxh = S::zero();
        let mut mean_dxh_xh = S::zero();
        for i in 0..d {
            dgain[i] += dyr[i] * xh[i];
            dbias[i] += dyr[i];
            dxh[i] = dyr[i] * gain[i];
            mean_dxh += dxh[i];
            mean_dxh_xh += dxh[i] * xh[i];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        let is = tape.inv_std[r];
        for i in 0..d {
            dxr[i] += is * (dxh[i] - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
}

/// `out = x·w (+ bias)` with `x` n×k and `w` k×m.
pub fn linear<S: Scalar>(x: &[S], k: usize, w: &[S], m: usize, bias: Option<&[S]>, out: &mut [S]) {
    let n = x.len() / k;
    match bias {
        Some(b) => {
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(b);
            }
            S::gemm(n, k, m, S::one(), View::rows(x, k), View::rows(w, m), S::one(), out, m);
        }
        None => S::gemm(n, k, m, S::one(), View::rows(x, k), View::rows(w, m), S::zero(), out, m),
    }
}

/// Accumulates `dw += xᵀ·dy`, `db += Σ dy` and `dx += dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<S: Scalar>(
    x: &[S],
    k: usize,
    w: &[S],
    m: usize,
    dy: &[S],
    dw: &mut [S],
    db: Option<&mut [S]>,
    dx: Option<&mut [S]>,
) {
    let n = x.len() / k;
    S::gemm(k, n, m, S::one(), View::rows(x, k).t(), View::rows(dy, m), S::one(), dw, m);
    if let Some(db) = db {
        for row in dy.chunks_exact(m) {
            for (b, &g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
    }
    if let Some(dx) = dx {
        S::gemm(n, m, k, S::one(), View::rows(dy, m), View::rows(w, m).t(), S::one(), dx, k);
    }
}

fn gelu_consts<S: Scalar>() -> (S, S) {
    (S::lit((2.0 / std::f64::consts::PI).sqrt()), S::lit(0.044715))
}

/// tanh approximation of GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    let (c, a) = gelu_consts::<S>();
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let (c, a) = gelu_consts::<S>();
    let half = S::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}

pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = S::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q` is n×d, `k` and `v` are m×d; head `h` uses columns `h·dk..(h+1)·dk`.
/// Writes per-head weights into `probs` (heads×n×m) and the concatenated
/// head outputs into `ctx` (n×d).
pub fn attention<S: Scalar>(q: &[S], k: &[S], v: &[S], d: usize, heads: usize, probs: &mut [S], ctx: &mut [S]) {
    let n = q.len() / d;
    let m = k.len() / d;
    let dk = d / heads;
    let scale = S::one() / S::from_usize(dk).unwrap().sqrt();
    for h in 0..heads {
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        let off = h * dk;
        S::gemm(n, dk, m, scale, View::rows(&q[off..], d), View::rows(&k[off..], d).t(), S::zero(), p, m);
        for row in p.chunks_exact_mut(m) {
            softmax_in_place(row);
        }
        S::gemm(n, m, dk, S::one(), View::rows(p, m), View::rows(&v[off..], d), S::zero(), &mut ctx[off..], d);
    }
}

/// Backward of [`attention`]; accumulates into `dq`, `dk` and `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dctx: &[S],
    d: usize,
    heads: usize,
    dq: &mut [S],
    dkey: &mut [S],
    dv: &mut [S],
) {
    let n = q.len() / d;
    let m = k.len() / d;
    let dk = d / heads;
    let scale = S::one() / S::from_usize(dk).unwrap().sqrt();
    let mut ds = vec![S::zero(); n * m];
    for h in 0..heads {
        let p = &probs[h * n * m..(h + 1) * n * m];
        let off = h * dk;
        // dV_h += Pᵀ·dctx_h
        S::gemm(m, n, dk, S::one(), View::rows(p, m).t(), View::rows(&dctx[off..], d), S::one(), &mut dv[off..], d);
        // dP = dctx_h·V_hᵀ
        S::gemm(n, dk, m, S::one(), View::rows(&dctx[off..], d), View::rows(&v[off..], d).t(), S::zero(), &mut ds, m);
        for (dsr, pr) in ds.chunks_exact_mut(m).zip(p.chunks_exact(m)) {
            let dot: S = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
            for (x, &pv) in dsr.iter_mut().zip(pr) {
                *x = pv * (*x - dot) * scale;
            }
        }
        // dQ_h += dS·K_h ; dK_h += dSᵀ·Q_h
        S::gemm(n, m, dk, S::one(), View::rows(&ds, m), View::rows(&k[off..], d), S::one(), &mut dq[off..], d);
        S::gemm(m, n, dk, S::one(), View::rows(&ds, m).t(), View::rows(&q[off..], d), S::one(), &mut dkey[off..], d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -1.0, -0.2, 0.0, 0.4, 1.5, 4.0] {
            assert!((gelu_grad(x) - finite_diff(gelu, x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut r = vec![1000.0, 999.0, -5.0f64];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(r[0] > r[1] && r[1] > r[2]);
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let d = 5;
        let x: Vec<f64> = (0..10).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let gain: Vec<f64> = (0..d).map(|i| 0.5 + i as f64 * 0.2).collect();
        let bias = vec![0.1; d];
        let w: Vec<f64> = (0..10).map(|i| (i as f64).cos()).collect();
        let loss = |x: &[f64]| {
            let mut out = vec![0.0; 10];
            layer_norm(x, d, &gain, &bias, &mut out);
            out.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut out = vec![0.0; 10];
        let tape = layer_norm(&x, d, &gain, &bias, &mut out);
        let mut dx = vec![0.0; 10];
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        layer_norm_backward(&w, d, &tape, &gain, &mut dg, &mut db, &mut dx);
        for i in 0..10 {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let num = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((num - dx[i]).abs() < 1e-7, "i={i}: {num} vs {}", dx[i]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let d = 4;
        let q: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..20).map(|i| (i as f64 * 0.11).cos()).collect();
        let v = k.clone();
        let mut probs = vec![0.0; 2 * 3 * 5];
        let mut ctx = vec![0.0; 12];
        attention(&q, &k, &v, d, 2, &mut probs, &mut ctx);
        for row in probs.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
