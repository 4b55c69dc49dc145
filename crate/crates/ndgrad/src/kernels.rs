//! Raw slice kernels. All reductions accumulate in `f64`.

use crate::Real;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let av = av.to_f64();
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(b_row) {
                *s += av * bv.to_f64();
            }
        }
        out.extend(acc.iter().map(|&x| T::from_f64(x)));
    }
    out
}

/// `da[m×k] += dc[m×n] · bᵀ`.
pub(crate) fn matmul_grad_a<T: Real>(
    dc: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    da: &mut [T],
) {
    let mut bt = vec![0.0f64; n * k];
    for kk in 0..k {
        for j in 0..n {
            bt[j * k + kk] = b[kk * n + j].to_f64();
        }
    }
    let mut acc = vec![0.0f64; k];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for (j, &g) in dc[i * n..(i + 1) * n].iter().enumerate() {
            let g = g.to_f64();
            if g == 0.0 {
                continue;
            }
            for (s, &bv) in acc.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                *s += g * bv;
            }
        }
        for (slot, &x) in da[i * k..(i + 1) * k].iter_mut().zip(&acc) {
            *slot = T::from_f64(slot.to_f64() + x);
        }
    }
}

/// Dot product in `f64` with independent partial sums.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut s = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            s[l] += x[l].to_f64() * y[l].to_f64();
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x.to_f64() * y.to_f64())
        .sum();
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// `db[k×n] += aᵀ · dc[m×n]`.
pub(crate) fn matmul_grad_b<T: Real>(
    a: &[T],
    dc: &[T],
    m: usize,
    k: usize,
    n: usize,
    db: &mut [T],
) {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk].to_f64();
            if av == 0.0 {
                continue;
            }
            let acc_row = &mut acc[kk * n..(kk + 1) * n];
            for (s, &g) in acc_row.iter_mut().zip(dc_row) {
                *s += av * g.to_f64();
            }
        }
    }
    for (slot, x) in db.iter_mut().zip(acc) {
        *slot = T::from_f64(slot.to_f64() + x);
    }
}

/// Row-wise `log_softmax` over the last axis of width `cols`.
pub(crate) fn log_softmax<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row
            .iter()
            .map(|v| (v.to_f64() - max).exp())
            .sum::<f64>()
            .ln();
        out.extend(row.iter().map(|v| T::from_f64(v.to_f64() - max - lse)));
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

// `1 - 2 / (e^{2u} + 1)`: one `exp`, noticeably cheaper than libm's `tanh`.
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Layer norm over rows of width `d`. Returns the output and per-row `1/σ`.
pub(crate) fn layer_norm<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
) -> (Vec<T>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    for row in x.chunks(d) {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|v| {
                let c = v.to_f64() - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        for ((v, g), b) in row.iter().zip(gamma).zip(beta) {
            let xhat = (v.to_f64() - mean) * r;
            out.push(T::from_f64(xhat * g.to_f64() + b.to_f64()));
        }
    }
    (out, rstd)
}

pub(crate) struct LayerNormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

pub(crate) fn layer_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    rstd: &[f64],
    dy: &[T],
    d: usize,
) -> LayerNormGrads<T> {
    let mut dx = Vec::with_capacity(x.len());
    let mut dgamma = vec![0.0f64; d];
    let mut dbeta = vec![0.0f64; d];
    let mut xhat = vec![0.0f64; d];
    let mut dxhat = vec![0.0f64; d];
    for (r, (row, dy_row)) in x.chunks(d).zip(dy.chunks(d)).enumerate() {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let rs = rstd[r];
        for j in 0..d {
            xhat[j] = (row[j].to_f64() - mean) * rs;
            let g = dy_row[j].to_f64();
            dxhat[j] = g * gamma[j].to_f64();
            dgamma[j] += g * xhat[j];
            dbeta[j] += g;
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx.push(T::from_f64(
                rs * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat),
            ));
        }
    }
    LayerNormGrads { dx, dgamma, dbeta }
}

/// Causal multi-head attention over packed sequences.
///
/// `qkv` is `[N × 3d]` with query, key and value blocks side by side; rows of
/// each segment `(start, len)` attend only to earlier rows of the same
/// segment. Returns the `[N × d]` output and the attention probabilities laid
/// out per segment, per head, as lower-triangular `len × len` blocks.
pub(crate) fn causal_attention<T: Real>(
    qkv: &[T],
    segments: &[(usize, usize)],
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let w = 3 * d;
    let n_rows = qkv.len() / w;
    let mut out = vec![T::ZERO; n_rows * d];
    let mut probs = Vec::with_capacity(segments.iter().map(|&(_, l)| heads * l * l).sum());
    let mut scores = Vec::new();
    let mut acc = vec![0.0f64; dh];
    for &(start, len) in segments {
        for h in 0..heads {
            let qo = h * dh;
            let ko = d + h * dh;
            let vo = 2 * d + h * dh;
            let base = probs.len();
            probs.resize(base + len * len, 0.0);
            for i in 0..len {
                let q = &qkv[(start + i) * w + qo..(start + i) * w + qo + dh];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let k = &qkv[(start + j) * w + ko..(start + j) * w + ko + dh];
                    let s = dot(q, k) * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let prow = &mut probs[base + i * len..base + i * len + len];
                for (j, s) in scores.iter().enumerate() {
                    prow[j] = s / total;
                }
                let orow = &mut out[(start + i) * d + qo..(start + i) * d + qo + dh];
                acc.iter_mut().for_each(|x| *x = 0.0);
                for j in 0..=i {
                    let p = prow[j];
                    let v = &qkv[(start + j) * w + vo..(start + j) * w + vo + dh];
                    for (a, &vv) in acc.iter_mut().zip(v) {
                        *a += p * vv.to_f64();
                    }
                }
                for (o, &a) in orow.iter_mut().zip(&acc) {
                    *o = T::from_f64(a);
                }
            }
        }
    }
    (out, probs)
}

/// Gradient of [`causal_attention`] with respect to `qkv`, accumulated into `dqkv`.
pub(crate) fn causal_attention_backward<T: Real>(
    qkv: &[T],
    probs: &[f64],
    dout: &[T],
    segments: &[(usize, usize)],
    d: usize,
    heads: usize,
    dqkv: &mut [T],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let w = 3 * d;
    let mut base = 0;
    let mut dq = vec![0.0f64; dh];
    for &(start, len) in segments {
        for h in 0..heads {
            let qo = h * dh;
            let ko = d + h * dh;
            let vo = 2 * d + h * dh;
            let mut dk = vec![0.0f64; len * dh];
            let mut dv = vec![0.0f64; len * dh];
            let mut dp = vec![0.0f64; len];
            for i in 0..len {
                let prow = &probs[base + i * len..base + i * len + len];
                let go = &dout[(start + i) * d + qo..(start + i) * d + qo + dh];
                // dP_ij = dO_i · V_j, dV_j += P_ij dO_i
                let mut weighted = 0.0;
                for j in 0..=i {
                    let v = &qkv[(start + j) * w + vo..(start + j) * w + vo + dh];
                    let g = dot(go, v);
                    dp[j] = g;
                    weighted += prow[j] * g;
                    let p = prow[j];
                    for (slot, &gg) in dv[j * dh..(j + 1) * dh].iter_mut().zip(go) {
                        *slot += p * gg.to_f64();
                    }
                }
                dq.iter_mut().for_each(|x| *x = 0.0);
                let q = &qkv[(start + i) * w + qo..(start + i) * w + qo + dh];
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let k = &qkv[(start + j) * w + ko..(start + j) * w + ko + dh];
                    for (slot, &kk) in dq.iter_mut().zip(k) {
                        *slot += ds * kk.to_f64();
                    }
                    for (slot, &qq) in dk[j * dh..(j + 1) * dh].iter_mut().zip(q) {
                        *slot += ds * qq.to_f64();
                    }
                }
                let dst = &mut dqkv[(start + i) * w + qo..(start + i) * w + qo + dh];
                for (slot, &g) in dst.iter_mut().zip(&dq) {
                    *slot = T::from_f64(slot.to_f64() + g);
                }
            }
            for j in 0..len {
                let dst = &mut dqkv[(start + j) * w + ko..(start + j) * w + ko + dh];
                for (slot, &g) in dst.iter_mut().zip(&dk[j * dh..(j + 1) * dh]) {
                    *slot = T::from_f64(slot.to_f64() + g);
                }
                let dst = &mut dqkv[(start + j) * w + vo..(start + j) * w + vo + dh];
                for (slot, &g) in dst.iter_mut().zip(&dv[j * dh..(j + 1) * dh]) {
                    *slot = T::from_f64(slot.to_f64() + g);
                }
            }
            base += len * len;
        }
    }
}
