//! Row-major dense kernels with hand-written backward passes.

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

// Register tile for the dense kernels: TR rows by TC columns of accumulators.
// Each output element is summed in an order that does not depend on the
// tile width, and multiplies and adds are never fused, so the AVX2 and
// portable paths produce the same bits.
const TR: usize = 4;

#[cfg(target_arch = "x86_64")]
fn has_avx2() -> bool {
    std::arch::is_x86_feature_detected!("avx2")
}

/// Runs `$body` as `$impl::<8>` compiled for AVX2 when the CPU has it,
/// otherwise as the portable `$impl::<4>`.
macro_rules! dispatch {
    ($avx:ident, $impl:ident, ($($arg:ident: $ty:ty),*) -> $ret:ty) => {{
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        fn $avx($($arg: $ty),*) -> $ret {
            $impl::<8>($($arg),*)
        }
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { $avx($($arg),*) };
        }
        $impl::<4>($($arg),*)
    }};
}

/// Rows `r0..r0 + TR` of `x` (zero padded) transposed to `[width][TR]`.
#[inline(always)]
fn transpose_block(x: &[f64], rows: usize, width: usize, r0: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(width * TR, 0.0);
    for r in 0..TR.min(rows - r0) {
        let row = &x[(r0 + r) * width..(r0 + r + 1) * width];
        for (k, &v) in row.iter().enumerate() {
            out[k * TR + r] = v;
        }
    }
}

/// `acc[r][c] += Σ_k a[k][r] * b[k][off + c]`, `k` ascending.
#[inline(always)]
fn tile<const TC: usize>(acc: &mut [[f64; TC]; TR], a: &[f64], b: &[f64], b_stride: usize, off: usize) {
    for (ak, bk) in a.chunks_exact(TR).zip(b.chunks_exact(b_stride)) {
        let ak: &[f64; TR] = ak.try_into().unwrap();
        let bv: &[f64; TC] = bk[off..off + TC].try_into().unwrap();
        for r in 0..TR {
            for c in 0..TC {
                acc[r][c] += ak[r] * bv[c];
            }
        }
    }
}

/// `y[r, :] = x[r, :] @ w + b` with `w` stored `[fan_in, fan_out]`.
pub fn linear(x: &[f64], rows: usize, fan_in: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), fan_in * b.len());
    debug_assert_eq!(x.len(), rows * fan_in);
    dispatch!(linear_avx2, linear_impl, (x: &[f64], rows: usize, fan_in: usize, w: &[f64], b: &[f64]) -> Vec<f64>)
}

#[inline(always)]
fn linear_impl<const TC: usize>(x: &[f64], rows: usize, fan_in: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let fan_out = b.len();
    let mut y = vec![0.0; rows * fan_out];
    let full = fan_out - fan_out % TC;
    let mut xt = Vec::new();
    for r0 in (0..rows).step_by(TR) {
        let rb = TR.min(rows - r0);
        transpose_block(x, rows, fan_in, r0, &mut xt);
        for o0 in (0..full).step_by(TC) {
            let mut acc = [[0.0; TC]; TR];
            for a in acc.iter_mut() {
                a.copy_from_slice(&b[o0..o0 + TC]);
            }
            tile(&mut acc, &xt, w, fan_out, o0);
            for (r, a) in acc.iter().enumerate().take(rb) {
                y[(r0 + r) * fan_out + o0..(r0 + r) * fan_out + o0 + TC].copy_from_slice(a);
            }
        }
        for r in r0..r0 + rb {
            for o in full..fan_out {
                let mut v = b[o];
                for k in 0..fan_in {
                    v += x[r * fan_in + k] * w[k * fan_out + o];
                }
                y[r * fan_out + o] = v;
            }
        }
    }
    y
}

/// Accumulates `dw`, `db` and returns `dx` for [`linear`].
pub fn linear_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    fan_in: usize,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let fan_out = db.len();
    debug_assert_eq!(dy.len(), rows * fan_out);
    for dyr in dy.chunks_exact(fan_out) {
        for (d, &g) in db.iter_mut().zip(dyr) {
            *d += g;
        }
    }
    weight_grad(x, dy, rows, fan_in, fan_out, dw);
    input_grad(dy, rows, fan_in, fan_out, w)
}

/// `dw += x^T @ dy`, rows summed in order.
fn weight_grad(x: &[f64], dy: &[f64], rows: usize, fan_in: usize, fan_out: usize, dw: &mut [f64]) {
    dispatch!(weight_grad_avx2, weight_grad_impl, (x: &[f64], dy: &[f64], rows: usize, fan_in: usize, fan_out: usize, dw: &mut [f64]) -> ())
}

#[inline(always)]
fn weight_grad_impl<const TC: usize>(x: &[f64], dy: &[f64], rows: usize, fan_in: usize, fan_out: usize, dw: &mut [f64]) {
    // x transposed to [rows][TR] blocks so that k plays the tile-row role.
    let full = fan_out - fan_out % TC;
    let mut xt = vec![0.0; rows * TR];
    for k0 in (0..fan_in).step_by(TR) {
        let kb = TR.min(fan_in - k0);
        xt.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..rows {
            for i in 0..kb {
                xt[r * TR + i] = x[r * fan_in + k0 + i];
            }
        }
        for o0 in (0..full).step_by(TC) {
            let mut acc = [[0.0; TC]; TR];
            for (i, a) in acc.iter_mut().enumerate().take(kb) {
                let at = (k0 + i) * fan_out + o0;
                a.copy_from_slice(&dw[at..at + TC]);
            }
            tile(&mut acc, &xt, dy, fan_out, o0);
            for (i, a) in acc.iter().enumerate().take(kb) {
                let at = (k0 + i) * fan_out + o0;
                dw[at..at + TC].copy_from_slice(a);
            }
        }
        for k in k0..k0 + kb {
            for o in full..fan_out {
                let mut v = dw[k * fan_out + o];
                for r in 0..rows {
                    v += x[r * fan_in + k] * dy[r * fan_out + o];
                }
                dw[k * fan_out + o] = v;
            }
        }
    }
}

/// `dx = dy @ w^T`, through a transposed copy of `w` so the tiled kernel applies.
fn input_grad(dy: &[f64], rows: usize, fan_in: usize, fan_out: usize, w: &[f64]) -> Vec<f64> {
    let mut wt = vec![0.0; fan_in * fan_out];
    for (k, wrow) in w.chunks_exact(fan_out).enumerate() {
        for (o, &v) in wrow.iter().enumerate() {
            wt[o * fan_in + k] = v;
        }
    }
    linear(dy, rows, fan_out, &wt, &vec![0.0; fan_in])
}

pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], rows: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let width = gain.len();
    let mut y = vec![0.0; rows * width];
    let mut xhat = vec![0.0; rows * width];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * width..(r + 1) * width];
        let mean = xr.iter().sum::<f64>() / width as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for k in 0..width {
            let n = (xr[k] - mean) * rs;
            xhat[r * width + k] = n;
            y[r * width + k] = n * gain[k] + bias[k];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    dy: &[f64],
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let width = gain.len();
    let rows = cache.rstd.len();
    let mut dx = vec![0.0; rows * width];
    let mut dxhat = vec![0.0; width];
    for r in 0..rows {
        let xh = &cache.xhat[r * width..(r + 1) * width];
        let dyr = &dy[r * width..(r + 1) * width];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for k in 0..width {
            dgain[k] += dyr[k] * xh[k];
            dbias[k] += dyr[k];
            dxhat[k] = dyr[k] * gain[k];
            mean_d += dxhat[k];
            mean_dx += dxhat[k] * xh[k];
        }
        mean_d /= width as f64;
        mean_dx /= width as f64;
        let rs = cache.rstd[r];
        for k in 0..width {
            dx[r * width + k] = rs * (dxhat[k] - mean_d - xh[k] * mean_dx);
        }
    }
    dx
}

// tanh through one exp; glibc's tanh goes through expm1 and is several times slower.
#[inline]
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// Tanh-approximated GELU.
pub fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v))))
        .collect()
}

pub fn gelu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let t = tanh(GELU_C * (v + GELU_A * v * v * v));
            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect()
}

pub struct AttentionCache {
    /// Softmax weights, `[heads, seq, seq]`.
    pub probs: Vec<f64>,
}

/// Unmasked multi-head attention over a packed `[seq, 3 * width]` q/k/v buffer.
pub fn attention(qkv: &[f64], seq: usize, width: usize, heads: usize) -> (Vec<f64>, AttentionCache) {
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * width;
    let mut out = vec![0.0; seq * width];
    let mut probs = vec![0.0; heads * seq * seq];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, width + h * hd, 2 * width + h * hd);
        for s in 0..seq {
            let q = &qkv[s * stride + qo..s * stride + qo + hd];
            let row = &mut probs[(h * seq + s) * seq..(h * seq + s + 1) * seq];
            let mut max = f64::NEG_INFINITY;
            for (t, p) in row.iter_mut().enumerate() {
                let k = &qkv[t * stride + ko..t * stride + ko + hd];
                *p = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*p);
            }
            let mut z = 0.0;
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            for p in row.iter_mut() {
                *p /= z;
            }
            let o = &mut out[s * width + qo..s * width + qo + hd];
            for (t, &p) in row.iter().enumerate() {
                let v = &qkv[t * stride + vo..t * stride + vo + hd];
                for (oj, &vj) in o.iter_mut().zip(v) {
                    *oj += p * vj;
                }
            }
        }
    }
    (out, AttentionCache { probs })
}

pub fn attention_backward(
    qkv: &[f64],
    cache: &AttentionCache,
    dout: &[f64],
    seq: usize,
    width: usize,
    heads: usize,
) -> Vec<f64> {
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * width;
    let mut dqkv = vec![0.0; seq * stride];
    let mut dp = vec![0.0; seq];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, width + h * hd, 2 * width + h * hd);
        for s in 0..seq {
            let row = &cache.probs[(h * seq + s) * seq..(h * seq + s + 1) * seq];
            let dos = &dout[s * width + qo..s * width + qo + hd];
            // dV and dP
            for t in 0..seq {
                let v = &qkv[t * stride + vo..t * stride + vo + hd];
                dp[t] = dos.iter().zip(v).map(|(a, b)| a * b).sum();
                for j in 0..hd {
                    dqkv[t * stride + vo + j] += row[t] * dos[j];
                }
            }
            let dot: f64 = row.iter().zip(&dp).map(|(p, g)| p * g).sum();
            for t in 0..seq {
                let ds = row[t] * (dp[t] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for j in 0..hd {
                    let qj = qkv[s * stride + qo + j];
                    let kj = qkv[t * stride + ko + j];
                    dqkv[s * stride + qo + j] += ds * kj;
                    dqkv[t * stride + ko + j] += ds * qj;
                }
            }
        }
    }
    dqkv
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// `log(sum(exp(logits)))`.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn naive(x: &[f64], rows: usize, fan_in: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let fan_out = b.len();
        let mut y = vec![0.0; rows * fan_out];
        for r in 0..rows {
            for o in 0..fan_out {
                y[r * fan_out + o] = b[o] + (0..fan_in).map(|k| x[r * fan_in + k] * w[k * fan_out + o]).sum::<f64>();
            }
        }
        y
    }

    fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, n)
    }

    fn problem() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..11, 1usize..13, 1usize..21).prop_flat_map(|(rows, fan_in, fan_out)| {
            (
                Just(rows),
                Just(fan_in),
                Just(fan_out),
                values(rows * fan_in),
                values(fan_in * fan_out),
                values(fan_out),
                values(rows * fan_out),
            )
        })
    }

    proptest! {
        #[test]
        fn linear_matches_reference((rows, fan_in, _fo, x, w, b, _dy) in problem()) {
            let y = linear(&x, rows, fan_in, &w, &b);
            for (a, e) in y.iter().zip(naive(&x, rows, fan_in, &w, &b)) {
                prop_assert!((a - e).abs() <= 1e-12 * (1.0 + e.abs()));
            }
        }

        #[test]
        fn tile_width_never_changes_bits((rows, fan_in, fan_out, x, w, b, dy) in problem()) {
            prop_assert_eq!(linear_impl::<4>(&x, rows, fan_in, &w, &b), linear_impl::<8>(&x, rows, fan_in, &w, &b));
            let mut dw4 = w.clone();
            let mut dw8 = w.clone();
            weight_grad_impl::<4>(&x, &dy, rows, fan_in, fan_out, &mut dw4);
            weight_grad_impl::<8>(&x, &dy, rows, fan_in, fan_out, &mut dw8);
            prop_assert_eq!(dw4, dw8);
        }

        #[test]
        fn linear_backward_matches_reference((rows, fan_in, fan_out, x, w, _b, dy) in problem()) {
            let mut dw = vec![0.5; fan_in * fan_out];
            let mut db = vec![0.25; fan_out];
            let dx = linear_backward(&x, &dy, rows, fan_in, &w, &mut dw, &mut db);
            for k in 0..fan_in {
                for o in 0..fan_out {
                    let e = 0.5 + (0..rows).map(|r| x[r * fan_in + k] * dy[r * fan_out + o]).sum::<f64>();
                    prop_assert!((dw[k * fan_out + o] - e).abs() <= 1e-12 * (1.0 + e.abs()));
                }
                for r in 0..rows {
                    let e: f64 = (0..fan_out).map(|o| dy[r * fan_out + o] * w[k * fan_out + o]).sum();
                    prop_assert!((dx[r * fan_in + k] - e).abs() <= 1e-12 * (1.0 + e.abs()));
                }
            }
            for o in 0..fan_out {
                let e = 0.25 + (0..rows).map(|r| dy[r * fan_out + o]).sum::<f64>();
                prop_assert!((db[o] - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn exp_based_tanh_matches_std() {
        for k in -4000..=4000 {
            let u = k as f64 * 0.01;
            assert!((tanh(u) - u.tanh()).abs() < 1e-15, "{u}");
        }
        assert_eq!(tanh(1e4), 1.0);
        assert_eq!(tanh(-1e4), -1.0);
    }
}
