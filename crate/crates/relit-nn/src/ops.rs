//! Differentiable kernels: conv via im2col + GEMM, 2× average pooling and
//! nearest upsampling, GroupNorm, SiLU, scaled dot-product attention, and the
//! sinusoidal timestep embedding. Each `_fwd` returns what its `_bwd` needs;
//! backward passes return input gradients and parameter gradients without
//! touching any global state. Everything is single-threaded and evaluation
//! order is fixed, so outputs are bit-reproducible.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

use crate::real::{r, Real};

// ---------------------------------------------------------------- conv2d --

pub struct ConvCache<T> {
    // The input is cached and im2col is recomputed in backward; the column
    // matrix is k² times larger than the input and dominates memory if kept.
    x: Array4<T>,
    pad: usize,
}

fn im2col<T: Real>(x: &ArrayView4<'_, T>, kh: usize, kw: usize, pad: usize) -> Array2<T> {
    let (n, c_in, h, w) = x.dim();
    let ho = h + 2 * pad + 1 - kh;
    let wo = w + 2 * pad + 1 - kw;
    let mut cols = Array2::<T>::zeros((c_in * kh * kw, n * ho * wo));
    for ci in 0..c_in {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                for ni in 0..n {
                    for i in 0..ho {
                        let y = (i + u) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for j in 0..wo {
                            let xph = (j + v) as isize - pad as isize;
                            if xph < 0 || xph >= w as isize {
                                continue;
                            }
                            cols[[row, (ni * ho + i) * wo + j]] =
                                x[[ni, ci, y as usize, xph as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(
    dcols: &Array2<T>,
    x_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    pad: usize,
) -> Array4<T> {
    let (n, c_in, h, w) = x_dim;
    let ho = h + 2 * pad + 1 - kh;
    let wo = w + 2 * pad + 1 - kw;
    let mut dx = Array4::<T>::zeros(x_dim);
    for ci in 0..c_in {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                for ni in 0..n {
                    for i in 0..ho {
                        let y = (i + u) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for j in 0..wo {
                            let xph = (j + v) as isize - pad as isize;
                            if xph < 0 || xph >= w as isize {
                                continue;
                            }
                            let d = dx.get_mut([ni, ci, y as usize, xph as usize]).unwrap();
                            *d = *d + dcols[[row, (ni * ho + i) * wo + j]];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Stride-1 convolution; `pad = kh/2` keeps spatial dims for odd kernels.
pub fn conv2d_fwd<T: Real>(
    x: &ArrayView4<'_, T>,
    w: &ArrayView4<'_, T>,
    b: &ArrayView1<'_, T>,
    pad: usize,
) -> (Array4<T>, ConvCache<T>) {
    let (n, c_in, h, wid) = x.dim();
    let (c_out, c_in_w, kh, kw) = w.dim();
    assert_eq!(c_in, c_in_w, "conv channel mismatch");
    let ho = h + 2 * pad + 1 - kh;
    let wo = wid + 2 * pad + 1 - kw;
    let cols = im2col(x, kh, kw, pad);
    let w_mat = w.to_shape((c_out, c_in * kh * kw)).unwrap();
    let y_mat = w_mat.dot(&cols); // (c_out, n·ho·wo)
    let mut y = Array4::<T>::zeros((n, c_out, ho, wo));
    for co in 0..c_out {
        for ni in 0..n {
            for i in 0..ho {
                for j in 0..wo {
                    y[[ni, co, i, j]] = y_mat[[co, (ni * ho + i) * wo + j]] + b[co];
                }
            }
        }
    }
    (y, ConvCache { x: x.to_owned(), pad })
}

pub fn conv2d_bwd<T: Real>(
    cache: &ConvCache<T>,
    w: &ArrayView4<'_, T>,
    dy: &ArrayView4<'_, T>,
) -> (Array4<T>, Array4<T>, Array1<T>) {
    let (c_out, c_in, kh, kw) = w.dim();
    let (n, c_out_dy, ho, wo) = dy.dim();
    assert_eq!(c_out, c_out_dy);
    let cols = im2col(&cache.x.view(), kh, kw, cache.pad);
    let mut dy_mat = Array2::<T>::zeros((c_out, n * ho * wo));
    let mut db = Array1::<T>::zeros(c_out);
    for co in 0..c_out {
        let mut s = T::zero();
        for ni in 0..n {
            for i in 0..ho {
                for j in 0..wo {
                    let v = dy[[ni, co, i, j]];
                    dy_mat[[co, (ni * ho + i) * wo + j]] = v;
                    s = s + v;
                }
            }
        }
        db[co] = s;
    }
    let w_mat = w.to_shape((c_out, c_in * kh * kw)).unwrap();
    let dw_mat = dy_mat.dot(&cols.t()); // (c_out, R)
    let dcols = w_mat.t().dot(&dy_mat); // (R, n·ho·wo)
    let dw = dw_mat.into_shape_with_order((c_out, c_in, kh, kw)).unwrap();
    let dx = col2im(&dcols, cache.x.dim(), kh, kw, cache.pad);
    (dx, dw, db)
}

// --------------------------------------------------------------- pooling --

/// 2×2 average pooling; spatial dims must be even.
pub fn avg_pool2_fwd<T: Real>(x: &ArrayView4<'_, T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
    let q: T = r(0.25);
    Array4::from_shape_fn((n, c, h / 2, w / 2), |(ni, ci, i, j)| {
        (x[[ni, ci, 2 * i, 2 * j]]
            + x[[ni, ci, 2 * i, 2 * j + 1]]
            + x[[ni, ci, 2 * i + 1, 2 * j]]
            + x[[ni, ci, 2 * i + 1, 2 * j + 1]])
            * q
    })
}

pub fn avg_pool2_bwd<T: Real>(dy: &ArrayView4<'_, T>) -> Array4<T> {
    let (n, c, h, w) = dy.dim();
    let q: T = r(0.25);
    Array4::from_shape_fn((n, c, h * 2, w * 2), |(ni, ci, i, j)| dy[[ni, ci, i / 2, j / 2]] * q)
}

/// Nearest-neighbor 2× upsampling.
pub fn upsample2_fwd<T: Real>(x: &ArrayView4<'_, T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h * 2, w * 2), |(ni, ci, i, j)| x[[ni, ci, i / 2, j / 2]])
}

pub fn upsample2_bwd<T: Real>(dy: &ArrayView4<'_, T>) -> Array4<T> {
    let (n, c, h, w) = dy.dim();
    let mut dx = Array4::<T>::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let d = dx.get_mut([ni, ci, i / 2, j / 2]).unwrap();
                    *d = *d + dy[[ni, ci, i, j]];
                }
            }
        }
    }
    dx
}

// ------------------------------------------------------------- groupnorm --

pub struct GnCache<T> {
    pub xhat: Array4<T>,
    inv_std: Array2<T>, // (n, groups)
    groups: usize,
}

pub fn group_norm_fwd<T: Real>(
    x: &ArrayView4<'_, T>,
    gamma: &ArrayView1<'_, T>,
    beta: &ArrayView1<'_, T>,
    groups: usize,
    eps: f64,
) -> (Array4<T>, GnCache<T>) {
    let (n, c, h, w) = x.dim();
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    let cg = c / groups;
    let m = r::<T>((cg * h * w) as f64);
    let mut y = Array4::<T>::zeros((n, c, h, w));
    let mut xhat = Array4::<T>::zeros((n, c, h, w));
    let mut inv_std = Array2::<T>::zeros((n, groups));
    for ni in 0..n {
        for g in 0..groups {
            let c0 = g * cg;
            let mut mean = T::zero();
            for ci in c0..c0 + cg {
                for i in 0..h {
                    for j in 0..w {
                        mean = mean + x[[ni, ci, i, j]];
                    }
                }
            }
            mean = mean / m;
            let mut var = T::zero();
            for ci in c0..c0 + cg {
                for i in 0..h {
                    for j in 0..w {
                        let d = x[[ni, ci, i, j]] - mean;
                        var = var + d * d;
                    }
                }
            }
            var = var / m;
            let istd = T::one() / (var + r(eps)).sqrt();
            inv_std[[ni, g]] = istd;
            for ci in c0..c0 + cg {
                for i in 0..h {
                    for j in 0..w {
                        let xh = (x[[ni, ci, i, j]] - mean) * istd;
                        xhat[[ni, ci, i, j]] = xh;
                        y[[ni, ci, i, j]] = gamma[ci] * xh + beta[ci];
                    }
                }
            }
        }
    }
    (y, GnCache { xhat, inv_std, groups })
}

pub fn group_norm_bwd<T: Real>(
    cache: &GnCache<T>,
    gamma: &ArrayView1<'_, T>,
    dy: &ArrayView4<'_, T>,
) -> (Array4<T>, Array1<T>, Array1<T>) {
    let (n, c, h, w) = dy.dim();
    let groups = cache.groups;
    let cg = c / groups;
    let m = r::<T>((cg * h * w) as f64);
    let mut dgamma = Array1::<T>::zeros(c);
    let mut dbeta = Array1::<T>::zeros(c);
    for ci in 0..c {
        let mut dg = T::zero();
        let mut db = T::zero();
        for ni in 0..n {
            for i in 0..h {
                for j in 0..w {
                    dg = dg + dy[[ni, ci, i, j]] * cache.xhat[[ni, ci, i, j]];
                    db = db + dy[[ni, ci, i, j]];
                }
            }
        }
        dgamma[ci] = dg;
        dbeta[ci] = db;
    }
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for g in 0..groups {
            let c0 = g * cg;
            // dxhat = dy·γ; dx = istd·(dxhat − mean(dxhat) − xhat·mean(dxhat∘xhat))
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for ci in c0..c0 + cg {
                for i in 0..h {
                    for j in 0..w {
                        let dxh = dy[[ni, ci, i, j]] * gamma[ci];
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * cache.xhat[[ni, ci, i, j]];
                    }
                }
            }
            let mean_dxh = sum_dxh / m;
            let mean_dxh_xh = sum_dxh_xh / m;
            let istd = cache.inv_std[[ni, g]];
            for ci in c0..c0 + cg {
                for i in 0..h {
                    for j in 0..w {
                        let dxh = dy[[ni, ci, i, j]] * gamma[ci];
                        dx[[ni, ci, i, j]] =
                            istd * (dxh - mean_dxh - cache.xhat[[ni, ci, i, j]] * mean_dxh_xh);
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ------------------------------------------------------------------ silu --

pub fn silu_fwd<T: Real, D: ndarray::Dimension>(x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    x.mapv(|v| v / (T::one() + (-v).exp()))
}

pub fn silu_bwd<T: Real, D: ndarray::Dimension>(
    x: &ndarray::Array<T, D>,
    dy: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    ndarray::Zip::from(x).and(dy).map_collect(|&v, &d| {
        let s = T::one() / (T::one() + (-v).exp());
        d * s * (T::one() + v * (T::one() - s))
    })
}

// ------------------------------------------------------------- attention --

pub fn softmax_rows<T: Real>(scores: &Array2<T>) -> Array2<T> {
    let mut p = scores.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    p
}

pub struct AttnCache<T> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    p: Array2<T>,
    scale: T,
}

/// out = softmax(q·kᵀ/√D)·v with q:(S_q,D), k:(S_k,D), v:(S_k,Dv).
pub fn attention_fwd<T: Real>(
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
) -> (Array2<T>, AttnCache<T>) {
    let d = q.dim().1;
    let scale = r::<T>(1.0 / (d as f64).sqrt());
    let scores = q.dot(&k.t()) * scale;
    let p = softmax_rows(&scores);
    let out = p.dot(&v);
    (out, AttnCache { q, k, v, p, scale })
}

pub fn attention_bwd<T: Real>(
    cache: &AttnCache<T>,
    dout: &ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let dv = cache.p.t().dot(dout);
    let dp = dout.dot(&cache.v.t());
    // softmax backward per row: ds = p ∘ (dp − Σ_j dp_j p_j)
    let mut ds = Array2::<T>::zeros(dp.raw_dim());
    for (i, row) in cache.p.rows().into_iter().enumerate() {
        let dot = row
            .iter()
            .zip(dp.row(i).iter())
            .fold(T::zero(), |acc, (p, d)| acc + *p * *d);
        for (j, p) in row.iter().enumerate() {
            ds[[i, j]] = *p * (dp[[i, j]] - dot);
        }
    }
    let dq = ds.dot(&cache.k) * cache.scale;
    let dk = ds.t().dot(&cache.q) * cache.scale;
    (dq, dk, dv)
}

// -------------------------------------------------------- time embedding --

/// Standard sinusoidal embedding: [sin(t·ω_0..), cos(t·ω_0..)] with
/// ω_i = 10000^(−i/half).
pub fn timestep_embedding<T: Real>(t: f64, dim: usize) -> Array1<T> {
    assert!(dim % 2 == 0, "time embedding dim must be even");
    let half = dim / 2;
    let mut e = Array1::<T>::zeros(dim);
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
        e[i] = r((t * freq).sin());
        e[half + i] = r((t * freq).cos());
    }
    e
}

// ------------------------------------------------------------------ misc --

/// Mean-squared-error loss and its input gradient.
pub fn mse_loss<T: Real, D: ndarray::Dimension>(
    pred: &ndarray::Array<T, D>,
    target: &ndarray::Array<T, D>,
) -> (T, ndarray::Array<T, D>) {
    assert_eq!(pred.raw_dim(), target.raw_dim());
    let n = r::<T>(pred.len() as f64);
    let mut loss = T::zero();
    let grad = ndarray::Zip::from(pred).and(target).map_collect(|&p, &t| {
        let d = p - t;
        loss = loss + d * d;
        d * (r::<T>(2.0) / n)
    });
    (loss / n, grad)
}

/// Rows of a (N,C,H,W) tensor as a (N·H·W, C) token matrix (view order
/// n-major, then row-major spatial).
pub fn to_tokens<T: Real>(x: &ArrayView4<'_, T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let mut out = Array2::<T>::zeros((n * h * w, c));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                for ci in 0..c {
                    out[[(ni * h + i) * w + j, ci]] = x[[ni, ci, i, j]];
                }
            }
        }
    }
    out
}

pub fn from_tokens<T: Real>(tokens: &ArrayView2<'_, T>, n: usize, h: usize, w: usize) -> Array4<T> {
    let c = tokens.dim().1;
    let mut out = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                for ci in 0..c {
                    out[[ni, ci, i, j]] = tokens[[(ni * h + i) * w + j, ci]];
                }
            }
        }
    }
    out
}

/// Channel-axis concatenation of two (N,C,H,W) tensors.
pub fn concat_channels<T: Real>(a: &ArrayView4<'_, T>, b: &ArrayView4<'_, T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).unwrap()
}

/// Split gradient of a channel concat back into the two parts.
pub fn split_channels<T: Real>(d: &ArrayView4<'_, T>, c_a: usize) -> (Array4<T>, Array4<T>) {
    let da = d.slice(s![.., ..c_a, .., ..]).to_owned();
    let db = d.slice(s![.., c_a.., .., ..]).to_owned();
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{Array3, Dimension};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn4(dim: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.sample(StandardNormal))
    }

    fn randn2(dim: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn(dim, |_| rng.sample(StandardNormal))
    }

    fn randn1(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| rng.sample(StandardNormal))
    }

    /// Central finite difference of `f` along coordinate `idx` of `x`.
    fn fd<D: Dimension>(
        x: &ndarray::Array<f64, D>,
        idx: usize,
        h: f64,
        mut f: impl FnMut(&ndarray::Array<f64, D>) -> f64,
    ) -> f64 {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[idx] += h;
        xm.as_slice_mut().unwrap()[idx] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn4((2, 3, 5, 6), &mut rng);
        let w = randn4((4, 3, 3, 3), &mut rng);
        let b = randn1(4, &mut rng);
        let (y, _) = conv2d_fwd(&x.view(), &w.view(), &b.view(), 1);
        assert_eq!(y.dim(), (2, 4, 5, 6));
        // Direct (naive) convolution oracle.
        for ni in 0..2 {
            for co in 0..4 {
                for i in 0..5 {
                    for j in 0..6 {
                        let mut acc = b[co];
                        for ci in 0..3 {
                            for u in 0..3 {
                                for v in 0..3 {
                                    let yy = i as isize + u as isize - 1;
                                    let xx = j as isize + v as isize - 1;
                                    if yy >= 0 && yy < 5 && xx >= 0 && xx < 6 {
                                        acc += x[[ni, ci, yy as usize, xx as usize]]
                                            * w[[co, ci, u, v]];
                                    }
                                }
                            }
                        }
                        assert_relative_eq!(y[[ni, co, i, j]], acc, max_relative = 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn4((2, 2, 4, 4), &mut rng);
        let w = randn4((3, 2, 3, 3), &mut rng);
        let b = randn1(3, &mut rng);
        let proj = randn4((2, 3, 4, 4), &mut rng);
        let loss = |x_: &Array4<f64>, w_: &Array4<f64>, b_: &Array1<f64>| {
            let (y, _) = conv2d_fwd(&x_.view(), &w_.view(), &b_.view(), 1);
            (y * &proj).sum()
        };
        let (_, cache) = conv2d_fwd(&x.view(), &w.view(), &b.view(), 1);
        let (dx, dw, db) = conv2d_bwd(&cache, &w.view(), &proj.view());
        for idx in [0usize, 7, 31, 63] {
            let g = fd(&x, idx, 1e-6, |x_| loss(x_, &w, &b));
            assert_relative_eq!(dx.as_slice().unwrap()[idx], g, max_relative = 1e-5, epsilon = 1e-9);
        }
        for idx in [0usize, 10, 53] {
            let g = fd(&w, idx, 1e-6, |w_| loss(&x, w_, &b));
            assert_relative_eq!(dw.as_slice().unwrap()[idx], g, max_relative = 1e-5, epsilon = 1e-9);
        }
        for idx in 0..3 {
            let g = fd(&b, idx, 1e-6, |b_| loss(&x, &w, b_));
            assert_relative_eq!(db[idx], g, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn pooling_and_upsampling_round_trip_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn4((1, 2, 4, 4), &mut rng);
        let proj_down = randn4((1, 2, 2, 2), &mut rng);
        let y = avg_pool2_fwd(&x.view());
        assert_relative_eq!(y[[0, 0, 0, 0]], (x[[0, 0, 0, 0]] + x[[0, 0, 0, 1]] + x[[0, 0, 1, 0]] + x[[0, 0, 1, 1]]) / 4.0);
        let dx = avg_pool2_bwd(&proj_down.view());
        for idx in 0..32 {
            let g = fd(&x, idx, 1e-6, |x_| (avg_pool2_fwd(&x_.view()) * &proj_down).sum());
            assert_relative_eq!(dx.as_slice().unwrap()[idx], g, max_relative = 1e-6, epsilon = 1e-12);
        }
        let proj_up = randn4((1, 2, 8, 8), &mut rng);
        let dxu = upsample2_bwd(&proj_up.view());
        for idx in 0..32 {
            let g = fd(&x, idx, 1e-6, |x_| (upsample2_fwd(&x_.view()) * &proj_up).sum());
            assert_relative_eq!(dxu.as_slice().unwrap()[idx], g, max_relative = 1e-6, epsilon = 1e-12);
        }
    }

    #[test]
    fn group_norm_normalizes_and_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn4((2, 4, 3, 3), &mut rng);
        let gamma = randn1(4, &mut rng);
        let beta = randn1(4, &mut rng);
        let (y, cache) = group_norm_fwd(&x.view(), &gamma.view(), &beta.view(), 2, 1e-5);
        // Per (n, group) the normalized activations have mean 0 / var 1.
        for ni in 0..2 {
            for g in 0..2 {
                let sl = cache.xhat.slice(s![ni, 2 * g..2 * g + 2, .., ..]);
                let m = sl.mean().unwrap();
                let v = sl.mapv(|a| (a - m) * (a - m)).mean().unwrap();
                assert_relative_eq!(m, 0.0, epsilon = 1e-10);
                assert_relative_eq!(v, 1.0, max_relative = 1e-3);
            }
        }
        let proj = randn4(y.dim(), &mut rng);
        let (dx, dgamma, dbeta) = group_norm_bwd(&cache, &gamma.view(), &proj.view());
        let loss = |x_: &Array4<f64>, g_: &Array1<f64>, b_: &Array1<f64>| {
            let (y, _) = group_norm_fwd(&x_.view(), &g_.view(), &b_.view(), 2, 1e-5);
            (y * &proj).sum()
        };
        for idx in [0usize, 17, 40, 71] {
            let g = fd(&x, idx, 1e-6, |x_| loss(x_, &gamma, &beta));
            assert_relative_eq!(dx.as_slice().unwrap()[idx], g, max_relative = 1e-4, epsilon = 1e-8);
        }
        for idx in 0..4 {
            let g = fd(&gamma, idx, 1e-6, |g_| loss(&x, g_, &beta));
            assert_relative_eq!(dgamma[idx], g, max_relative = 1e-5, epsilon = 1e-9);
            let g = fd(&beta, idx, 1e-6, |b_| loss(&x, &gamma, b_));
            assert_relative_eq!(dbeta[idx], g, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn silu_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array3::from_shape_fn((2, 3, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let proj = Array3::from_shape_fn((2, 3, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let dx = silu_bwd(&x, &proj);
        for idx in 0..24 {
            let g = fd(&x, idx, 1e-6, |x_| (silu_fwd(x_) * &proj).sum());
            assert_relative_eq!(dx.as_slice().unwrap()[idx], g, max_relative = 1e-6, epsilon = 1e-10);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = randn2((5, 7), &mut rng) * 10.0;
        let p = softmax_rows(&s);
        for row in p.rows() {
            assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn attention_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = randn2((4, 3), &mut rng);
        let k = randn2((6, 3), &mut rng);
        let v = randn2((6, 5), &mut rng);
        let proj = randn2((4, 5), &mut rng);
        let (_, cache) = attention_fwd(q.clone(), k.clone(), v.clone());
        let (dq, dk, dv) = attention_bwd(&cache, &proj.view());
        let loss = |q_: &Array2<f64>, k_: &Array2<f64>, v_: &Array2<f64>| {
            let (o, _) = attention_fwd(q_.clone(), k_.clone(), v_.clone());
            (o * &proj).sum()
        };
        for idx in 0..12 {
            let g = fd(&q, idx, 1e-6, |q_| loss(q_, &k, &v));
            assert_relative_eq!(dq.as_slice().unwrap()[idx], g, max_relative = 1e-5, epsilon = 1e-9);
        }
        for idx in 0..18 {
            let g = fd(&k, idx, 1e-6, |k_| loss(&q, k_, &v));
            assert_relative_eq!(dk.as_slice().unwrap()[idx], g, max_relative = 1e-5, epsilon = 1e-9);
        }
        for idx in 0..30 {
            let g = fd(&v, idx, 1e-6, |v_| loss(&q, &k, v_));
            assert_relative_eq!(dv.as_slice().unwrap()[idx], g, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn time_embedding_shape_and_range() {
        let e = timestep_embedding::<f64>(371.0, 16);
        assert_eq!(e.len(), 16);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        // t=0 → sines all 0, cosines all 1.
        let e0 = timestep_embedding::<f64>(0.0, 16);
        for i in 0..8 {
            assert_relative_eq!(e0[i], 0.0);
            assert_relative_eq!(e0[8 + i], 1.0);
        }
    }

    #[test]
    fn mse_loss_and_grad() {
        let a = ndarray::arr1(&[1.0f64, 2.0, 3.0]);
        let b = ndarray::arr1(&[1.0f64, 0.0, 6.0]);
        let (l, g) = mse_loss(&a, &b);
        assert_relative_eq!(l, (0.0 + 4.0 + 9.0) / 3.0);
        assert_relative_eq!(g[0], 0.0);
        assert_relative_eq!(g[1], 2.0 * 2.0 / 3.0);
        assert_relative_eq!(g[2], 2.0 * (-3.0) / 3.0);
    }

    #[test]
    fn token_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn4((2, 3, 2, 2), &mut rng);
        let t = to_tokens(&x.view());
        assert_eq!(t.dim(), (8, 3));
        let back = from_tokens(&t.view(), 2, 2, 2);
        assert_eq!(x, back);
    }

    #[test]
    fn channel_concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = randn4((1, 2, 3, 3), &mut rng);
        let b = randn4((1, 4, 3, 3), &mut rng);
        let cat = concat_channels(&a.view(), &b.view());
        assert_eq!(cat.dim(), (1, 6, 3, 3));
        let (ba, bb) = split_channels(&cat.view(), 2);
        assert_eq!(a, ba);
        assert_eq!(b, bb);
    }
}
