//! Parameterized layers built on the kernels in [`crate::ops`]. Blocks own
//! [`ParamId`]s into a shared [`ParamStore`]; `forward` returns the output
//! plus a cache, and `backward` consumes the cache, accumulates parameter
//! gradients into the store, and returns the input gradient.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::ops::{
    attention_bwd, attention_fwd, conv2d_bwd, conv2d_fwd, from_tokens, group_norm_bwd,
    group_norm_fwd, silu_bwd, silu_fwd, timestep_embedding, to_tokens, AttnCache, ConvCache,
    GnCache,
};
use crate::param::{Init, ParamId, ParamStore};
use crate::real::Real;

pub const GN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------- conv2d --

pub struct Conv2d {
    w: ParamId,
    b: ParamId,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), &[c_out, c_in, k, k], init, rng);
        let b = store.register(&format!("{name}.b"), &[c_out], Init::Zeros, rng);
        Self { w, b }
    }

    /// He-style fan-in init for a k×k convolution.
    pub fn he(c_in: usize, k: usize) -> Init {
        Init::ScaledNormal { fan_in: c_in * k * k, gain: 1.0 }
    }

    fn pad<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.value4(self.w).dim().2 / 2
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Array4<T>) -> (Array4<T>, ConvCache<T>) {
        conv2d_fwd(&x.view(), &store.value4(self.w), &store.value1(self.b), self.pad(store))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &Array4<T>,
    ) -> Array4<T> {
        let (dx, dw, db) = conv2d_bwd(cache, &store.value4(self.w), &dy.view());
        store.accumulate_grad(self.w, &dw.view().into_dyn());
        store.accumulate_grad(self.b, &db.view().into_dyn());
        dx
    }
}

// ---------------------------------------------------------------- linear --

pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), &[d_out, d_in], init, rng);
        let b = store.register(&format!("{name}.b"), &[d_out], Init::Zeros, rng);
        Self { w, b }
    }

    pub fn he(d_in: usize) -> Init {
        Init::ScaledNormal { fan_in: d_in, gain: 1.0 }
    }

    /// y = x·Wᵀ + b with x:(S, d_in).
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&store.value2(self.w).t());
        let b = store.value1(self.b);
        for mut row in y.rows_mut() {
            for (r, bv) in row.iter_mut().zip(b.iter()) {
                *r = *r + *bv;
            }
        }
        y
    }

    /// `x` is the forward input; returns dx and accumulates dW, db.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &Array2<T>,
        dy: &ArrayView2<'_, T>,
    ) -> Array2<T> {
        let dw = dy.t().dot(x);
        let db: Array1<T> = dy.sum_axis(Axis(0));
        let dx = dy.dot(&store.value2(self.w));
        store.accumulate_grad(self.w, &dw.view().into_dyn());
        store.accumulate_grad(self.b, &db.view().into_dyn());
        dx
    }
}

// ------------------------------------------------------------- groupnorm --

pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(channels % groups == 0, "{name}: channels {channels} not divisible by {groups}");
        let gamma = store.register(&format!("{name}.gamma"), &[channels], Init::Constant(1.0), rng);
        let beta = store.register(&format!("{name}.beta"), &[channels], Init::Zeros, rng);
        Self { gamma, beta, groups }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Array4<T>) -> (Array4<T>, GnCache<T>) {
        group_norm_fwd(&x.view(), &store.value1(self.gamma), &store.value1(self.beta), self.groups, GN_EPS)
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &GnCache<T>,
        dy: &Array4<T>,
    ) -> Array4<T> {
        let (dx, dgamma, dbeta) = group_norm_bwd(cache, &store.value1(self.gamma), &dy.view());
        store.accumulate_grad(self.gamma, &dgamma.view().into_dyn());
        store.accumulate_grad(self.beta, &dbeta.view().into_dyn());
        dx
    }
}

// -------------------------------------------------------- time embedding --

pub struct TimeEmbed {
    l1: Linear,
    l2: Linear,
    time_dim: usize,
}

pub struct TimeEmbedCache<T> {
    raw: Array2<T>,
    a1: Array2<T>,
    s1: Array2<T>,
    a2: Array2<T>,
}

impl TimeEmbed {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        time_dim: usize,
        emb_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let l1 = Linear::new(store, &format!("{name}.l1"), time_dim, emb_dim, Linear::he(time_dim), rng);
        let l2 = Linear::new(store, &format!("{name}.l2"), emb_dim, emb_dim, Linear::he(emb_dim), rng);
        Self { l1, l2, time_dim }
    }

    /// emb = silu(l2(silu(l1(sinusoid(t))))) per sample; `t` holds the raw
    /// schedule steps.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, t: &[f64]) -> (Array2<T>, TimeEmbedCache<T>) {
        let n = t.len();
        let mut raw = Array2::<T>::zeros((n, self.time_dim));
        for (i, &ti) in t.iter().enumerate() {
            raw.row_mut(i).assign(&timestep_embedding::<T>(ti, self.time_dim));
        }
        let a1 = self.l1.forward(store, &raw);
        let s1 = silu_fwd(&a1);
        let a2 = self.l2.forward(store, &s1);
        let emb = silu_fwd(&a2);
        (emb, TimeEmbedCache { raw, a1, s1, a2 })
    }

    pub fn backward<T: Real>(&self, store: &mut ParamStore<T>, cache: &TimeEmbedCache<T>, demb: &Array2<T>) {
        let da2 = silu_bwd(&cache.a2, demb);
        let ds1 = self.l2.backward(store, &cache.s1, &da2.view());
        let da1 = silu_bwd(&cache.a1, &ds1);
        let _ = self.l1.backward(store, &cache.raw, &da1.view());
    }
}

// -------------------------------------------------------------- resblock --

/// GroupNorm → SiLU → conv → FiLM(t) → SiLU → conv residual block. The FiLM
/// projection produces per-channel (scale, shift) from the time embedding and
/// modulates the second normalization as x̂·(1+scale)+shift.
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    film: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    c_out: usize,
}

pub struct ResBlockCache<T> {
    gn1: GnCache<T>,
    a: Array4<T>,
    conv1: ConvCache<T>,
    emb: Array2<T>,
    gn2: GnCache<T>,
    b_out: Array4<T>,
    scale: Array2<T>,
    hmod: Array4<T>,
    conv2: ConvCache<T>,
    skip: Option<ConvCache<T>>,
}

impl ResBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        emb_dim: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gn1 = GroupNorm::new(store, &format!("{name}.gn1"), c_in, groups, rng);
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, Conv2d::he(c_in, 3), rng);
        // Zero-init FiLM so modulation starts at identity.
        let film = Linear::new(store, &format!("{name}.film"), emb_dim, 2 * c_out, Init::Zeros, rng);
        let gn2 = GroupNorm::new(store, &format!("{name}.gn2"), c_out, groups, rng);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, Conv2d::he(c_out, 3), rng);
        let skip = (c_in != c_out)
            .then(|| Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, Conv2d::he(c_in, 1), rng));
        Self { gn1, conv1, film, gn2, conv2, skip, c_out }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
        emb: &Array2<T>,
    ) -> (Array4<T>, ResBlockCache<T>) {
        let (a, gn1c) = self.gn1.forward(store, x);
        let sa = silu_fwd(&a);
        let (h1, c1) = self.conv1.forward(store, &sa);
        let f = self.film.forward(store, emb);
        let scale = f.slice(s![.., ..self.c_out]).to_owned();
        let shift = f.slice(s![.., self.c_out..]).to_owned();
        let (b_out, gn2c) = self.gn2.forward(store, &h1);
        let (n, c, h, w) = b_out.dim();
        let mut hmod = Array4::<T>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let sc = T::one() + scale[[ni, ci]];
                let sh = shift[[ni, ci]];
                for i in 0..h {
                    for j in 0..w {
                        hmod[[ni, ci, i, j]] = b_out[[ni, ci, i, j]] * sc + sh;
                    }
                }
            }
        }
        let sb = silu_fwd(&hmod);
        let (h2, c2) = self.conv2.forward(store, &sb);
        let (y, skipc) = match &self.skip {
            Some(sk) => {
                let (so, skc) = sk.forward(store, x);
                (h2 + so, Some(skc))
            }
            None => (h2 + x, None),
        };
        let cache = ResBlockCache {
            gn1: gn1c,
            a,
            conv1: c1,
            emb: emb.clone(),
            gn2: gn2c,
            b_out,
            scale,
            hmod,
            conv2: c2,
            skip: skipc,
        };
        (y, cache)
    }

    /// Returns (dx, demb).
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ResBlockCache<T>,
        dy: &Array4<T>,
    ) -> (Array4<T>, Array2<T>) {
        let dsb = self.conv2.backward(store, &cache.conv2, dy);
        let dhmod = silu_bwd(&cache.hmod, &dsb);
        let (n, c, h, w) = dhmod.dim();
        let mut db_out = Array4::<T>::zeros((n, c, h, w));
        let mut dfilm = Array2::<T>::zeros((n, 2 * self.c_out));
        for ni in 0..n {
            for ci in 0..c {
                let sc = T::one() + cache.scale[[ni, ci]];
                let mut dsc = T::zero();
                let mut dsh = T::zero();
                for i in 0..h {
                    for j in 0..w {
                        let d = dhmod[[ni, ci, i, j]];
                        db_out[[ni, ci, i, j]] = d * sc;
                        dsc = dsc + d * cache.b_out[[ni, ci, i, j]];
                        dsh = dsh + d;
                    }
                }
                dfilm[[ni, ci]] = dsc;
                dfilm[[ni, self.c_out + ci]] = dsh;
            }
        }
        let demb = self.film.backward(store, &cache.emb, &dfilm.view());
        let dh1 = self.gn2.backward(store, &cache.gn2, &db_out);
        let dsa = self.conv1.backward(store, &cache.conv1, &dh1);
        let da = silu_bwd(&cache.a, &dsa);
        let mut dx = self.gn1.backward(store, &cache.gn1, &da);
        match (&self.skip, &cache.skip) {
            (Some(sk), Some(skc)) => dx = dx + sk.backward(store, skc, dy),
            _ => dx = dx + dy,
        }
        (dx, demb)
    }
}

// ----------------------------------------------------------- self / mv attn --

/// Pre-norm single-head attention over spatial tokens with a residual
/// connection. With `per_item = false` each view attends to its own tokens;
/// with `per_item = true` the tokens of all views in an item attend jointly,
/// which is the multi-view variant.
pub struct SelfAttn {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    per_item: bool,
}

pub struct SelfAttnCache<T> {
    gn: GnCache<T>,
    tokens: Array2<T>,
    attn: Vec<AttnCache<T>>,
    attn_tokens: Array2<T>,
    rows_per_group: usize,
    dims: (usize, usize, usize),
}

impl SelfAttn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
        per_item: bool,
        zero_out: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let norm = GroupNorm::new(store, &format!("{name}.norm"), channels, groups, rng);
        let q = Linear::new(store, &format!("{name}.q"), channels, channels, Linear::he(channels), rng);
        let k = Linear::new(store, &format!("{name}.k"), channels, channels, Linear::he(channels), rng);
        let v = Linear::new(store, &format!("{name}.v"), channels, channels, Linear::he(channels), rng);
        let out_init = if zero_out { Init::Zeros } else { Linear::he(channels) };
        let out = Linear::new(store, &format!("{name}.out"), channels, channels, out_init, rng);
        Self { norm, q, k, v, out, per_item }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
        views: usize,
    ) -> (Array4<T>, SelfAttnCache<T>) {
        let (n, _c, h, w) = x.dim();
        assert!(n % views == 0, "batch {n} not divisible by views {views}");
        let (xn, gn) = self.norm.forward(store, x);
        let tokens = to_tokens(&xn.view());
        let qm = self.q.forward(store, &tokens);
        let km = self.k.forward(store, &tokens);
        let vm = self.v.forward(store, &tokens);
        let rows_per_group = if self.per_item { views * h * w } else { h * w };
        let n_groups = tokens.dim().0 / rows_per_group;
        let mut attn_tokens = Array2::<T>::zeros(tokens.raw_dim());
        let mut attn = Vec::with_capacity(n_groups);
        for g in 0..n_groups {
            let rows = g * rows_per_group..(g + 1) * rows_per_group;
            let (o, cache) = attention_fwd(
                qm.slice(s![rows.clone(), ..]).to_owned(),
                km.slice(s![rows.clone(), ..]).to_owned(),
                vm.slice(s![rows.clone(), ..]).to_owned(),
            );
            attn_tokens.slice_mut(s![rows, ..]).assign(&o);
            attn.push(cache);
        }
        let out_tokens = self.out.forward(store, &attn_tokens);
        let y = x + &from_tokens(&out_tokens.view(), n, h, w);
        (y, SelfAttnCache { gn, tokens, attn, attn_tokens, rows_per_group, dims: (n, h, w) })
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &SelfAttnCache<T>,
        dy: &Array4<T>,
    ) -> Array4<T> {
        let (n, h, w) = cache.dims;
        let dy_tokens = to_tokens(&dy.view());
        let dattn_tokens = self.out.backward(store, &cache.attn_tokens, &dy_tokens.view());
        let mut dqm = Array2::<T>::zeros(cache.tokens.raw_dim());
        let mut dkm = Array2::<T>::zeros(cache.tokens.raw_dim());
        let mut dvm = Array2::<T>::zeros(cache.tokens.raw_dim());
        for (g, ac) in cache.attn.iter().enumerate() {
            let rows = g * cache.rows_per_group..(g + 1) * cache.rows_per_group;
            let (dq, dk, dv) = attention_bwd(ac, &dattn_tokens.slice(s![rows.clone(), ..]));
            dqm.slice_mut(s![rows.clone(), ..]).assign(&dq);
            dkm.slice_mut(s![rows.clone(), ..]).assign(&dk);
            dvm.slice_mut(s![rows, ..]).assign(&dv);
        }
        let mut dtokens = self.q.backward(store, &cache.tokens, &dqm.view());
        dtokens = dtokens + self.k.backward(store, &cache.tokens, &dkm.view());
        dtokens = dtokens + self.v.backward(store, &cache.tokens, &dvm.view());
        let dxn = from_tokens(&dtokens.view(), n, h, w);
        let dx_norm = self.norm.backward(store, &cache.gn, &dxn);
        dy + &dx_norm
    }
}

// ------------------------------------------------------ lighting cross-attn --

/// Pre-norm cross-attention from image tokens to per-item lighting tokens.
/// Lighting tokens are inputs, not parameters, so no gradient flows to them.
pub struct CrossAttn {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

pub struct CrossAttnCache<T> {
    gn: GnCache<T>,
    tokens: Array2<T>,
    lighting: Vec<Array2<T>>,
    attn: Vec<AttnCache<T>>,
    attn_tokens: Array2<T>,
    rows_per_item: usize,
    dims: (usize, usize, usize),
}

impl CrossAttn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        lighting_dim: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let norm = GroupNorm::new(store, &format!("{name}.norm"), channels, groups, rng);
        let q = Linear::new(store, &format!("{name}.q"), channels, channels, Linear::he(channels), rng);
        let k = Linear::new(store, &format!("{name}.k"), lighting_dim, channels, Linear::he(lighting_dim), rng);
        let v = Linear::new(store, &format!("{name}.v"), lighting_dim, channels, Linear::he(lighting_dim), rng);
        let out = Linear::new(store, &format!("{name}.out"), channels, channels, Linear::he(channels), rng);
        Self { norm, q, k, v, out }
    }

    /// `lighting[b]` holds the token matrix (S_l, lighting_dim) for item `b`;
    /// the batch is laid out as `items × views`.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
        lighting: &[Array2<T>],
        views: usize,
    ) -> (Array4<T>, CrossAttnCache<T>) {
        let (n, _c, h, w) = x.dim();
        assert!(n % views == 0 && n / views == lighting.len(), "lighting batch mismatch");
        let (xn, gn) = self.norm.forward(store, x);
        let tokens = to_tokens(&xn.view());
        let qm = self.q.forward(store, &tokens);
        let rows_per_item = views * h * w;
        let mut attn_tokens = Array2::<T>::zeros(tokens.raw_dim());
        let mut attn = Vec::with_capacity(lighting.len());
        for (b, light) in lighting.iter().enumerate() {
            let kl = self.k.forward(store, light);
            let vl = self.v.forward(store, light);
            let rows = b * rows_per_item..(b + 1) * rows_per_item;
            let (o, cache) = attention_fwd(qm.slice(s![rows.clone(), ..]).to_owned(), kl, vl);
            attn_tokens.slice_mut(s![rows, ..]).assign(&o);
            attn.push(cache);
        }
        let out_tokens = self.out.forward(store, &attn_tokens);
        let y = x + &from_tokens(&out_tokens.view(), n, h, w);
        let cache = CrossAttnCache {
            gn,
            tokens,
            lighting: lighting.to_vec(),
            attn,
            attn_tokens,
            rows_per_item,
            dims: (n, h, w),
        };
        (y, cache)
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &CrossAttnCache<T>,
        dy: &Array4<T>,
    ) -> Array4<T> {
        let (n, h, w) = cache.dims;
        let dy_tokens = to_tokens(&dy.view());
        let dattn_tokens = self.out.backward(store, &cache.attn_tokens, &dy_tokens.view());
        let mut dqm = Array2::<T>::zeros(cache.tokens.raw_dim());
        for (b, ac) in cache.attn.iter().enumerate() {
            let rows = b * cache.rows_per_item..(b + 1) * cache.rows_per_item;
            let (dq, dkl, dvl) = attention_bwd(ac, &dattn_tokens.slice(s![rows.clone(), ..]));
            dqm.slice_mut(s![rows, ..]).assign(&dq);
            let _ = self.k.backward(store, &cache.lighting[b], &dkl.view());
            let _ = self.v.backward(store, &cache.lighting[b], &dvl.view());
        }
        let dtokens = self.q.backward(store, &cache.tokens, &dqm.view());
        let dxn = from_tokens(&dtokens.view(), n, h, w);
        let dx_norm = self.norm.backward(store, &cache.gn, &dxn);
        dy + &dx_norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn randn4(dim: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.sample(StandardNormal))
    }

    fn randn2(dim: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn(dim, |_| rng.sample(StandardNormal))
    }

    /// Randomize every parameter (including zero-initialized ones) so finite
    /// differences exercise all paths.
    fn scramble(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
        for v in store.data_mut() {
            *v = 0.2 * rng.sample::<f64, _>(StandardNormal) + *v * 0.5;
        }
    }

    fn fd_param(
        store: &mut ParamStore<f64>,
        idx: usize,
        h: f64,
        mut f: impl FnMut(&ParamStore<f64>) -> f64,
    ) -> f64 {
        let old = store.data()[idx];
        store.data_mut()[idx] = old + h;
        let up = f(store);
        store.data_mut()[idx] = old - h;
        let down = f(store);
        store.data_mut()[idx] = old;
        (up - down) / (2.0 * h)
    }

    fn spread_indices(len: usize, count: usize) -> Vec<usize> {
        (0..count).map(|i| i * len / count).collect()
    }

    #[test]
    fn resblock_param_and_input_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let rb = ResBlock::new(&mut store, "rb", 4, 6, 5, 2, &mut rng);
        scramble(&mut store, &mut rng);
        let x = randn4((2, 4, 4, 4), &mut rng);
        let emb = randn2((2, 5), &mut rng);
        let proj = randn4((2, 6, 4, 4), &mut rng);
        let loss = |st: &ParamStore<f64>, x_: &Array4<f64>, e_: &Array2<f64>| {
            let (y, _) = rb.forward(st, x_, e_);
            (y * &proj).sum()
        };
        store.zero_grad();
        let (_, cache) = rb.forward(&store, &x, &emb);
        let (dx, demb) = rb.backward(&mut store, &cache, &proj);
        for idx in spread_indices(store.len(), 25) {
            let g = fd_param(&mut store, idx, 1e-5, |st| loss(st, &x, &emb));
            assert_relative_eq!(store.grad()[idx], g, max_relative = 1e-4, epsilon = 1e-7);
        }
        for idx in [0usize, 33, 77, 127] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += 1e-5;
            xm.as_slice_mut().unwrap()[idx] -= 1e-5;
            let g = (loss(&store, &xp, &emb) - loss(&store, &xm, &emb)) / 2e-5;
            assert_relative_eq!(dx.as_slice().unwrap()[idx], g, max_relative = 1e-4, epsilon = 1e-7);
        }
        for idx in 0..10 {
            let mut ep = emb.clone();
            let mut em = emb.clone();
            ep.as_slice_mut().unwrap()[idx] += 1e-5;
            em.as_slice_mut().unwrap()[idx] -= 1e-5;
            let g = (loss(&store, &x, &ep) - loss(&store, &x, &em)) / 2e-5;
            assert_relative_eq!(demb.as_slice().unwrap()[idx], g, max_relative = 1e-4, epsilon = 1e-7);
        }
    }

    #[test]
    fn self_attn_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::<f64>::new();
        let at = SelfAttn::new(&mut store, "attn", 4, 2, false, false, &mut rng);
        scramble(&mut store, &mut rng);
        let x = randn4((2, 4, 2, 3), &mut rng);
        let proj = randn4((2, 4, 2, 3), &mut rng);
        let loss = |st: &ParamStore<f64>, x_: &Array4<f64>| {
            let (y, _) = at.forward(st, x_, 1);
            (y * &proj).sum()
        };
        store.zero_grad();
        let (_, cache) = at.forward(&store, &x, 1);
        let dx = at.backward(&mut store, &cache, &proj);
        for idx in spread_indices(store.len(), 20) {
            let g = fd_param(&mut store, idx, 1e-5, |st| loss(st, &x));
            assert_relative_eq!(store.grad()[idx], g, max_relative = 1e-4, epsilon = 1e-7);
        }
        for idx in [0usize, 13, 29, 47] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += 1e-5;
            xm.as_slice_mut().unwrap()[idx] -= 1e-5;
            let g = (loss(&store, &xp) - loss(&store, &xm)) / 2e-5;
            assert_relative_eq!(dx.as_slice().unwrap()[idx], g, max_relative = 1e-4, epsilon = 1e-7);
        }
    }

    #[test]
    fn multi_view_attention_mixes_views_per_view_does_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store_pv = ParamStore::<f64>::new();
        let pv = SelfAttn::new(&mut store_pv, "attn", 4, 2, false, false, &mut rng);
        let mut rng2 = ChaCha8Rng::seed_from_u64(13);
        let mut store_mv = ParamStore::<f64>::new();
        let mv = SelfAttn::new(&mut store_mv, "attn", 4, 2, true, false, &mut rng2);
        // Same parameters by construction (same rng sequence).
        assert_eq!(store_pv.data(), store_mv.data());
        let a = randn4((1, 4, 2, 2), &mut rng);
        let b = randn4((1, 4, 2, 2), &mut rng);
        let ab = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
        // Per-view: first sample's output is independent of the second sample.
        let (y_a, _) = pv.forward(&store_pv, &a, 1);
        let (y_ab, _) = pv.forward(&store_pv, &ab, 2);
        let diff = (&y_ab.slice(s![0..1, .., .., ..]) - &y_a.view())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12, "per-view attention leaked across views: {diff}");
        // Multi-view: it is not.
        let (z_a, _) = mv.forward(&store_mv, &a, 1);
        let (z_ab, _) = mv.forward(&store_mv, &ab, 2);
        let diff = (&z_ab.slice(s![0..1, .., .., ..]) - &z_a.view())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff > 1e-6, "multi-view attention did not mix views");
    }

    #[test]
    fn cross_attn_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::<f64>::new();
        let ca = CrossAttn::new(&mut store, "light", 4, 9, 2, &mut rng);
        scramble(&mut store, &mut rng);
        let x = randn4((2, 4, 2, 2), &mut rng);
        let lighting = vec![randn2((5, 9), &mut rng)];
        let proj = randn4((2, 4, 2, 2), &mut rng);
        let loss = |st: &ParamStore<f64>, x_: &Array4<f64>| {
            let (y, _) = ca.forward(st, x_, &lighting, 2);
            (y * &proj).sum()
        };
        store.zero_grad();
        let (_, cache) = ca.forward(&store, &x, &lighting, 2);
        let dx = ca.backward(&mut store, &cache, &proj);
        for idx in spread_indices(store.len(), 20) {
            let g = fd_param(&mut store, idx, 1e-5, |st| loss(st, &x));
            assert_relative_eq!(store.grad()[idx], g, max_relative = 1e-4, epsilon = 1e-7);
        }
        for idx in [0usize, 9, 21, 31] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += 1e-5;
            xm.as_slice_mut().unwrap()[idx] -= 1e-5;
            let g = (loss(&store, &xp) - loss(&store, &xm)) / 2e-5;
            assert_relative_eq!(dx.as_slice().unwrap()[idx], g, max_relative = 1e-4, epsilon = 1e-7);
        }
    }

    #[test]
    fn time_embed_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::<f64>::new();
        let te = TimeEmbed::new(&mut store, "time", 8, 6, &mut rng);
        let t = [17.0, 431.0];
        let proj = randn2((2, 6), &mut rng);
        let loss = |st: &ParamStore<f64>| {
            let (e, _) = te.forward(st, &t);
            (e * &proj).sum()
        };
        store.zero_grad();
        let (_, cache) = te.forward(&store, &t);
        te.backward(&mut store, &cache, &proj);
        for idx in spread_indices(store.len(), 15) {
            let g = fd_param(&mut store, idx, 1e-5, loss);
            assert_relative_eq!(store.grad()[idx], g, max_relative = 1e-4, epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_out_attention_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut store = ParamStore::<f64>::new();
        let at = SelfAttn::new(&mut store, "mv", 4, 2, true, true, &mut rng);
        let x = randn4((2, 4, 2, 2), &mut rng);
        let (y, _) = at.forward(&store, &x, 2);
        assert_eq!(y, x, "zero-initialized output projection must be a no-op");
    }
}
