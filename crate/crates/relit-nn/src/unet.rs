//! The denoising UNet. Input layer consumes the channel-concatenated noisy
//! latent + conditioning pack; residual blocks carry a FiLM timestep
//! modulation; the coarsest levels run per-view self-attention, optional
//! multi-view attention (added at the multi-view training stage with a
//! zero-initialized output projection so the handoff preserves behavior), and
//! lighting cross-attention to the environment token sequence. The final
//! convolution is zero-initialized. All gradients are computed by hand via
//! the layer caches recorded on a tape.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relit_core::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

use crate::blocks::{
    Conv2d, CrossAttn, CrossAttnCache, GroupNorm, ResBlock, ResBlockCache, SelfAttn,
    SelfAttnCache, TimeEmbed, TimeEmbedCache,
};
use crate::conditioning::LightingTokens;
use crate::ops::{
    avg_pool2_bwd, avg_pool2_fwd, concat_channels, silu_bwd, silu_fwd, split_channels,
    upsample2_bwd, upsample2_fwd, ConvCache, GnCache,
};
use crate::param::{Init, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub cond_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
    /// Self/multi-view attention at this many coarsest levels (mid always).
    pub attn_levels: usize,
    /// Lighting cross-attention at this many coarsest levels (mid always).
    pub lighting_levels: usize,
    pub lighting_dim: usize,
    /// Whether the zero-init multi-view attention modules are present.
    pub multi_view: bool,
    pub param_seed: u64,
}

impl UNetConfig {
    /// Base (desk-scale) configuration: ≈2.3M parameters.
    pub fn base() -> Self {
        Self {
            in_channels: 3,
            cond_channels: 15,
            out_channels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            groups: 8,
            time_dim: 64,
            emb_dim: 128,
            attn_levels: 2,
            lighting_levels: 2,
            lighting_dim: 9,
            multi_view: false,
            param_seed: 0,
        }
    }

    /// Tiny configuration for gradient checking (≤50k parameters at 8×8).
    pub fn tiny() -> Self {
        Self {
            in_channels: 3,
            cond_channels: 15,
            out_channels: 3,
            base_channels: 8,
            channel_mults: vec![1, 2],
            groups: 4,
            time_dim: 16,
            emb_dim: 16,
            attn_levels: 2,
            lighting_levels: 1,
            lighting_dim: 9,
            multi_view: true,
            param_seed: 0,
        }
    }

    pub fn with_multi_view(mut self, multi_view: bool) -> Self {
        self.multi_view = multi_view;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.param_seed = seed;
        self
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    fn ch(&self, l: usize) -> usize {
        self.base_channels * self.channel_mults[l]
    }

    fn has_attn(&self, l: usize) -> bool {
        l + self.attn_levels >= self.levels()
    }

    fn has_light(&self, l: usize) -> bool {
        l + self.lighting_levels >= self.levels()
    }

    /// Input spatial dims must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels() == 0 {
            return Err(CoreError::Config("channel_mults must not be empty".into()));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(CoreError::Config("time_dim must be even and > 0".into()));
        }
        if self.emb_dim == 0 || self.lighting_dim == 0 {
            return Err(CoreError::Config("emb_dim and lighting_dim must be > 0".into()));
        }
        for l in 0..self.levels() {
            if self.ch(l) % self.groups != 0 {
                return Err(CoreError::Config(format!(
                    "level {l} channels {} not divisible by groups {}",
                    self.ch(l),
                    self.groups
                )));
            }
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(CoreError::Config("in/out channels must be > 0".into()));
        }
        Ok(())
    }
}

struct AttnBlocks {
    sa: Option<SelfAttn>,
    mv: Option<SelfAttn>,
    ca: Option<CrossAttn>,
}

struct LevelBlocks {
    rb: ResBlock,
    attn: AttnBlocks,
}

pub struct Denoiser {
    pub cfg: UNetConfig,
    time: TimeEmbed,
    stem: Conv2d,
    down: Vec<LevelBlocks>,
    mid_rb1: ResBlock,
    mid_attn: AttnBlocks,
    mid_rb2: ResBlock,
    up: Vec<LevelBlocks>,
    head_gn: GroupNorm,
    head_conv: Conv2d,
}

struct AttnTape<T: Real> {
    sa: Option<SelfAttnCache<T>>,
    mv: Option<SelfAttnCache<T>>,
    ca: Option<CrossAttnCache<T>>,
}

struct LevelTape<T: Real> {
    rb: ResBlockCache<T>,
    attn: AttnTape<T>,
}

pub struct UNetTape<T: Real> {
    time: TimeEmbedCache<T>,
    stem: ConvCache<T>,
    down: Vec<LevelTape<T>>,
    mid_rb1: ResBlockCache<T>,
    mid_attn: AttnTape<T>,
    mid_rb2: ResBlockCache<T>,
    up: Vec<Option<LevelTape<T>>>,
    head_gn: GnCache<T>,
    head_pre: Array4<T>,
    head_conv: ConvCache<T>,
    n_samples: usize,
}

/// Inputs for one forward pass over `items × views` samples laid out with
/// views contiguous per item. All views of an item share its timestep and
/// lighting tokens.
pub struct ForwardInput<'a, T: Real> {
    pub z: &'a Array4<T>,
    pub cond: &'a Array4<T>,
    pub t: &'a [f64],
    pub lighting: &'a [Array2<T>],
    pub views: usize,
}

impl Denoiser {
    pub fn build<T: Real>(cfg: UNetConfig) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::<T>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.param_seed);
        let time = TimeEmbed::new(&mut store, "time", cfg.time_dim, cfg.emb_dim, &mut rng);
        let stem = Conv2d::new(
            &mut store,
            "stem",
            cfg.in_channels + cfg.cond_channels,
            cfg.ch(0),
            3,
            Conv2d::he(cfg.in_channels + cfg.cond_channels, 3),
            &mut rng,
        );
        let l_count = cfg.levels();
        let mut down = Vec::with_capacity(l_count);
        for l in 0..l_count {
            let c_in = if l == 0 { cfg.ch(0) } else { cfg.ch(l - 1) };
            let rb = ResBlock::new(
                &mut store,
                &format!("down{l}.rb"),
                c_in,
                cfg.ch(l),
                cfg.emb_dim,
                cfg.groups,
                &mut rng,
            );
            let attn = Self::make_attn(&mut store, &cfg, &format!("down{l}"), l, &mut rng);
            down.push(LevelBlocks { rb, attn });
        }
        let cm = cfg.ch(l_count - 1);
        let mid_rb1 =
            ResBlock::new(&mut store, "mid.rb1", cm, cm, cfg.emb_dim, cfg.groups, &mut rng);
        let mid_attn = Self::make_attn_always(&mut store, &cfg, "mid", cm, &mut rng);
        let mid_rb2 =
            ResBlock::new(&mut store, "mid.rb2", cm, cm, cfg.emb_dim, cfg.groups, &mut rng);
        let mut up = Vec::with_capacity(l_count);
        for l in 0..l_count {
            let c_from_deeper = if l == l_count - 1 { cm } else { cfg.ch(l + 1) };
            let rb = ResBlock::new(
                &mut store,
                &format!("up{l}.rb"),
                c_from_deeper + cfg.ch(l),
                cfg.ch(l),
                cfg.emb_dim,
                cfg.groups,
                &mut rng,
            );
            let attn = Self::make_attn(&mut store, &cfg, &format!("up{l}"), l, &mut rng);
            up.push(LevelBlocks { rb, attn });
        }
        let head_gn = GroupNorm::new(&mut store, "head.norm", cfg.ch(0), cfg.groups, &mut rng);
        // Zero-initialized final convolution: the network starts as the zero
        // function regardless of the rest of the initialization.
        let head_conv = Conv2d::new(
            &mut store,
            "head.conv",
            cfg.ch(0),
            cfg.out_channels,
            3,
            Init::Zeros,
            &mut rng,
        );
        let model = Self {
            cfg,
            time,
            stem,
            down,
            mid_rb1,
            mid_attn,
            mid_rb2,
            up,
            head_gn,
            head_conv,
        };
        Ok((model, store))
    }

    fn make_attn<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &UNetConfig,
        prefix: &str,
        l: usize,
        rng: &mut ChaCha8Rng,
    ) -> AttnBlocks {
        let c = cfg.ch(l);
        let sa = cfg
            .has_attn(l)
            .then(|| SelfAttn::new(store, &format!("{prefix}.sa"), c, cfg.groups, false, false, rng));
        let mv = (cfg.has_attn(l) && cfg.multi_view)
            .then(|| SelfAttn::new(store, &format!("{prefix}.mv"), c, cfg.groups, true, true, rng));
        let ca = cfg.has_light(l).then(|| {
            CrossAttn::new(store, &format!("{prefix}.light"), c, cfg.lighting_dim, cfg.groups, rng)
        });
        AttnBlocks { sa, mv, ca }
    }

    fn make_attn_always<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &UNetConfig,
        prefix: &str,
        c: usize,
        rng: &mut ChaCha8Rng,
    ) -> AttnBlocks {
        let sa =
            Some(SelfAttn::new(store, &format!("{prefix}.sa"), c, cfg.groups, false, false, rng));
        let mv = cfg
            .multi_view
            .then(|| SelfAttn::new(store, &format!("{prefix}.mv"), c, cfg.groups, true, true, rng));
        let ca = Some(CrossAttn::new(
            store,
            &format!("{prefix}.light"),
            c,
            cfg.lighting_dim,
            cfg.groups,
            rng,
        ));
        AttnBlocks { sa, mv, ca }
    }

    fn attn_forward<T: Real>(
        blocks: &AttnBlocks,
        store: &ParamStore<T>,
        mut x: Array4<T>,
        lighting: &[Array2<T>],
        views: usize,
    ) -> (Array4<T>, AttnTape<T>) {
        let mut tape = AttnTape { sa: None, mv: None, ca: None };
        if let Some(b) = &blocks.sa {
            let (y, c) = b.forward(store, &x, views);
            x = y;
            tape.sa = Some(c);
        }
        if let Some(b) = &blocks.mv {
            let (y, c) = b.forward(store, &x, views);
            x = y;
            tape.mv = Some(c);
        }
        if let Some(b) = &blocks.ca {
            let (y, c) = b.forward(store, &x, lighting, views);
            x = y;
            tape.ca = Some(c);
        }
        (x, tape)
    }

    fn attn_backward<T: Real>(
        blocks: &AttnBlocks,
        store: &mut ParamStore<T>,
        tape: &AttnTape<T>,
        mut d: Array4<T>,
    ) -> Array4<T> {
        if let (Some(b), Some(c)) = (&blocks.ca, &tape.ca) {
            d = b.backward(store, c, &d);
        }
        if let (Some(b), Some(c)) = (&blocks.mv, &tape.mv) {
            d = b.backward(store, c, &d);
        }
        if let (Some(b), Some(c)) = (&blocks.sa, &tape.sa) {
            d = b.backward(store, c, &d);
        }
        d
    }

    fn check_input<T: Real>(&self, input: &ForwardInput<'_, T>) -> Result<()> {
        let cfg = &self.cfg;
        let (n, cz, h, w) = input.z.dim();
        let (nc, cc, hc, wc) = input.cond.dim();
        if n == 0 || input.views == 0 {
            return Err(CoreError::Shape("empty batch".into()));
        }
        if cz != cfg.in_channels {
            return Err(CoreError::Shape(format!(
                "z has {cz} channels, config expects {}",
                cfg.in_channels
            )));
        }
        if (nc, hc, wc) != (n, h, w) || cc != cfg.cond_channels {
            return Err(CoreError::Shape(format!(
                "conditioning is ({nc},{cc},{hc},{wc}), expected ({n},{},{h},{w})",
                cfg.cond_channels
            )));
        }
        if n % input.views != 0 {
            return Err(CoreError::Shape(format!(
                "batch {n} not divisible by views {}",
                input.views
            )));
        }
        let items = n / input.views;
        if input.t.len() != items || input.lighting.len() != items {
            return Err(CoreError::Shape(format!(
                "{items} items but {} timesteps, {} lighting sets",
                input.t.len(),
                input.lighting.len()
            )));
        }
        for (b, l) in input.lighting.iter().enumerate() {
            if l.dim().1 != cfg.lighting_dim || l.dim().0 == 0 {
                return Err(CoreError::Shape(format!(
                    "lighting {b} tokens are {:?}, expected (≥1, {})",
                    l.dim(),
                    cfg.lighting_dim
                )));
            }
        }
        let div = cfg.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(CoreError::Shape(format!(
                "spatial dims {h}×{w} not divisible by {div}"
            )));
        }
        let finite = input.z.iter().all(|v| v.is_finite())
            && input.cond.iter().all(|v| v.is_finite())
            && input.lighting.iter().all(|l| l.iter().all(|v| v.is_finite()))
            && input.t.iter().all(|v| v.is_finite());
        if !finite {
            return Err(CoreError::Numeric("non-finite denoiser input".into()));
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        input: &ForwardInput<'_, T>,
    ) -> Result<(Array4<T>, UNetTape<T>)> {
        self.check_input(input)?;
        let cfg = &self.cfg;
        let n = input.z.dim().0;
        let t_per: Vec<f64> = input
            .t
            .iter()
            .flat_map(|ti| std::iter::repeat_n(*ti, input.views))
            .collect();
        let (emb, time_tape) = self.time.forward(store, &t_per);
        let x_in = concat_channels(&input.z.view(), &input.cond.view());
        let (mut x, stem_tape) = self.stem.forward(store, &x_in);
        let l_count = cfg.levels();
        let mut down_tapes = Vec::with_capacity(l_count);
        let mut skips: Vec<Array4<T>> = Vec::with_capacity(l_count);
        for l in 0..l_count {
            if l > 0 {
                x = avg_pool2_fwd(&x.view());
            }
            let (y, rb) = self.down[l].rb.forward(store, &x, &emb);
            let (y, attn) =
                Self::attn_forward(&self.down[l].attn, store, y, input.lighting, input.views);
            x = y;
            skips.push(x.clone());
            down_tapes.push(LevelTape { rb, attn });
        }
        let (y, mid_rb1_tape) = self.mid_rb1.forward(store, &x, &emb);
        let (y, mid_attn_tape) =
            Self::attn_forward(&self.mid_attn, store, y, input.lighting, input.views);
        let (y, mid_rb2_tape) = self.mid_rb2.forward(store, &y, &emb);
        x = y;
        let mut up_tapes: Vec<Option<LevelTape<T>>> = (0..l_count).map(|_| None).collect();
        for l in (0..l_count).rev() {
            let xc = concat_channels(&x.view(), &skips[l].view());
            let (y, rb) = self.up[l].rb.forward(store, &xc, &emb);
            let (y, attn) =
                Self::attn_forward(&self.up[l].attn, store, y, input.lighting, input.views);
            x = y;
            up_tapes[l] = Some(LevelTape { rb, attn });
            if l > 0 {
                x = upsample2_fwd(&x.view());
            }
        }
        let (g, head_gn_tape) = self.head_gn.forward(store, &x);
        let sg = silu_fwd(&g);
        let (out, head_conv_tape) = self.head_conv.forward(store, &sg);
        let tape = UNetTape {
            time: time_tape,
            stem: stem_tape,
            down: down_tapes,
            mid_rb1: mid_rb1_tape,
            mid_attn: mid_attn_tape,
            mid_rb2: mid_rb2_tape,
            up: up_tapes,
            head_gn: head_gn_tape,
            head_pre: g,
            head_conv: head_conv_tape,
            n_samples: n,
        };
        Ok((out, tape))
    }

    /// Accumulate parameter gradients for `d(loss)/d(out) = dout`; returns
    /// the gradient with respect to the noisy latent z.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        tape: &UNetTape<T>,
        dout: &Array4<T>,
    ) -> Array4<T> {
        let cfg = &self.cfg;
        let l_count = cfg.levels();
        let mut demb = Array2::<T>::zeros((tape.n_samples, cfg.emb_dim));
        let dsg = self.head_conv.backward(store, &tape.head_conv, dout);
        let dg = silu_bwd(&tape.head_pre, &dsg);
        let mut d = self.head_gn.backward(store, &tape.head_gn, &dg);
        let mut dskips: Vec<Option<Array4<T>>> = (0..l_count).map(|_| None).collect();
        for l in 0..l_count {
            if l > 0 {
                d = upsample2_bwd(&d.view());
            }
            let lt = tape.up[l].as_ref().expect("up tape");
            d = Self::attn_backward(&self.up[l].attn, store, &lt.attn, d);
            let (dxc, de) = self.up[l].rb.backward(store, &lt.rb, &d);
            demb = demb + de;
            let c_from_deeper = if l == l_count - 1 { cfg.ch(l) } else { cfg.ch(l + 1) };
            let (dcur, dskip) = split_channels(&dxc.view(), c_from_deeper);
            d = dcur;
            dskips[l] = Some(dskip);
        }
        let (dmid, de) = self.mid_rb2.backward(store, &tape.mid_rb2, &d);
        demb = demb + de;
        let dmid = Self::attn_backward(&self.mid_attn, store, &tape.mid_attn, dmid);
        let (dmid, de) = self.mid_rb1.backward(store, &tape.mid_rb1, &dmid);
        demb = demb + de;
        d = dmid;
        for l in (0..l_count).rev() {
            let dtot = d + dskips[l].take().expect("skip gradient");
            let dtot = Self::attn_backward(&self.down[l].attn, store, &tape.down[l].attn, dtot);
            let (dx, de) = self.down[l].rb.backward(store, &tape.down[l].rb, &dtot);
            demb = demb + de;
            d = if l > 0 { avg_pool2_bwd(&dx.view()) } else { dx };
        }
        let dx_in = self.stem.backward(store, &tape.stem, &d);
        let (dz, _dcond) = split_channels(&dx_in.view(), cfg.in_channels);
        self.time.backward(store, &tape.time, &demb);
        dz
    }
}

/// Denoise one group: all `k` views share the timestep and target lighting.
/// Returns the v-prediction with the same shape as `z`.
pub fn denoise<T: Real>(
    model: &Denoiser,
    store: &ParamStore<T>,
    z: &Array4<T>,
    t: f64,
    cond: &Array4<T>,
    lighting: &LightingTokens<T>,
) -> Result<Array4<T>> {
    let k = z.dim().0;
    let lighting_set = [lighting.tokens.clone()];
    let input = ForwardInput { z, cond, t: &[t], lighting: &lighting_set, views: k.max(1) };
    let (v, _tape) = model.forward(store, &input)?;
    Ok(v)
}
