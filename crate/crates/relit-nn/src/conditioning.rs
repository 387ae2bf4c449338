//! Per-view conditioning stack and lighting token construction.
//!
//! Each view's conditioning is the channel concatenation
//! `[enc(x_src) | enc(I_d) | enc(I_orm) | P]` at latent resolution; lighting
//! conditioning is a token sequence built from the processed environment map
//! `(enc(E^H), enc(E^L), E_dir)`, one token per cell of a coarse
//! equirectangular grid with the cell's own unit direction in the last three
//! channels.

use ndarray::{Array2, Array3, Array4, Axis};
use relit_core::camera::PluckerMap;
use relit_core::codec::Codec;
use relit_core::envmap::{direction_for_pixel, process_env, EnvMap};
use relit_core::error::{CoreError, Result};
use relit_core::resample::resize_area;

use crate::real::{r, Real};

/// Which conditioning signals are active. Ablations replace the disabled
/// channels with zeros so the channel layout never changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditioningFlags {
    pub materials_present: bool,
    pub plucker_present: bool,
}

impl Default for ConditioningFlags {
    fn default() -> Self {
        Self { materials_present: true, plucker_present: true }
    }
}

/// One view's conditioning channels, `(C, h, w)` with
/// `C = C_img + C_d + C_orm + 6`.
#[derive(Debug, Clone)]
pub struct ConditioningPack {
    pub data: Array3<f32>,
    pub flags: ConditioningFlags,
}

impl ConditioningPack {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }
}

/// Stack `[enc(x_src) | enc(I_d) | enc(I_orm) | P]` in that order. Disabled
/// signals contribute zero channels of the same shape.
pub fn build_conditioning(
    x_src: &Array3<f32>,
    i_d: &Array3<f32>,
    i_orm: &Array3<f32>,
    plucker: &PluckerMap,
    codec: &Codec,
    flags: ConditioningFlags,
) -> Result<ConditioningPack> {
    let enc_src = codec.encode(x_src);
    let enc_d = codec.encode(i_d);
    let enc_orm = codec.encode(i_orm);
    let (h, w) = (enc_src.dim().1, enc_src.dim().2);
    let (ph, pw, pc) = plucker.map.dim();
    for (name, a) in [("I_d", &enc_d), ("I_orm", &enc_orm)] {
        if (a.dim().1, a.dim().2) != (h, w) {
            return Err(CoreError::Shape(format!(
                "{name} latent is {}×{}, x_src latent is {h}×{w}",
                a.dim().1,
                a.dim().2
            )));
        }
    }
    if (ph, pw, pc) != (h, w, 6) {
        return Err(CoreError::Shape(format!(
            "Plücker map is {ph}×{pw}×{pc}, expected {h}×{w}×6"
        )));
    }
    let zero_like = |a: &Array3<f32>| Array3::<f32>::zeros(a.raw_dim());
    let (md, morm) = if flags.materials_present {
        (enc_d, enc_orm)
    } else {
        (zero_like(&enc_d), zero_like(&enc_orm))
    };
    let mut p = Array3::<f32>::zeros((6, h, w));
    if flags.plucker_present {
        for j in 0..h {
            for i in 0..w {
                for c in 0..6 {
                    p[[c, j, i]] = plucker.map[[j, i, c]] as f32;
                }
            }
        }
    }
    let data = ndarray::concatenate(
        Axis(0),
        &[enc_src.view(), md.view(), morm.view(), p.view()],
    )
    .expect("channel stack");
    Ok(ConditioningPack { data, flags })
}

/// Lighting tokens: an equirectangular grid of `grid_h × 2·grid_h` cells,
/// each carrying `[E^H | E^L | dir]` (9 channels). `null_flag` zeroes the
/// radiance channels, leaving only geometry — the CFG unconditional input.
#[derive(Debug, Clone)]
pub struct LightingTokens<T> {
    /// (grid_h · grid_w, 9), rows in row-major grid order.
    pub tokens: Array2<T>,
    pub null_flag: bool,
    pub grid: (usize, usize),
}

impl<T: Real> LightingTokens<T> {
    /// The unconditional twin: radiance channels zeroed, directions kept.
    pub fn to_null(&self) -> Self {
        let mut tokens = self.tokens.clone();
        for mut row in tokens.rows_mut() {
            for c in 0..6 {
                row[c] = T::zero();
            }
        }
        Self { tokens, null_flag: true, grid: self.grid }
    }
}

pub fn lighting_tokens<T: Real>(
    env: &EnvMap,
    grid_h: usize,
    null_flag: bool,
) -> Result<LightingTokens<T>> {
    if grid_h == 0 {
        return Err(CoreError::Config("lighting grid height must be ≥ 1".into()));
    }
    let cond = process_env(env)?;
    let (gh, gw) = (grid_h, 2 * grid_h);
    let e_high = resize_area(&cond.e_high, gh, gw);
    let e_low = resize_area(&cond.e_low, gh, gw);
    let mut tokens = Array2::<T>::zeros((gh * gw, 9));
    for j in 0..gh {
        for i in 0..gw {
            let row = j * gw + i;
            // Directions are recomputed at grid resolution so each token
            // carries an exactly unit direction rather than an average.
            let d = direction_for_pixel(gw, gh, i, j);
            for c in 0..3 {
                if !null_flag {
                    tokens[[row, c]] = r(e_high[[j, i, c]] as f64);
                    tokens[[row, 3 + c]] = r(e_low[[j, i, c]] as f64);
                }
                tokens[[row, 6 + c]] = r(d[c]);
            }
        }
    }
    Ok(LightingTokens { tokens, null_flag, grid: (gh, gw) })
}

/// Stack per-view packs into the (N, C, h, w) conditioning tensor consumed by
/// the denoiser.
pub fn stack_packs<T: Real>(packs: &[ConditioningPack]) -> Result<Array4<T>> {
    if packs.is_empty() {
        return Err(CoreError::Shape("no conditioning packs".into()));
    }
    let (c, h, w) = packs[0].data.dim();
    let mut out = Array4::<T>::zeros((packs.len(), c, h, w));
    for (n, p) in packs.iter().enumerate() {
        if p.data.dim() != (c, h, w) {
            return Err(CoreError::Shape(format!(
                "pack {n} has shape {:?}, expected {:?}",
                p.data.dim(),
                (c, h, w)
            )));
        }
        for ci in 0..c {
            for j in 0..h {
                for i in 0..w {
                    out[[n, ci, j, i]] = T::from_f32(p.data[[ci, j, i]]);
                }
            }
        }
    }
    Ok(out)
}

/// Encode a list of images into the (N, C, h, w) latent tensor.
pub fn encode_views<T: Real>(codec: &Codec, images: &[Array3<f32>]) -> Result<Array4<T>> {
    if images.is_empty() {
        return Err(CoreError::Shape("no views to encode".into()));
    }
    let first = codec.encode(&images[0]);
    let (c, h, w) = first.dim();
    let mut out = Array4::<T>::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        let lat = if n == 0 { first.clone() } else { codec.encode(img) };
        if lat.dim() != (c, h, w) {
            return Err(CoreError::Shape(format!(
                "view {n} latent is {:?}, expected {:?}",
                lat.dim(),
                (c, h, w)
            )));
        }
        for ci in 0..c {
            for j in 0..h {
                for i in 0..w {
                    out[[n, ci, j, i]] = T::from_f32(lat[[ci, j, i]]);
                }
            }
        }
    }
    Ok(out)
}

/// Decode an (N, C, h, w) latent tensor back into per-view images.
pub fn decode_views<T: Real>(codec: &Codec, z: &Array4<T>) -> Vec<Array3<f32>> {
    let (n, c, h, w) = z.dim();
    (0..n)
        .map(|ni| {
            let mut lat = Array3::<f32>::zeros((c, h, w));
            for ci in 0..c {
                for j in 0..h {
                    for i in 0..w {
                        lat[[ci, j, i]] = z[[ni, ci, j, i]].as_f32();
                    }
                }
            }
            codec.decode(&lat)
        })
        .collect()
}
