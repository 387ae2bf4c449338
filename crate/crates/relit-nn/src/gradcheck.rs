//! End-to-end gradient verification of the training loss: the analytic
//! gradients accumulated by the manual backward pass are compared against
//! central finite differences of the MSE loss on randomly chosen parameter
//! coordinates, in 64-bit arithmetic on the tiny configuration.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use relit_core::error::Result;

use crate::ops::mse_loss;
use crate::param::ParamStore;
use crate::real::Real;
use crate::unet::{Denoiser, ForwardInput, UNetConfig};

/// A fixed tiny training batch: one item of two 8×8 views.
pub struct TinyBatch<T: Real> {
    pub z: Array4<T>,
    pub cond: Array4<T>,
    pub t: Vec<f64>,
    pub lighting: Vec<Array2<T>>,
    pub views: usize,
    pub v_target: Array4<T>,
}

/// Build the tiny model with randomized (non-degenerate) parameters plus a
/// random batch. Zero-initialized tensors are perturbed too so every path
/// carries gradient.
pub fn make_tiny_setup(seed: u64) -> (Denoiser, ParamStore<f64>, TinyBatch<f64>) {
    let cfg = UNetConfig::tiny().with_seed(seed);
    let (model, mut store) = Denoiser::build::<f64>(cfg).expect("tiny config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    for v in store.data_mut() {
        *v = 0.5 * *v + 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let batch = TinyBatch {
        z: Array4::from_shape_fn((2, 3, 8, 8), |_| rng.sample(StandardNormal)),
        cond: Array4::from_shape_fn((2, 15, 8, 8), |_| rng.sample(StandardNormal)),
        t: vec![417.0],
        lighting: vec![Array2::from_shape_fn((8, 9), |_| rng.sample(StandardNormal))],
        views: 2,
        v_target: Array4::from_shape_fn((2, 3, 8, 8), |_| rng.sample(StandardNormal)),
    };
    (model, store, batch)
}

pub fn batch_loss(model: &Denoiser, store: &ParamStore<f64>, batch: &TinyBatch<f64>) -> Result<f64> {
    let input = ForwardInput {
        z: &batch.z,
        cond: &batch.cond,
        t: &batch.t,
        lighting: &batch.lighting,
        views: batch.views,
    };
    let (out, _) = model.forward(store, &input)?;
    Ok(mse_loss(&out, &batch.v_target).0)
}

/// Run forward + backward once, then compare `n_coords` random parameter
/// gradients against central finite differences with step `h`. Returns the
/// maximum relative error. The denominator is floored at 1e-4: below that the
/// finite difference itself is noise, not signal.
pub fn grad_check(
    model: &Denoiser,
    store: &mut ParamStore<f64>,
    batch: &TinyBatch<f64>,
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    store.zero_grad();
    let input = ForwardInput {
        z: &batch.z,
        cond: &batch.cond,
        t: &batch.t,
        lighting: &batch.lighting,
        views: batch.views,
    };
    let (out, tape) = model.forward(store, &input)?;
    let (_, dout) = mse_loss(&out, &batch.v_target);
    model.backward(store, &tape, &dout);
    let analytic = store.grad().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..n_coords {
        let idx = rng.random_range(0..store.len());
        let old = store.data()[idx];
        store.data_mut()[idx] = old + h;
        let up = batch_loss(model, store, batch)?;
        store.data_mut()[idx] = old - h;
        let down = batch_loss(model, store, batch)?;
        store.data_mut()[idx] = old;
        let fd = (up - down) / (2.0 * h);
        let a = analytic[idx];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
