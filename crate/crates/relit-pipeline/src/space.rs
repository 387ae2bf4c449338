//! Mapping between linear HDR radiance images and the model's working space.
//!
//! The denoiser operates on bounded values: radiance is tonemapped (Reinhard
//! + gamma, the shared `relit_core::math::tonemap`) into [0, 1) and then
//! affinely stretched to [−1, 1]. Backgrounds (radiance 0) land exactly at
//! −1. The inverse transform takes network outputs back to linear radiance
//! for metric evaluation; outputs are clamped just below 1 before inversion
//! so the map stays finite.

use ndarray::Array3;

use relit_core::math::tonemap;

/// Highest tonemapped value the inverse will accept; tonemap(x) → 1 only as
/// x → ∞, so predictions at or above this clamp to a large finite radiance.
const TONE_CEIL: f64 = 0.999;

/// Linear HDR radiance (H, W, C) → model space in [−1, 1].
pub fn image_to_model(img: &Array3<f32>) -> Array3<f32> {
    img.mapv(|x| (2.0 * tonemap(x as f64) - 1.0) as f32)
}

/// Model space → linear HDR radiance. Exact inverse of [`image_to_model`]
/// wherever the input lies in the transform's range.
pub fn model_to_image(m: &Array3<f32>) -> Array3<f32> {
    m.mapv(|z| {
        let y = (0.5 * (z as f64 + 1.0)).clamp(0.0, TONE_CEIL);
        let yg = y.powf(2.2);
        (yg / (1.0 - yg)) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn round_trip_is_tight_over_hdr_range() {
        let img = Array3::from_shape_fn((4, 5, 3), |(j, i, c)| {
            // 0 (background) through ~9: spans the radiance range the
            // renderer produces.
            (j * 15 + i * 3 + c) as f32 * 0.123
        });
        let back = model_to_image(&image_to_model(&img));
        for (a, b) in back.iter().zip(img.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-4 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn background_maps_to_minus_one_and_back_to_zero() {
        let img = Array3::<f32>::zeros((2, 2, 3));
        let m = image_to_model(&img);
        assert!(m.iter().all(|&v| v == -1.0));
        let back = model_to_image(&m);
        assert!(back.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_predictions_stay_finite() {
        let m = Array3::from_shape_fn((1, 1, 3), |(_, _, c)| match c {
            0 => 5.0f32,  // above the representable range
            1 => -7.0,    // below −1
            _ => 1.0,     // exactly the open endpoint
        });
        let img = model_to_image(&m);
        assert!(img.iter().all(|v| v.is_finite()));
        assert_eq!(img[[0, 0, 1]], 0.0);
        assert!(img[[0, 0, 0]] > 100.0);
    }
}
