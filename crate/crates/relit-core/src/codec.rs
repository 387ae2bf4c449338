//! Feature codec between images and latent grids.
//!
//! The denoiser works in pixel space: the only codec is the identity, which
//! just moves the channel axis to the front (images are (H, W, C), latents
//! are (C, H, W)). The enum keeps the encoder slot explicit so a learned
//! codec could be added without touching call sites.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    Pixel,
}

impl Codec {
    /// Image (H, W, C) → latent (C, H, W).
    pub fn encode(&self, img: &Array3<f32>) -> Array3<f32> {
        match self {
            Codec::Pixel => img.clone().permuted_axes([2, 0, 1]).as_standard_layout().to_owned(),
        }
    }

    /// Latent (C, H, W) → image (H, W, C).
    pub fn decode(&self, latent: &Array3<f32>) -> Array3<f32> {
        match self {
            Codec::Pixel => {
                latent.clone().permuted_axes([1, 2, 0]).as_standard_layout().to_owned()
            }
        }
    }

    pub fn latent_channels(&self, image_channels: usize) -> usize {
        match self {
            Codec::Pixel => image_channels,
        }
    }

    /// Latent spatial size for an image of (h, w).
    pub fn latent_hw(&self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Codec::Pixel => (h, w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_codec_round_trip_is_exact() {
        let img = Array3::from_shape_fn((5, 7, 3), |(j, i, c)| (j * 100 + i * 10 + c) as f32 * 0.31);
        let lat = Codec::Pixel.encode(&img);
        assert_eq!(lat.dim(), (3, 5, 7));
        let back = Codec::Pixel.decode(&lat);
        assert_eq!(back.dim(), img.dim());
        for (a, b) in img.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pixel_codec_shapes() {
        assert_eq!(Codec::Pixel.latent_channels(3), 3);
        assert_eq!(Codec::Pixel.latent_hw(64, 32), (64, 32));
    }
}
