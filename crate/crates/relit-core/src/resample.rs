//! Image resampling: exact area-average downsampling and bilinear upsampling.
//!
//! Area averaging treats each pixel as a unit square and integrates the
//! source image over the destination pixel's footprint, so the image mean is
//! preserved to rounding error for any size pair. Bilinear sampling uses the
//! half-pixel-center convention (`align_corners = false`).

use ndarray::Array3;

/// Per-output-index overlap weights for one separable axis.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|j| {
            let lo = j as f64 * scale;
            let hi = (j + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            let mut ws = Vec::with_capacity(last - first);
            for i in first..last {
                let seg = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if seg > 0.0 {
                    ws.push((i, seg / scale));
                }
            }
            ws
        })
        .collect()
}

/// Area-average resize; exact box filter for integer downsampling factors.
pub fn resize_area(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let wy = axis_weights(h, out_h);
    let wx = axis_weights(w, out_w);
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for &(iy, fy) in &wy[oy] {
                    for &(ix, fx) in &wx[ox] {
                        acc += fy * fx * img[[iy, ix, ch]] as f64;
                    }
                }
                out[[oy, ox, ch]] = acc as f32;
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let v00 = img[[y0, x0, ch]] as f64;
                let v01 = img[[y0, x1, ch]] as f64;
                let v10 = img[[y1, x0, ch]] as f64;
                let v11 = img[[y1, x1, ch]] as f64;
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                out[[oy, ox, ch]] = (top + (bot - top) * ty) as f32;
            }
        }
    }
    out
}
