//! Resampling helpers for `[C, H, W]` images: bilinear resize with
//! half-pixel centers, rotation about the image center with edge
//! replication, and brightness scaling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear sample of one plane at continuous pixel-center coordinates
/// `(u, v)` (pixel `i` has center `i`), clamping to the border.
#[inline]
fn sample_plane(plane: &[f32], h: usize, w: usize, u: f64, v: f64) -> f32 {
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (u - x0 as f64) as f32;
    let fy = (v - y0 as f64) as f32;
    let a = plane[y0 * w + x0];
    let b = plane[y0 * w + x1];
    let c = plane[y1 * w + x0];
    let d = plane[y1 * w + x1];
    // `a + (b - a) * f` keeps constant regions exactly constant.
    let top = a + (b - a) * fx;
    let bottom = c + (d - c) * fx;
    top + (bottom - top) * fy
}

/// Bilinear resize to `out_h x out_w` using half-pixel centers
/// (`src = (dst + 0.5) * in / out - 0.5`).
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Input("resize target must be positive".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in image.data().chunks(h * w) {
        for y in 0..out_h {
            let v = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..out_w {
                let u = (x as f64 + 0.5) * sx - 0.5;
                out.push(sample_plane(plane, h, w, u, v));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Rotates counter-clockwise by `degrees` about the image center, sampling
/// bilinearly and replicating edge pixels for out-of-range sources.
pub fn rotate(image: &Tensor, degrees: f64) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let theta = degrees.to_radians();
    let (sin, cos) = if degrees.rem_euclid(360.0) == 0.0 {
        (0.0, 1.0)
    } else {
        theta.sin_cos()
    };
    // Center in pixel-center coordinates.
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(c * h * w);
    for plane in image.data().chunks(h * w) {
        for y in 0..h {
            let dy = y as f64 - cy;
            for x in 0..w {
                let dx = x as f64 - cx;
                // Inverse rotation (y points down) maps the destination back
                // to its source.
                let u = cos * dx - sin * dy + cx;
                let v = sin * dx + cos * dy + cy;
                out.push(sample_plane(plane, h, w, u, v));
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Multiplies every value by `factor` and clamps to `[0, 1]`.
pub fn scale_brightness(image: &Tensor, factor: f32) -> Tensor {
    let mut out = image.clone();
    if factor != 1.0 {
        for v in out.data_mut() {
            *v = (*v * factor).clamp(0.0, 1.0);
        }
    }
    out
}
