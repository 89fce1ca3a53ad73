//! Fixed orthonormal 2-D DCT render between latents and 8-bit containers.

use crate::error::{invalid, Result};
use crate::image::ByteImage;

use super::Latent;

/// Pixel standard deviation per unit of latent.
pub const RENDER_SCALE: f64 = 28.0;

/// Orthonormal DCT-II matrix, `m[k * n + i] = α_k cos(π (2i + 1) k / 2n)`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let alpha = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m[k * n + i] = alpha * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// left·x·right for an h×w plane `x`, with h×h `left` and w×w `right`
/// optionally transposed.
fn sandwich(left: &[f64], lt: bool, x: &[f64], right: &[f64], rt: bool, h: usize, w: usize) -> Vec<f64> {
    let l = |i: usize, k: usize| if lt { left[k * h + i] } else { left[i * h + k] };
    let r = |k: usize, j: usize| if rt { right[j * w + k] } else { right[k * w + j] };
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for k in 0..h {
            let a = l(i, k);
            for j in 0..w {
                tmp[i * w + j] += a * x[k * w + j];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for k in 0..w {
            let a = tmp[i * w + k];
            for j in 0..w {
                out[i * w + j] += a * r(k, j);
            }
        }
    }
    out
}

/// Inverse 2-D DCT of one h×w coefficient plane.
pub fn idct2(coeffs: &[f64], h: usize, w: usize) -> Vec<f64> {
    sandwich(&dct_matrix(h), true, coeffs, &dct_matrix(w), false, h, w)
}

/// Forward 2-D DCT of one h×w plane.
pub fn dct2(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    sandwich(&dct_matrix(h), false, plane, &dct_matrix(w), true, h, w)
}

/// Per channel: pixel = clamp(round(128 + s·IDCT(z))).
pub fn render_latent(z: &Latent) -> Result<ByteImage> {
    let (c, h, w) = z.shape();
    if c != 3 {
        return Err(invalid(format!("render needs a 3-channel latent, got {c}")));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let x = idct2(&z.values()[ch * plane..(ch + 1) * plane], h, w);
        data.extend(
            x.iter()
                .map(|&v| (128.0 + RENDER_SCALE * v).round().clamp(0.0, 255.0) as u8),
        );
    }
    ByteImage::new(c, h, w, data)
}

/// Per channel: z' = DCT((x − 128) / s).
pub fn invert_render(img: &ByteImage) -> Result<Latent> {
    let (c, h, w) = img.shape();
    let plane = h * w;
    let mut values = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let x: Vec<f64> = img.data()[ch * plane..(ch + 1) * plane]
            .iter()
            .map(|&v| (v as f64 - 128.0) / RENDER_SCALE)
            .collect();
        values.extend(dct2(&x, h, w));
    }
    Latent::new(c, h, w, values)
}
