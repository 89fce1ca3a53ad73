//! Brute-force references shared by the integration tests and the
//! acceptance runner. Each one is written the slow, obvious way.

#![allow(dead_code)]

use statrs::distribution::{ContinuousCDF, Normal};
use vqmark::image::ByteImage;

pub fn psnr_oracle(a: &ByteImage, b: &ByteImage) -> f64 {
    let mut mse = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        mse += d * d;
    }
    mse /= a.data().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64.powi(2) / mse).log10()
    }
}

fn luma_at(img: &ByteImage, y: usize, x: usize) -> f64 {
    if img.channels() == 1 {
        return img.get(0, y, x) as f64;
    }
    0.299 * img.get(0, y, x) as f64 + 0.587 * img.get(1, y, x) as f64 + 0.114 * img.get(2, y, x) as f64
}

/// Mean SSIM with a full 2-D 11×11 window and two-pass moments.
pub fn ssim_oracle(a: &ByteImage, b: &ByteImage) -> f64 {
    const K: usize = 11;
    let sigma: f64 = 1.5;
    let mut w = [[0.0f64; K]; K];
    let mut norm = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            norm += *v;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (h, wd) = (a.height(), a.width());
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - K {
        for x0 in 0..=wd - K {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let g = w[i][j] / norm;
                    mx += g * luma_at(a, y0 + i, x0 + j);
                    my += g * luma_at(b, y0 + i, x0 + j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let g = w[i][j] / norm;
                    let dx = luma_at(a, y0 + i, x0 + j) - mx;
                    let dy = luma_at(b, y0 + i, x0 + j) - my;
                    vx += g * dx * dx;
                    vy += g * dy * dy;
                    cxy += g * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// 16×16 adjacency of an h×w×d grid: double-loop cosine, then each output
/// sample interpolated from its four neighbours.
pub fn adjacency_oracle(values: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
    let n = h * w;
    let vec_at = |p: usize| &values[p * d..(p + 1) * d];
    let mut full = vec![vec![0.0; n]; n];
    for (i, row) in full.iter_mut().enumerate() {
        for (j, out) in row.iter_mut().enumerate() {
            let (u, v) = (vec_at(i), vec_at(j));
            let dot: f64 = (0..d).map(|k| u[k] * v[k]).sum();
            let nu: f64 = (0..d).map(|k| u[k] * u[k]).sum::<f64>().sqrt();
            let nv: f64 = (0..d).map(|k| v[k] * v[k]).sum::<f64>().sqrt();
            *out = if nu == 0.0 || nv == 0.0 { 0.0 } else { dot / (nu * nv) };
        }
    }
    let sample = |y: f64, x: f64| {
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = (y.ceil() as usize, x.ceil() as usize);
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        (1.0 - fy) * (1.0 - fx) * full[y0][x0]
            + (1.0 - fy) * fx * full[y0][x1]
            + fy * (1.0 - fx) * full[y1][x0]
            + fy * fx * full[y1][x1]
    };
    let scale = (n - 1) as f64 / 15.0;
    let mut out = Vec::with_capacity(256);
    for i in 0..16 {
        for j in 0..16 {
            out.push(sample(i as f64 * scale, j as f64 * scale).clamp(-1.0, 1.0));
        }
    }
    out
}

/// One-sample Kolmogorov-Smirnov test against N(0, 1); returns (D, p).
pub fn ks_standard_normal(samples: &[f64]) -> (f64, f64) {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = normal.cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let sign = if k as i64 % 2 == 1 { 1.0 } else { -1.0 };
        p += sign * 2.0 * (-2.0 * k * k * lambda * lambda).exp();
    }
    (d, p.clamp(0.0, 1.0))
}
