//! PSNR, SSIM and bit accuracy.

use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::image::ByteImage;
use crate::payload::BitPayload;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn same_shape(a: &ByteImage, b: &ByteImage, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        let (ac, ah, aw) = a.shape();
        let (bc, bh, bw) = b.shape();
        return Err(Error::Shape {
            op,
            left: vec![ac, ah, aw],
            right: vec![bc, bh, bw],
        });
    }
    Ok(())
}

/// 10·log10(255² / MSE) on 8-bit images; `f64::INFINITY` when identical.
pub fn psnr(a: &ByteImage, b: &ByteImage) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let se: u64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.abs_diff(y) as u64;
            d * d
        })
        .sum();
    if se == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = se as f64 / a.data().len() as f64;
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// ITU-R 601 luma for three channels; the single plane otherwise.
pub fn luma(img: &ByteImage) -> Result<Vec<f64>> {
    let plane = img.height() * img.width();
    let d = img.data();
    match img.channels() {
        1 => Ok(d.iter().map(|&v| v as f64).collect()),
        3 => Ok((0..plane)
            .map(|p| 0.299 * d[p] as f64 + 0.587 * d[plane + p] as f64 + 0.114 * d[2 * plane + p] as f64)
            .collect()),
        c => Err(invalid(format!("luma needs 1 or 3 channels, got {c}"))),
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, w) in g.iter_mut().enumerate() {
        let x = i as f64 - half;
        *w = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|w| *w /= s);
    g
}

/// Valid-mode separable filtering of an h×w plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = g.iter().enumerate().map(|(k, &gk)| gk * x[y * w + xo + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = g.iter().enumerate().map(|(k, &gk)| gk * rows[(yo + k) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11×11 Gaussian windows of the luma planes.
pub fn ssim(a: &ByteImage, b: &ByteImage) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let x = luma(a)?;
    let y = luma(b)?;
    let g = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mx = filter_valid(&x, h, w, &g);
    let my = filter_valid(&y, h, w, &g);
    let mxx = filter_valid(&prod(&x, &x), h, w, &g);
    let myy = filter_valid(&prod(&y, &y), h, w, &g);
    let mxy = filter_valid(&prod(&x, &y), h, w, &g);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
    }
    Ok(total / mx.len() as f64)
}

/// Fraction of positions where the payloads agree.
pub fn bit_accuracy(sent: &BitPayload, received: &BitPayload) -> Result<f64> {
    let wrong = sent.hamming(received)?;
    Ok((sent.len() - wrong) as f64 / sent.len() as f64)
}

/// Quality of one recovered secret.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub bit_accuracy: f64,
}

/// PSNR as printed in reports: `inf` for identical images.
pub struct Db(pub f64);

impl fmt::Display for Db {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() && self.0 > 0.0 {
            f.write_str("inf")
        } else {
            write!(f, "{:.6}", self.0)
        }
    }
}
