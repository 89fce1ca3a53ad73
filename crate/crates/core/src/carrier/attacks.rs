//! Image-space attacks on 8-bit containers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::ByteImage;

use super::render::dct_matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    None,
    GaussianNoise,
    Brightness,
    RandomCrop,
    Jpeg,
    Resize,
    Saturation,
    Rotation,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 8] = [
        AttackFamily::None,
        AttackFamily::GaussianNoise,
        AttackFamily::Brightness,
        AttackFamily::RandomCrop,
        AttackFamily::Jpeg,
        AttackFamily::Resize,
        AttackFamily::Saturation,
        AttackFamily::Rotation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::None => "none",
            AttackFamily::GaussianNoise => "gaussian_noise",
            AttackFamily::Brightness => "brightness",
            AttackFamily::RandomCrop => "random_crop",
            AttackFamily::Jpeg => "jpeg",
            AttackFamily::Resize => "resize",
            AttackFamily::Saturation => "saturation",
            AttackFamily::Rotation => "rotation",
        }
    }

    /// Human-readable θ domain, used in error messages.
    pub fn domain(self) -> &'static str {
        match self {
            AttackFamily::None => "any finite value (ignored)",
            AttackFamily::GaussianNoise => "(0, 1] (noise σ as a fraction of 255)",
            AttackFamily::Brightness => "(0, ∞) (multiplier)",
            AttackFamily::RandomCrop => "(0, 1] (retained area fraction)",
            AttackFamily::Jpeg => "[1, 100] (quality)",
            AttackFamily::Resize => "(0, 1) (scale factor)",
            AttackFamily::Saturation => "[0, ∞) (interpolation factor)",
            AttackFamily::Rotation => "any finite value (degrees)",
        }
    }

    pub fn accepts(self, theta: f64) -> bool {
        theta.is_finite()
            && match self {
                AttackFamily::None | AttackFamily::Rotation => true,
                AttackFamily::GaussianNoise | AttackFamily::RandomCrop => theta > 0.0 && theta <= 1.0,
                AttackFamily::Brightness => theta > 0.0,
                AttackFamily::Jpeg => (1.0..=100.0).contains(&theta),
                AttackFamily::Resize => theta > 0.0 && theta < 1.0,
                AttackFamily::Saturation => theta >= 0.0,
            }
    }
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackFamily::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| {
            let names: Vec<&str> = AttackFamily::ALL.iter().map(|f| f.name()).collect();
            invalid(format!("unknown attack {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub theta: f64,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(family: AttackFamily, theta: f64, seed: u64) -> Result<Self> {
        let spec = Self { family, theta, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn none() -> Self {
        Self {
            family: AttackFamily::None,
            theta: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family.accepts(self.theta) {
            Ok(())
        } else {
            Err(invalid(format!(
                "{} θ={} outside its domain {}",
                self.family,
                self.theta,
                self.family.domain()
            )))
        }
    }
}

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn apply_attack(img: &ByteImage, spec: &AttackSpec) -> Result<ByteImage> {
    spec.validate()?;
    let theta = spec.theta;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.family {
        AttackFamily::None => Ok(img.clone()),
        AttackFamily::GaussianNoise => {
            let noise = Normal::new(0.0, theta * 255.0).map_err(|e| invalid(e.to_string()))?;
            let (c, h, w) = img.shape();
            let data = img
                .data()
                .iter()
                .map(|&v| to_byte(v as f64 + noise.sample(&mut rng)))
                .collect();
            ByteImage::new(c, h, w, data)
        }
        AttackFamily::Brightness => {
            let (c, h, w) = img.shape();
            ByteImage::new(c, h, w, img.data().iter().map(|&v| to_byte(v as f64 * theta)).collect())
        }
        AttackFamily::RandomCrop => Ok(random_crop(img, theta, &mut rng)),
        AttackFamily::Jpeg => Ok(jpeg(img, theta)),
        AttackFamily::Resize => Ok(resize_round_trip(img, theta)),
        AttackFamily::Saturation => saturation(img, theta),
        AttackFamily::Rotation => Ok(rotate(img, theta)),
    }
}

/// Keep a window of area fraction θ (aspect preserved) at a seeded offset,
/// zero elsewhere.
fn random_crop(img: &ByteImage, theta: f64, rng: &mut impl Rng) -> ByteImage {
    let (c, h, w) = img.shape();
    let side = theta.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let mut out = ByteImage::filled(c, h, w, 0);
    for k in 0..c {
        for y in y0..y0 + ch {
            for x in x0..x0 + cw {
                out.data_mut()[(k * h + y) * w + x] = img.get(k, y, x);
            }
        }
    }
    out
}

const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51,
    87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luma table scaled for `quality` the way the IJG encoder does it.
pub fn jpeg_table(quality: f64) -> [f64; 64] {
    let q = quality.round().clamp(1.0, 100.0) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    LUMA_TABLE.map(|b| ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64)
}

/// 8×8 blockwise DCT quantization of every channel; ragged edges are
/// padded by replication and cropped afterwards.
fn jpeg(img: &ByteImage, quality: f64) -> ByteImage {
    let table = jpeg_table(quality);
    let m = dct_matrix(8);
    let (c, h, w) = img.shape();
    let mut out = img.clone();
    let mut block = [0.0f64; 64];
    let mut tmp = [0.0f64; 64];
    for k in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for i in 0..8 {
                    for j in 0..8 {
                        block[i * 8 + j] = img.get(k, (by + i).min(h - 1), (bx + j).min(w - 1)) as f64 - 128.0;
                    }
                }
                // coefficients = M·B·Mᵀ
                mat_mul(&m, false, &block, &mut tmp);
                mat_mul_right(&tmp, &m, true, &mut block);
                for (v, q) in block.iter_mut().zip(&table) {
                    *v = (*v / q).round() * q;
                }
                // pixels = Mᵀ·C·M
                mat_mul(&m, true, &block, &mut tmp);
                mat_mul_right(&tmp, &m, false, &mut block);
                for i in 0..8 {
                    for j in 0..8 {
                        let (y, x) = (by + i, bx + j);
                        if y < h && x < w {
                            out.data_mut()[(k * h + y) * w + x] = to_byte(block[i * 8 + j] + 128.0);
                        }
                    }
                }
            }
        }
    }
    out
}

fn mat_mul(a: &[f64], at: bool, b: &[f64; 64], out: &mut [f64; 64]) {
    for i in 0..8 {
        for j in 0..8 {
            out[i * 8 + j] = (0..8)
                .map(|k| if at { a[k * 8 + i] } else { a[i * 8 + k] } * b[k * 8 + j])
                .sum();
        }
    }
}

fn mat_mul_right(a: &[f64; 64], b: &[f64], bt: bool, out: &mut [f64; 64]) {
    for i in 0..8 {
        for j in 0..8 {
            out[i * 8 + j] = (0..8)
                .map(|k| a[i * 8 + k] * if bt { b[j * 8 + k] } else { b[k * 8 + j] })
                .sum();
        }
    }
}

/// Bilinear resample of one plane with half-pixel centres.
fn resample(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let map = |o: usize, inp: usize, out: usize| {
        ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let y = map(oy, h, oh);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for ox in 0..ow {
            let x = map(ox, w, ow);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn resize_round_trip(img: &ByteImage, factor: f64) -> ByteImage {
    let (c, h, w) = img.shape();
    let sh = ((h as f64 * factor).round() as usize).max(1);
    let sw = ((w as f64 * factor).round() as usize).max(1);
    let plane = h * w;
    let mut data = Vec::with_capacity(c * plane);
    for k in 0..c {
        let src: Vec<f64> = img.data()[k * plane..(k + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let small: Vec<f64> = resample(&src, h, w, sh, sw).into_iter().map(|v| v.round()).collect();
        data.extend(resample(&small, sh, sw, h, w).into_iter().map(to_byte));
    }
    ByteImage::new(c, h, w, data).expect("same shape")
}

fn saturation(img: &ByteImage, theta: f64) -> Result<ByteImage> {
    let (c, h, w) = img.shape();
    if c != 3 {
        return Err(invalid(format!("saturation needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = img.data();
    let mut out = vec![0u8; d.len()];
    for p in 0..plane {
        let gray = 0.299 * d[p] as f64 + 0.587 * d[plane + p] as f64 + 0.114 * d[2 * plane + p] as f64;
        for k in 0..3 {
            out[k * plane + p] = to_byte(gray + theta * (d[k * plane + p] as f64 - gray));
        }
    }
    ByteImage::new(c, h, w, out)
}

/// Rotate by `degrees` about the image centre; nearest neighbour, zero fill.
fn rotate(img: &ByteImage, degrees: f64) -> ByteImage {
    let (c, h, w) = img.shape();
    let (s, co) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = ByteImage::filled(c, h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse rotation of the output coordinate
            let sx = (co * dx + s * dy + cx).round();
            let sy = (-s * dx + co * dy + cy).round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            for k in 0..c {
                out.data_mut()[(k * h + y) * w + x] = img.get(k, sy as usize, sx as usize);
            }
        }
    }
    out
}
