//! Procedural RGB textures used as desk-scale secret images.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{ByteImage, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            count: 500,
            size: 64,
            seed: 1,
        }
    }
}

type Rgb = [f64; 3];

fn color(rng: &mut impl Rng) -> Rgb {
    [
        rng.random_range(0.15..0.85),
        rng.random_range(0.15..0.85),
        rng.random_range(0.15..0.85),
    ]
}

fn blend(dst: &mut [Rgb], src: impl Fn(usize, usize) -> (Rgb, f64), size: usize) {
    for y in 0..size {
        for x in 0..size {
            let (c, a) = src(y, x);
            let p = &mut dst[y * size + x];
            for ch in 0..3 {
                p[ch] = (1.0 - a) * p[ch] + a * c[ch];
            }
        }
    }
}

fn gradient(canvas: &mut [Rgb], size: usize, rng: &mut impl Rng) {
    let (c0, c1) = (color(rng), color(rng));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    blend(
        canvas,
        |y, x| {
            let u = ((x as f64 / size as f64 - 0.5) * dx + (y as f64 / size as f64 - 0.5) * dy)
                * std::f64::consts::FRAC_1_SQRT_2
                + 0.5;
            let t = u.clamp(0.0, 1.0);
            ([0, 1, 2].map(|i| c0[i] + t * (c1[i] - c0[i])), 1.0)
        },
        size,
    );
}

fn stripes(canvas: &mut [Rgb], size: usize, rng: &mut impl Rng) {
    let cycles = rng.random_range(1.0..4.0);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let tint = color(rng);
    let amp = rng.random_range(0.1..0.3);
    let (cx, cy) = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
    let spread = rng.random_range(0.3..0.7);
    let (dx, dy) = (angle.cos(), angle.sin());
    blend(
        canvas,
        |y, x| {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let wave = (std::f64::consts::TAU * cycles * (u * dx + v * dy) + phase).sin();
            let r2 = (u - cx).powi(2) + (v - cy).powi(2);
            let envelope = (-r2 / (2.0 * spread * spread)).exp();
            (tint, (amp * envelope * (1.0 + wave)).clamp(0.0, 1.0))
        },
        size,
    );
}

fn bilinear(grid: &[f64], n: usize, u: f64, v: f64) -> f64 {
    let (x, y) = (u * (n - 1) as f64, v * (n - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = grid[y0 * n + x0] * (1.0 - fx) + grid[y0 * n + x1] * fx;
    let bottom = grid[y1 * n + x0] * (1.0 - fx) + grid[y1 * n + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Coarse random lattice, bilinearly upsampled.
fn filtered_noise(canvas: &mut [Rgb], size: usize, rng: &mut impl Rng) {
    let n = rng.random_range(3..7);
    let amp = rng.random_range(0.05..0.15);
    let grids: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / (size - 1) as f64, y as f64 / (size - 1) as f64);
            for (ch, g) in grids.iter().enumerate() {
                canvas[y * size + x][ch] += amp * bilinear(g, n, u, v);
            }
        }
    }
}

/// Discs and rectangles with soft 1.5-pixel edges.
fn shapes(canvas: &mut [Rgb], size: usize, rng: &mut impl Rng) {
    for _ in 0..rng.random_range(1..4) {
        let c = color(rng);
        let alpha = rng.random_range(0.5..0.9);
        let s = size as f64;
        let (cx, cy) = (rng.random_range(0.15..0.85) * s, rng.random_range(0.15..0.85) * s);
        let (rx, ry) = (rng.random_range(0.1..0.3) * s, rng.random_range(0.1..0.3) * s);
        let disc = rng.random_bool(0.5);
        blend(
            canvas,
            |y, x| {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                // signed distance (pixels) to the boundary, negative inside
                let dist = if disc {
                    ((px / rx).powi(2) + (py / ry).powi(2))
                        .sqrt()
                        .mul_add(rx.min(ry), -rx.min(ry))
                } else {
                    (px.abs() - rx).max(py.abs() - ry)
                };
                let cover = (0.5 - dist / 3.0).clamp(0.0, 1.0);
                (c, alpha * cover)
            },
            size,
        );
    }
}

/// One texture: a gradient base plus a random mix of stripes, noise and shapes.
pub fn generate_texture(size: usize, rng: &mut impl Rng) -> Image {
    let mut canvas = vec![[0.0; 3]; size * size];
    gradient(&mut canvas, size, rng);
    let mut layers = [rng.random_bool(0.6), rng.random_bool(0.6), rng.random_bool(0.6)];
    if !layers.iter().any(|&l| l) {
        layers[rng.random_range(0..3)] = true;
    }
    if layers[0] {
        filtered_noise(&mut canvas, size, rng);
    }
    if layers[1] {
        stripes(&mut canvas, size, rng);
    }
    if layers[2] {
        shapes(&mut canvas, size, rng);
    }
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (p, px) in canvas.iter().enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = px[ch].clamp(0.0, 1.0) as f32;
        }
    }
    Image::new(3, size, size, data).expect("square RGB canvas")
}

/// Image `i` depends only on (seed, i, size), so subsets are stable.
pub fn generate_textures(spec: &TextureSpec) -> Result<Vec<Image>> {
    if spec.count == 0 || spec.size < 2 {
        return Err(invalid(format!("texture spec needs count ≥ 1 and size ≥ 2: {spec:?}")));
    }
    Ok((0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            generate_texture(spec.size, &mut rng).to_bytes().to_image()
        })
        .collect())
}

/// Zero-padded file names, at least five digits.
pub fn texture_file_name(i: usize, count: usize) -> String {
    let width = count.saturating_sub(1).to_string().len().max(5);
    format!("{i:0width$}.ppm")
}

/// Write the dataset as PPM files; fails if the mean pixel value leaves [64, 192].
pub fn write_textures(spec: &TextureSpec, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let images = generate_textures(spec)?;
    let bytes: Vec<ByteImage> = images.iter().map(Image::to_bytes).collect();
    let total: u64 = bytes.iter().flat_map(|b| b.data().iter().map(|&v| v as u64)).sum();
    let mean = total as f64 / (bytes.len() * bytes[0].data().len()) as f64;
    if !(64.0..=192.0).contains(&mean) {
        return Err(invalid(format!("degenerate texture set: mean pixel value {mean:.1}")));
    }
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(bytes.len());
    for (i, b) in bytes.iter().enumerate() {
        let path = dir.join(texture_file_name(i, spec.count));
        b.write_ppm(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Every `*.ppm` in `dir`, sorted by file name.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<(String, Image)>> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Format(format!("no .ppm images in {}", dir.display())));
    }
    names
        .into_iter()
        .map(|n| {
            let img = ByteImage::read_ppm(dir.join(&n))?.to_image();
            Ok((n, img))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_deterministic_and_in_range() {
        let spec = TextureSpec {
            count: 6,
            size: 32,
            seed: 3,
        };
        let a = generate_textures(&spec).unwrap();
        assert_eq!(a, generate_textures(&spec).unwrap());
        assert!(a.iter().all(|img| img.data().iter().all(|v| (0.0..=1.0).contains(v))));
        let more = generate_textures(&TextureSpec {
            count: 8,
            ..spec.clone()
        })
        .unwrap();
        assert_eq!(&more[..6], &a[..]);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn file_names_are_zero_padded() {
        assert_eq!(texture_file_name(7, 500), "00007.ppm");
        assert_eq!(texture_file_name(7, 1_000_000), "000007.ppm");
    }

    #[test]
    fn dataset_mean_is_not_degenerate() {
        let images = generate_textures(&TextureSpec {
            count: 50,
            size: 64,
            seed: 1,
        })
        .unwrap();
        let n: usize = images.iter().map(|i| i.data().len()).sum();
        let mean = images.iter().flat_map(|i| i.data()).map(|&v| v as f64).sum::<f64>() / n as f64 * 255.0;
        assert!((64.0..=192.0).contains(&mean), "mean {mean}");
    }
}
