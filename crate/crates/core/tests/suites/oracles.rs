//! Library metrics and adjacency against brute-force references. Each
//! check panics on failure.

#![allow(dead_code)]

use crate::common::{adjacency_oracle, ks_standard_normal, psnr_oracle, ssim_oracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vqmark::eval::{psnr, ssim};
use vqmark::image::ByteImage;
use vqmark::ndgrad::Tensor;
use vqmark::payload::adjacency_matrix;

fn noisy_pair(c: usize, h: usize, w: usize, spread: i32, seed: u64) -> (ByteImage, ByteImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<u8> = (0..c * h * w).map(|_| rng.random()).collect();
    let b = a
        .iter()
        .map(|&v| (v as i32 + rng.random_range(-spread..=spread)).clamp(0, 255) as u8)
        .collect();
    (ByteImage::new(c, h, w, a).unwrap(), ByteImage::new(c, h, w, b).unwrap())
}

pub fn psnr_and_ssim_match_brute_force() {
    let cases = [
        (3, 64, 64, 20),
        (3, 11, 11, 3),
        (1, 16, 23, 60),
        (3, 32, 17, 255),
        (1, 12, 12, 0),
    ];
    for (i, &(c, h, w, spread)) in cases.iter().enumerate() {
        let (a, b) = noisy_pair(c, h, w, spread, i as u64);
        let (p, po) = (psnr(&a, &b).unwrap(), psnr_oracle(&a, &b));
        assert!(p == po || (p - po).abs() < 1e-9, "psnr case {i}: {p} vs {po}");
        let (s, so) = (ssim(&a, &b).unwrap(), ssim_oracle(&a, &b));
        assert!((s - so).abs() < 1e-9, "ssim case {i}: {s} vs {so}");
    }
}

pub fn psnr_closed_form() {
    let a = ByteImage::filled(3, 8, 8, 100);
    let b = ByteImage::filled(3, 8, 8, 116);
    let expected = 20.0 * (255.0f64 / 16.0).log10();
    assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-12);
    let big = ByteImage::filled(3, 16, 16, 90);
    assert!((ssim(&big, &big).unwrap() - 1.0).abs() < 1e-12);
}

pub fn adjacency_matches_double_loop() {
    for (seed, (h, w, d)) in [(16, 16, 8), (8, 8, 64), (4, 6, 5), (16, 16, 64)]
        .into_iter()
        .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let mut values: Vec<f64> = (0..h * w * d).map(|_| rng.sample(StandardNormal)).collect();
        // one zero vector
        values[d..2 * d].iter_mut().for_each(|v| *v = 0.0);
        let t = Tensor::<f64>::new(vec![h, w, d], values.clone()).unwrap();
        let got = adjacency_matrix(&t).unwrap();
        assert_eq!(got.zero_vectors, 1);
        let want = adjacency_oracle(&values, h, w, d);
        for (k, (g, o)) in got.values.iter().zip(&want).enumerate() {
            assert!((g - o).abs() < 1e-6, "{h}x{w}x{d} entry {k}: {g} vs {o}");
        }
    }
}

pub fn ks_reference_separates_normal_from_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal: Vec<f64> = (0..16384).map(|_| rng.sample(StandardNormal)).collect();
    assert!(ks_standard_normal(&normal).1 > 0.01);
    let uniform: Vec<f64> = (0..16384).map(|_| rng.random_range(-2.0..2.0)).collect();
    assert!(ks_standard_normal(&uniform).1 < 1e-6);
}

pub const ALL: &[(&str, fn())] = &[
    ("psnr_and_ssim_match_brute_force", psnr_and_ssim_match_brute_force),
    ("psnr_closed_form", psnr_closed_form),
    ("adjacency_matches_double_loop", adjacency_matches_double_loop),
    (
        "ks_reference_separates_normal_from_uniform",
        ks_reference_separates_normal_from_uniform,
    ),
];
