//! Lossless code paths and carrier invariants.

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqmark::carrier::{
    apply_attack, embed_bits, extract_bits, invert_render, render_latent, AttackFamily, AttackSpec, CarrierConfig,
};
use vqmark::image::ByteImage;
use vqmark::ndgrad::Tensor;
use vqmark::payload::{
    dequantize_value, keystream, pack_indices, quantize_value, unpack_indices, whiten, BitPayload, WhitenKey,
};
use vqmark::vq::{Codebook, IndexGrid};

fn payload_strategy(max: usize) -> impl Strategy<Value = BitPayload> {
    prop::collection::vec(any::<bool>(), 1..max).prop_map(|b| BitPayload::new(b).unwrap())
}

fn random_payload(n: usize, seed: u64) -> BitPayload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BitPayload::new((0..n).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn quantize_is_exact_on_every_byte() {
    for b in 0..=255u8 {
        assert_eq!(quantize_value(dequantize_value(b)), b);
    }
    assert_eq!(quantize_value(-1.0), 0);
    assert_eq!(quantize_value(1.0), 255);
    assert_eq!(quantize_value(0.0), 128);
}

proptest! {
    #[test]
    fn pack_unpack_round_trip(rows in 1usize..9, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let indices = (0..rows * cols).map(|_| rng.random_range(0..256u16)).collect();
        let grid = IndexGrid::new(rows, cols, indices).unwrap();
        let bits = pack_indices(&grid).unwrap();
        prop_assert_eq!(bits.len(), rows * cols * 8);
        prop_assert_eq!(unpack_indices(&bits, rows, cols).unwrap(), grid);
    }

    #[test]
    fn unpack_pack_round_trip(bytes in prop::collection::vec(any::<u8>(), 1..64)) {
        let bits = BitPayload::from_bytes(&bytes, bytes.len() * 8).unwrap();
        let grid = unpack_indices(&bits, 1, bytes.len()).unwrap();
        prop_assert_eq!(pack_indices(&grid).unwrap(), bits);
    }

    #[test]
    fn quantize_error_is_within_half_a_step(v in -1.0f64..=1.0) {
        prop_assert!((dequantize_value(quantize_value(v)) - v).abs() <= 1.0 / 255.0 + 1e-12);
    }

    #[test]
    fn whiten_is_an_involution(p in payload_strategy(3000), key in any::<u64>()) {
        let k = WhitenKey(key);
        prop_assert_eq!(whiten(&whiten(&p, k), k), p.clone());
        // whitening is XOR with the keystream
        let ks = keystream(k, p.len());
        let w = whiten(&p, k);
        for i in 0..p.len() {
            prop_assert_eq!(w.get(i), p.get(i) ^ ks[i]);
        }
    }

    #[test]
    fn hex_and_file_round_trip(p in payload_strategy(600)) {
        prop_assert_eq!(BitPayload::from_hex(&p.to_hex(), p.len()).unwrap(), p.clone());
        prop_assert_eq!(BitPayload::from_file_string(&p.to_file_string()).unwrap(), p);
    }

    #[test]
    fn key_hex_round_trip(key in any::<u64>()) {
        prop_assert_eq!(WhitenKey::from_hex(&format!("{key:x}")).unwrap(), WhitenKey(key));
        prop_assert_eq!(WhitenKey::from_hex(&format!("{key:#018x}")).unwrap(), WhitenKey(key));
    }

    #[test]
    fn quantization_is_idempotent(seed in any::<u64>(), k in 1usize..12, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = Tensor::<f64>::new(vec![k, d], (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let book = Codebook::new(entries).unwrap();
        let z = Tensor::<f64>::new(vec![3, 4, d], (0..12 * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let q = book.quantize(&z).unwrap();
        let qq = book.quantize(&q.quantized).unwrap();
        prop_assert_eq!(&qq.indices, &q.indices);
        prop_assert_eq!(&qq.quantized, &q.quantized);
        prop_assert!(qq.distances.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn latent_embedding_is_exact_without_noise(p in payload_strategy(1536), seed in any::<u64>(), perm in any::<u64>()) {
        let config = CarrierConfig { perm_seed: perm, ..CarrierConfig::default() };
        let z = embed_bits(&p, &config, seed).unwrap();
        prop_assert_eq!(extract_bits(&z, p.len(), &config).unwrap(), p);
    }

    #[test]
    fn attacks_are_seed_deterministic(seed in any::<u64>(), family in 0usize..8) {
        let family = AttackFamily::ALL[family];
        let theta = match family {
            AttackFamily::Jpeg => 50.0,
            AttackFamily::Brightness => 1.5,
            AttackFamily::Rotation => 10.0,
            AttackFamily::Saturation => 0.5,
            _ => 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ByteImage::new(3, 32, 32, (0..3 * 32 * 32).map(|_| rng.random()).collect()).unwrap();
        let spec = AttackSpec::new(family, theta, seed).unwrap();
        let a = apply_attack(&img, &spec).unwrap();
        prop_assert_eq!(a.shape(), img.shape());
        prop_assert_eq!(apply_attack(&img, &spec).unwrap(), a);
    }
}

#[test]
fn wrong_key_gives_chance_accuracy() {
    let p = random_payload(2048, 3);
    let w = whiten(&p, WhitenKey(42));
    let back = whiten(&w, WhitenKey(43));
    let agree = p.len() - p.hamming(&back).unwrap();
    let acc = agree as f64 / p.len() as f64;
    assert!((0.45..=0.55).contains(&acc), "{acc}");
}

#[test]
fn clean_render_round_trip_recovers_payload() {
    let config = CarrierConfig::default();
    let mut total = 0.0;
    for seed in 0..20u64 {
        let p = random_payload(1536, seed);
        let w = whiten(&p, WhitenKey(42));
        let z = embed_bits(&w, &config, seed).unwrap();
        let img = render_latent(&z).unwrap();
        let back = whiten(
            &extract_bits(&invert_render(&img).unwrap(), p.len(), &config).unwrap(),
            WhitenKey(42),
        );
        total += (p.len() - p.hamming(&back).unwrap()) as f64 / p.len() as f64;
    }
    assert!(total / 20.0 >= 0.999, "{}", total / 20.0);
}

#[test]
fn embedded_latent_is_standard_normal() {
    // one cell per bit: replicated cells share a sign and would not be
    // independent samples
    let config = CarrierConfig {
        channels: 4,
        replication: 1,
        ..CarrierConfig::default()
    };
    let p = whiten(&BitPayload::zeros(16384).unwrap(), WhitenKey(42));
    let z = embed_bits(&p, &config, 7).unwrap();
    assert_eq!(z.len(), 16384);
    let (d, pvalue) = common::ks_standard_normal(z.values());
    assert!(pvalue > 0.01, "D = {d}, p = {pvalue}");
}
