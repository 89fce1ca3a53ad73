//! Sign-coded Gaussian carrier: bits become signs of standard-normal latent
//! samples, the latent is rendered to an 8-bit container through an
//! orthonormal DCT, and the inverse path extracts the bits by soft vote.

pub mod attacks;
pub mod channel;
pub mod render;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::payload::BitPayload;

pub use attacks::{apply_attack, AttackFamily, AttackSpec};
pub use channel::{transmit, ChannelModel};
pub use render::{invert_render, render_latent, RENDER_SCALE};

/// Default number of latent cells per bit.
pub const DEFAULT_REPLICATION: usize = 8;

/// C×H×W latent values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Latent {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels * height * width != values.len() || values.is_empty() {
            return Err(invalid(format!(
                "latent {channels}×{height}×{width} cannot hold {} values",
                values.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Latent geometry and keying shared by embedder and extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarrierConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub replication: usize,
    pub perm_seed: u64,
}

impl Default for CarrierConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 64,
            width: 64,
            replication: DEFAULT_REPLICATION,
            perm_seed: 0x5eed,
        }
    }
}

impl CarrierConfig {
    pub fn cells(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn check_capacity(&self, bits: usize) -> Result<()> {
        if self.replication == 0 {
            return Err(invalid("replication must be at least 1"));
        }
        let required = bits * self.replication;
        if required > self.cells() {
            return Err(Error::Capacity {
                required,
                available: self.cells(),
            });
        }
        Ok(())
    }
}

/// Keyed Fisher-Yates permutation of all latent cells.
pub fn cell_permutation(cells: usize, perm_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
    order
}

/// Bit `i` owns permuted cells `[i·r, (i+1)·r)`; each is a half-normal
/// sample signed by the bit (1 positive, 0 negative). Remaining cells are
/// plain N(0, 1). The payload should be whitened so signs are balanced.
pub fn embed_bits(payload: &BitPayload, config: &CarrierConfig, rng_seed: u64) -> Result<Latent> {
    config.check_capacity(payload.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut values: Vec<f64> = (0..config.cells()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let order = cell_permutation(config.cells(), config.perm_seed);
    let r = config.replication;
    for (i, &bit) in payload.bits().iter().enumerate() {
        for &cell in &order[i * r..(i + 1) * r] {
            let mag = values[cell].abs();
            values[cell] = if bit { mag } else { -mag };
        }
    }
    Latent::new(config.channels, config.height, config.width, values)
}

/// Soft majority vote: bit = 1 iff the sum of its r cells is positive.
pub fn extract_bits(latent: &Latent, bits: usize, config: &CarrierConfig) -> Result<BitPayload> {
    if latent.shape() != (config.channels, config.height, config.width) {
        return Err(Error::Shape {
            op: "extract_bits",
            left: vec![latent.channels, latent.height, latent.width],
            right: vec![config.channels, config.height, config.width],
        });
    }
    config.check_capacity(bits)?;
    let order = cell_permutation(config.cells(), config.perm_seed);
    let r = config.replication;
    let out = (0..bits)
        .map(|i| order[i * r..(i + 1) * r].iter().map(|&c| latent.values[c]).sum::<f64>() > 0.0)
        .collect();
    BitPayload::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize, h: usize, w: usize, r: usize) -> CarrierConfig {
        CarrierConfig {
            channels: c,
            height: h,
            width: w,
            replication: r,
            perm_seed: 3,
        }
    }

    #[test]
    fn single_bit_sets_positive_cell() {
        let c = cfg(1, 1, 4, 1);
        let p = BitPayload::new(vec![true]).unwrap();
        for seed in 0..20 {
            let z = embed_bits(&p, &c, seed).unwrap();
            let cell = cell_permutation(4, 3)[0];
            assert!(z.values()[cell] > 0.0);
        }
    }

    #[test]
    fn soft_vote_example() {
        let c = cfg(1, 1, 3, 3);
        let order = cell_permutation(3, 3);
        let mut v = vec![0.0; 3];
        for (&cell, val) in order.iter().zip([0.1, -2.0, 0.3]) {
            v[cell] = val;
        }
        let z = Latent::new(1, 1, 3, v).unwrap();
        assert_eq!(extract_bits(&z, 1, &c).unwrap().bits(), &[false]);
        let zero = Latent::new(1, 1, 3, vec![0.0; 3]).unwrap();
        assert_eq!(extract_bits(&zero, 1, &c).unwrap().bits(), &[false]);
    }

    #[test]
    fn capacity_is_enforced() {
        let c = cfg(1, 4, 4, 8);
        let p = BitPayload::zeros(3).unwrap();
        match embed_bits(&p, &c, 0) {
            Err(Error::Capacity { required, available }) => assert_eq!((required, available), (24, 16)),
            other => panic!("expected capacity error, got {other:?}"),
        }
        let z = Latent::new(1, 4, 4, vec![0.0; 16]).unwrap();
        assert!(extract_bits(&z, 2, &cfg(1, 4, 8, 1)).is_err());
    }

    #[test]
    fn round_trip_and_sign_flip() {
        let c = cfg(4, 16, 16, 8);
        let p = crate::payload::whiten(&BitPayload::zeros(128).unwrap(), crate::payload::WhitenKey(9));
        let z = embed_bits(&p, &c, 11).unwrap();
        assert_eq!(z, embed_bits(&p, &c, 11).unwrap());
        assert_eq!(extract_bits(&z, 128, &c).unwrap(), p);
        let mut neg = z.clone();
        neg.values_mut().iter_mut().for_each(|v| *v = -*v);
        let flipped = extract_bits(&neg, 128, &c).unwrap();
        assert_eq!(p.hamming(&flipped).unwrap(), 128);
    }
}
