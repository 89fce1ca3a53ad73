//! Bit channels: binary symmetric, burst, and the full image carrier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::payload::{whiten, BitPayload, WhitenKey};

use super::{apply_attack, embed_bits, extract_bits, invert_render, render_latent, AttackSpec, CarrierConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelModel {
    /// Independent flips with probability `p`.
    Bsc { p: f64 },
    /// One contiguous run of `length` flipped bits at a seeded offset.
    Burst { length: usize },
    /// whiten → embed → render → attack → invert → extract → unwhiten
    Carrier {
        key: u64,
        carrier: CarrierConfig,
        attack: AttackSpec,
    },
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            ChannelModel::Bsc { p } if !(0.0..=1.0).contains(p) => {
                Err(invalid(format!("bsc flip probability {p} outside [0, 1]")))
            }
            ChannelModel::Burst { length: 0 } => Err(invalid("burst length must be at least 1")),
            ChannelModel::Carrier { attack, .. } => attack.validate(),
            _ => Ok(()),
        }
    }
}

/// Flip each bit with probability `p`.
pub fn bsc(payload: &BitPayload, p: f64, rng: &mut impl Rng) -> BitPayload {
    let bits = payload.bits().iter().map(|&b| b ^ (rng.random::<f64>() < p)).collect();
    BitPayload::new(bits).expect("non-empty")
}

/// Flip `length` consecutive bits (capped at the payload length).
pub fn burst(payload: &BitPayload, length: usize, rng: &mut impl Rng) -> BitPayload {
    let n = payload.len();
    let length = length.min(n);
    let start = rng.random_range(0..=n - length);
    let mut out = payload.clone();
    for i in start..start + length {
        out.flip(i);
    }
    out
}

/// Send `payload` through `channel`; `seed` drives every random choice
/// not already fixed by the channel itself.
pub fn transmit(payload: &BitPayload, channel: &ChannelModel, seed: u64) -> Result<BitPayload> {
    channel.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match channel {
        ChannelModel::Bsc { p } => Ok(bsc(payload, *p, &mut rng)),
        ChannelModel::Burst { length } => Ok(burst(payload, *length, &mut rng)),
        ChannelModel::Carrier { key, carrier, attack } => {
            let key = WhitenKey(*key);
            let latent = embed_bits(&whiten(payload, key), carrier, seed)?;
            let container = render_latent(&latent)?;
            let attacked = apply_attack(&container, attack)?;
            let recovered = extract_bits(&invert_render(&attacked)?, payload.len(), carrier)?;
            Ok(whiten(&recovered, key))
        }
    }
}
