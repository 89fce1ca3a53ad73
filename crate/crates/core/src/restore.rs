//! Image-space restoration of decoded secrets and the bit-refinement loop.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoenc::{batches, CodecModel, FeatureExtractor, FEATURE_SEED};
use crate::carrier::channel::{bsc, burst};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::ndgrad::{
    cosine_lr, Adam, AdamConfig, BatchNorm2d, BatchStats, Checkpoint, Conv2d, ConvBlock, Module, Scalar, Tape, Tensor,
    UpBlock, Var,
};
use crate::payload::{pack_indices, unpack_indices, BitPayload};
use crate::vq::IndexGrid;

const PREFIX: &str = "restorer.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestorerConfig {
    pub channels: usize,
    /// channels of the first down block; the next two double it
    pub width: usize,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        Self { channels: 3, width: 32 }
    }
}

/// Three stride-2 down blocks, three stride-2 up blocks, and one skip from
/// the first down block into the last up block.
#[derive(Clone, Debug)]
pub struct RestorerModel<T> {
    config: RestorerConfig,
    pub down: Vec<ConvBlock<T>>,
    pub up: Vec<UpBlock<T>>,
    pub head: Conv2d<T>,
}

impl<T: Scalar> RestorerModel<T> {
    pub fn new(config: RestorerConfig, seed: u64) -> Result<Self> {
        if config.channels == 0 || config.width < 2 {
            return Err(invalid(format!(
                "restorer needs channels ≥ 1 and width ≥ 2: {config:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, w) = (config.channels, config.width);
        let name = |s: &str| format!("{PREFIX}{s}");
        let down = vec![
            ConvBlock::new(&name("down0"), c, w, 2, &mut rng),
            ConvBlock::new(&name("down1"), w, 2 * w, 2, &mut rng),
            ConvBlock::new(&name("down2"), 2 * w, 4 * w, 2, &mut rng),
        ];
        let up = vec![
            UpBlock::new(&name("up0"), 4 * w, 2 * w, &mut rng),
            UpBlock::new(&name("up1"), 2 * w, w, &mut rng),
            UpBlock::new(&name("up2"), 2 * w, w / 2, &mut rng),
        ];
        let head = Conv2d::new(&name("head"), w / 2, c, 3, 1, &mut rng);
        Ok(Self { config, down, up, head })
    }

    pub fn config(&self) -> &RestorerConfig {
        &self.config
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, training: bool, stats: &mut BatchStats<T>) -> Result<Var> {
        let d0 = self.down[0].forward(tape, x, training, stats)?;
        let d1 = self.down[1].forward(tape, d0, training, stats)?;
        let d2 = self.down[2].forward(tape, d1, training, stats)?;
        let u0 = self.up[0].forward(tape, d2, training, stats)?;
        let u1 = self.up[1].forward(tape, u0, training, stats)?;
        let skip = tape.concat_channels(u1, d0)?;
        let u2 = self.up[2].forward(tape, skip, training, stats)?;
        let y = self.head.forward(tape, u2)?;
        let y = tape.shift(y, T::of(0.5))?;
        tape.clamp(y, T::zero(), T::one())
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let (c, h, w) = img.shape();
        if c != self.config.channels {
            return Err(invalid(format!(
                "restorer expects {} channels, got {c}",
                self.config.channels
            )));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(invalid(format!("restorer needs sides divisible by 8, got {h}×{w}")));
        }
        Ok(())
    }

    /// Inference-mode restoration of a batch of same-sized images.
    pub fn restore_batch(&self, images: &[&Image]) -> Result<Vec<Image>> {
        for img in images {
            self.check_image(img)?;
        }
        let mut tape = Tape::new();
        let x = tape.constant(Image::batch(images)?)?;
        let y = self.forward(&mut tape, x, false, &mut BatchStats::default())?;
        Image::unbatch(tape.value(y))
    }

    pub fn restore_image(&self, image: &Image) -> Result<Image> {
        Ok(self.restore_batch(&[image])?.remove(0))
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut v: Vec<&mut BatchNorm2d<T>> = self.down.iter_mut().map(|b| &mut b.norm).collect();
        v.extend(self.up.iter_mut().map(|b| &mut b.norm));
        v
    }

    pub fn absorb_stats(&mut self, stats: BatchStats<T>) {
        stats.apply(self.norms_mut());
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_meta("restorer.config.channels", self.config.channels as f64)?;
        ck.push_meta("restorer.config.width", self.config.width as f64)?;
        ck.push_module(self)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = RestorerConfig {
            channels: ck.meta("restorer.config.channels")? as usize,
            width: ck.meta("restorer.config.width")? as usize,
        };
        let mut model = Self::new(config, 0)?;
        ck.load_module(&mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl<T: Scalar> Module<T> for RestorerModel<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut p = Vec::new();
        self.down.iter().for_each(|b| p.extend(b.params()));
        self.up.iter().for_each(|b| p.extend(b.params()));
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut p = Vec::new();
        self.down.iter_mut().for_each(|b| p.extend(b.params_mut()));
        self.up.iter_mut().for_each(|b| p.extend(b.params_mut()));
        p.extend(self.head.params_mut());
        p
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut p = Vec::new();
        self.down.iter().for_each(|b| p.extend(b.buffers()));
        self.up.iter().for_each(|b| p.extend(b.buffers()));
        p
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut p = Vec::new();
        self.down.iter_mut().for_each(|b| p.extend(b.buffers_mut()));
        self.up.iter_mut().for_each(|b| p.extend(b.buffers_mut()));
        p
    }
}

/// L1 + weight·feature loss between restored output and clean target.
pub fn restoration_loss<T: Scalar>(
    tape: &mut Tape<T>,
    extractor: &FeatureExtractor<T>,
    output: Var,
    target: Var,
    feature_weight: f64,
) -> Result<Var> {
    let l1 = tape.l1(output, target)?;
    let f = extractor.loss(tape, target, output)?;
    let f = tape.scale(f, T::of(feature_weight))?;
    tape.add(l1, f)
}

/// Draws corrupted copies of clean payloads for restorer training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSampler {
    pub ber_lo: f64,
    pub ber_hi: f64,
    /// also flip one contiguous run of up to ber·n bits
    pub burst: bool,
}

impl Default for CorruptionSampler {
    fn default() -> Self {
        Self {
            ber_lo: 0.0,
            ber_hi: 0.4,
            burst: true,
        }
    }
}

impl CorruptionSampler {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.ber_lo && self.ber_lo <= self.ber_hi && self.ber_hi < 0.5) {
            return Err(invalid(format!(
                "BER range [{}, {}] must satisfy 0 ≤ lo ≤ hi < 0.5",
                self.ber_lo, self.ber_hi
            )));
        }
        Ok(())
    }

    pub fn corrupt(&self, payload: &BitPayload, rng: &mut impl Rng) -> BitPayload {
        let ber = if self.ber_hi > self.ber_lo {
            rng.random_range(self.ber_lo..=self.ber_hi)
        } else {
            self.ber_lo
        };
        let mut out = bsc(payload, ber, rng);
        if self.burst {
            let max = (ber * payload.len() as f64).round() as usize;
            let len = rng.random_range(0..=max);
            if len > 0 {
                out = burst(&out, len, rng);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestorerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub feature_weight: f64,
    /// cosine decay target, as for the codec
    pub final_lr_fraction: f64,
}

impl Default for RestorerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            seed: 2,
            optimizer: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            feature_weight: 0.5,
            final_lr_fraction: 0.05,
        }
    }
}

/// Train `model` to map decodes of corrupted payloads back to decodes of
/// clean ones. Returns the mean loss of every epoch.
pub fn train_restorer<T: Scalar>(
    model: &mut RestorerModel<T>,
    codec: &CodecModel<T>,
    dataset: &[Image],
    sampler: &CorruptionSampler,
    config: &RestorerTrainConfig,
) -> Result<Vec<f64>> {
    sampler.validate()?;
    if !(0.0..=1.0).contains(&config.final_lr_fraction) {
        return Err(invalid("final_lr_fraction must lie in [0, 1]"));
    }
    if dataset.len() < 2 || config.batch_size < 2 {
        return Err(invalid(
            "restorer training needs at least two images and batch size ≥ 2",
        ));
    }
    let extractor = FeatureExtractor::new(model.config.channels, FEATURE_SEED);
    let mut optimizer = Adam::new(config.optimizer)?;
    let chunk = config.batch_size.max(16);
    let mut clean: Vec<IndexGrid> = Vec::with_capacity(dataset.len());
    let mut targets: Vec<Image> = Vec::with_capacity(dataset.len());
    for part in dataset.chunks(chunk) {
        let imgs: Vec<&Image> = part.iter().collect();
        let grids = codec.encode_indices_batch(&imgs)?;
        targets.extend(codec.decode_indices_batch(&grids.iter().collect::<Vec<_>>())?);
        clean.extend(grids);
    }
    let payloads: Vec<BitPayload> = clean.iter().map(pack_indices).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.optimizer.lr, config.final_lr_fraction, epoch, config.epochs);
        optimizer.set_learning_rate(lr)?;
        let mut sum = 0.0;
        let order = batches(dataset.len(), config.batch_size, &mut rng);
        let count = order.len();
        for (b, batch) in order.into_iter().enumerate() {
            let grids: Vec<IndexGrid> = batch
                .iter()
                .map(|&i| {
                    let noisy = sampler.corrupt(&payloads[i], &mut rng);
                    unpack_indices(&noisy, clean[i].rows, clean[i].cols)
                })
                .collect::<Result<_>>()?;
            let corrupted = codec.decode_indices_batch(&grids.iter().collect::<Vec<_>>())?;
            let tgt: Vec<&Image> = batch.iter().map(|&i| &targets[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Image::batch(&corrupted.iter().collect::<Vec<_>>())?)?;
            let t = tape.constant(Image::batch(&tgt)?)?;
            let mut stats = BatchStats::default();
            let y = model.forward(&mut tape, x, true, &mut stats)?;
            let loss = restoration_loss(&mut tape, &extractor, y, t, config.feature_weight)?;
            let value = tape.value(loss).item().f64();
            if !value.is_finite() {
                return Err(Error::Training {
                    batch: b,
                    reason: format!("non-finite restorer loss in epoch {epoch}"),
                });
            }
            let grads = tape.backward(loss).map_err(|e| Error::Training {
                batch: b,
                reason: e.to_string(),
            })?;
            optimizer.step(model.params_mut(), &grads)?;
            model.absorb_stats(stats);
            sum += value;
        }
        let mean = sum / count as f64;
        log::info!("restorer epoch {epoch}: mean loss {mean:.5}");
        losses.push(mean);
    }
    Ok(losses)
}

/// unpack → decode → restore → encode → pack, up to `rounds` times or until
/// the bits stop changing. Returns the final bits and the last restored image.
pub fn refine_bits<T: Scalar>(
    bits: &BitPayload,
    codec: &CodecModel<T>,
    restorer: &RestorerModel<T>,
    rounds: usize,
) -> Result<(BitPayload, Image)> {
    if rounds == 0 {
        return Err(invalid("refinement needs at least one round"));
    }
    let g = codec.config().grid;
    let mut current = bits.clone();
    let mut image = None;
    for _ in 0..rounds {
        let decoded = codec.decode_indices(&unpack_indices(&current, g, g)?)?;
        let restored = restorer.restore_image(&decoded)?;
        let next = pack_indices(&codec.encode_indices(&restored)?)?;
        image = Some(restored);
        if next == current {
            break;
        }
        current = next;
    }
    Ok((current, image.expect("at least one round")))
}
