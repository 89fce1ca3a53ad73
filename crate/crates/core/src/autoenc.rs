//! Convolutional VQ autoencoder: encoder, codebook, decoder, the fixed
//! feature extractor behind the feature loss, and the training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::ndgrad::{
    cosine_lr, Adam, AdamConfig, BatchNorm2d, BatchStats, Checkpoint, Conv2d, ConvBlock, Module, RecordData, Scalar,
    Tape, Tensor, UpBlock, Var,
};
use crate::vq::{init_codebook_kmeans, reseed_dead_codes, vq_loss, Codebook, IndexGrid, LossWeights};

/// Seed of the frozen feature extractor shared by codec and restorer losses.
pub const FEATURE_SEED: u64 = 0x5EED_F00D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub image_size: usize,
    pub channels: usize,
    /// side of the latent grid
    pub grid: usize,
    pub codebook_size: usize,
    pub dim: usize,
    /// channels of the first encoder block; deeper blocks double up to 4×
    pub width: usize,
    pub weights: LossWeights,
}

impl CodecConfig {
    /// 64×64 images on an 8×8 grid of 256 codes.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            grid: 8,
            codebook_size: 256,
            dim: 64,
            width: 32,
            weights: LossWeights::default(),
        }
    }

    /// 256×256 images on a 16×16 grid, 2048 payload bits.
    pub fn paper() -> Self {
        Self {
            image_size: 256,
            channels: 3,
            grid: 16,
            codebook_size: 256,
            dim: 512,
            width: 64,
            weights: LossWeights::default(),
        }
    }

    /// Number of stride-2 blocks between image and grid.
    pub fn down_blocks(&self) -> Result<usize> {
        let ratio = self.image_size.checked_div(self.grid).unwrap_or(0);
        if self.grid == 0 || ratio < 2 || !ratio.is_power_of_two() || ratio * self.grid != self.image_size {
            return Err(invalid(format!(
                "image size {} must be the grid {} times a power of two ≥ 2",
                self.image_size, self.grid
            )));
        }
        Ok(ratio.trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.down_blocks()?;
        if self.channels == 0 || self.dim == 0 || self.width == 0 {
            return Err(invalid("channels, dim and width must be positive"));
        }
        if self.codebook_size == 0 || self.codebook_size > crate::vq::MAX_CODEBOOK_SIZE {
            return Err(invalid(format!("codebook size {} outside 1..=256", self.codebook_size)));
        }
        self.weights.validate()
    }

    /// Payload length of one encoded image.
    pub fn payload_bits(&self) -> usize {
        self.grid * self.grid * crate::payload::BITS_PER_INDEX
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let n = self.down_blocks().unwrap_or(1);
        (0..n).map(|i| self.width << i.min(2)).collect()
    }
}

/// Frozen random conv stack; its three taps define the feature loss.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    layers: Vec<Conv2d<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            layers: vec![
                // 32 ≥ 9·C outputs keep every 3×3 patch direction visible
                Conv2d::new("features.0", channels, 32, 3, 1, &mut rng),
                Conv2d::new("features.1", 32, 32, 3, 2, &mut rng),
                Conv2d::new("features.2", 32, 32, 3, 2, &mut rng),
            ],
        }
    }

    /// Outputs of the three convolutions, each taken before its ReLU.
    pub fn taps(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let mut taps = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h)?;
            }
            h = layer.forward_frozen(tape, h)?;
            taps.push(h);
        }
        Ok(taps)
    }

    /// Sum over taps of the mean absolute feature difference.
    pub fn loss(&self, tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
        let a = self.taps(tape, real)?;
        let b = self.taps(tape, fake)?;
        let mut total = None;
        for (fa, fb) in a.into_iter().zip(b) {
            let term = tape.l1(fa, fb)?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
        Ok(total.expect("three taps"))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub feature: Var,
    pub embedding: Var,
    pub commitment: Var,
    pub total: Var,
}

/// L_feature + α·L_embedding + β·L_commitment.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    feature: Var,
    embedding: Var,
    commitment: Var,
    weights: LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let e = tape.scale(embedding, T::of(weights.alpha))?;
    let c = tape.scale(commitment, T::of(weights.beta))?;
    let t = tape.add(feature, e)?;
    let total = tape.add(t, c)?;
    Ok(LossTerms {
        feature,
        embedding,
        commitment,
        total,
    })
}

/// Outputs of one differentiable pass over a batch.
#[derive(Clone, Debug)]
pub struct CodecPass {
    pub latents: Var,
    pub indices: Vec<usize>,
    pub reconstruction: Var,
    pub loss: LossTerms,
}

#[derive(Clone, Debug)]
pub struct CodecModel<T> {
    config: CodecConfig,
    pub encoder: Vec<ConvBlock<T>>,
    pub project: Conv2d<T>,
    pub expand: ConvBlock<T>,
    pub decoder: Vec<UpBlock<T>>,
    pub output: Conv2d<T>,
    pub codebook: Codebook<T>,
}

impl<T: Scalar> CodecModel<T> {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = config.encoder_widths();
        let n = widths.len();
        let mut encoder = Vec::with_capacity(n);
        let mut cin = config.channels;
        for (i, &w) in widths.iter().enumerate() {
            encoder.push(ConvBlock::new(&format!("encoder.{i}"), cin, w, 2, &mut rng));
            cin = w;
        }
        let project = Conv2d::new("encoder.project", cin, config.dim, 3, 1, &mut rng);
        let expand = ConvBlock::new("decoder.expand", config.dim, widths[n - 1], 1, &mut rng);
        let mut decoder = Vec::with_capacity(n);
        for j in 0..n {
            let cin = widths[n - 1 - j];
            let cout = if j + 1 == n {
                (config.width / 2).max(1)
            } else {
                widths[n - 2 - j]
            };
            decoder.push(UpBlock::new(&format!("decoder.up{j}"), cin, cout, &mut rng));
        }
        let last = (config.width / 2).max(1);
        let output = Conv2d::new("decoder.output", last, config.channels, 3, 1, &mut rng);
        let k = config.codebook_size;
        let bound = 1.0 / k as f64;
        let entries = (0..k * config.dim)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        let codebook = Codebook::new(Tensor::new(vec![k, config.dim], entries)?)?;
        Ok(Self {
            config,
            encoder,
            project,
            expand,
            decoder,
            output,
            codebook,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    /// N×C×H×W images to N×D×g×g latents.
    pub fn encode(&self, tape: &mut Tape<T>, x: Var, training: bool, stats: &mut BatchStats<T>) -> Result<Var> {
        let mut h = x;
        for block in &self.encoder {
            h = block.forward(tape, h, training, stats)?;
        }
        self.project.forward(tape, h)
    }

    /// N×D×g×g codewords to N×C×H×W images clamped to [0, 1].
    pub fn decode(&self, tape: &mut Tape<T>, q: Var, training: bool, stats: &mut BatchStats<T>) -> Result<Var> {
        let mut h = self.expand.forward(tape, q, training, stats)?;
        for block in &self.decoder {
            h = block.forward(tape, h, training, stats)?;
        }
        let y = self.output.forward(tape, h)?;
        let y = tape.shift(y, T::of(0.5))?;
        tape.clamp(y, T::zero(), T::one())
    }

    /// Encode, quantize with the straight-through estimator, decode, and
    /// assemble the total loss against `images`.
    pub fn forward_loss(
        &self,
        tape: &mut Tape<T>,
        extractor: &FeatureExtractor<T>,
        images: Var,
        training: bool,
        stats: &mut BatchStats<T>,
    ) -> Result<CodecPass> {
        let (n, _, _, _) = tape.value(images).dims4("forward_loss")?;
        let latents = self.encode(tape, images, training, stats)?;
        let indices = self.codebook.assign_nchw(tape.value(latents))?;
        let table = tape.param("codebook.entries", &self.codebook.entries)?;
        let g = self.config.grid;
        let quantized = tape.gather_nchw(table, &indices, n, g, g)?;
        let st = tape.straight_through(latents, quantized)?;
        let reconstruction = self.decode(tape, st, training, stats)?;
        let feature = extractor.loss(tape, images, reconstruction)?;
        let vq = vq_loss(tape, latents, quantized)?;
        let loss = total_loss(tape, feature, vq.embedding, vq.commitment, self.config.weights)?;
        Ok(CodecPass {
            latents,
            indices,
            reconstruction,
            loss,
        })
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let c = &self.config;
        if img.shape() != (c.channels, c.image_size, c.image_size) {
            return Err(invalid(format!(
                "image is {:?}, model expects {:?}",
                img.shape(),
                (c.channels, c.image_size, c.image_size)
            )));
        }
        if img.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "encode_image" });
        }
        Ok(())
    }

    /// Inference-mode latents, one g×g×D grid per image.
    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<Tensor<T>>> {
        for img in images {
            self.check_image(img)?;
        }
        let mut tape = Tape::new();
        let x = tape.constant(Image::batch(images)?)?;
        let z = self.encode(&mut tape, x, false, &mut BatchStats::default())?;
        let (n, d, g, _) = tape.value(z).dims4("encode")?;
        let data = tape.value(z).data();
        (0..n)
            .map(|i| {
                let mut out = Vec::with_capacity(d * g * g);
                for p in 0..g * g {
                    out.extend((0..d).map(|ch| data[(i * d + ch) * g * g + p]));
                }
                Tensor::new(vec![g, g, d], out)
            })
            .collect()
    }

    pub fn encode_image(&self, image: &Image) -> Result<Tensor<T>> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    pub fn encode_indices_batch(&self, images: &[&Image]) -> Result<Vec<IndexGrid>> {
        self.encode_batch(images)?
            .iter()
            .map(|z| Ok(self.codebook.quantize(z)?.indices))
            .collect()
    }

    pub fn encode_indices(&self, image: &Image) -> Result<IndexGrid> {
        Ok(self.encode_indices_batch(&[image])?.remove(0))
    }

    /// Decode g×g×D grids (usually codewords) to images.
    pub fn decode_batch(&self, grids: &[&Tensor<T>]) -> Result<Vec<Image>> {
        let g = self.config.grid;
        let d = self.config.dim;
        let mut data = Vec::with_capacity(grids.len() * d * g * g);
        for grid in grids {
            if grid.shape() != [g, g, d] {
                return Err(Error::Shape {
                    op: "decode_grid",
                    left: grid.shape().to_vec(),
                    right: vec![g, g, d],
                });
            }
            let v = grid.data();
            for ch in 0..d {
                data.extend((0..g * g).map(|p| v[p * d + ch]));
            }
        }
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![grids.len(), d, g, g], data)?)?;
        let y = self.decode(&mut tape, q, false, &mut BatchStats::default())?;
        Image::unbatch(tape.value(y))
    }

    pub fn decode_grid(&self, quantized: &Tensor<T>) -> Result<Image> {
        Ok(self.decode_batch(&[quantized])?.remove(0))
    }

    /// Look up codewords for each grid and decode. Indices at or beyond the
    /// codebook size (possible after channel errors when K < 256) wrap
    /// modulo K.
    pub fn decode_indices_batch(&self, grids: &[&IndexGrid]) -> Result<Vec<Image>> {
        let (g, d, k) = (self.config.grid, self.config.dim, self.codebook.size());
        let mut tensors = Vec::with_capacity(grids.len());
        for grid in grids {
            if (grid.rows, grid.cols) != (g, g) {
                return Err(invalid(format!(
                    "index grid {}×{} does not match {g}×{g}",
                    grid.rows, grid.cols
                )));
            }
            let mut data = Vec::with_capacity(g * g * d);
            for &i in &grid.indices {
                data.extend_from_slice(self.codebook.row(i as usize % k));
            }
            tensors.push(Tensor::new(vec![g, g, d], data)?);
        }
        self.decode_batch(&tensors.iter().collect::<Vec<_>>())
    }

    pub fn decode_indices(&self, grid: &IndexGrid) -> Result<Image> {
        Ok(self.decode_indices_batch(&[grid])?.remove(0))
    }

    /// Encode, quantize and decode in inference mode.
    pub fn reconstruct(&self, image: &Image) -> Result<Image> {
        self.decode_indices(&self.encode_indices(image)?)
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut v: Vec<&mut BatchNorm2d<T>> = self.encoder.iter_mut().map(|b| &mut b.norm).collect();
        v.push(&mut self.expand.norm);
        v.extend(self.decoder.iter_mut().map(|b| &mut b.norm));
        v
    }

    pub fn absorb_stats(&mut self, stats: BatchStats<T>) {
        stats.apply(self.norms_mut());
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let c = &self.config;
        let mut ck = Checkpoint::new();
        for (name, v) in [
            ("config.image_size", c.image_size as f64),
            ("config.channels", c.channels as f64),
            ("config.grid", c.grid as f64),
            ("config.codebook_size", c.codebook_size as f64),
            ("config.dim", c.dim as f64),
            ("config.width", c.width as f64),
            ("config.alpha", c.weights.alpha),
            ("config.beta", c.weights.beta),
        ] {
            ck.push_meta(name, v)?;
        }
        ck.push_module(self)?;
        ck.push(crate::ndgrad::Record {
            name: "codebook.usage".into(),
            dims: vec![self.codebook.size() as u32],
            data: RecordData::F64(self.codebook.usage.iter().map(|&u| u as f64).collect()),
        })?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let int = |name: &str| -> Result<usize> {
            let v = ck.meta(name)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Checkpoint(format!("`{name}` is not a count: {v}")));
            }
            Ok(v as usize)
        };
        let config = CodecConfig {
            image_size: int("config.image_size")?,
            channels: int("config.channels")?,
            grid: int("config.grid")?,
            codebook_size: int("config.codebook_size")?,
            dim: int("config.dim")?,
            width: int("config.width")?,
            weights: LossWeights {
                alpha: ck.meta("config.alpha")?,
                beta: ck.meta("config.beta")?,
            },
        };
        let mut model = Self::new(config, 0)?;
        ck.load_module(&mut model)?;
        let usage = ck.tensor::<f64>("codebook.usage")?;
        if usage.len() != model.codebook.size() {
            return Err(Error::Checkpoint("codebook.usage length mismatch".into()));
        }
        model.codebook.usage = usage.data().iter().map(|&u| u as u64).collect();
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl<T: Scalar> Module<T> for CodecModel<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut p = Vec::new();
        for b in &self.encoder {
            p.extend(b.params());
        }
        p.extend(self.project.params());
        p.extend(self.expand.params());
        for b in &self.decoder {
            p.extend(b.params());
        }
        p.extend(self.output.params());
        p.extend(self.codebook.params());
        p
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut p = Vec::new();
        for b in &mut self.encoder {
            p.extend(b.params_mut());
        }
        p.extend(self.project.params_mut());
        p.extend(self.expand.params_mut());
        for b in &mut self.decoder {
            p.extend(b.params_mut());
        }
        p.extend(self.output.params_mut());
        p.extend(self.codebook.params_mut());
        p
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut p = Vec::new();
        for b in &self.encoder {
            p.extend(b.buffers());
        }
        p.extend(self.expand.buffers());
        for b in &self.decoder {
            p.extend(b.buffers());
        }
        p
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut p = Vec::new();
        for b in &mut self.encoder {
            p.extend(b.buffers_mut());
        }
        p.extend(self.expand.buffers_mut());
        for b in &mut self.decoder {
            p.extend(b.buffers_mut());
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// codes used at most this often in an epoch are re-seeded; `None` disables
    pub reseed_threshold: Option<u64>,
    pub kmeans_samples: usize,
    pub kmeans_iterations: usize,
    /// learning rate at the last epoch as a fraction of the initial one;
    /// the rate follows a cosine between the two
    pub final_lr_fraction: f64,
}

impl TrainConfig {
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        cosine_lr(self.optimizer.lr, self.final_lr_fraction, epoch, self.epochs)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            seed: 1,
            optimizer: AdamConfig::default(),
            reseed_threshold: Some(0),
            kmeans_samples: 8192,
            kmeans_iterations: 10,
            final_lr_fraction: 0.05,
        }
    }
}

/// Loss components of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub epoch: usize,
    pub batch: usize,
    pub feature: f64,
    pub embedding: f64,
    pub commitment: f64,
    pub total: f64,
}

impl BatchLoss {
    pub const CSV_HEADER: &'static str = "epoch,batch,L_feature,L_embedding,L_commitment,L_total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.batch, self.feature, self.embedding, self.commitment, self.total
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub batches: Vec<BatchLoss>,
    pub reseeded: usize,
}

impl EpochReport {
    pub fn mean_total(&self) -> f64 {
        self.batches.iter().map(|b| b.total).sum::<f64>() / self.batches.len() as f64
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Shuffled batches of at least two images (a lone remainder joins the
/// previous batch so batch norm always sees two samples).
pub(crate) fn batches(len: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

/// Single-writer training state for a [`CodecModel`].
pub struct CodecTrainer<T: Scalar> {
    pub model: CodecModel<T>,
    extractor: FeatureExtractor<T>,
    optimizer: Adam<T>,
    config: TrainConfig,
    epoch: usize,
    recent: Vec<T>,
}

impl<T: Scalar> CodecTrainer<T> {
    pub fn new(model: CodecModel<T>, config: TrainConfig) -> Result<Self> {
        if config.batch_size < 2 {
            return Err(invalid("batch size must be at least 2 for batch norm"));
        }
        if !(0.0..=1.0).contains(&config.final_lr_fraction) {
            return Err(invalid("final_lr_fraction must lie in [0, 1]"));
        }
        let extractor = FeatureExtractor::new(model.config.channels, FEATURE_SEED);
        let optimizer = Adam::new(config.optimizer)?;
        Ok(Self {
            model,
            extractor,
            optimizer,
            config,
            epoch: 0,
            recent: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn check_dataset(&self, dataset: &[Image]) -> Result<()> {
        if dataset.len() < 2 {
            return Err(invalid("training needs at least two images"));
        }
        dataset.iter().try_for_each(|img| self.model.check_image(img))
    }

    /// k-means over latents of the untrained encoder (batch statistics, no
    /// running-average update).
    pub fn init_codebook(&mut self, dataset: &[Image]) -> Result<()> {
        self.check_dataset(dataset)?;
        let d = self.model.config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut vectors: Vec<T> = Vec::new();
        for batch in batches(dataset.len(), self.config.batch_size, &mut rng) {
            let imgs: Vec<&Image> = batch.iter().map(|&i| &dataset[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Image::batch(&imgs)?)?;
            let z = self.model.encode(&mut tape, x, true, &mut BatchStats::default())?;
            vectors.extend(nhwc_rows(tape.value(z))?);
        }
        let n = vectors.len() / d;
        let keep = self.config.kmeans_samples.min(n).max(self.model.codebook.size());
        if n < self.model.codebook.size() {
            return Err(invalid(format!(
                "{n} latent vectors cannot seed {} codes",
                self.model.codebook.size()
            )));
        }
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, n, keep).into_vec();
        picks.sort_unstable();
        let samples: Vec<T> = picks
            .iter()
            .flat_map(|&i| vectors[i * d..(i + 1) * d].to_vec())
            .collect();
        let samples = Tensor::new(vec![keep, d], samples)?;
        self.model.codebook = init_codebook_kmeans(
            &samples,
            self.model.codebook.size(),
            self.config.kmeans_iterations,
            self.config.seed,
        )?;
        Ok(())
    }

    /// One pass over `dataset` in a seeded shuffle; dead codes are re-seeded
    /// at the end from latents seen during the epoch.
    pub fn train_epoch(&mut self, dataset: &[Image]) -> Result<EpochReport> {
        self.check_dataset(dataset)?;
        let epoch = self.epoch;
        let mut rng = epoch_rng(self.config.seed, epoch);
        self.optimizer.set_learning_rate(self.config.learning_rate(epoch))?;
        let mut report = EpochReport {
            epoch,
            batches: Vec::new(),
            reseeded: 0,
        };
        self.model.codebook.reset_usage();
        self.recent.clear();
        let k = self.model.codebook.size();
        for (b, batch) in batches(dataset.len(), self.config.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let imgs: Vec<&Image> = batch.iter().map(|&i| &dataset[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Image::batch(&imgs)?)?;
            let mut stats = BatchStats::default();
            let pass = self
                .model
                .forward_loss(&mut tape, &self.extractor, x, true, &mut stats)
                .map_err(|e| Error::Training {
                    batch: b,
                    reason: e.to_string(),
                })?;
            if let Some(&bad) = pass.indices.iter().find(|&&i| i >= k) {
                return Err(Error::Training {
                    batch: b,
                    reason: format!("index {bad} outside codebook of {k}"),
                });
            }
            let loss = BatchLoss {
                epoch,
                batch: b,
                feature: tape.value(pass.loss.feature).item().f64(),
                embedding: tape.value(pass.loss.embedding).item().f64(),
                commitment: tape.value(pass.loss.commitment).item().f64(),
                total: tape.value(pass.loss.total).item().f64(),
            };
            if !loss.total.is_finite() {
                return Err(Error::Training {
                    batch: b,
                    reason: format!("non-finite loss {loss:?}"),
                });
            }
            let rows = nhwc_rows(tape.value(pass.latents))?;
            let grads = tape.backward(pass.loss.total).map_err(|e| Error::Training {
                batch: b,
                reason: e.to_string(),
            })?;
            self.optimizer.step(self.model.params_mut(), &grads)?;
            self.model.absorb_stats(stats);
            self.model.codebook.record_usage(&pass.indices);
            self.recent.extend(rows);
            log::debug!("epoch {epoch} batch {b} total {:.5}", loss.total);
            report.batches.push(loss);
        }
        if let Some(threshold) = self.config.reseed_threshold {
            let usage = self.model.codebook.usage.clone();
            if let crate::vq::ReseedStatus::Reseeded(dead) =
                reseed_dead_codes(&mut self.model.codebook, &self.recent, threshold, rng.random())?
            {
                report.reseeded = dead.len();
            }
            self.model.codebook.usage = usage;
        }
        self.recent.clear();
        self.epoch += 1;
        Ok(report)
    }

    /// Count code usage over `dataset` in inference mode, renumber the
    /// codebook by principal-axis bisection so that a flipped low bit lands
    /// on a similar code, and hand back the model.
    pub fn finish(mut self, dataset: &[Image]) -> Result<CodecModel<T>> {
        self.model.codebook.reset_usage();
        for chunk in dataset.chunks(self.config.batch_size) {
            let imgs: Vec<&Image> = chunk.iter().collect();
            for grid in self.model.encode_indices_batch(&imgs)? {
                let idx: Vec<usize> = grid.indices.iter().map(|&i| i as usize).collect();
                self.model.codebook.record_usage(&idx);
            }
        }
        self.model.codebook.sort_by_bisection();
        Ok(self.model)
    }
}

/// N×D×H×W latents as row-major (n, h, w) rows of D values.
fn nhwc_rows<T: Scalar>(z: &Tensor<T>) -> Result<Vec<T>> {
    let (n, d, h, w) = z.dims4("latents")?;
    let hw = h * w;
    let data = z.data();
    let mut out = Vec::with_capacity(z.len());
    for i in 0..n {
        for p in 0..hw {
            out.extend((0..d).map(|ch| data[(i * d + ch) * hw + p]));
        }
    }
    Ok(out)
}
