//! `vqmark` command line. Every subcommand prints its resolved arguments as
//! JSON before doing anything, and exits 0 on success, 1 on bad usage and 2
//! when a stage fails.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Serialize, Serializer};

use crate::autoenc::{BatchLoss, CodecConfig, CodecModel, CodecTrainer, TrainConfig};
use crate::carrier::{
    apply_attack, embed_bits, extract_bits, invert_render, render_latent, AttackFamily, AttackSpec, CarrierConfig,
};
use crate::error::{Error, Result};
use crate::eval::{load_dataset, run_experiment, summarize, write_textures, Db, ExperimentConfig, TextureSpec};
use crate::image::{ByteImage, Image};
use crate::ndgrad::AdamConfig;
use crate::payload::{pack_indices, unpack_indices, whiten, BitPayload, WhitenKey};
use crate::restore::{
    refine_bits, train_restorer, CorruptionSampler, RestorerConfig, RestorerModel, RestorerTrainConfig,
};
use crate::vq::LossWeights;

/// Key used when `--key` is omitted.
pub const DEFAULT_KEY: u64 = 0x2a;
/// Latent noise seed used when `embed --seed` is omitted.
pub const DEFAULT_EMBED_SEED: u64 = 0;

fn parse_key(s: &str) -> std::result::Result<u64, String> {
    WhitenKey::from_hex(s).map(|k| k.0).map_err(|e| e.to_string())
}

/// Decimal, or hex with a `0x` prefix.
fn parse_u64(s: &str) -> std::result::Result<u64, String> {
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    }
    .map_err(|e| format!("{s:?}: {e}"))
}

fn as_hex<S: Serializer>(v: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:#x}"))
}

#[derive(Parser, Debug)]
#[command(
    name = "vqmark",
    version,
    about = "Hide images as VQ index payloads in Gaussian-sign watermark carriers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Write synthetic training textures as PPM files
    GenData(GenData),
    /// Train the VQ autoencoder
    TrainVqvae(TrainVqvae),
    /// Train the restorer against corrupted payloads
    TrainRestorer(TrainRestorerArgs),
    /// Encode a secret image and render it into a container
    Embed(Embed),
    /// Apply one attack to a container
    Attack(Attack),
    /// Recover bits and the secret image from a container
    Extract(Extract),
    /// Run an experiment config and write its CSV
    Evaluate(Evaluate),
}

#[derive(Args, Debug, Serialize)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainVqvae {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// per-batch loss CSV
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    #[arg(long, default_value_t = 256)]
    pub codebook_size: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.25)]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainRestorerArgs {
    #[arg(long)]
    pub vqvae: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub ber_lo: f64,
    #[arg(long, default_value_t = 0.4)]
    pub ber_hi: f64,
    /// disable the extra burst flips
    #[arg(long)]
    pub no_burst: bool,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 2)]
    pub seed: u64,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
}

/// Carrier keying shared by embed and extract.
#[derive(Args, Debug, Serialize)]
pub struct CarrierArgs {
    /// whitening key, up to 16 hex digits
    #[arg(long, value_parser = parse_key, default_value = "2a")]
    #[serde(serialize_with = "as_hex")]
    pub key: u64,
    /// replication factor
    #[arg(long, default_value_t = 8)]
    pub r: usize,
    #[arg(long, value_parser = parse_u64, default_value = "0x5eed")]
    #[serde(serialize_with = "as_hex")]
    pub perm_seed: u64,
}

impl CarrierArgs {
    fn carrier(&self) -> CarrierConfig {
        CarrierConfig {
            replication: self.r,
            perm_seed: self.perm_seed,
            ..CarrierConfig::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct Embed {
    #[arg(long)]
    pub vqvae: PathBuf,
    #[arg(long)]
    pub secret: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub carrier: CarrierArgs,
    /// seed of the latent noise
    #[arg(long, value_parser = parse_u64, default_value_t = DEFAULT_EMBED_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out_bits: PathBuf,
    #[arg(long)]
    pub out_container: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct Attack {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub attack: AttackFamily,
    #[arg(long)]
    pub theta: f64,
    #[arg(long, value_parser = parse_u64, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct Extract {
    #[arg(long)]
    pub vqvae: PathBuf,
    #[arg(long)]
    pub carrier: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub keying: CarrierArgs,
    #[arg(long)]
    pub out_image: PathBuf,
    #[arg(long)]
    pub out_bits: PathBuf,
    #[arg(long)]
    pub restorer: Option<PathBuf>,
    /// refinement rounds, used with --restorer
    #[arg(long, default_value_t = 1)]
    pub refine: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct Evaluate {
    #[arg(long)]
    pub config: PathBuf,
    /// overrides the config's output path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A runtime failure tagged with the stage that produced it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.source)
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

type CliResult = std::result::Result<(), StageError>;

fn load_images(dir: &PathBuf) -> Result<Vec<Image>> {
    Ok(load_dataset(dir)?.into_iter().map(|(_, img)| img).collect())
}

fn gen_data(a: &GenData) -> CliResult {
    let spec = TextureSpec {
        count: a.count,
        size: a.size,
        seed: a.seed,
    };
    let paths = write_textures(&spec, &a.out).stage("gen-data")?;
    println!("wrote {} textures to {}", paths.len(), a.out.display());
    Ok(())
}

fn train_vqvae(a: &TrainVqvae) -> CliResult {
    let data = load_images(&a.data).stage("load data")?;
    let config = CodecConfig {
        image_size: a.image_size,
        channels: a.channels,
        grid: a.grid,
        codebook_size: a.codebook_size,
        dim: a.dim,
        width: a.width,
        weights: LossWeights {
            alpha: a.alpha,
            beta: a.beta,
        },
    };
    let model = CodecModel::<f32>::new(config, a.seed).stage("build codec")?;
    let train = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        optimizer: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = CodecTrainer::new(model, train).stage("build trainer")?;
    trainer.init_codebook(&data).stage("init codebook")?;
    let mut log = format!("{}\n", BatchLoss::CSV_HEADER);
    for _ in 0..a.epochs {
        let report = trainer.train_epoch(&data).stage("train")?;
        log::info!(
            "epoch {} loss {:.4} reseeded {}",
            report.epoch,
            report.mean_total(),
            report.reseeded
        );
        for b in &report.batches {
            log.push_str(&b.csv_row());
            log.push('\n');
        }
    }
    let model = trainer.finish(&data).stage("finish")?;
    model.save(&a.out).stage("save checkpoint")?;
    if let Some(path) = &a.log {
        fs::write(path, log).map_err(Error::from).stage("write log")?;
    }
    println!("saved codec to {}", a.out.display());
    Ok(())
}

fn train_restorer_cmd(a: &TrainRestorerArgs) -> CliResult {
    let codec = CodecModel::<f32>::load(&a.vqvae).stage("load codec")?;
    let data = load_images(&a.data).stage("load data")?;
    let sampler = CorruptionSampler {
        ber_lo: a.ber_lo,
        ber_hi: a.ber_hi,
        burst: !a.no_burst,
    };
    let config = RestorerTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        optimizer: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        ..RestorerTrainConfig::default()
    };
    let rc = RestorerConfig {
        channels: codec.config().channels,
        width: a.width,
    };
    let mut model = RestorerModel::<f32>::new(rc, a.seed).stage("build restorer")?;
    let losses = train_restorer(&mut model, &codec, &data, &sampler, &config).stage("train")?;
    for (e, l) in losses.iter().enumerate() {
        log::info!("epoch {e} loss {l:.4}");
    }
    model.save(&a.out).stage("save checkpoint")?;
    println!("saved restorer to {}", a.out.display());
    Ok(())
}

fn embed(a: &Embed) -> CliResult {
    let codec = CodecModel::<f32>::load(&a.vqvae).stage("load codec")?;
    let secret = ByteImage::read_ppm(&a.secret).stage("read secret")?.to_image();
    let bits = codec
        .encode_indices(&secret)
        .and_then(|g| pack_indices(&g))
        .stage("encode")?;
    let whitened = whiten(&bits, WhitenKey(a.carrier.key));
    let latent = embed_bits(&whitened, &a.carrier.carrier(), a.seed).stage("embed")?;
    let container = render_latent(&latent).stage("render")?;
    bits.save(&a.out_bits).stage("write bits")?;
    container.write_ppm(&a.out_container).stage("write container")?;
    println!("embedded {} bits", bits.len());
    Ok(())
}

fn attack(a: &Attack) -> CliResult {
    let img = ByteImage::read_ppm(&a.input).stage("read container")?;
    let spec = AttackSpec::new(a.attack, a.theta, a.seed).stage("attack")?;
    apply_attack(&img, &spec)
        .and_then(|out| out.write_ppm(&a.out))
        .stage("attack")?;
    Ok(())
}

fn extract(a: &Extract) -> CliResult {
    let codec = CodecModel::<f32>::load(&a.vqvae).stage("load codec")?;
    let restorer = match &a.restorer {
        Some(p) => Some(RestorerModel::<f32>::load(p).stage("load restorer")?),
        None => None,
    };
    let container = ByteImage::read_ppm(&a.carrier).stage("read container")?;
    let latent = invert_render(&container).stage("invert")?;
    let n = codec.config().payload_bits();
    let received = extract_bits(&latent, n, &a.keying.carrier()).stage("extract")?;
    let bits = whiten(&received, WhitenKey(a.keying.key));
    let g = codec.config().grid;
    let (bits, image): (BitPayload, Image) = match &restorer {
        Some(r) => refine_bits(&bits, &codec, r, a.refine).stage("restore")?,
        None => {
            let img = unpack_indices(&bits, g, g)
                .and_then(|grid| codec.decode_indices(&grid))
                .stage("decode")?;
            (bits, img)
        }
    };
    bits.save(&a.out_bits).stage("write bits")?;
    image.to_bytes().write_ppm(&a.out_image).stage("write image")?;
    println!("extracted {} bits", bits.len());
    Ok(())
}

fn evaluate(a: &Evaluate) -> CliResult {
    let mut config = ExperimentConfig::load(&a.config).stage("load config")?;
    if let Some(out) = &a.out {
        config.output = out.clone();
    }
    println!("{}", serde_json::to_string_pretty(&config).unwrap_or_default());
    let rows = run_experiment(&config).stage("evaluate")?;
    println!("method,attack,theta,rows,failures,psnr_db,ssim,bit_acc");
    for s in summarize(&rows) {
        println!(
            "{},{},{},{},{},{},{:.4},{:.4}",
            s.method.name(),
            s.family.name(),
            s.theta,
            s.rows,
            s.failures,
            Db(s.psnr_db),
            s.ssim,
            s.bit_acc
        );
    }
    println!("wrote {} rows to {}", rows.len(), config.output.display());
    Ok(())
}

/// Parse `argv` (program name first), run it, and return the exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    println!("{}", serde_json::to_string_pretty(&cli.command).unwrap_or_default());
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainVqvae(a) => train_vqvae(a),
        Command::TrainRestorer(a) => train_restorer_cmd(a),
        Command::Embed(a) => embed(a),
        Command::Attack(a) => attack(a),
        Command::Extract(a) => extract(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
