//! Attack-grid experiments: one CSV row per (image, family, θ, seed, method).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoenc::CodecModel;
use crate::carrier::{transmit, AttackFamily, AttackSpec, CarrierConfig, ChannelModel};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::payload::{pack_indices, unpack_indices, BitPayload};
use crate::restore::{refine_bits, RestorerModel};

use super::metrics::{bit_accuracy, psnr, ssim, Db};
use super::textures::{generate_textures, load_dataset, texture_file_name, TextureSpec};

pub const CSV_HEADER: &str = "method,attack,theta,seed,image,psnr_db,ssim,bit_acc,status";

/// What a grid entry attacks: the rendered container, or the bits directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridFamily {
    /// binary symmetric channel, θ = flip probability
    Bsc,
    /// one burst, θ = burst length as a fraction of the payload
    Burst,
    #[serde(untagged)]
    Attack(AttackFamily),
}

impl GridFamily {
    pub fn name(self) -> &'static str {
        match self {
            GridFamily::Bsc => "bsc",
            GridFamily::Burst => "burst",
            GridFamily::Attack(a) => a.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackGrid {
    pub family: GridFamily,
    pub thetas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// every `*.ppm` in a directory
    Dir(PathBuf),
    Synthetic(TextureSpec),
}

fn default_key() -> u64 {
    0x2a
}

fn default_rounds() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub codec: PathBuf,
    #[serde(default)]
    pub restorer: Option<PathBuf>,
    pub attacks: Vec<AttackGrid>,
    #[serde(default)]
    pub carrier: CarrierConfig,
    /// whitening key
    #[serde(default = "default_key")]
    pub key: u64,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSource,
    pub output: PathBuf,
    #[serde(default = "default_rounds")]
    pub refine_rounds: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attacks.iter().all(|g| g.thetas.is_empty()) {
            return Err(invalid("experiment needs at least one attack cell"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("experiment needs at least one seed"));
        }
        if self.refine_rounds == 0 {
            return Err(invalid("refine_rounds must be at least 1"));
        }
        for g in &self.attacks {
            for &theta in &g.thetas {
                match g.family {
                    GridFamily::Bsc | GridFamily::Burst if !(0.0..=1.0).contains(&theta) => {
                        return Err(invalid(format!("{} θ={theta} outside [0, 1]", g.family.name())))
                    }
                    GridFamily::Attack(a) => AttackSpec::new(a, theta, 0).map(|_| ())?,
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    /// rosmm: restored image and refined bits
    Restored,
    /// rosmm_w: raw decode of the received bits
    Raw,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Restored => "rosmm",
            Method::Raw => "rosmm_w",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub family: GridFamily,
    pub theta: f64,
    pub seed: u64,
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub bit_acc: f64,
    /// "ok", or the failing stage and its error
    pub status: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn csv_line(&self) -> String {
        let num = |v: f64, ok: bool| if ok { format!("{v:.6}") } else { String::new() };
        let ok = self.is_ok();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method.name(),
            self.family.name(),
            self.theta,
            self.seed,
            self.image,
            if ok {
                Db(self.psnr_db).to_string()
            } else {
                String::new()
            },
            num(self.ssim, ok),
            num(self.bit_acc, ok),
            self.status.replace([',', '\n'], ";"),
        )
    }
}

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.csv_line()).expect("writing to a String");
    }
    out
}

/// Means over seeds and images of every (method, family, θ) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub method: Method,
    pub family: GridFamily,
    pub theta: f64,
    pub rows: usize,
    pub failures: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub bit_acc: f64,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(GridFamily, u64, Method), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        cells
            .entry((r.family, r.theta.to_bits(), r.method))
            .or_default()
            .push(r);
    }
    let mut out: Vec<CellSummary> = cells
        .into_iter()
        .map(|((family, theta, method), rs)| {
            let ok: Vec<&&ResultRow> = rs.iter().filter(|r| r.is_ok()).collect();
            let mean = |f: fn(&ResultRow) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len().max(1) as f64;
            CellSummary {
                method,
                family,
                theta: f64::from_bits(theta),
                rows: rs.len(),
                failures: rs.len() - ok.len(),
                psnr_db: mean(|r| r.psnr_db),
                ssim: mean(|r| r.ssim),
                bit_acc: mean(|r| r.bit_acc),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.family, a.theta, a.method)
            .partial_cmp(&(b.family, b.theta, b.method))
            .expect("finite θ")
    });
    out
}

fn channel_for(config: &ExperimentConfig, family: GridFamily, theta: f64, seed: u64, bits: usize) -> ChannelModel {
    match family {
        GridFamily::Bsc => ChannelModel::Bsc { p: theta },
        GridFamily::Burst => ChannelModel::Burst {
            length: ((theta * bits as f64).round() as usize).max(1),
        },
        GridFamily::Attack(a) => ChannelModel::Carrier {
            key: config.key,
            carrier: config.carrier.clone(),
            attack: AttackSpec { family: a, theta, seed },
        },
    }
}

fn staged<T>(stage: &str, r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| format!("{stage} failed: {e}"))
}

/// Run every grid cell with already-loaded models and images.
pub fn run_grid(
    config: &ExperimentConfig,
    codec: &CodecModel<f32>,
    restorer: Option<&RestorerModel<f32>>,
    images: &[(String, Image)],
) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let mut cells: Vec<(GridFamily, f64)> = config
        .attacks
        .iter()
        .flat_map(|g| g.thetas.iter().map(move |&t| (g.family, t)))
        .collect();
    cells.sort_by(|a, b| (a.0.name(), a.1).partial_cmp(&(b.0.name(), b.1)).expect("finite θ"));
    cells.dedup();
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by(|&a, &b| images[a].0.cmp(&images[b].0));
    let g = codec.config().grid;
    let mut rows = Vec::new();
    for &i in &order {
        let (name, secret) = &images[i];
        let reference = secret.to_bytes();
        let sent = staged(
            "encode",
            codec.encode_indices(secret).and_then(|grid| pack_indices(&grid)),
        );
        for &(family, theta) in &cells {
            for &seed in &seeds {
                let blank = |method: Method, status: String| ResultRow {
                    method,
                    family,
                    theta,
                    seed,
                    image: name.clone(),
                    psnr_db: f64::NAN,
                    ssim: f64::NAN,
                    bit_acc: f64::NAN,
                    status,
                };
                let methods: &[Method] = if restorer.is_some() {
                    &[Method::Restored, Method::Raw]
                } else {
                    &[Method::Raw]
                };
                let sent = match &sent {
                    Ok(s) => s,
                    Err(e) => {
                        rows.extend(methods.iter().map(|&m| blank(m, e.clone())));
                        continue;
                    }
                };
                let channel = channel_for(config, family, theta, seed, sent.len());
                let received = match staged("transmit", transmit(sent, &channel, seed)) {
                    Ok(r) => r,
                    Err(e) => {
                        rows.extend(methods.iter().map(|&m| blank(m, e.clone())));
                        continue;
                    }
                };
                let score = |bits: &BitPayload, img: &Image| -> std::result::Result<(f64, f64, f64), String> {
                    let out = img.to_bytes();
                    Ok((
                        staged("metrics", psnr(&reference, &out))?,
                        staged("metrics", ssim(&reference, &out))?,
                        staged("metrics", bit_accuracy(sent, bits))?,
                    ))
                };
                for &method in methods {
                    let outcome = match method {
                        Method::Raw => staged(
                            "decode",
                            unpack_indices(&received, g, g).and_then(|grid| codec.decode_indices(&grid)),
                        )
                        .and_then(|img| score(&received, &img)),
                        Method::Restored => staged(
                            "restore",
                            refine_bits(
                                &received,
                                codec,
                                restorer.expect("restored rows need a restorer"),
                                config.refine_rounds,
                            ),
                        )
                        .and_then(|(bits, img)| score(&bits, &img)),
                    };
                    rows.push(match outcome {
                        Ok((p, s, a)) => ResultRow {
                            psnr_db: p,
                            ssim: s,
                            bit_acc: a,
                            ..blank(method, "ok".into())
                        },
                        Err(e) => blank(method, e),
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.image, a.family.name(), a.theta, a.seed, a.method.name())
            .partial_cmp(&(&b.image, b.family.name(), b.theta, b.seed, b.method.name()))
            .expect("finite θ")
    });
    Ok(rows)
}

pub fn load_images(source: &DatasetSource) -> Result<Vec<(String, Image)>> {
    match source {
        DatasetSource::Dir(dir) => load_dataset(dir),
        DatasetSource::Synthetic(spec) => Ok(generate_textures(spec)?
            .into_iter()
            .enumerate()
            .map(|(i, img)| (texture_file_name(i, spec.count), img))
            .collect()),
    }
}

/// Load models and images named by `config`, run the grid and write the CSV.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let codec = CodecModel::<f32>::load(&config.codec)
        .map_err(|e| Error::Checkpoint(format!("codec {}: {e}", config.codec.display())))?;
    let restorer = match &config.restorer {
        Some(p) => Some(
            RestorerModel::<f32>::load(p).map_err(|e| Error::Checkpoint(format!("restorer {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let images = load_images(&config.dataset)?;
    let rows = run_grid(config, &codec, restorer.as_ref(), &images)?;
    fs::write(&config.output, to_csv(&rows))?;
    Ok(rows)
}
