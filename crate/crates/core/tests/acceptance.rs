//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. The desk codec is trained once (criterion 5) and
//! reused by the restoration criteria.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqmark::autoenc::{CodecConfig, CodecModel, CodecTrainer, TrainConfig};
use vqmark::carrier::channel::bsc;
use vqmark::carrier::{embed_bits, extract_bits, invert_render, render_latent, AttackFamily, CarrierConfig};
use vqmark::eval::{
    generate_textures, psnr, run_experiment, run_grid, ssim, summarize, write_textures, AttackGrid, CellSummary,
    DatasetSource, ExperimentConfig, GridFamily, Method, TextureSpec,
};
use vqmark::image::Image;
use vqmark::payload::{dequantize_value, pack_indices, quantize_value, unpack_indices, whiten, BitPayload, WhitenKey};
use vqmark::restore::{
    refine_bits, train_restorer, CorruptionSampler, RestorerConfig, RestorerModel, RestorerTrainConfig,
};
use vqmark::vq::{IndexGrid, LossWeights};

const SEEDS: u64 = 20;
const TEST_IMAGES: usize = 20;
const KEY: u64 = 0x2a;

type Check = Result<String, String>;

fn timed(budget: Option<Duration>, f: impl FnOnce() -> Check) -> Check {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(msg)
    });
    let took = start.elapsed();
    let out = match (out, budget) {
        (Ok(m), Some(b)) if took > b => Err(format!("{m}; over the {b:?} budget")),
        (o, _) => o,
    };
    out.map(|m| format!("{m} [{:.1}s]", took.as_secs_f64()))
        .map_err(|m| format!("{m} [{:.1}s]", took.as_secs_f64()))
}

fn suite(cases: &[(&str, fn())]) -> Check {
    let mut failed = Vec::new();
    for (name, case) in cases {
        if catch_unwind(case).is_err() {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Ok(format!("{} checks", cases.len()))
    } else {
        Err(format!("failed: {}", failed.join(", ")))
    }
}

fn random_payload(n: usize, seed: u64) -> BitPayload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BitPayload::new((0..n).map(|_| rng.random()).collect()).unwrap()
}

fn accuracy(a: &BitPayload, b: &BitPayload) -> f64 {
    (a.len() - a.hamming(b).unwrap()) as f64 / a.len() as f64
}

fn lossless() -> Check {
    for b in 0..=255u8 {
        if quantize_value(dequantize_value(b)) != b {
            return Err(format!("byte {b} does not survive dequantize/quantize"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..500u64 {
        let (rows, cols) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let grid = IndexGrid::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(0..256u16)).collect(),
        )
        .unwrap();
        let bits = pack_indices(&grid).unwrap();
        if unpack_indices(&bits, rows, cols).unwrap() != grid || pack_indices(&grid).unwrap() != bits {
            return Err(format!("pack/unpack case {case}"));
        }
        let p = random_payload(rng.random_range(1..4096), case);
        let key = WhitenKey(rng.random());
        if whiten(&whiten(&p, key), key) != p {
            return Err(format!("whiten case {case}"));
        }
        if BitPayload::from_hex(&p.to_hex(), p.len()).unwrap() != p
            || BitPayload::from_file_string(&p.to_file_string()).unwrap() != p
        {
            return Err(format!("hex case {case}"));
        }
    }
    Ok("256 bytes, 500 grids, 500 payloads bit-exact".into())
}

fn clean_carrier() -> Check {
    let config = CarrierConfig::default();
    let n = config.cells() / config.replication;
    let mut total = 0.0;
    for seed in 0..SEEDS {
        let p = random_payload(n, seed);
        let z = embed_bits(&whiten(&p, WhitenKey(KEY)), &config, seed).unwrap();
        let back = extract_bits(&invert_render(&render_latent(&z).unwrap()).unwrap(), n, &config).unwrap();
        total += accuracy(&p, &whiten(&back, WhitenKey(KEY)));
    }
    let mean = total / SEEDS as f64;
    let msg = format!(
        "r={} {n} bits, mean accuracy {mean:.5} (need ≥ 0.999)",
        config.replication
    );
    if mean >= 0.999 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn distribution() -> Check {
    // r = 1 keeps the 16384 samples independent
    let config = CarrierConfig {
        channels: 4,
        replication: 1,
        ..CarrierConfig::default()
    };
    let p = whiten(&random_payload(16384, 11), WhitenKey(KEY));
    let z = embed_bits(&p, &config, 3).unwrap();
    let (d, pv) = common::ks_standard_normal(z.values());
    let msg = format!("n = {}, D = {d:.5}, p = {pv:.4} (need > 0.01)", z.len());
    if z.len() == 16384 && pv > 0.01 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn train_codec(train: &[Image]) -> vqmark::Result<CodecModel<f32>> {
    let config = TrainConfig::default();
    let mut trainer = CodecTrainer::new(CodecModel::new(CodecConfig::desk(), config.seed)?, config.clone())?;
    trainer.init_codebook(train)?;
    for _ in 0..config.epochs {
        trainer.train_epoch(train)?;
    }
    trainer.finish(train)
}

fn codec_quality(codec: &CodecModel<f32>, test: &[Image]) -> Check {
    let (mut p, mut s) = (0.0, 0.0);
    for img in test {
        let (a, b) = (img.to_bytes(), codec.reconstruct(img).unwrap().to_bytes());
        p += psnr(&a, &b).unwrap();
        s += ssim(&a, &b).unwrap();
    }
    let (p, s) = (p / test.len() as f64, s / test.len() as f64);
    let msg = format!(
        "{} test images, PSNR {p:.2} dB (≥ 18), SSIM {s:.3} (≥ 0.55)",
        test.len()
    );
    if p >= 18.0 && s >= 0.55 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn cell<'a>(cells: &'a [CellSummary], method: Method, family: GridFamily, theta: f64) -> &'a CellSummary {
    cells
        .iter()
        .find(|c| c.method == method && c.family == family && c.theta == theta)
        .expect("cell present")
}

const GAUSS: GridFamily = GridFamily::Attack(AttackFamily::GaussianNoise);
const CROP: GridFamily = GridFamily::Attack(AttackFamily::RandomCrop);
const GAUSS_THETAS: [f64; 3] = [0.05, 0.1, 0.2];
const CROP_THETAS: [f64; 3] = [0.2, 0.4, 0.8];

fn grid_config(attacks: Vec<AttackGrid>) -> ExperimentConfig {
    let defaults = ExperimentConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json"))
        .expect("configs/default.json");
    ExperimentConfig {
        attacks,
        seeds: (0..SEEDS).collect(),
        ..defaults
    }
}

fn restoration_ordering(cells: &[CellSummary]) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for theta in GAUSS_THETAS {
        let (r, w) = (
            cell(cells, Method::Restored, GAUSS, theta),
            cell(cells, Method::Raw, GAUSS, theta),
        );
        ok &= r.failures == 0 && w.failures == 0 && r.psnr_db >= w.psnr_db && r.ssim >= w.ssim;
        if theta == 0.1 {
            ok &= r.psnr_db - w.psnr_db >= 1.0;
        }
        lines.push(format!(
            "θ={theta}: PSNR {:.2}/{:.2} SSIM {:.3}/{:.3}",
            r.psnr_db, w.psnr_db, r.ssim, w.ssim
        ));
    }
    let msg = format!("restored/raw {} (≥ at every θ, +1 dB at 0.1)", lines.join("; "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// A contiguous burst (the bit-level analog of a crop) sized so that raw
/// accuracy sits at the reported 58 %.
fn refinement_ordering(codec: &CodecModel<f32>, restorer: &RestorerModel<f32>, images: &[(String, Image)]) -> Check {
    let theta = 1.0 - 0.58;
    let config = grid_config(vec![AttackGrid {
        family: GridFamily::Burst,
        thetas: vec![theta],
    }]);
    let rows = run_grid(&config, codec, Some(restorer), images).map_err(|e| e.to_string())?;
    let cells = summarize(&rows);
    let raw = cell(&cells, Method::Raw, GridFamily::Burst, theta).bit_acc;
    let refined = cell(&cells, Method::Restored, GridFamily::Burst, theta).bit_acc;
    let msg = format!("burst θ={theta:.2}: raw {raw:.4} (in [0.55, 0.65]), refined {refined:.4} (need refined > raw)");
    if (0.55..=0.65).contains(&raw) && refined > raw {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Refinement properties outside the numbered criteria: clean bits should be
/// a near fixed point, and extra rounds should not diverge.
fn refinement_notes(codec: &CodecModel<f32>, restorer: &RestorerModel<f32>, images: &[(String, Image)]) -> Vec<String> {
    let mut fixed = 0.0;
    for (_, img) in images {
        let bits = codec.encode_indices(img).and_then(|g| pack_indices(&g)).unwrap();
        let (out, _) = refine_bits(&bits, codec, restorer, 1).unwrap();
        fixed += accuracy(&bits, &out);
    }
    fixed /= images.len() as f64;
    let mut rounds = [0.0; 2];
    let mut count = 0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, img) in images {
            let bits = codec.encode_indices(img).and_then(|g| pack_indices(&g)).unwrap();
            let received = bsc(&bits, 0.1, &mut rng);
            for (slot, n) in rounds.iter_mut().zip([1, 3]) {
                *slot += accuracy(&bits, &refine_bits(&received, codec, restorer, n).unwrap().0);
            }
            count += 1;
        }
    }
    let (one, three) = (rounds[0] / count as f64, rounds[1] / count as f64);
    vec![
        format!("clean refinement fixed point: accuracy {fixed:.4} (target ≥ 0.99)"),
        format!("BSC 0.1 refinement: 1 round {one:.4}, 3 rounds {three:.4} (target 3 ≥ 1 − 0.02)"),
    ]
}

fn monotonic(cells: &[CellSummary]) -> Check {
    let mut bad = Vec::new();
    for (family, thetas, rising) in [(GAUSS, GAUSS_THETAS, false), (CROP, CROP_THETAS, true)] {
        for method in [Method::Restored, Method::Raw] {
            let series: Vec<&CellSummary> = thetas.iter().map(|&t| cell(cells, method, family, t)).collect();
            for pair in series.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let ordered = |x: f64, y: f64| if rising { y >= x } else { y <= x };
                if !ordered(a.bit_acc, b.bit_acc) || !ordered(a.psnr_db, b.psnr_db) {
                    bad.push(format!(
                        "{} {} θ {}→{}: acc {:.4}→{:.4} PSNR {:.2}→{:.2}",
                        method.name(),
                        family.name(),
                        a.theta,
                        b.theta,
                        a.bit_acc,
                        b.bit_acc,
                        a.psnr_db,
                        b.psnr_db
                    ));
                }
            }
        }
    }
    let acc: Vec<String> = GAUSS_THETAS
        .iter()
        .map(|&t| format!("{:.3}", cell(cells, Method::Raw, GAUSS, t).bit_acc))
        .chain(
            CROP_THETAS
                .iter()
                .map(|&t| format!("{:.3}", cell(cells, Method::Raw, CROP, t).bit_acc)),
        )
        .collect();
    if bad.is_empty() {
        Ok(format!("raw accuracy gaussian/crop {}", acc.join(" ")))
    } else {
        Err(bad.join("; "))
    }
}

/// Tiny end-to-end pipeline in `dir`: textures, codec, restorer, payload,
/// container, experiment CSV.
fn tiny_pipeline(dir: &Path) -> vqmark::Result<()> {
    let spec = TextureSpec {
        count: 8,
        size: 32,
        seed: 1,
    };
    write_textures(&spec, dir.join("data"))?;
    let data = generate_textures(&spec)?;
    let config = CodecConfig {
        image_size: 32,
        channels: 3,
        grid: 4,
        codebook_size: 16,
        dim: 4,
        width: 4,
        weights: LossWeights::default(),
    };
    let train = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut trainer = CodecTrainer::new(CodecModel::<f32>::new(config, 1)?, train.clone())?;
    trainer.init_codebook(&data)?;
    for _ in 0..train.epochs {
        trainer.train_epoch(&data)?;
    }
    let codec = trainer.finish(&data)?;
    codec.save(dir.join("codec.rsmm"))?;
    let mut restorer = RestorerModel::<f32>::new(RestorerConfig { channels: 3, width: 4 }, 2)?;
    let rc = RestorerTrainConfig {
        epochs: 1,
        batch_size: 4,
        ..RestorerTrainConfig::default()
    };
    train_restorer(&mut restorer, &codec, &data, &CorruptionSampler::default(), &rc)?;
    restorer.save(dir.join("restorer.rsmm"))?;
    let bits = pack_indices(&codec.encode_indices(&data[0])?)?;
    bits.save(dir.join("bits.txt"))?;
    let z = embed_bits(&whiten(&bits, WhitenKey(KEY)), &CarrierConfig::default(), 0)?;
    render_latent(&z)?.write_ppm(dir.join("container.ppm"))?;
    let experiment = ExperimentConfig {
        codec: dir.join("codec.rsmm"),
        restorer: Some(dir.join("restorer.rsmm")),
        attacks: vec![
            AttackGrid {
                family: GAUSS,
                thetas: vec![0.1],
            },
            AttackGrid {
                family: GridFamily::Bsc,
                thetas: vec![0.2],
            },
        ],
        carrier: CarrierConfig::default(),
        key: KEY,
        seeds: vec![0, 1],
        dataset: DatasetSource::Dir(dir.join("data")),
        output: dir.join("results.csv"),
        refine_rounds: 1,
    };
    run_experiment(&experiment)?;
    Ok(())
}

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    tiny_pipeline(a.path()).map_err(|e| e.to_string())?;
    tiny_pipeline(b.path()).map_err(|e| e.to_string())?;
    let files = [
        "codec.rsmm",
        "restorer.rsmm",
        "bits.txt",
        "container.ppm",
        "results.csv",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .collect();
    if differing.is_empty() {
        Ok(format!("{} identical", files.join(", ")))
    } else {
        Err(format!("differ: {}", differing.join(", ")))
    }
}

fn main() {
    // failing checks report through the result lines
    std::panic::set_hook(Box::new(|_| {}));
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let mut run = |n: usize, name: &'static str, budget: Option<u64>, f: &mut dyn FnMut() -> Check| {
        let r = timed(budget.map(Duration::from_secs), f);
        let (tag, msg) = match &r {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("{tag} {n:>2} {name}: {msg}");
        results.push((n, name, r));
    };

    run(1, "gradient suite", Some(60), &mut || suite(gradients::ALL));
    run(2, "lossless code paths", Some(5), &mut lossless);
    run(3, "clean carrier fidelity", Some(30), &mut clean_carrier);
    run(4, "distribution preservation", Some(10), &mut distribution);

    let train = generate_textures(&TextureSpec::default()).unwrap();
    let test = generate_textures(&TextureSpec {
        count: 100,
        seed: 2,
        ..TextureSpec::default()
    })
    .unwrap();
    let mut codec = None;
    run(5, "codec quality", None, &mut || {
        let c = train_codec(&train).map_err(|e| e.to_string())?;
        let r = codec_quality(&c, &test);
        codec = Some(c);
        r
    });

    let images: Vec<(String, Image)> = test
        .iter()
        .take(TEST_IMAGES)
        .enumerate()
        .map(|(i, img)| (format!("{i:05}"), img.clone()))
        .collect();
    let restorer = codec.as_ref().map(|c| {
        let mut r = RestorerModel::<f32>::new(RestorerConfig::default(), 2).unwrap();
        train_restorer(
            &mut r,
            c,
            &train,
            &CorruptionSampler::default(),
            &RestorerTrainConfig::default(),
        )
        .unwrap();
        r
    });
    let cells = match (&codec, &restorer) {
        (Some(c), Some(r)) => {
            let config = grid_config(vec![
                AttackGrid {
                    family: GAUSS,
                    thetas: GAUSS_THETAS.to_vec(),
                },
                AttackGrid {
                    family: CROP,
                    thetas: CROP_THETAS.to_vec(),
                },
            ]);
            run_grid(&config, c, Some(r), &images).ok().map(|rows| summarize(&rows))
        }
        _ => None,
    };
    let missing = || Err("needs the trained codec and restorer".to_string());
    run(6, "restoration ordering", None, &mut || {
        cells.as_deref().map_or_else(missing, restoration_ordering)
    });
    run(7, "bit-refinement ordering", None, &mut || match (&codec, &restorer) {
        (Some(c), Some(r)) => refinement_ordering(c, r, &images),
        _ => missing(),
    });
    run(8, "monotonic degradation", None, &mut || {
        cells.as_deref().map_or_else(missing, monotonic)
    });
    if let (Some(c), Some(r)) = (&codec, &restorer) {
        for note in refinement_notes(c, r, &images) {
            println!("NOTE    {note}");
        }
    }
    run(9, "oracle equivalence", Some(10), &mut || suite(oracles::ALL));
    run(10, "end-to-end determinism", None, &mut determinism);

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
