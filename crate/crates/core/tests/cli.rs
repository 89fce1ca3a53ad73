//! The `vqmark` binary end to end on a tiny codec.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vqmark::eval::CSV_HEADER;
use vqmark::payload::BitPayload;

fn vqmark(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqmark"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vqmark")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vqmark(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

/// Eight 32×32 textures and a one-epoch codec on a 4×4 grid (128 bits).
fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    ok(
        &dir,
        &[
            "gen-data", "--out", "data", "--count", "8", "--size", "32", "--seed", "1",
        ],
    );
    #[rustfmt::skip]
    ok(&dir, &[
        "train-vqvae", "--data", "data", "--out", "codec.rsmm", "--log", "log.csv",
        "--image-size", "32", "--grid", "4", "--codebook-size", "16", "--dim", "4", "--width", "4",
        "--epochs", "1", "--batch", "4",
    ]);
    Fixture { _tmp: tmp, dir }
}

fn accuracy(a: &BitPayload, b: &BitPayload) -> f64 {
    (a.len() - a.hamming(b).unwrap()) as f64 / a.len() as f64
}

#[test]
fn pipeline_round_trip_and_determinism() {
    let f = fixture();
    let dir = &f.dir;
    let log = std::fs::read_to_string(dir.join("log.csv")).unwrap();
    assert!(log.starts_with("epoch,batch,L_feature,L_embedding,L_commitment,L_total\n"));
    assert_eq!(log.lines().count(), 3);

    let stdout = ok(
        dir,
        &[
            "embed",
            "--vqvae",
            "codec.rsmm",
            "--secret",
            "data/00000.ppm",
            "--out-bits",
            "bits.txt",
            "--out-container",
            "c.ppm",
        ],
    );
    // resolved config first, defaults expanded
    assert!(stdout.starts_with('{'));
    assert!(
        stdout.contains("\"key\": \"0x2a\"") && stdout.contains("\"seed\": 0"),
        "{stdout}"
    );
    ok(
        dir,
        &[
            "extract",
            "--vqvae",
            "codec.rsmm",
            "--carrier",
            "c.ppm",
            "--out-image",
            "s.ppm",
            "--out-bits",
            "r.txt",
        ],
    );
    assert_eq!(
        std::fs::read(dir.join("bits.txt")).unwrap(),
        std::fs::read(dir.join("r.txt")).unwrap()
    );
    assert_eq!(BitPayload::load(dir.join("bits.txt")).unwrap().len(), 128);

    ok(
        dir,
        &[
            "attack", "--in", "c.ppm", "--attack", "jpeg", "--theta", "75", "--seed", "3", "--out", "j.ppm",
        ],
    );
    ok(
        dir,
        &[
            "train-restorer",
            "--vqvae",
            "codec.rsmm",
            "--data",
            "data",
            "--out",
            "restorer.rsmm",
            "--epochs",
            "1",
            "--batch",
            "4",
            "--width",
            "4",
        ],
    );
    ok(
        dir,
        &[
            "extract",
            "--vqvae",
            "codec.rsmm",
            "--carrier",
            "j.ppm",
            "--out-image",
            "sj.ppm",
            "--out-bits",
            "rj.txt",
            "--restorer",
            "restorer.rsmm",
            "--refine",
            "2",
        ],
    );
    assert_eq!(BitPayload::load(dir.join("rj.txt")).unwrap().len(), 128);

    let config = r#"{
        "codec": "codec.rsmm",
        "restorer": "restorer.rsmm",
        "attacks": [{"family": "gaussian_noise", "thetas": [0.1]}, {"family": "bsc", "thetas": [0.1]}],
        "seeds": [2, 1],
        "dataset": {"dir": "data"},
        "output": "a.csv"
    }"#;
    std::fs::write(dir.join("exp.json"), config).unwrap();
    ok(dir, &["evaluate", "--config", "exp.json"]);
    ok(dir, &["evaluate", "--config", "exp.json", "--out", "b.csv"]);
    let a = std::fs::read_to_string(dir.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.join("b.csv")).unwrap());
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    // 8 images × 2 cells × 2 seeds × 2 methods
    assert_eq!(lines.len(), 1 + 64);
    assert!(lines[1].starts_with("rosmm,bsc,0.1,1,00000.ppm,"), "{}", lines[1]);
    assert!(lines[2].starts_with("rosmm_w,bsc,0.1,1,00000.ppm,"), "{}", lines[2]);
    assert!(lines[1..].iter().all(|l| l.ends_with(",ok")));

    // same flags, same bytes
    let again = dir.join("again");
    std::fs::create_dir(&again).unwrap();
    #[rustfmt::skip]
    ok(&again, &[
        "train-vqvae", "--data", "../data", "--out", "codec.rsmm", "--image-size", "32", "--grid", "4",
        "--codebook-size", "16", "--dim", "4", "--width", "4", "--epochs", "1", "--batch", "4",
    ]);
    assert_eq!(
        std::fs::read(dir.join("codec.rsmm")).unwrap(),
        std::fs::read(again.join("codec.rsmm")).unwrap()
    );
    ok(
        &again,
        &[
            "embed",
            "--vqvae",
            "codec.rsmm",
            "--secret",
            "../data/00000.ppm",
            "--out-bits",
            "bits.txt",
            "--out-container",
            "c.ppm",
        ],
    );
    assert_eq!(
        std::fs::read(dir.join("c.ppm")).unwrap(),
        std::fs::read(again.join("c.ppm")).unwrap()
    );
}

#[test]
fn wrong_key_extracts_noise() {
    let f = fixture();
    let dir = &f.dir;
    let mut total = 0.0;
    for s in 0..20u64 {
        let secret = format!("data/{:05}.ppm", s % 8);
        let (good, bad, seed) = (format!("{:x}", 0x100 + s), format!("{:x}", 0x900 + s), s.to_string());
        ok(
            dir,
            &[
                "embed",
                "--vqvae",
                "codec.rsmm",
                "--secret",
                &secret,
                "--key",
                &good,
                "--seed",
                &seed,
                "--out-bits",
                "b.txt",
                "--out-container",
                "c.ppm",
            ],
        );
        ok(
            dir,
            &[
                "extract",
                "--vqvae",
                "codec.rsmm",
                "--carrier",
                "c.ppm",
                "--key",
                &bad,
                "--out-image",
                "s.ppm",
                "--out-bits",
                "r.txt",
            ],
        );
        let sent = BitPayload::load(dir.join("b.txt")).unwrap();
        total += accuracy(&sent, &BitPayload::load(dir.join("r.txt")).unwrap());
    }
    let mean = total / 20.0;
    assert!((0.45..=0.55).contains(&mean), "{mean}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = vqmark(dir, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(vqmark(dir, &["embed", "--vqvae", "x"]).status.code(), Some(1));
    assert_eq!(
        vqmark(
            dir,
            &["attack", "--in", "a", "--attack", "none", "--theta", "0", "--out", "b", "--bogus"]
        )
        .status
        .code(),
        Some(1)
    );
    let out = vqmark(
        dir,
        &[
            "attack",
            "--in",
            "missing.ppm",
            "--attack",
            "none",
            "--theta",
            "0",
            "--out",
            "b.ppm",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("read container failed"));
    assert!(!dir.join("b.ppm").exists());
    let out = vqmark(
        dir,
        &[
            "attack",
            "--in",
            "missing.ppm",
            "--attack",
            "jpeg",
            "--theta",
            "0",
            "--out",
            "b.ppm",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(vqmark(dir, &["--help"]).status.code(), Some(0));
}
