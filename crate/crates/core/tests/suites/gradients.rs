//! Tape gradients against central differences in f64, for every layer kind
//! and for both training losses. Each check panics on failure.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqmark::autoenc::{CodecConfig, CodecModel, FeatureExtractor, FEATURE_SEED};
use vqmark::ndgrad::{
    grad_check, grad_check_params, grad_check_params_surrogate, BatchNorm2d, BatchStats, Conv2d, ConvTranspose2d,
    GradCheckReport, Linear, Module, Tape, Tensor, Var,
};
use vqmark::restore::{restoration_loss, RestorerConfig, RestorerModel};
use vqmark::vq::LossWeights;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Σ y·w for a fixed random w, so no output coordinate cancels another.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> vqmark::Result<Var> {
    let w = tape.constant(random(tape.shape(y), seed))?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn assert_ok(what: &str, r: &GradCheckReport) {
    assert!(r.checked > 0, "{what}: nothing checked {r:?}");
    assert!(r.excluded * 4 <= r.checked, "{what}: too many kinks {r:?}");
    assert!(r.max_rel_error < TOL, "{what}: {r:?}");
}

fn check_layer<M: Module<f64>>(
    what: &str,
    mut layer: M,
    input: Tensor<f64>,
    forward: impl Fn(&M, &mut Tape<f64>, Var) -> vqmark::Result<Var>,
) {
    let r = grad_check(
        |t, x| {
            let y = forward(&layer, t, x)?;
            project(t, y, 99)
        },
        &input,
        EPS,
    )
    .unwrap();
    assert_ok(&format!("{what} input"), &r);
    let r = grad_check_params(
        &mut layer,
        |t, l| {
            let x = t.constant(input.clone())?;
            let y = forward(l, t, x)?;
            project(t, y, 99)
        },
        EPS,
        64,
    )
    .unwrap();
    assert_ok(&format!("{what} params"), &r);
}

pub fn conv2d_stride_one_and_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for stride in [1, 2] {
        let conv = Conv2d::<f64>::new("c", 2, 3, 3, stride, &mut rng);
        check_layer(&format!("conv s{stride}"), conv, random(&[2, 2, 5, 5], 2), |l, t, x| {
            l.forward(t, x)
        });
    }
}

pub fn conv_transpose2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let deconv = ConvTranspose2d::<f64>::new("d", 2, 3, 3, 2, &mut rng);
    check_layer("deconv", deconv, random(&[2, 2, 3, 3], 4), |l, t, x| l.forward(t, x));
}

pub fn batch_norm_training_and_inference() {
    let mut bn = BatchNorm2d::<f64>::new("bn", 3);
    bn.absorb(&[0.2, -0.1, 0.4], &[0.7, 1.3, 0.9]);
    let input = random(&[3, 3, 2, 2], 5);
    for training in [true, false] {
        check_layer(
            &format!("bn training={training}"),
            bn.clone(),
            input.clone(),
            move |l, t, x| l.forward_collect(t, x, training, &mut BatchStats::default()),
        );
    }
}

pub fn linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lin = Linear::<f64>::new("fc", 5, 4, &mut rng);
    check_layer("linear", lin, random(&[3, 5], 7), |l, t, x| l.forward(t, x));
}

pub fn elementwise_and_reduction_ops() {
    let x = random(&[2, 2, 3, 3], 8);
    let other = random(&[2, 2, 3, 3], 9);
    let r = grad_check(
        |t, x| {
            let o = t.constant(other.clone())?;
            let a = t.relu(x)?;
            let b = t.clamp(x, -0.5, 0.5)?;
            let c = t.concat_channels(a, b)?;
            let l1 = t.l1(x, o)?;
            let mse = t.mse(x, o)?;
            let p = project(t, c, 10)?;
            let s = t.add(l1, mse)?;
            t.add(p, s)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert_ok("elementwise", &r);
}

fn tiny_codec() -> CodecConfig {
    CodecConfig {
        image_size: 8,
        channels: 1,
        grid: 4,
        codebook_size: 4,
        dim: 3,
        width: 2,
        weights: LossWeights { alpha: 1.0, beta: 0.25 },
    }
}

/// The tape gradient of the codec loss is the straight-through one. Its
/// finite-difference reference is a surrogate built from primitive ops in
/// which the code assignment, q − z and both stop-gradient operands are
/// frozen at the current parameters:
///   feature(x, dec(z + (q₀ − z₀))) + α·mse(z₀, e[idx₀]) + β·mse(z, q₀)
pub fn codec_total_loss() {
    let mut model = CodecModel::<f64>::new(tiny_codec(), 11).unwrap();
    let extractor = FeatureExtractor::<f64>::new(1, FEATURE_SEED);
    let image = random(&[1, 1, 8, 8], 12).map(|v| 0.5 + 0.4 * v);
    // Seed the codebook from encoder outputs so several codes are in play.
    let mut tape = Tape::new();
    let x = tape.constant(image.clone()).unwrap();
    let z = model.encode(&mut tape, x, false, &mut BatchStats::default()).unwrap();
    let zv = tape.value(z).to_f64_vec();
    for k in 0..4 {
        for d in 0..3 {
            model.codebook.entries.data_mut()[k * 3 + d] = zv[d * 16 + k * 5] + 0.01 * (k + d) as f64;
        }
    }

    let mut tape = Tape::new();
    let x = tape.constant(image.clone()).unwrap();
    let pass = model
        .forward_loss(&mut tape, &extractor, x, false, &mut BatchStats::default())
        .unwrap();
    let idx0 = pass.indices.clone();
    assert!(idx0.iter().any(|&i| i != idx0[0]), "all cells on one code: {idx0:?}");
    let z0 = tape.value(pass.latents).clone();
    let table = tape.constant(model.codebook.entries.clone()).unwrap();
    let q = tape.gather_nchw(table, &idx0, 1, 4, 4).unwrap();
    let q0 = tape.value(q).clone();
    let delta = Tensor::new(
        z0.shape().to_vec(),
        q0.data().iter().zip(z0.data()).map(|(q, z)| q - z).collect(),
    )
    .unwrap();
    let weights = tiny_codec().weights;

    let r = grad_check_params_surrogate(
        &mut model,
        |t, m| {
            let x = t.constant(image.clone())?;
            Ok(m.forward_loss(t, &extractor, x, false, &mut BatchStats::default())?
                .loss
                .total)
        },
        |t, m| {
            let stats = &mut BatchStats::default();
            let x = t.constant(image.clone())?;
            let z = m.encode(t, x, false, stats)?;
            let table = t.param("codebook.entries", &m.codebook.entries)?;
            let e = t.gather_nchw(table, &idx0, 1, 4, 4)?;
            let d = t.constant(delta.clone())?;
            let st = t.add(z, d)?;
            let y = m.decode(t, st, false, stats)?;
            let feature = extractor.loss(t, x, y)?;
            let z_frozen = t.constant(z0.clone())?;
            let q_frozen = t.constant(q0.clone())?;
            let emb = t.mse(z_frozen, e)?;
            let com = t.mse(z, q_frozen)?;
            let emb = t.scale(emb, weights.alpha)?;
            let com = t.scale(com, weights.beta)?;
            let vq = t.add(emb, com)?;
            t.add(feature, vq)
        },
        EPS,
        24,
    )
    .unwrap();
    assert_ok("codec loss", &r);
}

pub fn restorer_loss() {
    let mut model = RestorerModel::<f64>::new(RestorerConfig { channels: 1, width: 2 }, 13).unwrap();
    let extractor = FeatureExtractor::<f64>::new(1, FEATURE_SEED);
    let input = random(&[2, 1, 8, 8], 14).map(|v| 0.5 + 0.4 * v);
    let target = random(&[2, 1, 8, 8], 15).map(|v| 0.5 + 0.4 * v);
    let loss = |t: &mut Tape<f64>, m: &RestorerModel<f64>, x: Var| -> vqmark::Result<Var> {
        let y = m.forward(t, x, true, &mut BatchStats::default())?;
        let target = t.constant(target.clone())?;
        restoration_loss(t, &extractor, y, target, 0.5)
    };
    let r = grad_check_params(
        &mut model,
        |t, m| {
            let x = t.constant(input.clone())?;
            loss(t, m, x)
        },
        EPS,
        24,
    )
    .unwrap();
    assert_ok("restorer params", &r);
    let r = grad_check(|t, x| loss(t, &model, x), &input, EPS).unwrap();
    assert_ok("restorer input", &r);
}

pub const ALL: &[(&str, fn())] = &[
    ("conv2d_stride_one_and_two", conv2d_stride_one_and_two),
    ("conv_transpose2d", conv_transpose2d),
    ("batch_norm_training_and_inference", batch_norm_training_and_inference),
    ("linear", linear),
    ("elementwise_and_reduction_ops", elementwise_and_reduction_ops),
    ("codec_total_loss", codec_total_loss),
    ("restorer_loss", restorer_loss),
];
