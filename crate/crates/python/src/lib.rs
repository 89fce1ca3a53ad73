//! Python bindings: images, payloads, the codec and restorer, the carrier
//! and the metrics.

use std::borrow::Cow;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use vqmark::autoenc::{CodecConfig, CodecModel, CodecTrainer, TrainConfig};
use vqmark::carrier::{self, AttackFamily, AttackSpec, CarrierConfig, ChannelModel};
use vqmark::eval::{self, TextureSpec};
use vqmark::image::ByteImage;
use vqmark::ndgrad::AdamConfig;
use vqmark::payload::{self, BitPayload, WhitenKey};
use vqmark::restore::{self, RestorerModel};
use vqmark::vq::{IndexGrid, LossWeights};

fn err(e: vqmark::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// 8-bit CHW image.
#[pyclass(name = "Image", module = "pyvqmark", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: ByteImage,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(channels: usize, height: usize, width: usize, data: &[u8]) -> PyResult<Self> {
        let inner = ByteImage::new(channels, height, width, data.to_vec()).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read_ppm(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ByteImage::read_ppm(path).map_err(err)?,
        })
    }

    fn write_ppm(&self, path: &str) -> PyResult<()> {
        self.inner.write_ppm(path).map_err(err)
    }

    /// (channels, height, width)
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    #[getter]
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(self.inner.data())
    }

    fn __repr__(&self) -> String {
        let (c, h, w) = self.inner.shape();
        format!("Image({c}x{h}x{w})")
    }
}

#[pyclass(name = "Payload", module = "pyvqmark", frozen)]
pub struct PyPayload {
    inner: BitPayload,
}

#[pymethods]
impl PyPayload {
    #[new]
    fn new(bits: Vec<bool>) -> PyResult<Self> {
        Ok(Self {
            inner: BitPayload::new(bits).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_hex(hex: &str, bits: usize) -> PyResult<Self> {
        Ok(Self {
            inner: BitPayload::from_hex(hex, bits).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: BitPayload::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn to_hex(&self) -> String {
        self.inner.to_hex()
    }

    #[getter]
    fn bits(&self) -> Vec<bool> {
        self.inner.bits().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Payload(bits={})", self.inner.len())
    }
}

/// Trained VQ autoencoder.
#[pyclass(name = "Codec", module = "pyvqmark", frozen)]
pub struct PyCodec {
    inner: CodecModel<f32>,
}

#[pymethods]
impl PyCodec {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CodecModel::load(path).map_err(err)?,
        })
    }

    /// Train from scratch on `images`.
    #[staticmethod]
    #[pyo3(signature = (images, image_size=64, grid=8, codebook_size=256, dim=64, width=32, epochs=50, batch=16, seed=1, lr=1e-3))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        images: Vec<PyImage>,
        image_size: usize,
        grid: usize,
        codebook_size: usize,
        dim: usize,
        width: usize,
        epochs: usize,
        batch: usize,
        seed: u64,
        lr: f64,
    ) -> PyResult<Self> {
        let channels = images.first().map_or(3, |i| i.inner.channels());
        let data: Vec<_> = images.iter().map(|i| i.inner.to_image()).collect();
        let config = CodecConfig {
            image_size,
            channels,
            grid,
            codebook_size,
            dim,
            width,
            weights: LossWeights::default(),
        };
        let train = TrainConfig {
            epochs,
            batch_size: batch,
            seed,
            optimizer: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let model = py.detach(|| -> vqmark::Result<CodecModel<f32>> {
            let mut trainer = CodecTrainer::new(CodecModel::new(config, seed)?, train)?;
            trainer.init_codebook(&data)?;
            for _ in 0..epochs {
                trainer.train_epoch(&data)?;
            }
            trainer.finish(&data)
        });
        Ok(Self {
            inner: model.map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn payload_bits(&self) -> usize {
        self.inner.config().payload_bits()
    }

    #[getter]
    fn grid(&self) -> usize {
        self.inner.config().grid
    }

    /// Row-major code indices of `image`.
    fn encode_indices(&self, image: &PyImage) -> PyResult<Vec<u16>> {
        let grid = self.inner.encode_indices(&image.inner.to_image()).map_err(err)?;
        Ok(grid.indices)
    }

    fn decode_indices(&self, indices: Vec<u16>) -> PyResult<PyImage> {
        let g = self.inner.config().grid;
        let grid = IndexGrid::new(g, g, indices).map_err(err)?;
        let img = self.inner.decode_indices(&grid).map_err(err)?;
        Ok(PyImage { inner: img.to_bytes() })
    }

    fn encode_payload(&self, image: &PyImage) -> PyResult<PyPayload> {
        let grid = self.inner.encode_indices(&image.inner.to_image()).map_err(err)?;
        Ok(PyPayload {
            inner: payload::pack_indices(&grid).map_err(err)?,
        })
    }

    fn decode_payload(&self, bits: &PyPayload) -> PyResult<PyImage> {
        let g = self.inner.config().grid;
        let grid = payload::unpack_indices(&bits.inner, g, g).map_err(err)?;
        let img = self.inner.decode_indices(&grid).map_err(err)?;
        Ok(PyImage { inner: img.to_bytes() })
    }

    fn reconstruct(&self, image: &PyImage) -> PyResult<PyImage> {
        let img = self.inner.reconstruct(&image.inner.to_image()).map_err(err)?;
        Ok(PyImage { inner: img.to_bytes() })
    }
}

#[pyclass(name = "Restorer", module = "pyvqmark", frozen)]
pub struct PyRestorer {
    inner: RestorerModel<f32>,
}

#[pymethods]
impl PyRestorer {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RestorerModel::load(path).map_err(err)?,
        })
    }

    fn restore(&self, image: &PyImage) -> PyResult<PyImage> {
        let img = self.inner.restore_image(&image.inner.to_image()).map_err(err)?;
        Ok(PyImage { inner: img.to_bytes() })
    }

    /// unpack → decode → restore → encode → pack, `rounds` times at most.
    #[pyo3(signature = (bits, codec, rounds=1))]
    fn refine(&self, bits: &PyPayload, codec: &PyCodec, rounds: usize) -> PyResult<(PyPayload, PyImage)> {
        let (b, img) = restore::refine_bits(&bits.inner, &codec.inner, &self.inner, rounds).map_err(err)?;
        Ok((PyPayload { inner: b }, PyImage { inner: img.to_bytes() }))
    }
}

fn carrier_config(r: usize, perm_seed: u64) -> CarrierConfig {
    CarrierConfig {
        replication: r,
        perm_seed,
        ..CarrierConfig::default()
    }
}

/// Whiten, embed and render `bits` into a 3×64×64 container.
#[pyfunction]
#[pyo3(signature = (bits, key=0x2a, r=8, perm_seed=0x5eed, seed=0))]
fn embed(bits: &PyPayload, key: u64, r: usize, perm_seed: u64, seed: u64) -> PyResult<PyImage> {
    let whitened = payload::whiten(&bits.inner, WhitenKey(key));
    let latent = carrier::embed_bits(&whitened, &carrier_config(r, perm_seed), seed).map_err(err)?;
    Ok(PyImage {
        inner: carrier::render_latent(&latent).map_err(err)?,
    })
}

/// Invert, extract and unwhiten `n_bits` from a container.
#[pyfunction]
#[pyo3(signature = (container, n_bits, key=0x2a, r=8, perm_seed=0x5eed))]
fn extract(container: &PyImage, n_bits: usize, key: u64, r: usize, perm_seed: u64) -> PyResult<PyPayload> {
    let latent = carrier::invert_render(&container.inner).map_err(err)?;
    let bits = carrier::extract_bits(&latent, n_bits, &carrier_config(r, perm_seed)).map_err(err)?;
    Ok(PyPayload {
        inner: payload::whiten(&bits, WhitenKey(key)),
    })
}

#[pyfunction]
#[pyo3(signature = (image, family, theta, seed=0))]
fn attack(image: &PyImage, family: &str, theta: f64, seed: u64) -> PyResult<PyImage> {
    let family: AttackFamily = family.parse().map_err(err)?;
    let spec = AttackSpec::new(family, theta, seed).map_err(err)?;
    Ok(PyImage {
        inner: carrier::apply_attack(&image.inner, &spec).map_err(err)?,
    })
}

/// Flip each bit with probability `p`.
#[pyfunction]
#[pyo3(signature = (bits, p, seed=0))]
fn bsc(bits: &PyPayload, p: f64, seed: u64) -> PyResult<PyPayload> {
    let out = carrier::transmit(&bits.inner, &ChannelModel::Bsc { p }, seed).map_err(err)?;
    Ok(PyPayload { inner: out })
}

#[pyfunction]
fn whiten(bits: &PyPayload, key: u64) -> PyPayload {
    PyPayload {
        inner: payload::whiten(&bits.inner, WhitenKey(key)),
    }
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    eval::psnr(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    eval::ssim(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn bit_accuracy(sent: &PyPayload, received: &PyPayload) -> PyResult<f64> {
    eval::bit_accuracy(&sent.inner, &received.inner).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (count=500, size=64, seed=1))]
fn generate_textures(count: usize, size: usize, seed: u64) -> PyResult<Vec<PyImage>> {
    let images = eval::generate_textures(&TextureSpec { count, size, seed }).map_err(err)?;
    Ok(images.into_iter().map(|i| PyImage { inner: i.to_bytes() }).collect())
}

/// Run an experiment JSON config; returns the number of CSV rows written.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_path: &str) -> PyResult<usize> {
    let config = eval::ExperimentConfig::load(config_path).map_err(err)?;
    let rows = py.detach(|| eval::run_experiment(&config)).map_err(err)?;
    Ok(rows.len())
}

#[pymodule]
fn pyvqmark(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyPayload>()?;
    m.add_class::<PyCodec>()?;
    m.add_class::<PyRestorer>()?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(bsc, m)?)?;
    m.add_function(wrap_pyfunction!(whiten, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(bit_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(generate_textures, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
