//! Planar images and binary PPM (P6) files.

use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::ndgrad::{Scalar, Tensor};

/// Planar C×H×W float image, values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Planar C×H×W 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ByteImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

fn check_dims(channels: usize, height: usize, width: usize, len: usize) -> Result<()> {
    if channels == 0 || height == 0 || width == 0 || channels * height * width != len {
        return Err(invalid(format!(
            "image {channels}×{height}×{width} cannot hold {len} values"
        )));
    }
    Ok(())
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(channels, height, width, data.len())?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Scale to [0, 255], round half away from zero and clamp.
    pub fn to_bytes(&self) -> ByteImage {
        ByteImage {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| (v as f64 * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }

    /// Stack images into an N×C×H×W tensor.
    pub fn batch<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| invalid("empty image batch"))?;
        let (c, h, w) = first.shape();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.shape() != (c, h, w) {
                return Err(invalid(format!(
                    "batch mixes image shapes {:?} and {:?}",
                    (c, h, w),
                    img.shape()
                )));
            }
            data.extend(img.data.iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(vec![images.len(), c, h, w], data)
    }

    /// Split an N×C×H×W tensor back into images.
    pub fn unbatch<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Image>> {
        let (n, c, h, w) = t.dims4("unbatch")?;
        let per = c * h * w;
        (0..n)
            .map(|i| {
                let data = t.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|v| v.f64() as f32)
                    .collect();
                Image::new(c, h, w, data)
            })
            .collect()
    }
}

impl ByteImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(channels, height, width, data.len())?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: u8) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_image(&self) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    /// Binary PPM encoding; requires three channels.
    pub fn to_ppm(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(invalid(format!("PPM needs 3 channels, image has {}", self.channels)));
        }
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(header.len() + 3 * plane);
        out.extend_from_slice(header.as_bytes());
        for p in 0..plane {
            for c in 0..3 {
                out.push(self.data[c * plane + p]);
            }
        }
        Ok(out)
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("unsupported PPM magic {:?}", fields[0])));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("PPM maxval must be 255, got {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let plane = width * height;
        if bytes.len() < pos || bytes.len() - pos != 3 * plane {
            return Err(Error::Format(format!(
                "PPM raster has {} bytes, expected {}",
                bytes.len().saturating_sub(pos),
                3 * plane
            )));
        }
        let raster = &bytes[pos..];
        let mut data = vec![0u8; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = raster[3 * p + c];
            }
        }
        ByteImage::new(3, height, width, data)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_ppm()?)?;
        Ok(())
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ppm(&fs::read(path)?)
    }
}
