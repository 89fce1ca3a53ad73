//! Binary watermark payloads: index-grid packing, the adjacency-matrix path,
//! keyed whitening and the hex payload file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::ndgrad::{Scalar, Tensor};
use crate::vq::IndexGrid;

/// Bits emitted per codebook index.
pub const BITS_PER_INDEX: usize = 8;
/// Side of the resized adjacency matrix.
pub const ADJACENCY_SIZE: usize = 16;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Ordered, non-empty bit string.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitPayload {
    bits: Vec<bool>,
}

impl BitPayload {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(invalid("payload must hold at least one bit"));
        }
        Ok(Self { bits })
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::new(vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn flip(&mut self, i: usize) {
        self.bits[i] = !self.bits[i];
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Number of differing positions.
    pub fn hamming(&self, other: &BitPayload) -> Result<usize> {
        if self.len() != other.len() {
            return Err(invalid(format!(
                "payload lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count())
    }

    pub fn xor(&self, other: &BitPayload) -> Result<BitPayload> {
        self.hamming(other)?;
        Ok(Self {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a ^ b).collect(),
        })
    }

    /// MSB-first bytes; a partial last byte is zero padded.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits
            .chunks(8)
            .map(|c| {
                c.iter()
                    .enumerate()
                    .fold(0u8, |acc, (j, &b)| acc | ((b as u8) << (7 - j)))
            })
            .collect()
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Format(format!(
                "{} bytes cannot hold exactly {len} bits",
                bytes.len()
            )));
        }
        Self::new((0..len).map(|i| bytes[i / 8] >> (7 - i % 8) & 1 == 1).collect())
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(2 * self.len().div_ceil(8));
        for b in self.to_bytes() {
            write!(s, "{b:02x}").expect("writing to a String");
        }
        s
    }

    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        if hex.len() % 2 != 0 || !hex.bytes().all(|c| c.is_ascii_hexdigit()) {
            return Err(Error::Format(format!("malformed hex payload of length {}", hex.len())));
        }
        let bytes: Vec<u8> = (0..hex.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).expect("validated hex"))
            .collect();
        Self::from_bytes(&bytes, len)
    }

    /// `bits=<n>` header line followed by one lowercase hex line.
    pub fn to_file_string(&self) -> String {
        format!("bits={}\n{}\n", self.len(), self.to_hex())
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let len = header
            .strip_prefix("bits=")
            .and_then(|n| n.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Format(format!("expected a bits=<n> header, got {header:?}")))?;
        let hex = lines.next().unwrap_or_default().trim();
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Format("trailing content after hex payload".into()));
        }
        Self::from_hex(hex, len)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file_string(&fs::read_to_string(path)?)
    }
}

/// Row-major traversal, each index MSB-first.
pub fn pack_indices(grid: &IndexGrid) -> Result<BitPayload> {
    let mut bits = Vec::with_capacity(grid.cells() * BITS_PER_INDEX);
    for &idx in &grid.indices {
        if idx as usize >= 1 << BITS_PER_INDEX {
            return Err(invalid(format!("index {idx} does not fit {BITS_PER_INDEX} bits")));
        }
        bits.extend((0..BITS_PER_INDEX).rev().map(|j| idx >> j & 1 == 1));
    }
    BitPayload::new(bits)
}

pub fn unpack_indices(payload: &BitPayload, rows: usize, cols: usize) -> Result<IndexGrid> {
    if payload.len() != rows * cols * BITS_PER_INDEX {
        return Err(invalid(format!(
            "{} bits do not unpack into a {rows}×{cols} grid",
            payload.len()
        )));
    }
    let indices = payload
        .bits()
        .chunks(BITS_PER_INDEX)
        .map(|c| c.iter().fold(0u16, |acc, &b| acc << 1 | b as u16))
        .collect();
    IndexGrid::new(rows, cols, indices)
}

/// Resized pairwise-cosine matrix of latent grid vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    /// ADJACENCY_SIZE² values, row-major
    pub values: Vec<f64>,
    /// grid vectors with zero norm whose rows and columns were set to 0
    pub zero_vectors: usize,
}

/// Full (H·W)² cosine matrix of an H×W×D grid, row-major. Zero vectors get
/// zero rows and columns; the count is returned alongside.
pub fn cosine_matrix<T: Scalar>(latents: &Tensor<T>) -> Result<(Vec<f64>, usize)> {
    let d = match latents.shape() {
        &[_, _, d] => d,
        s => return Err(invalid(format!("latents must be H×W×D, got {s:?}"))),
    };
    let v = latents.to_f64_vec();
    let n = v.len() / d;
    if n < 2 {
        return Err(invalid("adjacency needs at least two grid vectors"));
    }
    let norms: Vec<f64> = v
        .chunks(d)
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let zero = norms.iter().filter(|&&nm| nm == 0.0).count();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        m[i * n + i] = 1.0;
        for j in i + 1..n {
            if norms[j] == 0.0 {
                continue;
            }
            let dot: f64 = v[i * d..(i + 1) * d]
                .iter()
                .zip(&v[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            m[i * n + j] = c;
            m[j * n + i] = c;
        }
    }
    Ok((m, zero))
}

/// Bilinear resize of a rows×cols matrix with corner-aligned sampling.
pub fn resize_bilinear(src: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    let coord = |i: usize, out: usize, inp: usize| {
        if out == 1 || inp == 1 {
            0.0
        } else {
            i as f64 * (inp - 1) as f64 / (out - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for i in 0..out_rows {
        let y = coord(i, out_rows, rows);
        let y0 = (y.floor() as usize).min(rows - 1);
        let y1 = (y0 + 1).min(rows - 1);
        let fy = y - y0 as f64;
        for j in 0..out_cols {
            let x = coord(j, out_cols, cols);
            let x0 = (x.floor() as usize).min(cols - 1);
            let x1 = (x0 + 1).min(cols - 1);
            let fx = x - x0 as f64;
            let top = src[y0 * cols + x0] * (1.0 - fx) + src[y0 * cols + x1] * fx;
            let bottom = src[y1 * cols + x0] * (1.0 - fx) + src[y1 * cols + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub fn adjacency_matrix<T: Scalar>(latents: &Tensor<T>) -> Result<AdjacencyMatrix> {
    let (m, zero_vectors) = cosine_matrix(latents)?;
    if zero_vectors > 0 {
        log::warn!("{zero_vectors} zero-norm latent vectors given zero similarity");
    }
    let n = (m.len() as f64).sqrt() as usize;
    let values = resize_bilinear(&m, n, n, ADJACENCY_SIZE, ADJACENCY_SIZE)
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    Ok(AdjacencyMatrix { values, zero_vectors })
}

/// Byte code of one matrix entry: round((v+1)/2·255), half away from zero.
pub fn quantize_value(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

pub fn dequantize_value(b: u8) -> f64 {
    2.0 * b as f64 / 255.0 - 1.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedAdjacency {
    pub payload: BitPayload,
    /// entries outside [−1, 1] that were clamped
    pub clamped: usize,
}

pub fn quantize_adjacency(m: &AdjacencyMatrix) -> Result<QuantizedAdjacency> {
    let clamped = m.values.iter().filter(|v| !(-1.0..=1.0).contains(*v)).count();
    if clamped > 0 {
        log::warn!("{clamped} adjacency entries outside [-1, 1] clamped");
    }
    let bytes: Vec<u8> = m.values.iter().map(|&v| quantize_value(v)).collect();
    Ok(QuantizedAdjacency {
        payload: BitPayload::from_bytes(&bytes, bytes.len() * 8)?,
        clamped,
    })
}

pub fn dequantize_adjacency(p: &BitPayload) -> Result<AdjacencyMatrix> {
    if p.len() != ADJACENCY_SIZE * ADJACENCY_SIZE * 8 {
        return Err(invalid(format!(
            "adjacency payload needs {} bits, got {}",
            ADJACENCY_SIZE * ADJACENCY_SIZE * 8,
            p.len()
        )));
    }
    Ok(AdjacencyMatrix {
        values: p.to_bytes().into_iter().map(dequantize_value).collect(),
        zero_vectors: 0,
    })
}

/// 64-bit whitening key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WhitenKey(pub u64);

impl WhitenKey {
    /// Parse up to 16 hex digits, with or without a `0x` prefix.
    pub fn from_hex(s: &str) -> Result<Self> {
        let digits = s.strip_prefix("0x").unwrap_or(s);
        if digits.is_empty() || digits.len() > 16 {
            return Err(invalid(format!("key must be 1 to 16 hex digits, got {s:?}")));
        }
        u64::from_str_radix(digits, 16)
            .map(WhitenKey)
            .map_err(|_| invalid(format!("key is not hex: {s:?}")))
    }
}

fn splitmix64(z: u64) -> u64 {
    let z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Block i of the keystream is splitmix64(key + (i+1)·γ), emitted MSB-first.
pub fn keystream(key: WhitenKey, len: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(len);
    let mut state = key.0;
    while out.len() < len {
        state = state.wrapping_add(GOLDEN_GAMMA);
        let block = splitmix64(state);
        let take = (len - out.len()).min(64);
        out.extend((0..take).map(|j| block >> (63 - j) & 1 == 1));
    }
    out
}

/// XOR with the keyed keystream; applying it twice restores the input.
pub fn whiten(payload: &BitPayload, key: WhitenKey) -> BitPayload {
    let ks = keystream(key, payload.len());
    BitPayload {
        bits: payload.bits.iter().zip(ks).map(|(&b, k)| b ^ k).collect(),
    }
}
