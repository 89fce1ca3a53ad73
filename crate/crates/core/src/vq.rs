//! Codebook, nearest-codeword quantization and the VQ loss terms.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ndgrad::{Module, Scalar, Tape, Tensor, Var};

/// Indices must fit one payload byte.
pub const MAX_CODEBOOK_SIZE: usize = 256;

/// Row-major grid of codebook indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexGrid {
    pub rows: usize,
    pub cols: usize,
    pub indices: Vec<u16>,
}

impl IndexGrid {
    pub fn new(rows: usize, cols: usize, indices: Vec<u16>) -> Result<Self> {
        if rows * cols != indices.len() || rows == 0 || cols == 0 {
            return Err(invalid(format!(
                "index grid {rows}×{cols} cannot hold {} indices",
                indices.len()
            )));
        }
        Ok(Self { rows, cols, indices })
    }

    pub fn cells(&self) -> usize {
        self.indices.len()
    }
}

/// K×D table of codewords plus per-code usage counts since the last reset.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub entries: Tensor<T>,
    pub usage: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedGrid<T> {
    pub indices: IndexGrid,
    /// H×W×D selected codewords
    pub quantized: Tensor<T>,
    /// L2 distance from each latent to its codeword
    pub distances: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_finite() && self.beta.is_finite() && self.alpha >= 0.0 && self.beta >= 0.0 {
            Ok(())
        } else {
            Err(invalid(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )))
        }
    }
}

/// Outcome of [`reseed_dead_codes`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReseedStatus {
    Reseeded(Vec<usize>),
    /// No recent latents were supplied; nothing changed.
    NoRecentLatents,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

impl<T: Scalar> Codebook<T> {
    pub fn new(entries: Tensor<T>) -> Result<Self> {
        let k = match entries.shape() {
            &[k, _] => k,
            s => return Err(invalid(format!("codebook must be K×D, got {s:?}"))),
        };
        if k > MAX_CODEBOOK_SIZE {
            return Err(invalid(format!("codebook size {k} exceeds {MAX_CODEBOOK_SIZE}")));
        }
        if !entries.is_finite() {
            return Err(Error::NonFinite { op: "codebook" });
        }
        Ok(Self {
            entries,
            usage: vec![0; k],
        })
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.entries.data()[k * d..(k + 1) * d]
    }

    /// Closest codeword by squared L2 distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[T]) -> (usize, T) {
        let mut best = (0, sq_dist(v, self.row(0)));
        for k in 1..self.size() {
            let d = sq_dist(v, self.row(k));
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// Quantize an H×W×D latent grid and count codeword usage.
    pub fn quantize_nearest(&mut self, latents: &Tensor<T>) -> Result<QuantizedGrid<T>> {
        let q = self.quantize(latents)?;
        for &i in &q.indices.indices {
            self.usage[i as usize] += 1;
        }
        Ok(q)
    }

    /// [`Codebook::quantize_nearest`] without touching usage counts.
    pub fn quantize(&self, latents: &Tensor<T>) -> Result<QuantizedGrid<T>> {
        let (h, w, d) = match latents.shape() {
            &[h, w, d] => (h, w, d),
            s => return Err(invalid(format!("latents must be H×W×D, got {s:?}"))),
        };
        if d != self.dim() {
            return Err(Error::Shape {
                op: "quantize_nearest",
                left: latents.shape().to_vec(),
                right: self.entries.shape().to_vec(),
            });
        }
        let mut indices = Vec::with_capacity(h * w);
        let mut quantized = Vec::with_capacity(h * w * d);
        let mut distances = Vec::with_capacity(h * w);
        for v in latents.data().chunks(d) {
            let (k, dist) = self.nearest(v);
            indices.push(k as u16);
            quantized.extend_from_slice(self.row(k));
            distances.push(dist.sqrt());
        }
        Ok(QuantizedGrid {
            indices: IndexGrid::new(h, w, indices)?,
            quantized: Tensor::new(vec![h, w, d], quantized)?,
            distances,
        })
    }

    /// Nearest codes for an N×D×H×W batch, in (n, h, w) order.
    pub fn assign_nchw(&self, latents: &Tensor<T>) -> Result<Vec<usize>> {
        let (n, d, h, w) = latents.dims4("assign_nchw")?;
        if d != self.dim() {
            return Err(Error::Shape {
                op: "assign_nchw",
                left: latents.shape().to_vec(),
                right: self.entries.shape().to_vec(),
            });
        }
        let hw = h * w;
        let data = latents.data();
        let mut v = vec![T::zero(); d];
        let mut out = Vec::with_capacity(n * hw);
        for i in 0..n {
            for p in 0..hw {
                for (ch, slot) in v.iter_mut().enumerate() {
                    *slot = data[(i * d + ch) * hw + p];
                }
                out.push(self.nearest(&v).0);
            }
        }
        Ok(out)
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &k in indices {
            self.usage[k] += 1;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// Reorder codewords so that index bits follow a recursive split along
    /// each subset's principal axis: the top bit picks a half of the whole
    /// book, the next bit a half of that half, and so on. Codes whose indices
    /// differ only in low bits are near each other. At every split the half
    /// with more recorded usage gets bit 0. Returns `order[new] = old`.
    pub fn sort_by_bisection(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.size()).collect();
        self.bisect(&mut order);
        self.permute(&order);
        order
    }

    fn bisect(&self, ids: &mut [usize]) {
        if ids.len() < 2 {
            return;
        }
        let axis = self.principal_axis(ids);
        let proj = |k: usize| -> f64 { self.row(k).iter().zip(&axis).map(|(v, a)| v.f64() * a).sum() };
        // ties broken by old index keep the order deterministic
        ids.sort_by(|&a, &b| proj(a).total_cmp(&proj(b)).then(a.cmp(&b)));
        let mut split = ids.len().div_ceil(2);
        let mass = |part: &[usize]| part.iter().map(|&k| self.usage[k]).sum::<u64>();
        // the busier half takes bit 0, so frequent codes share mostly-zero bits
        if mass(&ids[split..]) > mass(&ids[..split]) {
            ids.rotate_left(split);
            split = ids.len() - split;
        }
        let (lo, hi) = ids.split_at_mut(split);
        self.bisect(lo);
        self.bisect(hi);
    }

    /// Leading eigenvector of the subset's covariance by power iteration.
    fn principal_axis(&self, ids: &[usize]) -> Vec<f64> {
        let d = self.dim();
        let n = ids.len() as f64;
        let mut mean = vec![0.0; d];
        for &k in ids {
            for (m, v) in mean.iter_mut().zip(self.row(k)) {
                *m += v.f64() / n;
            }
        }
        let centred: Vec<Vec<f64>> = ids
            .iter()
            .map(|&k| self.row(k).iter().zip(&mean).map(|(v, m)| v.f64() - m).collect())
            .collect();
        // start from the per-dimension spread so the result is deterministic
        let mut axis: Vec<f64> = (0..d)
            .map(|j| centred.iter().map(|c| c[j] * c[j]).sum::<f64>() + 1e-12)
            .collect();
        for _ in 0..64 {
            let mut next = vec![0.0; d];
            for c in &centred {
                let dot: f64 = c.iter().zip(&axis).map(|(x, a)| x * a).sum();
                for (nx, x) in next.iter_mut().zip(c) {
                    *nx += dot * x;
                }
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            axis = next.into_iter().map(|x| x / norm).collect();
        }
        axis
    }

    /// Renumber so that new code `i` is old code `order[i]`.
    pub fn permute(&mut self, order: &[usize]) {
        let d = self.dim();
        let mut entries = Vec::with_capacity(self.entries.len());
        for &old in order {
            entries.extend_from_slice(self.row(old));
        }
        self.usage = order.iter().map(|&old| self.usage[old]).collect();
        self.entries = Tensor::new(vec![order.len(), d], entries).expect("same shape");
    }
}

impl<T: Scalar> Module<T> for Codebook<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("codebook.entries".to_string(), &self.entries)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("codebook.entries".to_string(), &mut self.entries)]
    }
}

/// Decoder input: forward value of the codewords, gradient straight into the latents.
pub fn straight_through<T: Scalar>(tape: &mut Tape<T>, latents: Var, quantized: Var) -> Result<Var> {
    tape.straight_through(latents, quantized)
}

#[derive(Clone, Copy, Debug)]
pub struct VqLosses {
    /// mean (sg[z] − e)², moves codewords only
    pub embedding: Var,
    /// mean (z − sg[e])², moves the encoder only
    pub commitment: Var,
}

/// Embedding and commitment terms, as elementwise means over the latent tensor.
pub fn vq_loss<T: Scalar>(tape: &mut Tape<T>, latents: Var, quantized: Var) -> Result<VqLosses> {
    if tape.shape(latents) != tape.shape(quantized) {
        return Err(Error::Shape {
            op: "vq_loss",
            left: tape.shape(latents).to_vec(),
            right: tape.shape(quantized).to_vec(),
        });
    }
    let z_sg = tape.detach(latents)?;
    let e_sg = tape.detach(quantized)?;
    let embedding = tape.mse(z_sg, quantized)?;
    let commitment = tape.mse(latents, e_sg)?;
    Ok(VqLosses { embedding, commitment })
}

fn rows<T: Scalar>(samples: &Tensor<T>) -> Result<(usize, usize)> {
    match samples.shape() {
        &[n, d] => Ok((n, d)),
        s => Err(invalid(format!("samples must be N×D, got {s:?}"))),
    }
}

/// Lloyd's k-means from `k` distinct random samples. Empty clusters are
/// re-seeded from the sample farthest from its centre.
pub fn init_codebook_kmeans<T: Scalar>(
    samples: &Tensor<T>,
    k: usize,
    iterations: usize,
    seed: u64,
) -> Result<Codebook<T>> {
    let (n, d) = rows(samples)?;
    if n < k || k == 0 {
        return Err(invalid(format!("k-means needs at least K={k} samples, got {n}")));
    }
    if iterations == 0 {
        return Err(invalid("k-means needs at least one iteration"));
    }
    let x: Vec<f64> = samples.to_f64_vec();
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = sample(&mut rng, n, k).into_vec();
    picks.sort_unstable();
    let mut centers: Vec<f64> = picks.iter().flat_map(|&i| row(i).to_vec()).collect();
    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![0.0f64; n];
    for _ in 0..iterations {
        let mut changed = false;
        for i in 0..n {
            let xi = row(i);
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let dd: f64 = xi
                    .iter()
                    .zip(&centers[c * d..(c + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dd < best.1 {
                    best = (c, dd);
                }
            }
            if assign[i] != best.0 {
                changed = true;
            }
            assign[i] = best.0;
            dist[i] = best.1;
        }
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, &v) in sums[assign[i] * d..(assign[i] + 1) * d].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
                continue;
            }
            let far = (0..n)
                .filter(|&i| !taken[i])
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                })
                .expect("n >= k");
            taken[far] = true;
            dist[far] = 0.0;
            centers[c * d..(c + 1) * d].copy_from_slice(row(far));
            reseeded = true;
        }
        if !changed && !reseeded {
            break;
        }
    }
    let entries = Tensor::new(vec![k, d], centers.into_iter().map(T::of).collect())?;
    Codebook::new(entries)
}

/// Sum of squared distances from each sample to its nearest codeword.
pub fn inertia<T: Scalar>(samples: &Tensor<T>, codebook: &Codebook<T>) -> Result<f64> {
    let (_, d) = rows(samples)?;
    Ok(samples.data().chunks(d).map(|v| codebook.nearest(v).1.f64()).sum())
}

/// Replace every codeword used at most `threshold` times with a randomly
/// drawn latent from `recent` (row-major, D values per latent), then reset
/// all usage counts.
pub fn reseed_dead_codes<T: Scalar>(
    codebook: &mut Codebook<T>,
    recent: &[T],
    threshold: u64,
    seed: u64,
) -> Result<ReseedStatus> {
    let d = codebook.dim();
    if recent.len() % d != 0 {
        return Err(invalid(format!(
            "{} recent values do not split into rows of {d}",
            recent.len()
        )));
    }
    let n = recent.len() / d;
    if n == 0 {
        return Ok(ReseedStatus::NoRecentLatents);
    }
    let dead: Vec<usize> = (0..codebook.size())
        .filter(|&k| codebook.usage[k] <= threshold)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut donors: Vec<usize> = (0..n).collect();
    donors.shuffle(&mut rng);
    for (j, &k) in dead.iter().enumerate() {
        let src = donors[j % n];
        let row = recent[src * d..(src + 1) * d].to_vec();
        codebook.entries.data_mut()[k * d..(k + 1) * d].copy_from_slice(&row);
    }
    codebook.reset_usage();
    Ok(ReseedStatus::Reseeded(dead))
}
