//! Synthetic clustered KV planes and the KVT0 raw tensor format.
//!
//! KVT0 layout, little-endian:
//!
//! ```text
//! magic "KVT0" | dtype u8 (0 = f32, 1 = bf16) | n_planes u32 | n_tokens u32 | head_dim u32
//! then n_planes * n_tokens * head_dim values, plane-major then row-major
//! ```

use std::io::Write;
use std::path::Path;

use half::bf16;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{ChunkSpec, KVPlane, Matrix};

/// Parameters of [`gen_clustered_stream`].
#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams {
    pub n_chunks: usize,
    pub n_tokens: usize,
    pub head_dim: usize,
    pub n_clusters: usize,
    pub sigma_within: f64,
    pub sigma_between: f64,
    /// Translation of every cluster mean per chunk, along one fixed unit
    /// direction.
    pub drift: f64,
    pub outlier_channels: Vec<usize>,
    pub outlier_scale: f64,
    pub seed: u64,
}

impl StreamParams {
    /// 256 well-separated clusters (`σ_b/σ_w = 20`) in 4096 x 128 planes,
    /// with four outlier channels amplified 100x.
    pub fn preset() -> Self {
        Self {
            n_chunks: 1,
            n_tokens: 4096,
            head_dim: 128,
            n_clusters: 256,
            sigma_within: 0.05,
            sigma_between: 1.0,
            drift: 0.0,
            outlier_channels: vec![5, 37, 70, 101],
            outlier_scale: 100.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_chunks(mut self, n_chunks: usize, drift: f64) -> Self {
        self.n_chunks = n_chunks;
        self.drift = drift;
        self
    }

    pub fn with_shape(mut self, n_tokens: usize, head_dim: usize, n_clusters: usize) -> Self {
        self.n_tokens = n_tokens;
        self.head_dim = head_dim;
        self.n_clusters = n_clusters;
        self.outlier_channels.retain(|&c| c < head_dim);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadParams(m));
        if self.n_chunks == 0 || self.n_tokens == 0 || self.head_dim == 0 || self.n_clusters == 0 {
            return bad("counts and dimensions must be positive".into());
        }
        if !(self.sigma_between > 0.0 && self.sigma_between.is_finite()) {
            return bad(format!("sigma_between = {}", self.sigma_between));
        }
        if !(self.sigma_within >= 0.0 && self.sigma_within.is_finite()) {
            return bad(format!("sigma_within = {}", self.sigma_within));
        }
        if !(self.drift >= 0.0 && self.drift.is_finite()) {
            return bad(format!("drift = {}", self.drift));
        }
        if !(self.outlier_scale > 0.0 && self.outlier_scale.is_finite()) {
            return bad(format!("outlier_scale = {}", self.outlier_scale));
        }
        if let Some(c) = self.outlier_channels.iter().find(|&&c| c >= self.head_dim) {
            return bad(format!("outlier channel {c} outside [0, {})", self.head_dim));
        }
        Ok(())
    }
}

/// One generated plane with the generator's own cluster labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPlane {
    pub plane: KVPlane,
    pub labels: Vec<usize>,
}

fn chunk_seed(seed: u64, chunk: usize) -> u64 {
    seed ^ (chunk as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Gaussian mixture stream with per-cluster outlier channels and drift.
///
/// Cluster means are `N(0, σ_b²)` per channel. Each cluster amplifies its
/// own random half of `outlier_channels` by `outlier_scale`; the gain acts on
/// the mean, so within-cluster noise stays `σ_w` in every channel. Chunk `c`
/// shifts every mean by `c·drift·u` before the gain. Tokens cycle through all clusters in a seeded order, so
/// every cluster is present whenever `n_tokens ≥ n_clusters`.
pub fn gen_labeled_stream(p: &StreamParams) -> Result<Vec<LabeledPlane>> {
    p.validate()?;
    let (d, k) = (p.head_dim, p.n_clusters);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let between = Normal::new(0.0, p.sigma_between).map_err(|e| Error::BadParams(e.to_string()))?;
    let means: Vec<f64> = (0..k * d).map(|_| between.sample(&mut rng)).collect();
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let mut gain = vec![1.0f64; k * d];
    for c in 0..k {
        for &ch in &p.outlier_channels {
            if coin.sample(&mut rng) {
                gain[c * d + ch] = p.outlier_scale;
            }
        }
    }
    let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);

    (0..p.n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(p.seed, chunk));
            let shift = chunk as f64 * p.drift;
            let mut labels: Vec<usize> = (0..p.n_tokens).map(|i| i % k).collect();
            labels.shuffle(&mut rng);
            let mut data = Vec::with_capacity(p.n_tokens * d);
            for &c in &labels {
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let v = (means[c * d + j] + shift * dir[j]) * gain[c * d + j] + p.sigma_within * z;
                    // values are kept f32-representable, like real activation dumps
                    data.push(v as f32 as f64);
                }
            }
            let spec = ChunkSpec::new(p.n_tokens, d).with_chunk_index(chunk);
            Ok(LabeledPlane {
                plane: KVPlane::from_vec(spec, data)?,
                labels,
            })
        })
        .collect()
}

pub fn gen_clustered_stream(p: &StreamParams) -> Result<Vec<KVPlane>> {
    Ok(gen_labeled_stream(p)?.into_iter().map(|l| l.plane).collect())
}

/// Sum of squared distances of rows to the mean of their labelled group.
pub fn labeled_sse(x: &Matrix, labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let d = x.cols();
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (row, &l) in x.row_iter().zip(labels) {
        counts[l] += 1;
        for (s, &v) in sums[l * d..(l + 1) * d].iter_mut().zip(row) {
            *s += v;
        }
    }
    x.row_iter()
        .zip(labels)
        .map(|(row, &l)| {
            row.iter()
                .zip(&sums[l * d..(l + 1) * d])
                .map(|(&v, &s)| {
                    let e = v - s / counts[l] as f64;
                    e * e
                })
                .sum::<f64>()
        })
        .sum()
}

/// Element type of a KVT0 file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawDtype {
    F32 = 0,
    Bf16 = 1,
}

impl RawDtype {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(RawDtype::F32),
            1 => Ok(RawDtype::Bf16),
            c => Err(Error::UnknownDtype(c)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            RawDtype::F32 => 4,
            RawDtype::Bf16 => 2,
        }
    }
}

pub const KVT0_MAGIC: [u8; 4] = *b"KVT0";
pub const KVT0_HEADER_LEN: usize = 17;

/// Serializes planes of one common shape. With [`RawDtype::Bf16`] values
/// are rounded to nearest-even.
pub fn write_raw_tensor<W: Write>(mut w: W, planes: &[KVPlane], dtype: RawDtype) -> Result<()> {
    let (n, d) = planes.first().map_or((0, 0), |p| (p.n_tokens(), p.head_dim()));
    if let Some(p) = planes.iter().find(|p| p.n_tokens() != n || p.head_dim() != d) {
        return Err(Error::ShapeMismatch(format!(
            "plane {}x{} in a {n}x{d} tensor",
            p.n_tokens(),
            p.head_dim()
        )));
    }
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::ShapeMismatch(format!("dimension {v} exceeds u32")));
    let mut buf = Vec::with_capacity(KVT0_HEADER_LEN + planes.len() * n * d * dtype.width());
    buf.extend_from_slice(&KVT0_MAGIC);
    buf.push(dtype as u8);
    for v in [planes.len(), n, d] {
        buf.extend_from_slice(&dim(v)?.to_le_bytes());
    }
    for p in planes {
        for &v in p.data.as_slice() {
            match dtype {
                RawDtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                RawDtype::Bf16 => buf.extend_from_slice(&bf16::from_f64(v).to_le_bytes()),
            }
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn save_raw_tensor(path: impl AsRef<Path>, planes: &[KVPlane], dtype: RawDtype) -> Result<()> {
    write_raw_tensor(std::fs::File::create(path)?, planes, dtype)
}

/// Parses a KVT0 image. Plane `i` gets chunk index `i`.
pub fn read_raw_tensor(bytes: &[u8]) -> Result<Vec<KVPlane>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            needed: KVT0_HEADER_LEN,
            available: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != KVT0_MAGIC {
        return Err(Error::BadMagic {
            expected: KVT0_MAGIC,
            found,
        });
    }
    if bytes.len() < KVT0_HEADER_LEN {
        return Err(Error::Truncated {
            needed: KVT0_HEADER_LEN,
            available: bytes.len(),
        });
    }
    let dtype = RawDtype::from_code(bytes[4])?;
    let u = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (planes, n, d) = (u(5), u(9), u(13));
    let overflow = || Error::ShapeMismatch(format!("{planes}x{n}x{d} overflows"));
    let per_plane = n.checked_mul(d).ok_or_else(overflow)?;
    let needed = planes
        .checked_mul(per_plane)
        .and_then(|e| e.checked_mul(dtype.width()))
        .and_then(|b| b.checked_add(KVT0_HEADER_LEN))
        .ok_or_else(overflow)?;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(Error::ShapeMismatch(format!(
            "{} bytes follow the declared {planes}x{n}x{d} data",
            bytes.len() - needed
        )));
    }
    let body = &bytes[KVT0_HEADER_LEN..];
    let plane_bytes = per_plane * dtype.width();
    (0..planes)
        .map(|i| {
            let raw = &body[i * plane_bytes..(i + 1) * plane_bytes];
            let data: Vec<f64> = match dtype {
                RawDtype::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                RawDtype::Bf16 => raw
                    .chunks_exact(2)
                    .map(|b| bf16::from_le_bytes([b[0], b[1]]).to_f64())
                    .collect(),
            };
            KVPlane::from_vec(ChunkSpec::new(n, d).with_chunk_index(i), data)
        })
        .collect()
}

pub fn load_raw_tensor(path: impl AsRef<Path>) -> Result<Vec<KVPlane>> {
    read_raw_tensor(&std::fs::read(path)?)
}
