//! Domain types shared by every stage of the codec.
//!
//! All values are plain data: once built they are never mutated in place by
//! the codec, so they can be shared and sent across threads freely.

use half::bf16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `rows × cols` matrix in working precision (`f64`).
///
/// Inputs are expected to hold f32 or bf16 values; against bf16 centroids the
/// smoothing subtraction and its add-back are then exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Position and size of one chunk of one (layer, head) plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub n_tokens: usize,
    pub head_dim: usize,
    pub layer_index: usize,
    pub head_index: usize,
    pub chunk_index: usize,
}

impl ChunkSpec {
    pub fn new(n_tokens: usize, head_dim: usize) -> Self {
        Self {
            n_tokens,
            head_dim,
            layer_index: 0,
            head_index: 0,
            chunk_index: 0,
        }
    }

    pub fn with_chunk_index(mut self, chunk_index: usize) -> Self {
        self.chunk_index = chunk_index;
        self
    }

    #[inline]
    pub fn n_elements(&self) -> usize {
        self.n_tokens * self.head_dim
    }
}

/// One chunk of keys or values for a single attention head: `N × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct KVPlane {
    pub spec: ChunkSpec,
    pub data: Matrix,
}

impl KVPlane {
    pub fn new(spec: ChunkSpec, data: Matrix) -> Result<Self> {
        if data.rows() != spec.n_tokens || data.cols() != spec.head_dim {
            return Err(Error::ShapeMismatch(format!(
                "spec says {}x{}, data is {}x{}",
                spec.n_tokens,
                spec.head_dim,
                data.rows(),
                data.cols()
            )));
        }
        Ok(Self { spec, data })
    }

    pub fn from_vec(spec: ChunkSpec, data: Vec<f64>) -> Result<Self> {
        let m = Matrix::from_vec(spec.n_tokens, spec.head_dim, data)?;
        Self::new(spec, m)
    }

    /// Widens brain-16 source values into working precision.
    pub fn from_bf16(spec: ChunkSpec, data: &[bf16]) -> Result<Self> {
        Self::from_vec(spec, data.iter().map(|v| v.to_f64()).collect())
    }

    pub fn n_tokens(&self) -> usize {
        self.spec.n_tokens
    }

    pub fn head_dim(&self) -> usize {
        self.spec.head_dim
    }
}

/// Which compressor produced a chunk. The discriminant is the on-disk tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rtn = 0,
    Kivi = 1,
    Quarot = 2,
    Qvg = 3,
}

impl Method {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Method::Rtn),
            1 => Ok(Method::Kivi),
            2 => Ok(Method::Quarot),
            3 => Ok(Method::Qvg),
            t => Err(Error::UnknownMethod(t)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Rtn => "rtn",
            Method::Kivi => "kivi",
            Method::Quarot => "quarot",
            Method::Qvg => "qvg",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rtn" => Ok(Method::Rtn),
            "kivi" => Ok(Method::Kivi),
            "quarot" => Ok(Method::Quarot),
            "qvg" => Ok(Method::Qvg),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

/// Orientation of quantization groups within a plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupAxis {
    /// `B` contiguous channels of one token share a scale.
    Channel,
    /// `B` consecutive tokens of one channel share a scale.
    Token,
}

pub const DEFAULT_KMEANS_MAX_ITERS: usize = 10;
pub const DEFAULT_KMEANS_TOL: f64 = 1e-4;
pub const MAX_CENTROIDS: usize = 256;

/// Everything that determines the codec's output for a plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    /// Number of smoothing stages; zero is plain round-to-nearest.
    pub stages: usize,
    pub centroids: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self::qvg(2)
    }
}

impl QuantConfig {
    /// Single smoothing stage with wide groups: highest compression.
    pub fn qvg(bits: u8) -> Self {
        Self {
            bits,
            group_size: 64,
            stages: 1,
            centroids: 256,
            kmeans_max_iters: DEFAULT_KMEANS_MAX_ITERS,
            kmeans_tol: DEFAULT_KMEANS_TOL,
            seed: 0,
        }
    }

    /// Four smoothing stages with narrow groups: highest fidelity.
    pub fn qvg_pro(bits: u8) -> Self {
        Self {
            group_size: 16,
            stages: 4,
            ..Self::qvg(bits)
        }
    }

    /// Plain round-to-nearest at the given group size.
    pub fn rtn(bits: u8, group_size: usize) -> Self {
        Self {
            group_size,
            stages: 0,
            ..Self::qvg(bits)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_stages(mut self, stages: usize) -> Self {
        self.stages = stages;
        self
    }

    pub fn with_group_size(mut self, group_size: usize) -> Self {
        self.group_size = group_size;
        self
    }

    pub fn with_centroids(mut self, centroids: usize) -> Self {
        self.centroids = centroids;
        self
    }

    /// Largest code magnitude, `2^(b-1) - 1`.
    #[inline]
    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    /// Checks the config on its own, without reference to a plane.
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 2 | 4 | 8) {
            return Err(Error::InvalidConfig(format!(
                "bits must be 2, 4 or 8, got {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidConfig("group_size must be positive".into()));
        }
        if self.centroids == 0 || self.centroids > MAX_CENTROIDS {
            return Err(Error::InvalidConfig(format!(
                "centroids must be in 1..={MAX_CENTROIDS}, got {}",
                self.centroids
            )));
        }
        if self.kmeans_max_iters == 0 {
            return Err(Error::InvalidConfig("kmeans_max_iters must be positive".into()));
        }
        if !(self.kmeans_tol.is_finite() && self.kmeans_tol >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "kmeans_tol must be finite and non-negative, got {}",
                self.kmeans_tol
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// Centroids and token assignments of one smoothing stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageMeta {
    /// `K × d` centroids, row-major.
    pub centroids: Vec<bf16>,
    /// One centroid index per token.
    pub assignments: Vec<u8>,
    pub k: usize,
    pub head_dim: usize,
}

impl StageMeta {
    #[inline]
    pub fn centroid(&self, c: usize) -> &[bf16] {
        &self.centroids[c * self.head_dim..(c + 1) * self.head_dim]
    }

    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        if self.centroids.len() != self.k * self.head_dim {
            return Err(Error::DimensionMismatch(format!(
                "centroid table holds {} values, expected {}x{}",
                self.centroids.len(),
                self.k,
                self.head_dim
            )));
        }
        if self.assignments.len() != n_tokens {
            return Err(Error::DimensionMismatch(format!(
                "{} assignments for {n_tokens} tokens",
                self.assignments.len()
            )));
        }
        if let Some(a) = self.assignments.iter().find(|&&a| a as usize >= self.k) {
            return Err(Error::DimensionMismatch(format!(
                "assignment {a} out of range for {} centroids",
                self.k
            )));
        }
        Ok(())
    }
}

/// Storage-relevant subset of [`QuantConfig`]: what a decoder needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChunkParams {
    pub bits: u8,
    pub group_size: usize,
    pub stages: usize,
    pub centroids: usize,
}

impl From<&QuantConfig> for ChunkParams {
    fn from(c: &QuantConfig) -> Self {
        Self {
            bits: c.bits,
            group_size: c.group_size,
            stages: c.stages,
            // no centroid table exists without smoothing stages
            centroids: if c.stages == 0 { 0 } else { c.centroids },
        }
    }
}

/// The compressed form of one plane chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedChunk {
    pub spec: ChunkSpec,
    pub method: Method,
    pub params: ChunkParams,
    pub axis: GroupAxis,
    /// Codec seed; QuaRot derives its sign diagonal from it.
    pub seed: u64,
    /// Packed `bits`-wide two's-complement codes, row-major.
    pub payload: Vec<u8>,
    /// One FP8 E4M3 scale per quantization group.
    pub scales: Vec<u8>,
    /// Smoothing stages, stage 1 first.
    pub stages: Vec<StageMeta>,
}

impl CompressedChunk {
    pub fn expected_payload_len(&self) -> usize {
        (self.spec.n_elements() * self.params.bits as usize).div_ceil(8)
    }

    pub fn expected_scales_len(&self) -> usize {
        self.spec.n_elements() / self.params.group_size
    }

    /// Checks every length invariant of the chunk.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::CorruptChunk {
            index: self.spec.chunk_index,
            reason,
        };
        if !matches!(self.params.bits, 2 | 4 | 8) {
            return Err(bad(format!("bits {}", self.params.bits)));
        }
        if self.params.group_size == 0 || self.spec.n_elements() % self.params.group_size != 0 {
            return Err(bad(format!(
                "group size {} does not tile {} elements",
                self.params.group_size,
                self.spec.n_elements()
            )));
        }
        if self.payload.len() != self.expected_payload_len() {
            return Err(bad(format!(
                "payload is {} bytes, expected {}",
                self.payload.len(),
                self.expected_payload_len()
            )));
        }
        if self.scales.len() != self.expected_scales_len() {
            return Err(bad(format!(
                "{} scales, expected {}",
                self.scales.len(),
                self.expected_scales_len()
            )));
        }
        if self.stages.len() != self.params.stages {
            return Err(bad(format!(
                "{} stages stored, config says {}",
                self.stages.len(),
                self.params.stages
            )));
        }
        for stage in &self.stages {
            if stage.k != self.params.centroids || stage.head_dim != self.spec.head_dim {
                return Err(bad("stage table shape disagrees with header".into()));
            }
            stage
                .validate(self.spec.n_tokens)
                .map_err(|e| bad(e.to_string()))?;
        }
        Ok(())
    }
}

/// Bit accounting for one compressed plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub payload_bits: u64,
    pub assignment_bits: u64,
    pub centroid_bits: u64,
    pub scale_bits: u64,
    pub total_bits: u64,
    pub ratio_vs_bf16: f64,
}

/// Checks a plane against a config before compression.
pub fn validate_plane(plane: &KVPlane, config: &QuantConfig) -> Result<()> {
    config.validate()?;
    let spec = &plane.spec;
    if spec.n_tokens == 0 || spec.head_dim == 0 {
        return Err(Error::EmptyPlane);
    }
    if plane.data.rows() != spec.n_tokens || plane.data.cols() != spec.head_dim {
        return Err(Error::ShapeMismatch(format!(
            "spec says {}x{}, data is {}x{}",
            spec.n_tokens,
            spec.head_dim,
            plane.data.rows(),
            plane.data.cols()
        )));
    }
    if spec.head_dim % config.group_size != 0 {
        return Err(Error::DimensionMismatch(format!(
            "group size {} does not divide head_dim {}",
            config.group_size, spec.head_dim
        )));
    }
    check_finite(plane.data.as_slice())
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFiniteInput { index }),
        None => Ok(()),
    }
}
