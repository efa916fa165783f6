//! Reference competitors: round-to-nearest, KIVI-style axis-split grouping,
//! and QuaRot-style randomized Hadamard rotation.
//!
//! All three store exactly the same payload and scale bytes as RTN at equal
//! `(bits, group_size)`; none keeps centroids or assignments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quant::{dequantize_payload, pack_payload, quantize_matrix};
use crate::types::{
    check_finite, ChunkParams, ChunkSpec, CompressedChunk, GroupAxis, KVPlane, Matrix, Method,
};

fn baseline_params(bits: u8, group_size: usize) -> ChunkParams {
    ChunkParams {
        bits,
        group_size,
        stages: 0,
        centroids: 0,
    }
}

fn compress_axis(
    plane: &KVPlane,
    data: &Matrix,
    method: Method,
    bits: u8,
    group_size: usize,
    axis: GroupAxis,
    seed: u64,
) -> Result<CompressedChunk> {
    if plane.n_tokens() == 0 || plane.head_dim() == 0 {
        return Err(Error::EmptyPlane);
    }
    let q = quantize_matrix(data, bits, group_size, axis)?;
    Ok(CompressedChunk {
        spec: plane.spec,
        method,
        params: baseline_params(bits, group_size),
        axis,
        seed,
        payload: pack_payload(&q.codes, bits)?,
        scales: q.scales,
        stages: Vec::new(),
    })
}

fn dequantize_chunk(chunk: &CompressedChunk) -> Result<Matrix> {
    chunk.validate()?;
    dequantize_payload(
        &chunk.payload,
        &chunk.scales,
        chunk.spec.n_tokens,
        chunk.spec.head_dim,
        chunk.params.bits,
        chunk.params.group_size,
        chunk.axis,
    )
    .map_err(|e| Error::CorruptChunk {
        index: chunk.spec.chunk_index,
        reason: e.to_string(),
    })
}

fn expect_method(chunk: &CompressedChunk, method: Method) -> Result<()> {
    if chunk.method != method {
        return Err(Error::ConfigMismatch(format!(
            "expected a {method} chunk, got {}",
            chunk.method
        )));
    }
    Ok(())
}

/// Round-to-nearest with channel-axis groups.
pub fn rtn_compress(plane: &KVPlane, bits: u8, group_size: usize) -> Result<CompressedChunk> {
    compress_axis(plane, &plane.data, Method::Rtn, bits, group_size, GroupAxis::Channel, 0)
}

pub fn rtn_decompress(chunk: &CompressedChunk) -> Result<KVPlane> {
    expect_method(chunk, Method::Rtn)?;
    KVPlane::new(chunk.spec, dequantize_chunk(chunk)?)
}

/// Key or value role of a plane under KIVI-style grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvRole {
    Key,
    Value,
}

impl KvRole {
    /// In a chunk stream, even chunk indices are keys and odd ones values.
    pub fn for_chunk(chunk_index: usize) -> Self {
        if chunk_index % 2 == 0 {
            KvRole::Key
        } else {
            KvRole::Value
        }
    }

    pub fn axis(self) -> GroupAxis {
        match self {
            KvRole::Key => GroupAxis::Token,
            KvRole::Value => GroupAxis::Channel,
        }
    }
}

/// KIVI-style quantization of one plane: keys are grouped per channel along
/// the token axis, values per token along the channel axis.
pub fn kivi_compress_plane(
    plane: &KVPlane,
    role: KvRole,
    bits: u8,
    group_size: usize,
) -> Result<CompressedChunk> {
    compress_axis(plane, &plane.data, Method::Kivi, bits, group_size, role.axis(), 0)
}

/// Compresses a key plane and a value plane as a pair.
///
/// The key plane's token count must be a multiple of `group_size`.
pub fn kivi_compress(
    keys: &KVPlane,
    values: &KVPlane,
    bits: u8,
    group_size: usize,
) -> Result<(CompressedChunk, CompressedChunk)> {
    Ok((
        kivi_compress_plane(keys, KvRole::Key, bits, group_size)?,
        kivi_compress_plane(values, KvRole::Value, bits, group_size)?,
    ))
}

pub fn kivi_decompress_plane(chunk: &CompressedChunk) -> Result<KVPlane> {
    expect_method(chunk, Method::Kivi)?;
    KVPlane::new(chunk.spec, dequantize_chunk(chunk)?)
}

pub fn kivi_decompress(keys: &CompressedChunk, values: &CompressedChunk) -> Result<(KVPlane, KVPlane)> {
    Ok((kivi_decompress_plane(keys)?, kivi_decompress_plane(values)?))
}

/// Orthonormal fast Walsh–Hadamard transform preceded by a seeded ±1
/// diagonal: `y = H·D·x / √d`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomHadamard {
    signs: Vec<f64>,
}

impl RandomHadamard {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if !dim.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5155_4152_4f54_0001);
        let signs = (0..dim)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Ok(Self { signs })
    }

    pub fn with_signs(signs: Vec<f64>) -> Result<Self> {
        if !signs.len().is_power_of_two() {
            return Err(Error::NotPowerOfTwo(signs.len()));
        }
        Ok(Self { signs })
    }

    pub fn dim(&self) -> usize {
        self.signs.len()
    }

    pub fn forward(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check(row)?;
        let mut buf: Vec<f64> = row.iter().zip(&self.signs).map(|(&x, s)| x * s).collect();
        fwht(&mut buf);
        Ok(buf.into_iter().collect())
    }

    pub fn inverse(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check(row)?;
        let mut buf: Vec<f64> = row.to_vec();
        fwht(&mut buf);
        Ok(buf.iter().zip(&self.signs).map(|(v, s)| v * s).collect())
    }

    fn check(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.signs.len() {
            return Err(Error::DimensionMismatch(format!(
                "row has {} channels, rotation has {}",
                row.len(),
                self.signs.len()
            )));
        }
        Ok(())
    }
}

/// In-place normalized Walsh–Hadamard transform; `buf.len()` is a power of two.
fn fwht(buf: &mut [f64]) {
    let n = buf.len();
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let (a, b) = (buf[j], buf[j + h]);
                buf[j] = a + b;
                buf[j + h] = a - b;
            }
        }
        h *= 2;
    }
    let norm = 1.0 / (n as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= norm;
    }
}

/// Rotates one row with the sign diagonal derived from `seed`.
pub fn hadamard_transform(row: &[f64], seed: u64) -> Result<Vec<f64>> {
    RandomHadamard::new(row.len(), seed)?.forward(row)
}

fn rotate_rows(m: &Matrix, rot: &RandomHadamard, inverse: bool) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let r = if inverse {
            rot.inverse(m.row(i))?
        } else {
            rot.forward(m.row(i))?
        };
        out.row_mut(i).copy_from_slice(&r);
    }
    Ok(out)
}

/// Rotates every token row, then applies channel-axis RTN.
pub fn quarot_compress(plane: &KVPlane, bits: u8, group_size: usize, seed: u64) -> Result<CompressedChunk> {
    check_finite(plane.data.as_slice())?;
    let rot = RandomHadamard::new(plane.head_dim(), seed)?;
    let rotated = rotate_rows(&plane.data, &rot, false)?;
    compress_axis(plane, &rotated, Method::Quarot, bits, group_size, GroupAxis::Channel, seed)
}

pub fn quarot_decompress(chunk: &CompressedChunk) -> Result<KVPlane> {
    expect_method(chunk, Method::Quarot)?;
    let rot = RandomHadamard::new(chunk.spec.head_dim, chunk.seed)?;
    let rotated = dequantize_chunk(chunk)?;
    KVPlane::new(chunk.spec, rotate_rows(&rotated, &rot, true)?)
}

/// Spec of a plane's transpose, for symmetry checks between KIVI paths.
pub fn transposed_spec(spec: &ChunkSpec) -> ChunkSpec {
    ChunkSpec {
        n_tokens: spec.head_dim,
        head_dim: spec.n_tokens,
        ..*spec
    }
}
