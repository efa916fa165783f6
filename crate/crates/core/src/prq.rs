//! Progressive residual quantization.
//!
//! Starting from `R(0) = X`, each stage `t = 1..=S` smooths the previous
//! residual, `(R(t), C(t), π(t)) = smooth(R(t-1))`. Only `R(S)` is quantized;
//! the intermediate residuals are dropped and every `(C(t), π(t))` is kept.
//! Decoding dequantizes `R(S)` and adds centroids back from stage `S` down to
//! stage 1.

use crate::error::{Error, Result};
use crate::kmeans::KMeansResult;
use crate::metrics::mse;
use crate::quant::{dequantize_payload, pack_payload, quantize_matrix, unpack_payload};
use crate::smoothing::{add_back_in_place, sa_smoothing, ClusterParams};
use crate::types::{
    validate_plane, ChunkParams, CompressedChunk, GroupAxis, KVPlane, Matrix, Method, QuantConfig,
};
use crate::fp8;

/// Seed of the k-means run for `stage` (1-based) of chunk `chunk_index`.
pub fn stage_seed(seed: u64, chunk_index: usize, stage: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        // splitmix64 finalizer
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let a = mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let b = mix(a ^ (chunk_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    mix(b ^ (stage as u64).wrapping_add(0x6a09_e667_f3bc_c909))
}

/// Everything the encoder saw on the way to a chunk.
#[derive(Debug, Clone)]
pub struct PrqTrace {
    /// `R(t)` for `t = 0..=S`; index 0 is the input plane.
    pub residuals: Vec<Matrix>,
    pub clusterings: Vec<KMeansResult>,
}

/// Compresses a plane, optionally warm-starting stage `t` from `warm[t-1]`.
pub fn prq_compress_traced(
    plane: &KVPlane,
    config: &QuantConfig,
    warm: Option<&[Matrix]>,
) -> Result<(CompressedChunk, PrqTrace)> {
    validate_plane(plane, config)?;
    let params = ClusterParams::from(config);
    let mut residuals = Vec::with_capacity(config.stages + 1);
    residuals.push(plane.data.clone());
    let mut stages = Vec::with_capacity(config.stages);
    let mut clusterings = Vec::with_capacity(config.stages);

    for t in 1..=config.stages {
        let seed = stage_seed(config.seed, plane.spec.chunk_index, t);
        let init = warm.and_then(|w| w.get(t - 1));
        let s = sa_smoothing(&residuals[t - 1], params, seed, init)?;
        residuals.push(s.residual);
        stages.push(s.meta);
        clusterings.push(s.clustering);
    }

    let last = residuals.last().expect("R(0) is always present");
    let q = quantize_matrix(last, config.bits, config.group_size, GroupAxis::Channel)?;
    let chunk = CompressedChunk {
        spec: plane.spec,
        method: if config.stages == 0 { Method::Rtn } else { Method::Qvg },
        params: ChunkParams::from(config),
        axis: GroupAxis::Channel,
        seed: config.seed,
        payload: pack_payload(&q.codes, config.bits)?,
        scales: q.scales,
        stages,
    };
    Ok((
        chunk,
        PrqTrace {
            residuals,
            clusterings,
        },
    ))
}

pub fn prq_compress(plane: &KVPlane, config: &QuantConfig) -> Result<CompressedChunk> {
    prq_compress_traced(plane, config, None).map(|(c, _)| c)
}

/// Streaming encoder that caches each stage's centroids from the previous
/// chunk and uses them to initialize k-means on the next one.
///
/// Only the initialization is shared; every chunk stores its own centroids.
#[derive(Debug, Clone)]
pub struct PrqEncoder {
    config: QuantConfig,
    warm_start: bool,
    cache: Option<Vec<Matrix>>,
}

impl PrqEncoder {
    pub fn new(config: QuantConfig) -> Self {
        Self {
            config,
            warm_start: true,
            cache: None,
        }
    }

    pub fn with_warm_start(mut self, on: bool) -> Self {
        self.warm_start = on;
        self
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn compress(&mut self, plane: &KVPlane) -> Result<CompressedChunk> {
        let warm = self
            .cache
            .as_deref()
            .filter(|c| self.warm_start && c.first().is_some_and(|m| m.cols() == plane.head_dim()));
        let (chunk, trace) = prq_compress_traced(plane, &self.config, warm)?;
        if self.warm_start {
            self.cache = Some(trace.clusterings.into_iter().map(|k| k.centroids).collect());
        }
        Ok(chunk)
    }
}

fn corrupt(chunk: &CompressedChunk, reason: impl Into<String>) -> Error {
    Error::CorruptChunk {
        index: chunk.spec.chunk_index,
        reason: reason.into(),
    }
}

fn check_decodable(chunk: &CompressedChunk) -> Result<()> {
    chunk.validate()?;
    if chunk.method == Method::Quarot {
        return Err(corrupt(chunk, "rotated chunks need the rotation-aware decoder"));
    }
    if chunk.scales.iter().any(|&s| s & 0x7F == 0x7F) {
        return Err(corrupt(chunk, "scale byte holds the FP8 NaN pattern"));
    }
    Ok(())
}

/// Stage-replay decoder: dequantize `R(S)`, then add back stages `S..=1`.
pub fn prq_decompress(chunk: &CompressedChunk) -> Result<KVPlane> {
    check_decodable(chunk)?;
    let spec = chunk.spec;
    let mut x = dequantize_payload(
        &chunk.payload,
        &chunk.scales,
        spec.n_tokens,
        spec.head_dim,
        chunk.params.bits,
        chunk.params.group_size,
        chunk.axis,
    )?;
    for meta in chunk.stages.iter().rev() {
        add_back_in_place(&mut x, meta)?;
    }
    KVPlane::new(spec, x)
}

/// Work done by the single-pass decoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeCounters {
    /// Token rows of packed codes read from the payload.
    pub payload_row_reads: usize,
    /// Centroid rows fetched across all stages.
    pub centroid_lookups: usize,
}

#[inline]
fn read_code(bytes: &[u8], idx: usize, bits: u8) -> i8 {
    let b = bits as usize;
    let bit = idx * b;
    let mask = ((1u16 << b) - 1) as u8;
    let shift = 8 - bits as u32;
    let field = (bytes[bit / 8] >> (bit % 8)) & mask;
    ((field << shift) as i8) >> shift
}

/// Single traversal decoder: for each token, dequantize its row and add every
/// stage's centroid while the row is still hot. Bit-identical to
/// [`prq_decompress`] because the per-element additions happen in the same
/// order (stage `S` first).
pub fn prq_decompress_onepass_counted(chunk: &CompressedChunk) -> Result<(KVPlane, DecodeCounters)> {
    check_decodable(chunk)?;
    let spec = chunk.spec;
    let (n, d) = (spec.n_tokens, spec.head_dim);
    let bits = chunk.params.bits;
    let group = chunk.params.group_size;
    let scales: Vec<f64> = chunk
        .scales
        .iter()
        .map(|&s| fp8::decode(s))
        .collect::<Result<_>>()?;

    let mut counters = DecodeCounters::default();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        counters.payload_row_reads += 1;
        let row = out.row_mut(i);
        match chunk.axis {
            GroupAxis::Channel => {
                for (g, seg) in row.chunks_mut(group).enumerate() {
                    let s = scales[(i * d) / group + g];
                    let base = i * d + g * group;
                    for (j, x) in seg.iter_mut().enumerate() {
                        *x = s * read_code(&chunk.payload, base + j, bits) as f64;
                    }
                }
            }
            GroupAxis::Token => {
                let srow = &scales[(i / group) * d..(i / group + 1) * d];
                for (j, x) in row.iter_mut().enumerate() {
                    *x = srow[j] * read_code(&chunk.payload, i * d + j, bits) as f64;
                }
            }
        }
        // stage S first, matching the replay decoder's addition order
        for meta in chunk.stages.iter().rev() {
            let c = meta.centroid(meta.assignments[i] as usize);
            counters.centroid_lookups += 1;
            for (x, cv) in row.iter_mut().zip(c) {
                *x += cv.to_f64();
            }
        }
    }
    Ok((KVPlane::new(spec, out)?, counters))
}

pub fn prq_decompress_onepass(chunk: &CompressedChunk) -> Result<KVPlane> {
    prq_decompress_onepass_counted(chunk).map(|(p, _)| p)
}

/// Reconstruction MSE for every stage count `0..=max_stages`.
///
/// Stage seeds depend only on `(seed, chunk, stage)`, so the `S`-stage
/// encoding is a prefix of the `max_stages` one; each entry is still a full
/// encode/decode of that prefix chunk.
pub fn stage_mse_curve(plane: &KVPlane, config: &QuantConfig, max_stages: usize) -> Result<Vec<f64>> {
    let full = QuantConfig {
        stages: max_stages,
        ..*config
    };
    let (_, trace) = prq_compress_traced(plane, &full, None)?;
    let mut curve = Vec::with_capacity(max_stages + 1);
    for s in 0..=max_stages {
        let chunk = chunk_from_prefix(plane, config, &trace, s)?;
        let recon = prq_decompress(&chunk)?;
        curve.push(mse(&plane.data, &recon.data)?);
    }
    Ok(curve)
}

fn chunk_from_prefix(
    plane: &KVPlane,
    config: &QuantConfig,
    trace: &PrqTrace,
    stages: usize,
) -> Result<CompressedChunk> {
    let cfg = QuantConfig { stages, ..*config };
    let q = quantize_matrix(&trace.residuals[stages], cfg.bits, cfg.group_size, GroupAxis::Channel)?;
    let metas = trace.clusterings[..stages]
        .iter()
        .map(|k| crate::types::StageMeta {
            centroids: k.centroids.as_slice().iter().map(|&v| half::bf16::from_f64(v)).collect(),
            assignments: k.assignments.clone(),
            k: cfg.centroids,
            head_dim: plane.head_dim(),
        })
        .collect();
    Ok(CompressedChunk {
        spec: plane.spec,
        method: if stages == 0 { Method::Rtn } else { Method::Qvg },
        params: ChunkParams::from(&cfg),
        axis: GroupAxis::Channel,
        seed: cfg.seed,
        payload: pack_payload(&q.codes, cfg.bits)?,
        scales: q.scales,
        stages: metas,
    })
}

/// Dequantized final residual of a chunk, without any centroid add-back.
pub fn dequantized_residual(chunk: &CompressedChunk) -> Result<Matrix> {
    check_decodable(chunk)?;
    let codes = unpack_payload(&chunk.payload, chunk.spec.n_elements(), chunk.params.bits)?;
    crate::quant::dequantize_codes(
        &codes,
        &chunk.scales,
        chunk.spec.n_tokens,
        chunk.spec.head_dim,
        chunk.params.group_size,
        chunk.axis,
    )
}
