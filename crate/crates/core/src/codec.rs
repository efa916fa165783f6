//! Method dispatch: one entry point to compress a plane with any method and
//! to decompress any chunk.

use crate::baselines::{
    kivi_compress_plane, kivi_decompress_plane, quarot_compress, quarot_decompress, KvRole,
};
use crate::error::Result;
use crate::prq::{prq_decompress_onepass, PrqEncoder};
use crate::types::{validate_plane, ChunkParams, CompressedChunk, KVPlane, Method, QuantConfig};

/// Method actually recorded for `(method, config)`: QVG without smoothing
/// stages is plain RTN, and baselines never carry stages.
pub fn effective_method(method: Method, config: &QuantConfig) -> Method {
    match method {
        Method::Qvg if config.stages == 0 => Method::Rtn,
        m => m,
    }
}

/// Storage parameters written for `(method, config)`.
pub fn chunk_params(method: Method, config: &QuantConfig) -> ChunkParams {
    match effective_method(method, config) {
        Method::Qvg => ChunkParams::from(config),
        _ => ChunkParams::from(&config.with_stages(0)),
    }
}

/// Stateful compressor for a stream of chunks.
///
/// For QVG the k-means of each chunk is warm-started from the previous
/// chunk's centroids unless disabled. For KIVI, even chunk indices are keys
/// and odd ones values.
#[derive(Debug, Clone)]
pub struct Compressor {
    method: Method,
    config: QuantConfig,
    encoder: PrqEncoder,
}

impl Compressor {
    pub fn new(method: Method, config: QuantConfig) -> Result<Self> {
        config.validate()?;
        let method = effective_method(method, &config);
        let config = if method == Method::Qvg {
            config
        } else {
            config.with_stages(0)
        };
        Ok(Self {
            method,
            config,
            encoder: PrqEncoder::new(config),
        })
    }

    pub fn with_warm_start(mut self, on: bool) -> Self {
        self.encoder = self.encoder.with_warm_start(on);
        self
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn params(&self) -> ChunkParams {
        ChunkParams::from(&self.config)
    }

    /// Compresses one plane. The chunk carries the configured seed whatever
    /// the method, so every chunk of a stream matches one container header.
    pub fn compress(&mut self, plane: &KVPlane) -> Result<CompressedChunk> {
        let cfg = self.config;
        let mut chunk = match self.method {
            Method::Qvg | Method::Rtn => self.encoder.compress(plane),
            Method::Kivi => {
                let role = KvRole::for_chunk(plane.spec.chunk_index);
                cfg.validate()?;
                kivi_compress_plane(plane, role, cfg.bits, cfg.group_size)
            }
            Method::Quarot => {
                validate_plane(plane, &cfg)?;
                quarot_compress(plane, cfg.bits, cfg.group_size, cfg.seed)
            }
        }?;
        chunk.seed = cfg.seed;
        Ok(chunk)
    }
}

/// Stateless single-plane compression.
pub fn compress(plane: &KVPlane, method: Method, config: &QuantConfig) -> Result<CompressedChunk> {
    Compressor::new(method, *config)?.compress(plane)
}

/// Decompresses a chunk with the decoder its method requires.
pub fn decompress(chunk: &CompressedChunk) -> Result<KVPlane> {
    match chunk.method {
        Method::Qvg | Method::Rtn => prq_decompress_onepass(chunk),
        Method::Kivi => kivi_decompress_plane(chunk),
        Method::Quarot => quarot_decompress(chunk),
    }
}
