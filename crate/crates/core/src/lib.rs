//! KV-cache compression by semantic-aware smoothing and progressive residual
//! quantization.
//!
//! A plane (`N` tokens x `d` channels) is clustered with k-means, its rows
//! have their bf16 centroids subtracted, and the low-magnitude residual is
//! quantized per group with FP8 E4M3 scales. Repeating the smoothing on the
//! residual gives the progressive variant. Round-to-nearest, KIVI-style and
//! QuaRot-style baselines share the same quantizer, and compressed chunks
//! stream into the QVGC container.

pub mod baselines;
pub mod codec;
pub mod datagen;
pub mod error;
pub mod fp8;
pub mod kmeans;
pub mod metrics;
pub mod prq;
pub mod quant;
pub mod smoothing;
pub mod store;
pub mod types;

pub use codec::{compress, decompress, Compressor};
pub use error::{Error, Result};
pub use metrics::{memory_breakdown, mse, psnr, MemoryReport};
pub use prq::{prq_compress, prq_decompress, prq_decompress_onepass, PrqEncoder};
pub use store::{QvgcHeader, QvgcReader, QvgcWriter};
pub use types::{
    ChunkParams, ChunkSpec, CompressedChunk, GroupAxis, KVPlane, Matrix, MemoryBreakdown, Method,
    QuantConfig, StageMeta,
};
