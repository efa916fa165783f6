//! Fixtures shared by the criterion benches.

use qvg_core::datagen::{gen_clustered_stream, StreamParams};
use qvg_core::{compress, CompressedChunk, KVPlane, Method, QuantConfig};

/// Drifting clustered stream at the default 4096x128 shape, 256 clusters.
pub fn drifting_stream(n_chunks: usize, seed: u64) -> Vec<KVPlane> {
    let p = StreamParams::preset().with_seed(seed);
    let drift = 0.1 * p.sigma_within;
    gen_clustered_stream(&p.with_chunks(n_chunks, drift)).expect("preset parameters are valid")
}

/// One preset plane compressed with `cfg`.
pub fn compressed_plane(cfg: &QuantConfig, seed: u64) -> (KVPlane, CompressedChunk) {
    let plane = drifting_stream(1, seed).remove(0);
    let chunk = compress(&plane, Method::Qvg, cfg).expect("preset plane fits every preset config");
    (plane, chunk)
}
