//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use qvg_core::datagen::{gen_clustered_stream, StreamParams};
use qvg_core::{ChunkSpec, KVPlane, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// E4M3 value of a non-NaN code, straight from the field layout.
pub fn e4m3_value(code: u8) -> f64 {
    let e = ((code >> 3) & 0xF) as i32;
    let m = (code & 7) as f64;
    let v = if e == 0 {
        m / 8.0 * 2f64.powi(-6)
    } else {
        (1.0 + m / 8.0) * 2f64.powi(e - 7)
    };
    if code & 0x80 != 0 {
        -v
    } else {
        v
    }
}

/// Nearest non-negative code by exhaustive search, ties to the even code.
pub fn nearest_code(x: f64) -> u8 {
    let mut best = 0u8;
    let mut best_d = f64::INFINITY;
    for c in 0..=0x7Eu8 {
        let d = (e4m3_value(c) - x).abs();
        if d < best_d || (d == best_d && c % 2 == 0) {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Reference scale: nearest code, never zero, and one step up when
/// clamping the group maximum would cost more than half a step.
pub fn oracle_scale(max_abs: f64, bits: u8) -> f64 {
    if max_abs == 0.0 {
        return 1.0;
    }
    let qm = ((1i32 << (bits - 1)) - 1) as f64;
    let mut c = nearest_code(max_abs / qm).max(1);
    if c < 0x7E && max_abs > (qm + 0.5) * e4m3_value(c) {
        c += 1;
    }
    e4m3_value(c)
}

/// Quantize and dequantize one group with the reference quantizer.
pub fn oracle_roundtrip(values: &[f64], bits: u8) -> (Vec<f64>, f64) {
    let qm = ((1i32 << (bits - 1)) - 1) as f64;
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let s = oracle_scale(max, bits);
    let out = values
        .iter()
        .map(|&v| (v / s).round_ties_even().clamp(-qm, qm) * s)
        .collect();
    (out, s)
}

/// Channel-grouped reference RTN of a whole matrix.
pub fn oracle_rtn(x: &Matrix, bits: u8, group: usize) -> Matrix {
    let mut out = Vec::with_capacity(x.as_slice().len());
    for row in x.row_iter() {
        for g in row.chunks(group) {
            out.extend(oracle_roundtrip(g, bits).0);
        }
    }
    Matrix::from_vec(x.rows(), x.cols(), out).unwrap()
}

pub fn mse_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// A random plane: either a small clustered stream chunk or heavy-tailed
/// Gaussian noise with a few loud channels.
pub fn random_plane(rng: &mut ChaCha8Rng, chunk_index: usize) -> KVPlane {
    let n = [16, 32, 64, 96][rng.random_range(0..4)];
    let d = [16, 32, 64, 128][rng.random_range(0..4)];
    let data = if rng.random_bool(0.5) {
        let p = StreamParams::preset()
            .with_shape(n, d, rng.random_range(2..=16))
            .with_seed(rng.random());
        gen_clustered_stream(&p).unwrap().remove(0).data.into_vec()
    } else {
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let normal = Normal::new(0.0, scale).unwrap();
        let loud: Vec<bool> = (0..d).map(|_| rng.random_bool(0.05)).collect();
        (0..n * d)
            .map(|i| {
                let v = normal.sample(rng);
                (if loud[i % d] { v * 50.0 } else { v }) as f32 as f64
            })
            .collect()
    };
    KVPlane::from_vec(ChunkSpec::new(n, d).with_chunk_index(chunk_index), data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
