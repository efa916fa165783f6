//! Error metrics and closed-form memory accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ChunkParams, ChunkSpec, Matrix, MemoryBreakdown, Method, QuantConfig};

/// Returned by [`psnr`] when the two inputs are identical.
pub const PSNR_INFINITE: f64 = f64::INFINITY;

/// Mean squared elementwise difference, accumulated in `f64`.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = a.as_slice().len();
    if n == 0 {
        return Ok(0.0);
    }
    // per-block partial sums keep the accumulated error small on large planes
    let total: f64 = a
        .as_slice()
        .chunks(4096)
        .zip(b.as_slice().chunks(4096))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(&p, &q)| {
                    let d = p - q;
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

/// Peak signal-to-noise ratio in decibels.
pub fn psnr(reference: &Matrix, test: &Matrix, peak: f64) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::InvalidConfig(format!("peak must be positive, got {peak}")));
    }
    let e = mse(reference, test)?;
    Ok(psnr_from_mse(e, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_INFINITE
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Bit accounting for a plane of `spec`'s shape under `params`.
///
/// Payload `N·d·b`, FP8 scales `8·N·d/B`, one byte of assignment per token
/// per stage, and `K·d` bf16 centroids per stage. The ratio is against the
/// same plane held at 16 bits per element.
pub fn breakdown_for(params: &ChunkParams, spec: &ChunkSpec) -> MemoryBreakdown {
    let n = spec.n_tokens as u64;
    let d = spec.head_dim as u64;
    let s = params.stages as u64;
    let k = params.centroids as u64;
    let payload_bits = n * d * params.bits as u64;
    let scale_bits = (n * d / params.group_size as u64) * 8;
    let assignment_bits = s * n * 8;
    let centroid_bits = s * k * d * 16;
    let total_bits = payload_bits + scale_bits + assignment_bits + centroid_bits;
    MemoryBreakdown {
        payload_bits,
        assignment_bits,
        centroid_bits,
        scale_bits,
        total_bits,
        ratio_vs_bf16: (16 * n * d) as f64 / total_bits as f64,
    }
}

pub fn memory_breakdown(config: &QuantConfig, spec: &ChunkSpec) -> MemoryBreakdown {
    breakdown_for(&ChunkParams::from(config), spec)
}

/// Share of the total taken by each component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakdownFractions {
    pub payload: f64,
    pub assignments: f64,
    pub centroids: f64,
    pub scales: f64,
}

pub fn breakdown_fractions(b: &MemoryBreakdown) -> BreakdownFractions {
    let t = b.total_bits as f64;
    BreakdownFractions {
        payload: b.payload_bits as f64 / t,
        assignments: b.assignment_bits as f64 / t,
        centroids: b.centroid_bits as f64 / t,
        scales: b.scale_bits as f64 / t,
    }
}

/// Flat JSON record describing one compressed configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub method: Method,
    pub bits: u8,
    pub group_size: usize,
    pub stages: usize,
    pub centroids: usize,
    pub n_tokens: usize,
    pub head_dim: usize,
    pub payload_bits: u64,
    pub assignment_bits: u64,
    pub centroid_bits: u64,
    pub scale_bits: u64,
    pub ratio: f64,
}

impl MemoryReport {
    pub fn new(method: Method, params: &ChunkParams, spec: &ChunkSpec) -> Self {
        let b = breakdown_for(params, spec);
        Self {
            method,
            bits: params.bits,
            group_size: params.group_size,
            stages: params.stages,
            centroids: params.centroids,
            n_tokens: spec.n_tokens,
            head_dim: spec.head_dim,
            payload_bits: b.payload_bits,
            assignment_bits: b.assignment_bits,
            centroid_bits: b.centroid_bits,
            scale_bits: b.scale_bits,
            ratio: b.ratio_vs_bf16,
        }
    }

    /// Sums bit counts over several planes; the ratio is recomputed.
    pub fn accumulate(&mut self, other: &MemoryReport) {
        let elems = |r: &MemoryReport| (r.n_tokens * r.head_dim) as u64;
        let prev_elems = elems(self);
        self.n_tokens += other.n_tokens;
        self.payload_bits += other.payload_bits;
        self.assignment_bits += other.assignment_bits;
        self.centroid_bits += other.centroid_bits;
        self.scale_bits += other.scale_bits;
        let total = self.payload_bits + self.assignment_bits + self.centroid_bits + self.scale_bits;
        self.ratio = (16 * (prev_elems + elems(other))) as f64 / total as f64;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report fields always serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(n: usize, d: usize) -> ChunkSpec {
        ChunkSpec::new(n, d)
    }

    #[test]
    fn mse_basics() {
        let a = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert!(matches!(mse(&a, &Matrix::zeros(2, 1)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn mse_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 300 * 77;
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let mut naive = 0.0f64;
        for i in 0..n {
            naive += (a[i] - b[i]) * (a[i] - b[i]);
        }
        naive /= n as f64;
        let got = mse(
            &Matrix::from_vec(300, 77, a).unwrap(),
            &Matrix::from_vec(300, 77, b).unwrap(),
        )
        .unwrap();
        assert!((got - naive).abs() <= 1e-9 * naive);
    }

    #[test]
    fn psnr_values() {
        assert_eq!(psnr_from_mse(0.0, 1.0), PSNR_INFINITE);
        assert!((psnr_from_mse(1e-3, 1.0) - 30.0).abs() < 1e-12);
        // 255² / 65.025 = 1000
        assert!((psnr_from_mse(65.025, 255.0) - 30.0).abs() < 1e-9);
        let a = Matrix::zeros(2, 2);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_INFINITE);
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn rtn_ratios() {
        let s = spec(38_400, 128);
        assert_eq!(memory_breakdown(&QuantConfig::rtn(2, 16), &s).ratio_vs_bf16, 6.4);
        let r4 = memory_breakdown(&QuantConfig::rtn(4, 16), &s).ratio_vs_bf16;
        assert!((r4 - 32.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn qvg_ratio_formula() {
        let s = spec(38_400, 128);
        let b = memory_breakdown(&QuantConfig::qvg(2), &s);
        let bits_per_elem = 2.0 + 0.125 + 0.0625 + 4096.0 / 38_400.0;
        assert!((b.ratio_vs_bf16 - 16.0 / bits_per_elem).abs() < 1e-12);
        assert_eq!(b.total_bits, b.payload_bits + b.scale_bits + b.assignment_bits + b.centroid_bits);
    }

    #[test]
    fn fractions() {
        let s = spec(38_400, 128);
        let qvg = breakdown_fractions(&memory_breakdown(&QuantConfig::qvg(2), &s));
        let pro = breakdown_fractions(&memory_breakdown(&QuantConfig::qvg_pro(2), &s));
        assert!(qvg.payload >= 0.65);
        assert!(pro.payload < qvg.payload);
        for f in [qvg, pro] {
            assert!((f.payload + f.assignments + f.centroids + f.scales - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ratio_monotone_in_stages_centroids_and_block() {
        let s = spec(4096, 128);
        let base = QuantConfig::qvg(2);
        let r = |c: QuantConfig| memory_breakdown(&c, &s).ratio_vs_bf16;
        for st in 0..4 {
            assert!(r(base.with_stages(st + 1)) < r(base.with_stages(st)));
        }
        assert!(r(base.with_centroids(128)) > r(base.with_centroids(256)));
        assert!(r(base.with_group_size(32)) > r(base.with_group_size(16)));
        assert!(r(base.with_group_size(64)) > r(base.with_group_size(32)));
    }

    #[test]
    fn report_json_has_flat_schema() {
        let r = MemoryReport::new(Method::Rtn, &ChunkParams::from(&QuantConfig::rtn(2, 16)), &spec(16, 128));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in [
            "method", "bits", "group_size", "stages", "centroids", "n_tokens", "head_dim",
            "payload_bits", "assignment_bits", "centroid_bits", "scale_bits", "ratio",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["method"], "rtn");
        assert_eq!(v["ratio"], 6.4);
    }
}
