//! Semantic-aware smoothing: cluster similar tokens, subtract each token's
//! centroid, and keep the low-magnitude residual for quantization.

use half::bf16;

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansResult};
use crate::types::{Matrix, QuantConfig, StageMeta};

/// Clustering knobs for one smoothing stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl From<&QuantConfig> for ClusterParams {
    fn from(c: &QuantConfig) -> Self {
        Self {
            k: c.centroids,
            max_iters: c.kmeans_max_iters,
            tol: c.kmeans_tol,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Smoothed {
    pub residual: Matrix,
    pub meta: StageMeta,
    /// Unrounded clustering result, kept for warm-starting the next chunk.
    pub clustering: KMeansResult,
}

/// Clusters the rows of `x` and subtracts each row's (bf16-rounded) centroid.
pub fn sa_smoothing(
    x: &Matrix,
    params: ClusterParams,
    seed: u64,
    warm_init: Option<&Matrix>,
) -> Result<Smoothed> {
    let clustering = kmeans(x, params.k, params.max_iters, params.tol, seed, warm_init)?;
    // round first: the stored table must reproduce the residual exactly
    let centroids: Vec<bf16> = clustering
        .centroids
        .as_slice()
        .iter()
        .map(|&v| bf16::from_f64(v))
        .collect();
    let meta = StageMeta {
        centroids,
        assignments: clustering.assignments.clone(),
        k: params.k,
        head_dim: x.cols(),
    };
    let mut residual = x.clone();
    for (i, &a) in meta.assignments.iter().enumerate() {
        for (r, c) in residual.row_mut(i).iter_mut().zip(meta.centroid(a as usize)) {
            *r -= c.to_f64();
        }
    }
    Ok(Smoothed {
        residual,
        meta,
        clustering,
    })
}

/// Adds each token's assigned centroid back onto its residual row, in place.
pub fn add_back_in_place(residual: &mut Matrix, meta: &StageMeta) -> Result<()> {
    if meta.head_dim != residual.cols() {
        return Err(Error::DimensionMismatch(format!(
            "centroids have {} columns, residual has {}",
            meta.head_dim,
            residual.cols()
        )));
    }
    meta.validate(residual.rows())?;
    for (i, &a) in meta.assignments.iter().enumerate() {
        for (r, c) in residual.row_mut(i).iter_mut().zip(meta.centroid(a as usize)) {
            *r += c.to_f64();
        }
    }
    Ok(())
}

pub fn add_back(residual: &Matrix, meta: &StageMeta) -> Result<Matrix> {
    let mut out = residual.clone();
    add_back_in_place(&mut out, meta)?;
    Ok(out)
}
