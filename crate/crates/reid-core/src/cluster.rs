//! DBSCAN over precomputed distances and pseudo-label generation.
//!
//! Labels follow standard DBSCAN semantics: a core point has at least
//! `min_samples` points (itself included) within `eps`; clusters are
//! maximal density-connected sets; border points attach to the first
//! discovered core's cluster; noise is `-1`. Scan order is ascending
//! index, so results are deterministic.

use std::collections::VecDeque;
use std::path::Path;

use crate::distance::{pairwise, DistanceMatrix};
use crate::error::{Error, Result};
use crate::exec;
use crate::features::{
    camera_means, fuse_tracklet, l2_normalize, subtract_camera_mean, tracklet_aggregate,
    TrackletAggregation,
};
use crate::rerank::{jaccard_only, RerankParams};
use crate::store::{FeatureSet, ImageMeta};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_samples: usize,
}

impl DbscanParams {
    pub fn new(eps: f64, min_samples: usize) -> Result<DbscanParams> {
        let params = DbscanParams { eps, min_samples };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(Error::InvalidParam {
                name: "eps",
                reason: "must be finite and positive".into(),
            });
        }
        if self.min_samples == 0 {
            return Err(Error::InvalidParam {
                name: "min_samples",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Per-image cluster assignment; `-1` marks noise. Cluster labels are
/// consecutive integers `0..num_clusters` in order of discovery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    pub labels: Vec<i32>,
    pub num_clusters: usize,
}

impl PseudoLabels {
    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l < 0).count()
    }
}

const SYMMETRY_TOLERANCE: f64 = 1e-6;

fn validate_square_symmetric(d: &DistanceMatrix) -> Result<()> {
    let n = d.rows();
    if d.cols() != n {
        return Err(Error::NotSymmetric {
            reason: format!("matrix is {}x{}, not square", n, d.cols()),
        });
    }
    for i in 0..n {
        let diag = d.get(i, i);
        if !diag.is_finite() || diag.abs() > SYMMETRY_TOLERANCE {
            return Err(Error::NotSymmetric {
                reason: format!("diagonal entry {i} is {diag}, expected 0"),
            });
        }
        for j in (i + 1)..n {
            let (a, b) = (d.get(i, j), d.get(j, i));
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::NotSymmetric {
                    reason: format!("non-finite entry at ({i},{j})"),
                });
            }
            if (a - b).abs() > SYMMETRY_TOLERANCE {
                return Err(Error::NotSymmetric {
                    reason: format!("entries ({i},{j})={a} and ({j},{i})={b} differ"),
                });
            }
        }
    }
    Ok(())
}

/// DBSCAN on a precomputed square symmetric distance matrix.
pub fn dbscan(d: &DistanceMatrix, params: &DbscanParams) -> Result<PseudoLabels> {
    params.validate()?;
    validate_square_symmetric(d)?;
    let n = d.rows();

    let neighbors: Vec<Vec<u32>> = exec::map_collect(n, |i| {
        d.row(i)
            .iter()
            .enumerate()
            .filter(|&(_, &v)| v <= params.eps)
            .map(|(j, _)| j as u32)
            .collect()
    });
    let core: Vec<bool> = neighbors
        .iter()
        .map(|nb| nb.len() >= params.min_samples)
        .collect();

    let mut labels = vec![-1i32; n];
    let mut next = 0i32;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if !core[seed] || labels[seed] >= 0 {
            continue;
        }
        labels[seed] = next;
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                let q = q as usize;
                if labels[q] >= 0 {
                    continue;
                }
                labels[q] = next;
                if core[q] {
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    Ok(PseudoLabels {
        labels,
        num_clusters: next as usize,
    })
}

/// Distance the clustering runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterMetric {
    /// Jaccard distance from the k-reciprocal encoding (default).
    Jaccard,
    /// Plain squared Euclidean.
    Raw,
}

#[derive(Debug, Clone)]
pub struct PseudoLabelParams {
    /// Camera-mean subtraction weight.
    pub alpha: f32,
    /// Frame/tracklet blend weight.
    pub beta: f32,
    pub rerank: RerankParams,
    pub dbscan: DbscanParams,
    pub metric: ClusterMetric,
}

/// The self-distance matrix the pseudo-label pipeline clusters on:
/// normalize, subtract the camera mean, blend each frame with its
/// tracklet mean, then take Jaccard (or raw) distances of the set
/// against itself. Exposed so several DBSCAN parameter sets can reuse
/// one distance pass.
pub fn pseudo_label_distance(
    fs: &FeatureSet,
    metas: &[ImageMeta],
    params: &PseudoLabelParams,
) -> Result<DistanceMatrix> {
    let normalized = l2_normalize(fs)?;
    let means = camera_means(&normalized, metas)?;
    let corrected = subtract_camera_mean(&normalized, metas, &means, params.alpha)?;
    let tracklets = tracklet_aggregate(&corrected, metas, TrackletAggregation::Mean)?;
    let fused = fuse_tracklet(&corrected, metas, &tracklets, params.beta)?;
    match params.metric {
        ClusterMetric::Jaccard => jaccard_only(&fused, metas, &fused, metas, &params.rerank),
        ClusterMetric::Raw => pairwise(&fused, metas, &fused, metas),
    }
}

/// Full pseudo-label pipeline; see [`pseudo_label_distance`].
pub fn generate_pseudo_labels(
    fs: &FeatureSet,
    metas: &[ImageMeta],
    params: &PseudoLabelParams,
) -> Result<PseudoLabels> {
    let d = pseudo_label_distance(fs, metas, params)?;
    dbscan(&d, &params.dbscan)
}

/// Write `image_id,label` rows; `-1` for noise. The hand-off artifact
/// for external fine-tuning code.
pub fn write_labels(labels: &PseudoLabels, metas: &[ImageMeta], path: &Path) -> Result<()> {
    if labels.labels.len() != metas.len() {
        return Err(Error::LengthMismatch {
            features: labels.labels.len(),
            metas: metas.len(),
        });
    }
    let mut text = String::from("image_id,label\n");
    for (meta, label) in metas.iter().zip(&labels.labels) {
        text.push_str(&meta.image_id);
        text.push(',');
        text.push_str(&label.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
