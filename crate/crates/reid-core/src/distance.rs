//! Dense pairwise distance kernels, distance fusion and checkpointing.
//!
//! Distances are squared Euclidean on unit vectors, `2 - 2 * dot`, so raw
//! ranking is identical under cosine and Euclidean. Matrices are stored
//! as `f64` in memory; checkpoints mirror the feature-store raw format
//! (f32le, row-major) with a TOML sidecar manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::store::{FeatureSet, ImageMeta};

/// Sentinel for entries excluded from ranking (camera verification).
pub const MASKED: f64 = f64::INFINITY;

/// Provenance of a distance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    /// Squared Euclidean of unit vectors; entries in `[0, 4]`.
    Raw,
    /// Jaccard distance over k-reciprocal encodings; entries in `[0, 1]`.
    Jaccard,
    /// Blend of Jaccard and original distance.
    Reranked,
    /// Camera/orientation fusion; may contain negative entries.
    Fused,
}

impl DistanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceKind::Raw => "raw",
            DistanceKind::Jaccard => "jaccard",
            DistanceKind::Reranked => "reranked",
            DistanceKind::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Option<DistanceKind> {
        match s {
            "raw" => Some(DistanceKind::Raw),
            "jaccard" => Some(DistanceKind::Jaccard),
            "reranked" => Some(DistanceKind::Reranked),
            "fused" => Some(DistanceKind::Fused),
            _ => None,
        }
    }
}

/// Dense query-by-gallery distance matrix with id lists on both axes.
/// Entries are finite except for [`MASKED`] sentinels; NaN never occurs.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    kind: DistanceKind,
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(
        kind: DistanceKind,
        row_ids: Vec<String>,
        col_ids: Vec<String>,
        data: Vec<f64>,
    ) -> Result<DistanceMatrix> {
        if data.len() != row_ids.len() * col_ids.len() {
            return Err(Error::ShapeMismatch {
                left_rows: row_ids.len(),
                left_cols: col_ids.len(),
                right_rows: if col_ids.is_empty() {
                    0
                } else {
                    data.len() / col_ids.len()
                },
                right_cols: col_ids.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| v.is_nan()) {
            let cols = col_ids.len().max(1);
            return Err(Error::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(DistanceMatrix {
            kind,
            row_ids,
            col_ids,
            data,
        })
    }

    pub(crate) fn from_parts_unchecked(
        kind: DistanceKind,
        row_ids: Vec<String>,
        col_ids: Vec<String>,
        data: Vec<f64>,
    ) -> DistanceMatrix {
        debug_assert_eq!(data.len(), row_ids.len() * col_ids.len());
        DistanceMatrix {
            kind,
            row_ids,
            col_ids,
            data,
        }
    }

    pub fn kind(&self) -> DistanceKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

fn ids_of(metas: &[ImageMeta]) -> Vec<String> {
    metas.iter().map(|m| m.image_id.clone()).collect()
}

fn check_pairwise_inputs(
    q: &FeatureSet,
    q_metas: &[ImageMeta],
    g: &FeatureSet,
    g_metas: &[ImageMeta],
) -> Result<()> {
    if q.count() != q_metas.len() {
        return Err(Error::LengthMismatch {
            features: q.count(),
            metas: q_metas.len(),
        });
    }
    if g.count() != g_metas.len() {
        return Err(Error::LengthMismatch {
            features: g.count(),
            metas: g_metas.len(),
        });
    }
    if q.dim() != g.dim() {
        return Err(Error::DimMismatch {
            left: q.dim(),
            right: g.dim(),
        });
    }
    if !q.is_normalized() || !g.is_normalized() {
        return Err(Error::NotNormalized);
    }
    Ok(())
}

pub(crate) fn squared_euclidean_unit(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    (2.0 - 2.0 * dot).clamp(0.0, 4.0)
}

fn fill_row(i: usize, out: &mut [f64], q: &FeatureSet, g: &FeatureSet) {
    let qi = q.row(i);
    for (j, slot) in out.iter_mut().enumerate() {
        *slot = squared_euclidean_unit(qi, g.row(j));
    }
}

/// Force exact zeros where the row and column reference the same image.
fn zero_shared_ids(data: &mut [f64], row_ids: &[String], col_ids: &[String]) {
    let col_index: std::collections::HashMap<&str, usize> = col_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (id.as_str(), j))
        .collect();
    let cols = col_ids.len();
    for (i, id) in row_ids.iter().enumerate() {
        if let Some(&j) = col_index.get(id.as_str()) {
            data[i * cols + j] = 0.0;
        }
    }
}

/// Squared Euclidean distances between two normalized sets.
///
/// Parallelizes by output row with the `parallel` feature; results are
/// bit-identical to [`pairwise_seq`] either way.
pub fn pairwise(
    q: &FeatureSet,
    q_metas: &[ImageMeta],
    g: &FeatureSet,
    g_metas: &[ImageMeta],
) -> Result<DistanceMatrix> {
    check_pairwise_inputs(q, q_metas, g, g_metas)?;
    let mut data = vec![0f64; q.count() * g.count()];
    if g.count() > 0 {
        exec::for_each_chunk_mut(&mut data, g.count(), |i, row| fill_row(i, row, q, g));
    }
    let row_ids = ids_of(q_metas);
    let col_ids = ids_of(g_metas);
    zero_shared_ids(&mut data, &row_ids, &col_ids);
    Ok(DistanceMatrix::from_parts_unchecked(
        DistanceKind::Raw,
        row_ids,
        col_ids,
        data,
    ))
}

/// Always-sequential twin of [`pairwise`], kept public as the baseline
/// for the benchmark suite.
pub fn pairwise_seq(
    q: &FeatureSet,
    q_metas: &[ImageMeta],
    g: &FeatureSet,
    g_metas: &[ImageMeta],
) -> Result<DistanceMatrix> {
    check_pairwise_inputs(q, q_metas, g, g_metas)?;
    let mut data = vec![0f64; q.count() * g.count()];
    if g.count() > 0 {
        data.chunks_mut(g.count())
            .enumerate()
            .for_each(|(i, row)| fill_row(i, row, q, g));
    }
    let row_ids = ids_of(q_metas);
    let col_ids = ids_of(g_metas);
    zero_shared_ids(&mut data, &row_ids, &col_ids);
    Ok(DistanceMatrix::from_parts_unchecked(
        DistanceKind::Raw,
        row_ids,
        col_ids,
        data,
    ))
}

fn check_same_frame(a: &DistanceMatrix, b: &DistanceMatrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    for (index, (x, y)) in a.row_ids().iter().zip(b.row_ids()).enumerate() {
        if x != y {
            return Err(Error::MatrixIdMismatch { axis: "row", index });
        }
    }
    for (index, (x, y)) in a.col_ids().iter().zip(b.col_ids()).enumerate() {
        if x != y {
            return Err(Error::MatrixIdMismatch {
                axis: "column",
                index,
            });
        }
    }
    Ok(())
}

/// Entrywise `D = D_r - lambda1 * D_c - lambda2 * D_o`.
///
/// `D_c` and `D_o` come from running [`pairwise`] on auxiliary camera and
/// orientation embedding sets. Negative outputs are preserved: only
/// ordering matters downstream.
pub fn fuse_distances(
    d_r: &DistanceMatrix,
    d_c: &DistanceMatrix,
    d_o: &DistanceMatrix,
    lambda1: f64,
    lambda2: f64,
) -> Result<DistanceMatrix> {
    check_same_frame(d_r, d_c)?;
    check_same_frame(d_r, d_o)?;
    for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
        if !v.is_finite() {
            return Err(Error::InvalidParam {
                name,
                reason: "must be finite".into(),
            });
        }
    }
    let mut data = d_r.data().to_vec();
    let cols = d_r.cols();
    if cols > 0 {
        exec::for_each_chunk_mut(&mut data, cols, |i, row| {
            let rc = d_c.row(i);
            let ro = d_o.row(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v -= lambda1 * rc[j] + lambda2 * ro[j];
            }
        });
    }
    Ok(DistanceMatrix::from_parts_unchecked(
        DistanceKind::Fused,
        d_r.row_ids().to_vec(),
        d_r.col_ids().to_vec(),
        data,
    ))
}

/// Entrywise mean of several aligned matrices — the distance-level
/// ensemble mode. The common kind is kept; mixed kinds become `Fused`.
pub fn average_distances(matrices: &[&DistanceMatrix]) -> Result<DistanceMatrix> {
    let first = matrices.first().ok_or(Error::InvalidParam {
        name: "matrices",
        reason: "need at least one matrix".into(),
    })?;
    for m in &matrices[1..] {
        check_same_frame(first, m)?;
    }
    let kind = if matrices.iter().all(|m| m.kind() == first.kind()) {
        first.kind()
    } else {
        DistanceKind::Fused
    };
    let scale = 1.0 / matrices.len() as f64;
    let mut data = vec![0f64; first.data().len()];
    for (idx, slot) in data.iter_mut().enumerate() {
        let mut acc = 0f64;
        for m in matrices {
            acc += m.data()[idx];
        }
        *slot = acc * scale;
    }
    Ok(DistanceMatrix::from_parts_unchecked(
        kind,
        first.row_ids().to_vec(),
        first.col_ids().to_vec(),
        data,
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixManifest {
    rows: usize,
    cols: usize,
    dtype: String,
    order: String,
    kind: String,
    data: String,
    row_ids: String,
    col_ids: String,
}

fn resolve(manifest_path: &Path, relative: &str) -> PathBuf {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    base.join(relative)
}

fn manifest_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Dump a matrix next to `manifest_path` (f32le payload, one id per line
/// in the two id files).
pub fn write_matrix(m: &DistanceMatrix, manifest_path: &Path) -> Result<()> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| manifest_error(manifest_path, "manifest path has no file stem"))?;
    let manifest = MatrixManifest {
        rows: m.rows(),
        cols: m.cols(),
        dtype: "f32le".into(),
        order: "row_major".into(),
        kind: m.kind().as_str().into(),
        data: format!("{stem}.bin"),
        row_ids: format!("{stem}.rows.txt"),
        col_ids: format!("{stem}.cols.txt"),
    };
    let mut bytes = Vec::with_capacity(m.data().len() * 4);
    for &v in m.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let data_path = resolve(manifest_path, &manifest.data);
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    for (name, ids) in [
        (&manifest.row_ids, m.row_ids()),
        (&manifest.col_ids, m.col_ids()),
    ] {
        let path = resolve(manifest_path, name);
        let mut text = String::new();
        for id in ids {
            text.push_str(id);
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let text =
        toml::to_string(&manifest).map_err(|e| manifest_error(manifest_path, e.to_string()))?;
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

/// Load a matrix checkpoint written by [`write_matrix`].
pub fn read_matrix(manifest_path: &Path) -> Result<DistanceMatrix> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: MatrixManifest =
        toml::from_str(&text).map_err(|e| manifest_error(manifest_path, e.to_string()))?;
    if manifest.dtype != "f32le" || manifest.order != "row_major" {
        return Err(manifest_error(
            manifest_path,
            "dtype must be f32le and order row_major",
        ));
    }
    let kind = DistanceKind::parse(&manifest.kind).ok_or_else(|| {
        manifest_error(manifest_path, format!("unknown kind {:?}", manifest.kind))
    })?;
    let data_path = resolve(manifest_path, &manifest.data);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = manifest.rows as u64 * manifest.cols as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut data = Vec::with_capacity(manifest.rows * manifest.cols);
    for chunk in bytes.chunks_exact(4) {
        data.push(f64::from(f32::from_le_bytes([
            chunk[0], chunk[1], chunk[2], chunk[3],
        ])));
    }
    let mut id_lists = Vec::new();
    for (name, expected_len) in [
        (&manifest.row_ids, manifest.rows),
        (&manifest.col_ids, manifest.cols),
    ] {
        let path = resolve(manifest_path, name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ids: Vec<String> = text.lines().map(str::to_string).collect();
        if ids.len() != expected_len {
            return Err(manifest_error(
                manifest_path,
                format!(
                    "id file {name} has {} entries, expected {expected_len}",
                    ids.len()
                ),
            ));
        }
        id_lists.push(ids);
    }
    let col_ids = id_lists.pop().unwrap();
    let row_ids = id_lists.pop().unwrap();
    DistanceMatrix::new(kind, row_ids, col_ids, data)
}
