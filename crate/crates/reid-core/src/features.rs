//! Feature-space transformations: normalization, camera-mean subtraction,
//! tracklet fusion, multi-view averaging and multi-model ensembling.
//!
//! Every operation is pure, reads its inputs immutably and allocates a
//! fresh output. Fusion steps re-normalize their result so Euclidean and
//! cosine rankings stay equivalent downstream; the `_raw` variants expose
//! the pre-normalization rows for algebraic checks and custom pipelines.
//! Zero vectors arising from subtraction or cancellation are hard errors.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::exec;
use crate::store::{FeatureSet, ImageMeta, View};

fn check_alignment(fs: &FeatureSet, metas: &[ImageMeta]) -> Result<()> {
    if fs.count() != metas.len() {
        return Err(Error::LengthMismatch {
            features: fs.count(),
            metas: metas.len(),
        });
    }
    Ok(())
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Normalize rows of `data` in place, failing on any zero row.
fn normalize_in_place(data: &mut [f32], dim: usize) -> Result<()> {
    // Find zero rows up front so the error carries the first offending index.
    for (row, chunk) in data.chunks_exact(dim).enumerate() {
        if row_norm(chunk) <= 0.0 {
            return Err(Error::ZeroRow { row });
        }
    }
    exec::for_each_chunk_mut(data, dim, |_, chunk| {
        let norm = row_norm(chunk);
        for v in chunk.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    });
    Ok(())
}

/// Scale every row to unit Euclidean length.
pub fn l2_normalize(fs: &FeatureSet) -> Result<FeatureSet> {
    let mut data = fs.data().to_vec();
    normalize_in_place(&mut data, fs.dim())?;
    Ok(FeatureSet::from_parts_unchecked(data, fs.dim(), true))
}

/// Arithmetic mean of the feature rows captured by each camera.
#[derive(Debug, Clone)]
pub struct CameraMeans {
    dim: usize,
    means: BTreeMap<u32, Vec<f64>>,
    counts: BTreeMap<u32, usize>,
}

impl CameraMeans {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self, camera: u32) -> Option<&[f64]> {
        self.means.get(&camera).map(Vec::as_slice)
    }

    pub fn count(&self, camera: u32) -> usize {
        self.counts.get(&camera).copied().unwrap_or(0)
    }

    pub fn cameras(&self) -> impl Iterator<Item = u32> + '_ {
        self.means.keys().copied()
    }
}

/// Per-camera average feature. Counts sum to the number of rows.
pub fn camera_means(fs: &FeatureSet, metas: &[ImageMeta]) -> Result<CameraMeans> {
    check_alignment(fs, metas)?;
    let dim = fs.dim();
    let mut sums: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for (row, meta) in fs.rows().zip(metas) {
        let sum = sums
            .entry(meta.camera_id)
            .or_insert_with(|| vec![0f64; dim]);
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += f64::from(v);
        }
        *counts.entry(meta.camera_id).or_insert(0) += 1;
    }
    for (camera, sum) in &mut sums {
        let n = counts[camera] as f64;
        for v in sum.iter_mut() {
            *v /= n;
        }
    }
    Ok(CameraMeans {
        dim,
        means: sums,
        counts,
    })
}

/// Camera-bias correction without the final re-normalization:
/// `row_i = g_i - alpha * mean(camera(i))`.
pub fn subtract_camera_mean_raw(
    fs: &FeatureSet,
    metas: &[ImageMeta],
    means: &CameraMeans,
    alpha: f32,
) -> Result<FeatureSet> {
    check_alignment(fs, metas)?;
    if !alpha.is_finite() {
        return Err(Error::InvalidParam {
            name: "alpha",
            reason: "must be finite".into(),
        });
    }
    if means.dim() != fs.dim() {
        return Err(Error::DimMismatch {
            left: fs.dim(),
            right: means.dim(),
        });
    }
    for (row, meta) in metas.iter().enumerate() {
        if means.mean(meta.camera_id).is_none() {
            return Err(Error::UnknownCamera {
                camera: meta.camera_id,
                row,
            });
        }
    }
    let dim = fs.dim();
    let alpha = f64::from(alpha);
    let mut data = fs.data().to_vec();
    let mean_of = |camera: u32| means.mean(camera).expect("checked above");
    exec::for_each_chunk_mut(&mut data, dim, |i, chunk| {
        let mean = mean_of(metas[i].camera_id);
        for (v, m) in chunk.iter_mut().zip(mean) {
            *v = (f64::from(*v) - alpha * m) as f32;
        }
    });
    Ok(FeatureSet::from_parts_unchecked(data, dim, false))
}

/// Camera-bias correction, re-normalized. A row that cancels to zero
/// (e.g. a camera's sole image with `alpha = 1`) is reported, not masked.
pub fn subtract_camera_mean(
    fs: &FeatureSet,
    metas: &[ImageMeta],
    means: &CameraMeans,
    alpha: f32,
) -> Result<FeatureSet> {
    let raw = subtract_camera_mean_raw(fs, metas, means, alpha)?;
    l2_normalize(&raw)
}

/// How tracklet member frames are combined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrackletAggregation {
    /// Arithmetic mean of member rows, re-normalized.
    Mean,
    /// Softmax-weighted sum: weights are `softmax(cos(frame, mean) / tau)`
    /// over the members, so representative frames dominate and outlier
    /// frames are down-weighted. Reduces to the mean for homogeneous
    /// tracklets.
    Weighted { tau: f32 },
}

/// Aggregation key: images without a tracklet are singleton tracklets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrackletKey {
    Track(u32),
    Lone(usize),
}

pub fn tracklet_key(meta: &ImageMeta, row: usize) -> TrackletKey {
    match meta.tracklet_id {
        Some(t) => TrackletKey::Track(t),
        None => TrackletKey::Lone(row),
    }
}

/// One aggregated unit vector per tracklet.
#[derive(Debug, Clone)]
pub struct TrackletFeatures {
    dim: usize,
    mode: TrackletAggregation,
    features: BTreeMap<TrackletKey, Vec<f32>>,
}

impl TrackletFeatures {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> TrackletAggregation {
        self.mode
    }

    pub fn get(&self, key: TrackletKey) -> Option<&[f32]> {
        self.features.get(&key).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn members_by_tracklet(metas: &[ImageMeta]) -> BTreeMap<TrackletKey, Vec<usize>> {
    let mut members: BTreeMap<TrackletKey, Vec<usize>> = BTreeMap::new();
    for (row, meta) in metas.iter().enumerate() {
        members
            .entry(tracklet_key(meta, row))
            .or_default()
            .push(row);
    }
    members
}

fn aggregate_group(fs: &FeatureSet, rows: &[usize], mode: TrackletAggregation) -> Vec<f64> {
    let dim = fs.dim();
    let mut mean = vec![0f64; dim];
    for &r in rows {
        for (m, &v) in mean.iter_mut().zip(fs.row(r)) {
            *m += f64::from(v);
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    match mode {
        TrackletAggregation::Mean => mean,
        TrackletAggregation::Weighted { tau } => {
            let mean_norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            // Member rows are unit vectors, so cos(frame, mean) is the dot
            // with the normalized mean. A cancelled (zero) mean gives every
            // frame cosine 0, i.e. uniform weights.
            let scores: Vec<f64> = rows
                .iter()
                .map(|&r| {
                    if mean_norm <= 0.0 {
                        0.0
                    } else {
                        fs.row(r)
                            .iter()
                            .zip(&mean)
                            .map(|(&v, m)| f64::from(v) * m)
                            .sum::<f64>()
                            / mean_norm
                            / f64::from(tau)
                    }
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut out = vec![0f64; dim];
            for (&r, w) in rows.iter().zip(&exps) {
                let w = w / total;
                for (o, &v) in out.iter_mut().zip(fs.row(r)) {
                    *o += w * f64::from(v);
                }
            }
            out
        }
    }
}

/// Aggregate member frames into one unit vector per tracklet.
///
/// Requires normalized input so the weighted cosine scores are meaningful.
pub fn tracklet_aggregate(
    fs: &FeatureSet,
    metas: &[ImageMeta],
    mode: TrackletAggregation,
) -> Result<TrackletFeatures> {
    check_alignment(fs, metas)?;
    if !fs.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if let TrackletAggregation::Weighted { tau } = mode {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::InvalidParam {
                name: "tau",
                reason: "must be finite and positive".into(),
            });
        }
    }
    let members = members_by_tracklet(metas);
    let groups: Vec<(&TrackletKey, &Vec<usize>)> = members.iter().collect();
    let aggregated = exec::map_collect(groups.len(), |g| aggregate_group(fs, groups[g].1, mode));
    let mut features = BTreeMap::new();
    for ((key, rows), agg) in groups.into_iter().zip(aggregated) {
        let norm = agg.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(Error::ZeroRow { row: rows[0] });
        }
        features.insert(*key, agg.iter().map(|&x| (x / norm) as f32).collect());
    }
    Ok(TrackletFeatures {
        dim: fs.dim(),
        mode,
        features,
    })
}

/// Tracklet fusion without the final re-normalization:
/// `row_i = beta * f_i + (1 - beta) * t(tracklet(i))`.
pub fn fuse_tracklet_raw(
    fs: &FeatureSet,
    metas: &[ImageMeta],
    tracklets: &TrackletFeatures,
    beta: f32,
) -> Result<FeatureSet> {
    check_alignment(fs, metas)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidParam {
            name: "beta",
            reason: format!("must lie in [0, 1], got {beta}"),
        });
    }
    if tracklets.dim() != fs.dim() {
        return Err(Error::DimMismatch {
            left: fs.dim(),
            right: tracklets.dim(),
        });
    }
    for (row, meta) in metas.iter().enumerate() {
        if tracklets.get(tracklet_key(meta, row)).is_none() {
            return Err(Error::MissingTracklet { row });
        }
    }
    let dim = fs.dim();
    let beta = f64::from(beta);
    let mut data = fs.data().to_vec();
    exec::for_each_chunk_mut(&mut data, dim, |i, chunk| {
        let t = tracklets
            .get(tracklet_key(&metas[i], i))
            .expect("checked above");
        for (v, &tv) in chunk.iter_mut().zip(t) {
            *v = (beta * f64::from(*v) + (1.0 - beta) * f64::from(tv)) as f32;
        }
    });
    Ok(FeatureSet::from_parts_unchecked(data, dim, false))
}

/// Blend each frame with its tracklet aggregate and re-normalize.
pub fn fuse_tracklet(
    fs: &FeatureSet,
    metas: &[ImageMeta],
    tracklets: &TrackletFeatures,
    beta: f32,
) -> Result<FeatureSet> {
    let raw = fuse_tracklet_raw(fs, metas, tracklets, beta)?;
    l2_normalize(&raw)
}

fn meta_fields_match(a: &ImageMeta, b: &ImageMeta) -> std::result::Result<(), &'static str> {
    if a.camera_id != b.camera_id {
        return Err("camera_id");
    }
    if a.tracklet_id != b.tracklet_id {
        return Err("tracklet_id");
    }
    if a.identity != b.identity {
        return Err("identity");
    }
    Ok(())
}

/// Average per-view features of each image into one row.
///
/// Sets are matched by `image_id`; the first set fixes the output order
/// and its metadata (with `view = original`) is carried over. An image
/// present in one set but missing in another is an error, as is a
/// cancellation to the zero vector.
pub fn average_views(sets: &[(&FeatureSet, &[ImageMeta])]) -> Result<(FeatureSet, Vec<ImageMeta>)> {
    if sets.is_empty() {
        return Err(Error::InvalidParam {
            name: "sets",
            reason: "need at least one view set".into(),
        });
    }
    let dim = sets[0].0.dim();
    for (fs, metas) in sets {
        check_alignment(fs, metas)?;
        if fs.dim() != dim {
            return Err(Error::DimMismatch {
                left: dim,
                right: fs.dim(),
            });
        }
    }
    let (_, first_metas) = sets[0];
    let lookups: Vec<HashMap<&str, usize>> = sets
        .iter()
        .map(|(_, metas)| {
            metas
                .iter()
                .enumerate()
                .map(|(i, m)| (m.image_id.as_str(), i))
                .collect()
        })
        .collect();
    // Cross-check the id universes both ways.
    for (set_idx, (_, metas)) in sets.iter().enumerate().skip(1) {
        for meta in metas.iter() {
            if !lookups[0].contains_key(meta.image_id.as_str()) {
                return Err(Error::MissingImage {
                    image_id: meta.image_id.clone(),
                    set: 0,
                });
            }
            let _ = set_idx;
        }
    }

    let mut data = vec![0f32; first_metas.len() * dim];
    let mut out_metas = Vec::with_capacity(first_metas.len());
    for (out_row, meta) in first_metas.iter().enumerate() {
        let mut acc = vec![0f64; dim];
        for (set_idx, (fs, metas)) in sets.iter().enumerate() {
            let row = *lookups[set_idx]
                .get(meta.image_id.as_str())
                .ok_or_else(|| Error::MissingImage {
                    image_id: meta.image_id.clone(),
                    set: set_idx,
                })?;
            meta_fields_match(meta, &metas[row]).map_err(|field| Error::MetaConflict {
                image_id: meta.image_id.clone(),
                field,
            })?;
            for (a, &v) in acc.iter_mut().zip(fs.row(row)) {
                *a += f64::from(v);
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(Error::ZeroRow { row: out_row });
        }
        for (slot, a) in data[out_row * dim..(out_row + 1) * dim]
            .iter_mut()
            .zip(&acc)
        {
            *slot = (a / norm) as f32;
        }
        out_metas.push(ImageMeta {
            view: View::Original,
            ..meta.clone()
        });
    }
    Ok((FeatureSet::from_parts_unchecked(data, dim, true), out_metas))
}

/// Concatenate per-model unit vectors row-wise and re-normalize.
///
/// The cosine structure of the output is the mean of the per-model
/// cosines, so ensembling by concatenation equals averaging similarity
/// matrices. All sets must be normalized and aligned on `image_id` order.
pub fn ensemble_features(sets: &[(&FeatureSet, &[ImageMeta])]) -> Result<FeatureSet> {
    if sets.is_empty() {
        return Err(Error::InvalidParam {
            name: "sets",
            reason: "need at least one model set".into(),
        });
    }
    let count = sets[0].0.count();
    for (fs, metas) in sets {
        check_alignment(fs, metas)?;
        if !fs.is_normalized() {
            return Err(Error::NotNormalized);
        }
        if fs.count() != count {
            return Err(Error::LengthMismatch {
                features: fs.count(),
                metas: count,
            });
        }
    }
    let first_metas = sets[0].1;
    for (_, metas) in sets.iter().skip(1) {
        for (index, (a, b)) in first_metas.iter().zip(metas.iter()).enumerate() {
            if a.image_id != b.image_id {
                return Err(Error::IdOrderMismatch {
                    index,
                    left: a.image_id.clone(),
                    right: b.image_id.clone(),
                });
            }
        }
    }
    let mut total_dim: usize = 0;
    for (fs, _) in sets {
        total_dim = total_dim.checked_add(fs.dim()).ok_or(Error::DimOverflow)?;
    }
    total_dim
        .checked_mul(count)
        .and_then(|cells| cells.checked_mul(4))
        .ok_or(Error::DimOverflow)?;

    let scale = 1.0 / (sets.len() as f64).sqrt();
    let mut data = Vec::with_capacity(total_dim * count);
    for i in 0..count {
        for (fs, _) in sets {
            data.extend(fs.row(i).iter().map(|&v| (f64::from(v) * scale) as f32));
        }
    }
    // Unit rows concatenated and scaled by 1/sqrt(M) are unit again up to
    // the inputs' own norm tolerance; renormalize exactly.
    let mut out = FeatureSet::from_parts_unchecked(data, total_dim, false);
    out = l2_normalize(&out)?;
    Ok(out)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn meta(id: &str, cam: u32, tracklet: Option<u32>) -> ImageMeta {
        ImageMeta {
            image_id: id.into(),
            camera_id: cam,
            tracklet_id: tracklet,
            identity: None,
            view: View::Original,
        }
    }

    fn unit_rows(rng: &mut StdRng, count: usize, dim: usize) -> FeatureSet {
        let data: Vec<f32> = (0..count * dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        l2_normalize(&FeatureSet::from_vec(data, dim).unwrap()).unwrap()
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| f64::from(x) * f64::from(y))
            .sum()
    }

    #[test]
    fn normalize_three_four_five() {
        let fs = FeatureSet::from_vec(vec![3.0, 4.0], 2).unwrap();
        let out = l2_normalize(&fs).unwrap();
        assert_abs_diff_eq!(out.row(0)[0], 0.6, epsilon = 1e-7);
        assert_abs_diff_eq!(out.row(0)[1], 0.8, epsilon = 1e-7);
        assert!(out.is_normalized());
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut rng = StdRng::seed_from_u64(5);
        let fs = unit_rows(&mut rng, 8, 6);
        let again = l2_normalize(&fs).unwrap();
        for (a, b) in fs.data().iter().zip(again.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        }
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let fs = FeatureSet::from_vec(vec![1.0, 0.0, 0.0, 0.0], 2).unwrap();
        match l2_normalize(&fs) {
            Err(Error::ZeroRow { row }) => assert_eq!(row, 1),
            other => panic!("expected ZeroRow, got {other:?}"),
        }
    }

    #[test]
    fn camera_means_simple() {
        let fs = FeatureSet::from_vec(vec![1.0, 0.0, 0.0, 1.0], 2).unwrap();
        let metas = vec![meta("a", 0, None), meta("b", 0, None)];
        let means = camera_means(&fs, &metas).unwrap();
        let m = means.mean(0).unwrap();
        assert_abs_diff_eq!(m[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m[1], 0.5, epsilon = 1e-12);
        assert_eq!(means.count(0), 2);
    }

    #[test]
    fn camera_mean_of_identical_rows_is_the_row() {
        let row = [0.6f32, 0.8];
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let fs = FeatureSet::from_vec(data, 2).unwrap();
        let metas: Vec<ImageMeta> = (0..5).map(|i| meta(&format!("i{i}"), 3, None)).collect();
        let means = camera_means(&fs, &metas).unwrap();
        let m = means.mean(3).unwrap();
        assert_abs_diff_eq!(m[0], 0.6, epsilon = 1e-6);
        assert_abs_diff_eq!(m[1], 0.8, epsilon = 1e-6);
    }

    #[test]
    fn camera_means_match_brute_force() {
        let mut rng = StdRng::seed_from_u64(17);
        let fs = unit_rows(&mut rng, 50, 8);
        let metas: Vec<ImageMeta> = (0..50)
            .map(|i| meta(&format!("i{i}"), (i % 3) as u32, None))
            .collect();
        let means = camera_means(&fs, &metas).unwrap();
        for cam in 0..3u32 {
            // Independent summation oracle.
            let rows: Vec<usize> = (0..50).filter(|&i| metas[i].camera_id == cam).collect();
            for k in 0..8 {
                let expect: f64 =
                    rows.iter().map(|&r| f64::from(fs.row(r)[k])).sum::<f64>() / rows.len() as f64;
                let got = means.mean(cam).unwrap()[k];
                assert!((got - expect).abs() < 1e-6 * expect.abs().max(1.0));
            }
        }
        let total: usize = means.cameras().map(|c| means.count(c)).sum();
        assert_eq!(total, 50);
    }

    #[test]
    fn subtract_with_alpha_zero_is_normalize() {
        let mut rng = StdRng::seed_from_u64(23);
        let fs = unit_rows(&mut rng, 20, 4);
        let metas: Vec<ImageMeta> = (0..20)
            .map(|i| meta(&format!("i{i}"), (i % 2) as u32, None))
            .collect();
        let means = camera_means(&fs, &metas).unwrap();
        let out = subtract_camera_mean(&fs, &metas, &means, 0.0).unwrap();
        let base = l2_normalize(&fs).unwrap();
        for (a, b) in out.data().iter().zip(base.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        }
    }

    #[test]
    fn subtract_shifts_camera_mean_by_one_minus_alpha() {
        let mut rng = StdRng::seed_from_u64(29);
        let fs = unit_rows(&mut rng, 60, 6);
        let metas: Vec<ImageMeta> = (0..60)
            .map(|i| meta(&format!("i{i}"), (i % 3) as u32, None))
            .collect();
        let means = camera_means(&fs, &metas).unwrap();
        let alpha = 0.18f32;
        let raw = subtract_camera_mean_raw(&fs, &metas, &means, alpha).unwrap();
        for cam in 0..3u32 {
            let rows: Vec<usize> = (0..60).filter(|&i| metas[i].camera_id == cam).collect();
            for k in 0..6 {
                let mean_after: f64 =
                    rows.iter().map(|&r| f64::from(raw.row(r)[k])).sum::<f64>() / rows.len() as f64;
                let expect = (1.0 - f64::from(alpha)) * means.mean(cam).unwrap()[k];
                assert!((mean_after - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lone_camera_image_with_alpha_one_cancels_to_zero_row() {
        let fs = FeatureSet::from_vec(vec![0.6, 0.8], 2).unwrap();
        let metas = vec![meta("only", 0, None)];
        let means = camera_means(&fs, &metas).unwrap();
        match subtract_camera_mean(&fs, &metas, &means, 1.0) {
            Err(Error::ZeroRow { row }) => assert_eq!(row, 0),
            other => panic!("expected ZeroRow, got {other:?}"),
        }
    }

    #[test]
    fn subtract_rejects_unknown_camera() {
        let fs = FeatureSet::from_vec(vec![0.6, 0.8, 0.0, 1.0], 2).unwrap();
        let metas = vec![meta("a", 0, None), meta("b", 0, None)];
        let means = camera_means(&fs, &metas).unwrap();
        let bad_metas = vec![meta("a", 0, None), meta("b", 9, None)];
        match subtract_camera_mean(&fs, &bad_metas, &means, 0.5) {
            Err(Error::UnknownCamera { camera, row }) => {
                assert_eq!((camera, row), (9, 1));
            }
            other => panic!("expected UnknownCamera, got {other:?}"),
        }
    }

    #[test]
    fn eq2_is_linear_in_the_input_scale() {
        // Scaling all inputs by a > 0 scales the pre-normalization output
        // by a (camera means scale along).
        let mut rng = StdRng::seed_from_u64(31);
        let fs = unit_rows(&mut rng, 12, 4);
        let metas: Vec<ImageMeta> = (0..12)
            .map(|i| meta(&format!("i{i}"), (i % 2) as u32, None))
            .collect();
        let a = 2.5f32;
        let scaled = FeatureSet::from_vec(fs.data().iter().map(|&v| v * a).collect(), 4).unwrap();
        let m1 = camera_means(&fs, &metas).unwrap();
        let m2 = camera_means(&scaled, &metas).unwrap();
        let r1 = subtract_camera_mean_raw(&fs, &metas, &m1, 0.3).unwrap();
        let r2 = subtract_camera_mean_raw(&scaled, &metas, &m2, 0.3).unwrap();
        for (x, y) in r1.data().iter().zip(r2.data()) {
            assert_abs_diff_eq!(x * a, *y, epsilon = 1e-5);
        }
    }

    #[test]
    fn singleton_tracklet_aggregates_to_its_frame() {
        let fs = l2_normalize(&FeatureSet::from_vec(vec![3.0, 4.0], 2).unwrap()).unwrap();
        let metas = vec![meta("a", 0, Some(4))];
        for mode in [
            TrackletAggregation::Mean,
            TrackletAggregation::Weighted { tau: 1.0 },
        ] {
            let tf = tracklet_aggregate(&fs, &metas, mode).unwrap();
            let agg = tf.get(TrackletKey::Track(4)).unwrap();
            assert_abs_diff_eq!(agg[0], 0.6, epsilon = 1e-6);
            assert_abs_diff_eq!(agg[1], 0.8, epsilon = 1e-6);
        }
    }

    #[test]
    fn identical_frames_aggregate_to_the_frame() {
        let fs = l2_normalize(&FeatureSet::from_vec(vec![3.0, 4.0, 3.0, 4.0], 2).unwrap()).unwrap();
        let metas = vec![meta("a", 0, Some(1)), meta("b", 0, Some(1))];
        for mode in [
            TrackletAggregation::Mean,
            TrackletAggregation::Weighted { tau: 1.0 },
        ] {
            let tf = tracklet_aggregate(&fs, &metas, mode).unwrap();
            let agg = tf.get(TrackletKey::Track(1)).unwrap();
            assert_abs_diff_eq!(agg[0], 0.6, epsilon = 1e-6);
            assert_abs_diff_eq!(agg[1], 0.8, epsilon = 1e-6);
        }
    }

    #[test]
    fn weighted_aggregate_matches_brute_force_softmax() {
        let mut rng = StdRng::seed_from_u64(37);
        let fs = unit_rows(&mut rng, 5, 8);
        let metas: Vec<ImageMeta> = (0..5).map(|i| meta(&format!("i{i}"), 0, Some(2))).collect();
        let tau = 0.7f32;
        let tf = tracklet_aggregate(&fs, &metas, TrackletAggregation::Weighted { tau }).unwrap();
        let got = tf.get(TrackletKey::Track(2)).unwrap();

        // Direct recomputation oracle.
        let dim = 8;
        let mut mean = vec![0f64; dim];
        for i in 0..5 {
            for k in 0..dim {
                mean[k] += f64::from(fs.row(i)[k]) / 5.0;
            }
        }
        let mean_norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scores: Vec<f64> = (0..5)
            .map(|i| {
                (0..dim)
                    .map(|k| f64::from(fs.row(i)[k]) * mean[k])
                    .sum::<f64>()
                    / mean_norm
                    / f64::from(tau)
            })
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let mut agg = vec![0f64; dim];
        for i in 0..5 {
            let w = scores[i].exp() / z;
            for k in 0..dim {
                agg[k] += w * f64::from(fs.row(i)[k]);
            }
        }
        let norm = agg.iter().map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..dim {
            assert!((f64::from(got[k]) - agg[k] / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_equals_weighted_for_identical_frames() {
        let fs = l2_normalize(
            &FeatureSet::from_vec(vec![1.0, 2.0, 2.0, 1.0, 2.0, 2.0, 1.0, 2.0, 2.0], 3).unwrap(),
        )
        .unwrap();
        let metas: Vec<ImageMeta> = (0..3).map(|i| meta(&format!("i{i}"), 0, Some(0))).collect();
        let a = tracklet_aggregate(&fs, &metas, TrackletAggregation::Mean).unwrap();
        let b =
            tracklet_aggregate(&fs, &metas, TrackletAggregation::Weighted { tau: 1.0 }).unwrap();
        for (x, y) in a
            .get(TrackletKey::Track(0))
            .unwrap()
            .iter()
            .zip(b.get(TrackletKey::Track(0)).unwrap())
        {
            assert_abs_diff_eq!(x, y, epsilon = 1e-7);
        }
    }

    #[test]
    fn fuse_beta_one_is_identity_after_normalization() {
        let mut rng = StdRng::seed_from_u64(41);
        let fs = unit_rows(&mut rng, 10, 4);
        let metas: Vec<ImageMeta> = (0..10)
            .map(|i| meta(&format!("i{i}"), 0, Some((i / 2) as u32)))
            .collect();
        let tf = tracklet_aggregate(&fs, &metas, TrackletAggregation::Mean).unwrap();
        let out = fuse_tracklet(&fs, &metas, &tf, 1.0).unwrap();
        for (a, b) in out.data().iter().zip(fs.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn fuse_beta_zero_collapses_tracklet_members() {
        let mut rng = StdRng::seed_from_u64(43);
        let fs = unit_rows(&mut rng, 9, 5);
        let metas: Vec<ImageMeta> = (0..9)
            .map(|i| meta(&format!("i{i}"), 0, Some((i / 3) as u32)))
            .collect();
        let tf = tracklet_aggregate(&fs, &metas, TrackletAggregation::Mean).unwrap();
        let out = fuse_tracklet(&fs, &metas, &tf, 0.0).unwrap();
        for t in 0..3 {
            let first = out.row(t * 3);
            for j in 1..3 {
                for (a, b) in out.row(t * 3 + j).iter().zip(first) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn fuse_output_lies_on_the_segment_and_sweep_is_monotone() {
        let mut rng = StdRng::seed_from_u64(47);
        let fs = unit_rows(&mut rng, 6, 8);
        let metas: Vec<ImageMeta> = (0..6)
            .map(|i| meta(&format!("i{i}"), 0, Some((i / 3) as u32)))
            .collect();
        let tf = tracklet_aggregate(&fs, &metas, TrackletAggregation::Mean).unwrap();
        let mut last_cos = [f64::INFINITY; 6];
        for beta in [0.0f32, 0.25, 0.5, 0.75, 1.0] {
            let raw = fuse_tracklet_raw(&fs, &metas, &tf, beta).unwrap();
            for i in 0..6 {
                let t = tf.get(tracklet_key(&metas[i], i)).unwrap();
                // Row must equal beta*f + (1-beta)*t, i.e. lie on the segment.
                for k in 0..8 {
                    let expect = f64::from(beta) * f64::from(fs.row(i)[k])
                        + (1.0 - f64::from(beta)) * f64::from(t[k]);
                    assert!((f64::from(raw.row(i)[k]) - expect).abs() < 1e-6);
                }
                let norm = row_norm(raw.row(i));
                let cos = dot(raw.row(i), t) / norm;
                assert!(cos <= last_cos[i] + 1e-9, "cos not monotone in beta");
                last_cos[i] = cos;
            }
        }
    }

    #[test]
    fn fuse_rejects_missing_tracklet() {
        let fs = l2_normalize(&FeatureSet::from_vec(vec![1.0, 0.0, 0.0, 1.0], 2).unwrap()).unwrap();
        let metas = vec![meta("a", 0, Some(0)), meta("b", 0, Some(1))];
        let only_first =
            tracklet_aggregate(&fs.subset(&[0]), &metas[..1], TrackletAggregation::Mean).unwrap();
        match fuse_tracklet(&fs, &metas, &only_first, 0.5) {
            Err(Error::MissingTracklet { row }) => assert_eq!(row, 1),
            other => panic!("expected MissingTracklet, got {other:?}"),
        }
    }

    #[test]
    fn average_views_of_identical_copies_is_identity() {
        let mut rng = StdRng::seed_from_u64(53);
        let fs = unit_rows(&mut rng, 7, 4);
        let metas: Vec<ImageMeta> = (0..7).map(|i| meta(&format!("i{i}"), 0, None)).collect();
        let sets = vec![(&fs, metas.as_slice()); 4];
        let (out, out_metas) = average_views(&sets).unwrap();
        assert_eq!(out_metas.len(), 7);
        for (a, b) in out.data().iter().zip(fs.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn average_views_surfaces_cancellation() {
        let v = l2_normalize(&FeatureSet::from_vec(vec![0.6, 0.8], 2).unwrap()).unwrap();
        let neg = FeatureSet::from_vec(v.data().iter().map(|&x| -x).collect(), 2).unwrap();
        let metas = vec![meta("a", 0, None)];
        match average_views(&[(&v, metas.as_slice()), (&neg, metas.as_slice())]) {
            Err(Error::ZeroRow { row }) => assert_eq!(row, 0),
            other => panic!("expected ZeroRow, got {other:?}"),
        }
    }

    #[test]
    fn average_views_matches_brute_force_and_set_order() {
        let mut rng = StdRng::seed_from_u64(59);
        let sets_data: Vec<FeatureSet> = (0..4).map(|_| unit_rows(&mut rng, 5, 6)).collect();
        let metas: Vec<ImageMeta> = (0..5).map(|i| meta(&format!("i{i}"), 0, None)).collect();
        let sets: Vec<(&FeatureSet, &[ImageMeta])> =
            sets_data.iter().map(|fs| (fs, metas.as_slice())).collect();
        let (out, _) = average_views(&sets).unwrap();
        for i in 0..5 {
            let mut acc = [0f64; 6];
            for fs in &sets_data {
                for k in 0..6 {
                    acc[k] += f64::from(fs.row(i)[k]);
                }
            }
            let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
            for k in 0..6 {
                assert!((f64::from(out.row(i)[k]) - acc[k] / norm).abs() < 1e-6);
            }
        }
        // Permutation invariance over input-set order.
        let mut reversed: Vec<(&FeatureSet, &[ImageMeta])> = sets.clone();
        reversed.reverse();
        let (out_rev, _) = average_views(&reversed).unwrap();
        for (a, b) in out.data().iter().zip(out_rev.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn average_views_reports_missing_image() {
        let mut rng = StdRng::seed_from_u64(61);
        let a = unit_rows(&mut rng, 3, 4);
        let b = unit_rows(&mut rng, 2, 4);
        let metas_a: Vec<ImageMeta> = (0..3).map(|i| meta(&format!("i{i}"), 0, None)).collect();
        let metas_b: Vec<ImageMeta> = (0..2).map(|i| meta(&format!("i{i}"), 0, None)).collect();
        match average_views(&[(&a, metas_a.as_slice()), (&b, metas_b.as_slice())]) {
            Err(Error::MissingImage { image_id, set }) => {
                assert_eq!(image_id, "i2");
                assert_eq!(set, 1);
            }
            other => panic!("expected MissingImage, got {other:?}"),
        }
    }

    #[test]
    fn ensemble_of_one_is_identity() {
        let mut rng = StdRng::seed_from_u64(67);
        let fs = unit_rows(&mut rng, 6, 5);
        let metas: Vec<ImageMeta> = (0..6).map(|i| meta(&format!("i{i}"), 0, None)).collect();
        let out = ensemble_features(&[(&fs, metas.as_slice())]).unwrap();
        assert_eq!(out.dim(), 5);
        for (a, b) in out.data().iter().zip(fs.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn ensemble_of_duplicates_preserves_cosines() {
        let mut rng = StdRng::seed_from_u64(71);
        let fs = unit_rows(&mut rng, 8, 7);
        let metas: Vec<ImageMeta> = (0..8).map(|i| meta(&format!("i{i}"), 0, None)).collect();
        let out = ensemble_features(&[(&fs, metas.as_slice()), (&fs, metas.as_slice())]).unwrap();
        assert_eq!(out.dim(), 14);
        for i in 0..8 {
            for j in 0..8 {
                let before = dot(fs.row(i), fs.row(j));
                let after = dot(out.row(i), out.row(j));
                assert!((before - after).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ensemble_of_orthogonal_planes_has_unit_rows() {
        let a = FeatureSet::from_vec(vec![1.0, 0.0, 0.0, 1.0], 2).unwrap();
        let b = FeatureSet::from_vec(vec![0.0, 1.0, 1.0, 0.0], 2).unwrap();
        let metas = vec![meta("x", 0, None), meta("y", 0, None)];
        let out = ensemble_features(&[(&a, metas.as_slice()), (&b, metas.as_slice())]).unwrap();
        assert_eq!(out.dim(), 4);
        for i in 0..2 {
            assert_abs_diff_eq!(row_norm(out.row(i)) as f32, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn ensemble_rejects_misaligned_ids() {
        let fs = FeatureSet::from_vec(vec![1.0, 0.0, 0.0, 1.0], 2).unwrap();
        let metas_a = vec![meta("x", 0, None), meta("y", 0, None)];
        let metas_b = vec![meta("y", 0, None), meta("x", 0, None)];
        match ensemble_features(&[(&fs, metas_a.as_slice()), (&fs, metas_b.as_slice())]) {
            Err(Error::IdOrderMismatch { index, .. }) => assert_eq!(index, 0),
            other => panic!("expected IdOrderMismatch, got {other:?}"),
        }
    }
}
