//! Final ranking with camera verification and image-to-track retrieval,
//! plus mAP/CMC evaluation.

use std::path::Path;

use crate::distance::{DistanceMatrix, MASKED};
use crate::error::{Error, Result};
use crate::exec;
use crate::features::{tracklet_key, TrackletKey};
use crate::store::ImageMeta;

fn check_axis_ids(ids: &[String], metas: &[ImageMeta], axis: &'static str) -> Result<()> {
    if ids.len() != metas.len() {
        return Err(Error::LengthMismatch {
            features: ids.len(),
            metas: metas.len(),
        });
    }
    for (index, (id, meta)) in ids.iter().zip(metas).enumerate() {
        if *id != meta.image_id {
            return Err(Error::MatrixIdMismatch { axis, index });
        }
    }
    Ok(())
}

/// Mask gallery candidates that share the query's camera.
///
/// Masked entries become [`MASKED`] and never appear in rankings. A query
/// left without any finite candidate is an error naming the query.
pub fn camera_verify_mask(
    d: &DistanceMatrix,
    q_metas: &[ImageMeta],
    g_metas: &[ImageMeta],
) -> Result<DistanceMatrix> {
    check_axis_ids(d.row_ids(), q_metas, "row")?;
    check_axis_ids(d.col_ids(), g_metas, "column")?;
    let mut out = d.clone();
    let cols = d.cols();
    {
        let data = out.data_mut();
        exec::for_each_chunk_mut(data, cols.max(1), |i, row| {
            if i >= q_metas.len() {
                return;
            }
            let cam = q_metas[i].camera_id;
            for (j, v) in row.iter_mut().enumerate() {
                if g_metas[j].camera_id == cam {
                    *v = MASKED;
                }
            }
        });
    }
    for (i, meta) in q_metas.iter().enumerate() {
        if out.row(i).iter().all(|v| !v.is_finite()) {
            return Err(Error::EmptyCandidates {
                query_id: meta.image_id.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankEntry {
    pub gallery_index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    pub query_index: usize,
    pub entries: Vec<RankEntry>,
}

/// Per-query ordered gallery candidates; distances are non-decreasing
/// along each list and masked entries never appear.
#[derive(Debug, Clone, PartialEq)]
pub struct RankList {
    pub queries: Vec<QueryRanking>,
}

fn rank_row_i2i(row: &[f64], top_k: usize) -> Vec<RankEntry> {
    let mut entries: Vec<RankEntry> = row
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v.is_finite())
        .map(|(j, &v)| RankEntry {
            gallery_index: j,
            distance: v,
        })
        .collect();
    entries.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.gallery_index.cmp(&b.gallery_index))
    });
    entries.truncate(top_k);
    entries
}

fn rank_row_i2t(
    row: &[f64],
    tracklet_order: &[TrackletKey],
    members: &std::collections::HashMap<TrackletKey, Vec<usize>>,
    top_k: usize,
) -> Vec<RankEntry> {
    // Score each gallery tracklet by its best (minimum) member distance.
    let mut scored: Vec<(f64, usize, TrackletKey)> = Vec::new();
    for &key in tracklet_order {
        let mut best = f64::INFINITY;
        let mut best_idx = usize::MAX;
        for &j in &members[&key] {
            let v = row[j];
            if v.is_finite() && (v < best || (v == best && j < best_idx)) {
                best = v;
                best_idx = j;
            }
        }
        if best.is_finite() {
            scored.push((best, best_idx, key));
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut entries = Vec::new();
    for (score, _, key) in scored {
        let mut member_list: Vec<usize> = members[&key]
            .iter()
            .copied()
            .filter(|&j| row[j].is_finite())
            .collect();
        member_list.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        for j in member_list {
            // Members carry the tracklet score so list distances stay
            // non-decreasing; image-level evaluation is unaffected.
            entries.push(RankEntry {
                gallery_index: j,
                distance: score,
            });
            if entries.len() == top_k {
                return entries;
            }
        }
    }
    entries
}

/// Rank gallery candidates per query.
///
/// Image-to-image mode sorts each row ascending with ties broken by
/// ascending gallery index. Image-to-track mode scores each gallery
/// tracklet by the minimum distance over its members, ranks tracklets,
/// and expands members back so evaluation stays image-level.
pub fn rank(
    d: &DistanceMatrix,
    g_metas: &[ImageMeta],
    top_k: usize,
    i2t: bool,
) -> Result<RankList> {
    if top_k == 0 {
        return Err(Error::InvalidParam {
            name: "top_k",
            reason: "must be at least 1".into(),
        });
    }
    check_axis_ids(d.col_ids(), g_metas, "column")?;

    let queries = if i2t {
        let tracklet_of: Vec<TrackletKey> = g_metas
            .iter()
            .enumerate()
            .map(|(j, m)| tracklet_key(m, j))
            .collect();
        let mut members: std::collections::HashMap<TrackletKey, Vec<usize>> =
            std::collections::HashMap::new();
        let mut order: Vec<TrackletKey> = Vec::new();
        for (j, &key) in tracklet_of.iter().enumerate() {
            let slot = members.entry(key).or_default();
            if slot.is_empty() {
                order.push(key);
            }
            slot.push(j);
        }
        exec::map_collect(d.rows(), |i| QueryRanking {
            query_index: i,
            entries: rank_row_i2t(d.row(i), &order, &members, top_k),
        })
    } else {
        exec::map_collect(d.rows(), |i| QueryRanking {
            query_index: i,
            entries: rank_row_i2i(d.row(i), top_k),
        })
    };
    Ok(RankList { queries })
}

/// How same-camera ground-truth matches are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SameCameraRule {
    /// Same-camera matches count as relevant (no camera verification).
    Keep,
    /// Same-camera matches are excluded from candidates and from the
    /// relevant count; pair with [`camera_verify_mask`].
    Exclude,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Lists are truncated to this length; the AP denominator caps here.
    pub top_k_map: usize,
    pub same_camera: SameCameraRule,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            top_k_map: 100,
            same_camera: SameCameraRule::Keep,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryAp {
    pub query_index: usize,
    pub ap: f64,
}

/// mAP, CMC curve and per-query average precision. Queries without any
/// relevant gallery item are excluded from every mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub cmc: Vec<f64>,
    pub per_query: Vec<QueryAp>,
    pub queries_evaluated: usize,
}

impl EvalReport {
    /// CMC at 1-based rank `k`, saturating at the curve's end.
    pub fn cmc_at(&self, k: usize) -> f64 {
        if self.cmc.is_empty() || k == 0 {
            return 0.0;
        }
        self.cmc[k.min(self.cmc.len()) - 1]
    }
}

/// Truncated-list mAP and CMC against ground-truth identities.
pub fn evaluate(
    rl: &RankList,
    q_metas: &[ImageMeta],
    g_metas: &[ImageMeta],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if rl.queries.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if opts.top_k_map == 0 {
        return Err(Error::InvalidParam {
            name: "top_k_map",
            reason: "must be at least 1".into(),
        });
    }
    for meta in q_metas.iter().chain(g_metas) {
        if meta.identity.is_none() {
            return Err(Error::MissingIdentity {
                image_id: meta.image_id.clone(),
            });
        }
    }

    let relevant = |q: &ImageMeta, g: &ImageMeta| -> bool {
        g.identity == q.identity
            && match opts.same_camera {
                SameCameraRule::Keep => true,
                SameCameraRule::Exclude => g.camera_id != q.camera_id,
            }
    };

    let per_query: Vec<Option<(f64, Option<usize>)>> = exec::map_collect(rl.queries.len(), |qi| {
        let ranking = &rl.queries[qi];
        let q = &q_metas[ranking.query_index];
        let total_relevant = g_metas.iter().filter(|g| relevant(q, g)).count();
        if total_relevant == 0 {
            return None;
        }
        let denom = total_relevant.min(opts.top_k_map) as f64;
        let mut hits = 0usize;
        let mut ap = 0f64;
        let mut first_hit = None;
        for (pos, entry) in ranking.entries.iter().take(opts.top_k_map).enumerate() {
            if relevant(q, &g_metas[entry.gallery_index]) {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(pos);
                }
            }
        }
        Some((ap / denom, first_hit))
    });

    let mut report_queries = Vec::new();
    let mut cmc_counts = vec![0usize; opts.top_k_map];
    for (qi, result) in per_query.iter().enumerate() {
        let Some((ap, first_hit)) = result else {
            continue;
        };
        report_queries.push(QueryAp {
            query_index: rl.queries[qi].query_index,
            ap: *ap,
        });
        if let Some(pos) = first_hit {
            for slot in &mut cmc_counts[*pos..] {
                *slot += 1;
            }
        }
    }
    let evaluated = report_queries.len();
    if evaluated == 0 {
        return Err(Error::EmptyQuerySet);
    }
    let map = report_queries.iter().map(|q| q.ap).sum::<f64>() / evaluated as f64;
    let cmc = cmc_counts
        .into_iter()
        .map(|c| c as f64 / evaluated as f64)
        .collect();
    Ok(EvalReport {
        map,
        cmc,
        per_query: report_queries,
        queries_evaluated: evaluated,
    })
}

/// One line per query: `query_id: g1 g2 ... gK` (submission shape).
pub fn export_ranking(
    rl: &RankList,
    q_metas: &[ImageMeta],
    g_metas: &[ImageMeta],
    top_k: usize,
    path: &Path,
) -> Result<()> {
    let mut text = String::new();
    for ranking in &rl.queries {
        text.push_str(&q_metas[ranking.query_index].image_id);
        text.push(':');
        for entry in ranking.entries.iter().take(top_k) {
            text.push(' ');
            text.push_str(&g_metas[entry.gallery_index].image_id);
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Structured-text report: mAP plus CMC at ranks 1, 5 and 10.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = format!(
        "map = {:.6}\nrank1 = {:.6}\nrank5 = {:.6}\nrank10 = {:.6}\nqueries_evaluated = {}\n",
        report.map,
        report.cmc_at(1),
        report.cmc_at(5),
        report.cmc_at(10),
        report.queries_evaluated,
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
