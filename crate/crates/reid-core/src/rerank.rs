//! k-reciprocal re-ranking.
//!
//! Over the union of query and gallery points the algorithm
//!
//! 1. computes raw squared-Euclidean distances (blockwise, to bound the
//!    working set per task),
//! 2. builds k1-nearest-neighbor lists (a point's list includes itself;
//!    ties break by ascending index),
//! 3. forms k-reciprocal sets `R(p, k1) = { q in N(p, k1) : p in N(q, k1) }`,
//! 4. expands them with `R(q, floor(k1/2))` for each `q in R(p, k1)` when
//!    `|R(p, k1) ∩ R(q, floor(k1/2))| >= (2/3) |R(q, floor(k1/2))|`
//!    (exact rational comparison),
//! 5. encodes each point as a sparse L1-normalized vector with Gaussian
//!    weights `exp(-d)` over its expanded set,
//! 6. averages each encoding over the point's k2 nearest neighbors
//!    (local query expansion),
//! 7. takes the Jaccard distance
//!    `d_J = 1 - sum_j min(V_p, V_g) / sum_j max(V_p, V_g)` and blends
//!    `(1 - lambda) * d_J + lambda * d_original` on the query-gallery
//!    rectangle.
//!
//! When query and gallery are the same set (matching id sequences) the
//! union is the set itself rather than a duplicated concatenation; this
//! is the self-mode used for pseudo-label clustering.

use crate::distance::{DistanceKind, DistanceMatrix};
use crate::error::{Error, Result};
use crate::exec;
use crate::store::{FeatureSet, ImageMeta};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
    /// Rows per task in the union distance pass.
    pub block_rows: usize,
}

impl Default for RerankParams {
    fn default() -> Self {
        RerankParams {
            k1: 7,
            k2: 2,
            lambda: 0.6,
            block_rows: 512,
        }
    }
}

impl RerankParams {
    pub fn new(k1: usize, k2: usize, lambda: f64) -> Result<RerankParams> {
        let params = RerankParams {
            k1,
            k2,
            lambda,
            ..RerankParams::default()
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 {
            return Err(Error::InvalidParam {
                name: "k1",
                reason: "must be positive".into(),
            });
        }
        if self.k2 == 0 || self.k2 > self.k1 {
            return Err(Error::InvalidParam {
                name: "k2",
                reason: format!(
                    "must satisfy 1 <= k2 <= k1, got k2={} k1={}",
                    self.k2, self.k1
                ),
            });
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParam {
                name: "lambda",
                reason: format!("must lie in [0, 1], got {}", self.lambda),
            });
        }
        if self.block_rows == 0 {
            return Err(Error::InvalidParam {
                name: "block_rows",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Index layout of the union: queries first, gallery second, or a single
/// shared set in self mode.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    nq: usize,
    ng: usize,
    self_mode: bool,
}

impl Layout {
    fn q_pos(&self, a: usize) -> usize {
        a
    }

    fn g_pos(&self, b: usize) -> usize {
        if self.self_mode {
            b
        } else {
            self.nq + b
        }
    }
}

fn ids_match(q_metas: &[ImageMeta], g_metas: &[ImageMeta]) -> bool {
    q_metas.len() == g_metas.len()
        && q_metas
            .iter()
            .zip(g_metas)
            .all(|(a, b)| a.image_id == b.image_id)
}

/// Union raw-distance matrix plus layout. Same-id pairs get exact zeros.
fn build_union(
    q: &FeatureSet,
    q_metas: &[ImageMeta],
    g: &FeatureSet,
    g_metas: &[ImageMeta],
    params: &RerankParams,
) -> Result<(Vec<f64>, Layout, Vec<String>)> {
    for (fs, metas) in [(q, q_metas), (g, g_metas)] {
        if fs.count() != metas.len() {
            return Err(Error::LengthMismatch {
                features: fs.count(),
                metas: metas.len(),
            });
        }
        if !fs.is_normalized() {
            return Err(Error::NotNormalized);
        }
    }
    if q.dim() != g.dim() {
        return Err(Error::DimMismatch {
            left: q.dim(),
            right: g.dim(),
        });
    }
    let self_mode = ids_match(q_metas, g_metas);
    let layout = Layout {
        n: if self_mode {
            q.count()
        } else {
            q.count() + g.count()
        },
        nq: q.count(),
        ng: g.count(),
        self_mode,
    };
    if layout.ng < params.k1 + 1 {
        return Err(Error::GalleryTooSmall {
            gallery: layout.ng,
            needed: params.k1 + 1,
        });
    }

    let n = layout.n;
    let union_row = |u: usize| -> &[f32] {
        if u < layout.nq {
            q.row(u)
        } else {
            g.row(u - layout.nq)
        }
    };
    let mut ids: Vec<String> = q_metas.iter().map(|m| m.image_id.clone()).collect();
    if !self_mode {
        ids.extend(g_metas.iter().map(|m| m.image_id.clone()));
    }

    let mut dist = vec![0f64; n * n];
    exec::for_each_chunk_mut(&mut dist, params.block_rows * n, |block, chunk| {
        let base = block * params.block_rows;
        for (local, row) in chunk.chunks_mut(n).enumerate() {
            let u = base + local;
            let fu = union_row(u);
            for (v, slot) in row.iter_mut().enumerate() {
                *slot = crate::distance::squared_euclidean_unit(fu, union_row(v));
            }
        }
    });
    // Exact zeros on the diagonal and between copies of the same image.
    let mut by_id: std::collections::HashMap<&str, Vec<usize>> = std::collections::HashMap::new();
    for (u, id) in ids.iter().enumerate() {
        by_id.entry(id.as_str()).or_default().push(u);
    }
    for positions in by_id.values() {
        for &u in positions {
            for &v in positions {
                dist[u * n + v] = 0.0;
            }
        }
    }
    Ok((dist, layout, ids))
}

/// Per point: indices of the `t` nearest points (including the point
/// itself via its zero self-distance), sorted by (distance, index).
fn top_lists(dist: &[f64], n: usize, t: usize) -> Vec<Vec<u32>> {
    let t = t.min(n);
    exec::map_collect(n, |p| {
        let row = &dist[p * n..(p + 1) * n];
        let mut idx: Vec<u32> = (0..n as u32).collect();
        let by_dist =
            |&a: &u32, &b: &u32| row[a as usize].total_cmp(&row[b as usize]).then(a.cmp(&b));
        if t < n {
            idx.select_nth_unstable_by(t - 1, by_dist);
            idx.truncate(t);
        }
        idx.sort_unstable_by(by_dist);
        idx
    })
}

/// `R(p, k)` for every point, each sorted ascending by index.
fn reciprocal_sets(tops: &[Vec<u32>], k: usize) -> Vec<Vec<u32>> {
    let take = k + 1;
    exec::map_collect(tops.len(), |p| {
        let mut set: Vec<u32> = tops[p]
            .iter()
            .take(take)
            .copied()
            .filter(|&q| tops[q as usize].iter().take(take).any(|&x| x as usize == p))
            .collect();
        set.sort_unstable();
        set
    })
}

fn sorted_intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut count) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
        }
    }
    count
}

/// Expand each reciprocal set with the half-k sets of its members.
fn expand_sets(r_full: &[Vec<u32>], r_half: &[Vec<u32>]) -> Vec<Vec<u32>> {
    exec::map_collect(r_full.len(), |p| {
        let base = &r_full[p];
        let mut out = base.clone();
        for &q in base {
            let half = &r_half[q as usize];
            if half.is_empty() {
                continue;
            }
            if 3 * sorted_intersection_len(base, half) >= 2 * half.len() {
                out.extend_from_slice(half);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    })
}

/// Sparse Gaussian encodings, L1-normalized, after local query expansion.
fn encode(
    dist: &[f64],
    n: usize,
    expanded: &[Vec<u32>],
    tops: &[Vec<u32>],
    k2: usize,
) -> Vec<Vec<(u32, f64)>> {
    let v: Vec<Vec<(u32, f64)>> = exec::map_collect(n, |p| {
        let row = &dist[p * n..(p + 1) * n];
        let weights: Vec<f64> = expanded[p]
            .iter()
            .map(|&q| (-row[q as usize]).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        expanded[p]
            .iter()
            .zip(weights)
            .map(|(&q, w)| (q, w / total))
            .collect()
    });
    if k2 <= 1 {
        return v;
    }
    // Mean of the k2 nearest encodings, merged by index.
    exec::map_collect(n, |p| {
        let neighbors = &tops[p][..k2.min(tops[p].len())];
        let scale = 1.0 / neighbors.len() as f64;
        let mut cursors: Vec<std::iter::Peekable<std::slice::Iter<'_, (u32, f64)>>> = neighbors
            .iter()
            .map(|&q| v[q as usize].iter().peekable())
            .collect();
        let mut merged: Vec<(u32, f64)> = Vec::new();
        loop {
            let next = cursors
                .iter_mut()
                .filter_map(|c| c.peek().map(|&&(j, _)| j))
                .min();
            let Some(j) = next else { break };
            let mut acc = 0f64;
            for c in &mut cursors {
                // Sum in neighbor-list order for determinism.
                if let Some(&&(cj, w)) = c.peek() {
                    if cj == j {
                        acc += w;
                        c.next();
                    }
                }
            }
            merged.push((j, acc * scale));
        }
        merged
    })
}

/// Jaccard distances on the query-gallery rectangle.
fn jaccard(v: &[Vec<(u32, f64)>], layout: &Layout) -> Vec<f64> {
    let row_sums: Vec<f64> = v
        .iter()
        .map(|row| row.iter().map(|&(_, w)| w).sum())
        .collect();
    let mut inverted: Vec<Vec<(u32, f64)>> = vec![Vec::new(); layout.n];
    for b in 0..layout.ng {
        for &(j, w) in &v[layout.g_pos(b)] {
            inverted[j as usize].push((b as u32, w));
        }
    }
    let ng = layout.ng;
    exec::map_collect(layout.nq, |a| {
        let mut min_sum = vec![0f64; ng];
        for &(j, wa) in &v[layout.q_pos(a)] {
            for &(b, wb) in &inverted[j as usize] {
                min_sum[b as usize] += wa.min(wb);
            }
        }
        let ra = row_sums[layout.q_pos(a)];
        (0..ng)
            .map(|b| {
                let s = min_sum[b];
                // sum(max) = ra + rb - sum(min), exact per element.
                let denom = ra + row_sums[layout.g_pos(b)] - s;
                (1.0 - s / denom).clamp(0.0, 1.0)
            })
            .collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

fn kreciprocal_jaccard(dist: &[f64], layout: &Layout, params: &RerankParams) -> Vec<f64> {
    let tops = top_lists(dist, layout.n, params.k1 + 1);
    let r_full = reciprocal_sets(&tops, params.k1);
    let r_half = reciprocal_sets(&tops, params.k1 / 2);
    let expanded = expand_sets(&r_full, &r_half);
    let v = encode(dist, layout.n, &expanded, &tops, params.k2);
    jaccard(&v, layout)
}

fn blend(jac: &[f64], dist: &[f64], layout: &Layout, lambda: f64) -> Vec<f64> {
    let n = layout.n;
    let mut out = vec![0f64; layout.nq * layout.ng];
    for a in 0..layout.nq {
        let qp = layout.q_pos(a);
        for b in 0..layout.ng {
            out[a * layout.ng + b] =
                (1.0 - lambda) * jac[a * layout.ng + b] + lambda * dist[qp * n + layout.g_pos(b)];
        }
    }
    out
}

/// Re-rank query-gallery distances; `kind = reranked`.
pub fn rerank(
    q: &FeatureSet,
    q_metas: &[ImageMeta],
    g: &FeatureSet,
    g_metas: &[ImageMeta],
    params: &RerankParams,
) -> Result<DistanceMatrix> {
    params.validate()?;
    let (dist, layout, ids) = build_union(q, q_metas, g, g_metas, params)?;
    let jac = kreciprocal_jaccard(&dist, &layout, params);
    let data = blend(&jac, &dist, &layout, params.lambda);
    let (row_ids, col_ids) = split_ids(&ids, &layout);
    Ok(DistanceMatrix::from_parts_unchecked(
        DistanceKind::Reranked,
        row_ids,
        col_ids,
        data,
    ))
}

/// The Jaccard component alone (`lambda` ignored); `kind = jaccard`.
/// Called with query == gallery this is the clustering distance.
pub fn jaccard_only(
    q: &FeatureSet,
    q_metas: &[ImageMeta],
    g: &FeatureSet,
    g_metas: &[ImageMeta],
    params: &RerankParams,
) -> Result<DistanceMatrix> {
    params.validate()?;
    let (dist, layout, ids) = build_union(q, q_metas, g, g_metas, params)?;
    let jac = kreciprocal_jaccard(&dist, &layout, params);
    let (row_ids, col_ids) = split_ids(&ids, &layout);
    Ok(DistanceMatrix::from_parts_unchecked(
        DistanceKind::Jaccard,
        row_ids,
        col_ids,
        jac,
    ))
}

fn split_ids(ids: &[String], layout: &Layout) -> (Vec<String>, Vec<String>) {
    if layout.self_mode {
        (ids.to_vec(), ids.to_vec())
    } else {
        (ids[..layout.nq].to_vec(), ids[layout.nq..].to_vec())
    }
}

/// Re-rank a precomputed union distance matrix.
///
/// The matrix must be square with matching row/column ids, laid out as
/// `[queries..., gallery...]`; `num_queries == n` means query and gallery
/// are the same set (self mode). This is the entry point for applying
/// camera/orientation fusion to the union distances before re-ranking.
pub fn rerank_distance(
    union: &DistanceMatrix,
    num_queries: usize,
    params: &RerankParams,
) -> Result<DistanceMatrix> {
    params.validate()?;
    let n = union.rows();
    if union.cols() != n {
        return Err(Error::ShapeMismatch {
            left_rows: n,
            left_cols: union.cols(),
            right_rows: n,
            right_cols: n,
        });
    }
    for (index, (a, b)) in union.row_ids().iter().zip(union.col_ids()).enumerate() {
        if a != b {
            return Err(Error::MatrixIdMismatch {
                axis: "column",
                index,
            });
        }
    }
    if num_queries > n {
        return Err(Error::InvalidParam {
            name: "num_queries",
            reason: format!("{num_queries} exceeds matrix size {n}"),
        });
    }
    if union.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam {
            name: "union",
            reason: "union distances must be finite (no masked entries)".into(),
        });
    }
    let self_mode = num_queries == n;
    let layout = Layout {
        n,
        nq: num_queries,
        ng: if self_mode { n } else { n - num_queries },
        self_mode,
    };
    if layout.ng < params.k1 + 1 {
        return Err(Error::GalleryTooSmall {
            gallery: layout.ng,
            needed: params.k1 + 1,
        });
    }
    let jac = kreciprocal_jaccard(union.data(), &layout, params);
    let data = blend(&jac, union.data(), &layout, params.lambda);
    let (row_ids, col_ids) = split_ids(union.row_ids(), &layout);
    Ok(DistanceMatrix::from_parts_unchecked(
        DistanceKind::Reranked,
        row_ids,
        col_ids,
        data,
    ))
}
