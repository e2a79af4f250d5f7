//! Independent oracles and fixtures for the acceptance suite.
//!
//! Everything here is deliberately naive and shares no code with the
//! library: dense matrices, quadratic or cubic loops, literal formulas.
#![allow(clippy::needless_range_loop)]

use rand::rngs::StdRng;
use rand::Rng;

use reid_core::distance::DistanceMatrix;
use reid_core::features::l2_normalize;
use reid_core::store::{synth_generate, FeatureSet, ImageMeta, SynthParams, View};

/// Straightforward k-reciprocal re-ranking reference, written directly
/// from the algorithm's steps over dense vectors.
pub fn reference_rerank(
    q: &[Vec<f64>],
    g: &[Vec<f64>],
    k1: usize,
    k2: usize,
    lambda: f64,
) -> Vec<Vec<f64>> {
    let pts: Vec<&Vec<f64>> = q.iter().chain(g.iter()).collect();
    let n = pts.len();
    let nq = q.len();

    // Raw squared Euclidean distances of unit vectors, clamped to [0, 4];
    // a point's distance to itself is zero.
    let mut dist = vec![vec![0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dot: f64 = pts[i].iter().zip(pts[j].iter()).map(|(a, b)| a * b).sum();
            dist[i][j] = (2.0 - 2.0 * dot).clamp(0.0, 4.0);
        }
    }

    // k-nearest lists: the k+1 closest points (self included), ties by
    // ascending index.
    let neighbors = |p: usize, k: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| dist[p][a].total_cmp(&dist[p][b]).then(a.cmp(&b)));
        idx.truncate((k + 1).min(n));
        idx
    };

    // k-reciprocal sets R(p, k).
    let reciprocal = |k: usize| -> Vec<Vec<usize>> {
        (0..n)
            .map(|p| {
                neighbors(p, k)
                    .into_iter()
                    .filter(|&x| neighbors(x, k).contains(&p))
                    .collect()
            })
            .collect()
    };
    let r_full = reciprocal(k1);
    let r_half = reciprocal(k1 / 2);

    // Expansion: add R(x, k1/2) when it overlaps R(p, k1) by at least 2/3.
    let mut r_star: Vec<Vec<usize>> = Vec::with_capacity(n);
    for p in 0..n {
        let mut set = r_full[p].clone();
        for &x in &r_full[p] {
            let half = &r_half[x];
            let inter = half.iter().filter(|c| r_full[p].contains(c)).count();
            if 3 * inter >= 2 * half.len() {
                for &c in half {
                    if !set.contains(&c) {
                        set.push(c);
                    }
                }
            }
        }
        r_star.push(set);
    }

    // Gaussian encodings over the expanded sets, L1-normalized.
    let mut v = vec![vec![0f64; n]; n];
    for p in 0..n {
        for &x in &r_star[p] {
            v[p][x] = (-dist[p][x]).exp();
        }
        let total: f64 = v[p].iter().sum();
        for val in &mut v[p] {
            *val /= total;
        }
    }

    // Local query expansion: mean encoding over the k2 nearest points.
    let v = if k2 > 1 {
        let mut out = vec![vec![0f64; n]; n];
        for p in 0..n {
            let nb = neighbors(p, k2 - 1);
            for j in 0..n {
                out[p][j] = nb.iter().map(|&x| v[x][j]).sum::<f64>() / nb.len() as f64;
            }
        }
        out
    } else {
        v
    };

    // Literal Jaccard distance and the final blend.
    let ng = n - nq;
    let mut out = vec![vec![0f64; ng]; nq];
    for a in 0..nq {
        for b in 0..ng {
            let gp = nq + b;
            let mut min_sum = 0f64;
            let mut max_sum = 0f64;
            for j in 0..n {
                min_sum += v[a][j].min(v[gp][j]);
                max_sum += v[a][j].max(v[gp][j]);
            }
            let dj = 1.0 - min_sum / max_sum;
            out[a][b] = (1.0 - lambda) * dj + lambda * dist[a][gp];
        }
    }
    out
}

/// Naive O(N^3) DBSCAN oracle: cores by counting, core clusters by a
/// reachability closure, borders to the lowest-labeled core in range.
pub fn dbscan_oracle(d: &DistanceMatrix, eps: f64, min_samples: usize) -> Vec<i32> {
    let n = d.rows();
    let within = |i: usize, j: usize| d.get(i, j) <= eps;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| within(i, j)).count() >= min_samples)
        .collect();
    let mut reach = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            reach[i * n + j] = core[i] && core[j] && within(i, j);
        }
    }
    for k in 0..n {
        for i in 0..n {
            if !reach[i * n + k] {
                continue;
            }
            for j in 0..n {
                if reach[k * n + j] {
                    reach[i * n + j] = true;
                }
            }
        }
    }
    let mut labels = vec![-1i32; n];
    let mut next = 0i32;
    for i in 0..n {
        if core[i] && labels[i] < 0 {
            labels[i] = next;
            for j in (i + 1)..n {
                if reach[i * n + j] {
                    labels[j] = next;
                }
            }
            next += 1;
        }
    }
    for i in 0..n {
        if core[i] || labels[i] >= 0 {
            continue;
        }
        if let Some(owner) = (0..n)
            .filter(|&j| core[j] && within(i, j))
            .map(|j| labels[j])
            .min()
        {
            labels[i] = owner;
        }
    }
    labels
}

/// Relabel clusters by first appearance so partitions compare directly.
pub fn normalize_partition(labels: &[i32]) -> Vec<i32> {
    let mut map = std::collections::HashMap::new();
    let mut next = 0i32;
    labels
        .iter()
        .map(|&l| {
            if l < 0 {
                -1
            } else {
                *map.entry(l).or_insert_with(|| {
                    let v = next;
                    next += 1;
                    v
                })
            }
        })
        .collect()
}

/// First-principles average precision: precision@k recomputed with a
/// fresh counting pass at every relevant position.
pub fn ap_oracle(
    ranked: &[usize],
    query: &ImageMeta,
    gallery: &[ImageMeta],
    top_k_map: usize,
    exclude_same_camera: bool,
) -> Option<f64> {
    let is_rel = |j: usize| {
        gallery[j].identity == query.identity
            && (!exclude_same_camera || gallery[j].camera_id != query.camera_id)
    };
    let total = (0..gallery.len()).filter(|&j| is_rel(j)).count();
    if total == 0 {
        return None;
    }
    let truncated: Vec<usize> = ranked.iter().copied().take(top_k_map).collect();
    let mut sum = 0f64;
    for (pos, &j) in truncated.iter().enumerate() {
        if is_rel(j) {
            let hits = truncated[..=pos].iter().filter(|&&x| is_rel(x)).count();
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Some(sum / total.min(top_k_map) as f64)
}

/// Brute-force pairwise F1 of a predicted partition against planted
/// identities; noise points pair with nothing.
pub fn pairwise_f1(labels: &[i32], identities: &[u32]) -> f64 {
    assert_eq!(labels.len(), identities.len());
    let n = labels.len();
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for i in 0..n {
        for j in (i + 1)..n {
            let same_pred = labels[i] >= 0 && labels[i] == labels[j];
            let same_true = identities[i] == identities[j];
            match (same_pred, same_true) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// The standard synthetic fixture: 40 identities, 4 cameras, 2 tracklets
/// per identity, 5 frames per tracklet, camera offset 0.5, noise 0.15.
pub fn standard_fixture() -> (FeatureSet, Vec<ImageMeta>) {
    synth_generate(&SynthParams {
        num_ids: 40,
        cams: 4,
        tracklets_per_id: 2,
        frames_per_tracklet: 5,
        dim: 64,
        camera_offset_scale: 0.5,
        noise_scale: 0.15,
        seed: 1,
    })
    .expect("fixture parameters are valid")
}

/// Queries = every identity's first tracklet; gallery = the rest.
pub fn first_tracklet_split(metas: &[ImageMeta]) -> (Vec<usize>, Vec<usize>) {
    let queries: std::collections::HashSet<String> = reid_core::store::default_query_split(metas)
        .into_iter()
        .collect();
    let mut q_idx = Vec::new();
    let mut g_idx = Vec::new();
    for (i, meta) in metas.iter().enumerate() {
        if queries.contains(&meta.image_id) {
            q_idx.push(i);
        } else {
            g_idx.push(i);
        }
    }
    (q_idx, g_idx)
}

pub fn subset_pair(
    fs: &FeatureSet,
    metas: &[ImageMeta],
    idx: &[usize],
) -> (FeatureSet, Vec<ImageMeta>) {
    (
        fs.subset(idx),
        idx.iter().map(|&i| metas[i].clone()).collect(),
    )
}

pub fn random_unit_set(rng: &mut StdRng, count: usize, dim: usize) -> FeatureSet {
    let data: Vec<f32> = (0..count * dim)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    l2_normalize(&FeatureSet::from_vec(data, dim).expect("finite data")).expect("no zero rows")
}

pub fn plain_metas(prefix: &str, n: usize) -> Vec<ImageMeta> {
    (0..n)
        .map(|i| ImageMeta {
            image_id: format!("{prefix}{i}"),
            camera_id: 0,
            tracklet_id: None,
            identity: None,
            view: View::Original,
        })
        .collect()
}

pub fn rows_f64(fs: &FeatureSet) -> Vec<Vec<f64>> {
    fs.rows()
        .map(|row| row.iter().map(|&v| f64::from(v)).collect())
        .collect()
}
