//! Pipeline executor: stage loop, checkpointing, stage-by-stage metrics.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::cluster::{dbscan, pseudo_label_distance, write_labels};
use crate::distance::{fuse_distances, pairwise, write_matrix, DistanceMatrix};
use crate::error::{Error, Result};
use crate::eval::{
    camera_verify_mask, evaluate, export_ranking, rank, write_report, EvalOptions, EvalReport,
    RankList, SameCameraRule,
};
use crate::features::{
    average_views, camera_means, ensemble_features, fuse_tracklet, l2_normalize,
    subtract_camera_mean, tracklet_aggregate,
};
use crate::rerank::{rerank, rerank_distance};
use crate::store::{export, ingest, FeatureSet, ImageMeta};

use super::config::{EnsembleMode, Plan, SameCameraChoice, Stage};

/// One row of the stage-by-stage quality table.
#[derive(Debug, Clone, PartialEq)]
pub struct StageMetric {
    pub stage: String,
    pub map: f64,
    pub rank1: f64,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    /// mAP/rank-1 after every feature- or distance-changing stage, when
    /// ground truth and a query split are available.
    pub stage_table: Vec<StageMetric>,
    pub report: Option<EvalReport>,
    pub ranking_file: Option<PathBuf>,
    pub report_file: Option<PathBuf>,
    pub label_files: Vec<PathBuf>,
}

struct Split {
    q_idx: Vec<usize>,
    g_idx: Vec<usize>,
    q_metas: Vec<ImageMeta>,
    g_metas: Vec<ImageMeta>,
}

struct State {
    features: FeatureSet,
    metas: Vec<ImageMeta>,
    query_ids: Option<HashSet<String>>,
    /// Current query-gallery distance, if any stage produced one.
    qg: Option<DistanceMatrix>,
    /// Fused union distance awaiting a rerank stage.
    union: Option<DistanceMatrix>,
    camera_verified: bool,
    ranklist: Option<RankList>,
}

impl State {
    fn split(&self) -> Result<Split> {
        let ids = self.query_ids.as_ref().ok_or_else(|| Error::Config {
            field: "input.queries".into(),
            reason: "query split required".into(),
        })?;
        let present: HashSet<&str> = self.metas.iter().map(|m| m.image_id.as_str()).collect();
        if let Some(missing) = ids.iter().find(|id| !present.contains(id.as_str())) {
            return Err(Error::MissingImage {
                image_id: missing.clone(),
                set: 0,
            });
        }
        let mut q_idx = Vec::new();
        let mut g_idx = Vec::new();
        for (i, meta) in self.metas.iter().enumerate() {
            if ids.contains(&meta.image_id) {
                q_idx.push(i);
            } else {
                g_idx.push(i);
            }
        }
        if q_idx.is_empty() {
            return Err(Error::EmptyQuerySet);
        }
        if g_idx.is_empty() {
            return Err(Error::Config {
                field: "input.queries".into(),
                reason: "every image is a query; the gallery is empty".into(),
            });
        }
        Ok(Split {
            q_metas: q_idx.iter().map(|&i| self.metas[i].clone()).collect(),
            g_metas: g_idx.iter().map(|&i| self.metas[i].clone()).collect(),
            q_idx,
            g_idx,
        })
    }

    fn invalidate_distances(&mut self) {
        self.qg = None;
        self.union = None;
        self.camera_verified = false;
        self.ranklist = None;
    }
}

fn read_query_ids(path: &Path) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Load a manifest and reorder its rows to `metas` order by image id.
fn load_aligned(path: &Path, metas: &[ImageMeta]) -> Result<(FeatureSet, Vec<ImageMeta>)> {
    let (fs, own_metas) = ingest(path)?;
    let index: HashMap<&str, usize> = own_metas
        .iter()
        .enumerate()
        .map(|(i, m)| (m.image_id.as_str(), i))
        .collect();
    let mut order = Vec::with_capacity(metas.len());
    for meta in metas {
        let &i = index
            .get(meta.image_id.as_str())
            .ok_or_else(|| Error::MissingImage {
                image_id: meta.image_id.clone(),
                set: 1,
            })?;
        order.push(i);
    }
    let aligned_metas: Vec<ImageMeta> = order.iter().map(|&i| own_metas[i].clone()).collect();
    Ok((fs.subset(&order), aligned_metas))
}

/// Self-distance of the given rows in `[queries..., gallery...]` order.
fn union_raw(fs: &FeatureSet, metas: &[ImageMeta], split: &Split) -> Result<DistanceMatrix> {
    let mut order = split.q_idx.clone();
    order.extend_from_slice(&split.g_idx);
    let sub = fs.subset(&order);
    let sub_metas: Vec<ImageMeta> = order.iter().map(|&i| metas[i].clone()).collect();
    pairwise(&sub, &sub_metas, &sub, &sub_metas)
}

/// Restrict a `[q, g]`-ordered union matrix to the query-gallery block.
fn restrict_union(union: &DistanceMatrix, nq: usize) -> DistanceMatrix {
    let n = union.rows();
    let ng = n - nq;
    let mut data = Vec::with_capacity(nq * ng);
    for a in 0..nq {
        let row = union.row(a);
        data.extend_from_slice(&row[nq..]);
    }
    DistanceMatrix::from_parts_unchecked(
        union.kind(),
        union.row_ids()[..nq].to_vec(),
        union.row_ids()[nq..].to_vec(),
        data,
    )
}

fn resolve_rule(choice: SameCameraChoice, camera_verified: bool) -> SameCameraRule {
    match choice {
        SameCameraChoice::Auto => {
            if camera_verified {
                SameCameraRule::Exclude
            } else {
                SameCameraRule::Keep
            }
        }
        SameCameraChoice::Fixed(rule) => rule,
    }
}

fn current_distance(state: &State) -> Result<DistanceMatrix> {
    if let Some(d) = &state.qg {
        return Ok(d.clone());
    }
    let split = state.split()?;
    let q = state.features.subset(&split.q_idx);
    let g = state.features.subset(&split.g_idx);
    pairwise(&q, &split.q_metas, &g, &split.g_metas)
}

fn snapshot(state: &State, plan: &Plan) -> Result<Option<StageMetric>> {
    if state.query_ids.is_none() {
        return Ok(None);
    }
    if state.metas.iter().any(|m| m.identity.is_none()) {
        return Ok(None);
    }
    let split = state.split()?;
    let d = current_distance(state)?;
    let rl = rank(&d, &split.g_metas, plan.top_k, plan.i2t)?;
    let opts = EvalOptions {
        top_k_map: plan.top_k_map,
        same_camera: resolve_rule(plan.same_camera, state.camera_verified),
    };
    let report = evaluate(&rl, &split.q_metas, &split.g_metas, &opts)?;
    Ok(Some(StageMetric {
        stage: String::new(),
        map: report.map,
        rank1: report.cmc_at(1),
    }))
}

/// Execute a validated plan, checkpointing each stage under `workdir`.
pub fn run_plan(plan: &Plan, workdir: &Path) -> Result<PipelineOutcome> {
    fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let (features, metas) = ingest(&plan.input.features)?;
    let query_ids = plan
        .input
        .queries
        .as_deref()
        .map(read_query_ids)
        .transpose()?;
    let mut state = State {
        features,
        metas,
        query_ids,
        qg: None,
        union: None,
        camera_verified: false,
        ranklist: None,
    };
    let mut outcome = PipelineOutcome {
        stage_table: Vec::new(),
        report: None,
        ranking_file: None,
        report_file: None,
        label_files: Vec::new(),
    };

    for (index, &stage) in plan.stages.iter().enumerate() {
        let stage_dir = workdir.join(format!("{index:02}-{stage}"));
        fs::create_dir_all(&stage_dir).map_err(|e| Error::io(&stage_dir, e))?;
        run_stage(stage, plan, &mut state, &stage_dir, workdir, &mut outcome)?;

        if stage.changes_features() || stage.changes_distance() {
            if let Some(mut metric) = snapshot(&state, plan)? {
                metric.stage = stage.as_str().to_string();
                outcome.stage_table.push(metric);
            }
        }
    }

    if !outcome.stage_table.is_empty() {
        let mut table = String::from("stage\tmap\trank1\n");
        for row in &outcome.stage_table {
            table.push_str(&format!(
                "{}\t{:.6}\t{:.6}\n",
                row.stage, row.map, row.rank1
            ));
        }
        let path = workdir.join("stage_map.txt");
        fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    }
    Ok(outcome)
}

fn run_stage(
    stage: Stage,
    plan: &Plan,
    state: &mut State,
    stage_dir: &Path,
    workdir: &Path,
    outcome: &mut PipelineOutcome,
) -> Result<()> {
    match stage {
        Stage::Normalize => {
            state.features = l2_normalize(&state.features)?;
            state.invalidate_distances();
            export(
                &state.features,
                &state.metas,
                &stage_dir.join("features.toml"),
            )?;
        }
        Stage::AverageViews => {
            let mut loaded = Vec::new();
            for path in &plan.input.views {
                loaded.push(ingest(path)?);
            }
            let mut sets: Vec<(&FeatureSet, &[ImageMeta])> =
                vec![(&state.features, state.metas.as_slice())];
            for (fs, metas) in &loaded {
                sets.push((fs, metas.as_slice()));
            }
            let (merged, merged_metas) = average_views(&sets)?;
            state.features = merged;
            state.metas = merged_metas;
            state.invalidate_distances();
            export(
                &state.features,
                &state.metas,
                &stage_dir.join("features.toml"),
            )?;
        }
        Stage::Ensemble => {
            let mut loaded = Vec::new();
            for path in &plan.input.models {
                let (fs, aligned_metas) = load_aligned(path, &state.metas)?;
                loaded.push((l2_normalize(&fs)?, aligned_metas));
            }
            match plan.ensemble_mode {
                EnsembleMode::Features => {
                    let current = l2_normalize(&state.features)?;
                    let mut sets: Vec<(&FeatureSet, &[ImageMeta])> =
                        vec![(&current, state.metas.as_slice())];
                    for (fs, metas) in &loaded {
                        sets.push((fs, metas.as_slice()));
                    }
                    state.features = ensemble_features(&sets)?;
                    state.invalidate_distances();
                    export(
                        &state.features,
                        &state.metas,
                        &stage_dir.join("features.toml"),
                    )?;
                }
                EnsembleMode::Distances => {
                    let split = state.split()?;
                    let current = l2_normalize(&state.features)?;
                    let mut unions = vec![union_raw(&current, &state.metas, &split)?];
                    for (fs, metas) in &loaded {
                        unions.push(union_raw(fs, metas, &split)?);
                    }
                    let refs: Vec<&DistanceMatrix> = unions.iter().collect();
                    let avg = crate::distance::average_distances(&refs)?;
                    state.qg = Some(restrict_union(&avg, split.q_idx.len()));
                    state.union = Some(avg);
                    state.camera_verified = false;
                    state.ranklist = None;
                    write_matrix(
                        state.qg.as_ref().expect("just set"),
                        &stage_dir.join("distance.toml"),
                    )?;
                }
            }
        }
        Stage::CameraSubtract => {
            let means = camera_means(&state.features, &state.metas)?;
            state.features =
                subtract_camera_mean(&state.features, &state.metas, &means, plan.alpha)?;
            state.invalidate_distances();
            export(
                &state.features,
                &state.metas,
                &stage_dir.join("features.toml"),
            )?;
        }
        Stage::Tracklet => {
            let normalized = l2_normalize(&state.features)?;
            let tracklets = tracklet_aggregate(&normalized, &state.metas, plan.tracklet_mode)?;
            state.features =
                fuse_tracklet(&normalized, &state.metas, &tracklets, plan.tracklet_beta)?;
            state.invalidate_distances();
            export(
                &state.features,
                &state.metas,
                &stage_dir.join("features.toml"),
            )?;
        }
        Stage::FuseEq4 => {
            let split = state.split()?;
            let cam_path = plan.input.camera.as_ref().expect("validated");
            let ori_path = plan.input.orientation.as_ref().expect("validated");
            let (cam_fs, cam_metas) = load_aligned(cam_path, &state.metas)?;
            let (ori_fs, ori_metas) = load_aligned(ori_path, &state.metas)?;
            let cam_fs = l2_normalize(&cam_fs)?;
            let ori_fs = l2_normalize(&ori_fs)?;
            if let Some(qg) = &state.qg {
                // A distance already exists: fuse on the query-gallery block.
                let d_c = pairwise(
                    &cam_fs.subset(&split.q_idx),
                    &split.q_metas,
                    &cam_fs.subset(&split.g_idx),
                    &split.g_metas,
                )?;
                let d_o = pairwise(
                    &ori_fs.subset(&split.q_idx),
                    &split.q_metas,
                    &ori_fs.subset(&split.g_idx),
                    &split.g_metas,
                )?;
                state.qg = Some(fuse_distances(qg, &d_c, &d_o, plan.lambda1, plan.lambda2)?);
                state.union = None;
            } else {
                // Fuse union distances so a following rerank sees them.
                let u_r = union_raw(&state.features, &state.metas, &split)?;
                let u_c = union_raw(&cam_fs, &cam_metas, &split)?;
                let u_o = union_raw(&ori_fs, &ori_metas, &split)?;
                let fused = fuse_distances(&u_r, &u_c, &u_o, plan.lambda1, plan.lambda2)?;
                state.qg = Some(restrict_union(&fused, split.q_idx.len()));
                state.union = Some(fused);
            }
            state.ranklist = None;
            write_matrix(
                state.qg.as_ref().expect("just set"),
                &stage_dir.join("distance.toml"),
            )?;
        }
        Stage::Rerank => {
            let split = state.split()?;
            let reranked = if let Some(union) = state.union.take() {
                rerank_distance(&union, split.q_idx.len(), &plan.rerank)?
            } else {
                let q = state.features.subset(&split.q_idx);
                let g = state.features.subset(&split.g_idx);
                rerank(&q, &split.q_metas, &g, &split.g_metas, &plan.rerank)?
            };
            state.qg = Some(reranked);
            state.ranklist = None;
            write_matrix(
                state.qg.as_ref().expect("just set"),
                &stage_dir.join("distance.toml"),
            )?;
        }
        Stage::CameraVerify => {
            let split = state.split()?;
            let d = current_distance(state)?;
            let masked = camera_verify_mask(&d, &split.q_metas, &split.g_metas)?;
            state.qg = Some(masked);
            state.camera_verified = true;
            state.ranklist = None;
            write_matrix(
                state.qg.as_ref().expect("just set"),
                &stage_dir.join("distance.toml"),
            )?;
        }
        Stage::Rank => {
            let split = state.split()?;
            let d = current_distance(state)?;
            let rl = rank(&d, &split.g_metas, plan.top_k, plan.i2t)?;
            let path = workdir.join("ranking.txt");
            export_ranking(&rl, &split.q_metas, &split.g_metas, plan.top_k, &path)?;
            state.qg = Some(d);
            state.ranklist = Some(rl);
            outcome.ranking_file = Some(path);
        }
        Stage::Evaluate => {
            let split = state.split()?;
            let rl = state.ranklist.as_ref().ok_or_else(|| Error::StageOrder {
                stage: "evaluate".into(),
                reason: "no ranking available".into(),
            })?;
            let opts = EvalOptions {
                top_k_map: plan.top_k_map,
                same_camera: resolve_rule(plan.same_camera, state.camera_verified),
            };
            let report = evaluate(rl, &split.q_metas, &split.g_metas, &opts)?;
            let path = workdir.join("report.toml");
            write_report(&report, &path)?;
            outcome.stage_table.push(StageMetric {
                stage: "evaluate".into(),
                map: report.map,
                rank1: report.cmc_at(1),
            });
            outcome.report = Some(report);
            outcome.report_file = Some(path);
        }
        Stage::Cluster => {
            let cluster = plan.cluster.as_ref().expect("validated");
            let d = pseudo_label_distance(&state.features, &state.metas, &cluster.params)?;
            let labels = dbscan(&d, &cluster.params.dbscan)?;
            let path = workdir.join("labels.csv");
            write_labels(&labels, &state.metas, &path)?;
            outcome.label_files.push(path);
            for (i, variant) in cluster.variants.iter().enumerate() {
                let labels = dbscan(&d, variant)?;
                let path = workdir.join(format!("labels_{}.csv", i + 1));
                write_labels(&labels, &state.metas, &path)?;
                outcome.label_files.push(path);
            }
        }
    }
    Ok(())
}
