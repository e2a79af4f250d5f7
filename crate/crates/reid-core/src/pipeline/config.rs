//! Pipeline configuration: TOML schema, parsing and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::cluster::{ClusterMetric, DbscanParams, PseudoLabelParams};
use crate::error::{Error, Result};
use crate::eval::SameCameraRule;
use crate::features::TrackletAggregation;
use crate::rerank::RerankParams;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineConfig {
    input: InputConfig,
    stages: Vec<String>,
    #[serde(default)]
    params: StageParams,
    #[serde(default)]
    cluster: Option<ClusterConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputConfig {
    /// Main feature manifest.
    features: String,
    /// Text file with one query image id per line; remaining images form
    /// the gallery. Required by the ranking stages.
    #[serde(default)]
    queries: Option<String>,
    /// Extra per-view manifests for `average_views`.
    #[serde(default)]
    views: Vec<String>,
    /// Extra per-model manifests for `ensemble`.
    #[serde(default)]
    models: Vec<String>,
    /// Auxiliary camera-embedding manifest for `fuse_eq4`.
    #[serde(default)]
    camera: Option<String>,
    /// Auxiliary orientation-embedding manifest for `fuse_eq4`.
    #[serde(default)]
    orientation: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StageParams {
    alpha: f32,
    tracklet_mode: String,
    tracklet_beta: f32,
    tracklet_tau: f32,
    k1: usize,
    k2: usize,
    lambda: f64,
    block_rows: usize,
    lambda1: f64,
    lambda2: f64,
    top_k: usize,
    top_k_map: usize,
    i2t: bool,
    ensemble_mode: String,
    same_camera: String,
}

impl Default for StageParams {
    fn default() -> Self {
        StageParams {
            alpha: 0.18,
            tracklet_mode: "weighted".into(),
            tracklet_beta: 0.0,
            tracklet_tau: 1.0,
            k1: 7,
            k2: 2,
            lambda: 0.6,
            block_rows: 512,
            lambda1: 0.1,
            lambda2: 0.05,
            top_k: 100,
            top_k_map: 100,
            i2t: false,
            ensemble_mode: "features".into(),
            same_camera: "auto".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterConfig {
    #[serde(default = "default_cluster_alpha")]
    alpha: f32,
    #[serde(default = "default_cluster_beta")]
    beta: f32,
    // eps and min_samples are deliberately mandatory: runs must pin them.
    eps: f64,
    min_samples: usize,
    #[serde(default = "default_cluster_metric")]
    metric: String,
    #[serde(default)]
    variants: Vec<ClusterVariant>,
}

fn default_cluster_alpha() -> f32 {
    0.18
}

fn default_cluster_beta() -> f32 {
    0.0005
}

fn default_cluster_metric() -> String {
    "jaccard".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterVariant {
    eps: f64,
    min_samples: usize,
}

/// Pipeline stage. The list order is the execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Normalize,
    AverageViews,
    Ensemble,
    CameraSubtract,
    Tracklet,
    FuseEq4,
    Rerank,
    CameraVerify,
    Rank,
    Evaluate,
    Cluster,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Normalize => "normalize",
            Stage::AverageViews => "average_views",
            Stage::Ensemble => "ensemble",
            Stage::CameraSubtract => "camera_subtract",
            Stage::Tracklet => "tracklet",
            Stage::FuseEq4 => "fuse_eq4",
            Stage::Rerank => "rerank",
            Stage::CameraVerify => "camera_verify",
            Stage::Rank => "rank",
            Stage::Evaluate => "evaluate",
            Stage::Cluster => "cluster",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "normalize" => Some(Stage::Normalize),
            "average_views" => Some(Stage::AverageViews),
            "ensemble" => Some(Stage::Ensemble),
            "camera_subtract" => Some(Stage::CameraSubtract),
            "tracklet" => Some(Stage::Tracklet),
            "fuse_eq4" => Some(Stage::FuseEq4),
            "rerank" => Some(Stage::Rerank),
            "camera_verify" => Some(Stage::CameraVerify),
            "rank" => Some(Stage::Rank),
            "evaluate" => Some(Stage::Evaluate),
            "cluster" => Some(Stage::Cluster),
            _ => None,
        }
    }

    /// Stages that replace the feature matrix.
    pub fn changes_features(self) -> bool {
        matches!(
            self,
            Stage::Normalize
                | Stage::AverageViews
                | Stage::Ensemble
                | Stage::CameraSubtract
                | Stage::Tracklet
        )
    }

    /// Stages that produce or modify the query-gallery distance.
    pub fn changes_distance(self) -> bool {
        matches!(
            self,
            Stage::FuseEq4 | Stage::Rerank | Stage::CameraVerify | Stage::Ensemble
        )
    }

    fn needs_split(self) -> bool {
        matches!(
            self,
            Stage::FuseEq4 | Stage::Rerank | Stage::CameraVerify | Stage::Rank | Stage::Evaluate
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    /// Concatenate per-model unit vectors (default).
    Features,
    /// Average per-model raw distance matrices.
    Distances,
}

/// Evaluation convention for same-camera matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SameCameraChoice {
    /// Exclude if and only if `camera_verify` ran.
    Auto,
    Fixed(SameCameraRule),
}

#[derive(Debug, Clone)]
pub struct ClusterPlan {
    pub params: PseudoLabelParams,
    pub variants: Vec<DbscanParams>,
}

/// Resolved input paths, all absolute or relative to the process cwd.
#[derive(Debug, Clone)]
pub struct PlanInput {
    pub features: PathBuf,
    pub queries: Option<PathBuf>,
    pub views: Vec<PathBuf>,
    pub models: Vec<PathBuf>,
    pub camera: Option<PathBuf>,
    pub orientation: Option<PathBuf>,
}

/// A validated pipeline: parsed stages plus typed parameters.
#[derive(Debug, Clone)]
pub struct Plan {
    pub input: PlanInput,
    pub stages: Vec<Stage>,
    pub alpha: f32,
    pub tracklet_mode: TrackletAggregation,
    pub tracklet_beta: f32,
    pub rerank: RerankParams,
    pub lambda1: f64,
    pub lambda2: f64,
    pub top_k: usize,
    pub top_k_map: usize,
    pub i2t: bool,
    pub ensemble_mode: EnsembleMode,
    pub same_camera: SameCameraChoice,
    pub cluster: Option<ClusterPlan>,
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

fn resolve_existing(base: &Path, relative: &str, field: &str) -> Result<PathBuf> {
    let path = base.join(relative);
    if !path.exists() {
        return Err(config_err(
            field,
            format!("file not found: {}", path.display()),
        ));
    }
    Ok(path)
}

fn validate_stage_order(stages: &[Stage], cfg: &PipelineConfig) -> Result<()> {
    if stages.is_empty() {
        return Err(config_err("stages", "stage list is empty"));
    }
    let mut seen_rank = false;
    let mut seen_verify = false;
    let mut distance_ensemble_at = None;
    for (idx, stage) in stages.iter().enumerate() {
        match stage {
            Stage::AverageViews if cfg.input.views.is_empty() => {
                return Err(config_err("input.views", "required by stage average_views"));
            }
            Stage::Ensemble if cfg.input.models.is_empty() => {
                return Err(config_err("input.models", "required by stage ensemble"));
            }
            Stage::FuseEq4 if cfg.input.camera.is_none() || cfg.input.orientation.is_none() => {
                return Err(config_err(
                    "input.camera/input.orientation",
                    "required by stage fuse_eq4",
                ));
            }
            Stage::Cluster if cfg.cluster.is_none() => {
                return Err(config_err("cluster", "required by stage cluster"));
            }
            Stage::Evaluate if !seen_rank => {
                return Err(Error::StageOrder {
                    stage: "evaluate".into(),
                    reason: "requires a preceding rank stage".into(),
                });
            }
            _ => {}
        }
        if stage.needs_split() && cfg.input.queries.is_none() {
            return Err(config_err(
                "input.queries",
                format!("required by stage {stage}"),
            ));
        }
        if seen_verify && matches!(stage, Stage::Rerank | Stage::FuseEq4) {
            return Err(Error::StageOrder {
                stage: stage.as_str().into(),
                reason: "must run before camera_verify; masking is a ranking-side step".into(),
            });
        }
        if let Some(at) = distance_ensemble_at {
            if stage.changes_features() {
                return Err(Error::StageOrder {
                    stage: stage.as_str().into(),
                    reason: format!(
                        "feature stage after distance-mode ensemble (stage {at}) has no effect"
                    ),
                });
            }
        }
        if *stage == Stage::Ensemble && cfg.params.ensemble_mode == "distances" {
            distance_ensemble_at = Some(idx);
        }
        seen_rank |= *stage == Stage::Rank;
        seen_verify |= *stage == Stage::CameraVerify;
    }
    Ok(())
}

/// Parse and validate a pipeline config file.
pub fn load_plan(config_path: &Path) -> Result<Plan> {
    load_plan_with_stages(config_path, None)
}

/// Like [`load_plan`], with the config's stage list replaced before
/// validation (the `--stages` override).
pub fn load_plan_with_stages(
    config_path: &Path,
    stage_override: Option<&[String]>,
) -> Result<Plan> {
    let text = std::fs::read_to_string(config_path).map_err(|e| Error::io(config_path, e))?;
    let mut cfg: PipelineConfig =
        toml::from_str(&text).map_err(|e| config_err("<root>", e.to_string()))?;
    if let Some(list) = stage_override {
        cfg.stages = list.to_vec();
    }
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));

    let mut stages = Vec::with_capacity(cfg.stages.len());
    for raw in &cfg.stages {
        let stage = Stage::parse(raw)
            .ok_or_else(|| config_err("stages", format!("unknown stage {raw:?}")))?;
        stages.push(stage);
    }
    validate_stage_order(&stages, &cfg)?;

    let p = &cfg.params;
    let rerank = RerankParams {
        k1: p.k1,
        k2: p.k2,
        lambda: p.lambda,
        block_rows: p.block_rows,
    };
    rerank
        .validate()
        .map_err(|e| config_err("params", e.to_string()))?;
    let tracklet_mode = match p.tracklet_mode.as_str() {
        "mean" => TrackletAggregation::Mean,
        "weighted" => TrackletAggregation::Weighted {
            tau: p.tracklet_tau,
        },
        other => {
            return Err(config_err(
                "params.tracklet_mode",
                format!("must be \"mean\" or \"weighted\", got {other:?}"),
            ))
        }
    };
    if !(0.0..=1.0).contains(&p.tracklet_beta) {
        return Err(config_err("params.tracklet_beta", "must lie in [0, 1]"));
    }
    if !p.alpha.is_finite() {
        return Err(config_err("params.alpha", "must be finite"));
    }
    for (field, v) in [("params.lambda1", p.lambda1), ("params.lambda2", p.lambda2)] {
        if !v.is_finite() {
            return Err(config_err(field, "must be finite"));
        }
    }
    for (field, v) in [("params.top_k", p.top_k), ("params.top_k_map", p.top_k_map)] {
        if v == 0 {
            return Err(config_err(field, "must be at least 1"));
        }
    }
    let ensemble_mode = match p.ensemble_mode.as_str() {
        "features" => EnsembleMode::Features,
        "distances" => EnsembleMode::Distances,
        other => {
            return Err(config_err(
                "params.ensemble_mode",
                format!("must be \"features\" or \"distances\", got {other:?}"),
            ))
        }
    };
    let same_camera = match p.same_camera.as_str() {
        "auto" => SameCameraChoice::Auto,
        "keep" => SameCameraChoice::Fixed(SameCameraRule::Keep),
        "exclude" => SameCameraChoice::Fixed(SameCameraRule::Exclude),
        other => {
            return Err(config_err(
                "params.same_camera",
                format!("must be \"auto\", \"keep\" or \"exclude\", got {other:?}"),
            ))
        }
    };

    let cluster =
        match (&cfg.cluster, stages.contains(&Stage::Cluster)) {
            (Some(c), _) => {
                let metric = match c.metric.as_str() {
                    "jaccard" => ClusterMetric::Jaccard,
                    "raw" => ClusterMetric::Raw,
                    other => {
                        return Err(config_err(
                            "cluster.metric",
                            format!("must be \"jaccard\" or \"raw\", got {other:?}"),
                        ))
                    }
                };
                let dbscan = DbscanParams::new(c.eps, c.min_samples)
                    .map_err(|e| config_err("cluster", e.to_string()))?;
                let mut variants = Vec::new();
                for (i, v) in c.variants.iter().enumerate() {
                    variants.push(DbscanParams::new(v.eps, v.min_samples).map_err(|e| {
                        config_err(&format!("cluster.variants[{i}]"), e.to_string())
                    })?);
                }
                if !(0.0..=1.0).contains(&c.beta) {
                    return Err(config_err("cluster.beta", "must lie in [0, 1]"));
                }
                Some(ClusterPlan {
                    params: PseudoLabelParams {
                        alpha: c.alpha,
                        beta: c.beta,
                        rerank,
                        dbscan,
                        metric,
                    },
                    variants,
                })
            }
            (None, false) => None,
            (None, true) => unreachable!("validated above"),
        };

    let input = PlanInput {
        features: resolve_existing(base, &cfg.input.features, "input.features")?,
        queries: cfg
            .input
            .queries
            .as_deref()
            .map(|q| resolve_existing(base, q, "input.queries"))
            .transpose()?,
        views: cfg
            .input
            .views
            .iter()
            .enumerate()
            .map(|(i, v)| resolve_existing(base, v, &format!("input.views[{i}]")))
            .collect::<Result<_>>()?,
        models: cfg
            .input
            .models
            .iter()
            .enumerate()
            .map(|(i, v)| resolve_existing(base, v, &format!("input.models[{i}]")))
            .collect::<Result<_>>()?,
        camera: cfg
            .input
            .camera
            .as_deref()
            .map(|c| resolve_existing(base, c, "input.camera"))
            .transpose()?,
        orientation: cfg
            .input
            .orientation
            .as_deref()
            .map(|o| resolve_existing(base, o, "input.orientation"))
            .transpose()?,
    };

    Ok(Plan {
        input,
        stages,
        alpha: p.alpha,
        tracklet_mode,
        tracklet_beta: p.tracklet_beta,
        rerank,
        lambda1: p.lambda1,
        lambda2: p.lambda2,
        top_k: p.top_k,
        top_k_map: p.top_k_map,
        i2t: p.i2t,
        ensemble_mode,
        same_camera,
        cluster,
    })
}
