//! Declarative stage pipeline binding all modules.
//!
//! A pipeline is an ordered stage list over one ingested feature set plus
//! an optional query split, mirroring how post-processing ablations are
//! run: each stage refines either the features or the current
//! query-gallery distance, and every stage's output is checkpointed to
//! the working directory. When ground truth is available the runner
//! records a stage-by-stage mAP table.

mod config;
mod run;

pub use config::{
    load_plan, load_plan_with_stages, ClusterPlan, EnsembleMode, Plan, PlanInput, SameCameraChoice,
    Stage,
};
pub use run::{run_plan, PipelineOutcome, StageMetric};
