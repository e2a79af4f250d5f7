//! `reid` — pipeline driver for embedding-based vehicle re-identification.
//!
//! Exit codes: 0 success, 1 validation failure (arguments, config,
//! manifests), 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use reid_core::distance::read_matrix;
use reid_core::eval::{
    camera_verify_mask, evaluate, rank, write_report, EvalOptions, SameCameraRule,
};
use reid_core::pipeline::{load_plan_with_stages, run_plan, PipelineOutcome};
use reid_core::store::{default_query_split, export, ingest, synth_generate, SynthParams};

#[derive(Parser)]
#[command(
    name = "reid",
    version,
    about = "Vehicle ReID retrieval and post-processing engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled fixture (manifest + query split).
    Synth(SynthArgs),
    /// Validate a feature manifest and print a summary.
    IngestCheck {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run the configured stage pipeline.
    Pipeline(PipelineArgs),
    /// Emit pseudo-label files from the config's [cluster] table.
    Cluster(ClusterArgs),
    /// Rank and score a distance checkpoint against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for features.toml/.bin/.csv and queries.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    num_ids: usize,
    #[arg(long, default_value_t = 4)]
    cams: usize,
    #[arg(long, default_value_t = 2)]
    tracklets_per_id: usize,
    #[arg(long, default_value_t = 5)]
    frames_per_tracklet: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.5)]
    camera_offset_scale: f32,
    #[arg(long, default_value_t = 0.15)]
    noise_scale: f32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Skip writing queries.txt (each identity's first tracklet).
    #[arg(long)]
    no_query_split: bool,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    workdir: PathBuf,
    /// Comma-separated stage list overriding the config.
    #[arg(long)]
    stages: Option<String>,
    /// Worker threads for the parallel kernels (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    workdir: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Distance checkpoint manifest (query rows, gallery columns).
    #[arg(long)]
    distance: PathBuf,
    /// Feature manifest providing per-image metadata and ground truth.
    #[arg(long)]
    features: PathBuf,
    /// Query id file; remaining images form the gallery.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    #[arg(long, default_value_t = 100)]
    top_k_map: usize,
    /// Image-to-track ranking (tracklets scored by best member).
    #[arg(long)]
    i2t: bool,
    /// Mask same-camera candidates and exclude them from relevants.
    #[arg(long)]
    camera_verify: bool,
    /// Write the report here in addition to printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Which phase failed decides the exit code.
enum AppError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

fn validation(e: impl Into<anyhow::Error>) -> AppError {
    AppError::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> AppError {
    AppError::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn setup_threads(threads: Option<usize>) -> Result<(), AppError> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(validation(anyhow!("--threads must be at least 1")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| runtime(anyhow!("thread pool: {e}")))
}

fn dispatch(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::IngestCheck { manifest } => run_ingest_check(&manifest),
        Command::Pipeline(args) => run_pipeline_cmd(args),
        Command::Cluster(args) => run_cluster_cmd(args),
        Command::Evaluate(args) => run_evaluate_cmd(args),
    }
}

fn run_synth(args: SynthArgs) -> Result<(), AppError> {
    let params = SynthParams {
        num_ids: args.num_ids,
        cams: args.cams,
        tracklets_per_id: args.tracklets_per_id,
        frames_per_tracklet: args.frames_per_tracklet,
        dim: args.dim,
        camera_offset_scale: args.camera_offset_scale,
        noise_scale: args.noise_scale,
        seed: args.seed,
    };
    let (fs, metas) = synth_generate(&params).map_err(validation)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(runtime)?;
    let manifest_path = args.out.join("features.toml");
    export(&fs, &metas, &manifest_path).map_err(runtime)?;
    println!(
        "wrote {} ({} images, dim {})",
        manifest_path.display(),
        fs.count(),
        fs.dim()
    );
    if !args.no_query_split {
        let queries = default_query_split(&metas);
        let path = args.out.join("queries.txt");
        std::fs::write(&path, queries.join("\n") + "\n")
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime)?;
        println!("wrote {} ({} queries)", path.display(), queries.len());
    }
    Ok(())
}

fn run_ingest_check(manifest: &Path) -> Result<(), AppError> {
    let (fs, metas) = ingest(manifest).map_err(validation)?;
    let cameras: std::collections::BTreeSet<u32> = metas.iter().map(|m| m.camera_id).collect();
    let tracklets: std::collections::BTreeSet<u32> =
        metas.iter().filter_map(|m| m.tracklet_id).collect();
    let labeled = metas.iter().filter(|m| m.identity.is_some()).count();
    println!("manifest ok: {}", manifest.display());
    println!("  images:     {}", fs.count());
    println!("  dim:        {}", fs.dim());
    println!("  normalized: {}", fs.is_normalized());
    println!("  cameras:    {}", cameras.len());
    println!("  tracklets:  {}", tracklets.len());
    println!("  labeled:    {labeled}/{}", metas.len());
    Ok(())
}

fn parse_stage_override(raw: Option<&str>) -> Option<Vec<String>> {
    raw.map(|s| {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::to_string)
            .collect()
    })
}

fn print_outcome(outcome: &PipelineOutcome) {
    if !outcome.stage_table.is_empty() {
        println!("{:<16} {:>8} {:>8}", "stage", "mAP", "rank-1");
        for row in &outcome.stage_table {
            println!("{:<16} {:>8.4} {:>8.4}", row.stage, row.map, row.rank1);
        }
    }
    if let Some(report) = &outcome.report {
        println!(
            "final: mAP {:.4}, rank-1 {:.4} over {} queries",
            report.map,
            report.cmc_at(1),
            report.queries_evaluated
        );
    }
    for path in &outcome.label_files {
        println!("labels: {}", path.display());
    }
    if let Some(path) = &outcome.ranking_file {
        println!("ranking: {}", path.display());
    }
    if let Some(path) = &outcome.report_file {
        println!("report: {}", path.display());
    }
}

fn run_pipeline_cmd(args: PipelineArgs) -> Result<(), AppError> {
    setup_threads(args.threads)?;
    let stages = parse_stage_override(args.stages.as_deref());
    let plan = load_plan_with_stages(&args.config, stages.as_deref()).map_err(validation)?;
    let outcome = run_plan(&plan, &args.workdir).map_err(runtime)?;
    print_outcome(&outcome);
    Ok(())
}

fn run_cluster_cmd(args: ClusterArgs) -> Result<(), AppError> {
    setup_threads(args.threads)?;
    let stages = vec!["cluster".to_string()];
    let plan = load_plan_with_stages(&args.config, Some(&stages)).map_err(validation)?;
    let outcome = run_plan(&plan, &args.workdir).map_err(runtime)?;
    print_outcome(&outcome);
    Ok(())
}

fn run_evaluate_cmd(args: EvaluateArgs) -> Result<(), AppError> {
    let d = read_matrix(&args.distance).map_err(validation)?;
    let (_, metas) = ingest(&args.features).map_err(validation)?;
    let query_text = std::fs::read_to_string(&args.queries)
        .with_context(|| format!("reading {}", args.queries.display()))
        .map_err(validation)?;
    let query_ids: std::collections::HashSet<&str> = query_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();

    let by_id: std::collections::HashMap<&str, &reid_core::store::ImageMeta> =
        metas.iter().map(|m| (m.image_id.as_str(), m)).collect();
    let mut q_metas = Vec::new();
    for id in d.row_ids() {
        let meta = by_id
            .get(id.as_str())
            .ok_or_else(|| validation(anyhow!("query id {id:?} missing from features")))?;
        if !query_ids.contains(id.as_str()) {
            return Err(validation(anyhow!(
                "distance row id {id:?} is not listed in the query file"
            )));
        }
        q_metas.push((*meta).clone());
    }
    let mut g_metas = Vec::new();
    for id in d.col_ids() {
        let meta = by_id
            .get(id.as_str())
            .ok_or_else(|| validation(anyhow!("gallery id {id:?} missing from features")))?;
        g_metas.push((*meta).clone());
    }

    let (d, rule) = if args.camera_verify {
        (
            camera_verify_mask(&d, &q_metas, &g_metas).map_err(runtime)?,
            SameCameraRule::Exclude,
        )
    } else {
        (d, SameCameraRule::Keep)
    };
    let rl = rank(&d, &g_metas, args.top_k, args.i2t).map_err(runtime)?;
    let opts = EvalOptions {
        top_k_map: args.top_k_map,
        same_camera: rule,
    };
    let report = evaluate(&rl, &q_metas, &g_metas, &opts).map_err(runtime)?;
    println!(
        "mAP {:.4}  rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}  ({} queries)",
        report.map,
        report.cmc_at(1),
        report.cmc_at(5),
        report.cmc_at(10),
        report.queries_evaluated
    );
    if let Some(out) = &args.out {
        write_report(&report, out).map_err(runtime)?;
        println!("report: {}", out.display());
    }
    Ok(())
}
