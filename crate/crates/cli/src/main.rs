use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ocmatch_core::pipeline::{self, PipelineConfig};
use ocmatch_core::sweep::MAX_VIEWS;
use ocmatch_core::Error;

/// Polyp matching between colonoscopy reconstructions and CT surface patches.
#[derive(Debug, Parser)]
#[command(name = "ocmatch", version)]
struct Cli {
    /// Pipeline configuration (JSON); all fields are optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Halve frames and intrinsics before reconstruction.
    #[arg(long, global = true)]
    resize_half: bool,
    /// Maximum number of views used for reconstruction.
    #[arg(long, global = true, value_parser = parse_views)]
    views: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log stage timings and statistics to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the phantom mesh, its manifest and the candidate patches.
    Phantom,
    /// Render the configured trajectory from the phantom mesh.
    Render,
    /// Plane-sweep reconstruction of the rendered frames.
    Reconstruct {
        /// Pose file listing the frames (default: <out>/frames/poses.json).
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Register one point cloud onto another.
    Register {
        /// Fixed point set (PLY).
        #[arg(long)]
        target: PathBuf,
        /// Moving point set (default: <out>/source.ply).
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Rank candidate patches against a reconstruction.
    Match {
        /// Reconstructed cloud (default: <out>/source.ply).
        #[arg(long)]
        cloud: Option<PathBuf>,
        /// Candidate directory (default: <out>/candidates).
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Run every stage in order.
    E2e,
}

fn parse_views(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (2..=MAX_VIEWS).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must be between 2 and {MAX_VIEWS}"))
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

fn config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.rng_seed = seed;
    }
    if let Some(views) = cli.views {
        cfg.views = views;
    }
    if cli.resize_half {
        cfg.resize_half = true;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = config(cli)?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    match &cli.command {
        Command::Phantom => {
            let p = pipeline::stage_phantom(&cfg, &out).map_err(|e| e.in_stage("phantom"))?;
            println!(
                "phantom: {} vertices, {} triangles, {} candidates",
                p.manifest.vertex_count, p.manifest.triangle_count, p.manifest.candidate_count
            );
        }
        Command::Render => {
            let frames = pipeline::stage_render(&cfg, &out).map_err(|e| e.in_stage("render"))?;
            println!("render: {} frames", frames.len());
        }
        Command::Reconstruct { poses } => {
            let poses = poses
                .clone()
                .unwrap_or_else(|| out.join(pipeline::FRAME_DIR).join(pipeline::POSES_FILE));
            let rec = pipeline::stage_reconstruct(&cfg, &poses, &out).map_err(|e| e.in_stage("reconstruct"))?;
            println!(
                "reconstruct: {} views, {} points, {} in source region",
                rec.views.len(),
                rec.cloud.len(),
                rec.source.len()
            );
        }
        Command::Register { target, source } => {
            let source = source.clone().unwrap_or_else(|| out.join(pipeline::SOURCE_FILE));
            let r = pipeline::stage_register(&cfg, target, &source, &out).map_err(|e| e.in_stage("register"))?;
            println!(
                "register: sigma {:.6}, scale {:.6}, {} iterations, converged {}",
                r.sigma, r.scale, r.iterations, r.converged
            );
        }
        Command::Match { cloud, candidates } => {
            let cloud = cloud.clone().unwrap_or_else(|| out.join(pipeline::SOURCE_FILE));
            let candidates = candidates.clone().unwrap_or_else(|| out.join(pipeline::CANDIDATE_DIR));
            let report = pipeline::stage_match(&cfg, &cloud, &candidates, &out).map_err(|e| e.in_stage("match"))?;
            summarize(&report);
        }
        Command::E2e => {
            let report = pipeline::stage_e2e(&cfg, &out)?;
            summarize(&report);
        }
    }
    Ok(())
}

fn summarize(report: &ocmatch_core::MatchReport) {
    let best = report.best_entry();
    println!(
        "match: {} candidates, best {} ({}) sigma {:.6}",
        report.entries.len(),
        best.id,
        best.label,
        best.sigma
    );
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                if !e.to_string().contains(&s.to_string()) {
                    eprintln!("  caused by: {s}");
                }
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
