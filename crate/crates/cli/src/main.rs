//! warpfuse command line: generate synthetic scan sequences, run the
//! reconstruction pipeline, and summarize metrics.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use warpfuse::pipeline::{self, InputMode, RunConfig};
use warpfuse::synth::{self, SceneSpec};

#[derive(Parser)]
#[command(name = "warpfuse", version, about = "Non-rigid scan-to-model registration and fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a sequence from a synthetic scene or an offline frame
    /// directory.
    Run(RunArgs),
    /// Render a synthetic scene into an offline frame directory for
    /// replay.
    Gen(GenArgs),
    /// Summarize a metrics CSV; with --compare, also emit per-frame
    /// difference series.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scene config file (synthetic input).
    #[arg(long, conflicts_with = "input")]
    scene: Option<PathBuf>,
    /// Offline frame directory (recorded input).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory for metrics, logs, and model exports.
    #[arg(long)]
    out: PathBuf,
    /// Pipeline parameter file (key=value), overriding the defaults.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Override the scene seed (synthetic input only).
    #[arg(long)]
    seed: Option<u64>,
    /// Export a model snapshot every N frames (0 = final only).
    #[arg(long, default_value_t = 0)]
    export_every: usize,
    /// Ignore external pose priors (the degraded-tracking baseline).
    #[arg(long)]
    no_prior: bool,
    /// Ignore sparse feature correspondences.
    #[arg(long)]
    no_corr: bool,
    /// Add wall-clock timings to metrics.csv (makes runs non-reproducible
    /// byte-for-byte).
    #[arg(long)]
    timings: bool,
    /// Echo per-frame progress to stderr.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args)]
struct GenArgs {
    /// Scene config file.
    #[arg(long)]
    scene: PathBuf,
    /// Directory to write frames into.
    #[arg(long)]
    out: PathBuf,
    /// Override the scene seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSV from a run.
    #[arg(long)]
    metrics: PathBuf,
    /// Second metrics CSV to difference against (e.g. prior on vs off).
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Directory for difference.csv and the summary text.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_scene(path: &PathBuf, seed: Option<u64>) -> anyhow::Result<SceneSpec> {
    let mut spec = SceneSpec::from_file(path)
        .with_context(|| format!("loading scene {}", path.display()))?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    Ok(spec)
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let input = match (&args.scene, &args.input) {
        (Some(scene), None) => InputMode::Synthetic(load_scene(scene, args.seed)?),
        (None, Some(dir)) => InputMode::Offline(dir.clone()),
        _ => bail!("exactly one of --scene or --input is required"),
    };
    let mut config = RunConfig::new(input, &args.out);
    if let Some(params) = &args.params {
        config
            .apply_params_file(params)
            .with_context(|| format!("loading params {}", params.display()))?;
    }
    if args.export_every > 0 {
        config.export_every = args.export_every;
    }
    config.use_prior = !args.no_prior;
    config.use_correspondences = !args.no_corr;
    config.include_timings = args.timings;
    config.verbose = args.verbose;
    let summary = pipeline::run(&config).context("run failed")?;
    println!(
        "frames={} discarded={} stalled={} points={} drops={}",
        summary.frames,
        summary.discarded,
        summary.stalled,
        summary.final_model_points,
        summary.drops
    );
    if let Some(err) = summary.final_error {
        println!(
            "final: nn_dist={:.4} plane_residual={:.4} pose_err={:.4}deg/{:.4}mm",
            err.mean_nn_distance,
            err.mean_plane_residual,
            err.rotation_error_deg,
            err.translation_error
        );
    }
    println!("outputs in {}", args.out.display());
    Ok(())
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<()> {
    let spec = load_scene(&args.scene, args.seed)?;
    synth::write_sequence(&spec, &args.out)
        .with_context(|| format!("writing frames to {}", args.out.display()))?;
    println!("wrote {} frames to {}", spec.frames, args.out.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let summary = pipeline::report(&args.metrics, args.compare.as_deref(), args.out.as_deref())
        .context("report failed")?;
    let text = pipeline::format_report(&summary);
    print!("{text}");
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("summary.txt"), &text)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Gen(args) => cmd_gen(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
