//! Command-line frontend: reproducible experiment runs and analyses with
//! stable file outputs.
//!
//! Every run writes a `run.json` capturing the fully resolved configuration,
//! the seeds, and the tool version. All randomness flows from declared
//! seeds, so repeating a command with identical inputs produces
//! byte-identical output files. Exit codes: 0 success, 1 validation error,
//! 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dtdnn::analysis::{
    dependency_map, lookahead, offset_histogram, offset_histograms_to_csv, ProbeMode,
    DEFAULT_BIN_WIDTH,
};
use dtdnn::checkpoint::{load_checkpoint, save_checkpoint};
use dtdnn::deform::ClipMode;
use dtdnn::gradcheck::{full_gradient_suite, GradCheckSpec};
use dtdnn::network::{build_network, seven_layer_config, Network, NetworkConfig};
use dtdnn::rng::Rng;
use dtdnn::seq::FeatureSeq;
use dtdnn::train::{compare_run, train_run, ExperimentConfig};
use dtdnn::warp::WarpMap;

#[derive(Parser)]
#[command(name = "dtdnn", version, about = "Deformable TDNN experiments and analyses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the finite-difference oracle suite over every backward pass.
    Gradcheck(GradcheckArgs),
    /// Train one network per the experiment config and write its report.
    Train(TrainArgs),
    /// Compute the receptive-field (dependency) map of a network.
    AnalyzeRf(AnalyzeRfArgs),
    /// Histogram the offsets a trained network predicts on the toy task.
    AnalyzeOffsets(AnalyzeOffsetsArgs),
    /// Time-warp a feature file.
    Warp(WarpArgs),
    /// Paired standard-versus-deformable training and warped evaluation.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GradcheckArgs {
    /// Network config to build the full-network cases from; defaults to a
    /// built-in two-layer miniature.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for gradcheck.json and run.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Max relative error per gradient group.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Force latency-controlled offset clipping in training and evaluation.
    #[arg(long)]
    clip: bool,
}

#[derive(Args)]
struct AnalyzeRfArgs {
    /// Checkpoint to analyze.
    #[arg(long, conflicts_with = "config")]
    ckpt: Option<PathBuf>,
    /// Network config to analyze with fresh parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Probe input length in frames.
    #[arg(long)]
    length: usize,
    /// Output directory for rf_map.csv and run.json.
    #[arg(long)]
    out: PathBuf,
    /// Seed of the random probe input.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnalyzeOffsetsArgs {
    /// Checkpoint holding the trained network.
    #[arg(long)]
    ckpt: PathBuf,
    /// Experiment config describing the task the histogram is taken over.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for offsets_hist.csv and run.json.
    #[arg(long)]
    out: PathBuf,
    /// Histogram bin width in input frames.
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
    bin_width: f64,
    /// Seed selecting the evaluation batches.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct WarpArgs {
    /// Input feature file (FSEQ).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output feature file (FSEQ); a `<out>.run.json` is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Time-warp parameter: maximum displacement in frames.
    #[arg(long = "W")]
    w: f64,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment config (TOML); its network must have deformable_last_k >= 1.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<dtdnn::Error> for CliError {
    fn from(e: dtdnn::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprintln!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    let result = match cli.command {
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Train(args) => cmd_train(args),
        Command::AnalyzeRf(args) => cmd_analyze_rf(args),
        Command::AnalyzeOffsets(args) => cmd_analyze_offsets(args),
        Command::Warp(args) => cmd_warp(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Validation(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn prepare_out_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

#[derive(Serialize)]
struct RunManifest<T: Serialize> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    seed: u64,
    config: T,
    outputs: Vec<String>,
}

fn write_run_json<T: Serialize>(path: &Path, manifest: &RunManifest<T>) -> CliResult {
    let json =
        serde_json::to_string_pretty(manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

fn run_manifest<T: Serialize>(
    subcommand: &'static str,
    seed: u64,
    config: T,
    outputs: &[&str],
) -> RunManifest<T> {
    RunManifest {
        tool: "dtdnn",
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        seed,
        config,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    }
}

/// Built-in miniature network for the oracle suite; mirrors
/// `configs/mini.cfg`.
fn mini_config() -> NetworkConfig {
    let mut cfg = seven_layer_config(3, 4, 6, 1, ClipMode::LatencyControlled, 3);
    cfg.layers.truncate(2);
    cfg.layers[1].stride = 3;
    cfg
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult {
    let net_cfg = match &args.config {
        Some(path) => {
            require_file(path, "network config")?;
            NetworkConfig::from_file(path)?
        }
        None => mini_config(),
    };
    if !(args.eps.is_finite() && args.eps > 0.0) {
        return Err(CliError::Validation(format!("eps must be positive, got {}", args.eps)));
    }
    if !(args.tol.is_finite() && args.tol > 0.0) {
        return Err(CliError::Validation(format!("tol must be positive, got {}", args.tol)));
    }
    prepare_out_dir(&args.out)?;

    let spec = GradCheckSpec { eps: args.eps, tol: args.tol, ..Default::default() };
    let report = full_gradient_suite(&net_cfg, args.seed, &spec)?;
    std::fs::write(args.out.join("gradcheck.json"), report.to_json())?;
    let manifest = run_manifest(
        "gradcheck",
        args.seed,
        serde_json::json!({ "network": net_cfg, "eps": args.eps, "tol": args.tol }),
        &["gradcheck.json"],
    );
    write_run_json(&args.out.join("run.json"), &manifest)?;

    for group in &report.groups {
        println!(
            "{}: {} (max rel err {:.3e})",
            group.name,
            if group.pass { "pass" } else { "FAIL" },
            group.max_rel_err
        );
    }
    if report.pass {
        println!("gradcheck: all {} groups pass", report.groups.len());
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed for: {}",
            report.failing().join(", ")
        )))
    }
}

fn cmd_train(args: TrainArgs) -> CliResult {
    require_file(&args.config, "experiment config")?;
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    if args.clip {
        for layer in cfg.network.layers.iter_mut() {
            layer.clip_mode = ClipMode::LatencyControlled;
        }
    }
    prepare_out_dir(&args.out)?;

    let outcome = train_run(&cfg)?;
    std::fs::write(args.out.join("report.json"), outcome.report.to_json())?;
    std::fs::write(args.out.join("metrics.csv"), outcome.report.metrics_csv())?;
    save_checkpoint(&outcome.network, &args.out.join("net.dtdn"))?;
    let manifest = run_manifest(
        "train",
        cfg.seed,
        &cfg,
        &["report.json", "metrics.csv", "net.dtdn"],
    );
    write_run_json(&args.out.join("run.json"), &manifest)?;

    eprintln!("wall time: {:.2}s", outcome.report.wall_time_s);
    if let Some(step) = outcome.report.diverged_at {
        return Err(CliError::Runtime(format!(
            "training diverged (non-finite loss) at step {step}; partial report written"
        )));
    }
    let last = outcome.report.train.last().map(|r| r.loss);
    println!(
        "trained {} steps; final train loss {}",
        outcome.report.train.len(),
        last.map(|l| format!("{l:.6}")).unwrap_or_else(|| "n/a".to_string())
    );
    Ok(())
}

fn load_net_for_analysis(
    ckpt: &Option<PathBuf>,
    config: &Option<PathBuf>,
) -> Result<Network, CliError> {
    match (ckpt, config) {
        (Some(path), None) => {
            require_file(path, "checkpoint")?;
            Ok(load_checkpoint(path)?)
        }
        (None, Some(path)) => {
            require_file(path, "network config")?;
            Ok(build_network(&NetworkConfig::from_file(path)?)?)
        }
        _ => Err(CliError::Validation(
            "exactly one of --ckpt or --config is required".to_string(),
        )),
    }
}

fn cmd_analyze_rf(args: AnalyzeRfArgs) -> CliResult {
    if args.length == 0 {
        return Err(CliError::Validation("length must be positive".to_string()));
    }
    let net = load_net_for_analysis(&args.ckpt, &args.config)?;
    prepare_out_dir(&args.out)?;

    let mut rng = Rng::seeded(args.seed);
    let probe = FeatureSeq::random_normal(net.config().input_dim, args.length, &mut rng);
    let map = dependency_map(&net, &probe, ProbeMode::Jacobian)?;
    let perturbed = dependency_map(&net, &probe, ProbeMode::Perturb)?;
    if map != perturbed {
        return Err(CliError::Runtime(
            "dependency probes disagree: jacobian and perturbation maps differ".to_string(),
        ));
    }
    std::fs::write(args.out.join("rf_map.csv"), map.to_csv())?;
    let report = lookahead(&map, net.stride_product());
    let manifest = run_manifest(
        "analyze-rf",
        args.seed,
        serde_json::json!({
            "network": net.config(),
            "length": args.length,
            "checkpoint": args.ckpt.as_ref().map(|p| p.display().to_string()),
        }),
        &["rf_map.csv"],
    );
    write_run_json(&args.out.join("run.json"), &manifest)?;
    println!(
        "rf map {} x {}; max lookahead {} input frames",
        map.rows(),
        map.cols(),
        report.max
    );
    Ok(())
}

fn cmd_analyze_offsets(args: AnalyzeOffsetsArgs) -> CliResult {
    require_file(&args.ckpt, "checkpoint")?;
    require_file(&args.config, "experiment config")?;
    let net = load_checkpoint(&args.ckpt)?;
    let cfg = ExperimentConfig::from_file(&args.config)?;
    prepare_out_dir(&args.out)?;

    let mut rng = Rng::seeded(args.seed);
    let batch = dtdnn::task::generate_batch(
        &cfg.task,
        net.stride_product(),
        cfg.eval_sequences.max(1) * cfg.eval_seeds.max(1) as usize,
        &mut rng,
    )?;
    let hists = offset_histogram(&net, &batch.features, args.bin_width)?;
    std::fs::write(args.out.join("offsets_hist.csv"), offset_histograms_to_csv(&hists))?;
    let manifest = run_manifest(
        "analyze-offsets",
        args.seed,
        serde_json::json!({
            "experiment": &cfg,
            "bin_width": args.bin_width,
            "checkpoint": args.ckpt.display().to_string(),
        }),
        &["offsets_hist.csv"],
    );
    write_run_json(&args.out.join("run.json"), &manifest)?;
    for h in &hists {
        println!(
            "layer {}: {} offsets, fraction <= 0: {:.4}",
            h.layer, h.total, h.fraction_nonpositive
        );
    }
    Ok(())
}

fn cmd_warp(args: WarpArgs) -> CliResult {
    require_file(&args.input, "feature file")?;
    let x = FeatureSeq::read_fseq_file(&args.input)?;
    let mut rng = Rng::seeded(args.seed);
    let map = WarpMap::sample(x.len(), args.w, &mut rng)?;
    let warped = map.warp_features(&x);
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    warped.write_fseq_file(&args.out)?;

    let manifest = run_manifest(
        "warp",
        args.seed,
        serde_json::json!({
            "input": args.input.display().to_string(),
            "w": args.w,
            "channels": x.channels(),
            "length": x.len(),
        }),
        &[&args.out.display().to_string()],
    );
    let run_path = PathBuf::from(format!("{}.run.json", args.out.display()));
    write_run_json(&run_path, &manifest)?;
    println!("warped ({}, {}) features with W = {}", x.channels(), x.len(), args.w);
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> CliResult {
    require_file(&args.config, "experiment config")?;
    let cfg = ExperimentConfig::from_file(&args.config)?;
    prepare_out_dir(&args.out)?;

    let outcome = compare_run(&cfg)?;
    let compare_json = serde_json::json!({
        "summary": outcome.summary,
        "standard": outcome.standard.report,
        "deformable": outcome.deformable.report,
    });
    std::fs::write(
        args.out.join("compare.json"),
        serde_json::to_string_pretty(&compare_json).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    std::fs::write(args.out.join("metrics_standard.csv"), outcome.standard.report.metrics_csv())?;
    std::fs::write(
        args.out.join("metrics_deformable.csv"),
        outcome.deformable.report.metrics_csv(),
    )?;
    save_checkpoint(&outcome.standard.network, &args.out.join("net_standard.dtdn"))?;
    save_checkpoint(&outcome.deformable.network, &args.out.join("net_deformable.dtdn"))?;
    let manifest = run_manifest(
        "compare",
        cfg.seed,
        &cfg,
        &[
            "compare.json",
            "metrics_standard.csv",
            "metrics_deformable.csv",
            "net_standard.dtdn",
            "net_deformable.dtdn",
        ],
    );
    write_run_json(&args.out.join("run.json"), &manifest)?;

    eprintln!(
        "wall time: {:.2}s standard + {:.2}s deformable",
        outcome.standard.report.wall_time_s, outcome.deformable.report.wall_time_s
    );
    for w in &outcome.summary.per_warp {
        println!(
            "W={}: standard {:.6}, deformable {:.6}, relative gain {:.2}%",
            w.warp,
            w.standard_median_loss,
            w.deformable_median_loss,
            100.0 * w.relative_gain
        );
    }
    if outcome.standard.report.diverged_at.is_some()
        || outcome.deformable.report.diverged_at.is_some()
    {
        return Err(CliError::Runtime("a training run diverged; partial reports written".into()));
    }
    Ok(())
}
