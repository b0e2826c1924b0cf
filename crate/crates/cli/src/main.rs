use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use edgeprompt::ablation::{run_grid, AblationAxis, AblationGrid, ABLATION_PROTOCOL};
use edgeprompt::config::ExperimentConfig;
use edgeprompt::data::{scan_dataset, write_manifest};
use edgeprompt::eval::predict_volume;
use edgeprompt::experiment::{
    backend_for, evaluate_protocol, load_trained, protocol_for, select, train_protocol, MAIN_LABEL,
};
use edgeprompt::metrics::{Aggregation, MetricReport, Scope};
use edgeprompt::pipeline::PipelineKind;
use edgeprompt::protocol::ProtocolName;
use edgeprompt::raster::Modality;
use edgeprompt::report::{collect, tables};
use edgeprompt::volume::{densify, dice3d, stack_with_affine, write_nifti};

/// Modality-agnostic liver segmentation with edge-map prompts.
#[derive(Debug, Parser)]
#[command(name = "edgeprompt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Index a dataset root and write a manifest CSV (volume_id, modality, path, n_slices).
    Scan(ScanArgs),
    /// Train one pipeline on one protocol.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the ID or OOD test split of a protocol.
    Eval(EvalArgs),
    /// Run the loss-term or edge-detector ablation grid on CROSS_MR_TO_CT.
    Ablate(AblateArgs),
    /// Segment one volume and write the stacked mask as NIfTI-1.
    Reconstruct(ReconstructArgs),
    /// Assemble Tables 1, 2, 3a and 3b from run directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ScanArgs {
    /// Dataset root (CHAOS layout or one directory per volume).
    #[arg(long)]
    root: PathBuf,
    /// MR sequences to list, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "mr_t1_oop")]
    mr_sequence: Vec<Modality>,
    /// Output directory; the manifest is written as manifest.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// full_mixed | data_scarce | cross_ct_to_mr | cross_mr_to_ct
    #[arg(long)]
    protocol: ProtocolName,
    /// edge2prompt | im-unet | em-unet | s-unet
    #[arg(long, default_value = "edge2prompt")]
    pipeline: PipelineKind,
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for checkpoint, logs and the resolved configuration.
    #[arg(long)]
    out: PathBuf,
    /// Override train.epochs (default 250).
    #[arg(long)]
    epochs: Option<usize>,
    /// Override train.patience (default 50).
    #[arg(long)]
    patience: Option<usize>,
    /// Override train.seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Also evaluate the best checkpoint on the ID and, where defined, OOD test splits.
    #[arg(long)]
    evaluate: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    protocol: ProtocolName,
    /// id | ood
    #[arg(long, default_value = "id")]
    scope: Scope,
    /// Report CSV; a JSON twin is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Aggregate over slices instead of volumes.
    #[arg(long)]
    per_slice: bool,
    /// Configuration whose data section replaces the one stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// loss | edge
    #[arg(long)]
    axis: AblationAxis,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Volume identifier from the configured dataset.
    #[arg(long)]
    volume: String,
    /// Output NIfTI-1 file (.nii).
    #[arg(long)]
    out: PathBuf,
    /// Interpolate to this slice spacing in mm before writing.
    #[arg(long)]
    densify: Option<f64>,
    /// Configuration whose data section replaces the one stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory searched recursively for evaluation and ablation JSON reports.
    #[arg(long)]
    runs: PathBuf,
    /// Directory for text and CSV tables; printed only when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            if !p.is_file() {
                bail!("config file {} does not exist", p.display());
            }
            Ok(ExperimentConfig::from_file(p)?)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn print_summary(r: &MetricReport) {
    let s = &r.summary;
    println!(
        "{} {} {}: dice {:.4} ± {:.4}, iou {:.4} ± {:.4} over {} {}",
        r.protocol,
        r.pipeline,
        r.scope,
        s.dice_mean,
        s.dice_std,
        s.iou_mean,
        s.iou_std,
        s.count,
        match r.aggregation {
            Aggregation::PerVolume => "volumes",
            Aggregation::PerSlice => "slices",
        }
    );
    if !r.excluded.is_empty() {
        println!("excluded (no scored slice): {}", r.excluded.join(", "));
    }
}

fn write_report(r: &MetricReport, csv_path: &Path) -> Result<()> {
    r.write_csv(csv_path)?;
    write_json(&csv_path.with_extension("json"), r)
}

fn scan(args: ScanArgs) -> Result<()> {
    let entries = scan_dataset(&args.root, &args.mr_sequence)?;
    if entries.is_empty() {
        bail!("no volumes found under {}", args.root.display());
    }
    create_dir(&args.out)?;
    let path = args.out.join("manifest.csv");
    write_manifest(&entries, &path)?;
    println!("{} volumes written to {}", entries.len(), path.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.train.pipeline = args.pipeline;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
        cfg.train.patience = cfg.train.patience.min(e);
    }
    if let Some(p) = args.patience {
        cfg.train.patience = p;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    create_dir(&args.out)?;
    std::fs::write(args.out.join("config.toml"), cfg.to_toml()?)?;
    let volumes = cfg.data.load()?;
    let protocol = protocol_for(&cfg, args.protocol, &volumes)?;
    write_json(&args.out.join("protocol.json"), &protocol)?;
    let (pipeline, outcome) = train_protocol(&cfg, &protocol, &volumes, None, Some(&args.out))?;
    println!(
        "trained {} on {}: best epoch {} (val dice {:.4}), {} epochs, {} steps",
        args.pipeline,
        args.protocol,
        outcome.best_epoch,
        outcome.best_val_dice,
        outcome.epochs.len(),
        outcome.steps
    );
    if let Some(p) = &outcome.checkpoint {
        println!("checkpoint: {}", p.display());
    }
    if args.evaluate {
        for scope in [Scope::Id, Scope::Ood] {
            if protocol.test_ids_for(scope).is_empty() {
                continue;
            }
            let r = evaluate_protocol(&pipeline, &cfg, &protocol, &volumes, scope, MAIN_LABEL)?;
            write_report(&r, &args.out.join(format!("metrics_{scope}.csv")))?;
            print_summary(&r);
        }
    }
    Ok(())
}

fn with_data_override(mut cfg: ExperimentConfig, path: Option<&Path>) -> Result<ExperimentConfig> {
    if path.is_some() {
        cfg.data = load_config(path)?.data;
    }
    Ok(cfg)
}

fn eval(args: EvalArgs) -> Result<()> {
    let (pipeline, cfg, _) = load_trained(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let mut cfg = with_data_override(cfg, args.config.as_deref())?;
    if args.per_slice {
        cfg.eval.aggregation = Aggregation::PerSlice;
    }
    let volumes = cfg.data.load()?;
    let protocol = protocol_for(&cfg, args.protocol, &volumes)?;
    let r = evaluate_protocol(&pipeline, &cfg, &protocol, &volumes, args.scope, MAIN_LABEL)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_report(&r, &args.out)?;
    print_summary(&r);
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    create_dir(&args.out)?;
    std::fs::write(args.out.join("config.toml"), cfg.to_toml()?)?;
    let volumes = cfg.data.load()?;
    let protocol = protocol_for(&cfg, ABLATION_PROTOCOL, &volumes)?;
    let grid = AblationGrid::new(args.axis, &cfg);
    let report = run_grid(&grid, &protocol, &volumes, backend_for(&cfg)?, Some(&args.out))?;
    write_json(&args.out.join(format!("ablation_{}.json", args.axis.as_str())), &report)?;
    let table = edgeprompt::report::table3(&report);
    std::fs::write(args.out.join(format!("{}.txt", table.name)), table.to_text())?;
    table.write_csv(&args.out.join(format!("{}.csv", table.name)))?;
    print!("{}", table.to_text());
    Ok(())
}

fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let (pipeline, cfg, _) = load_trained(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let cfg = with_data_override(cfg, args.config.as_deref())?;
    let volumes = cfg.data.load()?;
    let record = select(&volumes, std::slice::from_ref(&args.volume))?.remove(0);
    let preds = predict_volume(&pipeline, &record, cfg.eval.batch_size)?;
    let pred = stack_with_affine(&record.volume_id, &preds, record.affine.clone())?;
    let truth = stack_with_affine(&record.volume_id, &record.masks, record.affine.clone())?;
    println!("{}: 3D dice {:.4}", record.volume_id, dice3d(&pred, &truth)?);
    let pred = match args.densify {
        Some(dz) => densify(&pred, dz)?,
        None => pred,
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_nifti(&pred, &args.out)?;
    let (k, h, w) = pred.shape();
    println!("wrote {} ({k} x {h} x {w})", args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let (metrics, ablations) = collect(&args.runs)?;
    if metrics.is_empty() && ablations.is_empty() {
        bail!("no evaluation or ablation reports under {}", args.runs.display());
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
    }
    for t in tables(&metrics, &ablations) {
        println!("{}", t.to_text());
        if let Some(out) = &args.out {
            std::fs::write(out.join(format!("{}.txt", t.name)), t.to_text())?;
            t.write_csv(&out.join(format!("{}.csv", t.name)))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scan(a) => scan(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
