//! `crbd`: manifest-driven experiment runner plus thin wrappers around the
//! individual pipeline stages.
//!
//! Exit codes: 0 success, 2 validation/configuration error, 3 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crbd_core::error::{Error, Result};
use crbd_core::experiment::{self, ExperimentManifest, RunReport};
use crbd_core::model::Model;
use crbd_core::{eval, poison, train};

#[derive(Parser)]
#[command(
    name = "crbd",
    about = "Compression-resistant backdoor attack toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a manifest end to end (prepare, poison, train, evaluate).
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// Resume a previous results directory instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Build and materialize the poisoned dataset described by a manifest.
    Poison {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory the poisoned dataset is written to.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: PoisonOverrides,
    },
    /// Train a model per the manifest and save its checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for the checkpoint and training history.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint: full report, or one codec when --codec given.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        codec: Option<String>,
        #[arg(long)]
        quality: Option<u32>,
        /// Persist the report JSON here as well as printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attack-success sweep over a quality grid.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sweep axis; only `jpeg-quality`-style codec grids are supported.
        #[arg(long, default_value = "jpeg-quality")]
        axis: String,
        /// Inclusive grid `start:end:step`, e.g. 10:90:10.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render persisted run reports as a summary table.
    Report {
        /// Table layout; `table1` is the 8-column attack summary.
        #[arg(long, default_value = "table1")]
        style: String,
        /// report.json files (or run directories containing one).
        inputs: Vec<PathBuf>,
        /// Merge reports even when codec-library versions differ.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args)]
struct PoisonOverrides {
    #[arg(long)]
    target_label: Option<usize>,
    #[arg(long)]
    n_normal: Option<usize>,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn warn_override(flag: &str, new: impl std::fmt::Display, old: impl std::fmt::Display) {
    eprintln!("warning: --{flag} {new} overrides manifest value {old}");
}

fn cmd_run(manifest: &Path, resume: Option<&Path>) -> Result<()> {
    let dir = match resume {
        Some(dir) => experiment::resume_run(manifest, dir)?,
        None => experiment::run_manifest(manifest)?,
    };
    println!("{}", dir.display());
    Ok(())
}

fn cmd_poison(path: &Path, out: &Path, overrides: &PoisonOverrides) -> Result<()> {
    let mut manifest = ExperimentManifest::load(path)?;
    if let Some(t) = overrides.target_label {
        warn_override("target-label", t, manifest.poison.target_label);
        manifest.poison.target_label = t;
    }
    if let Some(n) = overrides.n_normal {
        warn_override("n-normal", n, manifest.poison.n_normal);
        manifest.poison.n_normal = n;
    }
    manifest.validate()?;
    let (train_set, _) = manifest.load_datasets()?;
    let (_, h, w) = train_set.images[0].shape();
    let trig = manifest.build_trigger((h, w))?;
    let per_codec: Vec<_> = manifest
        .poison
        .per_codec
        .iter()
        .map(|cc| (cc.spec, cc.count))
        .collect();
    let plan = poison::build_plan(
        &train_set,
        &trig,
        manifest.poison.target_label,
        manifest.poison.n_normal,
        &per_codec,
        manifest.seed,
    )?;
    let ir = poison::injection_rate(&plan, train_set.len())?;
    let data = poison::materialize(&plan, &train_set)?;
    poison::save_poisoned(&data, out)?;
    println!(
        "poisoned {} instances ({} normal + {} compressed), injection rate {:.4}, written to {}",
        data.total_poison(),
        data.backdoor.len(),
        data.compressed.len(),
        ir,
        out.display()
    );
    Ok(())
}

fn cmd_train(path: &Path, out: &Path, overrides: &TrainOverrides) -> Result<()> {
    let mut manifest = ExperimentManifest::load(path)?;
    if let Some(e) = overrides.epochs {
        warn_override("epochs", e, manifest.train.epochs);
        manifest.train.epochs = e;
    }
    if let Some(b) = overrides.batch_size {
        warn_override("batch-size", b, manifest.train.batch_size);
        manifest.train.batch_size = b;
    }
    if let Some(s) = overrides.seed {
        warn_override("seed", s, manifest.seed);
        manifest.seed = s;
    }
    manifest.validate()?;
    let (train_set, _) = manifest.load_datasets()?;
    let (_, h, w) = train_set.images[0].shape();
    let trig = manifest.build_trigger((h, w))?;
    let data = experiment::prepare_poisoned(&manifest, &train_set, &trig)?;
    let model = crbd_core::model::build_model(
        manifest.train.arch,
        train_set.num_classes,
        manifest.train.model_seed,
    )?;
    let history = train::train(&model, &data, &manifest.train_config(), &manifest.fc_config())?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    model.save_checkpoint(out)?;
    history.save_csv(&out.join("history.csv"))?;
    let last = history.entries.last().expect("validated epochs >= 1");
    println!(
        "trained {} epochs, final total loss {:.4}; checkpoint in {}",
        history.entries.len(),
        last.total,
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    path: &Path,
    checkpoint: &Path,
    codec: Option<&str>,
    quality: Option<u32>,
    out: Option<&Path>,
) -> Result<()> {
    let manifest = ExperimentManifest::load(path)?;
    let model = Model::load_checkpoint(checkpoint)?;
    let (_, test_set) = manifest.load_datasets()?;
    let (_, h, w) = test_set.images[0].shape();
    let trig = manifest.build_trigger((h, w))?;
    match codec {
        Some(codec) => {
            let quality = quality.ok_or_else(|| {
                Error::Parameter("--codec requires --quality".into())
            })?;
            let spec = eval::spec_for_quality(codec, quality)?;
            let asr = eval::attack_success_rate(
                &model,
                &test_set,
                &trig,
                manifest.poison.target_label,
                spec,
            )?;
            println!(
                "ASR[{}] = {:.4} ({}/{})",
                spec.tag(),
                asr.value(),
                asr.num,
                asr.den
            );
            if let Some(out) = out {
                let mut report = eval::MetricsReport::empty(&model)?;
                report.asr_bc.insert(spec.tag(), asr);
                report.save_json(out)?;
            }
        }
        None => {
            let report = eval::evaluate(
                &model,
                &test_set,
                &trig,
                manifest.poison.target_label,
                &manifest.eval.specs,
                None,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(out) = out {
                report.save_json(out)?;
            }
        }
    }
    Ok(())
}

fn parse_grid(grid: &str) -> Result<Vec<u32>> {
    let parts: Vec<&str> = grid.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Parameter(format!(
            "grid '{grid}' must be start:end:step"
        )));
    }
    let nums: Vec<u32> = parts
        .iter()
        .map(|p| {
            p.parse::<u32>()
                .map_err(|e| Error::Parameter(format!("grid component '{p}': {e}")))
        })
        .collect::<Result<_>>()?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if step == 0 || end < start {
        return Err(Error::Parameter(format!("grid '{grid}' is empty")));
    }
    Ok((start..=end).step_by(step as usize).collect())
}

fn cmd_sweep(
    path: &Path,
    checkpoint: &Path,
    axis: &str,
    grid: &str,
    out: Option<&Path>,
) -> Result<()> {
    let codec = axis.strip_suffix("-quality").ok_or_else(|| {
        Error::Parameter(format!(
            "axis '{axis}' not supported; expected e.g. jpeg-quality"
        ))
    })?;
    let qualities = parse_grid(grid)?;
    let manifest = ExperimentManifest::load(path)?;
    let model = Model::load_checkpoint(checkpoint)?;
    let (_, test_set) = manifest.load_datasets()?;
    let (_, h, w) = test_set.images[0].shape();
    let trig = manifest.build_trigger((h, w))?;
    let sweep = eval::quality_sweep(
        &model,
        &test_set,
        &trig,
        manifest.poison.target_label,
        codec,
        &qualities,
    )?;
    for p in &sweep.points {
        let asr = p.report.asr_bc.values().next().expect("one asr per point");
        println!("{:>3}  {:.4}", p.value, asr.value());
    }
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        sweep.save_json(&out.join("sweep.json"))?;
        sweep.save_csv(&out.join("sweep.csv"))?;
        eval::plot_sweep(&sweep, &out.join("sweep.png"))?;
    }
    Ok(())
}

fn cmd_report(style: &str, inputs: &[PathBuf], force: bool) -> Result<()> {
    if style != "table1" {
        return Err(Error::Parameter(format!(
            "unknown report style '{style}' (supported: table1)"
        )));
    }
    if inputs.is_empty() {
        return Err(Error::Parameter("no report files given".into()));
    }
    let mut reports = Vec::new();
    for input in inputs {
        let path = if input.is_dir() {
            input.join("report.json")
        } else {
            input.clone()
        };
        let report: RunReport = serde_json::from_slice(
            &std::fs::read(&path).map_err(|e| Error::io(&path, e))?,
        )?;
        reports.push(report);
    }
    let refs: Vec<&RunReport> = reports.iter().collect();
    print!("{}", experiment::render_attack_table(&refs, force)?);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Run { manifest, resume } => cmd_run(manifest, resume.as_deref()),
        Cmd::Poison {
            manifest,
            out,
            overrides,
        } => cmd_poison(manifest, out, overrides),
        Cmd::Train {
            manifest,
            out,
            overrides,
        } => cmd_train(manifest, out, overrides),
        Cmd::Eval {
            manifest,
            checkpoint,
            codec,
            quality,
            out,
        } => cmd_eval(
            manifest,
            checkpoint,
            codec.as_deref(),
            *quality,
            out.as_deref(),
        ),
        Cmd::Sweep {
            manifest,
            checkpoint,
            axis,
            grid,
            out,
        } => cmd_sweep(manifest, checkpoint, axis, grid, out.as_deref()),
        Cmd::Report {
            style,
            inputs,
            force,
        } => cmd_report(style, inputs, *force),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Config(_) | Error::Parameter(_) | Error::TomlDe(_) => 2,
        _ => 3,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
