use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metaloop::cli::{
    cmd_ablate, cmd_analyze, cmd_crossdomain, cmd_eval, cmd_export_dataset, cmd_train,
    AblationAxis, CliError, ExperimentConfig, RunOptions,
};
use metaloop::tasks::Split;

/// Deterministic gradient-based meta-learning experiments on synthetic
/// few-shot image domains.
#[derive(Parser)]
#[command(name = "metaloop", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config document (JSON, unknown keys rejected).
    #[arg(long)]
    config: PathBuf,
    /// Directory the command writes its artifacts into.
    #[arg(long)]
    out: PathBuf,
    /// Master seed: re-derives the init and training-episode seeds, leaving
    /// evaluation streams as configured.
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded byte-exact replay mode.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train, keeping the best-on-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint over independently seeded episode batches.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode split: train | val | test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Episodes per batch (defaults to the config's eval schedule).
        #[arg(long)]
        episodes: Option<usize>,
        /// Inner adaptation steps, comma-separated for a sweep; defaults to
        /// the configured step count.
        #[arg(long = "adapt-steps", value_delimiter = ',')]
        adapt_steps: Vec<usize>,
    },
    /// Evaluate checkpoints across domain-shift severities.
    Crossdomain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file(s); repeat the flag to compare side by side.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Shift severities in [0, 1], comma-separated. Defaults to the
        /// config's target severity, or 0,0.5,1.
        #[arg(long, value_delimiter = ',')]
        severity: Option<Vec<f64>>,
    },
    /// Train once per value of one swept axis and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// One of: head_lr=0,0.5  subsets=conv4;conv4+head
        /// head_variant=none,fix,centering
        #[arg(long)]
        axis: String,
    },
    /// Representation probes on meta-test episodes.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Layers to probe, comma-separated; defaults to every body layer.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        /// Episodes to average the probes over.
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Materialize the source domain to disk as a dataset.
    ExportDataset {
        #[command(flatten)]
        common: Common,
        /// Stored samples per class.
        #[arg(long, default_value_t = 20)]
        per_class: usize,
    },
}

fn load(common: &Common) -> metaloop::cli::Result<(ExperimentConfig, RunOptions)> {
    let mut config = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        config = config.reseeded(seed);
    }
    let mut opts = RunOptions::from_env();
    opts.deterministic = common.deterministic;
    Ok((config, opts))
}

/// Label for a checkpoint column: the run directory name when the file uses
/// the standard artifact name, otherwise the file stem; deduplicated by
/// position when labels repeat.
fn checkpoint_labels(paths: &[PathBuf]) -> Vec<(String, PathBuf)> {
    let mut out: Vec<(String, PathBuf)> = Vec::with_capacity(paths.len());
    for (i, path) in paths.iter().enumerate() {
        let base = if path.file_name().is_some_and(|f| f == "best_checkpoint.mlt") {
            path.parent().and_then(|d| d.file_name()).map(|s| s.to_string_lossy().into_owned())
        } else {
            path.file_stem().map(|s| s.to_string_lossy().into_owned())
        }
        .unwrap_or_else(|| format!("checkpoint{i}"));
        let label = if out.iter().any(|(l, _)| *l == base) { format!("{base}#{i}") } else { base };
        out.push((label, path.clone()));
    }
    out
}

fn run() -> metaloop::cli::Result<()> {
    match Cli::parse().command {
        Command::Train { common } => {
            let (config, opts) = load(&common)?;
            let artifact = cmd_train(&config, &common.out, &opts)?;
            match (artifact.best_val_before, artifact.best_val_after) {
                (Some(b), Some(a)) => println!(
                    "best step {}: val acc {b:.4} -> {a:.4}",
                    artifact.best_step
                ),
                _ => println!("no training steps; kept the initialization"),
            }
            println!("wrote {}", artifact.metrics_path.display());
        }
        Command::Eval { common, checkpoint, split, episodes, adapt_steps } => {
            let (config, opts) = load(&common)?;
            let split = Split::from_tag(&split).ok_or_else(|| {
                CliError::Config(format!("unknown split {split:?} (train | val | test)"))
            })?;
            let per_batch = episodes.unwrap_or(config.eval.test_episodes_per_batch);
            let summary =
                cmd_eval(&checkpoint, &config, split, per_batch, &adapt_steps, &common.out, &opts)?;
            for s in &summary.stats {
                println!(
                    "steps {}: acc {:.4} ± {:.4} -> {:.4} ± {:.4}",
                    s.adapt_steps, s.before_mean, s.before_std, s.after_mean, s.after_std
                );
            }
        }
        Command::Crossdomain { common, checkpoint, severity } => {
            let (config, opts) = load(&common)?;
            let severities = severity
                .or_else(|| config.target.map(|t| vec![t.severity]))
                .unwrap_or_else(|| vec![0.0, 0.5, 1.0]);
            let labeled = checkpoint_labels(&checkpoint);
            let table = cmd_crossdomain(&labeled, &config, &severities, &common.out, &opts)?;
            for r in &table.rows {
                println!(
                    "{} @ severity {}: acc {:.4} ± {:.4} -> {:.4} ± {:.4}",
                    r.checkpoint, r.severity, r.before_mean, r.before_std, r.after_mean, r.after_std
                );
            }
        }
        Command::Ablate { common, axis } => {
            let (config, opts) = load(&common)?;
            let axis = AblationAxis::parse(&axis)?;
            let table = cmd_ablate(&config, &axis, &common.out, &opts)?;
            for r in &table.rows {
                println!(
                    "{} = {}: test acc {:.4} ± {:.4} -> {:.4} ± {:.4}",
                    table.axis, r.value, r.test_before_mean, r.test_before_std,
                    r.test_after_mean, r.test_after_std
                );
            }
        }
        Command::Analyze { common, checkpoint, layers, episodes } => {
            let (config, opts) = load(&common)?;
            let report =
                cmd_analyze(&checkpoint, &config, &layers, episodes, &common.out, &opts)?;
            let gap = report
                .head_gap
                .map(|g| format!("{g:.4}"))
                .unwrap_or_else(|| "n/a (needs >= 3 classes)".into());
            println!(
                "head: {:.4} -> {:.4}; nil@{}: {:.4} -> {:.4}; head gap {gap}",
                report.with_head_before,
                report.with_head_after,
                report.layers.last().expect("at least one layer"),
                report.nil_before,
                report.nil_after,
            );
        }
        Command::ExportDataset { common, per_class } => {
            let (config, _) = load(&common)?;
            let manifest = cmd_export_dataset(&config, per_class, &common.out)?;
            println!("wrote {}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
