//! `octprint`: generate phantom datasets, train the segmentation network,
//! evaluate presentation attack detection and reconstruct subsurface
//! fingerprints.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when a command
//! fails at run time.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use octprint::config::{ExperimentConfig, Scale};

#[derive(Debug, Parser)]
#[command(name = "octprint", version, about = "OCT fingerprint segmentation, PAD and reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Full,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Full => Scale::Full,
        }
    }
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment TOML; omitted keys take the scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the experiment file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "desk")]
    scale: ScaleArg,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn experiment(&self) -> octprint::Result<ExperimentConfig> {
        let scale = self.scale.into();
        let config = match &self.config {
            Some(path) => ExperimentConfig::load(path, scale)?,
            None => ExperimentConfig::for_scale(scale),
        };
        Ok(match self.seed {
            Some(seed) => config.with_seed(seed),
            None => config,
        })
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom dataset and its manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Five-fold training on the annotated partition.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest written by `generate`.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Build the reference code and score the test partition.
    Pad {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Reconstruct the three layer fingerprints of one instance.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Instance directory.
        #[arg(long)]
        instance: PathBuf,
        /// Needed unless --use-gt-masks.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output of `pad`; when given, the instance is scored first.
        #[arg(long)]
        pad: Option<PathBuf>,
        /// Use the stored annotation masks instead of network predictions.
        #[arg(long)]
        use_gt_masks: bool,
        /// Reconstruct even when the instance is flagged as an attack.
        #[arg(long)]
        force: bool,
    },
    /// Metrics from a score table.
    Metrics {
        /// CSV with `label` and `score` columns.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, value_enum, default_value = "pad")]
        kind: MetricsKind,
        /// Target FMR in percent for GMR.
        #[arg(long, default_value_t = 5.0)]
        fmr: f64,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricsKind {
    /// Labels `bonafide` / `presentation_attack`; high score means attack.
    Pad,
    /// Labels `genuine` / `impostor`; high score means match.
    Match,
}

fn run(cli: Cli) -> octprint::Result<()> {
    match cli.command {
        Command::Generate { common } => commands::generate(&common.experiment()?, &common.out),
        Command::Train { common, manifest } => commands::train(&common.experiment()?, &manifest, &common.out),
        Command::Pad {
            common,
            manifest,
            checkpoint,
        } => commands::pad(&common.experiment()?, &manifest, &checkpoint, &common.out),
        Command::Reconstruct {
            common,
            instance,
            checkpoint,
            pad,
            use_gt_masks,
            force,
        } => commands::reconstruct(
            &common.experiment()?,
            &commands::ReconstructArgs {
                instance,
                checkpoint,
                pad,
                use_gt_masks,
                force,
                out: common.out,
            },
        ),
        Command::Metrics { scores, kind, fmr, out } => match kind {
            MetricsKind::Pad => commands::pad_metrics_from_csv(&scores, &out),
            MetricsKind::Match => commands::match_metrics_from_csv(&scores, fmr, &out),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
