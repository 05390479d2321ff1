use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aei::postproc::Suppression;
use aei_cli::{cmd_ablate, cmd_eval, cmd_infer, cmd_synth, cmd_train, CliError, RunConfig, ANNOTATIONS_FILE};

/// Temporal action proposals from environment and actor features.
#[derive(Debug, Parser)]
#[command(name = "aei", version)]
struct Cli {
    /// TOML config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both `seed` and `synth.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted actions.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a data directory and save a checkpoint.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV (appended); defaults to `<out>.loss.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write proposals for every video of a data directory.
    Infer {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_suppression)]
        suppression: Option<Suppression>,
    },
    /// Score a proposal file; writes a report and `<out>.ar_curve.csv`.
    Eval {
        #[arg(long)]
        proposals: PathBuf,
        /// Annotation file; defaults to `<data-dir>/annotations.tsv`.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated AN values.
        #[arg(long, value_delimiter = ',')]
        an_list: Option<Vec<usize>>,
        /// Comma-separated tIoU thresholds for AR.
        #[arg(long, value_delimiter = ',')]
        tiou_list: Option<Vec<f64>>,
        /// `video_id<TAB>label` file labelling proposals for mAP.
        #[arg(long)]
        video_labels: Option<PathBuf>,
    },
    /// Compare spectator and actor-attention configurations.
    Ablate {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_suppression(s: &str) -> Result<Suppression, String> {
    match s {
        "nms" => Ok(Suppression::Nms),
        "soft-nms" => Ok(Suppression::SoftNms),
        other => Err(format!("expected nms or soft-nms, got {other:?}")),
    }
}

fn default_log(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".loss.csv");
    checkpoint.with_file_name(name)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    match cli.command {
        Command::Synth { out } => {
            let n = cmd_synth(&cfg, &out)?;
            println!("wrote {n} videos to {}", out.display());
        }
        Command::Train { data_dir, out, log } => {
            let log = log.unwrap_or_else(|| default_log(&out));
            cmd_train(&cfg, &data_dir, &out, &log)?;
            println!("checkpoint {} (loss log {})", out.display(), log.display());
        }
        Command::Infer {
            data_dir,
            checkpoint,
            out,
            suppression,
        } => {
            if let Some(s) = suppression {
                cfg.postproc.method = s;
            }
            let n = cmd_infer(&cfg, &checkpoint, &data_dir, &out)?;
            println!("wrote {n} proposals to {}", out.display());
        }
        Command::Eval {
            proposals,
            annotations,
            data_dir,
            out,
            an_list,
            tiou_list,
            video_labels,
        } => {
            if let Some(an) = an_list {
                cfg.eval.an_values = an;
            }
            if let Some(t) = tiou_list {
                cfg.eval.tiou_grid = t;
            }
            cfg.validate()?;
            let annotations = match (annotations, data_dir) {
                (Some(a), _) => a,
                (None, Some(d)) => d.join(ANNOTATIONS_FILE),
                (None, None) => return Err(CliError::Usage("eval needs --annotations or --data-dir".into())),
            };
            let report = cmd_eval(&cfg, &proposals, &annotations, &out, video_labels.as_deref())?;
            for (an, ar) in &report.ar {
                println!("AR@{an} = {ar:.4}");
            }
            println!("AUC = {:.2}", report.auc);
        }
        Command::Ablate { data_dir, out } => {
            for row in cmd_ablate(&cfg, &data_dir, &out)? {
                println!("{:<18} AR@{} = {:.4}", row.name, cfg.ablate.an, row.best);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
