use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ordiformer::inference::CombineMode;
use ordiformer::ordinal::HeadMode;
use ordiformer::semalign::AlignMode;
use ordiformer::{Error, Result};
use ordiformer_cli::commands::{self, EvalMode, EvalOptions, Overrides};
use ordiformer_cli::config::RunConfig;
use ordiformer_cli::{exit_code, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "ordiformer", version, about = "Ordinal severity grading pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Ensemble,
}

#[derive(Clone, Copy, ValueEnum)]
enum CombineArg {
    LogitMean,
    MajorityVote,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Off,
    KlDistill,
    Contrastive,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Shared,
    Independent,
    Ce,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graded image set.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per cross-validation fold.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        align: Option<AlignArg>,
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
    },
    /// Choose the decision threshold on pooled validation logits.
    Calibrate {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory (defaults to the checkpoint directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "on")]
        tta: Switch,
    },
    /// Score a dataset and write metric reports.
    Eval {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to tau.json beside the checkpoints, else 0.5.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_enum, default_value = "ensemble")]
        mode: ModeArg,
        /// Fold used in single mode.
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, value_enum, default_value = "logit-mean")]
        combine: CombineArg,
        #[arg(long, value_enum, default_value = "on")]
        tta: Switch,
    },
    /// Attention-rollout saliency for one image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output prefix; writes <out>.pgm and <out>.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
    /// Paired t-test between two per-fold result files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "best_val_accuracy")]
        metric: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, seed, out } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            Overrides { seed, ..Overrides::default() }.apply(&mut cfg);
            println!("{}", commands::synth(&cfg, &out)?);
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            align,
            head,
        } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            Overrides {
                seed,
                align: align.map(|a| match a {
                    AlignArg::Off => AlignMode::Off,
                    AlignArg::KlDistill => AlignMode::KlDistill,
                    AlignArg::Contrastive => AlignMode::Contrastive,
                }),
                head: head.map(|h| match h {
                    HeadArg::Shared => HeadMode::Shared,
                    HeadArg::Independent => HeadMode::Independent,
                    HeadArg::Ce => HeadMode::Ce,
                }),
            }
            .apply(&mut cfg);
            for f in commands::train(&cfg, &data, &out)? {
                println!(
                    "fold {}: best val accuracy {:.4} at epoch {} ({} epochs run)",
                    f.fold, f.best_val_accuracy, f.best_epoch, f.epochs_run
                );
            }
        }
        Command::Calibrate {
            checkpoints,
            data,
            out,
            tta,
        } => {
            let out = out.unwrap_or_else(|| checkpoints.clone());
            let choice = commands::calibrate(&checkpoints, &data, &out, matches!(tta, Switch::On))?;
            println!("tau* = {:.2}, validation macro-F1 = {:.4}", choice.tau, choice.macro_f1);
        }
        Command::Eval {
            checkpoints,
            data,
            out,
            tau,
            mode,
            fold,
            combine,
            tta,
        } => {
            let opts = EvalOptions {
                mode: match mode {
                    ModeArg::Single => EvalMode::Single,
                    ModeArg::Ensemble => EvalMode::Ensemble,
                },
                fold,
                combine: match combine {
                    CombineArg::LogitMean => CombineMode::LogitMean,
                    CombineArg::MajorityVote => CombineMode::MajorityVote,
                },
                tta: matches!(tta, Switch::On),
                tau,
            };
            let r = commands::eval(&checkpoints, &data, &out, &opts)?;
            println!(
                "n={} accuracy={:.4} macro-F1={:.4} MAE={:.4} AUROC={}",
                r.n,
                r.accuracy,
                r.macro_avg.f1,
                r.mae,
                r.auroc_macro.map_or("n/a".to_string(), |a| format!("{a:.4}"))
            );
            if let Some((lo, hi)) = r.accuracy_ci {
                println!("accuracy CI: [{lo:.4}, {hi:.4}]");
            }
        }
        Command::Explain {
            checkpoint,
            image,
            out,
            tau,
        } => {
            let ex = commands::explain(&checkpoint, &image, &out, tau)?;
            println!("predicted grade {}; saliency written to {}.pgm/.csv", ex.grade, out.display());
        }
        Command::Compare { a, b, metric } => {
            let t = commands::compare(&a, &b, &metric)?;
            println!("t = {:.6}", t.t);
            println!("p = {:.6}", t.p_value);
            println!("df = {}", t.df);
            let diffs: Vec<String> = t.differences.iter().map(|d| format!("{d:.6}")).collect();
            println!("differences = [{}]", diffs.join(", "));
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ORDIFORMER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("ORDIFORMER_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG as u8);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
