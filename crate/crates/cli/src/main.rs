use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use comorbid::experiments::{AuxSet, SweepDim, SweepGrid, DEFAULT_SWEEP_WINDOW};
use comorbid::pipeline::{self, SEED_ENV};
use comorbid::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "comorbid",
    version,
    about = "Multi-task mental-health condition prediction from user text",
    after_help = format!("The default seed for configs without `seed` is read from {SEED_ENV}.")
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort: documents, labels and folds.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_docs: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
        #[arg(long)]
        out_folds: PathBuf,
    },
    /// Turn documents into a character n-gram feature matrix.
    Featurize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Build the vocabulary from the input and write it to --vocab.
        #[arg(long)]
        build_vocab: bool,
        /// Featurizer settings (top_k, max_order) when building.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Build the vocabulary from training-fold users only.
        #[arg(long)]
        folds: Option<PathBuf>,
    },
    /// Train a model and write it with its loss curve.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV; defaults to <out>.curve.csv.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Score models on the test fold and write a metrics report.
    Evaluate {
        /// Model file; repeat to compare several models on the same users.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per (main task, auxiliary subset) pair.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Main task; repeatable.
        #[arg(long = "main", required = true)]
        mains: Vec<String>,
        /// Auxiliary subset (none, all, all_conds, neuro, neuro+mood, neuro+anx, neuro+targets); repeatable.
        #[arg(long = "subset", required = true)]
        subsets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Line search over one hyperparameter.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// lr, l2 or width.
        #[arg(long)]
        dim: String,
        /// Comma-separated values; defaults to the built-in grid for --dim.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Number of final dev-loss evaluations averaged per cell.
        #[arg(long, default_value_t = DEFAULT_SWEEP_WINDOW)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Collect per-job metrics of a run directory into one summary.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a model file's header.
    Describe {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Feature matrix.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Fold assignment; without it a stratified 5-fold split is drawn.
    #[arg(long)]
    folds: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    let seed = pipeline::default_seed_from_env()?;
    match cli.command {
        Command::Synth {
            spec,
            out_docs,
            out_labels,
            out_folds,
        } => {
            pipeline::synth(&pipeline::SynthArgs {
                spec,
                out_docs,
                out_labels,
                out_folds,
                default_seed: seed,
            })?;
        }
        Command::Featurize {
            input,
            vocab,
            out,
            build_vocab,
            config,
            folds,
        } => {
            pipeline::featurize(&pipeline::FeaturizeArgs {
                input,
                vocab,
                out,
                build_vocab,
                config,
                folds,
            })?;
        }
        Command::Train {
            config,
            data,
            out,
            curve,
        } => {
            pipeline::train(&pipeline::TrainArgs {
                config,
                data: data.data,
                labels: data.labels,
                folds: data.folds,
                out,
                curve,
                default_seed: seed,
            })?;
        }
        Command::Evaluate {
            models,
            data,
            config,
            out,
        } => {
            pipeline::evaluate(&pipeline::EvaluateArgs {
                models,
                data: data.data,
                labels: data.labels,
                folds: data.folds,
                config,
                out,
            })?;
        }
        Command::Ablate {
            data,
            config,
            mains,
            subsets,
            out,
            workers,
        } => {
            let subsets = subsets
                .iter()
                .map(|s| s.parse::<AuxSet>())
                .collect::<Result<Vec<_>>>()?;
            pipeline::ablate(&pipeline::AblateArgs {
                data: data.data,
                labels: data.labels,
                folds: data.folds,
                config,
                mains,
                subsets,
                out,
                workers,
                default_seed: seed,
            })?;
        }
        Command::Sweep {
            data,
            config,
            dim,
            grid,
            window,
            out,
            workers,
        } => {
            let dim: SweepDim = dim.parse()?;
            let grid = grid.unwrap_or_else(|| SweepGrid::default().values(dim));
            let (report, _) = pipeline::sweep(&pipeline::SweepArgs {
                data: data.data,
                labels: data.labels,
                folds: data.folds,
                config,
                dim,
                grid,
                window,
                out,
                workers,
                default_seed: seed,
            })?;
            print!("{}", report.to_text());
        }
        Command::Report { runs, out } => {
            let (summary, _) = pipeline::report(&pipeline::ReportArgs { runs, out })?;
            if !summary.runs.is_empty() {
                print!("{}", summary.auc_table());
            }
            for s in &summary.sweeps {
                let loss = s
                    .cell
                    .row
                    .terminal_dev_loss
                    .map_or_else(|| "diverged".to_string(), |l| format!("{l:.4}"));
                println!("{}\t{}", s.run, loss);
            }
        }
        Command::Describe { model } => println!("{}", pipeline::describe(&model)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}
