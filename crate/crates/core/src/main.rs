use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use klmat::data::{load_movielens, DataFormat};
use klmat::error::{Error, Result};
use klmat::experiment::{
    emit_plot_script, prepare_seed, run_cell, run_sweep, ExperimentConfig, SeedRun, CSV_HEADER,
    DEFAULT_BETAS,
};
use klmat::factor::TrainConfig;
use klmat::metrics::{PredictionMode, RankMode};
use klmat::rank::{approx_rank, item_popularity_ranks};

#[derive(Parser)]
#[command(
    name = "klmat",
    version,
    about = "Vanilla MF vs KL-Mat on MovieLens ratings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline for a single beta and seed and print one CSV row.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the result row (with header) here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save the trained KL-Mat model in text format.
        #[arg(long)]
        save_model: Option<PathBuf>,
        /// Dump item,count,rank,approx_rank of the vanilla phase as CSV.
        #[arg(long)]
        dump_ranks: Option<PathBuf>,
    },
    /// Sweep betas x seeds and stream rows to a CSV file.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BETAS)]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a gnuplot script for the sweep.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Write a gnuplot script for an existing sweep CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    CsvSmall,
    #[value(name = "dat-1m")]
    Dat1m,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankModeArg {
    Max,
    Min,
}

#[derive(Args)]
struct CommonArgs {
    /// MovieLens ratings file.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "csv-small")]
    format: FormatArg,
    #[arg(long, default_value_t = 10)]
    factors: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Learning rate of the KL-Mat phase; defaults to --lr.
    #[arg(long)]
    klmat_lr: Option<f64>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    klmat_epochs: usize,
    /// Fraction of ratings assigned to the training side.
    #[arg(long, default_value_t = 0.9)]
    split: f64,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Reference rank of the Matthew-effect estimator.
    #[arg(long, value_enum, default_value = "max")]
    rank_mode: RankModeArg,
    /// Score MAE against raw dot products instead of scaled cosines.
    #[arg(long)]
    raw_dot_mae: bool,
    #[arg(long, default_value_t = 0.1)]
    init_scale: f64,
    #[arg(long, default_value_t = 1e-8)]
    epsilon_guard: f64,
}

impl CommonArgs {
    fn format(&self) -> DataFormat {
        match self.format {
            FormatArg::CsvSmall => DataFormat::CsvSmall,
            FormatArg::Dat1m => DataFormat::Dat1m,
        }
    }

    fn config(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: TrainConfig {
                factors: self.factors,
                learning_rate: self.lr,
                beta: 0.0,
                epochs: self.epochs,
                seed: 1,
                epsilon_guard: self.epsilon_guard,
                init_scale: self.init_scale,
            },
            klmat_epochs: self.klmat_epochs,
            klmat_learning_rate: self.klmat_lr,
            top_k: self.top_k,
            lambda: self.lambda,
            split_ratio: self.split,
            rank_mode: match self.rank_mode {
                RankModeArg::Max => RankMode::Max,
                RankModeArg::Min => RankMode::Min,
            },
            prediction: if self.raw_dot_mae {
                PredictionMode::RawDot
            } else {
                PredictionMode::Cosine
            },
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

fn dump_ranks(run: &SeedRun, top_k: usize, path: &Path) -> Result<()> {
    let ranks = item_popularity_ranks(&run.vanilla, top_k)?;
    let mut out = create(path)?;
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    writeln!(out, "item,count,rank,approx_rank").map_err(io)?;
    let items = run.split.train.item_ids();
    for j in 0..ranks.counts.len() {
        writeln!(
            out,
            "{},{},{},{:.16e}",
            items.id_of(j).unwrap_or(j as u64),
            ranks.counts[j],
            ranks.ranks[j],
            approx_rank(&run.alpha, &run.vanilla, j)
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            common,
            beta,
            seed,
            out,
            save_model,
            dump_ranks: dump,
        } => {
            let config = common.config();
            config.validate()?;
            if !(beta.is_finite() && beta >= 0.0) {
                return Err(Error::Config(format!(
                    "beta must be non-negative, got {beta}"
                )));
            }
            let ds =
                load_movielens(&common.dataset, common.format()).map_err(|e| e.in_stage("load"))?;
            log::info!(
                "loaded {} ratings: {} users, {} items, r_max {}",
                ds.len(),
                ds.num_users(),
                ds.num_items(),
                ds.r_max()
            );
            let prepared = prepare_seed(&ds, &config, seed)?;
            if let Some(path) = dump {
                dump_ranks(&prepared, config.top_k, &path)?;
            }
            let (model, row) = run_cell(&prepared, &config, beta)?;
            if let Some(path) = save_model {
                model.save(&path)?;
            }
            let text = format!("{CSV_HEADER}\n{}\n", row.to_csv());
            match out {
                Some(path) => {
                    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?
                }
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Sweep {
            common,
            betas,
            seeds,
            out,
            plot,
        } => {
            let config = common.config();
            let rows = run_sweep(
                &common.dataset,
                common.format(),
                &config,
                &betas,
                &seeds,
                &out,
            )?;
            eprintln!("wrote {} rows to {}", rows.len(), out.display());
            if let Some(script) = plot {
                let image = emit_plot_script(&out, &script)?;
                eprintln!(
                    "plot script {} renders {}",
                    script.display(),
                    image.display()
                );
            }
            Ok(())
        }
        Command::Plot { csv, out } => {
            let image = emit_plot_script(&csv, &out)?;
            eprintln!("plot script {} renders {}", out.display(), image.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
