use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gsbart::pipeline::config::{FitConfig, WORKERS_ENV};
use gsbart::pipeline::data::{load_dataset, Schema};
use gsbart::pipeline::diagnostics::diagnostics;
use gsbart::pipeline::fit::train;
use gsbart::pipeline::predict::{partial_dependence, pd_tsv, predict, variable_importance};
use gsbart::pipeline::store::PosteriorStore;
use gsbart::pipeline::synth::{generate_synthetic, SynthKind};
use gsbart::pipeline::PipelineError;

#[derive(Parser)]
#[command(
    name = "gsbart",
    version,
    about = "Graph-split Bayesian additive regression trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write the posterior store.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// TOML fit configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (overridden by the config file).
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
    },
    /// Posterior mean and 95% intervals for every row of a data file.
    Predict {
        #[arg(long)]
        model_store: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Schema for the data file; the training schema is usually reused.
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional TSV of per-draw predictions (rows are draws).
        #[arg(long)]
        draws: Option<PathBuf>,
    },
    /// Split-rule counts per feature.
    Importance {
        #[arg(long)]
        model_store: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partial dependence of the mean function on one numeric feature.
    Pd {
        #[arg(long)]
        model_store: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        feature: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// Class label for classification models (default: first class).
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic data set with its schema.
    Synth {
        #[arg(long, value_parser = parse_kind)]
        kind: SynthKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Share of rows flagged as test rows.
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trace, per-row effective sample sizes and interval coverage.
    Diag {
        #[arg(long)]
        model_store: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Output prefix: writes `<prefix>.trace.tsv`, `<prefix>.samples.tsv`
        /// and `<prefix>.summary.tsv`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    s.parse()
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), PipelineError> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Schema for scoring new rows: the train/test flag is not needed.
fn scoring_schema(path: &Path) -> Result<Schema, PipelineError> {
    let mut s = Schema::from_file(path)?;
    s.split = None;
    Ok(s)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Train {
            data,
            schema,
            config,
            out,
            workers,
        } => {
            let schema = Schema::from_file(&schema)?;
            let mut config = match config {
                Some(p) => FitConfig::from_file(&p)?,
                None => FitConfig::default(),
            };
            if config.workers.is_none() {
                config.workers = workers;
            }
            let data = load_dataset(&data, &schema, Some(config.model))?;
            let fit = train(&data, &schema, &config)?;
            fit.store.save(&out)?;
            log::info!(
                "wrote {} draws to {}",
                fit.store.draw_count(),
                out.display()
            );
        }
        Command::Predict {
            model_store,
            data,
            schema,
            out,
            draws,
        } => {
            let store = PosteriorStore::load(&model_store)?;
            let data = load_dataset(&data, &scoring_schema(&schema)?, None)?;
            let pred = predict(&store, &data)?;
            write(&out, &pred.to_tsv())?;
            if let Some(p) = draws {
                write(&p, &pred.draws_tsv())?;
            }
        }
        Command::Importance { model_store, out } => {
            let store = PosteriorStore::load(&model_store)?;
            emit(out.as_deref(), &variable_importance(&store).to_tsv())?;
        }
        Command::Pd {
            model_store,
            data,
            schema,
            feature,
            grid,
            class,
            out,
        } => {
            let store = PosteriorStore::load(&model_store)?;
            let data = load_dataset(&data, &scoring_schema(&schema)?, None)?;
            let fit = match class {
                Some(c) => store
                    .classes()
                    .iter()
                    .position(|k| *k == c)
                    .ok_or_else(|| PipelineError::Config(format!("unknown class {c:?}")))?,
                None => 0,
            };
            let points = partial_dependence(&store, &data, &feature, &grid, fit)?;
            emit(out.as_deref(), &pd_tsv(&points))?;
        }
        Command::Synth {
            kind,
            n,
            sigma,
            seed,
            test_fraction,
            out,
        } => {
            generate_synthetic(kind, n, sigma, seed, test_fraction)?.write(&out)?;
        }
        Command::Diag {
            model_store,
            data,
            schema,
            out,
        } => {
            let store = PosteriorStore::load(&model_store)?;
            let data = load_dataset(&data, &Schema::from_file(&schema)?, None)?;
            let report = diagnostics(&store, &data)?;
            let prefix = out.display().to_string();
            write(
                Path::new(&format!("{prefix}.trace.tsv")),
                &report.trace_tsv(),
            )?;
            write(
                Path::new(&format!("{prefix}.samples.tsv")),
                &report.samples_tsv(),
            )?;
            write(
                Path::new(&format!("{prefix}.summary.tsv")),
                &report.summary_tsv(),
            )?;
            print!("{}", report.summary_tsv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not errors; bad arguments are
            // validation failures.
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
