//! Command-line workflow for semiparametric sample-selection estimation:
//! CSV ingestion, config parsing, dispatch, and table/plot-data emission.

pub mod commands;
pub mod dataset;
pub mod error;
pub mod output;
pub mod request;

use clap::{Parser, Subcommand};
use error::{AppError, AppResult};
use output::{emit, OutputFormat};
use selsieve_core::dgp::{builtin_spec, BuiltinDgp, DgpSpec};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "selsieve",
    version,
    about = "Semiparametric sample-selection estimation without exclusion restrictions"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Two-step estimation on a CSV dataset.
    Estimate {
        /// TOML file describing data path, columns, and knots.
        #[arg(long)]
        config: PathBuf,
        /// Override the data path from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report robust standard errors in the text table.
        #[arg(long)]
        robust: bool,
        /// Override the first-stage knot count (total, incl. boundaries).
        #[arg(long)]
        knots_first: Option<usize>,
        /// Override the second-stage knot count (total, incl. boundaries).
        #[arg(long)]
        knots_second: Option<usize>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
        format: OutputFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a simulated dataset from a built-in or custom design.
    Simulate {
        /// Built-in design: dgp0a, dgp0b, dgp1, dgp2.
        #[arg(long, conflicts_with = "config")]
        dgp: Option<String>,
        /// TOML file holding a custom design.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the true selection probability and latent outcome.
        #[arg(long)]
        include_latent: bool,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo study over a design; writes summary and boxplot CSVs.
    Mc {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for summary.csv and boxplot.csv.
        #[arg(long)]
        out: PathBuf,
        /// Override the base seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Likelihood-ratio test of first-stage linearity.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Significance level.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
        format: OutputFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lee trimming bounds for a binary treatment under selection.
    LeeBounds {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        outcome: String,
        #[arg(long)]
        selection: String,
        #[arg(long)]
        treatment: String,
        /// Compute bounds separately per value of this column.
        #[arg(long)]
        group_by: Option<String>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
        format: OutputFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_dgp(dgp: Option<&str>, config: Option<&PathBuf>, n: usize) -> AppResult<DgpSpec> {
    let mut spec = match (dgp, config) {
        (Some(name), None) => builtin_spec(name.parse::<BuiltinDgp>()?),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
            toml::from_str(&text)
                .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?
        }
        _ => {
            return Err(AppError::usage(
                "simulate needs exactly one of --dgp or --config",
            ))
        }
    };
    spec.n = n;
    spec.validate()?;
    Ok(spec)
}

/// Parses arguments and runs the selected command. Returns the process exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Estimate {
            config,
            data,
            robust,
            knots_first,
            knots_second,
            format,
            out,
        } => {
            let mut req = request::EstimationRequest::load(&config)?;
            if let Some(d) = data {
                req.data = d;
            }
            if let Some(k) = knots_first {
                req.knots_first = k;
            }
            if let Some(k) = knots_second {
                req.knots_second = k;
            }
            let result = commands::run_estimate(&req)?;
            emit(
                &commands::format_estimate(&result, format, robust),
                out.as_deref(),
            )
        }
        Command::Simulate {
            dgp,
            config,
            n,
            seed,
            include_latent,
            out,
        } => {
            let spec = load_dgp(dgp.as_deref(), config.as_ref(), n)?;
            let csv = commands::simulate_csv(&spec, seed, include_latent)?;
            std::fs::write(&out, csv)
                .map_err(|e| AppError::data(format!("{}: {e}", out.display())))
        }
        Command::Mc { config, out, seed } => {
            let file = request::McConfigFile::load(&config)?;
            let mut mc = file.into_config()?;
            if let Some(s) = seed {
                mc.base_seed = s;
            }
            let files = commands::run_mc_files(&mc)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| AppError::data(format!("{}: {e}", out.display())))?;
            std::fs::write(out.join("summary.csv"), &files.summary_csv)?;
            std::fs::write(out.join("boxplot.csv"), &files.boxplot_csv)?;
            print!("{}", files.table);
            Ok(())
        }
        Command::Diagnose {
            config,
            data,
            alpha,
            format,
            out,
        } => {
            let mut req = request::EstimationRequest::load(&config)?;
            if let Some(d) = data {
                req.data = d;
            }
            if let Some(a) = alpha {
                req.alpha = a;
            }
            let result = commands::run_diagnose(&req)?;
            emit(&commands::format_diagnose(&result, format), out.as_deref())
        }
        Command::LeeBounds {
            data,
            outcome,
            selection,
            treatment,
            group_by,
            format,
            out,
        } => {
            let result = commands::run_lee_bounds(
                &data,
                &outcome,
                &selection,
                &treatment,
                group_by.as_deref(),
            )?;
            emit(&commands::format_lee(&result, format), out.as_deref())
        }
    }
}
