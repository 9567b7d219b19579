use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use marketsift::emd::EmdConfig;
use marketsift::market_data::write_candles;
use marketsift::pipeline::{
    decompose_column, emit_report, run_experiment, CellFilter, ExperimentConfig, PipelineError,
    RunOptions,
};
use marketsift::synth::{synth_market, SynthError, SynthSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_OUTPUT: u8 = 1;

/// Log verbosity comes from this variable (`error`, `warn`, `info`, `debug`).
const LOG_ENV: &str = "MARKETSIFT_LOG";

#[derive(Parser)]
#[command(name = "marketsift", version, about = "Hourly market decision backtests on EMD and mixture-filtered features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Restrict to matching cells, e.g. `market=btc,source=high,learner=knn`.
        #[arg(long, value_parser = parse_filter)]
        only: Option<CellFilter>,
    },
    /// Generate a synthetic candle file from a TOML parameter file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompose one numeric column of a delimited file into IMFs.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        column: String,
        #[arg(long)]
        out: PathBuf,
        /// Optional TOML file with sifting options.
        #[arg(long)]
        emd_config: Option<PathBuf>,
    },
}

fn parse_filter(s: &str) -> Result<CellFilter, String> {
    s.parse()
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn output(path: &Path, e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_OUTPUT,
            message: format!("cannot write {}: {e}", path.display()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match e {
            PipelineError::Config(_) => EXIT_CONFIG,
            PipelineError::Input(_) => EXIT_INPUT,
            PipelineError::Output { .. } => EXIT_OUTPUT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn run(config: &Path, out: &Path, jobs: Option<usize>, only: Option<CellFilter>) -> Result<(), Failure> {
    let cfg = ExperimentConfig::from_file(config)?;
    let opts = RunOptions {
        jobs,
        only: only.unwrap_or_default(),
    };
    let report = run_experiment(&cfg, &opts)?;
    let written = emit_report(&report, out)?;
    let skipped = report.rows.iter().filter(|r| r.outcome.is_err()).count();
    info!("{} rows ({skipped} skipped)", report.rows.len());
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn synth(spec_path: &Path, out: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", spec_path.display())))?;
    let spec: SynthSpec = toml::from_str(&text).map_err(|e| Failure::config(e.to_string()))?;
    let market = synth_market(&spec).map_err(|e| match e {
        SynthError::Invalid(_) => Failure::config(e.to_string()),
        SynthError::Candles(_) => Failure {
            code: EXIT_INPUT,
            message: e.to_string(),
        },
    })?;
    let file = fs::File::create(out).map_err(|e| Failure::output(out, e))?;
    write_candles(&market.series, file).map_err(|e| Failure::output(out, e))?;
    info!(
        "wrote {} candles; Bayes APC per step {}",
        market.series.len(),
        spec.bayes_apc_per_step()
    );
    Ok(())
}

fn decompose(input: &Path, column: &str, out: &Path, emd_config: Option<&Path>) -> Result<(), Failure> {
    let cfg = match emd_config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::config(format!("cannot read {}: {e}", p.display())))?;
            let cfg: EmdConfig = toml::from_str(&text).map_err(|e| Failure::config(e.to_string()))?;
            cfg.validate().map_err(|e| Failure::config(e.to_string()))?;
            cfg
        }
        None => EmdConfig::default(),
    };
    let d = decompose_column(input, column, &cfg)?;
    let file = fs::File::create(out).map_err(|e| Failure::output(out, e))?;
    d.write_csv(file).map_err(|e| Failure::output(out, e))?;
    info!("{} IMFs", d.imf_count());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            jobs,
            only,
        } => run(&config, &out, jobs, only),
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Decompose {
            input,
            column,
            out,
            emd_config,
        } => decompose(&input, &column, &out, emd_config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
