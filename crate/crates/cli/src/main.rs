use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pica_cli::{
    check_summary, count_params, export_csv, format_param_table, format_summary, read_text, resolve_campaign,
    resolve_train_config, run_train, run_verify, thread_cap, write_records, CliError, TrainConfig,
};
use pica_core::theory::campaign::CampaignKind;

#[derive(Parser)]
#[command(name = "pica", version, about = "Projected-gradient adapter training and bound verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Set one field, e.g. `hyper.eta=0.01` or `task.dims=[8,8,8]`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed; in `verify`, trial i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method and stream NDJSON metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Metrics file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a randomized bound-verification campaign.
    Verify {
        /// theorem1, theorem2, wedin, or alignment.
        #[arg(long)]
        campaign: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Per-trial records as NDJSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the trainable parameter count of every method.
    CountParams {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Convert an NDJSON metrics file to CSV.
    ExportCsv {
        input: PathBuf,
        /// CSV file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn train_config(cfg: &ConfigArgs) -> Result<TrainConfig, CliError> {
    let text = cfg.config.as_deref().map(read_text).transpose()?;
    let mut config = resolve_train_config(text.as_deref(), &cfg.overrides)?;
    if let Some(seed) = cfg.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { cfg, out } => {
            let mut config = train_config(&cfg)?;
            if out.is_some() {
                config.out = out;
            }
            let outcome = run_train(&config)?;
            eprintln!(
                "{} r={:?}: {} steps, final loss {:.6e}, distance {:.6e}, {} params",
                config.method, config.rank, outcome.last.step, outcome.last.loss, outcome.last.distance, outcome.params
            );
            if let Some(path) = outcome.checkpoint {
                eprintln!("checkpoint written to {}", path.display());
            }
        }
        Command::Verify {
            campaign,
            cfg,
            trials,
            out,
        } => {
            let kind = campaign
                .as_deref()
                .map(|c| c.parse::<CampaignKind>().map_err(|e| CliError::Config(format!("campaign: {e}"))))
                .transpose()?;
            let text = cfg.config.as_deref().map(read_text).transpose()?;
            let params = resolve_campaign(kind, text.as_deref(), &cfg.overrides)?;
            let (records, summary) = run_verify(&params, trials, cfg.seed.unwrap_or(0), thread_cap()?)?;
            if let Some(path) = &out {
                write_records(&records, &mut create(path)?, path)?;
            }
            println!("{}", format_summary(&summary));
            check_summary(&summary)?;
        }
        Command::CountParams { cfg } => {
            let rows = count_params(&train_config(&cfg)?)?;
            print!("{}", format_param_table(&rows));
        }
        Command::ExportCsv { input, out } => {
            let reader = BufReader::new(File::open(&input).map_err(|source| CliError::Io { path: input, source })?);
            match &out {
                Some(path) => export_csv(reader, create(path)?)?,
                None => export_csv(reader, io::stdout().lock())?,
            };
            io::stdout().flush().ok();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
