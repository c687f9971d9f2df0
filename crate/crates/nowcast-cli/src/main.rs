//! `nowcast` — command-line pipeline for region-conditioned precipitation
//! nowcasting on synthetic storm data.
//!
//! Stages: `datagen` → `train` → `distill` → `finetune` → `sweep` →
//! `predict` → `report`. Configuration comes from a TOML file (`--config`)
//! with CLI flags taking precedence; every stage is deterministic in the
//! root seed. Exit codes: 0 success, 1 usage, 2 data/format, 3 numerical
//! failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::{CliError, CliResult};
use config::FileConfig;

#[derive(Parser, Debug)]
#[command(name = "nowcast", version, about = "Region-conditioned precipitation nowcasting pipeline")]
struct Cli {
    /// TOML config file; CLI flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Deterministic single-threaded mode. Execution is always
    /// single-threaded and seeded; the flag is accepted for scripting
    /// stability.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic storm dataset.
    Datagen(DatagenCmd),
    /// Train the backbone (DiceBCE + SRIP+ + mixup).
    Train(DataCmd),
    /// Re-train the backbone against its own soft targets.
    Distill(CkptCmd),
    /// Fit FiLM adapters per (region, year) on the frozen backbone.
    Finetune(CkptCmd),
    /// Sweep decision thresholds per (region, year) on the validation split.
    Sweep(CkptCmd),
    /// Write binary rain masks at each region's best threshold.
    Predict(PredictCmd),
    /// Aggregate sweep results into a report CSV and JSON summary.
    Report(ReportCmd),
}

#[derive(Args, Debug)]
struct DatagenCmd {
    /// Number of regions (named profiles up to 7, synthetic beyond).
    #[arg(long)]
    regions: Option<usize>,
    /// Years, comma separated (e.g. 2019,2020).
    #[arg(long, value_delimiter = ',')]
    years: Option<Vec<i32>>,
    /// Events per (region, year) pair.
    #[arg(long)]
    events: Option<u32>,
    /// Grid height in pixels.
    #[arg(long)]
    height: Option<usize>,
    /// Grid width in pixels.
    #[arg(long)]
    width: Option<usize>,
    /// Output lead-time frames.
    #[arg(long)]
    t_out: Option<usize>,
}

#[derive(Args, Debug)]
struct DataCmd {
    /// Dataset directory produced by `datagen`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct CkptCmd {
    /// Dataset directory produced by `datagen`.
    #[arg(long)]
    data: PathBuf,
    /// Input checkpoint from the previous stage.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct PredictCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// sweep.json produced by `sweep`.
    #[arg(long)]
    sweep: PathBuf,
}

#[derive(Args, Debug)]
struct ReportCmd {
    /// sweep.json produced by `sweep`.
    #[arg(long)]
    sweep: PathBuf,
}

fn require_out(out: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.clone()
        .ok_or_else(|| CliError::Usage("--out <DIR> is required for this command".to_string()))
}

fn run(cli: Cli) -> CliResult {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = file.root_seed(cli.seed);

    match cli.command {
        Command::Datagen(cmd) => {
            let dims = file.grid_dims(cmd.height, cmd.width, cmd.t_out);
            commands::cmd_datagen(&commands::DatagenArgs {
                out: require_out(&cli.out)?,
                regions: cmd.regions.or(file.datagen.regions).unwrap_or(7),
                years: cmd
                    .years
                    .or_else(|| file.datagen.years.clone())
                    .unwrap_or_else(|| vec![2019, 2020]),
                events: cmd.events.or(file.datagen.events).unwrap_or(8),
                dims,
                rain_threshold: file.datagen.rain_threshold.unwrap_or(0.2),
                seed,
            })
        }
        Command::Train(cmd) => {
            let train_cfg = file.train_config(seed);
            let val_fraction = file.val_fraction();
            let model_section_cfg = move |dims: &nowcast_core::datagen::GridDims| {
                file.backbone_config(dims)
            };
            commands::cmd_train(&commands::TrainArgs {
                data: cmd.data,
                out: require_out(&cli.out)?,
                model_cfg_of: Box::new(model_section_cfg),
                train_cfg,
                val_fraction,
            })
        }
        Command::Distill(cmd) => commands::cmd_distill(&commands::StageArgs {
            data: cmd.data,
            checkpoint: cmd.checkpoint,
            out: require_out(&cli.out)?,
            train_cfg: file.train_config(seed),
            val_fraction: file.val_fraction(),
        }),
        Command::Finetune(cmd) => commands::cmd_finetune(&commands::StageArgs {
            data: cmd.data,
            checkpoint: cmd.checkpoint,
            out: require_out(&cli.out)?,
            train_cfg: file.train_config(seed),
            val_fraction: file.val_fraction(),
        }),
        Command::Sweep(cmd) => commands::cmd_sweep(&commands::StageArgs {
            data: cmd.data,
            checkpoint: cmd.checkpoint,
            out: require_out(&cli.out)?,
            train_cfg: file.train_config(seed),
            val_fraction: file.val_fraction(),
        }),
        Command::Predict(cmd) => commands::cmd_predict(&commands::PredictArgs {
            data: cmd.data,
            checkpoint: cmd.checkpoint,
            sweep: cmd.sweep,
            out: require_out(&cli.out)?,
            val_fraction: file.val_fraction(),
        }),
        Command::Report(cmd) => commands::cmd_report(&commands::ReportArgs {
            sweep: cmd.sweep,
            out: require_out(&cli.out)?,
        }),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // Help and errors both include usage text.
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
