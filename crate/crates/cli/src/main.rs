use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use meerkat::experiment::{self, cmd_compare, cmd_gradip, cmd_mask, cmd_run, exit_code, OUTPUT_DIR_ENV};

/// Federated sparse zeroth-order experiments.
#[derive(Parser, Debug)]
#[command(name = "meerkat", version, about, after_help = format!("Set {OUTPUT_DIR_ENV} to override the output directory of a config."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write metrics.csv, summary.json and GradIP trajectories.
    Run { config: PathBuf },
    /// Build the configured mask and write it to a file.
    Mask {
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run every mask kind listed under `compare` and write compare.csv.
    Compare { config: PathBuf },
    /// Calibration only: per-client GradIP trajectories and classification.
    Gradip { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => cmd_run(config).map(|r| {
            let s = &r.summary;
            println!(
                "rounds={} final_loss={} up_bytes={} down_bytes={} flagged={:?}",
                s.rounds, s.final_loss, s.up_bytes, s.down_bytes, s.flagged
            );
        }),
        Command::Mask { config, out } => cmd_mask(config, out).map(|m| {
            println!("wrote {} of {} indices to {}", m.support_len(), m.dim(), out.display());
        }),
        Command::Compare { config } => cmd_compare(config).map(|rows| {
            let _ = experiment::write_compare_csv(&rows, std::io::stdout().lock());
        }),
        Command::Gradip { config } => cmd_gradip(config).map(|cal| {
            println!("clients={} flagged={:?}", cal.trajectories.len(), cal.flagged_ids());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
