use std::collections::BTreeSet;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modal_cli::{cmd_diagnose, cmd_run, Emit, RunConfig};

#[derive(Parser)]
#[command(
    name = "modal",
    version,
    about = "Ontic-state ensembles on Schmidt frames"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a trajectory ensemble and write reports.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        trajectories: u64,
        /// Worker threads; 0 picks automatically. Results do not depend on it.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "summary")]
        emit: Vec<Emit>,
    },
    /// Print per-step diagnostics of a scenario.
    Diagnose {
        scenario: Option<PathBuf>,
        /// Print ln Delta for N degrees of freedom, separation L and micro scale ELL.
        #[arg(long, num_args = 3, value_names = ["N", "L", "ELL"], allow_negative_numbers = true)]
        delta: Option<Vec<f64>>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            scenario,
            seed,
            trajectories,
            workers,
            out,
            emit,
        } => {
            let config = RunConfig {
                scenario_path: scenario,
                master_seed: seed,
                n_trajectories: trajectories,
                workers,
                output_dir: out,
                emit: emit.into_iter().collect::<BTreeSet<_>>(),
            };
            cmd_run(&config, &mut io::stderr())
        }
        Command::Diagnose { scenario, delta } => {
            let delta = delta.map(|d| [d[0], d[1], d[2]]);
            cmd_diagnose(
                scenario.as_deref(),
                delta,
                &mut io::stdout().lock(),
                &mut io::stderr(),
            )
        }
    };
    ExitCode::from(code as u8)
}
