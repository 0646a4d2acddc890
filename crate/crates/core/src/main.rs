use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use polqkd::scenario::{self, PRESETS};

/// Polarization-encoding BB84 link simulator.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write its artifacts.
    Run {
        /// Scenario file or bundled preset name.
        config: String,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "polqkd-out")]
        out: PathBuf,
    },
    /// Re-run a scenario once per value of one parameter.
    Sweep {
        config: String,
        /// Scenario key, dotted for nested tables (e.g. pulse.compensation).
        #[arg(long)]
        param: String,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "polqkd-sweep")]
        out: PathBuf,
    },
    /// Bundled scenarios.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    /// Print a preset's TOML.
    Show {
        name: String,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut s = scenario::resolve(&config)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let art = scenario::run(&s, &out).with_context(|| format!("running {config}"))?;
            let st = &art.summary.stats;
            emit(&format!(
                "sent {}  sifted {}  QBER {:.4}  sifted rate {:.1} bit/s  data duty {:.3}  recalibrations {}\n\
                 artifacts in {}\n",
                st.sent,
                st.sifted,
                st.qber,
                st.sifted_rate,
                st.duty_cycle_data,
                st.recalibrations,
                out.display()
            ))?;
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let s = scenario::resolve(&config)?;
            let rows = scenario::sweep(&s, &param, &values, &out)?;
            emit(&scenario::sweep_csv(&param, &rows))?;
        }
        Command::Presets { action } => match action {
            PresetAction::List => {
                let names: String = PRESETS.iter().map(|(n, _)| format!("{n}\n")).collect();
                emit(&names)?;
            }
            PresetAction::Show { name } => {
                let text = PRESETS
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| *t)
                    .with_context(|| format!("no preset named `{name}`"))?;
                emit(text)?;
            }
        },
    }
    Ok(())
}

/// Writes to stdout, treating a closed pipe (`polqkd ... | head`) as success.
fn emit(text: &str) -> io::Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => r,
    }
}
