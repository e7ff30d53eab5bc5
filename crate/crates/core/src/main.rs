use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resocomb::run::{exit_code, load_scenario_file, resolve_out_dir, run, RunOptions};
use resocomb::scenario::Kind;
use resocomb::Error;

#[derive(Parser)]
#[command(name = "resocomb", version, about = "Nonlinear resonator simulation and comb analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file, or a manifest.json from an earlier run.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory; overrides the scenario's own.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    Simulate(Common),
    Hb(Common),
    Slowflow(Common),
    Sweep(Common),
    Spectrum(Common),
    Probe(Common),
    Coexist(Common),
    /// Check a scenario against the schema without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        verbose: bool,
    },
}

fn execute(cmd: Command) -> Result<(), Error> {
    let (kind, c) = match cmd {
        Command::Validate { scenario, verbose } => {
            let sc = load_scenario_file(&scenario)?;
            if verbose {
                eprintln!("{} scenario is valid", sc.kind.name());
            }
            return Ok(());
        }
        Command::Simulate(c) => (Kind::Simulate, c),
        Command::Hb(c) => (Kind::Hb, c),
        Command::Slowflow(c) => (Kind::Slowflow, c),
        Command::Sweep(c) => (Kind::Sweep, c),
        Command::Spectrum(c) => (Kind::Spectrum, c),
        Command::Probe(c) => (Kind::Probe, c),
        Command::Coexist(c) => (Kind::Coexist, c),
    };
    let sc = load_scenario_file(&c.scenario)?;
    if sc.kind != kind {
        return Err(Error::Validation {
            path: "kind".into(),
            message: format!("scenario is `{}` but the `{}` subcommand was used", sc.kind.name(), kind.name()),
        });
    }
    let dir = resolve_out_dir(&sc, c.out.as_deref());
    let m = run(
        &sc,
        &dir,
        RunOptions {
            threads: c.threads,
            verbose: c.verbose,
        },
    )?;
    if c.verbose {
        eprintln!("{} files in {} ({:.2} s)", m.files.len(), dir.display(), m.wall_time_s);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
