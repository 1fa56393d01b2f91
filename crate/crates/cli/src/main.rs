use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use orbitsim::experiment::{self, ExperimentConfig, Mode, Overrides, RunOutcome, RECIPES};
use orbitsim::Error;

/// Similarity matrices between orbits of discrete chaotic systems.
#[derive(Parser)]
#[command(name = "orbitsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Print nothing on success.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one or two systems from a config with `"mode": "simulate"`.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an alignment config (align-pontryagin, align-bellman or align-homotopy).
    Align {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Run a built-in experiment.
    Recipe {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(RECIPES))]
        recipe: String,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

#[derive(Args)]
struct OverrideArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ridge weight on ‖A‖².
    #[arg(long)]
    tau: Option<f64>,
    /// Solver tolerance on the residual norm.
    #[arg(long)]
    tol: Option<f64>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides {
            output_dir: a.out,
            tau: a.tau,
            tol: a.tol,
        }
    }
}

fn load(path: &PathBuf, overrides: &Overrides, align: bool) -> Result<ExperimentConfig, Error> {
    // An unreadable config file is a config problem, not a run failure.
    let mut config = ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::Config {
            line: None,
            message: e.to_string(),
        },
        other => other,
    })?;
    if align == (config.mode == Mode::Simulate) {
        let wanted = if align { "an align-* mode" } else { "mode simulate" };
        return Err(Error::Config {
            line: None,
            message: format!("{}: expected {wanted}, found {}", path.display(), config.mode.name()),
        });
    }
    overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}

fn configs(command: Command) -> Result<Vec<ExperimentConfig>, Error> {
    match command {
        Command::Simulate { config, out } => {
            let overrides = Overrides {
                output_dir: out,
                ..Overrides::default()
            };
            Ok(vec![load(&config, &overrides, false)?])
        }
        Command::Align { config, overrides } => Ok(vec![load(&config, &overrides.into(), true)?]),
        Command::Recipe { recipe, overrides } => experiment::recipe_runs(&recipe, &overrides.into()),
    }
}

fn report(config: &ExperimentConfig, outcome: &RunOutcome) {
    let s = &outcome.summary;
    let mut line = format!("{}: {}", config.output_dir.display(), s.mode);
    if let Some(rho) = s.final_rho {
        line += &format!(", final rho {rho:.6}");
    }
    if let Some(stats) = s.stage_rho {
        line += &format!(
            ", stage rho min {:.4} median {:.4} max {:.4}, {} below 0.9, {}/{} converged",
            stats.min, stats.median, stats.max, s.stages_below_0_9, s.converged_stages, s.stages
        );
    }
    println!("{line}");
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config() { 2 } else { 3 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let configs = match configs(cli.command) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let mut status = ExitCode::SUCCESS;
    for (config, result) in configs.iter().zip(experiment::run_many(&configs)) {
        match result {
            Ok(outcome) if !cli.quiet => report(config, &outcome),
            Ok(_) => {}
            Err(e) => status = fail(&e),
        }
    }
    status
}
