//! The `diss` command-line tool.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use diss_service::JobKind;

use crate::commands::{EvalArgs, GenDataArgs, SampleArgs, ServeArgs, TrainArgs};
pub use crate::error::{CliError, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};

#[derive(Parser, Debug)]
#[command(name = "diss", version, about = "Sketch-and-stroke guided diffusion")]
pub struct Cli {
    /// TOML file with one table per subcommand; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset of photo/sketch/stroke triples.
    GenData(GenDataArgs),
    /// Train (or continue training) a model.
    Train(TrainArgs),
    /// Generate an image from a drawing.
    Sample(SampleArgs),
    /// Edit an image with a drawing made on top of it.
    Edit(SampleArgs),
    /// Fill the uncolored regions of a drawing, keeping colored strokes.
    Fill(SampleArgs),
    /// Realism sweep and guidance-scale grid on a dataset example.
    Eval(EvalArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
}

fn resolve<A: Serialize + DeserializeOwned>(flags: &A, cli: &Cli, section: &str) -> Result<A, CliError> {
    let file = config::load_section(cli.config.as_deref(), section)?;
    config::merge(flags, file, section)
}

fn announce<A: Serialize>(section: &str, args: &A) -> Result<(), CliError> {
    eprintln!("# effective config\n{}", config::render(section, args)?);
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(f) => {
            let a = resolve(f, cli, "gen-data")?.with_defaults();
            announce("gen-data", &a)?;
            commands::gen_data(&a)
        }
        Command::Train(f) => {
            let a = resolve(f, cli, "train")?.with_defaults();
            announce("train", &a)?;
            commands::train(&a)
        }
        Command::Sample(f) | Command::Edit(f) | Command::Fill(f) => {
            let (section, kind) = match &cli.command {
                Command::Sample(_) => ("sample", JobKind::Generate),
                Command::Edit(_) => ("edit", JobKind::Edit),
                _ => ("fill", JobKind::Fill),
            };
            let a = resolve(f, cli, section)?.with_defaults();
            announce(section, &a)?;
            commands::sample(&a, kind)
        }
        Command::Eval(f) => {
            let a = resolve(f, cli, "eval")?.with_defaults();
            announce("eval", &a)?;
            commands::eval(&a)
        }
        Command::Serve(f) => {
            let a = resolve(f, cli, "serve")?.with_defaults()?;
            announce("serve", &a)?;
            commands::serve(&a)
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}
