//! `spanset`: operator front end over the grounding engine.
//!
//! Five subcommands cover the artifact pipeline: `gen` synthesizes a corpus,
//! `train` fits a model and logs curves, `eval` scores a checkpoint,
//! `render` draws one sample's predictions and attention, `curves` plots a
//! training log. Every artifact-producing run leaves a manifest describing
//! exactly what it ran with.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence.

mod cmd;
mod config;
mod manifest;
mod svg;

use clap::error::ErrorKind;
use clap::Parser;

#[derive(Parser)]
#[command(
    name = "spanset",
    version,
    about = "Set-prediction temporal grounding: synthetic corpora, training, evaluation, rendering"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Subcommand)]
enum Cmd {
    /// Generate a synthetic grounding corpus
    Gen(cmd::gen::Args),
    /// Train a model on a corpus, logging curves and checkpoints
    Train(cmd::train::Args),
    /// Evaluate a checkpoint on a corpus
    Eval(cmd::eval::Args),
    /// Render one sample's spans and attention as SVG
    Render(cmd::render::Args),
    /// Plot a training log as an SVG chart
    Curves(cmd::curves::Args),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Gen(a) => cmd::gen::run(a),
        Cmd::Train(a) => cmd::train::run(a),
        Cmd::Eval(a) => cmd::eval::run(a),
        Cmd::Render(a) => cmd::render::run(a),
        Cmd::Curves(a) => cmd::curves::run(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
