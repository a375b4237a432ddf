mod commands;
mod output;
mod settings;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use settings::GuidanceFlags;

#[derive(Parser)]
#[command(
    name = "dualguide",
    version,
    about = "Train, invert, edit and evaluate toy diffusion image edits"
)]
struct Cli {
    /// TOML run config; defaults are used for anything it leaves out.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Component {
    All,
    Codec,
    Denoiser,
    Perceptual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Train model components and write checkpoints.
    Train {
        #[arg(long, value_enum, default_value_t = Component::All)]
        component: Component,
    },
    /// Invert one held-out image and reconstruct it without guidance.
    Invert {
        #[arg(long)]
        src_index: usize,
        #[command(flatten)]
        flags: GuidanceFlags,
    },
    /// Edit one held-out image under one guidance mode.
    Edit {
        #[arg(long)]
        src_index: usize,
        /// Edit prompt such as `square/ne/high`; defaults to advancing the configured edit slot.
        #[arg(long)]
        edit_prompt: Option<String>,
        /// `null_text`, `text_opt` or `text_opt_plus_perceptual`.
        #[arg(long)]
        mode: String,
        #[command(flatten)]
        flags: GuidanceFlags,
    },
    /// Summarise edit results into a per-mode table and comparison strips.
    Eval {
        /// Directory of edit results; defaults to `<output_dir>/edits`.
        #[arg(long)]
        results: Option<PathBuf>,
        /// First run the configured batch of edits under every mode.
        #[arg(long)]
        run: bool,
        #[command(flatten)]
        flags: GuidanceFlags,
    },
    /// Write the toy dataset as PGM images plus an index.
    Dataset {
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = settings::load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Train { component } => commands::train(cfg, component),
        Command::Invert { src_index, flags } => commands::invert(cfg, src_index, &flags),
        Command::Edit {
            src_index,
            edit_prompt,
            mode,
            flags,
        } => commands::edit(cfg, src_index, edit_prompt.as_deref(), &mode, &flags),
        Command::Eval { results, run, flags } => commands::eval(cfg, results, run, &flags),
        Command::Dataset { split } => commands::dataset(cfg, split),
    }
}
