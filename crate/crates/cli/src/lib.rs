//! Subcommand front-end for the pathfound pipeline. Every command writes its
//! outputs and a `run.json` provenance record to `--out`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod data;
pub mod error;
pub mod eval;
pub mod run;
pub mod train;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "pathfound", version, about = "Desk-scale pathology foundation model pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config, or the `run.json` of an earlier run to replay.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled slide corpus.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Detect foreground tiles on every slide of a manifest.
    Tile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Assign slides to train, validation and test splits.
    Split {
        #[command(flatten)]
        common: Common,
        /// `slide_id,tissue_group,label,cancer_tiles,benign_tiles` CSV.
        #[arg(long)]
        slides: PathBuf,
        /// Needed when splitting by specimen.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Self-supervised training of the tile encoder.
    TrainSsl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        tiles: PathBuf,
    },
    /// Embed every tile into a binary store.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        tiles: PathBuf,
        /// Output directory of `train-ssl`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the specimen-level aggregator and write per-specimen scores.
    TrainAgg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `specimen_id,label,source` CSV.
        #[arg(long)]
        labels: PathBuf,
        /// `slide_id,split` CSV.
        #[arg(long)]
        assignments: PathBuf,
    },
    /// Linear probe on tile embeddings.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        tile_labels: PathBuf,
        #[arg(long)]
        assignments: PathBuf,
    },
    /// ROC analysis and hypothesis tests over score files.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        scores: Vec<PathBuf>,
    },
    /// PCA feature maps of an image.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<run::RunRecord> {
    match cli.command {
        Command::Synth { common } => data::synth(&common),
        Command::Tile { common, manifest } => data::tile(&common, &manifest),
        Command::Split { common, slides, manifest } => data::split(&common, &slides, manifest.as_deref()),
        Command::TrainSsl { common, manifest, tiles } => train::train_ssl(&common, &manifest, &tiles),
        Command::Embed {
            common,
            manifest,
            tiles,
            checkpoint,
        } => train::embed(&common, &manifest, &tiles, &checkpoint),
        Command::TrainAgg {
            common,
            store,
            manifest,
            labels,
            assignments,
        } => train::train_agg(&common, &store, &manifest, &labels, &assignments),
        Command::Probe {
            common,
            store,
            tile_labels,
            assignments,
        } => eval::probe(&common, &store, &tile_labels, &assignments),
        Command::Stats { common, scores } => eval::stats(&common, &scores),
        Command::Viz { common, checkpoint, image } => eval::viz(&common, &checkpoint, &image),
    }
}
