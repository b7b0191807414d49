//! `crossview` command-line tool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossview::Error;

mod commands;

#[derive(Parser)]
#[command(name = "crossview", version, about = "Retrieval-conditioned cross-view image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by the training and inference commands.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn size_arg(s: &str) -> Result<(usize, usize), String> {
    crossview::data::parse_size(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedurally generated paired-view dataset.
    MakeToyData {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = size_arg, default_value = "64x64")]
        aerial_size: (usize, usize),
        #[arg(long, value_parser = size_arg, default_value = "32x128")]
        pano_size: (usize, usize),
        #[arg(long)]
        out: PathBuf,
    },
    /// Index an existing `<root>/<aerial-dir>`, `<root>/<ground-dir>` layout.
    BuildManifest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "aerial")]
        aerial_dir: String,
        #[arg(long, default_value = "ground")]
        ground_dir: String,
        #[arg(long, default_value = "png")]
        ext: String,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, value_parser = size_arg)]
        aerial_size: (usize, usize),
        #[arg(long, value_parser = size_arg)]
        ground_size: (usize, usize),
        /// File listing location ids to leave out, one per line.
        #[arg(long)]
        exclude: Option<PathBuf>,
        /// Panoramas are not taken at the aerial image centre.
        #[arg(long)]
        not_center_aligned: bool,
    },
    /// Pretrain the retrieval embedder on a manifest.
    TrainEmbedder {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train the evaluation twin (uses `eval_embed_seed`).
        #[arg(long)]
        twin: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the generator and discriminators; resumes from `<out>/checkpoint.ckpt`.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score generated images against a test split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Twin embedder used for R@1 and FID features.
        #[arg(long)]
        eval_embedder: PathBuf,
        #[arg(long, requires = "embedder", conflicts_with = "generated")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        embedder: Option<PathBuf>,
        /// Directory of ready-made `<location_id>.png` images to score instead.
        #[arg(long, required_unless_present = "checkpoint")]
        generated: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        style_seed: u64,
        #[arg(long, default_value_t = 0)]
        local_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate target-view images for locations of a manifest.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Location ids to render; all when omitted.
        #[arg(long = "location")]
        locations: Vec<String>,
        #[arg(long, default_value_t = 0)]
        style_seed: u64,
        #[arg(long, default_value_t = 0)]
        local_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a strip of images along the path between two locations' embeddings.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Start location; defaults to the first manifest entry.
        #[arg(long)]
        from: Option<String>,
        /// End location; defaults to the second manifest entry.
        #[arg(long)]
        to: Option<String>,
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(2..))]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        style_seed: u64,
        #[arg(long, default_value_t = 0)]
        local_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cmd: Command) -> crossview::Result<()> {
    match cmd {
        Command::MakeToyData {
            n,
            seed,
            aerial_size,
            pano_size,
            out,
        } => commands::make_toy_data(n, seed, aerial_size, pano_size, &out),
        Command::BuildManifest {
            root,
            aerial_dir,
            ground_dir,
            ext,
            split,
            aerial_size,
            ground_size,
            exclude,
            not_center_aligned,
        } => commands::build_manifest(commands::ManifestArgs {
            root,
            aerial_dir,
            ground_dir,
            ext,
            split,
            aerial_size,
            ground_size,
            exclude,
            center_aligned: !not_center_aligned,
        }),
        Command::TrainEmbedder {
            manifest,
            out,
            twin,
            cfg,
        } => commands::train_embedder(&manifest, &out, twin, &cfg),
        Command::Train {
            manifest,
            embedder,
            out,
            cfg,
        } => commands::train(&manifest, &embedder, &out, &cfg),
        Command::Eval {
            manifest,
            eval_embedder,
            checkpoint,
            embedder,
            generated,
            style_seed,
            local_seed,
            out,
            cfg,
        } => {
            let source = match (checkpoint, embedder, generated) {
                (Some(c), Some(e), _) => commands::EvalSource::Checkpoint {
                    checkpoint: c,
                    embedder: e,
                    seeds: (style_seed, local_seed),
                },
                (_, _, Some(dir)) => commands::EvalSource::Directory(dir),
                _ => unreachable!("clap enforces a source"),
            };
            commands::eval(&manifest, &eval_embedder, source, &out, &cfg)
        }
        Command::Generate {
            checkpoint,
            embedder,
            manifest,
            locations,
            style_seed,
            local_seed,
            out,
            cfg,
        } => commands::generate(
            &checkpoint,
            &embedder,
            &manifest,
            &locations,
            (style_seed, local_seed),
            &out,
            &cfg,
        ),
        Command::Interpolate {
            checkpoint,
            embedder,
            manifest,
            from,
            to,
            steps,
            style_seed,
            local_seed,
            out,
            cfg,
        } => commands::interpolate(
            &checkpoint,
            &embedder,
            &manifest,
            (from, to),
            steps as usize,
            (style_seed, local_seed),
            &out,
            &cfg,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            // Bad configuration keys or values are usage errors.
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
