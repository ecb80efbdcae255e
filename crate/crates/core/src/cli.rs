//! Command-line front end. Exit codes: 0 success, 1 usage or configuration,
//! 2 bad input data, 3 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::exec::Strategy;
use crate::retrieval::{cosine_sim_matrix, rank_queries, text_image_scores, EmbeddingIndex};
use crate::trainer::{
    evaluate, gradcheck_suite, load_checkpoint, load_image, train, write_synthetic_dataset, Manifest, Task,
    TrainConfig, TrainData, GRADCHECK_TOLERANCE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "entclip", version, about = "Train and query a CLIP-style endoscopy image/text model")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["classification", "i2i", "t2i"])]
        task: String,
        /// Print a single JSON object.
        #[arg(long)]
        json: bool,
    },
    /// Embed every manifest image into an index file.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query an index with an image or a text prompt.
    Retrieve(RetrieveArgs),
    /// Finite-difference check of the training loss.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the seeded synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("query").required(true).args(["image", "text"])))]
pub struct RetrieveArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Checkpoint whose encoders embed the query.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let exec = if cli.sequential { Strategy::Sequential } else { Strategy::default() };
    let stdout = std::io::stdout();
    match execute(cli.command, exec, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        e if e.is_data_error() => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

fn load_data(model: &crate::trainer::Model, path: &Path, exec: Strategy) -> Result<(Manifest, TrainData)> {
    let manifest = Manifest::load(path)?;
    let data = TrainData::from_manifest(model, &manifest, exec)?;
    Ok((manifest, data))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

/// Runs one parsed command, writing results to `out`.
pub fn execute(command: Command, exec: Strategy, out: &mut impl Write) -> Result<i32> {
    match command {
        Command::Train { config, data, out: ckpt } => {
            let cfg = TrainConfig::load(&config)?;
            let manifest = Manifest::load(&data)?;
            let (_, _, log) = train(&cfg, &manifest, Some(&ckpt), exec)?;
            for e in &log.epochs {
                writeln!(
                    out,
                    "epoch {:>3}  steps {:>5}  loss {:.4}  cls {:.4}  con {:.4}  acc {:.3}",
                    e.epoch, e.steps, e.loss, e.classification, e.contrastive, e.accuracy
                )?;
            }
            writeln!(out, "wrote {}", ckpt.display())?;
        }
        Command::Eval { ckpt, data, task, json } => {
            let (model, _, _) = load_checkpoint(&ckpt)?;
            let (_, data) = load_data(&model, &data, exec)?;
            let report = evaluate(&model, &data, task.parse::<Task>()?, exec)?;
            if json {
                writeln!(out, "{}", serde_json::to_string(&report).map_err(json_err)?)?;
            } else {
                writeln!(out, "{report}")?;
            }
        }
        Command::Embed { ckpt, data, out: path } => {
            let (model, _, _) = load_checkpoint(&ckpt)?;
            let (manifest, data) = load_data(&model, &data, exec)?;
            let embeddings = model.image_embeddings(&data.images, exec)?;
            let ids = manifest.records.iter().map(|r| r.path.clone()).collect();
            let labels = data.labels.iter().map(|&l| Some(l)).collect();
            let index = EmbeddingIndex::new(ids, embeddings, labels)?;
            index.save(&path)?;
            writeln!(out, "wrote {} embeddings to {}", index.len(), path.display())?;
        }
        Command::Retrieve(args) => {
            let (model, _, _) = load_checkpoint(&args.ckpt)?;
            let index = EmbeddingIndex::load(&args.index)?;
            if index.dim() != model.joint_dim() {
                return Err(Error::Format(format!(
                    "index width {} does not match the model's {}",
                    index.dim(),
                    model.joint_dim()
                )));
            }
            let scores = match (&args.image, &args.text) {
                (Some(path), _) => {
                    let img = load_image(path, model.config.vit.image_size)?;
                    cosine_sim_matrix(&model.image_embeddings(&[img], exec)?, &index.embeddings)?
                }
                (None, Some(text)) => {
                    text_image_scores(&model.text_embeddings(std::slice::from_ref(text), exec)?, &index.embeddings)?
                }
                (None, None) => unreachable!("clap requires a query"),
            };
            let ranked = rank_queries(&scores, false)?;
            for &(c, score) in ranked[0].candidates.iter().take(args.k) {
                writeln!(out, "{}\t{score:.6}", index.ids[c])?;
            }
        }
        Command::Gradcheck { config } => {
            let cfg = TrainConfig::load(&config)?;
            let mut failed = false;
            for entry in gradcheck_suite(&cfg, exec)? {
                let ok = entry.max_rel_error < GRADCHECK_TOLERANCE;
                failed |= !ok;
                writeln!(
                    out,
                    "{:<16} {:>7} coords  max rel error {:.3e}  {}",
                    entry.name,
                    entry.coordinates,
                    entry.max_rel_error,
                    if ok { "ok" } else { "FAIL" }
                )?;
            }
            if failed {
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::Synth { out: dir, per_class, size, seed } => {
            let path = write_synthetic_dataset(&dir, per_class, size, seed)?;
            writeln!(out, "wrote {}", path.display())?;
        }
    }
    Ok(EXIT_OK)
}
