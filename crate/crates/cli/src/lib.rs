//! Command-line front end: configuration, image and table I/O, overlays and
//! the JSON report.

pub mod commands;
pub mod config;
pub mod error;
pub mod imageio;
pub mod json;
pub mod overlay;
pub mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{cmd_detect_decode, cmd_evaluate, cmd_explain, cmd_label, ExplainArgs};
use crate::config::{RunConfig, CONFIG_ENV};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "trigger-xai", version, about = "Saliency explanations with trigger gating")]
pub struct Cli {
    /// Flat key = value config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// micro-cnn, vit-proxy, yolo-proxy or all; overrides the `backend` key.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain one image: overlays per method, fused overlay, report.json.
    Explain {
        image: PathBuf,
        /// Reference region mask (same size as the image).
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Class to explain; defaults to the predicted class.
        #[arg(long = "class")]
        class_index: Option<usize>,
    },
    /// Weak-label images or directories of images into labels.csv.
    Label {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score saliency maps against masks from an `image,map,mask,gold` manifest.
    Evaluate { manifest: PathBuf },
    /// Decode raw box predictions and suppress overlaps into boxes.json.
    DetectDecode { raw: PathBuf },
}

/// Config file, then `--seed`/`--backend`, then `--set` overrides.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &cli.seed {
        cfg.set("seed", s)?;
    }
    if let Some(b) = &cli.backend {
        cfg.set("backend", b)?;
    }
    for kv in &cli.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Explain {
            image,
            mask,
            class_index,
        } => cmd_explain(
            &cfg,
            &ExplainArgs {
                image: image.clone(),
                mask: mask.clone(),
                class_index: *class_index,
                out: cli.out.clone(),
            },
        )
        .map(|_| ()),
        Command::Label { inputs } => cmd_label(&cfg, inputs, &cli.out).map(|_| ()),
        Command::Evaluate { manifest } => cmd_evaluate(&cfg, manifest, &cli.out).map(|_| ()),
        Command::DetectDecode { raw } => cmd_detect_decode(&cfg, raw, &cli.out).map(|_| ()),
    })
}

/// Parses `args`, runs the command and returns the process exit code.
/// Diagnostics go to `err`.
pub fn run<I, T>(args: I, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "trigger-xai: {e}");
            e.exit_code()
        }
    }
}
