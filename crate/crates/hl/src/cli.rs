//! `hl` subcommands.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 model or file
//! format, 4 context capacity.

use std::io::Write;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use highlighter_core::context::VisionMapping;
use highlighter_core::guidance::{
    vanilla_decode, Conversation, DecodeObserver, GenerationResult, GuidanceConfig, Rescale,
};
use highlighter_core::model::{Model, WeightSet};
use highlighter_core::probe::{AttentionCapture, LayerSelection};

use crate::error::{Error, Result};
use crate::formats::{MaskFile, PatchesFile};
use crate::service::{self, ServiceConfig};
use crate::snapshot::{probe_report, read_snapshot, write_snapshot};
use crate::weights::{load_config, load_model, save_weights};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_CAPACITY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "hl", version, about = "Highlighted guidance decoding on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate text, optionally with highlighted prompt spans or image patches.
    Gen(GenArgs),
    /// Write deterministic seeded weights.
    InitWeights(InitArgs),
    /// Inspect an attention snapshot.
    Probe(ProbeArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VisionArg {
    Direct,
    Qformer,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RescaleArg {
    Logsoftmax,
    Softmax,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Model config; defaults to the config embedded in the weight file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub prompt: String,
    /// Byte range `A:B` of the prompt to highlight; repeatable.
    #[arg(long = "highlight", value_parser = parse_range)]
    pub highlights: Vec<(usize, usize)>,
    /// Patch features, `{"grid": P, "features": [[...]]}`.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Patch selection, `{"bits": [0/1 x P*P]}`.
    #[arg(long, requires = "image")]
    pub region: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "direct")]
    pub vision: VisionArg,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f32,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f32,
    #[arg(long = "beta-qformer", default_value_t = 20.0)]
    pub beta_qformer: f32,
    #[arg(long, default_value_t = 1.3)]
    pub gamma: f32,
    #[arg(long = "max-tokens", default_value_t = 32)]
    pub max_tokens: usize,
    #[arg(long, value_enum, default_value = "logsoftmax")]
    pub rescale: RescaleArg,
    /// Plain greedy decoding without guidance or activation.
    #[arg(long)]
    pub vanilla: bool,
    /// Write an attention snapshot of the conditional branch.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Print the full generation result as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Print band-gap and contribution statistics.
    #[arg(long)]
    pub report: bool,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 7878)]
    pub port: u16,
    #[arg(long = "max-sessions", default_value_t = 32)]
    pub max_sessions: usize,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected A:B, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("bad start {a:?}: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("bad end {b:?}: {e}"))?;
    if a >= b {
        return Err(format!("empty range {a}:{b}"));
    }
    Ok((a, b))
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    use highlighter_core::Error as E;
    match err {
        Error::Usage(_) => EXIT_USAGE,
        Error::Format { .. } => EXIT_FORMAT,
        Error::Engine(E::Capacity { .. }) => EXIT_CAPACITY,
        Error::Engine(E::Weights(_)) => EXIT_FORMAT,
        Error::Engine(E::Bounds { .. } | E::SinkToken | E::EmptySelection | E::Param(_)) => EXIT_USAGE,
        Error::Json(_) => EXIT_FORMAT,
        _ => EXIT_FAILURE,
    }
}

/// Runs a parsed command, writing normal output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen(args) => gen(args, out),
        Command::InitWeights(args) => init_weights(args),
        Command::Probe(args) => probe(args, out),
        Command::Serve(args) => serve(args),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: path.into(), source: crate::error::FormatError::Header(e.to_string()) })
}

/// Builds the guidance config from `gen` flags.
pub fn guidance_from_args(args: &GenArgs) -> GuidanceConfig {
    GuidanceConfig {
        alpha: args.alpha,
        beta: args.beta,
        beta_qformer: args.beta_qformer,
        gamma: args.gamma,
        max_new_tokens: args.max_tokens,
        rescale: match args.rescale {
            RescaleArg::Logsoftmax => Rescale::LogSoftmax,
            RescaleArg::Softmax => Rescale::Softmax,
        },
    }
}

fn conversation(args: &GenArgs) -> Result<Conversation> {
    let mut conv = match &args.image {
        Some(path) => {
            let mapping = match args.vision {
                VisionArg::Direct => VisionMapping::Direct,
                VisionArg::Qformer => VisionMapping::QFormer,
            };
            Conversation::with_image(read_json::<PatchesFile>(path)?.into_image(mapping)?)
        }
        None => Conversation::new(),
    };
    if let Some(path) = &args.region {
        conv.set_patch_mask(Some(read_json::<MaskFile>(path)?.bits.0));
    }
    Ok(conv)
}

fn spans(args: &GenArgs) -> &[(usize, usize)] {
    if args.vanilla {
        &[]
    } else {
        &args.highlights
    }
}

/// Library path behind `hl gen`.
pub fn generate(model: &Model, args: &GenArgs, observer: &mut dyn DecodeObserver) -> Result<GenerationResult> {
    let mut conv = conversation(args)?;
    if args.vanilla {
        let (ctx, _) = conv.prepare(model, &args.prompt, &[], false)?;
        return Ok(vanilla_decode(model, &ctx, args.max_tokens, observer)?);
    }
    Ok(conv.continue_round(model, &args.prompt, spans(args), guidance_from_args(args), false, observer)?)
}

fn gen(args: GenArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&args.model, args.config.as_deref())?;
    let result = match &args.probe {
        Some(path) => {
            let mut capture = AttentionCapture::new(model.config(), LayerSelection::All);
            let result = generate(&model, &args, &mut capture)?;
            let (ctx, highlights) = conversation(&args)?.prepare(&model, &args.prompt, spans(&args), false)?;
            write_snapshot(&capture.into_snapshot(ctx.len(), &highlights.mask, true), path)?;
            result
        }
        None => generate(&model, &args, &mut ())?,
    };
    let io = |e| Error::io("<stdout>", e);
    if args.json {
        serde_json::to_writer_pretty(&mut *out, &result)?;
        writeln!(out).map_err(io)?;
    } else {
        writeln!(out, "{}", result.text).map_err(io)?;
    }
    Ok(())
}

fn init_weights(args: InitArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let ws = WeightSet::seeded(&cfg, args.seed)?;
    save_weights(&ws, &cfg, &args.out)
}

fn probe(args: ProbeArgs, out: &mut dyn Write) -> Result<()> {
    let snapshot = read_snapshot(&args.input)?;
    let report = probe_report(&snapshot)?;
    let io = |e| Error::io("<stdout>", e);
    if args.json {
        serde_json::to_writer_pretty(&mut *out, &report)?;
        writeln!(out).map_err(io)?;
    } else if args.report {
        writeln!(out, "{report}").map_err(io)?;
    } else {
        writeln!(
            out,
            "layers {:?}, {} heads, {} positions, context {}",
            snapshot.layers,
            snapshot.n_heads,
            snapshot.positions(),
            snapshot.context_len
        )
        .map_err(io)?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let model = Arc::new(load_model(&args.model, args.config.as_deref())?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| Error::io("<runtime>", e))?;
    let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, args.port));
    rt.block_on(service::serve(model, ServiceConfig { max_sessions: args.max_sessions }, addr))
        .map_err(|e| Error::io(format!("port {}", args.port), e))
}
