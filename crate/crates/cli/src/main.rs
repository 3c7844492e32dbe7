//! `sharpv`: run the two-stage pruning pipeline on synthetic or file-backed
//! videos, benchmark scoring cost, or generate tensor files.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use sharpv_core::bench::{self, VideoSize};
use sharpv_core::decoder::DecoderError;
use sharpv_core::pipeline::{DEFAULT_DECODE_STEPS, DEFAULT_INSTRUCTION_LEN, DEFAULT_SYSTEM_LEN};
use sharpv_core::synth::SynthError;
use sharpv_core::tensor_io::{self, TensorFileError};
use sharpv_core::visual::VisualError;
use sharpv_core::{
    gen_synthetic_video, run_pipeline, Decoder, DecoderConfig, Error, Pattern, Prompt,
    SharpvConfig, StrategyParams, StrategyRegistry, SyntheticVideoSpec, VideoTokens,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_INVARIANT: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "sharpv",
    version,
    about = "Training-free video token and KV-cache pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Prune, prefill, evict and decode; prints a JSON report.
    Run(RunArgs),
    /// Time visual scoring over doubling sizes and measure cache bytes.
    Bench(BenchArgs),
    /// Write a synthetic video as a SHRPVID1 tensor file.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
struct VideoArgs {
    /// static, motion[:RATE], burst:I,J,... or mixed[:hold*N+motion@R*N+cut*N]
    #[arg(long)]
    pattern: Option<String>,
    /// Frames.
    #[arg(long)]
    n: Option<usize>,
    /// Tokens per frame.
    #[arg(long)]
    f: Option<usize>,
    /// Embedding dimension, also the decoder width.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    video: VideoArgs,
    /// Token selector: adaptive, manual or keep-all.
    #[arg(long)]
    mode: Option<String>,
    /// Eviction policy: degradation or retain-all.
    #[arg(long)]
    memory: Option<String>,
    /// Spatial weight in the combined score.
    #[arg(long)]
    w: Option<f64>,
    /// Score threshold for manual mode.
    #[arg(long)]
    k: Option<f64>,
    /// Degradation threshold; layers below it lose their visual cache.
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    decode_steps: Option<usize>,
    /// Decoder depth.
    #[arg(long)]
    layers: Option<usize>,
    /// Read the video from a tensor file instead of generating it.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with defaults for any of the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    video: VideoArgs,
    /// Points per doubling ladder, at least 3.
    #[arg(long, default_value_t = 3)]
    steps: usize,
    /// Timed repetitions per point.
    #[arg(long, default_value_t = bench::MIN_REPETITIONS)]
    repetitions: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    video: VideoArgs,
    #[arg(long)]
    out: PathBuf,
}

/// Config file contents. Every field is optional; flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    pattern: Option<String>,
    n: Option<usize>,
    f: Option<usize>,
    d: Option<usize>,
    seed: Option<u64>,
    mode: Option<String>,
    memory: Option<String>,
    w: Option<f64>,
    k: Option<f64>,
    m: Option<f64>,
    decode_steps: Option<usize>,
    layers: Option<usize>,
    #[serde(rename = "in")]
    input: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::Config(_)
            | Error::UnknownStrategy(_)
            | Error::Synth(_)
            | Error::Visual(VisualError::InvalidWeight(_))
            | Error::Visual(VisualError::InvalidManualThreshold { .. })
            | Error::Decoder(DecoderError::InvalidConfig(_))
            | Error::Decoder(DecoderError::PositionOverflow { .. }) => EXIT_CONFIG,
            Error::TensorFile(_) => EXIT_IO,
            _ => EXIT_INVARIANT,
        };
        Self {
            code,
            message: err.to_string(),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

struct Defaults;

impl Defaults {
    const PATTERN: &'static str = "mixed";
    const N: usize = 8;
    const F: usize = 16;
    const D: usize = 64;
    const SEED: u64 = 42;
    const MODE: &'static str = "adaptive";
    const MEMORY: &'static str = "degradation";
}

fn read_config(path: &Path) -> Outcome<FileConfig> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn video_spec(args: &VideoArgs, file: &FileConfig) -> Outcome<SyntheticVideoSpec> {
    let pattern_text = args
        .pattern
        .clone()
        .or_else(|| file.pattern.clone())
        .unwrap_or_else(|| Defaults::PATTERN.to_string());
    let pattern: Pattern = pattern_text
        .parse()
        .map_err(|e: SynthError| Failure::config(e.to_string()))?;
    let spec = SyntheticVideoSpec {
        n: args.n.or(file.n).unwrap_or(Defaults::N),
        f: args.f.or(file.f).unwrap_or(Defaults::F),
        d: args.d.or(file.d).unwrap_or(Defaults::D),
        pattern,
        seed: args.seed.or(file.seed).unwrap_or(Defaults::SEED),
    };
    spec.validate()
        .map_err(|e| Failure::config(e.to_string()))?;
    Ok(spec)
}

fn decoder_config(d: usize, layers: usize, seed: u64, positions: usize) -> DecoderConfig {
    DecoderConfig {
        layers,
        model_dim: d,
        mlp_dim: 4 * d,
        seed,
        max_positions: positions.max(DecoderConfig::default().max_positions),
        ..DecoderConfig::default()
    }
}

fn emit(json: &str, out: Option<&Path>) -> Outcome<()> {
    match out {
        Some(path) => fs::write(path, format!("{json}\n")).map_err(|e| Failure::io(path, e)),
        None => {
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "{json}").map_err(|e| Failure {
                code: EXIT_IO,
                message: format!("stdout: {e}"),
            })
        }
    }
}

fn run(args: RunArgs) -> Outcome<()> {
    let file = match &args.config {
        Some(path) => read_config(path)?,
        None => FileConfig::default(),
    };

    let seed = args.video.seed.or(file.seed).unwrap_or(Defaults::SEED);
    let input = args.input.clone().or_else(|| file.input.clone());
    let (video, source): (VideoTokens, String) = match &input {
        Some(path) => {
            let video = tensor_io::read_path(path).map_err(|e| file_failure(path, e))?;
            (video, format!("file:{}", path.display()))
        }
        None => {
            let spec = video_spec(&args.video, &file)?;
            let source = format!("pattern:{}", spec.pattern);
            (gen_synthetic_video(&spec).map_err(Error::from)?, source)
        }
    };

    let params = StrategyParams {
        k: args.k.or(file.k).unwrap_or(StrategyParams::default().k),
        m: args.m.or(file.m).unwrap_or(StrategyParams::default().m),
    };
    if !params.m.is_finite() {
        return Err(Failure::config(format!(
            "M must be finite, got {}",
            params.m
        )));
    }
    let registry = StrategyRegistry::builtin();
    let mode = args
        .mode
        .or(file.mode)
        .unwrap_or_else(|| Defaults::MODE.into());
    let memory = args
        .memory
        .or(file.memory)
        .unwrap_or_else(|| Defaults::MEMORY.into());
    let config = SharpvConfig {
        w: args
            .w
            .or(file.w)
            .unwrap_or(sharpv_core::visual::DEFAULT_SPATIAL_WEIGHT),
        selector: registry.selector(&mode, &params).map_err(Error::from)?,
        policy: registry.policy(&memory, &params).map_err(Error::from)?,
        decode_steps: args
            .decode_steps
            .or(file.decode_steps)
            .unwrap_or(DEFAULT_DECODE_STEPS),
    };

    let layers = args
        .layers
        .or(file.layers)
        .unwrap_or(DecoderConfig::default().layers);
    let positions =
        DEFAULT_SYSTEM_LEN + video.total_tokens() + DEFAULT_INSTRUCTION_LEN + config.decode_steps;
    let decoder =
        Decoder::new(decoder_config(video.dim(), layers, seed, positions)).map_err(Error::from)?;
    let prompt = Prompt::synthetic(
        video.dim(),
        DEFAULT_SYSTEM_LEN,
        DEFAULT_INSTRUCTION_LEN,
        seed,
    );

    let (_, mut report) = run_pipeline(&decoder, &video, &prompt, &config)?;
    report.config.input = Some(source);
    report.config.video_seed = input.is_none().then_some(seed);

    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure {
        code: EXIT_INVARIANT,
        message: e.to_string(),
    })?;
    emit(&json, args.out.as_deref())
}

fn file_failure(path: &Path, err: TensorFileError) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("{}: {err} (code {})", path.display(), err.code()),
    }
}

fn bench(args: BenchArgs) -> Outcome<()> {
    if args.steps < 3 {
        return Err(Failure::config(format!(
            "bench needs at least 3 ladder points, got {}",
            args.steps
        )));
    }
    let spec = video_spec(&args.video, &FileConfig::default())?;
    let base = VideoSize {
        n: spec.n,
        f: spec.f,
        d: spec.d,
    };
    let report = bench::run_bench(base, args.steps, args.repetitions, spec.seed)?;
    let per_entry = report.cache_ladder[0].bytes / report.cache_ladder[0].retained_len;
    if report
        .cache_ladder
        .iter()
        .any(|p| p.bytes != per_entry * p.retained_len)
    {
        return Err(Failure {
            code: EXIT_INVARIANT,
            message: "cache bytes are not linear in retained length".into(),
        });
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure {
        code: EXIT_INVARIANT,
        message: e.to_string(),
    })?;
    emit(&json, args.out.as_deref())
}

fn gen(args: GenArgs) -> Outcome<()> {
    let spec = video_spec(&args.video, &FileConfig::default())?;
    let video = gen_synthetic_video(&spec).map_err(Error::from)?;
    tensor_io::write_path(&args.out, &video).map_err(|e| file_failure(&args.out, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Bench(args) => bench(args),
        Command::Gen(args) => gen(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("sharpv: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
