use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use streamvc::bench::{run_pipeline_bench, BenchSettings, ConversionStage, PipelineStage, StubStage};
use streamvc::io::{load_checkpoint, read_speaker, save_checkpoint, FeatureFile};
use streamvc::{selftest, ChunkSpec, ConformerConfig, ConversionModel, Mode, Result, Tensor};

const SEED_ENV: &str = "DVC2_SEED";

#[derive(Parser)]
#[command(name = "streamvc", version, about = "Streaming dual-mode Conformer voice conversion engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a checkpoint with seeded random weights.
    InitRandom {
        /// TOML model configuration; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a feature file to mel frames.
    Convert {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Whitespace-separated speaker embedding values.
        #[arg(long)]
        speaker: PathBuf,
        #[arg(long, default_value = "streaming")]
        mode: Mode,
        #[arg(long, default_value_t = 16)]
        chunk_frames: usize,
        /// Attention history cap in chunks (unlimited when omitted).
        #[arg(long)]
        left_chunks: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Measure per-stage RTF and latency of the streaming pipeline.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 16)]
        chunk_frames: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 12.5)]
        frame_shift: f64,
        /// RTF emulated by an ASR-encoder stub placed before the model.
        #[arg(long)]
        stub_asr: Option<f64>,
        /// RTF emulated by a vocoder stub placed after the model.
        #[arg(long)]
        stub_vocoder: Option<f64>,
        /// Also print machine-readable key=value lines.
        #[arg(long)]
        emit_kv: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn default_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| streamvc::Error::InvalidArgument(format!("{SEED_ENV}={v} is not a u64"))),
        Err(_) => Ok(0),
    }
}

fn init_random(config: Option<PathBuf>, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let cfg = match config {
        Some(path) => ConformerConfig::from_toml(&std::fs::read_to_string(path)?)?,
        None => ConformerConfig::default(),
    };
    let model = ConversionModel::random(cfg, default_seed(seed)?)?;
    save_checkpoint(&out, &model)?;
    println!(
        "wrote {} ({:.2} M parameters)",
        out.display(),
        model.param_count() as f64 / 1e6
    );
    Ok(())
}

fn convert(
    model: PathBuf,
    input: PathBuf,
    speaker: PathBuf,
    mode: Mode,
    chunk_frames: usize,
    left_chunks: Option<usize>,
    output: PathBuf,
) -> Result<()> {
    let model = load_checkpoint(model)?.with_mode(mode);
    let feats = FeatureFile::read(input)?;
    let spk = read_speaker(speaker)?;
    let spec = ChunkSpec::frames(chunk_frames)?.with_left_chunks(left_chunks);
    let mel = match mode {
        Mode::NonStreaming => model.convert_utterance(&feats.frames, &spk, &ChunkSpec::full())?,
        Mode::Streaming => {
            let mut stream = streamvc::open_stream_with_spec(&model, spk, spec)?;
            let t = feats.num_frames();
            let parts = (0..t)
                .step_by(chunk_frames)
                .map(|s| stream.push_chunk(&feats.frames.slice_rows(s, (s + chunk_frames).min(t))))
                .collect::<Result<Vec<_>>>()?;
            stream.close()?;
            if parts.is_empty() {
                Tensor::zeros(&[0, model.config().output_dim])
            } else {
                Tensor::concat_rows(&parts)?
            }
        }
    };
    let out = FeatureFile {
        frame_shift_ms: feats.frame_shift_ms,
        frames: mel,
    };
    out.write(&output)?;
    println!(
        "converted {} frames ({:.1} ms) -> {}",
        out.num_frames(),
        out.duration_ms(),
        output.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench(
    model: PathBuf,
    chunk_frames: usize,
    iters: usize,
    warmup: usize,
    threads: usize,
    frame_shift: f64,
    stub_asr: Option<f64>,
    stub_vocoder: Option<f64>,
    emit_kv: bool,
    seed: Option<u64>,
) -> Result<()> {
    let model = load_checkpoint(model)?.with_mode(Mode::Streaming);
    let settings = BenchSettings {
        chunk_frames,
        frame_shift_ms: frame_shift,
        iterations: iters,
        warmup,
        threads,
    };
    let mut stages: Vec<Box<dyn PipelineStage + Send + '_>> = Vec::new();
    if let Some(rtf) = stub_asr {
        stages.push(Box::new(StubStage::new("ASR encoder (stub)", rtf)));
    }
    stages.push(Box::new(ConversionStage::new(&model, chunk_frames, default_seed(seed)?)?));
    if let Some(rtf) = stub_vocoder {
        stages.push(Box::new(StubStage::new("Vocoder (stub)", rtf)));
    }
    let report = run_pipeline_bench(&mut stages, &settings)?;
    print!("{}", report.render_table());
    if emit_kv {
        print!("{}", report.to_kv_lines());
    }
    Ok(())
}

fn run_selftest() -> bool {
    let checks = selftest::run_all();
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    failed == 0
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::InitRandom { config, seed, out } => init_random(config, seed, out),
        Command::Convert {
            model,
            input,
            speaker,
            mode,
            chunk_frames,
            left_chunks,
            output,
        } => convert(model, input, speaker, mode, chunk_frames, left_chunks, output),
        Command::Bench {
            model,
            chunk_frames,
            iters,
            warmup,
            threads,
            frame_shift,
            stub_asr,
            stub_vocoder,
            emit_kv,
            seed,
        } => bench(
            model,
            chunk_frames,
            iters,
            warmup,
            threads,
            frame_shift,
            stub_asr,
            stub_vocoder,
            emit_kv,
            seed,
        ),
        Command::Selftest => {
            return if run_selftest() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
