//! Real-time-factor and latency measurement over a pipeline of stages.
//!
//! RTF is the median wall-clock time to process one chunk divided by the
//! chunk's audio duration. A stage's model latency is `chunk_ms × rtf`; the
//! end-to-end latency adds one chunk of input buffering,
//! `chunk_ms × (1 + rtf)`.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conformer::{ConversionModel, SpeakerEmbedding};
use crate::error::{Error, Result};
use crate::stream::{open_stream, StreamState};
use crate::tensor::Tensor;

/// End-to-end latency of a chunked pipeline: wait for one chunk, then run it.
pub fn latency_from_rtf(chunk_ms: f64, rtf: f64) -> Result<f64> {
    if chunk_ms.is_nan() || chunk_ms <= 0.0 || rtf.is_nan() || rtf < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "latency needs chunk_ms > 0 and rtf >= 0, got {chunk_ms} / {rtf}"
        )));
    }
    Ok(chunk_ms * (1.0 + rtf))
}

pub trait PipelineStage {
    fn name(&self) -> &str;

    fn params(&self) -> usize;

    /// Processes one chunk of `frames` frames lasting `duration` of audio.
    fn process_chunk(&mut self, frames: usize, duration: Duration) -> Result<()>;
}

/// Stand-in for an external model: spins for `rtf × chunk duration`.
#[derive(Debug, Clone)]
pub struct StubStage {
    name: String,
    rtf: f64,
    params: usize,
}

impl StubStage {
    pub fn new(name: impl Into<String>, rtf: f64) -> Self {
        Self {
            name: name.into(),
            rtf,
            params: 0,
        }
    }

    pub fn with_params(mut self, params: usize) -> Self {
        self.params = params;
        self
    }
}

impl PipelineStage for StubStage {
    fn name(&self) -> &str {
        &self.name
    }

    fn params(&self) -> usize {
        self.params
    }

    fn process_chunk(&mut self, _frames: usize, duration: Duration) -> Result<()> {
        if self.rtf.is_nan() || self.rtf < 0.0 {
            return Err(Error::InvalidArgument(format!("stub rtf {}", self.rtf)));
        }
        let target = duration.mul_f64(self.rtf);
        let start = Instant::now();
        while start.elapsed() < target {
            std::hint::spin_loop();
        }
        Ok(())
    }
}

/// The conversion model run through a live stream on random features.
pub struct ConversionStage<'m> {
    name: String,
    params: usize,
    stream: StreamState<'m>,
    chunk: Tensor,
}

impl<'m> ConversionStage<'m> {
    pub fn new(model: &'m ConversionModel, chunk_frames: usize, seed: u64) -> Result<Self> {
        let cfg = model.config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spk = SpeakerEmbedding::new(
            (0..cfg.speaker_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let n = chunk_frames * cfg.input_dim;
        let chunk = Tensor::new(
            vec![chunk_frames, cfg.input_dim],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        Ok(Self {
            name: "Conversion".into(),
            params: model.param_count(),
            stream: open_stream(model, spk, chunk_frames)?,
            chunk,
        })
    }
}

impl PipelineStage for ConversionStage<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn params(&self) -> usize {
        self.params
    }

    fn process_chunk(&mut self, frames: usize, _duration: Duration) -> Result<()> {
        let input = self.chunk.slice_rows(0, frames.min(self.chunk.rows()));
        let mel = self.stream.push_chunk(&input)?;
        std::hint::black_box(mel);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub chunk_frames: usize,
    pub frame_shift_ms: f64,
    pub iterations: usize,
    pub warmup: usize,
    pub threads: usize,
}

impl Default for BenchSettings {
    /// 16-frame (200 ms) chunks on one thread.
    fn default() -> Self {
        Self {
            chunk_frames: 16,
            frame_shift_ms: 12.5,
            iterations: 20,
            warmup: 3,
            threads: 1,
        }
    }
}

impl BenchSettings {
    pub fn chunk_ms(&self) -> f64 {
        self.chunk_frames as f64 * self.frame_shift_ms
    }

    fn validate(&self) -> Result<()> {
        if self.chunk_frames == 0 || self.iterations == 0 || self.threads == 0 {
            return Err(Error::InvalidArgument(
                "chunk frames, iterations and threads must all be positive".into(),
            ));
        }
        if self.frame_shift_ms.is_nan() || self.frame_shift_ms <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "frame shift {} ms",
                self.frame_shift_ms
            )));
        }
        Ok(())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median per-chunk RTF of one stage on the calling thread.
pub fn measure_rtf(stage: &mut dyn PipelineStage, settings: &BenchSettings) -> Result<f64> {
    settings.validate()?;
    let chunk_ms = settings.chunk_ms();
    let duration = Duration::from_secs_f64(chunk_ms / 1000.0);
    let wrap = |e: Error, name: &str| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    };
    for _ in 0..settings.warmup {
        stage
            .process_chunk(settings.chunk_frames, duration)
            .map_err(|e| wrap(e, stage.name()))?;
    }
    let mut times = Vec::with_capacity(settings.iterations);
    for _ in 0..settings.iterations {
        let start = Instant::now();
        let r = stage.process_chunk(settings.chunk_frames, duration);
        let elapsed = start.elapsed();
        r.map_err(|e| wrap(e, stage.name()))?;
        times.push(elapsed.as_secs_f64() * 1000.0 / chunk_ms);
    }
    Ok(median(times))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRow {
    pub name: String,
    pub rtf: f64,
    pub latency_ms: f64,
    pub params_millions: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<StageRow>,
    pub all: StageRow,
    pub chunk_ms: f64,
    pub threads: usize,
    pub iterations: usize,
    /// Input buffering plus inference for the whole pipeline.
    pub pipeline_latency_ms: f64,
}

impl BenchReport {
    fn from_measurements(measured: Vec<(String, f64, usize)>, settings: &BenchSettings) -> Result<Self> {
        let chunk_ms = settings.chunk_ms();
        let rows: Vec<StageRow> = measured
            .into_iter()
            .map(|(name, rtf, params)| StageRow {
                name,
                rtf,
                latency_ms: chunk_ms * rtf,
                params_millions: params as f64 / 1e6,
            })
            .collect();
        let rtf: f64 = rows.iter().map(|r| r.rtf).sum();
        let all = StageRow {
            name: "All".into(),
            rtf,
            latency_ms: chunk_ms * rtf,
            params_millions: rows.iter().map(|r| r.params_millions).sum(),
        };
        Ok(Self {
            pipeline_latency_ms: latency_from_rtf(chunk_ms, rtf)?,
            rows,
            all,
            chunk_ms,
            threads: settings.threads,
            iterations: settings.iterations,
        })
    }

    pub fn render_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>8}  {:>12}  {:>10}",
            "Stage", "RTF", "Latency (ms)", "Params (M)"
        );
        let rule = "-".repeat(width + 38);
        let _ = writeln!(s, "{rule}");
        let line = |s: &mut String, r: &StageRow| {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8.3}  {:>12.2}  {:>10.1}",
                r.name, r.rtf, r.latency_ms, r.params_millions
            );
        };
        for r in &self.rows {
            line(&mut s, r);
        }
        let _ = writeln!(s, "{rule}");
        line(&mut s, &self.all);
        let _ = writeln!(
            s,
            "chunk {:.1} ms, {} thread(s), {} iterations; pipeline latency {:.2} ms",
            self.chunk_ms, self.threads, self.iterations, self.pipeline_latency_ms
        );
        s
    }

    /// `key=value` lines for scripts.
    pub fn to_kv_lines(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "chunk_ms={}", self.chunk_ms);
        let _ = writeln!(s, "threads={}", self.threads);
        let _ = writeln!(s, "iterations={}", self.iterations);
        for r in self.rows.iter().chain(std::iter::once(&self.all)) {
            let key: String = r
                .name
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
                .collect();
            let _ = writeln!(s, "{key}.rtf={}", r.rtf);
            let _ = writeln!(s, "{key}.latency_ms={}", r.latency_ms);
            let _ = writeln!(s, "{key}.params_m={}", r.params_millions);
        }
        let _ = writeln!(s, "pipeline_latency_ms={}", self.pipeline_latency_ms);
        s
    }
}

/// Measures every stage in order on a pool of `settings.threads` workers.
pub fn run_pipeline_bench(
    stages: &mut [Box<dyn PipelineStage + Send + '_>],
    settings: &BenchSettings,
) -> Result<BenchReport> {
    settings.validate()?;
    if stages.is_empty() {
        return Err(Error::InvalidArgument("pipeline has no stages".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let measured = pool.install(|| {
        stages
            .iter_mut()
            .map(|stage| {
                let rtf = measure_rtf(stage.as_mut(), settings)?;
                Ok((stage.name().to_string(), rtf, stage.params()))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    BenchReport::from_measurements(measured, settings)
}
