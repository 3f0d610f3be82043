//! Built-in invariant checks behind `streamvc selftest`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{masked_softmax, quiet_softmax};
use crate::bench::{
    latency_from_rtf, run_pipeline_bench, BenchSettings, ConversionStage, PipelineStage, StubStage,
};
use crate::conformer::{param_count, ConformerConfig, ConversionModel, ModelWeights, SpeakerEmbedding};
use crate::conv::{
    conv1d_reference, dmc_forward_with_plan, dmc_train_forward, masked_conv_oracle, ConvWeights,
    Mode, Pointwise,
};
use crate::error::Result;
use crate::io::{decode_checkpoint, encode_checkpoint, FeatureFile};
use crate::masking::{sample_dct_chunk, ChunkSpec, FutureMaskPlan, MAX_DCT_CHUNK};
use crate::stream::open_stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {} ({:.2}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

fn timed(name: &'static str, budget: Duration, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    let (passed, detail) = match outcome {
        Ok((ok, detail)) if elapsed <= budget => (ok, detail),
        Ok((_, detail)) => (false, format!("{detail}; over time budget {budget:?}")),
        Err(e) => (false, format!("error: {e}")),
    };
    Check {
        name,
        passed,
        detail,
        elapsed,
    }
}

pub(crate) fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("shape and data agree")
}

fn random_speaker(rng: &mut impl Rng, dim: usize) -> Result<SpeakerEmbedding> {
    SpeakerEmbedding::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn reduced_config() -> ConformerConfig {
    ConformerConfig {
        num_encoder_blocks: 2,
        num_decoder_blocks: 2,
        model_dim: 64,
        input_dim: 64,
        speaker_dim: 64,
        ..ConformerConfig::default()
    }
}

fn quiet_identity() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f32;
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let row: Vec<f32> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let vis = vec![true; n];
        let q = quiet_softmax(&row, &vis);
        let ext: Vec<f32> = row.iter().copied().chain([0.0]).collect();
        let s = masked_softmax(&ext, &vec![true; n + 1])?;
        worst = q.iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
    }
    Ok((worst <= 1e-6, format!("max abs error {worst:e}")))
}

fn escape() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_w = 0.0f32;
    let mut worst_rel = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=64);
        let row: Vec<f32> = (0..n).map(|_| rng.random_range(-1000.0..=-50.0)).collect();
        let w = quiet_softmax(&row, &vec![true; n]);
        worst_w = w.iter().copied().fold(worst_w, f32::max);
        let values = random_tensor(&mut rng, &[n, 16], 10.0);
        let mut out = [0.0f64; 16];
        for (j, wj) in w.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(values.row(j)) {
                *o += *wj as f64 * *v as f64;
            }
        }
        let out_norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        let v_norm = values.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        worst_rel = worst_rel.max(out_norm / v_norm);
    }
    Ok((
        worst_w < 1e-20 && worst_rel < 1e-15,
        format!("max weight {worst_w:e}, max relative output norm {worst_rel:e}"),
    ))
}

fn dmc_equivalence() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f32;
    let mut exact = true;
    for case in 0..200 {
        let k = [3, 7, 15][case % 3];
        let t = rng.random_range(1..=64);
        let d = rng.random_range(1..=32);
        let w = ConvWeights::new(
            random_tensor(&mut rng, &[d, k], 1.0),
            random_tensor(&mut rng, &[d], 0.1),
            Some(Pointwise {
                pre_w: random_tensor(&mut rng, &[d, 2 * d], 0.5),
                pre_b: random_tensor(&mut rng, &[2 * d], 0.1),
                post_w: random_tensor(&mut rng, &[d, d], 0.5),
                post_b: random_tensor(&mut rng, &[d], 0.1),
            }),
        )?;
        let x = random_tensor(&mut rng, &[t, d], 1.0);
        let (y, plan) = dmc_train_forward(&x, &w, &mut rng)?;
        worst = worst.max(y.max_abs_diff(&masked_conv_oracle(&x, &w, &plan)?));
        let zero = dmc_forward_with_plan(&x, &w, &FutureMaskPlan::unmasked(k, t)?)?;
        exact &= zero == conv1d_reference(&x, &w)?;
    }
    Ok((
        worst <= 1e-6 && exact,
        format!("max abs error {worst:e}, zero plan exact: {exact}"),
    ))
}

fn stream_equivalence() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f32;
    for seed in 0..50u64 {
        let model = ConversionModel::random(reduced_config(), seed)?;
        let spk = random_speaker(&mut rng, 64)?;
        for c in [1, 4, 8, 16] {
            let t = rng.random_range(1..=200);
            let x = random_tensor(&mut rng, &[t, 64], 1.0);
            let full = model.convert_utterance(&x, &spk, &ChunkSpec::frames(c)?)?;
            let mut stream = open_stream(&model, spk.clone(), c)?;
            let mut parts = Vec::new();
            for s in (0..t).step_by(c) {
                parts.push(stream.push_chunk(&x.slice_rows(s, (s + c).min(t)))?);
            }
            worst = worst.max(Tensor::concat_rows(&parts)?.max_abs_diff(&full));
        }
    }
    Ok((worst <= 1e-4, format!("max abs error {worst:e}")))
}

fn causality() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ConformerConfig {
        model_dim: 32,
        input_dim: 32,
        speaker_dim: 32,
        num_encoder_blocks: 2,
        num_decoder_blocks: 2,
        ..ConformerConfig::default()
    };
    let mut violations = 0;
    for trial in 0..100u64 {
        let model = ConversionModel::random(cfg.clone(), trial)?;
        let spk = random_speaker(&mut rng, 32)?;
        let c = rng.random_range(1..=8);
        let chunks = rng.random_range(2..=8);
        let x = random_tensor(&mut rng, &[c * chunks, 32], 1.0);
        let j = rng.random_range(1..chunks);
        let mut y = x.clone();
        for v in &mut y.data_mut()[j * c * 32..] {
            *v += rng.random_range(-5.0..5.0);
        }
        let run = |input: &Tensor| -> Result<Vec<Tensor>> {
            let mut s = open_stream(&model, spk.clone(), c)?;
            (0..chunks)
                .map(|k| s.push_chunk(&input.slice_rows(k * c, (k + 1) * c)))
                .collect()
        };
        let (a, b) = (run(&x)?, run(&y)?);
        if a[..j] != b[..j] {
            violations += 1;
        }
    }
    Ok((violations == 0, format!("{violations} of 100 replays changed earlier chunks")))
}

fn dct_distribution() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 10_000;
    let mut full = 0usize;
    let mut counts = [0usize; MAX_DCT_CHUNK + 1];
    for _ in 0..n {
        match sample_dct_chunk(&mut rng).chunk_frames() {
            None => full += 1,
            Some(c) => counts[c] += 1,
        }
    }
    let frac = full as f64 / n as f64;
    let worst = counts[1..]
        .iter()
        .map(|&c| (c as f64 / n as f64 - 0.025).abs())
        .fold(0.0, f64::max);
    Ok((
        (0.45..=0.55).contains(&frac) && worst <= 0.01,
        format!("full fraction {frac:.4}, worst size deviation {worst:.4}"),
    ))
}

fn latency_reproduction() -> Result<(bool, String)> {
    let eq = latency_from_rtf(160.0, 0.165)?;
    let settings = BenchSettings {
        chunk_frames: 16,
        frame_shift_ms: 10.0,
        iterations: 15,
        warmup: 2,
        threads: 1,
    };
    let mut stages: Vec<Box<dyn PipelineStage + Send>> = vec![
        Box::new(StubStage::new("ASR encoder", 0.038)),
        Box::new(StubStage::new("Conversion", 0.083)),
        Box::new(StubStage::new("Vocoder", 0.044)),
    ];
    let report = run_pipeline_bench(&mut stages, &settings)?;
    let ok = (eq - 186.4).abs() < 1e-9
        && (report.all.rtf - 0.165).abs() <= 0.01
        && (report.all.latency_ms - 26.40).abs() <= 1.5;
    Ok((
        ok,
        format!(
            "latency(160, 0.165) = {eq:.4} ms; stub pipeline rtf {:.4}, model latency {:.2} ms",
            report.all.rtf, report.all.latency_ms
        ),
    ))
}

fn real_rtf() -> Result<(bool, String)> {
    let model = ConversionModel::random(ConformerConfig::default(), 7)?;
    let settings = BenchSettings {
        chunk_frames: 16,
        iterations: 20,
        warmup: 3,
        threads: 1,
        ..BenchSettings::default()
    };
    let mut stages: Vec<Box<dyn PipelineStage + Send + '_>> =
        vec![Box::new(ConversionStage::new(&model, 16, 7)?)];
    let report = run_pipeline_bench(&mut stages, &settings)?;
    let rtf = report.all.rtf;
    Ok((rtf < 0.5, format!("measured rtf {rtf:.4} on one thread")))
}

fn params() -> Result<(bool, String)> {
    let cfg = ConformerConfig::default();
    let n = param_count(&cfg);
    let enumerated: usize = ModelWeights::zeros(&cfg)
        .named_tensors()
        .iter()
        .map(|(_, t)| t.len())
        .sum();
    Ok((
        (5_600_000..=9_400_000).contains(&n) && n == enumerated,
        format!("{n} parameters ({:.2} M), enumeration {enumerated}", n as f64 / 1e6),
    ))
}

fn divergence() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = ConformerConfig {
        model_dim: 32,
        input_dim: 32,
        num_encoder_blocks: 2,
        ..ConformerConfig::default()
    };
    let x = random_tensor(&mut rng, &[24, 32], 1.0);
    let mut tied = ModelWeights::random(&cfg, 1);
    tied.tie_conv_branches();
    let tied = ConversionModel::new(cfg.clone(), tied)?;
    let zero = tied.mode_divergence(&x, &ChunkSpec::full())?;
    let mut positive = 0;
    for seed in 0..100 {
        let m = ConversionModel::random(cfg.clone(), 1000 + seed)?;
        let c = rng.random_range(1..=24);
        if m.mode_divergence(&x, &ChunkSpec::frames(c)?)? > 0.0 {
            positive += 1;
        }
    }
    Ok((
        zero == 0.0 && positive >= 99,
        format!("tied/full divergence {zero:e}; untied positive on {positive}/100 seeds"),
    ))
}

pub(crate) fn random_small_config(rng: &mut impl Rng) -> ConformerConfig {
    let heads = rng.random_range(1..=4);
    ConformerConfig {
        num_encoder_blocks: rng.random_range(1..=3),
        num_decoder_blocks: rng.random_range(1..=3),
        model_dim: heads * rng.random_range(1..=8),
        heads,
        conv_kernel: 2 * rng.random_range(0..=7) + 1,
        ffn_expansion: rng.random_range(1..=4),
        input_dim: rng.random_range(1..=24),
        output_dim: rng.random_range(1..=24),
        speaker_dim: rng.random_range(1..=16),
        use_quiet: rng.random_bool(0.5),
        mode: if rng.random_bool(0.5) {
            Mode::Streaming
        } else {
            Mode::NonStreaming
        },
    }
}

fn io_roundtrips() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for i in 0..100u64 {
        let cfg = random_small_config(&mut rng);
        let model = ConversionModel::random(cfg, i)?;
        let bytes = encode_checkpoint(&model)?;
        let back = decode_checkpoint(&bytes)?;
        if back != model || encode_checkpoint(&back)? != bytes {
            mismatches += 1;
        }
        let (t, d) = (rng.random_range(0..50), rng.random_range(1..40));
        let feats = FeatureFile::new(random_tensor(&mut rng, &[t, d], 3.0));
        let fb = feats.encode()?;
        if FeatureFile::decode(&fb)?.encode()? != fb {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatching round trips")))
}

/// Runs every check; the caller decides how to report.
pub fn run_all() -> Vec<Check> {
    let s = Duration::from_secs;
    vec![
        timed("quiet-attention identity", s(1), quiet_identity),
        timed("quiet-attention escape", s(1), escape),
        timed("dmc equivalence", s(10), dmc_equivalence),
        timed("streaming/full equivalence", s(120), stream_equivalence),
        timed("chunk causality", s(30), causality),
        timed("dct distribution", s(1), dct_distribution),
        timed("latency reproduction", s(60), latency_reproduction),
        timed("real-compute rtf", s(120), real_rtf),
        timed("parameter count", s(1), params),
        timed("mode divergence", s(30), divergence),
        timed("i/o round trips", s(60), io_roundtrips),
    ]
}
