//! Conformer blocks and the encoder → speaker merge → decoder conversion
//! model, runnable over a whole utterance in either mode.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::attention::{mhsa_forward, mhsa_streaming_step, KvCache, MhsaWeights};
use crate::conv::{
    conv1d_reference, conv_streaming_step, dmc_forward_with_plan, dmc_train_forward, ConvCache,
    ConvWeights, DualModeConv, Mode,
};
use crate::error::{shape_err, Error, Result};
use crate::masking::{build_chunk_attention_mask, AttentionMask, ChunkSpec, FutureMaskPlan};
use crate::tensor::{layer_norm, linear, swish, Tensor, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformerConfig {
    pub num_encoder_blocks: usize,
    pub num_decoder_blocks: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ffn_expansion: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub speaker_dim: usize,
    pub use_quiet: bool,
    pub mode: Mode,
}

impl Default for ConformerConfig {
    /// Three encoder and three decoder blocks at width 256 with four heads.
    fn default() -> Self {
        Self {
            num_encoder_blocks: 3,
            num_decoder_blocks: 3,
            model_dim: 256,
            heads: 4,
            conv_kernel: 15,
            ffn_expansion: 2,
            input_dim: 256,
            output_dim: 80,
            speaker_dim: 256,
            use_quiet: true,
            mode: Mode::Streaming,
        }
    }
}

impl ConformerConfig {
    pub fn validate(&self) -> Result<()> {
        let problems = [
            (self.model_dim == 0, "model_dim must be positive"),
            (self.heads == 0, "heads must be positive"),
            (
                self.heads != 0 && !self.model_dim.is_multiple_of(self.heads),
                "model_dim must be divisible by heads",
            ),
            (self.num_encoder_blocks == 0, "need at least one encoder block"),
            (self.num_decoder_blocks == 0, "need at least one decoder block"),
            (
                self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2),
                "conv_kernel must be odd",
            ),
            (self.ffn_expansion == 0, "ffn_expansion must be positive"),
            (self.input_dim == 0, "input_dim must be positive"),
            (self.output_dim == 0, "output_dim must be positive"),
            (self.speaker_dim == 0, "speaker_dim must be positive"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Scalar parameter count implied by a configuration.
pub fn param_count(cfg: &ConformerConfig) -> usize {
    let d = cfg.model_dim;
    let hidden = cfg.ffn_expansion * d;
    let norm = 2 * d;
    let ffn = norm + d * hidden + hidden + hidden * d + d;
    let mhsa = norm + 4 * (d * d + d);
    let conv_branch = d * 2 * d + 2 * d + d * cfg.conv_kernel + d + d * d + d;
    let conv = norm + 2 * conv_branch;
    let block = 2 * ffn + mhsa + conv + norm;
    let blocks = (cfg.num_encoder_blocks + cfg.num_decoder_blocks) * block;
    let input = cfg.input_dim * d + d;
    let merge = (d + cfg.speaker_dim) * d + d;
    let output = d * cfg.output_dim + cfg.output_dim;
    input + blocks + merge + output
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FeedForward {
    fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            norm: LayerNorm::identity(d),
            w1: Tensor::zeros(&[d, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = linear(&self.norm.apply(x)?, &self.w1, &self.b1)?;
        linear(&swish(&h), &self.w2, &self.b2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ffn_in: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MhsaWeights,
    pub conv_norm: LayerNorm,
    pub conv: DualModeConv,
    pub ffn_out: FeedForward,
    pub final_norm: LayerNorm,
}

impl BlockWeights {
    /// Zero projections and identity norms: every residual branch adds 0.
    pub fn zeros(cfg: &ConformerConfig) -> Self {
        let d = cfg.model_dim;
        let conv = ConvWeights::zeros(d, cfg.conv_kernel).expect("validated kernel");
        Self {
            ffn_in: FeedForward::zeros(d, cfg.ffn_expansion * d),
            attn_norm: LayerNorm::identity(d),
            attn: MhsaWeights::zeros(d, cfg.heads),
            conv_norm: LayerNorm::identity(d),
            conv: DualModeConv::new(conv.clone(), conv).expect("identical branches"),
            ffn_out: FeedForward::zeros(d, cfg.ffn_expansion * d),
            final_norm: LayerNorm::identity(d),
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        let mut push = |name: &str, t: &'a Tensor| out.push((format!("{prefix}.{name}"), t));
        for (tag, f) in [("ffn_in", &self.ffn_in), ("ffn_out", &self.ffn_out)] {
            push(&format!("{tag}.norm.gamma"), &f.norm.gamma);
            push(&format!("{tag}.norm.beta"), &f.norm.beta);
            push(&format!("{tag}.w1"), &f.w1);
            push(&format!("{tag}.b1"), &f.b1);
            push(&format!("{tag}.w2"), &f.w2);
            push(&format!("{tag}.b2"), &f.b2);
        }
        push("attn_norm.gamma", &self.attn_norm.gamma);
        push("attn_norm.beta", &self.attn_norm.beta);
        let a = &self.attn;
        for (n, t) in [
            ("wq", &a.wq),
            ("bq", &a.bq),
            ("wk", &a.wk),
            ("bk", &a.bk),
            ("wv", &a.wv),
            ("bv", &a.bv),
            ("wo", &a.wo),
            ("bo", &a.bo),
        ] {
            push(&format!("attn.{n}"), t);
        }
        push("conv_norm.gamma", &self.conv_norm.gamma);
        push("conv_norm.beta", &self.conv_norm.beta);
        for (tag, c) in [
            ("conv.streaming", &self.conv.streaming),
            ("conv.nonstreaming", &self.conv.nonstreaming),
        ] {
            push(&format!("{tag}.depthwise"), &c.depthwise);
            push(&format!("{tag}.depthwise_bias"), &c.depthwise_bias);
            if let Some(p) = &c.pointwise {
                push(&format!("{tag}.pre_w"), &p.pre_w);
                push(&format!("{tag}.pre_b"), &p.pre_b);
                push(&format!("{tag}.post_w"), &p.post_w);
                push(&format!("{tag}.post_b"), &p.post_b);
            }
        }
        push("final_norm.gamma", &self.final_norm.gamma);
        push("final_norm.beta", &self.final_norm.beta);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for f in [&mut self.ffn_in, &mut self.ffn_out] {
            out.extend([
                &mut f.norm.gamma,
                &mut f.norm.beta,
                &mut f.w1,
                &mut f.b1,
                &mut f.w2,
                &mut f.b2,
            ]);
        }
        out.extend([&mut self.attn_norm.gamma, &mut self.attn_norm.beta]);
        let a = &mut self.attn;
        out.extend([
            &mut a.wq, &mut a.bq, &mut a.wk, &mut a.bk, &mut a.wv, &mut a.bv, &mut a.wo, &mut a.bo,
        ]);
        out.extend([&mut self.conv_norm.gamma, &mut self.conv_norm.beta]);
        for c in [&mut self.conv.streaming, &mut self.conv.nonstreaming] {
            out.extend([&mut c.depthwise, &mut c.depthwise_bias]);
            if let Some(p) = &mut c.pointwise {
                out.extend([&mut p.pre_w, &mut p.pre_b, &mut p.post_w, &mut p.post_b]);
            }
        }
        out.extend([&mut self.final_norm.gamma, &mut self.final_norm.beta]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub input_w: Tensor,
    pub input_b: Tensor,
    pub encoder: Vec<BlockWeights>,
    pub merge_w: Tensor,
    pub merge_b: Tensor,
    pub decoder: Vec<BlockWeights>,
    pub output_w: Tensor,
    pub output_b: Tensor,
}

impl ModelWeights {
    pub fn zeros(cfg: &ConformerConfig) -> Self {
        let d = cfg.model_dim;
        Self {
            input_w: Tensor::zeros(&[cfg.input_dim, d]),
            input_b: Tensor::zeros(&[d]),
            encoder: (0..cfg.num_encoder_blocks).map(|_| BlockWeights::zeros(cfg)).collect(),
            merge_w: Tensor::zeros(&[d + cfg.speaker_dim, d]),
            merge_b: Tensor::zeros(&[d]),
            decoder: (0..cfg.num_decoder_blocks).map(|_| BlockWeights::zeros(cfg)).collect(),
            output_w: Tensor::zeros(&[d, cfg.output_dim]),
            output_b: Tensor::zeros(&[cfg.output_dim]),
        }
    }

    /// Seeded random initialization: projections ~ N(0, 1/fan_in), biases
    /// small uniform, layer norms identity.
    pub fn random(cfg: &ConformerConfig, seed: u64) -> Self {
        let mut w = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = w.named_tensors().into_iter().map(|(n, _)| n).collect();
        let bias = Uniform::new(-0.05f32, 0.05).expect("valid range");
        for (name, t) in names.iter().zip(w.tensors_mut()) {
            if name.ends_with(".gamma") || name.ends_with(".beta") {
                continue;
            }
            match t.shape().to_vec().as_slice() {
                [fan_in, cols] => {
                    let fan_in = if name.ends_with("depthwise") { *cols } else { *fan_in };
                    let normal = Normal::new(0.0f32, 1.0 / (fan_in as f32).sqrt())
                        .expect("positive std");
                    for v in t.data_mut() {
                        *v = normal.sample(&mut rng);
                    }
                }
                _ => {
                    for v in t.data_mut() {
                        *v = bias.sample(&mut rng);
                    }
                }
            }
        }
        w
    }

    /// Every weight tensor with a stable dotted name, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input.w".to_string(), &self.input_w),
            ("input.b".to_string(), &self.input_b),
        ];
        for (i, b) in self.encoder.iter().enumerate() {
            b.tensors(&format!("encoder.{i}"), &mut out);
        }
        out.push(("merge.w".into(), &self.merge_w));
        out.push(("merge.b".into(), &self.merge_b));
        for (i, b) in self.decoder.iter().enumerate() {
            b.tensors(&format!("decoder.{i}"), &mut out);
        }
        out.push(("output.w".into(), &self.output_w));
        out.push(("output.b".into(), &self.output_b));
        out
    }

    /// Mutable tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input_w, &mut self.input_b];
        for b in &mut self.encoder {
            b.tensors_mut(&mut out);
        }
        out.push(&mut self.merge_w);
        out.push(&mut self.merge_b);
        for b in &mut self.decoder {
            b.tensors_mut(&mut out);
        }
        out.push(&mut self.output_w);
        out.push(&mut self.output_b);
        out
    }

    /// Makes both convolution branches of every block identical (the
    /// non-streaming branch is copied over the streaming one).
    pub fn tie_conv_branches(&mut self) {
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            b.conv.streaming = b.conv.nonstreaming.clone();
        }
    }

    fn check_against(&self, cfg: &ConformerConfig) -> Result<()> {
        let expected = ModelWeights::zeros(cfg);
        let ours = self.named_tensors();
        let theirs = expected.named_tensors();
        if ours.len() != theirs.len() {
            return Err(shape_err(format!(
                "{} weight tensors, config implies {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(shape_err(format!(
                    "{name} has shape {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Unit-norm target speaker vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(Vec<f32>);

impl SpeakerEmbedding {
    /// L2-normalizes `v`.
    pub fn new(v: Vec<f32>) -> Result<Self> {
        let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::InvalidArgument(
                "speaker embedding must be finite and non-zero".into(),
            ));
        }
        Ok(Self(v.iter().map(|x| (*x as f64 / norm) as f32).collect()))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// How the convolution module treats future taps in a full-sequence pass.
pub enum ConvRoute<'a> {
    /// Plain centered convolution.
    Reference,
    /// Inference: mask exactly the taps a chunked stream cannot see yet.
    Planned(&'a FutureMaskPlan),
    /// Training: draw a fresh mask length per output frame.
    Sampled(&'a mut dyn RngCore),
}

/// Whether a forward pass is inference or a training-time draw.
pub enum Pass<'a> {
    Inference,
    Training(&'a mut dyn RngCore),
}

pub fn conformer_block_forward(
    x: &Tensor,
    block: &BlockWeights,
    mask: &AttentionMask,
    mode: Mode,
    route: ConvRoute<'_>,
    use_quiet: bool,
) -> Result<Tensor> {
    let mut h = x.clone();
    h.add_scaled(&block.ffn_in.forward(&h)?, 0.5)?;
    let a = mhsa_forward(&block.attn_norm.apply(&h)?, &block.attn, mask, use_quiet)?;
    h.add_scaled(&a, 1.0)?;
    let normed = block.conv_norm.apply(&h)?;
    let conv = block.conv.branch(mode);
    let c = match route {
        ConvRoute::Reference => conv1d_reference(&normed, conv)?,
        ConvRoute::Planned(plan) => dmc_forward_with_plan(&normed, conv, plan)?,
        ConvRoute::Sampled(rng) => dmc_train_forward(&normed, conv, rng)?.0,
    };
    h.add_scaled(&c, 1.0)?;
    h.add_scaled(&block.ffn_out.forward(&h)?, 0.5)?;
    block.final_norm.apply(&h)
}

/// Per-block streaming state.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache {
    pub kv: KvCache,
    pub conv: ConvCache,
}

impl BlockCache {
    pub fn new(cfg: &ConformerConfig, history_frames: Option<usize>) -> Self {
        Self {
            kv: KvCache::new(cfg.model_dim, history_frames),
            conv: ConvCache::new(cfg.model_dim, cfg.conv_kernel),
        }
    }
}

/// One chunk through one block in streaming mode.
pub fn conformer_block_step(
    x_chunk: &Tensor,
    block: &BlockWeights,
    cache: &mut BlockCache,
    use_quiet: bool,
) -> Result<Tensor> {
    let mut h = x_chunk.clone();
    h.add_scaled(&block.ffn_in.forward(&h)?, 0.5)?;
    let a = mhsa_streaming_step(&mut cache.kv, &block.attn_norm.apply(&h)?, &block.attn, use_quiet)?;
    h.add_scaled(&a, 1.0)?;
    let c = conv_streaming_step(
        &mut cache.conv,
        &block.conv_norm.apply(&h)?,
        block.conv.branch(Mode::Streaming),
    )?;
    h.add_scaled(&c, 1.0)?;
    h.add_scaled(&block.ffn_out.forward(&h)?, 0.5)?;
    block.final_norm.apply(&h)
}

/// Configuration plus immutable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversionModel {
    config: ConformerConfig,
    weights: ModelWeights,
}

impl ConversionModel {
    pub fn new(config: ConformerConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.check_against(&config)?;
        Ok(Self { config, weights })
    }

    pub fn random(config: ConformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = ModelWeights::random(&config, seed);
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ConformerConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn into_parts(self) -> (ConformerConfig, ModelWeights) {
        (self.config, self.weights)
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// The same weights run in the other mode.
    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut m = self.clone();
        m.config.mode = mode;
        m
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.config)
    }

    fn run_blocks(
        &self,
        x: Tensor,
        blocks: &[BlockWeights],
        spec: &ChunkSpec,
        pass: &mut Pass<'_>,
    ) -> Result<Tensor> {
        let mode = self.config.mode;
        let spec = match mode {
            Mode::NonStreaming => ChunkSpec::full(),
            Mode::Streaming => *spec,
        };
        let t = x.rows();
        let mask = build_chunk_attention_mask(t, &spec);
        let plan = match (mode, &pass) {
            (Mode::Streaming, Pass::Inference) => {
                Some(FutureMaskPlan::from_chunk(self.config.conv_kernel, t, &spec)?)
            }
            _ => None,
        };
        let mut h = x;
        for block in blocks {
            let route = match (mode, &mut *pass) {
                (Mode::NonStreaming, _) => ConvRoute::Reference,
                (Mode::Streaming, Pass::Inference) => {
                    ConvRoute::Planned(plan.as_ref().expect("plan built for streaming inference"))
                }
                (Mode::Streaming, Pass::Training(rng)) => ConvRoute::Sampled(&mut **rng),
            };
            h = conformer_block_forward(&h, block, &mask, mode, route, self.config.use_quiet)?;
        }
        Ok(h)
    }

    pub fn encoder_forward(&self, bnf: &Tensor, spec: &ChunkSpec) -> Result<Tensor> {
        self.encoder_forward_pass(bnf, spec, &mut Pass::Inference)
    }

    pub fn encoder_forward_pass(
        &self,
        bnf: &Tensor,
        spec: &ChunkSpec,
        pass: &mut Pass<'_>,
    ) -> Result<Tensor> {
        let x = self.input_projection(bnf)?;
        self.run_blocks(x, &self.weights.encoder, spec, pass)
    }

    pub(crate) fn input_projection(&self, bnf: &Tensor) -> Result<Tensor> {
        let (_, width) = bnf.dims2()?;
        if width != self.config.input_dim {
            return Err(shape_err(format!(
                "feature width {width}, model expects {}",
                self.config.input_dim
            )));
        }
        linear(bnf, &self.weights.input_w, &self.weights.input_b)
    }

    pub(crate) fn merge_speaker(&self, latent: &Tensor, spk: &SpeakerEmbedding) -> Result<Tensor> {
        let (t, d) = latent.dims2()?;
        if d != self.config.model_dim || spk.dim() != self.config.speaker_dim {
            return Err(shape_err(format!(
                "latent width {d} / speaker dim {}, model expects {} / {}",
                spk.dim(),
                self.config.model_dim,
                self.config.speaker_dim
            )));
        }
        let mut joined = Vec::with_capacity(t * (d + spk.dim()));
        for i in 0..t {
            joined.extend_from_slice(latent.row(i));
            joined.extend_from_slice(spk.as_slice());
        }
        let joined = Tensor::new(vec![t, d + spk.dim()], joined)?;
        linear(&joined, &self.weights.merge_w, &self.weights.merge_b)
    }

    pub(crate) fn output_projection(&self, h: &Tensor) -> Result<Tensor> {
        linear(h, &self.weights.output_w, &self.weights.output_b)
    }

    pub fn decoder_forward(
        &self,
        latent: &Tensor,
        spk: &SpeakerEmbedding,
        spec: &ChunkSpec,
    ) -> Result<Tensor> {
        self.decoder_forward_pass(latent, spk, spec, &mut Pass::Inference)
    }

    pub fn decoder_forward_pass(
        &self,
        latent: &Tensor,
        spk: &SpeakerEmbedding,
        spec: &ChunkSpec,
        pass: &mut Pass<'_>,
    ) -> Result<Tensor> {
        let x = self.merge_speaker(latent, spk)?;
        let h = self.run_blocks(x, &self.weights.decoder, spec, pass)?;
        self.output_projection(&h)
    }

    /// Whole-utterance conversion. Non-streaming models ignore `spec`.
    pub fn convert_utterance(
        &self,
        bnf: &Tensor,
        spk: &SpeakerEmbedding,
        spec: &ChunkSpec,
    ) -> Result<Tensor> {
        let latent = self.encoder_forward(bnf, spec)?;
        self.decoder_forward(&latent, spk, spec)
    }

    /// Mean squared difference between the streaming-mode (chunked by
    /// `spec`) and non-streaming encoder outputs for the same input.
    pub fn mode_divergence(&self, bnf: &Tensor, spec: &ChunkSpec) -> Result<f64> {
        let s = self.with_mode(Mode::Streaming).encoder_forward(bnf, spec)?;
        let n = self.with_mode(Mode::NonStreaming).encoder_forward(bnf, spec)?;
        if s.is_empty() {
            return Ok(0.0);
        }
        let sum: f64 = s
            .data()
            .iter()
            .zip(n.data())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum();
        Ok(sum / s.len() as f64)
    }
}
