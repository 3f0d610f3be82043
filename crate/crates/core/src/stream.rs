//! Chunk-by-chunk inference runtime.
//!
//! A [`StreamState`] owns the per-block attention and convolution caches of
//! one stream. Pushing `T` frames in chunks of `C` reproduces the streaming
//! model's full-sequence forward under the `C`-frame chunk mask, as long as
//! every chunk except the last is full. Emitted frames are never revised.

use crate::conformer::{conformer_block_step, BlockCache, ConversionModel, SpeakerEmbedding};
use crate::conv::Mode;
use crate::error::{shape_err, Error, Result};
use crate::masking::ChunkSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSummary {
    pub frames_consumed: usize,
    pub chunks_pushed: usize,
}

#[derive(Debug, Clone)]
pub struct StreamState<'m> {
    model: &'m ConversionModel,
    speaker: SpeakerEmbedding,
    chunk_frames: usize,
    encoder: Vec<BlockCache>,
    decoder: Vec<BlockCache>,
    frames_consumed: usize,
    chunks_pushed: usize,
    closed: bool,
}

/// Opens a stream with unlimited attention history.
pub fn open_stream<'m>(
    model: &'m ConversionModel,
    speaker: SpeakerEmbedding,
    chunk_frames: usize,
) -> Result<StreamState<'m>> {
    open_stream_with_spec(model, speaker, ChunkSpec::frames(chunk_frames)?)
}

pub fn open_stream_with_spec<'m>(
    model: &'m ConversionModel,
    speaker: SpeakerEmbedding,
    spec: ChunkSpec,
) -> Result<StreamState<'m>> {
    if model.mode() != Mode::Streaming {
        return Err(Error::InvalidMode("streams need a streaming-mode model".into()));
    }
    let chunk_frames = spec
        .chunk_frames()
        .ok_or_else(|| Error::InvalidArgument("a stream needs a finite chunk size".into()))?;
    let cfg = model.config();
    if speaker.dim() != cfg.speaker_dim {
        return Err(shape_err(format!(
            "speaker dim {}, model expects {}",
            speaker.dim(),
            cfg.speaker_dim
        )));
    }
    let history = spec.left_chunks().map(|cap| cap * chunk_frames);
    let caches = |n: usize| (0..n).map(|_| BlockCache::new(cfg, history)).collect();
    Ok(StreamState {
        model,
        speaker,
        chunk_frames,
        encoder: caches(cfg.num_encoder_blocks),
        decoder: caches(cfg.num_decoder_blocks),
        frames_consumed: 0,
        chunks_pushed: 0,
        closed: false,
    })
}

impl<'m> StreamState<'m> {
    /// Converts one chunk of `1..=C` feature frames into as many mel frames.
    pub fn push_chunk(&mut self, bnf_chunk: &Tensor) -> Result<Tensor> {
        if self.closed {
            return Err(Error::StreamClosed);
        }
        let (c, _) = bnf_chunk.dims2()?;
        if c == 0 {
            return Err(Error::InvalidArgument("empty chunk".into()));
        }
        if c > self.chunk_frames {
            return Err(Error::ChunkTooLarge {
                got: c,
                max: self.chunk_frames,
            });
        }
        let model = self.model;
        let weights = model.weights();
        let quiet = model.config().use_quiet;
        let mut h = model.input_projection(bnf_chunk)?;
        for (block, cache) in weights.encoder.iter().zip(&mut self.encoder) {
            h = conformer_block_step(&h, block, cache, quiet)?;
        }
        h = model.merge_speaker(&h, &self.speaker)?;
        for (block, cache) in weights.decoder.iter().zip(&mut self.decoder) {
            h = conformer_block_step(&h, block, cache, quiet)?;
        }
        let mel = model.output_projection(&h)?;
        self.frames_consumed += c;
        self.chunks_pushed += 1;
        Ok(mel)
    }

    pub fn close(&mut self) -> Result<StreamSummary> {
        if self.closed {
            return Err(Error::StreamClosed);
        }
        self.closed = true;
        Ok(self.summary())
    }

    pub fn summary(&self) -> StreamSummary {
        StreamSummary {
            frames_consumed: self.frames_consumed,
            chunks_pushed: self.chunks_pushed,
        }
    }

    pub fn frames_consumed(&self) -> usize {
        self.frames_consumed
    }

    pub fn chunk_frames(&self) -> usize {
        self.chunk_frames
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn block_caches(&self) -> impl Iterator<Item = &BlockCache> {
        self.encoder.iter().chain(&self.decoder)
    }

    /// Frames currently held across all attention caches.
    pub fn cached_attention_frames(&self) -> usize {
        self.block_caches().map(|c| c.kv.frames_cached()).sum()
    }
}
