//! Binary checkpoint and feature files, plus the plain-text speaker vector.
//!
//! All integers are little-endian `u32`, all samples little-endian `f32`.
//!
//! Checkpoint:
//! ```text
//! "DVC2" | version | config_len | config (TOML, UTF-8) | tensor_count |
//!   { name_len | name | rank | extents[rank] | payload } * tensor_count
//! ```
//! Feature file:
//! ```text
//! "DVCF" | dim | frames | frame_shift_ms (f32) | payload[frames × dim]
//! ```

use std::fs;
use std::path::Path;

use crate::conformer::{ConformerConfig, ConversionModel, ModelWeights, SpeakerEmbedding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DVC2";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FEATURE_MAGIC: &[u8; 4] = b"DVCF";
pub const DEFAULT_FRAME_SHIFT_MS: f32 = 12.5;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_len(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::InvalidArgument(format!("{v} does not fit a u32 field")))?;
    put_u32(buf, v);
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    buf.reserve(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    corrupt: fn(usize, String) -> Error,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], corrupt: fn(usize, String) -> Error) -> Self {
        Self {
            bytes,
            pos: 0,
            corrupt,
        }
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err((self.corrupt)(self.pos, reason.into()))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().expect("four bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = match n.checked_mul(4) {
            Some(len) => self.take(len, what)?,
            None => return self.fail(format!("{what} length overflows")),
        };
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err((self.corrupt)(
                at,
                format!("bad magic {got:?}, expected {expected:?}"),
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

fn ckpt_err(offset: usize, reason: String) -> Error {
    Error::CorruptCheckpoint { offset, reason }
}

fn feat_err(offset: usize, reason: String) -> Error {
    Error::CorruptFeatures { offset, reason }
}

pub fn encode_checkpoint(model: &ConversionModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let config = model.config().to_toml();
    put_len(&mut buf, config.len())?;
    buf.extend_from_slice(config.as_bytes());
    let tensors = model.weights().named_tensors();
    put_len(&mut buf, tensors.len())?;
    for (name, t) in tensors {
        put_len(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_len(&mut buf, t.shape().len())?;
        for &e in t.shape() {
            put_len(&mut buf, e)?;
        }
        put_f32s(&mut buf, t.data());
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ConversionModel> {
    let mut r = Reader::new(bytes, ckpt_err);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let config_len = r.u32("config length")? as usize;
    let config_at = r.pos;
    let text = std::str::from_utf8(r.take(config_len, "config")?)
        .map_err(|e| ckpt_err(config_at, format!("config is not UTF-8: {e}")))?;
    let config = ConformerConfig::from_toml(text)
        .map_err(|e| ckpt_err(config_at, format!("bad config block: {e}")))?;

    let mut weights = ModelWeights::zeros(&config);
    let expected: Vec<(String, Vec<usize>)> = weights
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return r.fail(format!("{count} tensors, config implies {}", expected.len()));
    }
    for ((name, shape), slot) in expected.iter().zip(weights.tensors_mut()) {
        let name_len = r.u32("name length")? as usize;
        let name_at = r.pos;
        let got = r.take(name_len, "tensor name")?;
        if got != name.as_bytes() {
            return Err(ckpt_err(
                name_at,
                format!("expected tensor `{name}`, found `{}`", String::from_utf8_lossy(got)),
            ));
        }
        let rank = r.u32("rank")? as usize;
        if rank != shape.len() {
            return r.fail(format!("`{name}` has rank {rank}, expected {}", shape.len()));
        }
        let extents = (0..rank)
            .map(|_| r.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        if &extents != shape {
            return r.fail(format!("`{name}` has extents {extents:?}, expected {shape:?}"));
        }
        let data = r.f32s(shape.iter().product(), "tensor payload")?;
        *slot = Tensor::new(extents, data)?;
    }
    r.finish()?;
    ConversionModel::new(config, weights)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ConversionModel) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ConversionModel> {
    decode_checkpoint(&fs::read(path)?)
}

/// Frame-major features with their frame shift.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub frame_shift_ms: f32,
    pub frames: Tensor,
}

impl FeatureFile {
    pub fn new(frames: Tensor) -> Self {
        Self {
            frame_shift_ms: DEFAULT_FRAME_SHIFT_MS,
            frames,
        }
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn duration_ms(&self) -> f64 {
        self.num_frames() as f64 * self.frame_shift_ms as f64
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let (t, d) = self.frames.dims2()?;
        let mut buf = Vec::with_capacity(16 + t * d * 4);
        buf.extend_from_slice(FEATURE_MAGIC);
        put_len(&mut buf, d)?;
        put_len(&mut buf, t)?;
        buf.extend_from_slice(&self.frame_shift_ms.to_le_bytes());
        put_f32s(&mut buf, self.frames.data());
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, feat_err);
        r.magic(FEATURE_MAGIC)?;
        let dim = r.u32("feature dim")? as usize;
        let frames = r.u32("frame count")? as usize;
        let shift_at = r.pos;
        let frame_shift_ms = r.f32("frame shift")?;
        if !(frame_shift_ms.is_finite() && frame_shift_ms > 0.0) {
            return Err(feat_err(shift_at, format!("frame shift {frame_shift_ms} ms")));
        }
        let n = dim
            .checked_mul(frames)
            .ok_or_else(|| feat_err(r.pos, "frame payload size overflows".into()))?;
        let data = r.f32s(n, "frame payload")?;
        r.finish()?;
        Ok(Self {
            frame_shift_ms,
            frames: Tensor::new(vec![frames, dim], data)?,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Whitespace-separated floats; the vector is L2-normalized on load.
pub fn read_speaker(path: impl AsRef<Path>) -> Result<SpeakerEmbedding> {
    let text = fs::read_to_string(path)?;
    let values = text
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f32>()
                .map_err(|_| Error::InvalidArgument(format!("bad speaker value `{tok}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    SpeakerEmbedding::new(values)
}

pub fn write_speaker(path: impl AsRef<Path>, spk: &SpeakerEmbedding) -> Result<()> {
    let text: Vec<String> = spk.as_slice().iter().map(|v| format!("{v:e}")).collect();
    fs::write(path, text.join("\n") + "\n")?;
    Ok(())
}
