//! Multi-head self-attention with chunk masks, standard and quiet
//! (softmax-plus-one) normalization, and an incremental key/value cache.

use crate::error::{shape_err, Error, Result};
use crate::masking::AttentionMask;
use crate::tensor::{linear, Tensor};

/// Row normalization applied to attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalizer {
    Softmax,
    /// `exp(w_i) / (1 + Σ exp(w_n))`; a row may put (almost) no weight anywhere.
    Quiet,
}

impl Normalizer {
    pub fn from_quiet(use_quiet: bool) -> Self {
        if use_quiet {
            Self::Quiet
        } else {
            Self::Softmax
        }
    }
}

/// Normalizes `row` in place. Invisible entries become 0 and never enter a
/// max or a sum, so their logits may hold anything.
fn normalize_in_place(row: &mut [f32], visible: &[bool], norm: Normalizer) -> Result<()> {
    let mut max = f32::NEG_INFINITY;
    let mut any = false;
    for (w, &vis) in row.iter().zip(visible) {
        if vis {
            any = true;
            max = max.max(*w);
        }
    }
    if !any {
        return match norm {
            Normalizer::Softmax => Err(Error::InvalidMask("attention row has no visible key".into())),
            Normalizer::Quiet => {
                row.fill(0.0);
                Ok(())
            }
        };
    }
    // Quiet rows treat the implicit "+1" as an extra logit fixed at 0.
    let shift = match norm {
        Normalizer::Softmax => max,
        Normalizer::Quiet => max.max(0.0),
    };
    let mut denom = match norm {
        Normalizer::Softmax => 0.0f32,
        Normalizer::Quiet => (-shift).exp(),
    };
    for (w, &vis) in row.iter_mut().zip(visible) {
        if vis {
            *w = (*w - shift).exp();
            denom += *w;
        } else {
            *w = 0.0;
        }
    }
    let inv = 1.0 / denom;
    for (w, &vis) in row.iter_mut().zip(visible) {
        if vis {
            *w *= inv;
        }
    }
    Ok(())
}

pub fn masked_softmax(logits: &[f32], visible: &[bool]) -> Result<Vec<f32>> {
    if logits.len() != visible.len() {
        return Err(shape_err(format!(
            "{} logits with {} mask entries",
            logits.len(),
            visible.len()
        )));
    }
    let mut row = logits.to_vec();
    normalize_in_place(&mut row, visible, Normalizer::Softmax)?;
    Ok(row)
}

/// Softmax with an extra unit in the denominator. Rows with no visible entry
/// are legal and come out all zero.
pub fn quiet_softmax(logits: &[f32], visible: &[bool]) -> Vec<f32> {
    assert_eq!(logits.len(), visible.len(), "logits and mask differ in length");
    let mut row = logits.to_vec();
    normalize_in_place(&mut row, visible, Normalizer::Quiet).expect("quiet rows never fail");
    row
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhsaWeights {
    pub heads: usize,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl MhsaWeights {
    pub fn zeros(d: usize, heads: usize) -> Self {
        let m = || Tensor::zeros(&[d, d]);
        let b = || Tensor::zeros(&[d]);
        Self {
            heads,
            wq: m(),
            bq: b(),
            wk: m(),
            bk: b(),
            wv: m(),
            bv: b(),
            wo: m(),
            bo: b(),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.wq.rows()
    }

    fn validate(&self) -> Result<usize> {
        let d = self.model_dim();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(shape_err(format!("model dim {d} not divisible by {} heads", self.heads)));
        }
        for (name, w, b) in [
            ("query", &self.wq, &self.bq),
            ("key", &self.wk, &self.bk),
            ("value", &self.wv, &self.bv),
            ("output", &self.wo, &self.bo),
        ] {
            if w.shape() != [d, d] || b.len() != d {
                return Err(shape_err(format!(
                    "{name} projection {:?} / bias {} for model dim {d}",
                    w.shape(),
                    b.len()
                )));
            }
        }
        Ok(d)
    }
}

/// Scaled dot-product attention of every query row against `keys`/`values`.
/// `mask` of `None` means every key is visible to every query.
fn attend(
    q: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    heads: usize,
    norm: Normalizer,
    mask: Option<&AttentionMask>,
) -> Result<Tensor> {
    let (tq, d) = q.dims2()?;
    let tk = keys.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let all = vec![true; tk];
    let mut logits = vec![0.0f32; tk];
    let mut out = Tensor::zeros(&[tq, d]);
    for i in 0..tq {
        let visible = mask.map_or(all.as_slice(), |m| m.row(i));
        let q_row = q.row(i);
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            let qh = &q_row[span.clone()];
            for (j, l) in logits.iter_mut().enumerate() {
                if visible[j] {
                    let kh = &keys.row(j)[span.clone()];
                    *l = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
            }
            normalize_in_place(&mut logits, visible, norm)?;
            let o = &mut out.row_mut(i)[span.clone()];
            for (j, &w) in logits.iter().enumerate() {
                if visible[j] {
                    let vh = &values.row(j)[span.clone()];
                    for (acc, v) in o.iter_mut().zip(vh) {
                        *acc += w * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn mhsa_forward(
    x: &Tensor,
    w: &MhsaWeights,
    mask: &AttentionMask,
    use_quiet: bool,
) -> Result<Tensor> {
    let d = w.validate()?;
    let (t, dx) = x.dims2()?;
    if dx != d {
        return Err(shape_err(format!("input width {dx}, model dim {d}")));
    }
    if mask.t_query() != t || mask.t_key() != t {
        return Err(shape_err(format!(
            "mask {}×{} for {t} frames",
            mask.t_query(),
            mask.t_key()
        )));
    }
    let q = linear(x, &w.wq, &w.bq)?;
    let k = linear(x, &w.wk, &w.bk)?;
    let v = linear(x, &w.wv, &w.bv)?;
    let mixed = attend(&q, &k, &v, w.heads, Normalizer::from_quiet(use_quiet), Some(mask))?;
    linear(&mixed, &w.wo, &w.bo)
}

/// Keys and values of frames already consumed by one attention layer of one
/// stream.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    width: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    max_frames: Option<usize>,
}

impl KvCache {
    /// `max_frames` bounds the history kept between steps; `None` keeps
    /// everything.
    pub fn new(width: usize, max_frames: Option<usize>) -> Self {
        Self {
            width,
            keys: Vec::new(),
            values: Vec::new(),
            max_frames,
        }
    }

    pub fn frames_cached(&self) -> usize {
        self.keys.len() / self.width.max(1)
    }

    pub fn keys(&self) -> Tensor {
        Tensor::new(vec![self.frames_cached(), self.width], self.keys.clone())
            .expect("cache keeps whole rows")
    }

    pub fn values(&self) -> Tensor {
        Tensor::new(vec![self.frames_cached(), self.width], self.values.clone())
            .expect("cache keeps whole rows")
    }

    fn append(&mut self, k: &Tensor, v: &Tensor) {
        self.keys.extend_from_slice(k.data());
        self.values.extend_from_slice(v.data());
    }

    fn truncate_oldest(&mut self) {
        if let Some(max) = self.max_frames {
            let n = self.frames_cached();
            if n > max {
                let drop = (n - max) * self.width;
                self.keys.drain(..drop);
                self.values.drain(..drop);
            }
        }
    }

    pub fn reset(&mut self) {
        self.keys.clear();
        self.values.clear();
    }
}

/// Attends one chunk against everything cached plus the whole chunk, then
/// appends the chunk's keys/values to `cache`.
pub fn mhsa_streaming_step(
    cache: &mut KvCache,
    x_chunk: &Tensor,
    w: &MhsaWeights,
    use_quiet: bool,
) -> Result<Tensor> {
    let d = w.validate()?;
    let (c, dx) = x_chunk.dims2()?;
    if c == 0 {
        return Err(Error::InvalidArgument("empty chunk".into()));
    }
    if dx != d || cache.width != d {
        return Err(shape_err(format!(
            "chunk width {dx}, cache width {}, model dim {d}",
            cache.width
        )));
    }
    let q = linear(x_chunk, &w.wq, &w.bq)?;
    let k = linear(x_chunk, &w.wk, &w.bk)?;
    let v = linear(x_chunk, &w.wv, &w.bv)?;
    cache.append(&k, &v);
    let n = cache.frames_cached();
    let keys = Tensor::new(vec![n, d], std::mem::take(&mut cache.keys))?;
    let values = Tensor::new(vec![n, d], std::mem::take(&mut cache.values))?;
    let mixed = attend(&q, &keys, &values, w.heads, Normalizer::from_quiet(use_quiet), None);
    cache.keys = keys.into_data();
    cache.values = values.into_data();
    cache.truncate_oldest();
    linear(&mixed?, &w.wo, &w.bo)
}
