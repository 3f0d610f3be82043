//! Chunk attention masks, dynamic-chunk-training draws and per-frame
//! future-tap masks for the convolution module.

use rand::Rng;

use crate::error::{Error, Result};

/// Largest chunk (in frames) a dynamic-chunk-training draw can produce.
pub const MAX_DCT_CHUNK: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChunkSize {
    Full,
    Frames(usize),
}

/// How a sequence is cut into attention chunks and how far back a chunk sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChunkSpec {
    size: ChunkSize,
    left_chunks: Option<usize>,
}

impl ChunkSpec {
    pub fn full() -> Self {
        Self {
            size: ChunkSize::Full,
            left_chunks: None,
        }
    }

    pub fn frames(chunk_frames: usize) -> Result<Self> {
        if chunk_frames == 0 {
            return Err(Error::InvalidArgument("chunk size must be at least one frame".into()));
        }
        Ok(Self {
            size: ChunkSize::Frames(chunk_frames),
            left_chunks: None,
        })
    }

    /// Limits attention history to `cap` chunks before the current one.
    pub fn with_left_chunks(mut self, cap: Option<usize>) -> Self {
        self.left_chunks = cap;
        self
    }

    pub fn size(&self) -> ChunkSize {
        self.size
    }

    pub fn is_full(&self) -> bool {
        self.size == ChunkSize::Full
    }

    pub fn chunk_frames(&self) -> Option<usize> {
        match self.size {
            ChunkSize::Full => None,
            ChunkSize::Frames(c) => Some(c),
        }
    }

    pub fn left_chunks(&self) -> Option<usize> {
        self.left_chunks
    }

    fn chunk_of(&self, t: usize) -> usize {
        match self.size {
            ChunkSize::Full => 0,
            ChunkSize::Frames(c) => t / c,
        }
    }

    /// Maps the two random draws of a dynamic-chunk-training step to a spec.
    /// `branch < 0.5` selects the full sequence; otherwise `size_draw` in
    /// `1..=MAX_DCT_CHUNK` is the chunk size.
    pub fn from_dct_draws(branch: f64, size_draw: usize) -> Result<Self> {
        if branch < 0.5 {
            Ok(Self::full())
        } else if (1..=MAX_DCT_CHUNK).contains(&size_draw) {
            Self::frames(size_draw)
        } else {
            Err(Error::InvalidArgument(format!(
                "chunk draw {size_draw} outside 1..={MAX_DCT_CHUNK}"
            )))
        }
    }
}

/// One dynamic-chunk-training draw: full sequence half the time, otherwise a
/// chunk of 1..=20 frames.
pub fn sample_dct_chunk<R: Rng + ?Sized>(rng: &mut R) -> ChunkSpec {
    let branch: f64 = rng.random();
    if branch < 0.5 {
        return ChunkSpec::full();
    }
    let size = rng.random_range(1..=MAX_DCT_CHUNK);
    ChunkSpec::from_dct_draws(branch, size).expect("draw is in range")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    t_query: usize,
    t_key: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn all_visible(t_query: usize, t_key: usize) -> Self {
        Self {
            t_query,
            t_key,
            visible: vec![true; t_query * t_key],
        }
    }

    pub fn from_fn(t_query: usize, t_key: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut visible = Vec::with_capacity(t_query * t_key);
        for i in 0..t_query {
            for j in 0..t_key {
                visible.push(f(i, j));
            }
        }
        Self {
            t_query,
            t_key,
            visible,
        }
    }

    pub fn t_query(&self) -> usize {
        self.t_query
    }

    pub fn t_key(&self) -> usize {
        self.t_key
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.visible[i * self.t_key..(i + 1) * self.t_key]
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.t_key + j]
    }
}

/// Square chunk mask: frame `i` sees frame `j` iff `j`'s chunk is not later
/// than `i`'s and lies within the left-history cap.
pub fn build_chunk_attention_mask(t_frames: usize, spec: &ChunkSpec) -> AttentionMask {
    if spec.is_full() {
        return AttentionMask::all_visible(t_frames, t_frames);
    }
    AttentionMask::from_fn(t_frames, t_frames, |i, j| {
        let (ci, cj) = (spec.chunk_of(i), spec.chunk_of(j));
        cj <= ci && spec.left_chunks.is_none_or(|cap| ci - cj <= cap)
    })
}

/// Index of the last input frame available when frame `t` is computed, i.e.
/// the right boundary of `t`'s chunk.
pub fn last_visible_index(t: usize, spec: &ChunkSpec, t_total: usize) -> usize {
    debug_assert!(t < t_total);
    match spec.size {
        ChunkSize::Full => t_total - 1,
        ChunkSize::Frames(c) => (t_total - 1).min((t / c + 1) * c - 1),
    }
}

/// Draws the number of trailing (future) taps to zero for one output frame,
/// uniform over `0..=kernel/2`.
pub fn sample_dmc_n<R: Rng + ?Sized>(kernel: usize, rng: &mut R) -> Result<usize> {
    check_kernel(kernel)?;
    Ok(rng.random_range(0..=kernel / 2))
}

pub(crate) fn check_kernel(kernel: usize) -> Result<()> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd and positive, got {kernel}"
        )));
    }
    Ok(())
}

/// Per-output-frame count of masked future taps for a kernel of odd size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FutureMaskPlan {
    kernel: usize,
    n_per_frame: Vec<usize>,
}

impl FutureMaskPlan {
    pub fn new(kernel: usize, n_per_frame: Vec<usize>) -> Result<Self> {
        check_kernel(kernel)?;
        if let Some((t, n)) = n_per_frame.iter().enumerate().find(|(_, &n)| n > kernel / 2) {
            return Err(Error::InvalidMask(format!(
                "frame {t} masks {n} taps, kernel {kernel} allows at most {}",
                kernel / 2
            )));
        }
        Ok(Self {
            kernel,
            n_per_frame,
        })
    }

    pub fn unmasked(kernel: usize, t_frames: usize) -> Result<Self> {
        Self::new(kernel, vec![0; t_frames])
    }

    pub fn sample<R: Rng + ?Sized>(kernel: usize, t_frames: usize, rng: &mut R) -> Result<Self> {
        let n = (0..t_frames)
            .map(|_| sample_dmc_n(kernel, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(kernel, n)
    }

    /// The plan streaming inference implies: taps past the chunk's right
    /// boundary read zero, `n_t = max(0, t + k/2 − E(t))`.
    pub fn from_chunk(kernel: usize, t_frames: usize, spec: &ChunkSpec) -> Result<Self> {
        check_kernel(kernel)?;
        let half = kernel / 2;
        let n = (0..t_frames)
            .map(|t| (t + half).saturating_sub(last_visible_index(t, spec, t_frames)))
            .collect();
        Self::new(kernel, n)
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn n_per_frame(&self) -> &[usize] {
        &self.n_per_frame
    }

    pub fn len(&self) -> usize {
        self.n_per_frame.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_per_frame.is_empty()
    }
}
