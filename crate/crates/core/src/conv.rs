//! Conformer convolution module: centered depthwise convolution with
//! per-frame future masking (dynamic masked convolution), its unfolded
//! window form, dual-mode branches and the chunked streaming step.
//!
//! The module layout is pointwise `d → 2d`, GLU, depthwise `k` taps, swish,
//! pointwise `d → d`. The pointwise parts are optional so the depthwise core
//! can be exercised on its own. Masking always applies to the depthwise input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::masking::{check_kernel, FutureMaskPlan};
use crate::tensor::{glu, linear, swish, Tensor};

/// Which branch of a dual-mode layer runs and how the sequence is seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Streaming,
    #[serde(rename = "nonstreaming")]
    NonStreaming,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "streaming" => Ok(Self::Streaming),
            "nonstreaming" => Ok(Self::NonStreaming),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pointwise {
    pub pre_w: Tensor,
    pub pre_b: Tensor,
    pub post_w: Tensor,
    pub post_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    kernel: usize,
    /// `[d × k]`; tap `k/2` multiplies the current frame.
    pub depthwise: Tensor,
    pub depthwise_bias: Tensor,
    pub pointwise: Option<Pointwise>,
}

impl ConvWeights {
    pub fn new(
        depthwise: Tensor,
        depthwise_bias: Tensor,
        pointwise: Option<Pointwise>,
    ) -> Result<Self> {
        let (d, k) = depthwise.dims2()?;
        check_kernel(k)?;
        if depthwise_bias.len() != d {
            return Err(shape_err(format!("depthwise bias {} for {d} channels", depthwise_bias.len())));
        }
        if let Some(p) = &pointwise {
            if p.pre_w.shape() != [d, 2 * d]
                || p.pre_b.len() != 2 * d
                || p.post_w.shape() != [d, d]
                || p.post_b.len() != d
            {
                return Err(shape_err(format!("pointwise projections do not fit {d} channels")));
            }
        }
        Ok(Self {
            kernel: k,
            depthwise,
            depthwise_bias,
            pointwise,
        })
    }

    /// Depthwise-only weights with the given per-channel taps and zero bias.
    pub fn depthwise_only(taps: Tensor) -> Result<Self> {
        let d = taps.rows();
        Self::new(taps, Tensor::zeros(&[d]), None)
    }

    pub fn zeros(d: usize, kernel: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[d, kernel]),
            Tensor::zeros(&[d]),
            Some(Pointwise {
                pre_w: Tensor::zeros(&[d, 2 * d]),
                pre_b: Tensor::zeros(&[2 * d]),
                post_w: Tensor::zeros(&[d, d]),
                post_b: Tensor::zeros(&[d]),
            }),
        )
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn channels(&self) -> usize {
        self.depthwise.rows()
    }

    fn half(&self) -> usize {
        self.kernel / 2
    }

    /// Taps transposed to `[k × d]` so inner loops walk channels contiguously.
    fn taps_by_offset(&self) -> Vec<f32> {
        let (d, k) = (self.channels(), self.kernel);
        let mut out = vec![0.0; d * k];
        for c in 0..d {
            for j in 0..k {
                out[j * d + c] = self.depthwise.data()[c * k + j];
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2()?;
        if d != self.channels() {
            return Err(shape_err(format!("input width {d}, conv channels {}", self.channels())));
        }
        Ok(())
    }

    fn pre(&self, x: &Tensor) -> Result<Tensor> {
        match &self.pointwise {
            Some(p) => glu(&linear(x, &p.pre_w, &p.pre_b)?),
            None => Ok(x.clone()),
        }
    }

    fn post(&self, y: Tensor) -> Result<Tensor> {
        match &self.pointwise {
            Some(p) => linear(&swish(&y), &p.post_w, &p.post_b),
            None => Ok(y),
        }
    }

    fn with_depthwise(
        &self,
        x: &Tensor,
        core: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        self.check_input(x)?;
        let h = self.pre(x)?;
        self.post(core(&h)?)
    }
}

/// Centered depthwise convolution with zero padding of `k/2` on both sides.
pub fn conv1d_reference(x: &Tensor, w: &ConvWeights) -> Result<Tensor> {
    w.with_depthwise(x, |h| {
        let (t, d) = h.dims2()?;
        let (k, half) = (w.kernel(), w.half());
        let taps = w.taps_by_offset();
        let mut out = Tensor::zeros(&[t, d]);
        for i in 0..t {
            let acc = out.row_mut(i);
            for j in 0..k {
                let src = i + j;
                if src < half || src - half >= t {
                    continue;
                }
                let xs = h.row(src - half);
                for ((a, &wt), &xv) in acc.iter_mut().zip(&taps[j * d..(j + 1) * d]).zip(xs) {
                    *a += wt * xv;
                }
            }
            for (a, b) in acc.iter_mut().zip(w.depthwise_bias.data()) {
                *a += b;
            }
        }
        Ok(out)
    })
}

/// Direct summation with the last `plan[t]` taps of frame `t`'s receptive
/// field reading zero.
pub fn masked_conv_oracle(x: &Tensor, w: &ConvWeights, plan: &FutureMaskPlan) -> Result<Tensor> {
    check_plan(x, w, plan)?;
    w.with_depthwise(x, |h| {
        let (t, d) = h.dims2()?;
        let (k, half) = (w.kernel(), w.half());
        let mut out = Tensor::zeros(&[t, d]);
        for i in 0..t {
            let live_taps = k - plan.n_per_frame()[i];
            for c in 0..d {
                let mut acc = 0.0f32;
                for j in 0..live_taps {
                    let src = i + j;
                    if src >= half && src - half < t {
                        acc += w.depthwise.get2(c, j) * h.get2(src - half, c);
                    }
                }
                out.row_mut(i)[c] = acc + w.depthwise_bias.data()[c];
            }
        }
        Ok(out)
    })
}

fn check_plan(x: &Tensor, w: &ConvWeights, plan: &FutureMaskPlan) -> Result<()> {
    if plan.kernel() != w.kernel() {
        return Err(Error::InvalidMask(format!(
            "plan for kernel {} applied to kernel {}",
            plan.kernel(),
            w.kernel()
        )));
    }
    if plan.len() != x.rows() {
        return Err(Error::InvalidMask(format!(
            "plan covers {} frames, input has {}",
            plan.len(),
            x.rows()
        )));
    }
    Ok(())
}

/// Unfolds `h` into one zero-padded `[k × d]` window per frame, i.e. a
/// `[T × k × d]` tensor whose second axis is the receptive field.
fn unfold_windows(h: &Tensor, kernel: usize) -> Result<Tensor> {
    let (t, d) = h.dims2()?;
    let half = kernel / 2;
    let mut win = Tensor::zeros(&[t, kernel, d]);
    let data = win.data_mut();
    for i in 0..t {
        for j in 0..kernel {
            let src = i + j;
            if src >= half && src - half < t {
                let dst = (i * kernel + j) * d;
                data[dst..dst + d].copy_from_slice(h.row(src - half));
            }
        }
    }
    Ok(win)
}

/// Convolution through the unfolded window tensor with future rows masked
/// per frame according to `plan`.
pub fn dmc_forward_with_plan(x: &Tensor, w: &ConvWeights, plan: &FutureMaskPlan) -> Result<Tensor> {
    check_plan(x, w, plan)?;
    w.with_depthwise(x, |h| {
        let (t, d) = h.dims2()?;
        let k = w.kernel();
        let mut win = unfold_windows(h, k)?;
        let data = win.data_mut();
        for (i, &n) in plan.n_per_frame().iter().enumerate() {
            let start = (i * k + (k - n)) * d;
            data[start..(i + 1) * k * d].fill(0.0);
        }
        let taps = w.taps_by_offset();
        let mut out = Tensor::zeros(&[t, d]);
        for i in 0..t {
            let acc = out.row_mut(i);
            let frame = &win.data()[i * k * d..(i + 1) * k * d];
            for (tap_row, win_row) in taps.chunks_exact(d).zip(frame.chunks_exact(d)) {
                for ((a, &wt), &xv) in acc.iter_mut().zip(tap_row).zip(win_row) {
                    *a += wt * xv;
                }
            }
            for (a, b) in acc.iter_mut().zip(w.depthwise_bias.data()) {
                *a += b;
            }
        }
        Ok(out)
    })
}

/// Training-time forward: draws a future-mask length per output frame and
/// returns the output together with the plan that produced it.
pub fn dmc_train_forward<R: Rng + ?Sized>(
    x: &Tensor,
    w: &ConvWeights,
    rng: &mut R,
) -> Result<(Tensor, FutureMaskPlan)> {
    let plan = FutureMaskPlan::sample(w.kernel(), x.rows(), rng)?;
    let y = dmc_forward_with_plan(x, w, &plan)?;
    Ok((y, plan))
}

/// Left context carried between chunks: the last `k/2` depthwise inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvCache {
    width: usize,
    history: usize,
    frames: Vec<f32>,
    frames_seen: usize,
}

impl ConvCache {
    pub fn new(width: usize, kernel: usize) -> Self {
        let history = kernel / 2;
        Self {
            width,
            history,
            frames: vec![0.0; history * width],
            frames_seen: 0,
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn history(&self) -> Tensor {
        Tensor::new(vec![self.history, self.width], self.frames.clone())
            .expect("cache keeps whole rows")
    }
}

/// Convolves one chunk using cached left context. Frames past the chunk's
/// last frame are unavailable and read as zero; outputs are final.
pub fn conv_streaming_step(cache: &mut ConvCache, x_chunk: &Tensor, w: &ConvWeights) -> Result<Tensor> {
    let (c, _) = x_chunk.dims2()?;
    if c == 0 {
        return Err(Error::InvalidArgument("empty chunk".into()));
    }
    if cache.width != w.channels() || cache.history != w.half() {
        return Err(shape_err(format!(
            "cache of {}×{} for kernel {} over {} channels",
            cache.history,
            cache.width,
            w.kernel(),
            w.channels()
        )));
    }
    w.with_depthwise(x_chunk, |h| {
        let d = w.channels();
        let (k, half) = (w.kernel(), w.half());
        // [history | chunk | zero future]
        let mut buf = Vec::with_capacity((2 * half + c) * d);
        buf.extend_from_slice(&cache.frames);
        buf.extend_from_slice(h.data());
        buf.resize((2 * half + c) * d, 0.0);
        let taps = w.taps_by_offset();
        let mut out = Tensor::zeros(&[c, d]);
        for i in 0..c {
            let acc = out.row_mut(i);
            for j in 0..k {
                let xs = &buf[(i + j) * d..(i + j + 1) * d];
                for ((a, &wt), &xv) in acc.iter_mut().zip(&taps[j * d..(j + 1) * d]).zip(xs) {
                    *a += wt * xv;
                }
            }
            for (a, b) in acc.iter_mut().zip(w.depthwise_bias.data()) {
                *a += b;
            }
        }
        let keep_from = c * d;
        cache.frames.copy_from_slice(&buf[keep_from..keep_from + half * d]);
        cache.frames_seen += c;
        Ok(out)
    })
}

/// Two parallel convolution branches sharing kernel size and width.
#[derive(Debug, Clone, PartialEq)]
pub struct DualModeConv {
    pub streaming: ConvWeights,
    pub nonstreaming: ConvWeights,
}

impl DualModeConv {
    pub fn new(streaming: ConvWeights, nonstreaming: ConvWeights) -> Result<Self> {
        if streaming.kernel() != nonstreaming.kernel()
            || streaming.channels() != nonstreaming.channels()
            || streaming.pointwise.is_some() != nonstreaming.pointwise.is_some()
        {
            return Err(shape_err("dual-mode branches differ in kernel, width or layout"));
        }
        Ok(Self {
            streaming,
            nonstreaming,
        })
    }

    pub fn branch(&self, mode: Mode) -> &ConvWeights {
        match mode {
            Mode::Streaming => &self.streaming,
            Mode::NonStreaming => &self.nonstreaming,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{last_visible_index, ChunkSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(values: &[f32]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    fn taps(values: &[f32]) -> ConvWeights {
        ConvWeights::depthwise_only(Tensor::new(vec![1, values.len()], values.to_vec()).unwrap())
            .unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_module(rng: &mut ChaCha8Rng, d: usize, k: usize) -> ConvWeights {
        ConvWeights::new(
            random(rng, &[d, k]),
            random(rng, &[d]),
            Some(Pointwise {
                pre_w: random(rng, &[d, 2 * d]),
                pre_b: random(rng, &[2 * d]),
                post_w: random(rng, &[d, d]),
                post_b: random(rng, &[d]),
            }),
        )
        .unwrap()
    }

    use rand::Rng;

    #[test]
    fn reference_examples() {
        let x = seq(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(conv1d_reference(&x, &taps(&[1.0, 1.0, 1.0])).unwrap().data(), &[3.0, 6.0, 9.0, 7.0]);
        assert_eq!(conv1d_reference(&x, &taps(&[0.0, 1.0, 0.0])).unwrap(), x);
        assert_eq!(conv1d_reference(&x, &taps(&[2.5])).unwrap().data(), &[2.5, 5.0, 7.5, 10.0]);
    }

    #[test]
    fn oracle_examples() {
        let x = seq(&[1.0, 2.0, 3.0, 4.0]);
        let w = taps(&[1.0, 1.0, 1.0]);
        let ones = FutureMaskPlan::new(3, vec![1; 4]).unwrap();
        assert_eq!(masked_conv_oracle(&x, &w, &ones).unwrap().data(), &[1.0, 3.0, 5.0, 7.0]);
        let zeros = FutureMaskPlan::unmasked(3, 4).unwrap();
        assert_eq!(masked_conv_oracle(&x, &w, &zeros).unwrap().data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn full_mask_is_causal_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[10, 3]);
        let w = ConvWeights::depthwise_only(random(&mut rng, &[3, 5])).unwrap();
        let mut causal = w.clone();
        for c in 0..3 {
            for j in 3..5 {
                causal.depthwise.data_mut()[c * 5 + j] = 0.0;
            }
        }
        let plan = FutureMaskPlan::new(5, vec![2; 10]).unwrap();
        let masked = masked_conv_oracle(&x, &w, &plan).unwrap();
        assert!(masked.max_abs_diff(&conv1d_reference(&x, &causal).unwrap()) < 1e-6);
    }

    #[test]
    fn oracle_rejects_bad_plans() {
        let x = seq(&[1.0, 2.0]);
        let w = taps(&[1.0, 1.0, 1.0]);
        assert!(FutureMaskPlan::new(3, vec![2, 0]).is_err());
        let short = FutureMaskPlan::unmasked(3, 1).unwrap();
        assert!(matches!(masked_conv_oracle(&x, &w, &short), Err(Error::InvalidMask(_))));
        let other_k = FutureMaskPlan::unmasked(5, 2).unwrap();
        assert!(matches!(masked_conv_oracle(&x, &w, &other_k), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn unfold_path_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 3, 7, 15] {
            let t = rng.random_range(1..40);
            let x = random(&mut rng, &[t, 6]);
            let w = random_module(&mut rng, 6, k);
            let (y, plan) = dmc_train_forward(&x, &w, &mut rng).unwrap();
            let o = masked_conv_oracle(&x, &w, &plan).unwrap();
            assert!(y.max_abs_diff(&o) <= 1e-6, "k={k}");
        }
    }

    #[test]
    fn zero_plan_reproduces_reference_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[23, 5]);
        let w = random_module(&mut rng, 5, 7);
        let plan = FutureMaskPlan::unmasked(7, 23).unwrap();
        assert_eq!(
            dmc_forward_with_plan(&x, &w, &plan).unwrap(),
            conv1d_reference(&x, &w).unwrap()
        );
    }

    #[test]
    fn single_frame_with_future_masked() {
        let x = seq(&[2.0]);
        let w = taps(&[0.5, 3.0, 7.0]);
        let plan = FutureMaskPlan::new(3, vec![1]).unwrap();
        assert_eq!(dmc_forward_with_plan(&x, &w, &plan).unwrap().data(), &[6.0]);
    }

    #[test]
    fn streaming_example() {
        let w = taps(&[1.0, 1.0, 1.0]);
        let mut cache = ConvCache::new(1, 3);
        let a = conv_streaming_step(&mut cache, &seq(&[1.0, 2.0]), &w).unwrap();
        let b = conv_streaming_step(&mut cache, &seq(&[3.0, 4.0]), &w).unwrap();
        assert_eq!(a.data(), &[3.0, 3.0]);
        assert_eq!(b.data(), &[9.0, 7.0]);
        assert_eq!(cache.frames_seen(), 4);
    }

    #[test]
    fn streaming_matches_chunk_plan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for c in [1, 2, 3, 5, 8] {
            for k in [3, 7, 15] {
                let t = rng.random_range(1..=64);
                let x = random(&mut rng, &[t, 4]);
                let w = random_module(&mut rng, 4, k);
                let spec = ChunkSpec::frames(c).unwrap();
                let n: Vec<usize> = (0..t)
                    .map(|i| (i + k / 2).saturating_sub(last_visible_index(i, &spec, t)))
                    .collect();
                let plan = FutureMaskPlan::new(k, n).unwrap();
                let oracle = masked_conv_oracle(&x, &w, &plan).unwrap();
                let mut cache = ConvCache::new(4, k);
                let parts: Vec<Tensor> = (0..t)
                    .step_by(c)
                    .map(|s| conv_streaming_step(&mut cache, &x.slice_rows(s, (s + c).min(t)), &w).unwrap())
                    .collect();
                let streamed = Tensor::concat_rows(&parts).unwrap();
                assert!(streamed.max_abs_diff(&oracle) <= 1e-6, "c={c} k={k}");
            }
        }
    }

    #[test]
    fn single_chunk_equals_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[9, 4]);
        let w = random_module(&mut rng, 4, 7);
        let mut cache = ConvCache::new(4, 7);
        assert_eq!(
            conv_streaming_step(&mut cache, &x, &w).unwrap(),
            conv1d_reference(&x, &w).unwrap()
        );
    }

    #[test]
    fn identity_kernel_streams_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, &[11, 1]);
        let w = taps(&[0.0, 0.0, 1.0, 0.0, 0.0]);
        let mut cache = ConvCache::new(1, 5);
        let parts: Vec<Tensor> = (0..11)
            .step_by(3)
            .map(|s| conv_streaming_step(&mut cache, &x.slice_rows(s, (s + 3).min(11)), &w).unwrap())
            .collect();
        assert_eq!(Tensor::concat_rows(&parts).unwrap(), x);
    }

    #[test]
    fn raising_one_mask_only_changes_that_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[12, 3]);
        let w = random_module(&mut rng, 3, 7);
        let base = FutureMaskPlan::sample(7, 12, &mut rng).unwrap();
        let y0 = masked_conv_oracle(&x, &w, &base).unwrap();
        for t in 0..12 {
            let mut n = base.n_per_frame().to_vec();
            if n[t] == 3 {
                continue;
            }
            n[t] += 1;
            let y1 = masked_conv_oracle(&x, &w, &FutureMaskPlan::new(7, n).unwrap()).unwrap();
            for i in (0..12).filter(|&i| i != t) {
                assert_eq!(y0.row(i), y1.row(i));
            }
        }
    }

    #[test]
    fn empty_chunk_rejected() {
        let mut cache = ConvCache::new(1, 3);
        assert!(matches!(
            conv_streaming_step(&mut cache, &Tensor::zeros(&[0, 1]), &taps(&[1.0, 1.0, 1.0])),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn dual_mode_picks_branch() {
        let a = ConvWeights::zeros(2, 3).unwrap();
        let mut b = a.clone();
        b.depthwise.data_mut()[0] = 1.0;
        let dual = DualModeConv::new(a.clone(), b.clone()).unwrap();
        assert_eq!(dual.branch(Mode::Streaming), &a);
        assert_eq!(dual.branch(Mode::NonStreaming), &b);
        assert!(DualModeConv::new(a, ConvWeights::zeros(2, 5).unwrap()).is_err());
    }
}
