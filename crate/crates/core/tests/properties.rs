use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use streamvc::attention::{masked_softmax, quiet_softmax};
use streamvc::conv::{conv1d_reference, conv_streaming_step, dmc_forward_with_plan, ConvCache, ConvWeights};
use streamvc::io::FeatureFile;
use streamvc::masking::{
    build_chunk_attention_mask, last_visible_index, sample_dmc_n, FutureMaskPlan,
};
use streamvc::tensor::{layer_norm, matmul, LAYER_NORM_EPS};
use streamvc::{ChunkSpec, Tensor};

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f32..2.0, rows * cols)
        .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn sized_tensor(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (0..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| tensor(r, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matmul_is_associative(a in tensor(5, 4), b in tensor(4, 6), c in tensor(6, 3)) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-3);
    }

    #[test]
    fn matmul_rows_do_not_depend_on_batch(a in sized_tensor(12, 8), seed in any::<u64>()) {
        let b = {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = a.cols() * 5;
            Tensor::new(vec![a.cols(), 5], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let whole = matmul(&a, &b).unwrap();
        for i in 0..a.rows() {
            let single = matmul(&a.slice_rows(i, i + 1), &b).unwrap();
            prop_assert_eq!(single.row(0), whole.row(i));
        }
    }

    #[test]
    fn layer_norm_ignores_row_shift(x in sized_tensor(6, 16), shift in -50.0f32..50.0) {
        prop_assume!(x.cols() > 1);
        let d = x.cols();
        for i in 0..x.rows() {
            let r = x.row(i);
            let mean = r.iter().sum::<f32>() / d as f32;
            prop_assume!(r.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / d as f32 > 0.05);
        }
        let ones = Tensor::filled(&[d], 1.0);
        let zeros = Tensor::zeros(&[d]);
        let mut shifted = x.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += shift);
        let a = layer_norm(&x, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        let b = layer_norm(&shifted, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 2e-2);
    }

    #[test]
    fn quiet_weights_bounded_and_below_softmax(
        row in prop::collection::vec(-40.0f32..40.0, 1..48),
        vis_bits in any::<u64>(),
    ) {
        let vis: Vec<bool> = (0..row.len()).map(|i| vis_bits >> (i % 64) & 1 == 1).collect();
        let q = quiet_softmax(&row, &vis);
        let total: f32 = q.iter().sum();
        prop_assert!(total <= 1.0 + 1e-5);
        for (w, v) in q.iter().zip(&vis) {
            prop_assert!(*w >= 0.0);
            if !v {
                prop_assert_eq!(*w, 0.0);
            }
        }
        match masked_softmax(&row, &vis) {
            Ok(s) => {
                prop_assert!((s.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
                for (a, b) in q.iter().zip(&s) {
                    prop_assert!(*a <= *b + 1e-6);
                }
            }
            Err(_) => prop_assert!(vis.iter().all(|v| !v)),
        }
    }

    #[test]
    fn quiet_weights_invariant_to_logit_shift_when_dominant(
        row in prop::collection::vec(-5.0f32..5.0, 1..32),
    ) {
        // Far above zero the extra slot vanishes and quiet softmax turns
        // into plain softmax, which is shift invariant.
        let up: Vec<f32> = row.iter().map(|v| v + 60.0).collect();
        let vis = vec![true; row.len()];
        let q = quiet_softmax(&up, &vis);
        let s = masked_softmax(&row, &vis).unwrap();
        for (a, b) in q.iter().zip(&s) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn chunk_mask_is_block_lower_triangular(t in 1usize..60, c in 1usize..=20, cap in prop::option::of(0usize..4)) {
        let spec = ChunkSpec::frames(c).unwrap().with_left_chunks(cap);
        let mask = build_chunk_attention_mask(t, &spec);
        for i in 0..t {
            prop_assert!(mask.is_visible(i, i));
            for j in 0..t {
                let diff = (i / c) as isize - (j / c) as isize;
                let expect = diff >= 0 && cap.is_none_or(|n| diff as usize <= n);
                prop_assert_eq!(mask.is_visible(i, j), expect);
            }
            let last = last_visible_index(i, &spec, t);
            prop_assert_eq!(last, ((i / c + 1) * c - 1).min(t - 1));
        }
    }

    #[test]
    fn dmc_draws_stay_in_range(k in (0usize..8).prop_map(|h| 2 * h + 1), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..64 {
            let n = sample_dmc_n(k, &mut rng).unwrap();
            prop_assert!(n <= k / 2);
        }
    }

    #[test]
    fn chunk_plan_never_reads_past_chunk_end(t in 1usize..80, c in 1usize..=20, h in 0usize..8) {
        let k = 2 * h + 1;
        let plan = FutureMaskPlan::from_chunk(k, t, &ChunkSpec::frames(c).unwrap()).unwrap();
        for (i, &n) in plan.n_per_frame().iter().enumerate() {
            prop_assert!(n <= h);
            let reach = i + h - n;
            let end = ((i / c + 1) * c - 1).min(t - 1);
            prop_assert!(reach <= end.max(i), "frame {} reaches {} past {}", i, reach, end);
        }
    }

    #[test]
    fn streaming_conv_matches_planned_conv(
        x in sized_tensor(40, 6),
        c in 1usize..10,
        h in 0usize..5,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        prop_assume!(x.rows() > 0);
        let (t, d) = x.dims2().unwrap();
        let k = 2 * h + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taps = Tensor::new(vec![d, k], (0..d * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = ConvWeights::depthwise_only(taps).unwrap();
        let plan = FutureMaskPlan::from_chunk(k, t, &ChunkSpec::frames(c).unwrap()).unwrap();
        let full = dmc_forward_with_plan(&x, &w, &plan).unwrap();
        let mut cache = ConvCache::new(d, k);
        let parts: Vec<Tensor> = (0..t)
            .step_by(c)
            .map(|s| conv_streaming_step(&mut cache, &x.slice_rows(s, (s + c).min(t)), &w).unwrap())
            .collect();
        let streamed = Tensor::concat_rows(&parts).unwrap();
        prop_assert!(streamed.max_abs_diff(&full) <= 1e-5);
    }

    #[test]
    fn unmasked_plan_is_plain_convolution(x in sized_tensor(30, 5), h in 0usize..5) {
        prop_assume!(x.rows() > 0);
        let (t, d) = x.dims2().unwrap();
        let k = 2 * h + 1;
        let taps = Tensor::filled(&[d, k], 0.25);
        let w = ConvWeights::depthwise_only(taps).unwrap();
        let plan = FutureMaskPlan::unmasked(k, t).unwrap();
        prop_assert_eq!(dmc_forward_with_plan(&x, &w, &plan).unwrap(), conv1d_reference(&x, &w).unwrap());
    }

    #[test]
    fn feature_file_round_trip_is_byte_identical(frames in sized_tensor(30, 12), shift in 1.0f32..40.0) {
        let f = FeatureFile { frame_shift_ms: shift, frames };
        let bytes = f.encode().unwrap();
        let back = FeatureFile::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &f);
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn truncated_feature_files_are_rejected(frames in sized_tensor(10, 4), cut in 1usize..16) {
        let bytes = FeatureFile::new(frames).encode().unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(FeatureFile::decode(&bytes[..keep]).is_err());
    }
}
