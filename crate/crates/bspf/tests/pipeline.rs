//! Cross-module pipeline behavior: dense equivalence, symmetry, and
//! determinism.

use bspf::{
    bspf_attention, dense_attention, fixture_tokens, project, run_pipeline, BspfConfig,
    ConvKernel, FusionSource, Matrix, Normalization, ProjectionWeights, SimilarityMetric,
};

fn config(omega: usize, keep: f64, shared: bool) -> BspfConfig {
    let mut c = BspfConfig::new(omega, keep);
    c.shared_qk = shared;
    c
}

#[test]
fn keep_one_reproduces_dense_attention() {
    for seed in 0..20u64 {
        for (n, d, omega) in [(8, 4, 4), (16, 4, 8), (16, 16, 4), (8, 8, 8)] {
            for shared in [false, true] {
                let tokens = fixture_tokens(seed, n, d);
                let weights = ProjectionWeights::fixture(seed.wrapping_add(500), d, shared);
                let dense = dense_attention(&tokens, &weights).unwrap();
                let (out, stats) =
                    bspf_attention(&tokens, &weights, &config(omega, 1.0, shared)).unwrap();
                let diff = out.max_abs_diff(&dense);
                assert!(
                    diff < 1e-9,
                    "seed {} n {} d {} omega {} shared {}: diff {}",
                    seed,
                    n,
                    d,
                    omega,
                    shared,
                    diff
                );
                assert_eq!(stats.retained_fraction, 1.0);
            }
        }
    }
}

#[test]
fn single_chunk_equals_dense_path() {
    let tokens = fixture_tokens(3, 8, 4);
    let weights = ProjectionWeights::fixture(4, 4, true);
    let dense = dense_attention(&tokens, &weights).unwrap();
    let (out, _) = bspf_attention(&tokens, &weights, &config(8, 1.0, true)).unwrap();
    assert!(out.max_abs_diff(&dense) < 1e-9);
}

#[test]
fn dense_attention_is_partition_independent() {
    let tokens = fixture_tokens(5, 16, 4);
    let weights = ProjectionWeights::fixture(6, 4, true);
    let (a, _) = bspf_attention(&tokens, &weights, &config(4, 1.0, true)).unwrap();
    let (b, _) = bspf_attention(&tokens, &weights, &config(8, 1.0, true)).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-9);
}

#[test]
fn outputs_stay_in_value_envelope() {
    for seed in 0..10u64 {
        let tokens = fixture_tokens(seed, 16, 4);
        let weights = ProjectionWeights::fixture(seed.wrapping_add(77), 4, true);
        let proj = project(&tokens, &weights).unwrap();
        let (out, _) = bspf_attention(&tokens, &weights, &config(4, 0.5, true)).unwrap();
        for t in 0..4 {
            let lo = (0..16)
                .map(|i| proj.v.get(i, t))
                .fold(f64::INFINITY, f64::min);
            let hi = (0..16)
                .map(|i| proj.v.get(i, t))
                .fold(f64::NEG_INFINITY, f64::max);
            for i in 0..16 {
                let v = out.get(i, t);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn shared_support_is_symmetric() {
    for seed in 0..10u64 {
        let tokens = fixture_tokens(seed, 16, 4);
        let weights = ProjectionWeights::fixture(seed.wrapping_add(31), 4, true);
        let run = run_pipeline(&tokens, &weights, &config(4, 0.5, true)).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(run.support.get(i, j), run.support.get(j, i));
            }
        }
    }
}

#[test]
fn retained_fraction_is_monotone_in_keep_ratio() {
    let tokens = fixture_tokens(9, 16, 4);
    let weights = ProjectionWeights::fixture(10, 4, true);
    let mut prev = 0.0;
    for keep in [0.25, 0.4, 0.5, 0.75, 0.9, 1.0] {
        let (_, stats) = bspf_attention(&tokens, &weights, &config(4, keep, true)).unwrap();
        assert!(stats.retained_fraction >= prev);
        prev = stats.retained_fraction;
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let tokens = fixture_tokens(11, 16, 4);
    let weights = ProjectionWeights::fixture(12, 4, true);
    let cfg = config(4, 0.5, true);
    let a = run_pipeline(&tokens, &weights, &cfg).unwrap();
    let b = run_pipeline(&tokens, &weights, &cfg).unwrap();
    assert_eq!(a.output.data(), b.output.data());
    assert_eq!(a.attention.data(), b.attention.data());
    assert_eq!(a.stats.fusion_events, b.stats.fusion_events);
    assert_eq!(a.stats.retained_fraction, b.stats.retained_fraction);
}

#[test]
fn thread_count_does_not_change_results() {
    let tokens = fixture_tokens(13, 32, 8);
    let weights = ProjectionWeights::fixture(14, 8, true);
    let cfg = config(8, 0.5, true);
    let pool1 = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let pool4 = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    let a = pool1.install(|| run_pipeline(&tokens, &weights, &cfg).unwrap());
    let b = pool4.install(|| run_pipeline(&tokens, &weights, &cfg).unwrap());
    assert_eq!(a.output.data(), b.output.data());
    assert_eq!(a.stats.fusion_events, b.stats.fusion_events);
    assert_eq!(
        a.stats.mirror_mask_disagreement,
        b.stats.mirror_mask_disagreement
    );
}

#[test]
fn explicit_weight_copy_matches_shared_fast_path() {
    // Copying w_q into w_k by hand and running the unshared path must agree
    // with the mirrored fast path as long as the kernel is symmetric.
    for seed in 0..10u64 {
        let tokens = fixture_tokens(seed, 16, 4);
        let shared = ProjectionWeights::fixture(seed.wrapping_add(63), 4, true);
        let copied = ProjectionWeights::new(
            shared.w_q().clone(),
            shared.w_q().clone(),
            shared.w_v().clone(),
            false,
        )
        .unwrap();
        let (fast, _) = bspf_attention(&tokens, &shared, &config(4, 0.5, true)).unwrap();
        let (slow, _) = bspf_attention(&tokens, &copied, &config(4, 0.5, false)).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-9);
    }
}

#[test]
fn per_block_rows_are_stochastic() {
    let tokens = fixture_tokens(15, 16, 4);
    let weights = ProjectionWeights::fixture(16, 4, true);
    let mut cfg = config(4, 0.5, true);
    cfg.normalization = Normalization::PerBlock;
    let run = run_pipeline(&tokens, &weights, &cfg).unwrap();
    for i in 0..16 {
        let sum: f64 = run.attention.row(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "row {} sums to {}", i, sum);
    }
}

#[test]
fn pruned_diagonal_still_yields_distributions() {
    // With every block pruned, some rows may lose all entries and fall back
    // to uniform diagonal weight; rows must still sum to 1.
    let tokens = fixture_tokens(17, 16, 4);
    let weights = ProjectionWeights::fixture(18, 4, true);
    let mut cfg = config(4, 0.25, true);
    cfg.prune_diagonal = true;
    let run = run_pipeline(&tokens, &weights, &cfg).unwrap();
    for i in 0..16 {
        let sum: f64 = run.attention.row(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn pipeline_with_active_fusion_stays_stochastic() {
    // Positive tokens and weights force positive logits, which makes the
    // fusion guard pass and actually transfers pruned mass.
    let raw = fixture_tokens(19, 16, 4);
    let mut data = Vec::new();
    for i in 0..16 {
        for t in 0..4 {
            data.push(raw.get(i, t).abs() + 0.1);
        }
    }
    let tokens = Matrix::from_vec(16, 4, data).unwrap();
    let mut w = [0.0; 9];
    w[4] = 1.0;
    let mut cfg = config(4, 0.5, true);
    cfg.kernel = ConvKernel::new(w).unwrap();
    cfg.fusion_source = FusionSource::SelfRow;
    cfg.metric = SimilarityMetric::Cosine;
    // Nonnegative weights keep Q, K, V entrywise positive.
    let wq = Matrix::from_vec(
        4,
        4,
        (0..16).map(|i| 0.1 + (i as f64) * 0.05).collect(),
    )
    .unwrap();
    let weights = ProjectionWeights::new(wq.clone(), wq.clone(), wq, true).unwrap();
    let run = run_pipeline(&tokens, &weights, &cfg).unwrap();
    assert!(run.stats.fusion_events > 0, "fixture should trigger fusion");
    for i in 0..16 {
        let sum: f64 = run.attention.row(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}
