use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taco_core::compressor::KRounding;
use taco_core::infer::cost::{cost_model, CostQuery, FlopCountsDto};
use taco_core::infer::{
    baselines::{baseline_knn, baseline_random, knn_indices},
    chunk_and_stitch, chunk_policy, fit, ChunkPlan, FitOptions, Mode,
};
use taco_core::memory::measure_peak;
use taco_core::model::TacoModel;
use taco_core::predictor::{build_kv_cache, embed_context, embed_queries, predict_cached, predict_from_table};
use taco_core::tab2d::EagerBackend;
use taco_core::{ModelConfig, Table};
use taco_tensor::flops;

fn random_table(n: usize, m: usize, c: usize, rng: &mut impl Rng) -> Table {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.random_range(0..c) }).collect();
    Table::from_numeric(&rows, Some((&labels, c))).unwrap()
}

fn features(n: usize, m: usize, rng: &mut impl Rng) -> Table {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    Table::from_numeric(&rows, None).unwrap()
}

#[test]
fn chunk_policy_examples() {
    assert_eq!(chunk_policy(748), 500);
    assert_eq!(chunk_policy(12_330), 5000);
    assert_eq!(chunk_policy(150_000), 10_000);
    let p = ChunkPlan::new(1_000_000, 10_000, 0.01, 1).unwrap();
    assert_eq!((p.bounds.len(), p.total_k()), (100, 10_000));
}

/// Reference stitched row counts at a 0.1% rate, keyed by table
/// size. They follow from an 80/20 split (train rows floored), the chunk
/// size chosen from the full table size and per-chunk counts rounded up.
const REFERENCE_K: [(usize, usize); 38] = [
    (748, 2), (768, 2), (898, 2), (1000, 2), (1014, 2), (1054, 2), (1353, 3), (1500, 3), (1699, 3),
    (1723, 3), (2240, 2), (2400, 2), (2584, 3), (3190, 3), (3751, 3), (3845, 4), (4424, 4), (5000, 4),
    (5910, 5), (6819, 6), (7491, 6), (9822, 8), (10000, 8), (10459, 9), (10885, 9), (10999, 9),
    (12330, 10), (12684, 11), (19158, 16), (30000, 24), (32769, 27), (45211, 37), (50000, 40),
    (71518, 58), (76000, 61), (78053, 63), (129880, 104), (150000, 120),
];

#[test]
fn stitched_counts_match_reference_values() {
    for (rows, k) in REFERENCE_K {
        let train = rows * 4 / 5;
        let plan = ChunkPlan::with_rounding(train, chunk_policy(rows), 0.001, 1, KRounding::Up).unwrap();
        assert_eq!(plan.total_k(), k, "{rows} rows");
    }
    // The two boundary cases also hold with the default half-up rounding.
    for (rows, k) in [(748, 2), (150_000, 120)] {
        let plan = ChunkPlan::new(rows * 4 / 5, chunk_policy(rows), 0.001, 1).unwrap();
        assert_eq!(plan.total_k(), k);
    }
}

#[test]
fn stitched_rows_equal_sum_of_chunks() {
    let m = TacoModel::init(&ModelConfig::tiny(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let train = random_table(1234, 3, 2, &mut rng);
    let plan = ChunkPlan::new(1234, 500, 0.01, 1).unwrap();
    let ctx = chunk_and_stitch(&train, &plan, &m, &mut rng).unwrap();
    assert_eq!(ctx.k(), plan.ks.iter().sum::<usize>());
    assert_eq!(ctx.n_train, 1234);
    let mut covered: Vec<usize> = plan.bounds.iter().flat_map(|&(s, e)| s..e).collect();
    covered.dedup();
    assert_eq!(covered, (0..1234).collect::<Vec<_>>());
}

#[test]
fn chunked_fit_memory_does_not_grow_with_rows() {
    let m = TacoModel::init(&ModelConfig::tiny(), 3).unwrap();
    let peak = |n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let train = random_table(n, 4, 2, &mut rng);
        let plan = ChunkPlan::new(n, 200, 0.02, 1).unwrap();
        let (ctx, bytes) = measure_peak(|| chunk_and_stitch(&train, &plan, &m, &mut rng).unwrap());
        assert_eq!(ctx.k(), plan.total_k());
        bytes
    };
    let (small, large) = (peak(400), peak(4000));
    assert!((large as f64) <= 2.0 * small as f64, "{small} -> {large}");
}

#[test]
fn batches_are_independent_of_submission_order() {
    let m = TacoModel::init(&ModelConfig::tiny(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let train = random_table(80, 3, 3, &mut rng);
    let batches: Vec<Table> = (0..4).map(|_| features(7, 3, &mut rng)).collect();
    for (mode, kv) in [(Mode::Taco, true), (Mode::Taco, false), (Mode::Pot, true), (Mode::Random, false), (Mode::Knn, false)] {
        let opts = FitOptions {
            mode,
            kv_cache: kv,
            rate: 0.1,
            ..FitOptions::default()
        };
        let run = |order: &[usize]| {
            let (state, _) = fit(&m, &train, &opts).unwrap();
            let mut out = vec![Vec::new(); batches.len()];
            for &b in order {
                out[b] = state.predict(&m, &batches[b]).unwrap().0.data().to_vec();
            }
            out
        };
        assert_eq!(run(&[0, 1, 2, 3]), run(&[3, 1, 0, 2]), "{mode}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cached_and_uncached_predictions_agree(
        n in 2usize..96, m in 1usize..8, k in 1usize..16, c in 2usize..5, seed in 0u64..1000,
    ) {
        let k = k.min(n);
        let model = TacoModel::init(&ModelConfig::tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = random_table(n.max(c), m, c, &mut rng);
        let test = features(9, m, &mut rng);
        let rate = k as f64 / train.n_rows() as f64;
        let probs = |kv_cache: bool| {
            let opts = FitOptions { rate, kv_cache, seed, ..FitOptions::default() };
            let (state, _) = fit(&model, &train, &opts).unwrap();
            prop_assert_eq!(state.k, k);
            Ok(state.predict(&model, &test).unwrap().0)
        };
        let (a, b) = (probs(true)?, probs(false)?);
        prop_assert!(a.max_abs_diff(&b) < 1e-5);
    }
}

#[test]
fn cost_model_matches_counted_work() {
    let cfg = ModelConfig::tiny();
    let model = TacoModel::init(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let train = random_table(64, 8, 2, &mut rng);
    let test = features(16, 8, &mut rng);
    let q = |context_rows, cached| CostQuery {
        context_rows,
        features: 8,
        test_rows: 16,
        cached,
    };

    let (_, counted) = flops::measure(|| {
        let mut be = EagerBackend::new(&model.store, &cfg);
        predict_from_table(&mut be, &model, &train, train.labels().unwrap(), &test, 2).unwrap()
    });
    assert_eq!(FlopCountsDto::from(counted), cost_model(&cfg, q(64, false)).counts);

    let mut be = EagerBackend::new(&model.store, &cfg);
    let ctx = embed_context(&mut be, &model, &train, train.labels().unwrap()).unwrap();
    let cache = build_kv_cache(&model, &ctx).unwrap();
    let queries = embed_queries(&mut be, &model, &test).unwrap();
    let (_, counted) = flops::measure(|| predict_cached(&model, &cache, &queries, 2).unwrap());
    let est = cost_model(&cfg, q(64, true));
    assert_eq!(FlopCountsDto::from(counted), est.counts);
    assert_eq!(est.cache_bytes as usize, cache.size_bytes());
}

#[test]
fn random_subsets_keep_class_proportions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64]).collect();
    let labels: Vec<usize> = (0..200).map(|i| usize::from(i % 10 < 3)).collect();
    let train = Table::from_numeric(&rows, Some((&labels, 2))).unwrap();
    let mut share = 0.0;
    for _ in 0..1000 {
        let sub = baseline_random(&train, 100, &mut rng).unwrap();
        share += sub.labels().unwrap().iter().filter(|&&y| y == 1).count() as f64 / 100.0;
    }
    share /= 1000.0;
    assert!((share - 0.3).abs() < 0.05, "{share}");
    let all = baseline_random(&train, 200, &mut rng).unwrap();
    let mut seen: Vec<f64> = all.cells().to_vec();
    seen.sort_by(f64::total_cmp);
    assert_eq!(seen, (0..200).map(|i| i as f64).collect::<Vec<_>>());
}

/// Indices of the `k` nearest rows to `q` by exhaustive search.
fn nearest(train: &[[f64; 2]], q: [f64; 2], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, r)| ((r[0] - q[0]).powi(2) + (r[1] - q[1]).powi(2), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0));
    d.into_iter().take(k).map(|x| x.1).collect()
}

#[test]
fn knn_union_on_hand_geometry() {
    let pts = [[-1.0, 0.0], [0.0, 1.5], [9.0, 0.0], [10.0, 1.5], [5.0, 5.0], [20.0, -3.0]];
    let queries = [[0.0, 0.0], [10.0, 0.0]];
    let rows: Vec<Vec<f64>> = pts.iter().map(|p| p.to_vec()).collect();
    let train = Table::from_numeric(&rows, Some((&[0, 1, 0, 1, 0, 1], 2))).unwrap();
    let test = Table::from_numeric(&queries.iter().map(|p| p.to_vec()).collect::<Vec<_>>(), None).unwrap();
    let mut expected: Vec<usize> = queries.iter().flat_map(|&q| nearest(&pts, q, 2)).collect();
    expected.sort_unstable();
    expected.dedup();
    assert_eq!(expected.len(), 4);
    for seed in 0..5 {
        let got = knn_indices(&train, &test, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(got, expected);
    }
    let one = Table::from_numeric(&[queries[0].to_vec()], None).unwrap();
    let mut want = nearest(&pts, queries[0], 3);
    want.sort_unstable();
    assert_eq!(knn_indices(&train, &one, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), want);
    assert_eq!(baseline_knn(&train, &test, 6, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), train);
}

#[test]
fn fit_rejects_bad_rates() {
    let m = TacoModel::init(&ModelConfig::tiny(), 0).unwrap();
    let train = random_table(10, 2, 2, &mut ChaCha8Rng::seed_from_u64(0));
    for rate in [0.0, -0.1, 1.5] {
        let opts = FitOptions {
            rate,
            ..FitOptions::default()
        };
        assert!(matches!(fit(&m, &train, &opts), Err(taco_core::Error::Config(_))));
    }
}
