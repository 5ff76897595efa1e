use std::collections::HashSet;

use proptest::prelude::*;
use sqz_core::corpus::{generate_synthetic_corpus, generate_user_histories};
use sqz_core::rq::train_codebooks;
use sqz_core::serving::{
    cached_mha_forward, generate_replay, mha_forward, KvCache, MhaConfig, MhaParams, QueryCache, QueryCacheConfig,
    ReplayConfig, ReplayRecord, RequestWindow, ServingConfig, ServingSimulator,
};
use sqz_core::{ItemCorpus, Matrix, RqConfig, SyntheticConfig, VotingConfig};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn attention_case() -> impl Strategy<Value = (Matrix<f64>, Matrix<f64>, MhaConfig, bool)> {
    (1usize..6, 1usize..8, 1usize..5, 1usize..4, 1usize..5, any::<u64>(), any::<bool>()).prop_flat_map(
        |(d, m, k, heads, head_dim, seed, kv)| {
            let cfg = MhaConfig { heads, head_dim, output_dim: 3, seed };
            (matrix(m, d), matrix(k, d), Just(cfg), Just(kv))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn cached_attention_matches_vanilla((cands, comp, cfg, kv_reuse) in attention_case()) {
        let params = MhaParams::seeded(cands.cols(), &cfg).unwrap();
        let plain = mha_forward(&cands, &comp, &params).unwrap();
        for w in &plain.weights {
            for row in w.iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        // Repeated ids hit the cache on the second occurrence.
        let ids: Vec<u64> = (0..cands.rows() as u64).collect();
        let cache = QueryCache::new(QueryCacheConfig::unbounded());
        let mut kv = KvCache::new();
        for request in 0..2u64 {
            let window = RequestWindow { user_id: 1, request };
            let (out, stats) = cached_mha_forward(
                &ids, &cands, &comp, &params, &cache, kv_reuse.then_some((&mut kv, window)),
            ).unwrap();
            let expected_hits = if request == 0 { 0 } else { ids.len() };
            prop_assert_eq!(stats.query_hits, expected_hits);
            prop_assert_eq!(stats.kv_passes, if kv_reuse { 1 } else { ids.len() });
            for (a, b) in out.output.as_slice().iter().zip(plain.output.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn zipf_candidate_stream_has_high_hit_rate() {
    let n = 10_000;
    let corpus = ItemCorpus::new(
        (0..n as u64).collect(),
        Matrix::from_vec(n, 1, vec![0.0; n]).unwrap(),
        Matrix::from_vec(n, 4, (0..4 * n).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap(),
    )
    .unwrap();
    let cfg = ReplayConfig { requests: 1000, candidates_per_request: 50, pool_size: n, seed: 3, ..ReplayConfig::default() };
    let replay = generate_replay(&cfg, &[1, 2, 3], &corpus).unwrap();

    // Oracle: every first occurrence of an id misses, every repeat hits.
    const WARMUP: usize = 100;
    let mut seen = HashSet::new();
    let (mut oracle_hits, mut hits, mut total) = (0, 0, 0);
    let params = MhaParams::seeded(4, &MhaConfig { heads: 1, head_dim: 2, output_dim: 2, seed: 0 }).unwrap();
    let cache = QueryCache::new(QueryCacheConfig::unbounded());
    let comp = Matrix::from_vec(2, 4, vec![0.1; 8]).unwrap();
    for (i, r) in replay.iter().enumerate() {
        let repeats = r.candidate_ids.iter().filter(|&&id| !seen.insert(id)).count();
        let rows: Vec<usize> = r.candidate_ids.iter().map(|&id| id as usize).collect();
        let cands = corpus.ranking().select_rows(&rows).to_f64();
        let (_, stats) = cached_mha_forward(&r.candidate_ids, &cands, &comp, &params, &cache, None).unwrap();
        assert_eq!(stats.query_hits, repeats);
        if i >= WARMUP {
            oracle_hits += repeats;
            hits += stats.query_hits;
            total += r.candidate_ids.len();
        }
    }
    let rate = hits as f64 / total as f64;
    assert_eq!(hits, oracle_hits);
    assert!(rate > 0.9, "hit rate {rate}");
}

struct World {
    corpus: ItemCorpus,
    stack: sqz_core::CodebookStack,
    histories: Vec<sqz_core::InteractionSequence>,
}

fn world() -> World {
    let cfg = SyntheticConfig {
        num_coarse_clusters: 3,
        num_fine_per_coarse: 3,
        items_per_fine: 6,
        semantic_dim: 4,
        ranking_dim: 3,
        num_users: 3,
        history_length: 40,
        ..SyntheticConfig::default()
    };
    let (corpus, truth) = generate_synthetic_corpus(&cfg).unwrap();
    let histories = generate_user_histories(&cfg, &corpus, Some(&truth)).unwrap();
    let stack = train_codebooks(corpus.semantic(), &RqConfig { codebook_sizes: vec![4, 4], epochs: 5, ..RqConfig::default() })
        .unwrap();
    World { corpus, stack, histories }
}

fn requests(w: &World, user: u64, times: &[i64]) -> Vec<ReplayRecord> {
    let start = w.histories.iter().flat_map(|h| h.events()).map(|e| e.timestamp).max().unwrap() + 1;
    times
        .iter()
        .map(|&t| ReplayRecord { timestamp: start + t, user_id: user, candidate_ids: w.corpus.ids()[..5].to_vec() })
        .collect()
}

fn serving_cfg(period: i64) -> ServingConfig {
    ServingConfig {
        agent_refresh_period: period,
        voting: VotingConfig::new(vec![3, 2]),
        attention: MhaConfig { heads: 2, head_dim: 4, output_dim: 4, seed: 1 },
        ..ServingConfig::default()
    }
}

#[test]
fn agents_rebuild_on_the_refresh_period() {
    let w = world();
    let user = w.histories[0].user_id();
    let reqs = requests(&w, user, &[0, 10]);

    let mut sim = ServingSimulator::new(&w.corpus, &w.stack, &w.histories, serving_cfg(100)).unwrap();
    let report = sim.run(&reqs).unwrap();
    assert_eq!(report.agent_builds, 1);
    assert_eq!(report.requests.iter().map(|r| r.agents_rebuilt).collect::<Vec<_>>(), [true, false]);

    let mut sim = ServingSimulator::new(&w.corpus, &w.stack, &w.histories, serving_cfg(0)).unwrap();
    let report = sim.run(&reqs).unwrap();
    assert_eq!(report.agent_builds, 2);

    let mut sim = ServingSimulator::new(&w.corpus, &w.stack, &w.histories, serving_cfg(10)).unwrap();
    assert_eq!(sim.run(&requests(&w, user, &[0, 9, 10, 15])).unwrap().agent_builds, 2);
}

#[test]
fn cache_hits_reduce_flops_without_changing_scores() {
    let w = world();
    let user = w.histories[1].user_id();
    let mut sim = ServingSimulator::new(&w.corpus, &w.stack, &w.histories, serving_cfg(100)).unwrap();
    let report = sim.run(&requests(&w, user, &[0, 1, 2])).unwrap();
    assert!(report.max_divergence < 1e-9);
    assert_eq!(report.requests[0].cache.query_hits, 0);
    for r in &report.requests[1..] {
        assert_eq!(r.cache.query_hits, 5);
        assert!(r.cached.total < r.vanilla.total);
        assert!(r.cached.projection_flops < r.vanilla.projection_flops);
    }
    assert!(report.cached_total.total < report.vanilla_total.total);
    assert!((report.hit_rate - 10.0 / 15.0).abs() < 1e-12);
}

#[test]
fn requests_before_any_history_are_skipped() {
    let w = world();
    let user = w.histories[2].user_id();
    let first = w.histories[2].events()[0].timestamp;
    let reqs = vec![ReplayRecord { timestamp: first - 1, user_id: user, candidate_ids: vec![w.corpus.ids()[0]] }];
    let mut sim = ServingSimulator::new(&w.corpus, &w.stack, &w.histories, serving_cfg(100)).unwrap();
    let report = sim.run(&reqs).unwrap();
    assert_eq!(report.skipped_requests, 1);
    assert!(report.requests.is_empty());
}
