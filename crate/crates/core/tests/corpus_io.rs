use proptest::prelude::*;
use sqz_core::corpus::{
    generate_synthetic_corpus, generate_user_histories, load_embeddings, read_events, save_embeddings,
    write_events, EmbeddingFormat,
};
use sqz_core::{InteractionEvent, InteractionSequence, ItemCorpus, Matrix, SyntheticConfig};

fn corpus_strategy() -> impl Strategy<Value = ItemCorpus> {
    (1usize..12, 1usize..5, 1usize..4).prop_flat_map(|(n, d, dp)| {
        (
            prop::collection::hash_set(any::<u64>(), n),
            prop::collection::vec(-1e6f32..1e6, n * d),
            prop::collection::vec(-1e6f32..1e6, n * dp),
        )
            .prop_map(move |(ids, sem, rank)| {
                ItemCorpus::new(
                    ids.into_iter().collect(),
                    Matrix::from_vec(n, d, sem).unwrap(),
                    Matrix::from_vec(n, dp, rank).unwrap(),
                )
                .unwrap()
            })
    })
}

fn histories_strategy() -> impl Strategy<Value = Vec<InteractionSequence>> {
    prop::collection::btree_map(
        any::<u64>(),
        prop::collection::vec((any::<u64>(), 0i64..1_000_000), 1..20),
        1..6,
    )
    .prop_map(|users| {
        users
            .into_iter()
            .map(|(user, mut evs)| {
                evs.sort_by_key(|&(_, t)| t);
                let events = evs
                    .into_iter()
                    .map(|(item_id, timestamp)| InteractionEvent { item_id, timestamp })
                    .collect();
                InteractionSequence::new(user, events).unwrap()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn embeddings_round_trip_in_both_formats(corpus in corpus_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        for (format, name) in [(EmbeddingFormat::Binary, "c.sqz"), (EmbeddingFormat::Csv, "c.csv")] {
            let path = dir.path().join(name);
            save_embeddings(&corpus, &path, format).unwrap();
            let back = load_embeddings(&path, format).unwrap();
            prop_assert_eq!(&back, &corpus);
        }
    }

    #[test]
    fn events_round_trip(histories in histories_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        write_events(&path, &histories).unwrap();
        let mut back = read_events(&path).unwrap();
        back.sort_by_key(InteractionSequence::user_id);
        prop_assert_eq!(back, histories);
    }
}

#[test]
fn synthetic_histories_resolve_against_their_corpus() {
    let cfg = SyntheticConfig {
        num_coarse_clusters: 3,
        num_fine_per_coarse: 2,
        items_per_fine: 5,
        semantic_dim: 4,
        ranking_dim: 3,
        num_users: 4,
        history_length: 30,
        ..SyntheticConfig::default()
    };
    let (corpus, truth) = generate_synthetic_corpus(&cfg).unwrap();
    assert_eq!(corpus.len(), 30);
    let histories = generate_user_histories(&cfg, &corpus, Some(&truth)).unwrap();
    assert_eq!(histories.len(), 4);
    for h in &histories {
        assert_eq!(h.len(), 30);
        assert_eq!(corpus.resolve(h).unwrap().len(), 30);
    }
    let again = generate_user_histories(&cfg, &corpus, Some(&truth)).unwrap();
    assert_eq!(again, histories);
}
