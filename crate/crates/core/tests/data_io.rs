mod common;

use common::{thread_fixture, CONLL_TRAIN};
use mecrf::config::{Task, TrainConfig};
use mecrf::data::*;
use mecrf::encoders::Vocabulary;
use mecrf::model::MeCrf;
use mecrf::Error;
use proptest::prelude::*;

#[test]
fn conll_round_trip_preserves_documents() {
    let s = parse_conll(CONLL_TRAIN, "train").unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!(s.iter().map(|x| x.doc).collect::<Vec<_>>(), vec![1, 1, 2]);
    let again = parse_conll(&write_conll(&s), "again").unwrap();
    assert_eq!(again, s);
    let instances = sentence_instances(&s, &sentence_vocab(&s, None), &label_inventory(&s)).unwrap();
    assert_eq!(instances.len(), 2);
    assert_eq!(instances[0].segments.len(), 2);
}

#[test]
fn thread_round_trip_and_instances() {
    let threads = thread_fixture(4, 9);
    let back = parse_threads(&write_threads(&threads), "mem").unwrap();
    assert_eq!(back, threads);
    let labels = da_inventory(&threads);
    let vocab = thread_vocab(&threads, None);
    for dummy in [false, true] {
        let inst = thread_instances(&threads, &vocab, &labels, dummy).unwrap();
        for (t, i) in threads.iter().zip(&inst) {
            let seg = &i.segments[0];
            assert_eq!(seg.labels.len(), t.posts.len());
            for (p, link) in t.posts.iter().zip(&seg.links) {
                assert_eq!(slot_to_link(*link, dummy), p.target_link());
            }
        }
    }
}

#[test]
fn checkpoint_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::for_task(Task::Thread);
    cfg.fixed_embeddings = false;
    cfg.hidden = 6;
    let model = MeCrf::new(cfg, Vocabulary::from_tokens(["a", "b"]), vec!["q".into(), "a".into()], None).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.labels, model.labels);
    assert_eq!(model.store.len(), back.store.len());
    for ((_, p1), (_, p2)) in model.store.iter().zip(back.store.iter()) {
        assert_eq!(p1.name, p2.name);
        assert_eq!(p1.value, p2.value);
        assert_eq!(p1.trainable, p2.trainable);
    }
    assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::NotFound(_))));
}

#[test]
fn synthetic_classes_are_uniform() {
    let cfg = SyntheticConfig {
        n: 10_000,
        ..SyntheticConfig::default()
    };
    let seqs = generate_synthetic(&cfg).unwrap();
    let mut counts = vec![0usize; cfg.classes];
    for s in &seqs {
        for p in s.mention_positions() {
            let k: usize = s.tags[p][3..].parse().unwrap();
            counts[k] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    for &c in &counts {
        assert!((c as f64 / total as f64 - 1.0 / cfg.classes as f64).abs() < 0.02, "{counts:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn synthetic_mentions_have_a_unique_matching_antecedent(seed in any::<u64>()) {
        let seqs = generate_synthetic(&SyntheticConfig { n: 5, seed, ..SyntheticConfig::default() }).unwrap();
        for s in &seqs {
            for m in s.mention_positions() {
                let a = s.antecedents[m].unwrap();
                prop_assert!((8..=30).contains(&(m - a)));
                prop_assert_eq!(&s.tokens[a], &s.tokens[m]);
                prop_assert_eq!(s.tokens[m - 1].as_str(), synthetic::MARKER);
                prop_assert_eq!(&s.tokens[a + 1][1..], &s.tags[m][3..]);
                let earlier = (0..m - 1)
                    .filter(|&i| s.tokens[i] == s.tokens[m] && s.tokens[i + 1].starts_with('c'))
                    .count();
                prop_assert_eq!(earlier, 1);
            }
            let back = SyntheticSequence::from_sentence(&s.to_sentence(0)).unwrap();
            prop_assert_eq!(&back, s);
        }
    }
}
