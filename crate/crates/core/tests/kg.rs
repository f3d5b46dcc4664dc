use kite_core::kg::{
    corrupt, margin_loss, pair_embedding, parse_triples, train_transe, transe_score, transe_train_step, EmbeddingTable,
    EntityIndex, IdMap, MissCounter, NamedEmbeddings, TransEConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Twelve triples: a ring of six entities under `next`, and `twin` linking
/// each to its opposite.
fn toy() -> (Vec<[usize; 3]>, EntityIndex) {
    let mut text = String::new();
    for i in 0..6 {
        text.push_str(&format!("E{i}\tnext\tE{}\n", (i + 1) % 6));
        text.push_str(&format!("E{i}\ttwin\tE{}\n", (i + 3) % 6));
    }
    let triples = parse_triples(&text, std::path::Path::new("toy.tsv")).unwrap();
    let index = EntityIndex::from_triples(&triples);
    let encoded = triples.iter().map(|t| index.encode(t).unwrap()).collect();
    (encoded, index)
}

fn toy_config() -> TransEConfig {
    TransEConfig {
        dim: 8,
        epochs: 200,
        batch_size: 4,
        lr: 0.01,
        ..TransEConfig::default()
    }
}

#[test]
fn scores_of_a_known_example() {
    let (h, r, t) = ([1.0f32, 0.0], [0.0f32, 1.0], [0.0f32, 0.0]);
    assert_eq!(transe_score(&h, &r, &t, 1).unwrap(), 2.0);
    assert!((transe_score(&h, &r, &t, 2).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    assert!(transe_score(&h, &r, &t, 3).is_err());
    assert!(transe_score(&h, &r[..1], &t, 1).is_err());
}

#[test]
fn hinge_is_zero_once_the_margin_is_met() {
    assert_eq!(margin_loss(1.0, 0.5, 2.0), 0.0);
    assert_eq!(margin_loss(1.0, 0.5, 1.0), 0.5);
    assert_eq!(margin_loss(1.0, 2.0, 0.5), 2.5);
}

#[test]
fn training_separates_true_from_corrupted_triples() {
    let (triples, index) = toy();
    assert_eq!(triples.len(), 12);
    let config = toy_config();
    let (table, history) = train_transe(&triples, index.entities.len(), index.relations.len(), &config, 0).unwrap();
    assert_eq!(history.len(), config.epochs);
    let early: f64 = history[..10].iter().sum::<f64>() / 10.0;
    let late: f64 = history[history.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(late < 0.5 * early, "{early} -> {late}");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut pos, mut neg) = (0.0, 0.0);
    for &t in &triples {
        pos += table.score(t, config.norm);
        neg += table.score(corrupt(t, index.entities.len(), &mut rng), config.norm);
    }
    assert!(pos < neg, "{pos} vs {neg}");
}

#[test]
fn entity_rows_stay_in_the_unit_ball() {
    let (triples, index) = toy();
    let config = TransEConfig { lr: 0.5, ..toy_config() };
    let (table, _) = train_transe(&triples, index.entities.len(), index.relations.len(), &config, 3).unwrap();
    assert!(table.max_entity_norm() <= 1.0 + 1e-6);
}

#[test]
fn training_is_seeded() {
    let (triples, index) = toy();
    let run = |seed| train_transe(&triples, 6, 2, &TransEConfig { epochs: 5, ..toy_config() }, seed).unwrap();
    assert_eq!(run(4), run(4));
    assert_ne!(run(4).0, run(5).0);
    assert_eq!(index.entities.len(), 6);
}

#[test]
fn one_step_follows_the_hinge_gradient() {
    let config = TransEConfig {
        dim: 3,
        norm: 2,
        lr: 0.01,
        margin: 5.0,
        ..TransEConfig::default()
    };
    let mut table = EmbeddingTable {
        dim: 3,
        entities: vec![0.1, 0.2, -0.1, -0.2, 0.05, 0.3, 0.25, -0.15, 0.0],
        relations: vec![0.3, -0.1, 0.2],
    };
    let pos = [0, 0, 1];
    let rng = ChaCha8Rng::seed_from_u64(7);
    let neg = corrupt(pos, 3, &mut rng.clone());
    let loss = |t: &EmbeddingTable| margin_loss(config.margin, t.score(pos, 2), t.score(neg, 2));
    let h = 1e-3;
    let mut expected = table.clone();
    for i in 0..table.entities.len() {
        let mut up = table.clone();
        up.entities[i] += h as f32;
        let mut down = table.clone();
        down.entities[i] -= h as f32;
        let g = (loss(&up) - loss(&down)) / (2.0 * h);
        expected.entities[i] = (f64::from(table.entities[i]) - config.lr * g) as f32;
    }
    let before = loss(&table);
    let value = transe_train_step(&[pos], &mut table, &config, &mut rng.clone());
    assert!((value - before).abs() < 1e-12);
    for (a, b) in table.entities.iter().zip(&expected.entities) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn named_rows_survive_a_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let table = NamedEmbeddings::new(2, vec!["a".into(), "b".into()], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (bin, index) = (dir.path().join("kg.bin"), dir.path().join("kg.index"));
    table.save(&bin, &index).unwrap();
    let back = NamedEmbeddings::load(&bin, &index).unwrap();
    assert_eq!(back, table);
    assert_eq!(back.get("b"), Some(&[3.0f32, 4.0][..]));

    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 1]).unwrap();
    assert!(NamedEmbeddings::load(&bin, &index).is_err());
    assert!(NamedEmbeddings::new(2, vec!["a".into(), "a".into()], vec![0.0; 4]).is_err());
}

#[test]
fn missing_drugs_contribute_zeros_and_are_counted() {
    let table = NamedEmbeddings::new(2, vec!["Compound::D1".into()], vec![0.5, -0.5]).unwrap();
    let mut misses = MissCounter::default();
    let v = pair_embedding("D1", "D9", &table, &IdMap::default(), &mut misses);
    assert_eq!(v, vec![0.5, -0.5, 0.0, 0.0]);
    assert_eq!((misses.lookups, misses.misses), (2, 1));
    assert_eq!(misses.rate(), 0.5);
    let swapped = pair_embedding("D9", "D1", &table, &IdMap::default(), &mut misses);
    assert_eq!(swapped, vec![0.0, 0.0, 0.5, -0.5]);
}

fn row() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-2.0f32..2.0, 4)
}

proptest! {
    #[test]
    fn score_is_translation_invariant(h in row(), r in row(), t in row(), c in row(), p in 1u8..=2) {
        let shift = |x: &[f32]| x.iter().zip(&c).map(|(a, b)| a + b).collect::<Vec<f32>>();
        let a = transe_score(&h, &r, &t, p).unwrap();
        let b = transe_score(&shift(&h), &r, &shift(&t), p).unwrap();
        prop_assert!((a - b).abs() < 1e-4 * (1.0 + a));
    }

    #[test]
    fn corruption_changes_exactly_one_end(h in 0usize..10, r in 0usize..3, t in 0usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = corrupt([h, r, t], 10, &mut rng);
        prop_assert_eq!(c[1], r);
        prop_assert!((c[0] != h) ^ (c[2] != t));
        prop_assert!(c[0] < 10 && c[2] < 10);
    }

    #[test]
    fn hinge_is_nonnegative(m in 0.0f64..5.0, p in 0.0f64..10.0, n in 0.0f64..10.0) {
        prop_assert!(margin_loss(m, p, n) >= 0.0);
    }
}
