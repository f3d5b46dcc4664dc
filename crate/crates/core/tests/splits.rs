use std::collections::HashSet;
use std::path::Path;

use kite_core::datasets::{
    make_inductive_splits, seqlen_bins, split_with_test_drugs, stratified_quota, sts_series, verify_splits, Dataset,
    DdiEvent, SplitBundle, StsConfig,
};
use kite_smiles::tokenize;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Distinct random pairs over `n` drugs.
fn random_events(n: usize, count: usize, classes: usize, rng: &mut impl Rng) -> Vec<DdiEvent> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..count * 4 {
        if out.len() == count {
            break;
        }
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b && seen.insert((a.min(b), a.max(b))) {
            out.push(DdiEvent {
                a,
                b,
                label: rng.gen_range(0..classes),
            });
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn inductive_splits_hold_their_invariants(
        seed in any::<u64>(),
        n in 6usize..40,
        fraction in 0.1f64..0.5,
        folds in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let events = random_events(n, 3 * n, 4, &mut rng);
        let Ok(bundle) = make_inductive_splits(&events, n, fraction, folds, &mut rng) else {
            return Ok(());
        };
        prop_assert_eq!(verify_splits(&bundle, &events), Ok(()));
        prop_assert_eq!(bundle.test_drugs.len(), (fraction * n as f64).round() as usize);
        let test: HashSet<usize> = bundle.test_drugs.iter().copied().collect();
        let held = |i: usize| usize::from(test.contains(&events[i].a)) + usize::from(test.contains(&events[i].b));
        prop_assert!(bundle.train.iter().all(|&i| held(i) == 0));
        prop_assert!(bundle.u1.iter().all(|&i| held(i) == 1));
        prop_assert!(bundle.u2.iter().all(|&i| held(i) == 2));
        prop_assert_eq!(bundle.train.len() + bundle.u1.len() + bundle.u2.len(), events.len());
        let train_drugs: HashSet<usize> = bundle.train.iter().flat_map(|&i| [events[i].a, events[i].b]).collect();
        prop_assert!(train_drugs.is_disjoint(&test));
        for k in 0..folds {
            let (rest, fold) = bundle.fold_split(k).unwrap();
            let mut all: Vec<usize> = rest.into_iter().chain(fold).collect();
            all.sort_unstable();
            prop_assert_eq!(&all, &bundle.train);
        }
    }

    #[test]
    fn quotas_hit_the_rounded_target(sizes in prop::collection::vec(5usize..200, 1..12), keep in 0.5f64..0.99) {
        let quota = stratified_quota(&sizes, keep);
        let total: usize = sizes.iter().sum();
        prop_assert_eq!(quota.iter().sum::<usize>(), (keep * total as f64).round() as usize);
        for (&q, &n) in quota.iter().zip(&sizes) {
            prop_assert!(q <= n);
            prop_assert!((q as f64 - keep * n as f64).abs() < 1.0);
        }
    }

    #[test]
    fn present_classes_keep_at_least_one(sizes in prop::collection::vec(0usize..4, 1..8), keep in 0.05f64..0.5) {
        let quota = stratified_quota(&sizes, keep);
        for (&q, &n) in quota.iter().zip(&sizes) {
            prop_assert!(q <= n);
            prop_assert_eq!(q == 0, n == 0);
        }
    }
}

#[test]
fn verifier_catches_a_leaked_test_drug() {
    let events = vec![
        DdiEvent { a: 0, b: 1, label: 0 },
        DdiEvent { a: 1, b: 2, label: 0 },
        DdiEvent { a: 2, b: 3, label: 1 },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bundle = split_with_test_drugs(&events, &[3], 1, &mut rng).unwrap();
    assert_eq!((bundle.train.clone(), bundle.u1.clone()), (vec![0, 1], vec![2]));
    bundle.train.push(2);
    bundle.folds[0].push(2);
    assert!(verify_splits(&bundle, &events).is_err());
}

#[test]
fn bundle_round_trips_through_json() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let events = random_events(20, 60, 3, &mut rng);
    let bundle = make_inductive_splits(&events, 20, 0.2, 5, &mut rng).unwrap();
    let back = SplitBundle::from_json(&bundle.to_json()).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(back.named("u2").unwrap(), bundle.u2);
    assert_eq!(back.named("fold2").unwrap(), bundle.folds[2]);
    assert!(back.named("fold9").is_err());
    assert!(back.named("valid").is_err());
}

#[test]
fn shrinking_sets_follow_powers_of_nine_tenths() {
    let events: Vec<DdiEvent> = (0..1000)
        .map(|i| DdiEvent {
            a: 0,
            b: 1,
            label: i % 10,
        })
        .collect();
    let train: Vec<usize> = (0..1000).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let series = sts_series(&train, &events, &StsConfig::default(), &mut rng).unwrap();
    assert!(!series.stalled);
    let sizes: Vec<usize> = series.steps.iter().map(Vec::len).collect();
    assert_eq!(sizes[..6], [1000, 900, 810, 729, 656, 590]);
    for w in sizes.windows(2) {
        assert_eq!(w[1], (0.9 * w[0] as f64).round() as usize);
    }
    for (k, &s) in sizes.iter().enumerate() {
        let ideal = 1000.0 * 0.9f64.powi(k as i32);
        assert!((s as f64 - ideal).abs() <= 1.0 + 0.1 * k as f64, "step {k}: {s} vs {ideal}");
    }
    assert!(*sizes.last().unwrap() as f64 <= 75.0);
    assert!(sizes[sizes.len() - 2] as f64 > 75.0);
    for w in series.steps.windows(2) {
        let prev: HashSet<usize> = w[0].iter().copied().collect();
        assert!(w[1].iter().all(|i| prev.contains(i)));
    }
    for step in &series.steps {
        let mut per = [0usize; 10];
        step.iter().for_each(|&i| per[events[i].label] += 1);
        let (lo, hi) = (per.iter().min().unwrap(), per.iter().max().unwrap());
        assert!(hi - lo <= 1, "{per:?}");
    }
}

#[test]
fn rare_classes_are_removed_before_shrinking() {
    let mut events: Vec<DdiEvent> = (0..50).map(|_| DdiEvent { a: 0, b: 1, label: 0 }).collect();
    events.extend((0..4).map(|_| DdiEvent { a: 0, b: 1, label: 1 }));
    let train: Vec<usize> = (0..54).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let series = sts_series(&train, &events, &StsConfig::default(), &mut rng).unwrap();
    assert_eq!(series.removed_classes, vec![1]);
    assert_eq!(series.steps[0].len(), 50);
    let bad = StsConfig {
        keep_fraction: 1.0,
        ..StsConfig::default()
    };
    assert!(sts_series(&train, &events, &bad, &mut rng).is_err());
}

#[test]
fn length_bins_partition_the_events() {
    let drugs = "A\tCCO\nB\tc1ccccc1\nC\tCl\nD\tCC(=O)Nc1ccc(O)cc1\n";
    let events = "A\tB\tx\nA\tC\tx\nB\tD\ty\nC\tD\ty\nA\tD\tx\n";
    let p = Path::new("t");
    let ds = Dataset::parse(drugs, events, "x\ny\n", [p, p, p]).unwrap();
    let chosen = [0, 2, 3, 4];
    let bins = seqlen_bins(&chosen, &ds, 5).unwrap();
    let mut seen: Vec<usize> = bins.bins.values().flatten().copied().collect();
    seen.sort_unstable();
    assert_eq!(seen, chosen);
    for (k, &i) in chosen.iter().enumerate() {
        let e = ds.events[i];
        let (a, b) = ds.smiles_of(&e);
        let want = tokenize(a).unwrap().len() + 1 + tokenize(b).unwrap().len();
        assert_eq!(bins.lengths[k], want);
        assert!(bins.bins[&(want / 5 * 5)].contains(&i));
    }
    assert!(bins.bins.keys().all(|k| k % 5 == 0));
    assert!(seqlen_bins(&chosen, &ds, 0).is_err());
}
