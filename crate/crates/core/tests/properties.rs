use std::collections::BTreeSet;

use febench::metrics::{accuracy, micro_prf};
use febench::text::{
    encode, load_dataset, save_dataset, DataFormat, Dataset, LabeledExample, Vocabulary, CLS, PAD, SEP,
};
use proptest::prelude::*;

fn to_set(mask: u8, labels: usize) -> BTreeSet<usize> {
    (0..labels).filter(|c| mask & (1 << c) != 0).collect()
}

/// Per-class confusion counts, then micro totals.
fn brute_force_prf(preds: &[BTreeSet<usize>], golds: &[BTreeSet<usize>], labels: usize) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for c in 0..labels {
        for (p, g) in preds.iter().zip(golds) {
            match (p.contains(&c), g.contains(&c)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = div(tp, tp + fp);
    let r = div(tp, tp + fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn instance() -> impl Strategy<Value = (usize, Vec<(u8, u8)>)> {
    (1usize..=5).prop_flat_map(|labels| {
        let max = (1u8 << labels) - 1;
        (Just(labels), prop::collection::vec((0..=max, 0..=max), 1..=10))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn micro_prf_matches_confusion_oracle((labels, docs) in instance()) {
        let preds: Vec<_> = docs.iter().map(|&(p, _)| to_set(p, labels)).collect();
        let golds: Vec<_> = docs.iter().map(|&(_, g)| to_set(g, labels)).collect();
        let got = micro_prf(&preds, &golds).unwrap();
        let (p, r, f) = brute_force_prf(&preds, &golds, labels);
        prop_assert!((got.precision - p).abs() <= 1e-12);
        prop_assert!((got.recall - r).abs() <= 1e-12);
        prop_assert!((got.f1 - f).abs() <= 1e-12);
    }

    #[test]
    fn singleton_sets_reduce_to_accuracy(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..30)) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let golds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let acc = accuracy(&preds, &golds).unwrap();
        let ps: Vec<BTreeSet<usize>> = preds.iter().map(|&p| BTreeSet::from([p])).collect();
        let gs: Vec<BTreeSet<usize>> = golds.iter().map(|&g| BTreeSet::from([g])).collect();
        let prf = micro_prf(&ps, &gs).unwrap();
        prop_assert!((prf.precision - acc).abs() < 1e-12);
        prop_assert!((prf.recall - acc).abs() < 1e-12);
        prop_assert!((prf.f1 - acc).abs() < 1e-12);
    }

    #[test]
    fn relabeling_leaves_metrics_unchanged((labels, docs) in instance(), rot in 0usize..5) {
        let perm = |s: BTreeSet<usize>| s.into_iter().map(|c| (c + rot) % labels).collect::<BTreeSet<_>>();
        let preds: Vec<_> = docs.iter().map(|&(p, _)| to_set(p, labels)).collect();
        let golds: Vec<_> = docs.iter().map(|&(_, g)| to_set(g, labels)).collect();
        let a = micro_prf(&preds, &golds).unwrap();
        let b = micro_prf(
            &preds.into_iter().map(perm).collect::<Vec<_>>(),
            &golds.into_iter().map(perm).collect::<Vec<_>>(),
        ).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn encoding_has_fixed_length(words in prop::collection::vec("[a-z]{1,6}", 0..300), max_len in 3usize..250) {
        let vocab = Vocabulary::from_tokens(words.iter().take(20).cloned());
        let text = words.join(" ");
        let e = encode(&text, &vocab, max_len).unwrap();
        prop_assert_eq!(e.ids.len(), max_len);
        prop_assert_eq!(e.valid_length, (words.len() + 2).min(max_len));
        prop_assert_eq!(e.ids[0], CLS);
        prop_assert_eq!(e.ids[e.valid_length - 1], SEP);
        prop_assert!(e.ids[e.valid_length..].iter().all(|&i| i == PAD));
    }
}

fn arbitrary_dataset() -> impl Strategy<Value = Dataset> {
    let example = ("[a-z ,.!?\"']{0,40}", prop::collection::btree_set("[a-c]", 1..3))
        .prop_map(|(text, labels)| LabeledExample::new(text, labels));
    (
        prop::collection::vec(example.clone(), 1..8),
        prop::collection::vec(example, 1..5),
    )
        .prop_map(|(train, test)| Dataset::new("d", train, test).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn datasets_round_trip(data in arbitrary_dataset()) {
        for format in [DataFormat::Jsonl, DataFormat::Csv] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d");
            save_dataset(&data, &path, format).unwrap();
            let back = load_dataset(&path, format).unwrap();
            prop_assert_eq!(&back, &data);
        }
    }
}
