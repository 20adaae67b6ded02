use hprobe::dataset::{self, ExampleRecord, SamplingConfig, TraversalExample};
use hprobe::tree::{full_size, Label, Path};
use proptest::prelude::*;

#[test]
fn fuzzed_truths_are_valid_traversals() {
    let cfg = SamplingConfig::new((1, 6), (1, 3), 9999, 11)
        .unwrap()
        .with_sparsity(0.5, 1.0)
        .unwrap();
    let examples = dataset::sample_dataset(&cfg).unwrap();
    assert_eq!(examples.len(), 9999);
    for ex in &examples {
        let t = &ex.tree;
        t.validate_path(&ex.truth).unwrap();
        assert_eq!(ex.anchors.len(), ex.steps as usize + 1);
        assert!(ex.anchors.windows(2).all(|w| w[0] != w[1]), "{}", ex.id);
        let legs: u32 = ex
            .anchors
            .windows(2)
            .map(|w| t.tree_distance(w[0], w[1]).unwrap())
            .sum();
        assert_eq!(ex.truth.edges() as u32, legs, "{}", ex.id);
        // Consecutive path entries are tree edges, so a boundary node never
        // appears twice in a row.
        assert!(ex.truth.nodes().windows(2).all(|w| w[0] != w[1]), "{}", ex.id);
        assert_eq!(ex.truth.nodes()[0], ex.anchors[0]);
        assert_eq!(ex.truth.nodes().last(), ex.anchors.last());
        let s = ex.sparsity.unwrap();
        let n = full_size(t.depth_max());
        assert_eq!(t.len(), ((s * n as f64).round() as usize).clamp(t.depth_max() as usize + 1, n));
    }
    let comp = dataset::composition(&examples);
    assert_eq!(comp.values().sum::<usize>(), 9999);
    for steps in 1..=3 {
        let c: usize = comp.iter().filter(|((_, s), _)| *s == steps).map(|(_, c)| c).sum();
        assert_eq!(c, 3333);
    }
}

#[test]
fn depth_frequencies_follow_tuple_counts() {
    let n = 20000;
    let examples = dataset::sample_dataset(&SamplingConfig::new((1, 3), (1, 2), n, 5).unwrap()).unwrap();
    let comp = dataset::composition(&examples);
    for s in 1..=2u32 {
        let w: Vec<f64> = (1..=3u32)
            .map(|d| {
                let m = full_size(d) as f64;
                m * (m - 1.0).powi(s as i32)
            })
            .collect();
        let total: f64 = w.iter().sum();
        let per = (n / 2) as f64;
        for d in 1..=3u32 {
            let p = w[d as usize - 1] / total;
            let got = *comp.get(&(d, s)).unwrap_or(&0) as f64;
            let sd = (per * p * (1.0 - p)).sqrt().max(1.0);
            assert!(
                (got - per * p).abs() <= 5.0 * sd,
                "depth {d} steps {s}: {got} vs {:.1}",
                per * p
            );
        }
    }
}

#[test]
fn sampling_is_deterministic_and_seed_sensitive() {
    let cfg = SamplingConfig::new((1, 4), (1, 2), 200, 9).unwrap();
    let a = dataset::dataset_bytes(&dataset::sample_dataset(&cfg).unwrap());
    let b = dataset::dataset_bytes(&dataset::sample_dataset(&cfg).unwrap());
    assert_eq!(a, b);
    let other = SamplingConfig::new((1, 4), (1, 2), 200, 10).unwrap();
    assert_ne!(a, dataset::dataset_bytes(&dataset::sample_dataset(&other).unwrap()));
}

#[test]
fn records_survive_json() {
    let examples = dataset::sample_dataset(
        &SamplingConfig::new((1, 5), (1, 2), 100, 2)
            .unwrap()
            .with_sparsity(0.6, 0.9)
            .unwrap(),
    )
    .unwrap();
    for ex in &examples {
        let line = serde_json::to_string(&ExampleRecord::from(ex)).unwrap();
        let back: ExampleRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(&TraversalExample::try_from(back).unwrap(), ex);
    }
}

#[test]
fn tampered_truth_is_rejected() {
    let ex = &dataset::sample_dataset(&SamplingConfig::new((2, 2), (2, 2), 1, 4).unwrap()).unwrap()[0];
    let mut rec = ExampleRecord::from(ex);
    rec.truth.pop();
    assert!(TraversalExample::try_from(rec).is_err());
}

fn path_strategy() -> impl Strategy<Value = Vec<Label>> {
    prop::collection::vec(0u32..8, 1..10)
}

proptest! {
    #[test]
    fn exact_means_full_partial(truth in path_strategy()) {
        let t = Path(truth);
        let s = dataset::score(Some(&t), &t);
        prop_assert!(s.exact);
        prop_assert_eq!(s.partial, 1.0);
    }

    #[test]
    fn partial_is_bounded_and_prefix_monotone(truth in path_strategy(), guess in path_strategy(), cut in 0usize..10) {
        let truth = Path(truth);
        let full = dataset::score(Some(&Path(guess.clone())), &truth);
        prop_assert!((0.0..=1.0).contains(&full.partial));
        prop_assert_eq!(full.exact, guess == truth.0);
        if full.partial == 1.0 {
            // A guess can only match every truth node by being that path or
            // extending it.
            prop_assert!(guess.starts_with(truth.nodes()));
        }
        let shorter = &guess[..cut.min(guess.len()).max(1)];
        let s = dataset::score(Some(&Path(shorter.to_vec())), &truth);
        prop_assert!(s.partial <= full.partial || s.exact);
    }

    #[test]
    fn unparsed_scores_zero(truth in path_strategy()) {
        let s = dataset::score(None, &Path(truth));
        prop_assert!(!s.exact);
        prop_assert_eq!(s.partial, 0.0);
    }

    #[test]
    fn last_path_line_wins(a in path_strategy(), b in path_strategy(), junk in "[a-z ]{0,20}") {
        let fmt = |p: &[Label]| p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let raw = format!("{junk}\nPATH: {}\nthinking\nPATH: {}\n", fmt(&a), fmt(&b));
        prop_assert_eq!(dataset::parse_path(&raw), Some(Path(b)));
    }

    #[test]
    fn non_numeric_token_fails_parse(a in path_strategy()) {
        let raw = format!("PATH: {} x", a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "));
        prop_assert_eq!(dataset::parse_path(&raw), None);
    }
}
