use hprobe::tree::{full_size, lca_position, position_depth, position_distance, Label, LabeledTree};
use proptest::prelude::*;

fn tree_strategy() -> impl Strategy<Value = (LabeledTree, u64)> {
    (1u32..=7, any::<u64>(), prop::option::of(0.5f64..=1.0)).prop_map(|(d, seed, s)| {
        let full = LabeledTree::full(d).unwrap();
        let t = match s {
            Some(s) => full.sparsify(s, seed ^ 0x5a5a).unwrap(),
            None => full,
        };
        (t.permute_labels(seed), seed)
    })
}

fn pick(t: &LabeledTree, i: usize) -> Label {
    let labels = t.labels();
    labels[i % labels.len()]
}

// Depth and LCA by walking parents, independent of the bit arithmetic.
fn ancestors(mut q: usize) -> Vec<usize> {
    let mut out = vec![q];
    while q > 0 {
        q = (q - 1) / 2;
        out.push(q);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn distance_is_depth_sum_minus_lca((t, _) in tree_strategy(), i in any::<usize>(), j in any::<usize>()) {
        let (a, b) = (pick(&t, i), pick(&t, j));
        let c = t.lca(a, b).unwrap();
        let d = t.tree_distance(a, b).unwrap();
        let want = t.node_depth(a).unwrap() + t.node_depth(b).unwrap() - 2 * t.node_depth(c).unwrap();
        prop_assert_eq!(d, want);
        prop_assert_eq!(d, t.tree_distance(b, a).unwrap());
        prop_assert_eq!(d == 0, a == b);
    }

    #[test]
    fn lca_matches_ancestor_walk(qa in 0usize..(1 << 16), qb in 0usize..(1 << 16)) {
        let up_a = ancestors(qa);
        let up_b = ancestors(qb);
        let common = *up_a.iter().find(|q| up_b.contains(q)).unwrap();
        prop_assert_eq!(lca_position(qa, qb), common);
        prop_assert_eq!(position_depth(qa) as usize, up_a.len() - 1);
        let want = (up_a.len() - 1) + (up_b.len() - 1) - 2 * (ancestors(common).len() - 1);
        prop_assert_eq!(position_distance(qa, qb) as usize, want);
    }

    #[test]
    fn shortest_path_is_valid_and_minimal((t, _) in tree_strategy(), i in any::<usize>(), j in any::<usize>()) {
        let (a, b) = (pick(&t, i), pick(&t, j));
        let p = t.shortest_path(a, b).unwrap();
        prop_assert_eq!(p.nodes()[0], a);
        prop_assert_eq!(*p.nodes().last().unwrap(), b);
        prop_assert_eq!(p.edges() as u32, t.tree_distance(a, b).unwrap());
        t.validate_path(&p).unwrap();
        let mut seen = p.nodes().to_vec();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), p.len());
        let mut buf = vec![9999; 3];
        t.shortest_path_into(a, b, &mut buf).unwrap();
        prop_assert_eq!(&buf[..], p.nodes());
    }

    #[test]
    fn sparsify_hits_target_and_stays_closed(d in 1u32..=8, s in 0.5f64..=1.0, seed in any::<u64>()) {
        let full = LabeledTree::full(d).unwrap();
        let t = full.sparsify(s, seed).unwrap();
        let n = full_size(d);
        let want = ((s * n as f64).round() as usize).clamp(d as usize + 1, n);
        prop_assert_eq!(t.len(), want);
        prop_assert_eq!(t.depth_max(), d);
        prop_assert!(t.positions().iter().any(|&q| position_depth(q) == d));
        for &q in t.positions() {
            prop_assert!(q == 0 || t.contains_position((q - 1) / 2));
            prop_assert_eq!(t.label_of(q), full.label_of(q));
        }
        prop_assert_eq!(t, full.sparsify(s, seed).unwrap());
    }

    #[test]
    fn permutation_is_a_bijection(d in 0u32..=8, seed in any::<u64>()) {
        let t = LabeledTree::full(d).unwrap().permute_labels(seed);
        let mut labels = t.labels();
        labels.sort_unstable();
        let want: Vec<Label> = (0..full_size(d) as Label).collect();
        prop_assert_eq!(labels, want);
        for &q in t.positions() {
            prop_assert_eq!(t.position_of(t.label_of(q).unwrap()).unwrap(), q);
        }
        prop_assert_eq!(t, LabeledTree::full(d).unwrap().permute_labels(seed));
    }

    #[test]
    fn relabeling_preserves_distances((t, seed) in tree_strategy()) {
        // Rotate the label set, which keeps it a permutation of the positions.
        let mut sorted = t.labels();
        sorted.sort_unstable();
        let k = seed as usize % sorted.len();
        let next = |l: Label| sorted[(sorted.binary_search(&l).unwrap() + k) % sorted.len()];
        let r = t.relabel(next).unwrap();
        for a in t.labels() {
            for b in t.labels().into_iter().take(8) {
                prop_assert_eq!(t.tree_distance(a, b).unwrap(), r.tree_distance(next(a), next(b)).unwrap());
            }
        }
    }

    #[test]
    fn neighbors_are_distance_one((t, _) in tree_strategy(), i in any::<usize>()) {
        let a = pick(&t, i);
        let nb = t.neighbors(a).unwrap();
        for b in t.labels() {
            prop_assert_eq!(nb.contains(&b), t.tree_distance(a, b).unwrap() == 1);
        }
    }
}

#[test]
fn sparsity_outside_range_rejected() {
    let t = LabeledTree::full(3).unwrap();
    assert!(t.sparsify(0.49, 1).is_err());
    assert!(t.sparsify(1.01, 1).is_err());
    assert!(t.sparsify(f64::NAN, 1).is_err());
}
