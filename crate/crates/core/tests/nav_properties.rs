mod common;

use std::collections::HashMap;

use archspace::graph::compile_instance;
use archspace::nav::{
    count_leaves, enumerate, enumerate_traversal, replay, restructure_bisect, sample_uniform, BisectTraversal,
    MetaChoiceNode, RawTraversal, Traversal,
};
use archspace::space::HyperparamDomain;
use archspace::{parse, Literal};
use common::{brute_count, corpus, input, SMALL_CNN};

#[test]
fn enumeration_matches_brute_force_count() {
    for (seed, space) in corpus(false, 10_000) {
        let e = enumerate(&space, input(), usize::MAX).unwrap();
        assert!(e.pruned.is_empty() && !e.truncated);
        assert_eq!(e.leaves.len() as u128, brute_count(&space), "seed {seed}: {space}");
        assert_eq!(count_leaves(&space), brute_count(&space));
    }
}

fn leaf_signature<T: Traversal>(t: &T) -> u64 {
    compile_instance(t.instance(), t.path().clone()).unwrap().signature_hash()
}

#[test]
fn bisection_preserves_leaves() {
    for (seed, space) in corpus(false, 300) {
        let raw = enumerate_traversal(RawTraversal::new(&space, input()).unwrap(), usize::MAX);
        let mut raw_sigs: Vec<u64> = raw.leaves.iter().map(leaf_signature).collect();
        for bf in [2, 3] {
            let root = BisectTraversal::new(RawTraversal::new(&space, input()).unwrap(), bf);
            let bis = enumerate_traversal(root, usize::MAX);
            let raw_paths: Vec<_> = raw.leaves.iter().map(|t| t.path().clone()).collect();
            let bis_paths: Vec<_> = bis.leaves.iter().map(|t| t.path().clone()).collect();
            assert_eq!(raw_paths, bis_paths, "seed {seed} bf {bf}");
            let mut bis_sigs: Vec<u64> = bis.leaves.iter().map(leaf_signature).collect();
            raw_sigs.sort_unstable();
            bis_sigs.sort_unstable();
            assert_eq!(raw_sigs, bis_sigs);
            assert!(bis.leaves.iter().all(|t| t.branching() == 0));
        }
    }
}

fn check_partition(node: &MetaChoiceNode, bf: usize) {
    if node.is_leaf() {
        assert_eq!(node.hi - node.lo, 1);
        return;
    }
    assert!(node.children.len() <= bf && node.children.len() >= 2);
    assert_eq!(node.children.first().unwrap().lo, node.lo);
    assert_eq!(node.children.last().unwrap().hi, node.hi);
    for w in node.children.windows(2) {
        assert_eq!(w[0].hi, w[1].lo);
        // earlier parts are never smaller
        assert!(w[0].hi - w[0].lo >= w[1].hi - w[1].lo);
    }
    for c in &node.children {
        assert!(c.hi > c.lo);
        check_partition(c, bf);
    }
}

#[test]
fn bisect_ranges_partition_their_parent() {
    for n in 1..=64 {
        let domain = HyperparamDomain {
            name: "x".into(),
            values: (0..n).map(Literal::Int).collect(),
        };
        for bf in 2..=6 {
            let tree = restructure_bisect(&domain, bf);
            check_partition(&tree, bf);
            assert_eq!(tree.leaves(), (0..n as usize).collect::<Vec<_>>());
        }
    }
}

#[test]
fn sampled_paths_replay() {
    for (seed, space) in corpus(false, u128::MAX) {
        let p = sample_uniform(&space, input(), seed).unwrap();
        let m = replay(&space, input(), &p).unwrap();
        assert!(m.is_specified());
        assert_eq!(p, sample_uniform(&space, input(), seed).unwrap());
    }
    for (seed, space) in corpus(true, u128::MAX) {
        if let Ok(p) = sample_uniform(&space, input(), seed) {
            replay(&space, input(), &p).unwrap();
        }
    }
}

/// Every leaf of the example space turns up with the probability implied by
/// uniform choices at each decision.
#[test]
fn small_cnn_sampling_frequencies() {
    let space = parse(SMALL_CNN).unwrap();
    let leaves = enumerate(&space, input(), 100).unwrap().leaves;
    assert_eq!(leaves.len(), 24);
    let n = 24_000u64;
    let mut counts: HashMap<String, u64> = HashMap::new();
    for seed in 0..n {
        *counts.entry(sample_uniform(&space, input(), seed).unwrap().to_json()).or_default() += 1;
    }
    assert_eq!(counts.len(), 24);
    for leaf in &leaves {
        // filters(2) kernel(2) order(2) include(2) and, if included, keep_p(2)
        let p = 0.5f64.powi(leaf.len() as i32);
        let expected = p * n as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let got = counts[&leaf.to_json()] as f64;
        assert!((got - expected).abs() < 5.0 * sigma, "{}: {got} vs {expected}", leaf.to_json());
    }
}
