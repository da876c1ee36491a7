mod common;

use std::collections::HashMap;

use archspace::graph::{GraphIR, Op};
use archspace::nav::{enumerate, replay};
use archspace::search::{featurize, featurize_sequence};
use archspace::{compile, Literal, Path};
use common::{corpus, input};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn leaf_graphs(space: &archspace::SpaceExpr, limit: usize) -> Vec<(Path, GraphIR)> {
    enumerate(space, input(), limit)
        .unwrap()
        .leaves
        .into_iter()
        .map(|p| {
            let g = compile(space, input(), &p).unwrap();
            (p, g)
        })
        .collect()
}

/// Parameter count of one node from its attributes and input shape.
fn recount(op: Op, attrs: &std::collections::BTreeMap<String, Literal>, in_dims: &[usize]) -> u64 {
    let int = |k: &str| attrs[k].as_int().unwrap() as u64;
    let last = *in_dims.last().unwrap() as u64;
    match op {
        Op::Conv2D => int("kernel_size").pow(2) * last * int("filters") + int("filters"),
        Op::Affine => (in_dims.iter().product::<usize>() as u64 + 1) * int("units"),
        Op::BatchNorm => 2 * last,
        _ => 0,
    }
}

#[test]
fn compile_never_panics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pruned = 0;
    for (seed, space) in corpus(true, u128::MAX) {
        let Ok(e) = enumerate(&space, input(), 200) else {
            continue;
        };
        pruned += e.pruned.len();
        for p in &e.leaves {
            let g = compile(&space, input(), p).unwrap_or_else(|err| panic!("seed {seed}: {err}"));
            g.validate().unwrap();
        }
        // damaged paths must fail cleanly
        if let Some(p) = e.leaves.first() {
            let mut bad = p.clone();
            if !bad.steps.is_empty() {
                let i = rng.random_range(0..bad.steps.len());
                bad.steps[i].index += rng.random_range(1..3);
            }
            bad.steps.truncate(rng.random_range(0..=bad.steps.len()));
            let _ = compile(&space, input(), &bad);
        }
    }
    assert!(pruned > 0, "corpus never hit an invalid model");
}

#[test]
fn shapes_chain_and_params_recount() {
    for (seed, space) in corpus(false, 200) {
        for (p, g) in leaf_graphs(&space, 50) {
            for n in &g.nodes {
                match n.inputs.as_slice() {
                    [] => assert_eq!(n.in_shape, g.input_shape),
                    inputs => {
                        for i in inputs {
                            assert_eq!(g.nodes[*i].out_shape, n.in_shape, "seed {seed} node {}", n.id);
                        }
                    }
                }
                assert_eq!(n.param_count, recount(n.op, &n.attrs, n.in_shape.dims()));
                assert_eq!(n.train_only, n.op == Op::Dropout);
            }
            assert_eq!(g.nodes.last().unwrap().out_shape, g.output_shape);
            let expected: u64 = g.nodes.iter().map(|n| recount(n.op, &n.attrs, n.in_shape.dims())).sum();
            assert_eq!(g.total_params(), expected);
            let m = replay(&space, input(), &p).unwrap();
            assert_eq!(m.param_count().unwrap(), expected);
            assert_eq!(m.get_outdim().unwrap(), g.output_shape);
        }
    }
}

#[test]
fn compilation_is_pure() {
    for (_, space) in corpus(false, 100) {
        for (p, g) in leaf_graphs(&space, 10) {
            assert_eq!(compile(&space, input(), &p).unwrap().to_json(), g.to_json());
        }
    }
}

#[test]
fn json_round_trip_and_distinct_ids() {
    let mut by_hash: HashMap<u64, String> = HashMap::new();
    for (seed, space) in corpus(false, 300) {
        let graphs = leaf_graphs(&space, 300);
        let mut seen_json: HashMap<String, Path> = HashMap::new();
        for (p, g) in graphs {
            let text = g.to_json();
            let back = GraphIR::from_json(&text).unwrap();
            assert_eq!(back.to_json(), text);
            assert_eq!(back.signature(), g.signature());
            // distinct paths never serialize the same
            assert!(seen_json.insert(text, p).is_none(), "seed {seed}");
            let sig = g.signature();
            let prev = by_hash.entry(g.signature_hash()).or_insert_with(|| sig.clone());
            assert_eq!(*prev, sig, "hash collision");
        }
    }
    assert!(by_hash.len() > 1000);
}

#[test]
fn features_follow_the_compiled_sequence() {
    for (_, space) in corpus(false, 100) {
        for (_, g) in leaf_graphs(&space, 10) {
            let names: Vec<&str> = g.nodes.iter().filter(|n| !n.op.is_plumbing()).map(|n| n.op.name()).collect();
            assert_eq!(featurize(&g, 3), featurize_sequence(&names, 3));
            let unigrams: u32 = featurize(&g, 1).counts.values().sum();
            assert_eq!(unigrams as usize, g.module_sequence().len());
        }
    }
}
