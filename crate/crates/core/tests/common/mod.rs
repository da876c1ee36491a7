#![allow(dead_code)]

use archspace::dsl::{ModuleKind, SpaceExpr};
use archspace::generate::{random_space, GenConfig};
use archspace::Shape;

pub const SMALL_CNN: &str = "(Concat
    (Conv2D [32, 64] [3, 5] [1])
    (MaybeSwap BatchNormalization ReLU)
    (Optional (Dropout [0.5, 0.9]))
    (Affine [10]))";

pub const CORPUS_SIZE: u64 = 1000;

pub fn shape(text: &str) -> Shape {
    text.parse().unwrap()
}

pub fn input() -> Shape {
    shape("32,32,3")
}

/// Fixed corpus of generated spaces.
pub fn corpus(allow_invalid: bool, max_leaves: u128) -> impl Iterator<Item = (u64, SpaceExpr)> {
    let cfg = GenConfig {
        allow_invalid,
        max_leaves,
        ..Default::default()
    };
    (0..CORPUS_SIZE).map(move |seed| (seed, random_space(seed, &cfg)))
}

/// Leaf count straight from the definitions of the module kinds: products
/// over sequences, sums over alternatives.
pub fn brute_count(e: &SpaceExpr) -> u128 {
    let list_sizes = || e.value_lists.iter().map(|l| l.values.len() as u128);
    let counts = || {
        e.value_lists[0]
            .values
            .iter()
            .map(|v| v.as_int().unwrap() as u32)
            .collect::<Vec<_>>()
    };
    match e.kind {
        ModuleKind::Concat => e.children.iter().map(brute_count).product(),
        ModuleKind::Or => e.children.iter().map(brute_count).sum(),
        ModuleKind::Optional => 1 + brute_count(&e.children[0]),
        ModuleKind::MaybeSwap => 2 * brute_count(&e.children[0]) * brute_count(&e.children[1]),
        ModuleKind::Residual => brute_count(&e.children[0]),
        ModuleKind::Repeat => {
            let c = brute_count(&e.children[0]);
            counts().into_iter().map(|k| c.pow(k)).sum()
        }
        ModuleKind::RepeatTied => {
            let c = brute_count(&e.children[0]);
            counts().into_iter().map(|k| if k == 0 { 1 } else { c }).sum()
        }
        _ => list_sizes().product(),
    }
}
