//! Seeded random search spaces, for property tests and benchmarks.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsl::{Literal, ModuleKind, SpaceExpr, ValueList};
use crate::nav::count_leaves;

#[derive(Debug, Clone)]
pub struct GenConfig {
    /// Maximum nesting of composite modules.
    pub max_depth: usize,
    /// Maximum values per hyperparameter list.
    pub max_values: usize,
    /// Spaces with more leaves are redrawn.
    pub max_leaves: u128,
    /// Mix in modules that can fail shape checks (VALID padding, Affine in
    /// the middle of a convolutional stack).
    pub allow_invalid: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_depth: 3,
            max_values: 3,
            max_leaves: 10_000,
            allow_invalid: false,
        }
    }
}

fn ints(values: &[i64]) -> ValueList {
    ValueList::new(values.iter().map(|v| Literal::Int(*v)).collect())
}

fn floats(values: &[f64]) -> ValueList {
    ValueList::new(values.iter().map(|v| Literal::Float(*v)).collect())
}

fn strs(values: &[&str]) -> ValueList {
    ValueList::new(values.iter().map(|v| Literal::Str(v.to_string())).collect())
}

fn basic(kind: ModuleKind, lists: Vec<ValueList>) -> SpaceExpr {
    SpaceExpr::basic(kind, lists)
}

fn composite(kind: ModuleKind, children: Vec<SpaceExpr>) -> SpaceExpr {
    SpaceExpr::composite(kind, children)
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    cfg: &'a GenConfig,
}

impl Gen<'_> {
    /// Distinct values drawn from `pool`, in pool order.
    fn subset<T: Copy>(&mut self, pool: &[T]) -> Vec<T> {
        let n = self.rng.random_range(1..=self.cfg.max_values.min(pool.len()).max(1));
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut self.rng);
        idx.truncate(n);
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i]).collect()
    }

    fn leaf(&mut self) -> SpaceExpr {
        let invalid = self.cfg.allow_invalid;
        match self.rng.random_range(0..if invalid { 10 } else { 9 }) {
            0 | 1 => {
                let mut lists = vec![
                    ints(&self.subset(&[4, 8, 16, 32])),
                    ints(&self.subset(&[1, 3, 5])),
                    ints(&self.subset(&[1, 2])),
                ];
                if invalid && self.rng.random_bool(0.5) {
                    lists.push(strs(&self.subset(&["SAME", "VALID"])));
                } else if self.rng.random_bool(0.2) {
                    lists.push(strs(&["SAME"]));
                    lists.push(strs(&self.subset(&["he", "glorot"])));
                }
                basic(ModuleKind::Conv2D, lists)
            }
            2 => {
                let mut lists = vec![ints(&self.subset(&[2, 3])), ints(&self.subset(&[1, 2]))];
                if invalid && self.rng.random_bool(0.5) {
                    lists.push(strs(&self.subset(&["SAME", "VALID"])));
                }
                basic(ModuleKind::MaxPooling2D, lists)
            }
            3 => basic(ModuleKind::ReLU, vec![]),
            4 => basic(ModuleKind::BatchNormalization, vec![]),
            5 => basic(ModuleKind::Dropout, vec![floats(&self.subset(&[0.5, 0.75, 0.9]))]),
            6 => basic(ModuleKind::Empty, vec![]),
            7 => {
                let mut lists = vec![ValueList::named("lr", self.subset(&[0.1, 0.01, 0.001]).into_iter().map(Literal::Float).collect())];
                if self.rng.random_bool(0.5) {
                    let opts: Vec<Literal> = self.subset(&["adam", "sgd"]).into_iter().map(|s| Literal::Str(s.into())).collect();
                    lists.push(ValueList::named("optimizer", opts));
                }
                basic(ModuleKind::UserHyperparams, lists)
            }
            8 => basic(ModuleKind::ReLU, vec![]),
            _ => basic(ModuleKind::Affine, vec![ints(&self.subset(&[8, 16]))]),
        }
    }

    fn block(&mut self, depth: usize) -> SpaceExpr {
        if depth == 0 || self.rng.random_bool(0.35) {
            return self.leaf();
        }
        let d = depth - 1;
        match self.rng.random_range(0..8) {
            0 => {
                let n = self.rng.random_range(1..=3);
                composite(ModuleKind::Concat, (0..n).map(|_| self.block(d)).collect())
            }
            1 => {
                let n = self.rng.random_range(1..=3);
                composite(ModuleKind::Or, (0..n).map(|_| self.block(d)).collect())
            }
            2 => composite(ModuleKind::Optional, vec![self.block(d)]),
            3 => composite(ModuleKind::MaybeSwap, vec![self.block(d), self.block(d)]),
            4 | 5 => {
                let kind = if self.rng.random_bool(0.5) {
                    ModuleKind::Repeat
                } else {
                    ModuleKind::RepeatTied
                };
                let counts = self.subset(&[0, 1, 2]);
                let mut e = composite(kind, vec![self.block(d)]);
                e.value_lists = vec![ints(&counts)];
                e
            }
            6 => composite(ModuleKind::Residual, vec![self.block(d)]),
            _ => self.leaf(),
        }
    }

    fn space(&mut self) -> SpaceExpr {
        let body = self.block(self.cfg.max_depth);
        if self.rng.random_bool(0.5) {
            let units = self.subset(&[10, 20]);
            composite(ModuleKind::Concat, vec![body, basic(ModuleKind::Affine, vec![ints(&units)])])
        } else {
            body
        }
    }
}

/// A random space for input shapes like `[H, W, C]`. Unless
/// `allow_invalid`, every model in it has valid shapes for inputs of at
/// least 1x1 spatial extent.
pub fn random_space(seed: u64, cfg: &GenConfig) -> SpaceExpr {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cfg,
    };
    loop {
        let s = g.space();
        if count_leaves(&s) <= cfg.max_leaves {
            return s;
        }
    }
}

/// A layered convolutional space in the style of a real architecture
/// search: training hyperparameters, strided stem convolutions and tied
/// repeated blocks, followed by a classifier.
pub fn benchmark_space(seed: u64) -> SpaceExpr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filters: Vec<i64> = (0..6).map(|i| 16 + 16 * i).collect();
    let mut pick = |pool: &[i64], n: usize| -> ValueList {
        let mut v: Vec<i64> = pool.choose_multiple(&mut rng, n).copied().collect();
        v.sort_unstable();
        ints(&v)
    };
    let hyper = basic(
        ModuleKind::UserHyperparams,
        vec![
            ValueList::named("optimizer", vec![Literal::Str("adam".into()), Literal::Str("sgd".into())]),
            ValueList::named(
                "learning_rate",
                LEARNING_RATES.iter().map(|v| Literal::Float(*v)).collect(),
            ),
        ],
    );
    let stem = |lists: Vec<ValueList>| basic(ModuleKind::Conv2D, lists);
    let module = |conv: ValueList, repeats: &[i64]| {
        let mut e = composite(
            ModuleKind::RepeatTied,
            vec![composite(
                ModuleKind::Concat,
                vec![
                    basic(ModuleKind::Conv2D, vec![conv, ints(&[3, 5]), ints(&[1])]),
                    composite(
                        ModuleKind::MaybeSwap,
                        vec![basic(ModuleKind::BatchNormalization, vec![]), basic(ModuleKind::ReLU, vec![])],
                    ),
                    composite(ModuleKind::Optional, vec![basic(ModuleKind::Dropout, vec![floats(&[0.5, 0.9])])]),
                ],
            )],
        );
        e.value_lists = vec![ints(repeats)];
        e
    };
    let stem1 = stem(vec![pick(&filters, 4), ints(&[3, 5, 7]), ints(&[2])]);
    let m1 = module(pick(&filters, 4), &[1, 2, 3]);
    let stem2 = stem(vec![pick(&filters, 4), ints(&[3, 5, 7]), ints(&[2])]);
    let m2 = module(pick(&filters, 4), &[1, 2, 3]);
    composite(
        ModuleKind::Concat,
        vec![hyper, stem1, m1, stem2, m2, basic(ModuleKind::Affine, vec![ints(&[10])])],
    )
}

const LEARNING_RATES: [f64; 8] = [0.1, 0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001, 0.00005];
