//! The search space seen as a tree: paths, sampling, enumeration, replay
//! and bisection restructuring of wide decisions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{Literal, ModuleKind, SpaceExpr};
use crate::shape::Shape;
use crate::space::{HyperparamDomain, ModuleInstance, SpaceError};

/// One surfaced decision on a root-to-leaf path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub site: String,
    pub index: usize,
    pub value: Literal,
}

/// Root-to-leaf decision sequence; a complete path identifies one model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Path {
    pub steps: Vec<PathStep>,
}

impl Path {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("paths always serialize")
    }

    pub fn from_json(text: &str) -> Result<Path, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NavError {
    #[error("cannot initialize the space: {0}")]
    Init(SpaceError),
    #[error("sampling failed at {site}: {source}")]
    SampleFailed { site: String, source: SpaceError },
    #[error("step {step} leads to an invalid model: {source}")]
    Invalid { step: usize, source: SpaceError },
    #[error("path mismatch at step {step}: {detail}")]
    PathMismatch { step: usize, detail: String },
}

/// A walk down the search tree, one decision at a time.
pub trait Traversal: Clone {
    fn is_leaf(&self) -> bool;
    /// Number of options at the pending decision.
    fn branching(&self) -> usize;
    fn descend(&mut self, option: usize) -> Result<(), SpaceError>;
    /// Raw decisions committed so far.
    fn path(&self) -> &Path;
    fn instance(&self) -> &ModuleInstance;
    /// Site of the pending decision, if any.
    fn site(&self) -> Option<String>;
}

/// Traversal over the module's own decisions.
#[derive(Debug, Clone)]
pub struct RawTraversal {
    instance: ModuleInstance,
    path: Path,
}

impl RawTraversal {
    pub fn new(space: &SpaceExpr, in_shape: Shape) -> Result<RawTraversal, SpaceError> {
        let mut instance = ModuleInstance::instantiate(space);
        instance.initialize(in_shape)?;
        Ok(RawTraversal {
            instance,
            path: Path::default(),
        })
    }

    pub fn into_parts(self) -> (ModuleInstance, Path) {
        (self.instance, self.path)
    }

    pub fn options(&self) -> Vec<Literal> {
        self.instance.get_choices().map(|c| c.options).unwrap_or_default()
    }
}

impl Traversal for RawTraversal {
    fn is_leaf(&self) -> bool {
        self.instance.is_specified()
    }

    fn branching(&self) -> usize {
        self.instance.pending_width().unwrap_or(0)
    }

    fn descend(&mut self, option: usize) -> Result<(), SpaceError> {
        let choice = self.instance.get_choices()?;
        let value = choice
            .options
            .get(option)
            .cloned()
            .ok_or(SpaceError::IndexOutOfRange {
                index: option,
                len: choice.options.len(),
            })?;
        self.path.steps.push(PathStep {
            site: choice.site_id,
            index: option,
            value,
        });
        self.instance.choose(option)
    }

    fn path(&self) -> &Path {
        &self.path
    }

    fn instance(&self) -> &ModuleInstance {
        &self.instance
    }

    fn site(&self) -> Option<String> {
        self.instance.get_choices().ok().map(|c| c.site_id)
    }
}

/// Splits `[lo, hi)` into at most `branch_factor` contiguous parts, earlier
/// parts taking the larger share. Ranges no wider than `branch_factor` split
/// into singletons.
pub fn split_range(lo: usize, hi: usize, branch_factor: usize) -> Vec<(usize, usize)> {
    assert!(branch_factor >= 2, "branch factor must be at least 2");
    let len = hi - lo;
    if len <= branch_factor {
        return (lo..hi).map(|i| (i, i + 1)).collect();
    }
    let (base, extra) = (len / branch_factor, len % branch_factor);
    let mut parts = Vec::with_capacity(branch_factor);
    let mut start = lo;
    for p in 0..branch_factor {
        let size = base + usize::from(p < extra);
        parts.push((start, start + size));
        start += size;
    }
    parts
}

/// A node of a bisected decision: a contiguous slice of the domain's values.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaChoiceNode {
    pub lo: usize,
    pub hi: usize,
    pub children: Vec<MetaChoiceNode>,
}

impl MetaChoiceNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| c.depth() + 1).max().unwrap_or(0)
    }

    /// Leaf indices left to right.
    pub fn leaves(&self) -> Vec<usize> {
        if self.is_leaf() {
            return vec![self.lo];
        }
        self.children.iter().flat_map(MetaChoiceNode::leaves).collect()
    }
}

/// Recursively splits an ordered domain into `branch_factor`-ary ranges.
pub fn restructure_bisect(domain: &HyperparamDomain, branch_factor: usize) -> MetaChoiceNode {
    fn build(lo: usize, hi: usize, bf: usize) -> MetaChoiceNode {
        let children = if hi - lo == 1 {
            Vec::new()
        } else {
            split_range(lo, hi, bf).into_iter().map(|(a, b)| build(a, b, bf)).collect()
        };
        MetaChoiceNode { lo, hi, children }
    }
    assert!(!domain.values.is_empty(), "domain must be non-empty");
    build(0, domain.values.len(), branch_factor)
}

/// Presents every decision wider than `branch_factor` as a sequence of range
/// narrowing meta-decisions. The set of reachable leaves is unchanged.
#[derive(Debug, Clone)]
pub struct BisectTraversal {
    inner: RawTraversal,
    branch_factor: usize,
    range: Option<(usize, usize)>,
}

impl BisectTraversal {
    pub fn new(inner: RawTraversal, branch_factor: usize) -> BisectTraversal {
        assert!(branch_factor >= 2, "branch factor must be at least 2");
        BisectTraversal {
            inner,
            branch_factor,
            range: None,
        }
    }

    fn current_range(&self) -> (usize, usize) {
        self.range.unwrap_or((0, self.inner.branching()))
    }

    /// Range of raw option indices still open at the pending decision.
    pub fn open_range(&self) -> (usize, usize) {
        self.current_range()
    }
}

impl Traversal for BisectTraversal {
    fn is_leaf(&self) -> bool {
        self.inner.is_leaf()
    }

    fn branching(&self) -> usize {
        if self.is_leaf() {
            return 0;
        }
        let (lo, hi) = self.current_range();
        split_range(lo, hi, self.branch_factor).len()
    }

    fn descend(&mut self, option: usize) -> Result<(), SpaceError> {
        let (lo, hi) = self.current_range();
        let parts = split_range(lo, hi, self.branch_factor);
        let &(a, b) = parts.get(option).ok_or(SpaceError::IndexOutOfRange {
            index: option,
            len: parts.len(),
        })?;
        if b - a == 1 {
            self.range = None;
            self.inner.descend(a)
        } else {
            self.range = Some((a, b));
            Ok(())
        }
    }

    fn path(&self) -> &Path {
        self.inner.path()
    }

    fn instance(&self) -> &ModuleInstance {
        self.inner.instance()
    }

    fn site(&self) -> Option<String> {
        self.inner.site()
    }
}

/// Site of the decision whose descent just failed.
pub(crate) fn failed_site<T: Traversal>(t: &T) -> String {
    t.path().steps.last().map(|s| s.site.clone()).unwrap_or_default()
}

/// Completes `t` with uniformly random decisions.
pub fn rollout<T: Traversal, R: Rng + ?Sized>(t: &mut T, rng: &mut R) -> Result<(), NavError> {
    while !t.is_leaf() {
        let i = rng.random_range(0..t.branching());
        t.descend(i).map_err(|source| NavError::SampleFailed {
            site: failed_site(t),
            source,
        })?;
    }
    Ok(())
}

/// Samples one model by choosing uniformly at every surfaced decision.
pub fn sample_uniform(space: &SpaceExpr, in_shape: Shape, seed: u64) -> Result<Path, NavError> {
    let mut t = RawTraversal::new(space, in_shape).map_err(|source| NavError::SampleFailed {
        site: "<root>".into(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout(&mut t, &mut rng)?;
    Ok(t.path)
}

/// A subtree dropped during enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct Pruned {
    pub path: Path,
    pub error: SpaceError,
}

#[derive(Debug, Clone)]
pub struct Enumeration<T> {
    pub leaves: Vec<T>,
    pub truncated: bool,
    pub pruned: Vec<Pruned>,
}

/// Depth-first, left-to-right leaves below `root`, at most `limit` of them.
pub fn enumerate_traversal<T: Traversal>(root: T, limit: usize) -> Enumeration<T> {
    fn walk<T: Traversal>(t: T, limit: usize, out: &mut Enumeration<T>) {
        if out.leaves.len() >= limit {
            out.truncated = true;
            return;
        }
        if t.is_leaf() {
            out.leaves.push(t);
            return;
        }
        let b = t.branching();
        for i in 0..b {
            if out.leaves.len() >= limit {
                out.truncated = true;
                return;
            }
            let mut child = t.clone();
            match child.descend(i) {
                Ok(()) => walk(child, limit, out),
                Err(error) => out.pruned.push(Pruned {
                    path: child.path().clone(),
                    error,
                }),
            }
        }
    }
    let mut out = Enumeration {
        leaves: Vec::new(),
        truncated: false,
        pruned: Vec::new(),
    };
    walk(root, limit, &mut out);
    out
}

/// All complete paths, in depth-first order.
pub fn enumerate(space: &SpaceExpr, in_shape: Shape, limit: usize) -> Result<Enumeration<Path>, NavError> {
    assert!(limit >= 1, "limit must be positive");
    let root = RawTraversal::new(space, in_shape).map_err(NavError::Init)?;
    let e = enumerate_traversal(root, limit);
    Ok(Enumeration {
        leaves: e.leaves.into_iter().map(|t| t.path).collect(),
        truncated: e.truncated,
        pruned: e.pruned,
    })
}

/// Rebuilds the fully specified instance a path describes, checking every
/// step against the live decision sequence.
pub fn replay(space: &SpaceExpr, in_shape: Shape, path: &Path) -> Result<ModuleInstance, NavError> {
    let mut m = ModuleInstance::instantiate(space);
    m.initialize(in_shape).map_err(NavError::Init)?;
    for (n, step) in path.steps.iter().enumerate() {
        let mismatch = |detail: String| NavError::PathMismatch { step: n, detail };
        let choice = m
            .get_choices()
            .map_err(|_| mismatch("model is already fully specified".into()))?;
        if choice.site_id != step.site {
            return Err(mismatch(format!("expected site {}, path has {}", choice.site_id, step.site)));
        }
        match choice.options.get(step.index) {
            Some(v) if *v == step.value => {}
            Some(v) => return Err(mismatch(format!("option {} is {v}, path has {}", step.index, step.value))),
            None => return Err(mismatch(format!("option {} out of range", step.index))),
        }
        m.choose(step.index)
            .map_err(|source| NavError::Invalid { step: n, source })?;
    }
    if !m.is_specified() {
        return Err(NavError::PathMismatch {
            step: path.len(),
            detail: "path ends before the model is fully specified".into(),
        });
    }
    Ok(m)
}

/// Number of root-to-leaf paths, ignoring shape pruning. Saturates.
pub fn count_leaves(expr: &SpaceExpr) -> u128 {
    let prod = |it: &mut dyn Iterator<Item = u128>| it.fold(1u128, u128::saturating_mul);
    match expr.kind {
        ModuleKind::Concat => prod(&mut expr.children.iter().map(count_leaves)),
        ModuleKind::Or => expr
            .children
            .iter()
            .map(count_leaves)
            .fold(0, u128::saturating_add),
        ModuleKind::Optional => count_leaves(&expr.children[0]).saturating_add(1),
        ModuleKind::MaybeSwap => prod(&mut expr.children.iter().map(count_leaves)).saturating_mul(2),
        ModuleKind::Residual => count_leaves(&expr.children[0]),
        ModuleKind::Repeat | ModuleKind::RepeatTied => {
            let per = count_leaves(&expr.children[0]);
            expr.value_lists[0]
                .values
                .iter()
                .map(|v| {
                    let k = v.as_int().unwrap_or(0) as u32;
                    match (expr.kind, k) {
                        (_, 0) => 1,
                        (ModuleKind::RepeatTied, _) => per,
                        _ => per.checked_pow(k).unwrap_or(u128::MAX),
                    }
                })
                .fold(0, u128::saturating_add)
        }
        _ => prod(&mut expr.value_lists.iter().map(|l| l.values.len() as u128)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;

    fn ints(v: &[i64]) -> HyperparamDomain {
        HyperparamDomain {
            name: "filters".into(),
            values: v.iter().copied().map(Literal::Int).collect(),
        }
    }

    #[test]
    fn ceiling_first_splits() {
        assert_eq!(split_range(0, 5, 2), vec![(0, 3), (3, 5)]);
        assert_eq!(split_range(0, 3, 2), vec![(0, 2), (2, 3)]);
        assert_eq!(split_range(0, 7, 3), vec![(0, 3), (3, 5), (5, 7)]);
        assert_eq!(split_range(2, 4, 2), vec![(2, 3), (3, 4)]);
    }

    #[test]
    fn bisect_five_value_structure() {
        let root = restructure_bisect(&ints(&[16, 32, 48, 64, 80]), 2);
        assert_eq!((root.lo, root.hi), (0, 5));
        let (left, right) = (&root.children[0], &root.children[1]);
        assert_eq!((left.lo, left.hi, right.lo, right.hi), (0, 3, 3, 5));
        assert_eq!((left.children[0].lo, left.children[0].hi), (0, 2));
        assert_eq!((left.children[1].lo, left.children[1].hi), (2, 3));
        assert!(left.children[1].is_leaf());
        assert_eq!(right.children.len(), 2);
        assert_eq!(root.leaves(), vec![0, 1, 2, 3, 4]);
        assert_eq!(root.depth(), 3);
    }

    #[test]
    fn wide_branch_factor_is_flat() {
        for bf in [5, 6, 10] {
            let root = restructure_bisect(&ints(&[16, 32, 48, 64, 80]), bf);
            assert_eq!(root.children.len(), 5);
            assert!(root.children.iter().all(MetaChoiceNode::is_leaf));
            assert_eq!(root.depth(), 1);
        }
        let single = restructure_bisect(&ints(&[7]), 2);
        assert!(single.is_leaf());
    }

    #[test]
    fn relu_samples_empty_path() {
        let space = parse("(ReLU)").unwrap();
        for seed in 0..5 {
            assert!(sample_uniform(&space, Shape::new(vec![3]).unwrap(), seed).unwrap().is_empty());
        }
    }

    #[test]
    fn small_enumerations() {
        let shape = Shape::new(vec![4]).unwrap();
        let or = parse("(Or (ReLU) (ReLU))").unwrap();
        assert_eq!(enumerate(&or, shape.clone(), 100).unwrap().leaves.len(), 2);
        let rep = parse("(Repeat (Dropout [0.5, 0.9]) [1, 2])").unwrap();
        let e = enumerate(&rep, shape.clone(), 100).unwrap();
        assert_eq!(e.leaves.len(), 6);
        assert!(!e.truncated);
        let e = enumerate(&rep, shape, 4).unwrap();
        assert_eq!(e.leaves.len(), 4);
        assert!(e.truncated);
    }

    #[test]
    fn enumeration_prunes_invalid_subtrees() {
        let space = parse("(Concat (Conv2D [4] [3, 9] [1] [\"VALID\"]) (ReLU))").unwrap();
        let e = enumerate(&space, Shape::new(vec![8, 8, 3]).unwrap(), 10).unwrap();
        assert_eq!(e.leaves.len(), 1);
        assert_eq!(e.pruned.len(), 1);
        assert!(matches!(e.pruned[0].error, SpaceError::ShapeUnderflow { .. }));
    }

    #[test]
    fn replay_detects_mismatch() {
        let space = parse("(Concat (Affine [4, 8]) (Dropout [0.5, 0.9]))").unwrap();
        let shape = Shape::new(vec![3]).unwrap();
        let path = sample_uniform(&space, shape.clone(), 9).unwrap();
        assert!(replay(&space, shape.clone(), &path).unwrap().is_specified());
        let mut swapped = path.clone();
        swapped.steps.swap(0, 1);
        assert!(matches!(replay(&space, shape.clone(), &swapped), Err(NavError::PathMismatch { step: 0, .. })));
        let mut short = path.clone();
        short.steps.pop();
        assert!(matches!(replay(&space, shape.clone(), &short), Err(NavError::PathMismatch { step: 1, .. })));
        let mut wrong_value = path;
        wrong_value.steps[0].value = Literal::Int(99);
        assert!(matches!(replay(&space, shape, &wrong_value), Err(NavError::PathMismatch { .. })));
    }

    #[test]
    fn bisected_five_value_site_depth_three() {
        let space = parse("(Conv2D [16, 32, 48, 64, 80] [3] [1])").unwrap();
        let raw = RawTraversal::new(&space, Shape::new(vec![8, 8, 3]).unwrap()).unwrap();
        let wrapped = BisectTraversal::new(raw, 2);
        fn depths<T: Traversal>(t: T, d: usize, out: &mut Vec<usize>) {
            if t.is_leaf() {
                out.push(d);
                return;
            }
            assert!(t.branching() <= 2);
            for i in 0..t.branching() {
                let mut c = t.clone();
                c.descend(i).unwrap();
                depths(c, d + 1, out);
            }
        }
        let mut ds = Vec::new();
        depths(wrapped.clone(), 0, &mut ds);
        assert_eq!(ds, vec![3, 3, 2, 2, 2]);
        let leaves: Vec<_> = enumerate_traversal(wrapped, 100)
            .leaves
            .into_iter()
            .map(|t| t.path().steps[0].value.clone())
            .collect();
        assert_eq!(leaves, [16, 32, 48, 64, 80].map(Literal::Int));
    }

    #[test]
    fn path_json_shape() {
        let p = Path {
            steps: vec![PathStep {
                site: "0/Conv2D.filters".into(),
                index: 1,
                value: Literal::Int(64),
            }],
        };
        assert_eq!(p.to_json(), r#"[{"site":"0/Conv2D.filters","index":1,"value":64}]"#);
        assert_eq!(Path::from_json(&p.to_json()).unwrap(), p);
    }

    #[test]
    fn leaf_count_formula() {
        let small_cnn = parse(
            "(Concat (Conv2D [32, 64] [3, 5] [1]) (MaybeSwap BatchNormalization ReLU) (Optional (Dropout [0.5, 0.9])) (Affine [10]))",
        )
        .unwrap();
        assert_eq!(count_leaves(&small_cnn), 24);
        let rep = parse("(Repeat (Dropout [0.5, 0.9]) [1, 2])").unwrap();
        assert_eq!(count_leaves(&rep), 6);
    }
}
