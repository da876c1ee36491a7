//! Search strategies and the evaluation loop that drives them.

mod features;
mod mcts;
mod ridge;
mod smbo;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use features::{featurize, featurize_sequence, ngram_key, FeatureVector, BIAS};
pub use mcts::{ucb_score, Mcts, UcbStats};
pub use ridge::{ridge_fit, SurrogateModel};
pub use smbo::Smbo;

use crate::dsl::SpaceExpr;
use crate::eval::Evaluator;
use crate::graph::{compile_instance, GraphIR};
use crate::hash::to_hex;
use crate::nav::{rollout, BisectTraversal, Path, RawTraversal, Traversal};
use crate::shape::Shape;
use crate::space::SpaceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearcherKind {
    Random,
    Mcts,
    MctsBisect,
    Smbo,
}

impl SearcherKind {
    pub const ALL: [SearcherKind; 4] = [
        SearcherKind::Random,
        SearcherKind::Mcts,
        SearcherKind::MctsBisect,
        SearcherKind::Smbo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SearcherKind::Random => "random",
            SearcherKind::Mcts => "mcts",
            SearcherKind::MctsBisect => "mcts_bisect",
            SearcherKind::Smbo => "smbo",
        }
    }
}

impl fmt::Display for SearcherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SearcherKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SearcherKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('_', "-") == s)
            .ok_or_else(|| format!("unknown searcher {s:?}"))
    }
}

/// Searcher knobs. The defaults are arbitrary but fixed choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearcherConfig {
    pub kind: SearcherKind,
    /// UCB exploration constant.
    pub c: f64,
    pub branch_factor: usize,
    /// Probability that an SMBO step is a plain random rollout.
    pub epsilon: f64,
    /// Random rollouts scored by the surrogate per SMBO step.
    pub rollout_pool: usize,
    pub ngram_max: usize,
    pub ridge_lambda: f64,
    pub seed: u64,
}

impl Default for SearcherConfig {
    fn default() -> Self {
        SearcherConfig {
            kind: SearcherKind::Random,
            c: 0.25,
            branch_factor: 2,
            epsilon: 0.1,
            rollout_pool: 512,
            ngram_max: 3,
            ridge_lambda: 1.0,
            seed: 0,
        }
    }
}

impl SearcherConfig {
    pub fn new(kind: SearcherKind, seed: u64) -> SearcherConfig {
        SearcherConfig {
            kind,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(format!("c must be a finite non-negative number, got {}", self.c));
        }
        if self.branch_factor < 2 {
            return Err("branch_factor must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(format!("epsilon must be in [0, 1], got {}", self.epsilon));
        }
        if self.rollout_pool == 0 || self.ngram_max == 0 {
            return Err("rollout_pool and ngram_max must be positive".into());
        }
        if !(self.ridge_lambda > 0.0 && self.ridge_lambda.is_finite()) {
            return Err(format!("ridge_lambda must be positive, got {}", self.ridge_lambda));
        }
        Ok(())
    }
}

/// A proposed model: the decisions taken and, when they lead to a valid
/// model, its compiled graph.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub path: Path,
    pub graph: Result<GraphIR, String>,
}

impl Candidate {
    pub(crate) fn from_traversal<T: Traversal>(t: &T, outcome: Result<(), String>) -> Candidate {
        let path = t.path().clone();
        let graph = outcome.and_then(|()| compile_instance(t.instance(), path.clone()).map_err(|e| e.to_string()));
        Candidate { path, graph }
    }
}

/// A search strategy as a propose/observe state machine.
pub trait Searcher {
    fn propose(&mut self, rng: &mut dyn RngCore) -> Candidate;
    fn observe(&mut self, candidate: &Candidate, score: f64);
    /// Training-set size of a model-based searcher.
    fn surrogate_size(&self) -> Option<usize> {
        None
    }
}

/// Uniform random rollouts from the root.
#[derive(Debug, Clone)]
pub struct RandomSearch {
    root: RawTraversal,
}

impl RandomSearch {
    pub fn new(root: RawTraversal) -> RandomSearch {
        RandomSearch { root }
    }
}

impl Searcher for RandomSearch {
    fn propose(&mut self, rng: &mut dyn RngCore) -> Candidate {
        let mut t = self.root.clone();
        let outcome = rollout(&mut t, rng).map_err(|e| e.to_string());
        Candidate::from_traversal(&t, outcome)
    }

    fn observe(&mut self, _: &Candidate, _: f64) {}
}

impl<T: Traversal> Searcher for Mcts<T> {
    fn propose(&mut self, rng: &mut dyn RngCore) -> Candidate {
        Mcts::propose(self, rng)
    }

    fn observe(&mut self, _: &Candidate, score: f64) {
        self.backpropagate(score);
    }
}

impl Searcher for Smbo {
    fn propose(&mut self, rng: &mut dyn RngCore) -> Candidate {
        Smbo::propose(self, rng)
    }

    fn observe(&mut self, candidate: &Candidate, score: f64) {
        Smbo::observe(self, candidate, score);
    }

    fn surrogate_size(&self) -> Option<usize> {
        Some(self.training_size())
    }
}

pub fn build_searcher(
    config: &SearcherConfig,
    space: &SpaceExpr,
    in_shape: Shape,
) -> Result<Box<dyn Searcher>, SpaceError> {
    let root = RawTraversal::new(space, in_shape)?;
    Ok(match config.kind {
        SearcherKind::Random => Box::new(RandomSearch::new(root)),
        SearcherKind::Mcts => Box::new(Mcts::new(root, config.c)),
        SearcherKind::MctsBisect => Box::new(Mcts::new(BisectTraversal::new(root, config.branch_factor), config.c)),
        SearcherKind::Smbo => Box::new(Smbo::new(
            root,
            config.epsilon,
            config.rollout_pool,
            config.ngram_max,
            config.ridge_lambda,
        )),
    })
}

/// One evaluation in a search run. Steps count from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub path: Path,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
    pub score: f64,
    pub best_so_far: f64,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

/// Scores `candidate`, mapping every kind of failure (invalid model,
/// evaluator error, score outside `[0, 1]`) to an error message.
pub fn score_candidate(candidate: &Candidate, evaluator: &dyn Evaluator) -> Result<f64, String> {
    let graph = candidate.graph.as_ref().map_err(Clone::clone)?;
    let s = evaluator.evaluate(graph).map_err(|e| e.to_string())?;
    if (0.0..=1.0).contains(&s) {
        Ok(s)
    } else {
        Err(format!("score {s} outside [0, 1]"))
    }
}

/// Runs `budget` propose/evaluate/observe rounds with a single RNG seeded
/// from `config.seed`. Failed evaluations score 0 and still use budget.
pub fn run_search(
    config: &SearcherConfig,
    space: &SpaceExpr,
    in_shape: Shape,
    evaluator: &dyn Evaluator,
    budget: usize,
    timing: bool,
) -> Result<Vec<EvalRecord>, SpaceError> {
    let mut searcher = build_searcher(config, space, in_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best = f64::NEG_INFINITY;
    let mut records = Vec::with_capacity(budget);
    for step in 1..=budget {
        let started = Instant::now();
        let candidate = searcher.propose(&mut rng);
        let outcome = score_candidate(&candidate, evaluator);
        let score = *outcome.as_ref().unwrap_or(&0.0);
        searcher.observe(&candidate, score);
        best = best.max(score);
        records.push(EvalRecord {
            step,
            signature: candidate.graph.as_ref().ok().map(|g| to_hex(g.signature_hash())),
            path: candidate.path,
            score,
            best_so_far: best,
            failed: outcome.is_err(),
            error: outcome.err(),
            surrogate_size: searcher.surrogate_size(),
            wall_ms: timing.then(|| started.elapsed().as_millis() as u64),
        });
    }
    Ok(records)
}
