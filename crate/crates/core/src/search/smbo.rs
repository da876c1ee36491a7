use rand::Rng;

use crate::graph::GraphIR;
use crate::nav::{rollout, RawTraversal};

use super::features::{featurize, FeatureVector};
use super::ridge::{ridge_fit, SurrogateModel};
use super::Candidate;

/// Surrogate-guided search: most steps pick the best of a pool of random
/// rollouts as predicted by a ridge regressor over n-gram features.
#[derive(Debug, Clone)]
pub struct Smbo {
    root: RawTraversal,
    pub epsilon: f64,
    pub pool: usize,
    pub ngram_max: usize,
    pub lambda: f64,
    model: SurrogateModel,
}

impl Smbo {
    pub fn new(root: RawTraversal, epsilon: f64, pool: usize, ngram_max: usize, lambda: f64) -> Smbo {
        assert!(pool >= 1, "rollout pool must be positive");
        Smbo {
            root,
            epsilon,
            pool,
            ngram_max,
            lambda,
            model: ridge_fit(&[], lambda),
        }
    }

    pub fn model(&self) -> &SurrogateModel {
        &self.model
    }

    pub fn set_model(&mut self, model: SurrogateModel) {
        self.model = model;
    }

    pub fn training_size(&self) -> usize {
        self.model.training.len()
    }

    pub fn features(&self, graph: &GraphIR) -> FeatureVector {
        featurize(graph, self.ngram_max).with_bias()
    }

    fn random_candidate<R: Rng + ?Sized>(&self, rng: &mut R) -> Candidate {
        let mut t = self.root.clone();
        let outcome = rollout(&mut t, rng).map_err(|e| e.to_string());
        Candidate::from_traversal(&t, outcome)
    }

    /// Highest predicted candidate; ties go to the lowest signature hash.
    /// Falls back to the first candidate when none compiled.
    pub fn select(&self, pool: Vec<Candidate>) -> Candidate {
        let predictions: Vec<Option<f64>> = pool
            .iter()
            .map(|c| c.graph.as_ref().ok().map(|g| self.model.predict(&self.features(g))))
            .collect();
        let top = predictions.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let best = pool
            .iter()
            .zip(&predictions)
            .enumerate()
            .filter(|(_, (_, p))| **p == Some(top))
            .filter_map(|(i, (c, _))| c.graph.as_ref().ok().map(|g| (g.signature_hash(), i)))
            .min()
            .map_or(0, |(_, i)| i);
        pool.into_iter().nth(best).expect("pool is non-empty")
    }

    pub fn propose<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Candidate {
        if self.model.training.is_empty() || rng.random_bool(self.epsilon) {
            return self.random_candidate(rng);
        }
        let pool: Vec<Candidate> = (0..self.pool).map(|_| self.random_candidate(rng)).collect();
        self.select(pool)
    }

    /// Adds one training sample and refits. Failed models contribute only
    /// the bias feature.
    pub fn observe(&mut self, candidate: &Candidate, score: f64) {
        let x = match &candidate.graph {
            Ok(g) => self.features(g),
            Err(_) => FeatureVector::default().with_bias(),
        };
        let mut samples = std::mem::take(&mut self.model.training);
        samples.push((x, score));
        self.model = ridge_fit(&samples, self.lambda);
    }
}
