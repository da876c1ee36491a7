use std::collections::BTreeMap;

use crate::graph::GraphIR;

/// Key of the always-on intercept feature.
pub const BIAS: &str = "(BIAS)";

/// Sparse counts of module-kind n-grams.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureVector {
    pub counts: BTreeMap<String, u32>,
}

impl FeatureVector {
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn get(&self, key: &str) -> u32 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn with_bias(mut self) -> FeatureVector {
        self.counts.insert(BIAS.to_string(), 1);
        self
    }
}

pub fn ngram_key<S: AsRef<str>>(gram: &[S]) -> String {
    let parts: Vec<&str> = gram.iter().map(AsRef::as_ref).collect();
    format!("({})", parts.join(","))
}

/// Counts every contiguous n-gram, `1 <= n <= ngram_max`, of a kind sequence.
pub fn featurize_sequence<S: AsRef<str>>(seq: &[S], ngram_max: usize) -> FeatureVector {
    let mut counts = BTreeMap::new();
    for n in 1..=ngram_max.min(seq.len()) {
        for gram in seq.windows(n) {
            *counts.entry(ngram_key(gram)).or_insert(0) += 1;
        }
    }
    FeatureVector { counts }
}

/// n-gram features of a compiled model's basic-module sequence.
/// Hyperparameter values and compiler plumbing nodes are ignored.
pub fn featurize(graph: &GraphIR, ngram_max: usize) -> FeatureVector {
    let names: Vec<&str> = graph.module_sequence().into_iter().map(|op| op.name()).collect();
    featurize_sequence(&names, ngram_max)
}
