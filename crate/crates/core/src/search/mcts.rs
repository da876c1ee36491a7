use rand::Rng;

use crate::nav::{failed_site, rollout, Traversal};

use super::Candidate;

/// `mean + 2c * sqrt(2 ln(n_parent) / n_child)`, infinite for unvisited children.
pub fn ucb_score(mean: f64, n_parent: u64, n_child: u64, c: f64) -> f64 {
    if n_child == 0 {
        return f64::INFINITY;
    }
    mean + 2.0 * c * (2.0 * (n_parent as f64).ln() / n_child as f64).sqrt()
}

/// Visit statistics of one expanded tree node. `children[i]` is the arena
/// index of option `i`'s node once expanded.
#[derive(Debug, Clone, PartialEq)]
pub struct UcbStats {
    pub visits: u64,
    pub score_sum: f64,
    pub children: Vec<Option<usize>>,
}

impl UcbStats {
    fn new(branching: usize) -> UcbStats {
        UcbStats {
            visits: 0,
            score_sum: 0.0,
            children: vec![None; branching],
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.visits > 0).then(|| self.score_sum / self.visits as f64)
    }
}

/// Monte Carlo tree search over any traversal.
#[derive(Debug, Clone)]
pub struct Mcts<T> {
    root: T,
    c: f64,
    nodes: Vec<UcbStats>,
    pending: Vec<usize>,
}

impl<T: Traversal> Mcts<T> {
    pub fn new(root: T, c: f64) -> Mcts<T> {
        let b = root.branching();
        Mcts {
            root,
            c,
            nodes: vec![UcbStats::new(b)],
            pending: Vec::new(),
        }
    }

    /// Arena of expanded nodes; index 0 is the root.
    pub fn nodes(&self) -> &[UcbStats] {
        &self.nodes
    }

    pub fn root_stats(&self) -> &UcbStats {
        &self.nodes[0]
    }

    fn select_child<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> usize {
        let stats = &self.nodes[node];
        let unexpanded: Vec<usize> = (0..stats.children.len())
            .filter(|&i| stats.children[i].is_none())
            .collect();
        if !unexpanded.is_empty() {
            return unexpanded[rng.random_range(0..unexpanded.len())];
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, child) in stats.children.iter().enumerate() {
            let ch = &self.nodes[child.expect("all expanded")];
            let s = ucb_score(ch.mean().unwrap_or(0.0), stats.visits, ch.visits, self.c);
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        best
    }

    /// Runs selection, expansion and rollout. The trail of tree nodes is kept
    /// until the matching [`Mcts::backpropagate`].
    pub fn simulate<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (T, Result<(), String>) {
        let mut t = self.root.clone();
        let mut node = 0;
        let mut trail = vec![0];
        let outcome = loop {
            if t.is_leaf() {
                break Ok(());
            }
            let option = self.select_child(node, rng);
            if let Err(e) = t.descend(option) {
                let child = match self.nodes[node].children[option] {
                    Some(child) => child,
                    None => self.push_node(node, option, 0),
                };
                trail.push(child);
                break Err(format!("{}: {e}", failed_site(&t)));
            }
            match self.nodes[node].children[option] {
                Some(child) => {
                    node = child;
                    trail.push(node);
                }
                None => {
                    let id = self.push_node(node, option, t.branching());
                    trail.push(id);
                    break rollout(&mut t, rng).map_err(|e| e.to_string());
                }
            }
        };
        self.pending = trail;
        (t, outcome)
    }

    fn push_node(&mut self, parent: usize, option: usize, branching: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(UcbStats::new(branching));
        self.nodes[parent].children[option] = Some(id);
        id
    }

    /// Credits `score` to every node on the last simulation's trail.
    pub fn backpropagate(&mut self, score: f64) {
        for id in std::mem::take(&mut self.pending) {
            self.nodes[id].visits += 1;
            self.nodes[id].score_sum += score;
        }
    }

    pub fn propose<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Candidate {
        let (t, outcome) = self.simulate(rng);
        Candidate::from_traversal(&t, outcome)
    }
}
