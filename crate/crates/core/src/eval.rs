//! Model evaluators: synthetic benchmarks, score tables and an external
//! process protocol for real training.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::graph::GraphIR;
use crate::hash::{fnv1a64, from_hex, to_hex, unit_interval};
use crate::nav::Path;
use crate::search::featurize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FailureKind {
    #[error("exit code {0}")]
    ExitCode(i32),
    #[error("killed by signal")]
    Signal,
    #[error("timed out")]
    Timeout,
    #[error("unparsable output {0:?}")]
    Parse(String),
    #[error("could not run: {0}")]
    Spawn(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no score recorded for model {0}")]
    UnknownModel(String),
    #[error("evaluation failed: {0}")]
    EvaluationFailed(FailureKind),
}

/// Scores a fully specified model in `[0, 1]`.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, graph: &GraphIR) -> Result<f64, EvalError>;

    /// Whether equal cache keys always produce equal scores.
    fn is_deterministic(&self) -> bool {
        true
    }

    /// Identity of a model as far as this evaluator is concerned.
    fn cache_key(&self, graph: &GraphIR) -> u64 {
        graph.signature_hash()
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(&self, graph: &GraphIR) -> Result<f64, EvalError> {
        (**self).evaluate(graph)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }

    fn cache_key(&self, graph: &GraphIR) -> u64 {
        (**self).cache_key(graph)
    }
}

/// Adapts a closure.
pub struct FnEvaluator<F>(pub F);

impl<F> Evaluator for FnEvaluator<F>
where
    F: Fn(&GraphIR) -> Result<f64, EvalError> + Send + Sync,
{
    fn evaluate(&self, graph: &GraphIR) -> Result<f64, EvalError> {
        (self.0)(graph)
    }

    fn cache_key(&self, graph: &GraphIR) -> u64 {
        // closures may look at the path, not just the model
        fnv1a64(graph.source_path.to_json().as_bytes()) ^ graph.signature_hash()
    }
}

fn clip01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn keyed_hash(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    for p in parts {
        bytes.extend_from_slice(p);
        bytes.push(0);
    }
    fnv1a64(&bytes)
}

/// Weight in `[-1, 1]` the linear benchmark assigns to a feature key.
pub fn feature_weight(seed: u64, key: &str) -> f64 {
    2.0 * unit_interval(keyed_hash(seed, &[key.as_bytes()])) - 1.0
}

/// `sigmoid(sum of hashed n-gram weights)` plus per-model Gaussian noise.
pub fn linear_ngram_score(graph: &GraphIR, seed: u64, noise_sigma: f64, ngram_max: usize) -> f64 {
    let features = featurize(graph, ngram_max);
    let z: f64 = features
        .counts
        .iter()
        .map(|(k, n)| feature_weight(seed, k) * f64::from(*n))
        .sum();
    let mut score = 1.0 / (1.0 + (-z).exp());
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(keyed_hash(seed, &[&graph.signature_hash().to_le_bytes()]));
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        score += normal.sample(&mut rng);
    }
    clip01(score)
}

/// Bonus in `[-0.05, 0.05]` for taking `value` at `site`.
pub fn prefix_bonus(seed: u64, site: &str, value: &str) -> f64 {
    0.1 * unit_interval(keyed_hash(seed, &[site.as_bytes(), value.as_bytes()])) - 0.05
}

/// `0.5` plus one seeded bonus per decision on the path, clipped to `[0, 1]`.
pub fn prefix_tree_score(path: &Path, seed: u64) -> f64 {
    let total: f64 = path
        .steps
        .iter()
        .map(|s| prefix_bonus(seed, &s.site, &s.value.to_string()))
        .sum();
    clip01(0.5 + total)
}

#[derive(Debug, Clone)]
pub struct LinearNgram {
    pub seed: u64,
    pub noise_sigma: f64,
    pub ngram_max: usize,
}

impl Evaluator for LinearNgram {
    fn evaluate(&self, graph: &GraphIR) -> Result<f64, EvalError> {
        Ok(linear_ngram_score(graph, self.seed, self.noise_sigma, self.ngram_max))
    }
}

#[derive(Debug, Clone)]
pub struct PrefixTree {
    pub seed: u64,
}

impl Evaluator for PrefixTree {
    fn evaluate(&self, graph: &GraphIR) -> Result<f64, EvalError> {
        Ok(prefix_tree_score(&graph.source_path, self.seed))
    }

    // Scores depend on the decisions taken, which several paths may share a
    // model signature with.
    fn cache_key(&self, graph: &GraphIR) -> u64 {
        fnv1a64(graph.source_path.to_json().as_bytes())
    }
}

/// Exact lookup by signature hash.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub scores: HashMap<u64, f64>,
}

impl Table {
    /// Reads a JSON object mapping hex signature hashes to scores.
    pub fn from_json(text: &str) -> Result<Table, String> {
        let raw: std::collections::BTreeMap<String, f64> =
            serde_json::from_str(text).map_err(|e| format!("bad score table: {e}"))?;
        let mut scores = HashMap::with_capacity(raw.len());
        for (k, v) in raw {
            let h = from_hex(&k).ok_or_else(|| format!("bad signature hash {k:?}"))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("score {v} for {k} is outside [0, 1]"));
            }
            scores.insert(h, v);
        }
        Ok(Table { scores })
    }

    pub fn to_json(&self) -> String {
        let sorted: std::collections::BTreeMap<String, f64> =
            self.scores.iter().map(|(k, v)| (to_hex(*k), *v)).collect();
        serde_json::to_string_pretty(&sorted).expect("serializable")
    }
}

impl Evaluator for Table {
    fn evaluate(&self, graph: &GraphIR) -> Result<f64, EvalError> {
        let h = graph.signature_hash();
        self.scores
            .get(&h)
            .copied()
            .ok_or_else(|| EvalError::UnknownModel(to_hex(h)))
    }
}

/// Runs a command per model: GraphIR JSON plus newline on stdin, one score
/// plus newline expected on stdout, exit status 0.
#[derive(Debug, Clone)]
pub struct External {
    pub command: String,
    pub timeout: Duration,
}

impl External {
    fn run(&self, input: String) -> Result<String, FailureKind> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| FailureKind::Spawn(e.to_string()))?;
        let mut stdin = child.stdin.take().expect("piped");
        let writer = thread::spawn(move || {
            // A command that ignores its input may close the pipe early.
            let _ = stdin.write_all(input.as_bytes());
        });
        let mut stdout = child.stdout.take().expect("piped");
        let reader = thread::spawn(move || {
            let mut out = String::new();
            stdout.read_to_string(&mut out).map(|_| out)
        });
        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait().map_err(|e| FailureKind::Spawn(e.to_string()))? {
                Some(status) => break status,
                None if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(FailureKind::Timeout);
                }
                None => thread::sleep(Duration::from_millis(5)),
            }
        };
        let _ = writer.join();
        let out = reader
            .join()
            .map_err(|_| FailureKind::Spawn("reader thread panicked".into()))?
            .map_err(|e| FailureKind::Parse(e.to_string()))?;
        match status.code() {
            Some(0) => Ok(out),
            Some(code) => Err(FailureKind::ExitCode(code)),
            None => Err(FailureKind::Signal),
        }
    }
}

fn parse_score(out: &str) -> Result<f64, FailureKind> {
    let line = out.strip_suffix('\n').unwrap_or(out);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let bad = || FailureKind::Parse(out.to_string());
    if line.contains('\n') {
        return Err(bad());
    }
    let v: f64 = line.trim().parse().map_err(|_| bad())?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(bad())
    }
}

impl Evaluator for External {
    fn evaluate(&self, graph: &GraphIR) -> Result<f64, EvalError> {
        let mut request = graph.to_json();
        request.push('\n');
        self.run(request)
            .and_then(|out| parse_score(&out))
            .map_err(EvalError::EvaluationFailed)
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}

/// Memoizes successful scores by cache key.
pub struct Cached<E> {
    inner: E,
    memo: Mutex<HashMap<u64, f64>>,
    hits: AtomicUsize,
    calls: AtomicUsize,
}

impl<E: Evaluator> Cached<E> {
    pub fn new(inner: E) -> Cached<E> {
        Cached {
            inner,
            memo: Mutex::new(HashMap::new()),
            hits: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    /// Number of times the wrapped evaluator actually ran.
    pub fn inner_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: Evaluator> Evaluator for Cached<E> {
    fn evaluate(&self, graph: &GraphIR) -> Result<f64, EvalError> {
        let key = self.inner.cache_key(graph);
        if let Some(v) = self.memo.lock().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(*v);
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let v = self.inner.evaluate(graph)?;
        self.memo.lock().expect("cache lock").insert(key, v);
        Ok(v)
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }

    fn cache_key(&self, graph: &GraphIR) -> u64 {
        self.inner.cache_key(graph)
    }
}

pub const DEFAULT_COMMAND_TIMEOUT_S: f64 = 3600.0;

/// Textual evaluator selection: `linear:<seed>[:sigma]`, `prefix:<seed>`,
/// `table:<file>`, `cmd:<program>[:timeout_s]`.
#[derive(Debug, Clone, PartialEq)]
pub enum EvaluatorSpec {
    Linear { seed: u64, sigma: f64 },
    Prefix { seed: u64 },
    Table { file: String },
    Command { program: String, timeout_s: f64 },
}

impl EvaluatorSpec {
    pub fn build(&self, ngram_max: usize) -> Result<Box<dyn Evaluator>, String> {
        Ok(match self {
            EvaluatorSpec::Linear { seed, sigma } => Box::new(LinearNgram {
                seed: *seed,
                noise_sigma: *sigma,
                ngram_max,
            }),
            EvaluatorSpec::Prefix { seed } => Box::new(PrefixTree { seed: *seed }),
            EvaluatorSpec::Table { file } => {
                let text = std::fs::read_to_string(file).map_err(|e| format!("{file}: {e}"))?;
                Box::new(Table::from_json(&text)?)
            }
            EvaluatorSpec::Command { program, timeout_s } => Box::new(External {
                command: program.clone(),
                timeout: Duration::from_secs_f64(*timeout_s),
            }),
        })
    }
}

impl FromStr for EvaluatorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| format!("evaluator {s:?} needs a kind prefix"))?;
        let seed = |t: &str| t.parse::<u64>().map_err(|e| format!("bad seed {t:?}: {e}"));
        match kind {
            "linear" => {
                let (seed_s, sigma) = match rest.split_once(':') {
                    Some((a, b)) => (a, b.parse::<f64>().map_err(|e| format!("bad sigma {b:?}: {e}"))?),
                    None => (rest, 0.0),
                };
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(format!("sigma must be non-negative, got {sigma}"));
                }
                Ok(EvaluatorSpec::Linear { seed: seed(seed_s)?, sigma })
            }
            "prefix" => Ok(EvaluatorSpec::Prefix { seed: seed(rest)? }),
            "table" if !rest.is_empty() => Ok(EvaluatorSpec::Table { file: rest.into() }),
            "cmd" if !rest.is_empty() => {
                // A trailing `:<number>` is the timeout; anything else is part of the program.
                match rest.rsplit_once(':') {
                    Some((prog, t)) if !prog.is_empty() && t.parse::<f64>().is_ok_and(|v| v > 0.0) => Ok(EvaluatorSpec::Command {
                        program: prog.into(),
                        timeout_s: t.parse().expect("checked"),
                    }),
                    _ => Ok(EvaluatorSpec::Command {
                        program: rest.into(),
                        timeout_s: DEFAULT_COMMAND_TIMEOUT_S,
                    }),
                }
            }
            _ => Err(format!("unknown evaluator {s:?}")),
        }
    }
}

impl fmt::Display for EvaluatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvaluatorSpec::Linear { seed, sigma } => write!(f, "linear:{seed}:{sigma}"),
            EvaluatorSpec::Prefix { seed } => write!(f, "prefix:{seed}"),
            EvaluatorSpec::Table { file } => write!(f, "table:{file}"),
            EvaluatorSpec::Command { program, timeout_s } => write!(f, "cmd:{program}:{timeout_s}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{parse, Literal};
    use crate::graph::compile;
    use crate::nav::{enumerate, PathStep};
    use crate::shape::Shape;

    const SMALL_CNN: &str = "(Concat (Conv2D [32, 64] [3, 5] [1]) (MaybeSwap BatchNormalization ReLU) (Optional (Dropout [0.5, 0.9])) (Affine [10]))";

    fn small_cnn_graphs() -> Vec<GraphIR> {
        let space = parse(SMALL_CNN).unwrap();
        let s = Shape::new(vec![32, 32, 3]).unwrap();
        enumerate(&space, s.clone(), 100)
            .unwrap()
            .leaves
            .iter()
            .map(|p| compile(&space, s.clone(), p).unwrap())
            .collect()
    }

    fn identity_graph() -> GraphIR {
        compile(&parse("(Empty)").unwrap(), Shape::new(vec![4]).unwrap(), &Path::default()).unwrap()
    }

    #[test]
    fn linear_empty_features_is_half() {
        assert_eq!(linear_ngram_score(&identity_graph(), 7, 0.0, 3), 0.5);
    }

    #[test]
    fn linear_noise_is_per_model() {
        for g in small_cnn_graphs() {
            let a = linear_ngram_score(&g, 3, 0.1, 3);
            assert_eq!(a, linear_ngram_score(&g.clone(), 3, 0.1, 3));
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn linear_golden_value() {
        let g = &small_cnn_graphs()[0];
        let v = linear_ngram_score(g, 42, 0.0, 3);
        // recomputed from the definition: sigmoid of the summed key weights
        let keys = [
            "(Conv2D)",
            "(BatchNorm)",
            "(ReLU)",
            "(Affine)",
            "(Conv2D,BatchNorm)",
            "(BatchNorm,ReLU)",
            "(ReLU,Affine)",
            "(Conv2D,BatchNorm,ReLU)",
            "(BatchNorm,ReLU,Affine)",
        ];
        let z: f64 = keys.iter().map(|k| feature_weight(42, k)).sum();
        assert!((v - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
        assert_eq!(format!("{v:.12}"), "0.093416789236");
    }

    #[test]
    fn prefix_empty_path_and_additivity() {
        assert_eq!(prefix_tree_score(&Path::default(), 1), 0.5);
        let step = |site: &str, v: i64| PathStep {
            site: site.into(),
            index: 0,
            value: Literal::Int(v),
        };
        let a = Path {
            steps: vec![step("a", 1), step("b", 2)],
        };
        let b = Path {
            steps: vec![step("a", 1), step("b", 3)],
        };
        let diff = prefix_tree_score(&a, 5) - prefix_tree_score(&b, 5);
        let expected = prefix_bonus(5, "b", "2") - prefix_bonus(5, "b", "3");
        assert!((diff - expected).abs() < 1e-12);
        for s in 0..200 {
            let bonus = prefix_bonus(s, "x", "y");
            assert!((-0.05..=0.05).contains(&bonus));
        }
    }

    #[test]
    fn table_lookup() {
        let graphs = small_cnn_graphs();
        let table = Table {
            scores: graphs.iter().enumerate().map(|(i, g)| (g.signature_hash(), i as f64 / 100.0)).collect(),
        };
        let reloaded = Table::from_json(&table.to_json()).unwrap();
        for (i, g) in graphs.iter().enumerate() {
            assert_eq!(reloaded.evaluate(g).unwrap(), i as f64 / 100.0);
        }
        assert!(matches!(reloaded.evaluate(&identity_graph()), Err(EvalError::UnknownModel(_))));
        assert!(Table::from_json(r#"{"zz": 0.5}"#).is_err());
    }

    #[test]
    fn cache_counts_hits() {
        let c = Cached::new(LinearNgram {
            seed: 1,
            noise_sigma: 0.0,
            ngram_max: 2,
        });
        let graphs = small_cnn_graphs();
        c.evaluate(&graphs[0]).unwrap();
        c.evaluate(&graphs[1]).unwrap();
        assert_eq!(c.hits(), 0);
        c.evaluate(&graphs[0]).unwrap();
        assert_eq!((c.hits(), c.inner_calls()), (1, 2));
    }

    #[test]
    fn external_protocol() {
        let g = identity_graph();
        let ext = |cmd: &str, t: f64| External {
            command: cmd.into(),
            timeout: Duration::from_secs_f64(t),
        };
        assert_eq!(ext("cat > /dev/null; echo 0.5", 10.0).evaluate(&g), Ok(0.5));
        assert_eq!(
            ext("echo 1.5", 10.0).evaluate(&g),
            Err(EvalError::EvaluationFailed(FailureKind::Parse("1.5\n".into())))
        );
        assert_eq!(
            ext("exit 3", 10.0).evaluate(&g),
            Err(EvalError::EvaluationFailed(FailureKind::ExitCode(3)))
        );
        assert_eq!(
            ext("sleep 5; echo 0.5", 0.2).evaluate(&g),
            Err(EvalError::EvaluationFailed(FailureKind::Timeout))
        );
        // the request is the canonical graph JSON plus a newline
        let echo = ext("head -c 1 >/dev/null; grep -c ir_version", 10.0).evaluate(&g);
        assert_eq!(echo, Ok(1.0));
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("linear:7".parse(), Ok(EvaluatorSpec::Linear { seed: 7, sigma: 0.0 }));
        assert_eq!("linear:7:0.1".parse(), Ok(EvaluatorSpec::Linear { seed: 7, sigma: 0.1 }));
        assert_eq!("prefix:3".parse(), Ok(EvaluatorSpec::Prefix { seed: 3 }));
        assert_eq!(
            "table:scores.json".parse(),
            Ok(EvaluatorSpec::Table {
                file: "scores.json".into()
            })
        );
        assert_eq!(
            "cmd:./train.sh:30".parse(),
            Ok(EvaluatorSpec::Command {
                program: "./train.sh".into(),
                timeout_s: 30.0
            })
        );
        assert_eq!(
            "cmd:python train.py".parse(),
            Ok(EvaluatorSpec::Command {
                program: "python train.py".into(),
                timeout_s: DEFAULT_COMMAND_TIMEOUT_S
            })
        );
        assert!("bogus:1".parse::<EvaluatorSpec>().is_err());
        assert!("linear:x".parse::<EvaluatorSpec>().is_err());
    }
}
