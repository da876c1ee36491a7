use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use archspace::eval::{Cached, Evaluator};
use archspace::hash::{fnv1a64, to_hex};
use archspace::nav::RawTraversal;
use archspace::search::{run_search, EvalRecord, SearcherConfig, SearcherKind};
use archspace::{compile, Shape, SpaceExpr};
use serde::{Deserialize, Serialize};

use crate::commands::load_space;
use crate::{Failure, SearchArgs, EXIT_IO, EXIT_MANIFEST, EXIT_ROOT_SHAPE};

pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.json";
pub const SPACE_COPY: &str = "space.arch";

/// Everything needed to reproduce or aggregate a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub space_file: String,
    pub space_hash: String,
    pub input_shape: Shape,
    pub config: SearcherConfig,
    pub evaluator: String,
    pub budget: usize,
    pub reps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at_unix: Option<u64>,
}

impl RunManifest {
    fn same_run(&self, other: &RunManifest) -> bool {
        let strip = |m: &RunManifest| RunManifest {
            created_at_unix: None,
            ..m.clone()
        };
        strip(self) == strip(other)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub mean_best: f64,
    pub stderr_best: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub searcher: SearcherKind,
    pub reps: usize,
    pub steps: Vec<StepSummary>,
}

pub fn io_failure(path: &FsPath, e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &FsPath, contents: &[u8], tag: &str) -> Result<(), Failure> {
    let tmp = path.with_extension(format!("tmp-{tag}"));
    fs::write(&tmp, contents).map_err(|e| io_failure(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_failure(path, e))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

pub fn rep_log(dir: &FsPath, rep: usize) -> PathBuf {
    dir.join(format!("rep-{rep}.jsonl"))
}

pub fn read_manifest(dir: &FsPath) -> Result<RunManifest, Failure> {
    let file = dir.join(MANIFEST);
    let text = fs::read_to_string(&file).map_err(|e| Failure::new(EXIT_MANIFEST, format!("{}: {e}", file.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::new(EXIT_MANIFEST, format!("{}: {e}", file.display())))
}

pub fn read_records(file: &FsPath) -> Result<Vec<EvalRecord>, Failure> {
    let text = fs::read_to_string(file).map_err(|e| Failure::new(EXIT_MANIFEST, format!("{}: {e}", file.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Failure::new(EXIT_MANIFEST, format!("{}: {e}", file.display()))))
        .collect()
}

/// Mean and standard error of the mean (zero for a single value).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn summarize(kind: SearcherKind, logs: &[Vec<EvalRecord>]) -> RunSummary {
    let budget = logs.iter().map(Vec::len).min().unwrap_or(0);
    let steps = (0..budget)
        .map(|i| {
            let best: Vec<f64> = logs.iter().map(|l| l[i].best_so_far).collect();
            let (mean_best, stderr_best) = mean_stderr(&best);
            StepSummary {
                step: i + 1,
                mean_best,
                stderr_best,
                surrogate_size: logs[0][i].surrogate_size,
            }
        })
        .collect();
    RunSummary {
        searcher: kind,
        reps: logs.len(),
        steps,
    }
}

fn config_from(args: &SearchArgs) -> SearcherConfig {
    let mut c = SearcherConfig::new(args.searcher, args.seed);
    c.c = args.c.unwrap_or(c.c);
    c.branch_factor = args.branch_factor.unwrap_or(c.branch_factor);
    c.epsilon = args.epsilon.unwrap_or(c.epsilon);
    c.rollout_pool = args.rollout_pool.unwrap_or(c.rollout_pool);
    c.ngram_max = args.ngram_max.unwrap_or(c.ngram_max);
    c.ridge_lambda = args.ridge_lambda.unwrap_or(c.ridge_lambda);
    c
}

fn default_run_dir(args: &SearchArgs) -> PathBuf {
    let root = args.run_root.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let stem = args
        .space
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "space".into());
    root.join(format!("{stem}-{}-seed{}", args.searcher, args.seed))
}

fn run_rep(
    dir: &FsPath,
    rep: usize,
    config: &SearcherConfig,
    space: &SpaceExpr,
    shape: &Shape,
    evaluator: &dyn Evaluator,
    budget: usize,
    timing: bool,
) -> Result<(), Failure> {
    let config = SearcherConfig {
        seed: config.seed.wrapping_add(rep as u64),
        ..config.clone()
    };
    let records = run_search(&config, space, shape.clone(), evaluator, budget, timing)
        .map_err(|e| Failure::new(EXIT_ROOT_SHAPE, e.to_string()))?;
    let tag = rep.to_string();
    let models = dir.join("models");
    for r in &records {
        let Some(sig) = &r.signature else { continue };
        let file = models.join(format!("{sig}.json"));
        if file.exists() {
            continue;
        }
        if let Ok(graph) = compile(space, shape.clone(), &r.path) {
            write_atomic(&file, (graph.to_json() + "\n").as_bytes(), &tag)?;
        }
    }
    let mut csv = String::from("step,score,best\n");
    let mut jsonl = String::new();
    for r in &records {
        csv.push_str(&format!("{},{},{}\n", r.step, r.score, r.best_so_far));
        jsonl.push_str(&serde_json::to_string(r).expect("records serialize"));
        jsonl.push('\n');
    }
    write_atomic(&dir.join(format!("rep-{rep}.csv")), csv.as_bytes(), &tag)?;
    // The log goes last: its presence marks the rep as complete.
    write_atomic(&rep_log(dir, rep), jsonl.as_bytes(), &tag)
}

pub fn search(args: &SearchArgs) -> Result<(), Failure> {
    let (text, space) = load_space(&args.space)?;
    let shape = args.shape.input_shape.clone();
    RawTraversal::new(&space, shape.clone())
        .map_err(|e| Failure::new(EXIT_ROOT_SHAPE, format!("space does not accept input {shape}: {e}")))?;
    let config = config_from(args);
    config.validate().map_err(|e| Failure::new(EXIT_IO, e))?;
    if args.budget == 0 || args.reps == 0 {
        return Err(Failure::new(EXIT_IO, "budget and reps must be positive"));
    }
    let inner = args
        .evaluator
        .build(config.ngram_max)
        .map_err(|e| Failure::new(EXIT_IO, format!("evaluator: {e}")))?;
    let evaluator: Box<dyn Evaluator> = if inner.is_deterministic() {
        Box::new(Cached::new(inner))
    } else {
        inner
    };

    let dir = args.run_dir.clone().unwrap_or_else(|| default_run_dir(args));
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        space_file: args.space.display().to_string(),
        space_hash: to_hex(fnv1a64(text.as_bytes())),
        input_shape: shape.clone(),
        config: config.clone(),
        evaluator: args.evaluator.to_string(),
        budget: args.budget,
        reps: args.reps,
        created_at_unix: (!args.no_timing).then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        }),
    };
    if dir.join(MANIFEST).exists() {
        let existing = read_manifest(&dir)?;
        if !existing.same_run(&manifest) {
            return Err(Failure::new(
                EXIT_MANIFEST,
                format!("{} holds a different run; pick another --run-dir", dir.display()),
            ));
        }
    } else {
        fs::create_dir_all(dir.join("models")).map_err(|e| io_failure(&dir, e))?;
        write_atomic(&dir.join(SPACE_COPY), text.as_bytes(), "space")?;
        write_atomic(&dir.join(MANIFEST), to_json_pretty(&manifest).as_bytes(), "manifest")?;
    }
    fs::create_dir_all(dir.join("models")).map_err(|e| io_failure(&dir, e))?;

    let todo: Vec<usize> = (0..args.reps).filter(|&r| !rep_log(&dir, r).exists()).collect();
    if todo.len() < args.reps {
        eprintln!("resuming: {} of {} reps already complete", args.reps - todo.len(), args.reps);
    }
    let workers = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    for chunk in todo.chunks(workers) {
        thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&rep| {
                    let (dir, config, space, shape, ev) = (&dir, &config, &space, &shape, evaluator.as_ref());
                    s.spawn(move || run_rep(dir, rep, config, space, shape, ev, args.budget, !args.no_timing))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("rep thread panicked"))
                .collect::<Result<Vec<()>, Failure>>()
        })?;
    }

    let logs = (0..args.reps)
        .map(|r| read_records(&rep_log(&dir, r)))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(config.kind, &logs);
    write_atomic(&dir.join(SUMMARY), to_json_pretty(&summary).as_bytes(), "summary")?;
    let last = summary.steps.last().expect("budget is positive");
    println!(
        "{}: best after {} steps {:.4} +/- {:.4} over {} reps ({})",
        config.kind,
        last.step,
        last.mean_best,
        last.stderr_best,
        args.reps,
        dir.display()
    );
    Ok(())
}
