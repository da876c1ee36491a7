use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use archspace::hash::{fnv1a64, to_hex};
use archspace::search::{EvalRecord, SearcherConfig};

use crate::run::{mean_stderr, read_manifest, read_records, rep_log, RunManifest, SPACE_COPY};
use crate::{Failure, EXIT_MANIFEST};

pub const THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

struct Group {
    manifest: RunManifest,
    logs: Vec<Vec<EvalRecord>>,
}

fn load(dir: &PathBuf) -> Result<(RunManifest, Vec<Vec<EvalRecord>>), Failure> {
    let m = read_manifest(dir)?;
    if let Ok(text) = fs::read_to_string(dir.join(SPACE_COPY)) {
        if to_hex(fnv1a64(text.as_bytes())) != m.space_hash {
            return Err(Failure::new(
                EXIT_MANIFEST,
                format!("{}: space file does not match the manifest hash", dir.display()),
            ));
        }
    }
    let logs = (0..m.reps)
        .map(|r| rep_log(dir, r))
        .filter(|f| f.exists())
        .map(|f| read_records(&f))
        .collect::<Result<Vec<_>, _>>()?;
    if logs.is_empty() {
        return Err(Failure::new(EXIT_MANIFEST, format!("{}: no completed reps", dir.display())));
    }
    Ok((m, logs))
}

/// Best-so-far curves and fraction-above-threshold tables, as CSV.
pub fn render(run_dirs: &[PathBuf]) -> Result<String, Failure> {
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    let mut reference: Option<RunManifest> = None;
    for dir in run_dirs {
        let (m, logs) = load(dir)?;
        if let Some(r) = &reference {
            if r.space_hash != m.space_hash || r.input_shape != m.input_shape || r.evaluator != m.evaluator {
                return Err(Failure::new(
                    EXIT_MANIFEST,
                    format!("{}: runs differ in space, input shape or evaluator", dir.display()),
                ));
            }
        } else {
            reference = Some(m.clone());
        }
        let mut label = m.config.kind.to_string();
        if let Some(g) = groups.get(&label) {
            let unseeded = |m: &RunManifest| SearcherConfig { seed: 0, ..m.config.clone() };
            if unseeded(&g.manifest) != unseeded(&m) {
                label = format!("{label}@{}", dir.display());
            }
        }
        groups
            .entry(label)
            .or_insert_with(|| Group {
                manifest: m,
                logs: Vec::new(),
            })
            .logs
            .extend(logs);
    }

    let mut out = String::from("# best score so far by step\nsearcher,step,mean,stderr,reps\n");
    for (label, g) in &groups {
        let steps = g.logs.iter().map(Vec::len).min().unwrap_or(0);
        for i in 0..steps {
            let best: Vec<f64> = g.logs.iter().map(|l| l[i].best_so_far).collect();
            let (mean, se) = mean_stderr(&best);
            out.push_str(&format!("{label},{},{mean},{se},{}\n", i + 1, best.len()));
        }
    }
    out.push_str("\n# fraction of evaluated models scoring above each threshold\nsearcher,threshold,fraction,above,total\n");
    for (label, g) in &groups {
        let scores: Vec<f64> = g.logs.iter().flatten().map(|r| r.score).collect();
        for t in THRESHOLDS {
            let above = scores.iter().filter(|&&s| s > t).count();
            let frac = above as f64 / scores.len() as f64;
            out.push_str(&format!("{label},{t:.1},{frac},{above},{}\n", scores.len()));
        }
    }
    Ok(out)
}

pub fn report(run_dirs: &[PathBuf]) -> Result<(), Failure> {
    print!("{}", render(run_dirs)?);
    Ok(())
}
