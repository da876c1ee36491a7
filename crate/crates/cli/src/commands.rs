use std::fs;
use std::path::Path as FsPath;

use archspace::graph::CompileError;
use archspace::nav::{count_leaves, RawTraversal};
use archspace::{compile, enumerate, parse, Path, Shape, SpaceExpr};

use crate::{Failure, EXIT_IO, EXIT_PARSE, EXIT_PATH_MISMATCH, EXIT_ROOT_SHAPE, EXIT_SHAPE};

pub fn read_text(file: &FsPath) -> Result<String, Failure> {
    fs::read_to_string(file).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", file.display())))
}

pub fn load_space(file: &FsPath) -> Result<(String, SpaceExpr), Failure> {
    let text = read_text(file)?;
    let space = parse(&text).map_err(|e| Failure::new(EXIT_PARSE, format!("{}:{e}", file.display())))?;
    Ok((text, space))
}

fn check_root(space: &SpaceExpr, shape: &Shape) -> Result<(), Failure> {
    RawTraversal::new(space, shape.clone())
        .map(|_| ())
        .map_err(|e| Failure::new(EXIT_ROOT_SHAPE, format!("space does not accept input {shape}: {e}")))
}

pub fn validate(file: &FsPath, shape: Shape, cap: u128) -> Result<(), Failure> {
    let (_, space) = load_space(file)?;
    check_root(&space, &shape)?;
    let upper = count_leaves(&space);
    let limit = usize::try_from(cap.saturating_add(1)).unwrap_or(usize::MAX);
    let e = enumerate(&space, shape, limit).map_err(|e| Failure::new(EXIT_ROOT_SHAPE, e.to_string()))?;
    if e.truncated || e.leaves.len() as u128 > cap {
        println!("> {cap} models");
        return Ok(());
    }
    if e.leaves.is_empty() {
        return Err(Failure::new(EXIT_ROOT_SHAPE, "no model in the space has valid shapes"));
    }
    let n = e.leaves.len();
    println!("{n} {}", if n == 1 { "model" } else { "models" });
    if upper > n as u128 {
        eprintln!("note: {} decision paths lead to invalid shapes", upper - n as u128);
    }
    Ok(())
}

pub fn enumerate_cmd(file: &FsPath, shape: Shape, limit: Option<usize>, out: &FsPath) -> Result<(), Failure> {
    let (_, space) = load_space(file)?;
    check_root(&space, &shape)?;
    let limit = limit.unwrap_or(usize::MAX).max(1);
    let e = enumerate(&space, shape, limit).map_err(|e| Failure::new(EXIT_ROOT_SHAPE, e.to_string()))?;
    let io = |e: std::io::Error| Failure::new(EXIT_IO, format!("{}: {e}", out.display()));
    fs::create_dir_all(out).map_err(io)?;
    let width = e.leaves.len().saturating_sub(1).to_string().len().max(5);
    for (i, path) in e.leaves.iter().enumerate() {
        fs::write(out.join(format!("path-{i:0width$}.json")), path.to_json() + "\n").map_err(io)?;
    }
    println!("wrote {} paths to {}", e.leaves.len(), out.display());
    if e.truncated {
        println!("truncated: stopped at the limit of {limit}");
    }
    Ok(())
}

pub fn compile_cmd(file: &FsPath, path_file: &FsPath, shape: Shape) -> Result<(), Failure> {
    let (_, space) = load_space(file)?;
    let text = read_text(path_file)?;
    let path = Path::from_json(&text)
        .map_err(|e| Failure::new(EXIT_PATH_MISMATCH, format!("{}: not a path: {e}", path_file.display())))?;
    let graph = compile(&space, shape, &path).map_err(|e| match e {
        CompileError::Shape(_) => Failure::new(EXIT_SHAPE, e.to_string()),
        _ => Failure::new(EXIT_PATH_MISMATCH, e.to_string()),
    })?;
    println!("{}", graph.to_json());
    Ok(())
}
