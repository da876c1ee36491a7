//! Compilation of fully specified models to a small dataflow-graph IR.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{Literal, ModuleKind, SpaceExpr};
use crate::hash::{fnv1a64, to_hex};
use crate::nav::{replay, NavError, Path};
use crate::shape::{merge_max, window_out, Padding, Shape};
use crate::space::{ModuleInstance, SpaceError, State};

pub const IR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Conv2D,
    MaxPool2D,
    Affine,
    ReLU,
    Dropout,
    BatchNorm,
    Flatten,
    Identity,
    Add,
    PadZeros,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Conv2D => "Conv2D",
            Op::MaxPool2D => "MaxPool2D",
            Op::Affine => "Affine",
            Op::ReLU => "ReLU",
            Op::Dropout => "Dropout",
            Op::BatchNorm => "BatchNorm",
            Op::Flatten => "Flatten",
            Op::Identity => "Identity",
            Op::Add => "Add",
            Op::PadZeros => "PadZeros",
        }
    }

    /// Nodes inserted by the compiler rather than by a basic module.
    pub fn is_plumbing(self) -> bool {
        matches!(self, Op::Flatten | Op::Identity | Op::Add | Op::PadZeros)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphNode {
    pub id: usize,
    pub op: Op,
    pub attrs: BTreeMap<String, Literal>,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub param_count: u64,
    pub inputs: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub train_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphIR {
    pub ir_version: u32,
    pub nodes: Vec<GraphNode>,
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub training_config: BTreeMap<String, Literal>,
    pub source_path: Path,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompileError {
    #[error(transparent)]
    PathMismatch(NavError),
    #[error(transparent)]
    Shape(SpaceError),
    #[error("module is not fully specified")]
    NotSpecified,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed graph: {0}")]
    MalformedGraph(String),
    #[error("inconsistent shapes at node {node}: {detail}")]
    InconsistentShapes { node: usize, detail: String },
}

/// Output shape and parameter count of a single op.
pub fn infer_node(
    op: Op,
    attrs: &BTreeMap<String, Literal>,
    in_shape: &Shape,
) -> Result<(Shape, u64), String> {
    let int = |k: &str| -> Result<usize, String> {
        match attrs.get(k) {
            Some(Literal::Int(v)) if *v >= 1 => Ok(*v as usize),
            other => Err(format!("{op}: attribute {k} must be a positive integer, got {other:?}")),
        }
    };
    let padding = || -> Result<Padding, String> {
        attrs
            .get("padding")
            .and_then(Literal::as_str)
            .and_then(Padding::parse)
            .ok_or_else(|| format!("{op}: bad padding"))
    };
    let spatial = |kernel: usize, stride: usize, padding: Padding, channels: usize| -> Result<Shape, String> {
        if in_shape.order() != 3 {
            return Err(format!("{op} needs an order-3 input, got {in_shape}"));
        }
        let d = in_shape.dims();
        let h = window_out(d[0], kernel, stride, padding).ok_or("window underflow")?;
        let w = window_out(d[1], kernel, stride, padding).ok_or("window underflow")?;
        Shape::new(vec![h, w, channels])
    };
    Ok(match op {
        Op::Conv2D => {
            let (f, k) = (int("filters")?, int("kernel_size")?);
            let out = spatial(k, int("stride")?, padding()?, f)?;
            (out, (k * k * in_shape.last() * f + f) as u64)
        }
        Op::MaxPool2D => (
            spatial(int("pool_size")?, int("stride")?, padding()?, in_shape.last())?,
            0,
        ),
        Op::Affine => {
            if in_shape.order() != 1 {
                return Err(format!("Affine needs a flat input, got {in_shape}"));
            }
            let h = int("units")?;
            (Shape::new(vec![h])?, ((in_shape.dims()[0] + 1) * h) as u64)
        }
        Op::BatchNorm => (in_shape.clone(), 2 * in_shape.last() as u64),
        Op::Flatten => (Shape::new(vec![in_shape.num_elements()])?, 0),
        Op::ReLU | Op::Dropout | Op::Identity | Op::Add => (in_shape.clone(), 0),
        Op::PadZeros => return Err("PadZeros output is given by its target".into()),
    })
}

struct Builder {
    nodes: Vec<GraphNode>,
    training_config: BTreeMap<String, Literal>,
}

/// Reference to the tensor a module reads: a node, or the graph input.
#[derive(Clone)]
struct Cursor {
    node: Option<usize>,
    shape: Shape,
}

impl Builder {
    fn push(&mut self, op: Op, attrs: BTreeMap<String, Literal>, inputs: Vec<usize>, in_shape: Shape, out_shape: Shape, params: u64) -> Cursor {
        let id = self.nodes.len();
        self.nodes.push(GraphNode {
            id,
            op,
            attrs,
            in_shape,
            out_shape: out_shape.clone(),
            param_count: params,
            inputs,
            train_only: op == Op::Dropout,
        });
        Cursor {
            node: Some(id),
            shape: out_shape,
        }
    }

    fn op(&mut self, op: Op, attrs: BTreeMap<String, Literal>, at: &Cursor) -> Result<Cursor, SpaceError> {
        let (out, params) = infer_node(op, &attrs, &at.shape).map_err(|detail| SpaceError::ShapeIncompatible {
            site: op.name().into(),
            shape: at.shape.clone(),
            detail,
        })?;
        Ok(self.push(op, attrs, at.node.into_iter().collect(), at.shape.clone(), out, params))
    }

    fn pad(&mut self, at: &Cursor, target: &Shape) -> Cursor {
        if at.shape == *target {
            return at.clone();
        }
        self.push(
            Op::PadZeros,
            BTreeMap::new(),
            at.node.into_iter().collect(),
            at.shape.clone(),
            target.clone(),
            0,
        )
    }

    /// Makes sure the cursor refers to a node, inserting an Identity source
    /// when it still points at the graph input.
    fn materialize(&mut self, at: Cursor) -> Cursor {
        match at.node {
            Some(_) => at,
            None => self.push(Op::Identity, BTreeMap::new(), Vec::new(), at.shape.clone(), at.shape, 0),
        }
    }

    fn emit(&mut self, m: &ModuleInstance, at: Cursor) -> Result<Cursor, SpaceError> {
        match &m.state {
            State::Basic(b) => {
                let attrs = |names: &[&str]| -> BTreeMap<String, Literal> {
                    names
                        .iter()
                        .filter_map(|n| b.get(n).map(|v| (n.to_string(), v.clone())))
                        .collect()
                };
                match m.kind {
                    ModuleKind::Conv2D => self.op(
                        Op::Conv2D,
                        attrs(&["filters", "kernel_size", "stride", "padding", "initializer"]),
                        &at,
                    ),
                    ModuleKind::MaxPooling2D => self.op(Op::MaxPool2D, attrs(&["pool_size", "stride", "padding"]), &at),
                    ModuleKind::Affine => {
                        let at = if at.shape.order() > 1 {
                            self.op(Op::Flatten, BTreeMap::new(), &at)?
                        } else {
                            at
                        };
                        self.op(Op::Affine, attrs(&["units", "initializer"]), &at)
                    }
                    ModuleKind::ReLU => self.op(Op::ReLU, BTreeMap::new(), &at),
                    ModuleKind::BatchNormalization => self.op(Op::BatchNorm, BTreeMap::new(), &at),
                    ModuleKind::Dropout => self.op(Op::Dropout, attrs(&["keep_p"]), &at),
                    ModuleKind::UserHyperparams => {
                        for (d, v) in b.domains.iter().zip(&b.assigned) {
                            self.training_config.insert(d.name.clone(), v.clone());
                        }
                        Ok(at)
                    }
                    _ => Ok(at),
                }
            }
            State::Concat(chain) | State::MaybeSwap { chain, .. } | State::Repeat { chain, .. } => {
                chain.members.iter().try_fold(at, |at, c| self.emit(c, at))
            }
            State::RepeatTied { members, .. } => members.iter().try_fold(at, |at, c| self.emit(c, at)),
            State::Or { children, chosen } => self.emit(&children[chosen.expect("specified")], at),
            State::Optional { child, include } => match include {
                Some(true) => self.emit(child, at),
                _ => Ok(at),
            },
            State::Residual { body } => {
                let skip = self.materialize(at);
                let body_out = self.emit(body, skip.clone())?;
                let target = merge_max(&skip.shape, &body_out.shape).ok_or_else(|| SpaceError::ShapeIncompatible {
                    site: "Residual".into(),
                    shape: body_out.shape.clone(),
                    detail: format!("cannot merge with skip input {}", skip.shape),
                })?;
                let skip = self.pad(&skip, &target);
                let body_out = self.pad(&body_out, &target);
                Ok(self.push(
                    Op::Add,
                    BTreeMap::new(),
                    vec![body_out.node.expect("materialized"), skip.node.expect("materialized")],
                    target.clone(),
                    target,
                    0,
                ))
            }
        }
    }
}

/// Compiles an already specified instance.
pub fn compile_instance(m: &ModuleInstance, source_path: Path) -> Result<GraphIR, CompileError> {
    if !m.is_specified() {
        return Err(CompileError::NotSpecified);
    }
    let input_shape = m.in_shape().cloned().ok_or(CompileError::NotSpecified)?;
    let mut b = Builder {
        nodes: Vec::new(),
        training_config: BTreeMap::new(),
    };
    let start = Cursor {
        node: None,
        shape: input_shape.clone(),
    };
    let end = b.emit(m, start).map_err(CompileError::Shape)?;
    let end = b.materialize(end);
    Ok(GraphIR {
        ir_version: IR_VERSION,
        nodes: b.nodes,
        input_shape,
        output_shape: end.shape,
        training_config: b.training_config,
        source_path,
    })
}

/// Replays `path` on `space` and compiles the resulting model.
pub fn compile(space: &SpaceExpr, in_shape: Shape, path: &Path) -> Result<GraphIR, CompileError> {
    let m = replay(space, in_shape, path).map_err(|e| match e {
        NavError::Init(s) | NavError::Invalid { source: s, .. } => CompileError::Shape(s),
        other => CompileError::PathMismatch(other),
    })?;
    compile_instance(&m, path.clone())
}

#[derive(Serialize)]
struct SignatureNode<'a> {
    op: Op,
    attrs: &'a BTreeMap<String, Literal>,
    inputs: &'a [usize],
}

#[derive(Serialize)]
struct Signature<'a> {
    input_shape: &'a Shape,
    nodes: Vec<SignatureNode<'a>>,
    training_config: &'a BTreeMap<String, Literal>,
}

impl GraphIR {
    /// Canonical JSON of the model itself: node ops, attributes and wiring
    /// plus training configuration. Independent of how the model was reached.
    pub fn signature(&self) -> String {
        let sig = Signature {
            input_shape: &self.input_shape,
            nodes: self
                .nodes
                .iter()
                .map(|n| SignatureNode {
                    op: n.op,
                    attrs: &n.attrs,
                    inputs: &n.inputs,
                })
                .collect(),
            training_config: &self.training_config,
        };
        canonical_json(&sig)
    }

    pub fn signature_hash(&self) -> u64 {
        fnv1a64(self.signature().as_bytes())
    }

    pub fn signature_hex(&self) -> String {
        to_hex(self.signature_hash())
    }

    pub fn total_params(&self) -> u64 {
        self.nodes.iter().map(|n| n.param_count).sum()
    }

    /// Basic-module ops in graph order, compiler plumbing excluded.
    pub fn module_sequence(&self) -> Vec<Op> {
        self.nodes.iter().map(|n| n.op).filter(|op| !op.is_plumbing()).collect()
    }

    pub fn to_json(&self) -> String {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<GraphIR, GraphError> {
        let g: GraphIR = serde_json::from_str(text).map_err(|e| GraphError::MalformedGraph(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    /// Checks wiring, ordering and every node's shape and parameter count.
    pub fn validate(&self) -> Result<(), GraphError> {
        let malformed = |s: String| Err(GraphError::MalformedGraph(s));
        if self.ir_version != IR_VERSION {
            return malformed(format!("unsupported ir_version {}", self.ir_version));
        }
        if self.nodes.is_empty() {
            return malformed("graph has no nodes".into());
        }
        let mut consumed = vec![false; self.nodes.len()];
        let mut sources = 0;
        for (i, n) in self.nodes.iter().enumerate() {
            let inconsistent = |detail: String| GraphError::InconsistentShapes { node: i, detail };
            if n.id != i {
                return malformed(format!("node at position {i} has id {}", n.id));
            }
            if n.inputs.iter().any(|&j| j >= i) {
                return malformed(format!("node {i} reads a later node"));
            }
            if n.train_only != (n.op == Op::Dropout) {
                return malformed(format!("node {i}: train_only must be set exactly on Dropout"));
            }
            let expected_inputs = match n.op {
                Op::Add => 2..=2,
                _ => 0..=1,
            };
            if !expected_inputs.contains(&n.inputs.len()) {
                return malformed(format!("node {i}: {} takes {:?} inputs", n.op, expected_inputs));
            }
            if n.inputs.is_empty() {
                sources += 1;
                if n.in_shape != self.input_shape {
                    return Err(inconsistent(format!("source reads {} but graph input is {}", n.in_shape, self.input_shape)));
                }
            }
            for &j in &n.inputs {
                consumed[j] = true;
                if self.nodes[j].out_shape != n.in_shape {
                    return Err(inconsistent(format!(
                        "input {j} produces {} but node reads {}",
                        self.nodes[j].out_shape, n.in_shape
                    )));
                }
            }
            let (out, params) = match n.op {
                Op::PadZeros => {
                    let fits = n.out_shape.order() == n.in_shape.order()
                        && n.out_shape.dims().iter().zip(n.in_shape.dims()).all(|(o, i)| o >= i);
                    if !fits || !n.attrs.is_empty() {
                        return Err(inconsistent(format!("cannot pad {} to {}", n.in_shape, n.out_shape)));
                    }
                    (n.out_shape.clone(), 0)
                }
                op => infer_node(op, &n.attrs, &n.in_shape).map_err(inconsistent)?,
            };
            if out != n.out_shape {
                return Err(inconsistent(format!("recomputed output {out}, stored {}", n.out_shape)));
            }
            if params != n.param_count {
                return Err(inconsistent(format!("recomputed {params} parameters, stored {}", n.param_count)));
            }
        }
        if sources != 1 {
            return malformed(format!("expected exactly one source node, found {sources}"));
        }
        let terminals = consumed.iter().filter(|c| !**c).count();
        if terminals != 1 || consumed[self.nodes.len() - 1] {
            return malformed("the last node must be the only terminal node".into());
        }
        if self.nodes.last().expect("non-empty").out_shape != self.output_shape {
            return Err(GraphError::InconsistentShapes {
                node: self.nodes.len() - 1,
                detail: format!("graph output_shape {} differs from terminal node", self.output_shape),
            });
        }
        Ok(())
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json's Map is ordered by key unless `preserve_order` is enabled.
    let v = serde_json::to_value(value).expect("serializable");
    serde_json::to_string(&v).expect("serializable")
}
