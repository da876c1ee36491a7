//! Sequentially specifiable modules.
//!
//! A [`ModuleInstance`] is built from a [`SpaceExpr`] and walks through its
//! hyperparameters one decision at a time. Composite modules delegate to
//! their submodules, so any composition is specifiable without extra code:
//!
//! 1. [`ModuleInstance::initialize`] fixes the input shape,
//! 2. [`ModuleInstance::get_choices`] names the next decision site,
//! 3. [`ModuleInstance::choose`] commits one option,
//!
//! until [`ModuleInstance::is_specified`] holds. Decisions with a single
//! option are taken automatically and never surface.

use std::sync::Arc;

use thiserror::Error;

use crate::dsl::{Literal, ModuleKind, SpaceExpr};
use crate::shape::{merge_max, window_out, Padding, Shape};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpaceError {
    #[error("{site}: incompatible input shape {shape}: {detail}")]
    ShapeIncompatible { site: String, shape: Shape, detail: String },
    #[error("{site}: window does not fit input shape {shape}")]
    ShapeUnderflow { site: String, shape: Shape },
    #[error("module is already fully specified")]
    AlreadySpecified,
    #[error("module is not fully specified")]
    NotSpecified,
    #[error("module has not been initialized")]
    NotInitialized,
    #[error("module was already initialized")]
    AlreadyInitialized,
    #[error("option index {index} out of range for {len} options")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Ordered set of candidate values for one hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperparamDomain {
    pub name: String,
    pub values: Vec<Literal>,
}

/// The decision currently pending in a module.
#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub site_id: String,
    pub options: Vec<Literal>,
}

pub const OPTIONAL_OPTIONS: [&str; 2] = ["exclude", "include"];
pub const SWAP_OPTIONS: [&str; 2] = ["first-second", "second-first"];

#[derive(Debug, Clone)]
pub struct ModuleInstance {
    pub(crate) kind: ModuleKind,
    pub(crate) prefix: String,
    pub(crate) in_shape: Option<Shape>,
    pub(crate) state: State,
}

#[derive(Debug, Clone)]
pub(crate) enum State {
    Basic(Basic),
    Concat(Chain),
    Or {
        children: Vec<ModuleInstance>,
        chosen: Option<usize>,
    },
    Optional {
        child: Box<ModuleInstance>,
        include: Option<bool>,
    },
    MaybeSwap {
        pair: Vec<ModuleInstance>,
        swapped: Option<bool>,
        chain: Chain,
    },
    Repeat {
        template: Arc<SpaceExpr>,
        counts: Vec<Literal>,
        count: Option<usize>,
        chain: Chain,
    },
    RepeatTied {
        template: Arc<SpaceExpr>,
        counts: Vec<Literal>,
        count: Option<usize>,
        // members[0] is specified through choose; the rest replay its trace.
        members: Vec<ModuleInstance>,
        trace: Vec<usize>,
    },
    Residual {
        body: Box<ModuleInstance>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Basic {
    pub(crate) domains: Vec<HyperparamDomain>,
    pub(crate) assigned: Vec<Literal>,
}

impl Basic {
    pub(crate) fn get(&self, name: &str) -> Option<&Literal> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .and_then(|i| self.assigned.get(i))
    }

    fn int(&self, name: &str) -> usize {
        self.get(name).and_then(Literal::as_int).expect("validated integer hyperparameter") as usize
    }
}

/// Modules connected in series, initialized lazily left to right.
#[derive(Debug, Clone, Default)]
pub(crate) struct Chain {
    pub(crate) members: Vec<ModuleInstance>,
    cursor: usize,
}

impl Chain {
    fn new(members: Vec<ModuleInstance>) -> Chain {
        Chain { members, cursor: 0 }
    }

    fn initialize(&mut self, in_shape: Shape) -> Result<(), SpaceError> {
        if let Some(first) = self.members.first_mut() {
            first.init_raw(in_shape)?;
        }
        self.advance()
    }

    fn advance(&mut self) -> Result<(), SpaceError> {
        while self.cursor < self.members.len() && self.members[self.cursor].is_specified() {
            let out = self.members[self.cursor].outdim_raw()?;
            self.cursor += 1;
            if let Some(next) = self.members.get_mut(self.cursor) {
                next.init_raw(out)?;
            }
        }
        Ok(())
    }

    fn is_specified(&self) -> bool {
        self.cursor == self.members.len()
    }

    fn choice(&self) -> Option<Choice> {
        self.members.get(self.cursor).and_then(ModuleInstance::choice_raw)
    }

    fn choose(&mut self, index: usize) -> Result<(), SpaceError> {
        let m = self.members.get_mut(self.cursor).ok_or(SpaceError::AlreadySpecified)?;
        m.choose_raw(index)?;
        self.advance()
    }

    fn outdim(&self, in_shape: &Shape) -> Result<Shape, SpaceError> {
        match self.members.last() {
            Some(last) => last.outdim_raw(),
            None => Ok(in_shape.clone()),
        }
    }
}

fn strs(options: [&str; 2]) -> Vec<Literal> {
    options.iter().map(|s| Literal::Str(s.to_string())).collect()
}

fn check_index(index: usize, len: usize) -> Result<(), SpaceError> {
    if index < len {
        Ok(())
    } else {
        Err(SpaceError::IndexOutOfRange { index, len })
    }
}

fn basic_domains(expr: &SpaceExpr) -> Vec<HyperparamDomain> {
    let names: &[&str] = match expr.kind {
        ModuleKind::Affine => &["units", "initializer"],
        ModuleKind::Dropout => &["keep_p"],
        ModuleKind::Conv2D => &["filters", "kernel_size", "stride", "padding", "initializer"],
        ModuleKind::MaxPooling2D => &["pool_size", "stride", "padding"],
        ModuleKind::UserHyperparams => {
            return expr
                .value_lists
                .iter()
                .map(|l| HyperparamDomain {
                    name: l.name.clone().unwrap_or_default(),
                    values: l.values.clone(),
                })
                .collect()
        }
        _ => &[],
    };
    let mut domains: Vec<HyperparamDomain> = names
        .iter()
        .zip(&expr.value_lists)
        .map(|(n, l)| HyperparamDomain {
            name: n.to_string(),
            values: l.values.clone(),
        })
        .collect();
    if matches!(expr.kind, ModuleKind::Conv2D | ModuleKind::MaxPooling2D)
        && !domains.iter().any(|d| d.name == "padding")
    {
        domains.push(HyperparamDomain {
            name: "padding".into(),
            values: vec![Literal::Str("SAME".into())],
        });
    }
    domains
}

impl ModuleInstance {
    /// Builds an unspecified, uninitialized module tree.
    pub fn instantiate(expr: &SpaceExpr) -> ModuleInstance {
        Self::build(expr, String::new())
    }

    fn build(expr: &SpaceExpr, prefix: String) -> ModuleInstance {
        let child = |i: usize| Self::build(&expr.children[i], format!("{prefix}{i}/"));
        let state = match expr.kind {
            ModuleKind::Concat => State::Concat(Chain::new((0..expr.children.len()).map(child).collect())),
            ModuleKind::Or => State::Or {
                children: (0..expr.children.len()).map(child).collect(),
                chosen: None,
            },
            ModuleKind::Optional => State::Optional {
                child: Box::new(child(0)),
                include: None,
            },
            ModuleKind::MaybeSwap => State::MaybeSwap {
                pair: vec![child(0), child(1)],
                swapped: None,
                chain: Chain::default(),
            },
            ModuleKind::Repeat => State::Repeat {
                template: Arc::new(expr.children[0].clone()),
                counts: expr.value_lists[0].values.clone(),
                count: None,
                chain: Chain::default(),
            },
            ModuleKind::RepeatTied => State::RepeatTied {
                template: Arc::new(expr.children[0].clone()),
                counts: expr.value_lists[0].values.clone(),
                count: None,
                members: Vec::new(),
                trace: Vec::new(),
            },
            ModuleKind::Residual => State::Residual {
                body: Box::new(child(0)),
            },
            _ => State::Basic(Basic {
                domains: basic_domains(expr),
                assigned: Vec::new(),
            }),
        };
        ModuleInstance {
            kind: expr.kind,
            prefix,
            in_shape: None,
            state,
        }
    }

    pub fn kind(&self) -> ModuleKind {
        self.kind
    }

    pub fn in_shape(&self) -> Option<&Shape> {
        self.in_shape.as_ref()
    }

    /// Prefix shared by all decision sites inside this module.
    pub fn site_prefix(&self) -> &str {
        &self.prefix
    }

    /// Expression cloned for each repetition (Repeat and RepeatTied only).
    pub fn template(&self) -> Option<&SpaceExpr> {
        match &self.state {
            State::Repeat { template, .. } | State::RepeatTied { template, .. } => Some(template),
            _ => None,
        }
    }

    /// Local hyperparameter domains in decision order. Structural
    /// hyperparameters of composites are listed first.
    pub fn local_domains(&self) -> Vec<HyperparamDomain> {
        let structural = |name: &str, values: Vec<Literal>| {
            vec![HyperparamDomain {
                name: name.into(),
                values,
            }]
        };
        match &self.state {
            State::Basic(b) => b.domains.clone(),
            State::Concat(_) | State::Residual { .. } => Vec::new(),
            State::Or { children, .. } => structural("which", (0..children.len() as i64).map(Literal::Int).collect()),
            State::Optional { .. } => structural("include", strs(OPTIONAL_OPTIONS)),
            State::MaybeSwap { .. } => structural("order", strs(SWAP_OPTIONS)),
            State::Repeat { counts, .. } | State::RepeatTied { counts, .. } => structural("count", counts.clone()),
        }
    }

    /// Values assigned so far to this module's own hyperparameters.
    pub fn local_assignments(&self) -> Vec<(String, Literal)> {
        let one = |name: &str, v: Literal| vec![(name.to_string(), v)];
        match &self.state {
            State::Basic(b) => b
                .domains
                .iter()
                .zip(&b.assigned)
                .map(|(d, v)| (d.name.clone(), v.clone()))
                .collect(),
            State::Or { chosen: Some(i), .. } => one("which", Literal::Int(*i as i64)),
            State::Optional { include: Some(inc), .. } => one("include", strs(OPTIONAL_OPTIONS)[*inc as usize].clone()),
            State::MaybeSwap { swapped: Some(s), .. } => one("order", strs(SWAP_OPTIONS)[*s as usize].clone()),
            State::Repeat { count: Some(k), .. } | State::RepeatTied { count: Some(k), .. } => {
                one("count", Literal::Int(*k as i64))
            }
            _ => Vec::new(),
        }
    }

    /// Submodules in declaration order (Repeat variants: the repetitions
    /// materialized so far).
    pub fn submodules(&self) -> Vec<&ModuleInstance> {
        match &self.state {
            State::Basic(_) => Vec::new(),
            State::Concat(chain) => chain.members.iter().collect(),
            State::Or { children, .. } => children.iter().collect(),
            State::Optional { child, .. } => vec![child],
            State::MaybeSwap { pair, swapped, chain } => match swapped {
                Some(_) => chain.members.iter().collect(),
                None => pair.iter().collect(),
            },
            State::Repeat { chain, .. } => chain.members.iter().collect(),
            State::RepeatTied { members, .. } => members.iter().collect(),
            State::Residual { body } => vec![body],
        }
    }

    /// Records the input shape and takes any forced single-option decisions.
    pub fn initialize(&mut self, in_shape: Shape) -> Result<(), SpaceError> {
        self.init_raw(in_shape)?;
        self.settle()
    }

    pub fn is_specified(&self) -> bool {
        match &self.state {
            State::Basic(b) => b.assigned.len() == b.domains.len(),
            State::Concat(chain) => chain.is_specified(),
            State::Or { children, chosen } => chosen.is_some_and(|i| children[i].is_specified()),
            State::Optional { child, include } => match include {
                Some(false) => true,
                Some(true) => child.is_specified(),
                None => false,
            },
            State::MaybeSwap { swapped, chain, .. } => swapped.is_some() && chain.is_specified(),
            State::Repeat { count, chain, .. } => count.is_some() && chain.is_specified(),
            State::RepeatTied { count, members, .. } => count.is_some_and(|k| members.len() == k && members.iter().all(|m| m.is_specified())),
            State::Residual { body } => body.is_specified(),
        }
    }

    pub fn get_choices(&self) -> Result<Choice, SpaceError> {
        if self.in_shape.is_none() {
            return Err(SpaceError::NotInitialized);
        }
        self.choice_raw().ok_or(SpaceError::AlreadySpecified)
    }

    pub fn choose(&mut self, option_index: usize) -> Result<(), SpaceError> {
        if self.in_shape.is_none() {
            return Err(SpaceError::NotInitialized);
        }
        if self.is_specified() {
            return Err(SpaceError::AlreadySpecified);
        }
        self.choose_raw(option_index)?;
        self.settle()
    }

    pub fn get_outdim(&self) -> Result<Shape, SpaceError> {
        if self.in_shape.is_none() {
            return Err(SpaceError::NotInitialized);
        }
        if !self.is_specified() {
            return Err(SpaceError::NotSpecified);
        }
        self.outdim_raw()
    }

    /// Total number of parameters of the active basic modules.
    pub fn param_count(&self) -> Result<u64, SpaceError> {
        if !self.is_specified() {
            return Err(SpaceError::NotSpecified);
        }
        let in_shape = self.in_shape.as_ref().ok_or(SpaceError::NotInitialized)?;
        let sum = |ms: &mut dyn Iterator<Item = &ModuleInstance>| -> Result<u64, SpaceError> {
            ms.map(ModuleInstance::param_count).sum()
        };
        match &self.state {
            State::Basic(b) => Ok(match self.kind {
                ModuleKind::Affine => {
                    let (n, h) = (in_shape.num_elements() as u64, b.int("units") as u64);
                    (n + 1) * h
                }
                ModuleKind::Conv2D => {
                    let (k, f) = (b.int("kernel_size") as u64, b.int("filters") as u64);
                    k * k * in_shape.last() as u64 * f + f
                }
                ModuleKind::BatchNormalization => 2 * in_shape.last() as u64,
                _ => 0,
            }),
            State::Concat(chain) => sum(&mut chain.members.iter()),
            State::Or { children, chosen } => children[chosen.expect("specified")].param_count(),
            State::Optional { child, include } => match include {
                Some(true) => child.param_count(),
                _ => Ok(0),
            },
            State::MaybeSwap { chain, .. } | State::Repeat { chain, .. } => sum(&mut chain.members.iter()),
            State::RepeatTied { members, .. } => sum(&mut members.iter()),
            State::Residual { body } => body.param_count(),
        }
    }

    fn site(&self, name: &str) -> String {
        format!("{}{}.{}", self.prefix, self.kind.name(), name)
    }

    fn settle(&mut self) -> Result<(), SpaceError> {
        while let Some(width) = self.pending_width() {
            if width != 1 {
                return Ok(());
            }
            self.choose_raw(0)?;
        }
        // Surface shape errors of a completed model right away.
        self.outdim_raw().map(|_| ())
    }

    pub(crate) fn init_raw(&mut self, in_shape: Shape) -> Result<(), SpaceError> {
        if self.in_shape.is_some() {
            return Err(SpaceError::AlreadyInitialized);
        }
        if matches!(self.kind, ModuleKind::Conv2D | ModuleKind::MaxPooling2D) && in_shape.order() != 3 {
            return Err(SpaceError::ShapeIncompatible {
                site: self.site("input"),
                shape: in_shape,
                detail: "expected [height, width, channels]".into(),
            });
        }
        self.in_shape = Some(in_shape.clone());
        match &mut self.state {
            State::Concat(chain) => chain.initialize(in_shape),
            State::Residual { body } => body.init_raw(in_shape),
            _ => Ok(()),
        }
    }

    pub(crate) fn choice_raw(&self) -> Option<Choice> {
        self.in_shape.as_ref()?;
        let structural = |name: &str, options: Vec<Literal>| {
            Some(Choice {
                site_id: self.site(name),
                options,
            })
        };
        match &self.state {
            State::Basic(b) => b.domains.get(b.assigned.len()).map(|d| Choice {
                site_id: self.site(&d.name),
                options: d.values.clone(),
            }),
            State::Concat(chain) => chain.choice(),
            State::Or { children, chosen } => match chosen {
                None => structural("which", (0..children.len() as i64).map(Literal::Int).collect()),
                Some(i) => children[*i].choice_raw(),
            },
            State::Optional { child, include } => match include {
                None => structural("include", strs(OPTIONAL_OPTIONS)),
                Some(true) => child.choice_raw(),
                Some(false) => None,
            },
            State::MaybeSwap { swapped, chain, .. } => match swapped {
                None => structural("order", strs(SWAP_OPTIONS)),
                Some(_) => chain.choice(),
            },
            State::Repeat { counts, count, chain, .. } => match count {
                None => structural("count", counts.clone()),
                Some(_) => chain.choice(),
            },
            State::RepeatTied {
                counts, count, members, ..
            } => match count {
                None => structural("count", counts.clone()),
                Some(_) => members.first().filter(|m| !m.is_specified()).and_then(|m| m.choice_raw()),
            },
            State::Residual { body } => body.choice_raw(),
        }
    }

    /// Option count of the pending decision; `choice_raw` without the
    /// allocations.
    pub(crate) fn pending_width(&self) -> Option<usize> {
        self.in_shape.as_ref()?;
        match &self.state {
            State::Basic(b) => b.domains.get(b.assigned.len()).map(|d| d.values.len()),
            State::Concat(chain) => chain.members.get(chain.cursor).and_then(ModuleInstance::pending_width),
            State::Or { children, chosen } => match chosen {
                None => Some(children.len()),
                Some(i) => children[*i].pending_width(),
            },
            State::Optional { child, include } => match include {
                None => Some(2),
                Some(true) => child.pending_width(),
                Some(false) => None,
            },
            State::MaybeSwap { swapped, chain, .. } => match swapped {
                None => Some(2),
                Some(_) => chain.members.get(chain.cursor).and_then(ModuleInstance::pending_width),
            },
            State::Repeat { counts, count, chain, .. } => match count {
                None => Some(counts.len()),
                Some(_) => chain.members.get(chain.cursor).and_then(ModuleInstance::pending_width),
            },
            State::RepeatTied {
                counts, count, members, ..
            } => match count {
                None => Some(counts.len()),
                Some(_) => members.first().filter(|m| !m.is_specified()).and_then(|m| m.pending_width()),
            },
            State::Residual { body } => body.pending_width(),
        }
    }

    pub(crate) fn choose_raw(&mut self, index: usize) -> Result<(), SpaceError> {
        let in_shape = self.in_shape.clone().ok_or(SpaceError::NotInitialized)?;
        let prefix = self.prefix.clone();
        match &mut self.state {
            State::Basic(b) => {
                let domain = b.domains.get(b.assigned.len()).ok_or(SpaceError::AlreadySpecified)?;
                check_index(index, domain.values.len())?;
                b.assigned.push(domain.values[index].clone());
                Ok(())
            }
            State::Concat(chain) => chain.choose(index),
            State::Or { children, chosen } => match chosen {
                None => {
                    check_index(index, children.len())?;
                    *chosen = Some(index);
                    children[index].init_raw(in_shape)
                }
                Some(i) => children[*i].choose_raw(index),
            },
            State::Optional { child, include } => match include {
                None => {
                    check_index(index, 2)?;
                    *include = Some(index == 1);
                    if index == 1 {
                        child.init_raw(in_shape)?;
                    }
                    Ok(())
                }
                Some(true) => child.choose_raw(index),
                Some(false) => Err(SpaceError::AlreadySpecified),
            },
            State::MaybeSwap { pair, swapped, chain } => match swapped {
                None => {
                    check_index(index, 2)?;
                    *swapped = Some(index == 1);
                    let mut members = pair.clone();
                    if index == 1 {
                        members.reverse();
                    }
                    *chain = Chain::new(members);
                    chain.initialize(in_shape)
                }
                Some(_) => chain.choose(index),
            },
            State::Repeat {
                template,
                counts,
                count,
                chain,
            } => match count {
                None => {
                    check_index(index, counts.len())?;
                    let k = counts[index].as_int().expect("validated count") as usize;
                    *count = Some(k);
                    *chain = Chain::new((0..k).map(|j| Self::build(template, format!("{prefix}{j}/"))).collect());
                    chain.initialize(in_shape)
                }
                Some(_) => chain.choose(index),
            },
            State::RepeatTied {
                template,
                counts,
                count,
                members,
                trace,
            } => match count {
                None => {
                    check_index(index, counts.len())?;
                    let k = counts[index].as_int().expect("validated count") as usize;
                    *count = Some(k);
                    if k == 0 {
                        return Ok(());
                    }
                    let mut first = Self::build(template, format!("{prefix}0/"));
                    first.init_raw(in_shape)?;
                    members.push(first);
                    Self::complete_tied(template, &prefix, k, members, trace)
                }
                Some(k) => {
                    let k = *k;
                    let first = members.first_mut().ok_or(SpaceError::AlreadySpecified)?;
                    if first.is_specified() {
                        return Err(SpaceError::AlreadySpecified);
                    }
                    first.choose_raw(index)?;
                    trace.push(index);
                    Self::complete_tied(template, &prefix, k, members, trace)
                }
            },
            State::Residual { body } => body.choose_raw(index),
        }
    }

    /// Once the first repetition is specified, clones it `k - 1` times by
    /// replaying the same decisions on fresh instances.
    fn complete_tied(
        template: &SpaceExpr,
        prefix: &str,
        k: usize,
        members: &mut Vec<ModuleInstance>,
        trace: &[usize],
    ) -> Result<(), SpaceError> {
        if !members[0].is_specified() {
            return Ok(());
        }
        let mut prev = members[0].outdim_raw()?;
        for j in 1..k {
            let mut copy = Self::build(template, format!("{prefix}{j}/"));
            copy.init_raw(prev)?;
            for &i in trace {
                copy.choose_raw(i)?;
            }
            debug_assert!(copy.is_specified());
            prev = copy.outdim_raw()?;
            members.push(copy);
        }
        Ok(())
    }

    pub(crate) fn outdim_raw(&self) -> Result<Shape, SpaceError> {
        let in_shape = self.in_shape.as_ref().ok_or(SpaceError::NotInitialized)?;
        match &self.state {
            State::Basic(b) => {
                if !self.is_specified() {
                    return Err(SpaceError::NotSpecified);
                }
                match self.kind {
                    ModuleKind::Affine => Ok(Shape::new(vec![b.int("units")]).expect("units >= 1")),
                    ModuleKind::Conv2D | ModuleKind::MaxPooling2D => {
                        let (kernel_name, channels) = if self.kind == ModuleKind::Conv2D {
                            ("kernel_size", b.int("filters"))
                        } else {
                            ("pool_size", in_shape.last())
                        };
                        let kernel = b.int(kernel_name);
                        let stride = b.int("stride");
                        let padding = b
                            .get("padding")
                            .and_then(Literal::as_str)
                            .and_then(Padding::parse)
                            .expect("validated padding");
                        let dims = in_shape.dims();
                        let underflow = || SpaceError::ShapeUnderflow {
                            site: self.site(kernel_name),
                            shape: in_shape.clone(),
                        };
                        let h = window_out(dims[0], kernel, stride, padding).ok_or_else(underflow)?;
                        let w = window_out(dims[1], kernel, stride, padding).ok_or_else(underflow)?;
                        Ok(Shape::new(vec![h, w, channels]).expect("positive dims"))
                    }
                    _ => Ok(in_shape.clone()),
                }
            }
            State::Concat(chain) => chain.outdim(in_shape),
            State::Or { children, chosen } => match chosen {
                Some(i) => children[*i].outdim_raw(),
                None => Err(SpaceError::NotSpecified),
            },
            State::Optional { child, include } => match include {
                Some(true) => child.outdim_raw(),
                Some(false) => Ok(in_shape.clone()),
                None => Err(SpaceError::NotSpecified),
            },
            State::MaybeSwap { swapped, chain, .. } => match swapped {
                Some(_) => chain.outdim(in_shape),
                None => Err(SpaceError::NotSpecified),
            },
            State::Repeat { count, chain, .. } => match count {
                Some(_) => chain.outdim(in_shape),
                None => Err(SpaceError::NotSpecified),
            },
            State::RepeatTied { count, members, .. } => match count {
                Some(0) => Ok(in_shape.clone()),
                Some(k) if members.len() == *k => members[k - 1].outdim_raw(),
                _ => Err(SpaceError::NotSpecified),
            },
            State::Residual { body } => {
                let body_out = body.outdim_raw()?;
                merge_max(in_shape, &body_out).ok_or_else(|| SpaceError::ShapeIncompatible {
                    site: self.site("merge"),
                    shape: body_out,
                    detail: format!("cannot pad to match skip input {in_shape}"),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;

    const SMALL_CNN: &str = "(Concat
        (Conv2D [32, 64] [3, 5] [1])
        (MaybeSwap BatchNormalization ReLU)
        (Optional (Dropout [0.5, 0.9]))
        (Affine [10]))";

    fn shape(d: &[usize]) -> Shape {
        Shape::new(d.to_vec()).unwrap()
    }

    fn inst(text: &str) -> ModuleInstance {
        ModuleInstance::instantiate(&parse(text).unwrap())
    }

    fn pick(m: &mut ModuleInstance, value: Literal) {
        let c = m.get_choices().unwrap();
        let i = c.options.iter().position(|o| *o == value).unwrap();
        m.choose(i).unwrap();
    }

    #[test]
    fn small_cnn_instance_has_four_submodules() {
        let m = inst(SMALL_CNN);
        assert_eq!(m.kind(), ModuleKind::Concat);
        assert_eq!(m.submodules().len(), 4);
    }

    #[test]
    fn empty_is_immediately_specified() {
        let mut m = inst("(Empty)");
        assert!(m.local_domains().is_empty());
        assert!(m.is_specified());
        m.initialize(shape(&[7, 7, 3])).unwrap();
        assert_eq!(m.get_outdim().unwrap().dims(), &[7, 7, 3]);
        assert_eq!(m.param_count().unwrap(), 0);
        assert_eq!(m.get_choices(), Err(SpaceError::AlreadySpecified));
    }

    #[test]
    fn repeat_keeps_template() {
        let m = inst("(Repeat (Dropout [0.5]) [1, 2, 4])");
        assert_eq!(m.template().unwrap(), &parse("(Dropout [0.5])").unwrap());
        assert_eq!(m.local_domains()[0].values, vec![Literal::Int(1), Literal::Int(2), Literal::Int(4)]);
    }

    #[test]
    fn initialize_shape_checks() {
        let mut conv = inst("(Conv2D [8] [3] [1])");
        assert!(conv.initialize(shape(&[32, 32, 3])).is_ok());
        let mut conv = inst("(Conv2D [8] [3] [1])");
        assert!(matches!(
            conv.initialize(shape(&[784])),
            Err(SpaceError::ShapeIncompatible { .. })
        ));
        let mut affine = inst("(Affine [10])");
        affine.initialize(shape(&[32, 32, 3])).unwrap();
        assert_eq!(affine.param_count().unwrap(), (32 * 32 * 3 + 1) * 10);
        assert_eq!(affine.initialize(shape(&[1])), Err(SpaceError::AlreadyInitialized));
    }

    #[test]
    fn bn_relu_decision_sequence() {
        let mut m = inst(SMALL_CNN);
        m.initialize(shape(&[32, 32, 3])).unwrap();
        let c = m.get_choices().unwrap();
        assert_eq!(c.site_id, "0/Conv2D.filters");
        assert_eq!(c.options, vec![Literal::Int(32), Literal::Int(64)]);
        pick(&mut m, Literal::Int(64));
        assert_eq!(m.get_choices().unwrap().site_id, "0/Conv2D.kernel_size");
        pick(&mut m, Literal::Int(3));
        let c = m.get_choices().unwrap();
        assert_eq!(c.site_id, "1/MaybeSwap.order");
        assert_eq!(c.options, strs(SWAP_OPTIONS));
        m.choose(0).unwrap();
        let c = m.get_choices().unwrap();
        assert_eq!(c.site_id, "2/Optional.include");
        m.choose(0).unwrap();
        assert!(m.is_specified());
        assert_eq!(m.get_outdim().unwrap().dims(), &[10]);
        assert_eq!(m.param_count().unwrap(), 1792 + 128 + 655370);
    }

    #[test]
    fn or_choice_and_conditionality() {
        let mut m = inst("(Or (Affine [4, 8]) (Dropout [0.5, 0.9]))");
        m.initialize(shape(&[10])).unwrap();
        let c = m.get_choices().unwrap();
        assert_eq!(c.site_id, "Or.which");
        assert_eq!(c.options, vec![Literal::Int(0), Literal::Int(1)]);
        m.choose(0).unwrap();
        assert_eq!(m.get_choices().unwrap().site_id, "0/Affine.units");
        m.choose(1).unwrap();
        assert!(m.is_specified());
        assert_eq!(m.get_outdim().unwrap().dims(), &[8]);
        assert_eq!(m.param_count().unwrap(), 88);
    }

    #[test]
    fn optional_exclude_skips_child() {
        let mut m = inst("(Optional (Dropout [0.5, 0.9]))");
        m.initialize(shape(&[4])).unwrap();
        assert!(!m.is_specified());
        m.choose(0).unwrap();
        assert!(m.is_specified());
        assert!(m.submodules()[0].in_shape().is_none());
        assert_eq!(m.choose(0), Err(SpaceError::AlreadySpecified));
    }

    #[test]
    fn repeat_tied_shares_assignments() {
        let mut m = inst("(RepeatTied (Conv2D [16, 48] [3, 5] [1]) [1, 3])");
        m.initialize(shape(&[8, 8, 3])).unwrap();
        pick(&mut m, Literal::Int(3));
        assert_eq!(m.get_choices().unwrap().site_id, "0/Conv2D.filters");
        pick(&mut m, Literal::Int(48));
        pick(&mut m, Literal::Int(5));
        assert!(m.is_specified());
        let members = m.submodules();
        assert_eq!(members.len(), 3);
        for r in &members {
            let a = r.local_assignments();
            assert_eq!(a[0], ("filters".into(), Literal::Int(48)));
            assert_eq!(a[1], ("kernel_size".into(), Literal::Int(5)));
        }
        // Second and third repetitions see 48 input channels.
        let p = 5 * 5 * 3 * 48 + 48 + 2 * (5 * 5 * 48 * 48 + 48);
        assert_eq!(m.param_count().unwrap(), p as u64);
    }

    #[test]
    fn repeat_chooses_independently() {
        let mut m = inst("(Repeat (Dropout [0.5, 0.9]) [1, 2])");
        m.initialize(shape(&[4])).unwrap();
        pick(&mut m, Literal::Int(2));
        assert_eq!(m.get_choices().unwrap().site_id, "0/Dropout.keep_p");
        m.choose(0).unwrap();
        assert_eq!(m.get_choices().unwrap().site_id, "1/Dropout.keep_p");
        m.choose(1).unwrap();
        assert!(m.is_specified());
        let vals: Vec<_> = m.submodules().iter().map(|s| s.local_assignments()[0].1.clone()).collect();
        assert_eq!(vals, vec![Literal::Float(0.5), Literal::Float(0.9)]);
    }

    #[test]
    fn repeat_zero_is_identity() {
        let mut m = inst("(Repeat (Conv2D [4] [3] [2]) [0, 1])");
        m.initialize(shape(&[8, 8, 3])).unwrap();
        m.choose(0).unwrap();
        assert!(m.is_specified());
        assert_eq!(m.get_outdim().unwrap().dims(), &[8, 8, 3]);
    }

    #[test]
    fn conv_out_shapes() {
        for (stride, out) in [(1, 32), (2, 16)] {
            let mut m = inst(&format!("(Conv2D [64] [3] [{stride}] [\"SAME\"])"));
            m.initialize(shape(&[32, 32, 3])).unwrap();
            assert_eq!(m.get_outdim().unwrap().dims(), &[out, out, 64]);
            assert_eq!(m.param_count().unwrap(), 1792);
        }
        let mut valid = inst("(Conv2D [4] [5] [2] [\"VALID\"])");
        valid.initialize(shape(&[9, 9, 3])).unwrap();
        assert_eq!(valid.get_outdim().unwrap().dims(), &[3, 3, 4]);
        let mut under = inst("(Conv2D [4] [5] [1] [\"VALID\"])");
        assert!(matches!(
            under.initialize(shape(&[4, 4, 3])),
            Err(SpaceError::ShapeUnderflow { .. })
        ));
    }

    #[test]
    fn concat_lazily_initializes_and_reports_underflow() {
        let mut m = inst("(Concat (MaxPooling2D [2] [2, 4] [\"VALID\"]) (Conv2D [4] [3] [1] [\"VALID\"]))");
        m.initialize(shape(&[8, 8, 3])).unwrap();
        assert!(m.submodules()[1].in_shape().is_none());
        // stride 4 leaves a 2x2 map that a 3x3 VALID window cannot cover
        assert!(matches!(m.choose(1), Err(SpaceError::ShapeUnderflow { .. })));
        let mut m = inst("(Concat (MaxPooling2D [2] [2, 4] [\"VALID\"]) (Conv2D [4] [3] [1] [\"VALID\"]))");
        m.initialize(shape(&[8, 8, 3])).unwrap();
        m.choose(0).unwrap();
        assert_eq!(m.get_outdim().unwrap().dims(), &[2, 2, 4]);
    }

    #[test]
    fn residual_merge_shape() {
        let mut m = inst("(Residual (Conv2D [8] [3] [2]))");
        m.initialize(shape(&[8, 8, 3])).unwrap();
        assert_eq!(m.get_outdim().unwrap().dims(), &[8, 8, 8]);
        let mut bad = inst("(Residual (Affine [4]))");
        assert!(matches!(
            bad.initialize(shape(&[8, 8, 3])),
            Err(SpaceError::ShapeIncompatible { .. })
        ));
    }

    #[test]
    fn batchnorm_params() {
        for (s, p) in [(vec![4, 4, 6], 12), (vec![10], 20)] {
            let mut m = inst("(BatchNormalization)");
            m.initialize(Shape::new(s).unwrap()).unwrap();
            assert_eq!(m.param_count().unwrap(), p);
        }
    }

    #[test]
    fn zero_param_modules() {
        for text in ["(ReLU)", "(Dropout [0.5])", "(Empty)", "(MaxPooling2D [2] [2])"] {
            let mut m = inst(text);
            m.initialize(shape(&[4, 4, 3])).unwrap();
            assert_eq!(m.param_count().unwrap(), 0, "{text}");
        }
    }

    #[test]
    fn errors_before_fully_specified() {
        let mut m = inst("(Affine [4, 8])");
        assert_eq!(m.get_choices(), Err(SpaceError::NotInitialized));
        m.initialize(shape(&[3])).unwrap();
        assert_eq!(m.get_outdim(), Err(SpaceError::NotSpecified));
        assert_eq!(m.param_count(), Err(SpaceError::NotSpecified));
        assert_eq!(m.choose(2), Err(SpaceError::IndexOutOfRange { index: 2, len: 2 }));
    }
}
