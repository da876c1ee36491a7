//! Compositional search spaces over deep architectures.
//!
//! A search space is written as a nested module expression ([`dsl`]),
//! instantiated as a sequentially specifiable module tree ([`space`]) and
//! explored as a tree whose root-to-leaf paths are models ([`nav`]). Fully
//! specified models compile to a small dataflow IR ([`graph`]) that the
//! pluggable [`eval`]uators score, and the [`search`] module drives random
//! search, Monte Carlo tree search (optionally over bisected decisions) and
//! surrogate-based optimization on top of that.

pub mod dsl;
pub mod eval;
pub mod generate;
pub mod graph;
pub mod hash;
pub mod nav;
pub mod search;
pub mod shape;
pub mod space;

pub use dsl::{parse, pretty_print, Literal, ModuleKind, SpaceExpr};
pub use graph::{compile, GraphIR};
pub use nav::{enumerate, replay, sample_uniform, Path};
pub use shape::Shape;
pub use space::ModuleInstance;
