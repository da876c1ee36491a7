//! Textual S-expression language for search-space declarations.
//!
//! ```text
//! (Concat
//!     (Conv2D [32, 64] [3, 5] [1])
//!     (MaybeSwap BatchNormalization ReLU)   ; bare names are zero-argument forms
//!     (Optional (Dropout [0.5, 0.9]))
//!     (Affine [10]))
//! ```
//!
//! Parentheses delimit module forms, brackets delimit value lists. A value
//! list is homogeneous: all integers, all decimals, or all quoted strings.
//! `UserHyperparams` takes named lists of the form `["name" [v, ...]]`.
//! Comments run from `;` to the end of the line.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum nesting depth of module forms.
pub const MAX_DEPTH: usize = 256;

/// A literal hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Int(i64),
    Float(f64),
    Str(String),
}

impl Literal {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Literal::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            Literal::Float(v) => Some(*v),
            Literal::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Literal::Str(s) => Some(s),
            _ => None,
        }
    }

    fn type_tag(&self) -> LiteralType {
        match self {
            Literal::Int(_) => LiteralType::Int,
            Literal::Float(_) => LiteralType::Float,
            Literal::Str(_) => LiteralType::Str,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LiteralType {
    Int,
    Float,
    Str,
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Int(v) => write!(f, "{v}"),
            Literal::Float(v) => {
                // Rust's Display is the shortest round-trip form but drops the
                // decimal point for integral values.
                let s = v.to_string();
                if s.contains(['.', 'e', 'E']) || !v.is_finite() {
                    f.write_str(&s)
                } else {
                    write!(f, "{s}.0")
                }
            }
            Literal::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
        }
    }
}

/// Every module kind the language knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    Affine,
    ReLU,
    Dropout,
    Conv2D,
    MaxPooling2D,
    BatchNormalization,
    UserHyperparams,
    Empty,
    Concat,
    Or,
    Repeat,
    RepeatTied,
    Optional,
    Residual,
    MaybeSwap,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 15] = [
        ModuleKind::Affine,
        ModuleKind::ReLU,
        ModuleKind::Dropout,
        ModuleKind::Conv2D,
        ModuleKind::MaxPooling2D,
        ModuleKind::BatchNormalization,
        ModuleKind::UserHyperparams,
        ModuleKind::Empty,
        ModuleKind::Concat,
        ModuleKind::Or,
        ModuleKind::Repeat,
        ModuleKind::RepeatTied,
        ModuleKind::Optional,
        ModuleKind::Residual,
        ModuleKind::MaybeSwap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Affine => "Affine",
            ModuleKind::ReLU => "ReLU",
            ModuleKind::Dropout => "Dropout",
            ModuleKind::Conv2D => "Conv2D",
            ModuleKind::MaxPooling2D => "MaxPooling2D",
            ModuleKind::BatchNormalization => "BatchNormalization",
            ModuleKind::UserHyperparams => "UserHyperparams",
            ModuleKind::Empty => "Empty",
            ModuleKind::Concat => "Concat",
            ModuleKind::Or => "Or",
            ModuleKind::Repeat => "Repeat",
            ModuleKind::RepeatTied => "RepeatTied",
            ModuleKind::Optional => "Optional",
            ModuleKind::Residual => "Residual",
            ModuleKind::MaybeSwap => "MaybeSwap",
        }
    }

    pub fn from_name(name: &str) -> Option<ModuleKind> {
        ModuleKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn is_composite(self) -> bool {
        matches!(
            self,
            ModuleKind::Concat
                | ModuleKind::Or
                | ModuleKind::Repeat
                | ModuleKind::RepeatTied
                | ModuleKind::Optional
                | ModuleKind::Residual
                | ModuleKind::MaybeSwap
        )
    }

    /// Allowed number of (value lists, children).
    fn arity(self) -> (Range, Range) {
        use ModuleKind::*;
        match self {
            ReLU | BatchNormalization | Empty => (Range(0, Some(0)), Range(0, Some(0))),
            Affine => (Range(1, Some(2)), Range(0, Some(0))),
            Dropout => (Range(1, Some(1)), Range(0, Some(0))),
            Conv2D => (Range(3, Some(5)), Range(0, Some(0))),
            MaxPooling2D => (Range(2, Some(3)), Range(0, Some(0))),
            UserHyperparams => (Range(0, None), Range(0, Some(0))),
            Concat | Or => (Range(0, Some(0)), Range(1, None)),
            Optional | Residual => (Range(0, Some(0)), Range(1, Some(1))),
            MaybeSwap => (Range(0, Some(0)), Range(2, Some(2))),
            Repeat | RepeatTied => (Range(1, Some(1)), Range(1, Some(1))),
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
struct Range(usize, Option<usize>);

impl Range {
    fn contains(self, n: usize) -> bool {
        n >= self.0 && self.1.is_none_or(|hi| n <= hi)
    }
}

impl fmt::Display for Range {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.1 {
            Some(hi) if hi == self.0 => write!(f, "{hi}"),
            Some(hi) => write!(f, "{}..={hi}", self.0),
            None => write!(f, "at least {}", self.0),
        }
    }
}

/// A bracketed value list, optionally named (`["lr" [0.1, 0.01]]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueList {
    pub name: Option<String>,
    pub values: Vec<Literal>,
}

impl ValueList {
    pub fn new(values: Vec<Literal>) -> Self {
        ValueList { name: None, values }
    }

    pub fn named(name: impl Into<String>, values: Vec<Literal>) -> Self {
        ValueList {
            name: Some(name.into()),
            values,
        }
    }
}

/// Parsed search-space declaration.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceExpr {
    pub kind: ModuleKind,
    pub value_lists: Vec<ValueList>,
    pub children: Vec<SpaceExpr>,
}

impl SpaceExpr {
    pub fn basic(kind: ModuleKind, value_lists: Vec<ValueList>) -> Self {
        SpaceExpr {
            kind,
            value_lists,
            children: Vec::new(),
        }
    }

    pub fn composite(kind: ModuleKind, children: Vec<SpaceExpr>) -> Self {
        SpaceExpr {
            kind,
            value_lists: Vec::new(),
            children,
        }
    }

    /// Structural and domain checks shared by the parser and by code that
    /// builds expressions directly.
    pub fn validate(&self) -> Result<(), String> {
        check_form(self.kind, &self.value_lists, self.children.len()).map_err(|e| e.1)?;
        self.children.iter().try_for_each(SpaceExpr::validate)
    }
}

impl fmt::Display for SpaceExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&pretty_print(self))
    }
}

/// 1-based location of a parse error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SourceSpan {
    pub line: usize,
    pub column: usize,
    pub length: usize,
}

impl fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("unbalanced parentheses or brackets")]
    UnbalancedParens,
    #[error("unknown module kind `{0}`")]
    UnknownModuleKind(String),
    #[error("arity mismatch: {0}")]
    ArityMismatch(String),
    #[error("empty value list")]
    EmptyValueList,
    #[error("value list mixes literal types")]
    HeterogeneousValueList,
    #[error("nesting deeper than {MAX_DEPTH}")]
    DepthExceeded,
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("unexpected {0}")]
    Unexpected(String),
    #[error("invalid literal `{0}`")]
    InvalidLiteral(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{span}: {kind}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub span: SourceSpan,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Ident(String),
    Lit(Literal),
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Lit(l) => format!("literal {l}"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    span: SourceSpan,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let mut depth: i64 = 0;
    let mut opener_stack: Vec<SourceSpan> = Vec::new();

    while i < chars.len() {
        let c = chars[i];
        let start = SourceSpan {
            line,
            column: col,
            length: 1,
        };
        match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
                continue;
            }
            c if c.is_whitespace() => {
                i += 1;
                col += 1;
                continue;
            }
            ';' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
                continue;
            }
            '(' | '[' | ')' | ']' | ',' => {
                let tok = match c {
                    '(' => Tok::LParen,
                    '[' => Tok::LBracket,
                    ')' => Tok::RParen,
                    ']' => Tok::RBracket,
                    _ => Tok::Comma,
                };
                match c {
                    '(' | '[' => {
                        depth += 1;
                        opener_stack.push(start);
                    }
                    ')' | ']' => {
                        depth -= 1;
                        if depth < 0 {
                            return Err(ParseError {
                                kind: ParseErrorKind::UnbalancedParens,
                                span: start,
                            });
                        }
                        opener_stack.pop();
                    }
                    _ => {}
                }
                out.push(Token { tok, span: start });
                i += 1;
                col += 1;
            }
            '"' => {
                let mut s = String::new();
                let mut j = i + 1;
                let mut closed = false;
                while j < chars.len() {
                    match chars[j] {
                        '"' => {
                            closed = true;
                            break;
                        }
                        '\\' if j + 1 < chars.len() => {
                            s.push(match chars[j + 1] {
                                'n' => '\n',
                                other => other,
                            });
                            j += 2;
                        }
                        '\n' => break,
                        other => {
                            s.push(other);
                            j += 1;
                        }
                    }
                }
                let len = j - i + 1;
                if !closed {
                    return Err(ParseError {
                        kind: ParseErrorKind::InvalidLiteral("unterminated string".into()),
                        span: SourceSpan { length: len, ..start },
                    });
                }
                out.push(Token {
                    tok: Tok::Lit(Literal::Str(s)),
                    span: SourceSpan { length: len, ..start },
                });
                col += len;
                i = j + 1;
            }
            _ => {
                let mut j = i;
                while j < chars.len()
                    && !chars[j].is_whitespace()
                    && !matches!(chars[j], '(' | ')' | '[' | ']' | ',' | ';' | '"')
                {
                    j += 1;
                }
                let word: String = chars[i..j].iter().collect();
                let span = SourceSpan {
                    length: j - i,
                    ..start
                };
                let tok = classify_word(&word).ok_or_else(|| ParseError {
                    kind: ParseErrorKind::InvalidLiteral(word.clone()),
                    span,
                })?;
                out.push(Token { tok, span });
                col += j - i;
                i = j;
            }
        }
    }
    if depth != 0 {
        return Err(ParseError {
            kind: ParseErrorKind::UnbalancedParens,
            span: opener_stack.pop().unwrap_or(SourceSpan {
                line,
                column: col,
                length: 1,
            }),
        });
    }
    Ok(out)
}

fn classify_word(word: &str) -> Option<Tok> {
    let first = word.chars().next()?;
    if first.is_ascii_alphabetic() || first == '_' {
        return word
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_')
            .then(|| Tok::Ident(word.to_string()));
    }
    if !(first.is_ascii_digit() || first == '-' || first == '+' || first == '.') {
        return None;
    }
    if word.contains(['.', 'e', 'E']) {
        let v: f64 = word.parse().ok()?;
        v.is_finite().then_some(Tok::Lit(Literal::Float(v)))
    } else {
        word.parse::<i64>().ok().map(|v| Tok::Lit(Literal::Int(v)))
    }
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    eof: SourceSpan,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Result<Token, ParseError> {
        let t = self.toks.get(self.pos).cloned().ok_or(ParseError {
            kind: ParseErrorKind::Unexpected("end of input".into()),
            span: self.eof,
        })?;
        self.pos += 1;
        Ok(t)
    }

    fn form(&mut self, depth: usize) -> Result<SpaceExpr, ParseError> {
        let open = self.next()?;
        if depth > MAX_DEPTH {
            return Err(ParseError {
                kind: ParseErrorKind::DepthExceeded,
                span: open.span,
            });
        }
        match open.tok {
            // Bare identifiers stand for argument-free forms: `ReLU` == `(ReLU)`.
            Tok::Ident(name) => {
                let kind = lookup_kind(&name, open.span)?;
                finish_form(kind, Vec::new(), Vec::new(), open.span)
            }
            Tok::LParen => {
                let head = self.next()?;
                let kind = match &head.tok {
                    Tok::Ident(name) => lookup_kind(name, head.span)?,
                    other => {
                        return Err(ParseError {
                            kind: ParseErrorKind::Unexpected(format!(
                                "{} where a module name was expected",
                                other.describe()
                            )),
                            span: head.span,
                        })
                    }
                };
                let mut lists = Vec::new();
                let mut children = Vec::new();
                loop {
                    let t = self.peek().cloned().ok_or(ParseError {
                        kind: ParseErrorKind::UnbalancedParens,
                        span: open.span,
                    })?;
                    match t.tok {
                        Tok::RParen => {
                            self.pos += 1;
                            break;
                        }
                        Tok::LBracket => lists.push(self.list(depth + 1)?),
                        Tok::LParen | Tok::Ident(_) => children.push(self.form(depth + 1)?),
                        other => {
                            return Err(ParseError {
                                kind: ParseErrorKind::Unexpected(other.describe()),
                                span: t.span,
                            })
                        }
                    }
                }
                let span = SourceSpan {
                    line: open.span.line,
                    column: open.span.column,
                    length: head.span.length + 1,
                };
                finish_form(kind, lists, children, span)
            }
            other => Err(ParseError {
                kind: ParseErrorKind::Unexpected(other.describe()),
                span: open.span,
            }),
        }
    }

    /// Parses `[...]`; the opening bracket is the next token.
    fn list(&mut self, depth: usize) -> Result<ValueList, ParseError> {
        let open = self.next()?;
        if depth > MAX_DEPTH {
            return Err(ParseError {
                kind: ParseErrorKind::DepthExceeded,
                span: open.span,
            });
        }
        enum Elem {
            Lit(Literal, SourceSpan),
            List(ValueList, SourceSpan),
        }
        let mut elems: Vec<Elem> = Vec::new();
        let close_span;
        loop {
            let t = self.next()?;
            match t.tok {
                Tok::RBracket => {
                    close_span = t.span;
                    break;
                }
                Tok::Comma if !elems.is_empty() => {
                    if matches!(self.peek().map(|t| &t.tok), Some(Tok::RBracket | Tok::Comma)) {
                        let bad = self.peek().unwrap().span;
                        return Err(ParseError {
                            kind: ParseErrorKind::Unexpected("`,` without a following value".into()),
                            span: bad,
                        });
                    }
                }
                Tok::Lit(l) => elems.push(Elem::Lit(l, t.span)),
                Tok::LBracket => {
                    self.pos -= 1;
                    let l = self.list(depth + 1)?;
                    elems.push(Elem::List(l, t.span));
                }
                other => {
                    return Err(ParseError {
                        kind: ParseErrorKind::Unexpected(format!("{} inside a value list", other.describe())),
                        span: t.span,
                    })
                }
            }
        }
        let span = SourceSpan {
            line: open.span.line,
            column: open.span.column,
            length: if close_span.line == open.span.line {
                close_span.column + 1 - open.span.column
            } else {
                1
            },
        };
        if elems.is_empty() {
            return Err(ParseError {
                kind: ParseErrorKind::EmptyValueList,
                span,
            });
        }
        // `["name" [values]]`
        if let [Elem::Lit(Literal::Str(name), _), Elem::List(inner, inner_span)] = elems.as_slice() {
            if inner.name.is_some() {
                return Err(ParseError {
                    kind: ParseErrorKind::InvalidDomain("named lists cannot nest".into()),
                    span: *inner_span,
                });
            }
            return Ok(ValueList::named(name.clone(), inner.values.clone()));
        }
        let mut values = Vec::with_capacity(elems.len());
        for e in elems {
            match e {
                Elem::Lit(l, s) => {
                    if let Some(first) = values.first() {
                        if Literal::type_tag(first) != l.type_tag() {
                            return Err(ParseError {
                                kind: ParseErrorKind::HeterogeneousValueList,
                                span: s,
                            });
                        }
                    }
                    values.push(l);
                }
                Elem::List(_, s) => {
                    return Err(ParseError {
                        kind: ParseErrorKind::HeterogeneousValueList,
                        span: s,
                    })
                }
            }
        }
        Ok(ValueList::new(values))
    }
}

fn lookup_kind(name: &str, span: SourceSpan) -> Result<ModuleKind, ParseError> {
    ModuleKind::from_name(name).ok_or_else(|| ParseError {
        kind: ParseErrorKind::UnknownModuleKind(name.to_string()),
        span,
    })
}

fn finish_form(
    kind: ModuleKind,
    value_lists: Vec<ValueList>,
    children: Vec<SpaceExpr>,
    span: SourceSpan,
) -> Result<SpaceExpr, ParseError> {
    check_form(kind, &value_lists, children.len()).map_err(|(k, msg)| ParseError {
        kind: match k {
            FormError::Arity => ParseErrorKind::ArityMismatch(msg),
            FormError::Domain => ParseErrorKind::InvalidDomain(msg),
        },
        span,
    })?;
    Ok(SpaceExpr {
        kind,
        value_lists,
        children,
    })
}

enum FormError {
    Arity,
    Domain,
}

#[derive(Clone, Copy)]
enum Expect {
    PositiveInt,
    NonNegativeInt,
    KeepProb,
    Padding,
    Tag,
}

fn check_form(kind: ModuleKind, lists: &[ValueList], n_children: usize) -> Result<(), (FormError, String)> {
    let (list_range, child_range) = kind.arity();
    if !list_range.contains(lists.len()) {
        return Err((
            FormError::Arity,
            format!("{kind} takes {list_range} value list(s), got {}", lists.len()),
        ));
    }
    if !child_range.contains(n_children) {
        return Err((
            FormError::Arity,
            format!("{kind} takes {child_range} submodule(s), got {n_children}"),
        ));
    }
    let domain_err = |msg: String| Err((FormError::Domain, msg));

    for l in lists {
        if l.values.is_empty() {
            return domain_err("empty value list".into());
        }
        for (i, v) in l.values.iter().enumerate() {
            if l.values[..i].contains(v) {
                return domain_err(format!("duplicate value {v}"));
            }
        }
        if l.name.is_some() != (kind == ModuleKind::UserHyperparams) {
            return domain_err(if kind == ModuleKind::UserHyperparams {
                "UserHyperparams lists must be named: [\"name\" [values]]".into()
            } else {
                format!("{kind} does not take named lists")
            });
        }
    }
    if kind == ModuleKind::UserHyperparams {
        for (i, l) in lists.iter().enumerate() {
            if lists[..i].iter().any(|o| o.name == l.name) {
                return domain_err(format!("duplicate user hyperparameter {:?}", l.name.as_deref().unwrap_or("")));
            }
        }
        return Ok(());
    }

    use Expect::*;
    let expectations: &[Expect] = match kind {
        ModuleKind::Affine => &[PositiveInt, Tag],
        ModuleKind::Dropout => &[KeepProb],
        ModuleKind::Conv2D => &[PositiveInt, PositiveInt, PositiveInt, Padding, Tag],
        ModuleKind::MaxPooling2D => &[PositiveInt, PositiveInt, Padding],
        ModuleKind::Repeat | ModuleKind::RepeatTied => &[NonNegativeInt],
        _ => &[],
    };
    for (l, expect) in lists.iter().zip(expectations) {
        for v in &l.values {
            let ok = match (expect, v) {
                (PositiveInt, Literal::Int(n)) => *n >= 1,
                (NonNegativeInt, Literal::Int(n)) => *n >= 0,
                (KeepProb, Literal::Float(p)) => *p > 0.0 && *p <= 1.0,
                (Padding, Literal::Str(s)) => s == "SAME" || s == "VALID",
                (Tag, Literal::Str(_)) => true,
                _ => false,
            };
            if !ok {
                let want = match expect {
                    PositiveInt => "a positive integer",
                    NonNegativeInt => "a non-negative integer",
                    KeepProb => "a decimal keep probability in (0, 1]",
                    Padding => "\"SAME\" or \"VALID\"",
                    Tag => "a quoted string",
                };
                return domain_err(format!("{kind}: {v} is not {want}"));
            }
        }
    }
    Ok(())
}

/// Parses a single module form.
pub fn parse(text: &str) -> Result<SpaceExpr, ParseError> {
    let toks = lex(text)?;
    let (line, column) = text
        .split('\n')
        .enumerate()
        .last()
        .map(|(i, l)| (i + 1, l.chars().count() + 1))
        .unwrap_or((1, 1));
    let mut p = Parser {
        toks,
        pos: 0,
        eof: SourceSpan {
            line,
            column,
            length: 1,
        },
    };
    let expr = p.form(1)?;
    if let Some(t) = p.peek() {
        return Err(ParseError {
            kind: ParseErrorKind::Unexpected(format!("{} after the top-level form", t.tok.describe())),
            span: t.span,
        });
    }
    Ok(expr)
}

/// Canonical single-line rendering; `parse(&pretty_print(e)) == Ok(e)`.
pub fn pretty_print(expr: &SpaceExpr) -> String {
    let mut out = String::new();
    write_expr(expr, &mut out);
    out
}

fn write_expr(expr: &SpaceExpr, out: &mut String) {
    out.push('(');
    out.push_str(expr.kind.name());
    let children_first = matches!(expr.kind, ModuleKind::Repeat | ModuleKind::RepeatTied);
    if children_first {
        write_children(expr, out);
        write_lists(expr, out);
    } else {
        write_lists(expr, out);
        write_children(expr, out);
    }
    out.push(')');
}

fn write_children(expr: &SpaceExpr, out: &mut String) {
    for c in &expr.children {
        out.push(' ');
        write_expr(c, out);
    }
}

fn write_lists(expr: &SpaceExpr, out: &mut String) {
    for l in &expr.value_lists {
        out.push(' ');
        let body = l.values.iter().map(Literal::to_string).collect::<Vec<_>>().join(", ");
        match &l.name {
            Some(name) => {
                out.push('[');
                out.push_str(&Literal::Str(name.clone()).to_string());
                out.push_str(" [");
                out.push_str(&body);
                out.push_str("]]");
            }
            None => {
                out.push('[');
                out.push_str(&body);
                out.push(']');
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ints(v: &[i64]) -> ValueList {
        ValueList::new(v.iter().copied().map(Literal::Int).collect())
    }

    #[test]
    fn optional_dropout() {
        let e = parse("(Optional (Dropout [0.5, 0.9]))").unwrap();
        assert_eq!(
            e,
            SpaceExpr::composite(
                ModuleKind::Optional,
                vec![SpaceExpr::basic(
                    ModuleKind::Dropout,
                    vec![ValueList::new(vec![Literal::Float(0.5), Literal::Float(0.9)])]
                )]
            )
        );
    }

    #[test]
    fn relu_and_conv() {
        assert_eq!(parse("(ReLU)").unwrap(), SpaceExpr::basic(ModuleKind::ReLU, vec![]));
        assert_eq!(
            parse("(Conv2D [32, 64] [3, 5] [1])").unwrap(),
            SpaceExpr::basic(ModuleKind::Conv2D, vec![ints(&[32, 64]), ints(&[3, 5]), ints(&[1])])
        );
    }

    #[test]
    fn empty_list_span_points_at_bracket() {
        let err = parse("(Dropout [])").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::EmptyValueList);
        assert_eq!(
            err.span,
            SourceSpan {
                line: 1,
                column: 10,
                length: 2
            }
        );
    }

    #[test]
    fn error_kinds() {
        let kind = |s: &str| parse(s).unwrap_err().kind;
        assert_eq!(kind("(ReLU"), ParseErrorKind::UnbalancedParens);
        assert_eq!(kind("(ReLU))"), ParseErrorKind::UnbalancedParens);
        assert_eq!(kind("(Conv3D [1])"), ParseErrorKind::UnknownModuleKind("Conv3D".into()));
        assert!(matches!(kind("(Conv2D [1] [3])"), ParseErrorKind::ArityMismatch(_)));
        assert!(matches!(kind("(Concat)"), ParseErrorKind::ArityMismatch(_)));
        assert!(matches!(kind("(ReLU (ReLU))"), ParseErrorKind::ArityMismatch(_)));
        assert_eq!(kind("(Affine [1, 2.0])"), ParseErrorKind::HeterogeneousValueList);
        assert!(matches!(kind("(Dropout [1.5])"), ParseErrorKind::InvalidDomain(_)));
        assert!(matches!(kind("(Affine [4, 4])"), ParseErrorKind::InvalidDomain(_)));
        assert!(matches!(kind("(UserHyperparams [1, 2])"), ParseErrorKind::InvalidDomain(_)));
        assert!(matches!(kind("(ReLU) (ReLU)"), ParseErrorKind::Unexpected(_)));
        assert!(matches!(kind(""), ParseErrorKind::Unexpected(_)));
    }

    #[test]
    fn error_span_on_later_line() {
        let err = parse("(Concat\n  (ReLU)\n  (Bogus))").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownModuleKind("Bogus".into()));
        assert_eq!((err.span.line, err.span.column, err.span.length), (3, 4, 5));
    }

    #[test]
    fn depth_limit() {
        let ok = format!("{}(ReLU){}", "(Optional ".repeat(255), ")".repeat(255));
        assert!(parse(&ok).is_ok());
        let deep = format!("{}(ReLU){}", "(Optional ".repeat(256), ")".repeat(256));
        assert_eq!(parse(&deep).unwrap_err().kind, ParseErrorKind::DepthExceeded);
    }

    #[test]
    fn comments_crlf_and_bare_names() {
        let text = "; header\r\n(MaybeSwap BatchNormalization ; inline\r\n  ReLU)\r\n";
        let e = parse(text).unwrap();
        assert_eq!(pretty_print(&e), "(MaybeSwap (BatchNormalization) (ReLU))");
    }

    #[test]
    fn user_hyperparams_named_lists() {
        let e = parse(r#"(UserHyperparams ["optimizer" ["adam", "sgd"]] ["lr" [0.1, 0.01]])"#).unwrap();
        assert_eq!(e.value_lists[0].name.as_deref(), Some("optimizer"));
        assert_eq!(e.value_lists[1].values, vec![Literal::Float(0.1), Literal::Float(0.01)]);
        assert_eq!(
            pretty_print(&e),
            r#"(UserHyperparams ["optimizer" ["adam", "sgd"]] ["lr" [0.1, 0.01]])"#
        );
    }

    #[test]
    fn repeat_prints_child_first() {
        let text = "(Repeat (Dropout [0.5, 0.9]) [1, 2])";
        let e = parse(text).unwrap();
        assert_eq!(pretty_print(&e), text);
        assert_eq!(parse("(Repeat [1, 2] (Dropout [0.5, 0.9]))").unwrap(), e);
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [1.0, 0.5, 1e-9, 123456.0, 3.0e21, 0.1 + 0.2] {
            let s = Literal::Float(v).to_string();
            match classify_word(&s) {
                Some(Tok::Lit(Literal::Float(back))) => assert_eq!(back, v, "{s}"),
                other => panic!("{s} lexed as {other:?}"),
            }
        }
    }

    #[test]
    fn string_escapes_round_trip() {
        let e = SpaceExpr::basic(
            ModuleKind::UserHyperparams,
            vec![ValueList::named("a\"b", vec![Literal::Str("x\\y".into())])],
        );
        assert_eq!(parse(&pretty_print(&e)).unwrap(), e);
    }
}
