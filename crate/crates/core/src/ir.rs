//! Extended-Einsum data model: ranks, tensors, expression trees, generational
//! iteration and cascade validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EinsumId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankKind {
    Spatial,
    /// Iterates generations `0, step, 2*step, ...` while the index stays below `stop`.
    Generational {
        step: usize,
        stop: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankDecl {
    pub name: String,
    /// Extent of every tensor dimension carrying this rank.
    pub shape: usize,
    pub kind: RankKind,
}

impl RankDecl {
    pub fn spatial(name: &str, shape: usize) -> Self {
        RankDecl {
            name: name.to_string(),
            shape,
            kind: RankKind::Spatial,
        }
    }

    pub fn is_generational(&self) -> bool {
        matches!(self.kind, RankKind::Generational { .. })
    }

    /// Number of loop iterations needed to cover the rank.
    pub fn trip_count(&self) -> usize {
        match self.kind {
            RankKind::Spatial => self.shape,
            RankKind::Generational { step, stop } => stop.div_ceil(step.max(1)),
        }
    }

    /// Distance between consecutive loop values.
    pub fn stride(&self) -> usize {
        match self.kind {
            RankKind::Spatial => 1,
            RankKind::Generational { step, .. } => step,
        }
    }

    /// Loop variable spelling used in text and listings.
    pub fn var(&self) -> String {
        self.name.to_lowercase()
    }
}

/// One tensor subscript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexExpr {
    /// `coef * var + offset`; a missing variable makes the subscript constant.
    Affine {
        var: Option<String>,
        coef: i64,
        offset: i64,
    },
    /// `var - window`, used by causal correlation windows; out of range reads are zero.
    Window { var: String, window: String },
}

impl IndexExpr {
    pub fn var(rank: &str) -> Self {
        IndexExpr::Affine {
            var: Some(rank.to_string()),
            coef: 1,
            offset: 0,
        }
    }

    pub fn constant(value: i64) -> Self {
        IndexExpr::Affine {
            var: None,
            coef: 0,
            offset: value,
        }
    }

    pub fn shifted(rank: &str, offset: i64) -> Self {
        IndexExpr::Affine {
            var: Some(rank.to_string()),
            coef: 1,
            offset,
        }
    }

    pub fn ranks(&self) -> Vec<&str> {
        match self {
            IndexExpr::Affine { var: Some(v), .. } => vec![v.as_str()],
            IndexExpr::Affine { var: None, .. } => vec![],
            IndexExpr::Window { var, window } => vec![var.as_str(), window.as_str()],
        }
    }

    /// The plain rank variable when the subscript is exactly `v`.
    pub fn plain(&self) -> Option<&str> {
        match self {
            IndexExpr::Affine {
                var: Some(v),
                coef: 1,
                offset: 0,
            } => Some(v),
            _ => None,
        }
    }

    pub fn is_window(&self) -> bool {
        matches!(self, IndexExpr::Window { .. })
    }

    pub fn eval(&self, value_of: impl Fn(&str) -> i64) -> i64 {
        match self {
            IndexExpr::Affine {
                var: Some(v),
                coef,
                offset,
            } => coef * value_of(v) + offset,
            IndexExpr::Affine {
                var: None, offset, ..
            } => *offset,
            IndexExpr::Window { var, window } => value_of(var) - value_of(window),
        }
    }

    pub fn render(&self) -> String {
        match self {
            IndexExpr::Affine {
                var: None, offset, ..
            } => offset.to_string(),
            IndexExpr::Affine {
                var: Some(v),
                coef,
                offset,
            } => {
                let v = v.to_lowercase();
                let head = match *coef {
                    1 => v,
                    -1 => format!("-1*{v}"),
                    c => format!("{c}*{v}"),
                };
                match offset.cmp(&0) {
                    std::cmp::Ordering::Equal => head,
                    std::cmp::Ordering::Greater => format!("{head}+{offset}"),
                    std::cmp::Ordering::Less => format!("{head}-{}", -offset),
                }
            }
            IndexExpr::Window { var, window } => {
                format!("{}-{}", var.to_lowercase(), window.to_lowercase())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub tensor: String,
    pub indices: Vec<IndexExpr>,
}

impl Access {
    pub fn new(tensor: &str, indices: Vec<IndexExpr>) -> Self {
        Access {
            tensor: tensor.to_string(),
            indices,
        }
    }

    /// Access whose subscripts are the plain variables of `ranks`.
    pub fn identity(tensor: &str, ranks: &[&str]) -> Self {
        Access::new(tensor, ranks.iter().map(|r| IndexExpr::var(r)).collect())
    }

    pub fn ranks(&self) -> impl Iterator<Item = &str> {
        self.indices.iter().flat_map(|i| i.ranks())
    }

    pub fn render(&self) -> String {
        if self.indices.is_empty() {
            return self.tensor.clone();
        }
        let idx: Vec<String> = self.indices.iter().map(|i| i.render()).collect();
        format!("{}[{}]", self.tensor, idx.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryOp {
    Exp,
    Log,
    Sqrt,
    Rsqrt,
    Silu,
    Sigmoid,
    Softplus,
    Square,
    Negate,
}

impl UnaryOp {
    pub const NAMED: [UnaryOp; 8] = [
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Sqrt,
        UnaryOp::Rsqrt,
        UnaryOp::Silu,
        UnaryOp::Sigmoid,
        UnaryOp::Softplus,
        UnaryOp::Square,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Rsqrt => "rsqrt",
            UnaryOp::Silu => "silu",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Square => "square",
            UnaryOp::Negate => "neg",
        }
    }

    pub fn from_name(name: &str) -> Option<UnaryOp> {
        UnaryOp::NAMED.iter().copied().find(|op| op.name() == name)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Rsqrt => 1.0 / x.sqrt(),
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Square => x * x,
            UnaryOp::Negate => -x,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow for large `x` or cancellation for very negative `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }

    pub fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Access(Access),
    Const(f64),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn access(tensor: &str, indices: Vec<IndexExpr>) -> Expr {
        Expr::Access(Access::new(tensor, indices))
    }

    pub fn unary(op: UnaryOp, e: Expr) -> Expr {
        Expr::Unary(op, Box::new(e))
    }

    pub fn binary(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinOp::Mul, a, b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinOp::Add, a, b)
    }

    /// Every tensor access in evaluation order.
    pub fn accesses(&self) -> Vec<&Access> {
        let mut out = Vec::new();
        self.collect_accesses(&mut out);
        out
    }

    fn collect_accesses<'a>(&'a self, out: &mut Vec<&'a Access>) {
        match self {
            Expr::Access(a) => out.push(a),
            Expr::Const(_) => {}
            Expr::Unary(_, c) => c.collect_accesses(out),
            Expr::Binary(_, l, r) => {
                l.collect_accesses(out);
                r.collect_accesses(out);
            }
        }
    }

    pub fn accesses_mut(&mut self) -> Vec<&mut Access> {
        let mut out = Vec::new();
        self.collect_accesses_mut(&mut out);
        out
    }

    fn collect_accesses_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Access>) {
        match self {
            Expr::Access(a) => out.push(a),
            Expr::Const(_) => {}
            Expr::Unary(_, c) => c.collect_accesses_mut(out),
            Expr::Binary(_, l, r) => {
                l.collect_accesses_mut(out);
                r.collect_accesses_mut(out);
            }
        }
    }

    /// Number of arithmetic operations evaluated per point (binary plus unary nodes).
    pub fn op_count(&self) -> u64 {
        match self {
            Expr::Access(_) | Expr::Const(_) => 0,
            Expr::Unary(_, c) => 1 + c.op_count(),
            Expr::Binary(_, l, r) => 1 + l.op_count() + r.op_count(),
        }
    }

    pub fn render(&self) -> String {
        self.render_with(&|a: &Access| a.render())
    }

    /// Renders with a caller-chosen spelling for tensor accesses.
    pub fn render_with(&self, access: &dyn Fn(&Access) -> String) -> String {
        match self {
            Expr::Access(a) => access(a),
            Expr::Const(c) => format_number(*c),
            Expr::Unary(UnaryOp::Negate, c) => match c.as_ref() {
                Expr::Access(_) | Expr::Unary(..) => format!("-{}", c.render_with(access)),
                _ => format!("-({})", c.render_with(access)),
            },
            Expr::Unary(op, c) => format!("{}({})", op.name(), c.render_with(access)),
            Expr::Binary(op, l, r) => {
                let p = op.precedence();
                let left = match l.as_ref() {
                    Expr::Binary(lop, ..) if lop.precedence() < p => {
                        format!("({})", l.render_with(access))
                    }
                    _ => l.render_with(access),
                };
                let right = match r.as_ref() {
                    Expr::Binary(rop, ..) if rop.precedence() <= p => {
                        format!("({})", r.render_with(access))
                    }
                    _ => r.render_with(access),
                };
                format!("{left} {} {right}", op.symbol())
            }
        }
    }
}

/// Shortest decimal spelling that parses back to the same double.
pub fn format_number(x: f64) -> String {
    format!("{x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitClause {
    pub output: Access,
    pub body: Expr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EinsumDecl {
    pub id: EinsumId,
    pub output: Access,
    /// `+=`: the body is summed over every rank absent from the output.
    pub accumulate: bool,
    pub body: Expr,
    pub reduction_ranks: BTreeSet<String>,
    pub init: Option<InitClause>,
    /// Ids of the original Einsums when this declaration came from shared-input merging.
    pub merged_from: Vec<EinsumId>,
}

impl EinsumDecl {
    /// Builds a declaration and derives its reduction ranks.
    pub fn new(id: EinsumId, output: Access, accumulate: bool, body: Expr) -> Self {
        let mut e = EinsumDecl {
            id,
            output,
            accumulate,
            body,
            reduction_ranks: BTreeSet::new(),
            init: None,
            merged_from: Vec::new(),
        };
        e.derive_reductions();
        e
    }

    pub fn with_init(mut self, init: InitClause) -> Self {
        self.init = Some(init);
        self
    }

    pub fn derive_reductions(&mut self) {
        let out: BTreeSet<&str> = self.output.ranks().collect();
        self.reduction_ranks = if self.accumulate {
            self.body
                .accesses()
                .iter()
                .flat_map(|a| a.ranks())
                .filter(|r| !out.contains(r))
                .map(str::to_string)
                .collect()
        } else {
            BTreeSet::new()
        };
    }

    pub fn output_tensor(&self) -> &str {
        &self.output.tensor
    }

    /// Tensors read by the body or the init clause, deduplicated.
    pub fn reads(&self) -> BTreeSet<&str> {
        let mut s: BTreeSet<&str> = self
            .body
            .accesses()
            .iter()
            .map(|a| a.tensor.as_str())
            .collect();
        if let Some(init) = &self.init {
            s.extend(init.body.accesses().iter().map(|a| a.tensor.as_str()));
        }
        s
    }

    /// Rank names of the iteration space, without extents.
    pub fn rank_names(&self) -> BTreeSet<String> {
        let mut s: BTreeSet<String> = self.output.ranks().map(str::to_string).collect();
        for a in self.body.accesses() {
            s.extend(a.ranks().map(str::to_string));
        }
        s.extend(self.reduction_ranks.iter().cloned());
        s
    }

    /// Ranks in loop order: output subscripts first, then body ranks as encountered.
    pub fn ordered_ranks(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        let mut push = |r: &str| {
            if !v.iter().any(|x| x == r) {
                v.push(r.to_string());
            }
        };
        for r in self.output.ranks() {
            push(r);
        }
        for a in self.body.accesses() {
            for r in a.ranks() {
                push(r);
            }
        }
        v
    }

    pub fn label(&self) -> String {
        if self.merged_from.len() > 1 {
            self.merged_from
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join("+")
        } else {
            self.id.to_string()
        }
    }

    /// Body accesses read at a negative offset of `rank` (recurrence reads).
    pub fn back_reads(&self, rank: &str) -> Vec<&Access> {
        self.body
            .accesses()
            .into_iter()
            .filter(|a| {
                a.indices.iter().any(|i| {
                    matches!(i, IndexExpr::Affine { var: Some(v), offset, .. } if v == rank && *offset < 0)
                })
            })
            .collect()
    }

    /// True for a contraction of two operands where each operand contributes a
    /// free output rank the other lacks.
    pub fn is_gemm_like(&self) -> bool {
        if self.reduction_ranks.is_empty() {
            return false;
        }
        let Expr::Binary(BinOp::Mul, l, r) = &self.body else {
            return false;
        };
        let (Expr::Access(a), Expr::Access(b)) = (l.as_ref(), r.as_ref()) else {
            return false;
        };
        let out: BTreeSet<&str> = self.output.ranks().collect();
        let ra: BTreeSet<&str> = a.ranks().collect();
        let rb: BTreeSet<&str> = b.ranks().collect();
        let a_free = ra.iter().any(|x| out.contains(x) && !rb.contains(x));
        let b_free = rb.iter().any(|x| out.contains(x) && !ra.contains(x));
        let contracted = self
            .reduction_ranks
            .iter()
            .all(|x| ra.contains(x.as_str()) && rb.contains(x.as_str()));
        a_free && b_free && contracted
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub name: String,
    pub ranks: Vec<String>,
}

/// An input produced by concatenating other (synthesized) inputs along one axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedInput {
    pub name: String,
    pub axis: usize,
    /// Source tensor names with their extent along `axis`.
    pub sources: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Fill {
    Uniform { lo: f64, hi: f64 },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHint {
    pub tensor: String,
    pub fill: Fill,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Cascade {
    pub ranks: Vec<RankDecl>,
    pub tensors: Vec<TensorDecl>,
    pub einsums: Vec<EinsumDecl>,
    pub derived: Vec<DerivedInput>,
    pub hints: Vec<InputHint>,
}

impl Cascade {
    pub fn rank(&self, name: &str) -> Option<&RankDecl> {
        self.ranks.iter().find(|r| r.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorDecl> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn einsum(&self, id: EinsumId) -> Option<&EinsumDecl> {
        self.einsums.iter().find(|e| e.id == id)
    }

    pub fn position(&self, id: EinsumId) -> Option<usize> {
        self.einsums.iter().position(|e| e.id == id)
    }

    pub fn rank_shape(&self, name: &str) -> usize {
        self.rank(name).map(|r| r.shape).unwrap_or(0)
    }

    pub fn rank_order(&self, name: &str) -> usize {
        self.ranks
            .iter()
            .position(|r| r.name == name)
            .unwrap_or(usize::MAX)
    }

    pub fn shape(&self, tensor: &str) -> Vec<usize> {
        self.tensor(tensor)
            .map(|t| t.ranks.iter().map(|r| self.rank_shape(r)).collect())
            .unwrap_or_default()
    }

    pub fn size(&self, tensor: &str) -> u64 {
        self.shape(tensor).iter().map(|&s| s as u64).product()
    }

    /// Position of the Einsum producing `tensor`.
    pub fn producer(&self, tensor: &str) -> Option<usize> {
        self.einsums.iter().position(|e| e.output.tensor == tensor)
    }

    /// Positions of the Einsums reading `tensor`, in cascade order.
    pub fn consumers(&self, tensor: &str) -> Vec<usize> {
        self.einsums
            .iter()
            .enumerate()
            .filter(|(_, e)| e.reads().contains(tensor))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_input(&self, tensor: &str) -> bool {
        self.producer(tensor).is_none()
    }

    /// Tensors shared across Einsums: produced by one and read by another.
    pub fn is_shared(&self, tensor: &str) -> bool {
        match self.producer(tensor) {
            Some(p) => self.consumers(tensor).iter().any(|&c| c != p),
            None => false,
        }
    }

    /// Producer-to-consumer edges `(up id, down id, tensor)` for forward reads.
    pub fn edges(&self) -> Vec<(EinsumId, EinsumId, String)> {
        let mut out = Vec::new();
        for (pi, p) in self.einsums.iter().enumerate() {
            for c in self.einsums.iter().skip(pi + 1) {
                if c.reads().contains(p.output.tensor.as_str()) {
                    out.push((p.id, c.id, p.output.tensor.clone()));
                }
            }
        }
        out
    }

    /// The generational rank used by an Einsum, if any.
    pub fn generational_rank(&self, e: &EinsumDecl) -> Option<&RankDecl> {
        e.rank_names()
            .iter()
            .filter_map(|r| self.rank(r))
            .find(|r| r.is_generational())
    }

    pub fn hint(&self, tensor: &str) -> Option<&Fill> {
        self.hints
            .iter()
            .find(|h| h.tensor == tensor)
            .map(|h| &h.fill)
    }
}

/// Ranks of an Einsum's iteration space with their trip counts, in loop order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IterationSpace {
    pub ranks: Vec<(String, usize)>,
}

impl IterationSpace {
    pub fn names(&self) -> BTreeSet<String> {
        self.ranks.iter().map(|(r, _)| r.clone()).collect()
    }

    pub fn points(&self) -> u64 {
        self.ranks.iter().map(|(_, e)| *e as u64).product()
    }
}

pub fn iteration_space(einsum: &EinsumDecl, cascade: &Cascade) -> Result<IterationSpace> {
    let mut ranks = Vec::new();
    for r in einsum.ordered_ranks() {
        match cascade.rank(&r) {
            Some(decl) => ranks.push((r, decl.trip_count())),
            None => {
                return Err(Error::Invalid(vec![Diagnostic::new(
                    DiagKind::UndeclaredRank,
                    Some(einsum.id),
                    &r,
                    format!("rank {r} is not declared"),
                )]))
            }
        }
    }
    Ok(IterationSpace { ranks })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DiagKind {
    NoEinsums,
    UndeclaredRank,
    UndeclaredTensor,
    DuplicateRank,
    DuplicateTensor,
    DuplicateEinsum,
    RepeatedRankInSignature,
    BadExtent,
    ArityMismatch,
    BadOutputIndex,
    UnboundRank,
    MissingInit,
    BadInit,
    MultipleGenerational,
    MultipleProducers,
    NotTopological,
    BadDerivedInput,
}

impl DiagKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DiagKind::NoEinsums => "no Einsums",
            DiagKind::UndeclaredRank => "undeclared rank",
            DiagKind::UndeclaredTensor => "undeclared tensor",
            DiagKind::DuplicateRank => "duplicate rank",
            DiagKind::DuplicateTensor => "duplicate tensor",
            DiagKind::DuplicateEinsum => "duplicate Einsum id",
            DiagKind::RepeatedRankInSignature => "repeated rank in signature",
            DiagKind::BadExtent => "bad extent",
            DiagKind::ArityMismatch => "arity mismatch",
            DiagKind::BadOutputIndex => "bad output index",
            DiagKind::UnboundRank => "unbound rank",
            DiagKind::MissingInit => "missing initialization",
            DiagKind::BadInit => "bad initialization",
            DiagKind::MultipleGenerational => "multiple generational ranks",
            DiagKind::MultipleProducers => "multiple producers",
            DiagKind::NotTopological => "order is not topological",
            DiagKind::BadDerivedInput => "bad derived input",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub kind: DiagKind,
    pub einsum: Option<EinsumId>,
    pub subject: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(kind: DiagKind, einsum: Option<EinsumId>, subject: &str, message: String) -> Self {
        Diagnostic {
            kind,
            einsum,
            subject: subject.to_string(),
            message,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.einsum {
            Some(id) => write!(f, "einsum {id}: {}: {}", self.kind.as_str(), self.message),
            None => write!(f, "{}: {}", self.kind.as_str(), self.message),
        }
    }
}

/// Checks every structural invariant and returns all violations found.
pub fn validate(c: &Cascade) -> Vec<Diagnostic> {
    let mut d = Vec::new();
    let mut push = |kind, einsum, subject: &str, message: String| {
        d.push(Diagnostic::new(kind, einsum, subject, message));
    };

    if c.einsums.is_empty() {
        push(
            DiagKind::NoEinsums,
            None,
            "",
            "cascade declares no Einsums".into(),
        );
    }

    let mut seen = BTreeSet::new();
    for r in &c.ranks {
        if !seen.insert(r.name.to_lowercase()) {
            push(
                DiagKind::DuplicateRank,
                None,
                &r.name,
                format!(
                    "rank {} declared twice (names are case-insensitive)",
                    r.name
                ),
            );
        }
        if r.shape == 0 {
            push(
                DiagKind::BadExtent,
                None,
                &r.name,
                format!("rank {} has extent 0", r.name),
            );
        }
        if let RankKind::Generational { step, stop } = r.kind {
            if step == 0 {
                push(
                    DiagKind::BadExtent,
                    None,
                    &r.name,
                    format!("rank {} has step 0", r.name),
                );
            }
            if stop > r.shape {
                push(
                    DiagKind::BadExtent,
                    None,
                    &r.name,
                    format!(
                        "rank {} stops at {stop} beyond its extent {}",
                        r.name, r.shape
                    ),
                );
            }
        }
    }

    let mut seen = BTreeSet::new();
    for t in &c.tensors {
        if !seen.insert(t.name.as_str()) {
            push(
                DiagKind::DuplicateTensor,
                None,
                &t.name,
                format!("tensor {} declared twice", t.name),
            );
        }
        let mut rs = BTreeSet::new();
        for r in &t.ranks {
            if c.rank(r).is_none() {
                push(
                    DiagKind::UndeclaredRank,
                    None,
                    r,
                    format!("tensor {} uses undeclared rank {r}", t.name),
                );
            }
            if !rs.insert(r.as_str()) {
                push(
                    DiagKind::RepeatedRankInSignature,
                    None,
                    r,
                    format!("tensor {} repeats rank {r}", t.name),
                );
            }
        }
    }

    for dv in &c.derived {
        match c.tensor(&dv.name) {
            None => push(
                DiagKind::BadDerivedInput,
                None,
                &dv.name,
                format!("derived input {} is not declared", dv.name),
            ),
            Some(t) => {
                let ext = t.ranks.get(dv.axis).map(|r| c.rank_shape(r));
                let sum: usize = dv.sources.iter().map(|(_, e)| *e).sum();
                if ext != Some(sum) {
                    push(
                        DiagKind::BadDerivedInput,
                        None,
                        &dv.name,
                        format!(
                            "derived input {} sources do not tile axis {}",
                            dv.name, dv.axis
                        ),
                    );
                }
            }
        }
    }

    let mut ids = BTreeSet::new();
    let mut producers: BTreeMap<&str, Vec<EinsumId>> = BTreeMap::new();
    for e in &c.einsums {
        if !ids.insert(e.id) {
            push(
                DiagKind::DuplicateEinsum,
                Some(e.id),
                "",
                format!("id {} used twice", e.id),
            );
        }
        producers
            .entry(e.output.tensor.as_str())
            .or_default()
            .push(e.id);
        check_einsum(c, e, &mut push);
    }
    for (t, ps) in &producers {
        if ps.len() > 1 {
            push(
                DiagKind::MultipleProducers,
                Some(ps[1]),
                t,
                format!("tensor {t} is written by Einsums {ps:?}"),
            );
        }
    }

    // Forward order: a read of a tensor produced at or after the reader is only
    // legal as a recurrence read at a negative generational offset.
    for (pos, e) in c.einsums.iter().enumerate() {
        let gen = c.generational_rank(e).map(|r| r.name.clone());
        for a in e.body.accesses() {
            let Some(p) = c.producer(&a.tensor) else {
                continue;
            };
            if p < pos {
                continue;
            }
            let back = gen.as_ref().is_some_and(|g| {
                a.indices.iter().any(|i| matches!(i, IndexExpr::Affine { var: Some(v), offset, .. } if v == g && *offset < 0))
            });
            if !back {
                push(
                    DiagKind::NotTopological,
                    Some(e.id),
                    &a.tensor,
                    format!("reads {} before its producer runs", a.tensor),
                );
            }
        }
    }
    d
}

fn check_access(
    c: &Cascade,
    id: EinsumId,
    a: &Access,
    push: &mut impl FnMut(DiagKind, Option<EinsumId>, &str, String),
) -> bool {
    let Some(t) = c.tensor(&a.tensor) else {
        push(
            DiagKind::UndeclaredTensor,
            Some(id),
            &a.tensor,
            format!("tensor {} is not declared", a.tensor),
        );
        return false;
    };
    let mut ok = true;
    if t.ranks.len() != a.indices.len() {
        push(
            DiagKind::ArityMismatch,
            Some(id),
            &a.tensor,
            format!(
                "{} has {} ranks but is indexed with {}",
                a.tensor,
                t.ranks.len(),
                a.indices.len()
            ),
        );
        ok = false;
    }
    for r in a.ranks() {
        if c.rank(r).is_none() {
            push(
                DiagKind::UndeclaredRank,
                Some(id),
                r,
                format!("rank {r} is not declared"),
            );
            ok = false;
        }
    }
    ok
}

fn check_einsum(
    c: &Cascade,
    e: &EinsumDecl,
    push: &mut impl FnMut(DiagKind, Option<EinsumId>, &str, String),
) {
    let id = e.id;
    if check_access(c, id, &e.output, push) {
        let t = c.tensor(&e.output.tensor).expect("checked");
        for (i, (idx, r)) in e.output.indices.iter().zip(&t.ranks).enumerate() {
            if idx.plain() != Some(r.as_str()) {
                push(
                    DiagKind::BadOutputIndex,
                    Some(id),
                    r,
                    format!(
                        "output subscript {i} of {} must be the plain variable {}",
                        e.output.tensor,
                        r.to_lowercase()
                    ),
                );
            }
        }
    }
    for a in e.body.accesses() {
        check_access(c, id, a, push);
    }

    let out: BTreeSet<&str> = e.output.ranks().collect();
    if !e.accumulate {
        for a in e.body.accesses() {
            for r in a.ranks() {
                if !out.contains(r) {
                    push(
                        DiagKind::UnboundRank,
                        Some(id),
                        r,
                        format!(
                            "rank {r} appears only on the right-hand side of a plain assignment"
                        ),
                    );
                }
            }
        }
    }

    let gens: Vec<&RankDecl> = e
        .rank_names()
        .iter()
        .filter_map(|r| c.rank(r))
        .filter(|r| r.is_generational())
        .collect();
    if gens.len() > 1 {
        push(
            DiagKind::MultipleGenerational,
            Some(id),
            &gens[1].name,
            "more than one generational rank".into(),
        );
    }

    // Negative offsets on a rank that is not windowed need an init clause for
    // the first generation.
    let mut needs_init: Option<String> = None;
    for a in e.body.accesses() {
        for i in &a.indices {
            if let IndexExpr::Affine {
                var: Some(v),
                offset,
                ..
            } = i
            {
                if *offset < 0 {
                    let generational = c.rank(v).is_some_and(|r| r.is_generational());
                    if !generational {
                        push(
                            DiagKind::MissingInit,
                            Some(id),
                            &a.tensor,
                            format!(
                                "{} is read at {} on non-generational rank {v}",
                                a.tensor,
                                i.render()
                            ),
                        );
                    } else if e.init.is_none() {
                        needs_init = Some(a.tensor.clone());
                    }
                }
            }
        }
    }
    if let Some(t) = needs_init {
        push(
            DiagKind::MissingInit,
            Some(id),
            &t,
            format!("{t} is read at a previous generation but no init clause is given"),
        );
    }

    if let Some(init) = &e.init {
        match gens.first() {
            None => push(
                DiagKind::BadInit,
                Some(id),
                &e.output.tensor,
                "init clause without a generational rank".into(),
            ),
            Some(g) => {
                if init.output.tensor != e.output.tensor
                    || init.output.indices.len() != e.output.indices.len()
                {
                    push(
                        DiagKind::BadInit,
                        Some(id),
                        &init.output.tensor,
                        "init clause must write the Einsum's output".into(),
                    );
                } else {
                    for (oi, ii) in e.output.indices.iter().zip(&init.output.indices) {
                        let ok = if oi.plain() == Some(g.name.as_str()) {
                            *ii == IndexExpr::constant(0)
                        } else {
                            ii == oi
                        };
                        if !ok {
                            push(
                                DiagKind::BadInit,
                                Some(id),
                                &init.output.tensor,
                                format!(
                                    "init subscript {} must be 0 on {} and unchanged elsewhere",
                                    ii.render(),
                                    g.name
                                ),
                            );
                        }
                    }
                }
                for a in init.body.accesses() {
                    if check_access(c, id, a, push) {
                        for r in a.ranks() {
                            if !out.contains(r) {
                                push(
                                    DiagKind::UnboundRank,
                                    Some(id),
                                    r,
                                    format!("init clause uses rank {r} absent from the output"),
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Validates and converts the diagnostic list into a result.
pub fn ensure_valid(c: &Cascade) -> Result<()> {
    let d = validate(c);
    if d.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(d))
    }
}
