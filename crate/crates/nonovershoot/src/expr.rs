//! Expression language: hash-consed ASTs, infix parsing, symbolic
//! differentiation, and bulk evaluation.
//!
//! Expressions live in an [`Arena`]. Structurally identical subtrees are
//! interned to a single node, so repeated differentiation of nested
//! controller expressions shares subgraphs instead of exploding.
//!
//! # Syntax
//!
//! | Precedence (low → high) | Form            | Notes                          |
//! |-------------------------|-----------------|--------------------------------|
//! | 1                       | `a + b`, `a - b`| left-associative               |
//! | 2                       | `a * b`, `a / b`| left-associative               |
//! | 3                       | `-a`            | unary minus                    |
//! | 4                       | `a^k`           | `k` a non-negative integer literal |
//! | 5                       | `sin(e)`, `cos(e)`, `exp(e)`, `tanh(e)`, `(e)`, numbers, names |
//!
//! `-x^2` parses as `-(x^2)`. Chained `^` is rejected. Variable names are
//! resolved against a caller-supplied [`SymbolTable`]; nothing is implicit.
//!
//! # Simplification
//!
//! Constructors apply local rules only: constant folding (when the result is
//! finite and, for division, the denominator clears the guard), `0 + e → e`,
//! `e - 0 → e`, `0 - e → -e`, `e - e → 0`, `0 * e → 0`, `1 * e → e`,
//! `e / 1 → e`, `--e → e`, `e^0 → 1`, `e^1 → e`. No reassociation, no
//! distribution.
//!
//! # Evaluation
//!
//! [`Arena::eval_all`] computes every node in one pass over the arena
//! (construction order is already topological). Division guards at
//! `|denominator| < 1e-12`; any non-finite intermediate is a
//! [`EvalError::DomainError`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

/// Default cap on arena size; compilation aborts beyond it.
pub const DEFAULT_NODE_BUDGET: usize = 1_000_000;

/// Divisions with `|denominator|` below this are reported, not evaluated.
pub const DIV_GUARD: f64 = 1e-12;

/// A typed variable. Indices for `X` and `ThetaHat` are 1-based; `Ref(k)` is
/// the k-th derivative of whichever reference signal the evaluator binds.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Var {
    /// Time.
    T,
    /// State component `x{i}`, 1-based.
    X(u32),
    /// Parameter-estimate component `thetahat{j}`, 1-based.
    ThetaHat(u32),
    /// `r{k}`: k-th derivative of the bound reference signal, 0-based.
    Ref(u32),
}

impl Var {
    /// Canonical print name (`t`, `x2`, `thetahat1`, `r0`, ...).
    pub fn name(self) -> String {
        match self {
            Var::T => "t".to_string(),
            Var::X(i) => format!("x{i}"),
            Var::ThetaHat(j) => format!("thetahat{j}"),
            Var::Ref(k) => format!("r{k}"),
        }
    }

    fn code(self) -> u64 {
        match self {
            Var::T => 0,
            Var::X(i) => (1 << 32) | u64::from(i),
            Var::ThetaHat(j) => (2 << 32) | u64::from(j),
            Var::Ref(k) => (3 << 32) | u64::from(k),
        }
    }
}

/// Handle to an interned node. Only meaningful together with its arena.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ExprId(u32);

impl ExprId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One AST node. Children are ids into the same arena.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Node {
    Const(f64),
    Var(Var),
    Neg(ExprId),
    Add(ExprId, ExprId),
    Sub(ExprId, ExprId),
    Mul(ExprId, ExprId),
    Div(ExprId, ExprId),
    /// Integer power with exponent ≥ 0 (0 and 1 never survive construction).
    PowInt(ExprId, u32),
    Sin(ExprId),
    Cos(ExprId),
    Exp(ExprId),
    Tanh(ExprId),
}

#[derive(Error, Debug, Clone, Copy, PartialEq, Eq)]
#[error("expression node budget exceeded ({budget} nodes)")]
pub struct BudgetError {
    pub budget: usize,
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown symbol `{name}` at byte {pos}")]
    UnknownSymbol { name: String, pos: usize },
    #[error("invalid numeric literal at byte {pos}")]
    Number { pos: usize },
    #[error(transparent)]
    Budget(#[from] BudgetError),
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum EvalError {
    #[error("division by near-zero denominator (|den| < {DIV_GUARD:e}) at node {node:?}")]
    DivisionNearZero { node: ExprId },
    #[error("non-finite value produced at node {node:?}")]
    DomainError { node: ExprId },
    #[error("unbound variable `{}`", var.name())]
    UnboundVariable { var: Var },
}

/// Variable bindings for evaluation. Slices may be empty when the arena
/// cannot reference the corresponding family.
#[derive(Clone, Copy, Debug)]
pub struct Env<'a> {
    pub t: f64,
    /// `x1..xn`, so `x[i-1]` binds `X(i)`.
    pub x: &'a [f64],
    /// `thetahat1..thetahatp`.
    pub thetahat: &'a [f64],
    /// `refs[k]` binds `Ref(k)`; which signal this is (r or its stand-in)
    /// is the caller's choice.
    pub refs: &'a [f64],
}

impl Env<'_> {
    fn get(&self, v: Var) -> Result<f64, EvalError> {
        let val = match v {
            Var::T => Some(self.t),
            Var::X(i) => self.x.get(i as usize - 1).copied(),
            Var::ThetaHat(j) => self.thetahat.get(j as usize - 1).copied(),
            Var::Ref(k) => self.refs.get(k as usize).copied(),
        };
        val.ok_or(EvalError::UnboundVariable { var: v })
    }
}

/// Name → variable map used by the parser. Function names (`sin`, `cos`,
/// `exp`, `tanh`) are reserved and always win over table entries.
#[derive(Clone, Debug, Default)]
pub struct SymbolTable {
    map: BTreeMap<String, Var>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: &str, var: Var) {
        self.map.insert(name.to_string(), var);
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.map.get(name).copied()
    }

    /// Table for plant row `i`: `x1..xi` only (strict-feedback scope).
    pub fn plant_row(i: usize) -> Self {
        let mut t = Self::new();
        for k in 1..=i {
            t.declare(&format!("x{k}"), Var::X(k as u32));
        }
        t
    }

    /// Table for reference signals: `t` only.
    pub fn time_only() -> Self {
        let mut t = Self::new();
        t.declare("t", Var::T);
        t
    }

    /// Every variable family, mainly for tests and documentation examples.
    pub fn full(n: usize, p: usize) -> Self {
        let mut t = Self::time_only();
        for i in 1..=n {
            t.declare(&format!("x{i}"), Var::X(i as u32));
        }
        for j in 1..=p {
            t.declare(&format!("thetahat{j}"), Var::ThetaHat(j as u32));
        }
        for k in 0..=n {
            t.declare(&format!("r{k}"), Var::Ref(k as u32));
        }
        t
    }
}

type InternKey = (u8, u64, u64);

fn key_of(node: &Node) -> InternKey {
    match *node {
        Node::Const(v) => (0, v.to_bits(), 0),
        Node::Var(v) => (1, v.code(), 0),
        Node::Neg(a) => (2, u64::from(a.0), 0),
        Node::Add(a, b) => (3, u64::from(a.0), u64::from(b.0)),
        Node::Sub(a, b) => (4, u64::from(a.0), u64::from(b.0)),
        Node::Mul(a, b) => (5, u64::from(a.0), u64::from(b.0)),
        Node::Div(a, b) => (6, u64::from(a.0), u64::from(b.0)),
        Node::PowInt(a, k) => (7, u64::from(a.0), u64::from(k)),
        Node::Sin(a) => (8, u64::from(a.0), 0),
        Node::Cos(a) => (9, u64::from(a.0), 0),
        Node::Exp(a) => (10, u64::from(a.0), 0),
        Node::Tanh(a) => (11, u64::from(a.0), 0),
    }
}

/// Interning arena plus differentiation memo.
#[derive(Clone, Debug)]
pub struct Arena {
    nodes: Vec<Node>,
    interner: HashMap<InternKey, ExprId>,
    diff_memo: HashMap<(ExprId, Var), ExprId>,
    budget: usize,
}

impl Default for Arena {
    fn default() -> Self {
        Self::new(DEFAULT_NODE_BUDGET)
    }
}

impl Arena {
    pub fn new(budget: usize) -> Self {
        Self {
            nodes: Vec::new(),
            interner: HashMap::new(),
            diff_memo: HashMap::new(),
            budget,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, e: ExprId) -> Node {
        self.nodes[e.index()]
    }

    fn intern(&mut self, node: Node) -> Result<ExprId, BudgetError> {
        let key = key_of(&node);
        if let Some(&id) = self.interner.get(&key) {
            return Ok(id);
        }
        if self.nodes.len() >= self.budget {
            return Err(BudgetError { budget: self.budget });
        }
        let id = ExprId(self.nodes.len() as u32);
        self.nodes.push(node);
        self.interner.insert(key, id);
        Ok(id)
    }

    fn const_of(&self, e: ExprId) -> Option<f64> {
        match self.node(e) {
            Node::Const(v) => Some(v),
            _ => None,
        }
    }

    pub fn constant(&mut self, v: f64) -> Result<ExprId, BudgetError> {
        debug_assert!(v.is_finite(), "constants must be finite");
        // Normalize -0.0 so interning cannot split the zero.
        let v = if v == 0.0 { 0.0 } else { v };
        self.intern(Node::Const(v))
    }

    pub fn var(&mut self, v: Var) -> Result<ExprId, BudgetError> {
        self.intern(Node::Var(v))
    }

    pub fn neg(&mut self, a: ExprId) -> Result<ExprId, BudgetError> {
        if let Some(v) = self.const_of(a) {
            return self.constant(-v);
        }
        if let Node::Neg(inner) = self.node(a) {
            return Ok(inner);
        }
        self.intern(Node::Neg(a))
    }

    pub fn add(&mut self, a: ExprId, b: ExprId) -> Result<ExprId, BudgetError> {
        match (self.const_of(a), self.const_of(b)) {
            (Some(x), Some(y)) if (x + y).is_finite() => return self.constant(x + y),
            (Some(x), _) if x == 0.0 => return Ok(b),
            (_, Some(y)) if y == 0.0 => return Ok(a),
            _ => {}
        }
        self.intern(Node::Add(a, b))
    }

    pub fn sub(&mut self, a: ExprId, b: ExprId) -> Result<ExprId, BudgetError> {
        if a == b {
            return self.constant(0.0);
        }
        match (self.const_of(a), self.const_of(b)) {
            (Some(x), Some(y)) if (x - y).is_finite() => return self.constant(x - y),
            (Some(x), _) if x == 0.0 => return self.neg(b),
            (_, Some(y)) if y == 0.0 => return Ok(a),
            _ => {}
        }
        self.intern(Node::Sub(a, b))
    }

    pub fn mul(&mut self, a: ExprId, b: ExprId) -> Result<ExprId, BudgetError> {
        match (self.const_of(a), self.const_of(b)) {
            (Some(x), Some(y)) if (x * y).is_finite() => return self.constant(x * y),
            (Some(x), _) if x == 0.0 => return self.constant(0.0),
            (_, Some(y)) if y == 0.0 => return self.constant(0.0),
            (Some(x), _) if x == 1.0 => return Ok(b),
            (_, Some(y)) if y == 1.0 => return Ok(a),
            _ => {}
        }
        self.intern(Node::Mul(a, b))
    }

    pub fn div(&mut self, a: ExprId, b: ExprId) -> Result<ExprId, BudgetError> {
        match (self.const_of(a), self.const_of(b)) {
            (Some(x), Some(y)) if y.abs() >= DIV_GUARD && (x / y).is_finite() => {
                return self.constant(x / y)
            }
            (_, Some(y)) if y == 1.0 => return Ok(a),
            _ => {}
        }
        self.intern(Node::Div(a, b))
    }

    pub fn powint(&mut self, a: ExprId, k: u32) -> Result<ExprId, BudgetError> {
        match k {
            0 => return self.constant(1.0),
            1 => return Ok(a),
            _ => {}
        }
        if let Some(v) = self.const_of(a) {
            let r = v.powi(k as i32);
            if r.is_finite() {
                return self.constant(r);
            }
        }
        self.intern(Node::PowInt(a, k))
    }

    pub fn sin(&mut self, a: ExprId) -> Result<ExprId, BudgetError> {
        if let Some(v) = self.const_of(a) {
            return self.constant(v.sin());
        }
        self.intern(Node::Sin(a))
    }

    pub fn cos(&mut self, a: ExprId) -> Result<ExprId, BudgetError> {
        if let Some(v) = self.const_of(a) {
            return self.constant(v.cos());
        }
        self.intern(Node::Cos(a))
    }

    pub fn exp(&mut self, a: ExprId) -> Result<ExprId, BudgetError> {
        if let Some(v) = self.const_of(a) {
            let r = v.exp();
            if r.is_finite() {
                return self.constant(r);
            }
        }
        self.intern(Node::Exp(a))
    }

    pub fn tanh(&mut self, a: ExprId) -> Result<ExprId, BudgetError> {
        if let Some(v) = self.const_of(a) {
            return self.constant(v.tanh());
        }
        self.intern(Node::Tanh(a))
    }

    /// Sum of `items`, empty sum = 0.
    pub fn sum(&mut self, items: &[ExprId]) -> Result<ExprId, BudgetError> {
        let mut acc = self.constant(0.0)?;
        for &it in items {
            acc = self.add(acc, it)?;
        }
        Ok(acc)
    }

    /// Partial derivative with respect to `v`. Memoized per (node, variable).
    pub fn diff(&mut self, e: ExprId, v: Var) -> Result<ExprId, BudgetError> {
        if let Some(&d) = self.diff_memo.get(&(e, v)) {
            return Ok(d);
        }
        let d = match self.node(e) {
            Node::Const(_) => self.constant(0.0)?,
            Node::Var(w) => self.constant(if w == v { 1.0 } else { 0.0 })?,
            Node::Neg(a) => {
                let da = self.diff(a, v)?;
                self.neg(da)?
            }
            Node::Add(a, b) => {
                let da = self.diff(a, v)?;
                let db = self.diff(b, v)?;
                self.add(da, db)?
            }
            Node::Sub(a, b) => {
                let da = self.diff(a, v)?;
                let db = self.diff(b, v)?;
                self.sub(da, db)?
            }
            Node::Mul(a, b) => {
                let da = self.diff(a, v)?;
                let db = self.diff(b, v)?;
                let t1 = self.mul(da, b)?;
                let t2 = self.mul(a, db)?;
                self.add(t1, t2)?
            }
            Node::Div(a, b) => {
                let da = self.diff(a, v)?;
                let db = self.diff(b, v)?;
                let t1 = self.mul(da, b)?;
                let t2 = self.mul(a, db)?;
                let num = self.sub(t1, t2)?;
                let den = self.powint(b, 2)?;
                self.div(num, den)?
            }
            Node::PowInt(a, k) => {
                // k ≥ 2 here; smaller exponents never survive construction.
                let da = self.diff(a, v)?;
                let kc = self.constant(f64::from(k))?;
                let pw = self.powint(a, k - 1)?;
                let outer = self.mul(kc, pw)?;
                self.mul(da, outer)?
            }
            Node::Sin(a) => {
                let da = self.diff(a, v)?;
                let c = self.cos(a)?;
                self.mul(da, c)?
            }
            Node::Cos(a) => {
                let da = self.diff(a, v)?;
                let s = self.sin(a)?;
                let m = self.mul(da, s)?;
                self.neg(m)?
            }
            Node::Exp(a) => {
                let da = self.diff(a, v)?;
                let ex = self.exp(a)?;
                self.mul(da, ex)?
            }
            Node::Tanh(a) => {
                let da = self.diff(a, v)?;
                let th = self.tanh(a)?;
                let sq = self.powint(th, 2)?;
                let one = self.constant(1.0)?;
                let lin = self.sub(one, sq)?;
                self.mul(da, lin)?
            }
        };
        self.diff_memo.insert((e, v), d);
        Ok(d)
    }

    /// Deep-copies `e` from `src` into this arena, preserving structure.
    pub fn import(&mut self, src: &Arena, e: ExprId) -> Result<ExprId, BudgetError> {
        let mut memo: HashMap<ExprId, ExprId> = HashMap::new();
        self.import_rec(src, e, &mut memo)
    }

    fn import_rec(
        &mut self,
        src: &Arena,
        e: ExprId,
        memo: &mut HashMap<ExprId, ExprId>,
    ) -> Result<ExprId, BudgetError> {
        if let Some(&id) = memo.get(&e) {
            return Ok(id);
        }
        let node = match src.node(e) {
            Node::Const(v) => Node::Const(v),
            Node::Var(v) => Node::Var(v),
            Node::Neg(a) => Node::Neg(self.import_rec(src, a, memo)?),
            Node::Add(a, b) => {
                Node::Add(self.import_rec(src, a, memo)?, self.import_rec(src, b, memo)?)
            }
            Node::Sub(a, b) => {
                Node::Sub(self.import_rec(src, a, memo)?, self.import_rec(src, b, memo)?)
            }
            Node::Mul(a, b) => {
                Node::Mul(self.import_rec(src, a, memo)?, self.import_rec(src, b, memo)?)
            }
            Node::Div(a, b) => {
                Node::Div(self.import_rec(src, a, memo)?, self.import_rec(src, b, memo)?)
            }
            Node::PowInt(a, k) => Node::PowInt(self.import_rec(src, a, memo)?, k),
            Node::Sin(a) => Node::Sin(self.import_rec(src, a, memo)?),
            Node::Cos(a) => Node::Cos(self.import_rec(src, a, memo)?),
            Node::Exp(a) => Node::Exp(self.import_rec(src, a, memo)?),
            Node::Tanh(a) => Node::Tanh(self.import_rec(src, a, memo)?),
        };
        let id = self.intern(node)?;
        memo.insert(e, id);
        Ok(id)
    }

    /// Evaluates every node. Arena order is topological (children precede
    /// parents), so a single forward pass fills `values` for all roots.
    pub fn eval_all(&self, env: &Env, values: &mut Vec<f64>) -> Result<(), EvalError> {
        values.clear();
        values.reserve(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = match *node {
                Node::Const(c) => c,
                Node::Var(w) => env.get(w)?,
                Node::Neg(a) => -values[a.index()],
                Node::Add(a, b) => values[a.index()] + values[b.index()],
                Node::Sub(a, b) => values[a.index()] - values[b.index()],
                Node::Mul(a, b) => values[a.index()] * values[b.index()],
                Node::Div(a, b) => {
                    let den = values[b.index()];
                    if den.abs() < DIV_GUARD {
                        return Err(EvalError::DivisionNearZero {
                            node: ExprId(idx as u32),
                        });
                    }
                    values[a.index()] / den
                }
                Node::PowInt(a, k) => values[a.index()].powi(k as i32),
                Node::Sin(a) => values[a.index()].sin(),
                Node::Cos(a) => values[a.index()].cos(),
                Node::Exp(a) => values[a.index()].exp(),
                Node::Tanh(a) => values[a.index()].tanh(),
            };
            if !v.is_finite() {
                return Err(EvalError::DomainError {
                    node: ExprId(idx as u32),
                });
            }
            values.push(v);
        }
        Ok(())
    }

    /// Convenience single-root evaluation (allocates a fresh value buffer).
    pub fn eval(&self, e: ExprId, env: &Env) -> Result<f64, EvalError> {
        let mut values = Vec::new();
        self.eval_all(env, &mut values)?;
        Ok(values[e.index()])
    }

    /// The set of variables reachable from `e`.
    pub fn free_vars(&self, e: ExprId) -> BTreeSet<Var> {
        let mut seen = vec![false; self.nodes.len()];
        let mut out = BTreeSet::new();
        let mut stack = vec![e];
        while let Some(id) = stack.pop() {
            if seen[id.index()] {
                continue;
            }
            seen[id.index()] = true;
            match self.node(id) {
                Node::Const(_) => {}
                Node::Var(v) => {
                    out.insert(v);
                }
                Node::Neg(a) | Node::Sin(a) | Node::Cos(a) | Node::Exp(a) | Node::Tanh(a) => {
                    stack.push(a)
                }
                Node::PowInt(a, _) => stack.push(a),
                Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                    stack.push(a);
                    stack.push(b);
                }
            }
        }
        out
    }

    /// Parses an infix expression, interning the result.
    pub fn parse(&mut self, src: &str, table: &SymbolTable) -> Result<ExprId, ParseError> {
        let tokens = lex(src)?;
        let mut p = Parser {
            tokens: &tokens,
            pos: 0,
            arena: self,
            table,
            src_len: src.len(),
        };
        let e = p.expr()?;
        match p.peek() {
            None => Ok(e),
            Some((_, at)) => Err(ParseError::Syntax {
                pos: at,
                msg: "unexpected trailing input".to_string(),
            }),
        }
    }

    /// Renders `e` as parseable infix text. Parsing the result in the same
    /// arena returns the same id.
    pub fn to_text(&self, e: ExprId) -> String {
        let mut out = String::new();
        self.write_expr(e, 0, &mut out);
        out
    }

    fn prec(&self, e: ExprId) -> u8 {
        match self.node(e) {
            Node::Add(..) | Node::Sub(..) => 1,
            Node::Mul(..) | Node::Div(..) => 2,
            Node::Neg(_) => 3,
            Node::Const(v) if v < 0.0 => 3,
            Node::PowInt(..) => 4,
            _ => 5,
        }
    }

    fn write_expr(&self, e: ExprId, min_prec: u8, out: &mut String) {
        let prec = self.prec(e);
        let parens = prec < min_prec;
        if parens {
            out.push('(');
        }
        match self.node(e) {
            Node::Const(v) => {
                let _ = write!(out, "{v}");
            }
            Node::Var(v) => out.push_str(&v.name()),
            Node::Neg(a) => {
                out.push('-');
                self.write_expr(a, 3, out);
            }
            Node::Add(a, b) => {
                self.write_expr(a, 1, out);
                out.push_str(" + ");
                self.write_expr(b, 2, out);
            }
            Node::Sub(a, b) => {
                self.write_expr(a, 1, out);
                out.push_str(" - ");
                self.write_expr(b, 2, out);
            }
            Node::Mul(a, b) => {
                self.write_expr(a, 2, out);
                out.push_str(" * ");
                self.write_expr(b, 3, out);
            }
            Node::Div(a, b) => {
                self.write_expr(a, 2, out);
                out.push_str(" / ");
                self.write_expr(b, 3, out);
            }
            Node::PowInt(a, k) => {
                self.write_expr(a, 5, out);
                let _ = write!(out, "^{k}");
            }
            Node::Sin(a) => self.write_call("sin", a, out),
            Node::Cos(a) => self.write_call("cos", a, out),
            Node::Exp(a) => self.write_call("exp", a, out),
            Node::Tanh(a) => self.write_call("tanh", a, out),
        }
        if parens {
            out.push(')');
        }
    }

    fn write_call(&self, name: &str, a: ExprId, out: &mut String) {
        out.push_str(name);
        out.push('(');
        self.write_expr(a, 0, out);
        out.push(')');
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => i += 1,
            b'+' => {
                out.push((Tok::Plus, i));
                i += 1;
            }
            b'-' => {
                out.push((Tok::Minus, i));
                i += 1;
            }
            b'*' => {
                out.push((Tok::Star, i));
                i += 1;
            }
            b'/' => {
                out.push((Tok::Slash, i));
                i += 1;
            }
            b'^' => {
                out.push((Tok::Caret, i));
                i += 1;
            }
            b'(' => {
                out.push((Tok::LParen, i));
                i += 1;
            }
            b')' => {
                out.push((Tok::RParen, i));
                i += 1;
            }
            b'0'..=b'9' | b'.' => {
                let start = i;
                let mut saw_digit = false;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    saw_digit = true;
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        saw_digit = true;
                        i += 1;
                    }
                }
                if !saw_digit {
                    return Err(ParseError::Number { pos: start });
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| ParseError::Number { pos: start })?;
                if !v.is_finite() {
                    return Err(ParseError::Number { pos: start });
                }
                out.push((Tok::Num(v), start));
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start));
            }
            _ => {
                return Err(ParseError::Syntax {
                    pos: i,
                    msg: format!("unexpected character `{}`", src[i..].chars().next().unwrap()),
                })
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [(Tok, usize)],
    pos: usize,
    arena: &'a mut Arena,
    table: &'a SymbolTable,
    src_len: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<(&Tok, usize)> {
        self.tokens.get(self.pos).map(|(t, at)| (t, *at))
    }

    fn bump(&mut self) -> Option<(Tok, usize)> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn here(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(_, at)| *at)
            .unwrap_or(self.src_len)
    }

    fn expr(&mut self) -> Result<ExprId, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some((Tok::Plus, _)) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = self.arena.add(lhs, rhs)?;
                }
                Some((Tok::Minus, _)) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = self.arena.sub(lhs, rhs)?;
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<ExprId, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some((Tok::Star, _)) => {
                    self.bump();
                    let rhs = self.factor()?;
                    lhs = self.arena.mul(lhs, rhs)?;
                }
                Some((Tok::Slash, _)) => {
                    self.bump();
                    let rhs = self.factor()?;
                    lhs = self.arena.div(lhs, rhs)?;
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<ExprId, ParseError> {
        if let Some((Tok::Minus, _)) = self.peek() {
            self.bump();
            let inner = self.factor()?;
            return Ok(self.arena.neg(inner)?);
        }
        self.power()
    }

    fn power(&mut self) -> Result<ExprId, ParseError> {
        let base = self.atom()?;
        if let Some((Tok::Caret, _)) = self.peek() {
            self.bump();
            let at = self.here();
            match self.bump() {
                Some((Tok::Num(v), _)) if v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v) => {
                    return Ok(self.arena.powint(base, v as u32)?);
                }
                _ => {
                    return Err(ParseError::Syntax {
                        pos: at,
                        msg: "expected non-negative integer exponent after `^`".to_string(),
                    })
                }
            }
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<ExprId, ParseError> {
        let at = self.here();
        match self.bump() {
            Some((Tok::Num(v), _)) => Ok(self.arena.constant(v)?),
            Some((Tok::LParen, _)) => {
                let e = self.expr()?;
                match self.bump() {
                    Some((Tok::RParen, _)) => Ok(e),
                    _ => Err(ParseError::Syntax {
                        pos: self.here(),
                        msg: "expected `)`".to_string(),
                    }),
                }
            }
            Some((Tok::Ident(name), pos)) => {
                let is_call = matches!(self.peek(), Some((Tok::LParen, _)));
                if is_call {
                    let func: Option<fn(&mut Arena, ExprId) -> Result<ExprId, BudgetError>> =
                        match name.as_str() {
                            "sin" => Some(Arena::sin),
                            "cos" => Some(Arena::cos),
                            "exp" => Some(Arena::exp),
                            "tanh" => Some(Arena::tanh),
                            _ => None,
                        };
                    let Some(func) = func else {
                        return Err(ParseError::UnknownSymbol { name, pos });
                    };
                    self.bump(); // consume `(`
                    let arg = self.expr()?;
                    match self.bump() {
                        Some((Tok::RParen, _)) => Ok(func(self.arena, arg)?),
                        _ => Err(ParseError::Syntax {
                            pos: self.here(),
                            msg: "expected `)` to close call".to_string(),
                        }),
                    }
                } else {
                    match self.table.lookup(&name) {
                        Some(v) => Ok(self.arena.var(v)?),
                        None => Err(ParseError::UnknownSymbol { name, pos }),
                    }
                }
            }
            _ => Err(ParseError::Syntax {
                pos: at,
                msg: "expected a number, name, or `(`".to_string(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interning_dedupes_structurally_equal_subtrees() {
        let mut a = Arena::default();
        let table = SymbolTable::full(2, 1);
        let e1 = a.parse("x1 + sin(t)", &table).unwrap();
        let e2 = a.parse("x1 + sin(t)", &table).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn unary_minus_binds_looser_than_power() {
        let mut a = Arena::default();
        let table = SymbolTable::full(1, 1);
        let e = a.parse("-x1^2", &table).unwrap();
        match a.node(e) {
            Node::Neg(inner) => assert!(matches!(a.node(inner), Node::PowInt(_, 2))),
            other => panic!("expected Neg(PowInt), got {other:?}"),
        }
    }

    #[test]
    fn chained_power_is_rejected() {
        let mut a = Arena::default();
        let table = SymbolTable::full(1, 1);
        assert!(matches!(
            a.parse("x1^2^3", &table),
            Err(ParseError::Syntax { .. })
        ));
    }
}
