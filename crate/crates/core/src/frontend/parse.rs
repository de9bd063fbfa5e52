//! Line-oriented cascade description format.
//!
//! ```text
//! tensor A : M(4), K(3)
//! rank I(8) generational step=1 stop=8
//! einsum 1: Z[m,n] += A[m,k] * B[k,n]
//! init: Z[0] = A[0] * B
//! ```
//!
//! Two extension lines carry what shared-input merging and input synthesis
//! need: `derive W = concat(A(4), B(4)) axis=1` and `input A uniform(-1, 0)` /
//! `input H0 const(0)`.

use crate::error::{Error, ParseDiagnostic, Result};
use crate::ir::{
    ensure_valid, Access, BinOp, Cascade, DerivedInput, EinsumDecl, Expr, Fill, IndexExpr,
    InitClause, InputHint, RankDecl, RankKind, TensorDecl, UnaryOp,
};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64, Option<i64>),
    Sym(&'static str),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    col: usize,
}

const SYMBOLS: [&str; 12] = ["+=", "[", "]", "(", ")", ",", ":", "=", "+", "-", "*", "/"];

fn lex(line: &str, lineno: usize) -> std::result::Result<Vec<Token>, ParseDiagnostic> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c == '#' {
            break;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                col,
            });
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()))
        {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let value: f64 = text.parse().map_err(|_| ParseDiagnostic {
                line: lineno,
                column: col,
                message: format!("malformed number `{text}`"),
            })?;
            let int = if text.chars().all(|ch| ch.is_ascii_digit()) {
                text.parse::<i64>().ok()
            } else {
                None
            };
            out.push(Token {
                tok: Tok::Num(value, int),
                col,
            });
            continue;
        }
        let rest: String = chars[i..].iter().take(2).collect();
        match SYMBOLS.iter().find(|s| rest.starts_with(**s)) {
            Some(s) => {
                out.push(Token {
                    tok: Tok::Sym(s),
                    col,
                });
                i += s.len();
            }
            None => {
                return Err(ParseDiagnostic {
                    line: lineno,
                    column: col,
                    message: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    toks: &'a [Token],
    pos: usize,
    line: usize,
    end_col: usize,
}

type PResult<T> = std::result::Result<T, ParseDiagnostic>;

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn col(&self) -> usize {
        self.toks
            .get(self.pos)
            .map(|t| t.col)
            .unwrap_or(self.end_col)
    }

    fn err<T>(&self, message: impl Into<String>) -> PResult<T> {
        Err(ParseDiagnostic {
            line: self.line,
            column: self.col(),
            message: message.into(),
        })
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.tok.clone());
        self.pos += 1;
        t
    }

    fn eat(&mut self, sym: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(s)) if *s == sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, sym: &str) -> PResult<()> {
        if self.eat(sym) {
            Ok(())
        } else {
            self.err(format!("expected `{sym}`"))
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.err("expected a name"),
        }
    }

    fn keyword(&mut self, kw: &str) -> PResult<()> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == kw => {
                self.pos += 1;
                Ok(())
            }
            _ => self.err(format!("expected `{kw}`")),
        }
    }

    fn integer(&mut self) -> PResult<i64> {
        match self.peek() {
            Some(Tok::Num(_, Some(v))) => {
                let v = *v;
                self.pos += 1;
                Ok(v)
            }
            _ => self.err("expected an integer"),
        }
    }

    fn signed_number(&mut self) -> PResult<f64> {
        let neg = self.eat("-");
        match self.peek() {
            Some(Tok::Num(v, _)) => {
                let v = *v;
                self.pos += 1;
                Ok(if neg { -v } else { v })
            }
            _ => self.err("expected a number"),
        }
    }

    fn done(&self) -> PResult<()> {
        if self.pos < self.toks.len() {
            self.err("unexpected trailing input")
        } else {
            Ok(())
        }
    }
}

#[derive(Default)]
struct Builder {
    cascade: Cascade,
}

impl Builder {
    fn declare_rank(&mut self, name: &str, extent: Option<usize>, cur: &Cursor) -> PResult<()> {
        if let Some(r) = self.cascade.ranks.iter_mut().find(|r| r.name == name) {
            if let Some(e) = extent {
                if r.shape != e {
                    return cur.err(format!(
                        "rank {name} redeclared with extent {e} (was {})",
                        r.shape
                    ));
                }
            }
            return Ok(());
        }
        if self
            .cascade
            .ranks
            .iter()
            .any(|r| r.name.eq_ignore_ascii_case(name))
        {
            return cur.err(format!(
                "rank {name} differs from an existing rank only by case"
            ));
        }
        match extent {
            Some(e) => {
                self.cascade.ranks.push(RankDecl::spatial(name, e));
                Ok(())
            }
            None => cur.err(format!("rank {name} needs an extent on first use")),
        }
    }

    fn resolve_var(&self, v: &str, cur: &Cursor) -> PResult<String> {
        match self
            .cascade
            .ranks
            .iter()
            .find(|r| r.name.eq_ignore_ascii_case(v))
        {
            Some(r) => Ok(r.name.clone()),
            None => cur.err(format!("undeclared rank variable `{v}`")),
        }
    }

    fn line(&mut self, toks: &[Token], lineno: usize, end_col: usize) -> PResult<()> {
        let mut cur = Cursor {
            toks,
            pos: 0,
            line: lineno,
            end_col,
        };
        let head = cur.ident()?;
        match head.as_str() {
            "tensor" => self.tensor_line(&mut cur),
            "rank" => self.rank_line(&mut cur),
            "einsum" => self.einsum_line(&mut cur),
            "init" => self.init_line(&mut cur),
            "derive" => self.derive_line(&mut cur),
            "input" => self.input_line(&mut cur),
            other => {
                cur.pos = 0;
                cur.err(format!("unknown statement `{other}`"))
            }
        }
    }

    fn tensor_line(&mut self, cur: &mut Cursor) -> PResult<()> {
        let name = cur.ident()?;
        cur.expect(":")?;
        let mut ranks = Vec::new();
        if cur.peek().is_some() {
            loop {
                let r = cur.ident()?;
                let extent = if cur.eat("(") {
                    let e = cur.integer()?;
                    cur.expect(")")?;
                    if e < 1 {
                        return cur.err(format!("rank {r} extent must be at least 1"));
                    }
                    Some(e as usize)
                } else {
                    None
                };
                self.declare_rank(&r, extent, cur)?;
                ranks.push(r);
                if !cur.eat(",") {
                    break;
                }
            }
        }
        cur.done()?;
        if self.cascade.tensor(&name).is_some() {
            return cur.err(format!("tensor {name} declared twice"));
        }
        self.cascade.tensors.push(TensorDecl { name, ranks });
        Ok(())
    }

    fn rank_line(&mut self, cur: &mut Cursor) -> PResult<()> {
        let name = cur.ident()?;
        let extent = if cur.eat("(") {
            let e = cur.integer()?;
            cur.expect(")")?;
            if e < 1 {
                return cur.err("extent must be at least 1");
            }
            Some(e as usize)
        } else {
            None
        };
        if cur.peek().is_none() {
            self.declare_rank(&name, extent, cur)?;
            return Ok(());
        }
        cur.keyword("generational")?;
        let (mut step, mut stop) = (None, None);
        while cur.peek().is_some() {
            let key = cur.ident()?;
            cur.expect("=")?;
            let v = cur.integer()?;
            if v < 1 {
                return cur.err(format!("{key} must be at least 1"));
            }
            match key.as_str() {
                "step" => step = Some(v as usize),
                "stop" => stop = Some(v as usize),
                _ => return cur.err(format!("unknown generational attribute `{key}`")),
            }
        }
        let (Some(step), Some(stop)) = (step, stop) else {
            return cur.err("generational rank needs both step= and stop=");
        };
        let known = self.cascade.ranks.iter().any(|r| r.name == name);
        if !known {
            self.declare_rank(&name, Some(extent.unwrap_or(stop)), cur)?;
        } else if let Some(e) = extent {
            self.declare_rank(&name, Some(e), cur)?;
        }
        let r = self
            .cascade
            .ranks
            .iter_mut()
            .find(|r| r.name == name)
            .expect("declared");
        r.kind = RankKind::Generational { step, stop };
        Ok(())
    }

    fn einsum_line(&mut self, cur: &mut Cursor) -> PResult<()> {
        let id = cur.integer()?;
        if id < 0 || id > u32::MAX as i64 {
            return cur.err("Einsum id out of range");
        }
        let mut merged_from = Vec::new();
        if matches!(cur.peek(), Some(Tok::Ident(k)) if k == "from") {
            cur.pos += 1;
            loop {
                let m = cur.integer()?;
                if m < 0 || m > u32::MAX as i64 {
                    return cur.err("Einsum id out of range");
                }
                merged_from.push(m as u32);
                if !cur.eat("+") {
                    break;
                }
            }
        }
        cur.expect(":")?;
        let output = self.access(cur)?;
        let accumulate = if cur.eat("+=") {
            true
        } else if cur.eat("=") {
            false
        } else {
            return cur.err("expected `=` or `+=`");
        };
        let body = self.expr(cur)?;
        cur.done()?;
        let mut e = EinsumDecl::new(id as u32, output, accumulate, body);
        e.merged_from = merged_from;
        self.cascade.einsums.push(e);
        Ok(())
    }

    fn init_line(&mut self, cur: &mut Cursor) -> PResult<()> {
        cur.expect(":")?;
        let output = self.access(cur)?;
        cur.expect("=")?;
        let body = self.expr(cur)?;
        cur.done()?;
        match self.cascade.einsums.last_mut() {
            Some(e) if e.init.is_none() => {
                e.init = Some(InitClause { output, body });
                Ok(())
            }
            Some(_) => cur.err("Einsum already has an init clause"),
            None => cur.err("init clause before any Einsum"),
        }
    }

    fn derive_line(&mut self, cur: &mut Cursor) -> PResult<()> {
        let name = cur.ident()?;
        cur.expect("=")?;
        cur.keyword("concat")?;
        cur.expect("(")?;
        let mut sources = Vec::new();
        loop {
            let s = cur.ident()?;
            cur.expect("(")?;
            let e = cur.integer()?;
            cur.expect(")")?;
            if e < 1 {
                return cur.err("source extent must be at least 1");
            }
            sources.push((s, e as usize));
            if !cur.eat(",") {
                break;
            }
        }
        cur.expect(")")?;
        cur.keyword("axis")?;
        cur.expect("=")?;
        let axis = cur.integer()?;
        cur.done()?;
        self.cascade.derived.push(DerivedInput {
            name,
            axis: axis.max(0) as usize,
            sources,
        });
        Ok(())
    }

    fn input_line(&mut self, cur: &mut Cursor) -> PResult<()> {
        let tensor = cur.ident()?;
        let kind = cur.ident()?;
        cur.expect("(")?;
        let fill = match kind.as_str() {
            "uniform" => {
                let lo = cur.signed_number()?;
                cur.expect(",")?;
                let hi = cur.signed_number()?;
                Fill::Uniform { lo, hi }
            }
            "const" => Fill::Constant(cur.signed_number()?),
            _ => return cur.err(format!("unknown input fill `{kind}`")),
        };
        cur.expect(")")?;
        cur.done()?;
        self.cascade.hints.push(InputHint { tensor, fill });
        Ok(())
    }

    fn access(&self, cur: &mut Cursor) -> PResult<Access> {
        let tensor = cur.ident()?;
        let mut indices = Vec::new();
        if cur.eat("[") && !cur.eat("]") {
            loop {
                indices.push(self.index(cur)?);
                if cur.eat("]") {
                    break;
                }
                cur.expect(",")?;
            }
        }
        Ok(Access { tensor, indices })
    }

    fn index(&self, cur: &mut Cursor) -> PResult<IndexExpr> {
        let start = cur.col();
        let mut terms: Vec<(i64, Option<String>)> = Vec::new();
        let mut sign = if cur.eat("-") { -1 } else { 1 };
        loop {
            let term = match cur.bump() {
                Some(Tok::Num(_, Some(v))) => {
                    if cur.eat("*") {
                        let v2 = cur.ident()?;
                        (sign * v, Some(self.resolve_var(&v2, cur)?))
                    } else {
                        (sign * v, None)
                    }
                }
                Some(Tok::Ident(v)) => (sign, Some(self.resolve_var(&v, cur)?)),
                _ => {
                    cur.pos -= 1;
                    return cur.err("expected an index term");
                }
            };
            terms.push(term);
            if cur.eat("+") {
                sign = 1;
            } else if cur.eat("-") {
                sign = -1;
            } else {
                break;
            }
        }
        let offset: i64 = terms.iter().filter(|t| t.1.is_none()).map(|t| t.0).sum();
        let vars: Vec<(i64, String)> = terms
            .into_iter()
            .filter_map(|(c, v)| v.map(|v| (c, v)))
            .collect();
        let bad = || ParseDiagnostic {
            line: cur.line,
            column: start,
            message: "unsupported index expression".into(),
        };
        match vars.as_slice() {
            [] => Ok(IndexExpr::constant(offset)),
            [(c, v)] if *c != 0 => Ok(IndexExpr::Affine {
                var: Some(v.clone()),
                coef: *c,
                offset,
            }),
            [(1, a), (-1, b)] if offset == 0 && a != b => Ok(IndexExpr::Window {
                var: a.clone(),
                window: b.clone(),
            }),
            _ => Err(bad()),
        }
    }

    fn expr(&self, cur: &mut Cursor) -> PResult<Expr> {
        let mut lhs = self.term(cur)?;
        loop {
            let op = if cur.eat("+") {
                BinOp::Add
            } else if cur.eat("-") {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term(cur)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn term(&self, cur: &mut Cursor) -> PResult<Expr> {
        let mut lhs = self.unary(cur)?;
        loop {
            let op = if cur.eat("*") {
                BinOp::Mul
            } else if cur.eat("/") {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary(cur)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn unary(&self, cur: &mut Cursor) -> PResult<Expr> {
        if cur.eat("-") {
            if let Some(Tok::Num(v, _)) = cur.peek() {
                let v = *v;
                cur.pos += 1;
                return Ok(Expr::Const(-v));
            }
            return Ok(Expr::unary(UnaryOp::Negate, self.unary(cur)?));
        }
        self.primary(cur)
    }

    fn primary(&self, cur: &mut Cursor) -> PResult<Expr> {
        match cur.peek().cloned() {
            Some(Tok::Num(v, _)) => {
                cur.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Tok::Sym("(")) => {
                cur.pos += 1;
                let e = self.expr(cur)?;
                cur.expect(")")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                if matches!(
                    cur.toks.get(cur.pos + 1).map(|t| &t.tok),
                    Some(Tok::Sym("("))
                ) {
                    let Some(op) = UnaryOp::from_name(&name) else {
                        return cur.err(format!("unknown function `{name}`"));
                    };
                    cur.pos += 2;
                    let e = self.expr(cur)?;
                    cur.expect(")")?;
                    return Ok(Expr::unary(op, e));
                }
                Ok(Expr::Access(self.access(cur)?))
            }
            _ => cur.err("expected an expression"),
        }
    }
}

/// Parses description text into a cascade without semantic validation.
pub fn parse_unchecked(text: &str) -> Result<Cascade> {
    let mut b = Builder::default();
    let mut diags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let toks = match lex(line, lineno) {
            Ok(t) => t,
            Err(d) => {
                diags.push(d);
                continue;
            }
        };
        if toks.is_empty() {
            continue;
        }
        if let Err(d) = b.line(&toks, lineno, line.chars().count() + 1) {
            diags.push(d);
        }
    }
    if !diags.is_empty() {
        return Err(Error::Parse(diags));
    }
    for e in &mut b.cascade.einsums {
        e.derive_reductions();
    }
    Ok(b.cascade)
}

/// Parses and validates description text.
pub fn parse(text: &str) -> Result<Cascade> {
    let c = parse_unchecked(text)?;
    ensure_valid(&c)?;
    Ok(c)
}

/// Serializes a cascade into description text that parses back to an equal cascade.
pub fn to_text(c: &Cascade) -> String {
    let mut s = String::new();
    for r in &c.ranks {
        match r.kind {
            RankKind::Spatial => s.push_str(&format!("rank {}({})\n", r.name, r.shape)),
            RankKind::Generational { step, stop } => s.push_str(&format!(
                "rank {}({}) generational step={step} stop={stop}\n",
                r.name, r.shape
            )),
        }
    }
    for t in &c.tensors {
        let ranks: Vec<String> = t
            .ranks
            .iter()
            .map(|r| format!("{}({})", r, c.rank_shape(r)))
            .collect();
        s.push_str(&format!("tensor {} : {}\n", t.name, ranks.join(", ")));
    }
    for d in &c.derived {
        let src: Vec<String> = d.sources.iter().map(|(n, e)| format!("{n}({e})")).collect();
        s.push_str(&format!(
            "derive {} = concat({}) axis={}\n",
            d.name,
            src.join(", "),
            d.axis
        ));
    }
    for h in &c.hints {
        match h.fill {
            Fill::Uniform { lo, hi } => {
                s.push_str(&format!("input {} uniform({lo}, {hi})\n", h.tensor))
            }
            Fill::Constant(v) => s.push_str(&format!("input {} const({v})\n", h.tensor)),
        }
    }
    for e in &c.einsums {
        let op = if e.accumulate { "+=" } else { "=" };
        let from = if e.merged_from.is_empty() {
            String::new()
        } else {
            let ids: Vec<String> = e.merged_from.iter().map(|i| i.to_string()).collect();
            format!(" from {}", ids.join("+"))
        };
        s.push_str(&format!(
            "einsum {}{from}: {} {op} {}\n",
            e.id,
            e.output.render(),
            e.body.render()
        ));
        if let Some(init) = &e.init {
            s.push_str(&format!(
                "init: {} = {}\n",
                init.output.render(),
                init.body.render()
            ));
        }
    }
    s
}
