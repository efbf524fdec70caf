//! Scalar field expressions: a small parser plus exact derivative evaluation
//! through jet arithmetic.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! expr   := term { ("+"|"-") term }
//! term   := factor { ("*"|"/") factor }
//! factor := "-" factor | power
//! power  := atom [ "^" factor ]
//! atom   := NUMBER | IDENT | IDENT "(" expr { "," expr } ")" | "(" expr ")"
//! ```
//!
//! `^` is right-associative and binds tighter than unary minus, so `-x^2`
//! means `-(x^2)`. Functions: `sin cos tan exp log sqrt sinh cosh tanh
//! pow(a,b)`. The constants `pi` and `e` and every other constant subtree are
//! folded to literals at parse time, which is what lets `x^k` with a
//! substituted integer parameter take the integer-power path (valid for
//! negative bases).

use crate::jet::Jet;
use crate::real::Real;
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Sinh,
    Cosh,
    Tanh,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Sinh => "sinh",
            Func::Cosh => "cosh",
            Func::Tanh => "tanh",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "sinh" => Func::Sinh,
            "cosh" => Func::Cosh,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// Parse failure with the byte position in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseError {
    Syntax { pos: usize, expected: String },
    UnknownIdentifier { pos: usize, name: String },
    Arity { pos: usize, func: String, got: usize, expected: usize },
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseError::Syntax { pos, expected } => {
                write!(f, "syntax error at byte {pos}: expected {expected}")
            }
            ParseError::UnknownIdentifier { pos, name } => {
                write!(f, "unknown identifier `{name}` at byte {pos}")
            }
            ParseError::Arity { pos, func, got, expected } => {
                write!(f, "`{func}` at byte {pos} takes {expected} argument(s), got {got}")
            }
        }
    }
}

impl std::error::Error for ParseError {}

/// Evaluation failure: log/sqrt outside the domain, division by zero, or a
/// fractional power of a nonpositive base. Carries the offending subtree and
/// the evaluation point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainError {
    pub what: String,
    pub subexpression: String,
    pub point: String,
}

impl fmt::Display for DomainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "domain error in `{}` at {}: {}",
            self.subexpression, self.point, self.what
        )
    }
}

impl std::error::Error for DomainError {}

/// A parsed scalar field over named coordinates. Immutable; evaluation is
/// pure, so sharing across threads is safe.
#[derive(Debug, Clone)]
pub struct Expression {
    ast: Node,
    variables: Vec<String>,
    source: String,
}

impl PartialEq for Expression {
    fn eq(&self, other: &Self) -> bool {
        self.ast == other.ast && self.variables == other.variables
    }
}

impl Expression {
    /// Parse `source` over the given coordinate names.
    pub fn parse(source: &str, variables: &[&str]) -> Result<Expression, ParseError> {
        Self::parse_with_params(source, variables, &BTreeMap::new())
    }

    /// Parse after substituting named parameters as numeric literals at the
    /// token level, so the derivative machinery only ever sees coordinates.
    /// A name that is both a coordinate and a parameter stays a coordinate.
    pub fn parse_with_params(
        source: &str,
        variables: &[&str],
        params: &BTreeMap<String, f64>,
    ) -> Result<Expression, ParseError> {
        assert!(!variables.is_empty(), "need at least one coordinate");
        let mut toks = lex(source)?;
        for (tok, _) in toks.iter_mut() {
            if let Tok::Ident(name) = tok {
                let shadowed = variables.iter().any(|v| v == name)
                    || Func::from_name(name).is_some()
                    || name == "pi"
                    || name == "e";
                if !shadowed {
                    if let Some(&v) = params.get(name.as_str()) {
                        *tok = Tok::Num(v);
                    }
                }
            }
        }
        let mut p = Parser { toks: &toks, at: 0, variables, src_len: source.len() };
        let ast = p.expr()?;
        if p.at < p.toks.len() {
            return Err(ParseError::Syntax {
                pos: p.toks[p.at].1,
                expected: "end of input or an operator".into(),
            });
        }
        Ok(Expression {
            ast: fold(ast),
            variables: variables.iter().map(|s| s.to_string()).collect(),
            source: source.to_string(),
        })
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Canonical text form; reparsing it reproduces the same ast.
    pub fn serialized(&self) -> String {
        node_text(&self.ast, &self.variables)
    }

    /// Value and exact partial derivatives up to `order` (at most 3) at
    /// `point`.
    pub fn eval_jet<R: Real>(&self, point: &[R], order: usize) -> Result<Jet<R>, DomainError> {
        assert_eq!(point.len(), self.variables.len(), "point dimension mismatch");
        assert!(order <= 3, "jet order capped at 3");
        eval_node(&self.ast, point, order, &self.variables)
    }
}

// ---------------------------------------------------------------------------
// lexer

#[derive(Debug, Clone, PartialEq)]
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
    Comma,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let b = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => { out.push((Tok::Plus, i)); i += 1 }
            '-' => { out.push((Tok::Minus, i)); i += 1 }
            '*' => { out.push((Tok::Star, i)); i += 1 }
            '/' => { out.push((Tok::Slash, i)); i += 1 }
            '^' => { out.push((Tok::Caret, i)); i += 1 }
            '(' => { out.push((Tok::LParen, i)); i += 1 }
            ')' => { out.push((Tok::RParen, i)); i += 1 }
            ',' => { out.push((Tok::Comma, i)); i += 1 }
            '0'..='9' | '.' => {
                let start = i;
                while i < b.len() && (b[i] as char).is_ascii_digit() {
                    i += 1;
                }
                if i < b.len() && b[i] == b'.' {
                    i += 1;
                    while i < b.len() && (b[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                    let mut j = i + 1;
                    if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
                        j += 1;
                    }
                    if j < b.len() && (b[j] as char).is_ascii_digit() {
                        i = j;
                        while i < b.len() && (b[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    pos: start,
                    expected: "a numeric literal".into(),
                })?;
                out.push((Tok::Num(v), start));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < b.len()
                    && ((b[i] as char).is_ascii_alphanumeric() || b[i] == b'_')
                {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start));
            }
            _ => {
                return Err(ParseError::Syntax {
                    pos: i,
                    expected: format!("a token, found `{c}`"),
                })
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// parser

struct Parser<'a> {
    toks: &'a [(Tok, usize)],
    at: usize,
    variables: &'a [&'a str],
    src_len: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(t, _)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.src_len, |(_, p)| *p)
    }

    fn eat(&mut self, want: &Tok, expected: &str) -> Result<(), ParseError> {
        if self.peek() == Some(want) {
            self.at += 1;
            Ok(())
        } else {
            Err(ParseError::Syntax { pos: self.pos(), expected: expected.into() })
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.at += 1;
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.at += 1;
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.at += 1;
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(Tok::Slash) => {
                    self.at += 1;
                    lhs = Node::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Node, ParseError> {
        if self.peek() == Some(&Tok::Minus) {
            self.at += 1;
            return Ok(Node::Neg(Box::new(self.factor()?)));
        }
        let base = self.atom()?;
        if self.peek() == Some(&Tok::Caret) {
            self.at += 1;
            let exponent = self.factor()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        let pos = self.pos();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.at += 1;
                Ok(Node::Num(v))
            }
            Some(Tok::LParen) => {
                self.at += 1;
                let inner = self.expr()?;
                self.eat(&Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => {
                self.at += 1;
                if self.peek() == Some(&Tok::LParen) {
                    self.at += 1;
                    let mut args = vec![self.expr()?];
                    while self.peek() == Some(&Tok::Comma) {
                        self.at += 1;
                        args.push(self.expr()?);
                    }
                    self.eat(&Tok::RParen, "`)`")?;
                    return self.call(&name, args, pos);
                }
                if let Some(idx) = self.variables.iter().position(|v| *v == name) {
                    return Ok(Node::Var(idx));
                }
                match name.as_str() {
                    "pi" => Ok(Node::Num(std::f64::consts::PI)),
                    "e" => Ok(Node::Num(std::f64::consts::E)),
                    _ if Func::from_name(&name).is_some() || name == "pow" => {
                        Err(ParseError::Syntax {
                            pos: self.pos(),
                            expected: format!("`(` after function `{name}`"),
                        })
                    }
                    _ => Err(ParseError::UnknownIdentifier { pos, name }),
                }
            }
            _ => Err(ParseError::Syntax {
                pos,
                expected: "a number, identifier, or `(`".into(),
            }),
        }
    }

    fn call(&self, name: &str, mut args: Vec<Node>, pos: usize) -> Result<Node, ParseError> {
        if name == "pow" {
            if args.len() != 2 {
                return Err(ParseError::Arity {
                    pos,
                    func: "pow".into(),
                    got: args.len(),
                    expected: 2,
                });
            }
            let b = args.pop().unwrap();
            let a = args.pop().unwrap();
            return Ok(Node::Pow(Box::new(a), Box::new(b)));
        }
        let func = Func::from_name(name)
            .ok_or_else(|| ParseError::UnknownIdentifier { pos, name: name.to_string() })?;
        if args.len() != 1 {
            return Err(ParseError::Arity {
                pos,
                func: name.to_string(),
                got: args.len(),
                expected: 1,
            });
        }
        Ok(Node::Call(func, Box::new(args.pop().unwrap())))
    }
}

// ---------------------------------------------------------------------------
// constant folding

fn fold(node: Node) -> Node {
    let folded = match node {
        Node::Num(_) | Node::Var(_) => node,
        Node::Neg(a) => Node::Neg(Box::new(fold(*a))),
        Node::Add(a, b) => Node::Add(Box::new(fold(*a)), Box::new(fold(*b))),
        Node::Sub(a, b) => Node::Sub(Box::new(fold(*a)), Box::new(fold(*b))),
        Node::Mul(a, b) => Node::Mul(Box::new(fold(*a)), Box::new(fold(*b))),
        Node::Div(a, b) => Node::Div(Box::new(fold(*a)), Box::new(fold(*b))),
        Node::Pow(a, b) => Node::Pow(Box::new(fold(*a)), Box::new(fold(*b))),
        Node::Call(f, a) => Node::Call(f, Box::new(fold(*a))),
    };
    match const_eval(&folded) {
        Some(v) if v.is_finite() => Node::Num(v),
        _ => folded,
    }
}

/// Mirrors `eval_node` on constant subtrees; `None` on any variable, domain
/// failure, or non-finite result so the error surfaces at evaluation time
/// with full context.
fn const_eval(n: &Node) -> Option<f64> {
    let v = match n {
        Node::Num(v) => *v,
        Node::Var(_) => return None,
        Node::Neg(a) => -const_eval(a)?,
        Node::Add(a, b) => const_eval(a)? + const_eval(b)?,
        Node::Sub(a, b) => const_eval(a)? - const_eval(b)?,
        Node::Mul(a, b) => const_eval(a)? * const_eval(b)?,
        Node::Div(a, b) => {
            let d = const_eval(b)?;
            if d == 0.0 {
                return None;
            }
            const_eval(a)? / d
        }
        Node::Pow(a, b) => {
            let base = const_eval(a)?;
            let e = const_eval(b)?;
            if e.fract() == 0.0 && e.abs() <= 9e15 {
                pow_int(base, e as i64)?
            } else if base > 0.0 {
                base.powf(e)
            } else {
                return None;
            }
        }
        Node::Call(f, a) => {
            let x = const_eval(a)?;
            match f {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Tan => x.tan(),
                Func::Exp => x.exp(),
                Func::Log => {
                    if x <= 0.0 {
                        return None;
                    }
                    x.ln()
                }
                Func::Sqrt => {
                    if x < 0.0 {
                        return None;
                    }
                    x.sqrt()
                }
                Func::Sinh => x.sinh(),
                Func::Cosh => x.cosh(),
                Func::Tanh => x.tanh(),
            }
        }
    };
    v.is_finite().then_some(v)
}

fn pow_int(base: f64, e: i64) -> Option<f64> {
    if base == 0.0 && e < 0 {
        return None;
    }
    let mut acc = 1.0f64;
    let mut b = base;
    let mut k = e.unsigned_abs();
    while k > 0 {
        if k & 1 == 1 {
            acc *= b;
        }
        b *= b;
        k >>= 1;
    }
    Some(if e < 0 { 1.0 / acc } else { acc })
}

// ---------------------------------------------------------------------------
// serialization (minimal parentheses; reparsing reproduces the ast)

fn prec(n: &Node) -> u8 {
    match n {
        Node::Add(..) | Node::Sub(..) => 1,
        Node::Mul(..) | Node::Div(..) => 2,
        Node::Neg(..) => 3,
        Node::Pow(..) => 4,
        Node::Num(_) | Node::Var(_) | Node::Call(..) => 5,
    }
}

fn write_node(out: &mut String, n: &Node, ctx: u8, vars: &[String]) {
    let wrap = prec(n) < ctx;
    if wrap {
        out.push('(');
    }
    match n {
        Node::Num(v) => out.push_str(&format!("{v}")),
        Node::Var(i) => out.push_str(&vars[*i]),
        Node::Neg(a) => {
            out.push('-');
            write_node(out, a, 3, vars);
        }
        Node::Add(a, b) => {
            write_node(out, a, 1, vars);
            out.push_str(" + ");
            write_node(out, b, 2, vars);
        }
        Node::Sub(a, b) => {
            write_node(out, a, 1, vars);
            out.push_str(" - ");
            write_node(out, b, 2, vars);
        }
        Node::Mul(a, b) => {
            write_node(out, a, 2, vars);
            out.push('*');
            write_node(out, b, 3, vars);
        }
        Node::Div(a, b) => {
            write_node(out, a, 2, vars);
            out.push('/');
            write_node(out, b, 3, vars);
        }
        Node::Pow(a, b) => {
            write_node(out, a, 5, vars);
            out.push('^');
            write_node(out, b, 3, vars);
        }
        Node::Call(f, a) => {
            out.push_str(f.name());
            out.push('(');
            write_node(out, a, 0, vars);
            out.push(')');
        }
    }
    if wrap {
        out.push(')');
    }
}

// ---------------------------------------------------------------------------
// evaluation

fn eval_node<R: Real>(
    n: &Node,
    pt: &[R],
    order: usize,
    vars: &[String],
) -> Result<Jet<R>, DomainError> {
    let dim = pt.len();
    let ctx = |what: crate::jet::DomainError| DomainError {
        what: what.what,
        subexpression: node_text(n, vars),
        point: point_text(pt),
    };
    match n {
        Node::Num(v) => Ok(Jet::constant(dim, order, R::of(*v))),
        Node::Var(i) => Ok(Jet::coordinate(dim, order, *i, pt[*i])),
        Node::Neg(a) => Ok(eval_node(a, pt, order, vars)?.neg()),
        Node::Add(a, b) => {
            Ok(eval_node(a, pt, order, vars)?.add(&eval_node(b, pt, order, vars)?))
        }
        Node::Sub(a, b) => {
            Ok(eval_node(a, pt, order, vars)?.sub(&eval_node(b, pt, order, vars)?))
        }
        Node::Mul(a, b) => {
            Ok(eval_node(a, pt, order, vars)?.mul(&eval_node(b, pt, order, vars)?))
        }
        Node::Div(a, b) => eval_node(a, pt, order, vars)?
            .div(&eval_node(b, pt, order, vars)?)
            .map_err(ctx),
        Node::Pow(a, b) => {
            let base = eval_node(a, pt, order, vars)?;
            if let Node::Num(k) = **b {
                if k.fract() == 0.0 && k.abs() <= 9e15 {
                    return base.powi(k as i64).map_err(ctx);
                }
                return base.powf(R::of(k)).map_err(ctx);
            }
            let exponent = eval_node(b, pt, order, vars)?;
            let lg = base.ln().map_err(ctx)?;
            Ok(exponent.mul(&lg).exp())
        }
        Node::Call(f, a) => {
            let x = eval_node(a, pt, order, vars)?;
            match f {
                Func::Sin => Ok(x.sin()),
                Func::Cos => Ok(x.cos()),
                Func::Tan => Ok(x.tan()),
                Func::Exp => Ok(x.exp()),
                Func::Log => x.ln().map_err(ctx),
                Func::Sqrt => x.sqrt().map_err(ctx),
                Func::Sinh => Ok(x.sinh()),
                Func::Cosh => Ok(x.cosh()),
                Func::Tanh => Ok(x.tanh()),
            }
        }
    }
}

fn node_text(n: &Node, vars: &[String]) -> String {
    let mut s = String::new();
    write_node(&mut s, n, 0, vars);
    s
}

fn point_text<R: Real>(pt: &[R]) -> String {
    let coords: Vec<String> = pt.iter().map(|x| format!("{x}")).collect();
    format!("({})", coords.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unary_minus_binds_below_power() {
        let e = Expression::parse("-x^2", &["x"]).unwrap();
        let j = e.eval_jet(&[3.0f64], 0).unwrap();
        assert_eq!(j.value(), -9.0);
    }

    #[test]
    fn power_is_right_associative() {
        let e = Expression::parse("2^3^2", &["x"]).unwrap();
        let j = e.eval_jet(&[0.0f64], 0).unwrap();
        assert_eq!(j.value(), 512.0);
    }

    #[test]
    fn undeclared_name_is_rejected() {
        let err = Expression::parse("x^k", &["x"]).unwrap_err();
        assert!(matches!(err, ParseError::UnknownIdentifier { ref name, .. } if name == "k"));
    }

    #[test]
    fn params_substitute_before_parsing() {
        let mut params = BTreeMap::new();
        params.insert("k".to_string(), 2.0);
        let e = Expression::parse_with_params("x^k", &["x"], &params).unwrap();
        // integer power path: valid for negative bases
        let j = e.eval_jet(&[-3.0f64], 1).unwrap();
        assert_eq!(j.value(), 9.0);
        assert_eq!(j.d1(0), -6.0);
    }

    #[test]
    fn division_by_zero_reports_subexpression() {
        let e = Expression::parse("1/(x - 1)", &["x"]).unwrap();
        let err = e.eval_jet(&[1.0f64], 0).unwrap_err();
        assert!(err.subexpression.contains("x - 1"), "{}", err.subexpression);
    }

    #[test]
    fn serialization_round_trips() {
        for src in [
            "-x^2 + 3*(y - 1)/y",
            "sin(x)^2 + 2*y",
            "pow(x, 3) - e^x",
            "x^-2*y",
            "-(x*y) - -x",
            "2*pi*x",
        ] {
            let e1 = Expression::parse(src, &["x", "y"]).unwrap();
            let e2 = Expression::parse(&e1.serialized(), &["x", "y"]).unwrap();
            assert_eq!(e1, e2, "round trip failed for `{src}` -> `{}`", e1.serialized());
        }
    }
}
