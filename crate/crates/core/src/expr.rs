//! A tiny arithmetic expression language for coefficient fields, test
//! functions and 1-forms given in configuration files.
//!
//! Grammar (recursive descent, one token of lookahead):
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?          // right associative
//! primary := number | constant | variable | function '(' sum ')' | '(' sum ')'
//! ```
//!
//! `^` binds tighter than unary minus, so `-x1^2` is `-(x1^2)`. Variables are
//! `x1, x2, ...` (1-based). Constants: `pi`, `e`. Functions: `sin cos tan exp
//! log sqrt abs tanh`.

use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: expected {}, found {found}", expected.join(" or "))]
    Syntax { offset: usize, expected: Vec<&'static str>, found: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("`{name}` at byte {offset} takes {expected} argument(s), got {got}")]
    Arity { name: String, offset: usize, expected: usize, got: usize },
    #[error("domain error: {func}({value})")]
    Domain { func: &'static str, value: f64 },
    #[error("variable x{index} is out of range for a point of dimension {dim}")]
    VariableOutOfRange { index: usize, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
}

impl Func {
    pub const ALL: [Func; 8] = [Func::Sin, Func::Cos, Func::Tan, Func::Exp, Func::Log, Func::Sqrt, Func::Abs, Func::Tanh];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == s)
    }

    fn apply(self, a: f64) -> Result<f64, ExprError> {
        Ok(match self {
            Func::Sin => a.sin(),
            Func::Cos => a.cos(),
            Func::Tan => a.tan(),
            Func::Exp => a.exp(),
            Func::Log => {
                if a <= 0.0 {
                    return Err(ExprError::Domain { func: "log", value: a });
                }
                a.ln()
            }
            Func::Sqrt => {
                if a < 0.0 {
                    return Err(ExprError::Domain { func: "sqrt", value: a });
                }
                a.sqrt()
            }
            Func::Abs => a.abs(),
            Func::Tanh => a.tanh(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constant {
    Pi,
    E,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Const(Constant),
    /// Zero-based index; printed as `x{index + 1}`.
    Var(usize),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr, ExprError> {
        let tokens = lex(source)?;
        let mut p = Parser { tokens, pos: 0 };
        let e = p.sum()?;
        p.expect_end()?;
        Ok(e)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, ExprError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Const(Constant::Pi) => Ok(std::f64::consts::PI),
            Expr::Const(Constant::E) => Ok(std::f64::consts::E),
            Expr::Var(i) => x.get(*i).copied().ok_or(ExprError::VariableOutOfRange { index: i + 1, dim: x.len() }),
            Expr::Neg(a) => Ok(-a.eval(x)?),
            Expr::Call(f, a) => f.apply(a.eval(x)?),
            Expr::Binary(op, a, b) => {
                let (a, b) = (a.eval(x)?, b.eval(x)?);
                Ok(match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(ExprError::Domain { func: "/", value: b });
                        }
                        a / b
                    }
                    BinOp::Pow => a.powf(b),
                })
            }
        }
    }

    /// Highest 1-based variable index used, 0 if the expression is constant.
    pub fn max_var(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::Const(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Neg(a) | Expr::Call(_, a) => a.max_var(),
            Expr::Binary(_, a, b) => a.max_var().max(b.max_var()),
        }
    }

    /// True when the expression is a literal zero (used to skip work).
    pub fn is_zero_literal(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }
}

/// Canonical form: binary operations and negations are fully parenthesized,
/// so printing and re-parsing gives back the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Const(Constant::Pi) => write!(f, "pi"),
            Expr::Const(Constant::E) => write!(f, "e"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Op(c) => format!("`{c}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == b'.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                offset: start,
                expected: vec!["number"],
                found: format!("`{text}`"),
            })?;
            out.push((Tok::Num(v), start));
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start));
            continue;
        }
        let tok = match c {
            b'+' | b'-' | b'*' | b'/' | b'^' => Tok::Op(c as char),
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            _ => {
                let ch = src[start..].chars().next().unwrap_or('?');
                return Err(ExprError::Syntax {
                    offset: start,
                    expected: vec!["number", "identifier", "operator", "parenthesis"],
                    found: format!("`{ch}`"),
                });
            }
        };
        out.push((tok, start));
        i += 1;
    }
    out.push((Tok::End, src.len()));
    Ok(out)
}

struct Parser {
    tokens: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].0
    }

    fn offset(&self) -> usize {
        self.tokens[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: Vec<&'static str>) -> ExprError {
        ExprError::Syntax { offset: self.offset(), expected, found: self.peek().describe() }
    }

    fn expect_end(&self) -> Result<(), ExprError> {
        match self.peek() {
            Tok::End => Ok(()),
            _ => Err(self.error(vec!["operator", "end of input"])),
        }
    }

    fn sum(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.product()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn product(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if let Tok::Op('-') = self.peek() {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if let Tok::Op('^') = self.peek() {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let offset = self.offset();
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.sum()?;
                self.close_paren()?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                self.identifier(name, offset)
            }
            _ => Err(self.error(vec!["number", "identifier", "`(`", "`-`"])),
        }
    }

    fn close_paren(&mut self) -> Result<(), ExprError> {
        match self.peek() {
            Tok::RParen => {
                self.bump();
                Ok(())
            }
            _ => Err(self.error(vec!["`)`", "operator"])),
        }
    }

    fn identifier(&mut self, name: String, offset: usize) -> Result<Expr, ExprError> {
        match name.as_str() {
            "pi" => return Ok(Expr::Const(Constant::Pi)),
            "e" => return Ok(Expr::Const(Constant::E)),
            _ => {}
        }
        if let Some(func) = Func::from_name(&name) {
            if *self.peek() != Tok::LParen {
                return Err(ExprError::Arity { name, offset, expected: 1, got: 0 });
            }
            self.bump();
            if *self.peek() == Tok::RParen {
                return Err(ExprError::Arity { name, offset, expected: 1, got: 0 });
            }
            let arg = self.sum()?;
            let mut extra = 0;
            while *self.peek() == Tok::Comma {
                self.bump();
                self.sum()?;
                extra += 1;
            }
            if extra > 0 {
                return Err(ExprError::Arity { name, offset, expected: 1, got: 1 + extra });
            }
            self.close_paren()?;
            return Ok(Expr::Call(func, Box::new(arg)));
        }
        if let Some(digits) = name.strip_prefix('x') {
            if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) && !digits.starts_with('0') {
                if let Ok(index) = digits.parse::<usize>() {
                    return Ok(Expr::Var(index - 1));
                }
            }
        }
        Err(ExprError::UnknownIdentifier { name, offset })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(s: &str, x: &[f64]) -> f64 {
        Expr::parse(s).unwrap().eval(x).unwrap()
    }

    #[test]
    fn spec_examples() {
        assert_eq!(ev("x1 + 2*x2", &[1.0, 3.0]), 7.0);
        assert_eq!(ev("-x1^2", &[2.0]), -4.0);
        assert!((ev("sin(pi/2)", &[]) - 1.0).abs() < 1e-15);
        assert_eq!(ev("x1*x2", &[3.0, 4.0]), 12.0);
        assert_eq!(ev("exp(0)", &[]), 1.0);
        assert!(matches!(Expr::parse("sqrt(-1)").unwrap().eval(&[]), Err(ExprError::Domain { func: "sqrt", .. })));
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("2^3^2", &[]), 512.0);
        assert_eq!(ev("2^-1", &[]), 0.5);
        assert_eq!(ev("8/4/2", &[]), 1.0);
        assert_eq!(ev("1-2-3", &[]), -4.0);
        assert_eq!(ev("-2*3", &[]), -6.0);
        assert_eq!(ev("--2", &[]), 2.0);
        assert_eq!(ev(" ( 1 + 2 ) * 3 ", &[]), 9.0);
        assert_eq!(ev("1.5e2 + .5", &[]), 150.5);
        assert!((ev("e", &[]) - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(Expr::parse("log(0)").unwrap().eval(&[]), Err(ExprError::Domain { func: "log", .. })));
        assert!(matches!(Expr::parse("1/(x1-1)").unwrap().eval(&[1.0]), Err(ExprError::Domain { func: "/", .. })));
        assert!(matches!(Expr::parse("x3").unwrap().eval(&[1.0]), Err(ExprError::VariableOutOfRange { index: 3, dim: 1 })));
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match Expr::parse("1 + * 2") {
            Err(ExprError::Syntax { offset, expected, .. }) => {
                assert_eq!(offset, 4);
                assert!(expected.contains(&"number"));
            }
            other => panic!("unexpected {other:?}"),
        }
        match Expr::parse("(1 + 2") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Expr::parse("2 x1"), Err(ExprError::Syntax { offset: 2, .. })));
        assert!(matches!(Expr::parse("1 $ 2"), Err(ExprError::Syntax { offset: 2, .. })));
    }

    #[test]
    fn identifier_and_arity_errors() {
        assert!(matches!(Expr::parse("y1 + 1"), Err(ExprError::UnknownIdentifier { offset: 0, .. })));
        assert!(matches!(Expr::parse("x0"), Err(ExprError::UnknownIdentifier { .. })));
        assert!(matches!(Expr::parse("foo(1)"), Err(ExprError::UnknownIdentifier { .. })));
        assert!(matches!(Expr::parse("sin(1, 2)"), Err(ExprError::Arity { expected: 1, got: 2, .. })));
        assert!(matches!(Expr::parse("sin + 1"), Err(ExprError::Arity { got: 0, .. })));
        assert!(matches!(Expr::parse("cos()"), Err(ExprError::Arity { got: 0, .. })));
    }

    #[test]
    fn max_var() {
        assert_eq!(Expr::parse("x1 + x12*x3").unwrap().max_var(), 12);
        assert_eq!(Expr::parse("pi").unwrap().max_var(), 0);
    }

    fn expr_strategy() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..1e6).prop_map(Expr::Num),
            (0usize..4).prop_map(Expr::Var),
            Just(Expr::Const(Constant::Pi)),
            Just(Expr::Const(Constant::E)),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (
                    prop_oneof![Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul), Just(BinOp::Div), Just(BinOp::Pow)],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Expr::Binary(op, Box::new(a), Box::new(b))),
                (0usize..Func::ALL.len(), inner).prop_map(|(i, a)| Expr::Call(Func::ALL[i], Box::new(a))),
            ]
        })
    }

    proptest! {
        #[test]
        fn printed_form_reparses_to_same_tree(e in expr_strategy()) {
            let printed = e.to_string();
            let back = Expr::parse(&printed).unwrap();
            prop_assert_eq!(&back, &e);
            prop_assert_eq!(Expr::parse(&back.to_string()).unwrap(), back);
        }

        #[test]
        fn eval_is_bitwise_deterministic(e in expr_strategy(), x in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let a = e.eval(&x);
            let b = e.eval(&x);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                (Err(a), Err(b)) => prop_assert_eq!(a, b),
                _ => prop_assert!(false),
            }
        }
    }
}
