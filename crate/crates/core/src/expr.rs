//! A small arithmetic-expression language in one variable `x`.
//!
//! Grammar (usual precedence, `^` right-associative and binding tighter than
//! unary minus, so `-x^2` is `-(x^2)`):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | 'x' | func '(' expr ')' | '(' expr ')'
//! func  := sin | cos | exp | tanh | abs
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::num::{lit, Real};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("`{name}` at byte {offset} takes {expected} argument(s), got {found}")]
    Arity {
        name: String,
        offset: usize,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("expression evaluated to a non-finite value at x = {x}")]
pub struct EvalError {
    pub x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
        }
    }

    #[inline]
    fn apply<T: Real>(self, v: T) -> T {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
            Func::Tanh => v.tanh(),
            Func::Abs => v.abs(),
        }
    }
}

/// Expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    X,
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    #[inline]
    pub fn eval<T: Real>(&self, x: T) -> T {
        match self {
            Expr::Num(v) => lit(*v),
            Expr::X => x,
            Expr::Neg(e) => -e.eval(x),
            Expr::Call(f, e) => f.apply(e.eval(x)),
            Expr::Bin(op, l, r) => {
                let a = l.eval(x);
                match op {
                    BinOp::Add => a + r.eval(x),
                    BinOp::Sub => a - r.eval(x),
                    BinOp::Mul => a * r.eval(x),
                    BinOp::Div => a / r.eval(x),
                    BinOp::Pow => match **r {
                        Expr::Num(n) if n.fract() == 0.0 && n.abs() <= 64.0 => a.powi(n as i32),
                        _ => a.powf(r.eval(x)),
                    },
                }
            }
        }
    }

    /// True when the tree does not reference `x`.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Num(_) => true,
            Expr::X => false,
            Expr::Neg(e) | Expr::Call(_, e) => e.is_constant(),
            Expr::Bin(_, l, r) => l.is_constant() && r.is_constant(),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Bin(BinOp::Pow, ..) => 4,
            Expr::Num(_) | Expr::X | Expr::Call(..) => 5,
        }
    }

    fn write_at(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        if self.precedence() < min_prec {
            f.write_str("(")?;
            self.write_at(f, 0)?;
            return f.write_str(")");
        }
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::X => f.write_str("x"),
            Expr::Neg(e) => {
                f.write_str("-")?;
                e.write_at(f, 3)
            }
            Expr::Call(func, e) => {
                write!(f, "{}(", func.name())?;
                e.write_at(f, 0)?;
                f.write_str(")")
            }
            Expr::Bin(op, l, r) => {
                let (sym, lp, rp) = match op {
                    BinOp::Add => (" + ", 1, 2),
                    BinOp::Sub => (" - ", 1, 2),
                    BinOp::Mul => ("*", 2, 3),
                    BinOp::Div => ("/", 2, 3),
                    BinOp::Pow => ("^", 5, 3),
                };
                l.write_at(f, lp)?;
                f.write_str(sym)?;
                r.write_at(f, rp)
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_at(f, 0)
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
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            // optional exponent, only if followed by a digit (with optional sign)
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
            let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                offset: start,
                message: format!("malformed number `{text}`"),
            })?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                _ => {
                    return Err(ParseError::Syntax {
                        offset: start,
                        message: format!("unexpected character `{c}`"),
                    })
                }
            };
            i += c.len_utf8();
            out.push((tok, start));
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(_, o)| *o)
    }

    fn syntax<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.syntax(format!("expected {what}"))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if name == "x" {
                    return Ok(Expr::X);
                }
                let func = Func::from_name(&name)
                    .ok_or_else(|| ParseError::UnknownIdentifier { name: name.clone(), offset })?;
                self.expect(Tok::LParen, &format!("`(` after `{name}`"))?;
                let mut args = vec![self.expr()?];
                while self.peek() == Some(&Tok::Comma) {
                    self.pos += 1;
                    args.push(self.expr()?);
                }
                self.expect(Tok::RParen, "`)`")?;
                if args.len() != 1 {
                    return Err(ParseError::Arity {
                        name,
                        offset,
                        expected: 1,
                        found: args.len(),
                    });
                }
                Ok(Expr::Call(func, Box::new(args.pop().unwrap())))
            }
            Some(_) => self.syntax("expected a number, `x`, a function call or `(`"),
            None => self.syntax("unexpected end of input"),
        }
    }
}

/// Parses `text` into an expression tree.
pub fn parse_expr(text: &str) -> Result<Expr, ParseError> {
    let toks = tokenize(text)?;
    if toks.is_empty() {
        return Err(ParseError::Syntax {
            offset: 0,
            message: "empty expression".into(),
        });
    }
    let mut p = Parser {
        toks,
        pos: 0,
        end: text.len(),
    };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return p.syntax("unexpected trailing input");
    }
    Ok(e)
}

/// A parsed scalar function of `x`, used for the drift and diffusion coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarFunction {
    expr: Expr,
}

impl ScalarFunction {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        Ok(Self {
            expr: parse_expr(text)?,
        })
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    #[inline]
    pub fn eval<T: Real>(&self, x: T) -> T {
        self.expr.eval(x)
    }

    /// Evaluates and rejects non-finite results.
    pub fn try_eval<T: Real>(&self, x: T) -> Result<T, EvalError> {
        let v = self.expr.eval(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError {
                x: crate::num::to_f64(x),
            })
        }
    }

    /// Central difference `(f(x+h) - f(x-h)) / 2h`.
    #[inline]
    pub fn derivative<T: Real>(&self, x: T, h: T) -> T {
        (self.eval(x + h) - self.eval(x - h)) / (h + h)
    }

    pub fn is_constant(&self) -> bool {
        self.expr.is_constant()
    }
}

impl fmt::Display for ScalarFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.expr.fmt(f)
    }
}

impl FromStr for ScalarFunction {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for ScalarFunction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScalarFunction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Self::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn eval(src: &str, x: f64) -> f64 {
        ScalarFunction::parse(src).unwrap().eval(x)
    }

    #[test]
    fn evaluates_examples() {
        assert_abs_diff_eq!(eval("x + x^3", 0.5), 0.625, epsilon = 1e-15);
        assert_eq!(eval("1", -3.7), 1.0);
        assert_abs_diff_eq!(eval("x*exp(-x^2)", 1.0), 0.3678794412, epsilon = 1e-10);
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval("-x^2", 3.0), -9.0);
        assert_eq!(eval("2^3^2", 0.0), 512.0);
        assert_eq!(eval("2^-1", 0.0), 0.5);
        assert_eq!(eval("8/4/2", 0.0), 1.0);
        assert_eq!(eval("1 - 2 - 3", 0.0), -4.0);
        assert_eq!(eval("--x", 2.0), 2.0);
        assert_eq!(eval("2*-x", 2.0), -4.0);
        assert_eq!(eval("(1+x)*(1-x)", 0.5), 0.75);
        assert_eq!(eval("1e-3*x", 2.0), 0.002);
        assert_abs_diff_eq!(eval("abs(sin(x)) + cos(0) - tanh(0)", -1.0), 1.0f64.sin() + 1.0);
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match parse_expr("x + * 2") {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        match parse_expr("(x + 1") {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_expr(""), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse_expr("x $ 1"), Err(ParseError::Syntax { offset: 2, .. })));
        assert!(matches!(parse_expr("x x"), Err(ParseError::Syntax { .. })));
    }

    #[test]
    fn unknown_identifier_and_arity() {
        assert_eq!(
            parse_expr("1 + y"),
            Err(ParseError::UnknownIdentifier {
                name: "y".into(),
                offset: 4
            })
        );
        assert!(matches!(parse_expr("log(x)"), Err(ParseError::UnknownIdentifier { .. })));
        assert!(matches!(
            parse_expr("sin(x, 2)"),
            Err(ParseError::Arity { expected: 1, found: 2, .. })
        ));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let f = ScalarFunction::parse("1/x").unwrap();
        assert!(f.try_eval(0.0f64).is_err());
        assert_eq!(f.try_eval(2.0f64).unwrap(), 0.5);
    }

    #[test]
    fn evaluates_in_single_precision() {
        let f = ScalarFunction::parse("x + x^3").unwrap();
        assert!((f.eval(0.5f32) - 0.625).abs() < 1e-6);
    }

    #[test]
    fn serde_uses_the_textual_form() {
        let f: ScalarFunction = serde_json::from_str("\"1 + 0.5*tanh(x)\"").unwrap();
        assert_eq!(serde_json::to_string(&f).unwrap(), "\"1 + 0.5*tanh(x)\"");
        assert!(serde_json::from_str::<ScalarFunction>("\"1 +\"").is_err());
    }
}
