//! Exact arithmetic over decimal literals.
//!
//! Grammar (standard precedence, left associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | '+' unary | atom
//! atom   := number | '(' expr ')'
//! ```
//!
//! `×`/`x` between operands, `÷` and the unicode minus are accepted as
//! operator spellings. Values are kept as big rationals so `(10-4)/3` is
//! exactly 2.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("division by zero")]
    DivisionByZero,
}

/// An exact rational value produced by [`evaluate_expression`].
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Number(BigRational);

impl Number {
    pub fn from_integer(v: i64) -> Self {
        Number(BigRational::from_integer(BigInt::from(v)))
    }

    /// Parse a plain decimal literal such as `-12`, `3.25` or `.5`.
    pub fn parse_decimal(text: &str) -> Option<Self> {
        let (neg, body) = match text.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, text),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return None;
        }
        if !int_part
            .chars()
            .chain(frac_part.chars())
            .all(|c| c.is_ascii_digit())
        {
            return None;
        }
        let digits = format!("{int_part}{frac_part}");
        let numer: BigInt = if digits.is_empty() {
            BigInt::zero()
        } else {
            digits.parse().ok()?
        };
        let denom = num_traits::pow(BigInt::from(10), frac_part.len());
        let mut value = BigRational::new(numer, denom);
        if neg {
            value = -value;
        }
        Some(Number(value))
    }

    pub fn as_rational(&self) -> &BigRational {
        &self.0
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    pub fn is_integer(&self) -> bool {
        self.0.is_integer()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    /// Decimal rendering with at least `sig` significant digits, trailing
    /// zeros trimmed. Integers render without a fractional part.
    pub fn to_decimal_string(&self, sig: usize) -> String {
        if self.0.is_integer() {
            return self.0.to_integer().to_string();
        }
        let negative = self.0.is_negative();
        let abs = self.0.abs();
        // leading zeros after the point for |v| < 1
        let mut leading = 0usize;
        if abs < BigRational::one() {
            let ten = BigRational::from_integer(BigInt::from(10));
            let mut probe = abs.clone();
            while probe < BigRational::one() {
                probe *= ten.clone();
                leading += 1;
            }
            leading -= 1;
        }
        let frac_digits = sig + leading;
        let scale = num_traits::pow(BigInt::from(10), frac_digits);
        let scaled = abs * BigRational::from_integer(scale.clone());
        // round half away from zero
        let half = BigRational::new(BigInt::one(), BigInt::from(2));
        let rounded = (scaled + half).floor().to_integer();
        let int_part = &rounded / &scale;
        let frac_part = &rounded % &scale;
        let mut frac = frac_part.to_string();
        while frac.len() < frac_digits {
            frac.insert(0, '0');
        }
        let frac = frac.trim_end_matches('0');
        let sign = if negative { "-" } else { "" };
        if frac.is_empty() {
            format!("{sign}{int_part}")
        } else {
            format!("{sign}{int_part}.{frac}")
        }
    }
}

impl fmt::Display for Number {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_decimal_string(12))
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(Number),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
}

fn lex(expr: &str) -> Result<Vec<(usize, Tok)>, EvalError> {
    let chars: Vec<(usize, char)> = expr.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '0'..='9' | '.' => {
                let start = i;
                while i < chars.len()
                    && (chars[i].1.is_ascii_digit() || chars[i].1 == '.' || chars[i].1 == '_')
                {
                    i += 1;
                }
                let text: String = chars[start..i]
                    .iter()
                    .map(|(_, c)| *c)
                    .filter(|c| *c != '_')
                    .collect();
                let n = Number::parse_decimal(&text).ok_or_else(|| EvalError::Parse {
                    pos,
                    msg: format!("invalid number {text:?}"),
                })?;
                out.push((pos, Tok::Num(n)));
            }
            '+' => {
                out.push((pos, Tok::Plus));
                i += 1;
            }
            '-' | '\u{2212}' => {
                out.push((pos, Tok::Minus));
                i += 1;
            }
            '*' | '×' | 'x' | 'X' => {
                out.push((pos, Tok::Star));
                i += 1;
            }
            '/' | '÷' => {
                out.push((pos, Tok::Slash));
                i += 1;
            }
            '(' => {
                out.push((pos, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((pos, Tok::RParen));
                i += 1;
            }
            other => {
                return Err(EvalError::Parse {
                    pos,
                    msg: format!("unexpected character {other:?}"),
                })
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn expr(&mut self) -> Result<BigRational, EvalError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.at += 1;
                    acc += self.term()?;
                }
                Some(Tok::Minus) => {
                    self.at += 1;
                    acc -= self.term()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<BigRational, EvalError> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.at += 1;
                    acc *= self.unary()?;
                }
                Some(Tok::Slash) => {
                    self.at += 1;
                    let rhs = self.unary()?;
                    if rhs.is_zero() {
                        return Err(EvalError::DivisionByZero);
                    }
                    acc /= rhs;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<BigRational, EvalError> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.at += 1;
                Ok(-self.unary()?)
            }
            Some(Tok::Plus) => {
                self.at += 1;
                self.unary()
            }
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<BigRational, EvalError> {
        let pos = self.pos();
        match self.toks.get(self.at).map(|(_, t)| t.clone()) {
            Some(Tok::Num(n)) => {
                self.at += 1;
                Ok(n.0)
            }
            Some(Tok::LParen) => {
                self.at += 1;
                let v = self.expr()?;
                match self.peek() {
                    Some(Tok::RParen) => {
                        self.at += 1;
                        Ok(v)
                    }
                    _ => Err(EvalError::Parse {
                        pos: self.pos(),
                        msg: "expected ')'".into(),
                    }),
                }
            }
            Some(t) => Err(EvalError::Parse {
                pos,
                msg: format!("unexpected token {t:?}"),
            }),
            None => Err(EvalError::Parse {
                pos,
                msg: "unexpected end of expression".into(),
            }),
        }
    }
}

/// Evaluate an arithmetic expression exactly.
pub fn evaluate_expression(expr: &str) -> Result<Number, EvalError> {
    let toks = lex(expr)?;
    let mut p = Parser {
        toks,
        at: 0,
        end: expr.len(),
    };
    let v = p.expr()?;
    if p.at != p.toks.len() {
        return Err(EvalError::Parse {
            pos: p.pos(),
            msg: "trailing input".into(),
        });
    }
    Ok(Number(v))
}
