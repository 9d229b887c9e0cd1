use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::ast::{BinOp, Expr, Func, Moment};
use super::lexer::{tokenize, Spanned, Tok};
use crate::error::{Error, Result};

/// Variables an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarContext {
    pub n: usize,
    pub m: usize,
    pub fast_allowed: bool,
}

impl VarContext {
    pub fn slow_only(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            fast_allowed: false,
        }
    }

    pub fn full(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            fast_allowed: true,
        }
    }
}

/// Parses standard infix arithmetic.
///
/// Precedence from tightest: `^` (right associative), unary `-`, `*` `/`,
/// `+` `-`. The right operand of `^` may itself carry a unary minus, so
/// `2^-1` is accepted while `-2^2` reads as `-(2^2)`.
pub fn parse_expr(source: &str, ctx: VarContext) -> Result<Expr> {
    let tokens = tokenize(source)?;
    let mut parser = Parser {
        tokens,
        at: 0,
        ctx,
    };
    let expr = parser.sum()?;
    parser.expect_end()?;
    Ok(expr)
}

struct Parser {
    tokens: Vec<Spanned>,
    at: usize,
    ctx: VarContext,
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.tokens[self.at]
    }

    fn bump(&mut self) -> Spanned {
        let t = self.tokens[self.at].clone();
        if self.at + 1 < self.tokens.len() {
            self.at += 1;
        }
        t
    }

    fn error(&self, expected: &str) -> Error {
        let t = self.peek();
        Error::Syntax {
            pos: t.pos,
            expected: expected.into(),
            found: t.tok.describe(),
        }
    }

    fn expect_end(&self) -> Result<()> {
        if self.peek().tok == Tok::End {
            Ok(())
        } else {
            Err(self.error("operator or end of input"))
        }
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.product()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek().tok == Tok::Minus {
            self.bump();
            return Ok(Expr::neg(self.unary()?));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if self.peek().tok == Tok::Caret {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Expr::binary(BinOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr> {
        let Spanned { tok, pos } = self.peek().clone();
        match tok {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Const(v))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.sum()?;
                if self.peek().tok != Tok::RParen {
                    return Err(self.error("`)`"));
                }
                self.bump();
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.bump();
                if let Some(func) = Func::from_name(&name) {
                    if self.peek().tok != Tok::LParen {
                        return Err(self.error("`(` after function name"));
                    }
                    self.bump();
                    let arg = self.sum()?;
                    if self.peek().tok != Tok::RParen {
                        return Err(self.error("`)`"));
                    }
                    self.bump();
                    return Ok(Expr::call(func, arg));
                }
                self.variable(&name, pos)
            }
            _ => Err(self.error("expression")),
        }
    }

    fn variable(&self, name: &str, pos: usize) -> Result<Expr> {
        let unknown = || Error::Syntax {
            pos,
            expected: "variable (x<i>, y<i>, mu.mean<i>, mu.m2<i>) or function".into(),
            found: format!("`{name}`"),
        };
        let index = |digits: &str| -> Result<usize> {
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return Err(unknown());
            }
            digits.parse().map_err(|_| unknown())
        };
        let in_range = |i: usize, bound: usize| -> Result<usize> {
            if i < bound {
                Ok(i)
            } else {
                Err(Error::VariableRange {
                    name: String::from(name),
                    bound,
                })
            }
        };
        if let Some(rest) = name.strip_prefix("mu.mean") {
            let i = in_range(index(rest)?, self.ctx.n)?;
            Ok(Expr::Moment(Moment::Mean(i)))
        } else if let Some(rest) = name.strip_prefix("mu.m2") {
            let i = in_range(index(rest)?, self.ctx.n)?;
            Ok(Expr::Moment(Moment::Second(i)))
        } else if let Some(rest) = name.strip_prefix('x') {
            Ok(Expr::Slow(in_range(index(rest)?, self.ctx.n)?))
        } else if let Some(rest) = name.strip_prefix('y') {
            let i = index(rest)?;
            if !self.ctx.fast_allowed {
                return Err(Error::FastVariableForbidden {
                    name: String::from(name),
                });
            }
            Ok(Expr::Fast(in_range(i, self.ctx.m)?))
        } else {
            Err(unknown())
        }
    }
}
