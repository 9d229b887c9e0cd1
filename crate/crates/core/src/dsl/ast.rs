use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::measure::MeasureMoments;

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
    Exp,
    Tanh,
    Abs,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
        }
    }

    pub(crate) fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => libm::sin(v),
            Func::Cos => libm::cos(v),
            Func::Exp => libm::exp(v),
            Func::Tanh => libm::tanh(v),
            Func::Abs => libm::fabs(v),
        }
    }
}

/// Measure-moment leaf: coordinate `i` of the mean or of the raw second
/// moment of the slow-component law.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moment {
    Mean(usize),
    Second(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Slow(usize),
    Fast(usize),
    Moment(Moment),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn neg(inner: Expr) -> Expr {
        Expr::Neg(Box::new(inner))
    }

    pub fn call(func: Func, arg: Expr) -> Expr {
        Expr::Call(func, Box::new(arg))
    }

    pub fn uses_fast(&self) -> bool {
        self.any_leaf(&|e| matches!(e, Expr::Fast(_)))
    }

    pub fn uses_measure(&self) -> bool {
        self.any_leaf(&|e| matches!(e, Expr::Moment(_)))
    }

    fn any_leaf(&self, pred: &dyn Fn(&Expr) -> bool) -> bool {
        match self {
            Expr::Neg(e) | Expr::Call(_, e) => e.any_leaf(pred),
            Expr::Binary(_, l, r) => l.any_leaf(pred) || r.any_leaf(pred),
            leaf => pred(leaf),
        }
    }

    /// Value of the expression when it contains no variable leaves.
    pub fn constant_value(&self) -> Option<f64> {
        if self.any_leaf(&|e| !matches!(e, Expr::Const(_))) {
            return None;
        }
        self.eval(&[], &[], &MeasureMoments::empty()).ok()
    }

    /// Evaluates the tree at `(x, y, mu)`.
    ///
    /// Non-finite intermediate results and negative bases raised to
    /// non-integer powers are errors carrying the path of the offending
    /// node (`root.lhs.arg`...).
    pub fn eval(&self, x: &[f64], y: &[f64], mu: &MeasureMoments) -> Result<f64> {
        let mut path = Vec::new();
        match self.eval_inner(x, y, mu, &mut path) {
            Ok(v) => Ok(v),
            Err(fault) => {
                let mut rendered = String::from("root");
                for seg in path.iter().rev() {
                    rendered.push('.');
                    rendered.push_str(seg);
                }
                Err(fault.into_error(rendered))
            }
        }
    }

    fn eval_inner(
        &self,
        x: &[f64],
        y: &[f64],
        mu: &MeasureMoments,
        path: &mut Vec<&'static str>,
    ) -> core::result::Result<f64, Fault> {
        let v = match self {
            Expr::Const(c) => *c,
            Expr::Slow(i) => *x.get(*i).ok_or(Fault::Dimension("slow state"))?,
            Expr::Fast(i) => *y.get(*i).ok_or(Fault::Dimension("fast state"))?,
            Expr::Moment(Moment::Mean(i)) => {
                *mu.mean.get(*i).ok_or(Fault::Dimension("measure mean"))?
            }
            Expr::Moment(Moment::Second(i)) => {
                *mu.second.get(*i).ok_or(Fault::Dimension("measure second moment"))?
            }
            Expr::Neg(e) => -e.eval_inner(x, y, mu, path).inspect_err(|_| path.push("arg"))?,
            Expr::Call(func, e) => {
                func.apply(e.eval_inner(x, y, mu, path).inspect_err(|_| path.push("arg"))?)
            }
            Expr::Binary(op, l, r) => {
                let a = l.eval_inner(x, y, mu, path).inspect_err(|_| path.push("lhs"))?;
                let b = r.eval_inner(x, y, mu, path).inspect_err(|_| path.push("rhs"))?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => {
                        if a < 0.0 && libm::trunc(b) != b {
                            return Err(Fault::NegativeBase(a, b));
                        }
                        libm::pow(a, b)
                    }
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Fault::NonFinite)
        }
    }
}

enum Fault {
    NonFinite,
    NegativeBase(f64, f64),
    Dimension(&'static str),
}

impl Fault {
    fn into_error(self, path: String) -> Error {
        match self {
            Fault::NonFinite => Error::NonFinite { path },
            Fault::NegativeBase(base, exponent) => Error::NegativeBase {
                base,
                exponent,
                path,
            },
            Fault::Dimension(what) => {
                Error::Dimension(alloc::format!("{what} too short for leaf at {path}"))
            }
        }
    }
}

/// Fully parenthesised rendering; parsing it back yields the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Slow(i) => write!(f, "x{i}"),
            Expr::Fast(i) => write!(f, "y{i}"),
            Expr::Moment(Moment::Mean(i)) => write!(f, "mu.mean{i}"),
            Expr::Moment(Moment::Second(i)) => write!(f, "mu.m2{i}"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
        }
    }
}
