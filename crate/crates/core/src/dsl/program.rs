use alloc::vec;
use alloc::vec::Vec;

use super::ast::{BinOp, Expr, Func, Moment};
use crate::error::Result;
use crate::measure::MeasureMoments;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Slow(usize),
    Fast(usize),
    Mean(usize),
    Second(usize),
    Neg,
    Bin(BinOp),
    Call(Func),
}

const SHALLOW: usize = 8;
const STACK: usize = 32;

/// Postfix form of an [`Expr`] for repeated evaluation.
///
/// Produces bit-identical values to [`Expr::eval`] but performs no
/// finiteness or domain checks; callers inspect the result and fall back to
/// the tree for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    ops: Vec<Op>,
    tree: Expr,
    depth: usize,
    /// Left-to-right sum of `coef · leaf` when the tree has that shape.
    affine: Option<Vec<(f64, Op)>>,
}

impl Program {
    pub fn compile(expr: &Expr) -> Program {
        let mut ops = Vec::new();
        let depth = emit(expr, &mut ops);
        Program {
            ops,
            tree: expr.clone(),
            depth,
            affine: affine(expr),
        }
    }

    pub fn expr(&self) -> &Expr {
        &self.tree
    }

    /// Unchecked evaluation. Leaf indices were range-checked at parse time;
    /// slices must match the model dimensions.
    #[inline]
    pub fn run(&self, x: &[f64], y: &[f64], mu: &MeasureMoments) -> f64 {
        if let [Op::Const(c)] = self.ops.as_slice() {
            return *c;
        }
        if let Some(terms) = &self.affine {
            let leaf = |op: &Op| match *op {
                Op::Slow(i) => x[i],
                Op::Fast(i) => y[i],
                Op::Mean(i) => mu.mean[i],
                Op::Second(i) => mu.second[i],
                _ => 1.0,
            };
            let mut acc = terms[0].0 * leaf(&terms[0].1);
            for (c, op) in &terms[1..] {
                acc += c * leaf(op);
            }
            return acc;
        }
        if self.depth <= SHALLOW {
            let mut stack = [0.0f64; SHALLOW];
            return self.exec(&mut stack, x, y, mu);
        }
        if self.depth <= STACK {
            let mut stack = [0.0f64; STACK];
            return self.exec(&mut stack, x, y, mu);
        }
        self.tree.eval(x, y, mu).unwrap_or(f64::NAN)
    }

    #[inline(always)]
    fn exec(&self, stack: &mut [f64], x: &[f64], y: &[f64], mu: &MeasureMoments) -> f64 {
        let mut top = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(c) => {
                    stack[top] = c;
                    top += 1;
                }
                Op::Slow(i) => {
                    stack[top] = x[i];
                    top += 1;
                }
                Op::Fast(i) => {
                    stack[top] = y[i];
                    top += 1;
                }
                Op::Mean(i) => {
                    stack[top] = mu.mean[i];
                    top += 1;
                }
                Op::Second(i) => {
                    stack[top] = mu.second[i];
                    top += 1;
                }
                Op::Neg => stack[top - 1] = -stack[top - 1],
                Op::Call(f) => stack[top - 1] = f.apply(stack[top - 1]),
                Op::Bin(op) => {
                    top -= 1;
                    let b = stack[top];
                    let a = stack[top - 1];
                    stack[top - 1] = match op {
                        BinOp::Add => a + b,
                        BinOp::Sub => a - b,
                        BinOp::Mul => a * b,
                        BinOp::Div => a / b,
                        BinOp::Pow => {
                            if a < 0.0 && libm::trunc(b) != b {
                                f64::NAN
                            } else {
                                libm::pow(a, b)
                            }
                        }
                    };
                }
            }
        }
        stack[0]
    }

    /// Checked evaluation with path diagnostics on failure.
    pub fn eval(&self, x: &[f64], y: &[f64], mu: &MeasureMoments) -> Result<f64> {
        let v = self.run(x, y, mu);
        if v.is_finite() {
            Ok(v)
        } else {
            self.tree.eval(x, y, mu)
        }
    }
}

fn leaf_op(e: &Expr) -> Option<Op> {
    Some(match e {
        Expr::Slow(i) => Op::Slow(*i),
        Expr::Fast(i) => Op::Fast(*i),
        Expr::Moment(Moment::Mean(i)) => Op::Mean(*i),
        Expr::Moment(Moment::Second(i)) => Op::Second(*i),
        _ => return None,
    })
}

// `c·v`, `v·c`, `−v` and `v` evaluate bitwise like `coef * v` with
// coef ∈ {c, −1, 1}; a constant is `c · 1`.
fn term(e: &Expr) -> Option<(f64, Op)> {
    match e {
        Expr::Const(c) => Some((*c, Op::Const(1.0))),
        Expr::Neg(a) => leaf_op(a).map(|op| (-1.0, op)),
        Expr::Binary(BinOp::Mul, a, b) => match (&**a, &**b) {
            (Expr::Const(c), v) | (v, Expr::Const(c)) => leaf_op(v).map(|op| (*c, op)),
            _ => None,
        },
        _ => leaf_op(e).map(|op| (1.0, op)),
    }
}

fn affine(e: &Expr) -> Option<Vec<(f64, Op)>> {
    match e {
        Expr::Binary(op @ (BinOp::Add | BinOp::Sub), a, b) => {
            let mut terms = affine(a)?;
            let (c, leaf) = term(b)?;
            // a − t equals a + (−t) exactly
            terms.push((if *op == BinOp::Sub { -c } else { c }, leaf));
            Some(terms)
        }
        _ => term(e).map(|t| vec![t]),
    }
}

/// Appends postfix ops and returns the stack depth the subtree needs.
fn emit(e: &Expr, ops: &mut Vec<Op>) -> usize {
    match e {
        Expr::Const(c) => {
            ops.push(Op::Const(*c));
            1
        }
        Expr::Slow(i) => {
            ops.push(Op::Slow(*i));
            1
        }
        Expr::Fast(i) => {
            ops.push(Op::Fast(*i));
            1
        }
        Expr::Moment(Moment::Mean(i)) => {
            ops.push(Op::Mean(*i));
            1
        }
        Expr::Moment(Moment::Second(i)) => {
            ops.push(Op::Second(*i));
            1
        }
        Expr::Neg(a) => {
            let d = emit(a, ops);
            ops.push(Op::Neg);
            d
        }
        Expr::Call(f, a) => {
            let d = emit(a, ops);
            ops.push(Op::Call(*f));
            d
        }
        Expr::Binary(op, a, b) => {
            let da = emit(a, ops);
            let db = emit(b, ops);
            ops.push(Op::Bin(*op));
            da.max(db + 1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{parse_expr, VarContext};

    #[test]
    fn matches_tree_bitwise() {
        let ctx = VarContext::full(2, 1);
        let mu = MeasureMoments {
            mean: vec![0.3, 0.1],
            second: vec![1.2, 0.4],
        };
        for src in [
            "-1*x0 + y0 + 0.25*mu.mean0",
            "sin(x0)^2 + cos(x1)*exp(-y0^2) / (1 + abs(mu.m21))",
            "tanh(x0 - 2*y0) - (x1 - mu.mean1)^3",
            "3",
            "x0 - 2*y0",
            "-x1 - y0*0.7 + 3 - mu.m21 + 1e-17",
            "0.1*x0 + 0.2*x1 + 0.3*y0",
        ] {
            let e = parse_expr(src, ctx).unwrap();
            let p = Program::compile(&e);
            for k in 0..50 {
                let t = k as f64 * 0.37 - 9.0;
                let x = [t, 0.5 * t];
                let y = [1.0 - t];
                let a = e.eval(&x, &y, &mu).unwrap();
                assert_eq!(a.to_bits(), p.run(&x, &y, &mu).to_bits(), "{src} at {t}");
            }
        }
    }

    #[test]
    fn deep_trees_fall_back_to_the_tree() {
        let mut src = alloc::string::String::from("x0");
        for _ in 0..40 {
            src = alloc::format!("(1 + {src})");
        }
        src = alloc::format!("1 * {src}");
        // right-nested sums need one slot per level
        let mut nested = alloc::string::String::from("x0");
        for _ in 0..40 {
            nested = alloc::format!("1 + ({nested} * 1)");
        }
        let ctx = VarContext::full(1, 1);
        let mu = MeasureMoments::empty();
        for s in [src, nested] {
            let e = parse_expr(&s, ctx).unwrap();
            let p = Program::compile(&e);
            assert_eq!(p.run(&[2.0], &[0.0], &mu), e.eval(&[2.0], &[0.0], &mu).unwrap());
        }
    }

    #[test]
    fn checked_eval_reports_through_tree() {
        let e = parse_expr("x0^0.5", VarContext::full(1, 1)).unwrap();
        let p = Program::compile(&e);
        assert!(p.run(&[-1.0], &[0.0], &MeasureMoments::empty()).is_nan());
        assert!(matches!(
            p.eval(&[-1.0], &[0.0], &MeasureMoments::empty()),
            Err(crate::Error::NegativeBase { .. })
        ));
    }
}
