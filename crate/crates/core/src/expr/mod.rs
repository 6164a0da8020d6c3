//! Expression trees over the network's operator set.
//!
//! An [`Expr`] is built from numeric constants, free coefficient slots,
//! input variables and the ten operators `+ - * / sin cos exp log square id`.
//! Besides plain IEEE evaluation there is a protected evaluator that applies
//! the same magnitude clamps as the network forward pass, so an expression
//! extracted from a pruned network evaluates exactly like the network did.

mod expand;
mod parse;
mod protect;
mod tape;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expand::{expand_and_collect, Poly};
pub use parse::{format, parse};
pub use protect::{apply_protected, clamp_output, guard_denominator, guard_log_arg, ProtectionConfig};
pub use tape::Tape;

#[allow(unused_imports)]
pub(crate) use expand::{atom_base_expr, monomial_expr_with, try_expand, Atom, Monomial};
pub(crate) use protect::protected_partials;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("variable x{} out of range for dimension {dim}", .index + 1)]
    VarIndex { index: usize, dim: usize },
    #[error("coefficient slot {slot} out of range ({len} coefficients supplied)")]
    CoeffIndex { slot: usize, len: usize },
    #[error("operator {op} takes {expected} argument(s), got {got}")]
    Arity { op: Op, expected: usize, got: usize },
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("non-finite intermediate value while differentiating")]
    NonFiniteGradient,
    #[error("invalid protection config: {0}")]
    Protection(String),
}

/// Operators available to network nodes and expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Sin,
    Cos,
    Exp,
    Log,
    Square,
    Id,
}

impl Op {
    /// The nine operators that own learnable connections, in network order.
    pub const ORDINARY: [Op; 9] = [
        Op::Add,
        Op::Sub,
        Op::Mul,
        Op::Div,
        Op::Sin,
        Op::Cos,
        Op::Exp,
        Op::Log,
        Op::Square,
    ];

    pub fn arity(self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div => 2,
            Op::Sin | Op::Cos | Op::Exp | Op::Log | Op::Square | Op::Id => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Id => "id",
        }
    }

    /// Plain IEEE semantics. `b` is ignored for unary operators.
    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
            Op::Div => a / b,
            Op::Sin => a.sin(),
            Op::Cos => a.cos(),
            Op::Exp => a.exp(),
            Op::Log => a.ln(),
            Op::Square => a * a,
            Op::Id => a,
        }
    }

    /// Local partial derivatives of the plain operator at `(a, b)`.
    #[inline]
    pub(crate) fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Op::Add => (1.0, 1.0),
            Op::Sub => (1.0, -1.0),
            Op::Mul => (b, a),
            Op::Div => (1.0 / b, -a / (b * b)),
            Op::Sin => (a.cos(), 0.0),
            Op::Cos => (-a.sin(), 0.0),
            Op::Exp => (a.exp(), 0.0),
            Op::Log => (1.0 / a, 0.0),
            Op::Square => (2.0 * a, 0.0),
            Op::Id => (1.0, 0.0),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Symbolic expression tree.
///
/// `Coeff` slots are free parameters fitted during post-processing; `Const`
/// holds a fixed numeric value. Variables are 0-based (`Var(0)` prints as `x1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Const(f64),
    Coeff(usize),
    Var(usize),
    Unary(Op, Box<Expr>),
    Binary(Op, Box<Expr>, Box<Expr>),
}

impl Expr {
    /// Applies `op` to `children`, checking arity.
    pub fn apply(op: Op, mut children: Vec<Expr>) -> Result<Expr, ExprError> {
        if children.len() != op.arity() {
            return Err(ExprError::Arity { op, expected: op.arity(), got: children.len() });
        }
        Ok(if op.arity() == 1 {
            Expr::Unary(op, Box::new(children.pop().unwrap()))
        } else {
            let rhs = children.pop().unwrap();
            let lhs = children.pop().unwrap();
            Expr::Binary(op, Box::new(lhs), Box::new(rhs))
        })
    }

    pub fn unary(op: Op, arg: Expr) -> Expr {
        debug_assert_eq!(op.arity(), 1);
        Expr::Unary(op, Box::new(arg))
    }

    pub fn binary(op: Op, lhs: Expr, rhs: Expr) -> Expr {
        debug_assert_eq!(op.arity(), 2);
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn add(lhs: Expr, rhs: Expr) -> Expr {
        Expr::binary(Op::Add, lhs, rhs)
    }

    pub fn sub(lhs: Expr, rhs: Expr) -> Expr {
        Expr::binary(Op::Sub, lhs, rhs)
    }

    pub fn mul(lhs: Expr, rhs: Expr) -> Expr {
        Expr::binary(Op::Mul, lhs, rhs)
    }

    pub fn div(lhs: Expr, rhs: Expr) -> Expr {
        Expr::binary(Op::Div, lhs, rhs)
    }

    pub fn square(arg: Expr) -> Expr {
        Expr::unary(Op::Square, arg)
    }

    pub fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Const(_) | Expr::Coeff(_) | Expr::Var(_) => Vec::new(),
            Expr::Unary(_, a) => vec![a],
            Expr::Binary(_, a, b) => vec![a, b],
        }
    }

    /// Number of AST nodes.
    pub fn complexity(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Coeff(_) | Expr::Var(_) => 1,
            Expr::Unary(_, a) => 1 + a.complexity(),
            Expr::Binary(_, a, b) => 1 + a.complexity() + b.complexity(),
        }
    }

    /// Longest root-to-leaf path, counted in edges (a leaf has depth 0).
    pub fn depth(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Coeff(_) | Expr::Var(_) => 0,
            Expr::Unary(_, a) => 1 + a.depth(),
            Expr::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    /// Number of coefficient slots, i.e. one past the largest slot index.
    pub fn coeff_count(&self) -> usize {
        match self {
            Expr::Coeff(k) => k + 1,
            Expr::Const(_) | Expr::Var(_) => 0,
            Expr::Unary(_, a) => a.coeff_count(),
            Expr::Binary(_, a, b) => a.coeff_count().max(b.coeff_count()),
        }
    }

    /// Smallest input dimension that resolves every variable.
    pub fn min_dim(&self) -> usize {
        match self {
            Expr::Var(i) => i + 1,
            Expr::Const(_) | Expr::Coeff(_) => 0,
            Expr::Unary(_, a) => a.min_dim(),
            Expr::Binary(_, a, b) => a.min_dim().max(b.min_dim()),
        }
    }

    /// Replaces every coefficient slot with its numeric value.
    pub fn substitute(&self, coeffs: &[f64]) -> Result<Expr, ExprError> {
        Ok(match self {
            Expr::Coeff(k) => Expr::Const(
                *coeffs.get(*k).ok_or(ExprError::CoeffIndex { slot: *k, len: coeffs.len() })?,
            ),
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(i) => Expr::Var(*i),
            Expr::Unary(op, a) => Expr::unary(*op, a.substitute(coeffs)?),
            Expr::Binary(op, a, b) => Expr::binary(*op, a.substitute(coeffs)?, b.substitute(coeffs)?),
        })
    }

    /// Plain IEEE evaluation.
    pub fn eval(&self, x: &[f64], coeffs: &[f64]) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Coeff(k) => *coeffs.get(*k).ok_or(ExprError::CoeffIndex { slot: *k, len: coeffs.len() })?,
            Expr::Var(i) => *x.get(*i).ok_or(ExprError::VarIndex { index: *i, dim: x.len() })?,
            Expr::Unary(op, a) => op.apply(a.eval(x, coeffs)?, 0.0),
            Expr::Binary(op, a, b) => op.apply(a.eval(x, coeffs)?, b.eval(x, coeffs)?),
        })
    }

    /// Evaluation with the network's protection rules. Finite for finite inputs.
    pub fn eval_protected(
        &self,
        x: &[f64],
        coeffs: &[f64],
        p: &ProtectionConfig,
    ) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Coeff(k) => *coeffs.get(*k).ok_or(ExprError::CoeffIndex { slot: *k, len: coeffs.len() })?,
            Expr::Var(i) => *x.get(*i).ok_or(ExprError::VarIndex { index: *i, dim: x.len() })?,
            Expr::Unary(op, a) => apply_protected(*op, a.eval_protected(x, coeffs, p)?, 0.0, p).post,
            Expr::Binary(op, a, b) => {
                let (va, vb) = (a.eval_protected(x, coeffs, p)?, b.eval_protected(x, coeffs, p)?);
                apply_protected(*op, va, vb, p).post
            }
        })
    }

    /// Exact reverse-mode gradient of the plain evaluation with respect to
    /// every coefficient slot.
    pub fn grad_coeffs(&self, x: &[f64], coeffs: &[f64]) -> Result<Vec<f64>, ExprError> {
        let tape = Tape::compile(self, x.len(), coeffs.len())?;
        let mut scratch = tape.scratch();
        let mut grad = vec![0.0; coeffs.len()];
        tape.grad(x, coeffs, &mut scratch, &mut grad)?;
        Ok(grad)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format(self))
    }
}

/// Free-function form of [`Expr::eval`].
pub fn eval(e: &Expr, x: &[f64], coeffs: &[f64]) -> Result<f64, ExprError> {
    e.eval(x, coeffs)
}

/// Free-function form of [`Expr::eval_protected`].
pub fn eval_protected(
    e: &Expr,
    x: &[f64],
    coeffs: &[f64],
    p: &ProtectionConfig,
) -> Result<f64, ExprError> {
    e.eval_protected(x, coeffs, p)
}

/// Free-function form of [`Expr::grad_coeffs`].
pub fn grad_coeffs(e: &Expr, x: &[f64], coeffs: &[f64]) -> Result<Vec<f64>, ExprError> {
    e.grad_coeffs(x, coeffs)
}

pub fn complexity(e: &Expr) -> usize {
    e.complexity()
}
