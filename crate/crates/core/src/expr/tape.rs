use super::{Expr, ExprError, Op};

#[derive(Debug, Clone, Copy)]
enum Instr {
    Const(f64),
    Coeff(usize),
    Var(usize),
    Unary(Op, usize),
    Binary(Op, usize, usize),
}

/// Flattened post-order form of an [`Expr`] for repeated evaluation and
/// reverse-mode differentiation. Indices are validated at compile time.
#[derive(Debug, Clone)]
pub struct Tape {
    instrs: Vec<Instr>,
    n_coeffs: usize,
}

impl Tape {
    pub fn compile(e: &Expr, dim: usize, n_coeffs: usize) -> Result<Self, ExprError> {
        let mut instrs = Vec::with_capacity(e.complexity());
        fn walk(e: &Expr, dim: usize, nc: usize, out: &mut Vec<Instr>) -> Result<usize, ExprError> {
            let instr = match e {
                Expr::Const(c) => Instr::Const(*c),
                Expr::Coeff(k) => {
                    if *k >= nc {
                        return Err(ExprError::CoeffIndex { slot: *k, len: nc });
                    }
                    Instr::Coeff(*k)
                }
                Expr::Var(i) => {
                    if *i >= dim {
                        return Err(ExprError::VarIndex { index: *i, dim });
                    }
                    Instr::Var(*i)
                }
                Expr::Unary(op, a) => Instr::Unary(*op, walk(a, dim, nc, out)?),
                Expr::Binary(op, a, b) => {
                    let ia = walk(a, dim, nc, out)?;
                    let ib = walk(b, dim, nc, out)?;
                    Instr::Binary(*op, ia, ib)
                }
            };
            out.push(instr);
            Ok(out.len() - 1)
        }
        walk(e, dim, n_coeffs, &mut instrs)?;
        Ok(Self { instrs, n_coeffs })
    }

    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    pub fn scratch(&self) -> Vec<f64> {
        vec![0.0; 2 * self.instrs.len()]
    }

    /// Plain evaluation. `scratch` must come from [`Tape::scratch`].
    pub fn eval(&self, x: &[f64], coeffs: &[f64], scratch: &mut [f64]) -> f64 {
        let vals = &mut scratch[..self.instrs.len()];
        for (i, ins) in self.instrs.iter().enumerate() {
            vals[i] = match *ins {
                Instr::Const(c) => c,
                Instr::Coeff(k) => coeffs[k],
                Instr::Var(j) => x[j],
                Instr::Unary(op, a) => op.apply(vals[a], 0.0),
                Instr::Binary(op, a, b) => op.apply(vals[a], vals[b]),
            };
        }
        vals[self.instrs.len() - 1]
    }

    /// Evaluates and accumulates `d value / d coeff` into `grad` (which is
    /// overwritten). Returns the value.
    pub fn grad(
        &self,
        x: &[f64],
        coeffs: &[f64],
        scratch: &mut [f64],
        grad: &mut [f64],
    ) -> Result<f64, ExprError> {
        let n = self.instrs.len();
        let value = self.eval(x, coeffs, scratch);
        let (vals, adj) = scratch.split_at_mut(n);
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(ExprError::NonFiniteGradient);
        }
        adj.fill(0.0);
        grad.fill(0.0);
        adj[n - 1] = 1.0;
        for i in (0..n).rev() {
            let a_i = adj[i];
            if a_i == 0.0 {
                continue;
            }
            match self.instrs[i] {
                Instr::Const(_) | Instr::Var(_) => {}
                Instr::Coeff(k) => grad[k] += a_i,
                Instr::Unary(op, a) => {
                    let (da, _) = op.partials(vals[a], 0.0);
                    adj[a] += a_i * da;
                }
                Instr::Binary(op, a, b) => {
                    let (da, db) = op.partials(vals[a], vals[b]);
                    adj[a] += a_i * da;
                    adj[b] += a_i * db;
                }
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(ExprError::NonFiniteGradient);
        }
        Ok(value)
    }
}
