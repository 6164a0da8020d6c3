//! Expansion of expression trees into collected sums of terms.
//!
//! Products, squares and differences distribute over sums; numeric factors
//! fold into one multiplier per term; terms whose symbolic parts agree are
//! merged. Function applications (`sin cos exp log`) and reciprocals of sums
//! stay atomic, with their arguments expanded recursively.

use std::cmp::Reverse;
use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use ordered_float::OrderedFloat;

use super::parse::pow_expr;
use super::{Expr, Op};

/// Expansions producing more terms than this are abandoned.
pub const MAX_TERMS: usize = 400;

type Num = OrderedFloat<f64>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub(crate) enum Atom {
    Var(usize),
    Coeff(usize),
    Func(Op, Poly),
    /// `1 / p` for a multi-term `p` normalised so its first term has
    /// multiplier 1.
    Recip(Poly),
}

/// Product of atoms raised to non-zero integer powers, sorted by atom.
pub(crate) type Monomial = Vec<(Atom, i32)>;

/// A collected sum of `multiplier * monomial` terms.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Poly {
    terms: BTreeMap<Monomial, Num>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TooLarge;

fn mono_mul(a: &Monomial, b: &Monomial) -> Monomial {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => {
                out.push(a[i].clone());
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j].clone());
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                let p = a[i].1 + b[j].1;
                if p != 0 {
                    out.push((a[i].0.clone(), p));
                }
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

impl Poly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Self::zero();
        if c != 0.0 {
            p.terms.insert(Vec::new(), OrderedFloat(c));
        }
        p
    }

    pub(crate) fn atom(a: Atom) -> Self {
        Self::monomial(vec![(a, 1)], 1.0)
    }

    pub(crate) fn monomial(m: Monomial, c: f64) -> Self {
        let mut p = Self::zero();
        if c != 0.0 {
            p.terms.insert(m, OrderedFloat(c));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// The value if the polynomial has no symbolic part.
    pub fn as_const(&self) -> Option<f64> {
        match self.terms.len() {
            0 => Some(0.0),
            1 => self.terms.get(&Vec::new()).map(|c| c.0),
            _ => None,
        }
    }

    fn single_term(&self) -> Option<(&Monomial, f64)> {
        if self.terms.len() == 1 {
            self.terms.iter().next().map(|(m, c)| (m, c.0))
        } else {
            None
        }
    }

    fn accumulate(&mut self, m: Monomial, c: f64) {
        match self.terms.entry(m) {
            Entry::Vacant(v) => {
                if c != 0.0 {
                    v.insert(OrderedFloat(c));
                }
            }
            Entry::Occupied(mut o) => {
                let sum = o.get().0 + c;
                if sum == 0.0 {
                    o.remove();
                } else {
                    *o.get_mut() = OrderedFloat(sum);
                }
            }
        }
    }

    fn checked(self) -> Result<Self, TooLarge> {
        if self.terms.len() > MAX_TERMS {
            Err(TooLarge)
        } else {
            Ok(self)
        }
    }

    pub(crate) fn add(&self, other: &Poly, sign: f64) -> Result<Poly, TooLarge> {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.accumulate(m.clone(), sign * c.0);
        }
        out.checked()
    }

    pub(crate) fn scale(&self, k: f64) -> Poly {
        if k == 0.0 {
            return Poly::zero();
        }
        Poly { terms: self.terms.iter().map(|(m, c)| (m.clone(), OrderedFloat(c.0 * k))).collect() }
    }

    pub(crate) fn mul(&self, other: &Poly) -> Result<Poly, TooLarge> {
        if self.terms.len().saturating_mul(other.terms.len()) > MAX_TERMS * MAX_TERMS {
            return Err(TooLarge);
        }
        let mut out = Poly::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.accumulate(mono_mul(ma, mb), ca.0 * cb.0);
            }
            if out.terms.len() > MAX_TERMS {
                return Err(TooLarge);
            }
        }
        Ok(out)
    }

    /// Terms in display order: pure polynomial terms first by descending
    /// degree, then terms with function atoms, the constant last.
    pub(crate) fn ordered_terms(&self) -> Vec<(&Monomial, f64)> {
        let mut v: Vec<(&Monomial, f64)> = self.terms.iter().map(|(m, c)| (m, c.0)).collect();
        v.sort_by(|a, b| term_key(a.0).cmp(&term_key(b.0)).then_with(|| a.0.cmp(b.0)));
        v
    }

    pub fn to_expr(&self) -> Expr {
        let terms = self.ordered_terms();
        let mut iter = terms.into_iter();
        let Some((m, c)) = iter.next() else {
            return Expr::Const(0.0);
        };
        let mut acc = term_expr(c, m);
        for (m, c) in iter {
            acc = if c < 0.0 {
                Expr::sub(acc, term_expr(-c, m))
            } else {
                Expr::add(acc, term_expr(c, m))
            };
        }
        acc
    }
}

fn term_key(m: &Monomial) -> (bool, bool, Reverse<i32>) {
    let has_func = m.iter().any(|(a, _)| matches!(a, Atom::Func(..) | Atom::Recip(_)));
    let degree: i32 = m
        .iter()
        .filter(|(a, _)| matches!(a, Atom::Var(_) | Atom::Coeff(_)))
        .map(|(_, p)| *p)
        .sum();
    (m.is_empty(), has_func, Reverse(degree))
}

/// The base expression an atom contributes to a monomial. For a reciprocal
/// this is the (denominator) sum itself.
pub(crate) fn atom_base_expr(a: &Atom) -> Expr {
    match a {
        Atom::Var(i) => Expr::Var(*i),
        Atom::Coeff(k) => Expr::Coeff(*k),
        Atom::Func(op, p) => Expr::unary(*op, p.to_expr()),
        Atom::Recip(p) => p.to_expr(),
    }
}

/// Builds `numerator / denominator` for a monomial, rendering atom bases
/// with `render`. `None` for the empty monomial.
pub(crate) fn monomial_expr_with(m: &Monomial, render: &mut dyn FnMut(&Atom) -> Expr) -> Option<Expr> {
    let mut num: Option<Expr> = None;
    let mut den: Option<Expr> = None;
    for (atom, p) in m {
        let p = if matches!(atom, Atom::Recip(_)) { -p } else { *p };
        let factor = pow_expr(&render(atom), p.unsigned_abs());
        let side = if p > 0 { &mut num } else { &mut den };
        *side = Some(match side.take() {
            None => factor,
            Some(prev) => Expr::mul(prev, factor),
        });
    }
    match (num, den) {
        (None, None) => None,
        (Some(n), None) => Some(n),
        (None, Some(d)) => Some(Expr::div(Expr::Const(1.0), d)),
        (Some(n), Some(d)) => Some(Expr::div(n, d)),
    }
}

fn term_expr(c: f64, m: &Monomial) -> Expr {
    match monomial_expr_with(m, &mut atom_base_expr) {
        None => Expr::Const(c),
        Some(me) if c == 1.0 => me,
        Some(me) => Expr::mul(Expr::Const(c), me),
    }
}

/// Expands `e` into a collected polynomial over atoms.
pub(crate) fn try_expand(e: &Expr) -> Result<Poly, TooLarge> {
    match e {
        Expr::Const(c) => Ok(Poly::constant(*c)),
        Expr::Coeff(k) => Ok(Poly::atom(Atom::Coeff(*k))),
        Expr::Var(i) => Ok(Poly::atom(Atom::Var(*i))),
        Expr::Unary(Op::Id, a) => try_expand(a),
        Expr::Unary(Op::Square, a) => {
            let p = try_expand(a)?;
            p.mul(&p)
        }
        Expr::Unary(op, a) => {
            let p = try_expand(a)?;
            if let Some(c) = p.as_const() {
                let v = op.apply(c, 0.0);
                if v.is_finite() {
                    return Ok(Poly::constant(v));
                }
            }
            Ok(Poly::atom(Atom::Func(*op, p)))
        }
        Expr::Binary(op, a, b) => {
            let pa = try_expand(a)?;
            let pb = try_expand(b)?;
            match op {
                Op::Add => pa.add(&pb, 1.0),
                Op::Sub => pa.add(&pb, -1.0),
                Op::Mul => pa.mul(&pb),
                Op::Div => divide(&pa, &pb),
                _ => unreachable!("binary node with unary operator {op}"),
            }
        }
    }
}

fn divide(num: &Poly, den: &Poly) -> Result<Poly, TooLarge> {
    if let Some(c) = den.as_const() {
        if c != 0.0 {
            return Ok(num.scale(1.0 / c));
        }
        return num.mul(&Poly::atom(Atom::Recip(Poly::zero())));
    }
    if let Some((m, c)) = den.single_term() {
        let inv: Monomial = m.iter().map(|(a, p)| (a.clone(), -p)).collect();
        return num.mul(&Poly::monomial(inv, 1.0 / c));
    }
    let lead = den.ordered_terms()[0].1;
    let normalised = den.scale(1.0 / lead);
    num.mul(&Poly::monomial(vec![(Atom::Recip(normalised), 1)], 1.0 / lead))
}

/// Expands and collects `e`. Falls back to `e` unchanged when the expansion
/// would exceed [`MAX_TERMS`] terms.
pub fn expand_and_collect(e: &Expr) -> Expr {
    match try_expand(e) {
        Ok(p) => p.to_expr(),
        Err(TooLarge) => e.clone(),
    }
}
