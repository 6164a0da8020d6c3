//! Coefficient post-processing: merge the constants of an extracted
//! expression into coefficient slots, fit them by BFGS, snap near-integers
//! and drop the terms that snap to zero.

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::expr::{atom_base_expr, expand_and_collect, monomial_expr_with, try_expand, Atom, Expr, Poly, Tape};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("objective is not finite at the initial coefficients")]
    NonFiniteStart,
    #[error("no data point gives a finite value")]
    NoValidPoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostfitConfig {
    /// Free coefficients within this distance of an integer are snapped.
    pub snap_tol: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// A snap batch is reverted when the refit MSE grows by more than this
    /// relative factor.
    pub revert_tol: f64,
}

impl Default for PostfitConfig {
    fn default() -> Self {
        Self { snap_tol: 0.01, max_iter: 200, grad_tol: 1e-10, revert_tol: 1e-6 }
    }
}

impl PostfitConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.snap_tol >= 0.0 && self.snap_tol < 0.5) {
            return Err(format!("snap_tol must lie in [0, 0.5), got {}", self.snap_tol));
        }
        if !(self.grad_tol > 0.0 && self.revert_tol >= 0.0) {
            return Err("grad_tol must be positive and revert_tol non-negative".into());
        }
        Ok(())
    }
}

/// One additive term `c[mult] * body`. `mult = None` marks an unexpanded
/// expression that is fitted as a whole and never dropped.
#[derive(Debug, Clone, PartialEq)]
struct Term {
    mult: Option<usize>,
    body: Option<Expr>,
}

impl Term {
    fn expr(&self) -> Expr {
        match (self.mult, &self.body) {
            (Some(s), None) => Expr::Coeff(s),
            (Some(s), Some(b)) => Expr::mul(Expr::Coeff(s), b.clone()),
            (None, Some(b)) => b.clone(),
            (None, None) => Expr::Const(0.0),
        }
    }
}

/// An expression template over coefficient slots with initial values.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricExpression {
    pub template: Expr,
    pub init: Vec<f64>,
    pub frozen: Vec<bool>,
    terms: Vec<Term>,
}

impl ParametricExpression {
    fn from_terms(terms: Vec<Term>, init: Vec<f64>) -> Self {
        let template = assemble(&terms);
        let frozen = vec![false; init.len()];
        Self { template, init, frozen, terms }
    }

    pub fn n_slots(&self) -> usize {
        self.init.len()
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    /// The template with `coeffs` substituted.
    pub fn instantiate(&self, coeffs: &[f64]) -> Expr {
        self.template.substitute(coeffs).expect("coefficient vector matches the template")
    }

    /// Removes terms whose multiplier is frozen at exactly 0, renumbering
    /// the remaining slots densely. Returns the number of dropped terms.
    fn drop_zero_terms(&mut self, coeffs: &mut Vec<f64>) -> usize {
        let before = self.terms.len();
        let keep: Vec<Term> = self
            .terms
            .iter()
            .filter(|t| !matches!(t.mult, Some(s) if self.frozen[s] && coeffs[s] == 0.0))
            .cloned()
            .collect();
        let dropped = before - keep.len();
        if dropped == 0 {
            return 0;
        }
        let mut map = vec![None; coeffs.len()];
        let mut next = 0;
        let mut visit = |s: usize, map: &mut Vec<Option<usize>>| {
            if map[s].is_none() {
                map[s] = Some(next);
                next += 1;
            }
        };
        for t in &keep {
            if let Some(s) = t.mult {
                visit(s, &mut map);
            }
        }
        for t in &keep {
            if let Some(b) = &t.body {
                for s in slots_of(b) {
                    visit(s, &mut map);
                }
            }
        }
        let terms: Vec<Term> = keep
            .into_iter()
            .map(|t| Term { mult: t.mult.map(|s| map[s].unwrap()), body: t.body.map(|b| remap(&b, &map)) })
            .collect();
        let mut new_coeffs = vec![0.0; next];
        let mut new_frozen = vec![false; next];
        let mut new_init = vec![0.0; next];
        for (old, m) in map.iter().enumerate() {
            if let Some(new) = m {
                new_coeffs[*new] = coeffs[old];
                new_frozen[*new] = self.frozen[old];
                new_init[*new] = self.init[old];
            }
        }
        if terms.is_empty() {
            // everything snapped away: keep a zero constant term
            *self = Self::from_terms(vec![Term { mult: Some(0), body: None }], vec![0.0]);
            self.frozen[0] = true;
            *coeffs = vec![0.0];
            return dropped;
        }
        self.template = assemble(&terms);
        self.terms = terms;
        self.init = new_init;
        self.frozen = new_frozen;
        *coeffs = new_coeffs;
        dropped
    }
}

fn assemble(terms: &[Term]) -> Expr {
    let mut it = terms.iter();
    let Some(first) = it.next() else {
        return Expr::Const(0.0);
    };
    it.fold(first.expr(), |acc, t| Expr::add(acc, t.expr()))
}

fn slots_of(e: &Expr) -> Vec<usize> {
    let mut out = Vec::new();
    fn walk(e: &Expr, out: &mut Vec<usize>) {
        match e {
            Expr::Coeff(k) => out.push(*k),
            Expr::Const(_) | Expr::Var(_) => {}
            Expr::Unary(_, a) => walk(a, out),
            Expr::Binary(_, a, b) => {
                walk(a, out);
                walk(b, out);
            }
        }
    }
    walk(e, &mut out);
    out
}

fn remap(e: &Expr, map: &[Option<usize>]) -> Expr {
    match e {
        Expr::Coeff(k) => Expr::Coeff(map[*k].expect("slot kept")),
        Expr::Const(_) | Expr::Var(_) => e.clone(),
        Expr::Unary(op, a) => Expr::unary(*op, remap(a, map)),
        Expr::Binary(op, a, b) => Expr::binary(*op, remap(a, map), remap(b, map)),
    }
}

/// Slot allocator used while rendering function arguments.
struct Slots {
    init: Vec<f64>,
}

impl Slots {
    fn alloc(&mut self, v: f64) -> Expr {
        self.init.push(v);
        Expr::Coeff(self.init.len() - 1)
    }

    fn atom(&mut self, a: &Atom) -> Expr {
        match a {
            Atom::Func(op, inner) => Expr::unary(*op, self.poly(inner, false)),
            Atom::Recip(inner) => self.poly(inner, true),
            other => atom_base_expr(other),
        }
    }

    /// A function argument or denominator: every numeric multiplier gets a
    /// slot except multipliers that are exactly 1 (and the normalised
    /// leading term of a denominator).
    fn poly(&mut self, p: &Poly, fixed_lead: bool) -> Expr {
        let mut acc: Option<Expr> = None;
        for (i, (m, c)) in p.ordered_terms().into_iter().enumerate() {
            let body = monomial_expr_with(m, &mut |a| self.atom(a));
            let term = match body {
                None => self.alloc(c),
                Some(b) if c == 1.0 || (fixed_lead && i == 0) => b,
                Some(b) => {
                    let s = self.alloc(c);
                    Expr::mul(s, b)
                }
            };
            acc = Some(match acc {
                None => term,
                Some(prev) => Expr::add(prev, term),
            });
        }
        acc.unwrap_or_else(|| self.alloc(0.0))
    }
}

/// Expands `e` and turns every collected numeric multiplier into a slot:
/// top-level term multipliers first (in display order), then the
/// multipliers inside function arguments and denominators.
pub fn parameterize(e: &Expr) -> ParametricExpression {
    match try_expand(e) {
        Ok(poly) => {
            let terms = poly.ordered_terms();
            if terms.is_empty() {
                return ParametricExpression::from_terms(vec![Term { mult: Some(0), body: None }], vec![0.0]);
            }
            let mut slots = Slots { init: terms.iter().map(|(_, c)| *c).collect() };
            let mut out = Vec::with_capacity(terms.len());
            for (i, (m, _)) in terms.iter().enumerate() {
                let body = monomial_expr_with(m, &mut |a| slots.atom(a));
                out.push(Term { mult: Some(i), body });
            }
            ParametricExpression::from_terms(out, slots.init)
        }
        Err(_) => {
            let mut init = Vec::new();
            let template = slot_consts(e, &mut init);
            ParametricExpression::from_terms(vec![Term { mult: None, body: Some(template) }], init)
        }
    }
}

fn slot_consts(e: &Expr, init: &mut Vec<f64>) -> Expr {
    match e {
        Expr::Const(c) => {
            init.push(*c);
            Expr::Coeff(init.len() - 1)
        }
        Expr::Coeff(_) | Expr::Var(_) => e.clone(),
        Expr::Unary(op, a) => Expr::unary(*op, slot_consts(a, init)),
        Expr::Binary(op, a, b) => Expr::binary(*op, slot_consts(a, init), slot_consts(b, init)),
    }
}

/// Sum of squared residuals over a fixed subset of points, as a function of
/// the free slots.
struct Objective<'a> {
    tape: &'a Tape,
    rows: Vec<&'a [f64]>,
    ys: Vec<f64>,
    base: Vec<f64>,
    free: Vec<usize>,
}

impl<'a> Objective<'a> {
    fn coeffs(&self, xf: &[f64]) -> Vec<f64> {
        let mut c = self.base.clone();
        for (i, s) in self.free.iter().enumerate() {
            c[*s] = xf[i];
        }
        c
    }

    fn value(&self, xf: &[f64]) -> f64 {
        let c = self.coeffs(xf);
        let mut scratch = self.tape.scratch();
        let mut acc = 0.0;
        for (row, y) in self.rows.iter().zip(&self.ys) {
            let r = y - self.tape.eval(row, &c, &mut scratch);
            acc += r * r;
        }
        if acc.is_finite() {
            acc
        } else {
            f64::INFINITY
        }
    }

    /// Value and gradient; infinite value when any point is non-finite.
    fn value_grad(&self, xf: &[f64], grad: &mut [f64]) -> f64 {
        let c = self.coeffs(xf);
        let mut scratch = self.tape.scratch();
        let mut gfull = vec![0.0; c.len()];
        grad.fill(0.0);
        let mut acc = 0.0;
        for (row, y) in self.rows.iter().zip(&self.ys) {
            match self.tape.grad(row, &c, &mut scratch, &mut gfull) {
                Ok(v) => {
                    let r = y - v;
                    acc += r * r;
                    for (i, s) in self.free.iter().enumerate() {
                        grad[i] -= 2.0 * r * gfull[*s];
                    }
                }
                Err(_) => return f64::INFINITY,
            }
        }
        if acc.is_finite() && grad.iter().all(|g| g.is_finite()) {
            acc
        } else {
            f64::INFINITY
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS with Armijo backtracking. Returns the minimiser, its value and the
/// number of accepted iterations.
fn bfgs(obj: &Objective<'_>, x0: Vec<f64>, cfg: &PostfitConfig) -> Result<(Vec<f64>, f64, usize), FitError> {
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = obj.value_grad(&x, &mut g);
    if !f.is_finite() {
        for v in &mut x {
            *v += 1e-3;
        }
        f = obj.value_grad(&x, &mut g);
        if !f.is_finite() {
            return Err(FitError::NonFiniteStart);
        }
    }
    if n == 0 {
        return Ok((x, f, 0));
    }
    let mut h = identity(n);
    let mut first = true;
    let mut iters = 0;
    let mut g1 = vec![0.0; n];
    while iters < cfg.max_iter {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < cfg.grad_tol {
            break;
        }
        let mut p: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&g, &p);
        if !(slope < 0.0) {
            h = identity(n);
            p = g.iter().map(|v| -v).collect();
            slope = dot(&g, &p);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-20 {
            let xt: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + alpha * b).collect();
            let ft = obj.value_grad(&xt, &mut g1);
            if ft.is_finite() && ft <= f + 1e-4 * alpha * slope {
                accepted = Some((xt, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew)) = accepted else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g1.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-300 && sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() {
            if first {
                let scale = sy / dot(&yv, &yv);
                for i in 0..n {
                    h[i * n + i] = scale;
                }
                first = false;
            }
            bfgs_update(&mut h, &s, &yv, sy);
        }
        x = xn;
        f = fnew;
        g.copy_from_slice(&g1);
        iters += 1;
        if s.iter().all(|v| *v == 0.0) {
            break;
        }
    }
    Ok((x, f, iters))
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

/// `H <- (I - r s y^T) H (I - r y s^T) + r s s^T`, `r = 1 / (s.y)`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let r = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    let k = (1.0 + r * yhy) * r;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += k * s[i] * s[j] - r * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_coeffs: Vec<f64>,
    pub final_mse: f64,
    pub snapped_count: usize,
    pub dropped_terms: usize,
    pub iterations: usize,
    /// Points left out of the objective because the template was not finite
    /// there at the initial coefficients.
    pub excluded_points: usize,
    pub reliable: bool,
}

/// Points where `pe` evaluates finitely at `coeffs`.
fn valid_points<'a>(tape: &Tape, data: &'a Dataset, coeffs: &[f64]) -> (Vec<&'a [f64]>, Vec<f64>) {
    let mut scratch = tape.scratch();
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (x, y) in data.x.iter().zip(&data.y) {
        if tape.eval(x, coeffs, &mut scratch).is_finite() {
            rows.push(x.as_slice());
            ys.push(*y);
        }
    }
    (rows, ys)
}

/// Fits the free slots of `pe` from `pe.init`, frozen slots held fixed.
/// Returns the coefficients and the objective divided by the number of
/// points used.
pub fn bfgs_minimize(
    pe: &ParametricExpression,
    data: &Dataset,
    cfg: &PostfitConfig,
) -> Result<(Vec<f64>, f64), FitError> {
    let tape = Tape::compile(&pe.template, data.dim(), pe.n_slots()).expect("template fits the data dimension");
    let (rows, ys) = valid_points(&tape, data, &pe.init);
    if rows.is_empty() {
        return Err(FitError::NoValidPoints);
    }
    let n = rows.len() as f64;
    let (c, f, _) = fit_free(&tape, rows, ys, &pe.init, &pe.frozen, cfg)?;
    Ok((c, f / n))
}

fn fit_free<'a>(
    tape: &'a Tape,
    rows: Vec<&'a [f64]>,
    ys: Vec<f64>,
    start: &[f64],
    frozen: &[bool],
    cfg: &PostfitConfig,
) -> Result<(Vec<f64>, f64, usize), FitError> {
    let free: Vec<usize> = (0..start.len()).filter(|i| !frozen[*i]).collect();
    let obj = Objective { tape, rows, ys, base: start.to_vec(), free };
    let x0: Vec<f64> = obj.free.iter().map(|s| start[*s]).collect();
    let (x, f, it) = bfgs(&obj, x0, cfg)?;
    let f = if obj.free.is_empty() { obj.value(&x) } else { f };
    Ok((obj.coeffs(&x), f, it))
}

/// BFGS fit, then repeated integer snapping and refits, then removal of
/// terms whose multiplier snapped to zero. On return `pe` holds the final
/// template with its frozen flags and `init` set to the fitted values.
pub fn snap_and_refit(pe: &mut ParametricExpression, data: &Dataset, cfg: &PostfitConfig) -> Result<FitReport, FitError> {
    let tape = Tape::compile(&pe.template, data.dim(), pe.n_slots()).expect("template fits the data dimension");
    let (rows, ys) = valid_points(&tape, data, &pe.init);
    if rows.is_empty() {
        return Err(FitError::NoValidPoints);
    }
    let excluded = data.len() - rows.len();
    if excluded > 0 {
        debug!("{excluded} of {} points excluded from the fit", data.len());
    }
    let n = rows.len() as f64;
    let slack = 1e-14 * ys.iter().map(|y| y * y).sum::<f64>() / n;

    let (mut coeffs, mut sse, mut iterations) = fit_free(&tape, rows.clone(), ys.clone(), &pe.init, &pe.frozen, cfg)?;
    let mut snapped_count = 0;
    if cfg.snap_tol > 0.0 {
        loop {
            let batch: Vec<usize> = (0..coeffs.len())
                .filter(|i| !pe.frozen[*i] && (coeffs[*i] - coeffs[*i].round()).abs() < cfg.snap_tol)
                .collect();
            if batch.is_empty() {
                break;
            }
            let mut trial = coeffs.clone();
            let mut frozen = pe.frozen.clone();
            for &i in &batch {
                trial[i] = trial[i].round() + 0.0;
                frozen[i] = true;
            }
            let (c2, s2, it) = fit_free(&tape, rows.clone(), ys.clone(), &trial, &frozen, cfg)?;
            iterations += it;
            if !(s2 / n <= (sse / n) * (1.0 + cfg.revert_tol) + slack) {
                debug!("snap of {} slots reverted: mse {:.3e} -> {:.3e}", batch.len(), sse / n, s2 / n);
                break;
            }
            coeffs = c2;
            sse = s2;
            pe.frozen = frozen;
            snapped_count += batch.len();
        }
    }
    let dropped_terms = pe.drop_zero_terms(&mut coeffs);
    pe.init = coeffs.clone();
    Ok(FitReport {
        final_coeffs: coeffs,
        final_mse: sse / n,
        snapped_count,
        dropped_terms,
        iterations,
        excluded_points: excluded,
        reliable: excluded as f64 <= 0.1 * data.len() as f64,
    })
}

/// Plain-evaluation MSE over all points; infinite if any value is not
/// finite.
pub fn expr_mse(e: &Expr, data: &Dataset) -> f64 {
    let Ok(tape) = Tape::compile(e, data.dim(), e.coeff_count()) else {
        return f64::INFINITY;
    };
    let mut scratch = tape.scratch();
    let mut acc = 0.0;
    for (x, y) in data.x.iter().zip(&data.y) {
        let r = y - tape.eval(x, &[], &mut scratch);
        acc += r * r;
    }
    let m = acc / data.len() as f64;
    if m.is_finite() {
        m
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone)]
pub struct PostResult {
    pub expr: Expr,
    pub mse: f64,
    pub report: Option<FitReport>,
}

/// Parameterize, fit, snap, substitute and re-collect. Never returns an
/// expression worse on `data` than the collected input.
pub fn postprocess(e: &Expr, data: &Dataset, cfg: &PostfitConfig) -> PostResult {
    let input = expand_and_collect(e);
    let input_mse = expr_mse(&input, data).min(expr_mse(e, data));
    let input = if expr_mse(&input, data) <= expr_mse(e, data) { input } else { e.clone() };
    let mut pe = parameterize(e);
    match snap_and_refit(&mut pe, data, cfg) {
        Ok(report) => {
            let out = expand_and_collect(&pe.instantiate(&report.final_coeffs));
            let mse = expr_mse(&out, data);
            if mse <= input_mse || !input_mse.is_finite() && !mse.is_finite() {
                PostResult { expr: out, mse, report: Some(report) }
            } else {
                PostResult { expr: input, mse: input_mse, report: Some(report) }
            }
        }
        Err(err) => {
            debug!("post-processing failed: {err}");
            PostResult { expr: input, mse: input_mse, report: None }
        }
    }
}
