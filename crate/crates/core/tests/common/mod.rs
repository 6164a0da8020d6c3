#![allow(dead_code)]

use std::collections::VecDeque;

pub mod checks;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prunesym::expr::{Expr, Op, ProtectionConfig};
use prunesym::symnet::{build_shape, mse, Columns, EdgeMask, NetworkShape, NodeEvaluator, WeightStore};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tree over all operators with variables `x1..x{dim}`, coefficient
/// slots `c1..c{n_coeffs}` and finite constants.
pub fn random_expr(r: &mut impl Rng, depth: usize, dim: usize, n_coeffs: usize) -> Expr {
    random_expr_scaled(r, depth, dim, n_coeffs, 8)
}

/// As [`random_expr`] with constant magnitudes up to `10^max_exp`.
pub fn random_expr_scaled(r: &mut impl Rng, depth: usize, dim: usize, n_coeffs: usize, max_exp: i32) -> Expr {
    if depth == 0 || r.gen_bool(0.25) {
        return match r.gen_range(0..3) {
            0 if n_coeffs > 0 => Expr::Coeff(r.gen_range(0..n_coeffs)),
            1 => {
                let mag = 10f64.powi(r.gen_range(-max_exp..=max_exp));
                let v = r.gen_range(-1.0..1.0) * mag;
                Expr::Const(if r.gen_bool(0.2) { v.round() } else { v })
            }
            _ => Expr::Var(r.gen_range(0..dim)),
        };
    }
    let op = Op::ORDINARY[r.gen_range(0..Op::ORDINARY.len())];
    let a = random_expr_scaled(r, depth - 1, dim, n_coeffs, max_exp);
    if op.arity() == 2 {
        Expr::binary(op, a, random_expr_scaled(r, depth - 1, dim, n_coeffs, max_exp))
    } else {
        Expr::unary(op, a)
    }
}

/// Plain evaluation recording every intermediate value.
pub fn eval_collect(e: &Expr, x: &[f64], c: &[f64], out: &mut Vec<f64>) -> f64 {
    let v = match e {
        Expr::Const(v) => *v,
        Expr::Coeff(k) => c[*k],
        Expr::Var(i) => x[*i],
        Expr::Unary(op, a) => {
            let va = eval_collect(a, x, c, out);
            op.apply(va, 0.0)
        }
        Expr::Binary(op, a, b) => {
            let va = eval_collect(a, x, c, out);
            let vb = eval_collect(b, x, c, out);
            op.apply(va, vb)
        }
    };
    out.push(v);
    v
}

/// A minimalist mask with every reachable group keeping one uniformly
/// chosen edge.
pub fn random_minimalist_mask(shape: &NetworkShape, r: &mut impl Rng) -> EdgeMask {
    let mut mask = EdgeMask::empty(shape);
    let mut queue = VecDeque::from([shape.output_group()]);
    let mut seen = vec![false; shape.n_groups()];
    seen[shape.output_group()] = true;
    while let Some(g) = queue.pop_front() {
        let e = r.gen_range(0..shape.group(g).len);
        mask.restrict(shape, g, e);
        if shape.node_op(e).is_some() {
            for h in shape.node_groups(e) {
                if !seen[h] {
                    seen[h] = true;
                    queue.push_back(h);
                }
            }
        }
    }
    mask
}

pub fn random_rows(r: &mut impl Rng, n: usize, dim: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| r.gen_range(lo..hi)).collect()).collect()
}

pub fn random_weights(shape: &NetworkShape, r: &mut impl Rng, scale: f64) -> WeightStore {
    let v = (0..shape.n_weights()).map(|_| r.gen_range(-scale..scale)).collect();
    WeightStore::from_values(shape, v).unwrap()
}

/// Reference greedy pruning: back to front, breadth first, each group keeps
/// the edge with the lowest full-forward loss (lowest index on ties).
pub fn naive_greedy(
    shape: &NetworkShape,
    w: &WeightStore,
    x: &[Vec<f64>],
    y: &[f64],
    p: &ProtectionConfig,
) -> (EdgeMask, f64) {
    let cols = Columns::from_rows(shape.dim(), x).unwrap();
    let ev = NodeEvaluator::new(shape, w, &cols, p);
    let mut mask = EdgeMask::dense(shape);
    let mut queue = VecDeque::from([shape.output_group()]);
    let mut decided = vec![false; shape.n_groups()];
    let mut score = mse(&ev.predict(&mask), y);
    while let Some(g) = queue.pop_front() {
        let mut best = (f64::INFINITY, 0);
        for e in 0..shape.group(g).len {
            let mut m = mask.clone();
            m.restrict(shape, g, e);
            let l = mse(&ev.predict(&m), y);
            if l < best.0 {
                best = (l, e);
            }
        }
        mask.restrict(shape, g, best.1);
        decided[g] = true;
        score = best.0;
        if shape.node_op(best.1).is_some() {
            for h in shape.node_groups(best.1) {
                if !decided[h] && !queue.contains(&h) {
                    queue.push_back(h);
                }
            }
        }
    }
    mask.clear_unreachable(shape);
    (mask, score)
}

/// `|a - b| / max(|a|, |b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

const X: usize = 0;
// d = 1: node 0 is x1, node 1 the constant; layer-1 ops start at 2
const SIN1: usize = 6;
const ADD2: usize = 11;

/// `c6*(c4*x + c5*sin(c2*x))` on a d=1, L=2 network: the output keeps the
/// layer-2 add node, whose slots read x (through an id) and the layer-1 sin.
pub fn sin_fixture(c: [f64; 4]) -> (NetworkShape, WeightStore, EdgeMask) {
    let [c2, c4, c5, c6] = c;
    let shape = build_shape(1, 2);
    let mut w = WeightStore::zeros(&shape);
    let mut m = EdgeMask::empty(&shape);
    let out = shape.output_group();
    let add: Vec<usize> = shape.node_groups(ADD2).collect();
    let sin: Vec<usize> = shape.node_groups(SIN1).collect();
    for (g, e, v) in [(out, ADD2, c6), (add[0], X, c4), (add[1], SIN1, c5), (sin[0], X, c2)] {
        w.group_mut(&shape, g)[e] = v;
        m.restrict(&shape, g, e);
    }
    (shape, w, m)
}
