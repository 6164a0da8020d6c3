//! Masked, protected forward pass and its reverse-mode gradient.

use super::{EdgeMask, NetworkShape, SymNetError, WeightStore};
use crate::expr::{apply_protected, clamp_output, protected_partials, ProtectionConfig};

/// Input samples laid out node-major (`x1` column, ..., `xd` column, then the
/// constant-`1` column).
#[derive(Debug, Clone, PartialEq)]
pub struct Columns {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Columns {
    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self, SymNetError> {
        let n = rows.len();
        let mut data = vec![0.0; (dim + 1) * n];
        for (s, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(SymNetError::Mismatch(format!("row {s} has {} values, expected {dim}", row.len())));
            }
            for (i, v) in row.iter().enumerate() {
                data[i * n + s] = *v;
            }
        }
        data[dim * n..].fill(1.0);
        Ok(Self { n, dim, data })
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Cached per-node values of one forward pass, used by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    n: usize,
    protection: ProtectionConfig,
    /// Post-protection value of every node, node-major.
    pub values: Vec<f64>,
    /// Operator output before the magnitude clamp (op nodes only).
    pub pre: Vec<f64>,
    pub clamped: Vec<bool>,
    /// Whether any single weighted edge term was clamped.
    pub edge_clamped: bool,
    /// Linear pre-activations per op node: slot 0 then slot 1.
    z: Vec<f64>,
    pub output: Vec<f64>,
}

impl ForwardTrace {
    pub fn n_samples(&self) -> usize {
        self.n
    }

    /// Linear pre-activation of input `slot` of op node `k`.
    pub fn z(&self, k: usize, slot: usize) -> &[f64] {
        let at = (k * 2 + slot) * self.n;
        &self.z[at..at + self.n]
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.values[k * self.n..(k + 1) * self.n]
    }

    /// Whether any operator output or output-layer product was clamped.
    pub fn any_clamped(&self) -> bool {
        self.edge_clamped || self.clamped.iter().any(|c| *c)
    }
}

#[inline]
fn linear_into(out: &mut [f64], w: &[f64], mask: &[bool], src: &[f64], n: usize, th: f64) -> bool {
    out.fill(0.0);
    let mut any = false;
    for (j, (&wj, &keep)) in w.iter().zip(mask).enumerate() {
        if !keep {
            continue;
        }
        let col = &src[j * n..(j + 1) * n];
        for (o, &h) in out.iter_mut().zip(col) {
            let (t, c) = clamp_output(wj * h, th);
            *o += t;
            any |= c;
        }
    }
    any
}

/// Evaluates network nodes for one (weights, data, protection) triple under
/// arbitrary masks. All routes (training forward, pruning candidates, naive
/// re-evaluation) go through [`NodeEvaluator::compute_node`], so they agree
/// bit for bit.
pub struct NodeEvaluator<'a> {
    pub shape: &'a NetworkShape,
    pub weights: &'a WeightStore,
    pub cols: &'a Columns,
    pub protection: &'a ProtectionConfig,
}

impl<'a> NodeEvaluator<'a> {
    pub fn new(
        shape: &'a NetworkShape,
        weights: &'a WeightStore,
        cols: &'a Columns,
        protection: &'a ProtectionConfig,
    ) -> Self {
        debug_assert_eq!(cols.dim, shape.dim());
        Self { shape, weights, cols, protection }
    }

    pub fn n(&self) -> usize {
        self.cols.n
    }

    /// Node value buffer with the input columns filled in.
    pub fn input_values(&self) -> Vec<f64> {
        let mut vals = vec![0.0; self.shape.total_nodes() * self.cols.n];
        vals[..self.cols.data.len()].copy_from_slice(&self.cols.data);
        vals
    }

    /// Op nodes whose value reaches the output under `mask`.
    pub fn needed(&self, mask: &EdgeMask) -> Vec<bool> {
        let shape = self.shape;
        let mut needed = vec![false; shape.total_nodes()];
        for (j, b) in mask.group(shape, shape.output_group()).iter().enumerate() {
            needed[j] |= *b;
        }
        for k in (shape.dim() + 1..shape.total_nodes()).rev() {
            if !needed[k] {
                continue;
            }
            for g in shape.node_groups(k) {
                for (j, b) in mask.group(shape, g).iter().enumerate() {
                    needed[j] |= *b;
                }
            }
        }
        needed
    }

    /// Computes node `k` into `vals` from lower-indexed nodes. `z` must hold
    /// `2 * n` values and receives the linear pre-activations.
    pub fn compute_node(&self, k: usize, mask: &EdgeMask, vals: &mut [f64], z: &mut [f64]) {
        self.compute_node_traced(k, mask, vals, z, None);
    }

    fn compute_node_traced(
        &self,
        k: usize,
        mask: &EdgeMask,
        vals: &mut [f64],
        z: &mut [f64],
        trace: Option<(&mut [f64], &mut [bool])>,
    ) -> bool {
        let n = self.cols.n;
        let shape = self.shape;
        let op = shape.node_op(k).expect("compute_node on an input node");
        let (lower, rest) = vals.split_at_mut(k * n);
        let out = &mut rest[..n];
        let (z0, z1) = z.split_at_mut(n);
        let th = self.protection.out_threshold;
        let mut groups = shape.node_groups(k);
        let g0 = groups.next().unwrap();
        let mut edge_clamped = linear_into(z0, self.weights.group(shape, g0), mask.group(shape, g0), lower, n, th);
        if let Some(g1) = groups.next() {
            edge_clamped |= linear_into(&mut z1[..n], self.weights.group(shape, g1), mask.group(shape, g1), lower, n, th);
        } else {
            z1[..n].fill(0.0);
        }
        match trace {
            None => {
                for s in 0..n {
                    out[s] = apply_protected(op, z0[s], z1[s], self.protection).post;
                }
            }
            Some((pre, clamped)) => {
                for s in 0..n {
                    let r = apply_protected(op, z0[s], z1[s], self.protection);
                    out[s] = r.post;
                    pre[s] = r.pre;
                    clamped[s] = r.clamped;
                }
            }
        }
        edge_clamped
    }

    /// Recomputes every needed op node created at `from_layer` or later.
    pub fn eval_from(&self, mask: &EdgeMask, needed: &[bool], vals: &mut [f64], from_layer: usize) {
        let shape = self.shape;
        let start = if from_layer <= 1 { shape.dim() + 1 } else { shape.node_counts()[from_layer - 1] };
        let mut z = vec![0.0; 2 * self.cols.n];
        for k in start..shape.total_nodes() {
            if needed[k] {
                self.compute_node(k, mask, vals, &mut z);
            }
        }
    }

    /// Output node over the last hidden layer.
    pub fn output_into(&self, mask: &EdgeMask, vals: &[f64], out: &mut [f64]) -> bool {
        let g = self.shape.output_group();
        linear_into(
            out,
            self.weights.group(self.shape, g),
            mask.group(self.shape, g),
            vals,
            self.cols.n,
            self.protection.out_threshold,
        )
    }

    /// Network prediction under `mask`, evaluating only needed nodes.
    pub fn predict(&self, mask: &EdgeMask) -> Vec<f64> {
        let needed = self.needed(mask);
        let mut vals = self.input_values();
        self.eval_from(mask, &needed, &mut vals, 1);
        let mut out = vec![0.0; self.cols.n];
        self.output_into(mask, &vals, &mut out);
        out
    }

    /// Full forward pass over every node, recording a trace.
    pub fn forward(&self, mask: &EdgeMask) -> ForwardTrace {
        let n = self.cols.n;
        let shape = self.shape;
        let total = shape.total_nodes();
        let mut values = self.input_values();
        let mut pre = vec![0.0; total * n];
        let mut clamped = vec![false; total * n];
        let mut z = vec![0.0; total * 2 * n];
        let mut edge_clamped = false;
        for k in shape.dim() + 1..total {
            let zk = &mut z[k * 2 * n..(k + 1) * 2 * n];
            let p = &mut pre[k * n..(k + 1) * n];
            let c = &mut clamped[k * n..(k + 1) * n];
            edge_clamped |= self.compute_node_traced(k, mask, &mut values, zk, Some((p, c)));
        }
        let mut output = vec![0.0; n];
        edge_clamped |= self.output_into(mask, &values, &mut output);
        ForwardTrace { n, protection: *self.protection, values, pre, clamped, edge_clamped, z, output }
    }
}

/// Mean squared error, accumulated in sample order.
pub fn mse(yhat: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in yhat.iter().zip(y) {
        let d = a - b;
        acc += d * d;
    }
    acc / y.len() as f64
}

/// Protected forward pass over row-major samples.
pub fn forward(
    shape: &NetworkShape,
    w: &WeightStore,
    mask: &EdgeMask,
    x: &[Vec<f64>],
    p: &ProtectionConfig,
) -> Result<(Vec<f64>, ForwardTrace), SymNetError> {
    let cols = Columns::from_rows(shape.dim(), x)?;
    let trace = NodeEvaluator::new(shape, w, &cols, p).forward(mask);
    Ok((trace.output.clone(), trace))
}

/// Gradient of a data loss with respect to every weight, given
/// `residual_grads[s] = dLoss / dyhat[s]`. Masked weights get 0; clamps are
/// straight-through.
pub fn backward(
    shape: &NetworkShape,
    w: &WeightStore,
    mask: &EdgeMask,
    trace: &ForwardTrace,
    residual_grads: &[f64],
) -> WeightStore {
    let n = trace.n;
    let p = &trace.protection;
    let total = shape.total_nodes();
    let mut grad = WeightStore::zeros(shape);
    let mut adj = vec![0.0; total * n];

    let backprop_group = |g: usize, dz: &[f64], adj: &mut [f64], grad: &mut WeightStore| {
        let info = shape.group(g);
        let wg = &w.values()[info.offset..info.offset + info.len];
        let mg = mask.group(shape, g);
        let gg = &mut grad.values_mut()[info.offset..info.offset + info.len];
        for j in 0..info.len {
            if !mg[j] {
                continue;
            }
            let h = &trace.values[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                acc += dz[s] * h[s];
            }
            gg[j] = acc;
            if j > shape.dim() {
                let wj = wg[j];
                let a = &mut adj[j * n..(j + 1) * n];
                for s in 0..n {
                    a[s] += dz[s] * wj;
                }
            }
        }
    };

    backprop_group(shape.output_group(), residual_grads, &mut adj, &mut grad);

    let mut dz0 = vec![0.0; n];
    let mut dz1 = vec![0.0; n];
    for k in (shape.dim() + 1..total).rev() {
        let a = &adj[k * n..(k + 1) * n];
        if a.iter().all(|v| *v == 0.0) {
            continue;
        }
        let op = shape.node_op(k).unwrap();
        let z = &trace.z[k * 2 * n..(k + 1) * 2 * n];
        let post = &trace.values[k * n..(k + 1) * n];
        for s in 0..n {
            let (da, db) = protected_partials(op, z[s], z[n + s], post[s], p);
            dz0[s] = a[s] * da;
            dz1[s] = a[s] * db;
        }
        let mut groups = shape.node_groups(k);
        let g0 = groups.next().unwrap();
        backprop_group(g0, &dz0, &mut adj, &mut grad);
        if let Some(g1) = groups.next() {
            backprop_group(g1, &dz1, &mut adj, &mut grad);
        }
    }
    grad
}
