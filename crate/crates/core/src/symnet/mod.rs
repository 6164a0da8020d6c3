//! The prunable operator network.
//!
//! Nodes are addressed by a single global index: the input layer holds
//! `x1..xd` followed by the constant node `1`, and every hidden layer `i`
//! appends the nine ordinary operators after `n_{i-1}` identity nodes. An
//! identity node at layer `i` copies the node with the same index in layer
//! `i-1`, so index `k` names the same value in every layer where it exists
//! and identity chains collapse for free.
//!
//! Each input slot of an ordinary operator is a *group*: a full connection
//! to all `n_{i-1}` nodes of the previous layer. The output node is one more
//! group over the last hidden layer.

mod checkpoint;
mod extract;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Op;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use extract::extract_expression;
pub use forward::{backward, forward, mse, Columns, ForwardTrace, NodeEvaluator};

#[derive(Debug, Error)]
pub enum SymNetError {
    #[error("mask is not minimalist: group {0} retains {1} edges")]
    NotMinimalist(GroupId, usize),
    #[error("mask retains edges in unreachable group {0}")]
    UnreachableRetained(GroupId),
    #[error("size mismatch: {0}")]
    Mismatch(String),
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Number of ordinary (weighted) operators per hidden layer.
pub const ORDINARY_OPS: usize = Op::ORDINARY.len();

/// One full connection feeding one input slot of one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId {
    /// 1..=L for hidden layers, L+1 for the output node.
    pub layer: usize,
    /// Node index within its layer (equal to the global node index for
    /// hidden operators, 0 for the output node).
    pub node: usize,
    pub slot: usize,
}

impl std::fmt::Display for GroupId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}/n{}/s{}", self.layer, self.node, self.slot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupInfo {
    pub id: GroupId,
    /// Operator of the node this group feeds; `None` for the output.
    pub op: Option<Op>,
    pub offset: usize,
    pub len: usize,
}

/// Layer layout of the network for input dimension `d` and `L` hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkShape {
    dim: usize,
    layers: usize,
    node_counts: Vec<usize>,
    /// Groups in storage (forward) order: layer 1 first, output last.
    groups: Vec<GroupInfo>,
    /// Storage indices of the groups feeding each node (`None` for inputs).
    node_groups: Vec<[Option<usize>; 2]>,
    n_weights: usize,
}

impl NetworkShape {
    pub fn new(dim: usize, layers: usize) -> Self {
        assert!(dim >= 1 && layers >= 1, "network needs d >= 1 and L >= 1");
        let mut node_counts = vec![dim + 1];
        for i in 0..layers {
            node_counts.push(node_counts[i] + ORDINARY_OPS);
        }
        let total_nodes = node_counts[layers];
        let mut groups = Vec::new();
        let mut node_groups = vec![[None, None]; total_nodes];
        let mut offset = 0;
        for layer in 1..=layers {
            let fan_in = node_counts[layer - 1];
            for (j, op) in Op::ORDINARY.iter().enumerate() {
                let node = fan_in + j;
                for slot in 0..op.arity() {
                    node_groups[node][slot] = Some(groups.len());
                    groups.push(GroupInfo {
                        id: GroupId { layer, node, slot },
                        op: Some(*op),
                        offset,
                        len: fan_in,
                    });
                    offset += fan_in;
                }
            }
        }
        groups.push(GroupInfo {
            id: GroupId { layer: layers + 1, node: 0, slot: 0 },
            op: None,
            offset,
            len: total_nodes,
        });
        offset += total_nodes;
        Self { dim, layers, node_counts, groups, node_groups, n_weights: offset }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// `node_counts[0] = d + 1`, `node_counts[i + 1] = node_counts[i] + 9`.
    pub fn node_counts(&self) -> &[usize] {
        &self.node_counts
    }

    pub fn total_nodes(&self) -> usize {
        self.node_counts[self.layers]
    }

    pub fn n_weights(&self) -> usize {
        self.n_weights
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Index of the constant-`1` input node.
    pub fn const_node(&self) -> usize {
        self.dim
    }

    /// Groups in storage order.
    pub fn groups(&self) -> &[GroupInfo] {
        &self.groups
    }

    pub fn group(&self, idx: usize) -> &GroupInfo {
        &self.groups[idx]
    }

    pub fn output_group(&self) -> usize {
        self.groups.len() - 1
    }

    pub fn group_index(&self, id: GroupId) -> Option<usize> {
        if id.layer == self.layers + 1 {
            return (id.node == 0 && id.slot == 0).then(|| self.output_group());
        }
        let slots = self.node_groups.get(id.node)?;
        let g = (*slots.get(id.slot)?)?;
        (self.groups[g].id == id).then_some(g)
    }

    /// Layer in which node `k` is created (0 for inputs).
    pub fn node_layer(&self, k: usize) -> usize {
        if k <= self.dim {
            0
        } else {
            1 + (k - self.dim - 1) / ORDINARY_OPS
        }
    }

    /// Operator of node `k`, `None` for input nodes.
    pub fn node_op(&self, k: usize) -> Option<Op> {
        if k <= self.dim {
            None
        } else {
            Some(Op::ORDINARY[(k - self.dim - 1) % ORDINARY_OPS])
        }
    }

    /// Storage indices of the groups feeding node `k`.
    pub fn node_groups(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.node_groups[k].iter().flatten().copied()
    }

    /// Pruning order: the output group, then hidden layers from last to
    /// first, operators in fixed order, slot 0 before slot 1.
    pub fn list_groups(&self) -> Vec<GroupId> {
        let mut out = vec![self.groups[self.output_group()].id];
        for layer in (1..=self.layers).rev() {
            out.extend(self.groups.iter().filter(|g| g.id.layer == layer).map(|g| g.id));
        }
        out
    }
}

pub fn build_shape(dim: usize, layers: usize) -> NetworkShape {
    NetworkShape::new(dim, layers)
}

pub fn list_groups(shape: &NetworkShape) -> Vec<GroupId> {
    shape.list_groups()
}

/// Learnable weights of every group, stored flat in group storage order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStore {
    values: Vec<f64>,
}

impl WeightStore {
    pub fn zeros(shape: &NetworkShape) -> Self {
        Self { values: vec![0.0; shape.n_weights()] }
    }

    pub fn from_values(shape: &NetworkShape, values: Vec<f64>) -> Result<Self, SymNetError> {
        if values.len() != shape.n_weights() {
            return Err(SymNetError::Mismatch(format!(
                "expected {} weights, got {}",
                shape.n_weights(),
                values.len()
            )));
        }
        Ok(Self { values })
    }

    /// i.i.d. uniform on [-1, 1], deterministic in `seed`.
    pub fn init(shape: &NetworkShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { values: (0..shape.n_weights()).map(|_| rng.gen_range(-1.0..=1.0)).collect() }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn group<'a>(&'a self, shape: &NetworkShape, g: usize) -> &'a [f64] {
        let info = shape.group(g);
        &self.values[info.offset..info.offset + info.len]
    }

    pub fn group_mut<'a>(&'a mut self, shape: &NetworkShape, g: usize) -> &'a mut [f64] {
        let info = shape.group(g);
        &mut self.values[info.offset..info.offset + info.len]
    }
}

pub fn init_weights(shape: &NetworkShape, seed: u64) -> WeightStore {
    WeightStore::init(shape, seed)
}

/// Retain/drop flag for every weight, aligned with [`WeightStore`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeMask {
    bits: Vec<bool>,
}

impl EdgeMask {
    pub fn dense(shape: &NetworkShape) -> Self {
        Self { bits: vec![true; shape.n_weights()] }
    }

    pub fn empty(shape: &NetworkShape) -> Self {
        Self { bits: vec![false; shape.n_weights()] }
    }

    pub fn from_bits(shape: &NetworkShape, bits: Vec<bool>) -> Result<Self, SymNetError> {
        if bits.len() != shape.n_weights() {
            return Err(SymNetError::Mismatch(format!(
                "expected {} mask bits, got {}",
                shape.n_weights(),
                bits.len()
            )));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn group<'a>(&'a self, shape: &NetworkShape, g: usize) -> &'a [bool] {
        let info = shape.group(g);
        &self.bits[info.offset..info.offset + info.len]
    }

    /// Retains exactly `edge` in group `g`.
    pub fn restrict(&mut self, shape: &NetworkShape, g: usize, edge: usize) {
        let info = shape.group(g);
        let bits = &mut self.bits[info.offset..info.offset + info.len];
        bits.fill(false);
        bits[edge] = true;
    }

    pub fn set_group(&mut self, shape: &NetworkShape, g: usize, value: bool) {
        let info = shape.group(g);
        self.bits[info.offset..info.offset + info.len].fill(value);
    }

    pub fn retained_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Flat indices of retained weights.
    pub fn retained(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    /// The single retained edge of group `g`, if exactly one.
    pub fn single_edge(&self, shape: &NetworkShape, g: usize) -> Option<usize> {
        let bits = self.group(shape, g);
        let mut found = None;
        for (j, b) in bits.iter().enumerate() {
            if *b {
                if found.is_some() {
                    return None;
                }
                found = Some(j);
            }
        }
        found
    }

    /// Groups reachable from the output through retained edges, by storage
    /// index.
    pub fn reachable_groups(&self, shape: &NetworkShape) -> Vec<bool> {
        let mut reach = vec![false; shape.n_groups()];
        let mut node_needed = vec![false; shape.total_nodes()];
        let out = shape.output_group();
        reach[out] = true;
        for (j, b) in self.group(shape, out).iter().enumerate() {
            node_needed[j] |= *b;
        }
        for k in (shape.dim() + 1..shape.total_nodes()).rev() {
            if !node_needed[k] {
                continue;
            }
            for g in shape.node_groups(k) {
                reach[g] = true;
                for (j, b) in self.group(shape, g).iter().enumerate() {
                    node_needed[j] |= *b;
                }
            }
        }
        reach
    }

    /// Checks the minimalist invariant: reachable groups retain exactly one
    /// edge, unreachable groups none.
    pub fn check_minimalist(&self, shape: &NetworkShape) -> Result<(), SymNetError> {
        let reach = self.reachable_groups(shape);
        for (g, info) in shape.groups().iter().enumerate() {
            let n = self.group(shape, g).iter().filter(|b| **b).count();
            if reach[g] && n != 1 {
                return Err(SymNetError::NotMinimalist(info.id, n));
            }
            if !reach[g] && n != 0 {
                return Err(SymNetError::UnreachableRetained(info.id));
            }
        }
        Ok(())
    }

    pub fn is_minimalist(&self, shape: &NetworkShape) -> bool {
        self.check_minimalist(shape).is_ok()
    }

    /// Clears every group not reachable from the output.
    pub fn clear_unreachable(&mut self, shape: &NetworkShape) {
        let reach = self.reachable_groups(shape);
        for (g, r) in reach.iter().enumerate() {
            if !r {
                self.set_group(shape, g, false);
            }
        }
    }
}
