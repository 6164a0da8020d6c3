//! Back-to-front pruning of a trained network into minimalist subnetworks.

use std::collections::{HashSet, VecDeque};
use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::symnet::{mse, Columns, EdgeMask, NetworkShape, NodeEvaluator, WeightStore};
use crate::expr::ProtectionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub beam_size: usize,
    /// Number of hidden layers, counted from the output side, whose edges
    /// are sampled instead of chosen by argmin.
    pub prob_layers: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { beam_size: 5, prob_layers: 2, temperature: 0.1, seed: 0 }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.beam_size == 0 {
            return Err("beam_size must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

/// A partial pruning: decided groups keep one edge, undecided groups are
/// dense.
#[derive(Debug, Clone)]
pub struct BeamState {
    pub mask: EdgeMask,
    /// Storage indices of groups still to decide, breadth-first.
    pub frontier: VecDeque<usize>,
    pub decided: Vec<bool>,
    pub score: f64,
    /// Descends from the argmin choice at every step.
    greedy: bool,
}

impl BeamState {
    pub fn initial(shape: &NetworkShape) -> Self {
        Self {
            mask: EdgeMask::dense(shape),
            frontier: VecDeque::from([shape.output_group()]),
            decided: vec![false; shape.n_groups()],
            score: f64::INFINITY,
            greedy: true,
        }
    }

    /// Child that keeps only `edge` in group `g` (which must be the next
    /// frontier group already popped from `self`).
    fn child(&self, shape: &NetworkShape, g: usize, edge: usize, score: f64, greedy: bool) -> Self {
        let mut c = self.clone();
        c.mask.restrict(shape, g, edge);
        c.decided[g] = true;
        c.score = score;
        c.greedy = greedy;
        if shape.node_op(edge).is_some() {
            for h in shape.node_groups(edge) {
                if !c.decided[h] && !c.frontier.contains(&h) {
                    c.frontier.push_back(h);
                }
            }
        }
        c
    }
}

/// Masked pruned network with its data MSE.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedMask {
    pub mask: EdgeMask,
    pub mse: f64,
}

/// Shared read-only context for scoring masks.
pub struct Scorer<'a> {
    pub ev: NodeEvaluator<'a>,
    pub y: &'a [f64],
}

impl<'a> Scorer<'a> {
    pub fn new(ev: NodeEvaluator<'a>, y: &'a [f64]) -> Self {
        Self { ev, y }
    }

    pub fn mask_mse(&self, mask: &EdgeMask) -> f64 {
        sanitize(mse(&self.ev.predict(mask), self.y))
    }

    /// Loss of `state.mask` with group `g` restricted to each of its edges.
    /// Only the nodes downstream of `g` are recomputed; the values agree bit
    /// for bit with [`Scorer::mask_mse`] on the restricted mask.
    pub fn candidate_losses(&self, state: &BeamState, g: usize) -> Vec<f64> {
        let shape = self.ev.shape;
        let n = self.ev.n();
        let needed = self.ev.needed(&state.mask);
        let mut base = self.ev.input_values();
        self.ev.eval_from(&state.mask, &needed, &mut base, 1);

        let info = shape.group(g);
        let target = (g != shape.output_group()).then_some(info.id.node);
        let affected = match target {
            Some(k) => downstream(shape, &state.mask, &needed, k),
            None => Vec::new(),
        };

        (0..info.len)
            .into_par_iter()
            .map_init(
                || (base.clone(), vec![0.0; 2 * n], vec![0.0; n]),
                |(vals, z, out), e| {
                    let mut mask = state.mask.clone();
                    mask.restrict(shape, g, e);
                    if let Some(k) = target {
                        self.ev.compute_node(k, &mask, vals, z);
                        for &m in &affected {
                            self.ev.compute_node(m, &mask, vals, z);
                        }
                    }
                    self.ev.output_into(&mask, vals, out);
                    let loss = sanitize(mse(out, self.y));
                    if let Some(k) = target {
                        // restore so the buffer can be reused
                        vals[k * n..(k + 1) * n].copy_from_slice(&base[k * n..(k + 1) * n]);
                        for &m in &affected {
                            vals[m * n..(m + 1) * n].copy_from_slice(&base[m * n..(m + 1) * n]);
                        }
                    }
                    loss
                },
            )
            .collect()
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Needed nodes above `k`'s layer that read `k`, directly or transitively.
fn downstream(shape: &NetworkShape, mask: &EdgeMask, needed: &[bool], k: usize) -> Vec<usize> {
    let mut hit = vec![false; shape.total_nodes()];
    hit[k] = true;
    let lk = shape.node_layer(k);
    let start = shape.node_counts()[lk];
    let mut out = Vec::new();
    for m in start..shape.total_nodes() {
        if !needed[m] || shape.node_layer(m) <= lk {
            continue;
        }
        let reads = shape
            .node_groups(m)
            .any(|h| mask.group(shape, h).iter().enumerate().any(|(j, b)| *b && hit[j]));
        if reads {
            hit[m] = true;
            out.push(m);
        }
    }
    out
}

/// Free-function form of [`Scorer::candidate_losses`].
pub fn candidate_losses(
    shape: &NetworkShape,
    w: &WeightStore,
    state: &BeamState,
    g: usize,
    x: &[Vec<f64>],
    y: &[f64],
    p: &ProtectionConfig,
) -> Vec<f64> {
    let cols = Columns::from_rows(shape.dim(), x).expect("row width matches the network");
    Scorer::new(NodeEvaluator::new(shape, w, &cols, p), y).candidate_losses(state, g)
}

/// Samples an index with probability proportional to `exp(-z/T)`, where `z`
/// is the min-max normalised loss.
pub fn probabilistic_select(losses: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let finite: Vec<f64> = losses.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return rng.gen_range(0..losses.len());
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = losses
        .iter()
        .map(|l| {
            let z = if l.is_finite() { (l - lo) / (hi - lo + 1e-12) } else { 1.0 };
            (-z / temperature).exp()
        })
        .collect();
    WeightedIndex::new(&weights).expect("weights are positive").sample(rng)
}

/// Fraction of `a`'s retained edges also retained in `b`.
pub fn mask_overlap(a: &EdgeMask, b: &EdgeMask) -> f64 {
    let na = a.retained_count();
    let both = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
    both as f64 / na.max(1) as f64
}

fn argmin(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, l) in losses.iter().enumerate() {
        if *l < losses[best] {
            best = i;
        }
    }
    best
}

#[derive(Serialize)]
struct DecideRecord {
    event: &'static str,
    group: String,
    chosen_edge: usize,
    losses_min: f64,
    beam_rank: usize,
}

/// Beam-search pruning. Returns at most `beam_size` minimalist masks sorted
/// by data MSE.
pub fn greedy_prune(scorer: &Scorer<'_>, cfg: &PruneConfig, mut trace: Option<&mut dyn Write>) -> Vec<PrunedMask> {
    let shape = scorer.ev.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = BeamState::initial(shape);
    init.score = scorer.mask_mse(&init.mask);
    let mut beam = vec![init];
    let prob_from = shape.layers().saturating_sub(cfg.prob_layers) + 1;

    while beam.iter().any(|s| !s.frontier.is_empty()) {
        // (child, parent rank, edge, group, losses_min)
        let mut pool: Vec<(BeamState, usize, usize, Option<(usize, f64)>)> = Vec::new();
        for (rank, st) in beam.iter().enumerate() {
            let mut st = st.clone();
            let Some(g) = st.frontier.pop_front() else {
                pool.push((st, rank, 0, None));
                continue;
            };
            let losses = scorer.candidate_losses(&st, g);
            let lmin = losses.iter().copied().fold(f64::INFINITY, f64::min);
            let layer = shape.group(g).id.layer;
            let sampled = cfg.prob_layers > 0 && layer <= shape.layers() && layer >= prob_from;
            let picks: Vec<usize> = if sampled {
                // the greedy lineage keeps its argmin so exploration never loses it
                let mut seen = if st.greedy { vec![argmin(&losses)] } else { Vec::new() };
                for _ in 0..cfg.beam_size {
                    let e = probabilistic_select(&losses, cfg.temperature, &mut rng);
                    if !seen.contains(&e) {
                        seen.push(e);
                    }
                }
                seen
            } else {
                let best = argmin(&losses);
                let mut all = vec![best];
                all.extend((0..losses.len()).filter(|e| *e != best));
                all
            };
            for (i, e) in picks.into_iter().enumerate() {
                let greedy = st.greedy && i == 0;
                pool.push((st.child(shape, g, e, losses[e], greedy), rank, e, Some((g, lmin))));
            }
        }
        pool.sort_by(|a, b| a.0.score.total_cmp(&b.0.score).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut next: Vec<(BeamState, Option<(usize, f64)>, usize)> = Vec::with_capacity(cfg.beam_size);
        let mut seen: HashSet<Vec<bool>> = HashSet::new();
        if let Some(i) = pool.iter().position(|c| c.0.greedy) {
            let c = pool.remove(i);
            seen.insert(c.0.mask.bits().to_vec());
            next.push((c.0, c.3, c.2));
        }
        for c in pool {
            if next.len() >= cfg.beam_size {
                break;
            }
            if seen.insert(c.0.mask.bits().to_vec()) {
                next.push((c.0, c.3, c.2));
            }
        }
        next.sort_by(|a, b| a.0.score.total_cmp(&b.0.score).then((!a.0.greedy).cmp(&!b.0.greedy)));

        if let Some(out) = trace.as_deref_mut() {
            for (rank, (_, decided, edge)) in next.iter().enumerate() {
                if let Some((g, lmin)) = decided {
                    let rec = DecideRecord {
                        event: "decide",
                        group: shape.group(*g).id.to_string(),
                        chosen_edge: *edge,
                        losses_min: *lmin,
                        beam_rank: rank,
                    };
                    let _ = writeln!(out, "{}", serde_json::to_string(&rec).unwrap());
                }
            }
        }
        beam = next.into_iter().map(|c| c.0).collect();
    }

    let mut out: Vec<PrunedMask> = beam
        .into_iter()
        .map(|mut s| {
            s.mask.clear_unreachable(shape);
            PrunedMask { mask: s.mask, mse: s.score }
        })
        .collect();
    out.sort_by(|a, b| a.mse.total_cmp(&b.mse));
    out
}

/// Random pruning: `beam_size` independent masks, every edge decision drawn
/// uniformly.
pub fn random_prune(scorer: &Scorer<'_>, cfg: &PruneConfig) -> Vec<PrunedMask> {
    let shape = scorer.ev.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..cfg.beam_size {
        let mut st = BeamState::initial(shape);
        while let Some(g) = st.frontier.pop_front() {
            let e = rng.gen_range(0..shape.group(g).len);
            st = st.child(shape, g, e, 0.0, false);
        }
        st.mask.clear_unreachable(shape);
        if seen.insert(st.mask.bits().to_vec()) {
            let m = scorer.mask_mse(&st.mask);
            out.push(PrunedMask { mask: st.mask, mse: m });
        }
    }
    out.sort_by(|a, b| a.mse.total_cmp(&b.mse));
    out
}
