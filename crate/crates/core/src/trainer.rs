//! Dense-network training and the outer train/prune loop.

use std::io::Write;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::expr::{Expr, ProtectionConfig};
use crate::pruner::mask_overlap;
use crate::symnet::{backward, mse, Columns, EdgeMask, NetworkShape, NodeEvaluator, WeightStore};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset dimension {data} does not match network dimension {net}")]
    DimMismatch { data: usize, net: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub max_epoch: usize,
    /// Epochs between prune events.
    pub prune_interval: usize,
    pub reg_weight: f64,
    /// Knee of the smoothed square-root penalty.
    pub smooth_a: f64,
    pub grad_clip: f64,
    pub lr_step: f64,
    pub overlap_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            max_epoch: 3000,
            prune_interval: 100,
            reg_weight: 1e-3,
            smooth_a: 0.01,
            grad_clip: 1.0,
            lr_step: 0.01,
            overlap_threshold: 0.8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let pos = [
            ("base_lr", self.base_lr),
            ("smooth_a", self.smooth_a),
            ("grad_clip", self.grad_clip),
            ("lr_step", self.lr_step),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(TrainError::Config(format!("reg_weight must be non-negative, got {}", self.reg_weight)));
        }
        if self.prune_interval == 0 {
            return Err(TrainError::Config("prune_interval must be positive".into()));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold < 1.0) {
            return Err(TrainError::Config(format!(
                "overlap_threshold must lie in (0, 1), got {}",
                self.overlap_threshold
            )));
        }
        Ok(())
    }
}

fn smooth_poly(w: f64, a: f64) -> f64 {
    -w.powi(4) / (8.0 * a.powi(3)) + 3.0 * w * w / (4.0 * a) + 3.0 * a / 8.0
}

/// Smoothed `|w|^(1/2)`.
pub fn reg_phi(w: f64, a: f64) -> f64 {
    if w.abs() >= a {
        w.abs().sqrt()
    } else {
        smooth_poly(w, a).sqrt()
    }
}

pub fn reg_phi_grad(w: f64, a: f64) -> f64 {
    if w.abs() >= a {
        w.signum() / (2.0 * w.abs().sqrt())
    } else {
        let dp = -w.powi(3) / (2.0 * a.powi(3)) + 3.0 * w / (2.0 * a);
        dp / (2.0 * smooth_poly(w, a).sqrt())
    }
}

pub fn reg_penalty(w: &WeightStore, smooth_a: f64) -> f64 {
    w.values().iter().map(|v| reg_phi(*v, smooth_a)).sum()
}

/// Data MSE of the masked network plus the weighted penalty.
pub fn total_loss(
    shape: &NetworkShape,
    w: &WeightStore,
    mask: &EdgeMask,
    data: &Dataset,
    p: &ProtectionConfig,
    cfg: &TrainConfig,
) -> f64 {
    let cols = Columns::from_rows(shape.dim(), &data.x).expect("dataset dimension checked by caller");
    let yhat = NodeEvaluator::new(shape, w, &cols, p).predict(mask);
    mse(&yhat, &data.y) + cfg.reg_weight * reg_penalty(w, cfg.smooth_a)
}

/// Elementwise clamp to `[-clip, clip]`; NaN components become 0.
pub fn clip_gradients(g: &mut [f64], clip: f64) {
    for v in g {
        *v = if v.is_nan() { 0.0 } else { v.clamp(-clip, clip) };
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub fn adam_step(w: &mut [f64], g: &[f64], st: &mut AdamState, lr: f64) {
    st.t += 1;
    let b1t = 1.0 - BETA1.powf(st.t as f64);
    let b2t = 1.0 - BETA2.powf(st.t as f64);
    for i in 0..w.len() {
        st.m[i] = BETA1 * st.m[i] + (1.0 - BETA1) * g[i];
        st.v[i] = BETA2 * st.v[i] + (1.0 - BETA2) * g[i] * g[i];
        let mhat = st.m[i] / b1t;
        let vhat = st.v[i] / b2t;
        w[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

pub fn escalate_lr(current_lr: f64, overlap: f64, cfg: &TrainConfig) -> f64 {
    if overlap > cfg.overlap_threshold {
        current_lr + cfg.lr_step
    } else {
        cfg.base_lr
    }
}

/// One post-processed expression proposed at a prune event.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub expr: Expr,
    pub mse: f64,
    /// Data MSE of the pruned subnetwork before post-processing.
    pub mask_mse: f64,
    pub reliable: bool,
}

/// What a prune callback hands back to the loop.
#[derive(Debug, Clone, Default)]
pub struct PruneOutcome {
    /// Lowest-loss mask of this event, used for the overlap rule.
    pub best_mask: Option<EdgeMask>,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone)]
pub struct PruneEvent {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub overlap: Option<f64>,
    pub candidates: Vec<Candidate>,
    /// Running minimum after this event.
    pub min_mse: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub min_expr: Expr,
    pub min_mse: f64,
    pub history: Vec<PruneEvent>,
    pub adam_steps: u64,
    pub epochs: usize,
    pub weights: WeightStore,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Skip every optimizer step (prune the initial weights only).
    pub no_gd: bool,
    pub run_log: Option<&'a mut dyn Write>,
}

#[derive(Serialize)]
struct LogRecord<'a> {
    epoch: usize,
    loss: f64,
    lr: f64,
    event: &'a str,
}

fn log_record(out: &mut Option<&mut dyn Write>, epoch: usize, loss: f64, lr: f64, event: &str) -> Result<(), TrainError> {
    if let Some(w) = out {
        let line = serde_json::to_string(&LogRecord { epoch, loss, lr, event }).unwrap();
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn train<F>(
    shape: &NetworkShape,
    data: &Dataset,
    cfg: &TrainConfig,
    p: &ProtectionConfig,
    prune_cb: F,
) -> Result<SearchResult, TrainError>
where
    F: FnMut(&WeightStore, usize) -> PruneOutcome,
{
    train_with(shape, data, cfg, p, TrainOptions::default(), prune_cb)
}

/// Trains the dense network and prunes every `prune_interval` epochs (and
/// once more at `max_epoch`), tracking the best post-processed expression.
/// The callback only ever sees the weights by shared reference.
pub fn train_with<F>(
    shape: &NetworkShape,
    data: &Dataset,
    cfg: &TrainConfig,
    p: &ProtectionConfig,
    mut opts: TrainOptions<'_>,
    mut prune_cb: F,
) -> Result<SearchResult, TrainError>
where
    F: FnMut(&WeightStore, usize) -> PruneOutcome,
{
    cfg.validate()?;
    if data.dim() != shape.dim() {
        return Err(TrainError::DimMismatch { data: data.dim(), net: shape.dim() });
    }
    let cols = Columns::from_rows(shape.dim(), &data.x).map_err(|e| TrainError::Config(e.to_string()))?;
    let n = data.len() as f64;
    let dense = EdgeMask::dense(shape);
    let mut w = WeightStore::init(shape, cfg.seed);
    let mut adam = AdamState::new(shape.n_weights());
    let mut lr = cfg.base_lr;
    let mut prev_best: Option<EdgeMask> = None;
    let mut history = Vec::new();
    let mut best: Option<(Expr, f64)> = None;
    let mut residual = vec![0.0; data.len()];

    let mut epoch = 0;
    loop {
        let next_prune = if epoch >= cfg.max_epoch {
            epoch
        } else {
            ((epoch / cfg.prune_interval + 1) * cfg.prune_interval).min(cfg.max_epoch)
        };
        let mut loss = f64::NAN;
        while epoch < next_prune {
            let trace = NodeEvaluator::new(shape, &w, &cols, p).forward(&dense);
            let data_mse = mse(&trace.output, &data.y);
            loss = data_mse + cfg.reg_weight * reg_penalty(&w, cfg.smooth_a);
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { what: "loss", epoch });
            }
            if !opts.no_gd {
                for (r, (a, b)) in residual.iter_mut().zip(trace.output.iter().zip(&data.y)) {
                    *r = 2.0 / n * (a - b);
                }
                let mut grad = backward(shape, &w, &dense, &trace, &residual);
                let g = grad.values_mut();
                if cfg.reg_weight > 0.0 {
                    for (gi, wi) in g.iter_mut().zip(w.values()) {
                        *gi += cfg.reg_weight * reg_phi_grad(*wi, cfg.smooth_a);
                    }
                }
                clip_gradients(g, cfg.grad_clip);
                adam_step(w.values_mut(), g, &mut adam, lr);
                if w.values().iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::NonFinite { what: "weight", epoch });
                }
            }
            log_record(&mut opts.run_log, epoch, loss, lr, "train")?;
            epoch += 1;
        }
        if loss.is_nan() {
            loss = total_loss(shape, &w, &dense, data, p, cfg);
        }

        let outcome = prune_cb(&w, epoch);
        let mut overlap = None;
        if let Some(mask) = outcome.best_mask {
            if let Some(prev) = &prev_best {
                let o = mask_overlap(&mask, prev);
                lr = escalate_lr(lr, o, cfg);
                overlap = Some(o);
            }
            prev_best = Some(mask);
        }
        for c in &outcome.candidates {
            if c.mse.is_finite() && best.as_ref().is_none_or(|(_, m)| c.mse < *m) {
                best = Some((c.expr.clone(), c.mse));
            }
        }
        let min_mse = best.as_ref().map_or(f64::INFINITY, |b| b.1);
        debug!("epoch {epoch}: loss {loss:.3e}, lr {lr}, {} candidates, min mse {min_mse:.3e}", outcome.candidates.len());
        log_record(&mut opts.run_log, epoch, loss, lr, "prune")?;
        history.push(PruneEvent { epoch, lr, loss, overlap, candidates: outcome.candidates, min_mse });

        if min_mse < 1e-10 || epoch >= cfg.max_epoch {
            break;
        }
    }

    let (min_expr, min_mse) = match best {
        Some(b) => b,
        None => {
            let mean = data.y.iter().sum::<f64>() / n;
            let m = data.y.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
            (Expr::Const(mean), m)
        }
    };
    info!("search finished at epoch {epoch}: mse {min_mse:.3e}");
    Ok(SearchResult { min_expr, min_mse, history, adam_steps: adam.t, epochs: epoch, weights: w })
}
