//! The full search pipeline: train, prune, extract, post-process.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::expr::{format, ProtectionConfig};
use crate::postfit::{postprocess, FitReport, PostfitConfig};
use crate::pruner::{greedy_prune, random_prune, PruneConfig, PrunedMask, Scorer};
use crate::symnet::{extract_expression, Columns, EdgeMask, NetworkShape, NodeEvaluator};
use crate::trainer::{train_with, Candidate, PruneOutcome, SearchResult, TrainConfig, TrainError, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Gradient training with beam-search pruning.
    #[default]
    Full,
    /// No optimizer steps: the initial random weights are pruned.
    NoGd,
    /// Every pruning decision is a uniformly random edge.
    RandPrune,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Mode::Full),
            "no_gd" | "no-gd" => Ok(Mode::NoGd),
            "rand_prune" | "rand-prune" => Ok(Mode::RandPrune),
            other => Err(format!("unknown mode '{other}' (expected full, no_gd or rand_prune)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::NoGd => "no_gd",
            Mode::RandPrune => "rand_prune",
        })
    }
}

/// Which masks the learning-rate overlap rule compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OverlapOn {
    /// Lowest-loss mask of each prune event.
    #[default]
    Best,
    /// Union of all returned masks of each prune event.
    Pooled,
}

/// Every tunable of a run, flat so that a config file is a plain list of
/// `key = value` pairs named after the fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub layers: usize,
    pub mode: Mode,
    pub seed: u64,
    // training
    pub base_lr: f64,
    pub max_epoch: usize,
    pub prune_interval: usize,
    pub reg_weight: f64,
    pub smooth_a: f64,
    pub grad_clip: f64,
    pub lr_step: f64,
    pub overlap_threshold: f64,
    pub overlap_on: OverlapOn,
    // protection
    pub out_threshold: f64,
    pub div_eps: f64,
    pub log_eps: f64,
    // pruning
    pub beam_size: usize,
    pub prob_layers: usize,
    pub temperature: f64,
    // post-processing
    pub snap_tol: f64,
    pub bfgs_max_iter: usize,
    pub grad_tol: f64,
    pub revert_tol: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let p = ProtectionConfig::default();
        let b = PruneConfig::default();
        let f = PostfitConfig::default();
        Self {
            layers: 6,
            mode: Mode::Full,
            seed: 0,
            base_lr: t.base_lr,
            max_epoch: t.max_epoch,
            prune_interval: t.prune_interval,
            reg_weight: t.reg_weight,
            smooth_a: t.smooth_a,
            grad_clip: t.grad_clip,
            lr_step: t.lr_step,
            overlap_threshold: t.overlap_threshold,
            overlap_on: OverlapOn::Best,
            out_threshold: p.out_threshold,
            div_eps: p.div_eps,
            log_eps: p.log_eps,
            beam_size: b.beam_size,
            prob_layers: b.prob_layers,
            temperature: b.temperature,
            snap_tol: f.snap_tol,
            bfgs_max_iter: f.max_iter,
            grad_tol: f.grad_tol,
            revert_tol: f.revert_tol,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, EngineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.layers == 0 {
            return Err(EngineError::Config("layers must be at least 1".into()));
        }
        self.train().validate().map_err(|e| EngineError::Config(e.to_string()))?;
        self.protection().validate().map_err(|e| EngineError::Config(e.to_string()))?;
        self.prune(0).validate().map_err(EngineError::Config)?;
        self.postfit().validate().map_err(EngineError::Config)?;
        Ok(())
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            max_epoch: self.max_epoch,
            prune_interval: self.prune_interval,
            reg_weight: self.reg_weight,
            smooth_a: self.smooth_a,
            grad_clip: self.grad_clip,
            lr_step: self.lr_step,
            overlap_threshold: self.overlap_threshold,
            seed: self.seed,
        }
    }

    pub fn protection(&self) -> ProtectionConfig {
        ProtectionConfig { out_threshold: self.out_threshold, div_eps: self.div_eps, log_eps: self.log_eps }
    }

    /// Pruning config for the `event`-th prune of the run.
    pub fn prune(&self, event: u64) -> PruneConfig {
        PruneConfig {
            beam_size: self.beam_size,
            prob_layers: self.prob_layers,
            temperature: self.temperature,
            seed: self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(event.wrapping_mul(0xD1B5_4A32_D192_ED03)),
        }
    }

    pub fn postfit(&self) -> PostfitConfig {
        PostfitConfig {
            snap_tol: self.snap_tol,
            max_iter: self.bfgs_max_iter,
            grad_tol: self.grad_tol,
            revert_tol: self.revert_tol,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateReport {
    pub expr: String,
    pub mse: f64,
    pub mask_mse: f64,
    pub reliable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventReport {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub overlap: Option<f64>,
    pub min_mse: f64,
    pub candidates: Vec<CandidateReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: String,
    pub seed: u64,
    pub config: EngineConfig,
    pub expression: String,
    pub mse: f64,
    pub complexity: usize,
    pub epochs: usize,
    pub adam_steps: u64,
    pub history: Vec<EventReport>,
    pub wall_time_s: f64,
}

/// Optional diagnostic sinks for one run.
#[derive(Default)]
pub struct RunLogs<'a> {
    pub run_log: Option<&'a mut dyn Write>,
    pub prune_trace: Option<&'a mut dyn Write>,
}

fn union_mask(shape: &NetworkShape, masks: &[PrunedMask]) -> Option<EdgeMask> {
    let first = masks.first()?;
    let bits: Vec<bool> = (0..first.mask.bits().len()).map(|i| masks.iter().any(|m| m.mask.bits()[i])).collect();
    EdgeMask::from_bits(shape, bits).ok()
}

/// One prune event: masks from the pruner, each extracted and
/// post-processed in parallel.
pub fn prune_event(
    shape: &NetworkShape,
    w: &crate::symnet::WeightStore,
    cols: &Columns,
    data: &Dataset,
    cfg: &EngineConfig,
    event: u64,
    trace: Option<&mut dyn Write>,
) -> PruneOutcome {
    let p = cfg.protection();
    let scorer = Scorer::new(NodeEvaluator::new(shape, w, cols, &p), &data.y);
    let pcfg = cfg.prune(event);
    let masks = match cfg.mode {
        Mode::RandPrune => random_prune(&scorer, &pcfg),
        _ => greedy_prune(&scorer, &pcfg, trace),
    };
    let post = cfg.postfit();
    let candidates: Vec<Candidate> = masks
        .par_iter()
        .map(|m| {
            let e = extract_expression(shape, w, &m.mask).expect("pruner returns minimalist masks");
            let r = postprocess(&e, data, &post);
            Candidate {
                expr: r.expr,
                mse: r.mse,
                mask_mse: m.mse,
                reliable: r.report.as_ref().is_none_or(|f: &FitReport| f.reliable),
            }
        })
        .collect();
    let best_mask = match cfg.overlap_on {
        OverlapOn::Best => masks.first().map(|m| m.mask.clone()),
        OverlapOn::Pooled => union_mask(shape, &masks),
    };
    PruneOutcome { best_mask, candidates }
}

/// Runs the search on `data` and returns the raw result.
pub fn search(data: &Dataset, cfg: &EngineConfig, logs: RunLogs<'_>) -> Result<SearchResult, EngineError> {
    cfg.validate()?;
    let shape = NetworkShape::new(data.dim(), cfg.layers);
    let cols = Columns::from_rows(shape.dim(), &data.x).map_err(|e| EngineError::Config(e.to_string()))?;
    let mut event = 0u64;
    let mut trace = logs.prune_trace;
    let opts = TrainOptions { no_gd: cfg.mode == Mode::NoGd, run_log: logs.run_log };
    let res = train_with(&shape, data, &cfg.train(), &cfg.protection(), opts, |w, _epoch| {
        let t: Option<&mut dyn Write> = match &mut trace {
            Some(t) => Some(&mut **t),
            None => None,
        };
        let out = prune_event(&shape, w, &cols, data, cfg, event, t);
        event += 1;
        out
    })?;
    Ok(res)
}

/// Runs the search and summarises it as a report.
pub fn run(data: &Dataset, cfg: &EngineConfig, logs: RunLogs<'_>) -> Result<RunReport, EngineError> {
    let start = Instant::now();
    let res = search(data, cfg, logs)?;
    let history = res
        .history
        .iter()
        .map(|ev| EventReport {
            epoch: ev.epoch,
            lr: ev.lr,
            loss: ev.loss,
            overlap: ev.overlap,
            min_mse: ev.min_mse,
            candidates: ev
                .candidates
                .iter()
                .map(|c| CandidateReport { expr: format(&c.expr), mse: c.mse, mask_mse: c.mask_mse, reliable: c.reliable })
                .collect(),
        })
        .collect();
    Ok(RunReport {
        provenance: data.provenance.clone(),
        seed: cfg.seed,
        config: *cfg,
        expression: format(&res.min_expr),
        mse: res.min_mse,
        complexity: res.min_expr.complexity(),
        epochs: res.epochs,
        adam_steps: res.adam_steps,
        history,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
