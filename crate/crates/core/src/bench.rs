//! Benchmark corpus, dataset sampling, equivalence judging and suite runs.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::engine::{run, EngineConfig, Mode, RunLogs};
use crate::expr::{format, parse, Expr};

pub use crate::data::{load_csv, save_csv};

const CORPUS: &str = include_str!("../data/corpus.txt");
const CORPUS_MAGIC: &str = "prunesym-corpus 1";

/// Suite names in corpus order.
pub const SUITES: [&str; 6] = ["Koza", "Korns", "ODE", "Livermore", "AIFeynman2", "AIFeynman3"];

pub const DEFAULT_RANGE: (f64, f64) = (-5.0, 5.0);
pub const DEFAULT_POINTS: usize = 128;
const PROBE_POINTS: usize = 10_000;
const PROBE_SEED: u64 = 0x5EED_CAFE;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },
    #[error("unknown suite '{0}'")]
    UnknownSuite(String),
    #[error("unknown case '{0}'")]
    UnknownCase(String),
    #[error("case {0}: could not sample finite targets")]
    Sampling(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkCase {
    pub name: String,
    pub truth: Expr,
    pub dim: usize,
    pub ranges: Vec<(f64, f64)>,
    pub n_points: usize,
}

impl BenchmarkCase {
    pub fn suite(&self) -> &str {
        self.name.rsplit_once('-').map_or(&self.name, |(s, _)| s)
    }
}

/// Parses the versioned corpus format.
pub fn parse_corpus(text: &str) -> Result<Vec<BenchmarkCase>, BenchError> {
    let err = |line: usize, msg: String| BenchError::Corpus { line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == CORPUS_MAGIC => {}
        _ => return Err(err(1, format!("expected header '{CORPUS_MAGIC}'"))),
    }
    let mut out = Vec::new();
    for (ln, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(err(ln, "expected 'name | dim | expression [| ranges]'".into()));
        }
        let name = fields[0].to_string();
        let dim: usize = fields[1].parse().map_err(|_| err(ln, format!("bad dimension '{}'", fields[1])))?;
        let truth = parse(fields[2]).map_err(|e| err(ln, e.to_string()))?;
        if dim == 0 || truth.min_dim() > dim {
            return Err(err(ln, format!("expression needs {} variables, dimension is {dim}", truth.min_dim())));
        }
        let mut ranges = vec![DEFAULT_RANGE; dim];
        if let Some(spec) = fields.get(3) {
            for item in spec.split_whitespace() {
                let (var, range) = item.split_once('=').ok_or_else(|| err(ln, format!("bad range '{item}'")))?;
                let idx: usize = var
                    .strip_prefix('x')
                    .and_then(|v| v.parse().ok())
                    .filter(|i| (1..=dim).contains(i))
                    .ok_or_else(|| err(ln, format!("bad range variable '{var}'")))?;
                let (lo, hi) = range.split_once(':').ok_or_else(|| err(ln, format!("bad range '{item}'")))?;
                let lo: f64 = lo.parse().map_err(|_| err(ln, format!("bad range bound '{lo}'")))?;
                let hi: f64 = hi.parse().map_err(|_| err(ln, format!("bad range bound '{hi}'")))?;
                if !(lo < hi) {
                    return Err(err(ln, format!("empty range '{item}'")));
                }
                ranges[idx - 1] = (lo, hi);
            }
        }
        if out.iter().any(|c: &BenchmarkCase| c.name == name) {
            return Err(err(ln, format!("duplicate case '{name}'")));
        }
        out.push(BenchmarkCase { name, truth, dim, ranges, n_points: DEFAULT_POINTS });
    }
    Ok(out)
}

/// The built-in corpus.
pub fn corpus() -> &'static [BenchmarkCase] {
    static CASES: OnceLock<Vec<BenchmarkCase>> = OnceLock::new();
    CASES.get_or_init(|| parse_corpus(CORPUS).expect("embedded corpus parses"))
}

/// Cases of one suite (case-insensitive), or every case for `all`.
pub fn builtin_cases(suite: &str) -> Result<Vec<BenchmarkCase>, BenchError> {
    if suite.eq_ignore_ascii_case("all") {
        return Ok(corpus().to_vec());
    }
    let name = SUITES
        .iter()
        .find(|s| s.eq_ignore_ascii_case(suite))
        .ok_or_else(|| BenchError::UnknownSuite(suite.to_string()))?;
    Ok(corpus().iter().filter(|c| c.suite() == *name).cloned().collect())
}

pub fn find_case(name: &str) -> Result<BenchmarkCase, BenchError> {
    corpus()
        .iter()
        .find(|c| c.name.eq_ignore_ascii_case(name))
        .cloned()
        .ok_or_else(|| BenchError::UnknownCase(name.to_string()))
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn draw_row(rng: &mut impl Rng, ranges: &[(f64, f64)]) -> Vec<f64> {
    ranges.iter().map(|(lo, hi)| rng.gen_range(*lo..*hi)).collect()
}

/// `n_points` rows drawn uniformly from the case's ranges; rows where the
/// truth is not finite are redrawn.
pub fn sample_dataset(case: &BenchmarkCase, seed: u64) -> Result<Dataset, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&case.name));
    let mut x = Vec::with_capacity(case.n_points);
    let mut y = Vec::with_capacity(case.n_points);
    let mut attempts = 0;
    while x.len() < case.n_points {
        attempts += 1;
        if attempts > 1000 * case.n_points {
            return Err(BenchError::Sampling(case.name.clone()));
        }
        let row = draw_row(&mut rng, &case.ranges);
        let v = case.truth.eval(&row, &[]).unwrap_or(f64::NAN);
        if v.is_finite() {
            x.push(row);
            y.push(v);
        }
    }
    Dataset::new(x, y, format!("{} seed {seed}", case.name)).map_err(|_| BenchError::Sampling(case.name.clone()))
}

/// Numeric equivalence on fresh probe points: every probe where the truth is
/// finite must satisfy `|c - t| <= 1e-6 (1 + |t|)`.
pub fn judge_equivalence(candidate: &Expr, truth: &Expr, ranges: &[(f64, f64)]) -> bool {
    if candidate.min_dim() > ranges.len() || truth.min_dim() > ranges.len() {
        return false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let mut checked = 0;
    for _ in 0..PROBE_POINTS {
        let row = draw_row(&mut rng, ranges);
        let t = truth.eval(&row, &[]).unwrap_or(f64::NAN);
        if !t.is_finite() {
            continue;
        }
        let c = candidate.eval(&row, &[]).unwrap_or(f64::NAN);
        if !((c - t).abs() <= 1e-6 * (1.0 + t.abs())) {
            return false;
        }
        checked += 1;
    }
    checked > 0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub expression: String,
    pub mse: f64,
    pub optimal: bool,
    pub adam_steps: u64,
    pub epochs: usize,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub mode: Mode,
    pub truth: String,
    pub best_expression: String,
    pub mse: f64,
    /// Any seed recovered the truth.
    pub optimal: bool,
    pub successes: usize,
    pub wall_time_s: f64,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub optimal_count: usize,
    pub success_count: usize,
    /// Cases where this mode reached the lowest best-of-seeds MSE.
    pub votes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub cases: Vec<CaseReport>,
    pub summary: Vec<ModeSummary>,
}

fn one_run(case: &BenchmarkCase, cfg: &EngineConfig, mode: Mode, seed: u64) -> SeedRun {
    let start = Instant::now();
    let data = match sample_dataset(case, seed) {
        Ok(d) => d,
        Err(e) => {
            return SeedRun {
                seed,
                expression: String::new(),
                mse: f64::INFINITY,
                optimal: false,
                adam_steps: 0,
                epochs: 0,
                wall_time_s: 0.0,
                error: Some(e.to_string()),
            }
        }
    };
    let cfg = EngineConfig { mode, seed, ..*cfg };
    match run(&data, &cfg, RunLogs::default()) {
        Ok(rep) => {
            let optimal = parse(&rep.expression).is_ok_and(|e| judge_equivalence(&e, &case.truth, &case.ranges));
            SeedRun {
                seed,
                expression: rep.expression,
                mse: rep.mse,
                optimal,
                adam_steps: rep.adam_steps,
                epochs: rep.epochs,
                wall_time_s: start.elapsed().as_secs_f64(),
                error: None,
            }
        }
        Err(e) => SeedRun {
            seed,
            expression: String::new(),
            mse: f64::INFINITY,
            optimal: false,
            adam_steps: 0,
            epochs: 0,
            wall_time_s: start.elapsed().as_secs_f64(),
            error: Some(e.to_string()),
        },
    }
}

/// Two best-of-seeds MSEs count as tied for the vote.
fn tied(a: f64, best: f64) -> bool {
    a <= best * (1.0 + 1e-6) || (a < 1e-10 && best < 1e-10)
}

/// Runs every (case, mode, seed) combination on the current rayon pool and
/// aggregates best-of-seeds per case and mode.
pub fn run_suite(suite: &str, cases: &[BenchmarkCase], cfg: &EngineConfig, modes: &[Mode], seeds: &[u64]) -> SuiteReport {
    let jobs: Vec<(usize, usize, u64)> = (0..cases.len())
        .flat_map(|c| (0..modes.len()).flat_map(move |m| seeds.iter().map(move |s| (c, m, *s))))
        .collect();
    let runs: Vec<SeedRun> = jobs.par_iter().map(|(c, m, s)| one_run(&cases[*c], cfg, modes[*m], *s)).collect();

    let mut reports = Vec::new();
    let mut it = runs.into_iter();
    for case in cases {
        for mode in modes {
            let runs: Vec<SeedRun> = it.by_ref().take(seeds.len()).collect();
            let best = runs.iter().min_by(|a, b| a.mse.total_cmp(&b.mse));
            reports.push(CaseReport {
                name: case.name.clone(),
                mode: *mode,
                truth: format(&case.truth),
                best_expression: best.map(|b| b.expression.clone()).unwrap_or_default(),
                mse: best.map_or(f64::INFINITY, |b| b.mse),
                optimal: runs.iter().any(|r| r.optimal),
                successes: runs.iter().filter(|r| r.optimal).count(),
                wall_time_s: runs.iter().map(|r| r.wall_time_s).sum(),
                runs,
            });
        }
    }

    let mut summary: Vec<ModeSummary> = modes
        .iter()
        .map(|m| ModeSummary { mode: *m, optimal_count: 0, success_count: 0, votes: 0 })
        .collect();
    for chunk in reports.chunks(modes.len().max(1)) {
        let best = chunk.iter().map(|r| r.mse).fold(f64::INFINITY, f64::min);
        for (s, r) in summary.iter_mut().zip(chunk) {
            s.optimal_count += r.optimal as usize;
            s.success_count += r.successes;
            if best.is_finite() && tied(r.mse, best) {
                s.votes += 1;
            }
        }
    }
    SuiteReport { suite: suite.to_string(), seeds: seeds.to_vec(), cases: reports, summary }
}
