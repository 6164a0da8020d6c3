//! One function per acceptance criterion. Each returns a short summary on
//! success and the reason on failure.

use rand::Rng;

use prunesym::bench::{builtin_cases, find_case, run_suite, sample_dataset};
use prunesym::data::{read_csv, write_csv, Dataset};
use prunesym::engine::{prune_event, search, EngineConfig, Mode, RunLogs};
use prunesym::expr::{format, parse, Expr, Op, ProtectionConfig};
use prunesym::postfit::{parameterize, snap_and_refit, PostfitConfig};
use prunesym::pruner::{greedy_prune, PruneConfig, Scorer};
use prunesym::symnet::{
    backward, build_shape, extract_expression, mse, Columns, EdgeMask, NetworkShape, NodeEvaluator, WeightStore,
};
use prunesym::trainer::{reg_phi, reg_phi_grad, train_with, PruneOutcome, TrainConfig, TrainOptions};

use super::{eval_collect, naive_greedy, random_expr, random_minimalist_mask, random_rows, random_weights, rel_err, rng};

pub type Check = Result<String, String>;

pub fn shape_law(random_cases: usize) -> Check {
    let got = build_shape(1, 6).node_counts().to_vec();
    if got != [2, 11, 20, 29, 38, 47, 56] {
        return Err(format!("d=1, L=6 gave {got:?}"));
    }
    let mut r = rng(1);
    for _ in 0..random_cases {
        let (d, l) = (r.gen_range(1..=8), r.gen_range(1..=10));
        let c = build_shape(d, l).node_counts().to_vec();
        if c.len() != l + 1 || c[0] != d + 1 || c.windows(2).any(|p| p[1] != p[0] + 9) {
            return Err(format!("d={d}, L={l} gave {c:?}"));
        }
    }
    Ok(format!("[2,11,20,29,38,47,56] and recurrence on {random_cases} random shapes"))
}

fn masked_loss(shape: &NetworkShape, w: &WeightStore, mask: &EdgeMask, cols: &Columns, y: &[f64], p: &ProtectionConfig) -> Option<f64> {
    let t = NodeEvaluator::new(shape, w, cols, p).forward(mask);
    (!t.any_clamped()).then(|| mse(&t.output, y))
}

/// Whether a used div or log node sits within `margin` of its guard.
fn near_guard(shape: &NetworkShape, ev: &NodeEvaluator<'_>, mask: &EdgeMask, trace: &prunesym::symnet::ForwardTrace, margin: f64) -> bool {
    let needed = ev.needed(mask);
    (shape.dim() + 1..shape.total_nodes()).any(|k| {
        needed[k]
            && match shape.node_op(k) {
                Some(Op::Div) => trace.z(k, 1).iter().any(|v| v.abs() < margin),
                Some(Op::Log) => trace.z(k, 0).iter().any(|v| v.abs() < margin),
                _ => false,
            }
    })
}

/// Network backward pass against central differences (h = 1e-5, rel. err
/// 1e-4) on unclamped instances.
pub fn backward_fd(instances: usize, seed: u64) -> Result<(f64, usize), String> {
    let p = ProtectionConfig::default();
    let h = 1e-5;
    let mut r = rng(seed);
    let (mut accepted, mut attempts, mut worst) = (0, 0, 0.0f64);
    while accepted < instances {
        attempts += 1;
        if attempts > instances * 200 {
            return Err(format!("only {accepted} usable instances in {attempts} attempts"));
        }
        let shape = build_shape(r.gen_range(1..=2), r.gen_range(1..=2));
        let w = random_weights(&shape, &mut r, 1.0);
        let keep = r.gen_range(0.15..0.6);
        let bits: Vec<bool> = (0..shape.n_weights()).map(|_| r.gen_bool(keep)).collect();
        let mask = EdgeMask::from_bits(&shape, bits).unwrap();
        let x = random_rows(&mut r, 6, shape.dim(), -2.0, 2.0);
        let y: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let cols = Columns::from_rows(shape.dim(), &x).unwrap();
        let ev = NodeEvaluator::new(&shape, &w, &cols, &p);
        let trace = ev.forward(&mask);
        if trace.any_clamped() || near_guard(&shape, &ev, &mask, &trace, 0.05) {
            continue;
        }
        let n = y.len() as f64;
        let resid: Vec<f64> = trace.output.iter().zip(&y).map(|(a, b)| 2.0 / n * (a - b)).collect();
        let grad = backward(&shape, &w, &mask, &trace, &resid);

        let mut fds = Vec::new();
        let mut usable = true;
        for i in 0..shape.n_weights() {
            if !mask.bits()[i] {
                if grad.values()[i] != 0.0 {
                    return Err(format!("masked weight {i} has gradient {}", grad.values()[i]));
                }
                continue;
            }
            let mut wp = w.clone();
            wp.values_mut()[i] += h;
            let mut wm = w.clone();
            wm.values_mut()[i] -= h;
            match (masked_loss(&shape, &wp, &mask, &cols, &y, &p), masked_loss(&shape, &wm, &mask, &cols, &y, &p)) {
                (Some(lp), Some(lm)) => fds.push((i, (lp - lm) / (2.0 * h))),
                _ => {
                    usable = false;
                    break;
                }
            }
        }
        if !usable {
            continue;
        }
        for (i, fd) in fds {
            let e = rel_err(grad.values()[i], fd);
            worst = worst.max(e);
            if e > 1e-4 {
                return Err(format!("weight {i}: backward {} vs fd {fd} (rel {e:.2e})", grad.values()[i]));
            }
        }
        accepted += 1;
    }
    Ok((worst, attempts))
}

/// Coefficient gradients of random expressions against central differences
/// (h = 1e-6, rel. err 1e-5) where every intermediate lies in [1e-3, 1e3].
pub fn grad_coeffs_fd(instances: usize, seed: u64) -> Result<(f64, usize), String> {
    let h = 1e-6;
    let mut r = rng(seed);
    let (mut accepted, mut attempts, mut worst) = (0, 0, 0.0f64);
    let in_range = |vals: &[f64]| vals.iter().all(|v| (1e-3..=1e3).contains(&v.abs()));
    while accepted < instances {
        attempts += 1;
        if attempts > instances * 500 {
            return Err(format!("only {accepted} usable expressions in {attempts} attempts"));
        }
        let depth = r.gen_range(1..=4);
        let e = random_expr(&mut r, depth, 2, 3);
        if e.coeff_count() == 0 {
            continue;
        }
        let x: Vec<f64> = (0..2).map(|_| r.gen_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| r.gen_range(0.2..2.0) * if r.gen_bool(0.5) { -1.0 } else { 1.0 }).collect();
        let mut inter = Vec::new();
        eval_collect(&e, &x, &c, &mut inter);
        if !in_range(&inter) {
            continue;
        }
        let mut fd = vec![0.0; 3];
        let mut usable = true;
        for k in 0..3 {
            let mut cp = c.clone();
            cp[k] += h;
            let mut cm = c.clone();
            cm[k] -= h;
            let (mut ip, mut im) = (Vec::new(), Vec::new());
            let fp = eval_collect(&e, &x, &cp, &mut ip);
            let fm = eval_collect(&e, &x, &cm, &mut im);
            usable &= in_range(&ip) && in_range(&im);
            fd[k] = (fp - fm) / (2.0 * h);
        }
        if !usable {
            continue;
        }
        let g = e.grad_coeffs(&x, &c).map_err(|err| format!("{}: {err}", format(&e)))?;
        for k in 0..3 {
            let err = rel_err(g[k], fd[k]);
            worst = worst.max(err);
            if err > 1e-5 {
                return Err(format!("{} slot {k}: grad {} vs fd {} (rel {err:.2e})", format(&e), g[k], fd[k]));
            }
        }
        accepted += 1;
    }
    Ok((worst, attempts))
}

pub fn gradient_suite(instances: usize) -> Check {
    let (wb, ab) = backward_fd(instances, 2)?;
    let (wc, ac) = grad_coeffs_fd(instances, 3)?;
    Ok(format!(
        "{instances} networks (max rel {wb:.1e}, {ab} drawn), {instances} expressions (max rel {wc:.1e}, {ac} drawn)"
    ))
}

pub fn extraction_fidelity(masks: usize) -> Check {
    let p = ProtectionConfig::default();
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for i in 0..masks {
        let shape = build_shape(r.gen_range(1..=3), r.gen_range(1..=4));
        let w = random_weights(&shape, &mut r, 1.0);
        let mask = random_minimalist_mask(&shape, &mut r);
        let x = random_rows(&mut r, 32, shape.dim(), -3.0, 3.0);
        let cols = Columns::from_rows(shape.dim(), &x).unwrap();
        let yhat = NodeEvaluator::new(&shape, &w, &cols, &p).predict(&mask);
        let e = extract_expression(&shape, &w, &mask).map_err(|err| format!("mask {i}: {err}"))?;
        for (row, a) in x.iter().zip(&yhat) {
            let b = e.eval_protected(row, &[], &p).map_err(|err| err.to_string())?;
            let d = (a - b).abs() / (1.0 + a.abs());
            worst = worst.max(d);
            if !(d <= 1e-9) {
                return Err(format!("mask {i} at {row:?}: network {a} vs expression {b} ({})", format(&e)));
            }
        }
    }
    Ok(format!("{masks} masks x 32 points, max scaled deviation {worst:.1e}"))
}

fn random_pruning_problem(r: &mut impl Rng) -> (NetworkShape, WeightStore, Vec<Vec<f64>>, Vec<f64>) {
    let shape = build_shape(r.gen_range(1..=2), r.gen_range(2..=3));
    let w = random_weights(&shape, r, 1.0);
    let x = random_rows(r, 24, shape.dim(), -2.0, 2.0);
    let (a, b) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
    let y = x.iter().map(|row| a * row[0] * row[0] + (b * row[row.len() - 1]).sin()).collect();
    (shape, w, x, y)
}

pub fn pruning_invariants(networks: usize) -> Check {
    let p = ProtectionConfig::default();
    let mut r = rng(5);
    let mut strictly_better = 0;
    for i in 0..networks {
        let (shape, w, x, y) = random_pruning_problem(&mut r);
        let cols = Columns::from_rows(shape.dim(), &x).unwrap();
        let scorer = Scorer::new(NodeEvaluator::new(&shape, &w, &cols, &p), &y);

        let greedy_cfg = PruneConfig { beam_size: 1, prob_layers: 0, temperature: 0.1, seed: i as u64 };
        let greedy = greedy_prune(&scorer, &greedy_cfg, None);
        let (naive, naive_mse) = naive_greedy(&shape, &w, &x, &y, &p);
        if greedy.len() != 1 || greedy[0].mask != naive {
            return Err(format!("network {i}: B=1 result differs from iterated argmin"));
        }
        if greedy[0].mse.to_bits() != naive_mse.to_bits() {
            return Err(format!("network {i}: B=1 mse {} vs naive {naive_mse}", greedy[0].mse));
        }

        let beam_cfg = PruneConfig { beam_size: 5, seed: i as u64, ..PruneConfig::default() };
        let beam = greedy_prune(&scorer, &beam_cfg, None);
        for m in beam.iter().chain(&greedy) {
            if let Err(e) = m.mask.check_minimalist(&shape) {
                return Err(format!("network {i}: {e}"));
            }
            let recomputed = mse(&scorer.ev.predict(&m.mask), &y);
            if recomputed.to_bits() != m.mse.to_bits() {
                return Err(format!("network {i}: reported mse {} but mask gives {recomputed}", m.mse));
            }
        }
        if beam.is_empty() || beam.len() > 5 || beam.windows(2).any(|p| p[0].mse > p[1].mse) {
            return Err(format!("network {i}: beam returned {} masks or unsorted", beam.len()));
        }
        if beam[0].mse > greedy[0].mse {
            return Err(format!("network {i}: B=5 best {} worse than B=1 {}", beam[0].mse, greedy[0].mse));
        }
        if beam[0].mse < greedy[0].mse {
            strictly_better += 1;
        }
    }
    Ok(format!("{networks} networks; B=1 equals naive argmin; B=5 strictly better on {strictly_better}"))
}

/// Trains on `x1/x2` for `epochs` epochs with prune events that never stop
/// the run early.
pub fn division_stability(epochs: usize) -> Check {
    let case = find_case("AIFeynman2-5").map_err(|e| e.to_string())?;
    let data = sample_dataset(&case, 0).map_err(|e| e.to_string())?;
    let cfg = EngineConfig::default();
    let shape = build_shape(data.dim(), cfg.layers);
    let tcfg = TrainConfig { max_epoch: epochs, ..cfg.train() };
    let mut log = Vec::new();
    let mut events = 0;
    let res = train_with(
        &shape,
        &data,
        &tcfg,
        &cfg.protection(),
        TrainOptions { no_gd: false, run_log: Some(&mut log) },
        |w, _| {
            events += 1;
            assert!(w.values().iter().all(|v| v.is_finite()));
            PruneOutcome { best_mask: None, candidates: Vec::new() }
        },
    )
    .map_err(|e| e.to_string())?;
    let text = String::from_utf8(log).unwrap();
    let mut max_loss = 0.0f64;
    let mut train_lines = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let loss = v["loss"].as_f64().ok_or_else(|| format!("non-numeric loss in {line}"))?;
        if !loss.is_finite() {
            return Err(format!("non-finite loss: {line}"));
        }
        max_loss = max_loss.max(loss);
        train_lines += (v["event"] == "train") as usize;
    }
    if res.epochs != epochs || train_lines != epochs {
        return Err(format!("ran {} epochs ({train_lines} logged), expected {epochs}", res.epochs));
    }
    if !res.weights.values().iter().all(|v| v.is_finite()) {
        return Err("non-finite final weight".into());
    }
    Ok(format!("{epochs} epochs, {events} prune events, all losses finite (max {max_loss:.3e})"))
}

/// The expanded pruning result for `x1^3/5 - x1 + x2^3/2 - x2`, with the
/// target terms slightly off and every redundant term small.
pub const CUBIC_TEMPLATE: &str = "0.003*x1^4 - 0.002*(x1^3*x2) + 0.21*x1^3 + 0.004*(x1^2*x2^2) - 0.003*(x1^2*x2) \
    + 0.005*x1^2 + 0.002*(x1*x2^3) - 0.004*(x1*x2^2) + 0.003*(x1*x2) - 0.97*x1 - 0.001*x2^4 + 0.48*x2^3 \
    - 0.006*x2^2 - 1.02*x2 + 0.004*log(x2^2) - 0.003*log(x2) + 0.02";

pub fn cubic_dataset() -> Dataset {
    let mut r = rng(6);
    let x: Vec<Vec<f64>> = (0..128).map(|_| vec![r.gen_range(-5.0..5.0), r.gen_range(0.5..5.0)]).collect();
    let y = x.iter().map(|v| v[0].powi(3) / 5.0 - v[0] + v[1].powi(3) / 2.0 - v[1]).collect();
    Dataset::new(x, y, "cubic").unwrap()
}

pub fn cubic_postfit() -> Check {
    let data = cubic_dataset();
    let raw = parse(CUBIC_TEMPLATE).map_err(|e| e.to_string())?;
    let mut pe = parameterize(&raw);
    if pe.n_slots() != 17 {
        return Err(format!("template has {} slots, expected 17", pe.n_slots()));
    }
    let rep = snap_and_refit(&mut pe, &data, &PostfitConfig::default()).map_err(|e| e.to_string())?;
    let fitted = pe.instantiate(&rep.final_coeffs);
    let text = format(&fitted);
    if pe.n_terms() != 4 || rep.dropped_terms != 13 {
        return Err(format!("{} terms survive ({} dropped): {text}", pe.n_terms(), rep.dropped_terms));
    }
    let mut cubic = Vec::new();
    let mut linear = 0;
    for (k, c) in rep.final_coeffs.iter().enumerate() {
        if pe.frozen[k] && *c == -1.0 {
            linear += 1;
        } else if !pe.frozen[k] {
            cubic.push(*c);
        }
    }
    cubic.sort_by(f64::total_cmp);
    let ok = linear == 2 && cubic.len() == 2 && (cubic[0] - 0.2).abs() < 1e-6 && (cubic[1] - 0.5).abs() < 1e-6;
    if !ok {
        return Err(format!("unexpected coefficients {:?} (frozen {:?}): {text}", rep.final_coeffs, pe.frozen));
    }
    Ok(format!("17 slots -> {text} (mse {:.1e})", rep.final_mse))
}

pub const RECOVERY_CASES: [&str; 6] = ["Korns-1", "Korns-3", "ODE-12", "Livermore-14", "AIFeynman2-3", "AIFeynman2-5"];

pub fn recovery(seeds: u64) -> Check {
    let cfg = EngineConfig::default();
    let seeds: Vec<u64> = (0..seeds).collect();
    let mut lines = Vec::new();
    let mut missed = Vec::new();
    for name in RECOVERY_CASES {
        let case = find_case(name).map_err(|e| e.to_string())?;
        let suite = case.suite().to_string();
        let rep = run_suite(&suite, &[case], &cfg, &[Mode::Full], &seeds);
        let c = &rep.cases[0];
        lines.push(format!("{name} {}/{}", c.successes, seeds.len()));
        if !c.optimal {
            missed.push(format!("{name} (best {})", c.best_expression));
        }
    }
    if missed.is_empty() {
        Ok(lines.join(", "))
    } else {
        Err(format!("not recovered: {}; {}", missed.join(", "), lines.join(", ")))
    }
}

pub fn ablation(seeds: u64, max_epoch: usize) -> Check {
    let cfg = EngineConfig { max_epoch, ..EngineConfig::default() };
    let cases = builtin_cases("Korns").map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = (0..seeds).collect();
    let rep = run_suite("Korns", &cases, &cfg, &[Mode::Full, Mode::NoGd, Mode::RandPrune], &seeds);
    let count = |m: Mode| rep.summary.iter().find(|s| s.mode == m).map_or(0, |s| s.optimal_count);
    let (full, no_gd, rand) = (count(Mode::Full), count(Mode::NoGd), count(Mode::RandPrune));
    let msg = format!("optimal full {full}, no_gd {no_gd}, rand_prune {rand} over {} seeds", seeds.len());
    if full >= no_gd && full >= rand {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn restoration() -> Result<(), String> {
    let case = find_case("Korns-2").map_err(|e| e.to_string())?;
    let data = sample_dataset(&case, 0).map_err(|e| e.to_string())?;
    let cfg = EngineConfig { max_epoch: 300, ..EngineConfig::default() };
    let shape = build_shape(data.dim(), cfg.layers);
    let cols = Columns::from_rows(shape.dim(), &data.x).unwrap();
    let mut seen: Vec<WeightStore> = Vec::new();
    let mut event = 0;
    let res = train_with(&shape, &data, &cfg.train(), &cfg.protection(), TrainOptions::default(), |w, _| {
        let before = w.clone();
        let out = prune_event(&shape, w, &cols, &data, &cfg, event, None);
        event += 1;
        assert!(before.values().iter().zip(w.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        seen.push(w.clone());
        PruneOutcome { best_mask: out.best_mask, candidates: Vec::new() }
    })
    .map_err(|e| e.to_string())?;
    // no candidates means no early stop, so the last event sees the final weights
    let last = seen.last().ok_or("no prune events")?;
    if !last.values().iter().zip(res.weights.values()).all(|(a, b)| a.to_bits() == b.to_bits()) {
        return Err("final weights differ from the weights seen by the last prune".into());
    }
    if seen.len() > 1 {
        let first_event = &seen[0];
        let mut replay = Vec::new();
        train_with(
            &shape,
            &data,
            &TrainConfig { max_epoch: cfg.prune_interval, ..cfg.train() },
            &cfg.protection(),
            TrainOptions::default(),
            |w, _| {
                replay.push(w.clone());
                PruneOutcome { best_mask: None, candidates: Vec::new() }
            },
        )
        .map_err(|e| e.to_string())?;
        if replay[0].values().iter().zip(first_event.values()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err("weights at the first prune depend on the callback".into());
        }
    }
    Ok(())
}

fn min_mse_monotone() -> Result<usize, String> {
    let case = find_case("Koza-1").map_err(|e| e.to_string())?;
    let data = sample_dataset(&case, 1).map_err(|e| e.to_string())?;
    let cfg = EngineConfig { max_epoch: 600, ..EngineConfig::default() };
    let res = search(&data, &cfg, RunLogs::default()).map_err(|e| e.to_string())?;
    for pair in res.history.windows(2) {
        if pair[1].min_mse > pair[0].min_mse {
            return Err(format!("min_mse rose from {} to {} at epoch {}", pair[0].min_mse, pair[1].min_mse, pair[1].epoch));
        }
    }
    for ev in &res.history {
        let best_here = ev.candidates.iter().map(|c| c.mse).fold(f64::INFINITY, f64::min);
        if ev.min_mse > best_here {
            return Err(format!("min_mse {} above a candidate {best_here} at epoch {}", ev.min_mse, ev.epoch));
        }
    }
    Ok(res.history.len())
}

fn knee_smoothness() -> Result<(), String> {
    for a in [1e-3, 0.01, 0.5] {
        for knee in [a, -a] {
            let d = 1e-9 * a;
            let jump = (reg_phi(knee - d, a) - reg_phi(knee + d, a)).abs();
            let slope = (reg_phi_grad(knee - d, a) - reg_phi_grad(knee + d, a)).abs();
            let scale = reg_phi_grad(knee + d, a).abs();
            if jump > 1e-6 * reg_phi(knee, a) || slope > 1e-6 * scale {
                return Err(format!("a={a}: value jump {jump:e}, slope jump {slope:e} at {knee}"));
            }
        }
        if reg_phi(0.0, a) <= 0.0 || reg_phi_grad(0.0, a) != 0.0 {
            return Err(format!("a={a}: phi(0)={} phi'(0)={}", reg_phi(0.0, a), reg_phi_grad(0.0, a)));
        }
    }
    Ok(())
}

fn csv_roundtrip(sets: usize) -> Result<(), String> {
    let mut r = rng(7);
    for _ in 0..sets {
        let d = r.gen_range(1..=4);
        let n = r.gen_range(1..=40);
        let wide = |r: &mut rand_chacha::ChaCha8Rng| r.gen_range(-1.0..1.0) * 10f64.powi(r.gen_range(-300..300));
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| wide(&mut r)).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| wide(&mut r)).collect();
        let data = Dataset::new(x, y, "rt").unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &data).map_err(|e| e.to_string())?;
        let back = read_csv(buf.as_slice(), "rt").map_err(|e| e.to_string())?;
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        if bits(&back.y) != bits(&data.y) || back.x.iter().zip(&data.x).any(|(a, b)| bits(a) != bits(b)) {
            return Err("CSV round trip changed a value".into());
        }
    }
    Ok(())
}

fn grammar_roundtrip(exprs: usize) -> Result<(), String> {
    let mut r = rng(8);
    for _ in 0..exprs {
        let depth = r.gen_range(0..=8);
        let e: Expr = random_expr(&mut r, depth, 3, 2);
        let text = format(&e);
        let back = parse(&text).map_err(|err| format!("'{text}': {err}"))?;
        if back != e {
            return Err(format!("'{text}' parses to '{}'", format(&back)));
        }
    }
    Ok(())
}

pub fn property_suite() -> Check {
    restoration().map_err(|e| format!("weight restoration: {e}"))?;
    let events = min_mse_monotone().map_err(|e| format!("min_mse: {e}"))?;
    knee_smoothness().map_err(|e| format!("reg knee: {e}"))?;
    csv_roundtrip(200).map_err(|e| format!("csv: {e}"))?;
    grammar_roundtrip(1000).map_err(|e| format!("grammar: {e}"))?;
    Ok(format!("restoration bitwise, min_mse monotone over {events} events, knee C1, 200 CSV and 1000 grammar round trips"))
}
