use prunesym::bench::{builtin_cases, corpus, find_case, judge_equivalence, run_suite, sample_dataset, SuiteReport, SUITES};
use prunesym::engine::{EngineConfig, Mode};
use prunesym::expr::parse;

#[test]
fn suite_sizes() {
    let sizes: Vec<usize> = SUITES.iter().map(|s| builtin_cases(s).unwrap().len()).collect();
    assert_eq!(sizes, vec![16, 7, 12, 16, 12, 24]);
    assert_eq!(builtin_cases("all").unwrap().len(), 87);
    assert!(builtin_cases("Nope").is_err());
}

#[test]
fn every_case_samples_finite_data_in_range() {
    for case in corpus() {
        assert!(case.truth.min_dim() <= case.dim, "{}", case.name);
        let d = sample_dataset(case, 3).unwrap();
        assert_eq!(d.len(), 128);
        assert_eq!(d.dim(), case.dim);
        for row in &d.x {
            for (v, (lo, hi)) in row.iter().zip(&case.ranges) {
                assert!(*v >= *lo && *v <= *hi, "{}", case.name);
            }
        }
        assert_eq!(d, sample_dataset(case, 3).unwrap());
    }
}

#[test]
fn judge_accepts_rewrites_and_rejects_perturbations() {
    let case = find_case("Korns-4").unwrap();
    let rewrite = parse("213.80940889 - 213.80940889*exp(-0.54723748542*x1)").unwrap();
    assert!(judge_equivalence(&rewrite, &case.truth, &case.ranges));
    let off = parse("213.8094 - 213.80940889*exp(-0.54723748542*x1)").unwrap();
    assert!(!judge_equivalence(&off, &case.truth, &case.ranges));
    let feyn = find_case("AIFeynman2-5").unwrap();
    assert!(judge_equivalence(&parse("x1*(1/x2)").unwrap(), &feyn.truth, &feyn.ranges));
    assert!(!judge_equivalence(&parse("x1/x2 + 0.01").unwrap(), &feyn.truth, &feyn.ranges));
}

#[test]
fn small_suite_run_reports_and_serializes() {
    let cases = vec![find_case("Korns-1").unwrap()];
    let cfg = EngineConfig { max_epoch: 200, ..EngineConfig::default() };
    let rep = run_suite("Korns", &cases, &cfg, &[Mode::Full, Mode::RandPrune], &[0, 1]);
    assert_eq!(rep.cases.len(), 2);
    let full = &rep.cases[0];
    assert_eq!(full.mode, Mode::Full);
    assert_eq!(full.runs.len(), 2);
    assert!(full.optimal && full.successes == 2);
    let votes: usize = rep.summary.iter().map(|s| s.votes).sum();
    assert!(votes >= 1);
    let text = serde_json::to_string(&rep).unwrap();
    let back: SuiteReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back.cases[0].best_expression, full.best_expression);
}
