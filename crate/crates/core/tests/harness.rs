use std::fs::File;
use std::io::{BufRead, BufReader};

use unibio_core::harness::{
    fit_loglog_slope, run_experiment, trace_file_name, AlgoName, ExperimentConfig, RunRecord, SUMMARY_FILE,
};
use unibio_core::trace::{read_rows, TraceRow};

fn config(text: &str, out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(text, "test").unwrap();
    cfg.run.out = out.to_path_buf();
    cfg
}

fn rows_of(path: &std::path::Path) -> Vec<TraceRow> {
    read_rows(BufReader::new(File::open(path).unwrap())).unwrap()
}

fn summary(dir: &std::path::Path) -> Vec<RunRecord> {
    BufReader::new(File::open(dir.join(SUMMARY_FILE)).unwrap())
        .lines()
        .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
        .collect()
}

#[test]
fn zero_noise_seeds_give_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        "problem.name = ex3\nproblem.p = 4\nrun.t = 200\nrun.seeds = 5\n",
        dir.path(),
    );
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.records.len(), 5);
    let traces: Vec<Vec<TraceRow>> = (0..5)
        .map(|seed| rows_of(&dir.path().join(trace_file_name("ex3", 4.0, AlgoName::UniBiO, seed))))
        .collect();
    let strip =
        |rows: &[TraceRow]| -> Vec<TraceRow> { rows.iter().map(|r| TraceRow { elapsed_s: 0.0, ..*r }).collect() };
    for other in &traces[1..] {
        assert_eq!(strip(other), strip(&traces[0]));
    }
}

#[test]
fn deterministic_sweep_writes_traces_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        "problem.name = ex3\nproblem.p = 2, 4, 6, 8\nalgo.eta_ul = 0.05, 0.03, 0.02, 0.01\nrun.t = 500\n",
        dir.path(),
    );
    let report = run_experiment(&cfg).unwrap();
    let records = summary(dir.path());
    assert_eq!(records.len(), 4);
    for (rec, p) in records.iter().zip([2.0, 4.0, 6.0, 8.0]) {
        assert_eq!(rec.p, p);
        assert!(dir.path().join(&rec.trace).exists());
    }
    let finals: Vec<f64> = report.aggregates.iter().map(|a| a.median_final_avg).collect();
    assert!(finals.windows(2).all(|w| w[0] < w[1]), "{finals:?}");
}

#[test]
fn csv_round_trip_preserves_slope_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        "problem.name = ex3\nproblem.p = 2\nproblem.sigma = 0.1\nrun.t = 300\n",
        dir.path(),
    );
    let report = run_experiment(&cfg).unwrap();
    let rec = &report.records[0];
    let rows = rows_of(&dir.path().join(&rec.trace));
    let fit = fit_loglog_slope(&rows, None).unwrap();
    assert_eq!(Some(fit.slope), rec.slope);

    let mut buf = Vec::new();
    unibio_core::trace::write_rows(&rows, &mut buf).unwrap();
    let again = read_rows(BufReader::new(buf.as_slice())).unwrap();
    assert_eq!(
        fit_loglog_slope(&again, Some((20, 250))).unwrap(),
        fit_loglog_slope(&rows, Some((20, 250))).unwrap()
    );
}

#[test]
fn summary_totals_match_row_increments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        "problem.name = ex4\nproblem.dim = 3\nproblem.p = 4\nproblem.sigma = 0.1\nalgo.name = unibio, stocbio, ttsa, masoba\nrun.t = 120\n",
        dir.path(),
    );
    run_experiment(&cfg).unwrap();
    let records = summary(dir.path());
    assert_eq!(records.len(), 4);
    for rec in records {
        let rows = rows_of(&dir.path().join(&rec.trace));
        let mut sum = 0;
        let mut prev = 0;
        for r in &rows {
            let total = r.oracles.total();
            assert!(total >= prev);
            sum += total - prev;
            prev = total;
        }
        let first_prefix = rows[0].oracles.total();
        assert!(first_prefix > 0);
        assert_eq!(rec.oracle_total, sum, "{}", rec.algo);
    }
}

#[test]
fn interrupted_runs_leave_completed_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("problem.name = ex3\nproblem.p = 2, 3\nrun.t = 50\n", dir.path());
    assert!(run_experiment(&cfg).is_err());
    let partial = summary(dir.path());
    assert_eq!(partial.len(), 1);
    assert_eq!(partial[0].p, 2.0);

    let cfg = config(
        "problem.name = ex3\nproblem.p = 2, 4\nrun.t = 50\nrun.parallel = 2\n",
        dir.path(),
    );
    let report = run_experiment(&cfg).unwrap();
    let records = summary(dir.path());
    assert_eq!(records, report.records);
}
