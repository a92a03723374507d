//! Seeded experiment runs: problem construction, algorithm dispatch, CSV traces and
//! summary records.

mod config;
mod slope;

pub use config::{suggest_key, AlgoName, AlgoSpec, ExperimentConfig, ProblemSpec, RunSpec, KEYS};
pub use slope::{default_window, fit_line, fit_loglog_slope, SlopeFit, MIN_FIT_POINTS};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_baseline, BaselineConfig};
use crate::epoch_sgd::EpochSgdConfig;
use crate::problem::{
    make_example, make_hypercleaning, make_scaled_separable, ExampleId, NoiseModel, StochasticBilevelProblem,
};
use crate::trace::IterateTrace;
use crate::unibio::{theory_schedule, unibio_run, NeumannScale, RunMode, TheoryOptions, UniBiOConfig};
use crate::{Result, Vector};

pub const SUMMARY_FILE: &str = "summary.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInfo {
    pub name: &'static str,
    pub description: &'static str,
}

pub fn list_problems() -> Vec<ProblemInfo> {
    vec![
        ProblemInfo {
            name: "ex1",
            description: "1-D quartic lower level, linear-cubic upper level (p = 4 only)",
        },
        ProblemInfo {
            name: "ex3",
            description: "1-D |y|^p/p lower level with a sine coupling, even p >= 2",
        },
        ProblemInfo {
            name: "ex4",
            description: "separable d-dimensional version of ex3 with a power-sum upper level",
        },
        ProblemInfo {
            name: "scaled",
            description: "separable instance with lower-level curvature `problem.scale`",
        },
        ProblemInfo {
            name: "hypercleaning",
            description: "label-noise reweighting on synthetic data with an l_p regularized regression lower level",
        },
    ]
}

/// Tuned UniBiO upper step for the synthetic sweeps.
pub fn tuned_unibio_eta(p: f64) -> f64 {
    match p as i64 {
        2 => 0.05,
        4 => 0.03,
        6 => 0.02,
        8 => 0.01,
        _ => 0.02,
    }
}

pub fn build_problem(spec: &ProblemSpec, p: f64, seed: u64) -> Result<StochasticBilevelProblem> {
    let noise = NoiseModel::gaussian(seed);
    let problem = match spec.name.as_str() {
        "scaled" => make_scaled_separable(spec.scale, p, spec.dim, noise)?,
        "hypercleaning" => {
            let mut params = spec.hypercleaning;
            params.p = p;
            params.data_seed = params.data_seed.wrapping_add(seed);
            make_hypercleaning(&params, noise)?
        }
        name => make_example(name.parse::<ExampleId>()?, p, spec.dim, noise)?,
    };
    problem.with_noise_levels(spec.sigma_f, spec.sigma_g1, spec.sigma_g2)
}

/// Initial point `(x0, y0)` for a problem built from `spec`.
pub fn initial_point(spec: &ProblemSpec, problem: &StochasticBilevelProblem) -> (Vector, Vector) {
    let (dx, dy) = problem.dims();
    if spec.name == "hypercleaning" {
        (Vector::zeros(dx), Vector::zeros(dy))
    } else {
        (Vector::from_element(dx, spec.x0), Vector::from_element(dy, spec.y0))
    }
}

/// One scheduled run.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub p_index: usize,
    pub p: f64,
    pub algo: AlgoName,
    pub seed: u64,
}

pub fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for (p_index, &p) in cfg.problem.p.iter().enumerate() {
        for &algo in &cfg.algo.names {
            for s in 0..cfg.run.seeds {
                out.push(Job {
                    p_index,
                    p,
                    algo,
                    seed: cfg.run.seed_base + s,
                });
            }
        }
    }
    out
}

pub fn unibio_config(
    cfg: &ExperimentConfig,
    job: &Job,
    problem: &StochasticBilevelProblem,
    x0: &Vector,
    y0: &Vector,
) -> Result<UniBiOConfig> {
    let al = &cfg.algo;
    let default_scale = if cfg.problem.name == "hypercleaning" {
        NeumannScale::Adaptive { factor: 1.2, iters: 20 }
    } else {
        NeumannScale::Problem
    };
    match al.mode {
        RunMode::Practical => {
            let eta = match al.eta_ul.len() {
                0 => tuned_unibio_eta(job.p),
                1 => al.eta_ul[0],
                _ => al.eta_ul[job.p_index],
            };
            let epoch = EpochSgdConfig {
                gamma1: al.eta_ll.unwrap_or(1.0),
                t1: al.t1,
                d1: al.d1,
                t_total: al.lower_budget,
                p: job.p,
            };
            Ok(UniBiOConfig {
                eta,
                beta: al.beta,
                interval: al.interval,
                q_neumann: al.q,
                t_outer: cfg.run.t,
                epoch_warm: epoch,
                epoch_refresh: epoch,
                mode: RunMode::Practical,
                neumann_scale: al.neumann_scale.unwrap_or(default_scale),
                keep_iterates: false,
            })
        }
        RunMode::Theory => {
            let init_dist = problem
                .optimal_y(x0)
                .map(|ys| (y0 - ys).norm())
                .filter(|d| *d > 0.0)
                .unwrap_or(1.0);
            let opts = TheoryOptions {
                t_cap: cfg.run.t,
                k_cap: al.k_cap,
                init_dist,
                ..TheoryOptions::default()
            };
            let mut schedule = theory_schedule(problem.constants(), al.eps, al.delta, &opts)?.config;
            if let Some(scale) = al.neumann_scale {
                schedule.neumann_scale = scale;
            }
            Ok(schedule)
        }
    }
}

pub fn baseline_config(cfg: &ExperimentConfig, kind: crate::baselines::BaselineKind) -> BaselineConfig {
    let al = &cfg.algo;
    let mut b = BaselineConfig::tuned(kind);
    if let Some(eta) = al.eta_ul.first() {
        b.eta_ul = *eta;
    }
    if let Some(eta) = al.eta_ll {
        b.eta_ll = eta;
    }
    b.inner_steps = al.inner_steps;
    b.q_neumann = al.q;
    b.beta = al.beta;
    b.eta_z = al.eta_z;
    b.t_outer = cfg.run.t;
    if let Some(NeumannScale::Fixed(c)) = al.neumann_scale {
        b.cap_c = Some(c);
    }
    b
}

/// Runs a single job and returns its trace.
pub fn run_job(cfg: &ExperimentConfig, job: &Job) -> Result<IterateTrace> {
    let problem = build_problem(&cfg.problem, job.p, job.seed)?;
    let (x0, y0) = initial_point(&cfg.problem, &problem);
    match job.algo {
        AlgoName::UniBiO => {
            let ucfg = unibio_config(cfg, job, &problem, &x0, &y0)?;
            unibio_run(&problem, &x0, &y0, &ucfg)
        }
        AlgoName::Baseline(kind) => run_baseline(&problem, &x0, &y0, &baseline_config(cfg, kind)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub problem: String,
    pub p: f64,
    pub algo: String,
    pub seed: u64,
    pub final_avg: f64,
    pub best_avg: f64,
    pub slope: Option<f64>,
    pub oracle_total: u64,
    pub wall_s: f64,
    /// Lower-level gradient calls per lower-level solve (warm start and refreshes).
    pub ll_per_solve: Option<f64>,
    pub diverged: bool,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub problem: String,
    pub p: f64,
    pub algo: String,
    pub runs: usize,
    pub diverged: usize,
    pub median_final_avg: f64,
    pub median_best_avg: f64,
    pub median_slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn trace_file_name(problem: &str, p: f64, algo: AlgoName, seed: u64) -> String {
    format!("{problem}_p{p}_{algo}_seed{seed}.csv")
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Runs every `(p, algorithm, seed)` job of `cfg` on a worker pool.
///
/// Each finished run writes its trace CSV and appends its summary record immediately, so an
/// interrupted experiment keeps every completed run. The summary is rewritten in job order
/// at the end, followed by per-`(p, algorithm)` medians in the aggregate file.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out_dir = cfg.run.out.clone();
    fs::create_dir_all(&out_dir)?;
    let summary_path = out_dir.join(SUMMARY_FILE);
    let sink = Mutex::new(File::create(&summary_path)?);

    let all_jobs = jobs(cfg);
    let execute = |job: &Job| -> Result<RunRecord> {
        let started = Instant::now();
        let trace = run_job(cfg, job)?;
        let wall_s = started.elapsed().as_secs_f64();
        let name = trace_file_name(&cfg.problem.name, job.p, job.algo, job.seed);
        let mut csv = BufWriter::new(File::create(out_dir.join(&name))?);
        trace.write_csv(&mut csv)?;
        csv.flush()?;

        let totals = trace.oracle_totals();
        let ll_per_solve = match job.algo {
            AlgoName::UniBiO => {
                Some(totals.lower as f64 / (1 + trace.rows.len() as u64 / cfg.algo.interval.max(1)) as f64)
            }
            AlgoName::Baseline(_) => None,
        };
        let record = RunRecord {
            problem: cfg.problem.name.clone(),
            p: job.p,
            algo: job.algo.to_string(),
            seed: job.seed,
            final_avg: trace.final_avg(),
            best_avg: trace.best_avg(),
            slope: fit_loglog_slope(&trace.rows, cfg.run.window).ok().map(|f| f.slope),
            oracle_total: totals.total(),
            wall_s,
            ll_per_solve,
            diverged: trace.diverged,
            trace: name,
        };
        let mut file = sink.lock().expect("summary sink poisoned");
        serde_json::to_writer(&mut *file, &record)?;
        file.write_all(b"\n")?;
        file.flush()?;
        Ok(record)
    };

    let results: Vec<Result<RunRecord>> = if cfg.run.parallel == 1 {
        all_jobs.iter().map(execute).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.parallel)
            .build()
            .map_err(|e| crate::Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
        pool.install(|| all_jobs.par_iter().map(execute).collect())
    };
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    drop(sink);
    write_jsonl(&summary_path, &records)?;

    let mut aggregates = Vec::new();
    for &p in &cfg.problem.p {
        for algo in &cfg.algo.names {
            let algo = algo.to_string();
            let group: Vec<&RunRecord> = records.iter().filter(|r| r.p == p && r.algo == algo).collect();
            let mut finals: Vec<f64> = group.iter().map(|r| r.final_avg).collect();
            let mut bests: Vec<f64> = group.iter().map(|r| r.best_avg).collect();
            let mut slopes: Vec<f64> = group.iter().filter_map(|r| r.slope).collect();
            aggregates.push(Aggregate {
                problem: cfg.problem.name.clone(),
                p,
                algo,
                runs: group.len(),
                diverged: group.iter().filter(|r| r.diverged).count(),
                median_final_avg: median(&mut finals),
                median_best_avg: median(&mut bests),
                median_slope: (!slopes.is_empty()).then(|| median(&mut slopes)),
            });
        }
    }
    write_jsonl(&out_dir.join(AGGREGATE_FILE), &aggregates)?;

    Ok(ExperimentReport {
        out_dir,
        records,
        aggregates,
    })
}
