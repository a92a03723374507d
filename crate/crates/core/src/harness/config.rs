//! Experiment configuration files.
//!
//! The format is one `key = value` pair per line, keys grouped by the `problem.`, `algo.`
//! and `run.` prefixes. `#` starts a comment. List-valued keys take comma-separated values.
//! Every key has a default and unknown keys are errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineKind;
use crate::problem::HypercleaningParams;
use crate::unibio::{NeumannScale, RunMode};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlgoName {
    UniBiO,
    Baseline(BaselineKind),
}

impl std::fmt::Display for AlgoName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlgoName::UniBiO => f.write_str("unibio"),
            AlgoName::Baseline(k) => k.fmt(f),
        }
    }
}

impl FromStr for AlgoName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unibio" => Ok(AlgoName::UniBiO),
            other => other.parse().map(AlgoName::Baseline),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    /// `ex1`, `ex3`, `ex4`, `scaled` or `hypercleaning`.
    pub name: String,
    pub p: Vec<f64>,
    pub dim: usize,
    pub scale: f64,
    pub sigma_f: f64,
    pub sigma_g1: f64,
    pub sigma_g2: f64,
    pub x0: f64,
    pub y0: f64,
    pub hypercleaning: HypercleaningParams,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            name: "ex3".into(),
            p: vec![2.0],
            dim: 1,
            scale: 1.0,
            sigma_f: 0.0,
            sigma_g1: 0.0,
            sigma_g2: 0.0,
            x0: 1.0,
            y0: 1.0,
            hypercleaning: HypercleaningParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoSpec {
    pub names: Vec<AlgoName>,
    pub mode: RunMode,
    /// Upper step sizes; one value, or one per entry of `problem.p`. Empty means tuned defaults.
    pub eta_ul: Vec<f64>,
    pub eta_ll: Option<f64>,
    pub beta: f64,
    pub interval: u64,
    pub q: usize,
    pub inner_steps: u64,
    pub eta_z: f64,
    pub lower_budget: u64,
    pub t1: u64,
    pub d1: f64,
    pub neumann_scale: Option<NeumannScale>,
    pub eps: f64,
    pub delta: f64,
    pub k_cap: u64,
}

impl Default for AlgoSpec {
    fn default() -> Self {
        Self {
            names: vec![AlgoName::UniBiO],
            mode: RunMode::Practical,
            eta_ul: Vec::new(),
            eta_ll: None,
            beta: 0.9,
            interval: 2,
            q: 10,
            inner_steps: 5,
            eta_z: 0.01,
            lower_budget: 100,
            t1: 5,
            d1: 1.0,
            neumann_scale: None,
            eps: 0.3,
            delta: 0.1,
            k_cap: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    /// Outer iterations; also the horizon cap in theory mode.
    pub t: u64,
    pub seeds: u64,
    pub seed_base: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses every logical core.
    pub parallel: usize,
    pub window: Option<(u64, u64)>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            t: 500,
            seeds: 1,
            seed_base: 0,
            out: PathBuf::from("out"),
            parallel: 0,
            window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub algo: AlgoSpec,
    pub run: RunSpec,
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "problem.name",
    "problem.p",
    "problem.dim",
    "problem.scale",
    "problem.sigma",
    "problem.sigma_f",
    "problem.sigma_g1",
    "problem.sigma_g2",
    "problem.x0",
    "problem.y0",
    "problem.n",
    "problem.d",
    "problem.n_val",
    "problem.flip_prob",
    "problem.reg_c",
    "problem.data_seed",
    "algo.name",
    "algo.mode",
    "algo.eta_ul",
    "algo.eta_ll",
    "algo.beta",
    "algo.interval",
    "algo.q",
    "algo.inner_steps",
    "algo.eta_z",
    "algo.lower_budget",
    "algo.t1",
    "algo.d1",
    "algo.neumann_scale",
    "algo.eps",
    "algo.delta",
    "algo.k_cap",
    "run.t",
    "run.seeds",
    "run.seed_base",
    "run.out",
    "run.parallel",
    "run.window",
];

const ALIASES: &[(&str, &str)] = &[
    ("learningrate", "algo.eta_ul"),
    ("lr", "algo.eta_ul"),
    ("stepsize", "algo.eta_ul"),
    ("eta", "algo.eta_ul"),
    ("momentum", "algo.beta"),
    ("algorithm", "algo.name"),
    ("neumann", "algo.q"),
    ("iterations", "run.t"),
    ("iters", "run.t"),
    ("steps", "run.t"),
    ("repeat", "run.seeds"),
    ("repeats", "run.seeds"),
    ("seed", "run.seed_base"),
    ("threads", "run.parallel"),
    ("jobs", "run.parallel"),
    ("output", "run.out"),
    ("outdir", "run.out"),
    ("noise", "problem.sigma"),
    ("exponent", "problem.p"),
    ("example", "problem.name"),
];

/// Closest accepted key to an unknown one.
pub fn suggest_key(key: &str) -> Option<&'static str> {
    let normalized: String = key
        .rsplit('.')
        .next()
        .unwrap_or(key)
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase();
    if let Some((_, target)) = ALIASES.iter().find(|(alias, _)| *alias == normalized) {
        return Some(target);
    }
    KEYS.iter()
        .map(|k| {
            let tail = k.rsplit('.').next().unwrap_or(k);
            let score = strsim::jaro_winkler(key, k).max(strsim::jaro_winkler(&normalized, &tail.replace('_', "")));
            (score, *k)
        })
        .filter(|(score, _)| *score >= 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k)
}

fn list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| format!("cannot parse `{}`", s.trim()))
        })
        .collect()
}

fn one<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse::<T>().map_err(|_| format!("cannot parse `{value}`"))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses config text; `source` names the input in error messages.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::ConfigParse {
                path: source.to_string(),
                line: idx + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                let hint = suggest_key(key).map_or(String::new(), |s| format!("; did you mean `{s}`?"));
                return Err(err(format!("unknown key `{key}`{hint}")));
            }
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (pr, al, ru) = (&mut self.problem, &mut self.algo, &mut self.run);
        let hc = &mut pr.hypercleaning;
        match key {
            "problem.name" => pr.name = value.to_string(),
            "problem.p" => pr.p = list(value)?,
            "problem.dim" => pr.dim = one(value)?,
            "problem.scale" => pr.scale = one(value)?,
            "problem.sigma" => {
                let s = one(value)?;
                (pr.sigma_f, pr.sigma_g1, pr.sigma_g2) = (s, s, s);
            }
            "problem.sigma_f" => pr.sigma_f = one(value)?,
            "problem.sigma_g1" => pr.sigma_g1 = one(value)?,
            "problem.sigma_g2" => pr.sigma_g2 = one(value)?,
            "problem.x0" => pr.x0 = one(value)?,
            "problem.y0" => pr.y0 = one(value)?,
            "problem.n" => hc.n = one(value)?,
            "problem.d" => hc.d = one(value)?,
            "problem.n_val" => hc.n_val = one(value)?,
            "problem.flip_prob" => hc.flip_prob = one(value)?,
            "problem.reg_c" => hc.reg_c = one(value)?,
            "problem.data_seed" => hc.data_seed = one(value)?,
            "algo.name" => {
                al.names = value
                    .split(',')
                    .map(|s| s.trim().parse::<AlgoName>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "algo.mode" => {
                al.mode = match value {
                    "practical" => RunMode::Practical,
                    "theory" => RunMode::Theory,
                    other => return Err(format!("expected `practical` or `theory`, found `{other}`")),
                }
            }
            "algo.eta_ul" => al.eta_ul = list(value)?,
            "algo.eta_ll" => al.eta_ll = Some(one(value)?),
            "algo.beta" => al.beta = one(value)?,
            "algo.interval" => al.interval = one(value)?,
            "algo.q" => al.q = one(value)?,
            "algo.inner_steps" => al.inner_steps = one(value)?,
            "algo.eta_z" => al.eta_z = one(value)?,
            "algo.lower_budget" => al.lower_budget = one(value)?,
            "algo.t1" => al.t1 = one(value)?,
            "algo.d1" => al.d1 = one(value)?,
            "algo.neumann_scale" => {
                al.neumann_scale = Some(match value {
                    "problem" => NeumannScale::Problem,
                    "adaptive" => NeumannScale::Adaptive { factor: 1.2, iters: 20 },
                    number => NeumannScale::Fixed(one(number)?),
                })
            }
            "algo.eps" => al.eps = one(value)?,
            "algo.delta" => al.delta = one(value)?,
            "algo.k_cap" => al.k_cap = one(value)?,
            "run.t" => ru.t = one(value)?,
            "run.seeds" => ru.seeds = one(value)?,
            "run.seed_base" => ru.seed_base = one(value)?,
            "run.out" => ru.out = PathBuf::from(value),
            "run.parallel" => ru.parallel = one(value)?,
            "run.window" => {
                let (a, b) = value.split_once(':').ok_or("expected `A:B`")?;
                ru.window = Some((one(a.trim())?, one(b.trim())?));
            }
            _ => unreachable!("key table and setter disagree on `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        const NAMES: [&str; 5] = ["ex1", "ex3", "ex4", "scaled", "hypercleaning"];
        if !NAMES.contains(&self.problem.name.as_str()) {
            return bad(format!("unknown problem `{}`; see `list-problems`", self.problem.name));
        }
        if self.problem.p.is_empty() || self.algo.names.is_empty() {
            return bad("problem.p and algo.name need at least one value".into());
        }
        let n_eta = self.algo.eta_ul.len();
        if n_eta > 1 && n_eta != self.problem.p.len() {
            return bad(format!(
                "algo.eta_ul has {n_eta} values for {} values of problem.p",
                self.problem.p.len()
            ));
        }
        if self.run.t == 0 || self.run.seeds == 0 {
            return bad("run.t and run.seeds must be at least 1".into());
        }
        if let Some((a, b)) = self.run.window {
            if a > b {
                return bad(format!("run.window {a}:{b} is empty"));
            }
        }
        if [self.problem.sigma_f, self.problem.sigma_g1, self.problem.sigma_g2]
            .iter()
            .any(|s| !(*s >= 0.0))
        {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }
}
