//! Simplified strongly-convex-lower-level comparators sharing the UniBiO oracle interface.
//!
//! * `stocbio`: `inner_steps` lower SGD steps, then one Neumann hypergradient step on `x`.
//! * `ttsa`: one lower SGD step and one Neumann hypergradient step per iteration.
//! * `masoba`: one lower step, an auxiliary `z` tracking `J^{-T} df/dz` by SGD on the
//!   linear system, and a momentum-averaged upper step along `grad_x f - cross z`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::hypergradient::neumann_hypergradient;
use crate::problem::{OracleClock, StochasticBilevelProblem};
use crate::trace::{IterateTrace, TraceRow};
use crate::{Error, Result, Vector};

/// Runs whose upper iterate exceeds this norm are aborted and marked diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Stocbio,
    Ttsa,
    Masoba,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Stocbio => "stocbio",
            BaselineKind::Ttsa => "ttsa",
            BaselineKind::Masoba => "masoba",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stocbio" => Ok(BaselineKind::Stocbio),
            "ttsa" => Ok(BaselineKind::Ttsa),
            "masoba" => Ok(BaselineKind::Masoba),
            other => Err(Error::InvalidConfig(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub algorithm: BaselineKind,
    pub eta_ul: f64,
    pub eta_ll: f64,
    pub inner_steps: u64,
    pub q_neumann: usize,
    pub beta: f64,
    pub eta_z: f64,
    pub t_outer: u64,
    /// Neumann scale; `None` uses the problem's Jacobian bound.
    pub cap_c: Option<f64>,
}

impl BaselineConfig {
    /// Step sizes used for the synthetic comparisons.
    pub fn tuned(algorithm: BaselineKind) -> Self {
        let (eta_ul, eta_ll, eta_z) = match algorithm {
            BaselineKind::Stocbio => (0.5, 0.1, 0.0),
            BaselineKind::Ttsa => (0.1, 0.1, 0.0),
            BaselineKind::Masoba => (1.0, 0.01, 0.01),
        };
        Self {
            algorithm,
            eta_ul,
            eta_ll,
            inner_steps: 5,
            q_neumann: 10,
            beta: 0.9,
            eta_z,
            t_outer: 500,
            cap_c: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        positive("eta_ul", self.eta_ul)?;
        positive("eta_ll", self.eta_ll)?;
        if self.algorithm == BaselineKind::Masoba {
            positive("eta_z", self.eta_z)?;
            if !(0.0..1.0).contains(&self.beta) {
                return Err(Error::InvalidConfig(format!(
                    "beta must lie in [0, 1), got {}",
                    self.beta
                )));
            }
        }
        if self.inner_steps == 0 {
            return Err(Error::InvalidConfig("inner_steps must be at least 1".into()));
        }
        if self.q_neumann == 0 {
            return Err(Error::InvalidConfig("q_neumann must be at least 1".into()));
        }
        if let Some(c) = self.cap_c {
            positive("cap_c", c)?;
        }
        Ok(())
    }
}

pub fn run_baseline(
    problem: &StochasticBilevelProblem,
    x0: &Vector,
    y0: &Vector,
    cfg: &BaselineConfig,
) -> Result<IterateTrace> {
    cfg.validate()?;
    problem.check_dims(x0, y0)?;
    let start = Instant::now();
    let cap_c = cfg.cap_c.unwrap_or(problem.constants().cap_c);
    let mut clock = OracleClock::new();
    let mut trace = IterateTrace::new();
    let mut x = x0.clone();
    let mut y = y0.clone();
    let mut z = Vector::zeros(y.len());
    let mut m = Vector::zeros(x.len());

    for t in 1..=cfg.t_outer {
        let lower_steps = match cfg.algorithm {
            BaselineKind::Stocbio => cfg.inner_steps,
            BaselineKind::Ttsa | BaselineKind::Masoba => 1,
        };
        for _ in 0..lower_steps {
            let g = problem.sample_grad_y_g(&x, &y, &mut clock);
            y -= g * cfg.eta_ll;
        }

        let grad_true = problem.grad_phi(&x).map_or(f64::NAN, |g| g.norm());
        if let Some(ystar) = problem.optimal_y(&x) {
            trace.lower_gap.push((&y - ystar).norm());
        }

        let (direction, est_norm) = match cfg.algorithm {
            BaselineKind::Stocbio | BaselineKind::Ttsa => {
                let h = neumann_hypergradient(problem, &x, &y, cfg.q_neumann, cap_c, &mut clock)?.value;
                let n = h.norm();
                (h, n)
            }
            BaselineKind::Masoba => {
                let upper = problem.sample_upper(&x, &y, &mut clock);
                let cross = problem.sample_cross_grad_g(&x, &y, &mut clock);
                let jac = problem.sample_gen_jacobian_g(&x, &y, &mut clock);
                let d = &upper.grad_x - cross * &z;
                z -= (jac.tr_mul(&z) - &upper.gen_grad) * cfg.eta_z;
                let n = d.norm();
                m = &m * cfg.beta + d * (1.0 - cfg.beta);
                (m.clone(), n)
            }
        };
        x -= &direction * cfg.eta_ul;

        trace.push(TraceRow {
            t,
            grad_true,
            grad_est: est_norm,
            grad_avg: 0.0,
            m_norm: direction.norm(),
            oracles: clock,
            elapsed_s: start.elapsed().as_secs_f64(),
        });

        let norm = x.norm();
        if !norm.is_finite() || norm > DIVERGENCE_NORM || y.iter().any(|v| !v.is_finite()) {
            trace.diverged = true;
            trace.event(t, format!("diverged: ||x|| = {norm:e}"));
            break;
        }
    }

    trace.x_final = x;
    trace.y_final = y;
    Ok(trace)
}
