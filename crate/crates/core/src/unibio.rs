//! UniBiO: normalized momentum on Neumann hypergradients with an Epoch-SGD lower level.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::epoch_sgd::{epoch_sgd, theory_epoch_config, EpochSgdConfig};
use crate::hypergradient::{
    bias_constant, estimate_jacobian_radius, estimator_variance_bound, neumann_hypergradient, BiasConstants,
};
use crate::problem::{OracleClock, ProblemConstants, StochasticBilevelProblem};
use crate::trace::{IterateTrace, TraceRow};
use crate::{Error, Result, Vector};

/// Momentum norms below this count as zero and produce no step.
pub const ZERO_MOMENTUM: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Practical,
    Theory,
}

/// How the Neumann series scale `C` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeumannScale {
    /// The bound carried in the problem constants.
    Problem,
    Fixed(f64),
    /// `factor` times a power-iteration estimate of the Jacobian spectral radius,
    /// re-estimated after the warm start and after every refresh.
    Adaptive {
        factor: f64,
        iters: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniBiOConfig {
    pub eta: f64,
    pub beta: f64,
    pub interval: u64,
    pub q_neumann: usize,
    pub t_outer: u64,
    pub epoch_warm: EpochSgdConfig,
    pub epoch_refresh: EpochSgdConfig,
    pub mode: RunMode,
    pub neumann_scale: NeumannScale,
    /// Keep `(x_t, y_t)` for every step in the trace.
    pub keep_iterates: bool,
}

impl UniBiOConfig {
    /// Settings of the synthetic sweeps: `beta = 0.9`, `I = 2`, `Q = 10`, `T = 500` and
    /// lower-level Epoch-SGD with step `lower_step`, `T1 = 5`, `D1 = 1` and budget 100.
    pub fn practical(p: f64, eta: f64, lower_step: f64) -> Self {
        let epoch = EpochSgdConfig {
            gamma1: lower_step,
            t1: 5,
            d1: 1.0,
            t_total: 100,
            p,
        };
        Self {
            eta,
            beta: 0.9,
            interval: 2,
            q_neumann: 10,
            t_outer: 500,
            epoch_warm: epoch,
            epoch_refresh: epoch,
            mode: RunMode::Practical,
            neumann_scale: NeumannScale::Problem,
            keep_iterates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidConfig(format!("eta must be positive, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!(
                "beta must lie in [0, 1), got {}",
                self.beta
            )));
        }
        if self.interval == 0 {
            return Err(Error::InvalidConfig("refresh interval must be at least 1".into()));
        }
        if self.q_neumann == 0 {
            return Err(Error::InvalidConfig("q_neumann must be at least 1".into()));
        }
        match self.neumann_scale {
            NeumannScale::Fixed(c) if !(c > 0.0) => {
                return Err(Error::InvalidConfig(format!("Neumann scale must be positive, got {c}")))
            }
            NeumannScale::Adaptive { factor, iters } if !(factor > 0.0) || iters == 0 => {
                return Err(Error::InvalidConfig(
                    "adaptive Neumann scale needs factor > 0 and iters >= 1".into(),
                ))
            }
            _ => {}
        }
        self.epoch_warm.validate()?;
        self.epoch_refresh.validate()
    }

    /// Oracle calls a run with this config consumes, when the Neumann scale is not adaptive.
    pub fn analytic_oracle_count(&self) -> OracleClock {
        let t = self.t_outer;
        let q = self.q_neumann as u64;
        OracleClock {
            upper: t,
            lower: self.epoch_warm.steps_used() + (t / self.interval) * self.epoch_refresh.steps_used(),
            cross: t,
            gen_jacobian: t * q * (q - 1) / 2,
        }
    }
}

fn scale_for(
    cfg: &UniBiOConfig,
    problem: &StochasticBilevelProblem,
    x: &Vector,
    y: &Vector,
    clock: &mut OracleClock,
) -> f64 {
    match cfg.neumann_scale {
        NeumannScale::Problem => problem.constants().cap_c,
        NeumannScale::Fixed(c) => c,
        NeumannScale::Adaptive { factor, iters } => {
            let radius = estimate_jacobian_radius(problem, x, y, iters, clock);
            (factor * radius).max(problem.constants().mu)
        }
    }
}

/// Runs UniBiO from `(x0, y0)`. Randomness comes from the problem's noise model, keyed by
/// the per-family oracle counters of this run.
pub fn unibio_run(
    problem: &StochasticBilevelProblem,
    x0: &Vector,
    y0: &Vector,
    cfg: &UniBiOConfig,
) -> Result<IterateTrace> {
    cfg.validate()?;
    problem.check_dims(x0, y0)?;
    let start = Instant::now();
    let mut clock = OracleClock::new();
    let mut trace = IterateTrace::new();

    let warm = epoch_sgd(|w| problem.sample_grad_y_g(x0, w, &mut clock), y0, &cfg.epoch_warm)?;
    if warm.budget_too_small {
        trace.event(0, "warm start budget below first epoch length");
    }
    let mut y = warm.w;
    let mut x = x0.clone();
    let mut cap_c = scale_for(cfg, problem, &x, &y, &mut clock);
    let mut m = Vector::zeros(x.len());

    for t in 1..=cfg.t_outer {
        if t % cfg.interval == 0 {
            let xt = x.clone();
            let out = epoch_sgd(|w| problem.sample_grad_y_g(&xt, w, &mut clock), &y, &cfg.epoch_refresh)?;
            if out.budget_too_small && t == cfg.interval {
                trace.event(t, "refresh budget below first epoch length");
            }
            y = out.w;
            if matches!(cfg.neumann_scale, NeumannScale::Adaptive { .. }) {
                cap_c = scale_for(cfg, problem, &x, &y, &mut clock);
            }
        }

        let sample = neumann_hypergradient(problem, &x, &y, cfg.q_neumann, cap_c, &mut clock)?;
        if sample.value.iter().any(|v| !v.is_finite()) {
            trace.diverged = true;
            trace.event(t, "non-finite hypergradient estimate");
            break;
        }
        m = &m * cfg.beta + &sample.value * (1.0 - cfg.beta);
        let m_norm = m.norm();

        let grad_true = problem.grad_phi(&x).map_or(f64::NAN, |g| g.norm());
        if let Some(ystar) = problem.optimal_y(&x) {
            trace.lower_gap.push((&y - ystar).norm());
        }
        if cfg.keep_iterates {
            trace.iterates.push((x.clone(), y.clone()));
        }

        if m_norm < ZERO_MOMENTUM {
            trace.event(t, "zero momentum, step skipped");
        } else {
            x -= &m * (cfg.eta / m_norm);
        }

        trace.push(TraceRow {
            t,
            grad_true,
            grad_est: sample.value.norm(),
            grad_avg: 0.0,
            m_norm,
            oracles: clock,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
    }

    trace.x_final = x;
    trace.y_final = y;
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryOptions {
    pub c1: f64,
    pub c2: f64,
    pub big_c1: f64,
    pub t_cap: u64,
    /// Cap on every lower-level budget `K_t`.
    pub k_cap: u64,
    /// `||y0 - y*(x0)||`, or an upper bound on it.
    pub init_dist: f64,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        Self {
            c1: 1.0,
            c2: 1.0,
            big_c1: 8.0,
            t_cap: 10_000,
            k_cap: 100_000,
            init_dist: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheorySchedule {
    pub config: UniBiOConfig,
    pub sigma1_sq: f64,
    pub bias: BiasConstants,
    /// Uncapped outer iteration count.
    pub t_theory: u64,
    /// Uncapped refresh budget `K_t` for `t >= 1`.
    pub k_theory: f64,
    pub k_dagger: u64,
    pub delta_tilde: f64,
    /// `mu = C` makes the Neumann count formula degenerate; `Q = 1` is then exact.
    pub q_degenerate: bool,
    pub t_capped: bool,
    pub k_capped: bool,
}

/// Parameter choice with the stationarity guarantee at accuracy `eps` and confidence
/// `1 - delta`, with the outer horizon and lower-level budgets capped by `opts`.
pub fn theory_schedule(
    constants: &ProblemConstants,
    eps: f64,
    delta: f64,
    opts: &TheoryOptions,
) -> Result<TheorySchedule> {
    constants.validate()?;
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(opts.init_dist > 0.0) || opts.t_cap == 0 || opts.k_cap == 0 {
        return Err(Error::Domain("init_dist, t_cap and k_cap must be positive".into()));
    }
    let c = constants;
    let p = c.p;
    let sigma1_sq = estimator_variance_bound(c);
    let bias = bias_constant(c);
    let (lphi1, lphi2, l_p) = (bias.l_phi1, bias.l_phi2, bias.l_p);

    let one_minus_beta = if sigma1_sq > 0.0 {
        (opts.c1 * eps * eps / sigma1_sq).min(1.0)
    } else {
        1.0
    };
    let inner = (one_minus_beta / lphi1)
        .min(p / ((p - 1.0) * lphi1))
        .min(one_minus_beta / (l_p * lphi2));
    let eta = opts.c2
        * (eps * inner)
            .powf(p - 1.0)
            .min(one_minus_beta * eps / lphi2)
            .min(eps / lphi2);
    let interval = (1.0 / one_minus_beta).ceil() as u64;

    let q_degenerate = c.mu >= c.cap_c;
    let q_neumann = if q_degenerate {
        1
    } else {
        let q = ((c.mu * eps / (4.0 * c.lg1 * c.lf0)).ln() / (1.0 - c.mu / c.cap_c).ln()).ceil();
        if q.is_finite() && q >= 1.0 {
            q as usize
        } else {
            1
        }
    };

    let t_theory = (opts.big_c1 * c.delta_phi / (eta * eps)).ceil() as u64;
    let t_outer = t_theory.min(opts.t_cap).max(1);

    let g_refresh = c.l1 / c.l0;
    let g_warm = (2f64.powf(2.0 * c.l1 * opts.init_dist + 1.0) - 1.0) * c.l1 / c.l0;
    let sg1_sq = c.sigma_g1 * c.sigma_g1;
    let tau = 2.0 * (p - 1.0) / p;
    let target = (eps / (2.0 * lphi2)).min(1.0 / (2.0 * c.l1));
    let k_budget = |g: f64, dt: f64| {
        3600.0 * (g * g + sg1_sq) * (p / c.mu).powi(2) * (2.0 / dt).ln().powf(2.0 * (p - 1.0))
            / target.powf(2.0 * (p - 1.0))
    };
    let k_first = |g: f64| 3600.0 * (g * g + sg1_sq) / (g * g);
    let epochs = |k: f64, k1: f64| {
        (((k / k1) * (2f64.powf(tau) - 1.0) + 1.0).log2() / tau)
            .floor()
            .max(1.0) as u64
    };

    // delta_tilde and the epoch count k_dagger depend on each other; iterate to a fixed point.
    let mut k_dagger = 1u64;
    let mut delta_tilde = delta / t_outer as f64;
    for _ in 0..100 {
        delta_tilde = delta / (t_outer as f64 * k_dagger as f64);
        let next = epochs(k_budget(g_refresh, delta_tilde), k_first(g_refresh));
        if next == k_dagger {
            break;
        }
        k_dagger = next;
    }

    let k_theory = k_budget(g_refresh, delta_tilde);
    let k_warm = k_budget(g_warm, delta_tilde);
    let capped = |k: f64| {
        if k.is_finite() && k < opts.k_cap as f64 {
            k.ceil() as u64
        } else {
            opts.k_cap
        }
    };

    let mut warm = theory_epoch_config(g_warm, c.sigma_g1, c.mu, p, delta_tilde, opts.init_dist, capped(k_warm))?;
    warm.t1 = warm.t1.max(1);
    let mut refresh = theory_epoch_config(
        g_refresh,
        c.sigma_g1,
        c.mu,
        p,
        delta_tilde,
        opts.init_dist,
        capped(k_theory),
    )?;
    refresh.d1 = (eps / lphi2).min(1.0 / c.l1);

    Ok(TheorySchedule {
        config: UniBiOConfig {
            eta,
            beta: 1.0 - one_minus_beta,
            interval,
            q_neumann,
            t_outer,
            epoch_warm: warm,
            epoch_refresh: refresh,
            mode: RunMode::Theory,
            neumann_scale: NeumannScale::Problem,
            keep_iterates: false,
        },
        sigma1_sq,
        bias,
        t_theory,
        k_theory,
        k_dagger,
        delta_tilde,
        q_degenerate,
        t_capped: t_theory > opts.t_cap,
        k_capped: !(k_theory < opts.k_cap as f64) || !(k_warm < opts.k_cap as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_example, ExampleId, NoiseModel};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    #[test]
    fn every_step_has_length_eta() {
        let prob = make_example(ExampleId::Ex4, 4.0, 3, NoiseModel::gaussian(2)).unwrap();
        let mut cfg = UniBiOConfig::practical(4.0, 0.03, 1.0);
        cfg.t_outer = 40;
        cfg.keep_iterates = true;
        let trace = unibio_run(&prob, &v(&[1.0, -1.0, 0.5]), &v(&[1.0, 1.0, 1.0]), &cfg).unwrap();
        let mut xs: Vec<Vector> = trace.iterates.iter().map(|(x, _)| x.clone()).collect();
        xs.push(trace.x_final.clone());
        for w in xs.windows(2) {
            assert!(((&w[1] - &w[0]).norm() - 0.03).abs() < 1e-12);
        }
    }

    #[test]
    fn ex3_p2_deterministic_reaches_tolerance() {
        let prob = make_example(ExampleId::Ex3, 2.0, 1, NoiseModel::none()).unwrap();
        let cfg = UniBiOConfig::practical(2.0, 0.05, 1.0);
        let trace = unibio_run(&prob, &v(&[1.0]), &v(&[1.0]), &cfg).unwrap();
        assert_eq!(trace.rows.len(), 500);
        assert!(trace.final_avg() <= 0.1, "{}", trace.final_avg());
    }

    #[test]
    fn ex3_p4_running_average_decreases_after_burn_in() {
        let prob = make_example(ExampleId::Ex3, 4.0, 1, NoiseModel::none()).unwrap();
        let cfg = UniBiOConfig::practical(4.0, 0.02, 1.0);
        let trace = unibio_run(&prob, &v(&[1.0]), &v(&[1.0]), &cfg).unwrap();
        let avgs: Vec<f64> = trace.rows.iter().map(|r| r.grad_avg).collect();
        let burn = avgs.len() / 5;
        assert!(avgs[burn..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn momentum_reconstructs_from_samples() {
        let prob = make_example(ExampleId::Ex3, 4.0, 1, NoiseModel::none()).unwrap();
        let mut cfg = UniBiOConfig::practical(4.0, 0.1, 1.0);
        cfg.t_outer = 3;
        cfg.keep_iterates = true;
        let trace = unibio_run(&prob, &v(&[0.8]), &v(&[0.3]), &cfg).unwrap();
        let c = prob.constants().cap_c;
        let samples: Vec<Vector> = trace
            .iterates
            .iter()
            .map(|(x, y)| {
                neumann_hypergradient(&prob, x, y, 10, c, &mut OracleClock::new())
                    .unwrap()
                    .value
            })
            .collect();
        for t in 0..3 {
            // m_t = (1 - beta) sum_{s <= t} beta^(t - s) sample_s.
            let m: Vector = (0..=t)
                .map(|s| &samples[s] * ((1.0 - cfg.beta) * cfg.beta.powi((t - s) as i32)))
                .fold(Vector::zeros(1), |a, b| a + b);
            assert!((m.norm() - trace.rows[t].m_norm).abs() < 1e-15);
        }
        assert!((trace.rows[0].m_norm - 0.1 * samples[0].norm()).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_takes_no_step() {
        // At x = pi/2 on ex3 the exact hypergradient vanishes.
        let prob = make_example(ExampleId::Ex3, 2.0, 1, NoiseModel::none()).unwrap();
        let x0 = v(&[std::f64::consts::FRAC_PI_2]);
        let mut cfg = UniBiOConfig::practical(2.0, 0.05, 1.0);
        cfg.t_outer = 3;
        cfg.interval = 100;
        let y0 = prob.optimal_y(&x0).unwrap();
        cfg.epoch_warm.t_total = 1;
        cfg.epoch_warm.t1 = 2;
        let trace = unibio_run(&prob, &x0, &y0, &cfg).unwrap();
        assert_eq!(trace.x_final, x0);
        assert!(trace.events.iter().any(|e| e.message.contains("zero momentum")));
    }

    #[test]
    fn refresh_cadence_and_oracle_totals() {
        let prob = make_example(ExampleId::Ex3, 4.0, 1, NoiseModel::gaussian(1)).unwrap();
        let mut cfg = UniBiOConfig::practical(4.0, 0.02, 1.0);
        cfg.t_outer = 37;
        cfg.interval = 5;
        cfg.q_neumann = 4;
        let trace = unibio_run(&prob, &v(&[1.0]), &v(&[1.0]), &cfg).unwrap();
        let expected = cfg.analytic_oracle_count();
        assert_eq!(trace.oracle_totals(), expected);
        assert_eq!(expected.lower, 63 * 8);
        assert_eq!(expected.gen_jacobian, 37 * 6);
    }

    #[test]
    fn rejects_invalid_config() {
        let mut cfg = UniBiOConfig::practical(2.0, 0.05, 1.0);
        cfg.beta = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = UniBiOConfig::practical(2.0, 0.05, 1.0);
        cfg.interval = 0;
        assert!(cfg.validate().is_err());
        let cfg = UniBiOConfig::practical(2.0, 0.0, 1.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn schedule_substitution_examples() {
        let ex3 = make_example(ExampleId::Ex3, 2.0, 1, NoiseModel::none()).unwrap();
        let mut c = *ex3.constants();
        // sigma_1^2 = 6 at zero noise; pick c1 so that c1 eps^2 / sigma_1^2 = 0.01 at eps = 0.1.
        let opts = TheoryOptions {
            c1: 6.0,
            ..TheoryOptions::default()
        };
        let s = theory_schedule(&c, 0.1, 0.1, &opts).unwrap();
        assert!((s.sigma1_sq - 6.0).abs() < 1e-12);
        assert!((1.0 - s.config.beta - 0.01).abs() < 1e-12);
        assert_eq!(s.config.interval, 100);

        assert!(s.q_degenerate);
        assert_eq!(s.config.q_neumann, 1);
        c.cap_c = 2.0;
        let s = theory_schedule(&c, 0.1, 0.1, &opts).unwrap();
        assert!(!s.q_degenerate);
        // ln(0.1 / 4) / ln(0.5) = 5.32.
        assert_eq!(s.config.q_neumann, 6);
    }

    #[test]
    fn schedule_for_ex3_p2() {
        let ex3 = make_example(ExampleId::Ex3, 2.0, 1, NoiseModel::none()).unwrap();
        let s = theory_schedule(ex3.constants(), 0.3, 0.1, &TheoryOptions::default()).unwrap();
        assert!((1.0 - s.config.beta - 0.015).abs() < 1e-12);
        assert_eq!(s.config.interval, 67);
        assert!((s.config.eta - 5.625e-4).abs() < 1e-15);
        assert_eq!(s.t_theory, 94_815);
        assert!(s.t_capped);
        assert_eq!(s.config.t_outer, 10_000);
        assert!((s.bias.l_phi2 - 4.0).abs() < 1e-12);
        assert_eq!(s.config.epoch_refresh.t1, 3600);
        assert!((s.config.epoch_refresh.d1 - 0.075).abs() < 1e-15);
        assert!(s.k_dagger >= 1);
        assert!((s.delta_tilde - 0.1 / (10_000.0 * s.k_dagger as f64)).abs() < 1e-18);
    }

    #[test]
    fn eta_scales_cubically_in_eps_for_p2() {
        let mut c = *make_example(ExampleId::Ex3, 2.0, 1, NoiseModel::none())
            .unwrap()
            .constants();
        c.sigma_f = 1.0;
        c.sigma_g1 = 1.0;
        c.sigma_g2 = 1.0;
        let eta = |eps: f64| {
            theory_schedule(&c, eps, 0.1, &TheoryOptions::default())
                .unwrap()
                .config
                .eta
        };
        let slope = (eta(1e-3).ln() - eta(1e-2).ln()) / (1e-3f64.ln() - 1e-2f64.ln());
        assert!((slope - 3.0).abs() < 1e-9, "{slope}");
    }

    #[test]
    fn schedule_rejects_bad_inputs() {
        let ex3 = make_example(ExampleId::Ex3, 2.0, 1, NoiseModel::none()).unwrap();
        let opts = TheoryOptions::default();
        assert!(theory_schedule(ex3.constants(), 0.0, 0.1, &opts).is_err());
        assert!(theory_schedule(ex3.constants(), 0.1, 1.0, &opts).is_err());
    }
}
