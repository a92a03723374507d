//! Epoch-SGD: projected SGD restarted in shrinking balls.
//!
//! Epoch `k` runs `T_k` projected steps with step `gamma_k` inside the ball
//! `B(w_1^k, D_k)`. The average of its pre-update iterates becomes the next center, then
//! `T_{k+1} = ceil(2^tau T_k)`, `gamma_{k+1} = gamma_k / 2` and `D_{k+1} = D_k / 2^(1/p)`
//! with `tau = 2(p-1)/p`. Epochs run while the cumulative length fits in the budget.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSgdConfig {
    pub gamma1: f64,
    pub t1: u64,
    pub d1: f64,
    /// Total number of gradient calls available.
    pub t_total: u64,
    pub p: f64,
}

impl EpochSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 > 0.0) || !self.gamma1.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "gamma1 must be positive, got {}",
                self.gamma1
            )));
        }
        if !(self.d1 > 0.0) || !self.d1.is_finite() {
            return Err(Error::InvalidConfig(format!("d1 must be positive, got {}", self.d1)));
        }
        if self.t1 == 0 || self.t_total == 0 {
            return Err(Error::InvalidConfig("t1 and t_total must be at least 1".into()));
        }
        if !(self.p >= 2.0) || !self.p.is_finite() {
            return Err(Error::InvalidConfig(format!("p must be at least 2, got {}", self.p)));
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        2.0 * (self.p - 1.0) / self.p
    }

    /// Lengths of the epochs that complete within the budget.
    pub fn schedule(&self) -> Vec<u64> {
        let growth = 2f64.powf(self.tau());
        let mut lengths = Vec::new();
        let mut len = self.t1;
        let mut used = 0u64;
        while used + len <= self.t_total {
            lengths.push(len);
            used += len;
            len = (growth * len as f64).ceil() as u64;
        }
        lengths
    }

    /// Gradient calls a run with this config consumes.
    pub fn steps_used(&self) -> u64 {
        self.schedule().iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSgdOutcome {
    /// Final epoch center.
    pub w: Vector,
    pub epochs: usize,
    pub steps: u64,
    /// Set when the budget could not complete a single epoch; `w` is then the input.
    pub budget_too_small: bool,
}

/// Euclidean projection onto the closed ball `B(center, radius)`.
pub fn project_ball(w: &Vector, center: &Vector, radius: f64) -> Vector {
    let diff = w - center;
    let dist = diff.norm();
    if dist <= radius {
        w.clone()
    } else {
        center + diff * (radius / dist)
    }
}

/// Runs Epoch-SGD from `w_init`. `grad_oracle` returns one stochastic gradient per call
/// and owns whatever randomness it uses.
pub fn epoch_sgd<F>(mut grad_oracle: F, w_init: &Vector, cfg: &EpochSgdConfig) -> Result<EpochSgdOutcome>
where
    F: FnMut(&Vector) -> Vector,
{
    cfg.validate()?;
    let schedule = cfg.schedule();
    let shrink = 2f64.powf(1.0 / cfg.p);
    let mut center = w_init.clone();
    let mut gamma = cfg.gamma1;
    let mut radius = cfg.d1;
    let mut steps = 0;

    for &len in &schedule {
        let mut w = center.clone();
        let mut sum = Vector::zeros(w.len());
        for _ in 0..len {
            sum += &w;
            let g = grad_oracle(&w);
            w = project_ball(&(&w - g * gamma), &center, radius);
        }
        center = sum / len as f64;
        steps += len;
        gamma /= 2.0;
        radius /= shrink;
    }

    Ok(EpochSgdOutcome {
        w: center,
        epochs: schedule.len(),
        steps,
        budget_too_small: schedule.is_empty(),
    })
}

/// High-probability parameter choice for a `(mu, p)`-uniformly convex target with
/// gradient bound `g` and noise level `sigma`.
///
/// `gamma1 = G (pG/mu)^(1/(p-1)) / (24 (G^2 + sigma^2))`, `T1 = 3600 (G^2 + sigma^2) / G^2`
/// and `D1 = min{(pG/mu)^(1/(p-1)) log(2/delta_tilde), init_dist}`.
pub fn theory_epoch_config(
    g: f64,
    sigma: f64,
    mu: f64,
    p: f64,
    delta_tilde: f64,
    init_dist: f64,
    t_total: u64,
) -> Result<EpochSgdConfig> {
    if !(g > 0.0) || !(mu > 0.0) || !(sigma >= 0.0) || !(p >= 2.0) {
        return Err(Error::Domain(format!(
            "need G > 0, mu > 0, sigma >= 0, p >= 2; got G = {g}, mu = {mu}, sigma = {sigma}, p = {p}"
        )));
    }
    if !(delta_tilde > 0.0 && delta_tilde < 1.0) {
        return Err(Error::Domain(format!(
            "delta_tilde must lie in (0, 1), got {delta_tilde}"
        )));
    }
    if !(init_dist > 0.0) {
        return Err(Error::Domain(format!(
            "initial distance must be positive, got {init_dist}"
        )));
    }
    let energy = g * g + sigma * sigma;
    let reach = (p * g / mu).powf(1.0 / (p - 1.0));
    Ok(EpochSgdConfig {
        gamma1: g * reach / (24.0 * energy),
        t1: (3600.0 * energy / (g * g)).ceil() as u64,
        d1: (reach * (2.0 / delta_tilde).ln()).min(init_dist),
        t_total: t_total.max(1),
        p,
    })
}
