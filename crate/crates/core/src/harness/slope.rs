//! Power-law decay fits on running-average columns.

use serde::{Deserialize, Serialize};

use crate::trace::TraceRow;
use crate::{Error, Result};

pub const MIN_FIT_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (u64, u64),
}

/// Default window `[T/10, T]` for a trace of length `T`.
pub fn default_window(rows: &[TraceRow]) -> (u64, u64) {
    let t_max = rows.last().map_or(0, |r| r.t);
    ((t_max / 10).max(1), t_max)
}

/// Least-squares fit of `log(grad_avg)` against `log(t)` over rows with `t` in `window`
/// (inclusive); the default window is [`default_window`].
pub fn fit_loglog_slope(rows: &[TraceRow], window: Option<(u64, u64)>) -> Result<SlopeFit> {
    let window = window.unwrap_or_else(|| default_window(rows));
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in rows.iter().filter(|r| r.t >= window.0 && r.t <= window.1) {
        if !(r.grad_avg > 0.0) || r.t == 0 {
            return Err(Error::Domain(format!(
                "running average must be positive on the fit window, got {} at t = {}",
                r.grad_avg, r.t
            )));
        }
        xs.push((r.t as f64).ln());
        ys.push(r.grad_avg.ln());
    }
    fit_line(&xs, &ys).map(|(slope, intercept, r_squared)| SlopeFit {
        slope,
        intercept,
        r_squared,
        window,
    })
}

/// Ordinary least squares `y = slope x + intercept`, returning `(slope, intercept, r^2)`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    let n = xs.len();
    if n < MIN_FIT_POINTS {
        return Err(Error::InsufficientPoints {
            needed: MIN_FIT_POINTS,
            found: n,
        });
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("fit window has a single abscissa".into()));
    }
    let slope = sxy / sxx;
    // A flat series is fit exactly; treat rounding-level spread as zero.
    let flat = syy <= n as f64 * (1e3 * f64::EPSILON * my.abs().max(1.0)).powi(2);
    let r_squared = if flat {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok((slope, my - slope * mx, r_squared))
}
