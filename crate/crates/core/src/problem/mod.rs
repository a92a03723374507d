//! Bilevel problem model.
//!
//! A problem is `min_x f(x, y*(x))` with `y*(x) = argmin_y g(x, y)` where `g(x, .)` is
//! `(mu, p)`-uniformly convex. Exact derivatives live behind [`BilevelModel`];
//! [`StochasticBilevelProblem`] adds seeded Gaussian perturbations on top of them.

mod hypercleaning;
mod noise;
mod power;
mod synthetic;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result, Vector};

pub use hypercleaning::{make_hypercleaning, HypercleaningData, HypercleaningParams, HypercleaningProblem};
pub use noise::{NoiseKind, NoiseModel, NoiseStream, OracleClock, OracleFamily};
pub use power::{
    chain_rule_generalized_grad, chain_rule_generalized_jacobian, change_of_variable_scale, signed_power,
    signed_power_scalar, DEFAULT_FLOOR,
};
pub use synthetic::{make_example, make_scaled_separable, ExampleId, ScaledSeparable, SyntheticExample};

/// Problem-dependent constants from the standing assumptions.
///
/// `l0`/`l1` are the relaxed-smoothness coefficients of the lower level, `lg1`/`lg2` the
/// Lipschitz constants of `grad_y g` in `x` and of the cross derivative / generalized
/// Jacobian, `cap_c` the bound on the generalized Jacobian, `lf0`/`lf1` the bound and
/// Lipschitz constant of the upper-level derivatives, and `delta_phi` the initial gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub p: f64,
    pub mu: f64,
    pub l0: f64,
    pub l1: f64,
    pub lg1: f64,
    pub lg2: f64,
    pub cap_c: f64,
    pub lf0: f64,
    pub lf1: f64,
    pub delta_phi: f64,
    pub sigma_f: f64,
    pub sigma_g1: f64,
    pub sigma_g2: f64,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 2.0) || !self.p.is_finite() {
            return Err(Error::InvalidProblem(format!("p must be >= 2, got {}", self.p)));
        }
        if !(self.mu > 0.0) || !(self.mu <= self.cap_c) {
            return Err(Error::InvalidProblem(format!(
                "need 0 < mu <= C, got mu = {}, C = {}",
                self.mu, self.cap_c
            )));
        }
        let nonneg = [
            ("l0", self.l0),
            ("l1", self.l1),
            ("lg1", self.lg1),
            ("lg2", self.lg2),
            ("lf0", self.lf0),
            ("lf1", self.lf1),
            ("delta_phi", self.delta_phi),
            ("sigma_f", self.sigma_f),
            ("sigma_g1", self.sigma_g1),
            ("sigma_g2", self.sigma_g2),
        ];
        for (name, value) in nonneg {
            if !(value >= 0.0) {
                return Err(Error::InvalidProblem(format!("{name} must be >= 0, got {value}")));
            }
        }
        Ok(())
    }

    /// Sets all three oracle noise levels.
    pub fn with_noise(mut self, sigma_f: f64, sigma_g1: f64, sigma_g2: f64) -> Self {
        self.sigma_f = sigma_f;
        self.sigma_g1 = sigma_g1;
        self.sigma_g2 = sigma_g2;
        self
    }
}

/// Exact oracles of a bilevel problem.
///
/// Shapes: `grad_x_f` has length `d_x`; `gen_grad_f`, `grad_y_g` have length `d_y`;
/// `cross_grad_g` is `d_x x d_y` with entry `(i, j) = d^2 g / dx_i dy_j`;
/// `gen_jacobian_g` is `d_y x d_y` with entry `(i, j) = d (grad_y g)_i / d z_j` where
/// `z = [y]^(p-1)`.
pub trait BilevelModel: fmt::Debug + Send + Sync {
    fn name(&self) -> String;
    fn dims(&self) -> (usize, usize);
    fn constants(&self) -> &ProblemConstants;

    fn upper_value(&self, x: &Vector, y: &Vector) -> f64;
    fn lower_value(&self, x: &Vector, y: &Vector) -> f64;

    fn grad_x_f(&self, x: &Vector, y: &Vector) -> Vector;
    /// `df / d[y]^(p-1)`.
    fn gen_grad_f(&self, x: &Vector, y: &Vector) -> Vector;
    fn grad_y_g(&self, x: &Vector, y: &Vector) -> Vector;
    fn cross_grad_g(&self, x: &Vector, y: &Vector) -> Matrix;
    /// `d grad_y g / d[y]^(p-1)`.
    fn gen_jacobian_g(&self, x: &Vector, y: &Vector) -> Matrix;

    fn optimal_y(&self, _x: &Vector) -> Option<Vector> {
        None
    }
    fn phi(&self, _x: &Vector) -> Option<f64> {
        None
    }
    fn grad_phi(&self, _x: &Vector) -> Option<Vector> {
        None
    }
}

/// A bilevel model bundled with its noise model.
///
/// Noisy oracles take an explicit counter (or a caller-owned [`OracleClock`]); with
/// zero noise they return the exact oracle unchanged.
#[derive(Debug, Clone)]
pub struct StochasticBilevelProblem {
    model: Arc<dyn BilevelModel>,
    constants: ProblemConstants,
    noise: NoiseModel,
}

/// One upper-level sample `xi`: both upper-level derivatives drawn together.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperSample {
    pub grad_x: Vector,
    pub gen_grad: Vector,
}

impl StochasticBilevelProblem {
    pub fn new(model: Arc<dyn BilevelModel>, noise: NoiseModel) -> Result<Self> {
        let constants = *model.constants();
        constants.validate()?;
        Ok(Self {
            model,
            constants,
            noise,
        })
    }

    /// Overrides the oracle noise levels carried in the constants.
    pub fn with_noise_levels(mut self, sigma_f: f64, sigma_g1: f64, sigma_g2: f64) -> Result<Self> {
        self.constants = self.constants.with_noise(sigma_f, sigma_g1, sigma_g2);
        self.constants.validate()?;
        Ok(self)
    }

    pub fn model(&self) -> &dyn BilevelModel {
        self.model.as_ref()
    }

    pub fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn name(&self) -> String {
        self.model.name()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.model.dims()
    }

    pub fn check_dims(&self, x: &Vector, y: &Vector) -> Result<()> {
        let (dx, dy) = self.dims();
        if x.len() != dx {
            return Err(Error::DimensionMismatch {
                expected: dx,
                found: x.len(),
            });
        }
        if y.len() != dy {
            return Err(Error::DimensionMismatch {
                expected: dy,
                found: y.len(),
            });
        }
        Ok(())
    }

    // Exact oracles.

    pub fn grad_x_f(&self, x: &Vector, y: &Vector) -> Vector {
        self.model.grad_x_f(x, y)
    }
    pub fn gen_grad_f(&self, x: &Vector, y: &Vector) -> Vector {
        self.model.gen_grad_f(x, y)
    }
    pub fn grad_y_g(&self, x: &Vector, y: &Vector) -> Vector {
        self.model.grad_y_g(x, y)
    }
    pub fn cross_grad_g(&self, x: &Vector, y: &Vector) -> Matrix {
        self.model.cross_grad_g(x, y)
    }
    pub fn gen_jacobian_g(&self, x: &Vector, y: &Vector) -> Matrix {
        self.model.gen_jacobian_g(x, y)
    }
    pub fn optimal_y(&self, x: &Vector) -> Option<Vector> {
        self.model.optimal_y(x)
    }
    pub fn phi(&self, x: &Vector) -> Option<f64> {
        self.model.phi(x)
    }
    pub fn grad_phi(&self, x: &Vector) -> Option<Vector> {
        self.model.grad_phi(x)
    }

    // Noisy oracles keyed by an explicit counter.

    pub fn noisy_upper(&self, x: &Vector, y: &Vector, counter: u64) -> UpperSample {
        let mut grad_x = self.model.grad_x_f(x, y);
        let mut gen_grad = self.model.gen_grad_f(x, y);
        let s = self.constants.sigma_f;
        self.noise
            .perturb_vector(&mut grad_x, s, NoiseStream::UpperGrad, counter);
        self.noise
            .perturb_vector(&mut gen_grad, s, NoiseStream::UpperGenGrad, counter);
        UpperSample { grad_x, gen_grad }
    }

    pub fn noisy_grad_y_g(&self, x: &Vector, y: &Vector, counter: u64) -> Vector {
        let mut g = self.model.grad_y_g(x, y);
        self.noise
            .perturb_vector(&mut g, self.constants.sigma_g1, NoiseStream::LowerGrad, counter);
        g
    }

    pub fn noisy_cross_grad_g(&self, x: &Vector, y: &Vector, counter: u64) -> Matrix {
        let mut m = self.model.cross_grad_g(x, y);
        self.noise
            .perturb_matrix(&mut m, self.constants.sigma_g2, NoiseStream::Cross, counter);
        m
    }

    pub fn noisy_gen_jacobian_g(&self, x: &Vector, y: &Vector, counter: u64) -> Matrix {
        let mut m = self.model.gen_jacobian_g(x, y);
        self.noise
            .perturb_matrix(&mut m, self.constants.sigma_g2, NoiseStream::GenJacobian, counter);
        m
    }

    // Noisy oracles that consume and advance a caller-owned clock.

    pub fn sample_upper(&self, x: &Vector, y: &Vector, clock: &mut OracleClock) -> UpperSample {
        self.noisy_upper(x, y, clock.tick(OracleFamily::Upper))
    }

    pub fn sample_grad_y_g(&self, x: &Vector, y: &Vector, clock: &mut OracleClock) -> Vector {
        self.noisy_grad_y_g(x, y, clock.tick(OracleFamily::Lower))
    }

    pub fn sample_cross_grad_g(&self, x: &Vector, y: &Vector, clock: &mut OracleClock) -> Matrix {
        self.noisy_cross_grad_g(x, y, clock.tick(OracleFamily::Cross))
    }

    pub fn sample_gen_jacobian_g(&self, x: &Vector, y: &Vector, clock: &mut OracleClock) -> Matrix {
        self.noisy_gen_jacobian_g(x, y, clock.tick(OracleFamily::GenJacobian))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex3(p: f64, sigma: f64, seed: u64) -> StochasticBilevelProblem {
        make_example(ExampleId::Ex3, p, 1, NoiseModel::gaussian(seed))
            .unwrap()
            .with_noise_levels(sigma, sigma, sigma)
            .unwrap()
    }

    #[test]
    fn zero_sigma_matches_exact_bitwise() {
        let prob = ex3(4.0, 0.0, 3);
        let x = Vector::from_vec(vec![0.37]);
        let y = Vector::from_vec(vec![-0.81]);
        let s = prob.noisy_upper(&x, &y, 9);
        assert_eq!(s.grad_x, prob.grad_x_f(&x, &y));
        assert_eq!(s.gen_grad, prob.gen_grad_f(&x, &y));
        assert_eq!(prob.noisy_grad_y_g(&x, &y, 4), prob.grad_y_g(&x, &y));
        assert_eq!(prob.noisy_cross_grad_g(&x, &y, 4), prob.cross_grad_g(&x, &y));
        assert_eq!(prob.noisy_gen_jacobian_g(&x, &y, 4), prob.gen_jacobian_g(&x, &y));
    }

    #[test]
    fn noisy_mean_matches_exact() {
        let sigma = 0.5;
        let prob = ex3(2.0, sigma, 21);
        let x = Vector::from_vec(vec![0.9]);
        let y = Vector::from_vec(vec![0.2]);
        let n = 100_000u64;
        let mut sum = 0.0;
        for c in 0..n {
            sum += prob.noisy_grad_y_g(&x, &y, c)[0];
        }
        let mean = sum / n as f64;
        let exact = prob.grad_y_g(&x, &y)[0];
        assert!(
            (mean - exact).abs() <= 4.0 * sigma / (n as f64).sqrt(),
            "{mean} vs {exact}"
        );
    }

    #[test]
    fn identical_noise_models_replay() {
        let a = ex3(4.0, 1.0, 5);
        let b = ex3(4.0, 1.0, 5);
        let x = Vector::from_vec(vec![0.1]);
        let y = Vector::from_vec(vec![0.4]);
        let (mut ca, mut cb) = (OracleClock::new(), OracleClock::new());
        for _ in 0..50 {
            assert_eq!(a.sample_grad_y_g(&x, &y, &mut ca), b.sample_grad_y_g(&x, &y, &mut cb));
            assert_eq!(a.sample_upper(&x, &y, &mut ca), b.sample_upper(&x, &y, &mut cb));
        }
        assert_eq!(ca, cb);
    }

    #[test]
    fn rejects_bad_constants() {
        let mut c = *ex3(2.0, 0.0, 0).constants();
        c.mu = 2.0;
        assert!(c.validate().is_err());
        c.mu = 1.0;
        c.p = 1.5;
        assert!(c.validate().is_err());
        c.p = 2.0;
        c.sigma_g1 = -1.0;
        assert!(c.validate().is_err());
    }
}
