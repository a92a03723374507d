//! Desk-scale data hypercleaning with an `l_p` regression lower level.
//!
//! Upper variable: per-sample logits `lambda` (length `n`). Lower variable: regression
//! weights `w` (length `d`).
//!
//! ```text
//! g(lambda, w) = (1/n) sum_i sigmoid(lambda_i) |x_i^T w - ybar_i|^p + c ||w||_p^p
//! f(lambda, w) = (1/n_val) ||X_val w - y_val||^2
//! ```
//!
//! Training labels are sign-flipped with probability `flip_prob`; the validation split is
//! clean. Generalized derivatives are assembled with the chain-rule helpers.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::power::{chain_rule_generalized_grad, chain_rule_generalized_jacobian, signed_power_scalar, DEFAULT_FLOOR};
use super::{BilevelModel, NoiseModel, ProblemConstants, StochasticBilevelProblem};
use crate::{Error, Matrix, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypercleaningParams {
    pub n: usize,
    pub d: usize,
    /// Validation samples; `0` means "same as `n`".
    pub n_val: usize,
    pub p: f64,
    pub flip_prob: f64,
    pub reg_c: f64,
    pub floor: f64,
    pub data_seed: u64,
}

impl Default for HypercleaningParams {
    fn default() -> Self {
        Self {
            n: 200,
            d: 20,
            n_val: 0,
            p: 3.0,
            flip_prob: 0.1,
            reg_c: 0.01,
            floor: DEFAULT_FLOOR,
            data_seed: 0,
        }
    }
}

impl HypercleaningParams {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.n > 500 || self.d > 50 {
            return Err(Error::InvalidProblem(format!(
                "hypercleaning is desk scale: need 1 <= n <= 500 and 1 <= d <= 50, got n = {}, d = {}",
                self.n, self.d
            )));
        }
        if !self.p.is_finite() || self.p < 2.0 {
            return Err(Error::InvalidProblem(format!(
                "p must be a finite number >= 2, got {}",
                self.p
            )));
        }
        if !(self.flip_prob >= 0.0 && self.flip_prob < 1.0) {
            return Err(Error::InvalidProblem(format!(
                "flip_prob must lie in [0, 1), got {}",
                self.flip_prob
            )));
        }
        if !(self.reg_c > 0.0) || !self.reg_c.is_finite() {
            return Err(Error::InvalidProblem(format!(
                "reg_c must be positive, got {}",
                self.reg_c
            )));
        }
        if !(self.floor > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "floor must be positive, got {}",
                self.floor
            )));
        }
        Ok(())
    }
}

/// Synthesized regression data.
#[derive(Debug, Clone)]
pub struct HypercleaningData {
    pub x_train: Matrix,
    /// Possibly corrupted training targets.
    pub y_train: Vector,
    pub flipped: Vec<bool>,
    pub x_val: Matrix,
    pub y_val: Vector,
    pub w_true: Vector,
}

impl HypercleaningData {
    pub fn generate(params: &HypercleaningParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.data_seed);
        let (n, d) = (params.n, params.d);
        let n_val = if params.n_val == 0 { n } else { params.n_val };
        let gaussian = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
        let w_true = Vector::from_fn(d, |_, _| gaussian(&mut rng) / (d as f64).sqrt());
        let x_train = Matrix::from_fn(n, d, |_, _| gaussian(&mut rng));
        let x_val = Matrix::from_fn(n_val, d, |_, _| gaussian(&mut rng));
        let clean = &x_train * &w_true;
        let flipped: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < params.flip_prob).collect();
        let y_train = Vector::from_iterator(n, clean.iter().zip(&flipped).map(|(&y, &f)| if f { -y } else { y }));
        let y_val = &x_val * &w_true;
        Self {
            x_train,
            y_train,
            flipped,
            x_val,
            y_val,
            w_true,
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

#[derive(Debug, Clone)]
pub struct HypercleaningProblem {
    params: HypercleaningParams,
    data: HypercleaningData,
    constants: ProblemConstants,
}

pub fn make_hypercleaning(params: &HypercleaningParams, noise: NoiseModel) -> Result<StochasticBilevelProblem> {
    StochasticBilevelProblem::new(Arc::new(HypercleaningProblem::new(params)?), noise)
}

impl HypercleaningProblem {
    pub fn new(params: &HypercleaningParams) -> Result<Self> {
        params.validate()?;
        let data = HypercleaningData::generate(params);
        Ok(Self::from_data(*params, data))
    }

    /// Builds the problem around caller-supplied data.
    ///
    /// Constants are estimated at `lambda = 0`: `mu` from the regularizer alone, `C` from
    /// the spectral radius of the generalized Jacobian at the lower-level optimum.
    pub fn from_data(params: HypercleaningParams, data: HypercleaningData) -> Self {
        let p = params.p;
        let d = params.d as f64;
        let placeholder = ProblemConstants {
            p,
            mu: params.reg_c * p / d.powf(0.5 - 1.0 / p),
            l0: 1.0,
            l1: 1.0,
            lg1: 1.0,
            lg2: 1.0,
            cap_c: 1.0,
            lf0: 1.0,
            lf1: 1.0,
            delta_phi: 1.0,
            sigma_f: 0.0,
            sigma_g1: 0.0,
            sigma_g2: 0.0,
        };
        let mut problem = Self {
            params,
            data,
            constants: placeholder,
        };
        let lam = Vector::zeros(params.n);
        let w = problem.solve_lower(&lam, None);
        let jac = problem.gen_jacobian_g(&lam, &w);
        let radius = power_iteration_radius(&jac, 200);
        let hess = problem.hess_yy_g(&lam, &w);
        let n_val = problem.data.x_val.nrows() as f64;
        let xtx_val = problem.data.x_val.transpose() * &problem.data.x_val;
        let lg1 = problem.cross_grad_g(&lam, &w).norm();
        let lf0 = problem.gen_grad_f(&lam, &w).norm().max(f64::EPSILON);
        let delta_phi = problem.upper_value(&lam, &w);
        let c = &mut problem.constants;
        c.cap_c = (1.2 * radius).max(c.mu);
        c.l0 = hess.symmetric_eigenvalues().max();
        c.lg1 = lg1;
        c.lg2 = lg1;
        c.lf0 = lf0;
        c.lf1 = 2.0 * xtx_val.symmetric_eigenvalues().max() / n_val;
        c.delta_phi = delta_phi;
        problem
    }

    pub fn data(&self) -> &HypercleaningData {
        &self.data
    }

    pub fn params(&self) -> &HypercleaningParams {
        &self.params
    }

    fn residuals(&self, w: &Vector) -> Vector {
        &self.data.x_train * w - &self.data.y_train
    }

    /// Clean validation loss `f(., w)`.
    pub fn validation_loss(&self, w: &Vector) -> f64 {
        let r = &self.data.x_val * w - &self.data.y_val;
        r.norm_squared() / self.data.x_val.nrows() as f64
    }

    /// `grad_w f`, the ordinary (non-generalized) upper derivative.
    pub fn grad_y_f(&self, w: &Vector) -> Vector {
        let r = &self.data.x_val * w - &self.data.y_val;
        self.data.x_val.transpose() * r * (2.0 / self.data.x_val.nrows() as f64)
    }

    /// `grad_ww g`.
    pub fn hess_yy_g(&self, lam: &Vector, w: &Vector) -> Matrix {
        let p = self.params.p;
        let n = self.params.n as f64;
        let r = self.residuals(w);
        let weights = Vector::from_iterator(
            r.len(),
            r.iter()
                .zip(lam.iter())
                .map(|(&ri, &li)| sigmoid(li) * p * (p - 1.0) * ri.abs().powf(p - 2.0) / n),
        );
        let x = &self.data.x_train;
        let mut weighted = x.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= weights[i];
        }
        let mut h = x.transpose() * weighted;
        let reg = self.params.reg_c * p * (p - 1.0);
        for j in 0..self.params.d {
            h[(j, j)] += reg * w[j].abs().powf(p - 2.0);
        }
        h
    }

    /// Minimizes the lower level by damped Newton with Armijo backtracking.
    pub fn solve_lower(&self, lam: &Vector, start: Option<&Vector>) -> Vector {
        let d = self.params.d;
        let mut w = start.cloned().unwrap_or_else(|| Vector::zeros(d));
        let mut value = self.lower_value(lam, &w);
        for _ in 0..200 {
            let grad = self.grad_y_g(lam, &w);
            if grad.norm() <= 1e-13 {
                break;
            }
            let mut hess = self.hess_yy_g(lam, &w);
            for j in 0..d {
                hess[(j, j)] += 1e-12;
            }
            let step = match hess.cholesky() {
                Some(chol) => chol.solve(&grad),
                None => grad.clone(),
            };
            let slope = grad.dot(&step);
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-12 {
                let cand = &w - &step * t;
                let cand_value = self.lower_value(lam, &cand);
                if cand_value <= value - 1e-4 * t * slope {
                    w = cand;
                    value = cand_value;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // Near the optimum the value decrease drowns in rounding; fall back to the
                // gradient norm to decide on the full Newton step.
                let cand = &w - &step;
                if self.grad_y_g(lam, &cand).norm() < grad.norm() {
                    value = self.lower_value(lam, &cand);
                    w = cand;
                } else {
                    break;
                }
            }
        }
        w
    }
}

/// Largest eigenvalue modulus of `a` by power iteration on a fixed start vector.
fn power_iteration_radius(a: &Matrix, iters: usize) -> f64 {
    let mut v = Vector::from_element(a.ncols(), 1.0 / (a.ncols() as f64).sqrt());
    let mut radius = 0.0;
    for _ in 0..iters {
        let next = a * &v;
        radius = next.norm();
        if radius == 0.0 {
            break;
        }
        v = next / radius;
    }
    radius
}

impl BilevelModel for HypercleaningProblem {
    fn name(&self) -> String {
        "hypercleaning".to_string()
    }

    fn dims(&self) -> (usize, usize) {
        (self.params.n, self.params.d)
    }

    fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    fn upper_value(&self, _lam: &Vector, w: &Vector) -> f64 {
        self.validation_loss(w)
    }

    fn lower_value(&self, lam: &Vector, w: &Vector) -> f64 {
        let p = self.params.p;
        let r = self.residuals(w);
        let data: f64 = r
            .iter()
            .zip(lam.iter())
            .map(|(&ri, &li)| sigmoid(li) * ri.abs().powf(p))
            .sum::<f64>()
            / self.params.n as f64;
        data + self.params.reg_c * w.iter().map(|wj| wj.abs().powf(p)).sum::<f64>()
    }

    fn grad_x_f(&self, _lam: &Vector, _w: &Vector) -> Vector {
        Vector::zeros(self.params.n)
    }

    fn gen_grad_f(&self, _lam: &Vector, w: &Vector) -> Vector {
        chain_rule_generalized_grad(&self.grad_y_f(w), w, self.params.p, self.params.floor)
    }

    fn grad_y_g(&self, lam: &Vector, w: &Vector) -> Vector {
        let p = self.params.p;
        let n = self.params.n as f64;
        let r = self.residuals(w);
        let coeff = Vector::from_iterator(
            r.len(),
            r.iter()
                .zip(lam.iter())
                .map(|(&ri, &li)| sigmoid(li) * p * signed_power_scalar(ri, p - 1.0) / n),
        );
        let reg = w.map(|wj| self.params.reg_c * p * signed_power_scalar(wj, p - 1.0));
        self.data.x_train.transpose() * coeff + reg
    }

    fn cross_grad_g(&self, lam: &Vector, w: &Vector) -> Matrix {
        let p = self.params.p;
        let n = self.params.n as f64;
        let r = self.residuals(w);
        let mut cross = self.data.x_train.clone();
        for (i, mut row) in cross.row_iter_mut().enumerate() {
            let s = sigmoid(lam[i]);
            row *= s * (1.0 - s) * p * signed_power_scalar(r[i], p - 1.0) / n;
        }
        cross
    }

    fn gen_jacobian_g(&self, lam: &Vector, w: &Vector) -> Matrix {
        chain_rule_generalized_jacobian(&self.hess_yy_g(lam, w), w, self.params.p, self.params.floor)
    }

    fn optimal_y(&self, lam: &Vector) -> Option<Vector> {
        Some(self.solve_lower(lam, None))
    }

    fn phi(&self, lam: &Vector) -> Option<f64> {
        let w = self.solve_lower(lam, None);
        Some(self.validation_loss(&w))
    }

    /// Ordinary implicit-function formula `-cross * H^{-1} grad_w f` at the Newton optimum.
    fn grad_phi(&self, lam: &Vector) -> Option<Vector> {
        let w = self.solve_lower(lam, None);
        let v = self.hess_yy_g(lam, &w).lu().solve(&self.grad_y_f(&w))?;
        Some(-(self.cross_grad_g(lam, &w) * v))
    }
}
