//! Closed-form synthetic instances with known `y*`, `Phi` and `grad Phi`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::power::signed_power_scalar;
use super::{BilevelModel, NoiseModel, ProblemConstants, StochasticBilevelProblem};
use crate::{Error, Matrix, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExampleId {
    /// `f = y^3`, `g = y^4/4 - y sin x`.
    Ex1,
    /// `g = y^p/p - y sin x` with the clipped `sin(y^(p-1))` upper level.
    Ex3,
    /// Separable `g = ||y||_p^p / p - <y, sin x>`, `f = sum [y_i]^(p-1)`.
    Ex4,
}

impl fmt::Display for ExampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExampleId::Ex1 => "ex1",
            ExampleId::Ex3 => "ex3",
            ExampleId::Ex4 => "ex4",
        })
    }
}

impl FromStr for ExampleId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ex1" => Ok(ExampleId::Ex1),
            "ex3" => Ok(ExampleId::Ex3),
            "ex4" => Ok(ExampleId::Ex4),
            other => Err(Error::InvalidProblem(format!("unknown example `{other}`"))),
        }
    }
}

fn is_even_integer(p: f64) -> bool {
    p.fract() == 0.0 && (p as i64) % 2 == 0
}

#[derive(Debug, Clone)]
pub struct SyntheticExample {
    id: ExampleId,
    dim: usize,
    constants: ProblemConstants,
}

impl SyntheticExample {
    pub fn new(id: ExampleId, p: f64, dim: usize) -> Result<Self> {
        match id {
            ExampleId::Ex1 if p != 4.0 => {
                return Err(Error::InvalidProblem(format!("ex1 is defined for p = 4 only, got {p}")))
            }
            ExampleId::Ex3 | ExampleId::Ex4 if !(p >= 2.0 && is_even_integer(p)) => {
                return Err(Error::InvalidProblem(format!("{id} needs an even p >= 2, got {p}")))
            }
            _ => {}
        }
        match id {
            ExampleId::Ex1 | ExampleId::Ex3 if dim != 1 => {
                return Err(Error::InvalidProblem(format!(
                    "{id} is one-dimensional, got dim = {dim}"
                )))
            }
            _ if dim == 0 => return Err(Error::InvalidProblem("dim must be positive".into())),
            _ => {}
        }
        let d = dim as f64;
        let constants = match id {
            ExampleId::Ex1 => ProblemConstants {
                p,
                mu: 1.0,
                l0: 12.0,
                l1: 6.0,
                lg1: 1.0,
                lg2: 1.0,
                cap_c: 1.0,
                lf0: 1.0,
                lf1: 0.0,
                delta_phi: 2.0,
                sigma_f: 0.0,
                sigma_g1: 0.0,
                sigma_g2: 0.0,
            },
            ExampleId::Ex3 => ProblemConstants {
                p,
                mu: 1.0,
                l0: 4.0 * (p - 1.0),
                l1: 2.0 * (p - 1.0),
                lg1: 1.0,
                lg2: 1.0,
                cap_c: 1.0,
                lf0: 1.0,
                lf1: (p - 1.0) * FRAC_PI_2.powf((p - 2.0) / (p - 1.0)),
                delta_phi: 2.0,
                sigma_f: 0.0,
                sigma_g1: 0.0,
                sigma_g2: 0.0,
            },
            ExampleId::Ex4 => ProblemConstants {
                p,
                mu: d.powf(-(0.5 - 1.0 / p)),
                l0: 4.0 * (p - 1.0),
                l1: 2.0 * (p - 1.0),
                lg1: 1.0,
                lg2: 1.0,
                cap_c: 1.0,
                lf0: d.sqrt(),
                lf1: 0.0,
                delta_phi: 2.0 * d,
                sigma_f: 0.0,
                sigma_g1: 0.0,
                sigma_g2: 0.0,
            },
        };
        Ok(Self { id, dim, constants })
    }

    pub fn id(&self) -> ExampleId {
        self.id
    }

    fn p(&self) -> f64 {
        self.constants.p
    }

    /// `(pi/2)^(1/(p-1))`, the edge of the middle branch of the ex3 upper level.
    fn ex3_edge(&self) -> f64 {
        FRAC_PI_2.powf(1.0 / (self.p() - 1.0))
    }
}

pub fn make_example(id: ExampleId, p: f64, dim: usize, noise: NoiseModel) -> Result<StochasticBilevelProblem> {
    StochasticBilevelProblem::new(Arc::new(SyntheticExample::new(id, p, dim)?), noise)
}

impl BilevelModel for SyntheticExample {
    fn name(&self) -> String {
        self.id.to_string()
    }

    fn dims(&self) -> (usize, usize) {
        (self.dim, self.dim)
    }

    fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    fn upper_value(&self, _x: &Vector, y: &Vector) -> f64 {
        let p = self.p();
        match self.id {
            ExampleId::Ex1 => y[0].powi(3),
            ExampleId::Ex3 => {
                let edge = self.ex3_edge();
                let y = y[0];
                if y > edge {
                    1.0
                } else if y < -edge {
                    -1.0
                } else {
                    signed_power_scalar(y, p - 1.0).sin()
                }
            }
            ExampleId::Ex4 => y.iter().map(|&yi| signed_power_scalar(yi, p - 1.0)).sum(),
        }
    }

    fn lower_value(&self, x: &Vector, y: &Vector) -> f64 {
        let p = self.p();
        y.iter()
            .zip(x.iter())
            .map(|(&yi, &xi)| yi.abs().powf(p) / p - yi * xi.sin())
            .sum()
    }

    fn grad_x_f(&self, _x: &Vector, _y: &Vector) -> Vector {
        Vector::zeros(self.dim)
    }

    fn gen_grad_f(&self, _x: &Vector, y: &Vector) -> Vector {
        match self.id {
            ExampleId::Ex1 | ExampleId::Ex4 => Vector::from_element(self.dim, 1.0),
            ExampleId::Ex3 => {
                let edge = self.ex3_edge();
                let y = y[0];
                let v = if y.abs() <= edge {
                    signed_power_scalar(y, self.p() - 1.0).cos()
                } else {
                    0.0
                };
                Vector::from_element(1, v)
            }
        }
    }

    fn grad_y_g(&self, x: &Vector, y: &Vector) -> Vector {
        let p = self.p();
        Vector::from_iterator(
            self.dim,
            y.iter()
                .zip(x.iter())
                .map(|(&yi, &xi)| signed_power_scalar(yi, p - 1.0) - xi.sin()),
        )
    }

    fn cross_grad_g(&self, x: &Vector, _y: &Vector) -> Matrix {
        Matrix::from_diagonal(&x.map(|xi| -xi.cos()))
    }

    fn gen_jacobian_g(&self, _x: &Vector, _y: &Vector) -> Matrix {
        Matrix::identity(self.dim, self.dim)
    }

    fn optimal_y(&self, x: &Vector) -> Option<Vector> {
        let rho = 1.0 / (self.p() - 1.0);
        Some(x.map(|xi| signed_power_scalar(xi.sin(), rho)))
    }

    fn phi(&self, x: &Vector) -> Option<f64> {
        Some(match self.id {
            ExampleId::Ex1 => x[0].sin(),
            ExampleId::Ex3 => x[0].sin().sin(),
            ExampleId::Ex4 => x.iter().map(|xi| xi.sin()).sum(),
        })
    }

    fn grad_phi(&self, x: &Vector) -> Option<Vector> {
        Some(match self.id {
            ExampleId::Ex1 | ExampleId::Ex4 => x.map(f64::cos),
            ExampleId::Ex3 => x.map(|xi| xi.cos() * xi.sin().cos()),
        })
    }
}

/// Separable instance with lower-level curvature `a`:
/// `g = (a/p) ||y||_p^p - <y, sin x>` and `f = sum [y_i]^(p-1)`.
///
/// Its generalized Jacobian is the constant `a I`, which makes the Neumann-series error
/// exactly computable, and `grad Phi(x) = cos(x) / a`.
#[derive(Debug, Clone)]
pub struct ScaledSeparable {
    scale: f64,
    dim: usize,
    constants: ProblemConstants,
}

impl ScaledSeparable {
    pub fn new(scale: f64, p: f64, dim: usize) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidProblem(format!(
                "curvature must be positive, got {scale}"
            )));
        }
        if !(p >= 2.0) || !p.is_finite() {
            return Err(Error::InvalidProblem(format!("p must be >= 2, got {p}")));
        }
        if dim == 0 {
            return Err(Error::InvalidProblem("dim must be positive".into()));
        }
        let d = dim as f64;
        let constants = ProblemConstants {
            p,
            mu: scale * d.powf(-(0.5 - 1.0 / p)),
            l0: (p - 1.0) * (scale + 1.0),
            l1: p - 1.0,
            lg1: 1.0,
            lg2: 1.0,
            cap_c: scale,
            lf0: d.sqrt(),
            lf1: 0.0,
            delta_phi: 2.0 * d / scale,
            sigma_f: 0.0,
            sigma_g1: 0.0,
            sigma_g2: 0.0,
        };
        Ok(Self { scale, dim, constants })
    }
}

pub fn make_scaled_separable(scale: f64, p: f64, dim: usize, noise: NoiseModel) -> Result<StochasticBilevelProblem> {
    StochasticBilevelProblem::new(Arc::new(ScaledSeparable::new(scale, p, dim)?), noise)
}

impl BilevelModel for ScaledSeparable {
    fn name(&self) -> String {
        "scaled".to_string()
    }

    fn dims(&self) -> (usize, usize) {
        (self.dim, self.dim)
    }

    fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    fn upper_value(&self, _x: &Vector, y: &Vector) -> f64 {
        let p = self.constants.p;
        y.iter().map(|&yi| signed_power_scalar(yi, p - 1.0)).sum()
    }

    fn lower_value(&self, x: &Vector, y: &Vector) -> f64 {
        let p = self.constants.p;
        y.iter()
            .zip(x.iter())
            .map(|(&yi, &xi)| self.scale * yi.abs().powf(p) / p - yi * xi.sin())
            .sum()
    }

    fn grad_x_f(&self, _x: &Vector, _y: &Vector) -> Vector {
        Vector::zeros(self.dim)
    }

    fn gen_grad_f(&self, _x: &Vector, _y: &Vector) -> Vector {
        Vector::from_element(self.dim, 1.0)
    }

    fn grad_y_g(&self, x: &Vector, y: &Vector) -> Vector {
        let p = self.constants.p;
        Vector::from_iterator(
            self.dim,
            y.iter()
                .zip(x.iter())
                .map(|(&yi, &xi)| self.scale * signed_power_scalar(yi, p - 1.0) - xi.sin()),
        )
    }

    fn cross_grad_g(&self, x: &Vector, _y: &Vector) -> Matrix {
        Matrix::from_diagonal(&x.map(|xi| -xi.cos()))
    }

    fn gen_jacobian_g(&self, _x: &Vector, _y: &Vector) -> Matrix {
        Matrix::from_diagonal_element(self.dim, self.dim, self.scale)
    }

    fn optimal_y(&self, x: &Vector) -> Option<Vector> {
        let rho = 1.0 / (self.constants.p - 1.0);
        Some(x.map(|xi| signed_power_scalar(xi.sin() / self.scale, rho)))
    }

    fn phi(&self, x: &Vector) -> Option<f64> {
        Some(x.iter().map(|xi| xi.sin()).sum::<f64>() / self.scale)
    }

    fn grad_phi(&self, x: &Vector) -> Option<Vector> {
        Some(x.map(|xi| xi.cos() / self.scale))
    }
}
