//! Isothermal CSTR with the reaction scheme A ⇌ B ⇌ C.
//!
//! States are the mole fractions of A and B (`x1`, `x2`; C is `1 - x1 - x2`),
//! inputs are the scaled temperature `u1 = T / T0` and the scaled residence
//! time `u2 = τ / (τ0 + τ)`. Outputs are the states themselves.
//!
//! For a fixed input the right-hand side is affine in the state,
//! `f(x) = A(u) x + b(u)`, which [`AffineForm`] exposes together with its
//! input derivatives.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plant constants. Rates in 1/s, activation temperatures `E_i / R` in K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    pub k10: f64,
    pub k20: f64,
    pub k30: f64,
    pub k40: f64,
    pub e1r: f64,
    pub e2r: f64,
    pub e3r: f64,
    pub e4r: f64,
    pub t0: f64,
    pub tau0: f64,
    pub x10: f64,
    pub x20: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            k10: 1.0,
            k20: 0.7,
            k30: 0.1,
            k40: 0.006,
            e1r: 5000.0,
            e2r: 6000.0,
            e3r: 30000.0,
            e4r: 50000.0,
            t0: 600.0,
            tau0: 1.0,
            x10: 0.8,
            x20: 0.2,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [
            self.k10, self.k20, self.k30, self.k40, self.e1r, self.e2r, self.e3r, self.e4r,
            self.t0, self.tau0, self.x10, self.x20,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidParameter("non-finite plant constant".into()));
        }
        if self.prefactors().iter().any(|&k| k <= 0.0) {
            return Err(Error::InvalidParameter("rate constants must be positive".into()));
        }
        if [self.e1r, self.e2r, self.e3r, self.e4r].iter().any(|&e| e <= 0.0) {
            return Err(Error::InvalidParameter("activation temperatures must be positive".into()));
        }
        if self.t0 <= 0.0 || self.tau0 <= 0.0 {
            return Err(Error::InvalidParameter("t0 and tau0 must be positive".into()));
        }
        if self.x10 < 0.0 || self.x20 < 0.0 || self.x10 + self.x20 > 1.0 {
            return Err(Error::InvalidParameter("feed composition must lie in the simplex".into()));
        }
        Ok(())
    }

    pub fn prefactors(&self) -> [f64; 4] {
        [self.k10, self.k20, self.k30, self.k40]
    }

    /// Dimensionless activation energies `E_i / (R T0)`.
    pub fn activation(&self) -> [f64; 4] {
        [self.e1r, self.e2r, self.e3r, self.e4r].map(|e| e / self.t0)
    }
}

/// Mole fractions of A and B.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StatePair {
    pub x1: f64,
    pub x2: f64,
}

/// The plant output is the state.
pub type OutputPair = StatePair;

impl StatePair {
    pub const fn new(x1: f64, x2: f64) -> Self {
        StatePair { x1, x2 }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.x1, self.x2)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        StatePair::new(v[0], v[1])
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.x2.is_finite()
    }

    /// `0 <= x1, x2` and `x1 + x2 <= 1`, each relaxed by `tol`.
    pub fn in_simplex(&self, tol: f64) -> bool {
        self.x1 >= -tol && self.x2 >= -tol && self.x1 + self.x2 <= 1.0 + tol
    }

    pub fn max_abs_diff(&self, other: &StatePair) -> f64 {
        (self.x1 - other.x1).abs().max((self.x2 - other.x2).abs())
    }

    pub fn norm_inf(&self) -> f64 {
        self.x1.abs().max(self.x2.abs())
    }
}

/// Scaled temperature and scaled residence time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InputPair {
    pub u1: f64,
    pub u2: f64,
}

impl InputPair {
    pub const fn new(u1: f64, u2: f64) -> Self {
        InputPair { u1, u2 }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.u1, self.u2)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        InputPair::new(v[0], v[1])
    }

    /// `u1 > 0` and `0 < u2 < 1`.
    pub fn in_domain(&self) -> bool {
        self.u1 > 0.0 && self.u2 > 0.0 && self.u2 < 1.0 && self.u1.is_finite()
    }

    pub fn check(&self) -> Result<()> {
        if self.in_domain() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "input (u1 = {}, u2 = {}) requires u1 > 0 and 0 < u2 < 1",
                self.u1, self.u2
            )))
        }
    }

    pub fn max_abs_diff(&self, other: &InputPair) -> f64 {
        (self.u1 - other.u1).abs().max((self.u2 - other.u2).abs())
    }
}

/// `k_i = k_i0 exp(-(E_i / (R T0)) (1/u1 - 1))` for the four reactions.
pub fn rate_constants(params: &PlantParams, u1: f64) -> Result<[f64; 4]> {
    if !(u1 > 0.0) || !u1.is_finite() {
        return Err(Error::Domain(format!("scaled temperature u1 = {u1} must be positive")));
    }
    let shift = 1.0 / u1 - 1.0;
    let k0 = params.prefactors();
    let a = params.activation();
    Ok([0, 1, 2, 3].map(|i| k0[i] * (-a[i] * shift).exp()))
}

/// `dk_i / du1 = k_i (E_i / (R T0)) / u1²`.
pub fn rate_constant_slopes(params: &PlantParams, u1: f64) -> Result<[f64; 4]> {
    let k = rate_constants(params, u1)?;
    let a = params.activation();
    let inv_sq = 1.0 / (u1 * u1);
    Ok([0, 1, 2, 3].map(|i| k[i] * a[i] * inv_sq))
}

/// Residence time `τ = τ0 u2 / (1 - u2)`.
pub fn tau_from_u2(params: &PlantParams, u2: f64) -> Result<f64> {
    if !(u2 > 0.0 && u2 < 1.0) {
        return Err(Error::Domain(format!("scaled residence time u2 = {u2} must lie in (0, 1)")));
    }
    Ok(params.tau0 * u2 / (1.0 - u2))
}

/// `f(x) = A x + b` at a fixed input, with `∂A/∂u_j` and `∂b/∂u_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineForm {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub da: [Matrix2<f64>; 2],
    pub db: [Vector2<f64>; 2],
}

impl AffineForm {
    pub fn new(params: &PlantParams, u: InputPair) -> Result<Self> {
        u.check()?;
        let [k1, k2, k3, k4] = rate_constants(params, u.u1)?;
        let [d1, d2, d3, d4] = rate_constant_slopes(params, u.u1)?;
        let tau = tau_from_u2(params, u.u2)?;
        let dilution = 1.0 / tau;
        // d(1/τ)/du2 = -1 / (τ0 u2²)
        let ddilution = -1.0 / (params.tau0 * u.u2 * u.u2);

        let a = Matrix2::new(-k1 - dilution, k4, k1 - k3, -k2 - k3 - k4 - dilution);
        let b = Vector2::new(params.x10 * dilution, k3 + params.x20 * dilution);
        let da1 = Matrix2::new(-d1, d4, d1 - d3, -d2 - d3 - d4);
        let db1 = Vector2::new(0.0, d3);
        let da2 = Matrix2::new(-ddilution, 0.0, 0.0, -ddilution);
        let db2 = Vector2::new(params.x10 * ddilution, params.x20 * ddilution);
        Ok(AffineForm { a, b, da: [da1, da2], db: [db1, db2] })
    }

    pub fn eval(&self, x: &Vector2<f64>) -> Vector2<f64> {
        self.a * x + self.b
    }

    /// Columns `∂f/∂u1`, `∂f/∂u2` at `x`.
    pub fn input_jacobian(&self, x: &Vector2<f64>) -> Matrix2<f64> {
        let c1 = self.da[0] * x + self.db[0];
        let c2 = self.da[1] * x + self.db[1];
        Matrix2::from_columns(&[c1, c2])
    }
}

/// Time derivative of the state.
pub fn rhs(params: &PlantParams, x: StatePair, u: InputPair) -> Result<StatePair> {
    let form = AffineForm::new(params, u)?;
    Ok(StatePair::from_vector(&form.eval(&x.to_vector())))
}

/// `∂f/∂x`. Independent of `x` since the plant is affine in the state.
pub fn jac_x(params: &PlantParams, _x: StatePair, u: InputPair) -> Result<Matrix2<f64>> {
    Ok(AffineForm::new(params, u)?.a)
}

/// `∂f/∂u`, columns ordered `(u1, u2)`.
pub fn jac_u(params: &PlantParams, x: StatePair, u: InputPair) -> Result<Matrix2<f64>> {
    Ok(AffineForm::new(params, u)?.input_jacobian(&x.to_vector()))
}

/// Eigenvalues of a real 2x2 matrix, ordered by real part then imaginary part.
pub fn eigenvalues2(m: &Matrix2<f64>) -> [nalgebra::Complex<f64>; 2] {
    use nalgebra::Complex;
    let half_trace = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m.determinant();
    let disc = half_trace * half_trace - det;
    let mut eigs = if disc >= 0.0 {
        let q = disc.sqrt();
        [Complex::new(half_trace - q, 0.0), Complex::new(half_trace + q, 0.0)]
    } else {
        let q = (-disc).sqrt();
        [Complex::new(half_trace, -q), Complex::new(half_trace, q)]
    };
    eigs.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    eigs
}
