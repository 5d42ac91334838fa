//! Steady-state gain analysis and multi-loop integral controllability.
//!
//! The controller convention used throughout: the error vector is
//! `e = r - y`, and the static compensator `C(0)` maps `e` to integrator
//! rates `du/dt`. Pairing output `y_i` with input `u_j` puts the loop gain at
//! row `j`, column `i` of `C(0)`. For example, the swapped pairing
//! `(y1-u2), (y2-u1)` with signs `(+, -)` and magnitudes `(2, 3)` gives
//!
//! ```text
//! C(0) = [ 0  -3 ]
//!        [ 2   0 ]
//! ```
//!
//! and the loop transfer at steady state is `H(0) = G C(0)`.

use std::fmt;

use nalgebra::{Complex, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{eigenvalues2, jac_u, jac_x, InputPair, PlantParams, StatePair};

/// Real parts within this band of zero are treated as on the imaginary axis.
pub const EIG_TOL: f64 = 1e-9;

/// Log-spaced magnitude grid `10^-2 … 10^2` per loop.
pub const MAGNITUDE_GRID: usize = 41;

/// `G = -(∂f/∂x)⁻¹ ∂f/∂u`, the sensitivity of the steady-state output to the
/// inputs at a steady state.
pub fn gain_matrix(params: &PlantParams, x_ss: StatePair, u: InputPair) -> Result<Matrix2<f64>> {
    let jx = jac_x(params, x_ss, u)?;
    let ju = jac_u(params, x_ss, u)?;
    let inv = jx.try_inverse().ok_or(Error::Singular("state Jacobian"))?;
    Ok(-inv * ju)
}

/// Relative gain array `G ∘ (G⁻¹)ᵀ`.
pub fn rga(g: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let det = g.determinant();
    if det == 0.0 || !det.is_finite() || det.abs() <= 1e-14 * g.amax().powi(2) {
        return Err(Error::Singular("gain matrix"));
    }
    let l11 = g[(0, 0)] * g[(1, 1)] / det;
    Ok(Matrix2::new(l11, 1.0 - l11, 1.0 - l11, l11))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainAnalysis {
    pub u: InputPair,
    pub x: StatePair,
    pub gain: Matrix2<f64>,
    /// `None` when the gain matrix is singular.
    pub rga: Option<Matrix2<f64>>,
    pub jac_eigs: [Complex<f64>; 2],
}

impl GainAnalysis {
    pub fn new(params: &PlantParams, x: StatePair, u: InputPair) -> Result<Self> {
        let gain = gain_matrix(params, x, u)?;
        Ok(GainAnalysis {
            u,
            x,
            gain,
            rga: rga(&gain).ok(),
            jac_eigs: eigenvalues2(&jac_x(params, x, u)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// `(y1-u1), (y2-u2)`
    Direct,
    /// `(y1-u2), (y2-u1)`
    Swapped,
}

impl Pairing {
    pub const ALL: [Pairing; 2] = [Pairing::Direct, Pairing::Swapped];

    /// Input index paired with output `output`.
    pub fn input_for(self, output: usize) -> usize {
        match self {
            Pairing::Direct => output,
            Pairing::Swapped => 1 - output,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Pairing::Direct => "(y1-u1),(y2-u2)",
            Pairing::Swapped => "(y1-u2),(y2-u1)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl Sign {
    pub fn of(v: f64) -> Option<Sign> {
        if v > 0.0 {
            Some(Sign::Plus)
        } else if v < 0.0 {
            Some(Sign::Minus)
        } else {
            None
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// Loop gain signs ordered by controlled variable: `Signs([s_y1, s_y2])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Signs(pub [Sign; 2]);

impl Signs {
    pub const ALL: [Signs; 4] = [
        Signs([Sign::Plus, Sign::Plus]),
        Signs([Sign::Plus, Sign::Minus]),
        Signs([Sign::Minus, Sign::Plus]),
        Signs([Sign::Minus, Sign::Minus]),
    ];
}

impl fmt::Display for Signs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in self.0 {
            f.write_str(if s == Sign::Plus { "+" } else { "-" })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Signs {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parsed: Vec<Sign> = s
            .chars()
            .map(|c| match c {
                '+' => Ok(Sign::Plus),
                '-' | '−' => Ok(Sign::Minus),
                other => Err(Error::InvalidParameter(format!("bad sign character {other:?}"))),
            })
            .collect::<Result<_>>()?;
        match parsed.as_slice() {
            [a, b] => Ok(Signs([*a, *b])),
            _ => Err(Error::InvalidParameter(format!("expected two signs, got {s:?}"))),
        }
    }
}

/// Multi-loop controller structure at steady state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairingConfig {
    pub pairing: Pairing,
    pub signs: Signs,
    pub magnitudes: [f64; 2],
}

impl PairingConfig {
    pub fn new(pairing: Pairing, signs: Signs) -> Self {
        PairingConfig { pairing, signs, magnitudes: [1.0, 1.0] }
    }

    pub fn with_magnitudes(mut self, magnitudes: [f64; 2]) -> Self {
        self.magnitudes = magnitudes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.magnitudes.iter().all(|&m| m > 0.0 && m.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParameter("loop gain magnitudes must be positive".into()))
        }
    }

    /// `C(0)`: row = input, column = controlled output.
    pub fn compensator(&self) -> Matrix2<f64> {
        let mut c = Matrix2::zeros();
        for output in 0..2 {
            let input = self.pairing.input_for(output);
            c[(input, output)] = self.signs.0[output].value() * self.magnitudes[output];
        }
        c
    }

    pub fn loop_matrix(&self, g: &Matrix2<f64>) -> Matrix2<f64> {
        g * self.compensator()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcClass {
    /// All eigenvalues of `H(0)` in the open right half plane.
    Controllable,
    /// Some eigenvalue in the open left half plane.
    NotControllable,
    /// Eigenvalues in the closed right half plane touching the imaginary axis.
    Indeterminate,
}

pub fn classify_eigenvalues(eigs: &[Complex<f64>]) -> IcClass {
    if eigs.iter().any(|e| e.re < -EIG_TOL) {
        IcClass::NotControllable
    } else if eigs.iter().all(|e| e.re > EIG_TOL) {
        IcClass::Controllable
    } else {
        IcClass::Indeterminate
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcVerdict {
    /// Classification at the configured magnitudes.
    pub class: IcClass,
    pub eigenvalues: [Complex<f64>; 2],
    /// Classification with unit magnitudes.
    pub unit_class: IcClass,
    /// Whether some positive magnitudes make the configuration integral
    /// controllable.
    pub exists: bool,
    /// Magnitudes from the grid, scaled so the larger one is 1, maximising the
    /// smallest real part of the eigenvalues of `H(0)`.
    pub witness: Option<[f64; 2]>,
}

/// For a 2x2 real `H = H_sign diag(m)`, some `m > 0` puts both eigenvalues in
/// the open right half plane iff `det H_sign > 0` and `max_i (H_sign)_ii > 0`.
pub fn exists_stabilizing_magnitudes(g: &Matrix2<f64>, pairing: Pairing, signs: Signs) -> bool {
    let h = PairingConfig::new(pairing, signs).loop_matrix(g);
    h.determinant() > 0.0 && h[(0, 0)].max(h[(1, 1)]) > 0.0
}

fn magnitude_grid() -> Vec<f64> {
    (0..MAGNITUDE_GRID)
        .map(|i| 10f64.powf(-2.0 + 4.0 * i as f64 / (MAGNITUDE_GRID - 1) as f64))
        .collect()
}

pub fn witness_magnitudes(g: &Matrix2<f64>, pairing: Pairing, signs: Signs) -> Option<[f64; 2]> {
    let grid = magnitude_grid();
    let mut best: Option<(f64, [f64; 2])> = None;
    for &m1 in &grid {
        for &m2 in &grid {
            let h = PairingConfig::new(pairing, signs).with_magnitudes([m1, m2]).loop_matrix(g);
            let min_re = eigenvalues2(&h)[0].re / m1.max(m2);
            if min_re > EIG_TOL && best.is_none_or(|(b, _)| min_re > b) {
                best = Some((min_re, [m1, m2]));
            }
        }
    }
    best.map(|(_, [m1, m2])| {
        let top = m1.max(m2);
        [m1 / top, m2 / top]
    })
}

pub fn ic_classify(g: &Matrix2<f64>, cfg: &PairingConfig) -> IcVerdict {
    let eigenvalues = eigenvalues2(&cfg.loop_matrix(g));
    let unit = eigenvalues2(&PairingConfig::new(cfg.pairing, cfg.signs).loop_matrix(g));
    let exists = exists_stabilizing_magnitudes(g, cfg.pairing, cfg.signs);
    IcVerdict {
        class: classify_eigenvalues(&eigenvalues),
        eigenvalues,
        unit_class: classify_eigenvalues(&unit),
        exists,
        witness: if exists { witness_magnitudes(g, cfg.pairing, cfg.signs) } else { None },
    }
}

/// Sign combinations for which stabilising magnitudes exist, in the order
/// `++, +-, -+, --`.
pub fn feasible_signs(g: &Matrix2<f64>, pairing: Pairing) -> Vec<Signs> {
    Signs::ALL.into_iter().filter(|&s| exists_stabilizing_magnitudes(g, pairing, s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequentialSigns {
    pub signs: Signs,
    /// Effective gain seen by each loop, ordered by controlled variable.
    pub effective_gains: [f64; 2],
    /// Whether the result lies in the feasible set of [`feasible_signs`].
    pub agrees: bool,
}

/// Sequential loop closing: the loop on output `first` is closed against its
/// open-loop paired gain, the remaining loop against `g_paired / λ_paired`.
pub fn sequential_signs(g: &Matrix2<f64>, pairing: Pairing, first: usize) -> Result<SequentialSigns> {
    if first > 1 {
        return Err(Error::InvalidParameter("loop index must be 0 or 1".into()));
    }
    let lambda = rga(g)?;
    let second = 1 - first;
    let paired = |output: usize| g[(output, pairing.input_for(output))];
    let mut effective = [0.0; 2];
    effective[first] = paired(first);
    let l = lambda[(second, pairing.input_for(second))];
    if l == 0.0 {
        return Err(Error::Domain("relative gain of the second loop is zero".into()));
    }
    effective[second] = paired(second) / l;
    let sign = |v: f64| Sign::of(v).ok_or_else(|| Error::Domain("paired gain is zero".into()));
    let signs = Signs([sign(effective[0])?, sign(effective[1])?]);
    Ok(SequentialSigns { signs, effective_gains: effective, agrees: exists_stabilizing_magnitudes(g, pairing, signs) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessReport {
    pub pairing: Pairing,
    pub signs: Signs,
    pub verdicts: Vec<IcVerdict>,
    /// Indices (into the analysed list) of instances that are integral
    /// controllable under this configuration.
    pub stable: Vec<usize>,
}

impl UniquenessReport {
    pub fn is_singleton(&self) -> bool {
        self.stable.len() == 1
    }
}

pub fn uniqueness_report(analyses: &[GainAnalysis], pairing: Pairing, signs: Signs) -> UniquenessReport {
    let cfg = PairingConfig::new(pairing, signs);
    let verdicts: Vec<IcVerdict> = analyses.iter().map(|a| ic_classify(&a.gain, &cfg)).collect();
    let stable = verdicts.iter().enumerate().filter(|(_, v)| v.exists).map(|(i, _)| i).collect();
    UniquenessReport { pairing, signs, verdicts, stable }
}

/// One row of the instance summary: gains, RGA and feasible sign sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GainTableRow {
    pub analysis: GainAnalysis,
    pub direct: Vec<Signs>,
    pub swapped: Vec<Signs>,
}

pub fn gain_table(params: &PlantParams, instances: &[(StatePair, InputPair)]) -> Result<Vec<GainTableRow>> {
    instances
        .iter()
        .map(|&(x, u)| {
            let analysis = GainAnalysis::new(params, x, u)?;
            Ok(GainTableRow {
                direct: feasible_signs(&analysis.gain, Pairing::Direct),
                swapped: feasible_signs(&analysis.gain, Pairing::Swapped),
                analysis,
            })
        })
        .collect()
}
