//! Receding-horizon nonlinear MPC with a BFGS inner solver.
//!
//! The objective over a horizon of `H` stages is
//!
//! ```text
//! F = Σ_{k=0}^{H-1} (y(k+1) - r)ᵀ Ky (y(k+1) - r) + (u(k+1) - u(k))ᵀ Ku (u(k+1) - u(k))
//! ```
//!
//! where `u(0)` is the last applied input and `u(k+1)` is held over the
//! interval from sample `k` to `k+1`. There are exactly `H` tracking and `H`
//! move terms.
//!
//! Prediction and the simulated plant use the same [`Propagator`]. The
//! default propagates the affine state equation exactly over each sample:
//! `x⁺ = x* + exp(AΔt)(x - x*)` with `x* = -A⁻¹b`, which stays accurate when
//! the rate constants are stiff at high temperature.

use nalgebra::{DVector, Matrix2, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AffineForm, InputPair, OutputPair, PlantParams, StatePair};
use crate::ode::{integrate, IntegratorConfig};
use crate::optim::{bfgs, BfgsOptions, BfgsStatus};
use crate::steady::InputBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Propagator {
    /// Closed-form zero-order-hold flow with analytic input sensitivities.
    #[default]
    ExactFlow,
    /// Fixed-step RK4 with `substeps` steps per sample; gradients by central
    /// differences.
    Rk4 { substeps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcConfig {
    pub setpoint: OutputPair,
    pub horizon: usize,
    pub dt: f64,
    pub ky: Matrix2<f64>,
    pub ku: Matrix2<f64>,
    pub optimizer: BfgsOptions,
    /// Inputs outside this box are evaluated at the nearest point of the box
    /// and charged `barrier_weight · violation²`.
    pub admissible: InputBox,
    pub barrier_weight: f64,
    pub propagator: Propagator,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            setpoint: OutputPair::new(0.49, 0.37),
            horizon: 2,
            dt: 0.5,
            ky: Matrix2::identity(),
            ku: Matrix2::identity() * 2.0,
            optimizer: BfgsOptions::default(),
            admissible: InputBox { u1: (0.5, 1.5), u2: (0.01, 0.99) },
            barrier_weight: 1e6,
            propagator: Propagator::ExactFlow,
        }
    }
}

fn is_symmetric_psd(m: &Matrix2<f64>) -> bool {
    let sym = (m[(0, 1)] - m[(1, 0)]).abs() <= 1e-12 * (1.0 + m.amax());
    sym && m[(0, 0)] >= 0.0 && m[(1, 1)] >= 0.0 && m.determinant() >= -1e-12 * (1.0 + m.amax().powi(2))
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter("sampling time must be positive".into()));
        }
        if !is_symmetric_psd(&self.ky) || !is_symmetric_psd(&self.ku) {
            return Err(Error::InvalidParameter("weights must be symmetric positive semidefinite".into()));
        }
        if !(self.optimizer.grad_tol > 0.0) || self.optimizer.max_iter == 0 {
            return Err(Error::InvalidParameter("optimizer tolerance and iteration cap must be positive".into()));
        }
        if !(self.barrier_weight >= 0.0) {
            return Err(Error::InvalidParameter("barrier weight must be non-negative".into()));
        }
        if let Propagator::Rk4 { substeps: 0 } = self.propagator {
            return Err(Error::InvalidParameter("RK4 propagator needs at least one substep".into()));
        }
        self.admissible.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MpcState {
    pub x: StatePair,
    /// Input applied over the previous sample.
    pub u_prev: InputPair,
    pub step: usize,
}

impl MpcState {
    pub fn new(x: StatePair, u_prev: InputPair) -> Self {
        MpcState { x, u_prev, step: 0 }
    }
}

/// `e^s cosh√w`, `e^s sinh√w/√w` and `e^s d/dw(sinh√w/√w)`, continued
/// analytically to `w ≤ 0`.
fn scaled_phi(s: f64, w: f64) -> (f64, f64, f64) {
    if w.abs() < 1.0 {
        let (mut c, mut sn, mut sp) = (0.0, 0.0, 0.0);
        let mut term = 1.0; // w^n / (2n)!
        for n in 0..16 {
            let nf = n as f64;
            c += term;
            let t_s = term / (2.0 * nf + 1.0);
            sn += t_s;
            // d/dw of w^(n+1)/(2n+3)! is (n+1) w^n/(2n+3)!
            sp += (nf + 1.0) * t_s / ((2.0 * nf + 2.0) * (2.0 * nf + 3.0));
            term *= w / ((2.0 * nf + 1.0) * (2.0 * nf + 2.0));
        }
        let e = s.exp();
        (e * c, e * sn, e * sp)
    } else if w > 0.0 {
        let q = w.sqrt();
        let ep = (s + q).exp();
        let em = (s - q).exp();
        let ec = 0.5 * (ep + em);
        let es = (ep - em) / (2.0 * q);
        (ec, es, (ec - es) / (2.0 * w))
    } else {
        let q = (-w).sqrt();
        let e = s.exp();
        let ec = e * q.cos();
        let es = e * q.sin() / q;
        (ec, es, (ec - es) / (2.0 * w))
    }
}

/// `exp(M)` of a real 2x2 matrix together with its directional derivatives
/// along each `dm`.
pub fn expm2_with_derivatives(m: &Matrix2<f64>, dm: &[Matrix2<f64>; 2]) -> (Matrix2<f64>, [Matrix2<f64>; 2]) {
    let s = 0.5 * m.trace();
    let n = m - Matrix2::identity() * s;
    let w = s * s - m.determinant();
    let (ec, es, esp) = scaled_phi(s, w);
    let e = Matrix2::identity() * ec + n * es;
    let deriv = |d: &Matrix2<f64>| {
        let ds = 0.5 * d.trace();
        let ddet = m[(1, 1)] * d[(0, 0)] + m[(0, 0)] * d[(1, 1)] - m[(0, 1)] * d[(1, 0)] - m[(1, 0)] * d[(0, 1)];
        let dw = 2.0 * s * ds - ddet;
        let dn = d - Matrix2::identity() * ds;
        e * ds + Matrix2::identity() * (0.5 * es * dw) + n * (esp * dw) + dn * es
    };
    (e, [deriv(&dm[0]), deriv(&dm[1])])
}

/// One sample of the exact flow: next state, `∂x⁺/∂x` and `∂x⁺/∂u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageFlow {
    pub x_next: Vector2<f64>,
    pub dx: Matrix2<f64>,
    pub du: Matrix2<f64>,
}

pub fn exact_stage(params: &PlantParams, x: &Vector2<f64>, u: InputPair, dt: f64) -> Result<StageFlow> {
    let form = AffineForm::new(params, u)?;
    let a_inv = form.a.try_inverse().ok_or(Error::Singular("state Jacobian"))?;
    let x_star = -(a_inv * form.b);
    let (e, de) = expm2_with_derivatives(&(form.a * dt), &[form.da[0] * dt, form.da[1] * dt]);
    let offset = x - x_star;
    let x_next = x_star + e * offset;
    let i_minus_e = Matrix2::identity() - e;
    let column = |m: usize| {
        let dx_star = -(a_inv * (form.da[m] * x_star + form.db[m]));
        i_minus_e * dx_star + de[m] * offset
    };
    Ok(StageFlow { x_next, dx: e, du: Matrix2::from_columns(&[column(0), column(1)]) })
}

fn propagate(params: &PlantParams, x: &Vector2<f64>, u: InputPair, dt: f64, propagator: Propagator) -> Result<Vector2<f64>> {
    match propagator {
        Propagator::ExactFlow => Ok(exact_stage(params, x, u, dt)?.x_next),
        Propagator::Rk4 { substeps } => {
            let form = AffineForm::new(params, u)?;
            let cfg = IntegratorConfig::rk4(dt / substeps as f64);
            let x0 = SVector::<f64, 2>::new(x[0], x[1]);
            let sol = integrate(|_, z: &SVector<f64, 2>| form.eval(z), x0, (0.0, dt), &cfg, &[])?;
            Ok(sol.state)
        }
    }
}

/// Outputs `y(1), …, y(H)` under a piecewise-constant input sequence.
pub fn predict(
    params: &PlantParams,
    x: StatePair,
    u_seq: &[InputPair],
    dt: f64,
    propagator: Propagator,
) -> Result<Vec<OutputPair>> {
    let mut z = x.to_vector();
    u_seq
        .iter()
        .map(|&u| {
            z = propagate(params, &z, u, dt, propagator)?;
            if !(z[0].is_finite() && z[1].is_finite()) {
                return Err(Error::Integration { t: dt, reason: "non-finite prediction".into() });
            }
            Ok(StatePair::from_vector(&z))
        })
        .collect()
}

fn quad(k: &Matrix2<f64>, v: &Vector2<f64>) -> f64 {
    v.dot(&(k * v))
}

fn check_len(cfg: &MpcConfig, u_seq: &[InputPair]) -> Result<()> {
    if u_seq.len() == cfg.horizon {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("input sequence has {} stages, horizon is {}", u_seq.len(), cfg.horizon)))
    }
}

fn tracking_value(params: &PlantParams, cfg: &MpcConfig, x: StatePair, u_seq: &[InputPair]) -> Result<f64> {
    let r = cfg.setpoint.to_vector();
    let ys = predict(params, x, u_seq, cfg.dt, cfg.propagator)?;
    Ok(ys.iter().map(|y| quad(&cfg.ky, &(y.to_vector() - r))).sum())
}

/// Tracking part of `F` and its gradient with respect to each stage input.
fn tracking_terms(
    params: &PlantParams,
    cfg: &MpcConfig,
    x: StatePair,
    u_seq: &[InputPair],
) -> Result<(f64, Vec<Vector2<f64>>)> {
    match cfg.propagator {
        Propagator::ExactFlow => {
            let r = cfg.setpoint.to_vector();
            let ky2 = cfg.ky + cfg.ky.transpose();
            let mut z = x.to_vector();
            let mut value = 0.0;
            let mut stages = Vec::with_capacity(u_seq.len());
            for (k, &u) in u_seq.iter().enumerate() {
                let stage = exact_stage(params, &z, u, cfg.dt)?;
                z = stage.x_next;
                if !(z[0].is_finite() && z[1].is_finite()) {
                    return Err(Error::Integration { t: (k + 1) as f64 * cfg.dt, reason: "non-finite prediction".into() });
                }
                let err = z - r;
                value += quad(&cfg.ky, &err);
                stages.push((stage, ky2 * err));
            }
            // Adjoint sweep: lambda holds ∂F/∂x(k+1).
            let mut grad = vec![Vector2::zeros(); u_seq.len()];
            let mut lambda = Vector2::zeros();
            for (k, (stage, dy)) in stages.iter().enumerate().rev() {
                lambda += dy;
                grad[k] = stage.du.transpose() * lambda;
                lambda = stage.dx.transpose() * lambda;
            }
            Ok((value, grad))
        }
        Propagator::Rk4 { .. } => {
            let value = tracking_value(params, cfg, x, u_seq)?;
            let h = 1e-6;
            let mut work = u_seq.to_vec();
            let mut grad = vec![Vector2::zeros(); u_seq.len()];
            for k in 0..u_seq.len() {
                for m in 0..2 {
                    let mut at = |delta: f64| {
                        let mut v = u_seq[k].to_vector();
                        v[m] += delta;
                        work[k] = InputPair::from_vector(&v);
                        let out = tracking_value(params, cfg, x, &work);
                        work[k] = u_seq[k];
                        out
                    };
                    grad[k][m] = (at(h)? - at(-h)?) / (2.0 * h);
                }
            }
            Ok((value, grad))
        }
    }
}

/// Move-suppression part of `F` and its gradient.
fn move_terms(cfg: &MpcConfig, u_prev: InputPair, u_seq: &[InputPair]) -> (f64, Vec<Vector2<f64>>) {
    let ku2 = cfg.ku + cfg.ku.transpose();
    let mut prev = u_prev.to_vector();
    let mut value = 0.0;
    let mut grad = vec![Vector2::zeros(); u_seq.len()];
    for (k, u) in u_seq.iter().enumerate() {
        let v = u.to_vector();
        let mv = v - prev;
        value += quad(&cfg.ku, &mv);
        grad[k] += ku2 * mv;
        if k > 0 {
            grad[k - 1] -= ku2 * mv;
        }
        prev = v;
    }
    (value, grad)
}

/// Unpenalised objective `F`.
pub fn mpc_objective(params: &PlantParams, cfg: &MpcConfig, state: &MpcState, u_seq: &[InputPair]) -> Result<f64> {
    check_len(cfg, u_seq)?;
    Ok(tracking_value(params, cfg, state.x, u_seq)? + move_terms(cfg, state.u_prev, u_seq).0)
}

/// `F` and `∂F/∂u(k)` for each stage. Exact-flow prediction uses an adjoint
/// sweep over the analytic sensitivities; RK4 prediction uses central
/// differences with step `1e-6`.
pub fn mpc_gradient(
    params: &PlantParams,
    cfg: &MpcConfig,
    state: &MpcState,
    u_seq: &[InputPair],
) -> Result<(f64, Vec<Vector2<f64>>)> {
    check_len(cfg, u_seq)?;
    let (tv, tg) = tracking_terms(params, cfg, state.x, u_seq)?;
    let (mv, mg) = move_terms(cfg, state.u_prev, u_seq);
    Ok((tv + mv, tg.iter().zip(&mg).map(|(a, b)| a + b).collect()))
}

fn clamp_to(bx: &InputBox, u: InputPair) -> InputPair {
    InputPair::new(u.u1.clamp(bx.u1.0, bx.u1.1), u.u2.clamp(bx.u2.0, bx.u2.1))
}

fn unstack(z: &DVector<f64>) -> Vec<InputPair> {
    z.as_slice().chunks(2).map(|c| InputPair::new(c[0], c[1])).collect()
}

fn stack(u_seq: &[InputPair]) -> DVector<f64> {
    DVector::from_iterator(2 * u_seq.len(), u_seq.iter().flat_map(|u| [u.u1, u.u2]))
}

/// Objective seen by the optimizer over the stacked sequence. Tracking terms
/// are evaluated at the inputs clamped to the admissible box, move terms at
/// the raw inputs, plus `barrier_weight · violation²`. Returns `+∞` when
/// prediction fails so the line search backs off.
pub fn penalized_objective(params: &PlantParams, cfg: &MpcConfig, state: &MpcState, z: &DVector<f64>) -> (f64, DVector<f64>) {
    let raw = unstack(z);
    let clamped: Vec<InputPair> = raw.iter().map(|&u| clamp_to(&cfg.admissible, u)).collect();
    let Ok((tv, tg)) = tracking_terms(params, cfg, state.x, &clamped) else {
        return (f64::INFINITY, DVector::zeros(z.len()));
    };
    let (mv, mg) = move_terms(cfg, state.u_prev, &raw);
    let mut value = tv + mv;
    let mut grad = DVector::zeros(z.len());
    for k in 0..raw.len() {
        let viol = raw[k].to_vector() - clamped[k].to_vector();
        value += cfg.barrier_weight * viol.norm_squared();
        for m in 0..2 {
            let track = if viol[m] == 0.0 { tg[k][m] } else { 0.0 };
            grad[2 * k + m] = track + mg[k][m] + 2.0 * cfg.barrier_weight * viol[m];
        }
    }
    (value, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcStep {
    /// First input of the minimising sequence, to be applied now.
    pub u: InputPair,
    pub sequence: Vec<InputPair>,
    pub cost: f64,
    pub grad_norm: f64,
    pub status: BfgsStatus,
    pub iterations: usize,
}

impl MpcStep {
    /// Set when the optimizer stopped without meeting the gradient tolerance.
    pub fn warning(&self) -> bool {
        self.status != BfgsStatus::Converged
    }
}

/// One receding-horizon solve, warm-started at the previous input repeated
/// over the horizon.
pub fn solve_mpc_step(params: &PlantParams, cfg: &MpcConfig, state: &MpcState) -> Result<MpcStep> {
    state.u_prev.check()?;
    let z0 = stack(&vec![state.u_prev; cfg.horizon]);
    let res = bfgs(|z| penalized_objective(params, cfg, state, z), z0, &cfg.optimizer);
    if !res.value.is_finite() {
        return Err(Error::Integration { t: 0.0, reason: "prediction failed at the warm start".into() });
    }
    let sequence = unstack(&res.x);
    Ok(MpcStep {
        u: sequence[0],
        sequence,
        cost: res.value,
        grad_norm: res.grad.amax(),
        status: res.status,
        iterations: res.iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcSimOptions {
    pub max_steps: usize,
    /// Consecutive samples within tolerance required to declare convergence.
    pub settle_steps: usize,
    pub y_tol: f64,
    pub u_tol: f64,
    /// Keep the per-step trajectory.
    pub record: bool,
}

impl Default for MpcSimOptions {
    fn default() -> Self {
        MpcSimOptions { max_steps: 2000, settle_steps: 20, y_tol: 1e-4, u_tol: 1e-3, record: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MpcOutcome {
    /// Index into the target list.
    Converged { instance: usize },
    Unresolved,
    /// The applied input left `u1 > 0, 0 < u2 < 1`, or the state stopped being
    /// finite.
    DomainExit,
}

/// State at `t`, the input applied over `[t, t + Δt)` and solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcRecord {
    pub t: f64,
    pub x: StatePair,
    pub u: InputPair,
    pub cost: f64,
    pub grad_norm: f64,
    pub status: BfgsStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcRun {
    pub outcome: MpcOutcome,
    /// Number of controller steps taken.
    pub steps: usize,
    pub state: MpcState,
    pub warnings: usize,
    pub records: Vec<MpcRecord>,
}

/// Closed-loop simulation. Convergence to `targets[i]` is declared once
/// `‖y - r‖∞ < y_tol` and `‖u - targets[i]‖∞ < u_tol` have held for
/// `settle_steps` consecutive samples.
pub fn simulate_mpc(
    params: &PlantParams,
    cfg: &MpcConfig,
    targets: &[InputPair],
    x0: StatePair,
    u0: InputPair,
    opts: &MpcSimOptions,
) -> Result<MpcRun> {
    cfg.validate()?;
    u0.check()?;
    let mut state = MpcState::new(x0, u0);
    let mut records = Vec::new();
    let mut warnings = 0;
    let mut streak: Option<(usize, usize)> = None;
    let r = cfg.setpoint;
    let finish = |outcome, state: MpcState, warnings, records| MpcRun { outcome, steps: state.step, state, warnings, records };
    while state.step < opts.max_steps {
        let step = match solve_mpc_step(params, cfg, &state) {
            Ok(step) => step,
            Err(_) => return Ok(finish(MpcOutcome::DomainExit, state, warnings, records)),
        };
        warnings += usize::from(step.warning());
        if opts.record {
            records.push(MpcRecord {
                t: state.step as f64 * cfg.dt,
                x: state.x,
                u: step.u,
                cost: step.cost,
                grad_norm: step.grad_norm,
                status: step.status,
            });
        }
        if !step.u.in_domain() {
            return Ok(finish(MpcOutcome::DomainExit, state, warnings, records));
        }
        let next = match propagate(params, &state.x.to_vector(), step.u, cfg.dt, cfg.propagator) {
            Ok(z) if z[0].is_finite() && z[1].is_finite() => StatePair::from_vector(&z),
            _ => return Ok(finish(MpcOutcome::DomainExit, state, warnings, records)),
        };
        state = MpcState { x: next, u_prev: step.u, step: state.step + 1 };
        let near = (state.x.max_abs_diff(&r) < opts.y_tol)
            .then(|| targets.iter().position(|t| state.u_prev.max_abs_diff(t) < opts.u_tol))
            .flatten();
        streak = match (near, streak) {
            (Some(i), Some((j, n))) if i == j => Some((i, n + 1)),
            (Some(i), _) => Some((i, 1)),
            (None, _) => None,
        };
        if let Some((i, n)) = streak {
            if n >= opts.settle_steps {
                return Ok(finish(MpcOutcome::Converged { instance: i }, state, warnings, records));
            }
        }
    }
    Ok(finish(MpcOutcome::Unresolved, state, warnings, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::Execution;
    use crate::steady::{find_input_instances, InstanceSearch};
    use proptest::prelude::*;

    fn params() -> PlantParams {
        PlantParams::default()
    }

    fn instances() -> Vec<InputPair> {
        let r = MpcConfig::default().setpoint;
        find_input_instances(&params(), r, &InstanceSearch::default(), Execution::Sequential).unwrap().inputs()
    }

    /// Straight-line re-implementation of the objective for H = 2 using RK45
    /// integration of the raw rate expressions.
    fn reference_objective(x0: (f64, f64), u0: (f64, f64), seq: [(f64, f64); 2]) -> f64 {
        use crate::ode::{integrate, IntegratorConfig};
        let step = |x: (f64, f64), u: (f64, f64)| -> (f64, f64) {
            let f = move |_: f64, z: &SVector<f64, 2>| {
                let a = |k0: f64, e: f64| k0 * (-(e / 600.0) * (1.0 / u.0 - 1.0)).exp();
                let (k1, k2, k3, k4) = (a(1.0, 5000.0), a(0.7, 6000.0), a(0.1, 30000.0), a(0.006, 50000.0));
                let tau = u.1 / (1.0 - u.1);
                let (x1, x2) = (z[0], z[1]);
                SVector::<f64, 2>::new(
                    -k1 * x1 + k4 * x2 + (0.8 - x1) / tau,
                    k1 * x1 - (k2 + k4) * x2 + k3 * (1.0 - x1 - x2) + (0.2 - x2) / tau,
                )
            };
            let cfg = IntegratorConfig::rk45(1e-13, 1e-15);
            let s = integrate(f, SVector::<f64, 2>::new(x.0, x.1), (0.0, 0.5), &cfg, &[]).unwrap().state;
            (s[0], s[1])
        };
        let y1 = step(x0, seq[0]);
        let y2 = step(y1, seq[1]);
        let e = |y: (f64, f64)| (y.0 - 0.49).powi(2) + (y.1 - 0.37).powi(2);
        let m = |a: (f64, f64), b: (f64, f64)| 2.0 * ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2));
        e(y1) + e(y2) + m(seq[0], u0) + m(seq[1], seq[0])
    }

    #[test]
    fn matrix_exponential_matches_taylor_series() {
        for m in [
            Matrix2::new(-1.0, 0.3, 0.2, -2.0),
            Matrix2::new(-0.1, 2.0, -3.0, -0.2),
            Matrix2::new(-1e-3, 0.0, 0.0, -1e-3),
            Matrix2::new(-40.0, 1.0, 30.0, -2.0),
        ] {
            let (e, _) = expm2_with_derivatives(&m, &[Matrix2::zeros(); 2]);
            // Scaling and squaring of a truncated series.
            let scaled = m / 1024.0;
            let mut series = Matrix2::identity();
            let mut term = Matrix2::identity();
            for k in 1..20 {
                term = term * scaled / k as f64;
                series += term;
            }
            for _ in 0..10 {
                series = series * series;
            }
            assert!((e - series).amax() < 1e-10 * (1.0 + series.amax()), "{m}");
        }
    }

    #[test]
    fn matrix_exponential_derivative_matches_differences() {
        let dm = [Matrix2::new(0.3, -0.1, 0.2, 0.05), Matrix2::new(-0.5, 0.0, 0.0, -0.5)];
        for m in [Matrix2::new(-1.0, 0.3, 0.2, -2.0), Matrix2::new(-0.1, 2.0, -3.0, -0.2), Matrix2::new(-0.5, 0.1, 0.1, -0.6)] {
            let (_, d) = expm2_with_derivatives(&m, &dm);
            for j in 0..2 {
                let h = 1e-6;
                let (ep, _) = expm2_with_derivatives(&(m + dm[j] * h), &dm);
                let (em, _) = expm2_with_derivatives(&(m - dm[j] * h), &dm);
                let fd = (ep - em) / (2.0 * h);
                assert!((fd - d[j]).amax() < 1e-7, "{m} {j}");
            }
        }
    }

    #[test]
    fn exact_stage_matches_adaptive_integration() {
        let p = params();
        let u = InputPair::new(0.96, 0.5);
        let x0 = StatePair::new(0.3, 0.5);
        let form = AffineForm::new(&p, u).unwrap();
        let sol = integrate(
            |_, z: &SVector<f64, 2>| form.eval(z),
            x0.to_vector(),
            (0.0, 0.5),
            &IntegratorConfig::rk45(1e-12, 1e-14),
            &[],
        )
        .unwrap();
        let y = predict(&p, x0, &[u], 0.5, Propagator::ExactFlow).unwrap();
        assert!((y[0].to_vector() - sol.state).amax() < 1e-9);
        let y4 = predict(&p, x0, &[u], 0.5, Propagator::Rk4 { substeps: 50 }).unwrap();
        assert!((y4[0].to_vector() - sol.state).amax() < 1e-8);
    }

    #[test]
    fn stage_sensitivities_match_differences() {
        let p = params();
        let x = Vector2::new(0.3, 0.5);
        for u in [InputPair::new(0.96, 0.5), InputPair::new(1.07, 0.67), InputPair::new(1.2, 0.3)] {
            let st = exact_stage(&p, &x, u, 0.5).unwrap();
            for m in 0..2 {
                let h = 1e-6;
                let shift = |d: f64| {
                    let mut v = u.to_vector();
                    v[m] += d;
                    exact_stage(&p, &x, InputPair::from_vector(&v), 0.5).unwrap().x_next
                };
                let fd = (shift(h) - shift(-h)) / (2.0 * h);
                assert!((fd - st.du.column(m)).amax() < 1e-6 * (1.0 + fd.amax()), "{u:?} {m}");
            }
        }
    }

    #[test]
    fn equilibrium_hold_stays_at_setpoint() {
        let p = params();
        let r = MpcConfig::default().setpoint;
        for u in instances() {
            let ys = predict(&p, r, &[u, u], 0.5, Propagator::ExactFlow).unwrap();
            assert!(ys.iter().all(|y| y.max_abs_diff(&r) < 1e-8));
        }
    }

    #[test]
    fn objective_zero_at_fixed_point_and_positive_off_it() {
        let p = params();
        let cfg = MpcConfig::default();
        let u1 = instances()[0];
        let state = MpcState::new(cfg.setpoint, u1);
        assert!(mpc_objective(&p, &cfg, &state, &[u1, u1]).unwrap() < 1e-14);
        let moved = InputPair::new(u1.u1 + 1e-3, u1.u2);
        assert!(mpc_objective(&p, &cfg, &state, &[moved, moved]).unwrap() > 0.0);
        assert!(mpc_objective(&p, &cfg, &state, &[u1]).is_err());
    }

    #[test]
    fn objective_matches_independent_implementation() {
        let p = params();
        let cfg = MpcConfig::default();
        let state = MpcState::new(StatePair::new(0.3, 0.5), InputPair::new(0.96, 0.5));
        let seq = [(0.97, 0.49), (0.99, 0.52)];
        let ours = mpc_objective(&p, &cfg, &state, &[InputPair::new(0.97, 0.49), InputPair::new(0.99, 0.52)]).unwrap();
        let theirs = reference_objective((0.3, 0.5), (0.96, 0.5), seq);
        assert!((ours - theirs).abs() < 1e-12, "{ours} {theirs}");
    }

    #[test]
    fn fixed_points_of_the_controller() {
        let p = params();
        let cfg = MpcConfig::default();
        for u in instances() {
            let step = solve_mpc_step(&p, &cfg, &MpcState::new(cfg.setpoint, u)).unwrap();
            assert!(step.u.max_abs_diff(&u) < 1e-6);
            assert!(step.grad_norm < 1e-6);
        }
    }

    #[test]
    fn fixed_points_hold_for_100_steps() {
        let p = params();
        let cfg = MpcConfig::default();
        let opts = MpcSimOptions { max_steps: 100, settle_steps: usize::MAX, ..Default::default() };
        let targets = instances();
        for &u in &targets {
            let run = simulate_mpc(&p, &cfg, &targets, cfg.setpoint, u, &opts).unwrap();
            assert_eq!(run.steps, 100);
            assert!(run.records.iter().all(|r| r.u.max_abs_diff(&u) < 1e-9));
        }
    }

    #[test]
    fn trajectories_are_bit_identical() {
        let p = params();
        let cfg = MpcConfig::default();
        let targets = instances();
        let opts = MpcSimOptions { max_steps: 200, ..Default::default() };
        let a = simulate_mpc(&p, &cfg, &targets, StatePair::new(0.3, 0.5), InputPair::new(0.96, 0.5), &opts).unwrap();
        let b = simulate_mpc(&p, &cfg, &targets, StatePair::new(0.3, 0.5), InputPair::new(0.96, 0.5), &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_at_returned_solution_is_small() {
        let p = params();
        let cfg = MpcConfig::default();
        let step = solve_mpc_step(&p, &cfg, &MpcState::new(StatePair::new(0.3, 0.5), InputPair::new(0.96, 0.5))).unwrap();
        assert!(step.grad_norm < 1e-6);
        assert!(!step.warning());
        assert!(cfg.admissible.contains(step.u));
    }

    #[test]
    fn barrier_keeps_iterates_interior() {
        let p = params();
        let cfg = MpcConfig::default();
        let state = MpcState::new(StatePair::new(0.3, 0.5), InputPair::new(0.96, 0.5));
        let z = DVector::from_vec(vec![2.0, 0.5, 0.96, 1.2]);
        let (v, g) = penalized_objective(&p, &cfg, &state, &z);
        assert!(v > 1e5);
        assert!(g[0] > 0.0 && g[3] > 0.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            MpcConfig { horizon: 0, ..Default::default() },
            MpcConfig { dt: 0.0, ..Default::default() },
            MpcConfig { ky: Matrix2::new(1.0, 2.0, 0.0, 1.0), ..Default::default() },
            MpcConfig { ku: -Matrix2::identity(), ..Default::default() },
            MpcConfig { propagator: Propagator::Rk4 { substeps: 0 }, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(MpcConfig::default().validate().is_ok());
    }

    #[test]
    fn rk4_gradient_agrees_with_exact_gradient() {
        let p = params();
        let state = MpcState::new(StatePair::new(0.3, 0.5), InputPair::new(0.96, 0.5));
        let seq = [InputPair::new(0.97, 0.49), InputPair::new(0.99, 0.52)];
        let exact = mpc_gradient(&p, &MpcConfig::default(), &state, &seq).unwrap().1;
        let rk_cfg = MpcConfig { propagator: Propagator::Rk4 { substeps: 40 }, ..Default::default() };
        let rk = mpc_gradient(&p, &rk_cfg, &state, &seq).unwrap().1;
        for (a, b) in exact.iter().zip(&rk) {
            assert!((a - b).amax() < 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn gradient_matches_central_differences(
            x1 in 0.1f64..0.7, x2 in 0.1f64..0.5,
            a in 0.9f64..1.1, b in 0.3f64..0.7, c in 0.9f64..1.1, d in 0.3f64..0.7,
        ) {
            let p = params();
            let cfg = MpcConfig::default();
            let state = MpcState::new(StatePair::new(x1, x2), InputPair::new(0.96, 0.5));
            let seq = [InputPair::new(a, b), InputPair::new(c, d)];
            let (_, g) = mpc_gradient(&p, &cfg, &state, &seq).unwrap();
            let h = 1e-6;
            for k in 0..2 {
                for m in 0..2 {
                    let at = |delta: f64| {
                        let mut s = seq;
                        let mut v = s[k].to_vector();
                        v[m] += delta;
                        s[k] = InputPair::from_vector(&v);
                        mpc_objective(&p, &cfg, &state, &s).unwrap()
                    };
                    let fd = (at(h) - at(-h)) / (2.0 * h);
                    prop_assert!((fd - g[k][m]).abs() <= 1e-5 * fd.abs().max(1e-3), "{} vs {}", fd, g[k][m]);
                }
            }
        }
    }
}
