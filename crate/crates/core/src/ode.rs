//! Explicit integrators for small autonomous-or-not ODE systems.
//!
//! Two methods are offered: classic fixed-step RK4 and the Dormand-Prince
//! 5(4) pair with embedded error control. Both land exactly on requested
//! sample times and on the end of the span, and both can stop early on a
//! steady-state event or a caller predicate.

use nalgebra::SVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rk4Fixed,
    Rk45Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub method: Method,
    /// Fixed step for RK4, initial step for RK45.
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    /// Stop once `‖f(t, x)‖∞` falls below this value.
    pub settle_tol: Option<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: Method::Rk45Adaptive,
            step: 1e-3,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_steps: 5_000_000,
            settle_tol: None,
        }
    }
}

impl IntegratorConfig {
    pub fn rk4(step: f64) -> Self {
        IntegratorConfig { method: Method::Rk4Fixed, step, ..Default::default() }
    }

    pub fn rk45(rel_tol: f64, abs_tol: f64) -> Self {
        IntegratorConfig { rel_tol, abs_tol, ..Default::default() }
    }

    pub fn with_settle_tol(mut self, tol: f64) -> Self {
        self.settle_tol = Some(tol);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidParameter("integrator step must be positive".into()));
        }
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::InvalidParameter("integrator tolerances must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Why integration ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Reached the end of the span.
    Reached,
    /// Steady-state event fired.
    Settled,
    /// Caller predicate fired.
    Stopped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution<const N: usize> {
    pub t: f64,
    pub state: SVector<f64, N>,
    /// `(t, x)` at every requested sample time reached before termination.
    pub samples: Vec<(f64, SVector<f64, N>)>,
    pub termination: Termination,
    pub steps: usize,
}

/// Integrates `dx/dt = f(t, x)` over `t_span`.
pub fn integrate<const N: usize, F>(
    f: F,
    x0: SVector<f64, N>,
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
    sample_times: &[f64],
) -> Result<Solution<N>>
where
    F: FnMut(f64, &SVector<f64, N>) -> SVector<f64, N>,
{
    integrate_until(f, x0, t_span, cfg, sample_times, |_, _| false)
}

/// Like [`integrate`], stopping after the first accepted step for which
/// `stop(t, x)` is true.
pub fn integrate_until<const N: usize, F, S>(
    mut f: F,
    x0: SVector<f64, N>,
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
    sample_times: &[f64],
    mut stop: S,
) -> Result<Solution<N>>
where
    F: FnMut(f64, &SVector<f64, N>) -> SVector<f64, N>,
    S: FnMut(f64, &SVector<f64, N>) -> bool,
{
    cfg.validate()?;
    let (t0, t1) = t_span;
    if !(t1 >= t0) {
        return Err(Error::InvalidParameter(format!("time span ({t0}, {t1}) is not increasing")));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::Integration { t: t0, reason: "non-finite initial state".into() });
    }

    let mut targets: Vec<f64> = sample_times.iter().copied().filter(|&s| s >= t0 && s <= t1).collect();
    targets.sort_by(f64::total_cmp);
    targets.dedup();

    let mut t = t0;
    let mut x = x0;
    let mut samples = Vec::with_capacity(targets.len());
    let mut next_sample = 0;
    while next_sample < targets.len() && targets[next_sample] <= t0 {
        samples.push((t0, x0));
        next_sample += 1;
    }

    let mut h = cfg.step;
    let mut steps = 0usize;
    let mut k1 = f(t, &x);
    if let Some(tol) = cfg.settle_tol {
        if k1.amax() < tol {
            return Ok(Solution { t, state: x, samples, termination: Termination::Settled, steps });
        }
    }

    while t < t1 {
        if steps >= cfg.max_steps {
            return Err(Error::Integration { t, reason: format!("exceeded {} steps", cfg.max_steps) });
        }
        let goal = if next_sample < targets.len() { targets[next_sample] } else { t1 };
        let remaining = goal - t;
        // Snap to the goal when the leftover piece would be negligible.
        let (h_try, lands) = if h >= remaining * (1.0 - 1e-12) { (remaining, true) } else { (h, false) };

        let (x_new, k_new, accepted, h_next) = match cfg.method {
            Method::Rk4Fixed => {
                let x_new = rk4_step(&mut f, t, &x, &k1, h_try);
                if !x_new.iter().all(|v| v.is_finite()) {
                    return Err(Error::Integration { t, reason: "non-finite state".into() });
                }
                let k_new = f(t + h_try, &x_new);
                (x_new, k_new, true, cfg.step)
            }
            Method::Rk45Adaptive => {
                let (x_new, k_new, err) = dopri_step(&mut f, t, &x, &k1, h_try, cfg);
                if err.is_finite() && err <= 1.0 {
                    let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                    // Keep the pre-truncation step so sample landings do not
                    // shrink the working step.
                    let base = if lands { h.max(h_try) } else { h_try };
                    (x_new, k_new, true, base * grow)
                } else {
                    let shrink = if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.1, 0.5) } else { 0.1 };
                    (x, k1, false, h_try * shrink)
                }
            }
        };

        if !accepted {
            if h_next < 1e-14 * t.abs().max(1.0) {
                return Err(Error::Integration { t, reason: "step size underflow".into() });
            }
            h = h_next;
            continue;
        }

        steps += 1;
        t = if lands { goal } else { t + h_try };
        x = x_new;
        k1 = k_new;
        h = h_next;
        if lands && next_sample < targets.len() && goal == targets[next_sample] {
            samples.push((t, x));
            next_sample += 1;
        }

        if let Some(tol) = cfg.settle_tol {
            if k1.amax() < tol {
                return Ok(Solution { t, state: x, samples, termination: Termination::Settled, steps });
            }
        }
        if stop(t, &x) {
            return Ok(Solution { t, state: x, samples, termination: Termination::Stopped, steps });
        }
    }
    Ok(Solution { t, state: x, samples, termination: Termination::Reached, steps })
}

fn rk4_step<const N: usize, F>(
    f: &mut F,
    t: f64,
    x: &SVector<f64, N>,
    k1: &SVector<f64, N>,
    h: f64,
) -> SVector<f64, N>
where
    F: FnMut(f64, &SVector<f64, N>) -> SVector<f64, N>,
{
    let k2 = f(t + 0.5 * h, &(x + k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(x + k2 * (0.5 * h)));
    let k4 = f(t + h, &(x + k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the 5th- and 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// One Dormand-Prince step; returns the 5th-order state, `f` there (FSAL),
/// and the scaled RMS error.
fn dopri_step<const N: usize, F>(
    f: &mut F,
    t: f64,
    x: &SVector<f64, N>,
    k1: &SVector<f64, N>,
    h: f64,
    cfg: &IntegratorConfig,
) -> (SVector<f64, N>, SVector<f64, N>, f64)
where
    F: FnMut(f64, &SVector<f64, N>) -> SVector<f64, N>,
{
    let k2 = f(t + C2 * h, &(x + k1 * (A21 * h)));
    let k3 = f(t + C3 * h, &(x + (k1 * A31 + k2 * A32) * h));
    let k4 = f(t + C4 * h, &(x + (k1 * A41 + k2 * A42 + k3 * A43) * h));
    let k5 = f(t + C5 * h, &(x + (k1 * A51 + k2 * A52 + k3 * A53 + k4 * A54) * h));
    let k6 = f(t + h, &(x + (k1 * A61 + k2 * A62 + k3 * A63 + k4 * A64 + k5 * A65) * h));
    let x_new = x + (k1 * B1 + k3 * B3 + k4 * B4 + k5 * B5 + k6 * B6) * h;
    let k7 = f(t + h, &x_new);
    let err_vec = (k1 * E1 + k3 * E3 + k4 * E4 + k5 * E5 + k6 * E6 + k7 * E7) * h;

    let mut sum = 0.0;
    for i in 0..N {
        let scale = cfg.abs_tol + cfg.rel_tol * x[i].abs().max(x_new[i].abs());
        let r = err_vec[i] / scale;
        sum += r * r;
    }
    let err = if N == 0 { 0.0 } else { (sum / N as f64).sqrt() };
    let err = if x_new.iter().all(|v| v.is_finite()) { err } else { f64::NAN };
    (x_new, k7, err)
}
