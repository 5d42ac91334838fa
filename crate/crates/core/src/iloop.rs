//! Plant under multi-loop pure integral control, `du/dt = k C(0) (r - y)`.

use nalgebra::{Complex, Matrix4, SVector, Vector4};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linear::PairingConfig;
use crate::model::{AffineForm, InputPair, OutputPair, PlantParams, StatePair};
use crate::ode::{integrate_until, IntegratorConfig, Termination};

/// Closed-loop state `(x1, x2, u1, u2)`.
pub type LoopState = Vector4<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegralLoopConfig {
    pub control: PairingConfig,
    /// Common integrator gain (1/s).
    pub k: f64,
    pub setpoint: OutputPair,
    pub u_init: InputPair,
    pub x_init: StatePair,
}

impl IntegralLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::InvalidParameter("integral gain k must be positive".into()));
        }
        self.control.validate()?;
        self.u_init.check()
    }

    pub fn initial_state(&self) -> LoopState {
        Vector4::new(self.x_init.x1, self.x_init.x2, self.u_init.u1, self.u_init.u2)
    }
}

fn split(z: &LoopState) -> (StatePair, InputPair) {
    (StatePair::new(z[0], z[1]), InputPair::new(z[2], z[3]))
}

pub fn closed_loop_rhs(params: &PlantParams, control: &PairingConfig, k: f64, r: OutputPair, z: &LoopState) -> Result<LoopState> {
    let (x, u) = split(z);
    let form = AffineForm::new(params, u)?;
    let dx = form.eval(&x.to_vector());
    let du = control.compensator() * (r.to_vector() - x.to_vector()) * k;
    Ok(Vector4::new(dx[0], dx[1], du[0], du[1]))
}

/// `[[∂f/∂x, ∂f/∂u], [-k C(0), 0]]`.
pub fn augmented_jacobian(params: &PlantParams, control: &PairingConfig, k: f64, x: StatePair, u: InputPair) -> Result<Matrix4<f64>> {
    let form = AffineForm::new(params, u)?;
    let ju = form.input_jacobian(&x.to_vector());
    let c = control.compensator() * -k;
    let mut j = Matrix4::zeros();
    j.fixed_view_mut::<2, 2>(0, 0).copy_from(&form.a);
    j.fixed_view_mut::<2, 2>(0, 2).copy_from(&ju);
    j.fixed_view_mut::<2, 2>(2, 0).copy_from(&c);
    Ok(j)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalStability {
    /// Sorted by real part.
    pub eigenvalues: [Complex<f64>; 4],
    pub hurwitz: bool,
}

impl LocalStability {
    pub fn spectral_abscissa(&self) -> f64 {
        self.eigenvalues[3].re
    }
}

/// Eigenvalues of the augmented Jacobian at the equilibrium `(r, u_eq)`.
pub fn local_stability(params: &PlantParams, control: &PairingConfig, k: f64, r: OutputPair, u_eq: InputPair) -> Result<LocalStability> {
    let f = crate::model::rhs(params, r, u_eq)?;
    if f.norm_inf() > 1e-8 {
        return Err(Error::Domain(format!("(r, u) is not a steady state: residual {:e}", f.norm_inf())));
    }
    let j = augmented_jacobian(params, control, k, r, u_eq)?;
    let ev = j.complex_eigenvalues();
    let mut eigenvalues = [ev[0], ev[1], ev[2], ev[3]];
    eigenvalues.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(LocalStability { eigenvalues, hurwitz: eigenvalues.iter().all(|e| e.re < 0.0) })
}

/// Result of a gain search for one configuration and claimed instance.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizingGain {
    /// Largest `k = 2⁻ⁿ` at which the claimed instance alone is locally stable.
    pub k: f64,
    /// Every gain checked from `k` down to the lower limit, with whether the
    /// exclusive-stability pattern still held.
    pub sweep: Vec<(f64, bool)>,
}

impl StabilizingGain {
    pub fn holds_throughout(&self) -> bool {
        self.sweep.iter().all(|&(_, ok)| ok)
    }
}

fn exclusive(params: &PlantParams, control: &PairingConfig, k: f64, r: OutputPair, instances: &[InputPair], claimed: usize) -> Result<bool> {
    for (i, &u) in instances.iter().enumerate() {
        if local_stability(params, control, k, r, u)?.hurwitz != (i == claimed) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Halves `k` from 1 until only `instances[claimed]` is locally stable, then
/// keeps halving down to `k_min` to check the pattern persists.
pub fn stabilizing_gain(
    params: &PlantParams,
    control: &PairingConfig,
    r: OutputPair,
    instances: &[InputPair],
    claimed: usize,
    k_min: f64,
) -> Result<Option<StabilizingGain>> {
    if claimed >= instances.len() || !(k_min > 0.0) {
        return Err(Error::InvalidParameter("claimed index or k_min out of range".into()));
    }
    let mut k = 1.0;
    while k >= k_min {
        if exclusive(params, control, k, r, instances, claimed)? {
            let mut sweep = Vec::new();
            let mut kk = k;
            while kk >= k_min {
                sweep.push((kk, exclusive(params, control, kk, r, instances, claimed)?));
                kk *= 0.5;
            }
            return Ok(Some(StabilizingGain { k, sweep }));
        }
        k *= 0.5;
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IloopSimOptions {
    pub horizon: f64,
    /// Early stop when `‖(dx, du)‖∞` falls below this.
    pub settle_tol: f64,
    /// Spacing of recorded samples; `0` records only the endpoints.
    pub sample_dt: f64,
    /// Distance (∞-norm in both `x` and `u`) for attributing the end state
    /// to an instance.
    pub match_tol: f64,
    pub integrator: IntegratorConfig,
}

impl Default for IloopSimOptions {
    fn default() -> Self {
        IloopSimOptions {
            horizon: 1e4,
            settle_tol: 1e-12,
            sample_dt: 10.0,
            match_tol: 1e-4,
            integrator: IntegratorConfig { max_steps: 200_000, ..IntegratorConfig::rk45(1e-10, 1e-13) },
        }
    }
}

/// Length of one integration window in [`simulate_iloop`] (s).
pub const WINDOW: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum IloopVerdict {
    /// Ended within `match_tol` of `(r, instances[instance])`.
    Converged { instance: usize },
    /// The input left `u1 > 0, 0 < u2 < 1` at time `t`.
    LeftInputDomain { t: f64 },
    /// Still in the domain at the horizon but not at any instance.
    NotConverged,
    /// A window exhausted the step budget; the state is the last one reached.
    IntegrationFailed { t: f64, reason: String },
}

impl std::fmt::Display for IloopVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IloopVerdict::Converged { instance } => write!(f, "converged to instance {}", instance + 1),
            IloopVerdict::LeftInputDomain { t } => write!(f, "left input domain at t = {t}"),
            IloopVerdict::NotConverged => f.write_str("not converged at horizon"),
            IloopVerdict::IntegrationFailed { t, reason } => write!(f, "integration failed after t = {t}: {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IloopRun {
    pub verdict: IloopVerdict,
    pub t_end: f64,
    pub state: LoopState,
    pub settled: bool,
    pub samples: Vec<(f64, LoopState)>,
}

/// Integrates the closed loop in windows of [`WINDOW`] seconds. Derivatives
/// requested outside the input domain are evaluated at the nearest interior
/// point; the run stops after the first accepted step that leaves the domain.
/// When a window cannot be integrated within the step budget (the plant turns
/// very stiff at high `u1`), the run ends with
/// [`IloopVerdict::IntegrationFailed`] at the last completed window.
pub fn simulate_iloop(params: &PlantParams, cfg: &IntegralLoopConfig, instances: &[InputPair], opts: &IloopSimOptions) -> Result<IloopRun> {
    cfg.validate()?;
    if !(opts.horizon > 0.0) {
        return Err(Error::InvalidParameter("horizon must be positive".into()));
    }
    opts.integrator.validate()?;
    let eps = 1e-9;
    let rhs = |_: f64, z: &SVector<f64, 4>| {
        let mut zz = *z;
        zz[2] = zz[2].max(eps);
        zz[3] = zz[3].clamp(eps, 1.0 - eps);
        closed_loop_rhs(params, &cfg.control, cfg.k, cfg.setpoint, &zz).unwrap_or_else(|_| Vector4::repeat(f64::NAN))
    };
    let sample_times: Vec<f64> = if opts.sample_dt > 0.0 {
        let n = (opts.horizon / opts.sample_dt).floor() as usize;
        (0..=n).map(|i| i as f64 * opts.sample_dt).chain(std::iter::once(opts.horizon)).collect()
    } else {
        vec![0.0, opts.horizon]
    };
    let integ = opts.integrator.with_settle_tol(opts.settle_tol);
    let mut recorded: Vec<(f64, LoopState)> = Vec::new();
    let mut t = 0.0;
    let mut z = cfg.initial_state();
    let mut termination = Termination::Reached;
    let mut failure = None;
    while t < opts.horizon {
        let t_next = (t + WINDOW).min(opts.horizon);
        let window: Vec<f64> = sample_times.iter().copied().filter(|&s| s >= t && s <= t_next).collect();
        match integrate_until(rhs, z, (t, t_next), &integ, &window, |_, z| !split(z).1.in_domain()) {
            Ok(sol) => {
                for (ts, zs) in sol.samples {
                    if recorded.last().is_none_or(|(tl, _)| *tl < ts) {
                        recorded.push((ts, zs));
                    }
                }
                t = sol.t;
                z = sol.state;
                termination = sol.termination;
                if termination != Termination::Reached {
                    break;
                }
            }
            Err(Error::Integration { reason, .. }) => {
                failure = Some(reason);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if recorded.last().is_none_or(|(tl, _)| *tl < t) {
        recorded.push((t, z));
    }
    let (x, u) = split(&z);
    let verdict = if let Some(reason) = failure {
        IloopVerdict::IntegrationFailed { t, reason }
    } else if termination == Termination::Stopped {
        IloopVerdict::LeftInputDomain { t }
    } else {
        instances
            .iter()
            .position(|ui| x.max_abs_diff(&cfg.setpoint) < opts.match_tol && u.max_abs_diff(ui) < opts.match_tol)
            .map_or(IloopVerdict::NotConverged, |instance| IloopVerdict::Converged { instance })
    };
    Ok(IloopRun { verdict, t_end: t, state: z, settled: termination == Termination::Settled, samples: recorded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{gain_matrix, ic_classify, Pairing, Signs};
    use crate::model::eigenvalues2;
    use crate::par::Execution;
    use crate::steady::{find_input_instances, InstanceSearch};

    fn setup() -> (PlantParams, OutputPair, Vec<InputPair>) {
        let p = PlantParams::default();
        let r = OutputPair::new(0.49, 0.37);
        let u = find_input_instances(&p, r, &InstanceSearch::default(), Execution::Sequential).unwrap().inputs();
        (p, r, u)
    }

    fn witness_config(p: &PlantParams, r: OutputPair, u: InputPair, pairing: Pairing, signs: &str) -> PairingConfig {
        let g = gain_matrix(p, r, u).unwrap();
        let base = PairingConfig::new(pairing, signs.parse::<Signs>().unwrap());
        base.with_magnitudes(ic_classify(&g, &base).witness.unwrap())
    }

    // Configurations under which exactly one instance is claimed stable.
    const BULLETS: [(Pairing, &str, usize); 4] =
        [(Pairing::Direct, "++", 1), (Pairing::Direct, "+-", 2), (Pairing::Swapped, "++", 0), (Pairing::Swapped, "-+", 1)];

    #[test]
    fn instances_are_closed_loop_equilibria() {
        let (p, r, us) = setup();
        for (pairing, signs, _) in BULLETS {
            let c = PairingConfig::new(pairing, signs.parse().unwrap());
            for &u in &us {
                let z = Vector4::new(r.x1, r.x2, u.u1, u.u2);
                assert!(closed_loop_rhs(&p, &c, 0.01, r, &z).unwrap().amax() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_gain_limit_is_block_triangular() {
        let (p, r, us) = setup();
        let c = PairingConfig::new(Pairing::Direct, "++".parse().unwrap());
        for &u in &us {
            let j = augmented_jacobian(&p, &c, 0.0, r, u).unwrap();
            let mut ev: Vec<Complex<f64>> = j.complex_eigenvalues().iter().copied().collect();
            ev.sort_by(|a, b| a.re.total_cmp(&b.re));
            let open = eigenvalues2(&crate::model::jac_x(&p, r, u).unwrap());
            assert!(ev[2].norm() < 1e-12 && ev[3].norm() < 1e-12);
            assert!((ev[0] - open[0]).norm() < 1e-9 && (ev[1] - open[1]).norm() < 1e-9);
        }
    }

    #[test]
    fn claimed_instance_alone_is_stable_at_small_gain() {
        let (p, r, us) = setup();
        for (pairing, signs, claimed) in BULLETS {
            let c = witness_config(&p, r, us[claimed], pairing, signs);
            for (i, &u) in us.iter().enumerate() {
                let st = local_stability(&p, &c, 0.01, r, u).unwrap();
                assert_eq!(st.hurwitz, i == claimed, "{pairing:?} {signs} instance {i}");
            }
        }
    }

    #[test]
    fn stability_persists_under_gain_halving() {
        let (p, r, us) = setup();
        for (pairing, signs, claimed) in BULLETS {
            let c = witness_config(&p, r, us[claimed], pairing, signs);
            let found = stabilizing_gain(&p, &c, r, &us, claimed, 1e-4).unwrap().unwrap();
            assert!(found.k <= 1.0);
            assert!(found.holds_throughout(), "{pairing:?} {signs}: {:?}", found.sweep);
        }
    }

    #[test]
    fn non_equilibrium_is_rejected() {
        let (p, r, _) = setup();
        let c = PairingConfig::new(Pairing::Direct, "++".parse().unwrap());
        assert!(local_stability(&p, &c, 0.01, r, InputPair::new(1.0, 0.5)).is_err());
    }

    #[test]
    fn perturbed_stable_instance_returns() {
        let (p, r, us) = setup();
        let c = witness_config(&p, r, us[0], Pairing::Swapped, "++");
        let cfg = IntegralLoopConfig { control: c, k: 0.01, setpoint: r, u_init: InputPair::new(us[0].u1 + 1e-3, us[0].u2), x_init: r };
        let opts = IloopSimOptions { horizon: 5000.0, ..Default::default() };
        let run = simulate_iloop(&p, &cfg, &us, &opts).unwrap();
        let (_, u) = split(&run.state);
        assert!(u.max_abs_diff(&us[0]) < 1e-4, "{u:?}");
    }

    #[test]
    fn unstable_instance_is_left() {
        let (p, r, us) = setup();
        let c = witness_config(&p, r, us[0], Pairing::Swapped, "++");
        let cfg = IntegralLoopConfig { control: c, k: 0.01, setpoint: r, u_init: InputPair::new(us[1].u1 + 1e-3, us[1].u2), x_init: r };
        let opts = IloopSimOptions { horizon: 3e4, ..Default::default() };
        let run = simulate_iloop(&p, &cfg, &us, &opts).unwrap();
        let (_, u) = split(&run.state);
        assert!(u.max_abs_diff(&us[1]) > 1e-2, "{:?} {u:?}", run.verdict);
        assert_ne!(run.verdict, IloopVerdict::Converged { instance: 1 });
    }

    #[test]
    fn invalid_loop_config_is_rejected() {
        let (p, r, us) = setup();
        let c = PairingConfig::new(Pairing::Direct, "++".parse().unwrap());
        let cfg = IntegralLoopConfig { control: c, k: 0.0, setpoint: r, u_init: us[0], x_init: r };
        assert!(simulate_iloop(&p, &cfg, &us, &IloopSimOptions::default()).is_err());
        let cfg = IntegralLoopConfig { k: 0.01, u_init: InputPair::new(1.0, 1.5), ..cfg };
        assert!(simulate_iloop(&p, &cfg, &us, &IloopSimOptions::default()).is_err());
    }
}
