//! Steady states, input instances for an output setpoint, and continuation of
//! input branches along one output with the other held fixed.

use nalgebra::{Matrix2, Matrix3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{eigenvalues2, AffineForm, InputPair, OutputPair, PlantParams, StatePair};
use crate::par::Execution;

/// Damped Newton options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Converged when `‖F‖∞ < tol`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-12, max_iter: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSolution<const N: usize> {
    pub z: SVector<f64, N>,
    pub residual: f64,
    pub iterations: usize,
}

/// Newton's method with step halving on `‖F‖∞`. `eval` returns the residual
/// and Jacobian, or an error when `z` is outside its domain; such trial points
/// are treated like a failed decrease.
pub fn damped_newton<const N: usize, F>(
    mut eval: F,
    z0: SVector<f64, N>,
    opts: NewtonOptions,
) -> Result<NewtonSolution<N>>
where
    F: FnMut(&SVector<f64, N>) -> Result<(SVector<f64, N>, SMatrix<f64, N, N>)>,
{
    let mut z = z0;
    let (mut res, mut jac) = eval(&z)?;
    let mut norm = res.amax();
    for it in 0..=opts.max_iter {
        if !norm.is_finite() {
            break;
        }
        if norm < opts.tol {
            return Ok(NewtonSolution { z, residual: norm, iterations: it });
        }
        if it == opts.max_iter {
            break;
        }
        let step = solve_dense(jac, -res).ok_or(Error::Singular("Newton Jacobian"))?;
        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda > 1e-10 {
            let trial = z + step * lambda;
            if let Ok((r, j)) = eval(&trial) {
                let n = r.amax();
                if n.is_finite() && n <= (1.0 - 1e-4 * lambda) * norm {
                    z = trial;
                    res = r;
                    jac = j;
                    norm = n;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, residual: norm })
}

/// Gaussian elimination with partial pivoting for small fixed-size systems.
pub(crate) fn solve_dense<const N: usize>(
    mut a: SMatrix<f64, N, N>,
    mut b: SVector<f64, N>,
) -> Option<SVector<f64, N>> {
    let scale = a.amax();
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    for col in 0..N {
        let pivot = (col..N).max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))?;
        if a[(pivot, col)].abs() <= 1e-14 * scale {
            return None;
        }
        a.swap_rows(col, pivot);
        b.swap_rows(col, pivot);
        for row in col + 1..N {
            let factor = a[(row, col)] / a[(col, col)];
            for k in col..N {
                a[(row, k)] -= factor * a[(col, k)];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..N).rev() {
        let mut acc = b[col];
        for k in col + 1..N {
            acc -= a[(col, k)] * b[k];
        }
        b[col] = acc / a[(col, col)];
    }
    Some(b)
}

/// Steady state in `x` for a fixed input. The plant is affine in `x`, so
/// Newton finishes in one or two iterations from any guess.
pub fn solve_x(params: &PlantParams, u: InputPair, x_guess: StatePair) -> Result<StatePair> {
    let form = AffineForm::new(params, u)?;
    let sol = damped_newton(
        |z: &Vector2<f64>| Ok((form.eval(z), form.a)),
        x_guess.to_vector(),
        NewtonOptions::default(),
    )?;
    Ok(StatePair::from_vector(&sol.z))
}

/// Rectangular search region in input space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBox {
    pub u1: (f64, f64),
    pub u2: (f64, f64),
}

impl Default for InputBox {
    fn default() -> Self {
        InputBox { u1: (0.85, 1.15), u2: (0.2, 0.8) }
    }
}

impl InputBox {
    pub fn contains(&self, u: InputPair) -> bool {
        u.u1 >= self.u1.0 && u.u1 <= self.u1.1 && u.u2 >= self.u2.0 && u.u2 <= self.u2.1
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.u1.0 < self.u1.1
            && self.u2.0 < self.u2.1
            && InputPair::new(self.u1.0, self.u2.0).in_domain()
            && InputPair::new(self.u1.1, self.u2.1).in_domain();
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("search box {self:?} must be non-empty and inside u1 > 0, 0 < u2 < 1")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InputInstance {
    pub u: InputPair,
    pub x: StatePair,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputInstanceSet {
    pub setpoint: OutputPair,
    /// Sorted by `u1`, then `u2`.
    pub instances: Vec<InputInstance>,
}

impl InputInstanceSet {
    pub fn inputs(&self) -> Vec<InputPair> {
        self.instances.iter().map(|i| i.u).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSearch {
    pub search_box: InputBox,
    pub grid: (usize, usize),
    pub newton: NewtonOptions,
    /// Solutions closer than this (∞-norm in `u`) are merged.
    pub merge_radius: f64,
}

impl Default for InstanceSearch {
    fn default() -> Self {
        InstanceSearch {
            search_box: InputBox::default(),
            grid: (20, 20),
            newton: NewtonOptions::default(),
            merge_radius: 1e-4,
        }
    }
}

/// Newton in `u` with the state pinned at the setpoint.
pub fn solve_u(params: &PlantParams, r: OutputPair, u_guess: InputPair, opts: NewtonOptions) -> Result<InputInstance> {
    let x = r.to_vector();
    let sol = damped_newton(
        |z: &Vector2<f64>| {
            let form = AffineForm::new(params, InputPair::from_vector(z))?;
            Ok((form.eval(&x), form.input_jacobian(&x)))
        },
        u_guess.to_vector(),
        opts,
    )?;
    Ok(InputInstance { u: InputPair::from_vector(&sol.z), x: r, residual: sol.residual })
}

/// All inputs `u` in the search box with `rhs(r, u) = 0`, by multistart
/// damped Newton from a regular grid of seeds. An empty result is valid.
pub fn find_input_instances(
    params: &PlantParams,
    r: OutputPair,
    search: &InstanceSearch,
    exec: Execution,
) -> Result<InputInstanceSet> {
    search.search_box.validate()?;
    let (n1, n2) = search.grid;
    if n1 == 0 || n2 == 0 {
        return Err(Error::InvalidParameter("multistart grid must be non-empty".into()));
    }
    let bx = search.search_box;
    let lin = |lo: f64, hi: f64, n: usize, i: usize| {
        if n == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }
    };
    let found = exec.map_range(n1 * n2, |idx| {
        let seed = InputPair::new(lin(bx.u1.0, bx.u1.1, n1, idx / n2), lin(bx.u2.0, bx.u2.1, n2, idx % n2));
        solve_u(params, r, seed, search.newton).ok()
    });

    let mut instances: Vec<InputInstance> = Vec::new();
    for inst in found.into_iter().flatten() {
        if !inst.u.in_domain() || !bx.contains(inst.u) {
            continue;
        }
        if instances.iter().all(|e| e.u.max_abs_diff(&inst.u) > search.merge_radius) {
            instances.push(inst);
        }
    }
    instances.sort_by(|a, b| a.u.u1.total_cmp(&b.u.u1).then(a.u.u2.total_cmp(&b.u.u2)));
    Ok(InputInstanceSet { setpoint: r, instances })
}

/// True when both open-loop eigenvalues have negative real part.
pub fn open_loop_stable(params: &PlantParams, u: InputPair) -> Result<bool> {
    let a = AffineForm::new(params, u)?.a;
    Ok(eigenvalues2(&a).iter().all(|e| e.re < 0.0))
}

/// Which output is held fixed during continuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedOutput {
    /// 0 for `y1`, 1 for `y2`.
    pub index: usize,
    pub value: f64,
}

impl FixedOutput {
    pub fn free_index(&self) -> usize {
        1 - self.index
    }

    fn state(&self, y_free: f64) -> Vector2<f64> {
        let mut x = Vector2::zeros();
        x[self.index] = self.value;
        x[self.free_index()] = y_free;
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BranchPoint {
    pub u: InputPair,
    pub y_free: f64,
    /// Accumulated chord length in `(u1, u2, y_free)`.
    pub s: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BranchStop {
    DomainBoundary,
    MaxPoints,
    MaxArclength,
    CorrectorFailure { step: f64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub fixed: FixedOutput,
    pub points: Vec<BranchPoint>,
    pub stop: BranchStop,
}

impl Branch {
    /// Full output vector at a branch point.
    pub fn output(&self, point: &BranchPoint) -> OutputPair {
        StatePair::from_vector(&self.fixed.state(point.y_free))
    }

    /// Inputs where the branch crosses `y_free = target`, each polished by
    /// Newton in `u` with the full output pinned.
    pub fn crossings(&self, params: &PlantParams, target: f64) -> Vec<InputPair> {
        let r = StatePair::from_vector(&self.fixed.state(target));
        let mut out: Vec<InputPair> = Vec::new();
        for w in self.points.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let (da, db) = (a.y_free - target, b.y_free - target);
            if da == 0.0 || da * db < 0.0 {
                let theta = if da == db { 0.0 } else { da / (da - db) };
                let guess = InputPair::new(a.u.u1 + theta * (b.u.u1 - a.u.u1), a.u.u2 + theta * (b.u.u2 - a.u.u2));
                if let Ok(inst) = solve_u(params, r, guess, NewtonOptions::default()) {
                    if out.iter().all(|o| o.max_abs_diff(&inst.u) > 1e-6) {
                        out.push(inst.u);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationOptions {
    pub initial_step: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub max_points: usize,
    pub max_arclength: f64,
    pub corrector_tol: f64,
    pub corrector_max_iter: usize,
    /// Continuation stays inside this box in `u`; `y_free` stays in `[0, 1]`
    /// and the outputs in the simplex.
    pub u1_range: (f64, f64),
    pub u2_range: (f64, f64),
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        ContinuationOptions {
            initial_step: 1e-2,
            min_step: 1e-4,
            max_step: 5e-2,
            max_points: 5000,
            max_arclength: 20.0,
            corrector_tol: 1e-11,
            corrector_max_iter: 8,
            u1_range: (0.6, 1.5),
            u2_range: (1e-3, 0.999),
        }
    }
}

impl ContinuationOptions {
    /// Constant step `h`, used for step-refinement studies.
    pub fn fixed_step(h: f64) -> Self {
        ContinuationOptions { initial_step: h, min_step: h, max_step: h, ..Default::default() }
    }

    fn inside(&self, z: &Vector3<f64>, fixed: &FixedOutput) -> bool {
        let x = fixed.state(z[2]);
        z[0] > self.u1_range.0
            && z[0] < self.u1_range.1
            && z[1] > self.u2_range.0
            && z[1] < self.u2_range.1
            && StatePair::from_vector(&x).in_simplex(0.0)
    }
}

/// Residual `rhs(x(y_free), u)` and its 2x3 Jacobian in `(u1, u2, y_free)`.
fn branch_system(
    params: &PlantParams,
    fixed: &FixedOutput,
    z: &Vector3<f64>,
) -> Result<(Vector2<f64>, SMatrix<f64, 2, 3>)> {
    let u = InputPair::new(z[0], z[1]);
    let form = AffineForm::new(params, u)?;
    let x = fixed.state(z[2]);
    let ju: Matrix2<f64> = form.input_jacobian(&x);
    let jy = form.a.column(fixed.free_index()).into_owned();
    let mut jac = SMatrix::<f64, 2, 3>::zeros();
    jac.fixed_view_mut::<2, 2>(0, 0).copy_from(&ju);
    jac.set_column(2, &jy);
    Ok((form.eval(&x), jac))
}

fn null_direction(jac: &SMatrix<f64, 2, 3>) -> Option<Vector3<f64>> {
    let r0 = Vector3::new(jac[(0, 0)], jac[(0, 1)], jac[(0, 2)]);
    let r1 = Vector3::new(jac[(1, 0)], jac[(1, 1)], jac[(1, 2)]);
    let t = r0.cross(&r1);
    let n = t.norm();
    (n > 0.0 && n.is_finite()).then(|| t / n)
}

/// Pseudo-arclength continuation of the steady-state curve
/// `rhs((y_fixed, y_free), u) = 0` in the unknowns `(u1, u2, y_free)`.
///
/// The first predictor follows the null direction of the Jacobian, oriented
/// so that `y_free` increases when `increasing` is true; later predictors use
/// the secant through the last two points. The corrector is Newton on the
/// curve equations plus the arclength hyperplane.
pub fn continue_branch(
    params: &PlantParams,
    fixed: FixedOutput,
    y_free_start: f64,
    u_start: InputPair,
    increasing: bool,
    opts: &ContinuationOptions,
) -> Result<Branch> {
    if fixed.index > 1 {
        return Err(Error::InvalidParameter("fixed output index must be 0 or 1".into()));
    }
    if !(opts.min_step > 0.0 && opts.min_step <= opts.initial_step && opts.initial_step <= opts.max_step) {
        return Err(Error::InvalidParameter("continuation steps must satisfy 0 < min <= initial <= max".into()));
    }
    let z0 = Vector3::new(u_start.u1, u_start.u2, y_free_start);
    let (res, jac) = branch_system(params, &fixed, &z0)?;
    if res.amax() > 1e-8 {
        return Err(Error::Domain(format!("continuation start is not a steady state (residual {:e})", res.amax())));
    }
    let mut direction = null_direction(&jac).ok_or(Error::Singular("continuation start Jacobian"))?;
    if (direction[2] < 0.0) == increasing {
        direction = -direction;
    }

    let stable = |z: &Vector3<f64>| open_loop_stable(params, InputPair::new(z[0], z[1])).unwrap_or(false);
    let mut points = vec![BranchPoint { u: u_start, y_free: y_free_start, s: 0.0, stable: stable(&z0) }];
    let mut z = z0;
    let mut h = opts.initial_step;
    let mut s = 0.0;

    let stop = loop {
        if points.len() >= opts.max_points {
            break BranchStop::MaxPoints;
        }
        if s >= opts.max_arclength {
            break BranchStop::MaxArclength;
        }
        let predicted = z + direction * h;
        match correct(params, &fixed, &predicted, &direction, opts) {
            Ok((zc, iterations)) => {
                if !opts.inside(&zc, &fixed) {
                    break BranchStop::DomainBoundary;
                }
                let chord = zc - z;
                let len = chord.norm();
                // Guard against the corrector jumping back along the curve.
                if len == 0.0 || chord.dot(&direction) <= 0.0 {
                    if h <= opts.min_step {
                        break BranchStop::CorrectorFailure { step: h, reason: "corrector reversed direction".into() };
                    }
                    h = (h * 0.5).max(opts.min_step);
                    continue;
                }
                s += len;
                direction = chord / len;
                z = zc;
                points.push(BranchPoint { u: InputPair::new(z[0], z[1]), y_free: z[2], s, stable: stable(&z) });
                if iterations <= 3 {
                    h = (h * 1.5).min(opts.max_step);
                }
            }
            Err(err) => {
                if !opts.inside(&predicted, &fixed) {
                    break BranchStop::DomainBoundary;
                }
                if h <= opts.min_step {
                    break BranchStop::CorrectorFailure { step: h, reason: err.to_string() };
                }
                h = (h * 0.5).max(opts.min_step);
            }
        }
    };
    Ok(Branch { fixed, points, stop })
}

fn correct(
    params: &PlantParams,
    fixed: &FixedOutput,
    predicted: &Vector3<f64>,
    direction: &Vector3<f64>,
    opts: &ContinuationOptions,
) -> Result<(Vector3<f64>, usize)> {
    let sol = damped_newton(
        |z: &Vector3<f64>| {
            let (res, jac) = branch_system(params, fixed, z)?;
            let full_res = Vector3::new(res[0], res[1], direction.dot(&(z - predicted)));
            let mut full_jac = Matrix3::zeros();
            full_jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&jac);
            full_jac.set_row(2, &direction.transpose());
            Ok((full_res, full_jac))
        },
        *predicted,
        NewtonOptions { tol: opts.corrector_tol, max_iter: opts.corrector_max_iter },
    )?;
    Ok((sol.z, sol.iterations))
}

/// Both directions from one start, with the given fixed output.
pub fn continue_both_ways(
    params: &PlantParams,
    fixed: FixedOutput,
    y_free_start: f64,
    u_start: InputPair,
    opts: &ContinuationOptions,
) -> Result<[Branch; 2]> {
    Ok([
        continue_branch(params, fixed, y_free_start, u_start, true, opts)?,
        continue_branch(params, fixed, y_free_start, u_start, false, opts)?,
    ])
}

/// Symmetric Hausdorff distance between two branches viewed as polylines in
/// `(u1, u2, y_free)`.
pub fn polyline_hausdorff(a: &[BranchPoint], b: &[BranchPoint]) -> f64 {
    polyline_directed_distance(a, b).max(polyline_directed_distance(b, a))
}

/// Largest distance from a vertex of `from` to the polyline `to`.
pub fn polyline_directed_distance(from: &[BranchPoint], to: &[BranchPoint]) -> f64 {
    let pts = |v: &[BranchPoint]| v.iter().map(|p| Vector3::new(p.u.u1, p.u.u2, p.y_free)).collect::<Vec<_>>();
    directed_hausdorff(&pts(from), &pts(to))
}

fn directed_hausdorff(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> f64 {
    from.iter()
        .map(|p| {
            if to.len() == 1 {
                return (p - to[0]).norm();
            }
            to.windows(2)
                .map(|w| {
                    let d = w[1] - w[0];
                    let dd = d.norm_squared();
                    let t = if dd == 0.0 { 0.0 } else { ((p - w[0]).dot(&d) / dd).clamp(0.0, 1.0) };
                    (p - (w[0] + d * t)).norm()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}
