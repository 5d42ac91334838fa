//! Basins of attraction of the MPC closed loop over 2-D slices of initial
//! conditions, boundary refinement and box counting.
//!
//! Grids are indexed `(i, j)` with `i` along the first coordinate and `j`
//! along the second; cell `(i, j)` of an `nx × ny` grid is sampled at its
//! center. Refinement level `ℓ` has the virtual resolution `nx·2^ℓ × ny·2^ℓ`
//! and only stores the children of cells that were mixed at level `ℓ - 1`;
//! any other cell takes the label of its nearest stored ancestor.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputPair, PlantParams, StatePair};
use crate::mpc::{simulate_mpc, MpcConfig, MpcOutcome, MpcSimOptions};
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    /// Zero-based index into the instance list.
    Instance(u8),
    Unresolved,
    DomainExit,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Instance(i) => write!(f, "{}", i + 1),
            Label::Unresolved => f.write_str("unresolved"),
            Label::DomainExit => f.write_str("domain-exit"),
        }
    }
}

impl From<MpcOutcome> for Label {
    fn from(o: MpcOutcome) -> Self {
        match o {
            MpcOutcome::Converged { instance } => Label::Instance(instance as u8),
            MpcOutcome::Unresolved => Label::Unresolved,
            MpcOutcome::DomainExit => Label::DomainExit,
        }
    }
}

/// Which plane of initial conditions is swept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SliceSpec {
    /// Initial previous input `(u1, u2)` varies; the state starts at `y0`.
    Input { y0: StatePair, u1: (f64, f64), u2: (f64, f64) },
    /// Initial state `(x1, x2)` varies; the previous input is `u0`.
    State { u0: InputPair, x1: (f64, f64), x2: (f64, f64) },
}

impl SliceSpec {
    pub fn input_default() -> Self {
        SliceSpec::Input { y0: StatePair::new(0.3, 0.5), u1: (0.85, 1.15), u2: (0.2, 0.8) }
    }

    pub fn state_default() -> Self {
        SliceSpec::State { u0: InputPair::new(0.96, 0.5), x1: (0.0, 1.0), x2: (0.0, 1.0) }
    }

    pub fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        match *self {
            SliceSpec::Input { u1, u2, .. } => (u1, u2),
            SliceSpec::State { x1, x2, .. } => (x1, x2),
        }
    }

    pub fn axis_names(&self) -> (&'static str, &'static str) {
        match self {
            SliceSpec::Input { .. } => ("u1", "u2"),
            SliceSpec::State { .. } => ("x1", "x2"),
        }
    }

    /// Initial `(x0, u0)` for the point `(c1, c2)` of the slice.
    pub fn initial_condition(&self, c1: f64, c2: f64) -> (StatePair, InputPair) {
        match *self {
            SliceSpec::Input { y0, .. } => (y0, InputPair::new(c1, c2)),
            SliceSpec::State { u0, .. } => (StatePair::new(c1, c2), u0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ((a0, a1), (b0, b1)) = self.bounds();
        if !(a0 < a1 && b0 < b1) || ![a0, a1, b0, b1].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("slice bounds must be finite and increasing".into()));
        }
        match *self {
            SliceSpec::Input { y0, .. } if !y0.is_finite() => Err(Error::InvalidParameter("y0 must be finite".into())),
            SliceSpec::Input { .. } => {
                if InputPair::new(a0, b0).in_domain() && InputPair::new(a1, b1).in_domain() {
                    Ok(())
                } else {
                    Err(Error::Domain("input slice must lie inside u1 > 0, 0 < u2 < 1".into()))
                }
            }
            SliceSpec::State { u0, .. } => u0.check(),
        }
    }
}

/// Cell size along each axis at level `ℓ` of a grid with `n` base cells.
fn cell_size(range: (f64, f64), n: usize, level: u32) -> f64 {
    (range.1 - range.0) / (n as f64 * f64::from(1u32 << level))
}

fn center(range: (f64, f64), n: usize, level: u32, i: usize) -> f64 {
    range.0 + (i as f64 + 0.5) * cell_size(range, n, level)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasinGrid {
    pub slice: SliceSpec,
    pub nx: usize,
    pub ny: usize,
    /// Row-major by `j`: cell `(i, j)` is at `j * nx + i`.
    pub labels: Vec<Label>,
    /// Controller steps taken by each cell's simulation.
    pub steps: Vec<u32>,
}

impl BasinGrid {
    pub fn label(&self, i: usize, j: usize) -> Label {
        self.labels[j * self.nx + i]
    }

    pub fn coords(&self, i: usize, j: usize) -> (f64, f64) {
        let (r1, r2) = self.slice.bounds();
        (center(r1, self.nx, 0, i), center(r2, self.ny, 0, j))
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn distinct_labels(&self) -> Vec<Label> {
        let mut v = self.labels.clone();
        v.sort();
        v.dedup();
        v
    }

    /// Cells with a 4-neighbour of a different label.
    pub fn mixed_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 0..self.ny {
            for i in 0..self.nx {
                let l = self.label(i, j);
                if neighbours(i, j, self.nx, self.ny).any(|(a, b)| self.label(a, b) != l) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

fn neighbours(i: usize, j: usize, nx: usize, ny: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)];
    cand.into_iter().filter(move |&(a, b)| a < nx && b < ny)
}

/// Labels every cell center with `labeler`, which returns the label and the
/// step count for the point `(c1, c2)`.
pub fn sweep_with<F>(slice: SliceSpec, nx: usize, ny: usize, exec: Execution, labeler: F) -> Result<BasinGrid>
where
    F: Fn(f64, f64) -> (Label, u32) + Sync + Send,
{
    slice.validate()?;
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidParameter("grid resolution must be positive".into()));
    }
    let (r1, r2) = slice.bounds();
    let cells = exec.map_range(nx * ny, |idx| {
        let (i, j) = (idx % nx, idx / nx);
        labeler(center(r1, nx, 0, i), center(r2, ny, 0, j))
    });
    let (labels, steps) = cells.into_iter().unzip();
    Ok(BasinGrid { slice, nx, ny, labels, steps })
}

/// Runs the MPC closed loop at one point of the slice.
pub fn label_point(
    params: &PlantParams,
    cfg: &MpcConfig,
    opts: &MpcSimOptions,
    targets: &[InputPair],
    slice: &SliceSpec,
    c1: f64,
    c2: f64,
) -> (Label, u32) {
    let (x0, u0) = slice.initial_condition(c1, c2);
    let opts = MpcSimOptions { record: false, ..*opts };
    match simulate_mpc(params, cfg, targets, x0, u0, &opts) {
        Ok(run) => (run.outcome.into(), run.steps as u32),
        Err(_) => (Label::DomainExit, 0),
    }
}

/// MPC basin map at resolution `nx × ny`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    params: &PlantParams,
    cfg: &MpcConfig,
    opts: &MpcSimOptions,
    targets: &[InputPair],
    slice: SliceSpec,
    nx: usize,
    ny: usize,
    exec: Execution,
) -> Result<BasinGrid> {
    cfg.validate()?;
    sweep_with(slice, nx, ny, exec, |c1, c2| label_point(params, cfg, opts, targets, &slice, c1, c2))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementLevel {
    pub level: u32,
    /// Virtual resolution at this level.
    pub nx: usize,
    pub ny: usize,
    /// Cells computed at this level.
    pub cells: BTreeMap<(usize, usize), (Label, u32)>,
    /// Cells of this level with a 4-neighbour of a different label.
    pub mixed: Vec<(usize, usize)>,
    /// Computed cells whose label differs from their parent's.
    pub changed: usize,
}

impl RefinementLevel {
    /// Area fraction of the slice relabelled when going from the previous
    /// level to this one.
    pub fn changed_fraction(&self) -> f64 {
        self.changed as f64 / (self.nx * self.ny) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinedBasin {
    pub base: BasinGrid,
    /// Level 0 holds the base grid's mixed cells and no computed cells.
    pub levels: Vec<RefinementLevel>,
}

impl RefinedBasin {
    /// Label of cell `(i, j)` at `level`, inherited from the nearest computed
    /// ancestor.
    pub fn label_at(&self, level: u32, i: usize, j: usize) -> Label {
        let mut lv = level;
        let (mut a, mut b) = (i, j);
        while lv > 0 {
            if let Some((l, _)) = self.levels[lv as usize].cells.get(&(a, b)) {
                return *l;
            }
            lv -= 1;
            a /= 2;
            b /= 2;
        }
        self.base.label(a, b)
    }

    pub fn cell_size(&self, level: u32) -> (f64, f64) {
        let (r1, r2) = self.base.slice.bounds();
        (cell_size(r1, self.base.nx, level), cell_size(r2, self.base.ny, level))
    }

    pub fn coords(&self, level: u32, i: usize, j: usize) -> (f64, f64) {
        let (r1, r2) = self.base.slice.bounds();
        (center(r1, self.base.nx, level, i), center(r2, self.base.ny, level, j))
    }

    pub fn mixed_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.mixed.len()).collect()
    }

    /// Fraction of all cells at each level that are mixed.
    pub fn mixed_fractions(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.mixed.len() as f64 / (l.nx * l.ny) as f64).collect()
    }

    fn mixed_at(&self, level: u32, nx: usize, ny: usize, cells: &[(usize, usize)]) -> Vec<(usize, usize)> {
        cells
            .iter()
            .copied()
            .filter(|&(i, j)| {
                let l = self.label_at(level, i, j);
                neighbours(i, j, nx, ny).any(|(a, b)| self.label_at(level, a, b) != l)
            })
            .collect()
    }
}

/// Subdivides mixed cells 2× per level, `levels` times, labelling the new
/// cell centers with `labeler`.
pub fn refine_with<F>(grid: BasinGrid, levels: u32, exec: Execution, labeler: F) -> Result<RefinedBasin>
where
    F: Fn(f64, f64) -> (Label, u32) + Sync + Send,
{
    if levels > 12 {
        return Err(Error::InvalidParameter("at most 12 refinement levels".into()));
    }
    let mixed0 = grid.mixed_cells();
    let mut refined = RefinedBasin {
        levels: vec![RefinementLevel { level: 0, nx: grid.nx, ny: grid.ny, cells: BTreeMap::new(), mixed: mixed0, changed: 0 }],
        base: grid,
    };
    for level in 1..=levels {
        let parent = &refined.levels[level as usize - 1];
        let children: Vec<(usize, usize)> = parent
            .mixed
            .iter()
            .flat_map(|&(i, j)| [(2 * i, 2 * j), (2 * i + 1, 2 * j), (2 * i, 2 * j + 1), (2 * i + 1, 2 * j + 1)])
            .collect();
        let results = exec.map(&children, |&(i, j)| {
            let (c1, c2) = refined.coords(level, i, j);
            labeler(c1, c2)
        });
        let (nx, ny) = (parent.nx * 2, parent.ny * 2);
        let changed = children
            .iter()
            .zip(&results)
            .filter(|(&(i, j), (l, _))| refined.label_at(level - 1, i / 2, j / 2) != *l)
            .count();
        let cells: BTreeMap<_, _> = children.iter().copied().zip(results).collect();
        refined.levels.push(RefinementLevel { level, nx, ny, cells, mixed: Vec::new(), changed });
        // Cells away from the computed ones inherit from non-mixed parents,
        // so only computed cells and their neighbours can be mixed.
        let mut candidates: Vec<(usize, usize)> = children
            .iter()
            .flat_map(|&(i, j)| std::iter::once((i, j)).chain(neighbours(i, j, nx, ny)))
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        let mixed = refined.mixed_at(level, nx, ny, &candidates);
        refined.levels[level as usize].mixed = mixed;
    }
    Ok(refined)
}

/// [`refine_with`] using the MPC closed loop as labeler.
#[allow(clippy::too_many_arguments)]
pub fn refine_boundary(
    params: &PlantParams,
    cfg: &MpcConfig,
    opts: &MpcSimOptions,
    targets: &[InputPair],
    grid: BasinGrid,
    levels: u32,
    exec: Execution,
) -> Result<RefinedBasin> {
    let slice = grid.slice;
    refine_with(grid, levels, exec, |c1, c2| label_point(params, cfg, opts, targets, &slice, c1, c2))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimensionEstimate {
    /// Least-squares slope of `log N` against `log(1/h)`.
    pub slope: f64,
    /// Standard error of the slope; zero with exactly two points.
    pub std_error: f64,
    /// `(h, mixed cell count)` per level, `h` along the first axis.
    pub counts: Vec<(f64, usize)>,
    /// Slope close to 2: the mixed cells fill the plane, so the estimate says
    /// nothing about a curve.
    pub degenerate: bool,
}

/// Box-counting estimate from the mixed-cell counts of at least three levels.
pub fn boundary_dimension(refined: &RefinedBasin) -> Result<DimensionEstimate> {
    if refined.levels.len() < 3 {
        return Err(Error::InsufficientData(format!("need at least 3 levels, have {}", refined.levels.len())));
    }
    let counts: Vec<(f64, usize)> =
        refined.levels.iter().map(|l| (refined.cell_size(l.level).0, l.mixed.len())).collect();
    if let Some(&(_, n)) = counts.iter().find(|(_, n)| *n < 10) {
        return Err(Error::InsufficientData(format!("only {n} mixed cells at one level (need 10)")));
    }
    let pts: Vec<(f64, f64)> = counts.iter().map(|&(h, n)| ((1.0 / h).ln(), (n as f64).ln())).collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let resid: f64 = pts.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    let std_error = if pts.len() > 2 { (resid / (m - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(DimensionEstimate { slope, std_error, counts, degenerate: slope > 1.8 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_slice() -> SliceSpec {
        SliceSpec::State { u0: InputPair::new(0.96, 0.5), x1: (0.0, 1.0), x2: (0.0, 1.0) }
    }

    fn line(c1: f64, c2: f64) -> (Label, u32) {
        (if c2 > 0.3 + 0.37 * c1 { Label::Instance(0) } else { Label::Instance(1) }, 1)
    }

    fn disc(c1: f64, c2: f64) -> (Label, u32) {
        let inside = (c1 - 0.5).powi(2) + (c2 - 0.45).powi(2) < 0.3f64.powi(2);
        (if inside { Label::Instance(2) } else { Label::Unresolved }, 1)
    }

    /// Parity of the binary digit sums of the finest-level cell index: every
    /// level looks like a scrambled checkerboard.
    fn checkerboard(c1: f64, c2: f64) -> (Label, u32) {
        let m = 32.0 * 16.0;
        let bits = ((c1 * m) as u32).count_ones() + ((c2 * m) as u32).count_ones();
        (if bits.is_multiple_of(2) { Label::Instance(0) } else { Label::Instance(1) }, 1)
    }

    #[test]
    fn straight_line_boundary_has_dimension_one() {
        let g = sweep_with(unit_slice(), 32, 32, Execution::Sequential, line).unwrap();
        let r = refine_with(g, 3, Execution::Sequential, line).unwrap();
        let d = boundary_dimension(&r).unwrap();
        assert!((d.slope - 1.0).abs() < 0.1, "{d:?}");
        assert!(!d.degenerate);
    }

    #[test]
    fn circle_boundary_has_dimension_one() {
        let g = sweep_with(unit_slice(), 32, 32, Execution::Sequential, disc).unwrap();
        let r = refine_with(g, 3, Execution::Sequential, disc).unwrap();
        let d = boundary_dimension(&r).unwrap();
        assert!((d.slope - 1.0).abs() < 0.1, "{d:?}");
        let fr = r.mixed_fractions();
        assert!(fr.windows(2).all(|w| w[1] < 0.6 * w[0]), "{fr:?}");
        let changed: Vec<f64> = r.levels[1..].iter().map(|l| l.changed_fraction()).collect();
        assert!(changed.windows(2).all(|w| w[1] < w[0]), "{changed:?}");
    }

    #[test]
    fn checkerboard_labels_are_flagged_degenerate() {
        let g = sweep_with(unit_slice(), 32, 32, Execution::Sequential, checkerboard).unwrap();
        let r = refine_with(g, 3, Execution::Sequential, checkerboard).unwrap();
        let d = boundary_dimension(&r).unwrap();
        assert!((d.slope - 2.0).abs() < 0.15, "{d:?}");
        assert!(d.degenerate);
    }

    #[test]
    fn uniform_region_has_no_mixed_cells() {
        let flat = |_: f64, _: f64| (Label::Instance(0), 1);
        let g = sweep_with(unit_slice(), 16, 16, Execution::Sequential, flat).unwrap();
        let r = refine_with(g, 2, Execution::Sequential, flat).unwrap();
        assert_eq!(r.mixed_counts(), vec![0, 0, 0]);
        assert!(matches!(boundary_dimension(&r), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn too_few_levels_is_insufficient() {
        let g = sweep_with(unit_slice(), 32, 32, Execution::Sequential, line).unwrap();
        let r = refine_with(g, 1, Execution::Sequential, line).unwrap();
        assert!(matches!(boundary_dimension(&r), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn refined_labels_match_direct_evaluation() {
        let g = sweep_with(unit_slice(), 16, 16, Execution::Sequential, disc).unwrap();
        let r = refine_with(g, 2, Execution::Sequential, disc).unwrap();
        for lv in &r.levels[1..] {
            for (&(i, j), &(l, _)) in &lv.cells {
                let (c1, c2) = r.coords(lv.level, i, j);
                assert_eq!(disc(c1, c2).0, l);
            }
        }
    }

    #[test]
    fn interior_cells_are_never_relabelled() {
        let g = sweep_with(unit_slice(), 16, 16, Execution::Sequential, disc).unwrap();
        let mixed = g.mixed_cells();
        for j in 0..16 {
            for i in 0..16 {
                if !mixed.contains(&(i, j)) {
                    let (c1, c2) = g.coords(i, j);
                    assert_eq!(disc(c1, c2).0, g.label(i, j));
                }
            }
        }
    }

    #[test]
    fn parallel_and_sequential_sweeps_agree() {
        let a = sweep_with(unit_slice(), 20, 12, Execution::Sequential, disc).unwrap();
        let b = sweep_with(unit_slice(), 20, 12, Execution::Parallel, disc).unwrap();
        assert_eq!(a, b);
        let ra = refine_with(a, 2, Execution::Sequential, disc).unwrap();
        let rb = refine_with(b, 2, Execution::Parallel, disc).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn grid_geometry() {
        let g = sweep_with(unit_slice(), 4, 2, Execution::Sequential, line).unwrap();
        assert_eq!(g.coords(0, 0), (0.125, 0.25));
        assert_eq!(g.coords(3, 1), (0.875, 0.75));
        assert_eq!(g.labels.len(), 8);
    }

    #[test]
    fn invalid_slices_are_rejected() {
        let bad = SliceSpec::Input { y0: StatePair::new(0.3, 0.5), u1: (0.9, 0.8), u2: (0.2, 0.8) };
        assert!(sweep_with(bad, 4, 4, Execution::Sequential, line).is_err());
        let bad = SliceSpec::Input { y0: StatePair::new(0.3, 0.5), u1: (0.8, 0.9), u2: (0.2, 1.2) };
        assert!(bad.validate().is_err());
        assert!(sweep_with(unit_slice(), 0, 4, Execution::Sequential, line).is_err());
    }

    #[test]
    fn label_display() {
        assert_eq!(Label::Instance(0).to_string(), "1");
        assert_eq!(Label::Unresolved.to_string(), "unresolved");
        assert_eq!(Label::DomainExit.to_string(), "domain-exit");
    }
}
