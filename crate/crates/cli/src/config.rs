//! Run configuration: a TOML file with every field optional, overridden by
//! command-line flags.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use inmult::basins::SliceSpec;
use inmult::linear::{Pairing, PairingConfig, Signs};
use inmult::mpc::{MpcConfig, MpcSimOptions, Propagator};
use inmult::optim::BfgsOptions;
use inmult::steady::{ContinuationOptions, InputBox, InstanceSearch};
use inmult::{InputPair, OutputPair, PlantParams, StatePair};
use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Worker threads for sweeps; 0 uses all cores.
    pub threads: usize,
    pub setpoint: [f64; 2],
    pub plant: PlantParams,
    pub search: SearchConfig,
    pub control: ControlConfig,
    pub mpc: MpcToml,
    pub basins: BasinsToml,
    pub continuation: ContinuationToml,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("."),
            threads: 0,
            setpoint: [0.49, 0.37],
            plant: PlantParams::default(),
            search: SearchConfig::default(),
            control: ControlConfig::default(),
            mpc: MpcToml::default(),
            basins: BasinsToml::default(),
            continuation: ContinuationToml::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub u1: [f64; 2],
    pub u2: [f64; 2],
    pub grid: [usize; 2],
    pub merge_radius: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let d = InstanceSearch::default();
        SearchConfig {
            u1: [d.search_box.u1.0, d.search_box.u1.1],
            u2: [d.search_box.u2.0, d.search_box.u2.1],
            grid: [d.grid.0, d.grid.1],
            merge_radius: d.merge_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub pairing: Pairing,
    pub signs: String,
    /// Loop gain magnitudes; the integral-controllability witness at
    /// `instance` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub magnitudes: Option<[f64; 2]>,
    pub k: f64,
    /// 1-based instance the simulation starts next to.
    pub instance: usize,
    pub perturbation: [f64; 2],
    pub horizon: f64,
    pub sample_dt: f64,
    pub k_min: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            pairing: Pairing::Swapped,
            signs: "++".into(),
            magnitudes: None,
            k: 0.01,
            instance: 1,
            perturbation: [1e-3, 0.0],
            horizon: 1e4,
            sample_dt: 10.0,
            k_min: 1e-4,
        }
    }
}

impl ControlConfig {
    pub fn signs(&self) -> Result<Signs> {
        self.signs.parse().with_context(|| format!("control.signs = {:?}", self.signs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcToml {
    pub horizon: usize,
    pub dt: f64,
    pub ky: [[f64; 2]; 2],
    pub ku: [[f64; 2]; 2],
    pub grad_tol: f64,
    pub max_iter: usize,
    pub barrier_weight: f64,
    pub admissible_u1: [f64; 2],
    pub admissible_u2: [f64; 2],
    pub propagator: Propagator,
    pub x0: [f64; 2],
    pub u0: [f64; 2],
    pub max_steps: usize,
}

impl Default for MpcToml {
    fn default() -> Self {
        let d = MpcConfig::default();
        MpcToml {
            horizon: d.horizon,
            dt: d.dt,
            ky: [[1.0, 0.0], [0.0, 1.0]],
            ku: [[2.0, 0.0], [0.0, 2.0]],
            grad_tol: d.optimizer.grad_tol,
            max_iter: d.optimizer.max_iter,
            barrier_weight: d.barrier_weight,
            admissible_u1: [d.admissible.u1.0, d.admissible.u1.1],
            admissible_u2: [d.admissible.u2.0, d.admissible.u2.1],
            propagator: d.propagator,
            x0: [0.3, 0.5],
            u0: [0.96, 0.5],
            max_steps: MpcSimOptions::default().max_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SliceKind {
    /// Initial inputs vary at a fixed initial state.
    U,
    /// Initial states vary at a fixed initial input.
    Y,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasinsToml {
    pub slice: SliceKind,
    pub y0: [f64; 2],
    pub u0: [f64; 2],
    /// Bounds of the first and second slice coordinate; slice defaults when
    /// absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range1: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range2: Option<[f64; 2]>,
    pub res: usize,
    pub levels: u32,
    pub max_steps: usize,
}

impl Default for BasinsToml {
    fn default() -> Self {
        BasinsToml {
            slice: SliceKind::U,
            y0: [0.3, 0.5],
            u0: [0.96, 0.5],
            range1: None,
            range2: None,
            res: 64,
            levels: 2,
            max_steps: MpcSimOptions::default().max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationToml {
    /// 1-based instance the branches start from.
    pub instance: usize,
    pub options: ContinuationOptions,
}

impl Default for ContinuationToml {
    fn default() -> Self {
        ContinuationToml { instance: 1, options: ContinuationOptions::default() }
    }
}

fn pair_to_tuple(p: [f64; 2]) -> (f64, f64) {
    (p[0], p[1])
}

fn matrix(m: [[f64; 2]; 2]) -> Matrix2<f64> {
    Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn setpoint(&self) -> OutputPair {
        OutputPair::new(self.setpoint[0], self.setpoint[1])
    }

    pub fn instance_search(&self) -> InstanceSearch {
        InstanceSearch {
            search_box: InputBox { u1: pair_to_tuple(self.search.u1), u2: pair_to_tuple(self.search.u2) },
            grid: (self.search.grid[0], self.search.grid[1]),
            merge_radius: self.search.merge_radius,
            ..InstanceSearch::default()
        }
    }

    pub fn mpc(&self) -> MpcConfig {
        let m = &self.mpc;
        MpcConfig {
            setpoint: self.setpoint(),
            horizon: m.horizon,
            dt: m.dt,
            ky: matrix(m.ky),
            ku: matrix(m.ku),
            optimizer: BfgsOptions { grad_tol: m.grad_tol, max_iter: m.max_iter, ..BfgsOptions::default() },
            admissible: InputBox { u1: pair_to_tuple(m.admissible_u1), u2: pair_to_tuple(m.admissible_u2) },
            barrier_weight: m.barrier_weight,
            propagator: m.propagator,
        }
    }

    pub fn slice(&self) -> SliceSpec {
        let b = &self.basins;
        let mut s = match b.slice {
            SliceKind::U => SliceSpec::input_default(),
            SliceKind::Y => SliceSpec::state_default(),
        };
        match &mut s {
            SliceSpec::Input { y0, u1, u2 } => {
                *y0 = StatePair::new(b.y0[0], b.y0[1]);
                if let Some(r) = b.range1 {
                    *u1 = pair_to_tuple(r);
                }
                if let Some(r) = b.range2 {
                    *u2 = pair_to_tuple(r);
                }
            }
            SliceSpec::State { u0, x1, x2 } => {
                *u0 = InputPair::new(b.u0[0], b.u0[1]);
                if let Some(r) = b.range1 {
                    *x1 = pair_to_tuple(r);
                }
                if let Some(r) = b.range2 {
                    *x2 = pair_to_tuple(r);
                }
            }
        }
        s
    }

    pub fn base_pairing(&self) -> Result<PairingConfig> {
        let c = PairingConfig::new(self.control.pairing, self.control.signs()?);
        Ok(match self.control.magnitudes {
            Some(m) => c.with_magnitudes(m),
            None => c,
        })
    }

    /// Checks everything that does not need a computation.
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        let r = self.setpoint();
        if !r.is_finite() {
            bail!("setpoint must be finite");
        }
        self.instance_search().search_box.validate()?;
        if self.search.grid.contains(&0) {
            bail!("search.grid entries must be positive");
        }
        self.mpc().validate()?;
        self.base_pairing()?.validate()?;
        if !(self.control.k > 0.0) || !(self.control.horizon > 0.0) || !(self.control.k_min > 0.0) {
            bail!("control.k, control.horizon and control.k_min must be positive");
        }
        if self.control.instance == 0 || self.continuation.instance == 0 {
            bail!("instance indices are 1-based");
        }
        let b = &self.basins;
        if b.res == 0 || b.levels > 8 {
            bail!("basins.res must be positive and basins.levels at most 8");
        }
        self.slice().validate()?;
        InputPair::new(self.mpc.u0[0], self.mpc.u0[1]).check()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("[basins]\nslice = \"y\"\nrange1 = [0.2, 0.6]\n").unwrap();
        assert_eq!(cfg.basins.res, 64);
        match cfg.slice() {
            SliceSpec::State { x1, x2, .. } => {
                assert_eq!(x1, (0.2, 0.6));
                assert_eq!(x2, (0.0, 1.0));
            }
            other => panic!("unexpected slice {other:?}"),
        }
    }

    #[test]
    fn rk4_propagator_is_configurable() {
        let cfg: RunConfig = toml::from_str("[mpc.propagator.rk4]\nsubsteps = 20\n").unwrap();
        assert_eq!(cfg.mpc().propagator, Propagator::Rk4 { substeps: 20 });
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.control.signs = "+?".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.control.instance = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.mpc.dt = -1.0;
        assert!(cfg.validate().is_err());
    }
}
