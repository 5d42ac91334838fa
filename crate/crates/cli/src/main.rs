//! `inmult`: command-line driver for the steady-state, integral-loop, MPC and
//! basin computations.
//!
//! Exit codes: 0 on success, 1 when a computation fails, 2 for invalid
//! arguments or configuration.

// Negated comparisons such as `!(x > 0.0)` are used to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use inmult::linear::Pairing;

use config::{RunConfig, SliceKind};

#[derive(Debug, Parser)]
#[command(name = "inmult", version, about = "Input multiplicity analysis of a 2x2 CSTR")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output setpoint `r1,r2`.
    #[arg(long, global = true, value_parser = parse_pair)]
    r: Option<[f64; 2]>,
    /// Directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps; 0 uses all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Multistart search for all inputs reaching the setpoint.
    Instances(SearchArgs),
    /// Gains, relative gains, sequential signs and uniqueness per instance.
    Gains(SearchArgs),
    /// Instance summary table as Markdown and CSV.
    Table1(SearchArgs),
    /// Integral-loop closed-loop simulation from next to one instance.
    IloopSim(IloopSimArgs),
    /// Local eigenvalues of the integral loop at every instance.
    IloopEigs(ControlArgs),
    /// MPC closed-loop simulation from one initial condition.
    MpcSim(MpcArgs),
    /// MPC basin map over an input or state slice with boundary refinement.
    Basins(BasinArgs),
    /// Steady-state branches with one output fixed at its setpoint.
    Continue(ContinueArgs),
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Search range of u1 `lo,hi`.
    #[arg(long, value_parser = parse_pair)]
    u1_range: Option<[f64; 2]>,
    /// Search range of u2 `lo,hi`.
    #[arg(long, value_parser = parse_pair)]
    u2_range: Option<[f64; 2]>,
    /// Multistart grid `n1,n2`.
    #[arg(long, value_parser = parse_count_pair)]
    grid: Option<[usize; 2]>,
}

#[derive(Debug, Args)]
struct ControlArgs {
    #[command(flatten)]
    search: SearchArgs,
    /// `direct` for (y1-u1),(y2-u2) or `swapped` for (y1-u2),(y2-u1).
    #[arg(long, value_parser = parse_pairing)]
    pairing: Option<Pairing>,
    /// Loop gain signs ordered by output, e.g. `+-`.
    #[arg(long)]
    signs: Option<String>,
    /// Loop gain magnitudes `m1,m2`.
    #[arg(long, value_parser = parse_pair)]
    magnitudes: Option<[f64; 2]>,
    /// Integrator gain (1/s).
    #[arg(long)]
    k: Option<f64>,
    /// 1-based instance used for the witness magnitudes and the start point.
    #[arg(long)]
    instance: Option<usize>,
}

#[derive(Debug, Args)]
struct IloopSimArgs {
    #[command(flatten)]
    control: ControlArgs,
    /// Offset `du1,du2` added to the instance input at t = 0.
    #[arg(long, value_parser = parse_pair)]
    perturbation: Option<[f64; 2]>,
    /// Simulated time (s).
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Debug, Args)]
struct MpcArgs {
    #[command(flatten)]
    search: SearchArgs,
    /// Initial state `x1,x2`.
    #[arg(long, value_parser = parse_pair)]
    x0: Option<[f64; 2]>,
    /// Previous input at t = 0, `u1,u2`.
    #[arg(long, value_parser = parse_pair)]
    u0: Option<[f64; 2]>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct BasinArgs {
    #[command(flatten)]
    search: SearchArgs,
    /// `u` varies the initial input, `y` the initial state.
    #[arg(long, value_enum)]
    slice: Option<SliceKind>,
    /// Initial state of a u-slice.
    #[arg(long, value_parser = parse_pair)]
    y0: Option<[f64; 2]>,
    /// Initial input of a y-slice.
    #[arg(long, value_parser = parse_pair)]
    u0: Option<[f64; 2]>,
    /// Base grid resolution per axis.
    #[arg(long)]
    res: Option<usize>,
    /// Boundary refinement levels.
    #[arg(long)]
    levels: Option<u32>,
    /// MPC step budget per cell.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct ContinueArgs {
    #[command(flatten)]
    search: SearchArgs,
    /// 1-based instance the branches start from.
    #[arg(long)]
    instance: Option<usize>,
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([a.parse().map_err(|e| format!("{a:?}: {e}"))?, b.parse().map_err(|e| format!("{b:?}: {e}"))?]),
        _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
    }
}

fn parse_count_pair(s: &str) -> Result<[usize; 2], String> {
    let [a, b] = parse_pair(s)?;
    let count = |v: f64| if v >= 1.0 && v.fract() == 0.0 { Ok(v as usize) } else { Err(format!("{v} is not a positive integer")) };
    Ok([count(a)?, count(b)?])
}

fn parse_pairing(s: &str) -> Result<Pairing, String> {
    match s {
        "direct" => Ok(Pairing::Direct),
        "swapped" => Ok(Pairing::Swapped),
        _ => Err(format!("unknown pairing {s:?}; expected direct or swapped")),
    }
}

impl SearchArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.u1_range {
            cfg.search.u1 = v;
        }
        if let Some(v) = self.u2_range {
            cfg.search.u2 = v;
        }
        if let Some(v) = self.grid {
            cfg.search.grid = v;
        }
    }
}

impl ControlArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.search.apply(cfg);
        let c = &mut cfg.control;
        if let Some(v) = self.pairing {
            c.pairing = v;
        }
        if let Some(v) = &self.signs {
            c.signs = v.clone();
        }
        if let Some(v) = self.magnitudes {
            c.magnitudes = Some(v);
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.instance {
            c.instance = v;
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Instances(_) => "instances",
            Command::Gains(_) => "gains",
            Command::Table1(_) => "table1",
            Command::IloopSim(_) => "iloop-sim",
            Command::IloopEigs(_) => "iloop-eigs",
            Command::MpcSim(_) => "mpc-sim",
            Command::Basins(_) => "basins",
            Command::Continue(_) => "continue",
        }
    }

    fn apply(&self, cfg: &mut RunConfig) {
        match self {
            Command::Instances(a) | Command::Gains(a) | Command::Table1(a) => a.apply(cfg),
            Command::IloopEigs(a) => a.apply(cfg),
            Command::IloopSim(a) => {
                a.control.apply(cfg);
                if let Some(v) = a.perturbation {
                    cfg.control.perturbation = v;
                }
                if let Some(v) = a.horizon {
                    cfg.control.horizon = v;
                }
            }
            Command::MpcSim(a) => {
                a.search.apply(cfg);
                if let Some(v) = a.x0 {
                    cfg.mpc.x0 = v;
                }
                if let Some(v) = a.u0 {
                    cfg.mpc.u0 = v;
                }
                if let Some(v) = a.max_steps {
                    cfg.mpc.max_steps = v;
                }
            }
            Command::Basins(a) => {
                a.search.apply(cfg);
                let b = &mut cfg.basins;
                if let Some(v) = a.slice {
                    b.slice = v;
                }
                if let Some(v) = a.y0 {
                    b.y0 = v;
                }
                if let Some(v) = a.u0 {
                    b.u0 = v;
                }
                if let Some(v) = a.res {
                    b.res = v;
                }
                if let Some(v) = a.levels {
                    b.levels = v;
                }
                if let Some(v) = a.max_steps {
                    b.max_steps = v;
                }
            }
            Command::Continue(a) => {
                a.search.apply(cfg);
                if let Some(v) = a.instance {
                    cfg.continuation.instance = v;
                }
            }
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(r) = cli.r {
        cfg.setpoint = r;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cli.command.apply(&mut cfg);
    cfg.validate().map_err(|e| anyhow!("invalid configuration: {e:#}"))?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    match inmult::par::with_threads(cfg.threads, || commands::run(name, &cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_parse() {
        assert_eq!(parse_pair("0.49, 0.37"), Ok([0.49, 0.37]));
        assert!(parse_pair("1").is_err());
        assert!(parse_pair("1,2,3").is_err());
        assert_eq!(parse_count_pair("40,20"), Ok([40, 20]));
        assert!(parse_count_pair("1.5,2").is_err());
        assert_eq!(parse_pairing("swapped"), Ok(Pairing::Swapped));
        assert!(parse_pairing("diagonal").is_err());
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from(["inmult", "--r", "0.5,0.3", "basins", "--slice", "y", "--res", "16"]).unwrap();
        let cfg = resolve(&cli).unwrap();
        assert_eq!(cfg.setpoint, [0.5, 0.3]);
        assert_eq!(cfg.basins.slice, SliceKind::Y);
        assert_eq!(cfg.basins.res, 16);
    }
}
