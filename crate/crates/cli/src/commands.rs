//! Subcommand implementations. Each writes its artifacts into the output
//! directory and prints a short summary to stdout.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use inmult::basins::{boundary_dimension, refine_boundary, sweep, Label};
use inmult::export::{self, fmt_num};
use inmult::iloop::{local_stability, simulate_iloop, stabilizing_gain, IloopSimOptions, IntegralLoopConfig};
use inmult::linear::{
    gain_table, sequential_signs, uniqueness_report, witness_magnitudes, GainAnalysis, IcClass, Pairing, PairingConfig,
    Signs,
};
use inmult::mpc::{simulate_mpc, MpcOutcome, MpcSimOptions};
use inmult::steady::{continue_both_ways, find_input_instances, open_loop_stable, solve_x, FixedOutput, InputInstanceSet};
use inmult::{Execution, InputPair, StatePair};

use crate::config::RunConfig;

pub fn run(command: &str, cfg: &RunConfig) -> Result<()> {
    match command {
        "instances" => instances(cfg),
        "gains" => gains(cfg),
        "table1" => table1(cfg),
        "iloop-sim" => iloop_sim(cfg),
        "iloop-eigs" => iloop_eigs(cfg),
        "mpc-sim" => mpc_sim(cfg),
        "basins" => basins(cfg),
        "continue" => continuation(cfg),
        other => bail!("unknown command {other}"),
    }
}

enum Style {
    Hash,
    Html,
}

/// Header lines naming the command and embedding the resolved configuration.
/// The output directory and thread count are left out: they do not change
/// any result, so reruns elsewhere or with other pools give identical files.
fn header(cfg: &RunConfig, command: &str) -> Vec<String> {
    let mut table = toml::Table::try_from(cfg).unwrap_or_default();
    table.remove("output_dir");
    table.remove("threads");
    vec![
        format!("inmult {command} (version {})", env!("CARGO_PKG_VERSION")),
        "resolved configuration:".into(),
        toml::to_string(&table).unwrap_or_default(),
    ]
}

fn write_artifact<F>(cfg: &RunConfig, command: &str, file: &str, style: Style, body: F) -> Result<PathBuf>
where
    F: FnOnce(&mut Vec<u8>) -> io::Result<()>,
{
    let mut buf = Vec::new();
    let lines = header(cfg, command);
    match style {
        Style::Hash => export::write_comments(&mut buf, &lines)?,
        Style::Html => {
            writeln!(buf, "<!--")?;
            for l in &lines {
                writeln!(buf, "{}", l.trim_end())?;
            }
            writeln!(buf, "-->")?;
        }
    }
    body(&mut buf)?;
    write_raw(cfg, file, &buf)
}

fn write_raw(cfg: &RunConfig, file: &str, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let path = cfg.output_dir.join(file);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn find(cfg: &RunConfig) -> Result<InputInstanceSet> {
    Ok(find_input_instances(&cfg.plant, cfg.setpoint(), &cfg.instance_search(), Execution::default())?)
}

fn pick(set: &InputInstanceSet, one_based: usize) -> Result<InputPair> {
    set.instances
        .get(one_based.wrapping_sub(1))
        .map(|i| i.u)
        .ok_or_else(|| anyhow!("instance {one_based} requested but {} found", set.instances.len()))
}

fn analyses(cfg: &RunConfig, set: &InputInstanceSet) -> Result<Vec<GainAnalysis>> {
    set.instances.iter().map(|i| Ok(GainAnalysis::new(&cfg.plant, i.x, i.u)?)).collect()
}

fn class_name(c: IcClass) -> &'static str {
    match c {
        IcClass::Controllable => "controllable",
        IcClass::NotControllable => "not-controllable",
        IcClass::Indeterminate => "indeterminate",
    }
}

fn pairing_name(p: Pairing) -> &'static str {
    match p {
        Pairing::Direct => "direct",
        Pairing::Swapped => "swapped",
    }
}

fn print_instances(set: &InputInstanceSet) {
    println!("{} input instance(s) at r = ({}, {})", set.instances.len(), fmt_num(set.setpoint.x1), fmt_num(set.setpoint.x2));
    for (k, i) in set.instances.iter().enumerate() {
        println!("  {}: u = ({}, {})", k + 1, fmt_num(i.u.u1), fmt_num(i.u.u2));
    }
}

fn instances(cfg: &RunConfig) -> Result<()> {
    let set = find(cfg)?;
    let stable = set.instances.iter().map(|i| open_loop_stable(&cfg.plant, i.u)).collect::<inmult::Result<Vec<_>>>()?;
    write_artifact(cfg, "instances", "instances.csv", Style::Hash, |w| export::write_instances_csv(w, &set, &stable))?;
    print_instances(&set);
    Ok(())
}

fn gains(cfg: &RunConfig) -> Result<()> {
    let set = find(cfg)?;
    let an = analyses(cfg, &set)?;
    write_artifact(cfg, "gains", "gains.csv", Style::Hash, |w| {
        writeln!(w, "instance,u1,u2,y1,y2,g11,g12,g21,g22,l11,l12,l21,l22,eig1_re,eig1_im,eig2_re,eig2_im,open_loop_stable")?;
        for (k, a) in an.iter().enumerate() {
            let mut f = vec![(k + 1).to_string(), fmt_num(a.u.u1), fmt_num(a.u.u2), fmt_num(a.x.x1), fmt_num(a.x.x2)];
            for r in 0..2 {
                for c in 0..2 {
                    f.push(fmt_num(a.gain[(r, c)]));
                }
            }
            for r in 0..2 {
                for c in 0..2 {
                    f.push(a.rga.map_or("nan".into(), |l| fmt_num(l[(r, c)])));
                }
            }
            for e in &a.jac_eigs {
                f.push(fmt_num(e.re));
                f.push(fmt_num(e.im));
            }
            f.push(a.jac_eigs.iter().all(|e| e.re < 0.0).to_string());
            writeln!(w, "{}", f.join(","))?;
        }
        Ok(())
    })?;

    let mut seq = Vec::new();
    for (k, a) in an.iter().enumerate() {
        for p in Pairing::ALL {
            for first in 0..2 {
                seq.push((k, p, first, sequential_signs(&a.gain, p, first)?));
            }
        }
    }
    write_artifact(cfg, "gains", "sequential.csv", Style::Hash, |w| {
        writeln!(w, "instance,pairing,first_loop,signs,effective_gain1,effective_gain2,feasible")?;
        for (k, p, first, s) in &seq {
            writeln!(
                w,
                "{},{},y{},{},{},{},{}",
                k + 1,
                pairing_name(*p),
                first + 1,
                s.signs,
                fmt_num(s.effective_gains[0]),
                fmt_num(s.effective_gains[1]),
                s.agrees
            )?;
        }
        Ok(())
    })?;

    let reports: Vec<_> =
        Pairing::ALL.iter().flat_map(|&p| Signs::ALL.iter().map(move |&s| (p, s))).map(|(p, s)| uniqueness_report(&an, p, s)).collect();
    write_artifact(cfg, "gains", "uniqueness.csv", Style::Hash, |w| {
        writeln!(w, "pairing,signs,instance,exists,unit_class,witness_m1,witness_m2")?;
        for rep in &reports {
            for (k, v) in rep.verdicts.iter().enumerate() {
                let (m1, m2) = v.witness.map_or(("nan".into(), "nan".into()), |m| (fmt_num(m[0]), fmt_num(m[1])));
                writeln!(w, "{},{},{},{},{},{},{}", pairing_name(rep.pairing), rep.signs, k + 1, v.exists, class_name(v.unit_class), m1, m2)?;
            }
        }
        Ok(())
    })?;

    print_instances(&set);
    for rep in &reports {
        let list: Vec<String> = rep.stable.iter().map(|i| (i + 1).to_string()).collect();
        let tag = if rep.is_singleton() { "  unique" } else { "" };
        println!("{} {}: integral controllable at {{{}}}{tag}", pairing_name(rep.pairing), rep.signs, list.join(", "));
    }
    Ok(())
}

fn table1(cfg: &RunConfig) -> Result<()> {
    let set = find(cfg)?;
    let pairs: Vec<(StatePair, InputPair)> = set.instances.iter().map(|i| (i.x, i.u)).collect();
    let rows = gain_table(&cfg.plant, &pairs)?;
    write_artifact(cfg, "table1", "table1.md", Style::Html, |w| export::write_gain_table_markdown(w, &rows))?;
    write_artifact(cfg, "table1", "table1.csv", Style::Hash, |w| export::write_gain_table_csv(w, &rows))?;
    print_instances(&set);
    Ok(())
}

/// The configured controller, with witness magnitudes taken at the chosen
/// instance when none are given.
fn controller(cfg: &RunConfig, set: &InputInstanceSet) -> Result<PairingConfig> {
    let base = cfg.base_pairing()?;
    if cfg.control.magnitudes.is_some() {
        return Ok(base);
    }
    let i = &set.instances[cfg.control.instance - 1];
    let g = GainAnalysis::new(&cfg.plant, i.x, i.u)?.gain;
    let m = witness_magnitudes(&g, base.pairing, base.signs).ok_or_else(|| {
        anyhow!(
            "no positive magnitudes make {} {} integral controllable at instance {}",
            pairing_name(base.pairing),
            base.signs,
            cfg.control.instance
        )
    })?;
    Ok(base.with_magnitudes(m))
}

fn iloop_eigs(cfg: &RunConfig) -> Result<()> {
    let set = find(cfg)?;
    pick(&set, cfg.control.instance)?;
    let control = controller(cfg, &set)?;
    let r = cfg.setpoint();
    let k = cfg.control.k;
    let stab = set.inputs().iter().map(|&u| local_stability(&cfg.plant, &control, k, r, u)).collect::<inmult::Result<Vec<_>>>()?;
    let gain = stabilizing_gain(&cfg.plant, &control, r, &set.inputs(), cfg.control.instance - 1, cfg.control.k_min)?;
    write_artifact(cfg, "iloop-eigs", "iloop_eigs.csv", Style::Hash, |w| {
        writeln!(w, "instance,u1,u2,k,eig1_re,eig1_im,eig2_re,eig2_im,eig3_re,eig3_im,eig4_re,eig4_im,spectral_abscissa,hurwitz")?;
        for (idx, (inst, s)) in set.instances.iter().zip(&stab).enumerate() {
            let mut f = vec![(idx + 1).to_string(), fmt_num(inst.u.u1), fmt_num(inst.u.u2), fmt_num(k)];
            for e in &s.eigenvalues {
                f.push(fmt_num(e.re));
                f.push(fmt_num(e.im));
            }
            f.push(fmt_num(s.spectral_abscissa()));
            f.push(s.hurwitz.to_string());
            writeln!(w, "{}", f.join(","))?;
        }
        Ok(())
    })?;
    println!(
        "{} {} magnitudes ({}, {}), k = {}",
        pairing_name(control.pairing),
        control.signs,
        fmt_num(control.magnitudes[0]),
        fmt_num(control.magnitudes[1]),
        fmt_num(k)
    );
    for (idx, s) in stab.iter().enumerate() {
        println!("  instance {}: spectral abscissa {} ({})", idx + 1, fmt_num(s.spectral_abscissa()), if s.hurwitz { "stable" } else { "unstable" });
    }
    match gain {
        Some(g) => println!(
            "instance {} alone is stable for k <= {} (holds down to {}: {})",
            cfg.control.instance,
            fmt_num(g.k),
            fmt_num(cfg.control.k_min),
            g.holds_throughout()
        ),
        None => println!("no k in [{}, 1] makes instance {} the only stable one", fmt_num(cfg.control.k_min), cfg.control.instance),
    }
    Ok(())
}

fn iloop_sim(cfg: &RunConfig) -> Result<()> {
    let set = find(cfg)?;
    let u_eq = pick(&set, cfg.control.instance)?;
    let control = controller(cfg, &set)?;
    let p = cfg.control.perturbation;
    let u_init = InputPair::new(u_eq.u1 + p[0], u_eq.u2 + p[1]);
    let x_init = solve_x(&cfg.plant, u_init, cfg.setpoint())?;
    let loop_cfg = IntegralLoopConfig { control, k: cfg.control.k, setpoint: cfg.setpoint(), u_init, x_init };
    let opts = IloopSimOptions { horizon: cfg.control.horizon, sample_dt: cfg.control.sample_dt, ..IloopSimOptions::default() };
    let run = simulate_iloop(&cfg.plant, &loop_cfg, &set.inputs(), &opts)?;
    write_artifact(cfg, "iloop-sim", "iloop.csv", Style::Hash, |w| export::write_iloop_csv(w, &run))?;
    let z = run.state;
    println!(
        "{} at t = {}: x = ({}, {}), u = ({}, {})",
        run.verdict,
        fmt_num(run.t_end),
        fmt_num(z[0]),
        fmt_num(z[1]),
        fmt_num(z[2]),
        fmt_num(z[3])
    );
    Ok(())
}

fn mpc_opts(max_steps: usize, record: bool) -> MpcSimOptions {
    MpcSimOptions { max_steps, record, ..MpcSimOptions::default() }
}

fn outcome_text(o: MpcOutcome) -> String {
    match o {
        MpcOutcome::Converged { instance } => format!("converged to instance {}", instance + 1),
        MpcOutcome::Unresolved => "unresolved".into(),
        MpcOutcome::DomainExit => "left the input domain".into(),
    }
}

fn mpc_sim(cfg: &RunConfig) -> Result<()> {
    let set = find(cfg)?;
    let m = &cfg.mpc;
    let x0 = StatePair::new(m.x0[0], m.x0[1]);
    let u0 = InputPair::new(m.u0[0], m.u0[1]);
    let run = simulate_mpc(&cfg.plant, &cfg.mpc(), &set.inputs(), x0, u0, &mpc_opts(m.max_steps, true))?;
    write_artifact(cfg, "mpc-sim", "mpc.csv", Style::Hash, |w| export::write_mpc_csv(w, &run.records))?;
    println!(
        "{} after {} steps ({} optimizer warnings); u = ({}, {})",
        outcome_text(run.outcome),
        run.steps,
        run.warnings,
        fmt_num(run.state.u_prev.u1),
        fmt_num(run.state.u_prev.u2)
    );
    Ok(())
}

fn basins(cfg: &RunConfig) -> Result<()> {
    let set = find(cfg)?;
    let targets = set.inputs();
    let mpc = cfg.mpc();
    let b = &cfg.basins;
    let opts = mpc_opts(b.max_steps, false);
    let exec = Execution::default();
    let grid = sweep(&cfg.plant, &mpc, &opts, &targets, cfg.slice(), b.res, b.res, exec)?;
    write_artifact(cfg, "basins", "basins.csv", Style::Hash, |w| export::write_basin_csv(w, &grid))?;
    let mut pgm = Vec::new();
    export::write_basin_pgm(&mut pgm, &grid)?;
    write_raw(cfg, "basins.pgm", &pgm)?;

    let mut summary: Vec<String> = (0..targets.len() as u8)
        .map(|i| format!("instance {}: {} cells", i + 1, grid.count(Label::Instance(i))))
        .collect();
    summary.push(format!("unresolved: {} cells", grid.count(Label::Unresolved)));
    summary.push(format!("domain-exit: {} cells", grid.count(Label::DomainExit)));

    let refined = refine_boundary(&cfg.plant, &mpc, &opts, &targets, grid, b.levels, exec)?;
    let dimension = boundary_dimension(&refined).ok();
    if let Some(d) = &dimension {
        summary.push(format!(
            "box-counting slope {} +- {}{}",
            fmt_num(d.slope),
            fmt_num(d.std_error),
            if d.degenerate { " (mixed cells fill the plane)" } else { "" }
        ));
    }
    if b.levels > 0 {
        write_artifact(cfg, "basins", "basins_refined.csv", Style::Hash, |w| export::write_refined_csv(w, &refined))?;
    }
    write_artifact(cfg, "basins", "basins_levels.csv", Style::Hash, |w| {
        export::write_comments(w, &summary)?;
        writeln!(w, "level,nx,ny,computed,mixed,mixed_fraction,changed_fraction")?;
        let fractions = refined.mixed_fractions();
        for (lv, frac) in refined.levels.iter().zip(fractions) {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                lv.level,
                lv.nx,
                lv.ny,
                lv.cells.len(),
                lv.mixed.len(),
                fmt_num(frac),
                fmt_num(lv.changed_fraction())
            )?;
        }
        Ok(())
    })?;
    for s in &summary {
        println!("{s}");
    }
    Ok(())
}

fn continuation(cfg: &RunConfig) -> Result<()> {
    let set = find(cfg)?;
    let u_start = pick(&set, cfg.continuation.instance)?;
    let r = cfg.setpoint;
    for index in 0..2 {
        let fixed = FixedOutput { index, value: r[index] };
        let free = fixed.free_index();
        let branches = continue_both_ways(&cfg.plant, fixed, r[free], u_start, &cfg.continuation.options)?;
        for (branch, dir) in branches.iter().zip(["up", "down"]) {
            let file = format!("branch_y{}_fixed_{dir}.csv", index + 1);
            write_artifact(cfg, "continue", &file, Style::Hash, |w| {
                export::write_comments(w, &[format!("stopped: {:?}", branch.stop)])?;
                export::write_branch_csv(w, branch)
            })?;
            let hits: Vec<String> =
                branch.crossings(&cfg.plant, r[free]).iter().map(|u| format!("({}, {})", fmt_num(u.u1), fmt_num(u.u2))).collect();
            println!(
                "y{} fixed, {dir}: {} points, stop {:?}, crosses y{} = {} at {}",
                index + 1,
                branch.points.len(),
                branch.stop,
                free + 1,
                fmt_num(r[free]),
                if hits.is_empty() { "none".to_string() } else { hits.join(" ") }
            );
        }
    }
    Ok(())
}
