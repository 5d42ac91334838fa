//! Plain-text artifact writers: CSV with `#` comment headers, Markdown
//! tables and binary PGM images.
//!
//! Every number goes through [`fmt_num`], which rounds to 9 significant
//! digits and prints the shortest decimal that reads back as the rounded
//! value, so identical inputs give byte-identical files.

use std::io::{self, Write};

use nalgebra::Matrix2;

use crate::basins::{BasinGrid, Label, RefinedBasin};
use crate::iloop::IloopRun;
use crate::linear::GainTableRow;
use crate::mpc::MpcRecord;
use crate::steady::{Branch, InputInstanceSet};

pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{v:.8e}").parse().unwrap_or(v);
    if rounded == 0.0 {
        return "0".into();
    }
    if (1e-4..1e9).contains(&rounded.abs()) { format!("{rounded}") } else { format!("{rounded:e}") }
}

/// `# `-prefixed comment lines.
pub fn write_comments<W: Write>(w: &mut W, lines: &[String]) -> io::Result<()> {
    for l in lines {
        for part in l.lines() {
            writeln!(w, "# {part}")?;
        }
    }
    Ok(())
}

fn row<W: Write>(w: &mut W, fields: &[String]) -> io::Result<()> {
    writeln!(w, "{}", fields.join(","))
}

pub fn write_instances_csv<W: Write>(w: &mut W, set: &InputInstanceSet, stable: &[bool]) -> io::Result<()> {
    writeln!(w, "instance,u1,u2,y1,y2,residual,stable")?;
    for (k, inst) in set.instances.iter().enumerate() {
        row(
            w,
            &[
                (k + 1).to_string(),
                fmt_num(inst.u.u1),
                fmt_num(inst.u.u2),
                fmt_num(inst.x.x1),
                fmt_num(inst.x.x2),
                fmt_num(inst.residual),
                stable.get(k).copied().unwrap_or(false).to_string(),
            ],
        )?;
    }
    Ok(())
}

pub fn write_branch_csv<W: Write>(w: &mut W, branch: &Branch) -> io::Result<()> {
    writeln!(w, "s,u1,u2,y1,y2,stable")?;
    for p in &branch.points {
        let y = branch.output(p);
        row(w, &[fmt_num(p.s), fmt_num(p.u.u1), fmt_num(p.u.u2), fmt_num(y.x1), fmt_num(y.x2), p.stable.to_string()])?;
    }
    Ok(())
}

fn sets(v: &[crate::linear::Signs]) -> String {
    if v.is_empty() {
        "none".into()
    } else {
        v.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
    }
}

fn matrix_cells(m: &Matrix2<f64>) -> [String; 4] {
    [fmt_num(m[(0, 0)]), fmt_num(m[(0, 1)]), fmt_num(m[(1, 0)]), fmt_num(m[(1, 1)])]
}

/// One row per instance: inputs, gain entries, RGA entries and the feasible
/// sign sets of both pairings.
pub fn write_gain_table_csv<W: Write>(w: &mut W, rows: &[GainTableRow]) -> io::Result<()> {
    writeln!(w, "instance,u1,u2,g11,g12,g21,g22,l11,l12,l21,l22,direct_signs,swapped_signs")?;
    for (k, r) in rows.iter().enumerate() {
        let a = &r.analysis;
        let mut fields = vec![(k + 1).to_string(), fmt_num(a.u.u1), fmt_num(a.u.u2)];
        fields.extend(matrix_cells(&a.gain));
        match &a.rga {
            Some(l) => fields.extend(matrix_cells(l)),
            None => fields.extend(std::iter::repeat_n("nan".to_string(), 4)),
        }
        fields.push(sets(&r.direct));
        fields.push(sets(&r.swapped));
        row(w, &fields)?;
    }
    Ok(())
}

pub fn write_gain_table_markdown<W: Write>(w: &mut W, rows: &[GainTableRow]) -> io::Result<()> {
    writeln!(w, "| instance | u | G | RGA | signs (y1-u1),(y2-u2) | signs (y1-u2),(y2-u1) |")?;
    writeln!(w, "|---|---|---|---|---|---|")?;
    let mat = |m: &Matrix2<f64>| {
        let c = matrix_cells(m);
        format!("[{} {}; {} {}]", c[0], c[1], c[2], c[3])
    };
    for (k, r) in rows.iter().enumerate() {
        let a = &r.analysis;
        let rga = a.rga.as_ref().map_or("singular".to_string(), mat);
        writeln!(
            w,
            "| {} | ({}, {}) | {} | {} | {} | {} |",
            k + 1,
            fmt_num(a.u.u1),
            fmt_num(a.u.u2),
            mat(&a.gain),
            rga,
            sets(&r.direct),
            sets(&r.swapped)
        )?;
    }
    Ok(())
}

pub fn write_iloop_csv<W: Write>(w: &mut W, run: &IloopRun) -> io::Result<()> {
    writeln!(w, "t,x1,x2,u1,u2")?;
    for (t, z) in &run.samples {
        row(w, &[fmt_num(*t), fmt_num(z[0]), fmt_num(z[1]), fmt_num(z[2]), fmt_num(z[3])])?;
    }
    Ok(())
}

pub fn write_mpc_csv<W: Write>(w: &mut W, records: &[MpcRecord]) -> io::Result<()> {
    writeln!(w, "t,x1,x2,u1,u2,cost,grad_norm,optimizer_status")?;
    for r in records {
        let status = match r.status {
            crate::optim::BfgsStatus::Converged => "converged",
            crate::optim::BfgsStatus::LineSearchFailed => "line-search-failed",
            crate::optim::BfgsStatus::MaxIterations => "max-iterations",
        };
        row(
            w,
            &[
                fmt_num(r.t),
                fmt_num(r.x.x1),
                fmt_num(r.x.x2),
                fmt_num(r.u.u1),
                fmt_num(r.u.u2),
                fmt_num(r.cost),
                fmt_num(r.grad_norm),
                status.to_string(),
            ],
        )?;
    }
    Ok(())
}

pub fn write_basin_csv<W: Write>(w: &mut W, grid: &BasinGrid) -> io::Result<()> {
    writeln!(w, "i,j,coord1,coord2,label,steps")?;
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let (c1, c2) = grid.coords(i, j);
            row(w, &[i.to_string(), j.to_string(), fmt_num(c1), fmt_num(c2), grid.label(i, j).to_string(), grid.steps[j * grid.nx + i].to_string()])?;
        }
    }
    Ok(())
}

/// Cells computed during refinement, indexed at their own level.
pub fn write_refined_csv<W: Write>(w: &mut W, refined: &RefinedBasin) -> io::Result<()> {
    writeln!(w, "level,i,j,coord1,coord2,label,steps")?;
    for lv in &refined.levels[1..] {
        for (&(i, j), &(label, steps)) in &lv.cells {
            let (c1, c2) = refined.coords(lv.level, i, j);
            row(w, &[lv.level.to_string(), i.to_string(), j.to_string(), fmt_num(c1), fmt_num(c2), label.to_string(), steps.to_string()])?;
        }
    }
    Ok(())
}

pub fn grey_level(label: Label) -> u8 {
    match label {
        Label::Instance(0) => 85,
        Label::Instance(1) => 170,
        Label::Instance(_) => 255,
        Label::Unresolved => 0,
        Label::DomainExit => 40,
    }
}

/// Binary greyscale PGM: the ASCII header `P5\n<nx> <ny>\n255\n` followed by
/// `nx·ny` bytes, one per cell, rows from the highest second coordinate down.
/// Grey levels: instance 1 → 85, 2 → 170, 3 → 255, unresolved → 0,
/// domain exit → 40.
pub fn write_basin_pgm<W: Write>(w: &mut W, grid: &BasinGrid) -> io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", grid.nx, grid.ny)?;
    let mut bytes = Vec::with_capacity(grid.nx * grid.ny);
    for j in (0..grid.ny).rev() {
        for i in 0..grid.nx {
            bytes.push(grey_level(grid.label(i, j)));
        }
    }
    w.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basins::{sweep_with, SliceSpec};
    use crate::par::Execution;

    #[test]
    fn numbers_are_rounded_to_nine_digits() {
        assert_eq!(fmt_num(0.914371330123), "0.91437133");
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(-0.0), "0");
        assert_eq!(fmt_num(123456789012.0), "1.23456789e11");
        assert_eq!(fmt_num(1.5e-12), "1.5e-12");
        assert_eq!(fmt_num(-2.5), "-2.5");
        assert_eq!(fmt_num(f64::NAN), "nan");
        assert_eq!(fmt_num(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn comments_split_lines() {
        let mut out = Vec::new();
        write_comments(&mut out, &["a = 1\nb = 2".into()]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "# a = 1\n# b = 2\n");
    }

    #[test]
    fn pgm_layout() {
        let slice = SliceSpec::State { u0: crate::InputPair::new(0.96, 0.5), x1: (0.0, 1.0), x2: (0.0, 1.0) };
        let g = sweep_with(slice, 3, 2, Execution::Sequential, |c1, c2| {
            (if c2 > 0.5 { Label::Unresolved } else if c1 < 0.5 { Label::Instance(0) } else { Label::Instance(2) }, 0)
        })
        .unwrap();
        let mut out = Vec::new();
        write_basin_pgm(&mut out, &g).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&out[..header.len()], header);
        assert_eq!(&out[header.len()..], &[0, 0, 0, 85, 255, 255]);
    }

    #[test]
    fn basin_csv_rows() {
        let slice = SliceSpec::State { u0: crate::InputPair::new(0.96, 0.5), x1: (0.0, 1.0), x2: (0.0, 1.0) };
        let g = sweep_with(slice, 2, 1, Execution::Sequential, |_, _| (Label::DomainExit, 7)).unwrap();
        let mut out = Vec::new();
        write_basin_csv(&mut out, &g).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "i,j,coord1,coord2,label,steps\n0,0,0.25,0.5,domain-exit,7\n1,0,0.75,0.5,domain-exit,7\n");
    }
}
