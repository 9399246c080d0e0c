//! Reader for the subset of MATPOWER case files we need: `mpc.baseMVA`,
//! `mpc.bus`, `mpc.gen` and `mpc.branch` numeric assignments. Anything else
//! (gencost, areas, function headers) is skipped.

use std::f64::consts::PI;

use super::{Branch, Bus, BusKind, Gen, GridCase};
use crate::error::{Error, Result};

const BUS_COLS: usize = 13;
const GEN_COLS: usize = 8;
const BRANCH_COLS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Bus,
    Gen,
    Branch,
}

struct Matrix {
    line: usize,
    rows: Vec<Vec<f64>>,
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

/// Returns the text after `mpc.<name>` if the line assigns exactly that field.
fn assignment<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let rest = line.trim_start().strip_prefix("mpc.")?.strip_prefix(name)?;
    let rest = rest.trim_start();
    rest.strip_prefix('=').map(str::trim_start)
}

fn parse_number(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("not a number: {tok:?}"),
    })
}

fn push_rows(text: &str, line: usize, rows: &mut Vec<Vec<f64>>) -> Result<()> {
    for chunk in text.split(';') {
        let values = chunk
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| parse_number(t, line))
            .collect::<Result<Vec<_>>>()?;
        if !values.is_empty() {
            rows.push(values);
        }
    }
    Ok(())
}

pub(super) fn parse(text: &str) -> Result<GridCase> {
    let mut base_mva = None;
    let mut bus = None;
    let mut gen = None;
    let mut branch = None;

    let mut open: Option<(Section, Matrix)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = strip_comment(raw);

        if let Some((section, mut mat)) = open.take() {
            match line.find(']') {
                Some(end) => {
                    push_rows(&line[..end], lineno, &mut mat.rows)?;
                    match section {
                        Section::Bus => bus = Some(mat),
                        Section::Gen => gen = Some(mat),
                        Section::Branch => branch = Some(mat),
                    }
                }
                None => {
                    push_rows(line, lineno, &mut mat.rows)?;
                    open = Some((section, mat));
                }
            }
            continue;
        }

        if let Some(rest) = assignment(line, "baseMVA") {
            let value = rest.trim_end().trim_end_matches(';').trim();
            base_mva = Some(parse_number(value, lineno)?);
            continue;
        }

        let section = [
            ("bus", Section::Bus),
            ("gen", Section::Gen),
            ("branch", Section::Branch),
        ]
        .into_iter()
        .find_map(|(name, s)| assignment(line, name).map(|rest| (s, rest)));

        if let Some((section, rest)) = section {
            let body = rest.strip_prefix('[').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "expected a matrix literal '[' after assignment".into(),
            })?;
            let mut mat = Matrix {
                line: lineno,
                rows: Vec::new(),
            };
            match body.find(']') {
                Some(end) => {
                    push_rows(&body[..end], lineno, &mut mat.rows)?;
                    match section {
                        Section::Bus => bus = Some(mat),
                        Section::Gen => gen = Some(mat),
                        Section::Branch => branch = Some(mat),
                    }
                }
                None => {
                    push_rows(body, lineno, &mut mat.rows)?;
                    open = Some((section, mat));
                }
            }
        }
    }

    if let Some((_, mat)) = open {
        return Err(Error::Parse {
            line: mat.line,
            msg: "unterminated matrix literal".into(),
        });
    }

    let missing = |name: &str| Error::Parse {
        line: 0,
        msg: format!("missing mpc.{name} section"),
    };
    let base_mva = base_mva.ok_or_else(|| missing("baseMVA"))?;
    let bus = bus.ok_or_else(|| missing("bus"))?;
    let gen = gen.ok_or_else(|| missing("gen"))?;
    let branch = branch.ok_or_else(|| missing("branch"))?;

    check_width(&bus, BUS_COLS, "bus")?;
    check_width(&gen, GEN_COLS, "gen")?;
    check_width(&branch, BRANCH_COLS, "branch")?;

    let deg = PI / 180.0;
    let buses = bus
        .rows
        .iter()
        .map(|r| {
            let kind = match r[1] as i64 {
                1 => BusKind::Pq,
                2 => BusKind::Pv,
                3 => BusKind::Slack,
                other => {
                    return Err(Error::Validation(format!(
                        "bus {} has unsupported type {other}",
                        r[0]
                    )))
                }
            };
            Ok(Bus {
                id: r[0] as i64,
                kind,
                p_demand: r[2],
                q_demand: r[3],
                shunt_g: r[4] / base_mva,
                shunt_b: r[5] / base_mva,
                v_mag_init: r[7],
                v_ang_init: r[8] * deg,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let gens = gen
        .rows
        .iter()
        .map(|r| Gen {
            bus: r[0] as i64,
            p_out: r[1],
            q_out: r[2],
            q_max: r[3],
            q_min: r[4],
            v_set: r[5],
            status: r[7] > 0.0,
        })
        .collect();

    let branches = branch
        .rows
        .iter()
        .map(|r| Branch {
            from: r[0] as i64,
            to: r[1] as i64,
            r: r[2],
            x: r[3],
            b_charging: r[4],
            tap_ratio: r[8],
            phase_shift: r[9] * deg,
            status: r[10] > 0.0,
        })
        .collect();

    Ok(GridCase {
        base_mva,
        buses,
        gens,
        branches,
    })
}

fn check_width(mat: &Matrix, min: usize, name: &str) -> Result<()> {
    let width = mat.rows.first().map_or(min, Vec::len);
    if width < min {
        return Err(Error::Parse {
            line: mat.line,
            msg: format!("mpc.{name} needs at least {min} columns, found {width}"),
        });
    }
    if let Some(bad) = mat.rows.iter().position(|r| r.len() != width) {
        return Err(Error::Parse {
            line: mat.line,
            msg: format!("mpc.{name} row {} has inconsistent column count", bad + 1),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{parse_case, CaseFormat};

    const TINY: &str = "function mpc = tiny
mpc.version = '2';
mpc.baseMVA = 100;
%% bus data
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1.0\t0\t0\t1\t1.1\t0.9;
\t2\t1\t50\t10\t0\t19\t1\t1.0\t-5\t0\t1\t1.1\t0.9; % trailing comment
];
mpc.gen = [1 0 0 100 -100 1.02 100 1];
mpc.branch = [
\t1, 2, 0.01, 0.1, 0.02, 0, 0, 0, 0, 0, 1, -360, 360;
];
mpc.gencost = [
\t2 0 0 3 0.01 40 0;
];
";

    #[test]
    fn reads_minimal_case() {
        let case = parse_case(TINY, CaseFormat::Matpower).unwrap();
        assert_eq!(case.buses.len(), 2);
        assert_eq!(case.gens.len(), 1);
        assert_eq!(case.branches.len(), 1);
        assert_eq!(case.buses[1].p_demand, 50.0);
        assert!((case.buses[1].shunt_b - 0.19).abs() < 1e-15);
        assert!((case.buses[1].v_ang_init + 5.0_f64.to_radians()).abs() < 1e-15);
        assert_eq!(case.gens[0].v_set, 1.02);
        assert!(case.branches[0].status);
    }

    #[test]
    fn missing_section_is_parse_error() {
        let text = TINY.replace("mpc.branch", "mpc.lines");
        assert!(matches!(
            parse_case(&text, CaseFormat::Matpower),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn malformed_literal_is_parse_error() {
        let text = TINY.replace("0.01, 0.1", "0.01, x0.1");
        assert!(matches!(
            parse_case(&text, CaseFormat::Matpower),
            Err(Error::Parse { .. })
        ));
        let text = TINY.replace("1.0\t-5\t0\t1\t1.1\t0.9;", "1.0\t-5;");
        assert!(matches!(
            parse_case(&text, CaseFormat::Matpower),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn zero_buses_is_validation_error() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [];\nmpc.gen = [];\nmpc.branch = [];\n";
        assert!(matches!(
            parse_case(text, CaseFormat::Matpower),
            Err(Error::Validation(_))
        ));
    }
}
