//! Strict MATPOWER (`.m`, format version 2) subset.
//!
//! Accepted statements: `mpc.version`, `mpc.baseMVA`, and the matrices `bus`,
//! `gen`, `branch`, `gencost`. Costs must be polynomial (model 2) of degree at
//! most two. Any other `mpc.*` field is rejected.
//!
//! Folding into the series-only branch model, with `y = 1 / (r + jx)`:
//!
//! - tap ratio `tau` (0 means 1): `g + jb = y / tau`; phase shift is dropped.
//! - line charging `B`: `B / 2` of reactive injection at each end, stored as
//!   `shunt_q -= B / 2` on both endpoint buses.
//! - bus shunt `Gs + jBs` (MW/MVAr at 1 p.u.): `shunt_p += Gs / base`,
//!   `shunt_q -= Bs / base`.
//! - `rateA = 0` (unlimited) becomes [`UNLIMITED_S_MAX`].
//!
//! Out-of-service generators and branches, and isolated (type 4) buses, are
//! skipped. Power quantities are divided by `baseMVA`; cost coefficients are
//! rescaled so that costs are evaluated on per-unit dispatch.

use std::collections::HashMap;

use super::{Branch, Bus, CaseDocument, CostCurve, Generator, Load, NetworkCase, UNLIMITED_S_MAX};
use crate::error::{Error, Result};

struct Matrix {
    line: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_number(tok: &str, line: usize) -> Result<f64> {
    match tok {
        "Inf" | "inf" => Ok(f64::INFINITY),
        "-Inf" | "-inf" => Ok(f64::NEG_INFINITY),
        _ => tok
            .parse::<f64>()
            .map_err(|_| parse_err(line, format!("malformed number '{tok}'"))),
    }
}

/// Appends the rows found in `body`; returns true once the matrix is closed.
fn push_rows(mat: &mut Matrix, body: &str, lineno: usize) -> Result<bool> {
    let (body, closed) = match body.find(']') {
        Some(i) => (&body[..i], true),
        None => (body, false),
    };
    for row in body.split(';') {
        let vals = row
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| parse_number(t, lineno))
            .collect::<Result<Vec<_>>>()?;
        if !vals.is_empty() {
            mat.rows.push((lineno, vals));
        }
    }
    Ok(closed)
}

/// Splits the file into scalar assignments and matrices.
fn tokenize(text: &str) -> Result<(HashMap<String, (usize, String)>, HashMap<String, Matrix>)> {
    let mut scalars = HashMap::new();
    let mut matrices: HashMap<String, Matrix> = HashMap::new();
    let mut open: Option<(String, Matrix)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if let Some((name, mut mat)) = open.take() {
            if push_rows(&mut mat, line, lineno)? {
                matrices.insert(name, mat);
            } else {
                open = Some((name, mat));
            }
            continue;
        }
        if line.starts_with("function") {
            continue;
        }
        let Some(rest) = line.strip_prefix("mpc.") else {
            return Err(parse_err(lineno, format!("unexpected statement '{line}'")));
        };
        let Some((lhs, rhs)) = rest.split_once('=') else {
            return Err(parse_err(lineno, "expected an assignment"));
        };
        let name = lhs.trim().to_string();
        let rhs = rhs.trim();
        if let Some(after) = rhs.strip_prefix('[') {
            if matrices.contains_key(&name) {
                return Err(parse_err(lineno, format!("matrix '{name}' defined twice")));
            }
            let mut mat = Matrix {
                line: lineno,
                rows: Vec::new(),
            };
            if push_rows(&mut mat, after, lineno)? {
                matrices.insert(name, mat);
            } else {
                open = Some((name, mat));
            }
        } else {
            let value = rhs.trim_end_matches(';').trim().to_string();
            scalars.insert(name, (lineno, value));
        }
    }
    if let Some((name, mat)) = open {
        return Err(parse_err(mat.line, format!("matrix '{name}' is not closed")));
    }
    Ok((scalars, matrices))
}

fn require_cols(name: &str, mat: &Matrix, min: usize) -> Result<()> {
    for (line, row) in &mat.rows {
        if row.len() < min {
            return Err(parse_err(
                *line,
                format!("{name} row has {} columns, expected at least {min}", row.len()),
            ));
        }
    }
    Ok(())
}

fn as_id(value: f64, line: usize, what: &str) -> Result<u32> {
    if value.fract() != 0.0 || value < 0.0 || value > u32::MAX as f64 {
        return Err(parse_err(line, format!("{what} must be a nonnegative integer, got {value}")));
    }
    Ok(value as u32)
}

pub fn parse(text: &str) -> Result<NetworkCase> {
    let (scalars, mut matrices) = tokenize(text)?;

    for (name, (line, value)) in &scalars {
        match name.as_str() {
            "version" => {
                if value.trim_matches('\'') != "2" {
                    return Err(parse_err(*line, format!("unsupported case version {value}")));
                }
            }
            "baseMVA" => {}
            other => return Err(parse_err(*line, format!("unsupported field mpc.{other}"))),
        }
    }
    for (name, mat) in &matrices {
        if !matches!(name.as_str(), "bus" | "gen" | "branch" | "gencost") {
            return Err(parse_err(mat.line, format!("unsupported field mpc.{name}")));
        }
    }
    let (base_line, base_text) = scalars
        .get("baseMVA")
        .ok_or_else(|| parse_err(0, "missing mpc.baseMVA"))?;
    let base = parse_number(base_text, *base_line)?;
    if !(base > 0.0) {
        return Err(parse_err(*base_line, "baseMVA must be positive"));
    }

    let take = |m: &mut HashMap<String, Matrix>, name: &str| {
        m.remove(name)
            .ok_or_else(|| parse_err(0, format!("missing mpc.{name}")))
    };
    let bus_m = take(&mut matrices, "bus")?;
    let gen_m = take(&mut matrices, "gen")?;
    let branch_m = take(&mut matrices, "branch")?;
    let cost_m = take(&mut matrices, "gencost")?;
    require_cols("bus", &bus_m, 13)?;
    require_cols("gen", &gen_m, 10)?;
    require_cols("branch", &branch_m, 11)?;
    require_cols("gencost", &cost_m, 4)?;

    let mut buses = Vec::new();
    let mut loads = Vec::new();
    let mut reference = None;
    let mut bus_index: HashMap<u32, usize> = HashMap::new();
    for (line, row) in &bus_m.rows {
        let id = as_id(row[0], *line, "bus id")?;
        let kind = row[1] as i64;
        if kind == 4 {
            continue;
        }
        if !(1..=3).contains(&kind) {
            return Err(parse_err(*line, format!("bus {id}: unknown bus type {kind}")));
        }
        if kind == 3 {
            reference = Some(id);
        }
        let (pd, qd, gs, bs) = (row[2], row[3], row[4], row[5]);
        if pd != 0.0 || qd != 0.0 {
            loads.push(Load {
                bus: id,
                p_nom: pd / base,
                q_nom: qd / base,
            });
        }
        if bus_index.insert(id, buses.len()).is_some() {
            return Err(parse_err(*line, format!("duplicate bus id {id}")));
        }
        buses.push(Bus {
            id,
            v_min: row[12],
            v_max: row[11],
            region_hint: Some(row[6] as usize),
            shunt_p: gs / base,
            shunt_q: -bs / base,
        });
    }

    if cost_m.rows.len() != gen_m.rows.len() {
        return Err(parse_err(
            cost_m.line,
            format!(
                "gencost has {} rows for {} generators (reactive costs are not supported)",
                cost_m.rows.len(),
                gen_m.rows.len()
            ),
        ));
    }
    let mut generators = Vec::new();
    for ((line, row), (cline, crow)) in gen_m.rows.iter().zip(&cost_m.rows) {
        let bus = as_id(row[0], *line, "generator bus")?;
        let in_service = row[7] > 0.0;
        if crow[0] != 2.0 {
            return Err(parse_err(*cline, "only polynomial costs (model 2) are supported"));
        }
        let n = crow[3] as usize;
        if n > 3 || crow[3].fract() != 0.0 {
            return Err(parse_err(*cline, format!("polynomial degree {} exceeds 2", crow[3] as i64 - 1)));
        }
        if crow.len() < 4 + n {
            return Err(parse_err(*cline, "gencost row is missing coefficients"));
        }
        let coeffs = &crow[4..4 + n];
        let mut c = [0.0; 3];
        for (k, &v) in coeffs.iter().rev().enumerate() {
            c[k] = v;
        }
        if !in_service {
            continue;
        }
        generators.push(Generator {
            bus,
            p_min: row[9] / base,
            p_max: row[8] / base,
            q_min: row[4] / base,
            q_max: row[3] / base,
            cost: CostCurve {
                c0: c[0],
                c1: c[1] * base,
                c2: c[2] * base * base,
            },
        });
    }

    let mut branches = Vec::new();
    for (line, row) in &branch_m.rows {
        let from_bus = as_id(row[0], *line, "branch from-bus")?;
        let to_bus = as_id(row[1], *line, "branch to-bus")?;
        if row[10] <= 0.0 {
            continue;
        }
        let (r, x, charging, rate, ratio, shift) = (row[2], row[3], row[4], row[5], row[8], row[9]);
        let z2 = r * r + x * x;
        if z2 == 0.0 {
            return Err(parse_err(*line, format!("branch {from_bus}-{to_bus} has zero impedance")));
        }
        if shift != 0.0 {
            log::warn!("branch {from_bus}-{to_bus}: phase shift {shift} deg dropped");
        }
        let tau = if ratio == 0.0 { 1.0 } else { ratio };
        for end in [from_bus, to_bus] {
            let Some(&pos) = bus_index.get(&end) else {
                return Err(Error::Validation(format!(
                    "branch {from_bus}-{to_bus} (line {line}) references unknown bus {end}"
                )));
            };
            buses[pos].shunt_q -= charging / 2.0;
        }
        branches.push(Branch {
            from_bus,
            to_bus,
            g: r / (z2 * tau),
            b: -x / (z2 * tau),
            s_max: if rate == 0.0 { UNLIMITED_S_MAX } else { rate / base },
        });
    }

    NetworkCase::new(CaseDocument {
        base_mva: base,
        reference_bus: reference,
        buses,
        branches,
        generators,
        loads,
    })
}
