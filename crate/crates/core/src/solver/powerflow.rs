//! Newton-Raphson power flow at fixed dispatch.
//!
//! Generator buses hold their voltage magnitude (PV), the reference bus also
//! holds its angle and absorbs the active mismatch. Reactive output at
//! generator buses, and active output at the reference bus, are read back
//! from the converged balance and split evenly between co-located units.

use super::linsys::SparseSystem;
use crate::acopf::{arc_flows, balance_from_flows, branch_flow_grad, LoadProfile, OpfSolution};
use crate::netmodel::NetworkCase;

const TOL: f64 = 1e-10;
const MAX_ITER: usize = 30;

pub(crate) fn newton_power_flow(case: &NetworkCase, loads: &LoadProfile, start: &OpfSolution) -> Option<OpfSolution> {
    let n = case.n_buses();
    let slack = case.reference_bus();
    let is_pv: Vec<bool> = (0..n).map(|i| !case.generators_at(i).is_empty()).collect();
    // Unknowns: angles of non-reference buses, magnitudes of load buses.
    let mut ang_col = vec![usize::MAX; n];
    let mut mag_col = vec![usize::MAX; n];
    let mut m = 0;
    for i in (0..n).filter(|&i| i != slack) {
        ang_col[i] = m;
        m += 1;
    }
    for i in (0..n).filter(|&i| i != slack && !is_pv[i]) {
        mag_col[i] = m;
        m += 1;
    }
    // Equations: P at the angle unknowns' buses, Q at the magnitude ones.
    let p_row = &ang_col;
    let q_row = &mag_col;

    let mut sol = start.clone();
    let mut pattern = Vec::new();
    for a in 0..case.n_arcs() {
        let (i, j) = case.arc_ends(a);
        for row in [p_row[i], q_row[i]] {
            if row == usize::MAX {
                continue;
            }
            for col in [mag_col[i], mag_col[j], ang_col[i], ang_col[j]] {
                if col != usize::MAX {
                    pattern.push((row, col));
                }
            }
        }
    }
    if m == 0 {
        return Some(finish(case, loads, sol));
    }
    let system = SparseSystem::new(m, &pattern).ok()?;

    for _ in 0..MAX_ITER {
        let dtheta = sol.branch_dtheta(case);
        let (p_f, q_f) = arc_flows(case, &sol.v, &dtheta);
        let (dp, dq) = balance_from_flows(case, loads, &sol.p_g, &sol.q_g, &p_f, &q_f);
        let mut f = vec![0.0; m];
        for i in 0..n {
            if p_row[i] != usize::MAX {
                f[p_row[i]] = dp[i];
            }
            if q_row[i] != usize::MAX {
                f[q_row[i]] = dq[i];
            }
        }
        let worst = f.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if !worst.is_finite() {
            return None;
        }
        if worst < TOL {
            return Some(finish(case, loads, sol));
        }
        // d(balance)/dx = -d(outgoing flow)/dx
        let mut vals = Vec::with_capacity(pattern.len());
        for a in 0..case.n_arcs() {
            let (i, j) = case.arc_ends(a);
            let br = &case.branches()[a / 2];
            let d = sol.theta[i] - sol.theta[j];
            let gr = branch_flow_grad(sol.v[i], sol.v[j], d, br.g, br.b);
            for (row, grad) in [(p_row[i], gr.p), (q_row[i], gr.q)] {
                if row == usize::MAX {
                    continue;
                }
                let local = [
                    (mag_col[i], grad[0]),
                    (mag_col[j], grad[1]),
                    (ang_col[i], grad[2]),
                    (ang_col[j], -grad[2]),
                ];
                for (col, v) in local {
                    if col != usize::MAX {
                        vals.push(-v);
                    }
                }
            }
        }
        let mut step: Vec<f64> = f.iter().map(|x| -x).collect();
        system.solve(&vals, &mut step).ok()?;
        for i in 0..n {
            if ang_col[i] != usize::MAX {
                sol.theta[i] += step[ang_col[i]];
            }
            if mag_col[i] != usize::MAX {
                sol.v[i] += step[mag_col[i]];
            }
        }
    }
    None
}

/// Assigns the slack and reactive outputs that close the balance.
fn finish(case: &NetworkCase, loads: &LoadProfile, mut sol: OpfSolution) -> OpfSolution {
    let dtheta = sol.branch_dtheta(case);
    let (p_f, q_f) = arc_flows(case, &sol.v, &dtheta);
    let (dp, dq) = balance_from_flows(case, loads, &sol.p_g, &sol.q_g, &p_f, &q_f);
    for i in 0..case.n_buses() {
        let gens = case.generators_at(i);
        if gens.is_empty() {
            continue;
        }
        let share = gens.len() as f64;
        for &g in gens {
            sol.q_g[g] -= dq[i] / share;
            if i == case.reference_bus() {
                sol.p_g[g] -= dp[i] / share;
            }
        }
    }
    sol
}
