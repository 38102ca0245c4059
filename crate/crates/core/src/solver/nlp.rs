//! The AC-OPF as a smooth NLP over the free variables.
//!
//! Full variable vector: `[theta (n), v (n), p_g (ng), q_g (ng)]`. The
//! reference angle and every variable whose bounds coincide are fixed and
//! removed from the optimization. Equalities are the 2n balance rows,
//! inequalities `h(x) <= 0` are the squared thermal limits on rated arcs
//! followed by the variable bounds.

use crate::acopf::{
    branch_flow, branch_flow_grad, branch_flow_hess, violations_from_parts, LoadProfile, OpfSolution,
};
use crate::netmodel::{NetworkCase, UNLIMITED_S_MAX};

const NONE: usize = usize::MAX;

/// Objective minimized by the interior point.
#[derive(Debug, Clone)]
pub(crate) enum Objective {
    /// Generation cost, multiplied by `scale` to keep multipliers O(1).
    Cost { scale: f64 },
    /// Squared distance of dispatch and voltage magnitudes to an anchor.
    Projection { p_hat: Vec<f64>, v_hat: Vec<f64> },
}

pub(crate) struct Nlp<'a> {
    pub case: &'a NetworkCase,
    pub loads: &'a LoadProfile,
    pub objective: Objective,
    n: usize,
    ng: usize,
    /// Full vector holding the values of fixed variables.
    base: Vec<f64>,
    pub free: Vec<usize>,
    col: Vec<usize>,
    rated_arcs: Vec<usize>,
    /// (free column, bound, is_upper)
    bounds: Vec<(usize, f64, bool)>,
}

/// First-order data at a point.
pub(crate) struct Eval {
    pub f: f64,
    pub grad_f: Vec<f64>,
    pub g: Vec<f64>,
    pub jg: Vec<(usize, usize, f64)>,
    pub h: Vec<f64>,
    pub jh: Vec<(usize, usize, f64)>,
}

/// Local variables of a branch, `[v_from, v_to, theta_from, theta_to]`, and
/// the maps from each arc's `(v_i, v_j, dtheta)` to them.
const FWD: [[f64; 4]; 3] = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0]];
const REV: [[f64; 4]; 3] = [[0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, -1.0, 1.0]];

fn lift_grad(g: &[f64; 3], t: &[[f64; 4]; 3]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (k, row) in t.iter().enumerate() {
        for c in 0..4 {
            out[c] += g[k] * row[c];
        }
    }
    out
}

fn lift_hess(h: &[[f64; 3]; 3], t: &[[f64; 4]; 3], w: f64, out: &mut [[f64; 4]; 4]) {
    for a in 0..3 {
        for b in 0..3 {
            let hab = w * h[a][b];
            if hab == 0.0 {
                continue;
            }
            for r in 0..4 {
                if t[a][r] == 0.0 {
                    continue;
                }
                for c in 0..4 {
                    out[r][c] += t[a][r] * hab * t[b][c];
                }
            }
        }
    }
}

impl<'a> Nlp<'a> {
    /// `start` supplies the values of fixed variables (notably the reference
    /// angle).
    pub fn new(case: &'a NetworkCase, loads: &'a LoadProfile, objective: Objective, start: &OpfSolution) -> Self {
        let n = case.n_buses();
        let ng = case.n_generators();
        let mut base = Vec::with_capacity(2 * n + 2 * ng);
        base.extend(&start.theta);
        base.extend(&start.v);
        base.extend(&start.p_g);
        base.extend(&start.q_g);
        let mut lo = vec![f64::NEG_INFINITY; 2 * n + 2 * ng];
        let mut hi = vec![f64::INFINITY; 2 * n + 2 * ng];
        for (i, bus) in case.buses().iter().enumerate() {
            (lo[n + i], hi[n + i]) = (bus.v_min, bus.v_max);
        }
        for (k, g) in case.generators().iter().enumerate() {
            (lo[2 * n + k], hi[2 * n + k]) = (g.p_min, g.p_max);
            (lo[2 * n + ng + k], hi[2 * n + ng + k]) = (g.q_min, g.q_max);
        }
        let mut free = Vec::new();
        let mut col = vec![NONE; base.len()];
        for j in 0..base.len() {
            let pinned = hi[j] - lo[j] <= 1e-10;
            if j == case.reference_bus() {
                continue;
            }
            if pinned {
                base[j] = lo[j];
                continue;
            }
            col[j] = free.len();
            free.push(j);
        }
        let mut bounds = Vec::new();
        for (c, &j) in free.iter().enumerate() {
            if hi[j].is_finite() {
                bounds.push((c, hi[j], true));
            }
            if lo[j].is_finite() {
                bounds.push((c, lo[j], false));
            }
        }
        let rated_arcs = (0..case.n_arcs())
            .filter(|&a| case.branches()[a / 2].s_max < UNLIMITED_S_MAX)
            .collect();
        Nlp {
            case,
            loads,
            objective,
            n,
            ng,
            base,
            free,
            col,
            rated_arcs,
            bounds,
        }
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn n_eq(&self) -> usize {
        2 * self.n
    }

    pub fn n_ineq(&self) -> usize {
        self.rated_arcs.len() + self.bounds.len()
    }

    pub fn pack(&self, sol: &OpfSolution) -> Vec<f64> {
        let full = self.full_of(sol);
        self.free.iter().map(|&j| full[j]).collect()
    }

    fn full_of(&self, sol: &OpfSolution) -> Vec<f64> {
        let mut full = Vec::with_capacity(self.base.len());
        full.extend(&sol.theta);
        full.extend(&sol.v);
        full.extend(&sol.p_g);
        full.extend(&sol.q_g);
        full
    }

    /// Moves a starting point strictly inside the variable bounds, by
    /// `min(push * max(1, |bound|), push * range)` from each bound.
    pub fn push_interior(&self, x: &mut [f64], push: f64) {
        let mut lo = vec![f64::NEG_INFINITY; x.len()];
        let mut hi = vec![f64::INFINITY; x.len()];
        for &(c, b, upper) in &self.bounds {
            if upper {
                hi[c] = b;
            } else {
                lo[c] = b;
            }
        }
        for c in 0..x.len() {
            let range = hi[c] - lo[c];
            if lo[c].is_finite() {
                let d = (push * lo[c].abs().max(1.0)).min(push * range);
                x[c] = x[c].max(lo[c] + d);
            }
            if hi[c].is_finite() {
                let d = (push * hi[c].abs().max(1.0)).min(push * range);
                x[c] = x[c].min(hi[c] - d);
            }
        }
    }

    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut full = self.base.clone();
        for (c, &j) in self.free.iter().enumerate() {
            full[j] = x[c];
        }
        full
    }

    pub fn unpack(&self, x: &[f64]) -> OpfSolution {
        let full = self.expand(x);
        let (n, ng) = (self.n, self.ng);
        OpfSolution::new(
            full[n..2 * n].to_vec(),
            full[..n].to_vec(),
            full[2 * n..2 * n + ng].to_vec(),
            full[2 * n + ng..].to_vec(),
        )
    }

    /// Largest violation of any constraint, from the shared evaluator.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let full = self.expand(x);
        let n = self.n;
        let dtheta: Vec<f64> = (0..self.case.n_branches())
            .map(|e| {
                let (f, t) = self.case.branch_ends(e);
                full[f] - full[t]
            })
            .collect();
        let ng = self.ng;
        violations_from_parts(
            self.case,
            self.loads,
            &full[n..2 * n],
            &dtheta,
            &full[2 * n..2 * n + ng],
            &full[2 * n + ng..],
        )
        .max()
    }

    fn locals(&self, e: usize) -> [usize; 4] {
        let (f, t) = self.case.branch_ends(e);
        [self.n + f, self.n + t, f, t]
    }

    fn arc_point(&self, full: &[f64], a: usize) -> (f64, f64, f64, f64, f64) {
        let (i, j) = self.case.arc_ends(a);
        let br = &self.case.branches()[a / 2];
        (full[self.n + i], full[self.n + j], full[i] - full[j], br.g, br.b)
    }

    fn arc_map(a: usize) -> &'static [[f64; 4]; 3] {
        if a.is_multiple_of(2) {
            &FWD
        } else {
            &REV
        }
    }

    #[cfg(test)]
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let full = self.expand(x);
        self.objective_full(&full)
    }

    fn objective_full(&self, full: &[f64]) -> f64 {
        let (n, ng) = (self.n, self.ng);
        match &self.objective {
            Objective::Cost { scale } => {
                scale
                    * self
                        .case
                        .generators()
                        .iter()
                        .zip(&full[2 * n..2 * n + ng])
                        .map(|(g, &p)| g.cost.eval(p))
                        .sum::<f64>()
            }
            Objective::Projection { p_hat, v_hat } => {
                let dp: f64 = full[2 * n..2 * n + ng].iter().zip(p_hat).map(|(a, b)| (a - b).powi(2)).sum();
                let dv: f64 = full[n..2 * n].iter().zip(v_hat).map(|(a, b)| (a - b).powi(2)).sum();
                dp + dv
            }
        }
    }

    /// Balance rows only.
    pub fn balance(&self, x: &[f64]) -> Vec<f64> {
        let full = self.expand(x);
        let (n, ng) = (self.n, self.ng);
        let mut g = vec![0.0; 2 * n];
        for (i, bus) in self.case.buses().iter().enumerate() {
            g[i] = bus.shunt_p + self.loads.p_d[i];
            g[n + i] = bus.shunt_q + self.loads.q_d[i];
        }
        for a in 0..self.case.n_arcs() {
            let (vi, vj, d, gb, bb) = self.arc_point(&full, a);
            let (p, q) = branch_flow(vi, vj, d, gb, bb);
            let (i, _) = self.case.arc_ends(a);
            g[i] += p;
            g[n + i] += q;
        }
        for k in 0..ng {
            let bus = self.case.generator_bus(k);
            g[bus] -= full[2 * n + k];
            g[n + bus] -= full[2 * n + ng + k];
        }
        g
    }

    /// Inequality rows only.
    pub fn inequalities(&self, x: &[f64]) -> Vec<f64> {
        let full = self.expand(x);
        let mut h = Vec::with_capacity(self.n_ineq());
        for &a in &self.rated_arcs {
            let (vi, vj, d, gb, bb) = self.arc_point(&full, a);
            let (p, q) = branch_flow(vi, vj, d, gb, bb);
            let s = self.case.branches()[a / 2].s_max;
            h.push(p * p + q * q - s * s);
        }
        for &(c, bound, upper) in &self.bounds {
            h.push(if upper { x[c] - bound } else { bound - x[c] });
        }
        h
    }

    pub fn eval(&self, x: &[f64]) -> Eval {
        let full = self.expand(x);
        let (n, ng) = (self.n, self.ng);
        let f = self.objective_full(&full);
        let mut grad_f = vec![0.0; self.n_free()];
        match &self.objective {
            Objective::Cost { scale } => {
                for (k, g) in self.case.generators().iter().enumerate() {
                    let c = self.col[2 * n + k];
                    if c != NONE {
                        grad_f[c] = scale * g.cost.derivative(full[2 * n + k]);
                    }
                }
            }
            Objective::Projection { p_hat, v_hat } => {
                for k in 0..ng {
                    let c = self.col[2 * n + k];
                    if c != NONE {
                        grad_f[c] = 2.0 * (full[2 * n + k] - p_hat[k]);
                    }
                }
                for i in 0..n {
                    let c = self.col[n + i];
                    if c != NONE {
                        grad_f[c] = 2.0 * (full[n + i] - v_hat[i]);
                    }
                }
            }
        }

        // Balance rows: flows out + shunt + demand - generation = 0.
        let mut g = vec![0.0; 2 * n];
        for (i, bus) in self.case.buses().iter().enumerate() {
            g[i] = bus.shunt_p + self.loads.p_d[i];
            g[n + i] = bus.shunt_q + self.loads.q_d[i];
        }
        let mut jg = Vec::new();
        let mut arc_pq = vec![(0.0, 0.0); self.case.n_arcs()];
        let mut arc_grad = vec![([0.0; 4], [0.0; 4]); self.case.n_arcs()];
        for a in 0..self.case.n_arcs() {
            let (vi, vj, d, gb, bb) = self.arc_point(&full, a);
            let (p, q) = branch_flow(vi, vj, d, gb, bb);
            let gr = branch_flow_grad(vi, vj, d, gb, bb);
            let t = Self::arc_map(a);
            let (gp, gq) = (lift_grad(&gr.p, t), lift_grad(&gr.q, t));
            let (i, _) = self.case.arc_ends(a);
            g[i] += p;
            g[n + i] += q;
            for (l, &j) in self.locals(a / 2).iter().enumerate() {
                let c = self.col[j];
                if c != NONE {
                    jg.push((i, c, gp[l]));
                    jg.push((n + i, c, gq[l]));
                }
            }
            arc_pq[a] = (p, q);
            arc_grad[a] = (gp, gq);
        }
        for k in 0..ng {
            let bus = self.case.generator_bus(k);
            g[bus] -= full[2 * n + k];
            g[n + bus] -= full[2 * n + ng + k];
            for (row, j) in [(bus, 2 * n + k), (n + bus, 2 * n + ng + k)] {
                let c = self.col[j];
                if c != NONE {
                    jg.push((row, c, -1.0));
                }
            }
        }

        let mut h = Vec::with_capacity(self.n_ineq());
        let mut jh = Vec::new();
        for (r, &a) in self.rated_arcs.iter().enumerate() {
            let (p, q) = arc_pq[a];
            let s = self.case.branches()[a / 2].s_max;
            h.push(p * p + q * q - s * s);
            let (gp, gq) = &arc_grad[a];
            for (l, &j) in self.locals(a / 2).iter().enumerate() {
                let c = self.col[j];
                if c != NONE {
                    jh.push((r, c, 2.0 * (p * gp[l] + q * gq[l])));
                }
            }
        }
        let off = self.rated_arcs.len();
        for (r, &(c, bound, upper)) in self.bounds.iter().enumerate() {
            if upper {
                h.push(x[c] - bound);
                jh.push((off + r, c, 1.0));
            } else {
                h.push(bound - x[c]);
                jh.push((off + r, c, -1.0));
            }
        }
        Eval {
            f,
            grad_f,
            g,
            jg,
            h,
            jh,
        }
    }

    /// KKT pattern: branch blocks, the diagonal, then `Jg` and its
    /// transpose. Values from [`Nlp::kkt_values`] follow the same order.
    pub fn kkt_pattern(&self, ev: &Eval) -> Vec<(usize, usize)> {
        let nx = self.n_free();
        let mut pat = Vec::new();
        for e in 0..self.case.n_branches() {
            let cols: Vec<usize> = self.locals(e).iter().map(|&j| self.col[j]).collect();
            for &r in &cols {
                for &c in &cols {
                    if r != NONE && c != NONE {
                        pat.push((r, c));
                    }
                }
            }
        }
        pat.extend((0..nx).map(|c| (c, c)));
        for &(r, c, _) in &ev.jg {
            pat.push((nx + r, c));
            pat.push((c, nx + r));
        }
        pat
    }

    /// Values of `[H + Jh' diag(mu/z) Jh, Jg'; Jg, 0]`.
    pub fn kkt_values(&self, x: &[f64], ev: &Eval, lam: &[f64], mu: &[f64], z: &[f64]) -> Vec<f64> {
        let full = self.expand(x);
        let (n, ng) = (self.n, self.ng);
        let nx = self.n_free();
        let mut vals = Vec::new();
        let mut thermal_row = vec![NONE; self.case.n_arcs()];
        for (r, &a) in self.rated_arcs.iter().enumerate() {
            thermal_row[a] = r;
        }
        for e in 0..self.case.n_branches() {
            let mut blk = [[0.0; 4]; 4];
            for a in [2 * e, 2 * e + 1] {
                let (vi, vj, d, gb, bb) = self.arc_point(&full, a);
                let hs = branch_flow_hess(vi, vj, d, gb, bb);
                let t = Self::arc_map(a);
                let (i, _) = self.case.arc_ends(a);
                lift_hess(&hs.p, t, lam[i], &mut blk);
                lift_hess(&hs.q, t, lam[n + i], &mut blk);
                let r = thermal_row[a];
                if r != NONE {
                    // h = p^2 + q^2 - s^2
                    let (p, q) = branch_flow(vi, vj, d, gb, bb);
                    let gr = branch_flow_grad(vi, vj, d, gb, bb);
                    let (gp, gq) = (lift_grad(&gr.p, t), lift_grad(&gr.q, t));
                    lift_hess(&hs.p, t, 2.0 * mu[r] * p, &mut blk);
                    lift_hess(&hs.q, t, 2.0 * mu[r] * q, &mut blk);
                    let w = mu[r] / z[r];
                    for rr in 0..4 {
                        let dh_r = 2.0 * (p * gp[rr] + q * gq[rr]);
                        for cc in 0..4 {
                            let dh_c = 2.0 * (p * gp[cc] + q * gq[cc]);
                            blk[rr][cc] += 2.0 * mu[r] * (gp[rr] * gp[cc] + gq[rr] * gq[cc]) + w * dh_r * dh_c;
                        }
                    }
                }
            }
            let cols: Vec<usize> = self.locals(e).iter().map(|&j| self.col[j]).collect();
            for (rr, &r) in cols.iter().enumerate() {
                for (cc, &c) in cols.iter().enumerate() {
                    if r != NONE && c != NONE {
                        vals.push(blk[rr][cc]);
                    }
                }
            }
        }
        let mut diag = vec![0.0; nx];
        match &self.objective {
            Objective::Cost { scale } => {
                for (k, g) in self.case.generators().iter().enumerate() {
                    let c = self.col[2 * n + k];
                    if c != NONE {
                        diag[c] += 2.0 * scale * g.cost.c2;
                    }
                }
            }
            Objective::Projection { .. } => {
                for k in 0..ng {
                    let c = self.col[2 * n + k];
                    if c != NONE {
                        diag[c] += 2.0;
                    }
                }
                for i in 0..n {
                    let c = self.col[n + i];
                    if c != NONE {
                        diag[c] += 2.0;
                    }
                }
            }
        }
        let off = self.rated_arcs.len();
        for (r, &(c, _, _)) in self.bounds.iter().enumerate() {
            diag[c] += mu[off + r] / z[off + r];
        }
        vals.extend(diag);
        for &(_, _, v) in &ev.jg {
            vals.push(v);
            vals.push(v);
        }
        vals
    }
}
