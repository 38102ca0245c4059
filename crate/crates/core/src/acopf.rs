//! Evaluation of the AC-OPF formulation: branch flows, nodal balance,
//! objective, constraint violations and the analytic flow derivatives shared
//! by the solver and the training losses.
//!
//! Every physical branch yields two directed arcs (see
//! [`NetworkCase::arc_ends`]). Arc flows depend only on the endpoint voltage
//! magnitudes and the angle difference across the branch, so predictions that
//! carry a per-branch angle difference are evaluated exactly like solver
//! output carrying absolute angles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::NetworkCase;

/// Per-bus demand (p.u.). Buses without a load carry zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub p_d: Vec<f64>,
    pub q_d: Vec<f64>,
}

impl LoadProfile {
    pub fn nominal(case: &NetworkCase) -> Self {
        let scale = vec![1.0; case.loads().len()];
        Self::scaled(case, &scale)
    }

    /// Each load multiplied by its own factor (same factor for p and q).
    pub fn scaled(case: &NetworkCase, factors: &[f64]) -> Self {
        let n = case.n_buses();
        let mut p_d = vec![0.0; n];
        let mut q_d = vec![0.0; n];
        for (l, (load, f)) in case.loads().iter().zip(factors).enumerate() {
            let bus = case.load_bus(l);
            p_d[bus] = load.p_nom * f;
            q_d[bus] = load.q_nom * f;
        }
        LoadProfile { p_d, q_d }
    }

    /// Demand at each load record, in load order: (p, q).
    pub fn per_load(&self, case: &NetworkCase) -> (Vec<f64>, Vec<f64>) {
        (0..case.loads().len())
            .map(|l| {
                let bus = case.load_bus(l);
                (self.p_d[bus], self.q_d[bus])
            })
            .unzip()
    }

    pub fn check(&self, case: &NetworkCase) -> Result<()> {
        let n = case.n_buses();
        if self.p_d.len() != n || self.q_d.len() != n {
            return Err(Error::Dimension(format!(
                "load profile has {}/{} entries for {n} buses",
                self.p_d.len(),
                self.q_d.len()
            )));
        }
        if self.p_d.iter().chain(&self.q_d).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("load profile is not finite".into()));
        }
        Ok(())
    }
}

/// A full operating point: per-bus voltage magnitude and absolute angle,
/// per-generator dispatch, and optionally the per-arc flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_f: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_f: Option<Vec<f64>>,
}

impl OpfSolution {
    pub fn new(v: Vec<f64>, theta: Vec<f64>, p_g: Vec<f64>, q_g: Vec<f64>) -> Self {
        OpfSolution {
            v,
            theta,
            p_g,
            q_g,
            p_f: None,
            q_f: None,
        }
    }

    /// Unit voltages, zero angles, dispatch at the middle of each range.
    pub fn flat_start(case: &NetworkCase) -> Self {
        let gens = case.generators();
        OpfSolution::new(
            vec![1.0; case.n_buses()],
            vec![0.0; case.n_buses()],
            gens.iter().map(|g| 0.5 * (g.p_min + g.p_max)).collect(),
            gens.iter().map(|g| 0.5 * (g.q_min + g.q_max)).collect(),
        )
    }

    pub fn check(&self, case: &NetworkCase) -> Result<()> {
        let (n, ng) = (case.n_buses(), case.n_generators());
        if self.v.len() != n || self.theta.len() != n {
            return Err(Error::Dimension(format!(
                "solution has {}/{} bus entries for {n} buses",
                self.v.len(),
                self.theta.len()
            )));
        }
        if self.p_g.len() != ng || self.q_g.len() != ng {
            return Err(Error::Dimension(format!(
                "solution has {}/{} generator entries for {ng} generators",
                self.p_g.len(),
                self.q_g.len()
            )));
        }
        Ok(())
    }

    /// Angle difference `theta_from - theta_to` of every branch.
    pub fn branch_dtheta(&self, case: &NetworkCase) -> Vec<f64> {
        (0..case.n_branches())
            .map(|e| {
                let (f, t) = case.branch_ends(e);
                self.theta[f] - self.theta[t]
            })
            .collect()
    }

    /// Attaches arc flows computed from `(v, theta)`.
    pub fn with_flows(mut self, case: &NetworkCase) -> Self {
        let (p, q) = arc_flows(case, &self.v, &self.branch_dtheta(case));
        self.p_f = Some(p);
        self.q_f = Some(q);
        self
    }
}

/// Active and reactive flow leaving bus `i` on a line towards bus `j`.
pub fn branch_flow(v_i: f64, v_j: f64, dtheta: f64, g: f64, b: f64) -> (f64, f64) {
    let (s, c) = dtheta.sin_cos();
    let vv = v_i * v_j;
    let p = g * v_i * v_i - vv * (b * s + g * c);
    let q = -b * v_i * v_i - vv * (g * s - b * c);
    (p, q)
}

/// Partial derivatives of an arc flow with respect to `(v_i, v_j, dtheta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowGrad {
    pub p: [f64; 3],
    pub q: [f64; 3],
}

pub fn branch_flow_grad(v_i: f64, v_j: f64, dtheta: f64, g: f64, b: f64) -> FlowGrad {
    let (s, c) = dtheta.sin_cos();
    let a = b * s + g * c;
    let da = b * c - g * s;
    let bq = g * s - b * c;
    FlowGrad {
        p: [2.0 * g * v_i - v_j * a, -v_i * a, -v_i * v_j * da],
        q: [-2.0 * b * v_i - v_j * bq, -v_i * bq, -v_i * v_j * a],
    }
}

/// Second derivatives of an arc flow with respect to `(v_i, v_j, dtheta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowHess {
    pub p: [[f64; 3]; 3],
    pub q: [[f64; 3]; 3],
}

pub fn branch_flow_hess(v_i: f64, v_j: f64, dtheta: f64, g: f64, b: f64) -> FlowHess {
    let (s, c) = dtheta.sin_cos();
    let a = b * s + g * c;
    let da = b * c - g * s;
    let bq = g * s - b * c;
    FlowHess {
        p: [
            [2.0 * g, -a, -v_j * da],
            [-a, 0.0, -v_i * da],
            [-v_j * da, -v_i * da, v_i * v_j * a],
        ],
        q: [
            [-2.0 * b, -bq, -v_j * a],
            [-bq, 0.0, -v_i * a],
            [-v_j * a, -v_i * a, -v_i * v_j * da],
        ],
    }
}

/// Flows on every directed arc from voltage magnitudes and per-branch angle
/// differences.
pub fn arc_flows(case: &NetworkCase, v: &[f64], branch_dtheta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; case.n_arcs()];
    let mut q = vec![0.0; case.n_arcs()];
    for (e, br) in case.branches().iter().enumerate() {
        let (f, t) = case.branch_ends(e);
        let d = branch_dtheta[e];
        (p[2 * e], q[2 * e]) = branch_flow(v[f], v[t], d, br.g, br.b);
        (p[2 * e + 1], q[2 * e + 1]) = branch_flow(v[t], v[f], -d, br.g, br.b);
    }
    (p, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintSense {
    /// `f(x) >= 0`
    Inequality,
    /// `f(x) = 0`
    Equality,
}

pub fn violation_of(sense: ConstraintSense, f_value: f64) -> f64 {
    match sense {
        ConstraintSense::Inequality => (-f_value).max(0.0),
        ConstraintSense::Equality => f_value.abs(),
    }
}

/// Excess apparent power over the rating (p.u.).
pub fn thermal_violation(p_f: f64, q_f: f64, s_max: f64) -> f64 {
    violation_of(ConstraintSense::Inequality, s_max - p_f.hypot(q_f))
}

/// Violation of a two-sided bound `lo <= x <= hi`.
pub fn bound_violation(x: f64, lo: f64, hi: f64) -> f64 {
    violation_of(ConstraintSense::Inequality, x - lo).max(violation_of(
        ConstraintSense::Inequality,
        hi - x,
    ))
}

pub fn objective(case: &NetworkCase, p_g: &[f64]) -> f64 {
    case.generators()
        .iter()
        .zip(p_g)
        .map(|(g, &p)| g.cost.eval(p))
        .sum()
}

/// Flows fixed on a subset of arcs, overriding the computed ones in the
/// balance equations (the decomposed regional balance).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CouplingFlows {
    pub arcs: Vec<usize>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Nodal mismatch `sum p_g - p_d - shunt_p - sum_arcs p_f` (and reactive).
///
/// The solution must carry flows; coupling flows, when given, replace the
/// solution's flows on their arcs.
pub fn balance_residual(
    case: &NetworkCase,
    loads: &LoadProfile,
    sol: &OpfSolution,
    coupling: Option<&CouplingFlows>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (Some(p_f), Some(q_f)) = (&sol.p_f, &sol.q_f) else {
        return Err(Error::InvalidArgument("solution carries no arc flows".into()));
    };
    if p_f.len() != case.n_arcs() || q_f.len() != case.n_arcs() {
        return Err(Error::Dimension("arc flow vectors do not match the case".into()));
    }
    let (mut p_f, mut q_f) = (p_f.clone(), q_f.clone());
    if let Some(cf) = coupling {
        for (k, &a) in cf.arcs.iter().enumerate() {
            p_f[a] = cf.p[k];
            q_f[a] = cf.q[k];
        }
    }
    Ok(balance_from_flows(case, loads, &sol.p_g, &sol.q_g, &p_f, &q_f))
}

pub(crate) fn balance_from_flows(
    case: &NetworkCase,
    loads: &LoadProfile,
    p_g: &[f64],
    q_g: &[f64],
    p_f: &[f64],
    q_f: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = case.n_buses();
    let mut dp = vec![0.0; n];
    let mut dq = vec![0.0; n];
    for (i, bus) in case.buses().iter().enumerate() {
        let mut sp = -loads.p_d[i] - bus.shunt_p;
        let mut sq = -loads.q_d[i] - bus.shunt_q;
        for &g in case.generators_at(i) {
            sp += p_g[g];
            sq += q_g[g];
        }
        for &a in case.arcs_from(i) {
            sp -= p_f[a];
            sq -= q_f[a];
        }
        dp[i] = sp;
        dq[i] = sq;
    }
    (dp, dq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    VBound,
    PBound,
    QBound,
    Thermal,
    PBalance,
    QBalance,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 6] = [
        ConstraintKind::VBound,
        ConstraintKind::PBound,
        ConstraintKind::QBound,
        ConstraintKind::Thermal,
        ConstraintKind::PBalance,
        ConstraintKind::QBalance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConstraintKind::VBound => "v_bound",
            ConstraintKind::PBound => "p_bound",
            ConstraintKind::QBound => "q_bound",
            ConstraintKind::Thermal => "thermal",
            ConstraintKind::PBalance => "p_balance",
            ConstraintKind::QBalance => "q_balance",
        }
    }
}

/// A constraint instance: its kind plus the bus, generator or arc index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConstraintId {
    pub kind: ConstraintKind,
    pub index: usize,
}

/// Nonnegative violation of every constraint instance, grouped by kind.
///
/// Bound entries are per bus (voltage) or per generator; thermal entries are
/// per arc; balance entries are per bus.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ViolationVector {
    pub v_bound: Vec<f64>,
    pub p_bound: Vec<f64>,
    pub q_bound: Vec<f64>,
    pub thermal: Vec<f64>,
    pub p_balance: Vec<f64>,
    pub q_balance: Vec<f64>,
}

impl ViolationVector {
    pub fn of_kind(&self, kind: ConstraintKind) -> &[f64] {
        match kind {
            ConstraintKind::VBound => &self.v_bound,
            ConstraintKind::PBound => &self.p_bound,
            ConstraintKind::QBound => &self.q_bound,
            ConstraintKind::Thermal => &self.thermal,
            ConstraintKind::PBalance => &self.p_balance,
            ConstraintKind::QBalance => &self.q_balance,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ConstraintId, f64)> + '_ {
        ConstraintKind::ALL.into_iter().flat_map(move |kind| {
            self.of_kind(kind)
                .iter()
                .enumerate()
                .map(move |(index, &v)| (ConstraintId { kind, index }, v))
        })
    }

    pub fn len(&self) -> usize {
        ConstraintKind::ALL
            .iter()
            .map(|&k| self.of_kind(k).len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max(&self) -> f64 {
        self.iter().map(|(_, v)| v).fold(0.0, f64::max)
    }

    pub fn max_of(&self, kind: ConstraintKind) -> f64 {
        self.of_kind(kind).iter().copied().fold(0.0, f64::max)
    }
}

/// Violations of every constraint at an operating point given by voltage
/// magnitudes, per-branch angle differences and dispatch. Flows come from
/// [`branch_flow`], so the flow definitions hold by construction.
pub fn violations_from_parts(
    case: &NetworkCase,
    loads: &LoadProfile,
    v: &[f64],
    branch_dtheta: &[f64],
    p_g: &[f64],
    q_g: &[f64],
) -> ViolationVector {
    let (p_f, q_f) = arc_flows(case, v, branch_dtheta);
    let (dp, dq) = balance_from_flows(case, loads, p_g, q_g, &p_f, &q_f);
    let gens = case.generators();
    ViolationVector {
        v_bound: case
            .buses()
            .iter()
            .zip(v)
            .map(|(b, &x)| bound_violation(x, b.v_min, b.v_max))
            .collect(),
        p_bound: gens
            .iter()
            .zip(p_g)
            .map(|(g, &x)| bound_violation(x, g.p_min, g.p_max))
            .collect(),
        q_bound: gens
            .iter()
            .zip(q_g)
            .map(|(g, &x)| bound_violation(x, g.q_min, g.q_max))
            .collect(),
        thermal: (0..case.n_arcs())
            .map(|a| thermal_violation(p_f[a], q_f[a], case.branches()[a / 2].s_max))
            .collect(),
        p_balance: dp.iter().map(|&x| violation_of(ConstraintSense::Equality, x)).collect(),
        q_balance: dq.iter().map(|&x| violation_of(ConstraintSense::Equality, x)).collect(),
    }
}

pub fn all_violations(case: &NetworkCase, loads: &LoadProfile, sol: &OpfSolution) -> ViolationVector {
    violations_from_parts(
        case,
        loads,
        &sol.v,
        &sol.branch_dtheta(case),
        &sol.p_g,
        &sol.q_g,
    )
}

/// Solution file layout: arrays aligned with the listed bus ids and
/// generator order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub bus_ids: Vec<u32>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub generator_buses: Vec<u32>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
}

impl SolutionFile {
    pub fn from_solution(case: &NetworkCase, sol: &OpfSolution) -> Self {
        SolutionFile {
            bus_ids: case.buses().iter().map(|b| b.id).collect(),
            v: sol.v.clone(),
            theta: sol.theta.clone(),
            generator_buses: case.generators().iter().map(|g| g.bus).collect(),
            p_g: sol.p_g.clone(),
            q_g: sol.q_g.clone(),
        }
    }

    pub fn into_solution(self, case: &NetworkCase) -> Result<OpfSolution> {
        let ids: Vec<u32> = case.buses().iter().map(|b| b.id).collect();
        let gens: Vec<u32> = case.generators().iter().map(|g| g.bus).collect();
        if self.bus_ids != ids || self.generator_buses != gens {
            return Err(Error::Dimension(
                "solution file is keyed to a different case".into(),
            ));
        }
        let sol = OpfSolution::new(self.v, self.theta, self.p_g, self.q_g);
        sol.check(case)?;
        Ok(sol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::fixtures::{toy6, two_bus};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn flat_voltage_means_zero_flow() {
        for (g, b) in [(0.0, -5.0), (1.0, -5.0), (3.0, 2.0)] {
            let (p, q) = branch_flow(1.0, 1.0, 0.0, g, b);
            assert!(p.abs() < 1e-15 && q.abs() < 1e-15);
        }
    }

    #[test]
    fn lossless_line_closed_form() {
        let (p, q) = branch_flow(1.0, 1.0, 0.1, 0.0, -5.0);
        assert!((p - 5.0 * 0.1f64.sin()).abs() < 1e-15);
        assert!((q - 5.0 * (1.0 - 0.1f64.cos())).abs() < 1e-15);
    }

    #[test]
    fn lossy_line_matches_high_precision_fixture() {
        // 40-digit evaluation of the flow equations.
        let (p, q) = branch_flow(1.02, 0.98, 0.05, 1.0, -5.0);
        assert!((p - 0.291_845_127_724_042_027_3).abs() < 1e-14);
        assert!((q - 0.160_287_020_942_988_642_2).abs() < 1e-14);
    }

    #[test]
    fn angle_partial_at_origin_is_minus_b() {
        let grad = branch_flow_grad(1.0, 1.0, 0.0, 0.7, -4.0);
        assert!((grad.p[2] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn zero_admittance_has_zero_partials() {
        let grad = branch_flow_grad(1.03, 0.97, 0.2, 0.0, 0.0);
        assert!(grad.p.iter().chain(&grad.q).all(|&x| x == 0.0));
    }

    fn central_diff(f: impl Fn([f64; 3]) -> (f64, f64), x: [f64; 3], k: usize, h: f64) -> (f64, f64) {
        let mut xp = x;
        let mut xm = x;
        xp[k] += h;
        xm[k] -= h;
        let (pp, qp) = f(xp);
        let (pm, qm) = f(xm);
        ((pp - pm) / (2.0 * h), (qp - qm) / (2.0 * h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn gradient_matches_central_differences(
            vi in 0.85f64..1.15, vj in 0.85f64..1.15, d in -0.6f64..0.6,
            g in 0.0f64..5.0, b in -40.0f64..-1.0,
        ) {
            let grad = branch_flow_grad(vi, vj, d, g, b);
            let f = |x: [f64; 3]| branch_flow(x[0], x[1], x[2], g, b);
            for k in 0..3 {
                let (dp, dq) = central_diff(f, [vi, vj, d], k, 1e-7);
                let scale = 1.0 + grad.p.iter().chain(&grad.q).fold(0.0f64, |m, x| m.max(x.abs()));
                prop_assert!((dp - grad.p[k]).abs() / scale <= 1e-6);
                prop_assert!((dq - grad.q[k]).abs() / scale <= 1e-6);
            }
        }

        #[test]
        fn hessian_matches_differenced_gradient(
            vi in 0.85f64..1.15, vj in 0.85f64..1.15, d in -0.6f64..0.6,
            g in 0.0f64..5.0, b in -40.0f64..-1.0,
        ) {
            let hess = branch_flow_hess(vi, vj, d, g, b);
            let x = [vi, vj, d];
            for k in 0..3 {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let gp = branch_flow_grad(xp[0], xp[1], xp[2], g, b);
                let gm = branch_flow_grad(xm[0], xm[1], xm[2], g, b);
                for r in 0..3 {
                    let fd_p = (gp.p[r] - gm.p[r]) / (2.0 * h);
                    let fd_q = (gp.q[r] - gm.q[r]) / (2.0 * h);
                    prop_assert!(close(fd_p, hess.p[r][k], 1e-6));
                    prop_assert!(close(fd_q, hess.q[r][k], 1e-6));
                }
            }
        }

        #[test]
        fn lossless_flow_is_antisymmetric(
            vi in 0.8f64..1.2, vj in 0.8f64..1.2, d in -1.0f64..1.0, b in -50.0f64..50.0,
        ) {
            let (p_ij, _) = branch_flow(vi, vj, d, 0.0, b);
            let (p_ji, _) = branch_flow(vj, vi, -d, 0.0, b);
            prop_assert!((p_ij + p_ji).abs() <= 1e-12 * (1.0 + p_ij.abs()));
        }

        #[test]
        fn violation_is_zero_exactly_on_feasible_side(f in -1e3f64..1e3) {
            let ineq = violation_of(ConstraintSense::Inequality, f);
            prop_assert!(ineq >= 0.0);
            prop_assert_eq!(ineq == 0.0, f >= 0.0);
            let eq = violation_of(ConstraintSense::Equality, f);
            prop_assert_eq!(eq == 0.0, f == 0.0);
        }

        #[test]
        fn thermal_violation_matches_formula(p in -5.0f64..5.0, q in -5.0f64..5.0, s in 0.01f64..5.0) {
            let expect = ((p * p + q * q).sqrt() - s).max(0.0);
            prop_assert!((thermal_violation(p, q, s) - expect).abs() <= 1e-12);
        }

        #[test]
        fn objective_ignores_generator_order(perm_seed in 0u64..1000) {
            let case = crate::netmodel::parse_case(include_str!("../data/case30.m")).unwrap();
            let p: Vec<f64> = (0..case.n_generators()).map(|k| 0.1 * k as f64 + 0.05).collect();
            let base = objective(&case, &p);
            let mut doc = case.document().clone();
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.rotate_left((perm_seed as usize) % p.len());
            doc.generators = order.iter().map(|&k| case.generators()[k].clone()).collect();
            let permuted = NetworkCase::new(doc).unwrap();
            let pp: Vec<f64> = order.iter().map(|&k| p[k]).collect();
            prop_assert!((objective(&permuted, &pp) - base).abs() <= 1e-9 * base.abs());
        }
    }

    #[test]
    fn violation_examples() {
        assert_eq!(violation_of(ConstraintSense::Inequality, -2.0), 2.0);
        assert_eq!(violation_of(ConstraintSense::Inequality, 3.0), 0.0);
        assert_eq!(violation_of(ConstraintSense::Equality, -0.4), 0.4);
        assert_eq!(thermal_violation(0.3, 0.4, 1.0), 0.0);
        assert!((thermal_violation(3.0, 4.0, 1.0) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn objective_examples() {
        let case = two_bus(0.5, 0.1);
        let mut doc = case.document().clone();
        doc.generators[0].cost = crate::netmodel::CostCurve {
            c2: 0.0,
            c1: 10.0,
            c0: 5.0,
        };
        let case = NetworkCase::new(doc.clone()).unwrap();
        assert_eq!(objective(&case, &[2.0]), 25.0);
        doc.generators[0].cost.c0 = 0.0;
        let case = NetworkCase::new(doc).unwrap();
        assert_eq!(objective(&case, &[0.0]), 0.0);
    }

    #[test]
    fn isolated_bus_without_injections_balances() {
        let case = toy6();
        let loads = LoadProfile {
            p_d: vec![0.0; 6],
            q_d: vec![0.0; 6],
        };
        let sol = OpfSolution::new(vec![1.0; 6], vec![0.0; 6], vec![0.0], vec![0.0]).with_flows(&case);
        let (dp, dq) = balance_residual(&case, &loads, &sol, None).unwrap();
        assert!(dp.iter().chain(&dq).all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn three_bus_hand_computed_residual() {
        // Line 1-2: b = -10, line 2-3: b = -5, lossless; v = 1; theta = (0, -0.1, -0.2).
        let text = r#"{"base_mva":100,"reference_bus":1,
            "buses":[{"id":1,"v_min":0.9,"v_max":1.1},{"id":2,"v_min":0.9,"v_max":1.1},{"id":3,"v_min":0.9,"v_max":1.1}],
            "branches":[{"from_bus":1,"to_bus":2,"g":0,"b":-10,"s_max":5},{"from_bus":2,"to_bus":3,"g":0,"b":-5,"s_max":5}],
            "generators":[{"bus":1,"p_min":0,"p_max":5,"q_min":-5,"q_max":5,"cost":{"c2":0,"c1":1,"c0":0}}],
            "loads":[{"bus":3,"p_nom":0.4,"q_nom":0.0}]}"#;
        let case = crate::netmodel::parse_case(text).unwrap();
        let loads = LoadProfile::nominal(&case);
        let sol = OpfSolution::new(vec![1.0; 3], vec![0.0, -0.1, -0.2], vec![1.0], vec![0.0])
            .with_flows(&case);
        let (dp, dq) = balance_residual(&case, &loads, &sol, None).unwrap();
        let s = 0.1f64.sin();
        let c = 1.0 - 0.1f64.cos();
        // bus 1: 1.0 - 10 sin(0.1); bus 2: 10 sin(0.1) - 5 sin(0.1); bus 3: -0.4 + 5 sin(0.1)
        let expect_p = [1.0 - 10.0 * s, 5.0 * s, -0.4 + 5.0 * s];
        let expect_q = [-10.0 * c, -15.0 * c, -5.0 * c];
        for i in 0..3 {
            assert!((dp[i] - expect_p[i]).abs() < 1e-14, "p {i}");
            assert!((dq[i] - expect_q[i]).abs() < 1e-14, "q {i}");
        }
        // Overriding the flow on arc 2->3 replaces its term in bus 2's balance.
        let cf = CouplingFlows {
            arcs: vec![2],
            p: vec![0.0],
            q: vec![0.0],
        };
        let (dp2, _) = balance_residual(&case, &loads, &sol, Some(&cf)).unwrap();
        assert!((dp2[1] - 10.0 * s).abs() < 1e-14);
    }

    #[test]
    fn balance_requires_flows() {
        let case = toy6();
        let sol = OpfSolution::flat_start(&case);
        assert!(balance_residual(&case, &LoadProfile::nominal(&case), &sol, None).is_err());
    }

    #[test]
    fn single_bound_violations_are_isolated() {
        let case = toy6();
        let loads = LoadProfile::nominal(&case);
        let mut sol = OpfSolution::flat_start(&case);
        sol.v[2] = case.buses()[2].v_max + 0.01;
        sol.p_g[0] = case.generators()[0].p_max + 0.5;
        let viol = all_violations(&case, &loads, &sol);
        let nonzero: Vec<_> = viol.v_bound.iter().filter(|&&x| x > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert!((viol.v_bound[2] - 0.01).abs() < 1e-12);
        assert!((viol.p_bound[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn solution_file_round_trip_and_guard() {
        let case = toy6();
        let sol = OpfSolution::flat_start(&case);
        let file = SolutionFile::from_solution(&case, &sol);
        let json = serde_json::to_string(&file).unwrap();
        let back: SolutionFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.clone().into_solution(&case).unwrap(), sol);
        let other = two_bus(0.5, 0.1);
        assert!(back.into_solution(&other).is_err());
    }
}
