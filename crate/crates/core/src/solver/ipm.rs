//! Primal-dual interior point with slack variables, in the style of MIPS.
//!
//! Each iteration takes a Newton step on the perturbed KKT conditions of
//! `min f(x) s.t. g(x) = 0, h(x) + z = 0, z > 0`, limits it by
//! fraction-to-boundary on `z` and `mu`, and then backtracks until the primal
//! residual `max(|g|, |h + z|)` has not grown (above the feasibility
//! tolerance).

use super::linsys::SparseSystem;
use super::nlp::Nlp;

const XI: f64 = 0.99995;
const MAX_BACKTRACK: usize = 40;
const MAX_CORRECTIONS: usize = 3;
const BOUND_PUSH: f64 = 1e-2;

#[derive(Debug, Clone, Copy)]
pub(crate) struct IpmParams {
    pub tol_feas: f64,
    pub tol_opt: f64,
    pub max_iter: usize,
    pub gamma0: f64,
    pub sigma: f64,
    /// Initial slack floor.
    pub z0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Exit {
    Converged,
    IterationLimit,
    Stalled,
}

pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub exit: Exit,
    pub iterations: usize,
    /// Primal residual of every accepted iterate.
    #[cfg_attr(not(test), allow(dead_code))]
    pub residuals: Vec<f64>,
    /// Objective values of all iterates that were feasible to `tol_feas`.
    #[cfg_attr(not(test), allow(dead_code))]
    pub feasible_objectives: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Primal residual of the slack formulation, `max(|g|, |h + z|)`. This is
/// what the Newton step reduces to first order, so it is the quantity kept
/// monotone; certification uses the shared violation evaluator instead.
fn residual(nlp: &Nlp, x: &[f64], z: &[f64]) -> f64 {
    let g = nlp.balance(x);
    let h = nlp.inequalities(x);
    h.iter().zip(z).map(|(h, z)| (h + z).abs()).fold(inf_norm(&g), f64::max)
}

// The linear slack update drifts from -h(x) at second order along a curved
// step, which alone can force tiny steps once the iterate is feasible. Snap a
// slack to -h(x) whenever that keeps it within a factor of two of the linear
// update, so positivity and the fraction-to-boundary margin survive.
fn reset_slacks(nlp: &Nlp, x: &[f64], z_lin: &[f64]) -> Vec<f64> {
    let h = nlp.inequalities(x);
    h.iter()
        .zip(z_lin)
        .map(|(h, &z)| if -h >= 0.5 * z && -h <= 2.0 * z { -h } else { z })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn run(nlp: &Nlp, x0: Vec<f64>, p: &IpmParams) -> Outcome {
    let nx = nlp.n_free();
    let neq = nlp.n_eq();
    let niq = nlp.n_ineq();
    let mut x = x0;
    nlp.push_interior(&mut x, BOUND_PUSH);
    let mut ev = nlp.eval(&x);

    let mut gamma = p.gamma0;
    let mut lam = vec![0.0; neq];
    // Slacks consistent with the (pushed) start, so linear bound rows keep
    // h + z = 0 and iterates never leave the variable bounds.
    let mut z: Vec<f64> = ev.h.iter().map(|&h| if h < 0.0 { -h } else { p.z0 }).collect();
    let mut mu: Vec<f64> = z.iter().map(|&z| gamma / z).collect();

    let system = match SparseSystem::new(nx + neq, &nlp.kkt_pattern(&ev)) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("interior point: {e}");
            let residuals = vec![residual(nlp, &x, &z)];
            return Outcome { x, exit: Exit::Stalled, iterations: 0, residuals, feasible_objectives: vec![] };
        }
    };

    let mut phi = nlp.violation(&x);
    let mut res = residual(nlp, &x, &z);
    let mut residuals = vec![res];
    let mut feasible_objectives = Vec::new();
    let mut best_feasible: Option<(f64, Vec<f64>)> = None;
    if phi <= p.tol_feas {
        feasible_objectives.push(ev.f);
        best_feasible = Some((ev.f, x.clone()));
    }
    let mut f_prev = ev.f;
    let mut best = (phi, x.clone());
    let mut exit = Exit::IterationLimit;
    let mut iterations = 0;
    let mut alpha_prev = 0.0;

    for it in 0..=p.max_iter {
        // Stationarity of the Lagrangian.
        let mut lx = ev.grad_f.clone();
        for &(r, c, v) in &ev.jg {
            lx[c] += lam[r] * v;
        }
        for &(r, c, v) in &ev.jh {
            lx[c] += mu[r] * v;
        }
        let gradcond = inf_norm(&lx) / (1.0 + inf_norm(&lam).max(inf_norm(&mu)));
        let compcond = if niq > 0 { dot(&z, &mu) / (1.0 + inf_norm(&x)) } else { 0.0 };
        let costcond = if it == 0 { f64::INFINITY } else { (ev.f - f_prev).abs() / (1.0 + f_prev.abs()) };
        log::trace!("ipm {it} step {alpha_prev:.2e}: viol {phi:.3e} grad {gradcond:.3e} comp {compcond:.3e} cost {costcond:.3e}");
        if phi <= p.tol_feas && gradcond <= p.tol_opt && compcond <= p.tol_opt && costcond <= p.tol_opt {
            exit = Exit::Converged;
            break;
        }
        if it == p.max_iter {
            break;
        }
        iterations = it + 1;

        // Reduced Newton system.
        let mut rhs = vec![0.0; nx + neq];
        for c in 0..nx {
            rhs[c] = -lx[c];
        }
        for &(r, c, v) in &ev.jh {
            rhs[c] -= v * (mu[r] * ev.h[r] + gamma) / z[r];
        }
        for r in 0..neq {
            rhs[nx + r] = -ev.g[r];
        }
        let vals = nlp.kkt_values(&x, &ev, &lam, &mu, &z);
        let factor = system.factor(&vals);
        if let Err(e) = factor.solve(&mut rhs) {
            log::debug!("interior point stopped at iteration {it}: {e}");
            exit = Exit::Stalled;
            break;
        }
        let dx = &rhs[..nx];
        let dlam = &rhs[nx..];
        let mut jh_dx = vec![0.0; niq];
        for &(r, c, v) in &ev.jh {
            jh_dx[r] += v * dx[c];
        }
        let dz: Vec<f64> = (0..niq).map(|r| -ev.h[r] - z[r] - jh_dx[r]).collect();
        let dmu: Vec<f64> = (0..niq).map(|r| -mu[r] + (gamma - mu[r] * dz[r]) / z[r]).collect();

        let ratio = |v: &[f64], dv: &[f64]| {
            v.iter()
                .zip(dv)
                .filter(|(_, d)| **d < 0.0)
                .fold(1.0f64, |m, (v, d)| m.min(XI * (-v / d)))
        };
        let mut alpha_p = ratio(&z, &dz);
        let mut alpha_d = ratio(&mu, &dmu);

        // Backtrack until the primal residual has not grown (above the
        // tolerance). Each trial point first gets up to MAX_CORRECTIONS
        // second-order corrections that re-solve the linearized balance at
        // the trial point with the same factorization.
        let mut accepted = None;
        'search: for _ in 0..MAX_BACKTRACK {
            let mut xn: Vec<f64> = x.iter().zip(dx).map(|(a, d)| a + alpha_p * d).collect();
            let z_lin: Vec<f64> = z.iter().zip(&dz).map(|(a, d)| a + alpha_p * d).collect();
            for k in 0..=MAX_CORRECTIONS {
                let zn = reset_slacks(nlp, &xn, &z_lin);
                let res_new = residual(nlp, &xn, &zn);
                if res_new.is_finite() && res_new <= res.max(p.tol_feas) {
                    accepted = Some((xn, zn, res_new));
                    break 'search;
                }
                if k == MAX_CORRECTIONS || !res_new.is_finite() {
                    break;
                }
                let mut corr = vec![0.0; nx + neq];
                let gn = nlp.balance(&xn);
                for r in 0..neq {
                    corr[nx + r] = -gn[r];
                }
                if factor.solve(&mut corr).is_err() {
                    break;
                }
                for c in 0..nx {
                    xn[c] += corr[c];
                }
            }
            alpha_p *= 0.5;
            alpha_d *= 0.5;
        }
        let Some((xn, zn, res_new)) = accepted else {
            log::debug!("interior point stalled at iteration {it}: no step keeps the residual from growing");
            exit = Exit::Stalled;
            break;
        };
        debug_assert!(res_new <= res.max(p.tol_feas));
        res = res_new;
        residuals.push(res);

        x = xn;
        z = zn;
        alpha_prev = alpha_p;
        for r in 0..niq {
            mu[r] += alpha_d * dmu[r];
        }
        for r in 0..neq {
            lam[r] += alpha_d * dlam[r];
        }
        if niq > 0 {
            gamma = p.sigma * dot(&z, &mu) / niq as f64;
        }
        f_prev = ev.f;
        ev = nlp.eval(&x);
        phi = nlp.violation(&x);
        if phi <= p.tol_feas {
            feasible_objectives.push(ev.f);
            if best_feasible.as_ref().is_none_or(|(f, _)| ev.f < *f) {
                best_feasible = Some((ev.f, x.clone()));
            }
        }
        if phi < best.0 {
            best = (phi, x.clone());
        }
        if !ev.f.is_finite() {
            exit = Exit::Stalled;
            break;
        }
    }

    if exit == Exit::Converged {
        // Never hand back a point worse than a feasible one already visited.
        if let Some((_, xb)) = best_feasible {
            x = xb;
        }
    } else if best.0 < phi {
        x = best.1;
    }
    Outcome {
        x,
        exit,
        iterations,
        residuals,
        feasible_objectives,
    }
}
