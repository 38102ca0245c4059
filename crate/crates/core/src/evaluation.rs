//! Test-split metrics: pooled prediction errors, bound satisfaction, active
//! balance violations, objective gaps and timings, with report writers.
//!
//! Quantiles interpolate linearly between order statistics (inclusive
//! definition) over the pooled (sample x element) errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acopf::{objective, LoadProfile, OpfSolution};
use crate::datagen::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::netmodel::NetworkCase;
use crate::solver::{objective_gap, solve_acopf, solve_loadflow, SolveOptions, SolveReport};
use crate::training::OpfPrediction;

pub const QUANTILE_METHOD: &str = "linear interpolation between order statistics (inclusive)";
pub const POOLING: &str = "pooled over samples and elements";
/// A generator counts as sitting at a bound within this many p.u.
pub const AT_BOUND_TOL: f64 = 1e-5;

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("quantile of an empty pool".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile level {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub avg: f64,
    pub median: f64,
    pub q95: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Result<Self> {
        Ok(Stats {
            avg: values.iter().sum::<f64>() / values.len().max(1) as f64,
            median: quantile(values, 0.5)?,
            q95: quantile(values, 0.95)?,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFamily {
    /// Voltage magnitude, p.u.
    V,
    /// Active dispatch, MW.
    Pg,
    /// Active arc flow, MW.
    Pf,
}

impl ErrorFamily {
    pub fn name(self) -> &'static str {
        match self {
            ErrorFamily::V => "v",
            ErrorFamily::Pg => "p_g",
            ErrorFamily::Pf => "p_f",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            ErrorFamily::V => "p.u.",
            _ => "MW",
        }
    }

    fn scale(self, base_mva: f64) -> f64 {
        match self {
            ErrorFamily::V => 1.0,
            _ => base_mva,
        }
    }
}

/// Pooled absolute errors in family units. Element positions in `exclude`
/// are left out.
pub fn error_stats(
    preds: &[Vec<f64>],
    truths: &[Vec<f64>],
    family: ErrorFamily,
    base_mva: f64,
    exclude: &[usize],
) -> Result<Stats> {
    if preds.len() != truths.len() {
        return Err(Error::Dimension(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    let skip: BTreeSet<usize> = exclude.iter().copied().collect();
    let scale = family.scale(base_mva);
    let mut pool = Vec::new();
    for (p, t) in preds.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(Error::Dimension("prediction and truth lengths differ".into()));
        }
        pool.extend(
            p.iter()
                .zip(t)
                .enumerate()
                .filter(|(i, _)| !skip.contains(i))
                .map(|(_, (a, b))| (a - b).abs() * scale),
        );
    }
    if pool.is_empty() {
        return Err(Error::InvalidArgument(format!("no {} errors to pool", family.name())));
    }
    Stats::of(&pool)
}

/// Generators whose dispatch sits at the same bound in every given sample.
pub fn constant_at_bound_generators<'a>(case: &NetworkCase, samples: impl IntoIterator<Item = &'a Sample>) -> Vec<usize> {
    let gens = case.generators();
    let mut state: Vec<Option<Option<bool>>> = vec![None; gens.len()];
    for s in samples {
        for (g, (gen, &p)) in gens.iter().zip(&s.solution.p_g).enumerate() {
            let here = if (p - gen.p_min).abs() <= AT_BOUND_TOL {
                Some(false)
            } else if (p - gen.p_max).abs() <= AT_BOUND_TOL {
                Some(true)
            } else {
                None
            };
            state[g] = match state[g] {
                None => Some(here),
                Some(prev) if prev == here => Some(prev),
                Some(_) => Some(None),
            };
        }
    }
    state
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Some(Some(_))))
        .map(|(g, _)| g)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Dispatch bound violation allowed, MW.
    pub p_g_mw: f64,
    /// Dispatch bound violation allowed as a fraction of the generator range.
    pub p_g_range_fraction: f64,
    /// Voltage bound violation allowed, p.u.
    pub v_pu: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { p_g_mw: 1.0, p_g_range_fraction: 0.01, v_pu: 1e-4 }
    }
}

impl Thresholds {
    pub fn check(&self) -> Result<()> {
        if [self.p_g_mw, self.p_g_range_fraction, self.v_pu].iter().all(|t| *t > 0.0 && t.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("thresholds must be positive, got {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationStats {
    /// Percent of dispatch bound instances violated by less than the MW threshold.
    pub p_g_within_mw_pct: f64,
    /// Percent of dispatch bound instances violated by less than the range fraction.
    pub p_g_within_range_pct: f64,
    /// Percent of voltage bound instances violated by less than the p.u. threshold.
    pub v_within_pct: f64,
    /// Per-bus active balance violation, MW.
    pub p_balance_mw: Stats,
    /// Mean active load per bus, MW, for scale.
    pub mean_bus_load_mw: f64,
}

pub fn violation_stats(
    case: &NetworkCase,
    preds: &[OpfPrediction],
    loads: &[LoadProfile],
    thresholds: &Thresholds,
) -> Result<ViolationStats> {
    thresholds.check()?;
    if preds.len() != loads.len() || preds.is_empty() {
        return Err(Error::Dimension(format!("{} predictions for {} load profiles", preds.len(), loads.len())));
    }
    let base = case.base_mva();
    let gens = case.generators();
    let (mut pg_mw, mut pg_rng, mut v_ok) = (0usize, 0usize, 0usize);
    let mut balance = Vec::new();
    let mut load = 0.0;
    for (pred, l) in preds.iter().zip(loads) {
        let vv = pred.violations(case, l);
        for (g, &x) in vv.p_bound.iter().enumerate() {
            pg_mw += usize::from(x * base < thresholds.p_g_mw);
            pg_rng += usize::from(x <= thresholds.p_g_range_fraction * (gens[g].p_max - gens[g].p_min));
        }
        v_ok += vv.v_bound.iter().filter(|&&x| x < thresholds.v_pu).count();
        balance.extend(vv.p_balance.iter().map(|x| x * base));
        load += l.p_d.iter().sum::<f64>() * base;
    }
    let n = preds.len() as f64;
    let pct = |k: usize, per: usize| 100.0 * k as f64 / (per as f64 * n);
    Ok(ViolationStats {
        p_g_within_mw_pct: pct(pg_mw, case.n_generators()),
        p_g_within_range_pct: pct(pg_rng, case.n_generators()),
        v_within_pct: pct(v_ok, case.n_buses()),
        p_balance_mw: Stats::of(&balance)?,
        mean_bus_load_mw: load / (n * case.n_buses() as f64),
    })
}

/// Outcome of restoring predictions with the load-flow projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadflowStats {
    pub converged_pct: f64,
    /// Objective gap to the AC-OPF optimum over converged instances, percent.
    pub objective_gap_pct: Stats,
    pub loadflow_time_s: Stats,
    pub acopf_time_s: Stats,
}

/// Restores each test prediction with the load-flow projection and re-solves
/// the AC-OPF cold for a timing reference. Gaps are taken against the
/// dataset's optimal objective and pooled over converged restorations.
pub fn loadflow_stats(
    case: &NetworkCase,
    dataset: &Dataset,
    preds: &[OpfPrediction],
    options: &SolveOptions,
) -> Result<(LoadflowStats, Vec<(OpfSolution, SolveReport)>)> {
    let test: Vec<&Sample> = dataset.test().collect();
    if test.len() != preds.len() || test.is_empty() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} test samples",
            preds.len(),
            test.len()
        )));
    }
    let mut gaps = Vec::new();
    let mut lf_time = Vec::new();
    let mut ac_time = Vec::new();
    let mut restored = Vec::new();
    for (s, pred) in test.iter().zip(preds) {
        let (sol, rep) = solve_loadflow(case, &s.loads, &pred.to_solution(case), options)?;
        lf_time.push(rep.wall_time.as_secs_f64());
        if rep.converged() {
            gaps.push(objective_gap(objective(case, &sol.p_g), s.report.objective)?);
        }
        let (_, cold) = solve_acopf(case, &s.loads, options)?;
        ac_time.push(cold.wall_time.as_secs_f64());
        restored.push((sol, rep));
    }
    let stats = LoadflowStats {
        converged_pct: 100.0 * gaps.len() as f64 / test.len() as f64,
        objective_gap_pct: if gaps.is_empty() {
            Stats { avg: f64::NAN, median: f64::NAN, q95: f64::NAN, count: 0 }
        } else {
            Stats::of(&gaps)?
        },
        loadflow_time_s: Stats::of(&lf_time)?,
        acopf_time_s: Stats::of(&ac_time)?,
    };
    Ok((stats, restored))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub case_hash: String,
    pub dataset_hash: String,
    pub quantile_method: String,
    pub pooling: String,
    pub test_samples: usize,
    /// Generators left out of the dispatch errors (same bound in every
    /// training sample).
    pub excluded_generators: Vec<usize>,
    pub v: Stats,
    pub p_g: Stats,
    pub p_f: Stats,
    pub violations: ViolationStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loadflow: Option<LoadflowStats>,
}

/// One metric family of a report, as written to CSV and markdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub unit: String,
    pub avg: f64,
    pub median: Option<f64>,
    pub q95: Option<f64>,
    pub count: Option<usize>,
}

fn stat_row(metric: &str, unit: &str, s: &Stats) -> ReportRow {
    ReportRow {
        metric: metric.into(),
        unit: unit.into(),
        avg: s.avg,
        median: Some(s.median),
        q95: Some(s.q95),
        count: Some(s.count),
    }
}

fn value_row(metric: &str, unit: &str, v: f64) -> ReportRow {
    ReportRow { metric: metric.into(), unit: unit.into(), avg: v, median: None, q95: None, count: None }
}

impl MetricReport {
    /// Rows in fixed order: errors, satisfaction, balance, then load flow.
    pub fn rows(&self) -> Vec<ReportRow> {
        let vs = &self.violations;
        let mut rows = vec![
            stat_row("error_v", ErrorFamily::V.unit(), &self.v),
            stat_row("error_p_g", ErrorFamily::Pg.unit(), &self.p_g),
            stat_row("error_p_f", ErrorFamily::Pf.unit(), &self.p_f),
            value_row("p_g_bound_within_mw", "%", vs.p_g_within_mw_pct),
            value_row("p_g_bound_within_range", "%", vs.p_g_within_range_pct),
            value_row("v_bound_within_pu", "%", vs.v_within_pct),
            stat_row("p_balance_violation", "MW", &vs.p_balance_mw),
            value_row("mean_bus_load", "MW", vs.mean_bus_load_mw),
        ];
        if let Some(lf) = &self.loadflow {
            rows.push(value_row("loadflow_converged", "%", lf.converged_pct));
            rows.push(stat_row("objective_gap", "%", &lf.objective_gap_pct));
            rows.push(stat_row("loadflow_time", "s", &lf.loadflow_time_s));
            rows.push(stat_row("acopf_time", "s", &lf.acopf_time_s));
        }
        rows
    }
}

/// Metrics of `preds` (aligned with the dataset's test split).
pub fn evaluate(
    case: &NetworkCase,
    dataset: &Dataset,
    preds: &[OpfPrediction],
    model: &str,
    thresholds: &Thresholds,
) -> Result<MetricReport> {
    dataset.check_compatible(case, None)?;
    let test: Vec<&Sample> = dataset.test().collect();
    if test.len() != preds.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} test samples",
            preds.len(),
            test.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::InvalidArgument("the test split is empty".into()));
    }
    let excluded = constant_at_bound_generators(case, dataset.train());
    let base = case.base_mva();
    let truth_flows: Vec<Vec<f64>> = test
        .iter()
        .map(|s| s.solution.clone().with_flows(case).p_f.expect("flows attached"))
        .collect();
    let pick = |f: fn(&OpfPrediction) -> &Vec<f64>| preds.iter().map(|p| f(p).clone()).collect::<Vec<_>>();
    let v = error_stats(
        &pick(|p| &p.v),
        &test.iter().map(|s| s.solution.v.clone()).collect::<Vec<_>>(),
        ErrorFamily::V,
        base,
        &[],
    )?;
    let p_g = error_stats(
        &pick(|p| &p.p_g),
        &test.iter().map(|s| s.solution.p_g.clone()).collect::<Vec<_>>(),
        ErrorFamily::Pg,
        base,
        &excluded,
    )?;
    let p_f = error_stats(&pick(|p| &p.p_f), &truth_flows, ErrorFamily::Pf, base, &[])?;
    let loads: Vec<LoadProfile> = test.iter().map(|s| s.loads.clone()).collect();
    let violations = violation_stats(case, preds, &loads, thresholds)?;
    Ok(MetricReport {
        model: model.into(),
        case_hash: dataset.manifest.case_hash.clone(),
        dataset_hash: dataset.manifest.samples_sha256.clone(),
        quantile_method: QUANTILE_METHOD.into(),
        pooling: POOLING.into(),
        test_samples: test.len(),
        excluded_generators: excluded,
        v,
        p_g,
        p_f,
        violations,
        loadflow: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub unit: String,
    pub direct: f64,
    pub decomposed: f64,
    /// `decomposed - direct`.
    pub delta: f64,
    /// `direct / decomposed`.
    pub ratio: f64,
    /// Set when the decomposed model is not better on this metric.
    pub decomposed_not_better: bool,
}

/// Side-by-side averages of the direct (O) and decomposed (D) reports.
pub fn compare_models(direct: &MetricReport, decomposed: &MetricReport) -> Result<Vec<ComparisonRow>> {
    if direct.case_hash != decomposed.case_hash || direct.dataset_hash != decomposed.dataset_hash {
        return Err(Error::Integrity("reports were computed on different cases or datasets".into()));
    }
    let higher_is_better = |m: &str| m.ends_with("_within_mw") || m.ends_with("_within_range") || m.ends_with("_within_pu") || m == "loadflow_converged";
    Ok(direct
        .rows()
        .into_iter()
        .zip(decomposed.rows())
        .filter(|(a, b)| a.metric == b.metric && a.metric != "mean_bus_load")
        .map(|(a, b)| {
            let not_better = if higher_is_better(&a.metric) { b.avg <= a.avg } else { b.avg >= a.avg };
            ComparisonRow {
                delta: b.avg - a.avg,
                ratio: a.avg / b.avg,
                decomposed_not_better: not_better && a.avg != b.avg,
                direct: a.avg,
                decomposed: b.avg,
                unit: a.unit,
                metric: a.metric,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Markdown rendering: one table row per metric family.
pub fn report_markdown(report: &MetricReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "## {} ({} test samples)\n", report.model, report.test_samples);
    let _ = writeln!(s, "| metric | unit | avg | median | q95 | count |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for r in report.rows() {
        let _ = writeln!(
            s,
            "| {} | {} | {:.6} | {} | {} | {} |",
            r.metric,
            r.unit,
            r.avg,
            opt(r.median),
            opt(r.q95),
            r.count.map(|c| c.to_string()).unwrap_or_default()
        );
    }
    let _ = writeln!(s, "\nQuantiles: {}, {}.", report.quantile_method, report.pooling);
    s
}

/// Writes a report. CSV columns: metric, unit, avg, median, q95, count.
pub fn emit_report(report: &MetricReport, format: ReportFormat, path: &Path) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => {
            let mut b = serde_json::to_vec_pretty(report)?;
            b.push(b'\n');
            b
        }
        ReportFormat::Markdown => report_markdown(report).into_bytes(),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in report.rows() {
                w.serialize(r)?;
            }
            w.into_inner().map_err(|e| Error::io(path, e.into_error()))?
        }
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpedPrediction {
    /// Index of the sample in the dataset.
    pub sample: usize,
    pub prediction: OpfPrediction,
}

pub fn write_predictions(path: &Path, preds: &[DumpedPrediction]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<DumpedPrediction>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
