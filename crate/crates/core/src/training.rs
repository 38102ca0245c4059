//! Lagrangian dual training of the direct model, the coupling (first-stage)
//! model and the regional (second-stage) models, and assembly of their
//! outputs into a full operating-point prediction.
//!
//! All three share one loop: `epochs_w` passes of mini-batch Adam on
//! `L0 + sum_c lambda_c nu_c`, then `lambda += rho * nu_bar` with `nu_bar`
//! measured on the fitting set, repeated `epochs_lambda` times. Each
//! constraint instance carries its own multiplier.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acopf::{
    arc_flows, bound_violation, branch_flow, branch_flow_grad, violations_from_parts, ConstraintId, ConstraintKind,
    LoadProfile, OpfSolution, ViolationVector,
};
use crate::datagen::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::netmodel::{NetworkCase, UNLIMITED_S_MAX};
use crate::neural::{Dims, LrSchedule, ModelFile, Network, OptimState, Standardizer};
use crate::partition::Partition;

/// Share of the training split held out for checkpoint selection.
pub const HOLDOUT_FRACTION: f64 = 0.1;
/// Hidden width used when the sizing rule gives less (regions without loads).
pub const MIN_HIDDEN: usize = 8;
/// Smallest output scale; targets that barely vary are reproduced to about
/// this precision from the start.
pub const OUTPUT_SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    #[default]
    L1,
    SquaredL2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_lambda: usize,
    pub epochs_w: usize,
    pub batch_size: usize,
    pub rho: f64,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Seconds per training call. Each lambda-epoch then gets an equal time
    /// slice and `epochs_w` no longer bounds it.
    pub wall_clock_budget: Option<f64>,
    pub norm: LossNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_lambda: 10,
            epochs_w: 50,
            batch_size: 120,
            rho: 1e-3,
            lr: LrSchedule::default(),
            seed: 0,
            wall_clock_budget: None,
            norm: LossNorm::L1,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.epochs_lambda == 0 || self.epochs_w == 0 {
            return Err(Error::InvalidArgument("epoch counts must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be finite and nonnegative, got {}", self.rho)));
        }
        if let Some(b) = self.wall_clock_budget {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidArgument(format!("wall-clock budget must be positive, got {b}")));
            }
        }
        self.lr.check()
    }
}

/// Predicted variable family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    V,
    Dtheta,
    Pg,
    Qg,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::V, Family::Dtheta, Family::Pg, Family::Qg];

    pub fn name(self) -> &'static str {
        match self {
            Family::V => "v",
            Family::Dtheta => "dtheta",
            Family::Pg => "p_g",
            Family::Qg => "q_g",
        }
    }

    fn from_name(name: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Direct,
    Coupling,
    Regional(usize),
}

impl ModelKind {
    fn stage(self) -> &'static str {
        match self {
            ModelKind::Direct => "direct",
            ModelKind::Coupling => "stage1",
            ModelKind::Regional(_) => "stage2",
        }
    }

    fn region(self) -> Option<usize> {
        match self {
            ModelKind::Regional(k) => Some(k),
            _ => None,
        }
    }

    fn seed_tag(self) -> u64 {
        match self {
            ModelKind::Direct => 1,
            ModelKind::Coupling => 2,
            ModelKind::Regional(k) => 3 + k as u64,
        }
    }
}

/// One subnetwork and the bus, branch or generator positions it predicts.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub family: Family,
    pub index: Vec<usize>,
    pub net: Network,
}

/// A trained direct, coupling or regional model.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub kind: ModelKind,
    pub n_inputs: usize,
    pub heads: Vec<Head>,
    pub case_hash: String,
    pub partition_hash: Option<String>,
    pub dataset_hash: String,
}

impl Predictor {
    pub fn head(&self, family: Family) -> Option<&Head> {
        self.heads.iter().find(|h| h.family == family)
    }

    /// Raw outputs of every head for one feature vector.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.n_inputs {
            return Err(Error::Dimension(format!(
                "model takes {} features, got {}",
                self.n_inputs,
                x.len()
            )));
        }
        self.heads.iter().map(|h| h.net.predict(x)).collect()
    }

    pub fn to_model_file(&self) -> ModelFile {
        let mut meta = BTreeMap::new();
        meta.insert("stage".into(), self.kind.stage().into());
        if let Some(k) = self.kind.region() {
            meta.insert("region".into(), k.to_string());
        }
        meta.insert("case_hash".into(), self.case_hash.clone());
        if let Some(p) = &self.partition_hash {
            meta.insert("partition_hash".into(), p.clone());
        }
        meta.insert("dataset_hash".into(), self.dataset_hash.clone());
        meta.insert("n_inputs".into(), self.n_inputs.to_string());
        ModelFile {
            meta,
            subnets: self.heads.iter().map(|h| (h.family.name().to_string(), h.net.clone())).collect(),
        }
    }

    /// Rebuilds a model from its file, re-deriving the output index sets from
    /// the case and partition and checking that they match.
    pub fn from_model_file(file: &ModelFile, case: &NetworkCase, partition: Option<&Partition>) -> Result<Self> {
        let meta = |key: &str| {
            file.meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Integrity(format!("model file lacks `{key}`")))
        };
        let case_hash = meta("case_hash")?;
        if case_hash != case.content_hash() {
            return Err(Error::Integrity("model was trained on a different case".into()));
        }
        let kind = match meta("stage")?.as_str() {
            "direct" => ModelKind::Direct,
            "stage1" => ModelKind::Coupling,
            "stage2" => ModelKind::Regional(
                meta("region")?
                    .parse()
                    .map_err(|_| Error::Integrity("model region is not an integer".into()))?,
            ),
            other => return Err(Error::Integrity(format!("unknown model stage `{other}`"))),
        };
        let partition_hash = file.meta.get("partition_hash").cloned();
        let layout = match kind {
            ModelKind::Direct => direct_layout(case),
            _ => {
                let p = partition
                    .ok_or_else(|| Error::InvalidArgument("decomposed models need the partition".into()))?;
                if partition_hash.as_deref() != Some(p.assignment.content_hash().as_str()) {
                    return Err(Error::Integrity("model was trained on a different partition".into()));
                }
                match kind {
                    ModelKind::Coupling => coupling_layout(case, p)?,
                    ModelKind::Regional(k) => regional_layout(case, p, k)?,
                    ModelKind::Direct => unreachable!(),
                }
            }
        };
        if file.subnets.len() != layout.heads.len() {
            return Err(Error::Integrity("model subnets do not match the expected outputs".into()));
        }
        let mut heads = Vec::new();
        for ((name, net), (family, index, _)) in file.subnets.iter().zip(&layout.heads) {
            if Family::from_name(name) != Some(*family)
                || net.dims().n_out != index.len()
                || net.dims().n_in != layout.inputs
            {
                return Err(Error::Integrity(format!("subnet `{name}` does not match the expected layout")));
            }
            heads.push(Head { family: *family, index: index.clone(), net: net.clone() });
        }
        Ok(Predictor {
            kind,
            n_inputs: layout.inputs,
            heads,
            case_hash,
            partition_hash,
            dataset_hash: meta("dataset_hash")?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_model_file().write(path)
    }

    pub fn read(path: &Path, case: &NetworkCase, partition: Option<&Partition>) -> Result<Self> {
        Self::from_model_file(&ModelFile::read(path)?, case, partition)
    }
}

/// Inputs, outputs and constraint scope of a model kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub inputs: usize,
    /// (family, positions, hidden width) per head.
    pub heads: Vec<(Family, Vec<usize>, usize)>,
    pub constraints: Vec<ConstraintId>,
}

fn rated_arcs(case: &NetworkCase, edges: impl IntoIterator<Item = usize>) -> Vec<usize> {
    edges
        .into_iter()
        .filter(|&e| case.branches()[e].s_max < UNLIMITED_S_MAX)
        .flat_map(|e| [2 * e, 2 * e + 1])
        .collect()
}

fn ids(kind: ConstraintKind, index: impl IntoIterator<Item = usize>) -> impl Iterator<Item = ConstraintId> {
    index.into_iter().map(move |index| ConstraintId { kind, index })
}

/// Monolithic model: all loads to every variable, all constraints.
pub fn direct_layout(case: &NetworkCase) -> Layout {
    let hidden = (3 * case.loads().len()).max(MIN_HIDDEN);
    let n = case.n_buses();
    let ng = case.n_generators();
    let heads = vec![
        (Family::V, (0..n).collect(), hidden),
        (Family::Dtheta, (0..case.n_branches()).collect(), hidden),
        (Family::Pg, (0..ng).collect(), hidden),
        (Family::Qg, (0..ng).collect(), hidden),
    ];
    let constraints = ids(ConstraintKind::VBound, 0..n)
        .chain(ids(ConstraintKind::PBound, 0..ng))
        .chain(ids(ConstraintKind::QBound, 0..ng))
        .chain(ids(ConstraintKind::Thermal, rated_arcs(case, 0..case.n_branches())))
        .chain(ids(ConstraintKind::PBalance, 0..n))
        .chain(ids(ConstraintKind::QBalance, 0..n))
        .collect();
    Layout { inputs: 2 * case.loads().len(), heads, constraints }
}

/// First stage: all loads to coupling-bus voltages and coupling-line angle
/// differences; voltage bounds on the coupling buses and thermal limits on
/// the coupling lines.
pub fn coupling_layout(case: &NetworkCase, partition: &Partition) -> Result<Layout> {
    if partition.coupling_edges.is_empty() {
        return Err(Error::InvalidArgument(
            "the partition has no coupling lines, so there is no first stage to train".into(),
        ));
    }
    let nb = partition.coupling_buses.len();
    let ne = partition.coupling_edges.len();
    let heads = vec![
        (Family::V, partition.coupling_buses.clone(), nb),
        (Family::Dtheta, partition.coupling_edges.clone(), ne),
    ];
    let constraints = ids(ConstraintKind::VBound, partition.coupling_buses.iter().copied())
        .chain(ids(
            ConstraintKind::Thermal,
            rated_arcs(case, partition.coupling_edges.iter().copied()),
        ))
        .collect();
    Ok(Layout { inputs: 2 * case.loads().len(), heads, constraints })
}

/// Second stage for region `k`: regional loads, first-stage voltages at the
/// region's coupling buses and first-stage flows leaving the region, mapped
/// to interior voltages, internal angle differences and regional dispatch.
pub fn regional_layout(case: &NetworkCase, partition: &Partition, k: usize) -> Result<Layout> {
    if k >= partition.k() {
        return Err(Error::InvalidArgument(format!("region {k} does not exist")));
    }
    let loads = partition.region_loads[k].len();
    let inputs = 2 * loads + partition.region_coupling_buses[k].len() + 2 * partition.region_coupling_edges[k].len();
    if inputs == 0 {
        return Err(Error::InvalidArgument(format!("region {k} has no loads and no coupling features")));
    }
    let hidden = (3 * loads).max(MIN_HIDDEN);
    let interior = partition.region_interior_buses(k);
    let gens = &partition.region_generators[k];
    let heads = [
        (Family::V, interior.clone()),
        (Family::Dtheta, partition.internal_edges[k].clone()),
        (Family::Pg, gens.clone()),
        (Family::Qg, gens.clone()),
    ]
    .into_iter()
    .filter(|(_, idx)| !idx.is_empty())
    .map(|(f, idx)| (f, idx, hidden))
    .collect();
    let buses = &partition.region_buses[k];
    let constraints = ids(ConstraintKind::VBound, interior)
        .chain(ids(ConstraintKind::PBound, gens.iter().copied()))
        .chain(ids(ConstraintKind::QBound, gens.iter().copied()))
        .chain(ids(
            ConstraintKind::Thermal,
            rated_arcs(case, partition.internal_edges[k].iter().copied()),
        ))
        .chain(ids(ConstraintKind::PBalance, buses.iter().copied()))
        .chain(ids(ConstraintKind::QBalance, buses.iter().copied()))
        .collect();
    Ok(Layout { inputs, heads, constraints })
}

/// Active loads then reactive loads of the listed load positions.
pub fn load_features(case: &NetworkCase, loads: &LoadProfile, which: &[usize]) -> Vec<f64> {
    let (p, q) = loads.per_load(case);
    which.iter().map(|&l| p[l]).chain(which.iter().map(|&l| q[l])).collect()
}

/// First-stage output for one load profile, aligned with the partition's
/// coupling buses and lines. Flows hold both arcs of each coupling line in
/// arc order.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub v: Vec<f64>,
    pub dtheta: Vec<f64>,
    pub p_f: Vec<f64>,
    pub q_f: Vec<f64>,
}

impl Stage1Output {
    fn arc_flow(&self, partition: &Partition, arc: usize) -> (f64, f64) {
        let i = partition
            .coupling_edges
            .binary_search(&(arc / 2))
            .expect("arc of a coupling line");
        let j = 2 * i + arc % 2;
        (self.p_f[j], self.q_f[j])
    }

    fn bus_voltage(&self, partition: &Partition, bus: usize) -> f64 {
        self.v[partition.coupling_buses.binary_search(&bus).expect("coupling bus")]
    }
}

/// Coupling voltages and angle differences from the first-stage model, with
/// the coupling flows derived from them by the branch flow equations.
pub fn stage1_flows(model: &Predictor, case: &NetworkCase, partition: &Partition, loads: &LoadProfile) -> Result<Stage1Output> {
    if model.kind != ModelKind::Coupling {
        return Err(Error::InvalidArgument("not a first-stage model".into()));
    }
    let all: Vec<usize> = (0..case.loads().len()).collect();
    let out = model.predict(&load_features(case, loads, &all))?;
    let (v, dtheta) = (out[0].clone(), out[1].clone());
    let mut p_f = Vec::with_capacity(2 * dtheta.len());
    let mut q_f = Vec::with_capacity(2 * dtheta.len());
    for (i, &e) in partition.coupling_edges.iter().enumerate() {
        let (f, t) = case.branch_ends(e);
        let br = &case.branches()[e];
        let vf = v[partition.coupling_buses.binary_search(&f).expect("endpoint is a coupling bus")];
        let vt = v[partition.coupling_buses.binary_search(&t).expect("endpoint is a coupling bus")];
        for (vi, vj, d) in [(vf, vt, dtheta[i]), (vt, vf, -dtheta[i])] {
            let (p, q) = branch_flow(vi, vj, d, br.g, br.b);
            p_f.push(p);
            q_f.push(q);
        }
    }
    Ok(Stage1Output { v, dtheta, p_f, q_f })
}

/// Features of region `k` and the first-stage values it treats as fixed.
fn regional_inputs(
    case: &NetworkCase,
    partition: &Partition,
    k: usize,
    loads: &LoadProfile,
    s1: Option<&Stage1Output>,
) -> Result<(Vec<f64>, Vec<(usize, f64)>, Vec<(usize, f64, f64)>)> {
    let mut x = load_features(case, loads, &partition.region_loads[k]);
    let buses = &partition.region_coupling_buses[k];
    let arcs = partition.region_outgoing_arcs(case, k);
    if buses.is_empty() && arcs.is_empty() {
        return Ok((x, vec![], vec![]));
    }
    let s1 = s1.ok_or_else(|| Error::InvalidArgument("regional features need first-stage predictions".into()))?;
    let fixed_v: Vec<(usize, f64)> = buses.iter().map(|&b| (b, s1.bus_voltage(partition, b))).collect();
    let fixed_f: Vec<(usize, f64, f64)> = arcs
        .iter()
        .map(|&a| {
            let (p, q) = s1.arc_flow(partition, a);
            (a, p, q)
        })
        .collect();
    x.extend(fixed_v.iter().map(|b| b.1));
    x.extend(fixed_f.iter().map(|f| f.1));
    x.extend(fixed_f.iter().map(|f| f.2));
    Ok((x, fixed_v, fixed_f))
}

/// One training example: features, targets per head, and the physical
/// context the constraint terms need.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
    pub loads: LoadProfile,
    /// Voltages supplied by the first stage rather than predicted.
    pub fixed_v: Vec<(usize, f64)>,
    /// Arc flows supplied by the first stage: (arc, p, q).
    pub fixed_flows: Vec<(usize, f64, f64)>,
}

fn targets_for(case: &NetworkCase, layout: &Layout, sol: &OpfSolution) -> Vec<Vec<f64>> {
    let dtheta = sol.branch_dtheta(case);
    layout
        .heads
        .iter()
        .map(|(f, idx, _)| {
            idx.iter()
                .map(|&i| match f {
                    Family::V => sol.v[i],
                    Family::Dtheta => dtheta[i],
                    Family::Pg => sol.p_g[i],
                    Family::Qg => sol.q_g[i],
                })
                .collect()
        })
        .collect()
}

pub fn direct_examples<'a>(case: &NetworkCase, samples: impl IntoIterator<Item = &'a Sample>) -> Vec<Example> {
    let layout = direct_layout(case);
    let all: Vec<usize> = (0..case.loads().len()).collect();
    samples
        .into_iter()
        .map(|s| Example {
            x: load_features(case, &s.loads, &all),
            targets: targets_for(case, &layout, &s.solution),
            loads: s.loads.clone(),
            fixed_v: vec![],
            fixed_flows: vec![],
        })
        .collect()
}

pub fn coupling_examples<'a>(
    case: &NetworkCase,
    partition: &Partition,
    samples: impl IntoIterator<Item = &'a Sample>,
) -> Result<Vec<Example>> {
    let layout = coupling_layout(case, partition)?;
    let all: Vec<usize> = (0..case.loads().len()).collect();
    Ok(samples
        .into_iter()
        .map(|s| Example {
            x: load_features(case, &s.loads, &all),
            targets: targets_for(case, &layout, &s.solution),
            loads: s.loads.clone(),
            fixed_v: vec![],
            fixed_flows: vec![],
        })
        .collect())
}

/// Regional examples; `stage1[i]` is the first-stage output for `samples[i]`
/// (empty when the partition has a single region).
pub fn regional_examples(
    case: &NetworkCase,
    partition: &Partition,
    k: usize,
    samples: &[&Sample],
    stage1: &[Stage1Output],
) -> Result<Vec<Example>> {
    let layout = regional_layout(case, partition, k)?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (x, fixed_v, fixed_flows) = regional_inputs(case, partition, k, &s.loads, stage1.get(i))?;
            Ok(Example {
                x,
                targets: targets_for(case, &layout, &s.solution),
                loads: s.loads.clone(),
                fixed_v,
                fixed_flows,
            })
        })
        .collect()
}

/// Full-size operating point assembled from predicted and fixed parts.
/// Entries outside a model's scope keep neutral values and are never read by
/// its constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsPoint {
    pub v: Vec<f64>,
    pub dtheta: Vec<f64>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    pub fixed_flows: Vec<(usize, f64, f64)>,
}

impl PhysicsPoint {
    pub fn neutral(case: &NetworkCase) -> Self {
        PhysicsPoint {
            v: vec![1.0; case.n_buses()],
            dtheta: vec![0.0; case.n_branches()],
            p_g: vec![0.0; case.n_generators()],
            q_g: vec![0.0; case.n_generators()],
            fixed_flows: vec![],
        }
    }

    fn from_outputs(case: &NetworkCase, families: &[(Family, &[usize])], outputs: &[&[f64]], ex: &Example) -> Self {
        let mut pt = PhysicsPoint::neutral(case);
        for &(b, v) in &ex.fixed_v {
            pt.v[b] = v;
        }
        for ((family, idx), out) in families.iter().zip(outputs) {
            let dst = pt.family_mut(*family);
            for (&i, &y) in idx.iter().zip(*out) {
                dst[i] = y;
            }
        }
        pt.fixed_flows = ex.fixed_flows.clone();
        pt
    }

    fn family_mut(&mut self, f: Family) -> &mut [f64] {
        match f {
            Family::V => &mut self.v,
            Family::Dtheta => &mut self.dtheta,
            Family::Pg => &mut self.p_g,
            Family::Qg => &mut self.q_g,
        }
    }

    fn family(&self, f: Family) -> &[f64] {
        match f {
            Family::V => &self.v,
            Family::Dtheta => &self.dtheta,
            Family::Pg => &self.p_g,
            Family::Qg => &self.q_g,
        }
    }
}

fn zeroed_like(case: &NetworkCase) -> PhysicsPoint {
    PhysicsPoint {
        v: vec![0.0; case.n_buses()],
        dtheta: vec![0.0; case.n_branches()],
        p_g: vec![0.0; case.n_generators()],
        q_g: vec![0.0; case.n_generators()],
        fixed_flows: vec![],
    }
}

// Flow on `arc` with its gradient scattered into `grad` scaled by (cp, cq).
fn arc_flow_at(case: &NetworkCase, pt: &PhysicsPoint, arc: usize) -> (f64, f64) {
    let e = arc / 2;
    let (f, t) = case.branch_ends(e);
    let br = &case.branches()[e];
    if arc.is_multiple_of(2) {
        branch_flow(pt.v[f], pt.v[t], pt.dtheta[e], br.g, br.b)
    } else {
        branch_flow(pt.v[t], pt.v[f], -pt.dtheta[e], br.g, br.b)
    }
}

fn scatter_arc_grad(case: &NetworkCase, pt: &PhysicsPoint, arc: usize, cp: f64, cq: f64, grad: &mut PhysicsPoint) {
    let e = arc / 2;
    let (f, t) = case.branch_ends(e);
    let br = &case.branches()[e];
    let (i, j, d, sign) = if arc.is_multiple_of(2) { (f, t, pt.dtheta[e], 1.0) } else { (t, f, -pt.dtheta[e], -1.0) };
    let fg = branch_flow_grad(pt.v[i], pt.v[j], d, br.g, br.b);
    grad.v[i] += cp * fg.p[0] + cq * fg.q[0];
    grad.v[j] += cp * fg.p[1] + cq * fg.q[1];
    grad.dtheta[e] += sign * (cp * fg.p[2] + cq * fg.q[2]);
}

fn bound_grad(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        -1.0
    } else if x > hi {
        1.0
    } else {
        0.0
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Violations of the listed constraints at `pt`. With `weights`, the
/// gradient of `sum_c weights_c * violation_c` is added to `grad`.
fn evaluate_constraints(
    case: &NetworkCase,
    loads: &LoadProfile,
    pt: &PhysicsPoint,
    constraints: &[ConstraintId],
    mut weighted: Option<(&[f64], &mut PhysicsPoint)>,
) -> Vec<f64> {
    let fixed: BTreeMap<usize, (f64, f64)> = pt.fixed_flows.iter().map(|&(a, p, q)| (a, (p, q))).collect();
    let buses = case.buses();
    let gens = case.generators();
    let mut out = Vec::with_capacity(constraints.len());
    for (c, id) in constraints.iter().enumerate() {
        let i = id.index;
        let w = weighted.as_ref().map(|(w, _)| w[c]).unwrap_or(0.0);
        let viol = match id.kind {
            ConstraintKind::VBound => {
                let (x, lo, hi) = (pt.v[i], buses[i].v_min, buses[i].v_max);
                if let Some((_, g)) = weighted.as_mut() {
                    g.v[i] += w * bound_grad(x, lo, hi);
                }
                bound_violation(x, lo, hi)
            }
            ConstraintKind::PBound | ConstraintKind::QBound => {
                let active = id.kind == ConstraintKind::PBound;
                let (x, lo, hi) = if active {
                    (pt.p_g[i], gens[i].p_min, gens[i].p_max)
                } else {
                    (pt.q_g[i], gens[i].q_min, gens[i].q_max)
                };
                if let Some((_, g)) = weighted.as_mut() {
                    let d = w * bound_grad(x, lo, hi);
                    if active {
                        g.p_g[i] += d;
                    } else {
                        g.q_g[i] += d;
                    }
                }
                bound_violation(x, lo, hi)
            }
            ConstraintKind::Thermal => {
                let (p, q) = fixed.get(&i).copied().unwrap_or_else(|| arc_flow_at(case, pt, i));
                let s = p.hypot(q);
                let viol = (s - case.branches()[i / 2].s_max).max(0.0);
                if viol > 0.0 && !fixed.contains_key(&i) {
                    if let Some((_, g)) = weighted.as_mut() {
                        scatter_arc_grad(case, pt, i, w * p / s, w * q / s, g);
                    }
                }
                viol
            }
            ConstraintKind::PBalance | ConstraintKind::QBalance => {
                let active = id.kind == ConstraintKind::PBalance;
                let bus = &buses[i];
                let mut r = if active { -loads.p_d[i] - bus.shunt_p } else { -loads.q_d[i] - bus.shunt_q };
                for &g in case.generators_at(i) {
                    r += if active { pt.p_g[g] } else { pt.q_g[g] };
                }
                let mut computed = Vec::new();
                for &a in case.arcs_from(i) {
                    let (p, q) = match fixed.get(&a) {
                        Some(&f) => f,
                        None => {
                            computed.push(a);
                            arc_flow_at(case, pt, a)
                        }
                    };
                    r -= if active { p } else { q };
                }
                if let Some((_, g)) = weighted.as_mut() {
                    let s = w * sign(r);
                    if s != 0.0 {
                        for &gen in case.generators_at(i) {
                            if active {
                                g.p_g[gen] += s;
                            } else {
                                g.q_g[gen] += s;
                            }
                        }
                        for a in computed {
                            let (cp, cq) = if active { (-s, 0.0) } else { (0.0, -s) };
                            scatter_arc_grad(case, pt, a, cp, cq, g);
                        }
                    }
                }
                r.abs()
            }
        };
        out.push(viol);
    }
    out
}

/// Violations of `constraints` at an assembled point.
pub fn constraint_violations(
    case: &NetworkCase,
    loads: &LoadProfile,
    pt: &PhysicsPoint,
    constraints: &[ConstraintId],
) -> Vec<f64> {
    evaluate_constraints(case, loads, pt, constraints, None)
}

fn norm_term(norm: LossNorm, diff: f64) -> (f64, f64) {
    match norm {
        LossNorm::L1 => (diff.abs(), sign(diff)),
        LossNorm::SquaredL2 => (diff * diff, 2.0 * diff),
    }
}

/// Mean over samples of the summed per-variable error.
pub fn loss_l0(preds: &[Vec<f64>], truths: &[Vec<f64>], norm: LossNorm) -> Result<f64> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            preds.len(),
            truths.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(Error::Dimension(format!("prediction of length {} for target of length {}", p.len(), t.len())));
        }
        total += p.iter().zip(t).map(|(a, b)| norm_term(norm, a - b).0).sum::<f64>();
    }
    Ok(total / preds.len() as f64)
}

/// Multipliers, one per constraint instance in a model's scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualWeights {
    pub constraints: Vec<ConstraintId>,
    pub lambda: Vec<f64>,
    pub rho: f64,
}

impl DualWeights {
    pub fn zeros(constraints: Vec<ConstraintId>, rho: f64) -> Self {
        let lambda = vec![0.0; constraints.len()];
        DualWeights { constraints, lambda, rho }
    }

    /// `lambda_c += rho * nu_bar_c`, with `nu_bar` aligned to the constraints.
    pub fn update(&mut self, nu_bar: &[f64]) -> Result<()> {
        if nu_bar.len() != self.lambda.len() {
            return Err(Error::Dimension(format!(
                "{} mean violations for {} multipliers",
                nu_bar.len(),
                self.lambda.len()
            )));
        }
        if let Some(i) = nu_bar.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "mean violation {} of {:?} is not a finite nonnegative number",
                nu_bar[i], self.constraints[i]
            )));
        }
        for (l, v) in self.lambda.iter_mut().zip(nu_bar) {
            *l += self.rho * v;
        }
        Ok(())
    }
}

/// Dual ascent step reading `nu_bar` from a full violation vector.
pub fn dual_update(duals: &DualWeights, nu_bar: &ViolationVector) -> Result<DualWeights> {
    let nu: Vec<f64> = duals
        .constraints
        .iter()
        .map(|id| {
            nu_bar.of_kind(id.kind).get(id.index).copied().ok_or_else(|| {
                Error::Dimension(format!("violation vector has no entry for {id:?}"))
            })
        })
        .collect::<Result<_>>()?;
    let mut next = duals.clone();
    next.update(&nu)?;
    Ok(next)
}

/// `L0 + sum_c lambda_c nu_bar_c` for predictions with their assembled
/// points. `nu_bar` is the batch mean of each constraint's violation.
pub fn penalized_loss(
    preds: &[Vec<f64>],
    truths: &[Vec<f64>],
    case: &NetworkCase,
    loads: &[LoadProfile],
    points: &[PhysicsPoint],
    duals: &DualWeights,
    norm: LossNorm,
) -> Result<f64> {
    let l0 = loss_l0(preds, truths, norm)?;
    if points.len() != preds.len() || loads.len() != preds.len() {
        return Err(Error::Dimension("one point and load profile per prediction are required".into()));
    }
    let mut nu = vec![0.0; duals.constraints.len()];
    for (pt, l) in points.iter().zip(loads) {
        for (acc, v) in nu.iter_mut().zip(constraint_violations(case, l, pt, &duals.constraints)) {
            *acc += v;
        }
    }
    let b = points.len() as f64;
    Ok(l0 + duals.lambda.iter().zip(&nu).map(|(l, v)| l * v / b).sum::<f64>())
}

/// Loss, its parts and (optionally) parameter gradients over one batch.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: f64,
    pub l0: f64,
    /// Sum over the batch of each constraint's violation.
    pub violation_sums: Vec<f64>,
    pub grads: Option<Vec<Vec<f64>>>,
}

/// Penalized loss of `model` on a batch, with exact gradients with respect
/// to every head's parameters when `want_grad`.
pub fn batch_loss(
    case: &NetworkCase,
    model: &Predictor,
    batch: &[&Example],
    duals: &DualWeights,
    norm: LossNorm,
    want_grad: bool,
) -> Result<BatchEval> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut xs = Vec::with_capacity(model.n_inputs * b);
    for ex in batch {
        if ex.x.len() != model.n_inputs || ex.targets.len() != model.heads.len() {
            return Err(Error::Dimension("example does not match the model layout".into()));
        }
        xs.extend_from_slice(&ex.x);
    }
    let mut outs = Vec::with_capacity(model.heads.len());
    let mut caches = Vec::with_capacity(model.heads.len());
    for h in &model.heads {
        let (o, c) = h.net.forward_batch(&xs, b)?;
        outs.push(o);
        caches.push(c);
    }
    let families: Vec<(Family, &[usize])> = model.heads.iter().map(|h| (h.family, h.index.as_slice())).collect();
    let mut d_outs: Vec<Vec<f64>> = outs.iter().map(|o| vec![0.0; o.len()]).collect();
    let mut violation_sums = vec![0.0; duals.constraints.len()];
    let mut l0 = 0.0;
    let mut penalty = 0.0;
    let inv_b = 1.0 / b as f64;
    for (s, ex) in batch.iter().enumerate() {
        let sample_outs: Vec<&[f64]> = model
            .heads
            .iter()
            .zip(&outs)
            .map(|(h, o)| {
                let n = h.index.len();
                &o[s * n..(s + 1) * n]
            })
            .collect();
        for (h, (out, t)) in sample_outs.iter().zip(&ex.targets).enumerate() {
            let n = out.len();
            for (i, (y, t)) in out.iter().zip(t).enumerate() {
                let (v, d) = norm_term(norm, y - t);
                l0 += v;
                d_outs[h][s * n + i] += d * inv_b;
            }
        }
        let pt = PhysicsPoint::from_outputs(case, &families, &sample_outs, ex);
        let mut grad = zeroed_like(case);
        let weighted = want_grad.then_some((duals.lambda.as_slice(), &mut grad));
        let viol = evaluate_constraints(case, &ex.loads, &pt, &duals.constraints, weighted);
        for ((acc, v), l) in violation_sums.iter_mut().zip(&viol).zip(&duals.lambda) {
            *acc += v;
            penalty += l * v;
        }
        if want_grad {
            for (h, head) in model.heads.iter().enumerate() {
                let n = head.index.len();
                let g = grad.family(head.family);
                for (i, &pos) in head.index.iter().enumerate() {
                    d_outs[h][s * n + i] += g[pos] * inv_b;
                }
            }
        }
    }
    let grads = if want_grad {
        Some(
            model
                .heads
                .iter()
                .zip(&caches)
                .zip(&d_outs)
                .map(|((h, c), d)| h.net.backward(c, d))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(BatchEval {
        loss: (l0 + penalty) * inv_b,
        l0: l0 * inv_b,
        violation_sums,
        grads,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: String,
    pub region: Option<usize>,
    pub lambda_epoch: usize,
    pub w_epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_l0: f64,
    pub holdout_l0: f64,
    pub v_bound: Option<f64>,
    pub p_bound: Option<f64>,
    pub q_bound: Option<f64>,
    pub thermal: Option<f64>,
    pub p_balance: Option<f64>,
    pub q_balance: Option<f64>,
}

/// Writes log rows as CSV with a fixed column order (the `LogRow` fields).
pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest holdout L0.
    pub model: Predictor,
    pub log: Vec<LogRow>,
    pub duals: DualWeights,
    /// Multipliers after each dual update.
    pub lambda_trace: Vec<Vec<f64>>,
    pub best_holdout_l0: f64,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.random::<u64>()
}

// Holdout positions, then fitting positions, both sorted.
fn holdout_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if n < 2 {
        return (vec![], (0..n).collect());
    }
    let h = ((HOLDOUT_FRACTION * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut hold = idx[..h].to_vec();
    let mut fit = idx[h..].to_vec();
    hold.sort_unstable();
    fit.sort_unstable();
    (hold, fit)
}

fn mean_l0(case: &NetworkCase, model: &Predictor, set: &[&Example], duals: &DualWeights, norm: LossNorm, chunk: usize) -> Result<(f64, Vec<f64>)> {
    let mut l0 = 0.0;
    let mut nu = vec![0.0; duals.constraints.len()];
    for c in set.chunks(chunk.max(1)) {
        let ev = batch_loss(case, model, c, duals, norm, false)?;
        l0 += ev.l0 * c.len() as f64;
        for (a, v) in nu.iter_mut().zip(ev.violation_sums) {
            *a += v;
        }
    }
    let n = set.len().max(1) as f64;
    nu.iter_mut().for_each(|v| *v /= n);
    Ok((l0 / n, nu))
}

fn kind_means(constraints: &[ConstraintId], sums: &[f64], samples: usize) -> BTreeMap<ConstraintKind, f64> {
    let mut acc: BTreeMap<ConstraintKind, (f64, usize)> = BTreeMap::new();
    for (id, v) in constraints.iter().zip(sums) {
        let e = acc.entry(id.kind).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / (n * samples.max(1)) as f64))
        .collect()
}

/// Trains a freshly initialized model of `layout` on `examples`.
fn train_layout(
    case: &NetworkCase,
    kind: ModelKind,
    layout: &Layout,
    examples: &[Example],
    cfg: &TrainConfig,
    hashes: (String, Option<String>, String),
) -> Result<TrainOutcome> {
    cfg.check()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    let began = Instant::now();
    let tag = kind.seed_tag();
    let (hold_idx, fit_idx) = holdout_split(examples.len(), derive_seed(cfg.seed, 1000 + tag));
    let fit: Vec<&Example> = fit_idx.iter().map(|&i| &examples[i]).collect();
    let hold: Vec<&Example> = if hold_idx.is_empty() {
        fit.clone()
    } else {
        hold_idx.iter().map(|&i| &examples[i]).collect()
    };

    let input = Standardizer::fit(layout.inputs, fit.iter().map(|e| e.x.as_slice()))?;
    let mut heads = Vec::with_capacity(layout.heads.len());
    for (h, (family, index, hidden)) in layout.heads.iter().enumerate() {
        let output =
            Standardizer::fit_floored(index.len(), fit.iter().map(|e| e.targets[h].as_slice()), OUTPUT_SCALE_FLOOR)?;
        let dims = Dims::new(layout.inputs, *hidden, index.len());
        let net = Network::new(dims, derive_seed(cfg.seed, 100 * tag + h as u64), input.clone(), output)?;
        heads.push(Head { family: *family, index: index.clone(), net });
    }
    let (case_hash, partition_hash, dataset_hash) = hashes;
    let mut model = Predictor {
        kind,
        n_inputs: layout.inputs,
        heads,
        case_hash,
        partition_hash,
        dataset_hash,
    };
    let mut optims: Vec<OptimState> = model
        .heads
        .iter()
        .map(|h| OptimState::new(h.net.dims().n_params(), cfg.lr))
        .collect();
    let mut duals = DualWeights::zeros(layout.constraints.clone(), cfg.rho);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2000 + tag));
    let mut order: Vec<usize> = (0..fit.len()).collect();

    let mut best = (mean_l0(case, &model, &hold, &duals, cfg.norm, cfg.batch_size)?.0, model.clone());
    let mut log = Vec::new();
    let mut lambda_trace = Vec::new();
    let mut aborted = None;

    'outer: for j in 0..cfg.epochs_lambda {
        for o in &mut optims {
            o.set_epoch(j, cfg.epochs_lambda);
        }
        let slice_end = cfg
            .wall_clock_budget
            .map(|b| b * (j + 1) as f64 / cfg.epochs_lambda as f64);
        let mut w = 0;
        loop {
            match slice_end {
                Some(end) => {
                    if w > 0 && began.elapsed().as_secs_f64() >= end {
                        break;
                    }
                }
                None => {
                    if w == cfg.epochs_w {
                        break;
                    }
                }
            }
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut l0_sum = 0.0;
            let mut viol = vec![0.0; duals.constraints.len()];
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Example> = chunk.iter().map(|&i| fit[i]).collect();
                let ev = batch_loss(case, &model, &batch, &duals, cfg.norm, true)?;
                if !ev.loss.is_finite() {
                    aborted = Some(format!("non-finite loss at lambda-epoch {j}, w-epoch {w}"));
                    break 'outer;
                }
                loss_sum += ev.loss * batch.len() as f64;
                l0_sum += ev.l0 * batch.len() as f64;
                for (a, v) in viol.iter_mut().zip(&ev.violation_sums) {
                    *a += v;
                }
                for ((head, opt), g) in model.heads.iter_mut().zip(&mut optims).zip(ev.grads.expect("gradients requested")) {
                    if let Err(e) = head.net.mlp.step(&g, opt) {
                        aborted = Some(e.to_string());
                        break 'outer;
                    }
                }
            }
            let hold_l0 = mean_l0(case, &model, &hold, &duals, cfg.norm, cfg.batch_size)?.0;
            if hold_l0 < best.0 {
                best = (hold_l0, model.clone());
            }
            let means = kind_means(&duals.constraints, &viol, fit.len());
            let n = fit.len() as f64;
            log.push(LogRow {
                stage: kind.stage().into(),
                region: kind.region(),
                lambda_epoch: j,
                w_epoch: w,
                lr: optims.first().map(|o| o.lr()).unwrap_or(cfg.lr.start),
                train_loss: loss_sum / n,
                train_l0: l0_sum / n,
                holdout_l0: hold_l0,
                v_bound: means.get(&ConstraintKind::VBound).copied(),
                p_bound: means.get(&ConstraintKind::PBound).copied(),
                q_bound: means.get(&ConstraintKind::QBound).copied(),
                thermal: means.get(&ConstraintKind::Thermal).copied(),
                p_balance: means.get(&ConstraintKind::PBalance).copied(),
                q_balance: means.get(&ConstraintKind::QBalance).copied(),
            });
            w += 1;
        }
        let (_, nu_bar) = mean_l0(case, &model, &fit, &duals, cfg.norm, cfg.batch_size)?;
        duals.update(&nu_bar)?;
        lambda_trace.push(duals.lambda.clone());
    }
    if let Some(msg) = &aborted {
        log::warn!("{} training aborted: {msg}", kind.stage());
    }
    Ok(TrainOutcome {
        model: best.1,
        log,
        duals,
        lambda_trace,
        best_holdout_l0: best.0,
        aborted,
    })
}

fn dataset_hashes(case: &NetworkCase, dataset: &Dataset, partition: Option<&Partition>) -> Result<(String, Option<String>, String)> {
    dataset.check_compatible(case, partition)?;
    Ok((
        case.content_hash(),
        partition.map(|p| p.assignment.content_hash()),
        dataset.manifest.samples_sha256.clone(),
    ))
}

/// Monolithic model trained on the dataset's training split.
pub fn train_direct(case: &NetworkCase, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let hashes = dataset_hashes(case, dataset, None)?;
    let examples = direct_examples(case, dataset.train());
    train_layout(case, ModelKind::Direct, &direct_layout(case), &examples, cfg, hashes)
}

/// First-stage coupling model.
pub fn train_stage1(case: &NetworkCase, partition: &Partition, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let hashes = dataset_hashes(case, dataset, Some(partition))?;
    let layout = coupling_layout(case, partition)?;
    let examples = coupling_examples(case, partition, dataset.train())?;
    train_layout(case, ModelKind::Coupling, &layout, &examples, cfg, hashes)
}

/// First-stage outputs for every training sample, computed once.
fn stage1_for_training(
    case: &NetworkCase,
    partition: &Partition,
    dataset: &Dataset,
    coupling: Option<&Predictor>,
) -> Result<Vec<Stage1Output>> {
    match coupling {
        None if partition.coupling_edges.is_empty() => Ok(vec![]),
        None => Err(Error::InvalidArgument("the partition has coupling lines but no first-stage model was given".into())),
        Some(m) => dataset.train().map(|s| stage1_flows(m, case, partition, &s.loads)).collect(),
    }
}

fn train_region_with(
    case: &NetworkCase,
    partition: &Partition,
    dataset: &Dataset,
    k: usize,
    stage1: &[Stage1Output],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let hashes = dataset_hashes(case, dataset, Some(partition))?;
    let layout = regional_layout(case, partition, k)?;
    let samples: Vec<&Sample> = dataset.train().collect();
    let examples = regional_examples(case, partition, k, &samples, stage1)?;
    train_layout(case, ModelKind::Regional(k), &layout, &examples, cfg, hashes)
}

/// Second-stage model of region `k`. Its coupling features are first-stage
/// predictions, never ground truth. `coupling` may be `None` only for a
/// single-region partition.
pub fn train_stage2_region(
    case: &NetworkCase,
    partition: &Partition,
    dataset: &Dataset,
    k: usize,
    coupling: Option<&Predictor>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let stage1 = stage1_for_training(case, partition, dataset, coupling)?;
    train_region_with(case, partition, dataset, k, &stage1, cfg)
}

impl Layout {
    pub fn n_params(&self) -> usize {
        self.heads
            .iter()
            .map(|(_, idx, hidden)| Dims::new(self.inputs, *hidden, idx.len()).n_params())
            .sum()
    }
}

/// Per-region shares of a stage-2 wall-clock budget. With `workers` threads
/// the regions can use `workers * budget` seconds of compute in total, split
/// in proportion to parameter counts and capped at `budget` each.
pub fn stage2_budgets(case: &NetworkCase, partition: &Partition, budget: f64, workers: usize) -> Result<Vec<f64>> {
    let weights: Vec<f64> = (0..partition.k())
        .map(|k| regional_layout(case, partition, k).map(|l| l.n_params() as f64))
        .collect::<Result<_>>()?;
    let total: f64 = weights.iter().sum();
    let lanes = workers.clamp(1, partition.k()) as f64;
    Ok(weights.iter().map(|w| (budget * lanes * w / total).min(budget)).collect())
}

/// All regional models on up to `workers` threads. Regions are independent,
/// so without a wall-clock budget the result does not depend on the worker
/// count. A budget in `cfg` covers the whole stage and is shared out by
/// [`stage2_budgets`].
pub fn train_stage2(
    case: &NetworkCase,
    partition: &Partition,
    dataset: &Dataset,
    coupling: Option<&Predictor>,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<Vec<TrainOutcome>> {
    let stage1 = stage1_for_training(case, partition, dataset, coupling)?;
    let budgets = match cfg.wall_clock_budget {
        Some(b) => stage2_budgets(case, partition, b, workers)?.into_iter().map(Some).collect(),
        None => vec![None; partition.k()],
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.clamp(1, partition.k()))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    pool.install(|| {
        (0..partition.k())
            .into_par_iter()
            .map(|k| {
                let cfg = TrainConfig { wall_clock_budget: budgets[k], ..cfg.clone() };
                train_region_with(case, partition, dataset, k, &stage1, &cfg)
            })
            .collect()
    })
}

/// Where a predicted entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Direct,
    Stage1,
    Region(usize),
}

/// A full predicted operating point with per-entry provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfPrediction {
    pub v: Vec<f64>,
    pub dtheta: Vec<f64>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    pub p_f: Vec<f64>,
    pub q_f: Vec<f64>,
    pub bus_source: Vec<Source>,
    pub branch_source: Vec<Source>,
    pub generator_source: Vec<Source>,
}

impl OpfPrediction {
    pub fn violations(&self, case: &NetworkCase, loads: &LoadProfile) -> ViolationVector {
        violations_from_parts(case, loads, &self.v, &self.dtheta, &self.p_g, &self.q_g)
    }

    /// Operating point with bus angles integrated from the predicted angle
    /// differences along a breadth-first tree rooted at the reference bus.
    pub fn to_solution(&self, case: &NetworkCase) -> OpfSolution {
        let n = case.n_buses();
        let mut theta = vec![f64::NAN; n];
        let root = case.reference_bus();
        theta[root] = 0.0;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            for &a in case.arcs_from(i) {
                let (_, j) = case.arc_ends(a);
                if theta[j].is_nan() {
                    // Arc 2e leaves the from bus: theta_t = theta_f - dtheta.
                    let d = self.dtheta[a / 2];
                    theta[j] = if a % 2 == 0 { theta[i] - d } else { theta[i] + d };
                    queue.push_back(j);
                }
            }
        }
        for t in &mut theta {
            if t.is_nan() {
                *t = 0.0;
            }
        }
        OpfSolution::new(self.v.clone(), theta, self.p_g.clone(), self.q_g.clone())
    }
}

struct Assembly {
    v: Vec<Option<(f64, Source)>>,
    dtheta: Vec<Option<(f64, Source)>>,
    p_g: Vec<Option<(f64, Source)>>,
    q_g: Vec<Option<(f64, Source)>>,
}

impl Assembly {
    fn new(case: &NetworkCase) -> Self {
        Assembly {
            v: vec![None; case.n_buses()],
            dtheta: vec![None; case.n_branches()],
            p_g: vec![None; case.n_generators()],
            q_g: vec![None; case.n_generators()],
        }
    }

    fn put(&mut self, family: Family, index: &[usize], values: &[f64], src: Source) -> Result<()> {
        let dst = match family {
            Family::V => &mut self.v,
            Family::Dtheta => &mut self.dtheta,
            Family::Pg => &mut self.p_g,
            Family::Qg => &mut self.q_g,
        };
        for (&i, &y) in index.iter().zip(values) {
            if let Some((_, prev)) = dst[i] {
                return Err(Error::Integrity(format!(
                    "{} entry {i} predicted by both {prev:?} and {src:?}",
                    family.name()
                )));
            }
            dst[i] = Some((y, src));
        }
        Ok(())
    }

    fn finish(self, case: &NetworkCase) -> Result<OpfPrediction> {
        fn split(family: Family, entries: Vec<Option<(f64, Source)>>) -> Result<(Vec<f64>, Vec<Source>)> {
            entries
                .into_iter()
                .enumerate()
                .map(|(i, e)| e.ok_or_else(|| Error::Integrity(format!("no prediction for {} entry {i}", family.name()))))
                .collect::<Result<Vec<_>>>()
                .map(|v| v.into_iter().unzip())
        }
        let (v, bus_source) = split(Family::V, self.v)?;
        let (dtheta, branch_source) = split(Family::Dtheta, self.dtheta)?;
        let (p_g, generator_source) = split(Family::Pg, self.p_g)?;
        let (q_g, _) = split(Family::Qg, self.q_g)?;
        let (p_f, q_f) = arc_flows(case, &v, &dtheta);
        Ok(OpfPrediction { v, dtheta, p_g, q_g, p_f, q_f, bus_source, branch_source, generator_source })
    }
}

/// Direct-model prediction for one load profile.
pub fn predict_direct(case: &NetworkCase, model: &Predictor, loads: &LoadProfile) -> Result<OpfPrediction> {
    if model.kind != ModelKind::Direct {
        return Err(Error::InvalidArgument("not a direct model".into()));
    }
    let all: Vec<usize> = (0..case.loads().len()).collect();
    let out = model.predict(&load_features(case, loads, &all))?;
    let mut asm = Assembly::new(case);
    for (h, y) in model.heads.iter().zip(&out) {
        asm.put(h.family, &h.index, y, Source::Direct)?;
    }
    asm.finish(case)
}

/// Two-stage prediction: coupling voltages and angle differences from the
/// first stage, everything else from the regional models.
pub fn assemble_prediction(
    case: &NetworkCase,
    partition: &Partition,
    coupling: Option<&Predictor>,
    regions: &[Predictor],
    loads: &LoadProfile,
) -> Result<OpfPrediction> {
    let mut asm = Assembly::new(case);
    let s1 = match coupling {
        Some(m) => {
            let s1 = stage1_flows(m, case, partition, loads)?;
            asm.put(Family::V, &partition.coupling_buses, &s1.v, Source::Stage1)?;
            asm.put(Family::Dtheta, &partition.coupling_edges, &s1.dtheta, Source::Stage1)?;
            Some(s1)
        }
        None if partition.coupling_edges.is_empty() => None,
        None => return Err(Error::InvalidArgument("a first-stage model is required".into())),
    };
    for k in 0..partition.k() {
        let model = regions
            .iter()
            .find(|m| m.kind == ModelKind::Regional(k))
            .ok_or_else(|| Error::InvalidArgument(format!("no model for region {k}")))?;
        let (x, _, _) = regional_inputs(case, partition, k, loads, s1.as_ref())?;
        for (h, y) in model.heads.iter().zip(model.predict(&x)?) {
            asm.put(h.family, &h.index, &y, Source::Region(k))?;
        }
    }
    asm.finish(case)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::fixtures::toy6;
    use crate::partition::{induce_partition, tests::toy_assignment, RegionAssignment};

    fn toy_partition() -> (NetworkCase, Partition) {
        let case = toy6();
        let p = induce_partition(&case, &toy_assignment()).unwrap();
        (case, p)
    }

    fn single_region(case: &NetworkCase) -> Partition {
        let a = RegionAssignment::new(case.buses().iter().map(|b| (b.id, 0)).collect(), 1).unwrap();
        induce_partition(case, &a).unwrap()
    }

    #[test]
    fn l0_examples() {
        assert_eq!(loss_l0(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]], LossNorm::L1).unwrap(), 0.0);
        assert_eq!(loss_l0(&[vec![1.5]], &[vec![1.0]], LossNorm::L1).unwrap(), 0.5);
        assert_eq!(loss_l0(&[vec![1.5]], &[vec![1.0]], LossNorm::SquaredL2).unwrap(), 0.25);
        assert!(loss_l0(&[vec![1.0]], &[vec![1.0, 2.0]], LossNorm::L1).is_err());
    }

    #[test]
    fn l0_matches_recomputation_on_a_random_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();
        let truths: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();
        let mut direct = 0.0;
        for s in 0..7 {
            for i in 0..5 {
                direct += (preds[s][i] - truths[s][i]).abs();
            }
        }
        let l0 = loss_l0(&preds, &truths, LossNorm::L1).unwrap();
        assert!((l0 - direct / 7.0).abs() < 1e-12);
    }

    #[test]
    fn dual_update_examples() {
        let id = ConstraintId { kind: ConstraintKind::Thermal, index: 0 };
        let mut d = DualWeights::zeros(vec![id], 1e-3);
        d.update(&[0.0]).unwrap();
        assert_eq!(d.lambda, vec![0.0]);
        d.update(&[2.0]).unwrap();
        assert_eq!(d.lambda, vec![2e-3]);
        for _ in 0..3 {
            d.update(&[2.0]).unwrap();
        }
        assert!((d.lambda[0] - 8e-3).abs() < 1e-15);
        assert!(d.update(&[-1.0]).is_err());

        let vv = ViolationVector { thermal: vec![0.5, 0.0], ..Default::default() };
        let next = dual_update(&DualWeights::zeros(vec![id], 1.0), &vv).unwrap();
        assert_eq!(next.lambda, vec![0.5]);
    }

    #[test]
    fn penalty_of_a_single_thermal_violation() {
        // Two-bus line with rating 1.0 carrying 1.2 p.u.: violation 0.2 on the
        // sending arc, weight 2, batch of one.
        let case = crate::netmodel::fixtures::two_bus(1.2, 0.0);
        let mut doc = case.document().clone();
        doc.branches[0].s_max = 1.0;
        let case = NetworkCase::new(doc).unwrap();
        let br = &case.branches()[0];
        // Pick dtheta with a purely active flow of exactly 1.2 at v = 1.
        let d = (1.2 / -br.b).asin();
        let (p, q) = branch_flow(1.0, 1.0, d, br.g, br.b);
        let mut pt = PhysicsPoint::neutral(&case);
        pt.dtheta[0] = d;
        let s = p.hypot(q);
        let id = ConstraintId { kind: ConstraintKind::Thermal, index: 0 };
        let duals = DualWeights { constraints: vec![id], lambda: vec![2.0], rho: 1e-3 };
        let loads = LoadProfile::nominal(&case);
        let l = penalized_loss(&[vec![1.0]], &[vec![0.5]], &case, &[loads.clone()], &[pt.clone()], &duals, LossNorm::L1).unwrap();
        assert!((l - (0.5 + 2.0 * (s - 1.0))).abs() < 1e-12);
        assert!((s - 1.0 - 0.2).abs() < 0.02);

        let zero = DualWeights::zeros(vec![id], 1e-3);
        let l = penalized_loss(&[vec![1.0]], &[vec![0.5]], &case, &[loads], &[pt], &zero, LossNorm::L1).unwrap();
        assert_eq!(l, 0.5);
    }

    #[test]
    fn regional_input_width_on_the_toy_case() {
        let (case, p) = toy_partition();
        for k in 0..2 {
            let lay = regional_layout(&case, &p, k).unwrap();
            let expected = 2 * p.region_loads[k].len() + p.region_coupling_buses[k].len() + 2 * p.region_coupling_edges[k].len();
            assert_eq!(lay.inputs, expected);
            // One coupling bus and one coupling line per region.
            assert_eq!(lay.inputs, 2 * p.region_loads[k].len() + 3);
            for (_, idx, hidden) in &lay.heads {
                assert!(!idx.is_empty());
                assert_eq!(*hidden, (3 * p.region_loads[k].len()).max(MIN_HIDDEN));
            }
        }
    }

    #[test]
    fn direct_output_dimension() {
        let (case, _) = toy_partition();
        let lay = direct_layout(&case);
        let outs: usize = lay.heads.iter().map(|h| h.1.len()).sum();
        assert_eq!(outs, case.n_buses() + case.n_branches() + 2 * case.n_generators());
    }

    #[test]
    fn single_region_has_no_first_stage() {
        let case = toy6();
        let p = single_region(&case);
        assert!(coupling_layout(&case, &p).is_err());
        let lay = regional_layout(&case, &p, 0).unwrap();
        assert_eq!(lay.inputs, 2 * case.loads().len());
        assert_eq!(lay.heads.len(), 4);
        assert_eq!(lay.constraints.len(), direct_layout(&case).constraints.len());
    }

    #[test]
    fn stage1_flows_of_a_flat_line_vanish() {
        let (case, p) = toy_partition();
        let lay = coupling_layout(&case, &p).unwrap();
        let heads = lay
            .heads
            .iter()
            .map(|(f, idx, h)| {
                let dims = Dims::new(lay.inputs, *h, idx.len());
                let out = Standardizer { mean: vec![if *f == Family::V { 1.02 } else { 0.0 }; idx.len()], scale: vec![1e-300; idx.len()] };
                Head { family: *f, index: idx.clone(), net: Network::new(dims, 0, Standardizer::identity(lay.inputs), out).unwrap() }
            })
            .collect();
        let m = Predictor {
            kind: ModelKind::Coupling,
            n_inputs: lay.inputs,
            heads,
            case_hash: case.content_hash(),
            partition_hash: Some(p.assignment.content_hash()),
            dataset_hash: String::new(),
        };
        let s1 = stage1_flows(&m, &case, &p, &LoadProfile::nominal(&case)).unwrap();
        assert_eq!(s1.p_f.len(), 2 * p.coupling_edges.len());
        assert!(s1.p_f.iter().all(|x| x.abs() < 1e-12), "{:?}", s1.p_f);
        let br = &case.branches()[p.coupling_edges[0]];
        assert!((s1.q_f[0] - branch_flow(1.02, 1.02, 0.0, br.g, br.b).1).abs() < 1e-12);
    }

    #[test]
    fn constraint_gradient_matches_finite_differences() {
        let (case, _) = toy_partition();
        let lay = direct_layout(&case);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pt = PhysicsPoint::neutral(&case);
        for v in &mut pt.v {
            *v = 0.85 + 0.3 * rng.random::<f64>();
        }
        for d in &mut pt.dtheta {
            *d = 0.4 * (rng.random::<f64>() - 0.5);
        }
        for (p, g) in pt.p_g.iter_mut().zip(case.generators()) {
            *p = g.p_max * (1.4 * rng.random::<f64>() - 0.2);
        }
        let mut doc = case.document().clone();
        for b in &mut doc.branches {
            b.s_max = 0.2;
        }
        let case = NetworkCase::new(doc).unwrap();
        let loads = LoadProfile::nominal(&case);
        let w: Vec<f64> = lay.constraints.iter().map(|_| rng.random::<f64>()).collect();
        let mut g = zeroed_like(&case);
        evaluate_constraints(&case, &loads, &pt, &lay.constraints, Some((&w, &mut g)));
        let f = |p: &PhysicsPoint| -> f64 {
            evaluate_constraints(&case, &loads, p, &lay.constraints, None)
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum()
        };
        for fam in Family::ALL {
            for i in 0..pt.family(fam).len() {
                let mut a = pt.clone();
                let mut b = pt.clone();
                a.family_mut(fam)[i] += 1e-7;
                b.family_mut(fam)[i] -= 1e-7;
                let fd = (f(&a) - f(&b)) / 2e-7;
                let an = g.family(fam)[i];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), "{fam:?}[{i}]: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn holdout_split_is_disjoint_and_seeded() {
        let (h, f) = holdout_split(50, 4);
        assert_eq!(h.len(), 5);
        assert_eq!(h.len() + f.len(), 50);
        assert!(h.iter().all(|i| !f.contains(i)));
        assert_eq!(holdout_split(50, 4), (h, f));
        assert_eq!(holdout_split(1, 0), (vec![], vec![0]));
    }

    #[test]
    fn assembly_rejects_double_sources() {
        let (case, _) = toy_partition();
        let mut asm = Assembly::new(&case);
        asm.put(Family::V, &[0], &[1.0], Source::Stage1).unwrap();
        assert!(asm.put(Family::V, &[0], &[1.0], Source::Region(0)).is_err());
        assert!(Assembly::new(&case).finish(&case).is_err());
    }

    #[test]
    fn angles_are_recovered_from_differences() {
        let (case, _) = toy_partition();
        let mut sol = OpfSolution::flat_start(&case);
        for (i, t) in sol.theta.iter_mut().enumerate() {
            *t = 0.01 * i as f64;
        }
        let r = sol.theta[case.reference_bus()];
        sol.theta.iter_mut().for_each(|t| *t -= r);
        let dtheta = sol.branch_dtheta(&case);
        let pred = OpfPrediction {
            v: sol.v.clone(),
            dtheta,
            p_g: sol.p_g.clone(),
            q_g: sol.q_g.clone(),
            p_f: vec![],
            q_f: vec![],
            bus_source: vec![],
            branch_source: vec![],
            generator_source: vec![],
        };
        let back = pred.to_solution(&case);
        for (a, b) in back.theta.iter().zip(&sol.theta) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
