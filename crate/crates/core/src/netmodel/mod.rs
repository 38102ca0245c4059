//! Power network cases in per-unit quantities.
//!
//! A [`NetworkCase`] is immutable once built: construction validates every
//! record and precomputes the index tables (bus positions, directed arcs,
//! per-bus generator and arc lists) that the evaluators rely on. Buses are
//! kept sorted by id, so bus positions follow id order.
//!
//! Branch `(g, b)` is the series admittance of a simple line model. Parsers
//! fold transformer taps and shunt elements into it before construction; see
//! [`matpower`] for the folding rules.

pub mod matpower;

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Apparent-power rating used for branches declared without a thermal limit.
pub const UNLIMITED_S_MAX: f64 = 1.0e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub v_min: f64,
    pub v_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_hint: Option<usize>,
    /// Fixed active withdrawal of folded shunt elements (p.u. at nominal voltage).
    #[serde(default)]
    pub shunt_p: f64,
    /// Fixed reactive withdrawal of folded shunt elements (p.u. at nominal voltage).
    #[serde(default)]
    pub shunt_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: u32,
    pub to_bus: u32,
    pub g: f64,
    pub b: f64,
    pub s_max: f64,
}

/// Polynomial dispatch cost `c2 p^2 + c1 p + c0` with `p` in p.u.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostCurve {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl CostCurve {
    pub fn eval(&self, p: f64) -> f64 {
        (self.c2 * p + self.c1) * p + self.c0
    }

    pub fn derivative(&self, p: f64) -> f64 {
        2.0 * self.c2 * p + self.c1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: u32,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost: CostCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub bus: u32,
    pub p_nom: f64,
    pub q_nom: f64,
}

impl Load {
    pub fn p_mw(&self, base_mva: f64) -> f64 {
        self.p_nom * base_mva
    }

    pub fn q_mvar(&self, base_mva: f64) -> f64 {
        self.q_nom * base_mva
    }
}

/// Serialized form of a case (the native JSON format).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDocument {
    pub base_mva: f64,
    /// Angle reference; defaults to the lowest-id bus hosting a generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_bus: Option<u32>,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseStats {
    pub buses: usize,
    pub branches: usize,
    pub loads: usize,
    pub generators: usize,
}

#[derive(Debug, Clone)]
struct Topology {
    bus_pos: HashMap<u32, usize>,
    branch_ends: Vec<(usize, usize)>,
    gen_bus: Vec<usize>,
    load_bus: Vec<usize>,
    bus_arcs: Vec<Vec<usize>>,
    bus_gens: Vec<Vec<usize>>,
    bus_load: Vec<Option<usize>>,
    reference: usize,
}

/// A validated, indexed network case.
#[derive(Debug, Clone)]
pub struct NetworkCase {
    doc: CaseDocument,
    topo: Topology,
}

impl PartialEq for NetworkCase {
    fn eq(&self, other: &Self) -> bool {
        self.doc == other.doc
    }
}

/// Parses either the native JSON format or a MATPOWER case file.
pub fn parse_case(text: &str) -> Result<NetworkCase> {
    if text.trim_start().starts_with('{') {
        let doc: CaseDocument = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        NetworkCase::new(doc)
    } else {
        matpower::parse(text)
    }
}

pub fn case_stats(case: &NetworkCase) -> CaseStats {
    CaseStats {
        buses: case.buses().len(),
        branches: case.branches().len(),
        loads: case.loads().len(),
        generators: case.generators().len(),
    }
}

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} has a non-finite field")))
    }
}

impl NetworkCase {
    /// Validates a case document and builds its index tables.
    ///
    /// Buses are sorted by id and loads are aggregated per bus, so two
    /// documents describing the same network compare equal after construction.
    pub fn new(mut doc: CaseDocument) -> Result<Self> {
        if !(doc.base_mva.is_finite() && doc.base_mva > 0.0) {
            return Err(Error::Validation(format!(
                "base_mva must be positive, got {}",
                doc.base_mva
            )));
        }
        if doc.buses.is_empty() {
            return Err(Error::Validation("case has no buses".into()));
        }
        if doc.branches.is_empty() {
            return Err(Error::Validation("case has no branches".into()));
        }
        doc.buses.sort_by_key(|b| b.id);

        let mut bus_pos = HashMap::with_capacity(doc.buses.len());
        for (pos, bus) in doc.buses.iter().enumerate() {
            check_finite(
                &format!("bus {}", bus.id),
                &[bus.v_min, bus.v_max, bus.shunt_p, bus.shunt_q],
            )?;
            if !(bus.v_min > 0.0 && bus.v_min <= bus.v_max) {
                return Err(Error::Validation(format!(
                    "bus {}: voltage bounds must satisfy 0 < v_min <= v_max (got {}, {})",
                    bus.id, bus.v_min, bus.v_max
                )));
            }
            if bus_pos.insert(bus.id, pos).is_some() {
                return Err(Error::Validation(format!("duplicate bus id {}", bus.id)));
            }
        }
        let lookup = |id: u32, what: String| -> Result<usize> {
            bus_pos
                .get(&id)
                .copied()
                .ok_or_else(|| Error::Validation(format!("{what} references unknown bus {id}")))
        };

        let mut branch_ends = Vec::with_capacity(doc.branches.len());
        for (k, br) in doc.branches.iter().enumerate() {
            let name = format!("branch {k} ({}-{})", br.from_bus, br.to_bus);
            check_finite(&name, &[br.g, br.b, br.s_max])?;
            if br.from_bus == br.to_bus {
                return Err(Error::Validation(format!("{name} is a self-loop")));
            }
            if br.s_max <= 0.0 {
                return Err(Error::Validation(format!("{name}: s_max must be positive")));
            }
            let f = lookup(br.from_bus, name.clone())?;
            let t = lookup(br.to_bus, name)?;
            branch_ends.push((f, t));
        }

        let mut gen_bus = Vec::with_capacity(doc.generators.len());
        for (k, gen) in doc.generators.iter().enumerate() {
            let name = format!("generator {k} at bus {}", gen.bus);
            check_finite(
                &name,
                &[
                    gen.p_min, gen.p_max, gen.q_min, gen.q_max, gen.cost.c2, gen.cost.c1,
                    gen.cost.c0,
                ],
            )?;
            if gen.p_min > gen.p_max {
                return Err(Error::Validation(format!("{name}: p_min > p_max")));
            }
            if gen.q_min > gen.q_max {
                return Err(Error::Validation(format!("{name}: q_min > q_max")));
            }
            if gen.cost.c2 < 0.0 {
                return Err(Error::Validation(format!(
                    "{name}: quadratic cost coefficient must be nonnegative"
                )));
            }
            gen_bus.push(lookup(gen.bus, name)?);
        }

        // Aggregate loads per bus, ordered by bus id.
        let mut merged: BTreeMap<u32, Load> = BTreeMap::new();
        for load in &doc.loads {
            let name = format!("load at bus {}", load.bus);
            check_finite(&name, &[load.p_nom, load.q_nom])?;
            lookup(load.bus, name)?;
            merged
                .entry(load.bus)
                .and_modify(|l| {
                    l.p_nom += load.p_nom;
                    l.q_nom += load.q_nom;
                })
                .or_insert_with(|| load.clone());
        }
        doc.loads = merged.into_values().collect();
        let load_bus: Vec<usize> = doc.loads.iter().map(|l| bus_pos[&l.bus]).collect();

        let n = doc.buses.len();
        let mut bus_arcs = vec![Vec::new(); n];
        for (e, &(f, t)) in branch_ends.iter().enumerate() {
            bus_arcs[f].push(2 * e);
            bus_arcs[t].push(2 * e + 1);
        }
        let mut bus_gens = vec![Vec::new(); n];
        for (g, &pos) in gen_bus.iter().enumerate() {
            bus_gens[pos].push(g);
        }
        let mut bus_load = vec![None; n];
        for (l, &pos) in load_bus.iter().enumerate() {
            bus_load[pos] = Some(l);
        }

        let reference = match doc.reference_bus {
            Some(id) => lookup(id, "reference".into())?,
            None => gen_bus.iter().copied().min().unwrap_or(0),
        };

        let case = NetworkCase {
            doc,
            topo: Topology {
                bus_pos,
                branch_ends,
                gen_bus,
                load_bus,
                bus_arcs,
                bus_gens,
                bus_load,
                reference,
            },
        };
        if let Some(island) = case.first_disconnected_bus() {
            return Err(Error::Validation(format!(
                "network is disconnected: bus {} unreachable from bus {}",
                case.buses()[island].id,
                case.buses()[0].id
            )));
        }
        Ok(case)
    }

    fn first_disconnected_bus(&self) -> Option<usize> {
        let n = self.buses().len();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &a in &self.topo.bus_arcs[i] {
                let (_, j) = self.arc_ends(a);
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.iter().position(|s| !s)
    }

    pub fn document(&self) -> &CaseDocument {
        &self.doc
    }

    pub fn base_mva(&self) -> f64 {
        self.doc.base_mva
    }

    pub fn buses(&self) -> &[Bus] {
        &self.doc.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.doc.branches
    }

    pub fn generators(&self) -> &[Generator] {
        &self.doc.generators
    }

    pub fn loads(&self) -> &[Load] {
        &self.doc.loads
    }

    pub fn n_buses(&self) -> usize {
        self.doc.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.doc.branches.len()
    }

    pub fn n_generators(&self) -> usize {
        self.doc.generators.len()
    }

    pub fn n_arcs(&self) -> usize {
        2 * self.doc.branches.len()
    }

    /// Position of a bus id in [`buses`](Self::buses).
    pub fn bus_position(&self, id: u32) -> Option<usize> {
        self.topo.bus_pos.get(&id).copied()
    }

    /// Bus positions of a branch's (from, to) endpoints.
    pub fn branch_ends(&self, branch: usize) -> (usize, usize) {
        self.topo.branch_ends[branch]
    }

    /// Directed arcs: arc `2e` runs from→to on branch `e`, arc `2e + 1` to→from.
    pub fn arc_ends(&self, arc: usize) -> (usize, usize) {
        let (f, t) = self.topo.branch_ends[arc / 2];
        if arc.is_multiple_of(2) {
            (f, t)
        } else {
            (t, f)
        }
    }

    pub fn arcs_from(&self, bus: usize) -> &[usize] {
        &self.topo.bus_arcs[bus]
    }

    pub fn generators_at(&self, bus: usize) -> &[usize] {
        &self.topo.bus_gens[bus]
    }

    pub fn generator_bus(&self, gen: usize) -> usize {
        self.topo.gen_bus[gen]
    }

    pub fn load_bus(&self, load: usize) -> usize {
        self.topo.load_bus[load]
    }

    pub fn load_at(&self, bus: usize) -> Option<usize> {
        self.topo.bus_load[bus]
    }

    /// Bus position of the angle reference.
    pub fn reference_bus(&self) -> usize {
        self.topo.reference
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.doc).expect("case documents always serialize")
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.doc).expect("case documents always serialize");
        hex_digest(&bytes)
    }

    /// Copy of the case with every bus voltage band widened to at least `[lo, hi]`.
    pub fn with_voltage_band_at_least(&self, lo: f64, hi: f64) -> Result<Self> {
        let mut doc = self.doc.clone();
        for bus in &mut doc.buses {
            bus.v_min = bus.v_min.min(lo);
            bus.v_max = bus.v_max.max(hi);
        }
        NetworkCase::new(doc)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
