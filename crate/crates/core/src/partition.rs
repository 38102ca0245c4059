//! Spatial decomposition of the bus set into regions and the sets it
//! induces: internal lines per region, coupling lines and buses, and the
//! per-region views of the coupling (lines touching the region and the
//! region's own coupling buses).
//!
//! Coupling lines are stored once per physical branch; both directed arcs
//! are produced only when flows are computed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{hex_digest, NetworkCase};

/// Bus id → region index in `0..k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAssignment {
    region_of: BTreeMap<u32, usize>,
    k: usize,
}

impl RegionAssignment {
    pub fn new(region_of: BTreeMap<u32, usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Partition("number of regions must be positive".into()));
        }
        let mut used = vec![false; k];
        for (&bus, &r) in &region_of {
            if r >= k {
                return Err(Error::Partition(format!(
                    "bus {bus} assigned to region {r}, outside 0..{k}"
                )));
            }
            used[r] = true;
        }
        if let Some(r) = used.iter().position(|u| !u) {
            return Err(Error::Partition(format!("region {r} is empty")));
        }
        Ok(RegionAssignment { region_of, k })
    }

    /// Assignment file format: a JSON object mapping bus id to region index.
    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<u32, usize> = serde_json::from_str(text)?;
        let k = map.values().copied().max().map_or(0, |m| m + 1);
        Self::new(map, k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.region_of).expect("maps always serialize")
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn region(&self, bus_id: u32) -> Option<usize> {
        self.region_of.get(&bus_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, usize)> + '_ {
        self.region_of.iter().map(|(&b, &r)| (b, r))
    }

    pub fn content_hash(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }

    fn from_positions(case: &NetworkCase, regions: &[usize], k: usize) -> Result<Self> {
        let map = case
            .buses()
            .iter()
            .zip(regions)
            .map(|(b, &r)| (b.id, r))
            .collect();
        Self::new(map, k)
    }
}

/// A region assignment together with every set it induces on a case.
/// All index lists hold positions (bus, branch, load, generator) in
/// ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignment: RegionAssignment,
    /// Region of each bus position.
    pub region_of_bus: Vec<usize>,
    pub region_buses: Vec<Vec<usize>>,
    pub internal_edges: Vec<Vec<usize>>,
    pub coupling_edges: Vec<usize>,
    pub coupling_buses: Vec<usize>,
    pub region_coupling_edges: Vec<Vec<usize>>,
    pub region_coupling_buses: Vec<Vec<usize>>,
    pub region_loads: Vec<Vec<usize>>,
    pub region_generators: Vec<Vec<usize>>,
}

impl Partition {
    pub fn k(&self) -> usize {
        self.assignment.k()
    }

    pub fn is_coupling_bus(&self, bus: usize) -> bool {
        self.coupling_buses.binary_search(&bus).is_ok()
    }

    /// Buses of region `k` that are not coupling buses.
    pub fn region_interior_buses(&self, k: usize) -> Vec<usize> {
        self.region_buses[k]
            .iter()
            .copied()
            .filter(|&b| !self.is_coupling_bus(b))
            .collect()
    }

    /// For each coupling line touching region `k`, the arc leaving the region.
    pub fn region_outgoing_arcs(&self, case: &NetworkCase, k: usize) -> Vec<usize> {
        self.region_coupling_edges[k]
            .iter()
            .map(|&e| {
                let (f, _) = case.branch_ends(e);
                if self.region_of_bus[f] == k {
                    2 * e
                } else {
                    2 * e + 1
                }
            })
            .collect()
    }
}

pub fn induce_partition(case: &NetworkCase, assignment: &RegionAssignment) -> Result<Partition> {
    let k = assignment.k();
    let mut region_of_bus = Vec::with_capacity(case.n_buses());
    for bus in case.buses() {
        let r = assignment
            .region(bus.id)
            .ok_or_else(|| Error::Partition(format!("bus {} is not assigned", bus.id)))?;
        region_of_bus.push(r);
    }
    if assignment.region_of.len() != case.n_buses() {
        return Err(Error::Partition(
            "assignment names buses that are not in the case".into(),
        ));
    }

    let mut region_buses = vec![Vec::new(); k];
    for (pos, &r) in region_of_bus.iter().enumerate() {
        region_buses[r].push(pos);
    }
    if let Some(r) = region_buses.iter().position(|b| b.is_empty()) {
        return Err(Error::Partition(format!("region {r} is empty")));
    }

    let mut internal_edges = vec![Vec::new(); k];
    let mut coupling_edges = Vec::new();
    let mut coupling_set = BTreeSet::new();
    let mut region_coupling_edges = vec![Vec::new(); k];
    for e in 0..case.n_branches() {
        let (f, t) = case.branch_ends(e);
        let (rf, rt) = (region_of_bus[f], region_of_bus[t]);
        if rf == rt {
            internal_edges[rf].push(e);
        } else {
            coupling_edges.push(e);
            coupling_set.insert(f);
            coupling_set.insert(t);
            region_coupling_edges[rf].push(e);
            region_coupling_edges[rt].push(e);
        }
    }
    let coupling_buses: Vec<usize> = coupling_set.into_iter().collect();
    let region_coupling_buses = (0..k)
        .map(|r| {
            coupling_buses
                .iter()
                .copied()
                .filter(|&b| region_of_bus[b] == r)
                .collect()
        })
        .collect();
    let mut region_loads = vec![Vec::new(); k];
    for l in 0..case.loads().len() {
        region_loads[region_of_bus[case.load_bus(l)]].push(l);
    }
    let mut region_generators = vec![Vec::new(); k];
    for g in 0..case.n_generators() {
        region_generators[region_of_bus[case.generator_bus(g)]].push(g);
    }

    for (r, buses) in region_buses.iter().enumerate() {
        if !region_connected(case, &region_of_bus, buses, r, None) {
            log::warn!("region {r} does not induce a connected subgraph");
        }
    }

    Ok(Partition {
        assignment: assignment.clone(),
        region_of_bus,
        region_buses,
        internal_edges,
        coupling_edges,
        coupling_buses,
        region_coupling_edges,
        region_coupling_buses,
        region_loads,
        region_generators,
    })
}

/// Whether region `r` stays connected, optionally with one bus removed.
fn region_connected(
    case: &NetworkCase,
    region_of_bus: &[usize],
    buses: &[usize],
    r: usize,
    without: Option<usize>,
) -> bool {
    let members: Vec<usize> = buses.iter().copied().filter(|&b| Some(b) != without).collect();
    let Some(&start) = members.first() else {
        return false;
    };
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(i) = queue.pop_front() {
        for &a in case.arcs_from(i) {
            let (_, j) = case.arc_ends(a);
            if region_of_bus[j] == r && Some(j) != without && seen.insert(j) {
                queue.push_back(j);
            }
        }
    }
    seen.len() == members.len()
}

fn hop_distances(case: &NetworkCase, sources: &[usize]) -> Vec<usize> {
    let mut dist = vec![usize::MAX; case.n_buses()];
    let mut queue = VecDeque::new();
    for &s in sources {
        dist[s] = 0;
        queue.push_back(s);
    }
    while let Some(i) = queue.pop_front() {
        for &a in case.arcs_from(i) {
            let (_, j) = case.arc_ends(a);
            if dist[j] == usize::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    dist
}

/// Synthetic partitioner: region growing from `k` spread-out seeds followed
/// by boundary refinement that moves single buses while the cut shrinks.
///
/// Regions stay connected and nonempty throughout; refinement never grows a
/// region beyond `ceil(1.5 |N| / k)` buses. Ties resolve towards the lowest
/// bus position, then the lowest region index.
pub fn auto_partition(case: &NetworkCase, k: usize, seed: u64) -> Result<RegionAssignment> {
    let n = case.n_buses();
    if k == 0 || k > n {
        return Err(Error::Partition(format!(
            "cannot split {n} buses into {k} regions"
        )));
    }
    if k == n {
        let regions: Vec<usize> = (0..n).collect();
        return RegionAssignment::from_positions(case, &regions, k);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = vec![rng.random_range(0..n)];
    while seeds.len() < k {
        let dist = hop_distances(case, &seeds);
        let far = (0..n)
            .filter(|i| !seeds.contains(i))
            .max_by(|&a, &b| dist[a].cmp(&dist[b]).then(b.cmp(&a)))
            .expect("k < n leaves an unseeded bus");
        seeds.push(far);
    }

    const UNASSIGNED: usize = usize::MAX;
    let mut region = vec![UNASSIGNED; n];
    let mut size = vec![0usize; k];
    for (r, &s) in seeds.iter().enumerate() {
        region[s] = r;
        size[r] = 1;
    }
    let mut remaining = n - k;
    while remaining > 0 {
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&r| (size[r], r));
        let mut grown = false;
        for r in order {
            // Frontier bus with the most lines into region r.
            let mut best: Option<(usize, usize)> = None;
            for i in 0..n {
                if region[i] != UNASSIGNED {
                    continue;
                }
                let links = case
                    .arcs_from(i)
                    .iter()
                    .filter(|&&a| region[case.arc_ends(a).1] == r)
                    .count();
                if links > 0 && best.is_none_or(|(_, l)| links > l) {
                    best = Some((i, links));
                }
            }
            if let Some((i, _)) = best {
                region[i] = r;
                size[r] += 1;
                remaining -= 1;
                grown = true;
                break;
            }
        }
        debug_assert!(grown, "connected case always has a frontier");
        if !grown {
            return Err(Error::Partition("region growth stalled".into()));
        }
    }

    let cap = (3 * n).div_ceil(2 * k);
    loop {
        let mut moved = false;
        for i in 0..n {
            let r = region[i];
            if size[r] == 1 {
                continue;
            }
            let mut links: BTreeMap<usize, i64> = BTreeMap::new();
            for &a in case.arcs_from(i) {
                *links.entry(region[case.arc_ends(a).1]).or_default() += 1;
            }
            let own = links.get(&r).copied().unwrap_or(0);
            let target = links
                .iter()
                .filter(|&(&s, &l)| s != r && l > own && size[s] < cap)
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&s, _)| s);
            let Some(s) = target else { continue };
            let members: Vec<usize> = (0..n).filter(|&b| region[b] == r).collect();
            if !region_connected(case, &region, &members, r, Some(i)) {
                continue;
            }
            region[i] = s;
            size[r] -= 1;
            size[s] += 1;
            moved = true;
        }
        if !moved {
            break;
        }
    }

    RegionAssignment::from_positions(case, &region, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub region_sizes: Vec<usize>,
    pub coupling_edges: usize,
    /// Coupling lines as a fraction of all lines.
    pub coupling_fraction: f64,
    /// Largest region as a fraction of all buses.
    pub max_region_fraction: f64,
}

pub fn partition_stats(case: &NetworkCase, p: &Partition) -> PartitionStats {
    let region_sizes: Vec<usize> = p.region_buses.iter().map(Vec::len).collect();
    let largest = region_sizes.iter().copied().max().unwrap_or(0);
    PartitionStats {
        coupling_edges: p.coupling_edges.len(),
        coupling_fraction: p.coupling_edges.len() as f64 / case.n_branches() as f64,
        max_region_fraction: largest as f64 / case.n_buses() as f64,
        region_sizes,
    }
}
