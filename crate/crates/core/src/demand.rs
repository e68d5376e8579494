//! Fixed trip demand, per-trip route choice sets (Yen's k-shortest loopless
//! paths on free-flow times), and the spatio-temporal assignment matrix A.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{CellMap, RoadNetwork};
use crate::{seed, table};

/// Attempts per agent before OD sampling gives up.
const OD_RETRY_BUDGET: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub agent_id: u64,
    pub origin: u64,
    pub destination: u64,
    pub departure_s: f64,
}

/// The fixed demand D: one trip per agent, agent ids contiguous from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Demand {
    trips: Vec<Trip>,
}

impl Demand {
    pub fn new(trips: Vec<Trip>) -> Result<Self> {
        for (i, t) in trips.iter().enumerate() {
            if t.agent_id != i as u64 {
                return Err(Error::validation(format!(
                    "agent ids must be contiguous from 0, found {} at position {i}",
                    t.agent_id
                )));
            }
            if t.origin == t.destination {
                return Err(Error::validation(format!(
                    "agent {}: origin equals destination ({})",
                    t.agent_id, t.origin
                )));
            }
            if !(t.departure_s >= 0.0) {
                return Err(Error::validation(format!(
                    "agent {}: departure must be >= 0",
                    t.agent_id
                )));
            }
        }
        Ok(Demand { trips })
    }

    pub fn trips(&self) -> &[Trip] {
        &self.trips
    }

    pub fn len(&self) -> usize {
        self.trips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trips.is_empty()
    }
}

/// Sample `n_agents` trips with uniform distinct-node OD pairs (resampled
/// until a path exists) and departures uniform in `[0, window)`.
pub fn gen_demand(net: &RoadNetwork, n_agents: usize, window: f64, root_seed: u64) -> Result<Demand> {
    if n_agents < 1 {
        return Err(Error::validation("n_agents must be >= 1"));
    }
    if !(window > 0.0) {
        return Err(Error::validation("demand window must be > 0"));
    }
    let n_nodes = net.nodes().len();
    if n_nodes < 2 {
        return Err(Error::validation("demand needs at least two nodes"));
    }
    let mut rng = seed::rng(root_seed);
    // reachability sets are reused across agents sharing an origin
    let mut reach: Vec<Option<Vec<bool>>> = vec![None; n_nodes];
    let mut trips = Vec::with_capacity(n_agents);
    for agent_id in 0..n_agents as u64 {
        let mut last_pair = (0u64, 0u64);
        let mut found = None;
        for _ in 0..OD_RETRY_BUDGET {
            let o = rng.gen_range(0..n_nodes);
            let d = rng.gen_range(0..n_nodes);
            last_pair = (net.nodes()[o].id, net.nodes()[d].id);
            if o == d {
                continue;
            }
            let r = reach[o].get_or_insert_with(|| reachable_from(net, o));
            if r[d] {
                found = Some(last_pair);
                break;
            }
        }
        let (origin, destination) = found.ok_or_else(|| {
            Error::runtime(format!(
                "agent {agent_id}: no route-connected OD pair after {OD_RETRY_BUDGET} attempts \
                 (last tried {} -> {})",
                last_pair.0, last_pair.1
            ))
        })?;
        let departure_s = rng.gen_range(0.0..window);
        trips.push(Trip { agent_id, origin, destination, departure_s });
    }
    Demand::new(trips)
}

fn reachable_from(net: &RoadNetwork, start_pos: usize) -> Vec<bool> {
    let mut seen = vec![false; net.nodes().len()];
    seen[start_pos] = true;
    let mut stack = vec![start_pos];
    while let Some(u) = stack.pop() {
        for &ei in net.out_edge_positions(u) {
            let v = net.node_pos(net.edges()[ei].to).expect("validated");
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

/// One agent's candidate paths: up to K node sequences, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceSet {
    paths: Vec<Vec<u64>>,
    k: usize,
}

impl ChoiceSet {
    pub fn paths(&self) -> &[Vec<u64>] {
        &self.paths
    }

    /// Mask of length K: true where a path exists.
    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.k).map(|i| i < self.paths.len()).collect()
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Choice sets for every agent, in agent order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceSets {
    sets: Vec<ChoiceSet>,
    k: usize,
}

impl ChoiceSets {
    pub fn sets(&self) -> &[ChoiceSet] {
        &self.sets
    }

    pub fn get(&self, agent: usize) -> &ChoiceSet {
        &self.sets[agent]
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Up to K shortest loopless paths per agent by free-flow time, ties broken
/// by lexicographic node sequence.
pub fn build_choice_sets(net: &RoadNetwork, demand: &Demand, k: usize) -> Result<ChoiceSets> {
    if k < 1 {
        return Err(Error::validation("choice set size K must be >= 1"));
    }
    let sets: Vec<ChoiceSet> = demand
        .trips()
        .par_iter()
        .map(|t| {
            let paths = k_shortest_paths(net, t.origin, t.destination, k)?;
            if paths.is_empty() {
                return Err(Error::validation(format!(
                    "agent {}: no path from {} to {}",
                    t.agent_id, t.origin, t.destination
                )));
            }
            Ok(ChoiceSet { paths, k })
        })
        .collect::<Result<_>>()?;
    Ok(ChoiceSets { sets, k })
}

/// Canonical path cost: free-flow edge times summed in path order.
pub fn path_time(net: &RoadNetwork, path: &[u64]) -> Option<f64> {
    net.path_free_flow_time(path)
}

/// Yen's algorithm. Returns up to `k` loopless paths ordered by
/// (free-flow time, lexicographic node sequence); empty when disconnected.
pub fn k_shortest_paths(net: &RoadNetwork, origin: u64, destination: u64, k: usize) -> Result<Vec<Vec<u64>>> {
    let src = net
        .node_pos(origin)
        .ok_or_else(|| Error::validation(format!("unknown origin node {origin}")))?;
    let dst = net
        .node_pos(destination)
        .ok_or_else(|| Error::validation(format!("unknown destination node {destination}")))?;
    if src == dst {
        return Err(Error::validation("origin equals destination"));
    }

    let view = GraphView::new(net);
    let mut accepted: Vec<Vec<usize>> = Vec::new();
    let mut candidates: Vec<(f64, Vec<usize>)> = Vec::new();

    let first = match view.lex_shortest(src, dst, &[], &[]) {
        Some(p) => p,
        None => return Ok(Vec::new()),
    };
    accepted.push(first);

    while accepted.len() < k {
        let prev = accepted.last().unwrap().clone();
        for i in 0..prev.len() - 1 {
            let spur = prev[i];
            let root = &prev[..=i];
            // drop the continuations used by every accepted path sharing this root
            let mut banned_edges: Vec<(usize, usize)> = accepted
                .iter()
                .filter(|p| p.len() > i + 1 && p[..=i] == *root)
                .map(|p| (p[i], p[i + 1]))
                .collect();
            banned_edges.sort_unstable();
            banned_edges.dedup();
            let banned_nodes = &root[..i];
            if let Some(suffix) = view.lex_shortest(spur, dst, &banned_edges, banned_nodes) {
                let mut path = root[..i].to_vec();
                path.extend_from_slice(&suffix);
                if !accepted.contains(&path) && !candidates.iter().any(|(_, p)| *p == path) {
                    let cost = view.path_cost(&path);
                    candidates.push((cost, path));
                }
            }
        }
        // next path: cheapest candidate, lexicographic node order on ties
        let best = candidates
            .iter()
            .enumerate()
            .min_by(|(_, (ca, pa)), (_, (cb, pb))| ca.total_cmp(cb).then_with(|| pa.cmp(pb)))
            .map(|(i, _)| i);
        match best {
            Some(i) => accepted.push(candidates.swap_remove(i).1),
            None => break,
        }
    }

    Ok(accepted
        .into_iter()
        .map(|p| p.into_iter().map(|pos| net.nodes()[pos].id).collect())
        .collect())
}

/// Weighted adjacency over node positions with forward and reverse views.
struct GraphView {
    /// node -> (next node, weight)
    fwd: Vec<Vec<(usize, f64)>>,
    /// node -> (prev node, weight)
    rev: Vec<Vec<(usize, f64)>>,
}

impl GraphView {
    fn new(net: &RoadNetwork) -> Self {
        let n = net.nodes().len();
        let mut fwd = vec![Vec::new(); n];
        let mut rev = vec![Vec::new(); n];
        for u in 0..n {
            let uid = net.nodes()[u].id;
            let mut nexts: Vec<usize> = net
                .out_edge_positions(u)
                .iter()
                .map(|&ei| net.node_pos(net.edges()[ei].to).expect("validated"))
                .collect();
            nexts.sort_unstable();
            nexts.dedup();
            for v in nexts {
                let ei = net.edge_between(uid, net.nodes()[v].id).expect("present");
                let w = net.edges()[ei].free_flow_time();
                fwd[u].push((v, w));
                rev[v].push((u, w));
            }
        }
        GraphView { fwd, rev }
    }

    /// Forward-order sum of edge weights along a node-position path.
    fn path_cost(&self, path: &[usize]) -> f64 {
        path.windows(2)
            .map(|p| {
                self.fwd[p[0]]
                    .iter()
                    .find(|(v, _)| *v == p[1])
                    .map(|(_, w)| *w)
                    .expect("path edge exists")
            })
            .sum()
    }

    /// Lexicographically smallest minimum-cost loopless path from `src` to
    /// `dst`, avoiding `banned_edges` and `banned_nodes`. Runs a reverse
    /// Dijkstra from `dst`, then walks forward always taking the smallest
    /// next node that stays on a shortest path.
    fn lex_shortest(
        &self,
        src: usize,
        dst: usize,
        banned_edges: &[(usize, usize)],
        banned_nodes: &[usize],
    ) -> Option<Vec<usize>> {
        let n = self.fwd.len();
        let mut blocked = vec![false; n];
        for &b in banned_nodes {
            blocked[b] = true;
        }
        let edge_ok = |u: usize, v: usize| banned_edges.binary_search(&(u, v)).is_err();

        // distance to destination over the reversed graph
        let mut dist = vec![f64::INFINITY; n];
        dist[dst] = 0.0;
        let mut heap = std::collections::BinaryHeap::new();
        heap.push(HeapEntry { cost: 0.0, node: dst });
        while let Some(HeapEntry { cost, node }) = heap.pop() {
            if cost > dist[node] {
                continue;
            }
            for &(u, w) in &self.rev[node] {
                if blocked[u] || !edge_ok(u, node) {
                    continue;
                }
                let nd = w + dist[node];
                if nd < dist[u] {
                    dist[u] = nd;
                    heap.push(HeapEntry { cost: nd, node: u });
                }
            }
        }
        if blocked[src] || !dist[src].is_finite() {
            return None;
        }

        let mut path = vec![src];
        let mut u = src;
        while u != dst {
            let next = self.fwd[u]
                .iter()
                .filter(|&&(v, w)| !blocked[v] && edge_ok(u, v) && w + dist[v] == dist[u])
                .map(|&(v, _)| v)
                .min()?;
            path.push(next);
            u = next;
        }
        Some(path)
    }
}

#[derive(PartialEq)]
struct HeapEntry {
    cost: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // min-heap on cost, ties by node for determinism
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// One selected path per agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    path_index: Vec<usize>,
}

impl Assignment {
    pub fn new(path_index: Vec<usize>, sets: &ChoiceSets) -> Result<Self> {
        if path_index.len() != sets.len() {
            return Err(Error::validation(format!(
                "assignment covers {} agents, choice sets cover {}",
                path_index.len(),
                sets.len()
            )));
        }
        for (a, &pi) in path_index.iter().enumerate() {
            if pi >= sets.get(a).paths().len() {
                return Err(Error::validation(format!(
                    "agent {a}: path_index {pi} outside valid choice set entries"
                )));
            }
        }
        Ok(Assignment { path_index })
    }

    pub fn path_index(&self) -> &[usize] {
        &self.path_index
    }

    /// The node path agent `a` drives under this assignment.
    pub fn path_of<'s>(&self, sets: &'s ChoiceSets, a: usize) -> &'s [u64] {
        &sets.get(a).paths()[self.path_index[a]]
    }
}

/// A ∈ ℕ^{S×T} on a fixed time grid of `δ_t`-second intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub a: Array2<u32>,
    pub delta_t: f64,
}

/// Mark each agent's departure interval with one count per distinct cell on
/// its selected path.
pub fn assignment_matrix(
    net: &RoadNetwork,
    demand: &Demand,
    sets: &ChoiceSets,
    assignment: &Assignment,
    cmap: &CellMap,
    t_intervals: usize,
    delta_t: f64,
) -> Result<AssignmentMatrix> {
    if !(delta_t > 0.0) {
        return Err(Error::validation("delta_t must be > 0"));
    }
    let s = cmap.cell_count();
    let mut a = Array2::<u32>::zeros((s, t_intervals));
    for trip in demand.trips() {
        let agent = trip.agent_id as usize;
        let t = (trip.departure_s / delta_t).floor() as usize;
        if t >= t_intervals {
            return Err(Error::validation(format!(
                "agent {}: departure {} s falls outside the {}-interval horizon",
                trip.agent_id, trip.departure_s, t_intervals
            )));
        }
        let mut cells: Vec<usize> = assignment
            .path_of(sets, agent)
            .iter()
            .map(|&nid| cmap.cell_of(net.node_pos(nid).expect("validated")))
            .collect();
        cells.sort_unstable();
        cells.dedup();
        for c in cells {
            a[[c, t]] += 1;
        }
    }
    Ok(AssignmentMatrix { a, delta_t })
}

// --- file formats ---

const DEMAND_HEADER: &str = "agent_id,origin,destination,departure_s";
const ASSIGNMENT_HEADER: &str = "agent_id,path_index";

pub fn save_demand(demand: &Demand, path: &Path) -> Result<()> {
    let mut out = String::from(DEMAND_HEADER);
    out.push('\n');
    for t in demand.trips() {
        let _ = writeln!(out, "{},{},{},{}", t.agent_id, t.origin, t.destination, t.departure_s);
    }
    table::write_string(path, &out)
}

pub fn load_demand(path: &Path) -> Result<Demand> {
    let mut trips = Vec::new();
    for (i, row) in table::read_rows(path, DEMAND_HEADER, 4)?.into_iter().enumerate() {
        trips.push(Trip {
            agent_id: table::parse_field(path, i + 2, &row[0], "agent_id")?,
            origin: table::parse_field(path, i + 2, &row[1], "origin")?,
            destination: table::parse_field(path, i + 2, &row[2], "destination")?,
            departure_s: table::parse_field(path, i + 2, &row[3], "departure_s")?,
        });
    }
    Demand::new(trips)
}

pub fn save_choice_sets(sets: &ChoiceSets, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (agent, cs) in sets.sets().iter().enumerate() {
        for (rank, p) in cs.paths().iter().enumerate() {
            let nodes: Vec<String> = p.iter().map(|n| n.to_string()).collect();
            let _ = writeln!(out, "{agent};{rank};{}", nodes.join(","));
        }
    }
    table::write_string(path, &out)
}

pub fn load_choice_sets(net: &RoadNetwork, demand: &Demand, k: usize, path: &Path) -> Result<ChoiceSets> {
    if k < 1 {
        return Err(Error::validation("choice set size K must be >= 1"));
    }
    let text = table::read_to_string(path)?;
    let mut per_agent: Vec<Vec<Vec<u64>>> = vec![Vec::new(); demand.len()];
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(';').collect();
        if parts.len() != 3 {
            return Err(Error::parse(path, lineno + 1, "expected agent_id;path_rank;nodes"));
        }
        let agent: usize = table::parse_field(path, lineno + 1, parts[0], "agent_id")?;
        let rank: usize = table::parse_field(path, lineno + 1, parts[1], "path_rank")?;
        if agent >= demand.len() {
            return Err(Error::parse(path, lineno + 1, format!("agent {agent} outside demand")));
        }
        let nodes = parts[2]
            .split(',')
            .map(|f| table::parse_field(path, lineno + 1, f, "node_id"))
            .collect::<Result<Vec<u64>>>()?;
        if rank != per_agent[agent].len() {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("agent {agent}: path ranks must be contiguous, got {rank}"),
            ));
        }
        per_agent[agent].push(nodes);
    }
    let mut sets = Vec::with_capacity(demand.len());
    for (agent, paths) in per_agent.into_iter().enumerate() {
        let trip = &demand.trips()[agent];
        if paths.is_empty() || paths.len() > k {
            return Err(Error::validation(format!(
                "agent {agent}: expected between 1 and {k} paths, found {}",
                paths.len()
            )));
        }
        for p in &paths {
            validate_path(net, trip, p)?;
        }
        sets.push(ChoiceSet { paths, k });
    }
    Ok(ChoiceSets { sets, k })
}

fn validate_path(net: &RoadNetwork, trip: &Trip, path: &[u64]) -> Result<()> {
    let ctx = format!("agent {}", trip.agent_id);
    if path.first() != Some(&trip.origin) || path.last() != Some(&trip.destination) {
        return Err(Error::validation(format!("{ctx}: path endpoints do not match trip OD")));
    }
    let mut seen = HashSet::new();
    for &n in path {
        if !seen.insert(n) {
            return Err(Error::validation(format!("{ctx}: path revisits node {n}")));
        }
    }
    for pair in path.windows(2) {
        if net.edge_between(pair[0], pair[1]).is_none() {
            return Err(Error::validation(format!(
                "{ctx}: no edge from {} to {}",
                pair[0], pair[1]
            )));
        }
    }
    Ok(())
}

pub fn save_assignment(assignment: &Assignment, path: &Path) -> Result<()> {
    let mut out = String::from(ASSIGNMENT_HEADER);
    out.push('\n');
    for (agent, &pi) in assignment.path_index().iter().enumerate() {
        let _ = writeln!(out, "{agent},{pi}");
    }
    table::write_string(path, &out)
}

pub fn load_assignment(sets: &ChoiceSets, path: &Path) -> Result<Assignment> {
    let rows = table::read_rows(path, ASSIGNMENT_HEADER, 2)?;
    if rows.len() != sets.len() {
        return Err(Error::parse(
            path,
            0,
            format!("expected {} agents, found {}", sets.len(), rows.len()),
        ));
    }
    let mut path_index = vec![usize::MAX; sets.len()];
    for (i, row) in rows.iter().enumerate() {
        let agent: usize = table::parse_field(path, i + 2, &row[0], "agent_id")?;
        if agent >= sets.len() {
            return Err(Error::parse(path, i + 2, format!("agent {agent} outside demand")));
        }
        path_index[agent] = table::parse_field(path, i + 2, &row[1], "path_index")?;
    }
    Assignment::new(path_index, sets)
}
