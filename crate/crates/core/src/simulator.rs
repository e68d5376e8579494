//! Deterministic mesoscopic spatial-queue simulator: the SIM oracle that
//! turns an assignment into per-vehicle travel times, the realized flow
//! matrix Q, and the ground-truth total travel time.
//!
//! Each edge holds a traversing set (vehicle, earliest_exit = entry +
//! length/speed) and a FIFO exit queue throttled by an outflow credit that
//! accrues at `capacity` vehicles per second (capped so an idle edge never
//! delays a lone vehicle). Advancing is blocked while the downstream edge's
//! storage is full, which produces spillback. Entry and exit instants are
//! propagated continuously — a vehicle entering an edge mid-step keeps its
//! exact entry time — so an uncongested vehicle's travel time equals the sum
//! of length/speed over its path exactly, provided every edge takes at
//! least `δ_sim` to traverse (true for all networks used here).

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use serde::{Deserialize, Serialize};

use crate::demand::{Assignment, ChoiceSets, Demand};
use crate::error::{Error, Result};
use crate::network::{CellMap, RoadNetwork};
use crate::table;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// simulation step, seconds
    pub delta_sim: f64,
    /// aggregation step, seconds; must be an integer multiple of delta_sim
    pub delta_t: f64,
    /// horizon, seconds; must be a multiple of delta_t
    pub t_end: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { delta_sim: 1.0, delta_t: 10.0, t_end: 600.0 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_sim > 0.0) {
            return Err(Error::validation("delta_sim must be > 0"));
        }
        let per = self.delta_t / self.delta_sim;
        if per < 1.0 - 1e-9 || (per - per.round()).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "delta_t = {} must be an integer multiple of delta_sim = {}",
                self.delta_t, self.delta_sim
            )));
        }
        let t = self.t_end / self.delta_t;
        if t < 1.0 - 1e-9 || (t - t.round()).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "t_end = {} must be a multiple of delta_t = {}",
                self.t_end, self.delta_t
            )));
        }
        Ok(())
    }

    /// Simulation steps per aggregation interval.
    pub fn steps_per_interval(&self) -> usize {
        (self.delta_t / self.delta_sim).round() as usize
    }

    /// Number of aggregation intervals T.
    pub fn intervals(&self) -> usize {
        (self.t_end / self.delta_t).round() as usize
    }
}

/// Per-cell, per-interval count of vehicles present in the network, sampled
/// at the left endpoint of each interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatrix {
    pub q: Array2<u32>,
    pub delta_t: f64,
}

impl FlowMatrix {
    /// The Riemann aggregate g(Q) = Σ_t δ_t·‖Q_t‖, in seconds.
    pub fn occupancy_sum(&self) -> f64 {
        self.q.iter().map(|&v| v as f64).sum::<f64>() * self.delta_t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleRecord {
    pub agent_id: u64,
    pub departure_s: f64,
    /// None while the horizon cut the trip short
    pub arrival_s: Option<f64>,
    /// arrival − departure, or horizon − departure when unfinished
    pub travel_time_s: f64,
}

impl VehicleRecord {
    pub fn finished(&self) -> bool {
        self.arrival_s.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub vehicles: Vec<VehicleRecord>,
    pub q: FlowMatrix,
    /// Σ per-vehicle travel time, seconds
    pub tt_s: f64,
}

/// Σ (arrival − departure), with unfinished vehicles credited the time to
/// the horizon end.
pub fn total_travel_time(vehicles: &[VehicleRecord]) -> f64 {
    vehicles.iter().map(|v| v.travel_time_s).sum()
}

/// Vehicles on each edge at one aggregation boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancySnapshot {
    pub time_s: f64,
    /// occupant count per edge, in `net.edges()` order
    pub edge_occupants: Vec<u32>,
}

/// Q[s][t] = vehicles whose current edge starts in cell s at time t·δ_t.
pub fn aggregate_flows(
    net: &RoadNetwork,
    snapshots: &[OccupancySnapshot],
    cmap: &CellMap,
    delta_t: f64,
) -> FlowMatrix {
    let s = cmap.cell_count();
    let mut q = Array2::<u32>::zeros((s, snapshots.len()));
    for (t, snap) in snapshots.iter().enumerate() {
        for (ei, &n) in snap.edge_occupants.iter().enumerate() {
            if n > 0 {
                let from = net.node_pos(net.edges()[ei].from).expect("validated");
                q[[cmap.cell_of(from), t]] += n;
            }
        }
    }
    FlowMatrix { q, delta_t }
}

struct EdgeState {
    /// (earliest_exit, agent), unordered until due
    traversing: Vec<(f64, u32)>,
    /// FIFO exit order
    queue: VecDeque<u32>,
    credit: f64,
    credit_cap: f64,
    credit_rate: f64,
    storage: u32,
}

impl EdgeState {
    fn occupants(&self) -> usize {
        self.traversing.len() + self.queue.len()
    }

    fn has_space(&self) -> bool {
        self.occupants() < self.storage as usize
    }
}

struct Vehicle {
    /// edge positions along the path
    legs: Vec<usize>,
    /// current leg while in the network
    leg: usize,
    earliest_exit: f64,
    departure: f64,
}

/// Run the spatial-queue dynamics for one assignment.
pub fn simulate(
    net: &RoadNetwork,
    demand: &Demand,
    sets: &ChoiceSets,
    assignment: &Assignment,
    cmap: &CellMap,
    cfg: &SimConfig,
) -> Result<SimResult> {
    cfg.validate()?;
    let n = demand.len();

    // resolve node paths to edge positions up front
    let mut vehicles = Vec::with_capacity(n);
    for trip in demand.trips() {
        let path = assignment.path_of(sets, trip.agent_id as usize);
        let mut legs = Vec::with_capacity(path.len().saturating_sub(1));
        for pair in path.windows(2) {
            let ei = net.edge_between(pair[0], pair[1]).ok_or_else(|| {
                Error::validation(format!(
                    "agent {}: no edge from {} to {}",
                    trip.agent_id, pair[0], pair[1]
                ))
            })?;
            legs.push(ei);
        }
        if legs.is_empty() {
            return Err(Error::validation(format!("agent {}: empty path", trip.agent_id)));
        }
        if trip.departure_s >= cfg.t_end {
            return Err(Error::validation(format!(
                "agent {}: departs at {} s, beyond the {} s horizon",
                trip.agent_id, trip.departure_s, cfg.t_end
            )));
        }
        vehicles.push(Vehicle {
            legs,
            leg: 0,
            earliest_exit: 0.0,
            departure: trip.departure_s,
        });
    }

    let mut edges: Vec<EdgeState> = net
        .edges()
        .iter()
        .map(|e| {
            let rate = e.capacity * cfg.delta_sim;
            EdgeState {
                traversing: Vec::new(),
                queue: VecDeque::new(),
                // idle edges sit at the cap so a lone vehicle is never delayed
                credit: rate.max(1.0),
                credit_cap: rate.max(1.0),
                credit_rate: rate,
                storage: e.storage,
            }
        })
        .collect();
    // "processed in edge_id order"
    let mut edge_order: Vec<usize> = (0..net.edges().len()).collect();
    edge_order.sort_unstable_by_key(|&i| net.edges()[i].id);

    // departure order: (time, agent)
    let mut departure_order: Vec<u32> = (0..n as u32).collect();
    departure_order
        .sort_unstable_by(|&a, &b| {
            vehicles[a as usize]
                .departure
                .total_cmp(&vehicles[b as usize].departure)
                .then(a.cmp(&b))
        });
    let mut next_departure = 0usize;
    let mut holding: VecDeque<u32> = VecDeque::new();

    let mut arrivals: Vec<Option<f64>> = vec![None; n];
    let mut arrived = 0usize;
    let mut on_network = 0usize;

    let steps_per_interval = cfg.steps_per_interval();
    let n_steps = cfg.intervals() * steps_per_interval;
    let mut snapshots = Vec::with_capacity(cfg.intervals());
    let mut due: Vec<(f64, u32)> = Vec::new();

    for step in 0..=n_steps {
        let now = step as f64 * cfg.delta_sim;
        // earliest instant an advance observed this step can have happened
        let window_start = now - cfg.delta_sim;

        if step > 0 {
            // move vehicles past their traversal time into the exit queues
            for &ei in &edge_order {
                let st = &mut edges[ei];
                due.clear();
                st.traversing.retain(|&(ee, agent)| {
                    if ee <= now {
                        due.push((ee, agent));
                        false
                    } else {
                        true
                    }
                });
                due.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                st.queue.extend(due.iter().map(|&(_, agent)| agent));
            }

            // accrue credit, then let queue heads advance while it lasts
            for &ei in &edge_order {
                edges[ei].credit = (edges[ei].credit + edges[ei].credit_rate).min(edges[ei].credit_cap);
                while edges[ei].credit >= 1.0 {
                    let Some(&agent) = edges[ei].queue.front() else { break };
                    let v = &vehicles[agent as usize];
                    let exit_time = v.earliest_exit.max(window_start);
                    if v.leg + 1 == v.legs.len() {
                        edges[ei].queue.pop_front();
                        edges[ei].credit -= 1.0;
                        arrivals[agent as usize] = Some(exit_time);
                        arrived += 1;
                        on_network -= 1;
                    } else {
                        let next = v.legs[v.leg + 1];
                        if !edges[next].has_space() {
                            break;
                        }
                        edges[ei].queue.pop_front();
                        edges[ei].credit -= 1.0;
                        let v = &mut vehicles[agent as usize];
                        v.leg += 1;
                        v.earliest_exit = exit_time + net.edges()[next].free_flow_time();
                        edges[next].traversing.push((v.earliest_exit, agent));
                    }
                }
            }
        }

        // departures join the back of the holding line in (time, agent) order
        while next_departure < n {
            let agent = departure_order[next_departure];
            if vehicles[agent as usize].departure > now {
                break;
            }
            holding.push_back(agent);
            next_departure += 1;
        }
        // every holder tries to enter; a full first edge keeps it waiting
        // without blocking holders bound elsewhere
        for _ in 0..holding.len() {
            let agent = holding.pop_front().unwrap();
            let v = &mut vehicles[agent as usize];
            let first = v.legs[0];
            if edges[first].has_space() {
                let entry = v.departure.max(window_start);
                v.earliest_exit = entry + net.edges()[first].free_flow_time();
                edges[first].traversing.push((v.earliest_exit, agent));
                on_network += 1;
            } else {
                holding.push_back(agent);
            }
        }

        // vehicle partition: holding + in network + arrived = departed
        assert_eq!(
            holding.len() + on_network + arrived,
            next_departure,
            "vehicle conservation broken at t = {now}"
        );

        if step < n_steps && step % steps_per_interval == 0 {
            snapshots.push(OccupancySnapshot {
                time_s: now,
                edge_occupants: edges.iter().map(|e| e.occupants() as u32).collect(),
            });
        }
    }

    let q = aggregate_flows(net, &snapshots, cmap, cfg.delta_t);
    let records: Vec<VehicleRecord> = demand
        .trips()
        .iter()
        .map(|t| {
            let a = arrivals[t.agent_id as usize];
            VehicleRecord {
                agent_id: t.agent_id,
                departure_s: t.departure_s,
                arrival_s: a,
                travel_time_s: a.unwrap_or(cfg.t_end) - t.departure_s,
            }
        })
        .collect();
    let tt_s = total_travel_time(&records);
    Ok(SimResult { vehicles: records, q, tt_s })
}

// --- file formats ---

const VEHICLES_HEADER: &str = "agent_id,departure_s,arrival_s,travel_time_s,finished";
const SUMMARY_HEADER: &str = "sample_id,TT_s,TT_min";

pub fn save_flow_matrix(q: &FlowMatrix, path: &Path) -> Result<()> {
    table::write_matrix_u32(path, &q.q)
}

pub fn load_flow_matrix(path: &Path, delta_t: f64) -> Result<FlowMatrix> {
    Ok(FlowMatrix { q: table::read_matrix_u32(path)?, delta_t })
}

pub fn save_vehicles(vehicles: &[VehicleRecord], path: &Path) -> Result<()> {
    let mut out = String::from(VEHICLES_HEADER);
    out.push('\n');
    for v in vehicles {
        let arrival = v.arrival_s.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            v.agent_id, v.departure_s, arrival, v.travel_time_s, v.finished()
        );
    }
    table::write_string(path, &out)
}

pub fn load_vehicles(path: &Path) -> Result<Vec<VehicleRecord>> {
    let mut vehicles = Vec::new();
    for (i, row) in table::read_rows(path, VEHICLES_HEADER, 5)?.into_iter().enumerate() {
        let arrival_s = if row[2].is_empty() {
            None
        } else {
            Some(table::parse_field(path, i + 2, &row[2], "arrival_s")?)
        };
        vehicles.push(VehicleRecord {
            agent_id: table::parse_field(path, i + 2, &row[0], "agent_id")?,
            departure_s: table::parse_field(path, i + 2, &row[1], "departure_s")?,
            arrival_s,
            travel_time_s: table::parse_field(path, i + 2, &row[3], "travel_time_s")?,
        });
    }
    Ok(vehicles)
}

pub fn save_summary(rows: &[(u64, f64)], path: &Path) -> Result<()> {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for &(sample_id, tt_s) in rows {
        let _ = writeln!(out, "{},{},{}", sample_id, tt_s, tt_s / 60.0);
    }
    table::write_string(path, &out)
}

pub fn load_summary(path: &Path) -> Result<Vec<(u64, f64)>> {
    let mut rows = Vec::new();
    for (i, row) in table::read_rows(path, SUMMARY_HEADER, 3)?.into_iter().enumerate() {
        rows.push((
            table::parse_field(path, i + 2, &row[0], "sample_id")?,
            table::parse_field(path, i + 2, &row[1], "TT_s")?,
        ));
    }
    Ok(rows)
}
