//! Road-network representation, synthetic grid generation, hexagonal spatial
//! aggregation into cells, and the normalized cell adjacency used by graph
//! convolutions.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::table;

/// Jam spacing used for the default per-edge vehicle storage.
const JAM_SPACING_M: f64 = 7.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: u64,
    pub from: u64,
    pub to: u64,
    /// meters
    pub length: f64,
    /// meters/second
    pub free_flow_speed: f64,
    /// vehicles/second
    pub capacity: f64,
    /// maximum vehicles simultaneously on the edge
    pub storage: u32,
}

impl Edge {
    /// Free-flow traversal time in seconds.
    pub fn free_flow_time(&self) -> f64 {
        self.length / self.free_flow_speed
    }
}

/// Directed road graph. Immutable after construction.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    node_index: HashMap<u64, usize>,
    edge_index: HashMap<u64, usize>,
    /// outgoing edge positions per node position
    out_edges: Vec<Vec<usize>>,
}

impl RoadNetwork {
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        let mut node_index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if node_index.insert(n.id, i).is_some() {
                return Err(Error::validation(format!("duplicate node_id {}", n.id)));
            }
        }
        let mut edge_index = HashMap::new();
        let mut out_edges = vec![Vec::new(); nodes.len()];
        for (i, e) in edges.iter().enumerate() {
            if edge_index.insert(e.id, i).is_some() {
                return Err(Error::validation(format!("duplicate edge_id {}", e.id)));
            }
            if e.from == e.to {
                return Err(Error::validation(format!("edge {} is a self-loop", e.id)));
            }
            let from = *node_index
                .get(&e.from)
                .ok_or_else(|| Error::validation(format!("edge {}: unknown from node {}", e.id, e.from)))?;
            node_index
                .get(&e.to)
                .ok_or_else(|| Error::validation(format!("edge {}: unknown to node {}", e.id, e.to)))?;
            if !(e.length > 0.0) {
                return Err(Error::validation(format!("edge {}: length must be > 0", e.id)));
            }
            if !(e.free_flow_speed > 0.0) {
                return Err(Error::validation(format!("edge {}: speed must be > 0", e.id)));
            }
            if !(e.capacity > 0.0) {
                return Err(Error::validation(format!("edge {}: capacity must be > 0", e.id)));
            }
            if e.storage < 1 {
                return Err(Error::validation(format!("edge {}: storage must be >= 1", e.id)));
            }
            out_edges[from].push(i);
        }
        Ok(RoadNetwork { nodes, edges, node_index, edge_index, out_edges })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_pos(&self, id: u64) -> Option<usize> {
        self.node_index.get(&id).copied()
    }

    pub fn edge_pos(&self, id: u64) -> Option<usize> {
        self.edge_index.get(&id).copied()
    }

    /// Positions (into `edges()`) of the edges leaving the node at `node_pos`.
    pub fn out_edge_positions(&self, node_pos: usize) -> &[usize] {
        &self.out_edges[node_pos]
    }

    /// Position of the directed edge from `from` to `to`, if present. With
    /// parallel edges the fastest one wins (ties by edge id), so node paths
    /// have one canonical edge realization.
    pub fn edge_between(&self, from: u64, to: u64) -> Option<usize> {
        let from_pos = self.node_pos(from)?;
        self.out_edges[from_pos]
            .iter()
            .copied()
            .filter(|&ei| self.edges[ei].to == to)
            .min_by(|&a, &b| {
                let (ea, eb) = (&self.edges[a], &self.edges[b]);
                ea.free_flow_time()
                    .total_cmp(&eb.free_flow_time())
                    .then(ea.id.cmp(&eb.id))
            })
    }

    /// Free-flow travel time along a node path, or None if a hop is missing.
    pub fn path_free_flow_time(&self, path: &[u64]) -> Option<f64> {
        let mut total = 0.0;
        for pair in path.windows(2) {
            let ei = self.edge_between(pair[0], pair[1])?;
            total += self.edges[ei].free_flow_time();
        }
        Some(total)
    }
}

/// Generate a rows x cols lattice with bidirectional edges between orthogonal
/// neighbors. Node ids are row-major; coordinates are meters.
pub fn synth_grid_network(
    rows: usize,
    cols: usize,
    edge_length: f64,
    speed: f64,
    capacity: f64,
) -> Result<RoadNetwork> {
    if rows < 1 || cols < 1 {
        return Err(Error::validation("grid needs rows >= 1 and cols >= 1"));
    }
    if !(edge_length > 0.0 && speed > 0.0 && capacity > 0.0) {
        return Err(Error::validation("edge_length, speed, and capacity must be positive"));
    }
    let storage = default_storage(edge_length);
    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            nodes.push(Node {
                id: (r * cols + c) as u64,
                x: c as f64 * edge_length,
                y: r as f64 * edge_length,
            });
        }
    }
    let mut edges = Vec::new();
    let mut next_edge = 0u64;
    let mut link = |edges: &mut Vec<Edge>, a: u64, b: u64| {
        for (from, to) in [(a, b), (b, a)] {
            edges.push(Edge {
                id: next_edge,
                from,
                to,
                length: edge_length,
                free_flow_speed: speed,
                capacity,
                storage,
            });
            next_edge += 1;
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            let id = (r * cols + c) as u64;
            if c + 1 < cols {
                link(&mut edges, id, id + 1);
            }
            if r + 1 < rows {
                link(&mut edges, id, id + cols as u64);
            }
        }
    }
    RoadNetwork::new(nodes, edges)
}

/// Default storage from jam spacing: one slot per 7.5 m, at least one.
pub fn default_storage(length: f64) -> u32 {
    ((length / JAM_SPACING_M).floor() as u32).max(1)
}

/// Node -> cell partition produced by hexagonal binning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMap {
    cell_count: usize,
    /// node position (in RoadNetwork::nodes order) -> cell index
    node_cell: Vec<usize>,
}

impl CellMap {
    pub fn new(cell_count: usize, node_cell: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; cell_count];
        for &c in &node_cell {
            if c >= cell_count {
                return Err(Error::validation(format!("cell index {c} out of range")));
            }
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::validation("every cell must contain at least one node"));
        }
        Ok(CellMap { cell_count, node_cell })
    }

    pub fn cell_count(&self) -> usize {
        self.cell_count
    }

    /// Cell of the node at the given position in the network's node list.
    pub fn cell_of(&self, node_pos: usize) -> usize {
        self.node_cell[node_pos]
    }
}

/// Axial coordinates of the pointy-top hexagon containing a point.
fn point_to_axial(x: f64, y: f64, size: f64) -> (i64, i64) {
    let qf = (3f64.sqrt() / 3.0 * x - y / 3.0) / size;
    let rf = (2.0 / 3.0 * y) / size;
    axial_round(qf, rf)
}

/// Round fractional axial coordinates via cube rounding.
fn axial_round(qf: f64, rf: f64) -> (i64, i64) {
    let sf = -qf - rf;
    let mut q = qf.round();
    let mut r = rf.round();
    let s = sf.round();
    let dq = (q - qf).abs();
    let dr = (r - rf).abs();
    let ds = (s - sf).abs();
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    (q as i64, r as i64)
}

/// Bin node coordinates into pointy-top hexagons of the given size and
/// re-index the occupied hexes densely in (q, r) lexicographic order.
pub fn build_cell_map(net: &RoadNetwork, hex_size: f64) -> Result<CellMap> {
    if !(hex_size > 0.0) {
        return Err(Error::validation("hex_size must be > 0"));
    }
    let hexes: Vec<(i64, i64)> = net
        .nodes()
        .iter()
        .map(|n| point_to_axial(n.x, n.y, hex_size))
        .collect();
    let mut occupied: Vec<(i64, i64)> = hexes.clone();
    occupied.sort_unstable();
    occupied.dedup();
    let index: HashMap<(i64, i64), usize> =
        occupied.iter().enumerate().map(|(i, h)| (*h, i)).collect();
    let node_cell = hexes.iter().map(|h| index[h]).collect();
    CellMap::new(occupied.len(), node_cell)
}

/// Row-stochastic cell adjacency with self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGraph {
    adjacency: Array2<f64>,
}

impl CellGraph {
    /// The normalized adjacency, shape S x S, rows summing to one.
    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn cell_count(&self) -> usize {
        self.adjacency.nrows()
    }
}

/// Raw adjacency has a one at (i, j) when i = j or some edge runs from a node
/// of cell j to a node of cell i; rows are then normalized to sum to one.
pub fn build_cell_graph(net: &RoadNetwork, cmap: &CellMap) -> CellGraph {
    let s = cmap.cell_count();
    let mut raw = Array2::<f64>::zeros((s, s));
    for i in 0..s {
        raw[[i, i]] = 1.0;
    }
    for e in net.edges() {
        let from_cell = cmap.cell_of(net.node_pos(e.from).expect("validated"));
        let to_cell = cmap.cell_of(net.node_pos(e.to).expect("validated"));
        raw[[to_cell, from_cell]] = 1.0;
    }
    for mut row in raw.rows_mut() {
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    CellGraph { adjacency: raw }
}

// --- file formats ---

const NODES_HEADER: &str = "node_id,x,y";
const EDGES_HEADER: &str = "edge_id,from,to,length,speed,capacity,storage";
const CELLS_HEADER: &str = "node_id,cell";

pub fn save_network(net: &RoadNetwork, dir: &Path) -> Result<()> {
    let mut nodes = String::from(NODES_HEADER);
    nodes.push('\n');
    for n in net.nodes() {
        let _ = writeln!(nodes, "{},{},{}", n.id, n.x, n.y);
    }
    table::write_string(&dir.join("nodes.csv"), &nodes)?;

    let mut edges = String::from(EDGES_HEADER);
    edges.push('\n');
    for e in net.edges() {
        let _ = writeln!(
            edges,
            "{},{},{},{},{},{},{}",
            e.id, e.from, e.to, e.length, e.free_flow_speed, e.capacity, e.storage
        );
    }
    table::write_string(&dir.join("edges.csv"), &edges)
}

pub fn load_network(dir: &Path) -> Result<RoadNetwork> {
    let nodes_path = dir.join("nodes.csv");
    let mut nodes = Vec::new();
    for (i, row) in table::read_rows(&nodes_path, NODES_HEADER, 3)?.into_iter().enumerate() {
        nodes.push(Node {
            id: table::parse_field(&nodes_path, i + 2, &row[0], "node_id")?,
            x: table::parse_field(&nodes_path, i + 2, &row[1], "x")?,
            y: table::parse_field(&nodes_path, i + 2, &row[2], "y")?,
        });
    }
    let edges_path = dir.join("edges.csv");
    let mut edges = Vec::new();
    for (i, row) in table::read_rows(&edges_path, EDGES_HEADER, 6)?.into_iter().enumerate() {
        let length: f64 = table::parse_field(&edges_path, i + 2, &row[3], "length")?;
        // storage column is optional; fall back to the jam-spacing default
        let storage = match row.get(6) {
            Some(f) if !f.is_empty() => table::parse_field(&edges_path, i + 2, f, "storage")?,
            _ => default_storage(length),
        };
        edges.push(Edge {
            id: table::parse_field(&edges_path, i + 2, &row[0], "edge_id")?,
            from: table::parse_field(&edges_path, i + 2, &row[1], "from")?,
            to: table::parse_field(&edges_path, i + 2, &row[2], "to")?,
            length,
            free_flow_speed: table::parse_field(&edges_path, i + 2, &row[4], "speed")?,
            capacity: table::parse_field(&edges_path, i + 2, &row[5], "capacity")?,
            storage,
        });
    }
    RoadNetwork::new(nodes, edges)
}

pub fn save_cell_map(net: &RoadNetwork, cmap: &CellMap, path: &Path) -> Result<()> {
    let mut out = String::from(CELLS_HEADER);
    out.push('\n');
    for (pos, n) in net.nodes().iter().enumerate() {
        let _ = writeln!(out, "{},{}", n.id, cmap.cell_of(pos));
    }
    table::write_string(path, &out)
}

pub fn load_cell_map(net: &RoadNetwork, path: &Path) -> Result<CellMap> {
    let rows = table::read_rows(path, CELLS_HEADER, 2)?;
    if rows.len() != net.nodes().len() {
        return Err(Error::parse(
            path,
            0,
            format!("expected {} node rows, found {}", net.nodes().len(), rows.len()),
        ));
    }
    let mut node_cell = vec![usize::MAX; net.nodes().len()];
    let mut max_cell = 0usize;
    for (i, row) in rows.iter().enumerate() {
        let node_id: u64 = table::parse_field(path, i + 2, &row[0], "node_id")?;
        let cell: usize = table::parse_field(path, i + 2, &row[1], "cell")?;
        let pos = net
            .node_pos(node_id)
            .ok_or_else(|| Error::parse(path, i + 2, format!("unknown node_id {node_id}")))?;
        node_cell[pos] = cell;
        max_cell = max_cell.max(cell);
    }
    if node_cell.iter().any(|&c| c == usize::MAX) {
        return Err(Error::parse(path, 0, "not every node is mapped to a cell"));
    }
    CellMap::new(max_cell + 1, node_cell)
}
