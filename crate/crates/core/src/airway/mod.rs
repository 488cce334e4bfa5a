//! Corridor-graph airspace: nodes, airports and straight airways between nodes.

mod grid;
mod routing;
mod validate;

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::world::geometry::{closest_param_on_segment, LocalPoint};

pub use grid::generate_grid_network;
pub use routing::{shortest_route, shortest_route_from_node, Route};
pub use validate::{validate_network, Violation, ViolationRule};

pub const DEFAULT_PADS: u32 = 1;
pub const DEFAULT_CAPACITY: u32 = 4;
pub const DEFAULT_CORRIDOR_RADIUS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AirwayNode {
    pub id: String,
    pub position: LocalPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Airport {
    pub id: String,
    /// Ground-level position; `up` is the ground height.
    pub ground_position: LocalPoint,
    pub linked_node: String,
    pub pads: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Airway {
    pub id: String,
    pub endpoints: (String, String),
    pub corridor_radius: f64,
    pub bidirectional: bool,
    pub capacity: u32,
}

/// Directed adjacency entry: neighbour node index reached over an airway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Edge {
    pub to: usize,
    pub airway: usize,
}

/// The airway graph with id lookups. Immutable after construction.
#[derive(Debug, Clone, Default)]
pub struct AirwayNetwork {
    nodes: Vec<AirwayNode>,
    airports: Vec<Airport>,
    airways: Vec<Airway>,
    node_index: HashMap<String, usize>,
    airport_index: HashMap<String, usize>,
    airway_index: HashMap<String, usize>,
    /// Endpoint node indices per airway, `None` when an endpoint is unknown.
    airway_ends: Vec<Option<(usize, usize)>>,
    out_edges: Vec<Vec<Edge>>,
}

impl AirwayNetwork {
    /// Builds the lookup structures. Invalid content is kept so that
    /// [`validate_network`] can report it.
    pub fn new(nodes: Vec<AirwayNode>, airports: Vec<Airport>, airways: Vec<Airway>) -> Self {
        let mut node_index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            node_index.entry(n.id.clone()).or_insert(i);
        }
        let mut airport_index = HashMap::new();
        for (i, a) in airports.iter().enumerate() {
            airport_index.entry(a.id.clone()).or_insert(i);
        }
        let mut airway_index = HashMap::new();
        for (i, w) in airways.iter().enumerate() {
            airway_index.entry(w.id.clone()).or_insert(i);
        }
        let mut out_edges = vec![Vec::new(); nodes.len()];
        let mut airway_ends = Vec::with_capacity(airways.len());
        for (i, w) in airways.iter().enumerate() {
            let ends = match (node_index.get(&w.endpoints.0), node_index.get(&w.endpoints.1)) {
                (Some(&a), Some(&b)) if a != b => Some((a, b)),
                _ => None,
            };
            if let Some((a, b)) = ends {
                out_edges[a].push(Edge { to: b, airway: i });
                if w.bidirectional {
                    out_edges[b].push(Edge { to: a, airway: i });
                }
            }
            airway_ends.push(ends);
        }
        Self { nodes, airports, airways, node_index, airport_index, airway_index, airway_ends, out_edges }
    }

    pub fn nodes(&self) -> &[AirwayNode] {
        &self.nodes
    }

    pub fn airports(&self) -> &[Airport] {
        &self.airports
    }

    pub fn airways(&self) -> &[Airway] {
        &self.airways
    }

    pub fn node(&self, id: &str) -> Result<&AirwayNode> {
        self.node_idx(id).map(|i| &self.nodes[i])
    }

    pub fn airport(&self, id: &str) -> Result<&Airport> {
        self.airport_idx(id).map(|i| &self.airports[i])
    }

    pub fn airway(&self, id: &str) -> Result<&Airway> {
        self.airway_idx(id).map(|i| &self.airways[i])
    }

    pub fn node_idx(&self, id: &str) -> Result<usize> {
        self.node_index.get(id).copied().ok_or_else(|| SimError::lookup("node", id))
    }

    pub fn airport_idx(&self, id: &str) -> Result<usize> {
        self.airport_index.get(id).copied().ok_or_else(|| SimError::lookup("airport", id))
    }

    pub fn airway_idx(&self, id: &str) -> Result<usize> {
        self.airway_index.get(id).copied().ok_or_else(|| SimError::lookup("airway", id))
    }

    /// Node indices joined by an airway, if both endpoints exist.
    pub fn airway_nodes(&self, airway: usize) -> Option<(usize, usize)> {
        self.airway_ends.get(airway).copied().flatten()
    }

    pub(crate) fn out_edges(&self, node: usize) -> &[Edge] {
        &self.out_edges[node]
    }

    /// Airway permitting travel from `from` to `to`, if any.
    pub fn airway_from_to(&self, from: usize, to: usize) -> Option<usize> {
        self.out_edges[from].iter().find(|e| e.to == to).map(|e| e.airway)
    }

    pub fn centerline(&self, airway: usize) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let (a, b) = self.airway_nodes(airway)?;
        Some((self.nodes[a].position.vec(), self.nodes[b].position.vec()))
    }

    pub fn airway_length(&self, airway: usize) -> Option<f64> {
        self.centerline(airway).map(|(a, b)| (b - a).norm())
    }

    /// Closest centreline point over all airways. Ties go to the smallest airway id.
    pub fn nearest_airway_point(&self, p: &LocalPoint) -> Result<NearestAirway> {
        let q = p.vec();
        let mut best: Option<NearestAirway> = None;
        for (i, w) in self.airways.iter().enumerate() {
            let Some((a, b)) = self.centerline(i) else { continue };
            let t = closest_param_on_segment(&a, &b, &q);
            let point = a + (b - a) * t;
            let d = (point - q).norm();
            let better = match &best {
                None => true,
                Some(cur) => d < cur.lateral_distance || (d == cur.lateral_distance && w.id < cur.airway),
            };
            if better {
                best = Some(NearestAirway { airway: w.id.clone(), point: LocalPoint::from_vec(&point), lateral_distance: d });
            }
        }
        best.ok_or_else(|| SimError::lookup("airway", "<empty network>"))
    }

    /// Airway ids joining consecutive nodes of a node-id sequence.
    pub fn route_airways(&self, nodes: &[String]) -> Result<Vec<String>> {
        nodes
            .windows(2)
            .map(|w| {
                let (a, b) = (self.node_idx(&w[0])?, self.node_idx(&w[1])?);
                self.airway_from_to(a, b)
                    .map(|i| self.airways[i].id.clone())
                    .ok_or_else(|| SimError::lookup("airway", format!("{} -> {}", w[0], w[1])))
            })
            .collect()
    }

    /// Top of the vertical column above an airport, at its linked node's altitude.
    pub fn column_top(&self, airport: &str) -> Result<LocalPoint> {
        let a = self.airport(airport)?;
        let node = self.node(&a.linked_node)?;
        Ok(a.ground_position.with_up(node.position.up))
    }

    /// Full geometric path of a flight: origin pad, column top, the node
    /// sequence, the destination column top and pad.
    pub fn flight_path(&self, origin: &str, destination: &str, nodes: &[String]) -> Result<Vec<LocalPoint>> {
        let mut pts = vec![self.airport(origin)?.ground_position, self.column_top(origin)?];
        for id in nodes {
            pts.push(self.node(id)?.position);
        }
        pts.push(self.column_top(destination)?);
        pts.push(self.airport(destination)?.ground_position);
        Ok(pts)
    }

    pub fn to_doc(&self) -> NetworkDoc {
        NetworkDoc {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDoc { id: n.id.clone(), e: n.position.east, n: n.position.north, u: n.position.up })
                .collect(),
            airports: self
                .airports
                .iter()
                .map(|a| AirportDoc {
                    id: a.id.clone(),
                    e: a.ground_position.east,
                    n: a.ground_position.north,
                    u: a.ground_position.up,
                    node: a.linked_node.clone(),
                    pads: a.pads,
                })
                .collect(),
            airways: self
                .airways
                .iter()
                .map(|w| AirwayDoc {
                    id: w.id.clone(),
                    a: w.endpoints.0.clone(),
                    b: w.endpoints.1.clone(),
                    radius: w.corridor_radius,
                    bidirectional: w.bidirectional,
                    capacity: w.capacity,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NearestAirway {
    pub airway: String,
    pub point: LocalPoint,
    pub lateral_distance: f64,
}

/// Network section of the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDoc {
    pub nodes: Vec<NodeDoc>,
    #[serde(default)]
    pub airports: Vec<AirportDoc>,
    #[serde(default)]
    pub airways: Vec<AirwayDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: String,
    pub e: f64,
    pub n: f64,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AirportDoc {
    pub id: String,
    pub e: f64,
    pub n: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub u: f64,
    pub node: String,
    #[serde(default = "default_pads")]
    pub pads: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AirwayDoc {
    pub id: String,
    pub a: String,
    pub b: String,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_true")]
    pub bidirectional: bool,
    #[serde(default = "default_capacity")]
    pub capacity: u32,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}
fn default_pads() -> u32 {
    DEFAULT_PADS
}
fn default_radius() -> f64 {
    DEFAULT_CORRIDOR_RADIUS
}
fn default_true() -> bool {
    true
}
fn default_capacity() -> u32 {
    DEFAULT_CAPACITY
}

impl From<&NetworkDoc> for AirwayNetwork {
    fn from(doc: &NetworkDoc) -> Self {
        AirwayNetwork::new(
            doc.nodes
                .iter()
                .map(|n| AirwayNode { id: n.id.clone(), position: LocalPoint::new(n.e, n.n, n.u) })
                .collect(),
            doc.airports
                .iter()
                .map(|a| Airport {
                    id: a.id.clone(),
                    ground_position: LocalPoint::new(a.e, a.n, a.u),
                    linked_node: a.node.clone(),
                    pads: a.pads,
                })
                .collect(),
            doc.airways
                .iter()
                .map(|w| Airway {
                    id: w.id.clone(),
                    endpoints: (w.a.clone(), w.b.clone()),
                    corridor_radius: w.radius,
                    bidirectional: w.bidirectional,
                    capacity: w.capacity,
                })
                .collect(),
        )
    }
}
