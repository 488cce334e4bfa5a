//! Generators for the shipped demonstration scenarios. The JSON files under
//! `scenarios/` are the output of these functions.

use std::collections::HashSet;

use serde_json::Value;

use crate::airway::{generate_grid_network, Airport, Airway, AirwayNetwork, AirwayNode};
use crate::authority::ApprovalPolicy;
use crate::error::Result;
use crate::scenario::{AvoidanceDoc, ClockDoc, FleetEntry, MapDoc, Scenario};
use crate::sensing::LidarConfig;
use crate::traffic::{FlightDemand, TrafficParams};
use crate::world::geometry::{LocalPoint, Obstacle, Shape};
use crate::world::{GeodeticPoint, RandomStream};

pub const SMALLCITY_SEED: u64 = 20240501;
pub const XIAMEN_SEED: u64 = 7;

const CITY_ROWS: usize = 5;
const CITY_COLS: usize = 9;
const CITY_SPACING: f64 = 300.0;
const CITY_ALTITUDE: f64 = 120.0;

/// Lattice cells that host an airport, as `(row, col)`.
const CITY_AIRPORTS: [(usize, usize); 13] =
    [(0, 0), (0, 4), (0, 8), (1, 2), (1, 6), (2, 0), (2, 4), (2, 8), (3, 2), (3, 6), (4, 0), (4, 4), (4, 8)];

/// Lattice links left out, as pairs of `(row, col)`. Dropping these nine
/// from the 76-link lattice leaves 67 airways and a connected graph.
const CITY_GAPS: [((usize, usize), (usize, usize)); 9] = [
    ((1, 1), (2, 1)),
    ((1, 3), (2, 3)),
    ((1, 5), (2, 5)),
    ((1, 7), (2, 7)),
    ((2, 1), (3, 1)),
    ((2, 3), (3, 3)),
    ((2, 5), (3, 5)),
    ((2, 7), (3, 7)),
    ((2, 2), (2, 3)),
];

/// The small-city network: 45 nodes at 120 m, 67 bidirectional airways and
/// 13 airports.
pub fn smallcity_network() -> Result<AirwayNetwork> {
    let lattice = generate_grid_network(CITY_ROWS, CITY_COLS, CITY_SPACING, CITY_ALTITUDE, 1)?;
    let nid = |(r, c): (usize, usize)| format!("N{:04}", r * CITY_COLS + c);
    let gaps: HashSet<(String, String)> = CITY_GAPS.iter().map(|&(a, b)| (nid(a), nid(b))).collect();
    let airways: Vec<Airway> = lattice
        .airways()
        .iter()
        .filter(|w| !gaps.contains(&w.endpoints))
        .enumerate()
        .map(|(i, w)| Airway { id: format!("W{i:04}"), ..w.clone() })
        .collect();
    let wanted: Vec<String> = CITY_AIRPORTS.iter().map(|&rc| nid(rc)).collect();
    let airports: Vec<Airport> = lattice
        .airports()
        .iter()
        .filter(|a| wanted.contains(&a.linked_node))
        .enumerate()
        .map(|(i, a)| Airport { id: format!("A{i:03}"), pads: 2, ..a.clone() })
        .collect();
    Ok(AirwayNetwork::new(lattice.nodes().to_vec(), airports, airways))
}

/// 100 delivery missions across the small-city network, one
/// quadrotor per mission, homed at the mission origin.
pub fn smallcity_100() -> Result<Scenario> {
    let net = smallcity_network()?;
    let ports: Vec<String> = net.airports().iter().map(|a| a.id.clone()).collect();
    let mut rng = RandomStream::new(SMALLCITY_SEED, "presets/smallcity");
    let mut demands = Vec::new();
    let mut fleet = Vec::new();
    for k in 0..100usize {
        let o = k % ports.len();
        let round = (k / ports.len()) as u64;
        let mut d = rng.uniform_inclusive(ports.len() as u64 - 2) as usize;
        if d >= o {
            d += 1;
        }
        let uav = format!("U{k:03}");
        demands.push(FlightDemand {
            id: format!("D{k:03}"),
            origin: ports[o].clone(),
            destination: ports[d].clone(),
            departure: round * 450 + o as u64 * 10,
            payload: "parcel".into(),
        });
        fleet.push(FleetEntry { uav, home: ports[o].clone(), params: Value::Null, gains: Value::Null, lidar: None });
    }
    Ok(Scenario {
        datum: GeodeticPoint::new(24.48, 118.08, 0.0),
        map: MapDoc { name: "smallcity_100".into(), obstacles: vec![], no_fly_zones: vec![] },
        network: net.to_doc(),
        fleet,
        demands,
        anomalies: vec![],
        seed: SMALLCITY_SEED,
        clock: ClockDoc::default(),
        wind: [0.0; 3],
        policy: ApprovalPolicy { departure_separation: 450, ..ApprovalPolicy::default() },
        traffic: TrafficParams::default(),
        links: vec![],
        avoidance: AvoidanceDoc { enabled: false, vfh: None },
        telemetry_every: 3,
    })
}

pub const XIAMEN_ALTITUDE: f64 = 18.0;
const XIAMEN_LEG: f64 = 60.0;

/// One LiDAR-equipped quadrotor flying an 18 m route whose four legs
/// are each obstructed.
pub fn xiamen_vfh() -> Result<Scenario> {
    let nodes: Vec<AirwayNode> = (0..5)
        .map(|i| AirwayNode { id: format!("N{i:04}"), position: LocalPoint::new(i as f64 * XIAMEN_LEG, 0.0, XIAMEN_ALTITUDE) })
        .collect();
    let airways = (0..4)
        .map(|i| Airway {
            id: format!("W{i:04}"),
            endpoints: (format!("N{i:04}"), format!("N{:04}", i + 1)),
            corridor_radius: 10.0,
            bidirectional: true,
            capacity: 4,
        })
        .collect();
    let airports = vec![
        Airport { id: "A000".into(), ground_position: LocalPoint::new(-10.0, 0.0, 0.0), linked_node: "N0000".into(), pads: 1 },
        Airport { id: "A001".into(), ground_position: LocalPoint::new(4.0 * XIAMEN_LEG + 10.0, 0.0, 0.0), linked_node: "N0004".into(), pads: 1 },
    ];
    let net = AirwayNetwork::new(nodes, airports, airways);
    let mid = |i: usize| i as f64 * XIAMEN_LEG + XIAMEN_LEG / 2.0;
    let tower = |id: &str, e: f64, n: f64, r: f64| Obstacle::new_static(id, Shape::Cylinder { center: LocalPoint::new(e, n, 0.0), radius: r, height: 40.0 });
    let block = |id: &str, e0: f64, n0: f64, e1: f64, n1: f64| {
        Obstacle::new_static(id, Shape::Box { min: LocalPoint::new(e0, n0, 0.0), max: LocalPoint::new(e1, n1, 35.0) })
    };
    let obstacles = vec![
        // a single tower on the centreline
        tower("S1-tower", mid(0), 0.5, 3.0),
        // a building face that leaves the north side open
        block("S2-block", mid(1) - 4.0, -12.0, mid(1) + 4.0, 2.5),
        // two staggered towers
        tower("S3-tower-a", mid(2) - 6.0, -2.0, 2.0),
        tower("S3-tower-b", mid(2) + 6.0, 3.0, 2.0),
        // a wide slab ending just south of the line
        block("S4-slab", mid(3) - 2.0, -3.0, mid(3) + 2.0, 14.0),
    ];
    let lidar = LidarConfig { channels: 12, vertical_fov: [-5.0, 5.0], horizontal_resolution: 1.0, max_range: 30.0, scan_rate: 1 };
    Ok(Scenario {
        datum: GeodeticPoint::new(24.4798, 118.0894, 0.0),
        map: MapDoc { name: "xiamen_vfh".into(), obstacles, no_fly_zones: vec![] },
        network: net.to_doc(),
        fleet: vec![FleetEntry { uav: "U000".into(), home: "A000".into(), params: Value::Null, gains: Value::Null, lidar: Some(lidar) }],
        demands: vec![FlightDemand { id: "D000".into(), origin: "A000".into(), destination: "A001".into(), departure: 0, payload: "survey".into() }],
        anomalies: vec![],
        seed: XIAMEN_SEED,
        clock: ClockDoc::default(),
        wind: [0.0; 3],
        policy: ApprovalPolicy::default(),
        traffic: TrafficParams { cruise_speed: 5.0, lane_offset: 0.0, ..TrafficParams::default() },
        links: vec![],
        avoidance: AvoidanceDoc { enabled: true, vfh: None },
        telemetry_every: 1,
    })
}
