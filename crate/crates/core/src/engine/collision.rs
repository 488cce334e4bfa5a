//! Contact detection with a uniform-grid broad phase.

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::world::geometry::{LocalPoint, Obstacle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionKind {
    UavUav,
    UavObstacle,
    UavGround,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub tick: u64,
    pub kind: CollisionKind,
    /// Sorted for uav pairs; `[uav, obstacle]` otherwise.
    pub entities: Vec<String>,
    pub positions: Vec<LocalPoint>,
}

impl CollisionEvent {
    pub fn key(&self) -> (CollisionKind, Vec<String>) {
        (self.kind, self.entities.clone())
    }
}

/// Collision sphere of one UAV.
#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub id: String,
    pub position: Vector3<f64>,
    pub radius: f64,
    /// Resting on the ground outside a takeoff or landing.
    pub ground_contact: bool,
}

type Cell = (i64, i64, i64);

fn cell_of(p: &Vector3<f64>, size: f64) -> Cell {
    ((p.x / size).floor() as i64, (p.y / size).floor() as i64, (p.z / size).floor() as i64)
}

fn pair_event(tick: u64, a: &Body, b: &Body) -> CollisionEvent {
    let (a, b) = if a.id <= b.id { (a, b) } else { (b, a) };
    CollisionEvent {
        tick,
        kind: CollisionKind::UavUav,
        entities: vec![a.id.clone(), b.id.clone()],
        positions: vec![LocalPoint::from_vec(&a.position), LocalPoint::from_vec(&b.position)],
    }
}

fn sort_events(v: &mut [CollisionEvent]) {
    v.sort_by(|a, b| a.kind.cmp(&b.kind).then_with(|| a.entities.cmp(&b.entities)));
}

fn static_events(tick: u64, bodies: &[Body], obstacles: &[Obstacle], out: &mut Vec<CollisionEvent>) {
    for b in bodies {
        for o in obstacles {
            if o.shape.distance_to(&b.position) <= b.radius {
                out.push(CollisionEvent {
                    tick,
                    kind: CollisionKind::UavObstacle,
                    entities: vec![b.id.clone(), o.id.clone()],
                    positions: vec![LocalPoint::from_vec(&b.position)],
                });
            }
        }
        if b.ground_contact {
            out.push(CollisionEvent {
                tick,
                kind: CollisionKind::UavGround,
                entities: vec![b.id.clone()],
                positions: vec![LocalPoint::from_vec(&b.position)],
            });
        }
    }
}

/// All contacts at this instant. UAV pairs touch when their centres are
/// closer than the sum of radii; obstacles when the sphere meets the solid.
/// `cell` is the hash cell edge; it is raised to the largest contact
/// distance when smaller so no pair is missed.
pub fn detect_collisions(tick: u64, bodies: &[Body], obstacles: &[Obstacle], cell: f64) -> Vec<CollisionEvent> {
    let max_r = bodies.iter().map(|b| b.radius).fold(0.0, f64::max);
    let size = cell.max(2.0 * max_r).max(1e-6);
    let mut grid: HashMap<Cell, Vec<usize>> = HashMap::new();
    for (i, b) in bodies.iter().enumerate() {
        grid.entry(cell_of(&b.position, size)).or_default().push(i);
    }
    let mut out = Vec::new();
    for (i, a) in bodies.iter().enumerate() {
        let (cx, cy, cz) = cell_of(&a.position, size);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(v) = grid.get(&(cx + dx, cy + dy, cz + dz)) else { continue };
                    for &j in v {
                        if j <= i {
                            continue;
                        }
                        let b = &bodies[j];
                        if (a.position - b.position).norm() < a.radius + b.radius {
                            out.push(pair_event(tick, a, b));
                        }
                    }
                }
            }
        }
    }
    static_events(tick, bodies, obstacles, &mut out);
    sort_events(&mut out);
    out
}

/// Quadratic reference used to check the broad phase.
pub fn detect_collisions_all_pairs(tick: u64, bodies: &[Body], obstacles: &[Obstacle]) -> Vec<CollisionEvent> {
    let mut out = Vec::new();
    for i in 0..bodies.len() {
        for j in i + 1..bodies.len() {
            let (a, b) = (&bodies[i], &bodies[j]);
            if (a.position - b.position).norm() < a.radius + b.radius {
                out.push(pair_event(tick, a, b));
            }
        }
    }
    static_events(tick, bodies, obstacles, &mut out);
    sort_events(&mut out);
    out
}

/// Smallest centre distance between any two bodies, via the same grid with
/// cells sized to `within`. `None` when no pair is closer than `within`.
pub fn min_pair_distance(bodies: &[Body], within: f64) -> Option<f64> {
    let size = within.max(1e-6);
    let mut grid: HashMap<Cell, Vec<usize>> = HashMap::new();
    for (i, b) in bodies.iter().enumerate() {
        grid.entry(cell_of(&b.position, size)).or_default().push(i);
    }
    let mut best: Option<f64> = None;
    for (i, a) in bodies.iter().enumerate() {
        let (cx, cy, cz) = cell_of(&a.position, size);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    for &j in grid.get(&(cx + dx, cy + dy, cz + dz)).into_iter().flatten() {
                        if j > i {
                            let d = (a.position - bodies[j].position).norm();
                            if d < within {
                                best = Some(best.map_or(d, |m| m.min(d)));
                            }
                        }
                    }
                }
            }
        }
    }
    best
}
