use super::{Airport, Airway, AirwayNetwork, AirwayNode, DEFAULT_CAPACITY, DEFAULT_PADS};
use crate::error::{Result, SimError};
use crate::world::geometry::LocalPoint;

/// Lattice network: `rows × cols` nodes at `altitude`, bidirectional airways
/// along rows and columns, and an airport beside every `airport_every`-th node.
///
/// Node `k = r·cols + c` sits at `(c·spacing, r·spacing)` and is named
/// `N0000`-style so lexicographic id order equals index order. Airports sit on
/// the ground diagonally inside the adjacent cell, away from any centreline.
pub fn generate_grid_network(rows: usize, cols: usize, spacing: f64, altitude: f64, airport_every: usize) -> Result<AirwayNetwork> {
    if rows < 2 || cols < 2 {
        return Err(SimError::validation("grid needs at least 2 rows and 2 columns"));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(SimError::validation("grid spacing must be positive"));
    }
    if !altitude.is_finite() {
        return Err(SimError::validation("grid altitude must be finite"));
    }
    if airport_every == 0 {
        return Err(SimError::validation("airport_every must be positive"));
    }
    let radius = (spacing / 4.0).min(super::DEFAULT_CORRIDOR_RADIUS);
    let nid = |r: usize, c: usize| format!("N{:04}", r * cols + c);

    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            nodes.push(AirwayNode {
                id: nid(r, c),
                position: LocalPoint::new(c as f64 * spacing, r as f64 * spacing, altitude),
            });
        }
    }

    let mut airways = Vec::new();
    let mut add = |a: String, b: String| {
        airways.push(Airway {
            id: format!("W{:04}", airways.len()),
            endpoints: (a, b),
            corridor_radius: radius,
            bidirectional: true,
            capacity: DEFAULT_CAPACITY,
        });
    };
    for r in 0..rows {
        for c in 0..cols - 1 {
            add(nid(r, c), nid(r, c + 1));
        }
    }
    for r in 0..rows - 1 {
        for c in 0..cols {
            add(nid(r, c), nid(r + 1, c));
        }
    }

    let offset = (spacing * 0.15).min(30.0);
    let mut airports = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let k = r * cols + c;
            if k % airport_every != 0 {
                continue;
            }
            // step into the cell that exists on this side of the lattice
            let de = if c + 1 < cols { offset } else { -offset };
            let dn = if r + 1 < rows { offset } else { -offset };
            airports.push(Airport {
                id: format!("A{:03}", airports.len()),
                ground_position: LocalPoint::new(c as f64 * spacing + de, r as f64 * spacing + dn, 0.0),
                linked_node: nid(r, c),
                pads: DEFAULT_PADS,
            });
        }
    }
    Ok(AirwayNetwork::new(nodes, airports, airways))
}
