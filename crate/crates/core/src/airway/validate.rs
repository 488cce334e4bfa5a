use std::collections::{BTreeSet, HashMap, HashSet};

use serde::Serialize;

use super::AirwayNetwork;
use crate::world::geometry::segment_segment_distance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationRule {
    DuplicateId,
    NonFinitePosition,
    MissingLinkedNode,
    InvalidPads,
    MissingEndpoint,
    SelfLoop,
    NonPositiveRadius,
    InvalidCapacity,
    DuplicateEdge,
    Disconnected,
    CorridorConflict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub rule: ViolationRule,
    pub entities: Vec<String>,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?} [{}]: {}", self.rule, self.entities.join(", "), self.detail)
    }
}

fn push(out: &mut Vec<Violation>, rule: ViolationRule, entities: Vec<String>, detail: impl Into<String>) {
    out.push(Violation { rule, entities, detail: detail.into() });
}

/// Checks every structural invariant of the network. An empty result means
/// the network is valid.
pub fn validate_network(net: &AirwayNetwork) -> Vec<Violation> {
    use ViolationRule::*;
    let mut out = Vec::new();

    let mut seen = HashSet::new();
    for n in net.nodes() {
        if !seen.insert(n.id.as_str()) {
            push(&mut out, DuplicateId, vec![n.id.clone()], "node id used more than once");
        }
        if !n.position.is_finite() {
            push(&mut out, NonFinitePosition, vec![n.id.clone()], "node position not finite");
        }
    }
    let mut seen = HashSet::new();
    for a in net.airports() {
        if !seen.insert(a.id.as_str()) {
            push(&mut out, DuplicateId, vec![a.id.clone()], "airport id used more than once");
        }
        if !a.ground_position.is_finite() {
            push(&mut out, NonFinitePosition, vec![a.id.clone()], "airport position not finite");
        }
        if net.node_idx(&a.linked_node).is_err() {
            push(&mut out, MissingLinkedNode, vec![a.id.clone(), a.linked_node.clone()], "linked node does not exist");
        }
        if a.pads < 1 {
            push(&mut out, InvalidPads, vec![a.id.clone()], "airport needs at least one pad");
        }
    }
    let mut seen = HashSet::new();
    let mut pairs: HashMap<(String, String), String> = HashMap::new();
    for w in net.airways() {
        if !seen.insert(w.id.as_str()) {
            push(&mut out, DuplicateId, vec![w.id.clone()], "airway id used more than once");
        }
        let (a, b) = &w.endpoints;
        for end in [a, b] {
            if net.node_idx(end).is_err() {
                push(&mut out, MissingEndpoint, vec![w.id.clone(), end.clone()], "airway endpoint does not exist");
            }
        }
        if a == b {
            push(&mut out, SelfLoop, vec![w.id.clone()], "airway endpoints must differ");
        }
        if !(w.corridor_radius > 0.0) {
            push(&mut out, NonPositiveRadius, vec![w.id.clone()], "corridor radius must be positive");
        }
        if w.capacity < 1 {
            push(&mut out, InvalidCapacity, vec![w.id.clone()], "capacity must be positive");
        }
        let key = if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
        if let Some(first) = pairs.get(&key) {
            push(&mut out, DuplicateEdge, vec![first.clone(), w.id.clone()], format!("both join {} and {}", key.0, key.1));
        } else {
            pairs.insert(key, w.id.clone());
        }
    }

    // undirected connectivity across airport-linked nodes
    let linked: BTreeSet<usize> = net.airports().iter().filter_map(|a| net.node_idx(&a.linked_node).ok()).collect();
    if let Some(&start) = linked.iter().next() {
        let n = net.nodes().len();
        let mut adj = vec![Vec::new(); n];
        for i in 0..net.airways().len() {
            if let Some((a, b)) = net.airway_nodes(i) {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let mut reached = vec![false; n];
        let mut stack = vec![start];
        reached[start] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !reached[v] {
                    reached[v] = true;
                    stack.push(v);
                }
            }
        }
        let missing: Vec<String> = linked.iter().filter(|&&i| !reached[i]).map(|&i| net.nodes()[i].id.clone()).collect();
        if !missing.is_empty() {
            push(&mut out, Disconnected, missing, "airport-linked nodes unreachable from the rest of the network");
        }
    }

    // corridor separation between non-adjacent airways
    let ways = net.airways();
    for i in 0..ways.len() {
        let Some((ia, ib)) = net.airway_nodes(i) else { continue };
        let (p1, q1) = net.centerline(i).unwrap();
        for j in (i + 1)..ways.len() {
            let Some((ja, jb)) = net.airway_nodes(j) else { continue };
            if ia == ja || ia == jb || ib == ja || ib == jb {
                continue;
            }
            let (p2, q2) = net.centerline(j).unwrap();
            let d = segment_segment_distance(&p1, &q1, &p2, &q2);
            let need = ways[i].corridor_radius + ways[j].corridor_radius;
            if d < need {
                push(
                    &mut out,
                    CorridorConflict,
                    vec![ways[i].id.clone(), ways[j].id.clone()],
                    format!("centrelines {d:.2} m apart, corridors need {need:.2} m"),
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{generate_grid_network, AirwayNetwork};
    use super::*;
    use proptest::prelude::*;

    fn base() -> (Vec<super::super::AirwayNode>, Vec<super::super::Airport>, Vec<super::super::Airway>) {
        (
            vec![node("a", 0., 0.), node("b", 100., 0.), node("c", 100., 100.)],
            vec![port("PA", "a", 5., 5.), port("PC", "c", 95., 95.)],
            vec![way("ab", "a", "b"), way("bc", "b", "c")],
        )
    }

    #[test]
    fn valid_network_has_no_violations() {
        let (n, p, w) = base();
        assert!(validate_network(&AirwayNetwork::new(n, p, w)).is_empty());
    }

    #[test]
    fn missing_linked_node() {
        let (n, mut p, w) = base();
        p.push(port("PX", "zz", 0., 0.));
        let v = validate_network(&AirwayNetwork::new(n, p, w));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, ViolationRule::MissingLinkedNode);
        assert_eq!(v[0].entities, vec!["PX", "zz"]);
    }

    #[test]
    fn duplicate_edge() {
        let (n, p, mut w) = base();
        w.push(way("ba", "b", "a"));
        let v = validate_network(&AirwayNetwork::new(n, p, w));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, ViolationRule::DuplicateEdge);
        assert_eq!(v[0].entities, vec!["ab", "ba"]);
    }

    #[test]
    fn disconnected_airport() {
        let (mut n, mut p, w) = base();
        n.push(node("d", 500., 500.));
        p.push(port("PD", "d", 0., 0.));
        let v = validate_network(&AirwayNetwork::new(n, p, w));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, ViolationRule::Disconnected);
    }

    #[test]
    fn crossing_corridors_reported() {
        let n = vec![node("a", 0., 50.), node("b", 100., 50.), node("c", 50., 0.), node("d", 50., 100.)];
        let w = vec![way("ab", "a", "b"), way("cd", "c", "d"), way("bd", "b", "d")];
        let v = validate_network(&AirwayNetwork::new(n, vec![], w));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, ViolationRule::CorridorConflict);
    }

    #[test]
    fn bad_airway_fields() {
        let (n, p, mut w) = base();
        w[0].corridor_radius = 0.0;
        w[1].capacity = 0;
        w.push(way("loop", "a", "a"));
        let rules: Vec<_> = validate_network(&AirwayNetwork::new(n, p, w)).into_iter().map(|v| v.rule).collect();
        assert!(rules.contains(&ViolationRule::NonPositiveRadius));
        assert!(rules.contains(&ViolationRule::InvalidCapacity));
        assert!(rules.contains(&ViolationRule::SelfLoop));
    }

    proptest! {
        #[test]
        fn generated_grids_validate(rows in 2usize..7, cols in 2usize..7, spacing in 30.0f64..500.0, alt in 10.0f64..300.0, every in 1usize..6) {
            let net = generate_grid_network(rows, cols, spacing, alt, every).unwrap();
            let v = validate_network(&net);
            prop_assert!(v.is_empty(), "{:?}", v);
        }
    }
}
