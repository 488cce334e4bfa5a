use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use serde::Serialize;

use super::AirwayNetwork;
use crate::error::Result;

/// A shortest path between two airport-linked nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Route {
    pub nodes: Vec<String>,
    pub airways: Vec<String>,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, node index as deterministic tiebreak
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn tight(du: f64, w: f64, dv: f64) -> bool {
    (du + w - dv).abs() <= 1e-9 * dv.abs().max(1.0)
}

/// Shortest route over open airways between the linked nodes of two airports.
///
/// Among equal-length optima the lexicographically smallest node-id sequence
/// wins. Returns `Ok(None)` when closures disconnect the airports.
pub fn shortest_route(net: &AirwayNetwork, from: &str, to: &str, closed: &HashSet<String>) -> Result<Option<Route>> {
    let src = net.node_idx(&net.airport(from)?.linked_node)?;
    let dst = net.node_idx(&net.airport(to)?.linked_node)?;
    Ok(route_between(net, src, dst, closed))
}

/// Shortest route between two nodes, same rules as [`shortest_route`].
pub fn shortest_route_from_node(net: &AirwayNetwork, from: &str, to: &str, closed: &HashSet<String>) -> Result<Option<Route>> {
    let src = net.node_idx(from)?;
    let dst = net.node_idx(to)?;
    Ok(route_between(net, src, dst, closed))
}

fn route_between(net: &AirwayNetwork, src: usize, dst: usize, closed: &HashSet<String>) -> Option<Route> {
    let closed_idx: HashSet<usize> = closed.iter().filter_map(|id| net.airway_idx(id).ok()).collect();
    shortest_node_route(net, src, dst, &closed_idx).map(|(nodes, length)| {
        let airways = nodes
            .windows(2)
            .map(|w| {
                let i = net.airway_from_to(w[0], w[1]).expect("route edge exists");
                net.airways()[i].id.clone()
            })
            .collect();
        Route { nodes: nodes.iter().map(|&i| net.nodes()[i].id.clone()).collect(), airways, length }
    })
}

/// Index-level routing between two nodes.
pub(crate) fn shortest_node_route(
    net: &AirwayNetwork,
    src: usize,
    dst: usize,
    closed: &HashSet<usize>,
) -> Option<(Vec<usize>, f64)> {
    let n = net.nodes().len();
    let weight = |airway: usize| net.airway_length(airway).unwrap_or(f64::INFINITY);
    let open = |airway: usize| !closed.contains(&airway);

    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Entry { dist: 0.0, node: src });
    while let Some(Entry { dist: d, node: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for e in net.out_edges(u) {
            if !open(e.airway) {
                continue;
            }
            let nd = d + weight(e.airway);
            if nd < dist[e.to] {
                dist[e.to] = nd;
                heap.push(Entry { dist: nd, node: e.to });
            }
        }
    }
    if !dist[dst].is_finite() {
        return None;
    }

    // Nodes from which dst is reachable along tight (shortest-path) edges.
    let mut reaches = vec![false; n];
    reaches[dst] = true;
    let mut order: Vec<usize> = (0..n).filter(|&v| dist[v].is_finite()).collect();
    order.sort_by(|a, b| dist[*b].total_cmp(&dist[*a]));
    for &u in &order {
        if reaches[u] {
            continue;
        }
        reaches[u] = net.out_edges(u).iter().any(|e| {
            open(e.airway) && reaches[e.to] && tight(dist[u], weight(e.airway), dist[e.to]) && dist[e.to] > dist[u]
        });
    }

    // Greedy walk picking the smallest next node id keeps the sequence
    // lexicographically minimal.
    let ids = net.nodes();
    let mut path = vec![src];
    let mut cur = src;
    while cur != dst {
        let next = net
            .out_edges(cur)
            .iter()
            .filter(|e| {
                open(e.airway) && reaches[e.to] && tight(dist[cur], weight(e.airway), dist[e.to]) && dist[e.to] > dist[cur]
            })
            .map(|e| e.to)
            .min_by(|a, b| ids[*a].id.cmp(&ids[*b].id))?;
        path.push(next);
        cur = next;
    }
    Some((path, dist[dst]))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{generate_grid_network, Airway};
    use super::*;
    use proptest::prelude::*;

    fn triangle() -> AirwayNetwork {
        // |ab| = 3, |bc| = 4, |ac| = 5
        AirwayNetwork::new(
            vec![node("a", 0., 0.), node("b", 3., 0.), node("c", 3., 4.)],
            vec![port("PA", "a", 0., 0.), port("PC", "c", 3., 4.)],
            vec![way("ab", "a", "b"), way("bc", "b", "c"), way("ac", "a", "c")],
        )
    }

    #[test]
    fn identity_route() {
        let r = shortest_route(&triangle(), "PA", "PA", &HashSet::new()).unwrap().unwrap();
        assert_eq!(r.nodes, vec!["a"]);
        assert_eq!(r.length, 0.0);
    }

    #[test]
    fn direct_edge_wins_then_detour_after_closure() {
        let net = triangle();
        let r = shortest_route(&net, "PA", "PC", &HashSet::new()).unwrap().unwrap();
        assert_eq!(r.nodes, vec!["a", "c"]);
        assert!((r.length - 5.0).abs() < 1e-12);
        let closed: HashSet<String> = ["ac".to_string()].into();
        let r = shortest_route(&net, "PA", "PC", &closed).unwrap().unwrap();
        assert_eq!(r.nodes, vec!["a", "b", "c"]);
        assert_eq!(r.airways, vec!["ab", "bc"]);
        assert!((r.length - 7.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_airport_and_no_route() {
        let net = triangle();
        assert!(shortest_route(&net, "PA", "nope", &HashSet::new()).is_err());
        let closed: HashSet<String> = ["ac".to_string(), "bc".to_string()].into();
        assert_eq!(shortest_route(&net, "PA", "PC", &closed).unwrap(), None);
    }

    #[test]
    fn respects_direction() {
        let mut ways = vec![way("ab", "a", "b"), way("bc", "b", "c"), way("ac", "a", "c")];
        ways[2] = Airway { bidirectional: false, endpoints: ("c".into(), "a".into()), ..ways[2].clone() };
        let net = AirwayNetwork::new(
            vec![node("a", 0., 0.), node("b", 3., 0.), node("c", 3., 4.)],
            vec![port("PA", "a", 0., 0.), port("PC", "c", 3., 4.)],
            ways,
        );
        assert_eq!(shortest_route(&net, "PA", "PC", &HashSet::new()).unwrap().unwrap().nodes, vec!["a", "b", "c"]);
        assert_eq!(shortest_route(&net, "PC", "PA", &HashSet::new()).unwrap().unwrap().nodes, vec!["c", "a"]);
    }

    #[test]
    fn equal_length_tie_takes_smallest_ids() {
        // square: two equal paths s-x-t and s-y-t
        let net = AirwayNetwork::new(
            vec![node("s", 0., 0.), node("y", 10., 0.), node("x", 0., 10.), node("t", 10., 10.)],
            vec![port("S", "s", 0., 0.), port("T", "t", 0., 0.)],
            vec![way("1", "s", "y"), way("2", "y", "t"), way("3", "s", "x"), way("4", "x", "t")],
        );
        assert_eq!(shortest_route(&net, "S", "T", &HashSet::new()).unwrap().unwrap().nodes, vec!["s", "x", "t"]);
    }

    /// Exhaustive simple-path enumeration; returns (best length, best sequence).
    pub(crate) fn enumerate_best(net: &AirwayNetwork, src: usize, dst: usize, closed: &HashSet<usize>) -> Option<(f64, Vec<String>)> {
        fn dfs(
            net: &AirwayNetwork,
            cur: usize,
            dst: usize,
            closed: &HashSet<usize>,
            seen: &mut Vec<bool>,
            path: &mut Vec<usize>,
            len: f64,
            out: &mut Vec<(f64, Vec<String>)>,
        ) {
            if cur == dst {
                out.push((len, path.iter().map(|&i| net.nodes()[i].id.clone()).collect()));
                return;
            }
            for w in 0..net.airways().len() {
                if closed.contains(&w) {
                    continue;
                }
                let Some((a, b)) = net.airway_nodes(w) else { continue };
                let next = if a == cur {
                    b
                } else if b == cur && net.airways()[w].bidirectional {
                    a
                } else {
                    continue;
                };
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                path.push(next);
                let l = len + net.airway_length(w).unwrap();
                dfs(net, next, dst, closed, seen, path, l, out);
                path.pop();
                seen[next] = false;
            }
        }
        let mut out = Vec::new();
        let mut seen = vec![false; net.nodes().len()];
        seen[src] = true;
        dfs(net, src, dst, closed, &mut seen, &mut vec![src], 0.0, &mut out);
        let best = out.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return None;
        }
        let seq = out
            .into_iter()
            .filter(|(l, _)| tight(best, 0.0, *l))
            .map(|(_, s)| s)
            .min()
            .unwrap();
        Some((best, seq))
    }

    pub(crate) fn random_graph(seed: u64) -> AirwayNetwork {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=8);
        let nodes: Vec<_> = (0..n)
            .map(|i| {
                // integer coordinates produce plenty of exact length ties
                node(&format!("n{i}"), rng.random_range(0..4) as f64 * 10.0, rng.random_range(0..4) as f64 * 10.0 + i as f64 * 1e-3)
            })
            .collect();
        let mut ways = Vec::new();
        // spanning chain keeps the undirected graph connected
        for i in 1..n {
            let j = rng.random_range(0..i);
            ways.push(Airway { bidirectional: true, ..way(&format!("w{}", ways.len()), &format!("n{j}"), &format!("n{i}")) });
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(0.35) && !ways.iter().any(|w| {
                    let e = (&w.endpoints.0, &w.endpoints.1);
                    (e.0 == &format!("n{i}") && e.1 == &format!("n{j}")) || (e.0 == &format!("n{j}") && e.1 == &format!("n{i}"))
                }) {
                    let bidirectional = rng.random_bool(0.7);
                    let (a, b) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
                    ways.push(Airway { bidirectional, ..way(&format!("w{}", ways.len()), &format!("n{a}"), &format!("n{b}")) });
                }
            }
        }
        let ports = (0..n).map(|i| port(&format!("P{i}"), &format!("n{i}"), 0., 0.)).collect();
        AirwayNetwork::new(nodes, ports, ways)
    }

    #[test]
    fn matches_enumeration_on_random_graphs() {
        for seed in 0..500 {
            let net = random_graph(seed);
            let n = net.nodes().len();
            let closed: HashSet<usize> = if seed % 3 == 0 { [0usize].into() } else { HashSet::new() };
            for s in 0..n {
                for t in 0..n {
                    let got = shortest_node_route(&net, s, t, &closed);
                    let want = enumerate_best(&net, s, t, &closed);
                    match (got, want) {
                        (None, None) => {}
                        (Some((path, len)), Some((best, seq))) => {
                            assert!(tight(best, 0.0, len), "seed {seed}: {len} vs {best}");
                            let ids: Vec<String> = path.iter().map(|&i| net.nodes()[i].id.clone()).collect();
                            assert_eq!(ids, seq, "seed {seed}");
                        }
                        (g, w) => panic!("seed {seed}: {g:?} vs {w:?}"),
                    }
                }
            }
        }
    }

    #[test]
    fn routes_are_edge_connected() {
        let net = generate_grid_network(4, 4, 100.0, 120.0, 5).unwrap();
        for a in net.airports() {
            for b in net.airports() {
                let r = shortest_route(&net, &a.id, &b.id, &HashSet::new()).unwrap().unwrap();
                for pair in r.nodes.windows(2) {
                    let u = net.node_idx(&pair[0]).unwrap();
                    let v = net.node_idx(&pair[1]).unwrap();
                    assert!(net.airway_from_to(u, v).is_some());
                }
            }
        }
    }

    proptest! {
        #[test]
        fn adding_an_airway_never_lengthens(seed in 0u64..2000, extra_e in 0.0f64..40.0, extra_n in 0.0f64..40.0) {
            let net = random_graph(seed);
            let n = net.nodes().len();
            let mut nodes = net.nodes().to_vec();
            nodes.push(node("zz", extra_e, extra_n));
            let mut ways = net.airways().to_vec();
            ways.push(way("extra1", "n0", "zz"));
            ways.push(way("extra2", "zz", &format!("n{}", n - 1)));
            let bigger = AirwayNetwork::new(nodes, net.airports().to_vec(), ways);
            for s in 0..n {
                for t in 0..n {
                    let before = shortest_node_route(&net, s, t, &HashSet::new()).map(|x| x.1).unwrap_or(f64::INFINITY);
                    let after = shortest_node_route(&bigger, s, t, &HashSet::new()).map(|x| x.1).unwrap_or(f64::INFINITY);
                    prop_assert!(after <= before + 1e-9);
                }
            }
        }
    }
}
