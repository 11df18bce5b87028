//! Edge rewiring toward a requested edge-label homophily.
//!
//! The default strategy performs degree-preserving double-edge swaps:
//! `(a,b),(c,d) → (a,d),(c,b)` (or `(a,c),(b,d)`), accepted only when the
//! swap moves the cross-label edge count toward the target. Degree
//! preservation caps the number of cross-label edges at the smaller class's
//! stub count, so on imbalanced graphs low targets can be out of reach. The
//! endpoint strategy instead detaches one endpoint of an edge and reattaches
//! it to a node of the other (or same) class; it keeps the edge count but not
//! the degree sequence.

use std::collections::HashSet;

use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{AttributedGraph, Csr};
use crate::error::{Error, Result};

/// Attempted swaps per edge before giving up.
pub const SWAP_BUDGET_PER_EDGE: usize = 50;
/// Distance from the target (in homophily units) counted as reached.
pub const HOMOPHILY_TOLERANCE: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RewireStrategy {
    /// Double-edge swaps only; exact degree sequence is kept.
    #[default]
    DegreePreserving,
    /// Single-endpoint moves only.
    Endpoint,
    /// Double-edge swaps, then endpoint moves if swaps stall short of the target.
    Auto,
}

#[derive(Debug, Clone)]
pub struct RewireOutcome {
    pub graph: AttributedGraph,
    pub initial_homophily: f64,
    pub achieved_homophily: f64,
    pub accepted_swaps: usize,
    pub attempted_swaps: usize,
    pub endpoint_moves: usize,
    /// `|achieved - target| <= 0.03`.
    pub reached: bool,
    pub degree_preserved: bool,
}

struct EdgeState<'a> {
    labels: &'a [u8],
    edges: Vec<(usize, usize)>,
    present: HashSet<(usize, usize)>,
    cross: usize,
}

fn key(u: usize, v: usize) -> (usize, usize) {
    (u.min(v), u.max(v))
}

impl<'a> EdgeState<'a> {
    fn new(adjacency: &Csr, labels: &'a [u8]) -> Self {
        let edges = adjacency.undirected_edges();
        let present = edges.iter().copied().collect();
        let cross = edges.iter().filter(|&&(u, v)| labels[u] != labels[v]).count();
        EdgeState {
            labels,
            edges,
            present,
            cross,
        }
    }

    fn is_cross(&self, u: usize, v: usize) -> bool {
        self.labels[u] != self.labels[v]
    }

    fn homophily(&self) -> f64 {
        if self.edges.is_empty() {
            1.0
        } else {
            1.0 - self.cross as f64 / self.edges.len() as f64
        }
    }

    fn replace(&mut self, idx: usize, u: usize, v: usize) {
        let (a, b) = self.edges[idx];
        self.present.remove(&(a, b));
        if self.is_cross(a, b) {
            self.cross -= 1;
        }
        let k = key(u, v);
        self.present.insert(k);
        if self.is_cross(u, v) {
            self.cross += 1;
        }
        self.edges[idx] = k;
    }

    fn free(&self, u: usize, v: usize) -> bool {
        u != v && !self.present.contains(&key(u, v))
    }
}

fn swap_phase(state: &mut EdgeState, target_cross: usize, rng: &mut crate::Rng) -> (usize, usize) {
    let m = state.edges.len();
    let (mut accepted, mut attempted) = (0, 0);
    if m < 2 {
        return (0, 0);
    }
    let budget = SWAP_BUDGET_PER_EDGE * m;
    while state.cross.abs_diff(target_cross) > 1 && attempted < budget {
        attempted += 1;
        let i = rng.random_range(0..m);
        let j = rng.random_range(0..m);
        if i == j {
            continue;
        }
        let (a, b) = state.edges[i];
        let (c, d) = state.edges[j];
        let ((p, q), (r, s)) = if rng.random::<bool>() {
            ((a, d), (c, b))
        } else {
            ((a, c), (b, d))
        };
        if !state.free(p, q) || !state.free(r, s) || key(p, q) == key(r, s) {
            continue;
        }
        let before = state.is_cross(a, b) as isize + state.is_cross(c, d) as isize;
        let after = state.is_cross(p, q) as isize + state.is_cross(r, s) as isize;
        let new_cross = state.cross as isize + after - before;
        let gap_now = (state.cross as isize - target_cross as isize).abs();
        let gap_new = (new_cross - target_cross as isize).abs();
        if gap_new < gap_now {
            state.replace(i, p, q);
            state.replace(j, r, s);
            accepted += 1;
        }
    }
    (accepted, attempted)
}

fn endpoint_phase(state: &mut EdgeState, target_cross: usize, rng: &mut crate::Rng) -> usize {
    let n = state.labels.len();
    let by_class: [Vec<usize>; 2] = [
        (0..n).filter(|&i| state.labels[i] == 0).collect(),
        (0..n).filter(|&i| state.labels[i] == 1).collect(),
    ];
    let m = state.edges.len();
    let mut moves = 0;
    let mut attempts = 0;
    let budget = SWAP_BUDGET_PER_EDGE * m.max(1);
    while state.cross != target_cross && attempts < budget {
        attempts += 1;
        let want_more_cross = state.cross < target_cross;
        let idx = rng.random_range(0..m);
        let (u, v) = state.edges[idx];
        if state.is_cross(u, v) == want_more_cross {
            continue;
        }
        let keep = if rng.random::<bool>() { u } else { v };
        let class = state.labels[keep] as usize;
        let pool = if want_more_cross {
            &by_class[1 - class]
        } else {
            &by_class[class]
        };
        if pool.is_empty() {
            break;
        }
        let w = pool[rng.random_range(0..pool.len())];
        if !state.free(keep, w) {
            continue;
        }
        state.replace(idx, keep, w);
        moves += 1;
    }
    moves
}

/// Rewires `graph` toward edge-label homophily `target`. Node set, features,
/// labels and edge count are always preserved; the degree sequence is
/// preserved unless endpoint moves were needed.
pub fn rewire_to_homophily(
    graph: &AttributedGraph,
    target: f64,
    seed: u64,
    strategy: RewireStrategy,
) -> Result<RewireOutcome> {
    let labels = graph
        .labels()
        .ok_or_else(|| Error::Data("rewiring needs labels".into()))?;
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Config(format!("target homophily {target} outside [0, 1]")));
    }
    let mut rng = crate::rng_from_seed(seed);
    let mut state = EdgeState::new(graph.adjacency(), labels);
    let initial = state.homophily();
    let m = state.edges.len();
    let target_cross = ((1.0 - target) * m as f64).round() as usize;

    let (mut accepted, mut attempted, mut moves) = (0, 0, 0);
    if matches!(strategy, RewireStrategy::DegreePreserving | RewireStrategy::Auto) {
        (accepted, attempted) = swap_phase(&mut state, target_cross, &mut rng);
    }
    let close = |s: &EdgeState| (s.homophily() - target).abs() <= HOMOPHILY_TOLERANCE;
    let run_endpoint = match strategy {
        RewireStrategy::Endpoint => true,
        RewireStrategy::Auto => !close(&state),
        RewireStrategy::DegreePreserving => false,
    };
    if run_endpoint {
        moves = endpoint_phase(&mut state, target_cross, &mut rng);
    }

    let achieved = state.homophily();
    let reached = close(&state);
    if !reached {
        warn!(
            "rewiring '{}' toward homophily {target:.3} stopped at {achieved:.3}",
            graph.name
        );
    }
    let result = if accepted == 0 && moves == 0 {
        graph.clone()
    } else {
        let (csr, _) = Csr::from_edges(graph.num_nodes(), state.edges.iter().copied())?;
        graph.with_adjacency(csr)?
    };
    Ok(RewireOutcome {
        graph: result,
        initial_homophily: initial,
        achieved_homophily: achieved,
        accepted_swaps: accepted,
        attempted_swaps: attempted,
        endpoint_moves: moves,
        reached,
        degree_preserved: moves == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphstore::{compute_stats, generate_synthetic, SyntheticSpec};

    fn balanced(h: f64, seed: u64) -> AttributedGraph {
        generate_synthetic(&SyntheticSpec::new(400, 0.4, h, seed)).unwrap()
    }

    #[test]
    fn fixed_point_when_already_at_target() {
        let g = balanced(0.9, 1);
        let h = compute_stats(&g).edge_label_homophily.unwrap();
        let out = rewire_to_homophily(&g, h, 5, RewireStrategy::DegreePreserving).unwrap();
        assert_eq!(out.accepted_swaps, 0);
        assert_eq!(out.graph, g);
    }

    #[test]
    fn lowers_homophily_preserving_degrees() {
        let g = balanced(0.9, 2);
        let out = rewire_to_homophily(&g, 0.3, 11, RewireStrategy::DegreePreserving).unwrap();
        let h = compute_stats(&out.graph).edge_label_homophily.unwrap();
        assert!((0.27..=0.33).contains(&h), "{h}");
        assert!(out.reached && out.degree_preserved);
        assert_eq!(out.graph.adjacency().degrees(), g.adjacency().degrees());
        assert_eq!(out.graph.adjacency().num_edges(), g.adjacency().num_edges());
        assert_eq!(out.graph.features(), g.features());
        assert_eq!(out.graph.labels(), g.labels());
        assert!(out.graph.adjacency().is_well_formed());
    }

    #[test]
    fn swaps_stall_on_imbalanced_graph_and_endpoint_moves_finish() {
        let g = generate_synthetic(&SyntheticSpec::new(500, 0.05, 0.9, 3)).unwrap();
        let swaps = rewire_to_homophily(&g, 0.3, 4, RewireStrategy::DegreePreserving).unwrap();
        assert!(!swaps.reached);
        assert_eq!(swaps.graph.adjacency().degrees(), g.adjacency().degrees());

        let auto = rewire_to_homophily(&g, 0.3, 4, RewireStrategy::Auto).unwrap();
        assert!(auto.reached, "{}", auto.achieved_homophily);
        assert!(!auto.degree_preserved);
        assert_eq!(auto.graph.adjacency().num_edges(), g.adjacency().num_edges());
        assert!(auto.graph.adjacency().is_well_formed());
    }

    #[test]
    fn requires_labels() {
        let g = balanced(0.9, 1).without_labels();
        assert!(rewire_to_homophily(&g, 0.5, 1, RewireStrategy::Auto).is_err());
    }
}
