//! Attributed graphs: CSR adjacency, node features, optional anomaly labels.

mod io;
mod rewire;
mod stats;
mod synthetic;

use std::sync::Arc;

use rand::seq::SliceRandom;

pub use io::{
    decode_f32, encode_f32, load_graph, save_graph, EDGES_FILE, FEATURES_FILE, LABELS_FILE, META_FILE,
};
pub use rewire::{rewire_to_homophily, RewireOutcome, RewireStrategy};
pub use stats::{compute_stats, edge_label_homophily, DegreeSummary, GraphStats};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::diffkernel::{Matrix, Segments};
use crate::error::{Error, Result};

/// Symmetric adjacency in compressed sparse row form. Rows are sorted, carry
/// no duplicates and no self-loops.
#[derive(Debug, Clone)]
pub struct Csr {
    offsets: Arc<[usize]>,
    cols: Arc<[usize]>,
    /// Row (source node) of each entry.
    entry_rows: Arc<[usize]>,
    /// Index of the mirrored entry `(j, i)` for each entry `(i, j)`.
    reverse: Arc<[usize]>,
}

impl PartialEq for Csr {
    fn eq(&self, other: &Self) -> bool {
        self.offsets == other.offsets && self.cols == other.cols
    }
}

impl Csr {
    /// Builds a symmetric adjacency from an undirected edge list. Either
    /// orientation is accepted; duplicates collapse. Self-loops are dropped
    /// and counted in the second return value.
    pub fn from_edges(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<(Csr, usize)> {
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        let mut self_loops = 0;
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Data(format!(
                    "node id out of range: edge ({u}, {v}) with {num_nodes} nodes"
                )));
            }
            if u == v {
                self_loops += 1;
                continue;
            }
            lists[u].push(v);
            lists[v].push(u);
        }
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
        }
        Ok((Self::from_sorted_lists(&lists), self_loops))
    }

    fn from_sorted_lists(lists: &[Vec<usize>]) -> Csr {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut cols = Vec::new();
        let mut entry_rows = Vec::new();
        for (i, list) in lists.iter().enumerate() {
            cols.extend_from_slice(list);
            entry_rows.extend(std::iter::repeat_n(i, list.len()));
            offsets.push(cols.len());
        }
        let mut reverse = vec![0; cols.len()];
        for e in 0..cols.len() {
            let (i, j) = (entry_rows[e], cols[e]);
            let row = &cols[offsets[j]..offsets[j + 1]];
            let pos = row.binary_search(&i).expect("adjacency is symmetric");
            reverse[e] = offsets[j] + pos;
        }
        Csr {
            offsets: offsets.into(),
            cols: cols.into(),
            entry_rows: entry_rows.into(),
            reverse: reverse.into(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Stored entries; each undirected edge appears twice.
    pub fn num_entries(&self) -> usize {
        self.cols.len()
    }

    pub fn num_edges(&self) -> usize {
        self.cols.len() / 2
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.cols[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes()).map(|v| self.degree(v)).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Position of entry `(u, v)` in the entry arrays.
    pub fn entry_index(&self, u: usize, v: usize) -> Option<usize> {
        self.neighbors(u)
            .binary_search(&v)
            .ok()
            .map(|p| self.offsets[u] + p)
    }

    pub fn offsets(&self) -> &Arc<[usize]> {
        &self.offsets
    }

    pub fn cols(&self) -> &Arc<[usize]> {
        &self.cols
    }

    pub fn entry_rows(&self) -> &Arc<[usize]> {
        &self.entry_rows
    }

    pub fn reverse(&self) -> &Arc<[usize]> {
        &self.reverse
    }

    pub fn segments(&self) -> Segments {
        Segments {
            offsets: self.offsets.clone(),
            cols: self.cols.clone(),
        }
    }

    /// Undirected edges as `(u, v)` with `u < v`, in row order.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        (0..self.cols.len())
            .filter(|&e| self.entry_rows[e] < self.cols[e])
            .map(|e| (self.entry_rows[e], self.cols[e]))
            .collect()
    }

    /// True when every entry has its mirror, rows are strictly increasing and
    /// no self-loops exist.
    pub fn is_well_formed(&self) -> bool {
        (0..self.num_nodes()).all(|v| {
            let row = self.neighbors(v);
            row.windows(2).all(|w| w[0] < w[1])
                && row.iter().all(|&u| u != v && u < self.num_nodes() && self.has_edge(u, v))
        })
    }

    /// Restricts every node to at most `cap` neighbors. Each node proposes a
    /// random subset of `cap` neighbors; an edge survives when both endpoints
    /// proposed it, which keeps the result symmetric.
    pub fn capped(&self, cap: usize, rng: &mut crate::Rng) -> Csr {
        let n = self.num_nodes();
        let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(n);
        for v in 0..n {
            let mut row = self.neighbors(v).to_vec();
            if row.len() > cap {
                row.shuffle(rng);
                row.truncate(cap);
                row.sort_unstable();
            }
            chosen.push(row);
        }
        let lists: Vec<Vec<usize>> = (0..n)
            .map(|v| {
                chosen[v]
                    .iter()
                    .copied()
                    .filter(|&u| chosen[u].binary_search(&v).is_ok())
                    .collect()
            })
            .collect();
        Self::from_sorted_lists(&lists)
    }
}

/// Node-attributed undirected graph with optional 0/1 anomaly labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedGraph {
    pub name: String,
    adjacency: Csr,
    features: Matrix,
    labels: Option<Vec<u8>>,
}

impl AttributedGraph {
    /// Validates and assembles a graph. `adjacency` must already satisfy the
    /// CSR invariants (use [`Csr::from_edges`]).
    pub fn new(
        name: impl Into<String>,
        adjacency: Csr,
        features: Matrix,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        let n = adjacency.num_nodes();
        if features.rows() != n {
            return Err(Error::Data(format!(
                "feature row count mismatch: {} rows for {n} nodes",
                features.rows()
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Data(format!(
                    "label count mismatch: {} labels for {n} nodes",
                    labels.len()
                )));
            }
            if labels.iter().any(|&l| l > 1) {
                return Err(Error::Data("label value outside {0,1}".into()));
            }
        }
        if !features.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(AttributedGraph {
            name: name.into(),
            adjacency,
            features,
            labels,
        })
    }

    /// Convenience constructor from an edge list.
    pub fn from_edges(
        name: impl Into<String>,
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Matrix,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        let (csr, _) = Csr::from_edges(num_nodes, edges.iter().copied())?;
        Self::new(name, csr, features, labels)
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn adjacency(&self) -> &Csr {
        &self.adjacency
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Labels, or a data error naming the graph.
    pub fn require_labels(&self) -> Result<&[u8]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data(format!("graph '{}' has no labels", self.name)))
    }

    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.adjacency.clone(),
            features,
            self.labels.clone(),
        )
    }

    pub fn with_adjacency(&self, adjacency: Csr) -> Result<Self> {
        Self::new(
            self.name.clone(),
            adjacency,
            self.features.clone(),
            self.labels.clone(),
        )
    }

    pub fn without_labels(&self) -> Self {
        AttributedGraph {
            labels: None,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetrizes_and_cleans() {
        let (csr, loops) =
            Csr::from_edges(4, [(0, 1), (1, 0), (2, 1), (3, 3), (0, 1)]).unwrap();
        assert_eq!(loops, 1);
        assert_eq!(csr.neighbors(0), &[1]);
        assert_eq!(csr.neighbors(1), &[0, 2]);
        assert_eq!(csr.neighbors(3), &[] as &[usize]);
        assert_eq!(csr.num_edges(), 2);
        assert!(csr.is_well_formed());
        for e in 0..csr.num_entries() {
            let r = csr.reverse()[e];
            assert_eq!(csr.entry_rows()[r], csr.cols()[e]);
            assert_eq!(csr.cols()[r], csr.entry_rows()[e]);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(Csr::from_edges(2, [(0, 2)]).is_err());
    }

    #[test]
    fn cap_keeps_symmetry_and_bound() {
        let edges: Vec<_> = (0..20).flat_map(|i| (i + 1..20).map(move |j| (i, j))).collect();
        let (csr, _) = Csr::from_edges(20, edges).unwrap();
        let capped = csr.capped(5, &mut crate::rng_from_seed(1));
        assert!(capped.is_well_formed());
        assert!((0..20).all(|v| capped.degree(v) <= 5));
    }

    #[test]
    fn graph_validation() {
        let (csr, _) = Csr::from_edges(3, [(0, 1)]).unwrap();
        let f = Matrix::zeros(3, 2);
        assert!(AttributedGraph::new("g", csr.clone(), Matrix::zeros(2, 2), None).is_err());
        let err = AttributedGraph::new("g", csr.clone(), f.clone(), Some(vec![0, 2, 1]))
            .unwrap_err();
        assert_eq!(err.to_string(), "label value outside {0,1}");
        let g = AttributedGraph::new("g", csr, f, Some(vec![0, 1, 0])).unwrap();
        assert_eq!(g.adjacency().degree(2), 0);
    }
}
