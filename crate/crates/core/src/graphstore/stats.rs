use serde::{Deserialize, Serialize};

use super::{AttributedGraph, Csr};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeSummary {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub num_nodes: usize,
    pub num_edges: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly_rate: Option<f64>,
    /// Fraction of undirected edges whose endpoints share a label.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_label_homophily: Option<f64>,
    pub degree: DegreeSummary,
}

/// Fraction of edges joining same-label endpoints. A graph without edges is
/// reported as fully homophilic.
pub fn edge_label_homophily(adjacency: &Csr, labels: &[u8]) -> f64 {
    let edges = adjacency.undirected_edges();
    if edges.is_empty() {
        return 1.0;
    }
    let same = edges
        .iter()
        .filter(|&&(u, v)| labels[u] == labels[v])
        .count();
    same as f64 / edges.len() as f64
}

pub fn compute_stats(graph: &AttributedGraph) -> GraphStats {
    let adj = graph.adjacency();
    let n = graph.num_nodes();
    let degrees = adj.degrees();
    let degree = DegreeSummary {
        min: degrees.iter().copied().min().unwrap_or(0),
        mean: if n == 0 {
            0.0
        } else {
            adj.num_entries() as f64 / n as f64
        },
        max: degrees.iter().copied().max().unwrap_or(0),
    };
    let (anomaly_rate, edge_label_homophily) = match graph.labels() {
        Some(labels) if n > 0 => {
            let anomalies = labels.iter().filter(|&&l| l == 1).count();
            (
                Some(anomalies as f64 / n as f64),
                Some(edge_label_homophily(adj, labels)),
            )
        }
        _ => (None, None),
    };
    GraphStats {
        num_nodes: n,
        num_edges: adj.num_edges(),
        anomaly_rate,
        edge_label_homophily,
        degree,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::Matrix;

    fn graph(edges: &[(usize, usize)], labels: Option<Vec<u8>>, n: usize) -> AttributedGraph {
        AttributedGraph::from_edges("s", n, edges, Matrix::zeros(n, 1), labels).unwrap()
    }

    #[test]
    fn path_with_one_anomaly() {
        let s = compute_stats(&graph(&[(0, 1), (1, 2)], Some(vec![0, 0, 1]), 3));
        assert!((s.anomaly_rate.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.edge_label_homophily, Some(0.5));
        assert_eq!(s.degree.min, 1);
        assert_eq!(s.degree.max, 2);
    }

    #[test]
    fn all_normal_is_fully_homophilic() {
        let s = compute_stats(&graph(&[(0, 1), (1, 2)], Some(vec![0, 0, 0]), 3));
        assert_eq!(s.edge_label_homophily, Some(1.0));
        assert_eq!(s.anomaly_rate, Some(0.0));
    }

    #[test]
    fn extremes() {
        let cross = graph(&[(0, 2), (1, 3)], Some(vec![0, 0, 1, 1]), 4);
        assert_eq!(compute_stats(&cross).edge_label_homophily, Some(0.0));
        let intra = graph(&[(0, 1), (2, 3)], Some(vec![0, 0, 1, 1]), 4);
        assert_eq!(compute_stats(&intra).edge_label_homophily, Some(1.0));
    }

    #[test]
    fn unlabeled_omits_homophily() {
        let s = compute_stats(&graph(&[(0, 1)], None, 2));
        assert!(s.edge_label_homophily.is_none());
        assert!(s.anomaly_rate.is_none());
        let json = serde_json::to_value(&s).unwrap();
        assert!(json.get("edge_label_homophily").is_none());
    }
}
