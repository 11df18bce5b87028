//! Node scoring and ranking, ranking metrics, per-class affinity histograms
//! and embedding export.

mod metrics;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffkernel::Matrix;
use crate::error::{Error, Result};
use crate::gnn::{forward_embeddings, predict, Domain, ModelBundle};
use crate::graphstore::{decode_f32, encode_f32, AttributedGraph, Csr};
use crate::losses::affinity_scores;

pub use metrics::{auprc, auroc, MetricResult};

pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const EMBEDDINGS_META_FILE: &str = "embeddings.json";
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    /// Negated neighbor affinity of the final embeddings.
    #[default]
    Affinity,
    /// Predictor head probability.
    Predictor,
}

impl ScoringMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoringMode::Affinity => "affinity",
            ScoringMode::Predictor => "predictor",
        }
    }
}

/// Per-node anomaly scores (higher is more anomalous) and the induced order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnomalyRanking {
    pub scores: Vec<f64>,
    /// Node ids by descending score, ties by ascending id.
    pub order: Vec<usize>,
    /// Nodes without neighbors; their affinity score is fixed at 0.
    pub isolated: Vec<bool>,
    pub mode: ScoringMode,
}

impl AnomalyRanking {
    pub fn from_scores(scores: Vec<f64>, isolated: Vec<bool>, mode: ScoringMode) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("anomaly scores"));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(AnomalyRanking {
            scores,
            order,
            isolated,
            mode,
        })
    }

    /// `rank\tnode\tscore` lines, best first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("rank\tnode\tscore\n");
        for (rank, &v) in self.order.iter().enumerate() {
            out.push_str(&format!("{}\t{v}\t{}\n", rank + 1, self.scores[v]));
        }
        out
    }
}

/// Eval-mode scores of every node of `graph`, encoded with the `domain`
/// encoder.
pub fn score_nodes(
    bundle: &ModelBundle,
    graph: &AttributedGraph,
    domain: Domain,
    mode: ScoringMode,
) -> Result<AnomalyRanking> {
    let (h, _) = forward_embeddings(bundle, graph, domain, None)?;
    let adj = graph.adjacency();
    let isolated: Vec<bool> = (0..graph.num_nodes()).map(|v| adj.degree(v) == 0).collect();
    AnomalyRanking::from_scores(scores_from_embeddings(bundle, &h, adj, mode)?, isolated, mode)
}

/// Anomaly scores from already computed final embeddings.
pub fn scores_from_embeddings(
    bundle: &ModelBundle,
    h: &Matrix,
    adjacency: &Csr,
    mode: ScoringMode,
) -> Result<Vec<f64>> {
    match mode {
        ScoringMode::Affinity => Ok(affinity_scores(h, adjacency).scores.iter().map(|s| -s).collect()),
        ScoringMode::Predictor => predict(&bundle.predictor, h),
    }
}

/// Scores `graph` and computes metrics against its labels.
pub fn evaluate(
    bundle: &ModelBundle,
    graph: &AttributedGraph,
    domain: Domain,
    mode: ScoringMode,
) -> Result<(MetricResult, AnomalyRanking)> {
    let labels = graph
        .labels()
        .ok_or_else(|| Error::Data("labels required for eval".into()))?;
    let ranking = score_nodes(bundle, graph, domain, mode)?;
    Ok((MetricResult::compute(&ranking.scores, labels, mode)?, ranking))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomophilyReport {
    /// Bin edges over [-1, 1]; `bins.len() == HISTOGRAM_BINS + 1`.
    pub bins: Vec<f64>,
    pub normal: Vec<usize>,
    pub anomaly: Vec<usize>,
    pub mean_normal: Option<f64>,
    pub mean_anomaly: Option<f64>,
}

/// Histogram of affinity scores per class. Isolated nodes are left out.
pub fn affinity_histograms(scores: &[f64], valid: &[bool], labels: &[u8]) -> HomophilyReport {
    let width = 2.0 / HISTOGRAM_BINS as f64;
    let bins = (0..=HISTOGRAM_BINS).map(|i| -1.0 + i as f64 * width).collect();
    let mut normal = vec![0; HISTOGRAM_BINS];
    let mut anomaly = vec![0; HISTOGRAM_BINS];
    let mut sums = [0.0; 2];
    for v in 0..scores.len() {
        if !valid[v] {
            continue;
        }
        let b = (((scores[v] + 1.0) / width).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        if labels[v] == 1 {
            anomaly[b] += 1;
            sums[1] += scores[v];
        } else {
            normal[b] += 1;
            sums[0] += scores[v];
        }
    }
    let mean = |sum: f64, hist: &[usize]| {
        let count: usize = hist.iter().sum();
        (count > 0).then(|| sum / count as f64)
    };
    HomophilyReport {
        mean_normal: mean(sums[0], &normal),
        mean_anomaly: mean(sums[1], &anomaly),
        bins,
        normal,
        anomaly,
    }
}

pub fn homophily_report(
    bundle: &ModelBundle,
    graph: &AttributedGraph,
    domain: Domain,
) -> Result<HomophilyReport> {
    let labels = graph
        .labels()
        .ok_or_else(|| Error::Data("labels required for the homophily report".into()))?;
    let (h, _) = forward_embeddings(bundle, graph, domain, None)?;
    let s = affinity_scores(&h, graph.adjacency());
    Ok(affinity_histograms(&s.scores, &s.valid, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub num_nodes: usize,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

/// Writes eval-mode final embeddings as `embeddings.bin` (f32, row-major)
/// with an `embeddings.json` sidecar into `dir`.
pub fn export_embeddings(
    bundle: &ModelBundle,
    graph: &AttributedGraph,
    domain: Domain,
    dir: impl AsRef<Path>,
) -> Result<Matrix> {
    if graph.num_nodes() == 0 {
        return Err(Error::Data("empty graph".into()));
    }
    let (h, _) = forward_embeddings(bundle, graph, domain, None)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(EMBEDDINGS_FILE);
    fs::write(&bin, encode_f32(&h)).map_err(|e| Error::io(&bin, e))?;
    let meta = EmbeddingMeta {
        num_nodes: h.rows(),
        dim: h.cols(),
        labels: graph.labels().map(<[u8]>::to_vec),
    };
    let side = dir.join(EMBEDDINGS_META_FILE);
    fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))?;
    Ok(h)
}

pub fn load_embeddings(dir: impl AsRef<Path>) -> Result<(Matrix, EmbeddingMeta)> {
    let dir = dir.as_ref();
    let side = dir.join(EMBEDDINGS_META_FILE);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: EmbeddingMeta = serde_json::from_str(&text)?;
    let bin = dir.join(EMBEDDINGS_FILE);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != meta.num_nodes * meta.dim * 4 {
        return Err(Error::Data(format!("{}: malformed binary length", bin.display())));
    }
    Ok((Matrix::from_vec(meta.num_nodes, meta.dim, decode_f32(&bytes))?, meta))
}
