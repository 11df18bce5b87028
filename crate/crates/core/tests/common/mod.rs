#![allow(dead_code)]

use gadt3::diffkernel::Matrix;
use gadt3::gnn::{ModelBundle, ModelDims, ProjectionEncoder, Domain};
use gadt3::graphstore::AttributedGraph;
use rand::Rng;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Erdős–Rényi graph with uniform features and labels holding at
/// least one node of each class.
pub fn random_graph(n: usize, p: f64, dim: usize, rng: &mut impl Rng) -> AttributedGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.25))).collect();
    labels[0] = 1;
    labels[n - 1] = 0;
    AttributedGraph::from_edges("random", n, &edges, random_matrix(n, dim, rng), Some(labels)).unwrap()
}

pub fn small_dims() -> ModelDims {
    ModelDims {
        embedding_dim: 5,
        hidden_dim: 4,
        attn_dim: 3,
        num_layers: 2,
        predictor_hidden: 3,
    }
}

/// Initialized bundle with every tensor (biases included) jittered so no
/// parameter sits at its initial zero.
pub fn random_bundle(source_dim: usize, target_dim: usize, nsaw: bool, rng: &mut gadt3::Rng) -> ModelBundle {
    let dims = small_dims();
    let mut bundle = ModelBundle::init(source_dim, &dims, false, nsaw, rng).unwrap();
    bundle.target_encoder = Some(ProjectionEncoder::random(Domain::Target, target_dim, dims.embedding_dim, rng));
    for (_, t) in bundle.named_tensors_mut() {
        for x in t.as_mut_slice() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
    bundle
}

/// Small two-layer configuration that trains in well under a second on
/// graphs of a few hundred nodes.
pub fn small_config() -> gadt3::pipeline::RunConfig {
    gadt3::pipeline::RunConfig {
        dims: ModelDims {
            embedding_dim: 8,
            hidden_dim: 8,
            attn_dim: 4,
            num_layers: 2,
            predictor_hidden: 8,
        },
        lr: 0.01,
        source_epochs: 20,
        ttt_max_epochs: 15,
        patience: 3,
        ..Default::default()
    }
}

pub fn small_pair() -> gadt3::experiments::PairSpec {
    gadt3::experiments::PairSpec {
        nodes: 120,
        anomaly_rate: 0.1,
        feature_dim: 6,
        target_feature_dim: Some(5),
        ..Default::default()
    }
}

/// Fraction of (anomaly, normal) pairs ordered correctly, ties counting half.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                total += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    total / pairs
}

/// Walks the precision/recall curve over distinct thresholds, highest first.
pub fn ap_curve(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let predicted: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = predicted.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let precision = tp / predicted.len() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Random scores, half the time drawn from a small grid so ties are common.
pub fn random_instance(rng: &mut impl Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=200);
    let levels = rng.random_range(1..=20);
    let tied = rng.random_bool(0.5);
    let scores = (0..n)
        .map(|_| {
            if tied {
                rng.random_range(0..levels) as f64 / 4.0
            } else {
                rng.random_range(-5.0..5.0)
            }
        })
        .collect();
    let rate = rng.random_range(0.02..0.6);
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(rate))).collect();
    labels[0] = 1;
    labels[n - 1] = 0;
    (scores, labels)
}

