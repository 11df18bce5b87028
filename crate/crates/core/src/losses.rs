//! Scalar objectives: neighbor affinity, the self-supervised loss with its
//! non-neighbor regularizer, the class-aware regularizer and the composite
//! training / test-time losses.
//!
//! The non-neighbor terms are estimated from `k` uniformly sampled
//! non-neighbors per node ([`NegativeSamples`]); the affinity sum runs over
//! all nodes while the regularizers are per-node means.

use std::sync::Arc;

use log::warn;
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{cosine, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graphstore::Csr;

/// Anomaly weight of the class-aware regularizer: a fixed value, or
/// `1 / anomaly_rate` of the source graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSetting {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl AlphaSetting {
    pub const AUTO: AlphaSetting = AlphaSetting::Auto(AutoTag::Auto);

    pub fn resolve(&self, labels: &[u8]) -> Result<f64> {
        match *self {
            AlphaSetting::Fixed(a) => Ok(a),
            AlphaSetting::Auto(_) => {
                let anomalies = labels.iter().filter(|&&l| l == 1).count();
                if anomalies == 0 {
                    return Err(Error::Data("alpha=auto needs at least one anomaly".into()));
                }
                Ok((labels.len() as f64 / anomalies as f64).max(1.0))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the self-supervised loss in the training objective.
    pub lambda: f64,
    /// Weight of the non-neighbor regularizer inside the self-supervised loss.
    pub lambda_reg: f64,
    /// Weight of the class-aware regularizer in the supervised loss.
    pub lambda_s: f64,
    pub alpha: AlphaSetting,
    /// Non-neighbors sampled per node.
    pub neg_samples_k: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.001,
            lambda_reg: 0.1,
            lambda_s: 0.001,
            alpha: AlphaSetting::Fixed(20.0),
            neg_samples_k: 5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda", self.lambda),
            ("lambda_reg", self.lambda_reg),
            ("lambda_s", self.lambda_s),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if let AlphaSetting::Fixed(a) = self.alpha {
            if !(a >= 1.0 && a.is_finite()) {
                return Err(Error::Config(format!("alpha must be >= 1, got {a}")));
            }
        }
        if self.neg_samples_k == 0 {
            return Err(Error::Config("neg_samples_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean neighbor cosine similarity per node; isolated nodes are invalid with
/// score 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffinityScores {
    pub scores: Vec<f64>,
    pub valid: Vec<bool>,
}

impl AffinityScores {
    pub fn valid_sum(&self) -> f64 {
        self.scores
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(s, _)| s)
            .sum()
    }
}

pub fn affinity_scores(h: &Matrix, adjacency: &Csr) -> AffinityScores {
    let n = adjacency.num_nodes();
    let mut scores = vec![0.0; n];
    let mut valid = vec![false; n];
    for v in 0..n {
        let nbrs = adjacency.neighbors(v);
        if nbrs.is_empty() {
            continue;
        }
        let total: f64 = nbrs.iter().map(|&u| cosine(h.row(v), h.row(u))).sum();
        scores[v] = total / nbrs.len() as f64;
        valid[v] = true;
    }
    AffinityScores { scores, valid }
}

/// Affinity column `s` (`n × 1`) on the tape.
pub fn affinity_tape(tape: &mut Tape, h: Var, adjacency: &Csr) -> Result<Var> {
    let cos = tape.cosine_pairs(h, h, adjacency.entry_rows().clone(), adjacency.cols().clone())?;
    tape.segment_mean(cos, &adjacency.segments())
}

/// Up to `k` distinct non-neighbors per node, drawn uniformly without
/// replacement. Nodes adjacent to every other node are skipped.
#[derive(Debug, Clone)]
pub struct NegativeSamples {
    pub left: Arc<[usize]>,
    pub right: Arc<[usize]>,
    /// Samples drawn for each node.
    pub per_node: Vec<usize>,
    pub skipped: usize,
}

impl NegativeSamples {
    pub fn draw(adjacency: &Csr, k: usize, rng: &mut crate::Rng) -> Self {
        let n = adjacency.num_nodes();
        let mut left = Vec::with_capacity(n * k);
        let mut right = Vec::with_capacity(n * k);
        let mut per_node = vec![0; n];
        let mut skipped = 0;
        for i in 0..n {
            let nbrs = adjacency.neighbors(i);
            let available = n - 1 - nbrs.len();
            if available == 0 {
                skipped += 1;
                continue;
            }
            let take = k.min(available);
            let start = right.len();
            if available <= 4 * take {
                let candidates: Vec<usize> = (0..n)
                    .filter(|&j| j != i && nbrs.binary_search(&j).is_err())
                    .collect();
                for pos in sample(rng, candidates.len(), take) {
                    right.push(candidates[pos]);
                }
            } else {
                while right.len() - start < take {
                    let j = rng.random_range(0..n);
                    if j != i && nbrs.binary_search(&j).is_err() && !right[start..].contains(&j) {
                        right.push(j);
                    }
                }
            }
            left.extend(std::iter::repeat_n(i, take));
            per_node[i] = take;
        }
        if skipped > 0 {
            warn!("{skipped} node(s) have no non-neighbors and were skipped by the regularizer");
        }
        NegativeSamples {
            left: left.into(),
            right: right.into(),
            per_node,
            skipped,
        }
    }

    fn active_nodes(&self) -> usize {
        self.per_node.iter().filter(|&&c| c > 0).count()
    }

    /// Coefficients turning pair cosines into the mean over nodes of the
    /// per-node (weighted) mean.
    fn coefficients(&self, node_weights: Option<&[f64]>) -> Arc<[f64]> {
        let active = self.active_nodes().max(1) as f64;
        self.left
            .iter()
            .zip(self.right.iter())
            .map(|(&i, &j)| {
                let w = node_weights.map_or(1.0, |w| w[j]);
                w / (self.per_node[i] as f64 * active)
            })
            .collect()
    }
}

/// Per-node weight `α` for anomalies and `1` otherwise.
pub fn class_weights(labels: &[u8], alpha: f64) -> Vec<f64> {
    labels
        .iter()
        .map(|&l| if l == 1 { alpha } else { 1.0 })
        .collect()
}

/// Mean over nodes of the mean (optionally weighted) cosine to sampled
/// non-neighbors.
pub fn nonneighbor_reg_tape(
    tape: &mut Tape,
    h: Var,
    samples: &NegativeSamples,
    node_weights: Option<&[f64]>,
) -> Result<Var> {
    let cos = tape.cosine_pairs(h, h, samples.left.clone(), samples.right.clone())?;
    tape.weighted_sum(cos, samples.coefficients(node_weights))
}

/// `-Σ_v s(v) + λ_reg · L_reg`.
pub fn self_supervised_loss_tape(
    tape: &mut Tape,
    h: Var,
    adjacency: &Csr,
    lambda_reg: f64,
    samples: &NegativeSamples,
) -> Result<Var> {
    let s = affinity_tape(tape, h, adjacency)?;
    let total = tape.sum(s)?;
    let neg = tape.neg(total)?;
    if lambda_reg == 0.0 {
        return Ok(neg);
    }
    let reg = nonneighbor_reg_tape(tape, h, samples, None)?;
    let reg = tape.scalar_mul(reg, lambda_reg)?;
    tape.add(neg, reg)
}

/// Test-time objective; identical to the self-supervised loss on target
/// embeddings.
pub fn ttt_loss_tape(
    tape: &mut Tape,
    h: Var,
    adjacency: &Csr,
    lambda_reg: f64,
    samples: &NegativeSamples,
) -> Result<Var> {
    self_supervised_loss_tape(tape, h, adjacency, lambda_reg, samples)
}

pub fn labels_as_targets(labels: &[u8]) -> Arc<[f64]> {
    labels.iter().map(|&l| l as f64).collect()
}

/// Mean binary cross-entropy plus `λ_s · class_reg`.
pub fn supervised_loss_tape(
    tape: &mut Tape,
    probs: Var,
    labels: &[u8],
    lambda_s: f64,
    class_reg: Var,
) -> Result<Var> {
    let ce = tape.binary_cross_entropy(probs, labels_as_targets(labels))?;
    let reg = tape.scalar_mul(class_reg, lambda_s)?;
    tape.add(ce, reg)
}

/// Variables making up the training objective.
#[derive(Debug, Clone, Copy)]
pub struct TrainLossVars {
    pub total: Var,
    pub supervised: Var,
    pub cross_entropy: Var,
    pub class_reg: Var,
    pub self_supervised: Var,
}

/// `L_sup + λ · L_self`, with `L_sup = CE + λ_s · L_s`.
#[allow(clippy::too_many_arguments)]
pub fn train_loss_tape(
    tape: &mut Tape,
    h: Var,
    probs: Var,
    adjacency: &Csr,
    labels: &[u8],
    weights: &LossWeights,
    alpha: f64,
    samples: &NegativeSamples,
) -> Result<TrainLossVars> {
    let cw = class_weights(labels, alpha);
    let class_reg = nonneighbor_reg_tape(tape, h, samples, Some(&cw))?;
    let cross_entropy = tape.binary_cross_entropy(probs, labels_as_targets(labels))?;
    let scaled_reg = tape.scalar_mul(class_reg, weights.lambda_s)?;
    let supervised = tape.add(cross_entropy, scaled_reg)?;
    let self_supervised = self_supervised_loss_tape(tape, h, adjacency, weights.lambda_reg, samples)?;
    let scaled_self = tape.scalar_mul(self_supervised, weights.lambda)?;
    let total = tape.add(supervised, scaled_self)?;
    Ok(TrainLossVars {
        total,
        supervised,
        cross_entropy,
        class_reg,
        self_supervised,
    })
}

fn eval_scalar(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(tape.value(v).item())
}

/// Non-neighbor regularizer on plain matrices, with freshly drawn samples.
/// `node_weights` holds `w_j` per node (see [`class_weights`]).
pub fn nonneighbor_reg(
    h: &Matrix,
    adjacency: &Csr,
    node_weights: Option<&[f64]>,
    rng: &mut crate::Rng,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let samples = NegativeSamples::draw(adjacency, k, rng);
    eval_scalar(|t| {
        let hv = t.constant(h.clone());
        nonneighbor_reg_tape(t, hv, &samples, node_weights)
    })
}

pub fn self_supervised_loss(
    h: &Matrix,
    adjacency: &Csr,
    lambda_reg: f64,
    rng: &mut crate::Rng,
    k: usize,
) -> Result<f64> {
    let samples = NegativeSamples::draw(adjacency, k, rng);
    eval_scalar(|t| {
        let hv = t.constant(h.clone());
        self_supervised_loss_tape(t, hv, adjacency, lambda_reg, &samples)
    })
}

pub fn ttt_loss(
    h: &Matrix,
    adjacency: &Csr,
    lambda_reg: f64,
    rng: &mut crate::Rng,
    k: usize,
) -> Result<f64> {
    self_supervised_loss(h, adjacency, lambda_reg, rng, k)
}

pub fn supervised_loss(probs: &[f64], labels: Option<&[u8]>, lambda_s: f64, class_reg: f64) -> Result<f64> {
    let labels = labels.ok_or_else(|| Error::Data("label vector absent".into()))?;
    eval_scalar(|t| {
        let p = t.constant(Matrix::column(probs.to_vec()));
        let reg = t.constant(Matrix::scalar(class_reg));
        supervised_loss_tape(t, p, labels, lambda_s, reg)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csr(n: usize, edges: &[(usize, usize)]) -> Csr {
        Csr::from_edges(n, edges.iter().copied()).unwrap().0
    }

    #[test]
    fn affinity_examples() {
        let adj = csr(4, &[(0, 1), (1, 2)]);
        let same = Matrix::filled(4, 3, 0.4);
        let s = affinity_scores(&same, &adj);
        for v in 0..3 {
            assert!((s.scores[v] - 1.0).abs() < 1e-15);
        }
        assert_eq!((s.scores[3], s.valid[3]), (0.0, false));

        let star = csr(3, &[(0, 1), (0, 2)]);
        let h = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((affinity_scores(&h, &star).scores[0] - 0.5).abs() < 1e-15);

        let orth = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 0.0]]);
        let s = affinity_scores(&orth, &star);
        assert_eq!(s.scores, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn regularizer_examples() {
        let mut rng = crate::rng_from_seed(0);
        let empty = csr(3, &[]);
        let orth = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(nonneighbor_reg(&orth, &empty, None, &mut rng, 2).unwrap(), 0.0);
        let same = Matrix::filled(3, 2, 1.0);
        assert!((nonneighbor_reg(&same, &empty, None, &mut rng, 2).unwrap() - 1.0).abs() < 1e-14);

        // Exhaustive: each node samples both others.
        let w = class_weights(&[0, 0, 1], 20.0);
        let v = nonneighbor_reg(&same, &empty, Some(&w), &mut rng, 2).unwrap();
        assert!((v - 22.0 / 3.0).abs() < 1e-12, "{v}");

        let unweighted = nonneighbor_reg(&same, &empty, None, &mut crate::rng_from_seed(5), 1).unwrap();
        let alpha_one = class_weights(&[0, 0, 1], 1.0);
        let weighted =
            nonneighbor_reg(&same, &empty, Some(&alpha_one), &mut crate::rng_from_seed(5), 1).unwrap();
        assert_eq!(unweighted, weighted);
    }

    #[test]
    fn dense_graph_skips_nodes() {
        let complete = csr(3, &[(0, 1), (1, 2), (0, 2)]);
        let s = NegativeSamples::draw(&complete, 3, &mut crate::rng_from_seed(1));
        assert_eq!(s.skipped, 3);
        assert!(s.left.is_empty());
    }

    #[test]
    fn samples_are_distinct_non_neighbors() {
        let adj = csr(50, &(0..49).map(|i| (i, i + 1)).collect::<Vec<_>>());
        let s = NegativeSamples::draw(&adj, 5, &mut crate::rng_from_seed(2));
        for i in 0..50 {
            let mine: Vec<usize> = s
                .left
                .iter()
                .zip(s.right.iter())
                .filter(|(&l, _)| l == i)
                .map(|(_, &r)| r)
                .collect();
            assert_eq!(mine.len(), 5);
            let mut dedup = mine.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), 5);
            assert!(mine.iter().all(|&j| j != i && !adj.has_edge(i, j)));
        }
    }

    #[test]
    fn self_supervised_examples() {
        let mut rng = crate::rng_from_seed(0);
        let adj = csr(5, &[(0, 1), (1, 2), (2, 3)]);
        let same = Matrix::filled(5, 2, 1.0);
        let l = self_supervised_loss(&same, &adj, 0.0, &mut rng, 2).unwrap();
        assert!((l + 4.0).abs() < 1e-12);

        let empty = csr(3, &[]);
        let orth = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let with_reg = self_supervised_loss(&orth, &empty, 0.3, &mut rng, 2).unwrap();
        let reg = nonneighbor_reg(&orth, &empty, None, &mut rng, 2).unwrap();
        assert!((with_reg - 0.3 * reg).abs() < 1e-14);
    }

    #[test]
    fn self_supervised_four_node_hand_case() {
        // Path 0-1-2-3 with H = [(1,0), (1,1), (0,1), (-1,0)], λ_reg = 0.5, k = 2.
        let adj = csr(4, &[(0, 1), (1, 2), (2, 3)]);
        let h = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        // s(0)=r, s(1)=r, s(2)=(r+0)/2, s(3)=0
        let affinity_sum = r + r + r / 2.0;
        // non-neighbors: 0:{2,3}, 1:{3}, 2:{0}, 3:{0,1}
        // 0: (cos(0,2)+cos(0,3))/2 = (0-1)/2; 1: cos(1,3) = -r; 2: 0; 3: (-1-r)/2
        let reg = (-0.5 - r + 0.0 + (-1.0 - r) / 2.0) / 4.0;
        let expected = -affinity_sum + 0.5 * reg;
        let l = self_supervised_loss(&h, &adj, 0.5, &mut crate::rng_from_seed(3), 2).unwrap();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    }

    #[test]
    fn supervised_examples() {
        let y = [1u8, 0, 1];
        let perfect = supervised_loss(&[1.0, 0.0, 1.0], Some(&y), 0.0, 0.0).unwrap();
        assert!(perfect < 1e-6);
        let half = supervised_loss(&[0.5; 3], Some(&y), 0.0, 0.0).unwrap();
        assert!((half - 2f64.ln()).abs() < 1e-12);
        let ce = supervised_loss(&[0.9, 0.2], Some(&[1, 0]), 0.0, 0.0).unwrap();
        assert!((ce - (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0).abs() < 1e-12);
        assert!((ce - 0.16425).abs() < 1e-5);
        let with_reg = supervised_loss(&[0.9, 0.2], Some(&[1, 0]), 0.5, 2.0).unwrap();
        assert!((with_reg - ce - 1.0).abs() < 1e-12);
        assert!(supervised_loss(&[0.5], None, 0.0, 0.0).is_err());
    }

    #[test]
    fn weights_validation_and_alpha() {
        LossWeights::default().validate().unwrap();
        let bad = LossWeights {
            alpha: AlphaSetting::Fixed(0.5),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(AlphaSetting::AUTO.resolve(&[0, 0, 0, 1]).unwrap(), 4.0);
        let json = serde_json::to_string(&AlphaSetting::AUTO).unwrap();
        assert_eq!(json, "\"auto\"");
        let back: AlphaSetting = serde_json::from_str("20.0").unwrap();
        assert_eq!(back, AlphaSetting::Fixed(20.0));
    }
}
