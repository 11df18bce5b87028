use serde::{Deserialize, Serialize};

use super::ScoringMode;
use crate::error::{Error, Result};

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("anomaly scores"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    Ok((positives, labels.len() - positives))
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Mann-Whitney AUROC: `(concordant + ½·tied) / (P·N)`, computed from
/// mid-ranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, n) = class_counts(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(Error::Data("single-class labels: AUROC undefined".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Work in doubled ranks so tie blocks stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, mean (i+j+2)/2
        let twice_mid = (i + j + 2) as u128;
        let pos_in_block = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_mid * pos_in_block;
        i = j + 1;
    }
    let p128 = p as u128;
    let twice_u = twice_rank_sum - p128 * (p128 + 1);
    Ok(twice_u as f64 / (2.0 * p as f64 * n as f64))
}

/// Average precision over descending-score blocks; equal scores form one
/// block that is added to the ranking at once.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, _) = class_counts(scores, labels)?;
    if p == 0 {
        return Err(Error::Data("no positives: AUPRC undefined".into()));
    }
    let idx = descending(scores);
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let block_pos = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        tp += block_pos;
        seen += j - i + 1;
        if block_pos > 0 {
            ap += (tp as f64 / seen as f64) * (block_pos as f64 / p as f64);
        }
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub auroc: f64,
    pub auprc: f64,
    pub positives: usize,
    pub negatives: usize,
    pub scoring_mode: ScoringMode,
}

impl MetricResult {
    pub fn compute(scores: &[f64], labels: &[u8], scoring_mode: ScoringMode) -> Result<Self> {
        let (positives, negatives) = class_counts(scores, labels)?;
        Ok(MetricResult {
            auroc: auroc(scores, labels)?,
            auprc: auprc(scores, labels)?,
            positives,
            negatives,
            scoring_mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.7, 0.8, 0.1], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3; 5], &[1, 0, 0, 1, 0]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        let ap = auprc(&[4.0, 3.0, 2.0, 1.0], &[1, 0, 1, 0]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        let flat = auprc(&[0.0; 5], &[1, 0, 0, 1, 0]).unwrap();
        assert!((flat - 0.4).abs() < 1e-15);
        assert!(auprc(&[0.1], &[0]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            auroc(&[f64::NAN, 0.0], &[1, 0]),
            Err(Error::NonFinite(_))
        ));
    }
}
