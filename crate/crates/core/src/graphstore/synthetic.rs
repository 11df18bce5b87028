use std::collections::HashSet;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AttributedGraph, Csr};
use crate::diffkernel::Matrix;
use crate::error::{Error, Result};

/// Parameters of the two-class planted-partition generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub anomaly_rate: f64,
    /// Desired fraction of same-label edges.
    pub target_homophily: f64,
    pub mean_degree: f64,
    pub normal_center: Vec<f64>,
    pub anomaly_center: Vec<f64>,
    pub noise_scale: f64,
    pub seed: u64,
}

const LABEL_RETRIES: usize = 16;

impl SyntheticSpec {
    /// Spec with 16 features, mean degree 10, unit noise and class centers
    /// placed on disjoint halves of the feature vector.
    pub fn new(num_nodes: usize, anomaly_rate: f64, target_homophily: f64, seed: u64) -> Self {
        let mut spec = SyntheticSpec {
            num_nodes,
            feature_dim: 16,
            anomaly_rate,
            target_homophily,
            mean_degree: 10.0,
            normal_center: Vec::new(),
            anomaly_center: Vec::new(),
            noise_scale: 1.0,
            seed,
        };
        spec.set_split_centers(1.0);
        spec
    }

    /// Normal center is `separation` on the first half of the coordinates,
    /// the anomaly center `separation` on the second half.
    pub fn set_split_centers(&mut self, separation: f64) {
        let d = self.feature_dim;
        let half = d / 2;
        self.normal_center = (0..d).map(|i| if i < half { separation } else { 0.0 }).collect();
        self.anomaly_center = (0..d).map(|i| if i >= half { separation } else { 0.0 }).collect();
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_nodes < 2 {
            return bad(format!("num_nodes must be at least 2, got {}", self.num_nodes));
        }
        if !(self.anomaly_rate > 0.0 && self.anomaly_rate < 0.5) {
            return bad(format!("anomaly_rate must be in (0, 0.5), got {}", self.anomaly_rate));
        }
        if !(0.0..=1.0).contains(&self.target_homophily) {
            return bad(format!(
                "target_homophily must be in [0, 1], got {}",
                self.target_homophily
            ));
        }
        if !(self.mean_degree >= 1.0 && self.mean_degree.is_finite()) {
            return bad(format!("mean_degree must be >= 1, got {}", self.mean_degree));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be positive, got {}", self.noise_scale));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.normal_center.len() != self.feature_dim
            || self.anomaly_center.len() != self.feature_dim
        {
            return bad("class centers must have feature_dim entries".into());
        }
        Ok(())
    }
}

struct EdgeBudget {
    cross: usize,
    normal_normal: usize,
    anomaly_anomaly: usize,
}

fn pairs(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

fn edge_budget(spec: &SyntheticSpec, anomalies: usize) -> Option<EdgeBudget> {
    let n = spec.num_nodes;
    let normals = n - anomalies;
    let total = (n as f64 * spec.mean_degree / 2.0).round() as usize;
    let cross = ((1.0 - spec.target_homophily) * total as f64).round() as usize;
    let intra = total - cross;
    // Give anomalies roughly the mean degree: whatever stub budget cross edges
    // leave over goes to anomaly-anomaly edges.
    let stubs = anomalies as f64 * spec.mean_degree;
    let aa_wanted = ((stubs - cross as f64) / 2.0).round().max(0.0) as usize;
    let anomaly_anomaly = aa_wanted.min(pairs(anomalies)).min(intra);
    let normal_normal = intra - anomaly_anomaly;
    let feasible =
        cross <= anomalies * normals && normal_normal <= pairs(normals);
    feasible.then_some(EdgeBudget {
        cross,
        normal_normal,
        anomaly_anomaly,
    })
}

fn sample_edges(
    rng: &mut crate::Rng,
    count: usize,
    left: &[usize],
    right: &[usize],
    same_class: bool,
    seen: &mut HashSet<(usize, usize)>,
    out: &mut Vec<(usize, usize)>,
) -> Result<()> {
    let max_attempts = 200 * count + 1000;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(
                "infeasible spec: could not place the requested edges".into(),
            ));
        }
        let u = left[rng.random_range(0..left.len())];
        let v = right[rng.random_range(0..right.len())];
        if same_class && u == v {
            continue;
        }
        let key = (u.min(v), u.max(v));
        if seen.insert(key) {
            out.push(key);
            placed += 1;
        }
    }
    Ok(())
}

/// Generates a labeled graph whose edge-label homophily equals
/// `target_homophily` up to rounding of the edge counts.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<AttributedGraph> {
    spec.validate()?;
    let mut rng = crate::rng_from_seed(spec.seed);
    let n = spec.num_nodes;

    let mut attempt = 0;
    let (labels, budget) = loop {
        attempt += 1;
        let labels: Vec<u8> = (0..n)
            .map(|_| u8::from(rng.random::<f64>() < spec.anomaly_rate))
            .collect();
        let anomalies = labels.iter().filter(|&&l| l == 1).count();
        if anomalies > 0 && anomalies < n {
            if let Some(budget) = edge_budget(spec, anomalies) {
                break (labels, budget);
            }
        }
        if attempt >= LABEL_RETRIES {
            return Err(Error::Config(format!(
                "infeasible spec: homophily {} with anomaly rate {} and mean degree {}",
                spec.target_homophily, spec.anomaly_rate, spec.mean_degree
            )));
        }
    };

    let normal_ids: Vec<usize> = (0..n).filter(|&i| labels[i] == 0).collect();
    let anomaly_ids: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    sample_edges(&mut rng, budget.cross, &anomaly_ids, &normal_ids, false, &mut seen, &mut edges)?;
    sample_edges(
        &mut rng,
        budget.normal_normal,
        &normal_ids,
        &normal_ids,
        true,
        &mut seen,
        &mut edges,
    )?;
    sample_edges(
        &mut rng,
        budget.anomaly_anomaly,
        &anomaly_ids,
        &anomaly_ids,
        true,
        &mut seen,
        &mut edges,
    )?;

    let noise = Normal::new(0.0, spec.noise_scale)
        .map_err(|e| Error::Config(format!("noise_scale: {e}")))?;
    let mut features = Matrix::zeros(n, spec.feature_dim);
    for (i, &label) in labels.iter().enumerate() {
        let center = if label == 1 {
            &spec.anomaly_center
        } else {
            &spec.normal_center
        };
        for (x, c) in features.row_mut(i).iter_mut().zip(center) {
            // Stored at f32 precision so the on-disk form round-trips exactly.
            *x = (c + noise.sample(&mut rng)) as f32 as f64;
        }
    }

    let (adjacency, _) = Csr::from_edges(n, edges)?;
    AttributedGraph::new(
        format!("synthetic-n{n}-h{}-s{}", spec.target_homophily, spec.seed),
        adjacency,
        features,
        Some(labels),
    )
}
