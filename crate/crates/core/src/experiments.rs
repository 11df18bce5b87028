//! Seeded synthetic experiments: the margin-monotonicity harness, the target
//! homophily sweep, paired with/without adaptation runs and the model-wide
//! gradient check.
//!
//! Work is spread over seeds with rayon; results are always returned in seed
//! order, so outputs do not depend on scheduling.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{grad_check, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricResult};
use crate::gnn::{forward_tape, predict_tape, Domain, ModelBundle, ModelDims, ProjectionEncoder, Training};
use crate::losses::{train_loss_tape, ttt_loss_tape, LossWeights, NegativeSamples};
use crate::graphstore::{generate_synthetic, rewire_to_homophily, AttributedGraph, RewireStrategy, SyntheticSpec};
use crate::pipeline::{
    adapt_target, margin_trace_check, train_source, ClassCentroids, MarginReport, Preconditions, RunConfig,
    TargetInit,
};

/// Stable seed for one role of one run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SOURCE_GRAPH: u64 = 1;
const STREAM_TARGET_GRAPH: u64 = 2;
const STREAM_TRANSFORM: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_ADAPT: u64 = 5;
const STREAM_REWIRE: u64 = 6;

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) { (v[mid - 1] + v[mid]) / 2.0 } else { v[mid] })
}

/// Two graphs from the same generator family with independent seeds. With
/// `target_feature_dim` set, target features are mapped through a random
/// Gaussian matrix into that width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSpec {
    pub nodes: usize,
    pub anomaly_rate: f64,
    pub source_homophily: f64,
    pub target_homophily: f64,
    pub feature_dim: usize,
    pub target_feature_dim: Option<usize>,
}

impl Default for PairSpec {
    fn default() -> Self {
        PairSpec {
            nodes: 1000,
            anomaly_rate: 0.05,
            source_homophily: 0.9,
            target_homophily: 0.9,
            feature_dim: 16,
            target_feature_dim: None,
        }
    }
}

impl PairSpec {
    fn graph_spec(&self, homophily: f64, seed: u64) -> SyntheticSpec {
        let mut spec = SyntheticSpec::new(self.nodes, self.anomaly_rate, homophily, seed);
        spec.feature_dim = self.feature_dim;
        spec.set_split_centers(1.0);
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.graph_spec(self.source_homophily, 0).validate()?;
        self.graph_spec(self.target_homophily, 0).validate()?;
        if self.target_feature_dim == Some(0) {
            return Err(Error::Config("target_feature_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64) -> Result<(AttributedGraph, AttributedGraph)> {
        self.validate()?;
        let source = generate_synthetic(&self.graph_spec(
            self.source_homophily,
            derive_seed(seed, STREAM_SOURCE_GRAPH),
        ))?;
        let mut target = generate_synthetic(&self.graph_spec(
            self.target_homophily,
            derive_seed(seed, STREAM_TARGET_GRAPH),
        ))?;
        if let Some(dt) = self.target_feature_dim {
            let mut rng = crate::rng_from_seed(derive_seed(seed, STREAM_TRANSFORM));
            let d = self.feature_dim;
            let scale = 1.0 / (d as f64).sqrt();
            let data = (0..d * dt)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect();
            let map = Matrix::from_vec(d, dt, data)?;
            target = target.with_features(target.features().matmul(&map)?)?;
        }
        Ok((source, target))
    }
}

/// Settings of the margin harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginExperiment {
    pub seeds: usize,
    pub base_seed: u64,
    pub pair: PairSpec,
    /// Test-time learning rate.
    pub lr: f64,
    /// Adaptation steps examined.
    pub steps: usize,
}

impl Default for MarginExperiment {
    fn default() -> Self {
        MarginExperiment {
            seeds: 10,
            base_seed: 0,
            pair: PairSpec::default(),
            lr: 1e-3,
            steps: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMargin {
    pub seed: u64,
    pub margins: Vec<f64>,
    pub report: MarginReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginExperimentReport {
    pub lr: f64,
    pub steps: usize,
    pub median_fraction_increasing: f64,
    /// Whether every run met the checkable preconditions; when false the
    /// fractions carry no monotonicity claim.
    pub claim_applicable: bool,
    pub per_seed: Vec<SeedMargin>,
}

/// Source training with `base`, then `steps` dropout-free test-time steps
/// from a copy of the source encoder on a same-width target, recording the
/// margin after each step.
pub fn run_margin_experiment(exp: &MarginExperiment, base: &RunConfig) -> Result<MarginExperimentReport> {
    if exp.seeds == 0 || exp.steps == 0 {
        return Err(Error::Config("seeds and steps must be at least 1".into()));
    }
    let ttt = RunConfig {
        lr: exp.lr,
        dropout_rate: 0.0,
        target_init: TargetInit::FromSource,
        ttt_max_epochs: exp.steps,
        patience: exp.steps + 1,
        ..base.clone()
    };
    base.validate()?;
    ttt.validate()?;
    let per_seed = (0..exp.seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = exp.base_seed + i;
            let (source, target) = exp.pair.generate(seed)?;
            let mut rng = crate::rng_from_seed(derive_seed(seed, STREAM_TRAIN));
            let (bundle, centroids, _) = train_source(&source, base, &mut rng)?;
            let labels = target.require_labels()?.to_vec();
            let mut rng = crate::rng_from_seed(derive_seed(seed, STREAM_ADAPT));
            let (_, trace) = adapt_target(&bundle, &centroids, &target.without_labels(), &ttt, &mut rng, Some(&labels))?;
            let pre = Preconditions::of_run(source.feature_dim(), target.feature_dim(), &ttt);
            let report = margin_trace_check(&trace, pre, Some(exp.steps))?;
            Ok(SeedMargin {
                seed,
                margins: trace.margins().unwrap_or_default(),
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fractions: Vec<f64> = per_seed.iter().map(|s| s.report.fraction_increasing).collect();
    Ok(MarginExperimentReport {
        lr: exp.lr,
        steps: exp.steps,
        median_fraction_increasing: median(&fractions).unwrap_or(0.0),
        claim_applicable: per_seed.iter().all(|s| s.report.claim_applicable),
        per_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomophilySweep {
    pub levels: Vec<f64>,
    pub seeds: usize,
    pub base_seed: u64,
    pub pair: PairSpec,
    pub strategy: RewireStrategy,
}

impl Default for HomophilySweep {
    fn default() -> Self {
        HomophilySweep {
            levels: vec![0.9, 0.7, 0.5, 0.3, 0.1],
            seeds: 5,
            base_seed: 0,
            pair: PairSpec {
                target_feature_dim: Some(16),
                ..PairSpec::default()
            },
            strategy: RewireStrategy::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub homophily: f64,
    pub achieved_homophily: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub auroc_per_seed: Vec<f64>,
    pub auprc_per_seed: Vec<f64>,
    /// Whether every seed's rewiring kept the degree sequence.
    pub degree_preserved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub seeds: usize,
    pub scoring_mode: crate::eval::ScoringMode,
    pub rows: Vec<SweepRow>,
}

struct LevelRun {
    achieved: f64,
    degree_preserved: bool,
    metrics: MetricResult,
}

fn sweep_levels(
    bundle: &ModelBundle,
    centroids: &ClassCentroids,
    target: &AttributedGraph,
    sweep: &HomophilySweep,
    config: &RunConfig,
    seed: u64,
) -> Result<Vec<LevelRun>> {
    sweep
        .levels
        .iter()
        .enumerate()
        .map(|(li, &h)| {
            let rewired = rewire_to_homophily(
                target,
                h,
                derive_seed(seed, STREAM_REWIRE + 16 * li as u64),
                sweep.strategy,
            )?;
            let mut rng = crate::rng_from_seed(derive_seed(seed, STREAM_ADAPT));
            let unlabeled = rewired.graph.without_labels();
            let (adapted, _) = adapt_target(bundle, centroids, &unlabeled, config, &mut rng, None)?;
            let (metrics, _) = evaluate(&adapted, &rewired.graph, Domain::Target, config.scoring_mode)?;
            Ok(LevelRun {
                achieved: rewired.achieved_homophily,
                degree_preserved: rewired.degree_preserved,
                metrics,
            })
        })
        .collect()
}

fn validate_sweep(sweep: &HomophilySweep, config: &RunConfig) -> Result<()> {
    config.validate()?;
    if sweep.seeds == 0 || sweep.levels.is_empty() {
        return Err(Error::Config("sweep needs at least one seed and one level".into()));
    }
    if let Some(&bad) = sweep.levels.iter().find(|h| !(0.0..=1.0).contains(*h)) {
        return Err(Error::Config(format!("homophily level {bad} outside [0, 1]")));
    }
    Ok(())
}

fn tabulate(sweep: &HomophilySweep, config: &RunConfig, runs: Vec<Vec<LevelRun>>) -> SweepTable {
    let rows = sweep
        .levels
        .iter()
        .enumerate()
        .map(|(li, &h)| {
            let column: Vec<&LevelRun> = runs.iter().map(|r| &r[li]).collect();
            let auroc_per_seed: Vec<f64> = column.iter().map(|r| r.metrics.auroc).collect();
            let auprc_per_seed: Vec<f64> = column.iter().map(|r| r.metrics.auprc).collect();
            let achieved: Vec<f64> = column.iter().map(|r| r.achieved).collect();
            SweepRow {
                homophily: h,
                achieved_homophily: median(&achieved).unwrap_or(f64::NAN),
                auroc: median(&auroc_per_seed).unwrap_or(f64::NAN),
                auprc: median(&auprc_per_seed).unwrap_or(f64::NAN),
                auroc_per_seed,
                auprc_per_seed,
                degree_preserved: column.iter().all(|r| r.degree_preserved),
            }
        })
        .collect();
    SweepTable {
        seeds: sweep.seeds,
        scoring_mode: config.scoring_mode,
        rows,
    }
}

/// Per seed: generate a pair, train on the source graph once, then for each
/// level rewire the target, adapt and evaluate. Rows hold medians over seeds.
pub fn run_homophily_sweep(sweep: &HomophilySweep, config: &RunConfig) -> Result<SweepTable> {
    validate_sweep(sweep, config)?;
    sweep.pair.validate()?;
    let runs = (0..sweep.seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = sweep.base_seed + i;
            let (source, target) = sweep.pair.generate(seed)?;
            let mut rng = crate::rng_from_seed(derive_seed(seed, STREAM_TRAIN));
            let (bundle, centroids, _) = train_source(&source, config, &mut rng)?;
            sweep_levels(&bundle, &centroids, &target, sweep, config, seed)
        })
        .collect::<Result<_>>()?;
    Ok(tabulate(sweep, config, runs))
}

/// Sweep of a given labeled target with an already trained model; seeds only
/// vary rewiring and adaptation. `sweep.pair` is ignored.
pub fn run_homophily_sweep_with(
    bundle: &ModelBundle,
    centroids: &ClassCentroids,
    target: &AttributedGraph,
    sweep: &HomophilySweep,
    config: &RunConfig,
) -> Result<SweepTable> {
    validate_sweep(sweep, config)?;
    target.require_labels()?;
    let runs = (0..sweep.seeds as u64)
        .into_par_iter()
        .map(|i| sweep_levels(bundle, centroids, target, sweep, config, sweep.base_seed + i))
        .collect::<Result<_>>()?;
    Ok(tabulate(sweep, config, runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRun {
    pub seed: u64,
    /// Target metrics with the initial, unadapted target encoder.
    pub baseline: MetricResult,
    pub adapted: MetricResult,
    pub chosen_epoch: usize,
}

/// Paired runs per seed: the same initial target encoder evaluated before and
/// after test-time training.
pub fn run_adaptation_gain(pair: &PairSpec, config: &RunConfig, seeds: usize, base_seed: u64) -> Result<Vec<GainRun>> {
    config.validate()?;
    (0..seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed + i;
            let (source, target) = pair.generate(seed)?;
            let mut rng = crate::rng_from_seed(derive_seed(seed, STREAM_TRAIN));
            let (bundle, centroids, _) = train_source(&source, config, &mut rng)?;
            let unlabeled = target.without_labels();
            let frozen = RunConfig {
                ttt_max_epochs: 0,
                ..config.clone()
            };
            let adapt_seed = derive_seed(seed, STREAM_ADAPT);
            let (before, _) = adapt_target(&bundle, &centroids, &unlabeled, &frozen, &mut crate::rng_from_seed(adapt_seed), None)?;
            let (after, trace) = adapt_target(&bundle, &centroids, &unlabeled, config, &mut crate::rng_from_seed(adapt_seed), None)?;
            let (baseline, _) = evaluate(&before, &target, Domain::Target, config.scoring_mode)?;
            let (adapted, _) = evaluate(&after, &target, Domain::Target, config.scoring_mode)?;
            Ok(GainRun {
                seed,
                baseline,
                adapted,
                chosen_epoch: trace.chosen_epoch,
            })
        })
        .collect()
}

/// One gradient comparison of the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCase {
    pub objective: String,
    pub point: usize,
    pub tensor: String,
    pub max_rel_error: f64,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSuiteReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub cases: Vec<GradientCase>,
}

/// Finite-difference step used by the suite.
pub const GRADIENT_STEP: f64 = 1e-5;

struct GradientProblem {
    source: AttributedGraph,
    target: AttributedGraph,
    bundle: ModelBundle,
    samples_source: NegativeSamples,
    samples_target: NegativeSamples,
    mask_seed: u64,
}

fn random_problem(rng: &mut crate::Rng) -> Result<GradientProblem> {
    use rand::Rng as _;
    let random_graph = |rng: &mut crate::Rng, dim: usize| -> Result<AttributedGraph> {
        let n = rng.random_range(8..=10);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random_bool(0.4) {
                    edges.push((u, v));
                }
            }
        }
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let data = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        AttributedGraph::from_edges("gradcheck", n, &edges, Matrix::from_vec(n, dim, data)?, Some(labels))
    };
    let source = random_graph(rng, 5)?;
    let target = random_graph(rng, 6)?;
    let dims = ModelDims {
        embedding_dim: 4,
        hidden_dim: 4,
        attn_dim: 3,
        num_layers: 2,
        predictor_hidden: 3,
    };
    let mut bundle = ModelBundle::init(5, &dims, false, true, rng)?;
    bundle.target_encoder = Some(ProjectionEncoder::random(Domain::Target, 6, 4, rng));
    // zero biases would put ReLU inputs exactly on the kink
    for (_, t) in bundle.named_tensors_mut() {
        for x in t.as_mut_slice() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    let samples_source = NegativeSamples::draw(source.adjacency(), 3, rng);
    let samples_target = NegativeSamples::draw(target.adjacency(), 3, rng);
    use rand::RngCore as _;
    Ok(GradientProblem {
        source,
        target,
        bundle,
        samples_source,
        samples_target,
        mask_seed: rng.next_u64(),
    })
}

/// Central-difference check of the training and test-time objectives with
/// respect to every model tensor, at `points` random graphs and parameter
/// draws. Dropout masks and non-neighbor samples are fixed per point.
pub fn model_gradient_suite(seed: u64, points: usize, tolerance: f64) -> Result<GradientSuiteReport> {
    let mut rng = crate::rng_from_seed(seed);
    let weights = LossWeights {
        lambda: 0.5,
        lambda_reg: 0.3,
        lambda_s: 0.2,
        ..LossWeights::default()
    };
    let mut cases = Vec::new();
    for point in 0..points {
        let p = random_problem(&mut rng)?;
        let labels = p.source.require_labels()?.to_vec();
        let alpha = 3.0;
        let objectives: [(&str, Domain); 2] = [("train", Domain::Source), ("ttt", Domain::Target)];
        for (objective, domain) in objectives {
            let graph = if domain == Domain::Source { &p.source } else { &p.target };
            let adj = graph.adjacency();
            for (name, tensor) in p.bundle.named_tensors() {
                if domain == Domain::Source && name == crate::gnn::TARGET_ENCODER
                    || domain == Domain::Target && name == crate::gnn::SOURCE_ENCODER
                {
                    continue;
                }
                let f = |tape: &mut Tape, var: Var| -> Result<Var> {
                    let mut bound = p.bundle.bind(tape, domain, false)?;
                    bound.replace(&name, var)?;
                    let x = tape.constant(graph.features().clone());
                    let mut mask_rng = crate::rng_from_seed(p.mask_seed);
                    let training = Training {
                        dropout_rate: 0.3,
                        rng: &mut mask_rng,
                    };
                    let pass = forward_tape(tape, &bound, x, adj, Some(training))?;
                    match domain {
                        Domain::Source => {
                            let probs = predict_tape(tape, &bound.predictor, pass.embeddings)?;
                            let vars = train_loss_tape(
                                tape,
                                pass.embeddings,
                                probs,
                                adj,
                                &labels,
                                &weights,
                                alpha,
                                &p.samples_source,
                            )?;
                            Ok(vars.total)
                        }
                        Domain::Target => {
                            ttt_loss_tape(tape, pass.embeddings, adj, weights.lambda_reg, &p.samples_target)
                        }
                    }
                };
                let report = grad_check(f, tensor, GRADIENT_STEP, tolerance)?;
                cases.push(GradientCase {
                    objective: objective.to_string(),
                    point,
                    tensor: name.clone(),
                    max_rel_error: report.max_rel_error,
                    analytic: report.analytic,
                    numeric: report.numeric,
                });
            }
        }
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradientSuiteReport {
        tolerance,
        max_rel_error,
        passed: max_rel_error < tolerance,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(7, 1), derive_seed(7, 2));
        assert_ne!(derive_seed(7, 1), derive_seed(8, 1));
        assert_eq!(derive_seed(7, 1), derive_seed(7, 1));
    }

    #[test]
    fn pair_transform_changes_width() {
        let pair = PairSpec {
            nodes: 60,
            anomaly_rate: 0.1,
            target_feature_dim: Some(5),
            ..PairSpec::default()
        };
        let (s, t) = pair.generate(3).unwrap();
        assert_eq!((s.feature_dim(), t.feature_dim()), (16, 5));
        assert_eq!(t.num_nodes(), 60);
        let (_, t2) = pair.generate(3).unwrap();
        assert_eq!(t.features(), t2.features());
    }

    #[test]
    fn gradient_suite_covers_every_tensor() {
        let report = model_gradient_suite(7, 3, 1e-4).unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
        assert!(report.cases.iter().any(|c| c.objective == "ttt" && c.tensor == crate::gnn::TARGET_ENCODER));
        assert!(report.cases.iter().any(|c| c.objective == "train" && c.tensor.starts_with("predictor")));
    }
}
