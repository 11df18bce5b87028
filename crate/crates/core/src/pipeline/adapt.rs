use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::train::apply_gradients;
use super::{ClassCentroids, RunConfig, TargetInit};
use crate::diffkernel::{AdamConfig, AdamState, Matrix, Tape};
use crate::error::{Error, Result};
use crate::eval::{scores_from_embeddings, MetricResult};
use crate::gnn::{
    forward_embeddings, forward_tape, glorot, Domain, ModelBundle, ProjectionEncoder, Training,
    TARGET_ENCODER,
};
use crate::graphstore::AttributedGraph;
use crate::losses::{affinity_scores, ttt_loss_tape, AffinityScores, NegativeSamples};

/// Learning rates above this void the small-step assumption of the margin
/// check.
pub const SMALL_LR: f64 = 1e-2;

const MIN_DISTANCE: f64 = 1e-12;

/// Mean over nodes of `max(d_n, d_a) / min(d_n, d_a)`, where `d_n`, `d_a` are
/// Euclidean distances to the normal and anomaly centroids.
pub fn early_stop_score(h: &Matrix, centroids: &ClassCentroids) -> Result<f64> {
    if h.rows() == 0 {
        return Err(Error::Data("empty target: early-stop score undefined".into()));
    }
    centroids.validate()?;
    if h.cols() != centroids.dim() {
        return Err(Error::shape(
            "early_stop_score",
            format!("embeddings have {} columns, centroids {}", h.cols(), centroids.dim()),
        ));
    }
    let dist = |row: &[f64], c: &[f64]| {
        row.iter()
            .zip(c)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let total: f64 = (0..h.rows())
        .map(|i| {
            let dn = dist(h.row(i), &centroids.normal);
            let da = dist(h.row(i), &centroids.anomaly);
            dn.max(da) / dn.min(da).max(MIN_DISTANCE)
        })
        .sum();
    Ok(total / h.rows() as f64)
}

/// Patience-based selection of the highest score; epochs are 1-based.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    epoch: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            epoch: 0,
            best: None,
            since_best: 0,
        }
    }

    /// Records the next epoch's score; returns whether it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        self.epoch += 1;
        match self.best {
            Some((_, best)) if score <= best => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some((self.epoch, score));
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.map(|(_, s)| s)
    }
}

/// Mean affinity of normal nodes minus mean affinity of anomalous nodes,
/// over non-isolated nodes. `None` if either class has no such node.
pub fn margin(scores: &AffinityScores, labels: &[u8]) -> Option<f64> {
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for v in 0..labels.len() {
        if scores.valid[v] {
            let c = labels[v] as usize;
            sums[c] += scores.scores[v];
            counts[c] += 1;
        }
    }
    (counts[0] > 0 && counts[1] > 0).then(|| sums[0] / counts[0] as f64 - sums[1] / counts[1] as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    NoEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auprc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    /// Score of the initial target encoder (epoch 0); not a stopping candidate.
    pub initial_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_margin: Option<f64>,
    pub epochs: Vec<AdaptEpoch>,
    /// Epoch whose snapshot is returned; 0 when no epoch ran.
    pub chosen_epoch: usize,
    pub stop_reason: StopReason,
}

impl AdaptationTrace {
    pub fn scores(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.score).collect()
    }

    /// Initial margin followed by each epoch's, if margins were tracked.
    pub fn margins(&self) -> Option<Vec<f64>> {
        let mut out = vec![self.initial_margin?];
        for e in &self.epochs {
            out.push(e.margin?);
        }
        Some(out)
    }

    pub fn chosen_score(&self) -> f64 {
        match self.chosen_epoch {
            0 => self.initial_score,
            k => self.epochs[k - 1].score,
        }
    }
}

fn initial_target_encoder(
    bundle: &ModelBundle,
    target_dim: usize,
    config: &RunConfig,
    rng: &mut crate::Rng,
) -> Result<ProjectionEncoder> {
    let p = bundle.embedding_dim();
    match config.target_init {
        TargetInit::Fresh => Ok(ProjectionEncoder::from_weight(
            Domain::Target,
            glorot(p, target_dim, target_dim, p, rng),
        )),
        TargetInit::FromSource => {
            let source = &bundle.source_encoder;
            if source.input_dim != target_dim {
                return Err(Error::Config(format!(
                    "target_init from_source needs equal feature widths (source {}, target {target_dim})",
                    source.input_dim
                )));
            }
            let weight = source.weight.clone().unwrap_or_else(|| Matrix::identity(p));
            Ok(ProjectionEncoder::from_weight(Domain::Target, weight))
        }
    }
}

/// Fits a target encoder to `graph` with the test-time loss while every
/// shared tensor stays frozen, keeping the snapshot with the best early-stop
/// score. `eval_labels` only feed the margin and metric columns of the trace.
pub fn adapt_target(
    bundle: &ModelBundle,
    centroids: &ClassCentroids,
    graph: &AttributedGraph,
    config: &RunConfig,
    rng: &mut crate::Rng,
    eval_labels: Option<&[u8]>,
) -> Result<(ModelBundle, AdaptationTrace)> {
    config.validate()?;
    bundle.validate()?;
    centroids.validate()?;
    if centroids.dim() != bundle.output_dim() {
        return Err(Error::shape(
            "adapt_target",
            format!("centroids have width {}, embeddings {}", centroids.dim(), bundle.output_dim()),
        ));
    }
    if graph.num_nodes() == 0 {
        return Err(Error::Data("empty target graph".into()));
    }
    if let Some(l) = eval_labels {
        if l.len() != graph.num_nodes() {
            return Err(Error::shape("adapt_target", "evaluation labels length"));
        }
    }
    let graph = config.prepare_graph(graph, rng)?;
    let adj = graph.adjacency();

    let mut adapted = bundle.clone();
    adapted.target_encoder = Some(initial_target_encoder(bundle, graph.feature_dim(), config, rng)?);
    adapted.validate()?;

    let evaluate = |model: &ModelBundle| -> Result<Observation> {
        let (h, _) = forward_embeddings(model, &graph, Domain::Target, None)?;
        let score = early_stop_score(&h, centroids)?;
        let Some(labels) = eval_labels else {
            return Ok(Observation { score, margin: None, metrics: None });
        };
        let m = margin(&affinity_scores(&h, adj), labels);
        let positives = labels.iter().filter(|&&l| l == 1).count();
        let metrics = if positives > 0 && positives < labels.len() {
            let scores = scores_from_embeddings(model, &h, adj, config.scoring_mode)?;
            Some(MetricResult::compute(&scores, labels, config.scoring_mode)?)
        } else {
            None
        };
        Ok(Observation { score, margin: m, metrics })
    };
    let initial = evaluate(&adapted)?;
    let (initial_score, initial_margin) = (initial.score, initial.margin);
    let mut trace = AdaptationTrace {
        initial_score,
        initial_margin,
        epochs: Vec::new(),
        chosen_epoch: 0,
        stop_reason: StopReason::NoEpochs,
    };
    if config.ttt_max_epochs == 0 {
        return Ok((adapted, trace));
    }

    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best = adapted.target_encoder.clone();
    trace.stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=config.ttt_max_epochs {
        let mut tape = Tape::new();
        let bound = adapted.bind(&mut tape, Domain::Target, true)?;
        let x = tape.constant(graph.features().clone());
        let training = Training {
            dropout_rate: config.dropout_rate,
            rng: &mut *rng,
        };
        let pass = forward_tape(&mut tape, &bound, x, adj, Some(training))?;
        let samples = NegativeSamples::draw(adj, config.losses.neg_samples_k, rng);
        let loss = ttt_loss_tape(&mut tape, pass.embeddings, adj, config.losses.lambda_reg, &samples)?;
        let loss_value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        apply_gradients(&mut adam, &mut adapted, &bound.named_vars(), &mut grads, |n| n == TARGET_ENCODER)?;

        let obs = evaluate(&adapted)?;
        let score = obs.score;
        debug!("ttt epoch {epoch}: loss={loss_value:.6} score={score:.6}");
        trace.epochs.push(AdaptEpoch {
            epoch,
            loss: loss_value,
            score,
            margin: obs.margin,
            auroc: obs.metrics.as_ref().map(|m| m.auroc),
            auprc: obs.metrics.as_ref().map(|m| m.auprc),
        });
        if stopper.observe(score) {
            best = adapted.target_encoder.clone();
        }
        if stopper.should_stop() {
            trace.stop_reason = StopReason::Patience;
            break;
        }
    }
    adapted.target_encoder = best;
    trace.chosen_epoch = stopper.best_epoch().unwrap_or(0);
    info!(
        "test-time training: {} epochs, chosen epoch {} (score {:.6})",
        trace.epochs.len(),
        trace.chosen_epoch,
        trace.chosen_score()
    );
    Ok((adapted, trace))
}

struct Observation {
    score: f64,
    margin: Option<f64>,
    metrics: Option<MetricResult>,
}

/// Checkable conditions of a margin run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preconditions {
    /// Source and target share the feature width.
    pub homogeneous_dims: bool,
    /// `lr <= SMALL_LR`.
    pub small_lr: bool,
    pub init_from_source: bool,
}

impl Preconditions {
    pub fn of_run(source_dim: usize, target_dim: usize, config: &RunConfig) -> Self {
        Preconditions {
            homogeneous_dims: source_dim == target_dim,
            small_lr: config.lr <= SMALL_LR,
            init_from_source: config.target_init == TargetInit::FromSource,
        }
    }

    pub fn all(&self) -> bool {
        self.homogeneous_dims && self.small_lr && self.init_from_source
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    /// Consecutive pairs compared.
    pub steps: usize,
    pub increases: usize,
    pub fraction_increasing: f64,
    pub initial_margin: f64,
    pub final_margin: f64,
    pub preconditions: Preconditions,
    /// False when a precondition fails; the fraction is then reported
    /// without any monotonicity claim.
    pub claim_applicable: bool,
}

/// Fraction of steps on which the margin strictly increased, over at most
/// `max_steps` steps from the start.
pub fn margin_trace_check(
    trace: &AdaptationTrace,
    preconditions: Preconditions,
    max_steps: Option<usize>,
) -> Result<MarginReport> {
    let margins = trace
        .margins()
        .ok_or_else(|| Error::Data("no margin data in trace".into()))?;
    margin_sequence_check(&margins, preconditions, max_steps)
}

pub(crate) fn margin_sequence_check(
    margins: &[f64],
    preconditions: Preconditions,
    max_steps: Option<usize>,
) -> Result<MarginReport> {
    let steps = margins.len().saturating_sub(1).min(max_steps.unwrap_or(usize::MAX));
    if steps == 0 {
        return Err(Error::Data("no margin data in trace".into()));
    }
    let window = &margins[..=steps];
    let increases = window.windows(2).filter(|w| w[1] > w[0]).count();
    Ok(MarginReport {
        steps,
        increases,
        fraction_increasing: increases as f64 / steps as f64,
        initial_margin: window[0],
        final_margin: window[steps],
        preconditions,
        claim_applicable: preconditions.all(),
    })
}
