use std::collections::BTreeMap;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::diffkernel::{AdamConfig, AdamState, Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::gnn::{forward_embeddings, forward_tape, predict, predict_tape, Domain, ModelBundle, Training};
use crate::graphstore::AttributedGraph;
use crate::losses::{train_loss_tape, NegativeSamples};

/// Per-class means of final-layer source embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCentroids {
    pub normal: Vec<f64>,
    pub anomaly: Vec<f64>,
}

impl ClassCentroids {
    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.normal.len() != self.anomaly.len() {
            return Err(Error::shape("centroids", "class centroids differ in width"));
        }
        if self.normal.iter().chain(&self.anomaly).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("class centroids"));
        }
        Ok(())
    }
}

pub fn class_centroids(h: &Matrix, labels: &[u8]) -> Result<ClassCentroids> {
    if labels.len() != h.rows() {
        return Err(Error::shape("class_centroids", "label count differs from rows"));
    }
    let mut sums = [vec![0.0; h.cols()], vec![0.0; h.cols()]];
    let mut counts = [0usize; 2];
    for (v, &l) in labels.iter().enumerate() {
        let c = l as usize;
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(h.row(v)) {
            *s += x;
        }
    }
    if counts.contains(&0) {
        return Err(Error::Data("single-class labels: class centroids undefined".into()));
    }
    let [normal, anomaly] = sums;
    let centroids = ClassCentroids {
        normal: normal.into_iter().map(|s| s / counts[0] as f64).collect(),
        anomaly: anomaly.into_iter().map(|s| s / counts[1] as f64).collect(),
    };
    centroids.validate()?;
    Ok(centroids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub l_train: f64,
    pub l_sup: f64,
    pub l_self: f64,
    /// Eval-mode predictor AUROC on the source graph after this epoch's step.
    pub source_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub alpha: f64,
    pub epochs: Vec<TrainEpoch>,
}

impl TrainingLog {
    pub fn final_auroc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.source_auroc)
    }
}

/// One Adam step on every bundle tensor bound on the tape whose name passes
/// `keep`.
pub(crate) fn apply_gradients(
    adam: &mut AdamState,
    bundle: &mut ModelBundle,
    vars: &[(String, Var)],
    grads: &mut Gradients,
    keep: impl Fn(&str) -> bool,
) -> Result<()> {
    let lookup: BTreeMap<&str, Var> = vars.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let mut targets = Vec::new();
    let mut gradients = Vec::new();
    for (name, tensor) in bundle.named_tensors_mut() {
        if !keep(&name) {
            continue;
        }
        if let Some(&var) = lookup.get(name.as_str()) {
            gradients.push(grads.take(var));
            targets.push((name, tensor));
        }
    }
    adam.step(
        targets
            .iter_mut()
            .zip(&gradients)
            .map(|((name, tensor), g)| (name.as_str(), &mut **tensor, g)),
    )
}

/// Fits encoder, layers and predictor on a labeled source graph with
/// full-batch Adam, then computes class centroids in eval mode.
pub fn train_source(
    graph: &AttributedGraph,
    config: &RunConfig,
    rng: &mut crate::Rng,
) -> Result<(ModelBundle, ClassCentroids, TrainingLog)> {
    config.validate()?;
    let labels = graph.require_labels()?.to_vec();
    let anomalies = labels.iter().filter(|&&l| l == 1).count();
    if anomalies == 0 || anomalies == labels.len() {
        return Err(Error::Data("single-class labels: source needs both classes".into()));
    }
    let graph = config.prepare_graph(graph, rng)?;
    let adj = graph.adjacency();
    let alpha = config.losses.alpha.resolve(&labels)?;
    let mut bundle = ModelBundle::init(
        graph.feature_dim(),
        &config.dims,
        config.identity_encoder,
        config.nsaw_enabled,
        rng,
    )?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let mut log = TrainingLog {
        alpha,
        epochs: Vec::with_capacity(config.source_epochs),
    };

    for epoch in 1..=config.source_epochs {
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape, Domain::Source, true)?;
        let x = tape.constant(graph.features().clone());
        let training = Training {
            dropout_rate: config.dropout_rate,
            rng: &mut *rng,
        };
        let pass = forward_tape(&mut tape, &bound, x, adj, Some(training))?;
        let probs = predict_tape(&mut tape, &bound.predictor, pass.embeddings)?;
        let samples = NegativeSamples::draw(adj, config.losses.neg_samples_k, rng);
        let loss = train_loss_tape(
            &mut tape,
            pass.embeddings,
            probs,
            adj,
            &labels,
            &config.losses,
            alpha,
            &samples,
        )?;
        let scalar = |v: Var| tape.value(v).item();
        let (l_train, l_sup, l_self) = (scalar(loss.total), scalar(loss.supervised), scalar(loss.self_supervised));
        let mut grads = tape.backward(loss.total)?;
        apply_gradients(&mut adam, &mut bundle, &bound.named_vars(), &mut grads, |_| true)?;

        let (h, _) = forward_embeddings(&bundle, &graph, Domain::Source, None)?;
        let source_auroc = auroc(&predict(&bundle.predictor, &h)?, &labels)?;
        debug!("source epoch {epoch}: L_train={l_train:.6} L_sup={l_sup:.6} L_self={l_self:.6} auroc={source_auroc:.4}");
        log.epochs.push(TrainEpoch {
            epoch,
            l_train,
            l_sup,
            l_self,
            source_auroc,
        });
    }

    let (h, _) = forward_embeddings(&bundle, &graph, Domain::Source, None)?;
    let centroids = class_centroids(&h, &labels)?;
    if let Some(a) = log.final_auroc() {
        info!("source training done: {} epochs, final AUROC {a:.4}", config.source_epochs);
    }
    Ok((bundle, centroids, log))
}
