//! Source training, test-time adaptation with distance-ratio early stopping,
//! margin tracking and checkpoint persistence.

mod adapt;
mod checkpoint;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ScoringMode;
use crate::gnn::ModelDims;
use crate::graphstore::AttributedGraph;
use crate::losses::LossWeights;

pub use adapt::{
    adapt_target, early_stop_score, margin, margin_trace_check, AdaptEpoch, AdaptationTrace,
    EarlyStopper, MarginReport, Preconditions, StopReason, SMALL_LR,
};
pub use checkpoint::{decode as decode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use train::{class_centroids, train_source, ClassCentroids, TrainEpoch, TrainingLog};

/// How the target encoder starts test-time training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetInit {
    /// Fresh Glorot weights.
    #[default]
    Fresh,
    /// Copy of the source encoder; needs equal feature widths.
    FromSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dims: ModelDims,
    pub losses: LossWeights,
    pub lr: f64,
    pub source_epochs: usize,
    pub ttt_max_epochs: usize,
    pub patience: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub nsaw_enabled: bool,
    pub scoring_mode: ScoringMode,
    pub target_init: TargetInit,
    /// Use the identity as source encoder (feature width must equal the
    /// embedding width).
    pub identity_encoder: bool,
    /// Per-node neighbor cap applied before training or adaptation.
    pub neighbor_cap: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dims: ModelDims::default(),
            losses: LossWeights::default(),
            lr: 1e-3,
            source_epochs: 100,
            ttt_max_epochs: 100,
            patience: 10,
            dropout_rate: 0.7,
            seed: 0,
            nsaw_enabled: true,
            scoring_mode: ScoringMode::Affinity,
            target_init: TargetInit::Fresh,
            identity_encoder: false,
            neighbor_cap: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.losses.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.source_epochs == 0 {
            return Err(Error::Config("source_epochs ≥ 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.neighbor_cap == Some(0) {
            return Err(Error::Config("neighbor_cap must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies the neighbor cap, if any.
    pub(crate) fn prepare_graph(&self, graph: &AttributedGraph, rng: &mut crate::Rng) -> Result<AttributedGraph> {
        match self.neighbor_cap {
            Some(cap) => graph.with_adjacency(graph.adjacency().capped(cap, rng)),
            None => Ok(graph.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let c = RunConfig {
            source_epochs: 0,
            ..Default::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("source_epochs ≥ 1"), "{err}");
        for bad in [
            RunConfig { lr: 0.0, ..Default::default() },
            RunConfig { patience: 0, ..Default::default() },
            RunConfig { dropout_rate: 1.0, ..Default::default() },
            RunConfig { neighbor_cap: Some(0), ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn partial_json_fills_defaults_and_rejects_unknown_keys() {
        let c: RunConfig = serde_json::from_str(r#"{"lr": 0.01, "losses": {"lambda": 0.5, "lambda_reg": 0.1, "lambda_s": 0.0, "alpha": "auto", "neg_samples_k": 3}}"#).unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.source_epochs, 100);
        assert_eq!(c.losses.neg_samples_k, 3);
        assert!(serde_json::from_str::<RunConfig>(r#"{"learning_rate": 0.1}"#).is_err());
        let round: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(round, c);
    }
}
