//! Offline router calibration.
//!
//! 1. [`collect_hidden_states`] runs the frozen model over a corpus and
//!    keeps each token's hidden vector at every checkpoint layer and at the
//!    final layer.
//! 2. [`compute_labels`] marks a token as converged at checkpoint `k` when
//!    the cosine similarity between its layer-`k` and final hidden vectors
//!    is strictly above `tau`.
//! 3. [`train_router`] fits one bottleneck router per checkpoint with
//!    binary cross-entropy and Adam.
//!
//! [`calibrate`] composes the three and returns a [`RouterBank`] together
//! with a [`CalibrationSummary`] of per-router statistics.

mod bank;
mod collect;
mod labels;
mod train;

pub use bank::{BankError, BankMeta, RouterBank, BANK_MAGIC, BANK_VERSION};
pub use collect::{collect_hidden_states, HiddenCollection};
pub use labels::{compute_labels, CalibrationDataset};
pub use train::{bce_with_logits, loss_and_gradients, train_router, Gradients, TrainedRouter};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, Document};
use crate::model::{ModelError, ReferenceModel, RMSNORM_EPS};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no checkpoint layers for {num_layers} layers at interval {interval}")]
    NoCheckpoints { num_layers: usize, interval: usize },
    #[error("dataset for layer {0} is empty")]
    EmptyDataset(usize),
    #[error("hidden and final vectors are misaligned: {hidden} vs {final_} values")]
    Misaligned { hidden: usize, final_: usize },
    #[error(
        "non-finite loss training router {layer} (epoch {epoch}, lr {lr}, batch size {batch_size})"
    )]
    NonFiniteLoss {
        layer: usize,
        epoch: usize,
        lr: f32,
        batch_size: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Checkpoint interval `c`; routers sit at layers `c-1, 2c-1, ...`.
    pub checkpoint_interval: usize,
    /// Cosine-similarity threshold `tau` for the convergence labels.
    pub convergence_threshold: f32,
    /// Router bottleneck width. `None` means `min(128, d / 2)`.
    pub bottleneck: Option<usize>,
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub seed: u64,
    /// Whether the last layer (`L - 1`) hosts a router when it falls on
    /// the checkpoint grid.
    pub include_final_layer: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            checkpoint_interval: 4,
            convergence_threshold: 0.98,
            bottleneck: None,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 1024,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            include_final_layer: true,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |m: &str| Err(CalibrationError::InvalidConfig(m.to_owned()));
        let tau = self.convergence_threshold;
        if self.checkpoint_interval < 1 {
            return bad("checkpoint interval must be >= 1");
        }
        if !(tau > 0.0 && tau < 1.0) {
            return bad("tau must lie in the open interval (0, 1)");
        }
        if self.bottleneck == Some(0) {
            return bad("bottleneck must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive and finite");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be >= 1");
        }
        for beta in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&beta) {
                return bad("adam betas must lie in [0, 1)");
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam eps must be positive");
        }
        Ok(())
    }

    pub fn bottleneck_for(&self, hidden_dim: usize) -> usize {
        self.bottleneck
            .unwrap_or_else(|| 128.min(hidden_dim / 2).max(1))
    }
}

/// Router placement: `{i·c − 1 : i ≥ 1}` below `num_layers`, or below
/// `num_layers − 1` when the final layer is excluded.
pub fn checkpoint_layers(num_layers: usize, interval: usize, include_final: bool) -> Vec<usize> {
    let bound = if include_final {
        num_layers
    } else {
        num_layers.saturating_sub(1)
    };
    if interval == 0 {
        return Vec::new();
    }
    (interval - 1..bound).step_by(interval).collect()
}

/// Per-router training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterStats {
    pub layer: usize,
    pub examples: usize,
    pub positives: usize,
    pub final_loss: f32,
    pub accuracy: f32,
    /// All labels were the same class.
    pub single_class: bool,
}

/// Everything about a calibration run that the bank file does not hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub model_digest: String,
    pub corpus_digest: String,
    pub documents: usize,
    pub tokens: usize,
    pub zero_norm_similarities: usize,
    pub config: CalibrationConfig,
    pub routers: Vec<RouterStats>,
}

pub fn calibrate(
    model: &ReferenceModel,
    corpus: &[Document],
    config: &CalibrationConfig,
) -> Result<(RouterBank, CalibrationSummary), CalibrationError> {
    config.validate()?;
    let mcfg = model.config();
    let layers = checkpoint_layers(
        mcfg.num_layers,
        config.checkpoint_interval,
        config.include_final_layer,
    );
    if layers.is_empty() {
        return Err(CalibrationError::NoCheckpoints {
            num_layers: mcfg.num_layers,
            interval: config.checkpoint_interval,
        });
    }

    let collection = collect_hidden_states(model, corpus, &layers)?;
    let dataset = compute_labels(&collection, config.convergence_threshold)?;
    let bottleneck = config.bottleneck_for(mcfg.hidden_dim);

    use rayon::prelude::*;
    let trained: Vec<TrainedRouter> = (0..layers.len())
        .into_par_iter()
        .map(|i| {
            train_router(
                layers[i],
                &dataset.hidden[i],
                &dataset.labels[i],
                mcfg.hidden_dim,
                bottleneck,
                config,
            )
        })
        .collect::<Result<_, _>>()?;

    let meta = BankMeta {
        hidden_dim: mcfg.hidden_dim,
        bottleneck,
        interval: config.checkpoint_interval,
        tau: config.convergence_threshold,
        rmsnorm_eps: RMSNORM_EPS,
        num_layers: mcfg.num_layers,
    };
    let routers_stats = trained
        .iter()
        .zip(&dataset.labels)
        .map(|(t, labels)| RouterStats {
            layer: t.router.layer,
            examples: labels.len(),
            positives: labels.iter().filter(|&&y| y).count(),
            final_loss: t.final_loss,
            accuracy: t.accuracy,
            single_class: t.single_class,
        })
        .collect();
    let bank = RouterBank::new(meta, trained.into_iter().map(|t| t.router).collect())
        .expect("calibrated routers match their own metadata");

    let summary = CalibrationSummary {
        model_digest: mcfg.digest(),
        corpus_digest: corpus::corpus_digest(corpus),
        documents: corpus.len(),
        tokens: dataset.n_tokens,
        zero_norm_similarities: dataset.zero_norm,
        config: *config,
        routers: routers_stats,
    };
    Ok((bank, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_sets() {
        assert_eq!(
            checkpoint_layers(32, 4, true),
            vec![3, 7, 11, 15, 19, 23, 27, 31]
        );
        assert_eq!(
            checkpoint_layers(32, 4, false),
            vec![3, 7, 11, 15, 19, 23, 27]
        );
        assert_eq!(checkpoint_layers(12, 4, false), vec![3, 7]);
        assert_eq!(checkpoint_layers(12, 4, true), vec![3, 7, 11]);
        assert_eq!(checkpoint_layers(36, 12, true), vec![11, 23, 35]);
        assert_eq!(checkpoint_layers(5, 1, false), vec![0, 1, 2, 3]);
        assert!(checkpoint_layers(2, 4, true).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(CalibrationConfig::default().validate().is_ok());
        for cfg in [
            CalibrationConfig {
                convergence_threshold: 1.5,
                ..Default::default()
            },
            CalibrationConfig {
                convergence_threshold: 0.0,
                ..Default::default()
            },
            CalibrationConfig {
                checkpoint_interval: 0,
                ..Default::default()
            },
            CalibrationConfig {
                bottleneck: Some(0),
                ..Default::default()
            },
            CalibrationConfig {
                learning_rate: f32::NAN,
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn bottleneck_scales_with_width() {
        let c = CalibrationConfig::default();
        assert_eq!(c.bottleneck_for(64), 32);
        assert_eq!(c.bottleneck_for(4096), 128);
        assert_eq!(
            CalibrationConfig {
                bottleneck: Some(7),
                ..c
            }
            .bottleneck_for(64),
            7
        );
    }
}
