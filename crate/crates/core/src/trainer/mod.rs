//! Loss, optimizer, early stopping and the cross-validation harness.

mod cv;
mod fold;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{softplus, Tensor};

pub use cv::{
    aggregate, fold_metrics, read_predictions, run_cv, write_run_dir, Aggregate, CvRun, FoldResult,
    MetricSummary, Metrics, PredictionRow,
};
pub(crate) use cv::{csv_error, run_fold_job, run_parallel, write_csv, write_json};
pub use fold::{predict_patients, train_fold, EpochRecord, EpochTrace, FoldTraining};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub k_folds: usize,
    /// Decision threshold on patient probabilities.
    pub tau: f64,
    pub rank: usize,
    pub use_patch_embeddings: bool,
    pub d_model: usize,
    /// Gated attention width.
    pub hidden: usize,
    pub spatial_scale: f64,
    /// `None` weights positives by the negative/positive slide ratio of the
    /// training split.
    pub positive_class_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            patience: 20,
            seed: 0,
            k_folds: 5,
            tau: 0.5,
            rank: 2,
            use_patch_embeddings: true,
            d_model: 16,
            hidden: 64,
            spatial_scale: 1.0,
            positive_class_weight: None,
        }
    }
}

impl TrainConfig {
    /// A learning rate of 0 is accepted and freezes the parameters.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.k_folds < 2 {
            return Err(Error::Config(format!("k_folds must be at least 2, got {}", self.k_folds)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be a non-negative number, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if let Some(w) = self.positive_class_weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("positive_class_weight must be positive, got {w}")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, d_patch: usize, d_cell: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            hidden: self.hidden,
            rank: self.rank,
            use_patch_embeddings: self.use_patch_embeddings,
            spatial_scale: self.spatial_scale,
            ..ModelConfig::new(d_patch, d_cell)
        }
    }
}

/// Independent random stream for one training job, so results do not depend
/// on which worker runs it or in what order.
pub fn job_rng(seed: u64, fold: usize, model: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((fold as u64) << 8) | model as u64);
    rng
}

/// `w·y·softplus(−z) + (1 − y)·softplus(z)`.
pub fn bce_loss(logit: f64, label: bool, positive_class_weight: f64) -> f64 {
    if label {
        positive_class_weight * softplus(-logit)
    } else {
        softplus(logit)
    }
}

/// `(sens + spec) − |sens − spec|`, which equals `2·min(sens, spec)`.
pub fn clinical_score(sensitivity: f64, specificity: f64) -> f64 {
    (sensitivity + specificity) - (sensitivity - specificity).abs()
}

/// 1-based epoch with the highest score; the earliest wins ties.
pub fn select_best_epoch(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i + 1)
}

/// Patience-based stopping on a score that should increase.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            epoch: 0,
        }
    }

    /// Records the next epoch's score and reports whether it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        self.epoch += 1;
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = self.epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epoch - self.best_epoch >= self.patience
    }

    /// 1-based; 0 before the first observation.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn optimizer_step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameters for {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::Dimension("parameter layout changed between steps".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
