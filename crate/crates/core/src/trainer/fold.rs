use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clinical_score, Adam, EarlyStopping, TrainConfig};
use crate::cohort::{Cohort, Slide};
use crate::ensemble::patient_probability;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::stats::confusion_metrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl EpochTrace {
    pub fn scores(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.score).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FoldTraining {
    pub model: Model,
    pub trace: EpochTrace,
}

/// Mean slide probability per patient, `None` when no slide is applicable.
pub fn predict_patients(model: &Model, cohort: &Cohort, ids: &[String]) -> Result<Vec<(String, Option<f64>)>> {
    ids.iter()
        .map(|id| {
            let patient = cohort.patient(id).ok_or_else(|| Error::Unknown {
                kind: "patient",
                name: id.clone(),
            })?;
            let mut probs = Vec::with_capacity(patient.slides.len());
            for slide in &patient.slides {
                match model.predict(slide) {
                    Ok(s) => probs.push(s.probability),
                    Err(Error::InapplicableSlide(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok((id.clone(), patient_probability(&probs)))
        })
        .collect()
}

fn validation_score(model: &Model, cohort: &Cohort, ids: &[String], tau: f64) -> Result<(f64, f64)> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for (id, p) in predict_patients(model, cohort, ids)? {
        if let Some(p) = p {
            probs.push(p);
            labels.push(cohort.patient(&id).is_some_and(|pt| pt.label));
        }
    }
    let m = confusion_metrics(&probs, &labels, tau).map_err(|_| no_class())?;
    match (m.sensitivity, m.specificity) {
        (Some(se), Some(sp)) => Ok((se, sp)),
        _ => Err(no_class()),
    }
}

fn no_class() -> Error {
    Error::Config("validation split lacks a class; sensitivity or specificity is undefined".into())
}

/// Trains one model with one gradient step per slide, early-stopping on the
/// patient-level clinical score of the validation split. Slides without
/// applicable patches are skipped.
pub fn train_fold(
    train: &[String],
    validation: &[String],
    cohort: &Cohort,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FoldTraining> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let model_config = config.model_config(cohort.d_patch, cohort.d_cell);
    model_config.validate()?;
    let mut model = Model::new(model_config, rng)?;

    let mut slides: Vec<(&Slide, bool)> = Vec::new();
    for id in train {
        let p = cohort.patient(id).ok_or_else(|| Error::Unknown {
            kind: "patient",
            name: id.clone(),
        })?;
        for s in &p.slides {
            if s.patches.iter().any(|pt| !pt.cells.is_empty()) {
                slides.push((s, p.label));
            }
        }
    }
    let positives = slides.iter().filter(|s| s.1).count();
    if positives == 0 || positives == slides.len() {
        return Err(Error::Config("training split needs applicable slides of both classes".into()));
    }
    let weight = config
        .positive_class_weight
        .unwrap_or((slides.len() - positives) as f64 / positives as f64);

    let mut optimizer = Adam::new(config.learning_rate);
    let mut stopping = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut trace = EpochTrace::default();
    for epoch in 1..=config.epochs {
        slides.shuffle(rng);
        let mut total = 0.0;
        for &(slide, label) in &slides {
            let (loss, grads) = model.loss_and_gradients(slide, label, weight)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}")));
            }
            total += loss;
            optimizer.optimizer_step(model.params.tensors_mut(), &grads)?;
        }
        let (sensitivity, specificity) = validation_score(&model, cohort, validation, config.tau)?;
        let score = clinical_score(sensitivity, specificity);
        trace.epochs.push(EpochRecord {
            epoch,
            train_loss: total / slides.len() as f64,
            sensitivity,
            specificity,
            score,
        });
        if stopping.observe(score) {
            best = model.clone();
        }
        if stopping.should_stop() {
            break;
        }
    }
    trace.best_epoch = stopping.best_epoch();
    Ok(FoldTraining { model: best, trace })
}
