//! Six cell-view models per fold and their patient-level average.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{fold_digest, make_folds, subset_for_model, Cohort, Fold, ModelKind};
use crate::error::{Error, Result};
use crate::stats::{concordance_index, cox_univariable, CoxFit, SurvivalRecord};
use crate::trainer::{
    aggregate, fold_metrics, run_fold_job, run_parallel, write_csv, write_json, FoldResult,
    MetricSummary, Metrics, PredictionRow, TrainConfig,
};

/// Mean of a patient's slide probabilities; `None` marks the patient as
/// inapplicable for the model.
pub fn patient_probability(slide_probs: &[f64]) -> Option<f64> {
    (!slide_probs.is_empty()).then(|| slide_probs.iter().sum::<f64>() / slide_probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    /// Applicable models only.
    pub per_model: BTreeMap<ModelKind, f64>,
    pub combined: f64,
    pub decision: bool,
}

/// Averages the applicable models and thresholds at `tau`.
pub fn combine_models(patient_id: &str, per_model: &BTreeMap<ModelKind, f64>, tau: f64) -> Result<PatientPrediction> {
    if per_model.is_empty() {
        return Err(Error::UnpredictablePatient(patient_id.to_string()));
    }
    let combined = per_model.values().sum::<f64>() / per_model.len() as f64;
    Ok(PatientPrediction {
        patient_id: patient_id.to_string(),
        per_model: per_model.clone(),
        combined,
        decision: combined >= tau,
    })
}

/// The cohort seen by one model: every slide reduced to its cell view.
pub fn cohort_view(cohort: &Cohort, kind: ModelKind) -> Cohort {
    let mut view = cohort.clone();
    for p in &mut view.patients {
        for s in &mut p.slides {
            *s = subset_for_model(s, kind);
        }
    }
    view
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InapplicableModel {
    pub fold: usize,
    pub model: ModelKind,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub config: TrainConfig,
    pub folds: Vec<Fold>,
    pub fold_digest: String,
    /// `results[fold][model]` in [`ModelKind::ENSEMBLE`] order.
    pub results: Vec<Vec<Option<FoldResult>>>,
    pub inapplicable: Vec<InapplicableModel>,
    /// Test patients of every fold, in fold order.
    pub predictions: Vec<PatientPrediction>,
    pub unpredictable: Vec<String>,
    pub combined_fold_metrics: Vec<Metrics>,
}

/// Trains the five cell-type models and the all-cells model on every fold
/// and averages them per patient.
pub fn run_ensemble(cohort: &Cohort, config: &TrainConfig, workers: usize) -> Result<EnsembleRun> {
    config.validate()?;
    let folds = make_folds(cohort, config.k_folds, config.seed)?;
    let views: Vec<Cohort> = ModelKind::ENSEMBLE.iter().map(|&k| cohort_view(cohort, k)).collect();
    let jobs: Vec<(usize, usize)> = (0..folds.len())
        .flat_map(|f| (0..views.len()).map(move |m| (f, m)))
        .collect();
    let outcomes = run_parallel(workers, jobs, |(f, m)| {
        (f, m, run_fold_job(&views[m], &folds[f], f, m, config))
    })?;

    let mut results: Vec<Vec<Option<FoldResult>>> = (0..folds.len()).map(|_| vec![None; views.len()]).collect();
    let mut inapplicable = Vec::new();
    for (f, m, outcome) in outcomes {
        match outcome {
            Ok(r) => results[f][m] = Some(r),
            Err(e @ (Error::Config(_) | Error::InapplicableSlide(_))) => inapplicable.push(InapplicableModel {
                fold: f,
                model: ModelKind::ENSEMBLE[m],
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }

    let mut predictions = Vec::new();
    let mut unpredictable = Vec::new();
    let mut combined_fold_metrics = Vec::new();
    for (f, fold) in folds.iter().enumerate() {
        let mut rows = Vec::new();
        for id in &fold.test {
            let per_model: BTreeMap<ModelKind, f64> = results[f]
                .iter()
                .zip(ModelKind::ENSEMBLE)
                .filter_map(|(r, kind)| {
                    let r = r.as_ref()?;
                    let row = r.predictions.iter().find(|p| &p.patient_id == id)?;
                    Some((kind, row.probability))
                })
                .collect();
            match combine_models(id, &per_model, config.tau) {
                Ok(p) => {
                    rows.push(PredictionRow {
                        patient_id: id.clone(),
                        probability: p.combined,
                        label: cohort.patient(id).is_some_and(|pt| pt.label) as u8,
                    });
                    predictions.push(p);
                }
                Err(Error::UnpredictablePatient(id)) => unpredictable.push(id),
                Err(e) => return Err(e),
            }
        }
        combined_fold_metrics.push(fold_metrics(&rows, config.tau)?);
    }
    Ok(EnsembleRun {
        config: config.clone(),
        fold_digest: fold_digest(&folds),
        folds,
        results,
        inapplicable,
        predictions,
        unpredictable,
        combined_fold_metrics,
    })
}

/// One row of the model comparison: classification metrics across folds,
/// hazard ratio of the predicted risk groups on pooled test predictions and
/// per-fold C-index of the probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub folds: usize,
    pub accuracy: MetricSummary,
    pub sensitivity: MetricSummary,
    pub specificity: MetricSummary,
    pub auc: MetricSummary,
    pub cox: Option<CoxFit>,
    pub c_index: MetricSummary,
    /// Why `cox` is missing, if it is.
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub fold_digest: String,
    pub rows: Vec<ModelRow>,
    pub inapplicable: Vec<InapplicableModel>,
    pub unpredictable: Vec<String>,
}

fn survival_records(cohort: &Cohort, rows: &[PredictionRow], tau: f64) -> Vec<SurvivalRecord> {
    rows.iter()
        .filter_map(|r| cohort.patient(&r.patient_id))
        .zip(rows)
        .map(|(p, r)| SurvivalRecord::new(p.time_months, p.event, (r.probability >= tau) as u8 as f64))
        .collect()
}

fn model_row(name: &str, cohort: &Cohort, per_fold: &[(Metrics, Vec<PredictionRow>)], tau: f64) -> ModelRow {
    let metrics: Vec<Metrics> = per_fold.iter().map(|(m, _)| *m).collect();
    let agg = aggregate(&metrics);
    let pooled: Vec<PredictionRow> = per_fold.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
    let (cox, note) = match cox_univariable(&survival_records(cohort, &pooled, tau)) {
        Ok(fit) => (Some(fit), String::new()),
        Err(e) => (None, e.to_string()),
    };
    let c_index = MetricSummary::of(per_fold.iter().map(|(_, rows)| {
        let recs = survival_records(cohort, rows, tau);
        let scores: Vec<f64> = rows.iter().map(|r| r.probability).collect();
        concordance_index(&scores, &recs).ok().map(|c| c.c_index)
    }));
    ModelRow {
        model: name.to_string(),
        folds: per_fold.len(),
        accuracy: agg.accuracy,
        sensitivity: agg.sensitivity,
        specificity: agg.specificity,
        auc: agg.auc,
        cox,
        c_index,
        note,
    }
}

impl EnsembleRun {
    /// Test predictions of one model per fold where it was applicable.
    pub fn model_predictions(&self, model: usize) -> Vec<(Metrics, Vec<PredictionRow>)> {
        self.results
            .iter()
            .filter_map(|fold| fold[model].as_ref().map(|r| (r.test, r.predictions.clone())))
            .collect()
    }

    pub fn combined_predictions(&self, cohort: &Cohort) -> Vec<(Metrics, Vec<PredictionRow>)> {
        let mut out = Vec::new();
        let mut it = self.predictions.iter().peekable();
        for (fold, metrics) in self.folds.iter().zip(&self.combined_fold_metrics) {
            let mut rows = Vec::new();
            while let Some(p) = it.peek() {
                if !fold.test.contains(&p.patient_id) {
                    break;
                }
                rows.push(PredictionRow {
                    patient_id: p.patient_id.clone(),
                    probability: p.combined,
                    label: cohort.patient(&p.patient_id).is_some_and(|pt| pt.label) as u8,
                });
                it.next();
            }
            out.push((*metrics, rows));
        }
        out
    }

    /// Six model rows in [`ModelKind::ENSEMBLE`] order, then the combined row.
    pub fn report(&self, cohort: &Cohort) -> EnsembleReport {
        let tau = self.config.tau;
        let mut rows: Vec<ModelRow> = ModelKind::ENSEMBLE
            .iter()
            .enumerate()
            .map(|(m, kind)| model_row(kind.name(), cohort, &self.model_predictions(m), tau))
            .collect();
        rows.push(model_row("combined", cohort, &self.combined_predictions(cohort), tau));
        EnsembleReport {
            fold_digest: self.fold_digest.clone(),
            rows,
            inapplicable: self.inapplicable.clone(),
            unpredictable: self.unpredictable.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedRow {
    pub patient_id: String,
    pub probability: f64,
    pub decision: u8,
    pub label: u8,
    pub time_months: f64,
    pub event: u8,
}

/// Writes `config.json`, `folds.json`, `ensemble_report.json`,
/// `predictions_combined.csv` and `model_<name>/fold_k/predictions.csv`.
pub fn write_ensemble_dir(dir: &Path, run: &EnsembleRun, cohort: &Cohort) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("config.json"), &run.config)?;
    write_json(&dir.join("folds.json"), &run.folds)?;
    write_json(&dir.join("ensemble_report.json"), &run.report(cohort))?;
    let combined: Vec<CombinedRow> = run
        .predictions
        .iter()
        .filter_map(|p| {
            let pt = cohort.patient(&p.patient_id)?;
            Some(CombinedRow {
                patient_id: p.patient_id.clone(),
                probability: p.combined,
                decision: p.decision as u8,
                label: pt.label as u8,
                time_months: pt.time_months,
                event: pt.event as u8,
            })
        })
        .collect();
    write_csv(&dir.join("predictions_combined.csv"), &combined)?;
    for fold in &run.results {
        for (r, kind) in fold.iter().zip(ModelKind::ENSEMBLE) {
            if let Some(r) = r {
                let d = dir.join(format!("model_{}", kind.name())).join(format!("fold_{}", r.fold));
                fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                write_csv(&d.join("predictions.csv"), &r.predictions)?;
                write_json(&d.join("model.json"), &r.model)?;
            }
        }
    }
    Ok(())
}
