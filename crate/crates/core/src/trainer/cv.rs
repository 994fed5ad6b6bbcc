use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fold::{predict_patients, train_fold, EpochTrace};
use super::{job_rng, TrainConfig};
use crate::cohort::{fold_digest, make_folds, Cohort, Fold};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::stats::{confusion_metrics, roc_auc};

/// One patient's pooled prediction as written to `predictions.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub patient_id: String,
    pub probability: f64,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
}

pub fn fold_metrics(rows: &[PredictionRow], tau: f64) -> Result<Metrics> {
    let probs: Vec<f64> = rows.iter().map(|r| r.probability).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.label == 1).collect();
    let m = confusion_metrics(&probs, &labels, tau)?;
    Ok(Metrics {
        n: rows.len(),
        accuracy: m.accuracy,
        sensitivity: m.sensitivity,
        specificity: m.specificity,
        auc: roc_auc(&probs, &labels).ok(),
    })
}

/// Mean and sample standard deviation over the folds where a metric is
/// defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl MetricSummary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        if n == 0 {
            return Self { mean: None, std: None, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Self { mean: Some(mean), std, n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: MetricSummary,
    pub sensitivity: MetricSummary,
    pub specificity: MetricSummary,
    pub auc: MetricSummary,
}

pub fn aggregate(metrics: &[Metrics]) -> Aggregate {
    Aggregate {
        accuracy: MetricSummary::of(metrics.iter().map(|m| Some(m.accuracy))),
        sensitivity: MetricSummary::of(metrics.iter().map(|m| m.sensitivity)),
        specificity: MetricSummary::of(metrics.iter().map(|m| m.specificity)),
        auc: MetricSummary::of(metrics.iter().map(|m| m.auc)),
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub trace: EpochTrace,
    /// Best snapshot's metrics on the validation split.
    pub validation: Metrics,
    pub test: Metrics,
    pub predictions: Vec<PredictionRow>,
    /// Test patients with no applicable slide.
    pub unpredicted: Vec<String>,
    pub model: Model,
}

#[derive(Debug, Clone)]
pub struct CvRun {
    pub config: TrainConfig,
    pub folds: Vec<Fold>,
    pub fold_digest: String,
    pub results: Vec<FoldResult>,
}

impl CvRun {
    pub fn pooled_predictions(&self) -> Vec<PredictionRow> {
        self.results.iter().flat_map(|r| r.predictions.iter().cloned()).collect()
    }

    pub fn test_summary(&self) -> Aggregate {
        aggregate(&self.results.iter().map(|r| r.test).collect::<Vec<_>>())
    }

    pub fn validation_summary(&self) -> Aggregate {
        aggregate(&self.results.iter().map(|r| r.validation).collect::<Vec<_>>())
    }
}

fn rows_for(cohort: &Cohort, preds: Vec<(String, Option<f64>)>) -> (Vec<PredictionRow>, Vec<String>) {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (id, p) in preds {
        match p {
            Some(probability) => {
                let label = cohort.patient(&id).is_some_and(|pt| pt.label) as u8;
                rows.push(PredictionRow {
                    patient_id: id,
                    probability,
                    label,
                });
            }
            None => missing.push(id),
        }
    }
    (rows, missing)
}

/// Trains and evaluates one (fold, model) job on `cohort`, which may be a
/// cell-type view of the full cohort.
pub(crate) fn run_fold_job(
    cohort: &Cohort,
    fold: &Fold,
    index: usize,
    model_index: usize,
    config: &TrainConfig,
) -> Result<FoldResult> {
    let mut rng = job_rng(config.seed, index, model_index);
    let trained = train_fold(&fold.train, &fold.validation, cohort, config, &mut rng)?;
    let (val_rows, _) = rows_for(cohort, predict_patients(&trained.model, cohort, &fold.validation)?);
    let (predictions, unpredicted) = rows_for(cohort, predict_patients(&trained.model, cohort, &fold.test)?);
    if predictions.is_empty() {
        return Err(Error::Config(format!("fold {index}: no test patient is predictable")));
    }
    Ok(FoldResult {
        fold: index,
        trace: trained.trace,
        validation: fold_metrics(&val_rows, config.tau)?,
        test: fold_metrics(&predictions, config.tau)?,
        predictions,
        unpredicted,
        model: trained.model,
    })
}

/// Runs `jobs` on a pool of `workers` threads, preserving input order.
pub(crate) fn run_parallel<T: Send, R: Send>(
    workers: usize,
    jobs: Vec<T>,
    f: impl Fn(T) -> R + Sync + Send,
) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(|| jobs.into_par_iter().map(f).collect()))
}

/// Stratified k-fold cross-validation of a single model.
pub fn run_cv(cohort: &Cohort, config: &TrainConfig, workers: usize) -> Result<CvRun> {
    config.validate()?;
    let folds = make_folds(cohort, config.k_folds, config.seed)?;
    let jobs: Vec<(usize, &Fold)> = folds.iter().enumerate().collect();
    let results = run_parallel(workers, jobs, |(i, f)| run_fold_job(cohort, f, i, 0, config))?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(CvRun {
        config: config.clone(),
        fold_digest: fold_digest(&folds),
        folds,
        results,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

#[derive(Serialize)]
struct FoldReport<'a> {
    fold: usize,
    best_epoch: usize,
    validation: &'a Metrics,
    test: &'a Metrics,
    unpredicted: &'a [String],
}

#[derive(Serialize)]
struct MetricsReport<'a> {
    fold_digest: &'a str,
    folds: Vec<FoldReport<'a>>,
    validation: Aggregate,
    test: Aggregate,
    pooled_test: Metrics,
}

/// Writes `config.json`, `folds.json`, `metrics.json`, pooled
/// `predictions.csv` and per-fold `fold_k/{predictions.csv, trace.csv,
/// model.json}`.
pub fn write_run_dir(dir: &Path, run: &CvRun) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("config.json"), &run.config)?;
    write_json(&dir.join("folds.json"), &run.folds)?;
    for r in &run.results {
        let fd = dir.join(format!("fold_{}", r.fold));
        fs::create_dir_all(&fd).map_err(|e| Error::io(&fd, e))?;
        write_csv(&fd.join("predictions.csv"), &r.predictions)?;
        write_csv(&fd.join("trace.csv"), &r.trace.epochs)?;
        write_json(&fd.join("model.json"), &r.model)?;
    }
    let pooled = run.pooled_predictions();
    write_csv(&dir.join("predictions.csv"), &pooled)?;
    let report = MetricsReport {
        fold_digest: &run.fold_digest,
        folds: run
            .results
            .iter()
            .map(|r| FoldReport {
                fold: r.fold,
                best_epoch: r.trace.best_epoch,
                validation: &r.validation,
                test: &r.test,
                unpredicted: &r.unpredicted,
            })
            .collect(),
        validation: run.validation_summary(),
        test: run.test_summary(),
        pooled_test: fold_metrics(&pooled, run.config.tau)?,
    };
    write_json(&dir.join("metrics.json"), &report)
}
