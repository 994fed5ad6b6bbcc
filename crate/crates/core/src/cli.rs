//! Command-line entry point: synth, train, evaluate, ablate, ensemble, stats
//! and export-attention.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{fold_digest, load_cohort, read_manifest, save_cohort, Cohort, Fold};
use crate::ensemble::{run_ensemble, write_ensemble_dir};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::stats::{
    bias_report, concordance_index, cox_univariable, km_estimate, logrank, subgroup_report, BiasConfig,
    PatientScore, SubgroupRow, SurvivalRecord,
};
use crate::synthgen::{generate, SynthConfig};
use crate::trainer::{
    fold_metrics, predict_patients, read_predictions, run_cv, write_csv, write_json, write_run_dir, Aggregate,
    CvRun, Metrics, PredictionRow, TrainConfig,
};
use crate::trainer::csv_error;

/// Everything a command may need, read from one JSON file. Missing sections
/// and fields take their defaults; the resolved form is echoed into every
/// output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Parser)]
#[command(name = "cellmil", version, about = "Cell-aware multiple instance learning for recurrence prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parallel training jobs.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub rank: Option<u8>,
    #[arg(long)]
    pub no_patch_embeddings: bool,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Cross-validate one model.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Re-score a training run's fold models on their test patients.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention rank and patch-embedding ablation grid.
    Ablate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Six cell-view models and their average.
    Ensemble {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Survival and bias statistics of a run's predictions.
    Stats {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Patch and cell attention of one slide.
    ExportAttention {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        slide: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, opts } => cmd_synth(&resolve_config(&opts)?, &out),
        Command::Train { cohort, out, opts } => cmd_train(&cohort, &resolve_config(&opts)?, opts.workers, &out),
        Command::Evaluate { run, cohort, out } => {
            let out = out.unwrap_or_else(|| run.join("evaluation"));
            cmd_evaluate(&run, &cohort, &out)
        }
        Command::Ablate { cohort, out, opts } => cmd_ablate(&cohort, &resolve_config(&opts)?, opts.workers, &out),
        Command::Ensemble { cohort, out, opts } => {
            cmd_ensemble(&cohort, &resolve_config(&opts)?, opts.workers, &out)
        }
        Command::Stats { run, cohort, out, tau } => {
            let out = out.unwrap_or_else(|| run.clone());
            cmd_stats(&run, &cohort, tau, &out)
        }
        Command::ExportAttention { run, cohort, slide, out } => cmd_export_attention(&run, &cohort, &slide, &out),
    }
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn resolve_config(opts: &Overrides) -> Result<RunConfig> {
    let mut c = match &opts.config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = opts.seed {
        c.synth.seed = s;
        c.train.seed = s;
    }
    if let Some(r) = opts.rank {
        c.train.rank = r as usize;
    }
    if opts.no_patch_embeddings {
        c.train.use_patch_embeddings = false;
    }
    if let Some(t) = opts.tau {
        c.train.tau = t;
    }
    c.synth.validate()?;
    c.train.validate()?;
    Ok(c)
}

/// A cohort directory or its `manifest.json`.
pub fn manifest_path(cohort: &Path) -> PathBuf {
    if cohort.is_dir() {
        cohort.join("manifest.json")
    } else {
        cohort.to_path_buf()
    }
}

fn open_cohort(cohort: &Path) -> Result<Cohort> {
    let path = manifest_path(cohort);
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "cohort manifest not found"),
        ));
    }
    load_cohort(&path)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// SHA-256 over the manifest bytes followed by every referenced slide file.
pub fn cohort_digest(cohort: &Path) -> Result<String> {
    let manifest = manifest_path(cohort);
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut h = Sha256::new();
    h.update(fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?);
    for p in read_manifest(&manifest)?.patients {
        for s in p.slides {
            let path = base.join(s);
            h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    version: &'a str,
    cohort: String,
    cohort_digest: String,
    config_digest: String,
    fold_digest: Option<String>,
}

fn write_run_info(out: &Path, command: &str, cohort: &Path, config: &RunConfig, folds: Option<String>) -> Result<()> {
    write_json(&out.join("run_config.json"), config)?;
    let info = RunInfo {
        command,
        version: env!("CARGO_PKG_VERSION"),
        cohort: cohort.display().to_string(),
        cohort_digest: cohort_digest(cohort)?,
        config_digest: sha256_file(&out.join("run_config.json"))?,
        fold_digest: folds,
    };
    write_json(&out.join("run_info.json"), &info)
}

pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<()> {
    let synth = generate(&config.synth)?;
    save_cohort(&synth.cohort, out)?;
    write_json(&out.join("truth.json"), &synth.truth)?;
    write_json(&out.join("synth_config.json"), &config.synth)?;
    eprintln!(
        "wrote {} patients, {} slides to {}",
        synth.cohort.patients.len(),
        synth.cohort.slide_count(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train(cohort_path: &Path, config: &RunConfig, workers: usize, out: &Path) -> Result<()> {
    let cohort = open_cohort(cohort_path)?;
    let run = run_cv(&cohort, &config.train, workers)?;
    write_run_dir(out, &run)?;
    write_run_info(out, "train", cohort_path, config, Some(run.fold_digest.clone()))?;
    let s = run.test_summary();
    eprintln!(
        "test AUC {:.4} ± {:.4} over {} folds",
        s.auc.mean.unwrap_or(f64::NAN),
        s.auc.std.unwrap_or(f64::NAN),
        run.results.len()
    );
    Ok(())
}

fn read_folds(run: &Path) -> Result<Vec<Fold>> {
    let path = run.join("folds.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.clone(),
        reason: e.to_string(),
    })
}

fn read_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model: Model = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    model.config.validate()?;
    Ok(model)
}

fn read_train_config(run: &Path) -> Result<TrainConfig> {
    let path = run.join("config.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct FoldEvaluation {
    fold: usize,
    metrics: Metrics,
    /// Largest difference from the stored fold predictions.
    max_abs_diff: f64,
}

#[derive(Serialize)]
struct Evaluation {
    folds: Vec<FoldEvaluation>,
    pooled: Metrics,
    /// Metrics recomputed from the run's pooled `predictions.csv`.
    pooled_from_file: Metrics,
}

pub fn cmd_evaluate(run: &Path, cohort_path: &Path, out: &Path) -> Result<()> {
    let cohort = open_cohort(cohort_path)?;
    let config = read_train_config(run)?;
    let folds = read_folds(run)?;
    let mut evals = Vec::new();
    let mut pooled = Vec::new();
    for (k, fold) in folds.iter().enumerate() {
        let fd = run.join(format!("fold_{k}"));
        let model = read_model(&fd.join("model.json"))?;
        let stored = read_predictions(&fd.join("predictions.csv"))?;
        let rows: Vec<PredictionRow> = predict_patients(&model, &cohort, &fold.test)?
            .into_iter()
            .filter_map(|(id, p)| {
                let label = cohort.patient(&id)?.label as u8;
                p.map(|probability| PredictionRow {
                    patient_id: id,
                    probability,
                    label,
                })
            })
            .collect();
        let max_abs_diff = rows
            .iter()
            .zip(&stored)
            .map(|(a, b)| if a.patient_id == b.patient_id { (a.probability - b.probability).abs() } else { f64::INFINITY })
            .fold(if rows.len() == stored.len() { 0.0 } else { f64::INFINITY }, f64::max);
        evals.push(FoldEvaluation {
            fold: k,
            metrics: fold_metrics(&rows, config.tau)?,
            max_abs_diff,
        });
        pooled.extend(rows);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_csv(&out.join("predictions.csv"), &pooled)?;
    let evaluation = Evaluation {
        folds: evals,
        pooled: fold_metrics(&pooled, config.tau)?,
        pooled_from_file: fold_metrics(&read_predictions(&run.join("predictions.csv"))?, config.tau)?,
    };
    write_json(&out.join("evaluation.json"), &evaluation)
}

/// The five ablation settings: (name, rank, patch embeddings).
pub const ABLATION_GRID: [(&str, usize, bool); 5] = [
    ("1d", 1, true),
    ("2d", 2, true),
    ("3d", 3, true),
    ("1d_no_patch", 1, false),
    ("2d_no_patch", 2, false),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    pub rank: usize,
    pub patch_embeddings: bool,
    pub fold_digest: String,
    pub validation: Aggregate,
    pub test: Aggregate,
}

fn fmt_summary(s: &crate::trainer::MetricSummary) -> String {
    match (s.mean, s.std) {
        (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
        (Some(m), None) => format!("{m:.4}"),
        _ => String::new(),
    }
}

/// Runs the grid with shared folds and seeds.
pub fn run_ablation(cohort: &Cohort, train: &TrainConfig, workers: usize) -> Result<Vec<(AblationRow, CvRun)>> {
    ABLATION_GRID
        .iter()
        .map(|&(name, rank, patch)| {
            let cfg = TrainConfig {
                rank,
                use_patch_embeddings: patch,
                ..train.clone()
            };
            let run = run_cv(cohort, &cfg, workers)?;
            let row = AblationRow {
                configuration: name.to_string(),
                rank,
                patch_embeddings: patch,
                fold_digest: run.fold_digest.clone(),
                validation: run.validation_summary(),
                test: run.test_summary(),
            };
            Ok((row, run))
        })
        .collect()
}

pub fn cmd_ablate(cohort_path: &Path, config: &RunConfig, workers: usize, out: &Path) -> Result<()> {
    let cohort = open_cohort(cohort_path)?;
    let results = run_ablation(&cohort, &config.train, workers)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv")).map_err(|e| csv_error(out, e))?;
    let header = [
        "configuration",
        "val_accuracy",
        "val_sensitivity",
        "val_specificity",
        "val_auc",
        "test_accuracy",
        "test_sensitivity",
        "test_specificity",
        "test_auc",
    ];
    w.write_record(header).map_err(|e| csv_error(out, e))?;
    for (row, run) in &results {
        let (v, t) = (&row.validation, &row.test);
        let rec = [
            row.configuration.clone(),
            fmt_summary(&v.accuracy),
            fmt_summary(&v.sensitivity),
            fmt_summary(&v.specificity),
            fmt_summary(&v.auc),
            fmt_summary(&t.accuracy),
            fmt_summary(&t.sensitivity),
            fmt_summary(&t.specificity),
            fmt_summary(&t.auc),
        ];
        w.write_record(&rec).map_err(|e| csv_error(out, e))?;
        write_run_dir(&out.join(&row.configuration), run)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    let rows: Vec<&AblationRow> = results.iter().map(|(r, _)| r).collect();
    write_json(&out.join("ablation.json"), &rows)?;
    let digests: BTreeSet<&str> = rows.iter().map(|r| r.fold_digest.as_str()).collect();
    if digests.len() != 1 {
        return Err(Error::Validation("ablation runs used different folds".into()));
    }
    let digest = digests.into_iter().next().map(String::from);
    write_run_info(out, "ablate", cohort_path, config, digest)
}

pub fn cmd_ensemble(cohort_path: &Path, config: &RunConfig, workers: usize, out: &Path) -> Result<()> {
    let cohort = open_cohort(cohort_path)?;
    let run = run_ensemble(&cohort, &config.train, workers)?;
    for m in &run.inapplicable {
        eprintln!("fold {}: model {} inapplicable: {}", m.fold, m.model, m.reason);
    }
    write_ensemble_dir(out, &run, &cohort)?;
    write_run_info(out, "ensemble", cohort_path, config, Some(fold_digest(&run.folds)))
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    patient_id: String,
    probability: f64,
}

/// Pooled patient probabilities of a run: the ensemble average when present,
/// otherwise the single-model predictions.
pub fn run_scores(run: &Path) -> Result<Vec<PatientScore>> {
    let combined = run.join("predictions_combined.csv");
    let path = if combined.exists() { combined } else { run.join("predictions.csv") };
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    r.deserialize::<ScoreRow>()
        .map(|row| {
            row.map(|s| PatientScore::new(s.patient_id, s.probability))
                .map_err(|e| csv_error(&path, e))
        })
        .collect()
}

#[derive(Serialize)]
struct KmRow {
    time: f64,
    survival: f64,
    at_risk: usize,
    events: usize,
    group: &'static str,
}

#[derive(Serialize)]
struct Flagged<T: Serialize> {
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl<T: Serialize> From<Result<T>> for Flagged<T> {
    fn from(r: Result<T>) -> Self {
        match r {
            Ok(v) => Flagged { result: Some(v), error: None },
            Err(e) => Flagged { result: None, error: Some(e.to_string()) },
        }
    }
}

#[derive(Serialize)]
struct SurvivalReport {
    tau: f64,
    n_high: usize,
    n_low: usize,
    cox: Flagged<crate::stats::CoxFit>,
    logrank: Flagged<crate::stats::LogRank>,
}

pub fn cmd_stats(run: &Path, cohort_path: &Path, tau: Option<f64>, out: &Path) -> Result<()> {
    let cohort = open_cohort(cohort_path)?;
    let tau = match tau {
        Some(t) => t,
        None => read_train_config(run).map(|c| c.tau).unwrap_or(0.5),
    };
    let scores = run_scores(run)?;
    let mut records = Vec::with_capacity(scores.len());
    for s in &scores {
        let p = cohort.patient(&s.patient_id).ok_or_else(|| Error::Unknown {
            kind: "patient",
            name: s.patient_id.clone(),
        })?;
        records.push(SurvivalRecord::new(p.time_months, p.event, (s.probability >= tau) as u8 as f64));
    }
    let high: Vec<SurvivalRecord> = records.iter().copied().filter(|r| r.covariate == 1.0).collect();
    let low: Vec<SurvivalRecord> = records.iter().copied().filter(|r| r.covariate == 0.0).collect();

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut km = Vec::new();
    for (name, group) in [("high", &high), ("low", &low)] {
        if group.is_empty() {
            continue;
        }
        let c = km_estimate(group)?;
        km.push(KmRow { time: 0.0, survival: 1.0, at_risk: group.len(), events: 0, group: name });
        for i in 0..c.times.len() {
            km.push(KmRow {
                time: c.times[i],
                survival: c.survival[i],
                at_risk: c.at_risk[i],
                events: c.events[i],
                group: name,
            });
        }
    }
    write_csv(&out.join("km_curve.csv"), &km)?;
    let report = SurvivalReport {
        tau,
        n_high: high.len(),
        n_low: low.len(),
        cox: cox_univariable(&records).into(),
        logrank: logrank(&high, &low).into(),
    };
    write_json(&out.join("cox.json"), &report)?;
    let probs: Vec<f64> = scores.iter().map(|s| s.probability).collect();
    let cindex: Flagged<_> = concordance_index(&probs, &records).into();
    write_json(&out.join("cindex.json"), &cindex)?;

    let keys: BTreeSet<String> = cohort
        .patients
        .iter()
        .flat_map(|p| p.subgroups.keys().cloned())
        .filter(|k| k != &BiasConfig::default().death_key)
        .collect();
    let mut rows: Vec<SubgroupRow> = Vec::new();
    for key in keys {
        match subgroup_report(&scores, &cohort, &key, tau) {
            Ok(r) => rows.extend(r),
            Err(Error::Unknown { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    write_csv(&out.join("subgroup_report.csv"), &rows)?;
    write_csv(&out.join("bias_report.csv"), &bias_report(&scores, &cohort, &BiasConfig::default(), tau)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub slide_id: String,
    pub patch_id: u32,
    pub origin_x: f32,
    pub origin_y: f32,
    pub attention_weight: f64,
    pub n_cells: usize,
    /// Index of the most attended cell within the patch.
    pub top_cell: usize,
    pub top_cell_attention: f64,
    /// CLS attention over `[CLS, cells…]`, `;`-separated.
    pub cell_attention: String,
}

/// Model used for a slide: the fold model that had the slide's patient in
/// its test split.
fn model_for_patient(run: &Path, patient_id: &str) -> Result<Model> {
    let folds = read_folds(run)?;
    let k = folds
        .iter()
        .position(|f| f.test.iter().any(|id| id == patient_id))
        .ok_or_else(|| Error::Unknown {
            kind: "test patient",
            name: patient_id.to_string(),
        })?;
    let direct = run.join(format!("fold_{k}")).join("model.json");
    let path = if direct.exists() {
        direct
    } else {
        run.join("model_all").join(format!("fold_{k}")).join("model.json")
    };
    read_model(&path)
}

pub fn export_attention(run: &Path, cohort: &Cohort, slide_id: &str) -> Result<Vec<AttentionRow>> {
    let (patient, slide) = cohort.find_slide(slide_id).ok_or_else(|| Error::Unknown {
        kind: "slide",
        name: slide_id.to_string(),
    })?;
    let model = model_for_patient(run, &patient.patient_id)?;
    let score = model.predict(slide)?;
    let rows = score
        .patch_ids
        .iter()
        .zip(&score.attention_weights)
        .zip(&score.cell_attention)
        .map(|((&pid, &w), cells)| {
            let patch = slide.patches.iter().find(|p| p.patch_id == pid).expect("scored patch exists");
            let (top, top_w) = cells[1..]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &a)| if a > b.1 { (i, a) } else { b });
            AttentionRow {
                slide_id: slide_id.to_string(),
                patch_id: pid,
                origin_x: patch.origin[0],
                origin_y: patch.origin[1],
                attention_weight: w,
                n_cells: patch.cells.len(),
                top_cell: top,
                top_cell_attention: top_w,
                cell_attention: cells.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";"),
            }
        })
        .collect();
    Ok(rows)
}

pub fn cmd_export_attention(run: &Path, cohort_path: &Path, slide_id: &str, out: &Path) -> Result<()> {
    let cohort = open_cohort(cohort_path)?;
    let rows = export_attention(run, &cohort, slide_id)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_csv(out, &rows)
}
