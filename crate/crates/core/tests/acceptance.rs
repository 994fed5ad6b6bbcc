//! Acceptance run: one line per criterion, non-zero exit if any fails.

mod common;

use std::time::{Duration, Instant};

use cellmil::cli::{cmd_train, run_ablation, RunConfig};
use cellmil::cohort::{encode_slide, load_cohort, save_cohort};
use cellmil::ensemble::run_ensemble;
use cellmil::stats::*;
use cellmil::synthgen::{generate_cohort, SignalKind, SynthConfig};
use cellmil::trainer::{clinical_score, run_cv, select_best_epoch, EarlyStopping, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Largest gradient error relative to `max(|analytic|, |numeric|)`, floored
/// at 1e-6 so exactly-zero entries compare absolutely.
fn gradient_error(model: &cellmil::Model, slide: &cellmil::cohort::Slide, label: bool, weight: f64) -> (f64, usize) {
    let eps = 1e-5;
    let (_, grads) = model.loss_and_gradients(slide, label, weight).unwrap();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (t, grad) in grads.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe.params.tensors()[t].data()[i];
            probe.params.tensors_mut()[t].data_mut()[i] = orig + eps;
            let plus = probe.loss_and_gradients(slide, label, weight).unwrap().0;
            probe.params.tensors_mut()[t].data_mut()[i] = orig - eps;
            let minus = probe.loss_and_gradients(slide, label, weight).unwrap().0;
            probe.params.tensors_mut()[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grad.data()[i];
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / scale);
            count += 1;
        }
    }
    (worst, count)
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut r = common::rng(101);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for (rank, use_patch) in [(1, true), (2, true), (3, true), (2, false)] {
        let model = common::random_model(&mut r, 6, 6, 8, 8, rank, use_patch);
        let slide = common::random_slide(&mut r, 6, 6, 4, 6);
        let (err, n) = gradient_error(&model, &slide, rank != 2, 1.6);
        worst = worst.max(err);
        entries += n;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("max relative error {worst:.2e} over {entries} parameters, {secs:.1} s"),
    )
}

fn permutation_invariance() -> Outcome {
    let mut r = common::rng(102);
    let mut drift: f64 = 0.0;
    for trial in 0..100 {
        let model = common::random_model(&mut r, 8, 8, 8, 8, 1 + trial % 3, trial % 4 != 3);
        let slide = common::random_slide(&mut r, 8, 8, 6, 8);
        let base = model.predict(&slide).unwrap().probability;
        let mut s = slide.clone();
        s.patches.shuffle(&mut r);
        for p in &mut s.patches {
            p.cells.shuffle(&mut r);
        }
        drift = drift.max((model.predict(&s).unwrap().probability - base).abs());
    }
    outcome(drift <= 1e-9, format!("max drift {drift:.1e} over 100 trials"))
}

fn cv_auc(kind: SignalKind, strength: f64, seed: u64, train: &TrainConfig, workers: usize) -> f64 {
    let cohort = generate_cohort(&SynthConfig {
        signal_kind: kind,
        signal_strength: strength,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let run = run_cv(&cohort, &TrainConfig { seed, ..train.clone() }, workers).unwrap();
    run.test_summary().auc.mean.unwrap_or(f64::NAN)
}

fn learning_demonstration() -> Outcome {
    let start = Instant::now();
    let train = TrainConfig::default();
    let signal = cv_auc(SignalKind::CellShift, 2.0, 0, &train, 1);
    let control = cv_auc(SignalKind::CellShift, 0.0, 0, &train, 1);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        signal >= 0.85 && (0.35..=0.65).contains(&control) && secs < 600.0,
        format!("cell_shift AUC {signal:.3}, control AUC {control:.3}, {secs:.1} s on one worker"),
    )
}

fn ablation_ordering() -> Outcome {
    let cohort = generate_cohort(&SynthConfig {
        signal_kind: SignalKind::PatchCellInteraction,
        signal_strength: 1.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let rows = run_ablation(&cohort, &TrainConfig::default(), workers()).unwrap();
    let auc = |name: &str| {
        rows.iter()
            .find(|(r, _)| r.configuration == name)
            .and_then(|(r, _)| r.test.auc.mean)
            .unwrap_or(f64::NAN)
    };
    let (d1, d2, d2n) = (auc("1d"), auc("2d"), auc("2d_no_patch"));
    let same_folds = rows.windows(2).all(|w| w[0].0.fold_digest == w[1].0.fold_digest);
    outcome(
        d2 - d2n >= 0.05 && d2 >= d1 - 0.02 && same_folds,
        format!("2D {d2:.3}, 2D without patch {d2n:.3}, 1D {d1:.3}"),
    )
}

fn ensemble_property() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let cohort = generate_cohort(&SynthConfig {
            signal_kind: SignalKind::MultiCelltype,
            signal_strength: 1.5,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let run = run_ensemble(&cohort, &TrainConfig { seed, ..TrainConfig::default() }, workers()).unwrap();
        let report = run.report(&cohort);
        let auc_of = |name: &str| report.rows.iter().find(|r| r.model == name).and_then(|r| r.auc.mean);
        let combined = auc_of("combined").unwrap_or(f64::NAN);
        let best = report
            .rows
            .iter()
            .filter(|r| r.model != "combined")
            .filter_map(|r| r.auc.mean)
            .fold(f64::NEG_INFINITY, f64::max);
        pass &= combined >= best - 0.02;
        parts.push(format!("seed {seed}: combined {combined:.3} vs best single {best:.3}"));
    }
    outcome(pass, parts.join("; "))
}

fn brute_cindex(scores: &[f64], r: &[SurvivalRecord]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0u64);
    for i in 0..r.len() {
        for j in 0..r.len() {
            if r[i].event && r[i].time_months < r[j].time_months {
                den += 1;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0).then(|| num / den as f64)
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn censored_arm(rng: &mut impl Rng, n: usize, hazard: f64, covariate: f64, horizon: f64) -> Vec<SurvivalRecord> {
    let d = Exp::new(hazard).unwrap();
    (0..n)
        .map(|_| {
            let t: f64 = d.sample(rng);
            let censor = rng.gen_range(0.0..horizon);
            SurvivalRecord::new(t.min(censor).max(1e-6), t <= censor, covariate)
        })
        .collect()
}

fn statistics_oracles() -> Outcome {
    let mut r = common::rng(106);
    let mut failures = Vec::new();

    let mut cindex_ok = 0;
    for _ in 0..100 {
        let n = r.gen_range(2..=30);
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..8) as f64 / 8.0).collect();
        let recs: Vec<SurvivalRecord> = (0..n)
            .map(|_| SurvivalRecord::new(r.gen_range(1..15) as f64, r.gen_bool(0.6), 0.0))
            .collect();
        let same = match (concordance_index(&scores, &recs), brute_cindex(&scores, &recs)) {
            (Ok(c), Some(want)) => c.c_index == want,
            (Err(_), None) => true,
            _ => false,
        };
        cindex_ok += same as usize;
    }
    if cindex_ok != 100 {
        failures.push(format!("C-index {cindex_ok}/100"));
    }

    // Product-limit by hand: events at 1, 3, 3, 5; censored at 2 and 6.
    let km = km_estimate(&[
        SurvivalRecord::new(1.0, true, 0.0),
        SurvivalRecord::new(2.0, false, 0.0),
        SurvivalRecord::new(3.0, true, 0.0),
        SurvivalRecord::new(3.0, true, 0.0),
        SurvivalRecord::new(5.0, true, 0.0),
        SurvivalRecord::new(6.0, false, 0.0),
    ])
    .unwrap();
    let table = [(0.5, 1.0), (1.0, 5.0 / 6.0), (2.5, 5.0 / 6.0), (3.0, 5.0 / 12.0), (5.0, 5.0 / 24.0), (9.0, 5.0 / 24.0)];
    if table.iter().any(|&(t, s)| (km.survival_at(t) - s).abs() > 1e-12) {
        failures.push("KM table".into());
    }

    let group = censored_arm(&mut r, 50, 0.03, 0.0, 60.0);
    let dup = logrank(&group, &group.clone()).unwrap();
    if dup.p_value <= 0.99 {
        failures.push(format!("log-rank duplicate p {}", dup.p_value));
    }

    let planted = 4f64.ln();
    let mut errors = Vec::new();
    for seed in 0..50 {
        let mut rng = common::rng(2000 + seed);
        let mut recs = censored_arm(&mut rng, 200, 0.04, 1.0, 600.0);
        recs.extend(censored_arm(&mut rng, 200, 0.01, 0.0, 600.0));
        errors.push(cox_univariable(&recs).unwrap().beta - planted);
    }
    let mean_err = errors.iter().sum::<f64>() / errors.len() as f64;
    let within = errors.iter().filter(|e| e.abs() <= 0.15).count();
    if mean_err.abs() >= 0.05 || within < 35 {
        failures.push(format!("Cox recovery mean {mean_err:.3}, {within}/50 within 0.15"));
    }

    let mut grid_checked = 0;
    let mut grid_worst: f64 = 0.0;
    while grid_checked < 20 {
        let recs: Vec<SurvivalRecord> = (0..6)
            .map(|i| SurvivalRecord::new(r.gen_range(1..6) as f64, r.gen_bool(0.7), (i % 2) as f64))
            .collect();
        let Ok(fit) = cox_univariable(&recs) else { continue };
        let (mut best, mut best_ll) = (0.0, f64::NEG_INFINITY);
        for k in -60_000..=60_000 {
            let b = k as f64 * 1e-4;
            let ll = cox_log_likelihood(&recs, b);
            if ll > best_ll {
                best = b;
                best_ll = ll;
            }
        }
        if best.abs() > 5.9 {
            continue;
        }
        grid_worst = grid_worst.max((fit.beta - best).abs());
        grid_checked += 1;
    }
    if grid_worst >= 1e-3 {
        failures.push(format!("Cox grid gap {grid_worst:.1e}"));
    }

    let mut auc_ok = true;
    for _ in 0..50 {
        let scores: Vec<f64> = (0..40).map(|_| r.gen_range(0..15) as f64).collect();
        let mut labels: Vec<bool> = (0..40).map(|_| r.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        auc_ok &= roc_auc(&scores, &labels).unwrap() == brute_auc(&scores, &labels);
    }
    if !auc_ok {
        failures.push("AUC pair count".into());
    }

    let detail = format!(
        "C-index 100/100 exact, KM table, duplicate log-rank p {:.3}, Cox mean error {mean_err:.3} with {within}/50 within 0.15, grid gap {grid_worst:.1e}, AUC exact",
        dup.p_value
    );
    if failures.is_empty() {
        outcome(true, detail)
    } else {
        outcome(false, failures.join(", "))
    }
}

fn clinical_score_and_stopping() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..=100 {
        for j in 0..=100 {
            let (se, sp) = (i as f64 / 100.0, j as f64 / 100.0);
            worst = worst.max((clinical_score(se, sp) - 2.0 * se.min(sp)).abs());
        }
    }
    let mut r = common::rng(107);
    let mut traces = vec![vec![0.4, 1.1, 0.9, 1.1], vec![1.0; 6], vec![0.2, 0.3, 0.3, 0.1]];
    for _ in 0..500 {
        let n = r.gen_range(1..30);
        traces.push((0..n).map(|_| r.gen_range(0..6) as f64 / 5.0).collect());
    }
    let mut earliest = true;
    for t in &traces {
        let max = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let want = t.iter().position(|&s| s == max).unwrap() + 1;
        let mut es = EarlyStopping::new(t.len());
        for &s in t {
            es.observe(s);
        }
        earliest &= select_best_epoch(t) == Some(want) && es.best_epoch() == want;
    }
    outcome(
        worst <= 1e-12 && earliest,
        format!("grid max error {worst:.1e}, {} traces select the earliest maximum", traces.len()),
    )
}

fn format_round_trip() -> Outcome {
    let mut exact = 0;
    for i in 0..50 {
        let cohort = generate_cohort(&common::varied_synth_config(i)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_cohort(&cohort, dir.path()).unwrap();
        let loaded = load_cohort(&manifest).unwrap();
        let again = tempfile::tempdir().unwrap();
        let manifest2 = save_cohort(&loaded, again.path()).unwrap();
        let bytes_equal = std::fs::read(&manifest).unwrap() == std::fs::read(&manifest2).unwrap()
            && cohort.patients.iter().flat_map(|p| &p.slides).all(|s| {
                let file = format!("slides/{}.ceb", s.slide_id);
                let original = std::fs::read(dir.path().join(&file)).unwrap();
                original == std::fs::read(again.path().join(&file)).unwrap()
                    && original == encode_slide(s, cohort.d_patch, cohort.d_cell).unwrap()
            });
        exact += (loaded == cohort && bytes_equal) as usize;
    }
    outcome(exact == 50, format!("{exact}/50 cohorts bit-exact"))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig {
        synth: SynthConfig {
            signal_strength: 1.0,
            ..SynthConfig::default()
        },
        train: TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        },
    };
    let cohort = tmp.path().join("cohort");
    cellmil::cli::cmd_synth(&config, &cohort).unwrap();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("run{k}"));
        cmd_train(&cohort, &config, 1, &out).unwrap();
        outputs.push(std::fs::read(out.join("predictions.csv")).unwrap());
    }
    let out = tmp.path().join("run_bin");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_cellmil"))
        .args(["train", "--workers", "1", "--cohort"])
        .arg(&cohort)
        .arg("--out")
        .arg(&out)
        .arg("--config")
        .arg({
            let p = tmp.path().join("config.json");
            std::fs::write(&p, serde_json::to_vec(&config).unwrap()).unwrap();
            p
        })
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    let binary = std::fs::read(out.join("predictions.csv")).unwrap_or_default();
    let identical = status.success() && outputs[0] == outputs[1] && outputs[0] == binary;
    outcome(
        identical,
        format!("{} bytes, library runs and binary run identical: {identical}", outputs[0].len()),
    )
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("permutation invariance", permutation_invariance),
        ("learning demonstration", learning_demonstration),
        ("ablation ordering", ablation_ordering),
        ("ensemble property", ensemble_property),
        ("statistics oracles", statistics_oracles),
        ("clinical score and early stopping", clinical_score_and_stopping),
        ("format round-trip", format_round_trip),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += !result.pass as usize;
        println!(
            "criterion {} {name}: {} ({}) [{:.1} s]",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            Duration::as_secs_f64(&start.elapsed())
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
