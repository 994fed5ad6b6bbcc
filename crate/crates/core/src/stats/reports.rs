//! Subgroup metric tables and the false-negative bias analysis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::chisq::chi_square_2x2;
use super::classification::{confusion_metrics, roc_auc};
use crate::cohort::{Cohort, Patient};
use crate::error::{Error, Result};

/// Numeric subgroup keys with more distinct values than this are split at
/// the median instead of grouped by value.
pub const MAX_CATEGORIES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientScore {
    pub patient_id: String,
    pub probability: f64,
}

impl PatientScore {
    pub fn new(patient_id: impl Into<String>, probability: f64) -> Self {
        Self {
            patient_id: patient_id.into(),
            probability,
        }
    }
}

fn resolve<'a>(predictions: &[PatientScore], cohort: &'a Cohort) -> Result<Vec<(&'a Patient, f64)>> {
    predictions
        .iter()
        .map(|p| {
            cohort
                .patient(&p.patient_id)
                .map(|pt| (pt, p.probability))
                .ok_or_else(|| Error::Unknown {
                    kind: "patient",
                    name: p.patient_id.clone(),
                })
        })
        .collect()
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Groups patients by subgroup value; patients without a value are left out.
/// Numeric keys with many distinct values become `<median` / `>=median`.
fn partition<'a>(rows: &[(&'a Patient, f64)], key: &str) -> BTreeMap<String, Vec<(&'a Patient, f64)>> {
    let present: Vec<(&Patient, f64, &Value)> = rows
        .iter()
        .filter_map(|&(p, s)| p.subgroup_value(key).map(|v| (p, s, v)))
        .collect();
    let mut numbers: Vec<f64> = present.iter().filter_map(|(_, _, v)| v.as_f64()).collect();
    let mut distinct = numbers.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut groups: BTreeMap<String, Vec<(&Patient, f64)>> = BTreeMap::new();
    if numbers.len() == present.len() && distinct.len() > MAX_CATEGORIES {
        let m = median(&mut numbers);
        for (p, s, v) in present {
            let name = if v.as_f64().unwrap_or(f64::NAN) >= m {
                format!(">={m}")
            } else {
                format!("<{m}")
            };
            groups.entry(name).or_default().push((p, s));
        }
    } else {
        for (p, s, v) in present {
            groups.entry(value_label(v)).or_default().push((p, s));
        }
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub key: String,
    pub group: String,
    pub n: usize,
    pub n_positive: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// `None` when the group holds a single class.
    pub auc: Option<f64>,
}

pub fn subgroup_report(
    predictions: &[PatientScore],
    cohort: &Cohort,
    key: &str,
    tau: f64,
) -> Result<Vec<SubgroupRow>> {
    let rows = resolve(predictions, cohort)?;
    let groups = partition(&rows, key);
    if groups.is_empty() {
        return Err(Error::Unknown {
            kind: "subgroup key",
            name: key.to_string(),
        });
    }
    groups
        .into_iter()
        .map(|(group, members)| {
            let probs: Vec<f64> = members.iter().map(|m| m.1).collect();
            let labels: Vec<bool> = members.iter().map(|m| m.0.label).collect();
            let m = confusion_metrics(&probs, &labels, tau)?;
            Ok(SubgroupRow {
                key: key.to_string(),
                group,
                n: members.len(),
                n_positive: labels.iter().filter(|&&y| y).count(),
                accuracy: m.accuracy,
                sensitivity: m.sensitivity,
                specificity: m.specificity,
                auc: roc_auc(&probs, &labels).ok(),
            })
        })
        .collect()
}

/// Subgroup keys and recurrence windows used by [`bias_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub sex_key: String,
    pub race_key: String,
    pub age_key: String,
    /// Months from diagnosis to death; absent or null when alive at 60 months.
    pub death_key: String,
    /// Late recurrence window `[start, end)` in months, compared with earlier recurrence.
    pub late_window: [f64; 2],
    pub early_recurrence_months: f64,
    pub early_death_months: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            sex_key: "sex".into(),
            race_key: "race".into(),
            age_key: "age".into(),
            death_key: "death_months".into(),
            late_window: [40.0, 60.0],
            early_recurrence_months: 24.0,
            early_death_months: 60.0,
        }
    }
}

/// One false-negative-rate comparison. The rate is false negatives over all
/// patients of the group; for the recurrence-timing rows both groups consist
/// of recurred patients only, so it is the miss rate among them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub comparison: String,
    pub group_a: String,
    pub group_b: String,
    pub n_a: usize,
    pub fn_a: usize,
    pub fn_rate_a: Option<f64>,
    pub n_b: usize,
    pub fn_b: usize,
    pub fn_rate_b: Option<f64>,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    /// Empty when the test is defined; otherwise why it is not.
    pub note: String,
}

fn compare(
    comparison: &str,
    (name_a, a): (&str, &[(&Patient, f64)]),
    (name_b, b): (&str, &[(&Patient, f64)]),
    tau: f64,
) -> BiasRow {
    let fns = |g: &[(&Patient, f64)]| g.iter().filter(|(p, s)| p.label && *s < tau).count();
    let (fn_a, fn_b) = (fns(a), fns(b));
    let rate = |f: usize, n: usize| (n > 0).then(|| f as f64 / n as f64);
    let mut row = BiasRow {
        comparison: comparison.into(),
        group_a: name_a.into(),
        group_b: name_b.into(),
        n_a: a.len(),
        fn_a,
        fn_rate_a: rate(fn_a, a.len()),
        n_b: b.len(),
        fn_b,
        fn_rate_b: rate(fn_b, b.len()),
        statistic: None,
        p_value: None,
        note: String::new(),
    };
    if a.is_empty() || b.is_empty() {
        row.note = "empty stratum".into();
        return row;
    }
    let table = [
        [fn_a as u64, (a.len() - fn_a) as u64],
        [fn_b as u64, (b.len() - fn_b) as u64],
    ];
    match chi_square_2x2(table) {
        Ok(c) => {
            row.statistic = Some(c.statistic);
            row.p_value = Some(c.p_value);
        }
        Err(e) => row.note = e.to_string(),
    }
    row
}

/// The two most frequent values of a categorical key, most frequent first.
fn top_two<'a>(
    groups: &'a BTreeMap<String, Vec<(&'a Patient, f64)>>,
) -> [(String, &'a [(&'a Patient, f64)]); 2] {
    let mut by_size: Vec<(&String, &Vec<(&Patient, f64)>)> = groups.iter().collect();
    by_size.sort_by_key(|x| std::cmp::Reverse(x.1.len()));
    let pick = |i: usize| match by_size.get(i) {
        Some((name, members)) => ((*name).clone(), members.as_slice()),
        None => (String::new(), &[][..]),
    };
    [pick(0), pick(1)]
}

/// Five false-negative comparisons: sex, race, age at the median, late vs
/// earlier recurrence, and early recurrence with early death vs other
/// recurrence. Every comparison yields a row, flagged when undefined.
pub fn bias_report(
    predictions: &[PatientScore],
    cohort: &Cohort,
    config: &BiasConfig,
    tau: f64,
) -> Result<Vec<BiasRow>> {
    let rows = resolve(predictions, cohort)?;
    let mut out = Vec::with_capacity(5);

    for (label, key) in [("sex", &config.sex_key), ("race", &config.race_key)] {
        let mut categorical: BTreeMap<String, Vec<(&Patient, f64)>> = BTreeMap::new();
        for &(p, s) in &rows {
            if let Some(v) = p.subgroup_value(key) {
                categorical.entry(value_label(v)).or_default().push((p, s));
            }
        }
        let [(na, a), (nb, b)] = top_two(&categorical);
        out.push(compare(label, (&na, a), (&nb, b), tau));
    }

    let mut ages: Vec<f64> = rows
        .iter()
        .filter_map(|(p, _)| p.subgroup_value(&config.age_key).and_then(Value::as_f64))
        .collect();
    let (mut older, mut younger) = (Vec::new(), Vec::new());
    let (mut name_old, mut name_young) = (String::from(">=median"), String::from("<median"));
    if !ages.is_empty() {
        let m = median(&mut ages);
        name_old = format!(">={m}");
        name_young = format!("<{m}");
        for &(p, s) in &rows {
            if let Some(age) = p.subgroup_value(&config.age_key).and_then(Value::as_f64) {
                if age >= m {
                    older.push((p, s));
                } else {
                    younger.push((p, s));
                }
            }
        }
    }
    out.push(compare("age", (&name_old, &older), (&name_young, &younger), tau));

    let recurred: Vec<(&Patient, f64)> = rows.iter().copied().filter(|(p, _)| p.label).collect();
    let [start, end] = config.late_window;
    let (late, earlier): (Vec<_>, Vec<_>) = recurred
        .iter()
        .copied()
        .filter(|(p, _)| p.time_months < end)
        .partition(|(p, _)| p.time_months >= start);
    out.push(compare(
        "late_recurrence",
        (&format!("{start}-{end} months"), &late),
        (&format!("<{start} months"), &earlier),
        tau,
    ));

    let aggressive = |p: &Patient| {
        p.time_months <= config.early_recurrence_months
            && p.subgroup_value(&config.death_key)
                .and_then(Value::as_f64)
                .is_some_and(|d| d <= config.early_death_months)
    };
    let (early, other): (Vec<_>, Vec<_>) = recurred.iter().copied().partition(|(p, _)| aggressive(p));
    out.push(compare(
        "early_recurrence_early_death",
        ("early recurrence and death", &early),
        ("other recurrence", &other),
        tau,
    ));
    Ok(out)
}
