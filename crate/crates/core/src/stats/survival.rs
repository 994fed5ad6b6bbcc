use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time_months: f64,
    /// Recurrence observed; otherwise censored.
    pub event: bool,
    /// Binary risk group or continuous score, depending on the analysis.
    pub covariate: f64,
}

impl SurvivalRecord {
    pub fn new(time_months: f64, event: bool, covariate: f64) -> Self {
        Self {
            time_months,
            event,
            covariate,
        }
    }
}

pub(crate) fn check_times(records: &[SurvivalRecord]) -> Result<()> {
    match records
        .iter()
        .find(|r| !(r.time_months > 0.0 && r.time_months.is_finite()))
    {
        Some(r) => Err(Error::Validation(format!(
            "survival time {} is not positive",
            r.time_months
        ))),
        None => Ok(()),
    }
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_sf_1df(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        erfc((x / 2.0).sqrt())
    }
}

/// Product-limit curve evaluated at each distinct event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    /// Greenwood variance of the survival estimate.
    pub variance: Vec<f64>,
}

impl KmCurve {
    /// Survival just after `t` (step function, 1 before the first event).
    pub fn survival_at(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&x| x <= t);
        if idx == 0 {
            1.0
        } else {
            self.survival[idx - 1]
        }
    }
}

/// Distinct times with `(time, events, censored)`, ascending.
fn tabulate(records: &[SurvivalRecord]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<&SurvivalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.time_months.total_cmp(&b.time_months));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    for r in sorted {
        match out.last_mut() {
            Some(last) if last.0 == r.time_months => {
                if r.event {
                    last.1 += 1;
                } else {
                    last.2 += 1;
                }
            }
            _ => out.push((r.time_months, r.event as usize, !r.event as usize)),
        }
    }
    out
}

pub fn km_estimate(records: &[SurvivalRecord]) -> Result<KmCurve> {
    if records.is_empty() {
        return Err(Error::Validation("Kaplan-Meier of an empty group".into()));
    }
    check_times(records)?;
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
        variance: Vec::new(),
    };
    let mut n = records.len();
    let mut s = 1.0;
    let mut greenwood = 0.0;
    for (t, d, c) in tabulate(records) {
        if d > 0 {
            s *= 1.0 - d as f64 / n as f64;
            if n > d {
                greenwood += d as f64 / (n as f64 * (n - d) as f64);
            }
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(n);
            curve.events.push(d);
            curve.variance.push(s * s * greenwood);
        }
        n -= d + c;
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
}

/// Two-group log-rank test with hypergeometric variance.
pub fn logrank(group_a: &[SurvivalRecord], group_b: &[SurvivalRecord]) -> Result<LogRank> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::Undefined("log-rank needs two non-empty groups".into()));
    }
    check_times(group_a)?;
    check_times(group_b)?;
    let mut all: Vec<(f64, bool, bool)> = group_a
        .iter()
        .map(|r| (r.time_months, r.event, true))
        .chain(group_b.iter().map(|r| (r.time_months, r.event, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut n_a = group_a.len() as f64;
    let mut n = all.len() as f64;
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let (mut d, mut d_a, mut leave, mut leave_a) = (0.0, 0.0, 0.0, 0.0);
        while i < all.len() && all[i].0 == t {
            let (_, event, in_a) = all[i];
            if event {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            leave += 1.0;
            if in_a {
                leave_a += 1.0;
            }
            i += 1;
        }
        if d > 0.0 {
            observed += d_a;
            expected += d * n_a / n;
            if n > 1.0 {
                variance += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
            }
        }
        n -= leave;
        n_a -= leave_a;
    }
    if observed == 0.0 && expected == 0.0 {
        return Err(Error::Undefined("log-rank with no events in either group".into()));
    }
    if variance <= 0.0 {
        return Err(Error::Undefined("log-rank variance is zero".into()));
    }
    let statistic = (observed - expected).powi(2) / variance;
    Ok(LogRank {
        statistic,
        p_value: chi2_sf_1df(statistic),
        observed_a: observed,
        expected_a: expected,
    })
}
