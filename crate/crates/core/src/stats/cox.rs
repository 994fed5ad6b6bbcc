//! Univariable Cox proportional hazards with Efron's tie correction.

use serde::{Deserialize, Serialize};
use libm::erfc;

use super::survival::{check_times, SurvivalRecord};
use crate::error::{Error, Result};

/// 97.5% standard normal quantile.
pub const Z_975: f64 = 1.96;

const SCORE_TOL: f64 = 1e-8;
const MAX_ITER: usize = 200;
const BETA_LIMIT: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub beta: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Wald test of `beta = 0`.
    pub p_value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n: usize,
    pub events: usize,
}

/// One risk-set step: events at a distinct time and the risk set there.
struct EventTime {
    d: f64,
    /// Covariate sum over the tied events.
    x_events: f64,
    events: Vec<f64>,
    risk: Vec<f64>,
}

fn event_times(records: &[SurvivalRecord]) -> Vec<EventTime> {
    let mut sorted: Vec<&SurvivalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.time_months.total_cmp(&b.time_months));
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time_months;
        let mut j = i;
        while j < sorted.len() && sorted[j].time_months == t {
            j += 1;
        }
        let events: Vec<f64> = sorted[i..j]
            .iter()
            .filter(|r| r.event)
            .map(|r| r.covariate)
            .collect();
        if !events.is_empty() {
            out.push(EventTime {
                d: events.len() as f64,
                x_events: events.iter().sum(),
                events,
                risk: sorted[i..].iter().map(|r| r.covariate).collect(),
            });
        }
        i = j;
    }
    out
}

/// Log partial likelihood, score and information at `beta`.
fn efron(times: &[EventTime], beta: f64) -> (f64, f64, f64) {
    let (mut ll, mut score, mut info) = (0.0, 0.0, 0.0);
    for et in times {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &x in &et.risk {
            let w = (beta * x).exp();
            s0 += w;
            s1 += w * x;
            s2 += w * x * x;
        }
        let (mut t0, mut t1, mut t2) = (0.0, 0.0, 0.0);
        for &x in &et.events {
            let w = (beta * x).exp();
            t0 += w;
            t1 += w * x;
            t2 += w * x * x;
        }
        ll += beta * et.x_events;
        score += et.x_events;
        let d = et.d as usize;
        for l in 0..d {
            let f = l as f64 / et.d;
            let a0 = s0 - f * t0;
            let a1 = s1 - f * t1;
            let a2 = s2 - f * t2;
            ll -= a0.ln();
            let m = a1 / a0;
            score -= m;
            info += a2 / a0 - m * m;
        }
    }
    (ll, score, info)
}

/// Log partial likelihood (Efron ties) of a univariable model.
pub fn cox_log_likelihood(records: &[SurvivalRecord], beta: f64) -> f64 {
    efron(&event_times(records), beta).0
}

/// Fits `h(t | x) = h₀(t)·exp(beta·x)` for a single covariate.
///
/// Newton steps are kept inside a bracket on which the score changes sign
/// and replaced by bisection whenever they leave it.
pub fn cox_univariable(records: &[SurvivalRecord]) -> Result<CoxFit> {
    check_times(records)?;
    let events = records.iter().filter(|r| r.event).count();
    if events == 0 {
        return Err(Error::Undefined("Cox model without events".into()));
    }
    let first = records[0].covariate;
    if records.iter().all(|r| r.covariate == first) {
        return Err(Error::Undefined("Cox covariate is constant".into()));
    }
    let binary = records.iter().all(|r| r.covariate == 0.0 || r.covariate == 1.0);
    if binary {
        for g in [0.0, 1.0] {
            if !records.iter().any(|r| r.event && r.covariate == g) {
                return Err(Error::Numerical(format!(
                    "monotone likelihood: group {g} has no events, beta diverges"
                )));
            }
        }
    }
    let times = event_times(records);
    let score_at = |b: f64| efron(&times, b).1;

    // The log likelihood is concave, so the score is non-increasing in beta.
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    let s0 = score_at(0.0);
    if s0 > 0.0 {
        hi = 1.0;
        while score_at(hi) > 0.0 {
            lo = hi;
            hi *= 2.0;
            if hi > BETA_LIMIT {
                return Err(Error::Numerical("monotone likelihood: beta diverges upward".into()));
            }
        }
    } else if s0 < 0.0 {
        lo = -1.0;
        while score_at(lo) < 0.0 {
            hi = lo;
            lo *= 2.0;
            if lo < -BETA_LIMIT {
                return Err(Error::Numerical("monotone likelihood: beta diverges downward".into()));
            }
        }
    }

    let mut beta = if s0 == 0.0 { 0.0 } else { 0.5 * (lo + hi) };
    let mut converged = s0 == 0.0;
    let mut iterations = 0;
    while !converged && iterations < MAX_ITER {
        iterations += 1;
        let (_, u, i) = efron(&times, beta);
        if u.abs() < SCORE_TOL {
            converged = true;
            break;
        }
        if u > 0.0 {
            lo = beta;
        } else {
            hi = beta;
        }
        let newton = if i > 0.0 { beta + u / i } else { f64::NAN };
        beta = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 {
            converged = score_at(beta).abs() < 1e-6;
            break;
        }
    }
    let (_, u, info) = efron(&times, beta);
    converged = converged || u.abs() < SCORE_TOL;
    if info.is_nan() || info <= 0.0 {
        return Err(Error::Numerical("Cox information is not positive".into()));
    }
    let se = 1.0 / info.sqrt();
    Ok(CoxFit {
        beta,
        se,
        hazard_ratio: beta.exp(),
        ci_low: (beta - Z_975 * se).exp(),
        ci_high: (beta + Z_975 * se).exp(),
        p_value: erfc((beta / se).abs() / std::f64::consts::SQRT_2),
        converged,
        iterations,
        n: records.len(),
        events,
    })
}
