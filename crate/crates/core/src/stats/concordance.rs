use serde::{Deserialize, Serialize};

use super::survival::SurvivalRecord;
use crate::error::{Error, Result};

/// Harrell's C with the pair counts behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concordance {
    pub c_index: f64,
    pub concordant: u64,
    pub discordant: u64,
    pub tied_score: u64,
    pub comparable: u64,
}

/// Fenwick tree over score ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn prefix(&self, i: usize) -> u64 {
        let (mut i, mut s) = (i, 0);
        while i > 0 {
            s += self.0[i];
            i &= i - 1;
        }
        s
    }
}

/// Higher score means higher risk. A pair is comparable when the earlier
/// time carries an event; equal times are never comparable.
pub fn concordance_index(scores: &[f64], records: &[SurvivalRecord]) -> Result<Concordance> {
    if scores.len() != records.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} records",
            scores.len(),
            records.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN score".into()));
    }
    let mut ranks_sorted = scores.to_vec();
    ranks_sorted.sort_by(f64::total_cmp);
    ranks_sorted.dedup();
    let rank = |s: f64| ranks_sorted.partition_point(|&x| x < s);

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].time_months.total_cmp(&records[a].time_months));

    let mut tree = Fenwick(vec![0; ranks_sorted.len() + 1]);
    let mut later = 0u64;
    let (mut concordant, mut discordant, mut tied) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = records[order[i]].time_months;
        let mut j = i;
        while j < order.len() && records[order[j]].time_months == t {
            j += 1;
        }
        for &k in &order[i..j] {
            if records[k].event {
                let r = rank(scores[k]);
                let below = tree.prefix(r);
                let equal = tree.prefix(r + 1) - below;
                concordant += below;
                tied += equal;
                discordant += later - below - equal;
            }
        }
        for &k in &order[i..j] {
            tree.add(rank(scores[k]));
        }
        later += (j - i) as u64;
        i = j;
    }
    let comparable = concordant + discordant + tied;
    if comparable == 0 {
        return Err(Error::Undefined("no comparable pairs for the C-index".into()));
    }
    Ok(Concordance {
        c_index: (concordant as f64 + 0.5 * tied as f64) / comparable as f64,
        concordant,
        discordant,
        tied_score: tied,
        comparable,
    })
}
