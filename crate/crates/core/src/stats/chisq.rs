use serde::{Deserialize, Serialize};

use super::survival::chi2_sf_1df;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub p_value: f64,
}

/// Pearson chi-square on a 2×2 table with Yates' continuity correction.
///
/// Each cell is moved toward its expected count by at most ½, so tables
/// already closer than ½ to independence give a statistic of 0.
pub fn chi_square_2x2(table: [[u64; 2]; 2]) -> Result<ChiSquare> {
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    if rows.contains(&0) || cols.contains(&0) {
        return Err(Error::Undefined(format!(
            "2x2 table {table:?} has a zero marginal"
        )));
    }
    let n = (rows[0] + rows[1]) as f64;
    let mut statistic = 0.0;
    for (r, row) in table.iter().enumerate() {
        for (c, &o) in row.iter().enumerate() {
            let e = rows[r] as f64 * cols[c] as f64 / n;
            let diff = (o as f64 - e).abs();
            let adjusted = (diff - diff.min(0.5)).max(0.0);
            statistic += adjusted * adjusted / e;
        }
    }
    Ok(ChiSquare {
        statistic,
        p_value: chi2_sf_1df(statistic),
    })
}
