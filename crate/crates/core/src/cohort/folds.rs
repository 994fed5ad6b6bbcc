use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Cohort;
use crate::error::{Error, Result};

/// Fraction of each fold's training patients held out for early stopping.
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Patient-level split for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Label-stratified k-fold split of patients. Each class is shuffled with
/// the seed and dealt round-robin into test folds; the remaining patients of
/// a fold are split again, per class, into training and validation.
pub fn make_folds(cohort: &Cohort, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k_folds must be at least 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for p in &cohort.patients {
        classes[p.label as usize].push(&p.patient_id);
    }
    for (label, ids) in classes.iter().enumerate() {
        if ids.len() < k {
            return Err(Error::Config(format!(
                "{} patients with label {label}; {k}-fold stratification needs at least {k}",
                ids.len()
            )));
        }
    }
    let mut test: Vec<[Vec<&str>; 2]> = vec![[Vec::new(), Vec::new()]; k];
    for (label, ids) in classes.iter_mut().enumerate() {
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            test[i % k][label].push(id);
        }
    }

    let mut folds = Vec::with_capacity(k);
    for fold_test in &test {
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for label in 0..2 {
            let mut rest: Vec<&str> = classes[label]
                .iter()
                .copied()
                .filter(|id| !fold_test[label].contains(id))
                .collect();
            rest.shuffle(&mut rng);
            let n_val = ((rest.len() as f64 * VALIDATION_FRACTION).round() as usize)
                .max(1)
                .min(rest.len().saturating_sub(1));
            validation.extend(rest[..n_val].iter().map(|s| s.to_string()));
            train.extend(rest[n_val..].iter().map(|s| s.to_string()));
        }
        let mut test_ids: Vec<String> = fold_test
            .iter()
            .flatten()
            .map(|s| s.to_string())
            .collect();
        let order = |v: &mut Vec<String>| {
            v.sort_by_key(|id| {
                cohort
                    .patients
                    .iter()
                    .position(|p| &p.patient_id == id)
                    .unwrap_or(usize::MAX)
            })
        };
        order(&mut train);
        order(&mut validation);
        order(&mut test_ids);
        folds.push(Fold {
            train,
            validation,
            test: test_ids,
        });
    }
    Ok(folds)
}

/// Hex digest identifying a fold assignment.
pub fn fold_digest(folds: &[Fold]) -> String {
    let json = serde_json::to_vec(folds).expect("folds serialize");
    hex::encode(Sha256::digest(json))
}
