//! Seeded synthetic cohorts with planted, verifiable signals.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cohort::{CellRecord, CellType, Cohort, PatchRecord, Patient, Slide, LABEL_HORIZON_MONTHS};
use crate::error::{Error, Result};

/// Patch side in pixels, used only for patch origins.
pub const PATCH_SIDE: f32 = 224.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Mean offset on one cell type's embeddings.
    CellShift,
    /// Two cell types close together in the same patch.
    SpatialPattern,
    /// Label carried by the sign agreement of a patch direction and a cell
    /// direction; each marginal is label-free.
    PatchCellInteraction,
    /// Independent weak offsets on several cell types.
    MultiCelltype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Inclusive range, drawn uniformly.
    pub slides_per_patient: [usize; 2],
    pub patches_per_slide: [usize; 2],
    pub cells_per_patch: [usize; 2],
    pub positive_fraction: f64,
    pub d_patch: usize,
    pub d_cell: usize,
    pub signal_kind: SignalKind,
    pub signal_strength: f64,
    /// Share of patients lost to follow-up uniformly before `follow_up_months`.
    pub censoring_rate: f64,
    pub follow_up_months: f64,
    /// Monthly recurrence hazard of the low-risk class.
    pub baseline_hazard: f64,
    pub hazard_ratio: f64,
    /// Spread of the per-type mean embedding offsets.
    pub type_separation: f64,
    /// Spread of the mean shared by all patch embeddings.
    pub patch_mean_scale: f64,
    /// Per-patch deviation from the shared mean.
    pub patch_noise: f64,
    /// Pair distance for the spatial pattern, in patch-local units.
    pub spatial_radius: f64,
    /// Relative frequencies of the five cell types.
    pub cell_type_weights: [f64; 5],
    pub subgroups: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 60,
            slides_per_patient: [1, 3],
            patches_per_slide: [4, 8],
            cells_per_patch: [4, 10],
            positive_fraction: 0.381,
            d_patch: 16,
            d_cell: 16,
            signal_kind: SignalKind::CellShift,
            signal_strength: 1.0,
            censoring_rate: 0.2,
            follow_up_months: 120.0,
            baseline_hazard: 0.001,
            hazard_ratio: 4.0,
            type_separation: 1.0,
            patch_mean_scale: 1.0,
            patch_noise: 0.5,
            spatial_radius: 0.1,
            cell_type_weights: [0.25, 0.2, 0.3, 0.1, 0.15],
            subgroups: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        for (name, [lo, hi]) in [
            ("slides_per_patient", self.slides_per_patient),
            ("patches_per_slide", self.patches_per_slide),
            ("cells_per_patch", self.cells_per_patch),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] must be non-empty and start at 1 or more"));
            }
        }
        if self.d_patch < 2 || self.d_cell < 2 {
            return bad("embedding dimensions must be at least 2".into());
        }
        for (name, v) in [("positive_fraction", self.positive_fraction), ("censoring_rate", self.censoring_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.patch_noise >= 0.0 && self.patch_mean_scale >= 0.0 && self.type_separation >= 0.0) {
            return bad("embedding spreads must be non-negative".into());
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return bad(format!("signal_strength must be non-negative, got {}", self.signal_strength));
        }
        if self.follow_up_months.is_nan() || self.follow_up_months < LABEL_HORIZON_MONTHS {
            return bad(format!("follow_up_months must be at least {LABEL_HORIZON_MONTHS}"));
        }
        if !(self.baseline_hazard > 0.0 && self.hazard_ratio > 0.0) {
            return bad("hazards must be positive".into());
        }
        if !(self.spatial_radius > 0.0 && self.spatial_radius < 0.5) {
            return bad("spatial_radius must lie in (0, 0.5)".into());
        }
        if self.cell_type_weights.iter().any(|w| w.is_nan() || *w < 0.0) || self.cell_type_weights.iter().sum::<f64>() <= 0.0 {
            return bad("cell_type_weights must be non-negative with a positive sum".into());
        }
        if self.signal_kind == SignalKind::SpatialPattern && self.cells_per_patch[1] < 2 {
            return bad("spatial_pattern needs patches that can hold two cells".into());
        }
        self.class_probability().map(|_| ())
    }

    /// Probability that a low-risk patient still recurs within the label
    /// horizon and is therefore labelled positive.
    fn early_recurrence_probability(&self) -> f64 {
        let (l, h, f) = (self.baseline_hazard, LABEL_HORIZON_MONTHS, self.follow_up_months);
        let by_horizon = 1.0 - (-l * h).exp();
        // Censoring time uniform on [0, f): P(T ≤ min(C, h)).
        let censored = ((h - by_horizon / l) + (f - h) * by_horizon) / f;
        (1.0 - self.censoring_rate) * by_horizon + self.censoring_rate * censored
    }

    /// High-risk class probability giving an expected label rate of
    /// `positive_fraction`.
    fn class_probability(&self) -> Result<f64> {
        let q = self.early_recurrence_probability();
        if self.positive_fraction < q {
            return Err(Error::Config(format!(
                "positive_fraction {} is below the baseline early-recurrence rate {q:.4}; lower baseline_hazard",
                self.positive_fraction
            )));
        }
        Ok(if q >= 1.0 { 1.0 } else { (self.positive_fraction - q) / (1.0 - q) })
    }
}

/// Machine-readable description of what was planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub signal_kind: SignalKind,
    pub signal_strength: f64,
    /// Mean embedding offset of every cell type.
    pub type_offsets: BTreeMap<CellType, Vec<f64>>,
    /// Mean of the patch embeddings.
    pub patch_mean: Vec<f64>,
    /// Signal directions: per cell type for shifts, `patch` and `cell` for
    /// the interaction.
    pub directions: BTreeMap<String, Vec<f64>>,
    /// Cell types carrying the signal (the pair, for the spatial pattern).
    pub signal_types: Vec<CellType>,
    pub spatial_radius: Option<f64>,
    pub baseline_hazard: f64,
    pub hazard_ratio: f64,
    /// Patches of positive patients that carry the signal, per slide.
    pub signal_patches: BTreeMap<String, Vec<u32>>,
    /// Patients drawn into the high-hazard class.
    pub high_risk_patients: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub cohort: Cohort,
    pub truth: PlantedTruth,
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn add_scaled(v: &mut [f64], u: &[f64], s: f64) {
    for (a, b) in v.iter_mut().zip(u) {
        *a += s * b;
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn centroid(rng: &mut impl Rng) -> [f32; 2] {
    // f32 rounding can push values near 1 up to exactly 1.
    let c = || rng.gen_range(0.0..1.0f64) as f32;
    let mut c = c;
    [c().min(0.99999), c().min(0.99999)]
}

struct Planter<'a> {
    config: &'a SynthConfig,
    truth: &'a PlantedTruth,
    type_dist: rand::distributions::WeightedIndex<f64>,
}

impl Planter<'_> {
    fn cell(&self, rng: &mut impl Rng, t: CellType) -> Vec<f64> {
        let mut e = gaussian(rng, self.config.d_cell);
        add_scaled(&mut e, &self.truth.type_offsets[&t], 1.0);
        e
    }

    fn random_type(&self, rng: &mut impl Rng) -> CellType {
        CellType::ALL[self.type_dist.sample(rng)]
    }

    /// Returns the patch and whether it carries the planted signal.
    fn patch(&self, rng: &mut impl Rng, patch_id: u32, origin: [f32; 2], positive: bool, active: &[CellType]) -> (PatchRecord, bool) {
        let cfg = self.config;
        let s = cfg.signal_strength;
        let n_cells = rng.gen_range(cfg.cells_per_patch[0]..=cfg.cells_per_patch[1]);
        let mut patch_emb = gaussian(rng, cfg.d_patch);
        for (x, m) in patch_emb.iter_mut().zip(&self.truth.patch_mean) {
            *x = m + cfg.patch_noise * *x;
        }
        let mut cells: Vec<(CellType, [f32; 2], Vec<f64>)> = (0..n_cells)
            .map(|_| {
                let t = self.random_type(rng);
                (t, centroid(rng), self.cell(rng, t))
            })
            .collect();
        let mut carries = false;
        match cfg.signal_kind {
            SignalKind::CellShift => {
                let t = self.truth.signal_types[0];
                if positive {
                    let u = &self.truth.directions[t.name()];
                    for c in cells.iter_mut().filter(|c| c.0 == t) {
                        add_scaled(&mut c.2, u, s);
                        carries = true;
                    }
                }
            }
            SignalKind::MultiCelltype => {
                if positive {
                    for c in cells.iter_mut().filter(|c| active.contains(&c.0)) {
                        add_scaled(&mut c.2, &self.truth.directions[c.0.name()], s);
                        carries = true;
                    }
                }
            }
            SignalKind::PatchCellInteraction => {
                let sigma_cell = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let sigma_patch = if positive { sigma_cell } else { -sigma_cell };
                add_scaled(&mut patch_emb, &self.truth.directions["patch"], s * sigma_patch);
                for c in cells.iter_mut() {
                    add_scaled(&mut c.2, &self.truth.directions["cell"], s * sigma_cell);
                }
                carries = positive && s > 0.0;
            }
            SignalKind::SpatialPattern => {
                let (a, b) = (self.truth.signal_types[0], self.truth.signal_types[1]);
                let rho = cfg.spatial_radius;
                // Pairs appear in a strength-dependent share of positive patches.
                let pair = positive && n_cells >= 2 && rng.gen_bool((0.5 * s).min(1.0));
                if pair {
                    let anchor = [rng.gen_range(rho..1.0 - rho), rng.gen_range(rho..1.0 - rho)];
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    let r = rng.gen_range(0.0..rho);
                    let partner = [anchor[0] + r * angle.cos(), anchor[1] + r * angle.sin()];
                    for (slot, (t, pos)) in [(0, (a, anchor)), (1, (b, partner))] {
                        cells[slot] = (t, [pos[0] as f32, pos[1] as f32], self.cell(rng, t));
                    }
                    carries = true;
                } else {
                    // Keep the two types apart: a patch holds at most one of them.
                    let keep = if rng.gen_bool(0.5) { a } else { b };
                    let drop = if keep == a { b } else { a };
                    for c in cells.iter_mut().filter(|c| c.0 == drop) {
                        let mut t = self.random_type(rng);
                        while t == a || t == b {
                            t = self.random_type(rng);
                        }
                        *c = (t, c.1, self.cell(rng, t));
                    }
                }
            }
        }
        cells.shuffle(rng);
        let record = PatchRecord {
            patch_id,
            origin,
            embedding: to_f32(&patch_emb),
            cells: cells
                .into_iter()
                .map(|(cell_type, centroid, e)| CellRecord {
                    cell_type,
                    centroid,
                    embedding: to_f32(&e),
                })
                .collect(),
        };
        (record, carries)
    }
}

fn make_truth(config: &SynthConfig, rng: &mut impl Rng) -> PlantedTruth {
    let type_offsets = CellType::ALL
        .iter()
        .map(|&t| {
            let v = (0..config.d_cell)
                .map(|_| config.type_separation * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (t, v)
        })
        .collect();
    let patch_mean = (0..config.d_patch)
        .map(|_| config.patch_mean_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut directions = BTreeMap::new();
    let signal_types = match config.signal_kind {
        SignalKind::CellShift => {
            directions.insert(CellType::Neoplastic.name().to_string(), unit_vector(rng, config.d_cell));
            vec![CellType::Neoplastic]
        }
        SignalKind::MultiCelltype => {
            let types = vec![
                CellType::Stromal,
                CellType::Inflammatory,
                CellType::Neoplastic,
                CellType::BenignEpithelial,
            ];
            for t in &types {
                directions.insert(t.name().to_string(), unit_vector(rng, config.d_cell));
            }
            types
        }
        SignalKind::PatchCellInteraction => {
            directions.insert("patch".into(), unit_vector(rng, config.d_patch));
            directions.insert("cell".into(), unit_vector(rng, config.d_cell));
            Vec::new()
        }
        SignalKind::SpatialPattern => vec![CellType::Inflammatory, CellType::Neoplastic],
    };
    PlantedTruth {
        signal_kind: config.signal_kind,
        signal_strength: config.signal_strength,
        type_offsets,
        patch_mean,
        directions,
        signal_types,
        spatial_radius: (config.signal_kind == SignalKind::SpatialPattern).then_some(config.spatial_radius),
        baseline_hazard: config.baseline_hazard,
        hazard_ratio: config.hazard_ratio,
        signal_patches: BTreeMap::new(),
        high_risk_patients: Vec::new(),
    }
}

fn subgroups(rng: &mut impl Rng, label: bool, time: f64, event: bool) -> BTreeMap<String, Value> {
    let mut s = BTreeMap::new();
    let u: f64 = rng.gen();
    let sex = if u < 0.566 {
        json!("female")
    } else if u < 0.973 {
        json!("male")
    } else {
        Value::Null
    };
    s.insert("sex".into(), sex);
    let u: f64 = rng.gen();
    let race = if u < 0.7 {
        "white"
    } else if u < 0.95 {
        "african_american"
    } else {
        "other"
    };
    s.insert("race".into(), json!(race));
    let age: f64 = Normal::new(66.0, 9.0).unwrap().sample(rng);
    s.insert("age".into(), json!(age.round().clamp(35.0, 90.0) as i64));
    s.insert("stage".into(), json!(["I", "II", "III"][rng.gen_range(0..3)]));
    s.insert("grade_old".into(), json!(format!("G{}", rng.gen_range(1..4))));
    s.insert("grade_new".into(), json!(format!("G{}", rng.gen_range(1..4))));
    let death = if label && event && rng.gen_bool(0.5) {
        json!((time + rng.gen_range(1.0..40.0)).round())
    } else {
        Value::Null
    };
    s.insert("death_months".into(), death);
    s
}

/// Generates the cohort and its planted truth. Identical configs give
/// identical output.
pub fn generate(config: &SynthConfig) -> Result<SyntheticCohort> {
    config.validate()?;
    let class_p = config.class_probability()?;
    let mut truth_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut truth = make_truth(config, &mut truth_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let type_dist = rand::distributions::WeightedIndex::new(config.cell_type_weights)
        .map_err(|e| Error::Config(format!("cell_type_weights: {e}")))?;

    let mut signal_patches = BTreeMap::new();
    let mut high_risk_patients = Vec::new();
    let mut patients = Vec::with_capacity(config.n_patients);
    let planter = Planter {
        config,
        truth: &truth,
        type_dist,
    };
    for i in 0..config.n_patients {
        let high_risk = rng.gen_bool(class_p);
        let hazard = config.baseline_hazard * if high_risk { config.hazard_ratio } else { 1.0 };
        let t: f64 = Exp::new(hazard).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng);
        let censor = if rng.gen_bool(config.censoring_rate) {
            rng.gen_range(0.0..config.follow_up_months)
        } else {
            config.follow_up_months
        };
        let event = t <= censor;
        let time = (t.min(censor) * 100.0).round() / 100.0;
        let time = time.max(0.01);
        let label = high_risk || (event && time <= LABEL_HORIZON_MONTHS);

        let patient_id = format!("P{:04}", i + 1);
        if high_risk {
            high_risk_patients.push(patient_id.clone());
        }
        let active: Vec<CellType> = match config.signal_kind {
            SignalKind::MultiCelltype if label => {
                let mut a: Vec<CellType> = truth.signal_types.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
                if a.is_empty() {
                    a.push(*truth.signal_types.choose(&mut rng).expect("signal types"));
                }
                a
            }
            _ => Vec::new(),
        };
        let n_slides = rng.gen_range(config.slides_per_patient[0]..=config.slides_per_patient[1]);
        let mut slides = Vec::with_capacity(n_slides);
        for j in 0..n_slides {
            let slide_id = format!("{patient_id}_S{}", j + 1);
            let n_patches = rng.gen_range(config.patches_per_slide[0]..=config.patches_per_slide[1]);
            let cols = (n_patches as f64).sqrt().ceil() as usize;
            let mut patches = Vec::with_capacity(n_patches);
            let mut carrying = Vec::new();
            for k in 0..n_patches {
                let origin = [(k % cols) as f32 * PATCH_SIDE, (k / cols) as f32 * PATCH_SIDE];
                let (patch, carries) = planter.patch(&mut rng, k as u32, origin, label, &active);
                if carries {
                    carrying.push(k as u32);
                }
                patches.push(patch);
            }
            if !carrying.is_empty() {
                signal_patches.insert(slide_id.clone(), carrying);
            }
            slides.push(Slide { slide_id, patches });
        }
        let subgroups = if config.subgroups {
            subgroups(&mut rng, label, time, event)
        } else {
            BTreeMap::new()
        };
        patients.push(Patient {
            patient_id,
            label,
            time_months: time,
            event,
            slides,
            subgroups,
        });
    }
    truth.signal_patches = signal_patches;
    truth.high_risk_patients = high_risk_patients;
    let cohort = Cohort {
        d_patch: config.d_patch,
        d_cell: config.d_cell,
        patients,
    };
    cohort.validate()?;
    Ok(SyntheticCohort { cohort, truth })
}

pub fn generate_cohort(config: &SynthConfig) -> Result<Cohort> {
    generate(config).map(|s| s.cohort)
}

pub fn planted_truth(config: &SynthConfig) -> Result<PlantedTruth> {
    generate(config).map(|s| s.truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_cohort() {
        let c = SynthConfig {
            n_patients: 8,
            ..SynthConfig::default()
        };
        assert_eq!(generate_cohort(&c).unwrap(), generate_cohort(&c).unwrap());
    }

    #[test]
    fn infeasible_configs_rejected() {
        let bad = [
            SynthConfig { patches_per_slide: [0, 0], ..SynthConfig::default() },
            SynthConfig { positive_fraction: 0.001, ..SynthConfig::default() },
            SynthConfig { d_cell: 1, ..SynthConfig::default() },
        ];
        assert!(matches!(generate(&bad[0]), Err(Error::Config(_))));
        assert!(bad.iter().all(|c| generate(c).is_err()));
    }

    #[test]
    fn truth_echoes_config() {
        let c = SynthConfig {
            n_patients: 5,
            signal_kind: SignalKind::SpatialPattern,
            ..SynthConfig::default()
        };
        let t = planted_truth(&c).unwrap();
        assert_eq!(t.spatial_radius, Some(0.1));
        assert_eq!(t.signal_types.len(), 2);
        let c = SynthConfig {
            n_patients: 5,
            ..SynthConfig::default()
        };
        let t = planted_truth(&c).unwrap();
        let u = &t.directions["neoplastic"];
        assert!((u.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
