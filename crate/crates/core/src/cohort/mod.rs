//! Patients, slides, patches and cells, plus the on-disk formats.
//!
//! Cell centroids are stored in patch-local units: the patch spans
//! `[0, 1) × [0, 1)` and a centroid's slide position is
//! `origin + centroid · patch_side`.

mod folds;
mod format;
mod subset;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use folds::{fold_digest, make_folds, Fold};
pub use format::{
    encode_slide, load_cohort, load_slide, load_slide_with_dims, read_manifest, save_cohort,
    save_slide, Manifest, ManifestPatient, SLIDE_MAGIC, SLIDE_VERSION,
};
pub use subset::{subset_all_cells, subset_by_cell_type, subset_for_model, ModelKind};

/// Follow-up horizon for the binary recurrence label.
pub const LABEL_HORIZON_MONTHS: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum CellType {
    Stromal = 0,
    Inflammatory = 1,
    Neoplastic = 2,
    Dead = 3,
    BenignEpithelial = 4,
}

impl CellType {
    pub const ALL: [CellType; 5] = [
        CellType::Stromal,
        CellType::Inflammatory,
        CellType::Neoplastic,
        CellType::Dead,
        CellType::BenignEpithelial,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CellType::Stromal => "stromal",
            CellType::Inflammatory => "inflammatory",
            CellType::Neoplastic => "neoplastic",
            CellType::Dead => "dead",
            CellType::BenignEpithelial => "benign_epithelial",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub cell_type: CellType,
    /// Patch-local centroid, each coordinate in `[0, 1)`.
    pub centroid: [f32; 2],
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patch_id: u32,
    /// Slide coordinates of the patch's top-left corner.
    pub origin: [f32; 2],
    pub embedding: Vec<f32>,
    pub cells: Vec<CellRecord>,
}

impl PatchRecord {
    pub fn contains_centroid(c: [f32; 2]) -> bool {
        c.iter().all(|v| v.is_finite() && (0.0..1.0).contains(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slide {
    pub slide_id: String,
    pub patches: Vec<PatchRecord>,
}

impl Slide {
    pub fn cell_count(&self) -> usize {
        self.patches.iter().map(|p| p.cells.len()).sum()
    }

    pub fn validate(&self, d_patch: usize, d_cell: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.patches {
            if !seen.insert(p.patch_id) {
                return Err(Error::Validation(format!(
                    "slide {}: duplicate patch id {}",
                    self.slide_id, p.patch_id
                )));
            }
            if p.embedding.len() != d_patch {
                return Err(Error::SlideDimension {
                    slide: self.slide_id.clone(),
                    what: "patch embedding",
                    found: p.embedding.len(),
                    expected: d_patch,
                });
            }
            for c in &p.cells {
                if c.embedding.len() != d_cell {
                    return Err(Error::SlideDimension {
                        slide: self.slide_id.clone(),
                        what: "cell embedding",
                        found: c.embedding.len(),
                        expected: d_cell,
                    });
                }
                if !PatchRecord::contains_centroid(c.centroid) {
                    return Err(Error::CentroidOutOfBounds {
                        slide: self.slide_id.clone(),
                        patch: p.patch_id,
                        x: c.centroid[0],
                        y: c.centroid[1],
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub patient_id: String,
    /// Recurrence within the label horizon.
    pub label: bool,
    pub time_months: f64,
    /// Recurrence observed (otherwise censored at `time_months`).
    pub event: bool,
    pub slides: Vec<Slide>,
    /// Demographic and clinical covariates; values may be strings, numbers
    /// or null.
    pub subgroups: BTreeMap<String, serde_json::Value>,
}

impl Patient {
    pub fn validate(&self) -> Result<()> {
        if self.slides.is_empty() {
            return Err(Error::Validation(format!(
                "patient {} has no slides",
                self.patient_id
            )));
        }
        if !(self.time_months.is_finite() && self.time_months >= 0.0) {
            return Err(Error::Validation(format!(
                "patient {}: follow-up time {} is not a non-negative number",
                self.patient_id, self.time_months
            )));
        }
        if self.event && self.time_months <= LABEL_HORIZON_MONTHS && !self.label {
            return Err(Error::Validation(format!(
                "patient {}: recurrence at {} months but label is 0",
                self.patient_id, self.time_months
            )));
        }
        Ok(())
    }

    pub fn subgroup_value(&self, key: &str) -> Option<&serde_json::Value> {
        self.subgroups.get(key).filter(|v| !v.is_null())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub d_patch: usize,
    pub d_cell: usize,
    pub patients: Vec<Patient>,
}

impl Cohort {
    pub fn validate(&self) -> Result<()> {
        if self.d_patch == 0 || self.d_cell == 0 {
            return Err(Error::Validation("embedding dimensions must be positive".into()));
        }
        let mut ids = HashSet::new();
        let mut slide_ids = HashSet::new();
        for p in &self.patients {
            if !ids.insert(p.patient_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate patient id {}",
                    p.patient_id
                )));
            }
            p.validate()?;
            for s in &p.slides {
                if !slide_ids.insert(s.slide_id.as_str()) {
                    return Err(Error::Validation(format!(
                        "duplicate slide id {}",
                        s.slide_id
                    )));
                }
                s.validate(self.d_patch, self.d_cell)?;
            }
        }
        Ok(())
    }

    pub fn patient(&self, id: &str) -> Option<&Patient> {
        self.patients.iter().find(|p| p.patient_id == id)
    }

    pub fn find_slide(&self, slide_id: &str) -> Option<(&Patient, &Slide)> {
        self.patients.iter().find_map(|p| {
            p.slides
                .iter()
                .find(|s| s.slide_id == slide_id)
                .map(|s| (p, s))
        })
    }

    pub fn slide_count(&self) -> usize {
        self.patients.iter().map(|p| p.slides.len()).sum()
    }
}
