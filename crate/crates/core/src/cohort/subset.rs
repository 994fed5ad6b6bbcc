use std::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use super::{CellType, Slide};

/// Which cell view a model is trained on: one cell type, or all cells.
/// Serialized as its [`name`](ModelKind::name), so it can key JSON maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Type(CellType),
    All,
}

impl ModelKind {
    pub const ENSEMBLE: [ModelKind; 6] = [
        ModelKind::Type(CellType::Stromal),
        ModelKind::Type(CellType::Inflammatory),
        ModelKind::Type(CellType::Neoplastic),
        ModelKind::Type(CellType::Dead),
        ModelKind::Type(CellType::BenignEpithelial),
        ModelKind::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Type(t) => t.name(),
            ModelKind::All => "all",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        if name == "all" {
            Some(ModelKind::All)
        } else {
            CellType::from_name(name).map(ModelKind::Type)
        }
    }
}

impl Serialize for ModelKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ModelKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        ModelKind::from_name(&name).ok_or_else(|| de::Error::custom(format!("unknown model kind '{name}'")))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Patches holding at least one cell of type `t`, each reduced to those
/// cells. Patch embeddings are untouched.
pub fn subset_by_cell_type(slide: &Slide, t: CellType) -> Slide {
    let patches = slide
        .patches
        .iter()
        .filter_map(|p| {
            let cells: Vec<_> = p.cells.iter().filter(|c| c.cell_type == t).cloned().collect();
            (!cells.is_empty()).then(|| super::PatchRecord {
                cells,
                ..p.clone()
            })
        })
        .collect();
    Slide {
        slide_id: slide.slide_id.clone(),
        patches,
    }
}

/// Drops patches without any cells.
pub fn subset_all_cells(slide: &Slide) -> Slide {
    Slide {
        slide_id: slide.slide_id.clone(),
        patches: slide
            .patches
            .iter()
            .filter(|p| !p.cells.is_empty())
            .cloned()
            .collect(),
    }
}

pub fn subset_for_model(slide: &Slide, kind: ModelKind) -> Slide {
    match kind {
        ModelKind::Type(t) => subset_by_cell_type(slide, t),
        ModelKind::All => subset_all_cells(slide),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{CellRecord, PatchRecord};

    fn cell(t: CellType) -> CellRecord {
        CellRecord {
            cell_type: t,
            centroid: [0.5, 0.5],
            embedding: vec![t.code() as f32],
        }
    }

    fn slide(cells: Vec<Vec<CellType>>) -> Slide {
        Slide {
            slide_id: "s".into(),
            patches: cells
                .into_iter()
                .enumerate()
                .map(|(i, ts)| PatchRecord {
                    patch_id: i as u32,
                    origin: [0.0, 0.0],
                    embedding: vec![i as f32],
                    cells: ts.into_iter().map(cell).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn absent_type_gives_empty_slide() {
        let s = slide(vec![vec![CellType::Stromal], vec![CellType::Dead]]);
        assert!(subset_by_cell_type(&s, CellType::Neoplastic).patches.is_empty());
    }

    #[test]
    fn homogeneous_slide_is_unchanged() {
        let s = slide(vec![vec![CellType::Dead; 3], vec![CellType::Dead]]);
        assert_eq!(subset_by_cell_type(&s, CellType::Dead), s);
    }

    #[test]
    fn mixed_slide_keeps_only_matching_cells() {
        use CellType::*;
        let s = slide(vec![
            vec![Stromal, Dead, Stromal],
            vec![Dead],
            vec![],
            vec![Inflammatory, Stromal],
        ]);
        let sub = subset_by_cell_type(&s, Stromal);
        assert_eq!(
            sub.patches.iter().map(|p| p.patch_id).collect::<Vec<_>>(),
            vec![0, 3]
        );
        assert!(sub
            .patches
            .iter()
            .all(|p| p.cells.iter().all(|c| c.cell_type == Stromal)));
        assert_eq!(sub.cell_count(), 3);
        assert_eq!(sub.patches[1].embedding, vec![3.0]);
    }

    #[test]
    fn all_cells_drops_only_empty_patches() {
        use CellType::*;
        let full = slide(vec![vec![Stromal], vec![Dead, Neoplastic]]);
        assert_eq!(subset_all_cells(&full), full);
        let s = slide(vec![vec![Stromal], vec![], vec![Dead]]);
        assert_eq!(subset_all_cells(&s).patches.len(), 2);
    }

    #[test]
    fn model_names_round_trip() {
        for k in ModelKind::ENSEMBLE {
            assert_eq!(ModelKind::from_name(k.name()), Some(k));
        }
    }
}
