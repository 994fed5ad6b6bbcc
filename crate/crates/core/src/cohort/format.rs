//! Slide binary files and the JSON cohort manifest.
//!
//! Slide layout, little-endian throughout:
//!
//! ```text
//! "CEB1" | version u16 = 1 | flags u16 = 0 | d_patch u32 | d_cell u32 | n_patches u32
//! per patch: patch_id u32 | origin_x f32 | origin_y f32 | n_cells u32 | d_patch × f32
//!   per cell: cell_type u8 | 3 zero bytes | centroid_x f32 | centroid_y f32 | d_cell × f32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{CellRecord, CellType, Cohort, PatchRecord, Patient, Slide};
use crate::error::{Error, Result};

pub const SLIDE_MAGIC: [u8; 4] = *b"CEB1";
pub const SLIDE_VERSION: u16 = 1;

pub fn encode_slide(slide: &Slide, d_patch: usize, d_cell: usize) -> Result<Vec<u8>> {
    slide.validate(d_patch, d_cell)?;
    let mut buf = Vec::new();
    // Writes into a Vec cannot fail.
    let w = &mut buf;
    w.write_all(&SLIDE_MAGIC).unwrap();
    w.write_u16::<LittleEndian>(SLIDE_VERSION).unwrap();
    w.write_u16::<LittleEndian>(0).unwrap();
    w.write_u32::<LittleEndian>(d_patch as u32).unwrap();
    w.write_u32::<LittleEndian>(d_cell as u32).unwrap();
    w.write_u32::<LittleEndian>(slide.patches.len() as u32).unwrap();
    for p in &slide.patches {
        w.write_u32::<LittleEndian>(p.patch_id).unwrap();
        w.write_f32::<LittleEndian>(p.origin[0]).unwrap();
        w.write_f32::<LittleEndian>(p.origin[1]).unwrap();
        w.write_u32::<LittleEndian>(p.cells.len() as u32).unwrap();
        for v in &p.embedding {
            w.write_f32::<LittleEndian>(*v).unwrap();
        }
        for c in &p.cells {
            w.write_u8(c.cell_type.code()).unwrap();
            w.write_all(&[0; 3]).unwrap();
            w.write_f32::<LittleEndian>(c.centroid[0]).unwrap();
            w.write_f32::<LittleEndian>(c.centroid[1]).unwrap();
            for v in &c.embedding {
                w.write_f32::<LittleEndian>(*v).unwrap();
            }
        }
    }
    Ok(buf)
}

pub fn save_slide(slide: &Slide, d_patch: usize, d_cell: usize, path: &Path) -> Result<()> {
    let bytes = encode_slide(slide, d_patch, d_cell)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a slide; its id is the file stem.
pub fn load_slide(path: &Path) -> Result<Slide> {
    load_slide_with_dims(path).map(|(s, _, _)| s)
}

/// Loads a slide and returns it with the `(d_patch, d_cell)` from its header.
pub fn load_slide_with_dims(path: &Path) -> Result<(Slide, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let slide_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_slide(&bytes, slide_id, path)
}

fn decode_slide(bytes: &[u8], slide_id: String, path: &Path) -> Result<(Slide, usize, usize)> {
    let truncated = |what: &str| Error::Malformed {
        path: path.to_path_buf(),
        reason: format!("truncated while reading {what}"),
    };
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
    if magic != SLIDE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let version = r.read_u16::<LittleEndian>().map_err(|_| truncated("header"))?;
    if version != SLIDE_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let flags = r.read_u16::<LittleEndian>().map_err(|_| truncated("header"))?;
    if flags != 0 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("unknown flags {flags:#06x}"),
        });
    }
    let d_patch = r.read_u32::<LittleEndian>().map_err(|_| truncated("header"))? as usize;
    let d_cell = r.read_u32::<LittleEndian>().map_err(|_| truncated("header"))? as usize;
    let n_patches = r.read_u32::<LittleEndian>().map_err(|_| truncated("header"))?;

    let read_floats = |r: &mut Cursor<&[u8]>, n: usize, what: &str| -> Result<Vec<f32>> {
        let mut v = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut v)
            .map_err(|_| truncated(what))?;
        Ok(v)
    };

    let mut patches = Vec::with_capacity(n_patches.min(1 << 16) as usize);
    for _ in 0..n_patches {
        let patch_id = r.read_u32::<LittleEndian>().map_err(|_| truncated("patch record"))?;
        let ox = r.read_f32::<LittleEndian>().map_err(|_| truncated("patch record"))?;
        let oy = r.read_f32::<LittleEndian>().map_err(|_| truncated("patch record"))?;
        let n_cells = r.read_u32::<LittleEndian>().map_err(|_| truncated("patch record"))?;
        let embedding = read_floats(&mut r, d_patch, "patch embedding")?;
        let mut cells = Vec::with_capacity(n_cells.min(1 << 16) as usize);
        for _ in 0..n_cells {
            let code = r.read_u8().map_err(|_| truncated("cell record"))?;
            let cell_type = CellType::from_code(code).ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("patch {patch_id}: unknown cell type code {code}"),
            })?;
            let mut pad = [0u8; 3];
            r.read_exact(&mut pad).map_err(|_| truncated("cell record"))?;
            let cx = r.read_f32::<LittleEndian>().map_err(|_| truncated("cell record"))?;
            let cy = r.read_f32::<LittleEndian>().map_err(|_| truncated("cell record"))?;
            let embedding = read_floats(&mut r, d_cell, "cell embedding")?;
            cells.push(CellRecord {
                cell_type,
                centroid: [cx, cy],
                embedding,
            });
        }
        patches.push(PatchRecord {
            patch_id,
            origin: [ox, oy],
            embedding,
            cells,
        });
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!(
                "{} trailing bytes after last patch",
                bytes.len() - r.position() as usize
            ),
        });
    }
    let slide = Slide { slide_id, patches };
    slide.validate(d_patch, d_cell)?;
    Ok((slide, d_patch, d_cell))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub patient_id: String,
    pub label: u8,
    pub time_months: f64,
    pub event: u8,
    pub slides: Vec<String>,
    #[serde(default)]
    pub subgroups: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub d_patch: usize,
    pub d_cell: usize,
    pub patients: Vec<ManifestPatient>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn binary(path: &Path, patient: &str, field: &str, v: u8) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Manifest {
            path: path.to_path_buf(),
            reason: format!("patient {patient}: {field} must be 0 or 1, got {v}"),
        }),
    }
}

/// Reads a manifest and every slide it references, validating the whole
/// cohort. Slide paths are resolved relative to the manifest's directory.
pub fn load_cohort(manifest_path: &Path) -> Result<Cohort> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut patients = Vec::with_capacity(manifest.patients.len());
    for mp in manifest.patients {
        let mut slides = Vec::with_capacity(mp.slides.len());
        for rel in &mp.slides {
            let path = base.join(rel);
            let (slide, d_patch, d_cell) = load_slide_with_dims(&path)?;
            if d_patch != manifest.d_patch {
                return Err(Error::SlideDimension {
                    slide: slide.slide_id,
                    what: "d_patch",
                    found: d_patch,
                    expected: manifest.d_patch,
                });
            }
            if d_cell != manifest.d_cell {
                return Err(Error::SlideDimension {
                    slide: slide.slide_id,
                    what: "d_cell",
                    found: d_cell,
                    expected: manifest.d_cell,
                });
            }
            slides.push(slide);
        }
        patients.push(Patient {
            label: binary(manifest_path, &mp.patient_id, "label", mp.label)?,
            event: binary(manifest_path, &mp.patient_id, "event", mp.event)?,
            patient_id: mp.patient_id,
            time_months: mp.time_months,
            slides,
            subgroups: mp.subgroups,
        });
    }
    let cohort = Cohort {
        d_patch: manifest.d_patch,
        d_cell: manifest.d_cell,
        patients,
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Writes `manifest.json` and `slides/<slide_id>.ceb` under `dir`; returns
/// the manifest path.
pub fn save_cohort(cohort: &Cohort, dir: &Path) -> Result<PathBuf> {
    cohort.validate()?;
    let slide_dir = dir.join("slides");
    fs::create_dir_all(&slide_dir).map_err(|e| Error::io(&slide_dir, e))?;
    let mut patients = Vec::with_capacity(cohort.patients.len());
    for p in &cohort.patients {
        let mut paths = Vec::with_capacity(p.slides.len());
        for s in &p.slides {
            let rel = format!("slides/{}.ceb", s.slide_id);
            save_slide(s, cohort.d_patch, cohort.d_cell, &dir.join(&rel))?;
            paths.push(rel);
        }
        patients.push(ManifestPatient {
            patient_id: p.patient_id.clone(),
            label: p.label as u8,
            time_months: p.time_months,
            event: p.event as u8,
            slides: paths,
            subgroups: p.subgroups.clone(),
        });
    }
    let manifest = Manifest {
        d_patch: cohort.d_patch,
        d_cell: cohort.d_cell,
        patients,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
