#![allow(dead_code)]

use cellmil::cohort::{CellRecord, CellType, PatchRecord, Slide};
use cellmil::model::{Model, ModelConfig};
use cellmil::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_slide(rng: &mut impl Rng, d_patch: usize, d_cell: usize, max_patches: usize, max_cells: usize) -> Slide {
    let n_patches = rng.gen_range(1..=max_patches);
    let patches = (0..n_patches)
        .map(|i| PatchRecord {
            patch_id: i as u32 * 3 + 1,
            origin: [i as f32 * 224.0, 0.0],
            embedding: (0..d_patch).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            cells: (0..rng.gen_range(1..=max_cells))
                .map(|_| CellRecord {
                    cell_type: CellType::from_code(rng.gen_range(0..5)).unwrap(),
                    centroid: [rng.gen_range(0.0..0.999), rng.gen_range(0.0..0.999)],
                    embedding: (0..d_cell).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                })
                .collect(),
        })
        .collect();
    Slide {
        slide_id: "rand".into(),
        patches,
    }
}

/// A model whose classifier is non-zero so gradients reach every parameter.
pub fn random_model(rng: &mut ChaCha8Rng, d_patch: usize, d_cell: usize, d_model: usize, hidden: usize, rank: usize, use_patch: bool) -> Model {
    let mut cfg = ModelConfig::new(d_patch, d_cell);
    cfg.d_model = d_model;
    cfg.hidden = hidden;
    cfg.rank = rank;
    cfg.use_patch_embeddings = use_patch;
    let mut m = Model::new(cfg, rng).unwrap();
    let perturb = |t: &mut Tensor, rng: &mut ChaCha8Rng, s: f64| {
        for v in t.data_mut() {
            *v += rng.gen_range(-s..s);
        }
    };
    perturb(&mut m.params.mil.w_clf, rng, 1.0);
    perturb(&mut m.params.mil.b_clf, rng, 0.5);
    perturb(&mut m.params.cell.e_cls, rng, 0.5);
    perturb(&mut m.params.cell.ln_pre_gamma, rng, 0.3);
    perturb(&mut m.params.cell.ln_pre_beta, rng, 0.3);
    perturb(&mut m.params.cell.ln_post_gamma, rng, 0.3);
    perturb(&mut m.params.cell.ln_post_beta, rng, 0.3);
    m
}

// ---- straight-line reference forward, plain loops only ----

fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    assert_eq!(c, x.len());
    (0..r).map(|i| (0..c).map(|j| w.data()[i * c + j] * x[j]).sum()).collect()
}

fn ln(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    let s = (v + 1e-5).sqrt();
    (0..x.len()).map(|i| g.data()[i] * (x[i] - m) / s + b.data()[i]).collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub struct Reference {
    pub probability: f64,
    pub weights: Vec<f64>,
    pub cls_rows: Vec<Vec<f64>>,
}

/// Independent re-implementation of the slide pipeline. `bias` toggles the
/// spatial term so the unbiased variant can be compared too.
pub fn reference_forward(model: &Model, slide: &Slide, bias: bool) -> Reference {
    let p = &model.params;
    let cfg = &model.config;
    let dm = cfg.d_model;
    let mut instances = Vec::new();
    let mut cls_rows = Vec::new();
    for patch in slide.patches.iter().filter(|p| !p.cells.is_empty()) {
        let mut seq: Vec<Vec<f64>> = vec![p.cell.e_cls.data().to_vec()];
        let mut pos: Vec<Option<(f64, f64)>> = vec![None];
        for c in &patch.cells {
            let e: Vec<f64> = c.embedding.iter().map(|&v| v as f64).collect();
            seq.push(ln(&e, &p.cell.ln_pre_gamma, &p.cell.ln_pre_beta));
            pos.push(Some((c.centroid[0] as f64, c.centroid[1] as f64)));
        }
        let q: Vec<Vec<f64>> = seq.iter().map(|x| mat_vec(&p.cell.w_q, x)).collect();
        let k: Vec<Vec<f64>> = seq.iter().map(|x| mat_vec(&p.cell.w_k, x)).collect();
        let v: Vec<Vec<f64>> = seq.iter().map(|x| mat_vec(&p.cell.w_v, x)).collect();
        let n = seq.len();
        let mut logits0 = vec![0.0; n];
        for j in 0..n {
            let dot: f64 = (0..dm).map(|t| q[0][t] * k[j][t]).sum();
            logits0[j] = dot / (dm as f64).sqrt();
            if bias {
                if let (Some(a), Some(b)) = (pos[0], pos[j]) {
                    logits0[j] -= cfg.spatial_scale * ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                }
            }
        }
        let a0 = softmax(&logits0);
        let z: Vec<f64> = (0..dm).map(|t| (0..n).map(|j| a0[j] * v[j][t]).sum()).collect();
        let z = ln(&z, &p.cell.ln_post_gamma, &p.cell.ln_post_beta);
        cls_rows.push(a0);
        let inst = if cfg.use_patch_embeddings {
            let e: Vec<f64> = patch.embedding.iter().map(|&v| v as f64).collect();
            let et = mat_vec(&p.fusion.w_p, &e);
            let mut flat = Vec::with_capacity(dm * dm);
            for a in &et {
                for b in &z {
                    flat.push(a * b);
                }
            }
            mat_vec(&p.fusion.w_fusion, &flat)
        } else {
            z
        };
        instances.push(inst);
    }
    let l = cfg.hidden;
    let r = cfg.rank;
    let logits: Vec<f64> = instances
        .iter()
        .map(|h| {
            let a = mat_vec(&p.mil.vg, h);
            let b = mat_vec(&p.mil.ug, h);
            let g: Vec<f64> = (0..l).map(|i| a[i].tanh() / (1.0 + (-b[i]).exp())).collect();
            let cols: Vec<f64> = (0..r)
                .map(|c| (0..l).map(|i| p.mil.w_att.data()[i * r + c] * g[i]).sum())
                .collect();
            if r == 1 {
                cols[0]
            } else {
                cols.iter().map(|x| x * x).sum::<f64>().sqrt()
            }
        })
        .collect();
    let weights = softmax(&logits);
    let pooled: Vec<f64> = (0..dm)
        .map(|t| instances.iter().zip(&weights).map(|(h, w)| w * h[t]).sum())
        .collect();
    let z: f64 = pooled.iter().zip(p.mil.w_clf.data()).map(|(a, b)| a * b).sum::<f64>()
        + p.mil.b_clf.data()[0];
    Reference {
        probability: 1.0 / (1.0 + (-z).exp()),
        weights,
        cls_rows,
    }
}

/// Central-difference check of `loss_and_gradients` over every parameter
/// entry; returns the worst `|analytic − numeric| / max(1, |numeric|)`.
pub fn end_to_end_gradient_error(model: &Model, slide: &Slide, label: bool, weight: f64, eps: f64) -> f64 {
    let (_, grads) = model.loss_and_gradients(slide, label, weight).unwrap();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (t, grad) in grads.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe.params.tensors()[t].data()[i];
            probe.params.tensors_mut()[t].data_mut()[i] = orig + eps;
            let plus = probe.loss_and_gradients(slide, label, weight).unwrap().0;
            probe.params.tensors_mut()[t].data_mut()[i] = orig - eps;
            let minus = probe.loss_and_gradients(slide, label, weight).unwrap().0;
            probe.params.tensors_mut()[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Minimal cohort with the given labels: one single-cell slide per patient.
pub fn label_cohort(labels: &[bool]) -> cellmil::cohort::Cohort {
    use cellmil::cohort::{Cohort, Patient};
    let patients = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Patient {
            patient_id: format!("P{i:04}"),
            label,
            time_months: if label { 12.0 } else { 80.0 },
            event: label,
            slides: vec![Slide {
                slide_id: format!("P{i:04}_S1"),
                patches: vec![PatchRecord {
                    patch_id: 0,
                    origin: [0.0, 0.0],
                    embedding: vec![0.0; 2],
                    cells: vec![CellRecord {
                        cell_type: CellType::Neoplastic,
                        centroid: [0.5, 0.5],
                        embedding: vec![label as u8 as f32; 2],
                    }],
                }],
            }],
            subgroups: Default::default(),
        })
        .collect();
    Cohort {
        d_patch: 2,
        d_cell: 2,
        patients,
    }
}

/// Small synthetic cohorts that vary in shape, signal and dimensions.
pub fn varied_synth_config(i: u64) -> cellmil::synthgen::SynthConfig {
    use cellmil::synthgen::{SignalKind, SynthConfig};
    let kinds = [
        SignalKind::CellShift,
        SignalKind::SpatialPattern,
        SignalKind::PatchCellInteraction,
        SignalKind::MultiCelltype,
    ];
    SynthConfig {
        n_patients: 10 + (i as usize * 7) % 23,
        d_patch: 2 + (i as usize % 5),
        d_cell: 3 + (i as usize * 3 % 7),
        signal_kind: kinds[i as usize % 4],
        signal_strength: (i % 3) as f64,
        subgroups: i.is_multiple_of(2),
        seed: 1000 + i,
        ..SynthConfig::default()
    }
}
