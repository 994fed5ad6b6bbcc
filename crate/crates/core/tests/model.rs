mod common;

use cellmil::attention_cell::{attend_patch, attend_patch_on, spatial_bias};
use cellmil::cohort::{CellRecord, CellType};
use cellmil::fusion::{fuse, make_instance, project_patch};
use cellmil::mil_head::{attention_logit, pool};
use cellmil::model::{CellAttentionParams, MilParams};
use cellmil::numerics::{gated_unit, grad_check, softmax_rows, Tape, Tensor};
use cellmil::Error;
use common::*;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn slide_forward_matches_reference() {
    let mut r = rng(1);
    for trial in 0..60 {
        let rank = 1 + trial % 3;
        let use_patch = trial % 2 == 0;
        let model = random_model(&mut r, 5, 6, 4, 5, rank, use_patch);
        let slide = random_slide(&mut r, 5, 6, 4, 5);
        let got = model.predict(&slide).unwrap();
        let want = reference_forward(&model, &slide, true);
        assert!((got.probability - want.probability).abs() < 1e-9, "trial {trial}");
        for (a, b) in got.attention_weights.iter().zip(&want.weights) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in got.cell_attention.iter().zip(&want.cls_rows) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn one_patch_zero_classifier_gives_half() {
    let mut r = rng(2);
    let mut cfg = cellmil::ModelConfig::new(3, 3);
    cfg.d_model = 4;
    cfg.hidden = 4;
    let model = cellmil::Model::new(cfg, &mut r).unwrap();
    let slide = random_slide(&mut r, 3, 3, 1, 3);
    assert_eq!(model.predict(&slide).unwrap().probability, 0.5);
}

#[test]
fn cell_free_slide_is_inapplicable() {
    let mut r = rng(3);
    let model = random_model(&mut r, 3, 3, 4, 4, 2, true);
    let mut slide = random_slide(&mut r, 3, 3, 3, 3);
    for p in &mut slide.patches {
        p.cells.clear();
    }
    assert!(matches!(model.predict(&slide), Err(Error::InapplicableSlide(_))));
}

#[test]
fn attention_weights_are_positive_and_normalized() {
    let mut r = rng(4);
    for _ in 0..30 {
        let model = random_model(&mut r, 4, 4, 4, 4, 3, true);
        let s = model.predict(&random_slide(&mut r, 4, 4, 6, 4)).unwrap();
        assert!(s.attention_weights.iter().all(|w| *w > 0.0));
        assert!((s.attention_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for row in &s.cell_attention {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn permutation_invariance_of_bag_and_cells() {
    let mut r = rng(5);
    let model = random_model(&mut r, 5, 5, 6, 6, 2, true);
    let slide = random_slide(&mut r, 5, 5, 5, 6);
    let base = model.predict(&slide).unwrap().probability;
    for _ in 0..50 {
        let mut s = slide.clone();
        s.patches.shuffle(&mut r);
        for p in &mut s.patches {
            p.cells.shuffle(&mut r);
        }
        assert!((model.predict(&s).unwrap().probability - base).abs() <= 1e-9);
    }
}

fn cell_params(r: &mut impl Rng, d_cell: usize, d_model: usize) -> CellAttentionParams {
    let mut m = |rows: usize, cols: usize| {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    CellAttentionParams {
        e_cls: m(1, d_cell),
        w_q: m(d_model, d_cell),
        w_k: m(d_model, d_cell),
        w_v: m(d_model, d_cell),
        ln_pre_gamma: m(1, d_cell).reshape(&[d_cell]).unwrap(),
        ln_pre_beta: m(1, d_cell).reshape(&[d_cell]).unwrap(),
        ln_post_gamma: m(1, d_model).reshape(&[d_model]).unwrap(),
        ln_post_beta: m(1, d_model).reshape(&[d_model]).unwrap(),
    }
}

fn random_cells(r: &mut impl Rng, n: usize, d: usize) -> Vec<CellRecord> {
    (0..n)
        .map(|_| CellRecord {
            cell_type: CellType::Neoplastic,
            centroid: [r.gen_range(0.0..0.99), r.gen_range(0.0..0.99)],
            embedding: (0..d).map(|_| r.gen_range(-2.0..2.0)).collect(),
        })
        .collect()
}

#[test]
fn spatial_bias_is_symmetric_with_free_cls() {
    let mut r = rng(6);
    for _ in 0..20 {
        let n = r.gen_range(1..8);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)]).collect();
        let scale = r.gen_range(0.1..3.0);
        let b = spatial_bias(&pts, scale);
        for i in 0..=n {
            assert_eq!(b.at(0, i), 0.0);
            assert_eq!(b.at(i, 0), 0.0);
            for j in 0..=n {
                assert_eq!(b.at(i, j), b.at(j, i));
                if i > 0 && j > 0 {
                    let (p, q) = (pts[i - 1], pts[j - 1]);
                    let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                    assert!((b.at(i, j) + scale * d).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn cls_summary_is_permutation_invariant() {
    let mut r = rng(7);
    for _ in 0..20 {
        let p = cell_params(&mut r, 5, 4);
        let cells = random_cells(&mut r, 5, 5);
        let base = attend_patch(&cells, &p, 1.0).unwrap();
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut r);
        let shuffled: Vec<_> = perm.iter().map(|&i| cells[i].clone()).collect();
        let out = attend_patch(&shuffled, &p, 1.0).unwrap();
        for (a, b) in base.z_cls.iter().zip(&out.z_cls) {
            assert!((a - b).abs() < 1e-9);
        }
        // Attention entries move with the cells.
        for (k, &i) in perm.iter().enumerate() {
            assert!((out.attention_row[k + 1] - base.attention_row[i + 1]).abs() < 1e-9);
        }
        assert!((out.attention_row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn vanishing_spatial_scale_recovers_plain_attention() {
    let mut r = rng(8);
    let model = random_model(&mut r, 4, 4, 4, 4, 2, true);
    let slide = random_slide(&mut r, 4, 4, 3, 5);
    let mut m = model.clone();
    m.config.spatial_scale = 1e-12;
    let got = m.predict(&slide).unwrap().probability;
    let plain = reference_forward(&model, &slide, false).probability;
    assert!((got - plain).abs() < 1e-9);
}

fn full_attention(cells: &[CellRecord], p: &CellAttentionParams, scale: f64) -> Tensor {
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape);
    let out = attend_patch_on(&mut tape, cells, &vars, scale).unwrap();
    tape.value(out.attention).clone()
}

#[test]
fn moving_a_cell_away_lowers_its_attention() {
    let mut r = rng(9);
    let p = cell_params(&mut r, 4, 4);
    let emb: Vec<f32> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mk = |x: f32| {
        vec![
            CellRecord { cell_type: CellType::Dead, centroid: [0.1, 0.1], embedding: emb.clone() },
            CellRecord { cell_type: CellType::Dead, centroid: [x, 0.1], embedding: emb.clone() },
        ]
    };
    let mut prev = f64::INFINITY;
    for x in [0.15f32, 0.3, 0.5, 0.9] {
        let a = full_attention(&mk(x), &p, 1.0).at(1, 2);
        assert!(a < prev);
        prev = a;
    }
}

#[test]
fn larger_distance_never_raises_softmax_weight() {
    // Fixed raw scores; only the biased entry (i, j) changes.
    let mut r = rng(10);
    for _ in 0..200 {
        let raw: Vec<f64> = (0..5).map(|_| r.gen_range(-3.0..3.0)).collect();
        let j = r.gen_range(0..5);
        let d1 = r.gen_range(0.0..1.5);
        let d2 = d1 + r.gen_range(0.0..1.0);
        let row = |d: f64| {
            let mut v = raw.clone();
            v[j] -= d;
            softmax_rows(&Tensor::row(v)).data()[j]
        };
        assert!(row(d2) <= row(d1));
    }
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let mut r = rng(11);
    for n in 1..=6 {
        let (dc, dm) = (r.gen_range(2..=8), r.gen_range(2..=8));
        let p = cell_params(&mut r, dc, dm);
        let cells = random_cells(&mut r, n, dc);
        let weights: Vec<f64> = (0..dm).map(|_| r.gen_range(-1.0..1.0)).collect();
        let targets = [&p.e_cls, &p.w_q, &p.w_k, &p.w_v, &p.ln_pre_gamma, &p.ln_post_beta];
        for (slot, x) in targets.iter().enumerate() {
            let err = grad_check(
                |tape, v| {
                    let mut vars = p.bind(tape);
                    match slot {
                        0 => vars.e_cls = v,
                        1 => vars.w_q = v,
                        2 => vars.w_k = v,
                        3 => vars.w_v = v,
                        4 => vars.ln_pre_gamma = v,
                        _ => vars.ln_post_beta = v,
                    }
                    let out = attend_patch_on(tape, &cells, &vars, 1.0)?;
                    let w = tape.constant(Tensor::row(weights.clone()));
                    let prod = tape.mul(out.z_cls, w)?;
                    Ok(tape.sum(prod))
                },
                x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "n={n} slot={slot} err={err}");
        }
    }
}

#[test]
fn fusion_is_bilinear_and_composes() {
    let mut r = rng(12);
    let d = 5;
    let w = Tensor::matrix(d, d * d, (0..d * d * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let v = |r: &mut rand_chacha::ChaCha8Rng| (0..d).map(|_| r.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
    for _ in 0..50 {
        let (u1, u2, z) = (v(&mut r), v(&mut r), v(&mut r));
        let a: f64 = r.gen_range(-3.0..3.0);
        let scaled: Vec<f64> = u1.iter().map(|x| a * x).collect();
        let lhs = fuse(&scaled, &z, &w).unwrap();
        let rhs: Vec<f64> = fuse(&u1, &z, &w).unwrap().iter().map(|x| a * x).collect();
        assert!(lhs.iter().zip(&rhs).all(|(p, q)| (p - q).abs() < 1e-9));
        let sum: Vec<f64> = u1.iter().zip(&u2).map(|(p, q)| p + q).collect();
        let lhs = fuse(&sum, &z, &w).unwrap();
        let f1 = fuse(&u1, &z, &w).unwrap();
        let f2 = fuse(&u2, &z, &w).unwrap();
        assert!(lhs.iter().zip(f1.iter().zip(&f2)).all(|(p, (a, b))| (p - a - b).abs() < 1e-9));
        let lhs = fuse(&z, &sum, &w).unwrap();
        let f1 = fuse(&z, &u1, &w).unwrap();
        let f2 = fuse(&z, &u2, &w).unwrap();
        assert!(lhs.iter().zip(f1.iter().zip(&f2)).all(|(p, (a, b))| (p - a - b).abs() < 1e-9));
    }
}

#[test]
fn make_instance_equals_projection_then_fusion() {
    let mut r = rng(13);
    let model = random_model(&mut r, 6, 4, 4, 4, 1, true);
    let f = &model.params.fusion;
    for _ in 0..20 {
        let e: Vec<f32> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let e64: Vec<f64> = e.iter().map(|&x| x as f64).collect();
        // Projection against a triple-loop oracle.
        let proj = project_patch(&e64, &f.w_p).unwrap();
        for (i, got) in proj.iter().enumerate() {
            let want: f64 = (0..6).map(|j| f.w_p.at(i, j) * e64[j]).sum();
            assert!((got - want).abs() < 1e-12);
        }
        let composed = fuse(&proj, &z, &f.w_fusion).unwrap();
        let direct = make_instance(&e, &z, f, true).unwrap();
        assert_eq!(composed, direct);
    }
}

#[test]
fn fusion_gradient_matches_finite_differences() {
    let mut r = rng(14);
    for d in 2..=8 {
        let w = Tensor::matrix(d, d * d, (0..d * d * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let z = Tensor::row((0..d).map(|_| r.gen_range(-1.0..1.0)).collect());
        let e = Tensor::row((0..d).map(|_| r.gen_range(-1.0..1.0)).collect());
        let err = grad_check(
            |t, v| {
                let zc = t.constant(z.clone());
                let wc = t.constant(w.clone());
                let f = cellmil::fusion::fuse_on(t, v, zc, wc)?;
                let f = t.tanh(f);
                Ok(t.sum(f))
            },
            &e,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
        let err = grad_check(
            |t, v| {
                let ec = t.constant(e.clone());
                let zc = t.constant(z.clone());
                let f = cellmil::fusion::fuse_on(t, ec, zc, v)?;
                let f = t.tanh(f);
                Ok(t.sum(f))
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }
}

fn mil_params(r: &mut impl Rng, l: usize, d: usize, rank: usize) -> MilParams {
    let mut m = |rows: usize, cols: usize| {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    MilParams { vg: m(l, d), ug: m(l, d), w_att: m(l, rank), w_clf: m(d, 1), b_clf: m(1, 1) }
}

#[test]
fn rank_three_logit_is_norm_of_column_scores() {
    let mut r = rng(15);
    for _ in 0..50 {
        let p = mil_params(&mut r, 5, 4, 3);
        let h: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
        let g = gated_unit(&h, &p.vg, &p.ug).unwrap();
        let cols: Vec<f64> = (0..3).map(|c| (0..5).map(|i| p.w_att.at(i, c) * g[i]).sum()).collect();
        let want = (cols[0].powi(2) + cols[1].powi(2) + cols[2].powi(2)).sqrt();
        assert!((attention_logit(&h, &p, 3).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn rank_two_degenerate_projection_uses_absolute_scores() {
    let mut r = rng(16);
    let mut p = mil_params(&mut r, 4, 3, 2);
    for i in 0..4 {
        p.w_att.data_mut()[i * 2 + 1] = 0.0;
    }
    let bag: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
    let (_, weights) = pool(&bag, &p, 2).unwrap();
    let abs_scores: Vec<f64> = bag
        .iter()
        .map(|h| {
            let g = gated_unit(h, &p.vg, &p.ug).unwrap();
            (0..4).map(|i| p.w_att.at(i, 0) * g[i]).sum::<f64>().abs()
        })
        .collect();
    let want = softmax_rows(&Tensor::row(abs_scores));
    for (a, b) in weights.iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pooled_vector_is_explicit_weighted_sum() {
    let mut r = rng(17);
    for rank in 1..=3 {
        let p = mil_params(&mut r, 6, 4, rank);
        let bag: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
        let (pooled, weights) = pool(&bag, &p, rank).unwrap();
        let logits: Vec<f64> = bag.iter().map(|h| attention_logit(h, &p, rank).unwrap()).collect();
        let alpha = softmax_rows(&Tensor::row(logits));
        for t in 0..4 {
            let want: f64 = (0..5).map(|k| alpha.data()[k] * bag[k][t]).sum();
            assert!((pooled[t] - want).abs() < 1e-12);
        }
        assert!(weights.iter().zip(alpha.data()).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}

#[test]
fn classifier_matches_scalar_sigmoid() {
    let mut r = rng(18);
    for _ in 0..20 {
        let p = mil_params(&mut r, 3, 4, 1);
        let h: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
        let z: f64 = (0..4).map(|i| p.w_clf.data()[i] * h[i]).sum::<f64>() + p.b_clf.item();
        let want = 1.0 / (1.0 + (-z).exp());
        assert!((cellmil::mil_head::classify(&h, &p).unwrap() - want).abs() < 1e-15);
    }
}

#[test]
fn end_to_end_gradient_all_ranks() {
    let mut r = rng(19);
    for (rank, use_patch) in [(1, true), (2, true), (3, true), (2, false)] {
        let model = random_model(&mut r, 4, 4, 4, 4, rank, use_patch);
        let slide = random_slide(&mut r, 4, 4, 3, 4);
        let err = end_to_end_gradient_error(&model, &slide, rank % 2 == 0, 1.7, 1e-5);
        assert!(err < 1e-4, "rank {rank}: {err}");
    }
}
