//! Gated attention pooling over a slide's patch instances and the
//! slide-level classifier.
//!
//! Each instance `h` is scored from the gate `g = tanh(Vg·h) ⊙ σ(Ug·h)`.
//! With rank 1 the score is `wᵀg`; with rank 2 or 3 it is the Euclidean
//! norm of `W_attᵀg`, so every score is non-negative. Scores are
//! softmax-normalized over the bag.

use serde::{Deserialize, Serialize};

use crate::attention_cell::attend_patch_on;
use crate::cohort::Slide;
use crate::error::{Error, Result};
use crate::fusion::make_instance_on;
use crate::model::{MilParams, MilVars, ModelConfig, ModelVars};
use crate::numerics::{gated_unit, sigmoid, Tape, Tensor, Var};

/// Attention scores for a `K × d_model` instance matrix, as `K × 1`.
pub fn attention_logits_on(tape: &mut Tape, instances: Var, p: &MilVars, rank: usize) -> Result<Var> {
    let vt = tape.transpose(p.vg);
    let ut = tape.transpose(p.ug);
    let a = tape.matmul(instances, vt)?;
    let b = tape.matmul(instances, ut)?;
    let a = tape.tanh(a);
    let b = tape.sigmoid(b);
    let gate = tape.mul(a, b)?;
    let scores = tape.matmul(gate, p.w_att)?;
    let width = tape.value(p.w_att).dims2().1;
    if width != rank {
        return Err(Error::Dimension(format!(
            "attention projection has {width} columns for rank {rank}"
        )));
    }
    match rank {
        1 => Ok(scores),
        2 | 3 => Ok(tape.row_norms(scores)),
        _ => Err(Error::Config(format!("invalid attention rank {rank}"))),
    }
}

/// Single-instance score, evaluated directly.
pub fn attention_logit(h: &[f64], params: &MilParams, rank: usize) -> Result<f64> {
    if !(1..=3).contains(&rank) {
        return Err(Error::Config(format!("invalid attention rank {rank}")));
    }
    if params.w_att.dims2().1 != rank {
        return Err(Error::Dimension(format!(
            "attention projection {:?} for rank {rank}",
            params.w_att.shape()
        )));
    }
    let g = gated_unit(h, &params.vg, &params.ug)?;
    let cols: Vec<f64> = (0..rank)
        .map(|c| (0..g.len()).map(|i| params.w_att.at(i, c) * g[i]).sum())
        .collect();
    Ok(if rank == 1 {
        cols[0]
    } else {
        cols.iter().map(|v| v * v).sum::<f64>().sqrt()
    })
}

/// Returns `(pooled 1 × d_model, weights 1 × K)`.
pub fn pool_on(tape: &mut Tape, instances: Var, p: &MilVars, rank: usize) -> Result<(Var, Var)> {
    let k = tape.value(instances).dims2().0;
    if k == 0 {
        return Err(Error::Validation("attention pooling over an empty bag".into()));
    }
    let logits = attention_logits_on(tape, instances, p, rank)?;
    let logits = tape.reshape(logits, &[1, k])?;
    let alpha = tape.softmax_rows(logits);
    let pooled = tape.matmul(alpha, instances)?;
    Ok((pooled, alpha))
}

pub fn pool(instances: &[Vec<f64>], params: &MilParams, rank: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if instances.is_empty() {
        return Err(Error::Validation("attention pooling over an empty bag".into()));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let h = tape.constant(Tensor::from_rows(instances)?);
    let (pooled, alpha) = pool_on(&mut tape, h, &vars, rank)?;
    Ok((
        tape.value(pooled).data().to_vec(),
        tape.value(alpha).data().to_vec(),
    ))
}

/// Classifier logit `w_clfᵀ pooled + b_clf`, as `1 × 1`.
pub fn classify_logit_on(tape: &mut Tape, pooled: Var, p: &MilVars) -> Result<Var> {
    let s = tape.matmul(pooled, p.w_clf)?;
    tape.add(s, p.b_clf)
}

pub fn classify(pooled: &[f64], params: &MilParams) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let h = tape.constant(Tensor::row(pooled.to_vec()));
    let z = classify_logit_on(&mut tape, h, &vars)?;
    Ok(sigmoid(tape.value(z).item()))
}

/// Tape handles from one slide pass.
#[derive(Debug, Clone)]
pub struct SlideForward {
    pub logit: Var,
    /// `1 × K` pooling weights.
    pub weights: Var,
    /// Patch ids of the `K` instances, in bag order.
    pub patch_ids: Vec<u32>,
    /// Each patch's full cell attention matrix.
    pub cell_attention: Vec<Var>,
}

/// Slide-level output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideScore {
    pub probability: f64,
    pub logit: f64,
    pub attention_weights: Vec<f64>,
    pub patch_ids: Vec<u32>,
    /// CLS-query attention over `[CLS, cells…]` for each instance.
    pub cell_attention: Vec<Vec<f64>>,
}

/// Full pipeline over a (possibly subset) slide. Patches without cells are
/// skipped; a slide left with none is reported as inapplicable.
pub fn slide_forward_on(
    tape: &mut Tape,
    slide: &Slide,
    vars: &ModelVars,
    config: &ModelConfig,
) -> Result<SlideForward> {
    let mut instances = Vec::new();
    let mut patch_ids = Vec::new();
    let mut cell_attention = Vec::new();
    for patch in slide.patches.iter().filter(|p| !p.cells.is_empty()) {
        let att = attend_patch_on(tape, &patch.cells, &vars.cell, config.spatial_scale)?;
        let inst = make_instance_on(
            tape,
            &patch.embedding,
            att.z_cls,
            &vars.fusion,
            config.use_patch_embeddings,
        )?;
        instances.push(inst);
        patch_ids.push(patch.patch_id);
        cell_attention.push(att.attention);
    }
    if instances.is_empty() {
        return Err(Error::InapplicableSlide(slide.slide_id.clone()));
    }
    let h = tape.concat_rows(&instances)?;
    let (pooled, weights) = pool_on(tape, h, &vars.mil, config.rank)?;
    let logit = classify_logit_on(tape, pooled, &vars.mil)?;
    Ok(SlideForward {
        logit,
        weights,
        patch_ids,
        cell_attention,
    })
}

impl SlideForward {
    pub fn score(&self, tape: &Tape) -> SlideScore {
        let logit = tape.value(self.logit).item();
        SlideScore {
            probability: sigmoid(logit),
            logit,
            attention_weights: tape.value(self.weights).data().to_vec(),
            patch_ids: self.patch_ids.clone(),
            cell_attention: self
                .cell_attention
                .iter()
                .map(|&a| tape.value(a).row_slice(0).to_vec())
                .collect(),
        }
    }
}
