//! Spatially biased self-attention over the cells of one patch.
//!
//! The sequence is a learned CLS token followed by the layer-normalized
//! cell embeddings. Attention logits between two cells are reduced by
//! `spatial_scale` times the Euclidean distance of their centroids; the CLS
//! position carries no centroid and gets no bias. The CLS output row,
//! layer-normalized again, summarizes the patch.

use crate::cohort::CellRecord;
use crate::error::{Error, Result};
use crate::model::{CellAttentionParams, CellAttentionVars};
use crate::numerics::{Tape, Tensor, Var, LAYER_NORM_EPS};

/// Additive logit bias over `[CLS, cell₁, …, cellₙ]`.
pub fn spatial_bias(centroids: &[[f64; 2]], spatial_scale: f64) -> Tensor {
    let n = centroids.len() + 1;
    let mut m = Tensor::zeros(&[n, n]);
    let data = m.data_mut();
    for (i, a) in centroids.iter().enumerate() {
        for (j, b) in centroids.iter().enumerate().skip(i + 1) {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            let v = -spatial_scale * d;
            data[(i + 1) * n + (j + 1)] = v;
            data[(j + 1) * n + (i + 1)] = v;
        }
    }
    m
}

/// Tape handles for one patch's attention pass.
#[derive(Debug, Clone, Copy)]
pub struct PatchAttention {
    /// `1 × d_model` CLS summary after the output layer norm.
    pub z_cls: Var,
    /// Full `(n+1) × (n+1)` attention matrix.
    pub attention: Var,
}

/// Plain-value result of [`attend_patch`].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSummary {
    pub z_cls: Vec<f64>,
    /// CLS-query attention over `[CLS, cell₁, …, cellₙ]`.
    pub attention_row: Vec<f64>,
}

pub fn cell_matrix(cells: &[CellRecord]) -> Result<Tensor> {
    let d = cells
        .first()
        .map(|c| c.embedding.len())
        .ok_or_else(|| Error::Validation("attention over an empty cell list".into()))?;
    let mut data = Vec::with_capacity(cells.len() * d);
    for c in cells {
        if c.embedding.len() != d {
            return Err(Error::Dimension(format!(
                "cell embeddings of length {} and {d} in one patch",
                c.embedding.len()
            )));
        }
        data.extend(c.embedding.iter().map(|&v| v as f64));
    }
    Tensor::matrix(cells.len(), d, data)
}

pub fn centroids(cells: &[CellRecord]) -> Vec<[f64; 2]> {
    cells
        .iter()
        .map(|c| [c.centroid[0] as f64, c.centroid[1] as f64])
        .collect()
}

/// Records the attention pass for `cells` on `tape`.
pub fn attend_patch_on(
    tape: &mut Tape,
    cells: &[CellRecord],
    params: &CellAttentionVars,
    spatial_scale: f64,
) -> Result<PatchAttention> {
    let c = tape.constant(cell_matrix(cells)?);
    let bias = tape.constant(spatial_bias(&centroids(cells), spatial_scale));
    attend_tensor_on(tape, c, bias, params)
}

pub(crate) fn attend_tensor_on(
    tape: &mut Tape,
    cells: Var,
    bias: Var,
    p: &CellAttentionVars,
) -> Result<PatchAttention> {
    let normed = tape.layer_norm_rows(cells, p.ln_pre_gamma, p.ln_pre_beta, LAYER_NORM_EPS)?;
    let x = tape.concat_rows(&[p.e_cls, normed])?;

    let project = |tape: &mut Tape, w: Var| -> Result<Var> {
        let wt = tape.transpose(w);
        tape.matmul(x, wt)
    };
    let q = project(tape, p.w_q)?;
    let k = project(tape, p.w_k)?;
    let v = project(tape, p.w_v)?;
    let d_model = tape.value(q).dims2().1;

    let kt = tape.transpose(k);
    let raw = tape.matmul(q, kt)?;
    let raw = tape.scale(raw, 1.0 / (d_model as f64).sqrt());
    let biased = tape.add(raw, bias)?;
    let attention = tape.softmax_rows(biased);
    let z = tape.matmul(attention, v)?;
    let cls = tape.select_row(z, 0)?;
    let z_cls = tape.layer_norm_rows(cls, p.ln_post_gamma, p.ln_post_beta, LAYER_NORM_EPS)?;
    Ok(PatchAttention { z_cls, attention })
}

/// Evaluates the attention pass without keeping the tape.
pub fn attend_patch(
    cells: &[CellRecord],
    params: &CellAttentionParams,
    spatial_scale: f64,
) -> Result<PatchSummary> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = attend_patch_on(&mut tape, cells, &vars, spatial_scale)?;
    Ok(PatchSummary {
        z_cls: tape.value(out.z_cls).data().to_vec(),
        attention_row: tape.value(out.attention).row_slice(0).to_vec(),
    })
}
