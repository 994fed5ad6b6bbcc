//! Patch projection and outer-product fusion with the cell summary.
//!
//! `F = ẽ ⊗ z` is flattened row-major (`F[i][j]` lands at `i·d + j`) and
//! projected back to `d_model` by `W_fusion`. Neither projection has a bias.

use crate::error::{Error, Result};
use crate::model::{FusionParams, FusionVars};
use crate::numerics::{Tape, Tensor, Var};

pub fn project_patch_on(tape: &mut Tape, e_p: Var, w_p: Var) -> Result<Var> {
    let wt = tape.transpose(w_p);
    tape.matmul(e_p, wt)
}

pub fn fuse_on(tape: &mut Tape, e_tilde: Var, z_cls: Var, w_fusion: Var) -> Result<Var> {
    let (n_e, n_z) = (tape.value(e_tilde).len(), tape.value(z_cls).len());
    if n_e != n_z {
        return Err(Error::Dimension(format!(
            "fusing a {n_e}-vector with a {n_z}-vector"
        )));
    }
    let f = tape.outer(e_tilde, z_cls);
    let flat = tape.reshape(f, &[1, n_e * n_z])?;
    let wt = tape.transpose(w_fusion);
    tape.matmul(flat, wt)
}

/// The per-patch MIL instance: fused vector, or `z_cls` itself when patch
/// embeddings are disabled.
pub fn make_instance_on(
    tape: &mut Tape,
    patch_embedding: &[f32],
    z_cls: Var,
    params: &FusionVars,
    use_patch_embeddings: bool,
) -> Result<Var> {
    if !use_patch_embeddings {
        return Ok(z_cls);
    }
    let e = tape.constant(Tensor::row(
        patch_embedding.iter().map(|&v| v as f64).collect(),
    ));
    let e_tilde = project_patch_on(tape, e, params.w_p)?;
    fuse_on(tape, e_tilde, z_cls, params.w_fusion)
}

pub fn project_patch(e_p: &[f64], w_p: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::row(e_p.to_vec()));
    let w = tape.constant(w_p.clone());
    let out = project_patch_on(&mut tape, e, w)?;
    Ok(tape.value(out).data().to_vec())
}

pub fn fuse(e_tilde: &[f64], z_cls: &[f64], w_fusion: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::row(e_tilde.to_vec()));
    let z = tape.constant(Tensor::row(z_cls.to_vec()));
    let w = tape.constant(w_fusion.clone());
    let out = fuse_on(&mut tape, e, z, w)?;
    Ok(tape.value(out).data().to_vec())
}

pub fn make_instance(
    patch_embedding: &[f32],
    z_cls: &[f64],
    params: &FusionParams,
    use_patch_embeddings: bool,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let z = tape.constant(Tensor::row(z_cls.to_vec()));
    let out = make_instance_on(&mut tape, patch_embedding, z, &vars, use_patch_embeddings)?;
    Ok(tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_identity_projection() {
        // W_p = [I₂ | 0] over a 3-dim patch embedding.
        let w = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(project_patch(&[0.0, 1.0, 0.0], &w).unwrap(), vec![0.0, 1.0]);
        assert_eq!(project_patch(&[0.0; 3], &w).unwrap(), vec![0.0, 0.0]);
        assert!(project_patch(&[1.0; 4], &w).is_err());
    }

    #[test]
    fn fuse_selects_flattened_positions() {
        let (a, b) = (0.7, -1.3);
        // flatten([a,b] ⊗ [1,0]) = [a, 0, b, 0]; pick positions 0 and 2.
        let w = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(fuse(&[a, b], &[1.0, 0.0], &w).unwrap(), vec![a, b]);
        assert_eq!(fuse(&[a, b], &[0.0, 0.0], &w).unwrap(), vec![0.0, 0.0]);
        assert!(fuse(&[a, b, 1.0], &[1.0, 0.0], &w).is_err());
    }

    #[test]
    fn disabled_patch_path_returns_summary_bitwise() {
        let params = FusionParams {
            w_p: Tensor::filled(&[2, 3], 0.3),
            w_fusion: Tensor::filled(&[2, 4], -0.1),
        };
        let z = vec![0.123456789, -9.87654321];
        assert_eq!(make_instance(&[1.0, 2.0, 3.0], &z, &params, false).unwrap(), z);
        assert_eq!(
            make_instance(&[1.0, 2.0, 3.0], &[0.0, 0.0], &params, true).unwrap(),
            vec![0.0, 0.0]
        );
    }
}
