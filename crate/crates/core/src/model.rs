//! Model configuration, learnable parameters and their initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::cohort::Slide;
use crate::error::{Error, Result};
use crate::mil_head::{slide_forward_on, SlideScore};
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// Largest fused-projection parameter count accepted without
/// `allow_large_fusion` (d_model = 256).
pub const MAX_FUSION_PARAMS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_patch: usize,
    pub d_cell: usize,
    pub d_model: usize,
    /// Width of the gated attention branches.
    pub hidden: usize,
    /// Attention projection rank, 1 to 3.
    pub rank: usize,
    pub use_patch_embeddings: bool,
    pub spatial_scale: f64,
    #[serde(default)]
    pub allow_large_fusion: bool,
}

impl ModelConfig {
    pub fn new(d_patch: usize, d_cell: usize) -> Self {
        Self {
            d_patch,
            d_cell,
            d_model: 16,
            hidden: 64,
            rank: 2,
            use_patch_embeddings: true,
            spatial_scale: 1.0,
            allow_large_fusion: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_patch == 0 || self.d_cell == 0 || self.d_model == 0 || self.hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(1..=3).contains(&self.rank) {
            return Err(Error::Config(format!(
                "attention rank must be 1, 2 or 3, got {}",
                self.rank
            )));
        }
        if !(self.spatial_scale > 0.0 && self.spatial_scale.is_finite()) {
            return Err(Error::Config(format!(
                "spatial_scale must be positive, got {}",
                self.spatial_scale
            )));
        }
        let fusion = self.d_model.pow(3);
        if fusion > MAX_FUSION_PARAMS && !self.allow_large_fusion {
            return Err(Error::Config(format!(
                "d_model {} needs {} fusion parameters; set allow_large_fusion to proceed",
                self.d_model, fusion
            )));
        }
        Ok(())
    }
}

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident, $vars:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            $(pub $field: Tensor,)+
        }

        /// Parameters bound as differentiable leaves on one tape.
        #[derive(Debug, Clone, Copy)]
        pub struct $vars {
            $(pub $field: Var,)+
        }

        impl $name {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),+];

            pub fn bind(&self, tape: &mut Tape) -> $vars {
                $vars { $($field: tape.leaf(self.$field.clone()),)+ }
            }

            pub fn tensors(&self) -> Vec<&Tensor> {
                vec![$(&self.$field),+]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
                vec![$(&mut self.$field),+]
            }
        }

        impl $vars {
            pub fn vars(&self) -> Vec<Var> {
                vec![$(self.$field),+]
            }
        }
    };
}

param_group!(
    /// Cell self-attention: CLS token, projections and the two layer norms.
    CellAttentionParams,
    CellAttentionVars {
        e_cls,
        w_q,
        w_k,
        w_v,
        ln_pre_gamma,
        ln_pre_beta,
        ln_post_gamma,
        ln_post_beta,
    }
);

param_group!(
    /// Patch projection and the fused outer-product projection.
    FusionParams,
    FusionVars { w_p, w_fusion }
);

param_group!(
    /// Gated attention branches, rank projection and the classifier head.
    MilParams,
    MilVars {
        vg,
        ug,
        w_att,
        w_clf,
        b_clf,
    }
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub cell: CellAttentionParams,
    pub fusion: FusionParams,
    pub mil: MilParams,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub cell: CellAttentionVars,
    pub fusion: FusionVars,
    pub mil: MilVars,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

impl ModelParams {
    /// Glorot-uniform matrices, N(0, 0.02²) CLS token, unit/zero layer norms
    /// and a zero classifier.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (dp, dc, dm, l, r) = (
            config.d_patch,
            config.d_cell,
            config.d_model,
            config.hidden,
            config.rank,
        );
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let cls = (0..dc).map(|_| normal.sample(rng)).collect();
        let cell = CellAttentionParams {
            e_cls: Tensor::row(cls),
            w_q: glorot(rng, dm, dc),
            w_k: glorot(rng, dm, dc),
            w_v: glorot(rng, dm, dc),
            ln_pre_gamma: Tensor::filled(&[dc], 1.0),
            ln_pre_beta: Tensor::zeros(&[dc]),
            ln_post_gamma: Tensor::filled(&[dm], 1.0),
            ln_post_beta: Tensor::zeros(&[dm]),
        };
        let fusion = FusionParams {
            w_p: glorot(rng, dm, dp),
            w_fusion: glorot(rng, dm, dm * dm),
        };
        let mil = MilParams {
            vg: glorot(rng, l, dm),
            ug: glorot(rng, l, dm),
            w_att: glorot(rng, l, r),
            w_clf: Tensor::zeros(&[dm, 1]),
            b_clf: Tensor::zeros(&[1, 1]),
        };
        Ok(Self { cell, fusion, mil })
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            cell: self.cell.bind(tape),
            fusion: self.fusion.bind(tape),
            mil: self.mil.bind(tape),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.cell.tensors();
        v.extend(self.fusion.tensors());
        v.extend(self.mil.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.cell.tensors_mut();
        v.extend(self.fusion.tensors_mut());
        v.extend(self.mil.tensors_mut());
        v
    }

    pub fn names() -> Vec<&'static str> {
        let mut v = CellAttentionParams::NAMES.to_vec();
        v.extend_from_slice(FusionParams::NAMES);
        v.extend_from_slice(MilParams::NAMES);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Gradients in [`ModelParams::tensors`] order; unused parameters get zeros.
    pub fn collect_gradients(&self, vars: &ModelVars, grads: &mut Gradients) -> Vec<Tensor> {
        self.tensors()
            .into_iter()
            .zip(vars.vars())
            .map(|(t, v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

impl ModelVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.cell.vars();
        v.extend(self.fusion.vars());
        v.extend(self.mil.vars());
        v
    }
}

/// Configuration plus parameters: one trainable slide classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn predict(&self, slide: &Slide) -> Result<SlideScore> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let fwd = slide_forward_on(&mut tape, slide, &vars, &self.config)?;
        Ok(fwd.score(&tape))
    }

    /// Weighted cross-entropy of the slide logit and its gradient with
    /// respect to every parameter, in [`ModelParams::tensors`] order.
    pub fn loss_and_gradients(
        &self,
        slide: &Slide,
        label: bool,
        positive_weight: f64,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let fwd = slide_forward_on(&mut tape, slide, &vars, &self.config)?;
        let loss = tape.bce_with_logits(fwd.logit, label as u8 as f64, positive_weight)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        Ok((value, self.params.collect_gradients(&vars, &mut grads)))
    }
}
