//! Desk-scale transformer block, synthetic structured-outlier data and
//! calibration ingestion.
//!
//! The fp block is the reference; [`QuantizedBlock`] runs the same wiring
//! with qkv and gate/up behind folded norms (static per-channel scales) and
//! out/down behind per-token dynamic quantization. Attention and SiLU always
//! run in reals.

mod block;
mod data;
mod quantized;

pub use block::{BlockConfig, FpTrace, Layer, ToyBlock};
pub use data::{generate_activations, load_calibration, write_calibration, DataSource, OutlierProfile, ACTIVATIONS_KEY};
pub use quantized::{
    BlockCache, BlockRecipe, DynamicRecipe, LinearSite, QuantizedBlock, StaticRecipe, StaticSite,
};

use crate::dimrec::{gather_rows, ReconstructionPlan};
use crate::error::Result;
use crate::qsm::fold_quant_into_norm;
use crate::quant::{hadamard_rotate, Side};
use crate::tensor::{NormParams, Tensor};

impl StaticRecipe {
    /// Fold `scales` into `norm` and lay out the weight rows for `plan`.
    pub fn new(norm: &NormParams, w: &Tensor, scales: &[f64], plan: &ReconstructionPlan) -> Result<Self> {
        let folded = fold_quant_into_norm(norm, scales)?;
        if plan.is_identity() {
            return Ok(Self {
                norm: folded,
                rows: w.clone(),
            });
        }
        let mut norm = folded.clone();
        norm.folded_gamma = plan.gather.iter().map(|&k| folded.folded_gamma[k]).collect();
        norm.folded_beta = folded.folded_beta.as_ref().map(|b| plan.gather.iter().map(|&k| b[k]).collect());
        norm.scales = plan.slot_scales(scales)?;
        norm.gather = Some(plan.gather.clone());
        Ok(Self {
            norm,
            rows: gather_rows(w, plan)?,
        })
    }
}

impl DynamicRecipe {
    /// With `hadamard`, the rows are stored rotated (`Hᵀ·W`) to pair with the
    /// rotated activations.
    pub fn new(w: &Tensor, clip_ratio: f64, hadamard: bool) -> Result<Self> {
        Ok(Self {
            rows: if hadamard { hadamard_rotate(w, Side::Weight)? } else { w.clone() },
            clip_ratio,
            hadamard,
        })
    }
}
