//! Quantization step migration.
//!
//! Per-channel activation scales `s_k` are folded into the preceding norm's
//! multiplier (`γ_k / s_k`, plus `β_k / s_k` for LayerNorm) so the norm emits
//! integers directly, and into the following linear layer's weight rows
//! (`s_k · W_k`) so the integer matmul dequantizes implicitly. Neither an
//! explicit quantize nor an explicit dequantize pass remains on the forward
//! path.

use crate::container::Container;
use crate::error::{Error, Result};
use crate::exec;
use crate::quant::{
    integer_linear_unit, Granularity, QuantizedLinear, QuantizedTensor, WeightQuantizer,
};
use crate::tensor::{normalize_rows, qmax, round_even, NormKind, NormParams, Tensor};

/// Norm parameters with the activation quantization scales folded in.
///
/// After dimension reconstruction the norm output is gathered through
/// `gather` before the multiplier, so `folded_gamma` and `scales` are indexed
/// by reconstructed slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedNorm {
    pub base: NormParams,
    pub folded_gamma: Vec<f64>,
    pub folded_beta: Option<Vec<f64>>,
    pub scales: Vec<f64>,
    pub gather: Option<Vec<usize>>,
}

impl FoldedNorm {
    /// Number of output slots (equals the base dimension after reconstruction).
    pub fn slots(&self) -> usize {
        self.folded_gamma.len()
    }

    /// Source channel of each slot.
    pub fn source(&self, slot: usize) -> usize {
        self.gather.as_ref().map_or(slot, |g| g[slot])
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) -> Result<()> {
        c.insert_vec(format!("{prefix}.gamma"), &self.base.gamma)?;
        if let Some(b) = &self.base.beta {
            c.insert_vec(format!("{prefix}.beta"), b)?;
        }
        c.insert_scalar(format!("{prefix}.eps"), self.base.eps);
        c.insert_vec(format!("{prefix}.folded_gamma"), &self.folded_gamma)?;
        if let Some(b) = &self.folded_beta {
            c.insert_vec(format!("{prefix}.folded_beta"), b)?;
        }
        c.insert_vec(format!("{prefix}.scales"), &self.scales)?;
        if let Some(g) = &self.gather {
            c.insert_indices(format!("{prefix}.gather"), g)?;
        }
        Ok(())
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let key = |s: &str| format!("{prefix}.{s}");
        let beta = c.contains(&key("beta")).then(|| c.get_vec(&key("beta"))).transpose()?;
        let base = NormParams {
            gamma: c.get_vec(&key("gamma"))?,
            kind: if beta.is_some() { NormKind::LayerNorm } else { NormKind::RmsNorm },
            beta,
            eps: c.get_scalar(&key("eps"))?,
        };
        let f = Self {
            base,
            folded_gamma: c.get_vec(&key("folded_gamma"))?,
            folded_beta: c.contains(&key("folded_beta")).then(|| c.get_vec(&key("folded_beta"))).transpose()?,
            scales: c.get_vec(&key("scales"))?,
            gather: c.contains(&key("gather")).then(|| c.get_indices(&key("gather"))).transpose()?,
        };
        if f.scales.len() != f.slots() || f.gather.as_ref().is_some_and(|g| g.len() != f.slots()) {
            return Err(Error::Format(format!("{prefix}: inconsistent folded norm lengths")));
        }
        Ok(f)
    }
}

fn check_scales(scales: &[f64], n: usize) -> Result<()> {
    if scales.len() != n {
        return Err(Error::shape(format!("{} scales for {n} channels", scales.len())));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!("scale {s} is not positive")));
    }
    Ok(())
}

/// `γ / s` (and `β / s`) elementwise.
pub fn fold_quant_into_norm(p: &NormParams, scales: &[f64]) -> Result<FoldedNorm> {
    p.validate()?;
    check_scales(scales, p.dim())?;
    Ok(FoldedNorm {
        base: p.clone(),
        folded_gamma: p.gamma.iter().zip(scales).map(|(g, s)| g / s).collect(),
        folded_beta: p.beta.as_ref().map(|b| b.iter().zip(scales).map(|(b, s)| b / s).collect()),
        scales: scales.to_vec(),
        gather: None,
    })
}

/// Normalize, gather (if reconstructed), apply the folded multiplier and
/// round: the norm's output is already the integer activation.
pub fn folded_norm_forward(x: &Tensor, f: &FoldedNorm, bits: u8) -> Result<QuantizedTensor> {
    if x.cols() != f.base.dim() {
        return Err(Error::shape(format!(
            "last dim {} vs norm dim {}",
            x.cols(),
            f.base.dim()
        )));
    }
    let normed = normalize_rows(x, f.base.kind, f.base.eps)?;
    let src = normed.reals()?;
    let (n, slots) = (f.base.dim(), f.slots());
    let q = qmax(bits) as f64;
    let mut ints = vec![0i32; x.rows() * slots];
    exec::for_each_chunk_mut(&mut ints, slots, |t, row| {
        let xr = &src[t * n..(t + 1) * n];
        for (i, out) in row.iter_mut().enumerate() {
            let mut v = xr[f.source(i)] * f.folded_gamma[i];
            if let Some(b) = &f.folded_beta {
                v += b[i];
            }
            *out = round_even(v).clamp(-q, q) as i32;
        }
    });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = slots;
    Ok(QuantizedTensor {
        ints: Tensor::int(shape, ints, bits)?,
        scales: f.scales.clone(),
        zero_points: None,
        granularity: Granularity::PerChannel,
        bits,
    })
}

/// Scale weight row `k` by `s_k`, then quantize along the output dimension.
pub fn fold_dequant_into_weights(w: &Tensor, scales: &[f64], quantizer: &dyn WeightQuantizer) -> Result<QuantizedLinear> {
    let folded = fold_rows(w, scales)?;
    let mut q = quantizer.quantize(&folded)?;
    q.folded_row_scales = Some(scales.to_vec());
    Ok(q)
}

/// `W'_kj = s_k · W_kj`.
pub fn fold_rows(w: &Tensor, scales: &[f64]) -> Result<Tensor> {
    if w.shape().len() != 2 {
        return Err(Error::shape("weights must be 2-D"));
    }
    check_scales(scales, w.shape()[0])?;
    let j = w.shape()[1];
    let data = w
        .reals()?
        .iter()
        .enumerate()
        .map(|(idx, v)| v * scales[idx / j])
        .collect();
    Tensor::real(w.shape().to_vec(), data)
}

/// The modified linear layer: integer activations from a folded norm times
/// folded integer weights, dequantized only by the per-output-channel weight
/// scale.
pub fn folded_linear(x: &QuantizedTensor, w: &QuantizedLinear) -> Result<Tensor> {
    let rows = w
        .folded_row_scales
        .as_ref()
        .ok_or_else(|| Error::invalid("weights carry no folded activation scales"))?;
    if x.granularity != Granularity::PerChannel || rows.len() != x.scales.len() {
        return Err(Error::shape(format!(
            "folded weights expect {} per-channel activations, got {} ({:?})",
            rows.len(),
            x.scales.len(),
            x.granularity
        )));
    }
    integer_linear_unit(&x.ints, w)
}

/// Work done by one static linear forward, counted as it executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PathTrace {
    /// Roundings applied to activation elements.
    pub roundings: usize,
    /// Standalone passes that divide activations by scales before rounding.
    pub quant_passes: usize,
    /// Standalone passes that multiply integer activations back to reals.
    pub dequant_passes: usize,
}

/// Folded norm followed by the folded linear layer, with a trace of the
/// quantization work it performed.
pub fn static_linear_traced(x: &Tensor, f: &FoldedNorm, w: &QuantizedLinear, bits: u8) -> Result<(Tensor, PathTrace)> {
    let xq = folded_norm_forward(x, f, bits)?;
    let trace = PathTrace {
        roundings: xq.ints.len(),
        quant_passes: 0,
        dequant_passes: 0,
    };
    Ok((folded_linear(&xq, w)?, trace))
}

/// The unmigrated reference: norm, explicit quantize pass, explicit
/// dequantize pass, real matmul.
pub fn unfolded_linear_traced(
    x: &Tensor,
    p: &NormParams,
    scales: &[f64],
    w_real: &Tensor,
    bits: u8,
) -> Result<(Tensor, PathTrace)> {
    let normed = crate::tensor::norm_forward(x, p)?;
    let xq = crate::quant::quantize(
        &normed,
        scales,
        &crate::quant::QuantScheme::symmetric(bits, Granularity::PerChannel),
    )?;
    let deq = crate::quant::dequantize(&xq)?;
    let trace = PathTrace {
        roundings: xq.ints.len(),
        quant_passes: 1,
        dequant_passes: 1,
    };
    Ok((crate::tensor::matmul(&deq, w_real)?, trace))
}
