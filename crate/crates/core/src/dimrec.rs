//! Dimension reconstruction.
//!
//! Static per-channel scales above a threshold `T = μ + α·σ` are split into
//! pieces no larger than `T`; each piece becomes its own slot with a copy of
//! the channel's activation. To keep the channel count at `n`, the same number
//! of low-importance channels (by Hessian diagonal, neighbours of outlier
//! channels first) is pruned. At inference the activation side reduces to a
//! single index gather.
//!
//! Duplicated slots reuse the original weight row with the piece as that
//! row's dequantization factor, and the duplicated folded multiplier stays
//! `γ_k / s_k`. Since the pieces of a channel sum to `s_k`, splitting is
//! exactly lossless before weight rounding.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_sum::fsum;
use crate::exec;
use crate::qsm::FoldedNorm;
use crate::quant::{QuantizedLinear, WeightQuantizer};
use crate::tensor::Tensor;

/// Offline reconstruction recipe for one activation site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionPlan {
    pub alpha: f64,
    #[serde(rename = "T")]
    pub threshold: f64,
    /// Channel → scale pieces (remainder first, then copies of `T`).
    pub splits: BTreeMap<usize, Vec<f64>>,
    pub outliers: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub prune: Vec<usize>,
    /// Reconstructed slot → source channel.
    pub gather: Vec<usize>,
}

impl ReconstructionPlan {
    /// Plan that changes nothing.
    pub fn identity(n: usize, alpha: f64, threshold: f64) -> Self {
        Self {
            alpha,
            threshold,
            splits: BTreeMap::new(),
            outliers: Vec::new(),
            neighbors: Vec::new(),
            prune: Vec::new(),
            gather: (0..n).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.gather.len()
    }

    /// Number of extra slots created by splitting (`M`).
    pub fn extra_slots(&self) -> usize {
        self.splits.values().map(|p| p.len() - 1).sum()
    }

    pub fn is_identity(&self) -> bool {
        self.splits.is_empty() && self.prune.is_empty()
    }

    /// Dequantization scale carried by every reconstructed slot.
    pub fn slot_scales(&self, scales: &[f64]) -> Result<Vec<f64>> {
        if scales.len() != self.dim() {
            return Err(Error::shape(format!(
                "plan covers {} channels, got {} scales",
                self.dim(),
                scales.len()
            )));
        }
        let mut out = Vec::with_capacity(self.dim());
        let mut i = 0;
        while i < self.gather.len() {
            let k = self.gather[i];
            match self.splits.get(&k) {
                Some(pieces) => {
                    out.extend_from_slice(pieces);
                    i += pieces.len();
                }
                None => {
                    out.push(scales[k]);
                    i += 1;
                }
            }
        }
        Ok(out)
    }

    /// Check every structural invariant against the scales the plan was
    /// built from.
    pub fn validate(&self, scales: &[f64]) -> Result<()> {
        let n = scales.len();
        let bad = |msg: String| Err(Error::invalid(format!("plan invariant violated: {msg}")));
        if self.gather.len() != n {
            return bad(format!("gather length {} != {n}", self.gather.len()));
        }
        for (&k, pieces) in &self.splits {
            if pieces.iter().any(|&p| !(p > 0.0 && p <= self.threshold)) {
                return bad(format!("channel {k} has a piece outside (0, T]"));
            }
            if fsum(pieces.iter().copied()) != scales[k] {
                return bad(format!("pieces of channel {k} do not sum to its scale"));
            }
        }
        if self.prune.len() != self.extra_slots() {
            return bad(format!("{} pruned vs {} extra slots", self.prune.len(), self.extra_slots()));
        }
        let outliers: BTreeSet<_> = self.outliers.iter().collect();
        if self.prune.iter().any(|k| outliers.contains(k)) {
            return bad("an outlier channel was pruned".into());
        }
        let mut counts = vec![0usize; n];
        for &g in &self.gather {
            *counts.get_mut(g).ok_or_else(|| Error::invalid("gather index out of range"))? += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let expected = if self.prune.contains(&k) {
                0
            } else {
                self.splits.get(&k).map_or(1, Vec::len)
            };
            if c != expected {
                return bad(format!("channel {k} appears {c} times, expected {expected}"));
            }
        }
        Ok(())
    }
}

/// `T = μ(s) + α·σ(s)` with the population standard deviation.
pub fn compute_threshold(scales: &[f64], alpha: f64) -> Result<f64> {
    if scales.is_empty() {
        return Err(Error::invalid("no scales"));
    }
    let n = scales.len() as f64;
    let mean = scales.iter().sum::<f64>() / n;
    let var = scales.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(mean + alpha * var.sqrt())
}

/// Pieces for one scale: `(s - mT, T, …, T)` with the remainder in `(0, T]`.
pub fn split_scale(s: f64, threshold: f64) -> Vec<f64> {
    if s <= threshold {
        return vec![s];
    }
    let mut m = ((s / threshold).ceil() - 1.0).max(1.0);
    // A single fused operation keeps the remainder within half an ulp of
    // s - mT, so the pieces still sum to s after correct rounding.
    let mut rem = (-m).mul_add(threshold, s);
    while rem > threshold {
        m += 1.0;
        rem = (-m).mul_add(threshold, s);
    }
    while rem <= 0.0 {
        m -= 1.0;
        rem = (-m).mul_add(threshold, s);
    }
    let mut pieces = vec![rem];
    pieces.extend(std::iter::repeat_n(threshold, m as usize));
    pieces
}

/// Strong-parameter splitting: returns the split table and the outlier set.
pub fn split_strong_params(scales: &[f64], threshold: f64) -> Result<(BTreeMap<usize, Vec<f64>>, Vec<usize>)> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::invalid(format!("threshold {threshold} must be positive and finite")));
    }
    let mut splits = BTreeMap::new();
    let mut outliers = Vec::new();
    for (k, &s) in scales.iter().enumerate() {
        if s > threshold {
            splits.insert(k, split_scale(s, threshold));
            outliers.push(k);
        }
    }
    Ok((splits, outliers))
}

/// `({k-1, k+1 : k ∈ outliers} ∩ [0, n)) \ outliers`, sorted.
pub fn identify_neighbors(outliers: &[usize], n: usize) -> Vec<usize> {
    let set: BTreeSet<usize> = outliers.iter().copied().collect();
    let mut out = BTreeSet::new();
    for &k in outliers {
        if k > 0 && !set.contains(&(k - 1)) {
            out.insert(k - 1);
        }
        if k + 1 < n && !set.contains(&(k + 1)) {
            out.insert(k + 1);
        }
    }
    out.into_iter().collect()
}

fn least_important(candidates: impl Iterator<Item = usize>, hessian: &[f64], count: usize) -> Vec<usize> {
    let mut c: Vec<usize> = candidates.collect();
    c.sort_by(|&a, &b| hessian[a].total_cmp(&hessian[b]).then(a.cmp(&b)));
    c.truncate(count);
    c
}

/// Pick `m` channels to prune: the least important neighbours first, then
/// (if there are too few neighbours) the least important remaining
/// non-outlier channels. Ties go to the lower index.
pub fn select_prune_channels(neighbors: &[usize], m: usize, hessian: &[f64], outliers: &[usize]) -> Result<Vec<usize>> {
    let n = hessian.len();
    if neighbors.iter().chain(outliers).any(|&k| k >= n) {
        return Err(Error::invalid("channel index beyond the Hessian diagonal"));
    }
    let mut pruned = if neighbors.len() >= m {
        least_important(neighbors.iter().copied(), hessian, m)
    } else {
        let excluded: BTreeSet<usize> = neighbors.iter().chain(outliers).copied().collect();
        let others = least_important((0..n).filter(|k| !excluded.contains(k)), hessian, m - neighbors.len());
        if neighbors.len() + others.len() < m {
            return Err(Error::InsufficientCandidates {
                needed: m,
                available: neighbors.len() + others.len(),
            });
        }
        neighbors.iter().copied().chain(others).collect()
    };
    pruned.sort_unstable();
    Ok(pruned)
}

/// Threshold, split, neighbour search, pruning and gather vector in one go.
pub fn build_plan(scales: &[f64], alpha: f64, hessian: &[f64]) -> Result<ReconstructionPlan> {
    let n = scales.len();
    if hessian.len() != n {
        return Err(Error::shape(format!("{} Hessian entries for {n} channels", hessian.len())));
    }
    if scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("scales must be positive"));
    }
    let threshold = compute_threshold(scales, alpha)?;
    let (splits, outliers) = split_strong_params(scales, threshold)?;
    let neighbors = identify_neighbors(&outliers, n);
    let m: usize = splits.values().map(|p| p.len() - 1).sum();
    let prune = select_prune_channels(&neighbors, m, hessian, &outliers)?;
    let gather = (0..n)
        .filter(|k| prune.binary_search(k).is_err())
        .flat_map(|k| std::iter::repeat_n(k, splits.get(&k).map_or(1, Vec::len)))
        .collect();
    Ok(ReconstructionPlan {
        alpha,
        threshold,
        splits,
        outliers,
        neighbors,
        prune,
        gather,
    })
}

/// `y[..., i] = x[..., gather[i]]`.
pub fn reconstruct_activation(x: &Tensor, plan: &ReconstructionPlan) -> Result<Tensor> {
    let n = x.cols();
    if plan.gather.iter().any(|&g| g >= n) {
        return Err(Error::invalid(format!("gather index out of range for dim {n}")));
    }
    let slots = plan.gather.len();
    let src = x.reals()?;
    let mut out = vec![0.0; x.rows() * slots];
    exec::for_each_chunk_mut(&mut out, slots, |t, row| {
        let xr = &src[t * n..(t + 1) * n];
        for (o, &g) in row.iter_mut().zip(&plan.gather) {
            *o = xr[g];
        }
    });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = slots;
    Tensor::real(shape, out)
}

/// Reconstructed real weight rows, each scaled by its slot's scale:
/// row `i` is `slot_scale_i · W[gather_i]`.
pub fn reconstruct_weight_rows(w: &Tensor, plan: &ReconstructionPlan, slot_scales: &[f64]) -> Result<Tensor> {
    let gathered = gather_rows(w, plan)?;
    crate::qsm::fold_rows(&gathered, slot_scales)
}

/// Row `i` is `W[gather_i]` (unscaled).
pub fn gather_rows(w: &Tensor, plan: &ReconstructionPlan) -> Result<Tensor> {
    if w.shape().len() != 2 || w.shape()[0] != plan.dim() {
        return Err(Error::shape(format!(
            "weight {:?} does not match plan dim {}",
            w.shape(),
            plan.dim()
        )));
    }
    let j = w.shape()[1];
    let mut out = Vec::with_capacity(plan.dim() * j);
    for &g in &plan.gather {
        out.extend_from_slice(w.row(g)?);
    }
    Tensor::real(vec![plan.dim(), j], out)
}

/// Rebuild a folded norm and its following linear layer for a plan.
pub fn reconstruct_norm_and_weights(
    f: &FoldedNorm,
    w: &Tensor,
    plan: &ReconstructionPlan,
    quantizer: &dyn WeightQuantizer,
) -> Result<(FoldedNorm, QuantizedLinear)> {
    if f.gather.is_some() {
        return Err(Error::invalid("norm is already reconstructed"));
    }
    if f.slots() != plan.dim() || w.shape().first() != Some(&plan.dim()) {
        return Err(Error::shape(format!(
            "plan dim {} vs norm {} / weight {:?}",
            plan.dim(),
            f.slots(),
            w.shape()
        )));
    }
    let slot_scales = plan.slot_scales(&f.scales)?;
    let norm = FoldedNorm {
        base: f.base.clone(),
        folded_gamma: plan.gather.iter().map(|&k| f.folded_gamma[k]).collect(),
        folded_beta: f.folded_beta.as_ref().map(|b| plan.gather.iter().map(|&k| b[k]).collect()),
        scales: slot_scales.clone(),
        gather: Some(plan.gather.clone()),
    };
    let mut q = quantizer.quantize(&reconstruct_weight_rows(w, plan, &slot_scales)?)?;
    q.folded_row_scales = Some(slot_scales);
    Ok((norm, q))
}
