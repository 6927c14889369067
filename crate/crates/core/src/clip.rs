//! Clip-ratio grid search.
//!
//! Static per-channel path: each channel's scale is shrunk by a ratio `r`
//! chosen to minimize the activation round-off on calibration samples plus
//! the quantization error of that channel's folded weight row(s). Dynamic
//! per-token path: one ratio for the whole layer, chosen on the output error
//! of the quantized matmul.

use serde::{Deserialize, Serialize};

use crate::dimrec::split_scale;
use crate::error::{Error, Result};
use crate::exec;
use crate::quant::{dequantize, quantize_per_token_dynamic, SCALE_FLOOR};
use crate::tensor::{matmul, qmax, round_even, Tensor};

/// `0.50, 0.51, …, 1.00`.
pub fn default_grid() -> Vec<f64> {
    (50..=100).map(|i| i as f64 / 100.0).collect()
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("clip grid is empty"));
    }
    if let Some(r) = grid.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::invalid(format!("clip ratio {r} outside (0, 1]")));
    }
    if !grid.contains(&1.0) {
        return Err(Error::invalid("clip grid must contain 1.0"));
    }
    Ok(())
}

/// Index of the smallest loss; ties go to the larger ratio.
fn argmin(grid: &[f64], losses: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..grid.len() {
        if losses[i] < losses[best] || (losses[i] == losses[best] && grid[i] > grid[best]) {
            best = i;
        }
    }
    best
}

/// Selected ratios together with every candidate's loss.
///
/// Exactly one of `per_channel_ratios` (static layers) and `layer_ratio`
/// (dynamic layers) is set. `losses[c][g]` is channel `c`'s loss at
/// `grid[g]`; layer plans hold a single row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub grid: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_channel_ratios: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_ratio: Option<f64>,
    pub losses: Vec<Vec<f64>>,
}

impl ClipPlan {
    /// All ratios 1.0 (no clipping) for `n` channels.
    pub fn unclipped(n: usize) -> Self {
        Self {
            grid: vec![1.0],
            per_channel_ratios: Some(vec![1.0; n]),
            layer_ratio: None,
            losses: vec![vec![0.0]; n],
        }
    }

    /// Chosen ratios, one per loss row.
    pub fn ratios(&self) -> Vec<f64> {
        match (&self.per_channel_ratios, self.layer_ratio) {
            (Some(r), _) => r.clone(),
            (None, Some(r)) => vec![r],
            (None, None) => Vec::new(),
        }
    }

    /// Scale each per-channel scale by its ratio.
    pub fn apply_to_scales(&self, scales: &[f64]) -> Result<Vec<f64>> {
        let ratios = self
            .per_channel_ratios
            .as_ref()
            .ok_or_else(|| Error::invalid("layer clip plans carry no per-channel ratios"))?;
        if ratios.len() != scales.len() {
            return Err(Error::shape(format!("{} ratios for {} scales", ratios.len(), scales.len())));
        }
        Ok(scales.iter().zip(ratios).map(|(s, r)| s * r).collect())
    }

    pub fn validate(&self) -> Result<()> {
        check_grid(&self.grid)?;
        if self.per_channel_ratios.is_some() == self.layer_ratio.is_some() {
            return Err(Error::invalid("clip plan must hold per-channel ratios or a layer ratio"));
        }
        let ratios = self.ratios();
        if ratios.len() != self.losses.len() {
            return Err(Error::invalid("one loss row per chosen ratio"));
        }
        for (r, row) in ratios.iter().zip(&self.losses) {
            if row.len() != self.grid.len() {
                return Err(Error::invalid("loss row length differs from the grid"));
            }
            let g = self
                .grid
                .iter()
                .position(|x| x == r)
                .ok_or_else(|| Error::invalid(format!("ratio {r} is not on the grid")))?;
            if g != argmin(&self.grid, row) {
                return Err(Error::invalid(format!("ratio {r} does not minimize its loss row")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// Weight-side context for a channel search: the folded matrix's
/// per-output-channel weight scales and the split threshold in force.
#[derive(Debug, Clone, Copy)]
pub struct WeightContext<'a> {
    pub scales: &'a [f64],
    pub bits: u8,
    /// Scales above this are split into pieces before folding.
    pub threshold: Option<f64>,
}

/// The two loss terms for one candidate ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipTerms {
    /// `‖X̂_i(s) − X_i‖²` over the calibration samples.
    pub activation: f64,
    /// `‖Ŵ − W‖²` over the channel's folded weight rows.
    pub weight: f64,
}

impl ClipTerms {
    pub fn total(&self) -> f64 {
        self.activation + self.weight
    }
}

fn channel_scale(max_abs: f64, ratio: f64, bits: u8) -> f64 {
    if max_abs > 0.0 {
        ratio * max_abs / qmax(bits) as f64
    } else {
        SCALE_FLOOR
    }
}

/// Loss terms for channel samples `x` and weight row `w_row` at one ratio.
pub fn channel_clip_terms(x: &[f64], w_row: &[f64], ctx: &WeightContext, act_bits: u8, ratio: f64) -> Result<ClipTerms> {
    if ctx.scales.len() != w_row.len() {
        return Err(Error::shape(format!(
            "{} weight scales for a row of {}",
            ctx.scales.len(),
            w_row.len()
        )));
    }
    let max_abs = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let s = channel_scale(max_abs, ratio, act_bits);
    let qa = qmax(act_bits) as f64;
    let activation = x
        .iter()
        .map(|&v| {
            let e = s * round_even(v / s).clamp(-qa, qa) - v;
            e * e
        })
        .sum();
    let pieces = match ctx.threshold {
        Some(t) => split_scale(s, t),
        None => vec![s],
    };
    let qw = qmax(ctx.bits) as f64;
    let mut weight = 0.0;
    for p in pieces {
        for (&w, &ws) in w_row.iter().zip(ctx.scales) {
            let v = p * w;
            let e = ws * round_even(v / ws).clamp(-qw, qw) - v;
            weight += e * e;
        }
    }
    Ok(ClipTerms { activation, weight })
}

/// Best ratio for a single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelClip {
    pub ratio: f64,
    pub loss: f64,
    pub losses: Vec<f64>,
}

pub fn search_channel_clip(x: &[f64], w_row: &[f64], ctx: &WeightContext, act_bits: u8, grid: &[f64]) -> Result<ChannelClip> {
    check_grid(grid)?;
    let losses = grid
        .iter()
        .map(|&r| channel_clip_terms(x, w_row, ctx, act_bits, r).map(|t| t.total()))
        .collect::<Result<Vec<_>>>()?;
    let best = argmin(grid, &losses);
    Ok(ChannelClip {
        ratio: grid[best],
        loss: losses[best],
        losses,
    })
}

/// Per-channel search for every column of `x` (tokens × n) against the
/// matching row of `w` (n × j).
pub fn search_channel_clips(x: &Tensor, w: &Tensor, ctx: &WeightContext, act_bits: u8, grid: &[f64]) -> Result<ClipPlan> {
    check_grid(grid)?;
    let n = x.cols();
    if w.shape().len() != 2 || w.shape()[0] != n {
        return Err(Error::shape(format!("weight {:?} for {n} channels", w.shape())));
    }
    let data = x.reals()?;
    let rows = x.rows();
    let results = exec::map_range(n, |k| {
        let col: Vec<f64> = (0..rows).map(|t| data[t * n + k]).collect();
        search_channel_clip(&col, w.row(k)?, ctx, act_bits, grid)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(ClipPlan {
        grid: grid.to_vec(),
        per_channel_ratios: Some(results.iter().map(|c| c.ratio).collect()),
        layer_ratio: None,
        losses: results.into_iter().map(|c| c.losses).collect(),
    })
}

/// `‖Q_r(X)·W − X·W‖²` summed over samples, with per-token dynamic `Q_r`.
pub fn token_clip_loss(samples: &[Tensor], w: &Tensor, bits: u8, ratio: f64) -> Result<f64> {
    let mut loss = 0.0;
    for x in samples {
        let reference = matmul(x, w)?;
        let approx = matmul(&dequantize(&quantize_per_token_dynamic(x, bits, ratio)?)?, w)?;
        loss += approx.sub(&reference)?.sq_norm()?;
    }
    Ok(loss)
}

/// One uniform clip ratio for a per-token dynamic layer.
pub fn search_token_clip(samples: &[Tensor], w: &Tensor, bits: u8, grid: &[f64]) -> Result<ClipPlan> {
    check_grid(grid)?;
    if samples.is_empty() {
        return Err(Error::invalid("token clip search needs calibration samples"));
    }
    let losses = exec::map_range(grid.len(), |g| token_clip_loss(samples, w, bits, grid[g]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let best = argmin(grid, &losses);
    Ok(ClipPlan {
        grid: grid.to_vec(),
        per_channel_ratios: None,
        layer_ratio: Some(grid[best]),
        losses: vec![losses],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn unit_ctx(scales: &[f64]) -> WeightContext<'_> {
        WeightContext {
            scales,
            bits: 8,
            threshold: None,
        }
    }

    #[test]
    fn grid_shape() {
        let g = default_grid();
        assert_eq!(g.len(), 51);
        assert_eq!((g[0], g[50]), (0.5, 1.0));
        assert!(check_grid(&[]).is_err());
        assert!(check_grid(&[0.5]).is_err());
        assert!(check_grid(&[1.2, 1.0]).is_err());
    }

    #[test]
    fn chosen_loss_never_exceeds_unclipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ws = vec![0.05; 4];
        for _ in 0..20 {
            let x = gaussian(&mut rng, 200);
            let w = gaussian(&mut rng, 4);
            let c = search_channel_clip(&x, &w, &unit_ctx(&ws), 4, &default_grid()).unwrap();
            assert!(c.loss <= *c.losses.last().unwrap());
        }
    }

    #[test]
    fn lone_spike_gets_clipped() {
        // Clipping to r trades bulk round-off (∝ N·s²) against the spike's
        // clip error; with 8 bits the break-even bulk size is about 0.06·127²,
        // so 9999 Gaussian samples make clipping win clearly.
        let ws = vec![1.0; 2];
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = gaussian(&mut rng, 9999);
            x.push(50.0);
            let c = search_channel_clip(&x, &[0.0, 0.0], &unit_ctx(&ws), 8, &default_grid()).unwrap();
            assert!(c.ratio < 1.0 && c.ratio > 0.9, "seed {seed}: {}", c.ratio);
        }
    }

    #[test]
    fn singleton_grid() {
        let ws = [1.0];
        let c = search_channel_clip(&[1.0, -3.0], &[0.3], &unit_ctx(&ws), 4, &[1.0]).unwrap();
        assert_eq!(c.ratio, 1.0);
    }

    #[test]
    fn ties_prefer_the_larger_ratio() {
        // Zero samples and zero weights: every candidate costs nothing.
        let ws = [1.0];
        let c = search_channel_clip(&[0.0; 5], &[0.0], &unit_ctx(&ws), 4, &default_grid()).unwrap();
        assert_eq!(c.ratio, 1.0);
    }

    #[test]
    fn terms_match_hand_computation() {
        // maxabs 7 at b=4, r=0.5: s=0.5; x=[7, 0.3] → [3.5 (clamped), 0.5]
        let ws = [0.25];
        let ctx = WeightContext {
            scales: &ws,
            bits: 4,
            threshold: None,
        };
        let t = channel_clip_terms(&[7.0, 0.3], &[1.1], &ctx, 4, 0.5).unwrap();
        assert!((t.activation - (3.5f64.powi(2) + 0.2f64.powi(2))).abs() < 1e-12);
        // folded weight 0.5·1.1 = 0.55 → 2·0.25 = 0.5 (0.55/0.25 = 2.2 → 2)
        assert!((t.weight - 0.05f64.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn split_weight_term_sums_over_pieces() {
        let ws = [0.1];
        let split = WeightContext {
            scales: &ws,
            bits: 8,
            threshold: Some(0.6),
        };
        // maxabs 7 at b=4: s = 1 → pieces (0.4, 0.6)
        let t = channel_clip_terms(&[7.0], &[1.03], &split, 4, 1.0).unwrap();
        let e = |v: f64| {
            let q = 0.1 * (v / 0.1f64).round_ties_even();
            (q - v).powi(2)
        };
        assert!((t.weight - (e(0.4 * 1.03) + e(0.6 * 1.03))).abs() < 1e-15);
    }

    #[test]
    fn gaussian_layer_keeps_a_high_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::real(vec![64, 32], gaussian(&mut rng, 64 * 32)).unwrap();
        let w = Tensor::real(vec![32, 16], gaussian(&mut rng, 32 * 16)).unwrap();
        let plan = search_token_clip(&[x], &w, 8, &default_grid()).unwrap();
        assert!(plan.layer_ratio.unwrap() >= 0.9, "{:?}", plan.layer_ratio);
        plan.validate().unwrap();
        assert!(search_token_clip(&[], &w, 8, &default_grid()).is_err());
    }

    #[test]
    fn channel_plan_validates_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::real(vec![100, 8], gaussian(&mut rng, 800)).unwrap();
        let w = Tensor::real(vec![8, 4], gaussian(&mut rng, 32)).unwrap();
        let ws = vec![0.02; 4];
        let plan = search_channel_clips(&x, &w, &unit_ctx(&ws), 4, &default_grid()).unwrap();
        plan.validate().unwrap();
        assert_eq!(ClipPlan::from_json(&plan.to_json().unwrap()).unwrap(), plan);
        let again = search_channel_clips(&x, &w, &unit_ctx(&ws), 4, &default_grid()).unwrap();
        assert_eq!(plan, again);

        let mut bad = plan.clone();
        bad.per_channel_ratios.as_mut().unwrap()[0] = 0.777;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn apply_scales() {
        let mut p = ClipPlan::unclipped(2);
        p.per_channel_ratios = Some(vec![0.5, 1.0]);
        assert_eq!(p.apply_to_scales(&[2.0, 3.0]).unwrap(), vec![1.0, 3.0]);
        assert!(p.apply_to_scales(&[1.0]).is_err());
    }
}
