use crate::compensate::BlockAdapters;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::qsm::{fold_rows, folded_linear, folded_norm_forward, FoldedNorm};
use crate::quant::{
    dequantize, hadamard_rotate, quantize, quantize_per_token_dynamic, quantized_linear, Granularity, QuantScheme,
    QuantizedLinear, Side, WeightQuantizer, WeightScheme,
};
use crate::tensor::{matmul, normalize_rows, NormKind, NormParams, Tensor};

use super::block::{
    attention_backward, attention_forward, check_input, rms_backward, swiglu, swiglu_backward, BlockConfig, Layer,
};

/// A norm followed by a statically quantized linear layer.
#[derive(Debug, Clone, PartialEq)]
pub enum StaticSite {
    /// Per-channel scales migrated into the norm and the weight rows.
    Folded { norm: FoldedNorm, linear: QuantizedLinear },
    /// Per-tensor or per-token (per sequence position) scales applied by an
    /// explicit quantize step.
    Calibrated {
        norm: NormParams,
        granularity: Granularity,
        scales: Vec<f64>,
        linear: QuantizedLinear,
    },
    /// Unquantized; slot `i` reads channel `gather[i]` times `factors[i]`
    /// of the normalized (pre-gamma) input.
    Real {
        norm: NormParams,
        gather: Vec<usize>,
        factors: Vec<f64>,
        weight: Tensor,
    },
}

/// A linear layer without a norm in front.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearSite {
    /// Per-token dynamic activation quantization.
    PerToken {
        linear: QuantizedLinear,
        clip_ratio: f64,
        hadamard: bool,
    },
    /// Fixed per-tensor or per-position scales (baselines).
    Calibrated {
        granularity: Granularity,
        scales: Vec<f64>,
        linear: QuantizedLinear,
    },
    Real { weight: Tensor, hadamard: bool },
}

/// What a site saw and used, for the backward pass. `x_hat · w_hat` is the
/// real-valued product the site computed.
#[derive(Debug, Clone)]
pub(crate) struct SiteCache {
    input: Tensor,
    x_hat: Tensor,
    w_hat: Tensor,
    /// Static sites: (norm eps, source channel per slot, slot factor on the
    /// normalized input).
    norm_map: Option<(f64, Vec<usize>, Vec<f64>)>,
    hadamard: bool,
}

fn norm_eps_checked(norm: &NormParams) -> Result<f64> {
    if norm.kind != NormKind::RmsNorm {
        return Err(Error::invalid("backward pass supports RMSNorm only"));
    }
    Ok(norm.eps)
}

impl StaticSite {
    pub fn linear(&self) -> Option<&QuantizedLinear> {
        match self {
            StaticSite::Folded { linear, .. } | StaticSite::Calibrated { linear, .. } => Some(linear),
            StaticSite::Real { .. } => None,
        }
    }

    pub fn forward(&self, x: &Tensor, bits: u8) -> Result<Tensor> {
        Ok(self.forward_cached(x, bits, false)?.0)
    }

    fn forward_cached(&self, x: &Tensor, bits: u8, keep: bool) -> Result<(Tensor, Option<SiteCache>)> {
        match self {
            StaticSite::Folded { norm, linear } => {
                let xq = folded_norm_forward(x, norm, bits)?;
                let y = folded_linear(&xq, linear)?;
                if !keep {
                    return Ok((y, None));
                }
                let slot = &norm.scales;
                let w = linear.dequantized_weight()?;
                let j = w.cols();
                let w_hat = w
                    .reals()?
                    .iter()
                    .enumerate()
                    .map(|(idx, v)| v / slot[idx / j])
                    .collect();
                let factors = norm.folded_gamma.iter().zip(slot).map(|(g, s)| g * s).collect();
                let gather = (0..norm.slots()).map(|i| norm.source(i)).collect();
                Ok((
                    y,
                    Some(SiteCache {
                        input: x.clone(),
                        x_hat: dequantize(&xq)?,
                        w_hat: Tensor::real(w.shape().to_vec(), w_hat)?,
                        norm_map: Some((norm_eps_checked(&norm.base)?, gather, factors)),
                        hadamard: false,
                    }),
                ))
            }
            StaticSite::Calibrated {
                norm,
                granularity,
                scales,
                linear,
            } => {
                let normed = crate::tensor::norm_forward(x, norm)?;
                let scales = expand_scales(*granularity, scales, x)?;
                let xq = quantize(&normed, &scales, &QuantScheme::symmetric(bits, *granularity))?;
                let y = quantized_linear(&xq, linear)?;
                if !keep {
                    return Ok((y, None));
                }
                Ok((
                    y,
                    Some(SiteCache {
                        input: x.clone(),
                        x_hat: dequantize(&xq)?,
                        w_hat: linear.dequantized_weight()?,
                        norm_map: Some((norm_eps_checked(norm)?, (0..norm.dim()).collect(), norm.gamma.clone())),
                        hadamard: false,
                    }),
                ))
            }
            StaticSite::Real {
                norm,
                gather,
                factors,
                weight,
            } => {
                let normed = normalize_rows(x, norm.kind, norm.eps)?;
                let n = x.cols();
                let src = normed.reals()?;
                let mut xh = Vec::with_capacity(x.rows() * gather.len());
                for t in 0..x.rows() {
                    xh.extend(gather.iter().zip(factors).map(|(&g, f)| src[t * n + g] * f));
                }
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = gather.len();
                let x_hat = Tensor::real(shape, xh)?;
                let y = matmul(&x_hat, weight)?;
                let cache = keep
                    .then(|| -> Result<SiteCache> {
                        Ok(SiteCache {
                            input: x.clone(),
                            x_hat: x_hat.clone(),
                            w_hat: weight.clone(),
                            norm_map: Some((norm_eps_checked(norm)?, gather.clone(), factors.clone())),
                            hadamard: false,
                        })
                    })
                    .transpose()?;
                Ok((y, cache))
            }
        }
    }
}

/// Per-position static scales are tiled over the batch.
fn expand_scales(g: Granularity, scales: &[f64], x: &Tensor) -> Result<Vec<f64>> {
    match g {
        Granularity::PerTensor => Ok(scales.to_vec()),
        Granularity::PerToken => {
            let seq = x.shape()[x.shape().len() - 2];
            if scales.len() != seq {
                return Err(Error::shape(format!(
                    "{} per-position scales for sequence length {seq}",
                    scales.len()
                )));
            }
            Ok((0..x.rows()).map(|r| scales[r % seq]).collect())
        }
        other => Err(Error::invalid(format!("{other:?} is not a calibrated baseline granularity"))),
    }
}

impl LinearSite {
    pub fn linear(&self) -> Option<&QuantizedLinear> {
        match self {
            LinearSite::PerToken { linear, .. } | LinearSite::Calibrated { linear, .. } => Some(linear),
            LinearSite::Real { .. } => None,
        }
    }

    pub fn forward(&self, x: &Tensor, bits: u8) -> Result<Tensor> {
        Ok(self.forward_cached(x, bits, false)?.0)
    }

    fn forward_cached(&self, x: &Tensor, bits: u8, keep: bool) -> Result<(Tensor, Option<SiteCache>)> {
        let rotate = |x: &Tensor, on: bool| if on { hadamard_rotate(x, Side::Activation) } else { Ok(x.clone()) };
        match self {
            LinearSite::PerToken {
                linear,
                clip_ratio,
                hadamard,
            } => {
                let xq = quantize_per_token_dynamic(&rotate(x, *hadamard)?, bits, *clip_ratio)?;
                let y = quantized_linear(&xq, linear)?;
                let cache = keep
                    .then(|| -> Result<SiteCache> {
                        Ok(SiteCache {
                            input: x.clone(),
                            x_hat: dequantize(&xq)?,
                            w_hat: linear.dequantized_weight()?,
                            norm_map: None,
                            hadamard: *hadamard,
                        })
                    })
                    .transpose()?;
                Ok((y, cache))
            }
            LinearSite::Calibrated {
                granularity,
                scales,
                linear,
            } => {
                let scales = expand_scales(*granularity, scales, x)?;
                let xq = quantize(x, &scales, &QuantScheme::symmetric(bits, *granularity))?;
                let y = quantized_linear(&xq, linear)?;
                let cache = keep
                    .then(|| -> Result<SiteCache> {
                        Ok(SiteCache {
                            input: x.clone(),
                            x_hat: dequantize(&xq)?,
                            w_hat: linear.dequantized_weight()?,
                            norm_map: None,
                            hadamard: false,
                        })
                    })
                    .transpose()?;
                Ok((y, cache))
            }
            LinearSite::Real { weight, hadamard } => {
                let xr = rotate(x, *hadamard)?;
                let y = matmul(&xr, weight)?;
                let cache = keep.then(|| SiteCache {
                    input: x.clone(),
                    x_hat: xr,
                    w_hat: weight.clone(),
                    norm_map: None,
                    hadamard: *hadamard,
                });
                Ok((y, cache))
            }
        }
    }
}

/// Weight gradient `x̂ᵀ·dy` and input gradient of one site.
fn site_backward(cache: &SiteCache, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let rows = cache.x_hat.rows();
    let x2 = cache.x_hat.clone().reshape(vec![rows, cache.x_hat.cols()])?;
    let d2 = dy.clone().reshape(vec![rows, dy.cols()])?;
    let grad_w = matmul(&x2.transpose()?, &d2)?;
    let dx_hat = matmul(dy, &cache.w_hat.transpose()?)?;
    let dx = match &cache.norm_map {
        None if cache.hadamard => hadamard_rotate(&dx_hat, Side::Activation)?,
        None => dx_hat,
        Some((eps, gather, factors)) => {
            let n = cache.input.cols();
            let slots = gather.len();
            let src = dx_hat.reals()?;
            let mut dn = vec![0.0; rows * n];
            for t in 0..rows {
                for i in 0..slots {
                    dn[t * n + gather[i]] += src[t * slots + i] * factors[i];
                }
            }
            rms_backward(&cache.input, *eps, &Tensor::real(cache.input.shape().to_vec(), dn)?)?
        }
    };
    Ok((grad_w, dx))
}

/// A block whose four linear layers are quantized. Attention, SiLU and the
/// residual adds stay in reals.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub config: BlockConfig,
    pub act_bits: u8,
    pub qkv: StaticSite,
    pub out: LinearSite,
    pub gate_up: StaticSite,
    pub down: LinearSite,
}

/// Intermediates of a quantized forward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    sites: [SiteCache; 4],
    qkv_out: Tensor,
    probs: Vec<f64>,
    gate_up_out: Tensor,
}

impl QuantizedBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, false)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (y, cache) = self.run(x, true)?;
        Ok((y, cache.expect("cache requested")))
    }

    fn run(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<BlockCache>)> {
        check_input(x, &self.config)?;
        let b = self.act_bits;
        let (qkv, c0) = self.qkv.forward_cached(x, b, keep)?;
        let (attn, probs) = attention_forward(&qkv, &self.config)?;
        let (a, c1) = self.out.forward_cached(&attn, b, keep)?;
        let x2 = x.add(&a)?;
        let (gu, c2) = self.gate_up.forward_cached(&x2, b, keep)?;
        let (d, c3) = self.down.forward_cached(&swiglu(&gu)?, b, keep)?;
        let y = x2.add(&d)?;
        let cache = match (c0, c1, c2, c3) {
            (Some(c0), Some(c1), Some(c2), Some(c3)) => Some(BlockCache {
                sites: [c0, c1, c2, c3],
                qkv_out: qkv,
                probs,
                gate_up_out: gu,
            }),
            _ => None,
        };
        Ok((y, cache))
    }

    /// Gradients of `⟨dy, y⟩` with respect to each layer's effective weight
    /// (in the basis of its dequantized input), using straight-through
    /// quantizers. Indexed like [`Layer::ALL`].
    pub fn backward(&self, cache: &BlockCache, dy: &Tensor) -> Result<[Tensor; 4]> {
        let (g_down, d_mlp) = site_backward(&cache.sites[3], dy)?;
        let d_gu = swiglu_backward(&cache.gate_up_out, &d_mlp)?;
        let (g_gu, d_x2_norm) = site_backward(&cache.sites[2], &d_gu)?;
        let d_x2 = dy.add(&d_x2_norm)?;
        let (g_out, d_attn) = site_backward(&cache.sites[1], &d_x2)?;
        let d_qkv = attention_backward(&cache.qkv_out, &cache.probs, &d_attn, &self.config)?;
        let (g_qkv, _) = site_backward(&cache.sites[0], &d_qkv)?;
        Ok([g_qkv, g_out, g_gu, g_down])
    }

    /// One site run in isolation on its own input (norm input for static
    /// layers).
    pub fn layer_forward(&self, layer: Layer, input: &Tensor) -> Result<Tensor> {
        match layer {
            Layer::Qkv => self.qkv.forward(input, self.act_bits),
            Layer::Out => self.out.forward(input, self.act_bits),
            Layer::GateUp => self.gate_up.forward(input, self.act_bits),
            Layer::Down => self.down.forward(input, self.act_bits),
        }
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) -> Result<()> {
        let cfg = &self.config;
        c.insert_vec(
            format!("{prefix}.meta"),
            &[self.act_bits as f64, cfg.hidden as f64, cfg.heads as f64, cfg.ffn as f64],
        )?;
        for (layer, site) in [(Layer::Qkv, &self.qkv), (Layer::GateUp, &self.gate_up)] {
            let p = format!("{prefix}.{}", layer.name());
            match site {
                StaticSite::Folded { norm, linear } => {
                    norm.write_into(c, &format!("{p}.norm"))?;
                    linear.write_into(c, &p)?;
                }
                StaticSite::Calibrated {
                    norm,
                    granularity,
                    scales,
                    linear,
                } => {
                    c.insert_vec(format!("{p}.norm.gamma"), &norm.gamma)?;
                    c.insert_scalar(format!("{p}.norm.eps"), norm.eps);
                    c.insert_scalar(format!("{p}.granularity"), granularity_code(*granularity)?);
                    c.insert_vec(format!("{p}.act_scales"), scales)?;
                    linear.write_into(c, &p)?;
                }
                StaticSite::Real { .. } => return Err(Error::invalid("unquantized sites are not exported")),
            }
        }
        for (layer, site) in [(Layer::Out, &self.out), (Layer::Down, &self.down)] {
            let p = format!("{prefix}.{}", layer.name());
            match site {
                LinearSite::PerToken {
                    linear,
                    clip_ratio,
                    hadamard,
                } => {
                    linear.write_into(c, &p)?;
                    c.insert_scalar(format!("{p}.clip_ratio"), *clip_ratio);
                    c.insert_scalar(format!("{p}.hadamard"), if *hadamard { 1.0 } else { 0.0 });
                }
                LinearSite::Calibrated {
                    granularity,
                    scales,
                    linear,
                } => {
                    linear.write_into(c, &p)?;
                    c.insert_scalar(format!("{p}.granularity"), granularity_code(*granularity)?);
                    c.insert_vec(format!("{p}.act_scales"), scales)?;
                }
                LinearSite::Real { .. } => return Err(Error::invalid("unquantized sites are not exported")),
            }
        }
        Ok(())
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let meta = c.get_vec(&format!("{prefix}.meta"))?;
        if meta.len() != 4 {
            return Err(Error::Format(format!("{prefix}.meta must hold four entries")));
        }
        let config = BlockConfig {
            hidden: meta[1] as usize,
            heads: meta[2] as usize,
            ffn: meta[3] as usize,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let read_static = |layer: Layer| -> Result<StaticSite> {
            let p = format!("{prefix}.{}", layer.name());
            let linear = QuantizedLinear::read_from(c, &p)?;
            if c.contains(&format!("{p}.granularity")) {
                Ok(StaticSite::Calibrated {
                    norm: NormParams::rms(c.get_vec(&format!("{p}.norm.gamma"))?)
                        .with_eps(c.get_scalar(&format!("{p}.norm.eps"))?),
                    granularity: granularity_from_code(c.get_scalar(&format!("{p}.granularity"))?)?,
                    scales: c.get_vec(&format!("{p}.act_scales"))?,
                    linear,
                })
            } else {
                Ok(StaticSite::Folded {
                    norm: FoldedNorm::read_from(c, &format!("{p}.norm"))?,
                    linear,
                })
            }
        };
        let read_dynamic = |layer: Layer| -> Result<LinearSite> {
            let p = format!("{prefix}.{}", layer.name());
            if c.contains(&format!("{p}.granularity")) {
                return Ok(LinearSite::Calibrated {
                    granularity: granularity_from_code(c.get_scalar(&format!("{p}.granularity"))?)?,
                    scales: c.get_vec(&format!("{p}.act_scales"))?,
                    linear: QuantizedLinear::read_from(c, &p)?,
                });
            }
            Ok(LinearSite::PerToken {
                linear: QuantizedLinear::read_from(c, &p)?,
                clip_ratio: c.get_scalar(&format!("{p}.clip_ratio"))?,
                hadamard: c.get_scalar(&format!("{p}.hadamard"))? != 0.0,
            })
        };
        Ok(Self {
            config,
            act_bits: meta[0] as u8,
            qkv: read_static(Layer::Qkv)?,
            out: read_dynamic(Layer::Out)?,
            gate_up: read_static(Layer::GateUp)?,
            down: read_dynamic(Layer::Down)?,
        })
    }
}

fn granularity_code(g: Granularity) -> Result<f64> {
    match g {
        Granularity::PerTensor => Ok(0.0),
        Granularity::PerToken => Ok(1.0),
        other => Err(Error::invalid(format!("{other:?} baseline cannot be exported"))),
    }
}

fn granularity_from_code(v: f64) -> Result<Granularity> {
    match v as i64 {
        0 => Ok(Granularity::PerTensor),
        1 => Ok(Granularity::PerToken),
        _ => Err(Error::Format(format!("unknown granularity code {v}"))),
    }
}

/// Folded norm plus the unscaled reconstructed weight rows of a static
/// layer; the weight is re-quantized from `rows + A·B` on every
/// materialization.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticRecipe {
    pub norm: FoldedNorm,
    /// `W[gather_i]` per slot, `slots × n_out`.
    pub rows: Tensor,
}

/// Weight rows (pre-rotated when `hadamard`) of a dynamic layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicRecipe {
    pub rows: Tensor,
    pub clip_ratio: f64,
    pub hadamard: bool,
}

/// Everything needed to build a [`QuantizedBlock`] for a given set of
/// low-rank adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRecipe {
    pub config: BlockConfig,
    pub act_bits: u8,
    pub weight: WeightScheme,
    pub qkv: StaticRecipe,
    pub out: DynamicRecipe,
    pub gate_up: StaticRecipe,
    pub down: DynamicRecipe,
    /// When false every quantizer is the identity (gradient checks).
    pub quantize: bool,
}

impl BlockRecipe {
    /// Unscaled weight rows the adapter of `layer` is added to.
    pub fn rows(&self, layer: Layer) -> &Tensor {
        match layer {
            Layer::Qkv => &self.qkv.rows,
            Layer::Out => &self.out.rows,
            Layer::GateUp => &self.gate_up.rows,
            Layer::Down => &self.down.rows,
        }
    }

    fn adapted(&self, layer: Layer, adapters: &BlockAdapters) -> Result<Tensor> {
        let rows = self.rows(layer);
        match adapters.get(layer) {
            Some(pair) => pair.apply(rows),
            None => Ok(rows.clone()),
        }
    }

    fn static_site(&self, r: &StaticRecipe, rows: Tensor) -> Result<StaticSite> {
        if !self.quantize {
            let slots = r.norm.slots();
            return Ok(StaticSite::Real {
                norm: r.norm.base.clone(),
                gather: (0..slots).map(|i| r.norm.source(i)).collect(),
                factors: r.norm.folded_gamma.iter().zip(&r.norm.scales).map(|(g, s)| g * s).collect(),
                weight: rows,
            });
        }
        let mut linear = self.weight.quantize(&fold_rows(&rows, &r.norm.scales)?)?;
        linear.folded_row_scales = Some(r.norm.scales.clone());
        Ok(StaticSite::Folded {
            norm: r.norm.clone(),
            linear,
        })
    }

    fn dynamic_site(&self, r: &DynamicRecipe, rows: Tensor) -> Result<LinearSite> {
        if !self.quantize {
            return Ok(LinearSite::Real {
                weight: rows,
                hadamard: r.hadamard,
            });
        }
        Ok(LinearSite::PerToken {
            linear: self.weight.quantize(&rows)?,
            clip_ratio: r.clip_ratio,
            hadamard: r.hadamard,
        })
    }

    /// Quantize `rows + A·B` for every layer.
    pub fn materialize(&self, adapters: &BlockAdapters) -> Result<QuantizedBlock> {
        Ok(QuantizedBlock {
            config: self.config,
            act_bits: self.act_bits,
            qkv: self.static_site(&self.qkv, self.adapted(Layer::Qkv, adapters)?)?,
            out: self.dynamic_site(&self.out, self.adapted(Layer::Out, adapters)?)?,
            gate_up: self.static_site(&self.gate_up, self.adapted(Layer::GateUp, adapters)?)?,
            down: self.dynamic_site(&self.down, self.adapted(Layer::Down, adapters)?)?,
        })
    }
}
