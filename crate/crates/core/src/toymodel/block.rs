use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{matmul, rmsnorm, NormParams, Tensor};

/// The four linear layers of a block, in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Qkv,
    Out,
    GateUp,
    Down,
}

impl Layer {
    pub const ALL: [Layer; 4] = [Layer::Qkv, Layer::Out, Layer::GateUp, Layer::Down];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Qkv => "qkv",
            Layer::Out => "out",
            Layer::GateUp => "gate_up",
            Layer::Down => "down",
        }
    }

    /// Layers fed by a norm and quantized with static per-channel scales.
    pub fn is_static(self) -> bool {
        matches!(self, Layer::Qkv | Layer::GateUp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ffn")]
    pub ffn: usize,
}

fn default_hidden() -> usize {
    64
}

fn default_heads() -> usize {
    4
}

fn default_ffn() -> usize {
    128
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            heads: default_heads(),
            ffn: default_ffn(),
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.hidden.is_power_of_two() || self.hidden < 2 {
            return Err(Error::Config(format!("hidden size {} must be a power of two", self.hidden)));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide hidden size {}", self.heads, self.hidden)));
        }
        if self.ffn == 0 {
            return Err(Error::Config("ffn size must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// `(input, output)` width of a layer.
    pub fn dims(&self, layer: Layer) -> (usize, usize) {
        let (n, f) = (self.hidden, self.ffn);
        match layer {
            Layer::Qkv => (n, 3 * n),
            Layer::Out => (n, n),
            Layer::GateUp => (n, 2 * f),
            Layer::Down => (f, n),
        }
    }
}

/// Pre-norm attention + gated MLP block with real weights:
/// `x2 = x + Attn(RMSNorm₁(x))·W_out`, `y = x2 + (SiLU(g) ⊙ u)·W_down` where
/// `[g | u] = RMSNorm₂(x2)·W_gate_up`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlock {
    pub config: BlockConfig,
    pub norm1: NormParams,
    pub w_qkv: Tensor,
    pub w_out: Tensor,
    pub norm2: NormParams,
    pub w_gate_up: Tensor,
    pub w_down: Tensor,
}

/// Every intermediate of an fp forward pass.
#[derive(Debug, Clone)]
pub struct FpTrace {
    pub x: Tensor,
    /// Input to `qkv`.
    pub h1: Tensor,
    pub qkv: Tensor,
    /// Input to `out`.
    pub attn: Tensor,
    pub x2: Tensor,
    /// Input to `gate_up`.
    pub h2: Tensor,
    pub gate_up: Tensor,
    /// Input to `down`.
    pub mlp: Tensor,
    pub y: Tensor,
}

impl FpTrace {
    /// Activation entering `layer`.
    pub fn layer_input(&self, layer: Layer) -> &Tensor {
        match layer {
            Layer::Qkv => &self.h1,
            Layer::Out => &self.attn,
            Layer::GateUp => &self.h2,
            Layer::Down => &self.mlp,
        }
    }

    /// Input of the site that ends in `layer` (the norm input for static
    /// layers).
    pub fn site_input(&self, layer: Layer) -> &Tensor {
        match layer {
            Layer::Qkv => &self.x,
            Layer::Out => &self.attn,
            Layer::GateUp => &self.x2,
            Layer::Down => &self.mlp,
        }
    }
}

impl ToyBlock {
    /// Unit norms and `N(0, 1/fan_in)` weights.
    pub fn random(config: BlockConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = |layer: Layer| -> Result<Tensor> {
            let (i, o) = config.dims(layer);
            let dist = Normal::new(0.0, 1.0 / (i as f64).sqrt()).expect("positive std");
            Tensor::real(vec![i, o], (0..i * o).map(|_| dist.sample(&mut rng)).collect())
        };
        Ok(Self {
            config,
            norm1: NormParams::rms(vec![1.0; config.hidden]),
            w_qkv: weight(Layer::Qkv)?,
            w_out: weight(Layer::Out)?,
            norm2: NormParams::rms(vec![1.0; config.hidden]),
            w_gate_up: weight(Layer::GateUp)?,
            w_down: weight(Layer::Down)?,
        })
    }

    pub fn weight(&self, layer: Layer) -> &Tensor {
        match layer {
            Layer::Qkv => &self.w_qkv,
            Layer::Out => &self.w_out,
            Layer::GateUp => &self.w_gate_up,
            Layer::Down => &self.w_down,
        }
    }

    /// Norm feeding a static layer.
    pub fn norm(&self, layer: Layer) -> Option<&NormParams> {
        match layer {
            Layer::Qkv => Some(&self.norm1),
            Layer::GateUp => Some(&self.norm2),
            _ => None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x)?.y)
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<FpTrace> {
        check_input(x, &self.config)?;
        let h1 = rmsnorm(x, &self.norm1)?;
        let qkv = matmul(&h1, &self.w_qkv)?;
        let (attn, _) = attention_forward(&qkv, &self.config)?;
        let x2 = x.add(&matmul(&attn, &self.w_out)?)?;
        let h2 = rmsnorm(&x2, &self.norm2)?;
        let gate_up = matmul(&h2, &self.w_gate_up)?;
        let mlp = swiglu(&gate_up)?;
        let y = x2.add(&matmul(&mlp, &self.w_down)?)?;
        Ok(FpTrace {
            x: x.clone(),
            h1,
            qkv,
            attn,
            x2,
            h2,
            gate_up,
            mlp,
            y,
        })
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) -> Result<()> {
        c.insert_vec(format!("{prefix}.config"), &[self.config.hidden as f64, self.config.heads as f64, self.config.ffn as f64])?;
        c.insert_vec(format!("{prefix}.norm1.gamma"), &self.norm1.gamma)?;
        c.insert_vec(format!("{prefix}.norm2.gamma"), &self.norm2.gamma)?;
        c.insert_scalar(format!("{prefix}.norm.eps"), self.norm1.eps);
        for layer in Layer::ALL {
            c.insert(format!("{prefix}.{}.weight", layer.name()), self.weight(layer).clone());
        }
        Ok(())
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let cfg = c.get_vec(&format!("{prefix}.config"))?;
        if cfg.len() != 3 {
            return Err(Error::Format(format!("{prefix}.config must hold three entries")));
        }
        let config = BlockConfig {
            hidden: cfg[0] as usize,
            heads: cfg[1] as usize,
            ffn: cfg[2] as usize,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let eps = c.get_scalar(&format!("{prefix}.norm.eps"))?;
        let w = |layer: Layer| -> Result<Tensor> {
            let t = c.get(&format!("{prefix}.{}.weight", layer.name()))?.clone();
            let (i, o) = config.dims(layer);
            if t.shape() != [i, o] {
                return Err(Error::Format(format!("{prefix}.{} has shape {:?}", layer.name(), t.shape())));
            }
            Ok(t)
        };
        Ok(Self {
            config,
            norm1: NormParams::rms(c.get_vec(&format!("{prefix}.norm1.gamma"))?).with_eps(eps),
            w_qkv: w(Layer::Qkv)?,
            w_out: w(Layer::Out)?,
            norm2: NormParams::rms(c.get_vec(&format!("{prefix}.norm2.gamma"))?).with_eps(eps),
            w_gate_up: w(Layer::GateUp)?,
            w_down: w(Layer::Down)?,
        })
    }
}

pub(crate) fn check_input(x: &Tensor, cfg: &BlockConfig) -> Result<()> {
    if x.shape().len() < 2 || x.cols() != cfg.hidden {
        return Err(Error::shape(format!(
            "block input {:?} must be [.., seq, {}]",
            x.shape(),
            cfg.hidden
        )));
    }
    Ok(())
}

fn seq_len(t: &Tensor) -> usize {
    let s = t.shape();
    s[s.len() - 2]
}

/// Causal multi-head attention over `qkv` laid out as `[Q | K | V]` along the
/// last axis. Returns the concatenated head outputs and the attention
/// probabilities (`[batch, head, query, key]`, flattened).
pub(crate) fn attention_forward(qkv: &Tensor, cfg: &BlockConfig) -> Result<(Tensor, Vec<f64>)> {
    let n = cfg.hidden;
    if qkv.cols() != 3 * n {
        return Err(Error::shape(format!("qkv width {} != 3·{n}", qkv.cols())));
    }
    let seq = seq_len(qkv);
    let batches = qkv.rows() / seq;
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let data = qkv.reals()?;
    let per_batch = exec::map_range(batches, |b| {
        let base = b * seq * 3 * n;
        let at = |t: usize, col: usize| data[base + t * 3 * n + col];
        let mut out = vec![0.0; seq * n];
        let mut probs = vec![0.0; h * seq * seq];
        for head in 0..h {
            let (qo, ko, vo) = (head * dh, n + head * dh, 2 * n + head * dh);
            for i in 0..seq {
                let p = &mut probs[(head * seq + i) * seq..(head * seq + i + 1) * seq];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate().take(i + 1) {
                    let s: f64 = (0..dh).map(|d| at(i, qo + d) * at(j, ko + d)).sum::<f64>() * scale;
                    *pj = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for pj in p.iter_mut().take(i + 1) {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for pj in p.iter_mut().take(i + 1) {
                    *pj /= z;
                }
                for d in 0..dh {
                    out[i * n + head * dh + d] = (0..=i).map(|j| p[j] * at(j, vo + d)).sum();
                }
            }
        }
        (out, probs)
    });
    let mut out = Vec::with_capacity(qkv.rows() * n);
    let mut probs = Vec::with_capacity(batches * h * seq * seq);
    for (o, p) in per_batch {
        out.extend(o);
        probs.extend(p);
    }
    let mut shape = qkv.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok((Tensor::real(shape, out)?, probs))
}

/// Gradient of [`attention_forward`] with respect to `qkv`.
pub(crate) fn attention_backward(qkv: &Tensor, probs: &[f64], d_out: &Tensor, cfg: &BlockConfig) -> Result<Tensor> {
    let n = cfg.hidden;
    let seq = seq_len(qkv);
    let batches = qkv.rows() / seq;
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let data = qkv.reals()?;
    let dout = d_out.reals()?;
    let per_batch = exec::map_range(batches, |b| {
        let base = b * seq * 3 * n;
        let at = |t: usize, col: usize| data[base + t * 3 * n + col];
        let go = |t: usize, col: usize| dout[b * seq * n + t * n + col];
        let mut d = vec![0.0; seq * 3 * n];
        for head in 0..h {
            let (qo, ko, vo) = (head * dh, n + head * dh, 2 * n + head * dh);
            let pb = &probs[((b * h + head) * seq) * seq..((b * h + head + 1) * seq) * seq];
            for i in 0..seq {
                let p = &pb[i * seq..(i + 1) * seq];
                // dP_ij = dO_i · V_j, dS = P ⊙ (dP - Σ_j P_ij dP_ij)
                let dp: Vec<f64> = (0..=i).map(|j| (0..dh).map(|e| go(i, head * dh + e) * at(j, vo + e)).sum()).collect();
                let dot: f64 = (0..=i).map(|j| p[j] * dp[j]).sum();
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    for e in 0..dh {
                        d[i * 3 * n + qo + e] += ds * at(j, ko + e);
                        d[j * 3 * n + ko + e] += ds * at(i, qo + e);
                        d[j * 3 * n + vo + e] += p[j] * go(i, head * dh + e);
                    }
                }
            }
        }
        d
    });
    Tensor::real(qkv.shape().to_vec(), per_batch.concat())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `SiLU(g) ⊙ u` where `[g | u]` splits the last axis in half.
pub(crate) fn swiglu(gate_up: &Tensor) -> Result<Tensor> {
    let f = gate_up.cols() / 2;
    let src = gate_up.reals()?;
    let mut out = vec![0.0; gate_up.rows() * f];
    exec::for_each_chunk_mut(&mut out, f, |t, row| {
        let r = &src[t * 2 * f..(t + 1) * 2 * f];
        for (k, o) in row.iter_mut().enumerate() {
            let g = r[k];
            *o = g * sigmoid(g) * r[f + k];
        }
    });
    let mut shape = gate_up.shape().to_vec();
    *shape.last_mut().unwrap() = f;
    Tensor::real(shape, out)
}

pub(crate) fn swiglu_backward(gate_up: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    let f = gate_up.cols() / 2;
    let src = gate_up.reals()?;
    let dy = d_out.reals()?;
    let mut out = vec![0.0; gate_up.len()];
    exec::for_each_chunk_mut(&mut out, 2 * f, |t, row| {
        let r = &src[t * 2 * f..(t + 1) * 2 * f];
        for k in 0..f {
            let (g, u, d) = (r[k], r[f + k], dy[t * f + k]);
            let sg = sigmoid(g);
            row[k] = d * u * sg * (1.0 + g * (1.0 - sg));
            row[f + k] = d * g * sg;
        }
    });
    Tensor::real(gate_up.shape().to_vec(), out)
}

/// Gradient of `y = x / sqrt(mean(x²) + eps)` (no gamma) with respect to `x`.
pub(crate) fn rms_backward(x: &Tensor, eps: f64, dy: &Tensor) -> Result<Tensor> {
    let n = x.cols();
    let src = x.reals()?;
    let g = dy.reals()?;
    let mut out = vec![0.0; x.len()];
    exec::for_each_chunk_mut(&mut out, n, |t, row| {
        let xr = &src[t * n..(t + 1) * n];
        let gr = &g[t * n..(t + 1) * n];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let r = (ms + eps).sqrt();
        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for k in 0..n {
            row[k] = gr[k] / r - xr[k] * dot / (n as f64 * r * r * r);
        }
    });
    Tensor::real(x.shape().to_vec(), out)
}
