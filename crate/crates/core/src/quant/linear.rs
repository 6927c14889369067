use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::exec;
use crate::quant::calib::affine_params;
use crate::quant::{Granularity, QuantizedTensor, SCALE_FLOOR};
use crate::tensor::{matmul, qmax, qmin_asym, round_even, DType, Tensor};

/// Integer weight matrix (`n_in × n_out`) with per-output-channel (or
/// per-group) dequantization scales.
///
/// When the layer absorbed per-channel activation scales, `folded_row_scales`
/// records them; the integers already encode `s_k · W_kj`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    pub w_int: Tensor,
    /// `n_out` scales, or `groups × n_out` (group-major) when grouped.
    pub w_scales: Vec<f64>,
    pub w_zero_points: Option<Vec<i32>>,
    pub group_size: Option<usize>,
    pub folded_row_scales: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

impl QuantizedLinear {
    pub fn in_dim(&self) -> usize {
        self.w_int.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w_int.shape()[1]
    }

    pub fn bits(&self) -> u8 {
        match self.w_int.dtype() {
            DType::Int(b) => b,
            DType::Real => unreachable!("w_int is always integer"),
        }
    }

    #[inline]
    fn param_index(&self, row: usize, col: usize) -> usize {
        match self.group_size {
            Some(g) => (row / g) * self.out_dim() + col,
            None => col,
        }
    }

    /// Real weight the integers stand for (in folded form when folded).
    pub fn dequantized_weight(&self) -> Result<Tensor> {
        let (n, j) = (self.in_dim(), self.out_dim());
        let ints = self.w_int.ints()?;
        let mut out = vec![0.0; n * j];
        for r in 0..n {
            for c in 0..j {
                let p = self.param_index(r, c);
                let z = self.w_zero_points.as_ref().map_or(0, |z| z[p]);
                out[r * j + c] = (ints[r * j + c] as f64 - z as f64) * self.w_scales[p];
            }
        }
        Tensor::real(vec![n, j], out)
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != self.out_dim() {
            return Err(Error::shape("bias length differs from output dim"));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) -> Result<()> {
        c.insert(format!("{prefix}.w_int"), self.w_int.clone());
        c.insert_vec(format!("{prefix}.w_scales"), &self.w_scales)?;
        if let Some(z) = &self.w_zero_points {
            c.insert(format!("{prefix}.zp"), Tensor::int(vec![z.len()], z.clone(), 32)?);
        }
        if let Some(g) = self.group_size {
            c.insert_scalar(format!("{prefix}.group_size"), g as f64);
        }
        if let Some(f) = &self.folded_row_scales {
            c.insert_vec(format!("{prefix}.scales"), f)?;
        }
        if let Some(b) = &self.bias {
            c.insert_vec(format!("{prefix}.bias"), b)?;
        }
        Ok(())
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let opt_vec = |name: &str| -> Result<Option<Vec<f64>>> {
            let key = format!("{prefix}.{name}");
            c.contains(&key).then(|| c.get_vec(&key)).transpose()
        };
        let zp_key = format!("{prefix}.zp");
        let gs_key = format!("{prefix}.group_size");
        let ql = Self {
            w_int: c.get(&format!("{prefix}.w_int"))?.clone(),
            w_scales: c.get_vec(&format!("{prefix}.w_scales"))?,
            w_zero_points: c.contains(&zp_key).then(|| c.get(&zp_key).and_then(|t| t.ints().map(<[i32]>::to_vec))).transpose()?,
            group_size: c.contains(&gs_key).then(|| c.get_scalar(&gs_key).map(|g| g as usize)).transpose()?,
            folded_row_scales: opt_vec("scales")?,
            bias: opt_vec("bias")?,
        };
        if ql.w_int.shape().len() != 2 || ql.w_int.ints().is_err() {
            return Err(Error::Format(format!("{prefix}.w_int must be a 2-D integer tensor")));
        }
        Ok(ql)
    }
}

/// Weight quantization recipe. The default backend is per-channel
/// round-to-nearest; other backends plug in through [`WeightQuantizer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightScheme {
    pub bits: u8,
    #[serde(default = "default_true")]
    pub symmetric: bool,
    /// Rows per group; `None` means one scale per output channel.
    #[serde(default)]
    pub group: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl WeightScheme {
    pub fn per_channel(bits: u8) -> Self {
        Self {
            bits,
            symmetric: true,
            group: None,
        }
    }

    pub fn granularity(&self) -> Granularity {
        self.group.map_or(Granularity::PerChannel, Granularity::PerGroup)
    }
}

/// Turns a real `n_in × n_out` weight into a [`QuantizedLinear`].
pub trait WeightQuantizer {
    fn quantize(&self, w: &Tensor) -> Result<QuantizedLinear>;
}

impl WeightQuantizer for WeightScheme {
    fn quantize(&self, w: &Tensor) -> Result<QuantizedLinear> {
        quantize_weights(w, self)
    }
}

/// Round-to-nearest weight quantization along the output dimension.
pub fn quantize_weights(w: &Tensor, scheme: &WeightScheme) -> Result<QuantizedLinear> {
    if w.shape().len() != 2 {
        return Err(Error::shape("weights must be 2-D"));
    }
    if !crate::tensor::is_supported_bits(scheme.bits) {
        return Err(Error::invalid(format!("unsupported weight bit-width {}", scheme.bits)));
    }
    let (n, j) = (w.shape()[0], w.shape()[1]);
    let g = scheme.group.unwrap_or(n);
    if g == 0 || n % g != 0 {
        return Err(Error::invalid(format!("group size {g} does not divide {n}")));
    }
    let groups = n / g;
    let data = w.reals()?;
    let mut scales = vec![0.0; groups * j];
    let mut zps = vec![0i32; groups * j];
    for gi in 0..groups {
        for c in 0..j {
            let col = (gi * g..(gi + 1) * g).map(|r| data[r * j + c]);
            let p = gi * j + c;
            if scheme.symmetric {
                let m = col.fold(0.0f64, |a, v| a.max(v.abs()));
                scales[p] = if m > 0.0 { m / qmax(scheme.bits) as f64 } else { SCALE_FLOOR };
            } else {
                let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                (scales[p], zps[p]) = affine_params(lo, hi, scheme.bits);
            }
        }
    }
    let (lo, hi) = if scheme.symmetric {
        (-qmax(scheme.bits) as f64, qmax(scheme.bits) as f64)
    } else {
        (qmin_asym(scheme.bits) as f64, qmax(scheme.bits) as f64)
    };
    let ints = data
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let p = (idx / j / g) * j + idx % j;
            (round_even(v / scales[p]) + zps[p] as f64).clamp(lo, hi) as i32
        })
        .collect();
    Ok(QuantizedLinear {
        w_int: Tensor::int(vec![n, j], ints, scheme.bits)?,
        w_scales: scales,
        w_zero_points: (!scheme.symmetric).then_some(zps),
        group_size: scheme.group,
        folded_row_scales: None,
        bias: None,
    })
}

/// Exact integer accumulation of `x[:, rows] · w[rows, :]` in 128-bit
/// integers; used where 32-bit accumulators cannot hold the sums.
fn accumulate_wide(x: &[i32], w: &[i32], m: usize, k: usize, n: usize, rows: std::ops::Range<usize>) -> Vec<i128> {
    let mut out = vec![0i128; m * n];
    exec::for_each_chunk_mut(&mut out, n, |i, acc| {
        for p in rows.clone() {
            let xv = x[i * k + p] as i128;
            if xv == 0 {
                continue;
            }
            for (slot, &wv) in acc.iter_mut().zip(&w[p * n..(p + 1) * n]) {
                *slot += xv * wv as i128;
            }
        }
    });
    out
}

/// Integer products `X_int · W_int` as exact `f64`s (converted once, after
/// accumulation), restricted to input rows `rows`.
pub(crate) fn integer_product(x: &Tensor, w: &QuantizedLinear, rows: std::ops::Range<usize>) -> Result<Vec<f64>> {
    let (m, k, n) = (x.rows(), w.in_dim(), w.out_dim());
    let narrow = matches!(x.dtype(), DType::Int(b) if b <= 8) && w.bits() <= 8;
    if narrow && rows == (0..k) {
        let x2 = x.clone().reshape(vec![m, k])?;
        let acc = matmul(&x2, &w.w_int)?;
        return Ok(acc.ints()?.iter().map(|&v| v as f64).collect());
    }
    Ok(accumulate_wide(x.ints()?, w.w_int.ints()?, m, k, n, rows)
        .into_iter()
        .map(|v| v as f64)
        .collect())
}

/// Per-row integer sums of `x` over `rows`, for zero-point correction.
fn row_sums(x: &[i32], m: usize, k: usize, rows: std::ops::Range<usize>) -> Vec<i64> {
    (0..m)
        .map(|i| rows.clone().map(|p| x[i * k + p] as i64).sum())
        .collect()
}

/// `Σ_groups s_W · (X_int · W_int - zp · rowsum)`, scaled per row by
/// `row_scale(i)`. With one group and no zero-point this is exactly
/// `(X_int · W_int) · s_X · s_W`.
pub(crate) fn integer_linear(
    x_ints: &Tensor,
    w: &QuantizedLinear,
    row_scale: impl Fn(usize) -> f64,
) -> Result<Tensor> {
    let (m, k, n) = (x_ints.rows(), w.in_dim(), w.out_dim());
    if x_ints.cols() != k {
        return Err(Error::shape(format!(
            "activation last dim {} vs weight in dim {k}",
            x_ints.cols()
        )));
    }
    let g = w.group_size.unwrap_or(k);
    let mut out = vec![0.0; m * n];
    for gi in 0..k / g {
        let rows = gi * g..(gi + 1) * g;
        let acc = integer_product(x_ints, w, rows.clone())?;
        let sums = w
            .w_zero_points
            .as_ref()
            .map(|_| row_sums(x_ints.ints().unwrap_or(&[]), m, k, rows.clone()));
        for i in 0..m {
            let sx = row_scale(i);
            for c in 0..n {
                let p = gi * n + c;
                let mut v = acc[i * n + c];
                if let (Some(z), Some(s)) = (&w.w_zero_points, &sums) {
                    v -= z[p] as f64 * s[i] as f64;
                }
                out[i * n + c] += v * sx * w.w_scales[p];
            }
        }
    }
    if let Some(b) = &w.bias {
        for i in 0..m {
            for c in 0..n {
                out[i * n + c] += b[c];
            }
        }
    }
    let mut shape = x_ints.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::real(shape, out)
}

/// Integer activations whose scales were migrated into the weights: only
/// the weight scales remain.
pub(crate) fn integer_linear_unit(x_ints: &Tensor, w: &QuantizedLinear) -> Result<Tensor> {
    integer_linear(x_ints, w, |_| 1.0)
}

/// Integer matmul followed by one dequantization `s_X · s_W`.
///
/// Activations must carry one scale per tensor or per token; per-channel
/// scales cannot be factored out of the sum (see [`per_channel_oracle`]).
pub fn quantized_linear(x_q: &QuantizedTensor, w_q: &QuantizedLinear) -> Result<Tensor> {
    if x_q.zero_points.is_some() {
        return Err(Error::invalid("activation zero-points are not supported"));
    }
    match x_q.granularity {
        Granularity::PerTensor => integer_linear(&x_q.ints, w_q, |_| x_q.scales[0]),
        Granularity::PerToken => integer_linear(&x_q.ints, w_q, |i| x_q.scales[i]),
        g => Err(Error::invalid(format!(
            "{g:?} activation scales cannot be extracted from the integer sum"
        ))),
    }
}

/// Slow reference for per-channel activation scales:
/// `Y_ij = s^W_j · Σ_k s^X_k · X_ik · W_kj`, evaluated literally.
pub fn per_channel_oracle(x_q: &QuantizedTensor, w_q: &QuantizedLinear) -> Result<Tensor> {
    let (m, k, n) = (x_q.ints.rows(), w_q.in_dim(), w_q.out_dim());
    if x_q.granularity != Granularity::PerChannel || x_q.scales.len() != k || x_q.ints.cols() != k {
        return Err(Error::shape(format!(
            "oracle needs {k} per-channel activation scales, got {} ({:?})",
            x_q.scales.len(),
            x_q.granularity
        )));
    }
    let x = x_q.ints.ints()?;
    let w = w_q.w_int.ints()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = if w_q.group_size.is_none() && w_q.w_zero_points.is_none() {
                let mut sum = 0.0;
                for p in 0..k {
                    sum += x_q.scales[p] * x[i * k + p] as f64 * w[p * n + j] as f64;
                }
                w_q.w_scales[j] * sum
            } else {
                let mut sum = 0.0;
                for p in 0..k {
                    let idx = w_q.param_index(p, j);
                    let z = w_q.w_zero_points.as_ref().map_or(0, |z| z[idx]);
                    sum += x_q.scales[p] * x[i * k + p] as f64 * w_q.w_scales[idx] * (w[p * n + j] - z) as f64;
                }
                sum
            };
            if let Some(b) = &w_q.bias {
                out[i * n + j] += b[j];
            }
        }
    }
    let mut shape = x_q.ints.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::real(shape, out)
}
