use crate::error::{Error, Result};
use crate::exec;
use crate::quant::{Granularity, QuantScheme, SCALE_FLOOR};
use crate::tensor::{qmax, qmin_asym, round_even, Tensor};

/// Integer payload plus the scales (and zero-points) needed to map it back.
///
/// Scales are indexed along the last axis for per-channel tensors and along
/// the flattened leading axes for per-token tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub ints: Tensor,
    pub scales: Vec<f64>,
    pub zero_points: Option<Vec<i32>>,
    pub granularity: Granularity,
    pub bits: u8,
}

impl QuantizedTensor {
    #[inline]
    pub(crate) fn scale_index(&self, idx: usize) -> usize {
        scale_index(self.granularity, idx, self.ints.cols())
    }
}

#[inline]
fn scale_index(g: Granularity, idx: usize, cols: usize) -> usize {
    match g {
        Granularity::PerTensor => 0,
        Granularity::PerToken => idx / cols,
        Granularity::PerChannel => idx % cols,
        Granularity::PerGroup(_) => unreachable!("activations are never grouped"),
    }
}

fn expected_scale_len(g: Granularity, x: &Tensor) -> usize {
    match g {
        Granularity::PerTensor => 1,
        Granularity::PerToken => x.rows(),
        Granularity::PerChannel => x.cols(),
        Granularity::PerGroup(_) => 0,
    }
}

fn check_scales(x: &Tensor, scales: &[f64], scheme: &QuantScheme) -> Result<()> {
    scheme.validate_activation()?;
    let want = expected_scale_len(scheme.granularity, x);
    if scales.len() != want {
        return Err(Error::shape(format!(
            "{:?} quantization of {:?} needs {want} scales, got {}",
            scheme.granularity,
            x.shape(),
            scales.len()
        )));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!("scale {s} is not positive")));
    }
    Ok(())
}

/// Symmetric quantization: `clamp(round(x / s), ±(2^(b-1) - 1))`.
pub fn quantize(x: &Tensor, scales: &[f64], scheme: &QuantScheme) -> Result<QuantizedTensor> {
    if !scheme.symmetric {
        return Err(Error::invalid("asymmetric quantization needs zero-points; use quantize_affine"));
    }
    check_scales(x, scales, scheme)?;
    let q = qmax(scheme.bits) as f64;
    let cols = x.cols();
    let data = x.reals()?;
    let mut ints = vec![0i32; data.len()];
    exec::for_each_chunk_mut(&mut ints, cols, |r, row| {
        let src = &data[r * cols..(r + 1) * cols];
        let q_of = |v: f64, s: f64| round_even(v / s).clamp(-q, q) as i32;
        match scheme.granularity {
            Granularity::PerChannel => row
                .iter_mut()
                .zip(src.iter().zip(scales))
                .for_each(|(o, (&v, &s))| *o = q_of(v, s)),
            g => {
                let s = scales[scale_index(g, r * cols, cols)];
                row.iter_mut().zip(src).for_each(|(o, &v)| *o = q_of(v, s));
            }
        }
    });
    Ok(QuantizedTensor {
        ints: Tensor::int(x.shape().to_vec(), ints, scheme.bits)?,
        scales: scales.to_vec(),
        zero_points: None,
        granularity: scheme.granularity,
        bits: scheme.bits,
    })
}

/// Zero-point quantization onto `[-2^(b-1), 2^(b-1) - 1]`.
pub fn quantize_affine(x: &Tensor, scales: &[f64], zero_points: &[i32], scheme: &QuantScheme) -> Result<QuantizedTensor> {
    check_scales(x, scales, scheme)?;
    if zero_points.len() != scales.len() {
        return Err(Error::shape("zero-points and scales differ in length"));
    }
    let (lo, hi) = (qmin_asym(scheme.bits) as f64, qmax(scheme.bits) as f64);
    let cols = x.cols();
    let data = x.reals()?;
    let ints = data
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let k = scale_index(scheme.granularity, idx, cols);
            (round_even(v / scales[k]) + zero_points[k] as f64).clamp(lo, hi) as i32
        })
        .collect();
    Ok(QuantizedTensor {
        ints: Tensor::int(x.shape().to_vec(), ints, scheme.bits)?,
        scales: scales.to_vec(),
        zero_points: Some(zero_points.to_vec()),
        granularity: scheme.granularity,
        bits: scheme.bits,
    })
}

/// `ints · s`, shifted by the zero-point when present.
pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    let ints = q.ints.ints()?;
    let cols = q.ints.cols();
    let mut out = vec![0.0; ints.len()];
    exec::for_each_chunk_mut(&mut out, cols, |r, row| {
        let src = &ints[r * cols..(r + 1) * cols];
        match (q.granularity, &q.zero_points) {
            (Granularity::PerToken | Granularity::PerTensor, None) => {
                let s = q.scales[q.scale_index(r * cols)];
                row.iter_mut().zip(src).for_each(|(o, &v)| *o = v as f64 * s);
            }
            _ => {
                for (c, (o, &v)) in row.iter_mut().zip(src).enumerate() {
                    let k = q.scale_index(r * cols + c);
                    let z = q.zero_points.as_ref().map_or(0, |z| z[k]);
                    *o = (v as f64 - z as f64) * q.scales[k];
                }
            }
        }
    });
    Tensor::real(q.ints.shape().to_vec(), out)
}

/// Per-token dynamic quantization with a uniform clip ratio:
/// `s_t = ratio · max|x_t| / (2^(b-1) - 1)`.
pub fn quantize_per_token_dynamic(x: &Tensor, bits: u8, clip_ratio: f64) -> Result<QuantizedTensor> {
    if !(clip_ratio > 0.0 && clip_ratio <= 1.0) {
        return Err(Error::invalid(format!("clip ratio {clip_ratio} outside (0, 1]")));
    }
    let q = qmax(bits) as f64;
    let cols = x.cols();
    let data = x.reals()?;
    let scales: Vec<f64> = exec::map_range(x.rows(), |t| {
        let m = data[t * cols..(t + 1) * cols].iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m > 0.0 {
            clip_ratio * m / q
        } else {
            SCALE_FLOOR
        }
    });
    let scheme = QuantScheme {
        mode: crate::quant::Mode::Dynamic,
        ..QuantScheme::symmetric(bits, Granularity::PerToken)
    };
    quantize(x, &scales, &scheme)
}
