//! Dense row-major tensors and the handful of numeric kernels the pipeline
//! needs: matmul (real and checked 32-bit integer), RMSNorm and LayerNorm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

/// Default epsilon for both norm kinds.
pub const DEFAULT_NORM_EPS: f64 = 1e-6;

/// Element kind of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    Real,
    /// Signed integers of the declared bit-width, stored as `i32`.
    Int(u8),
}

/// Bit-widths an integer payload may declare.
pub fn is_supported_bits(bits: u8) -> bool {
    matches!(bits, 3 | 4 | 8 | 32)
}

/// Largest magnitude on the symmetric grid, `2^(b-1) - 1`.
pub fn qmax(bits: u8) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Smallest value on the zero-point grid, `-2^(b-1)`.
pub fn qmin_asym(bits: u8) -> i64 {
    -(1i64 << (bits - 1))
}

/// Round half to even.
#[inline]
pub fn round_even(x: f64) -> f64 {
    x.round_ties_even()
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Real(Vec<f64>),
    Int(Vec<i32>),
}

/// Dense row-major tensor with a real or integer payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    payload: Payload,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(format!("shape {shape:?} must be nonempty and positive")));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::shape(format!(
            "payload length {len} does not match shape {shape:?} ({expected})"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn real(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            dtype: DType::Real,
            payload: Payload::Real(data),
        })
    }

    /// Integer tensor; values must lie in `[-2^(b-1), 2^(b-1)-1]`.
    pub fn int(shape: Vec<usize>, data: Vec<i32>, bits: u8) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if !is_supported_bits(bits) {
            return Err(Error::invalid(format!("unsupported integer bit-width {bits}")));
        }
        if bits < 32 {
            let (lo, hi) = (qmin_asym(bits), qmax(bits));
            if let Some(v) = data.iter().find(|&&v| (v as i64) < lo || (v as i64) > hi) {
                return Err(Error::invalid(format!("value {v} outside the {bits}-bit range [{lo}, {hi}]")));
            }
        }
        Ok(Self {
            shape,
            dtype: DType::Int(bits),
            payload: Payload::Int(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            dtype: DType::Real,
            payload: Payload::Real(vec![0.0; len]),
        }
    }

    /// 2-D real tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::real(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Product of all leading axes (the token count for activations).
    pub fn rows(&self) -> usize {
        self.len() / self.cols()
    }

    pub fn reals(&self) -> Result<&[f64]> {
        match &self.payload {
            Payload::Real(v) => Ok(v),
            Payload::Int(_) => Err(Error::DType(format!("expected a real tensor, got {:?}", self.dtype))),
        }
    }

    pub fn ints(&self) -> Result<&[i32]> {
        match &self.payload {
            Payload::Int(v) => Ok(v),
            Payload::Real(_) => Err(Error::DType("expected an integer tensor, got Real".into())),
        }
    }

    pub fn into_reals(self) -> Result<Vec<f64>> {
        match self.payload {
            Payload::Real(v) => Ok(v),
            Payload::Int(_) => Err(Error::DType(format!("expected a real tensor, got {:?}", self.dtype))),
        }
    }

    /// Exact conversion to fp64 (all integer magnitudes are below 2^53).
    pub fn to_real(&self) -> Tensor {
        match &self.payload {
            Payload::Real(_) => self.clone(),
            Payload::Int(v) => Tensor {
                shape: self.shape.clone(),
                dtype: DType::Real,
                payload: Payload::Real(v.iter().map(|&x| x as f64).collect()),
            },
        }
    }

    /// Same payload, new shape of equal size.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.len())?;
        self.shape = shape;
        Ok(self)
    }

    /// Row `i` of the flattened 2-D view.
    pub fn row(&self, i: usize) -> Result<&[f64]> {
        let c = self.cols();
        Ok(&self.reals()?[i * c..(i + 1) * c])
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::shape("transpose needs a 2-D tensor"));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let a = self.reals()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        Tensor::real(vec![c, r], out)
    }

    /// Elementwise map over a real tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::real(self.shape.clone(), self.reals()?.iter().map(|&x| f(x)).collect())
    }

    /// Elementwise combination of two same-shaped real tensors.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self
            .reals()?
            .iter()
            .zip(other.reals()?)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::real(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Result<Tensor> {
        self.map(|x| alpha * x)
    }

    /// Sum of squared elements.
    pub fn sq_norm(&self) -> Result<f64> {
        Ok(self.reals()?.iter().map(|x| x * x).sum())
    }

    /// Round every real value through `f32`.
    pub fn to_f32_precision(&self) -> Result<Tensor> {
        self.map(|x| x as f32 as f64)
    }
}

/// Matrix product `a · b` with `b` 2-D and `a` of any rank (leading axes are
/// treated as rows).
///
/// Real×Real yields a real tensor; Integer×Integer accumulates in checked
/// 32-bit arithmetic and yields `Int(32)`. Mixed operands are rejected.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.shape.len() != 2 {
        return Err(Error::shape(format!("right operand must be 2-D, got {:?}", b.shape)));
    }
    let (k, n) = (b.shape[0], b.shape[1]);
    if a.cols() != k {
        return Err(Error::shape(format!(
            "inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let m = a.rows();
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = n;
    match (&a.payload, &b.payload) {
        (Payload::Real(x), Payload::Real(w)) => Tensor::real(shape, matmul_real(x, w, m, k, n)),
        (Payload::Int(x), Payload::Int(w)) => {
            let rows = exec::map_range(m, |i| {
                let xr = &x[i * k..(i + 1) * k];
                let mut acc = vec![0i32; n];
                for (p, &xv) in xr.iter().enumerate() {
                    if xv == 0 {
                        continue;
                    }
                    let wr = &w[p * n..(p + 1) * n];
                    for (slot, &wv) in acc.iter_mut().zip(wr) {
                        *slot = xv
                            .checked_mul(wv)
                            .and_then(|prod| slot.checked_add(prod))
                            .ok_or_else(|| {
                                Error::Overflow(format!(
                                    "row {i}: 32-bit accumulator overflowed (k = {k})"
                                ))
                            })?;
                    }
                }
                Ok::<_, Error>(acc)
            });
            let mut out = Vec::with_capacity(m * n);
            for r in rows {
                out.extend(r?);
            }
            Tensor::int(shape, out, 32)
        }
        _ => Err(Error::DType(format!(
            "mixed operands {:?} x {:?}",
            a.dtype, b.dtype
        ))),
    }
}

/// Plain fp64 row-major GEMM on slices: `x (m×k) · w (k×n)`.
pub(crate) fn matmul_real(x: &[f64], w: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    exec::for_each_chunk_mut(&mut out, n, |i, acc| {
        let xr = &x[i * k..(i + 1) * k];
        for (p, &xv) in xr.iter().enumerate() {
            let wr = &w[p * n..(p + 1) * n];
            for (slot, &wv) in acc.iter_mut().zip(wr) {
                *slot += xv * wv;
            }
        }
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    RmsNorm,
    LayerNorm,
}

/// Multiplier (and, for LayerNorm, adder) of a normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Option<Vec<f64>>,
    pub kind: NormKind,
    pub eps: f64,
}

impl NormParams {
    pub fn rms(gamma: Vec<f64>) -> Self {
        Self {
            gamma,
            beta: None,
            kind: NormKind::RmsNorm,
            eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn layer(gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::shape("gamma and beta lengths differ"));
        }
        Ok(Self {
            gamma,
            beta: Some(beta),
            kind: NormKind::LayerNorm,
            eps: DEFAULT_NORM_EPS,
        })
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.beta) {
            (NormKind::LayerNorm, None) => Err(Error::invalid("LayerNorm requires beta")),
            (NormKind::RmsNorm, Some(_)) => Err(Error::invalid("RMSNorm takes no beta")),
            (_, Some(b)) if b.len() != self.gamma.len() => Err(Error::shape("gamma and beta lengths differ")),
            _ if !(self.eps > 0.0) => Err(Error::invalid("epsilon must be positive")),
            _ => Ok(()),
        }
    }
}

/// Normalizes every row without applying gamma/beta: `x / RMS(x)` for
/// RMSNorm, `(x - mean) / std` for LayerNorm.
pub fn normalize_rows(x: &Tensor, kind: NormKind, eps: f64) -> Result<Tensor> {
    let n = x.cols();
    let mut out = x.reals()?.to_vec();
    exec::for_each_chunk_mut(&mut out, n, |_, row| match kind {
        NormKind::RmsNorm => {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
        }
        NormKind::LayerNorm => {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
    });
    Tensor::real(x.shape.clone(), out)
}

/// Apply a per-channel multiplier and optional adder along the last axis.
pub(crate) fn affine_rows(x: &Tensor, gamma: &[f64], beta: Option<&[f64]>) -> Result<Tensor> {
    let n = x.cols();
    if gamma.len() != n || beta.is_some_and(|b| b.len() != n) {
        return Err(Error::shape(format!(
            "affine params of length {} vs last dim {n}",
            gamma.len()
        )));
    }
    let mut out = x.reals()?.to_vec();
    exec::for_each_chunk_mut(&mut out, n, |_, row| {
        for (k, v) in row.iter_mut().enumerate() {
            *v *= gamma[k];
            if let Some(b) = beta {
                *v += b[k];
            }
        }
    });
    Tensor::real(x.shape.clone(), out)
}

/// `y_tk = x_tk / sqrt(mean_k(x_tk^2) + eps) * gamma_k`.
pub fn rmsnorm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    if p.kind != NormKind::RmsNorm {
        return Err(Error::invalid("rmsnorm called with LayerNorm params"));
    }
    p.validate()?;
    if x.cols() != p.dim() {
        return Err(Error::shape(format!("last dim {} vs gamma {}", x.cols(), p.dim())));
    }
    affine_rows(&normalize_rows(x, NormKind::RmsNorm, p.eps)?, &p.gamma, None)
}

/// Standard LayerNorm with population variance.
pub fn layernorm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    let beta = p.beta.as_deref().ok_or_else(|| Error::invalid("LayerNorm requires beta"))?;
    p.validate()?;
    if x.cols() != p.dim() {
        return Err(Error::shape(format!("last dim {} vs gamma {}", x.cols(), p.dim())));
    }
    affine_rows(&normalize_rows(x, NormKind::LayerNorm, p.eps)?, &p.gamma, Some(beta))
}

/// Dispatch on `p.kind`.
pub fn norm_forward(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    match p.kind {
        NormKind::RmsNorm => rmsnorm(x, p),
        NormKind::LayerNorm => layernorm(x, p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity_and_dot() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(matmul(&a, &eye).unwrap(), a);

        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&x, &w).unwrap().reals().unwrap(), &[11.0]);
    }

    #[test]
    fn int4_matmul_matches_fp64_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<i32> = (0..64).map(|_| rng.random_range(-7..=7)).collect();
        let b: Vec<i32> = (0..64).map(|_| rng.random_range(-7..=7)).collect();
        let ta = Tensor::int(vec![8, 8], a.clone(), 4).unwrap();
        let tb = Tensor::int(vec![8, 8], b.clone(), 4).unwrap();
        let got = matmul(&ta, &tb).unwrap();
        assert_eq!(got.dtype(), DType::Int(32));
        let reference = matmul(&ta.to_real(), &tb.to_real()).unwrap();
        let got_f: Vec<f64> = got.ints().unwrap().iter().map(|&v| v as f64).collect();
        assert_eq!(got_f, reference.reals().unwrap());
    }

    #[test]
    fn matmul_rejects_mixed_and_mismatched() {
        let r = Tensor::real(vec![2, 2], vec![1.0; 4]).unwrap();
        let i = Tensor::int(vec![2, 2], vec![1; 4], 4).unwrap();
        assert!(matches!(matmul(&r, &i), Err(Error::DType(_))));
        let w = Tensor::real(vec![3, 1], vec![1.0; 3]).unwrap();
        assert!(matches!(matmul(&r, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_detects_overflow() {
        let big = Tensor::int(vec![1, 2], vec![i32::MAX, 1], 32).unwrap();
        let w = Tensor::int(vec![2, 1], vec![2, 1], 32).unwrap();
        assert!(matches!(matmul(&big, &w), Err(Error::Overflow(_))));
    }

    #[test]
    fn matmul_batched_leading_axes() {
        let x = Tensor::real(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let w = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let y = matmul(&x, &w).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1]);
        assert_eq!(y.reals().unwrap(), &[1.0, 5.0, 9.0, 13.0, 17.0, 21.0]);
    }

    #[test]
    fn int_range_enforced() {
        assert!(Tensor::int(vec![1], vec![8], 4).is_err());
        assert!(Tensor::int(vec![1], vec![-8], 4).is_ok());
        assert!(Tensor::int(vec![1], vec![0], 5).is_err());
        assert!(Tensor::real(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn rmsnorm_examples() {
        let p = NormParams::rms(vec![1.0; 4]).with_eps(1e-12);
        let x = Tensor::real(vec![1, 4], vec![2.0; 4]).unwrap();
        close(rmsnorm(&x, &p).unwrap().reals().unwrap(), &[1.0; 4], 1e-9);

        let p = NormParams::rms(vec![1.0, 1.0]).with_eps(1e-12);
        let x = Tensor::real(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let y = rmsnorm(&x, &p).unwrap();
        let rms = 12.5f64.sqrt();
        close(y.reals().unwrap(), &[3.0 / rms, 4.0 / rms], 1e-9);
        close(y.reals().unwrap(), &[0.8485, 1.1314], 1e-4);

        let p2 = NormParams::rms(vec![2.0, 2.0]).with_eps(1e-12);
        let y2 = rmsnorm(&x, &p2).unwrap();
        close(y2.reals().unwrap(), &y.scale(2.0).unwrap().into_reals().unwrap(), 1e-12);
    }

    #[test]
    fn rmsnorm_output_rms_equals_constant_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..5 * 16).map(|_| rng.random_range(-5.0..5.0)).collect();
        let x = Tensor::real(vec![5, 16], data).unwrap();
        let p = NormParams::rms(vec![1.7; 16]).with_eps(0.0 + 1e-300);
        let y = rmsnorm(&x, &p).unwrap();
        for t in 0..5 {
            let row = y.row(t).unwrap();
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
            assert!((rms - 1.7).abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_examples() {
        let p = NormParams::layer(vec![1.0, 1.0], vec![0.0, 0.0]).unwrap().with_eps(1e-12);
        let x = Tensor::real(vec![1, 2], vec![1.0, 3.0]).unwrap();
        close(layernorm(&x, &p).unwrap().reals().unwrap(), &[-1.0, 1.0], 1e-9);
        let p = NormParams::layer(vec![1.0, 1.0], vec![5.0, 5.0]).unwrap().with_eps(1e-12);
        close(layernorm(&x, &p).unwrap().reals().unwrap(), &[4.0, 6.0], 1e-9);

        let missing = NormParams {
            kind: NormKind::LayerNorm,
            ..NormParams::rms(vec![1.0, 1.0])
        };
        assert!(layernorm(&x, &missing).is_err());
    }

    #[test]
    fn layernorm_matches_two_pass_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 32;
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gamma: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = NormParams::layer(gamma.clone(), beta.clone()).unwrap();
        let y = layernorm(&Tensor::real(vec![1, n], row.clone()).unwrap(), &p).unwrap();

        // two-pass reference
        let mut mean = 0.0;
        for v in &row {
            mean += v;
        }
        mean /= n as f64;
        let mut var = 0.0;
        for v in &row {
            var += (v - mean).powi(2);
        }
        var /= n as f64;
        let expected: Vec<f64> = (0..n)
            .map(|k| (row[k] - mean) / (var + p.eps).sqrt() * gamma[k] + beta[k])
            .collect();
        close(y.reals().unwrap(), &expected, 1e-12);
    }

    #[test]
    fn matmul_commutes_with_scalar_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::real(vec![6, 9], (0..54).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::real(vec![9, 4], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let alpha = 3.25;
        let lhs = matmul(&a.scale(alpha).unwrap(), &b).unwrap();
        let rhs = matmul(&a, &b).unwrap().scale(alpha).unwrap();
        for (x, y) in lhs.reals().unwrap().iter().zip(rhs.reals().unwrap()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300) + 1e-15);
        }
    }

    #[test]
    fn int_roundtrip_through_fp64() {
        let vals = vec![i32::MIN, -1, 0, 7, i32::MAX];
        let t = Tensor::int(vec![5], vals.clone(), 32).unwrap();
        let back: Vec<i32> = t.to_real().reals().unwrap().iter().map(|&v| v as i32).collect();
        assert_eq!(back, vals);
    }
}
