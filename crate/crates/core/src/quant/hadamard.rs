use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Which operand of `x · W` a rotation is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// `x · H`, rotating the last axis of an activation.
    Activation,
    /// `Hᵀ · W`, rotating the input (row) axis of a weight.
    Weight,
}

/// In-place unnormalized fast Walsh–Hadamard transform (Sylvester order).
pub fn fwht_in_place(v: &mut [f64]) {
    let n = v.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for block in (0..n).step_by(2 * h) {
            for i in block..block + h {
                let (a, b) = (v[i], v[i + h]);
                v[i] = a + b;
                v[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Multiply by the orthonormal Walsh–Hadamard matrix `H / √n` on the given
/// side. `H` is symmetric, so applying the activation rotation to `x` and the
/// weight rotation to `W` leaves `x · W` unchanged.
pub fn hadamard_rotate(t: &Tensor, side: Side) -> Result<Tensor> {
    match side {
        Side::Activation => {
            let n = t.cols();
            if !n.is_power_of_two() {
                return Err(Error::invalid(format!("rotated dimension {n} is not a power of two")));
            }
            let norm = 1.0 / (n as f64).sqrt();
            let mut out = t.reals()?.to_vec();
            exec::for_each_chunk_mut(&mut out, n, |_, row| {
                fwht_in_place(row);
                row.iter_mut().for_each(|v| *v *= norm);
            });
            Tensor::real(t.shape().to_vec(), out)
        }
        Side::Weight => {
            if t.shape().len() != 2 {
                return Err(Error::shape("weight rotation needs a 2-D tensor"));
            }
            let rotated = hadamard_rotate(&t.transpose()?, Side::Activation)?;
            rotated.transpose()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_rotation() {
        let x = Tensor::real(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let y = hadamard_rotate(&x, Side::Activation).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for v in y.reals().unwrap() {
            assert!((v - r).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_explicit_matrix() {
        // Sylvester construction, built independently of the butterfly.
        let n = 8;
        let mut h = vec![vec![1.0f64]];
        while h.len() < n {
            let m = h.len();
            let mut next = vec![vec![0.0; 2 * m]; 2 * m];
            for i in 0..m {
                for j in 0..m {
                    next[i][j] = h[i][j];
                    next[i][j + m] = h[i][j];
                    next[i + m][j] = h[i][j];
                    next[i + m][j + m] = -h[i][j];
                }
            }
            h = next;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = hadamard_rotate(&Tensor::real(vec![1, n], x.clone()).unwrap(), Side::Activation).unwrap();
        for j in 0..n {
            let expected: f64 = (0..n).map(|i| x[i] * h[i][j]).sum::<f64>() / (n as f64).sqrt();
            assert!((y.reals().unwrap()[j] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn pair_preserves_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [2usize, 16, 256, 4096] {
            let x = Tensor::real(vec![2, n], (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let w = Tensor::real(vec![n, 3], (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let direct = matmul(&x, &w).unwrap();
            let rotated = matmul(
                &hadamard_rotate(&x, Side::Activation).unwrap(),
                &hadamard_rotate(&w, Side::Weight).unwrap(),
            )
            .unwrap();
            let err: f64 = direct.sub(&rotated).unwrap().sq_norm().unwrap().sqrt();
            assert!(err <= 1e-10 * direct.sq_norm().unwrap().sqrt(), "n = {n}");
        }
    }

    #[test]
    fn spreads_a_single_outlier() {
        let mut v = vec![1.0; 64];
        v[0] = 100.0;
        let y = hadamard_rotate(&Tensor::real(vec![1, 64], v).unwrap(), Side::Activation).unwrap();
        let m = y.reals().unwrap().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        // Row 0 of H sums everything: (100 + 63) / 8 = 20.375.
        assert!((m - 20.375).abs() < 1e-12);
        assert!(m < 100.0);
    }

    #[test]
    fn rejects_non_power_of_two() {
        let x = Tensor::real(vec![1, 3], vec![1.0; 3]).unwrap();
        assert!(hadamard_rotate(&x, Side::Activation).is_err());
    }
}
