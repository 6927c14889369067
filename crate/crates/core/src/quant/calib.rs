use crate::container::Container;
use crate::error::{Error, Result};
use crate::exact_sum::ExactSum;
use crate::quant::{Granularity, SCALE_FLOOR};
use crate::tensor::{qmax, qmin_asym, round_even, Tensor};

/// Running max-min statistics along one granularity axis, plus the optional
/// diagonal of `XᵀX` per feature channel.
///
/// Accumulators merge exactly: `a.merge(&b)` equals calibrating on the union
/// of both sample sets, bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    granularity: Granularity,
    axis: usize,
    max_abs: Vec<f64>,
    min: Vec<f64>,
    max: Vec<f64>,
    hessian: Option<Vec<ExactSum>>,
    sample_count: usize,
}

impl CalibrationStats {
    /// Fresh accumulator. `axis` is the feature (channel) axis of incoming
    /// samples; per-channel stats keep it, per-token stats reduce over it.
    pub fn new(granularity: Granularity, axis: usize, track_hessian: bool) -> Result<Self> {
        if matches!(granularity, Granularity::PerGroup(_)) {
            return Err(Error::invalid("activation calibration does not support groups"));
        }
        Ok(Self {
            granularity,
            axis,
            max_abs: Vec::new(),
            min: Vec::new(),
            max: Vec::new(),
            hessian: track_hessian.then(Vec::new),
            sample_count: 0,
        })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn max_abs(&self) -> &[f64] {
        &self.max_abs
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// `Σ_t x_tk²` per channel, correctly rounded.
    pub fn hessian_diag(&self) -> Option<Vec<f64>> {
        self.hessian.as_ref().map(|h| h.iter().map(ExactSum::value).collect())
    }

    fn stat_len(&self, x: &Tensor) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => x.shape()[self.axis],
            Granularity::PerToken => x.len() / x.shape()[self.axis],
            Granularity::PerGroup(_) => unreachable!("rejected in new"),
        }
    }

    pub fn observe(&mut self, x: &Tensor) -> Result<()> {
        let shape = x.shape();
        if self.axis >= shape.len() {
            return Err(Error::invalid(format!(
                "axis {} out of range for rank {}",
                self.axis,
                shape.len()
            )));
        }
        let data = x.reals()?;
        let len = self.stat_len(x);
        let dim = shape[self.axis];
        if self.sample_count == 0 {
            self.max_abs = vec![0.0; len];
            self.min = vec![f64::INFINITY; len];
            self.max = vec![f64::NEG_INFINITY; len];
            if let Some(h) = &mut self.hessian {
                *h = vec![ExactSum::new(); dim];
            }
        } else if self.max_abs.len() != len {
            return Err(Error::shape(format!(
                "calibrated axis length {len} differs from earlier samples ({})",
                self.max_abs.len()
            )));
        } else if self.hessian.as_ref().is_some_and(|h| h.len() != dim) {
            return Err(Error::shape("channel count differs from earlier samples"));
        }
        let stride: usize = shape[self.axis + 1..].iter().product();
        for (idx, &v) in data.iter().enumerate() {
            let channel = (idx / stride) % dim;
            let slot = match self.granularity {
                Granularity::PerTensor => 0,
                Granularity::PerChannel => channel,
                Granularity::PerToken => (idx / (dim * stride)) * stride + idx % stride,
                Granularity::PerGroup(_) => unreachable!(),
            };
            self.max_abs[slot] = self.max_abs[slot].max(v.abs());
            self.min[slot] = self.min[slot].min(v);
            self.max[slot] = self.max[slot].max(v);
            if let Some(h) = &mut self.hessian {
                h[channel].add(v * v);
            }
        }
        self.sample_count += 1;
        Ok(())
    }

    /// Fold another accumulator (e.g. from a different shard) into this one.
    pub fn merge(&mut self, other: &CalibrationStats) -> Result<()> {
        if self.granularity != other.granularity
            || self.axis != other.axis
            || self.hessian.is_some() != other.hessian.is_some()
        {
            return Err(Error::invalid("cannot merge stats with different layouts"));
        }
        if other.sample_count == 0 {
            return Ok(());
        }
        if self.sample_count == 0 {
            *self = other.clone();
            return Ok(());
        }
        if self.max_abs.len() != other.max_abs.len() {
            return Err(Error::shape("cannot merge stats of different lengths"));
        }
        for i in 0..self.max_abs.len() {
            self.max_abs[i] = self.max_abs[i].max(other.max_abs[i]);
            self.min[i] = self.min[i].min(other.min[i]);
            self.max[i] = self.max[i].max(other.max[i]);
        }
        if let (Some(a), Some(b)) = (&mut self.hessian, &other.hessian) {
            if a.len() != b.len() {
                return Err(Error::shape("hessian lengths differ"));
            }
            a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y));
        }
        self.sample_count += other.sample_count;
        Ok(())
    }

    /// Serialize under `<prefix>.max_abs`, `.min`, `.max`, `.hessian_diag`,
    /// `.sample_count`.
    pub fn write_into(&self, c: &mut Container, prefix: &str) -> Result<()> {
        c.insert_vec(format!("{prefix}.max_abs"), &self.max_abs)?;
        c.insert_vec(format!("{prefix}.min"), &self.min)?;
        c.insert_vec(format!("{prefix}.max"), &self.max)?;
        if let Some(h) = self.hessian_diag() {
            c.insert_vec(format!("{prefix}.hessian_diag"), &h)?;
        }
        c.insert_scalar(format!("{prefix}.sample_count"), self.sample_count as f64);
        Ok(())
    }

    /// Rebuild from a container written by [`write_into`](Self::write_into).
    /// The Hessian comes back as its rounded values.
    pub fn read_from(c: &Container, prefix: &str, granularity: Granularity, axis: usize) -> Result<Self> {
        let hessian = if c.contains(&format!("{prefix}.hessian_diag")) {
            Some(
                c.get_vec(&format!("{prefix}.hessian_diag"))?
                    .into_iter()
                    .map(|v| {
                        let mut s = ExactSum::new();
                        s.add(v);
                        s
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(Self {
            granularity,
            axis,
            max_abs: c.get_vec(&format!("{prefix}.max_abs"))?,
            min: c.get_vec(&format!("{prefix}.min"))?,
            max: c.get_vec(&format!("{prefix}.max"))?,
            hessian,
            sample_count: c.get_scalar(&format!("{prefix}.sample_count"))? as usize,
        })
    }
}

/// Max-min calibration over a stream of samples.
pub fn calibrate<'a, I>(samples: I, granularity: Granularity, axis: usize, track_hessian: bool) -> Result<CalibrationStats>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let mut stats = CalibrationStats::new(granularity, axis, track_hessian)?;
    for s in samples {
        stats.observe(s)?;
    }
    if stats.sample_count == 0 {
        return Err(Error::invalid("calibration stream is empty"));
    }
    Ok(stats)
}

/// Symmetric scales `max_abs / (2^(b-1) - 1)`; zero ranges get [`SCALE_FLOOR`].
pub fn make_scales(stats: &CalibrationStats, bits: u8) -> Vec<f64> {
    let q = qmax(bits) as f64;
    stats
        .max_abs
        .iter()
        .map(|&m| if m > 0.0 { m / q } else { SCALE_FLOOR })
        .collect()
}

/// Affine scales and zero-points over the `[-2^(b-1), 2^(b-1)-1]` grid.
pub fn make_affine_params(stats: &CalibrationStats, bits: u8) -> (Vec<f64>, Vec<i32>) {
    stats
        .min
        .iter()
        .zip(&stats.max)
        .map(|(&lo, &hi)| affine_params(lo, hi, bits))
        .unzip()
}

pub(crate) fn affine_params(lo: f64, hi: f64, bits: u8) -> (f64, i32) {
    let levels = ((1u64 << bits) - 1) as f64;
    let range = hi - lo;
    let s = if range > 0.0 { range / levels } else { SCALE_FLOOR.max(hi.abs() / levels) };
    let zp = qmin_asym(bits) as f64 - round_even(lo / s);
    let zp = zp.clamp(i32::MIN as f64, i32::MAX as f64) as i32;
    (s, zp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor {
        Tensor::real(shape, v).unwrap()
    }

    #[test]
    fn per_channel_and_per_tensor_max_abs() {
        let samples = [t(vec![1, 2], vec![1.0, -2.0]), t(vec![1, 2], vec![0.5, 4.0])];
        let pc = calibrate(&samples, Granularity::PerChannel, 1, false).unwrap();
        assert_eq!(pc.max_abs(), &[1.0, 4.0]);
        let pt = calibrate(&samples, Granularity::PerTensor, 1, false).unwrap();
        assert_eq!(pt.max_abs(), &[4.0]);
        let tok = calibrate(&samples, Granularity::PerToken, 1, false).unwrap();
        assert_eq!(tok.max_abs(), &[4.0]);
        assert_eq!(pc.min(), &[0.5, -2.0]);
        assert_eq!(pc.max(), &[1.0, 4.0]);
    }

    #[test]
    fn identity_sample_gives_unit_hessian() {
        let n = 5;
        let mut eye = vec![0.0; n * n];
        (0..n).for_each(|i| eye[i * n + i] = 1.0);
        let stats = calibrate([&t(vec![n, n], eye)], Granularity::PerChannel, 1, true).unwrap();
        assert_eq!(stats.hessian_diag().unwrap(), vec![1.0; n]);
    }

    #[test]
    fn errors() {
        let none: Vec<Tensor> = Vec::new();
        assert!(calibrate(&none, Granularity::PerChannel, 1, false).is_err());
        let s = [t(vec![1, 2], vec![1.0, 2.0])];
        assert!(calibrate(&s, Granularity::PerChannel, 2, false).is_err());
        let mixed = [t(vec![1, 2], vec![1.0, 2.0]), t(vec![1, 3], vec![1.0, 2.0, 3.0])];
        assert!(calibrate(&mixed, Granularity::PerChannel, 1, false).is_err());
    }

    #[test]
    fn scales_from_max_abs() {
        let s = calibrate([&t(vec![1, 3], vec![7.0, -3.5, 0.0])], Granularity::PerChannel, 1, false).unwrap();
        assert_eq!(make_scales(&s, 4), vec![1.0, 0.5, 1e-8]);
    }

    #[test]
    fn container_roundtrip() {
        let s = calibrate([&t(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5])], Granularity::PerChannel, 1, true).unwrap();
        let mut c = Container::new();
        s.write_into(&mut c, "qkv").unwrap();
        let back = CalibrationStats::read_from(&c, "qkv", Granularity::PerChannel, 1).unwrap();
        assert_eq!(back.max_abs(), s.max_abs());
        assert_eq!(back.hessian_diag(), s.hessian_diag());
        assert_eq!(back.sample_count(), 1);
    }

    proptest! {
        #[test]
        fn merge_equals_union(
            a in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 12), 1..5),
            b in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 12), 1..5),
            gran in prop_oneof![Just(Granularity::PerTensor), Just(Granularity::PerChannel), Just(Granularity::PerToken)],
        ) {
            let ta: Vec<Tensor> = a.into_iter().map(|v| t(vec![3, 4], v)).collect();
            let tb: Vec<Tensor> = b.into_iter().map(|v| t(vec![3, 4], v)).collect();
            let mut merged = calibrate(&ta, gran, 1, true).unwrap();
            merged.merge(&calibrate(&tb, gran, 1, true).unwrap()).unwrap();
            let union = calibrate(ta.iter().chain(&tb), gran, 1, true).unwrap();
            prop_assert_eq!(merged.max_abs(), union.max_abs());
            prop_assert_eq!(merged.min(), union.min());
            prop_assert_eq!(merged.hessian_diag(), union.hessian_diag());
            prop_assert_eq!(merged.sample_count(), union.sample_count());
            prop_assert!(merged.max_abs().iter().all(|&m| m >= 0.0));
            prop_assert!(merged.hessian_diag().unwrap().iter().all(|&h| h >= 0.0));
        }
    }
}
