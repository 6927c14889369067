use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Name of the activation tensor inside a calibration container.
pub const ACTIVATIONS_KEY: &str = "activations";

/// Gaussian activations with a few fixed channels scaled up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierProfile {
    #[serde(default = "default_count")]
    pub outlier_channel_count: usize,
    #[serde(default = "default_factor")]
    pub magnitude_factor: f64,
    pub seed: u64,
}

fn default_count() -> usize {
    3
}

fn default_factor() -> f64 {
    100.0
}

impl OutlierProfile {
    pub fn new(seed: u64) -> Self {
        Self {
            outlier_channel_count: default_count(),
            magnitude_factor: default_factor(),
            seed,
        }
    }

    /// The profile's outlier channels for width `n`, ascending. Depends only
    /// on the seed, so every stream shares them.
    pub fn outlier_channels(&self, n: usize) -> Result<Vec<usize>> {
        if self.outlier_channel_count > n {
            return Err(Error::Config(format!(
                "{} outlier channels requested for width {n}",
                self.outlier_channel_count
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut idx = sample(&mut rng, n, self.outlier_channel_count).into_vec();
        idx.sort_unstable();
        Ok(idx)
    }

    /// `tokens × n` activations from an independent value stream.
    pub fn generate_stream(&self, tokens: usize, n: usize, stream: u64) -> Result<Tensor> {
        if !(self.magnitude_factor > 0.0) || !self.magnitude_factor.is_finite() {
            return Err(Error::Config(format!("magnitude factor {} must be positive", self.magnitude_factor)));
        }
        let outliers = self.outlier_channels(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let mut data: Vec<f64> = (0..tokens * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for t in 0..tokens {
            for &k in &outliers {
                data[t * n + k] *= self.magnitude_factor;
            }
        }
        Tensor::real(vec![tokens, n], data)
    }
}

/// `tokens × n` activations for `profile` (value stream 0).
pub fn generate_activations(profile: &OutlierProfile, tokens: usize, n: usize) -> Result<Tensor> {
    profile.generate_stream(tokens, n, 0)
}

/// Where calibration and evaluation inputs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        profile: OutlierProfile,
        /// Sequences per batch.
        batch: usize,
        seq_len: usize,
    },
    /// An MQT1 container holding `activations` of shape `[batches, seq, n]`.
    Path(PathBuf),
}

/// Fixed-shape `[batch, seq, n]` batches.
///
/// Synthetic sources yield `batches` independent streams; containers yield
/// one batch per leading index (the `batches` argument is ignored).
pub fn load_calibration(source: &DataSource, n: usize, batches: usize, stream_offset: u64) -> Result<Vec<Tensor>> {
    match source {
        DataSource::Synthetic { profile, batch, seq_len } => {
            if *batch == 0 || *seq_len == 0 {
                return Err(Error::Config("batch and seq_len must be positive".into()));
            }
            (0..batches as u64)
                .map(|b| {
                    profile
                        .generate_stream(batch * seq_len, n, stream_offset + b)?
                        .reshape(vec![*batch, *seq_len, n])
                })
                .collect()
        }
        DataSource::Path(path) => read_batches(path, n),
    }
}

fn read_batches(path: &Path, n: usize) -> Result<Vec<Tensor>> {
    let c = Container::read(path)?;
    let t = c
        .get(ACTIVATIONS_KEY)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let shape = t.shape().to_vec();
    if shape.len() != 3 || shape[2] != n {
        return Err(Error::shape(format!(
            "{}: activations {shape:?}, expected [batches, seq, {n}]",
            path.display()
        )));
    }
    let data = t.reals()?;
    let per = shape[1] * n;
    (0..shape[0])
        .map(|b| Tensor::real(vec![1, shape[1], n], data[b * per..(b + 1) * per].to_vec()))
        .collect()
}

/// Write `[batches, seq, n]` activations to a calibration container.
pub fn write_calibration(path: impl AsRef<Path>, batches: &[Tensor]) -> Result<()> {
    let first = batches.first().ok_or_else(|| Error::invalid("no batches to write"))?;
    let (seq, n) = {
        let s = first.shape();
        (s[s.len() - 2], s[s.len() - 1])
    };
    let mut data = Vec::new();
    let mut count = 0;
    for b in batches {
        let s = b.shape();
        if s.len() < 2 || s[s.len() - 2] != seq || s[s.len() - 1] != n {
            return Err(Error::shape(format!("batch {s:?} differs from [.., {seq}, {n}]")));
        }
        count += b.len() / (seq * n);
        data.extend_from_slice(b.reals()?);
    }
    let mut c = Container::new();
    c.insert(ACTIVATIONS_KEY, Tensor::real(vec![count, seq, n], data)?);
    c.write(path)
}
