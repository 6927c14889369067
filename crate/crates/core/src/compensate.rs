//! Low-rank compensation.
//!
//! Each quantized layer gets a pair `A (n_in × r)`, `B (r × n_out)` added to
//! its weight before quantization, so the deployed weight is `q(W + A·B)`.
//! The pairs are fit by plain gradient descent on the block's output error
//! against the fp block, with straight-through gradients for every
//! quantizer.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};
use crate::toymodel::{BlockRecipe, Layer, ToyBlock};

/// Standard deviation of the initial `A`.
pub const INIT_STD: f64 = 0.01;

/// Divergence guard: abort once the loss exceeds this multiple of the start.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub rank: usize,
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_in × rank`.
    pub a: Vec<f64>,
    /// Row-major `rank × n_out`.
    pub b: Vec<f64>,
}

impl LoraPair {
    /// `A ~ N(0, INIT_STD²)`, `B = 0`: the product starts at exactly zero.
    pub fn init(n_in: usize, n_out: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, INIT_STD).expect("positive std");
        Self {
            rank,
            n_in,
            n_out,
            a: (0..n_in * rank).map(|_| dist.sample(rng)).collect(),
            b: vec![0.0; rank * n_out],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rank == 0
    }

    /// `A·B`, or `None` for rank zero.
    pub fn product(&self) -> Result<Option<Tensor>> {
        if self.is_empty() {
            return Ok(None);
        }
        let a = Tensor::real(vec![self.n_in, self.rank], self.a.clone())?;
        let b = Tensor::real(vec![self.rank, self.n_out], self.b.clone())?;
        Ok(Some(matmul(&a, &b)?))
    }

    /// `w + A·B`.
    pub fn apply(&self, w: &Tensor) -> Result<Tensor> {
        if w.shape() != [self.n_in, self.n_out] {
            return Err(Error::shape(format!(
                "adapter {}×{} for weight {:?}",
                self.n_in,
                self.n_out,
                w.shape()
            )));
        }
        match self.product()? {
            Some(ab) => w.add(&ab),
            None => Ok(w.clone()),
        }
    }

    /// Gradients of `A` and `B` given the gradient `g` of the summed weight.
    fn grads(&self, g: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let a = Tensor::real(vec![self.n_in, self.rank], self.a.clone())?;
        let b = Tensor::real(vec![self.rank, self.n_out], self.b.clone())?;
        let da = matmul(g, &b.transpose()?)?.into_reals()?;
        let db = matmul(&a.transpose()?, g)?.into_reals()?;
        Ok((da, db))
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        c.insert(format!("{prefix}.lora_a"), Tensor::real(vec![self.n_in, self.rank], self.a.clone())?);
        c.insert(format!("{prefix}.lora_b"), Tensor::real(vec![self.rank, self.n_out], self.b.clone())?);
        Ok(())
    }

    /// `None` when the container holds no adapter under `prefix`.
    pub fn read_from(c: &Container, prefix: &str) -> Result<Option<Self>> {
        let (ka, kb) = (format!("{prefix}.lora_a"), format!("{prefix}.lora_b"));
        if !c.contains(&ka) {
            return Ok(None);
        }
        let (a, b) = (c.get(&ka)?, c.get(&kb)?);
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Format(format!("{prefix}: adapter shapes {:?} and {:?}", a.shape(), b.shape())));
        }
        Ok(Some(Self {
            rank: a.shape()[1],
            n_in: a.shape()[0],
            n_out: b.shape()[1],
            a: a.reals()?.to_vec(),
            b: b.reals()?.to_vec(),
        }))
    }
}

/// One optional adapter per layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockAdapters {
    pairs: BTreeMap<Layer, LoraPair>,
}

impl BlockAdapters {
    pub fn none() -> Self {
        Self::default()
    }

    /// Fresh adapters of `rank` for every layer of `recipe`.
    pub fn init(recipe: &BlockRecipe, rank: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = Layer::ALL
            .iter()
            .map(|&l| {
                let s = recipe.rows(l).shape();
                (l, LoraPair::init(s[0], s[1], rank, &mut rng))
            })
            .collect();
        Self { pairs }
    }

    pub fn get(&self, layer: Layer) -> Option<&LoraPair> {
        self.pairs.get(&layer)
    }

    pub fn insert(&mut self, layer: Layer, pair: LoraPair) {
        self.pairs.insert(layer, pair);
    }

    pub fn iter(&self) -> impl Iterator<Item = (Layer, &LoraPair)> {
        self.pairs.iter().map(|(l, p)| (*l, p))
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) -> Result<()> {
        for (l, p) in &self.pairs {
            p.write_into(c, &format!("{prefix}.{}", l.name()))?;
        }
        Ok(())
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for l in Layer::ALL {
            if let Some(p) = LoraPair::read_from(c, &format!("{prefix}.{}", l.name()))? {
                pairs.insert(l, p);
            }
        }
        Ok(Self { pairs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
}

fn default_rank() -> usize {
    4
}

fn default_steps() -> usize {
    200
}

fn default_step_size() -> f64 {
    1.0
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: default_rank(),
            steps: default_steps(),
            step_size: default_step_size(),
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("step size {} must be positive", self.step_size)));
        }
        Ok(())
    }
}

/// Training trajectory summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub rank: usize,
    pub steps: usize,
    pub step_size: f64,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_step: usize,
    /// Loss before each update, then after the last one.
    pub losses: Vec<f64>,
}

/// Per-layer `(dA, dB)` gradients.
pub type AdapterGrads = BTreeMap<Layer, (Vec<f64>, Vec<f64>)>;

/// Block reconstruction loss `mean((y_fp - y_q)²)` over all batches and, on
/// request, its gradients with respect to every adapter.
pub fn loss_and_grads(
    recipe: &BlockRecipe,
    adapters: &BlockAdapters,
    inputs: &[Tensor],
    targets: &[Tensor],
    with_grads: bool,
) -> Result<(f64, AdapterGrads)> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::invalid("compensation needs matching, nonempty inputs and targets"));
    }
    let block = recipe.materialize(adapters)?;
    let count: usize = targets.iter().map(Tensor::len).sum();
    let mut loss = 0.0;
    let mut weight_grads: Option<[Tensor; 4]> = None;
    for (x, t) in inputs.iter().zip(targets) {
        if !with_grads {
            loss += block.forward(x)?.sub(t)?.sq_norm()?;
            continue;
        }
        let (y, cache) = block.forward_cached(x)?;
        let diff = y.sub(t)?;
        loss += diff.sq_norm()?;
        let dy = diff.scale(2.0 / count as f64)?;
        let g = block.backward(&cache, &dy)?;
        weight_grads = Some(match weight_grads {
            None => g,
            Some(acc) => {
                let [a0, a1, a2, a3] = acc;
                let [g0, g1, g2, g3] = g;
                [a0.add(&g0)?, a1.add(&g1)?, a2.add(&g2)?, a3.add(&g3)?]
            }
        });
    }
    let mut grads = AdapterGrads::new();
    if let Some(wg) = weight_grads {
        for (layer, g) in Layer::ALL.iter().zip(wg.iter()) {
            if let Some(p) = adapters.get(*layer) {
                grads.insert(*layer, p.grads(g)?);
            }
        }
    }
    Ok((loss / count as f64, grads))
}

/// Fit adapters of `cfg.rank` to minimize the block output error on
/// `inputs`, returning the best pair set seen along the trajectory.
pub fn fit_compensation(
    fp: &ToyBlock,
    recipe: &BlockRecipe,
    inputs: &[Tensor],
    cfg: &LoraConfig,
    seed: u64,
) -> Result<(BlockAdapters, FitReport)> {
    cfg.validate()?;
    if fp.config != recipe.config {
        return Err(Error::shape("fp block and quantized recipe differ in shape"));
    }
    if inputs.is_empty() {
        return Err(Error::invalid("compensation needs a nonempty calibration batch"));
    }
    let targets = inputs.iter().map(|x| fp.forward(x)).collect::<Result<Vec<_>>>()?;
    let mut adapters = BlockAdapters::init(recipe, cfg.rank, seed);
    let mut best = adapters.clone();
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let (mut best_loss, mut best_step) = (f64::INFINITY, 0);
    let mut initial = f64::NAN;
    for step in 0..=cfg.steps {
        let train = step < cfg.steps && cfg.rank > 0;
        let (loss, grads) = loss_and_grads(recipe, &adapters, inputs, &targets, train)?;
        if step == 0 {
            initial = loss;
        }
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial {
            return Err(Error::Numeric(format!(
                "compensation diverged at step {step}: loss {loss:e} vs initial {initial:e} (step size {})",
                cfg.step_size
            )));
        }
        losses.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_step = step;
            best = adapters.clone();
        }
        if !train {
            if cfg.rank == 0 {
                break;
            }
            continue;
        }
        for (layer, (da, db)) in grads {
            let p = adapters.pairs.get_mut(&layer).expect("gradient for a present adapter");
            p.a.iter_mut().zip(&da).for_each(|(v, g)| *v -= cfg.step_size * g);
            p.b.iter_mut().zip(&db).for_each(|(v, g)| *v -= cfg.step_size * g);
        }
    }
    Ok((
        best,
        FitReport {
            rank: cfg.rank,
            steps: cfg.steps,
            step_size: cfg.step_size,
            initial_loss: initial,
            best_loss,
            best_step,
            losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_b_means_zero_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LoraPair::init(6, 5, 2, &mut rng);
        let w = Tensor::real(vec![6, 5], (0..30).map(|i| i as f64).collect()).unwrap();
        assert_eq!(p.apply(&w).unwrap(), w);
        assert!(p.a.iter().any(|&v| v != 0.0));
        let e = LoraPair::init(6, 5, 0, &mut rng);
        assert!(e.product().unwrap().is_none());
        assert_eq!(e.apply(&w).unwrap(), w);
    }

    #[test]
    fn pair_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = LoraPair::init(4, 3, 2, &mut rng);
        p.b.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let g = Tensor::real(vec![4, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        // f = <g, AB>
        let f = |p: &LoraPair| -> f64 {
            p.product().unwrap().unwrap().reals().unwrap().iter().zip(g.reals().unwrap()).map(|(a, b)| a * b).sum()
        };
        let (da, db) = p.grads(&g).unwrap();
        let h = 1e-6;
        for i in 0..p.a.len() {
            let mut q = p.clone();
            q.a[i] += h;
            assert!(((f(&q) - f(&p)) / h - da[i]).abs() < 1e-6);
        }
        for i in 0..p.b.len() {
            let mut q = p.clone();
            q.b[i] += h;
            assert!(((f(&q) - f(&p)) / h - db[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn container_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LoraPair::init(4, 3, 2, &mut rng);
        let mut c = Container::new();
        p.write_into(&mut c, "q.out").unwrap();
        assert!(c.contains("q.out.lora_a") && c.contains("q.out.lora_b"));
        assert_eq!(LoraPair::read_from(&c, "q.out").unwrap(), Some(p));
        assert_eq!(LoraPair::read_from(&c, "q.down").unwrap(), None);
    }

    #[test]
    fn config_defaults() {
        let c: LoraConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, LoraConfig::default());
        assert_eq!((c.rank, c.steps, c.step_size), (4, 200, 1.0));
        assert!(LoraConfig { step_size: 0.0, ..c }.validate().is_err());
    }
}
