use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clip::{search_channel_clips, search_token_clip, ClipPlan, WeightContext};
use crate::compensate::{fit_compensation, BlockAdapters, FitReport};
use crate::container::Container;
use crate::dimrec::{build_plan, gather_rows, ReconstructionPlan};
use crate::error::{Error, Result};
use crate::exec;
use crate::qsm::fold_rows;
use crate::quant::{calibrate, hadamard_rotate, make_scales, CalibrationStats, Granularity, Side, WeightQuantizer, WeightScheme};
use crate::tensor::{matmul, Tensor};
use crate::toymodel::{
    load_calibration, BlockRecipe, DynamicRecipe, LinearSite, FpTrace, Layer, QuantizedBlock, StaticRecipe,
    StaticSite, ToyBlock,
};

use super::config::PipelineConfig;
use super::report::{
    CalibrateSection, CompensationSummary, EvalRow, EvalSection, LayerQuantSummary, LayerStatsSummary,
    QuantizeSection,
};

pub const MODEL_FILE: &str = "model.mqt";
pub const CALIBRATION_FILE: &str = "calibration.mqt";
pub const ARTIFACT_FILE: &str = "artifact.mqt";
pub const PLANS_FILE: &str = "plans.json";

/// Evaluation streams start here so they never overlap calibration streams.
pub const EVAL_STREAM_OFFSET: u64 = 1 << 32;
/// Classes of the fixed random readout used by the cross-entropy proxy.
pub const READOUT_CLASSES: usize = 16;

/// Wall-clock per stage, plus stage tagging of errors.
#[derive(Debug, Default)]
pub struct Timings(pub BTreeMap<String, f64>);

impl Timings {
    pub fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage));
        *self.0.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64() * 1e3;
        out
    }
}

pub fn fp_block(cfg: &PipelineConfig) -> Result<ToyBlock> {
    match &cfg.paths.model {
        Some(p) => {
            let block = ToyBlock::read_from(&Container::read(p)?, "fp")?;
            if block.config != cfg.model {
                return Err(Error::Config(format!(
                    "{}: model shape {:?} differs from config {:?}",
                    p.display(),
                    block.config,
                    cfg.model
                )));
            }
            Ok(block)
        }
        None => ToyBlock::random(cfg.model, cfg.seed),
    }
}

pub fn calibration_batches(cfg: &PipelineConfig) -> Result<Vec<Tensor>> {
    load_calibration(&cfg.data.source(cfg.seed), cfg.model.hidden, cfg.calib_batches, 0)
}

pub fn eval_batches(cfg: &PipelineConfig) -> Result<Vec<Tensor>> {
    load_calibration(
        &cfg.eval_data().source(cfg.seed),
        cfg.model.hidden,
        cfg.eval_batches,
        EVAL_STREAM_OFFSET,
    )
}

/// Max-min statistics of one layer's input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibration {
    /// Per channel, with the Hessian diagonal.
    pub channel: CalibrationStats,
    pub tensor: CalibrationStats,
    /// Per sequence position, max over sequences.
    pub position: CalibrationStats,
}

pub type BlockCalibration = BTreeMap<Layer, LayerCalibration>;

fn sequences(t: &Tensor) -> Result<Vec<Tensor>> {
    let s = t.shape();
    let (seq, n) = (s[s.len() - 2], s[s.len() - 1]);
    let data = t.reals()?;
    data.chunks(seq * n)
        .map(|c| Tensor::real(vec![seq, n], c.to_vec()))
        .collect()
}

pub fn traces(fp: &ToyBlock, batches: &[Tensor]) -> Result<Vec<FpTrace>> {
    batches.iter().map(|x| fp.forward_trace(x)).collect()
}

pub fn calibrate_block(traces: &[FpTrace]) -> Result<BlockCalibration> {
    let mut out = BlockCalibration::new();
    for layer in Layer::ALL {
        let inputs: Vec<&Tensor> = traces.iter().map(|t| t.layer_input(layer)).collect();
        let axis = inputs[0].shape().len() - 1;
        let seqs = inputs.iter().map(|t| sequences(t)).collect::<Result<Vec<_>>>()?;
        out.insert(
            layer,
            LayerCalibration {
                channel: calibrate(inputs.iter().copied(), Granularity::PerChannel, axis, true)?,
                tensor: calibrate(inputs.iter().copied(), Granularity::PerTensor, axis, false)?,
                position: calibrate(seqs.iter().flatten(), Granularity::PerToken, 1, false)?,
            },
        );
    }
    Ok(out)
}

pub fn write_calibration_stats(cal: &BlockCalibration) -> Result<Container> {
    let mut c = Container::new();
    for (layer, s) in cal {
        let p = layer.name();
        s.channel.write_into(&mut c, &format!("{p}.per_channel"))?;
        s.tensor.write_into(&mut c, &format!("{p}.per_tensor"))?;
        s.position.write_into(&mut c, &format!("{p}.per_position"))?;
    }
    Ok(c)
}

pub fn read_calibration_stats(c: &Container) -> Result<BlockCalibration> {
    Layer::ALL
        .iter()
        .map(|&layer| {
            let p = layer.name();
            Ok((
                layer,
                LayerCalibration {
                    channel: CalibrationStats::read_from(c, &format!("{p}.per_channel"), Granularity::PerChannel, 2)?,
                    tensor: CalibrationStats::read_from(c, &format!("{p}.per_tensor"), Granularity::PerTensor, 2)?,
                    position: CalibrationStats::read_from(c, &format!("{p}.per_position"), Granularity::PerToken, 1)?,
                },
            ))
        })
        .collect()
}

/// Reconstruction and clipping decisions for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    /// Static layers only.
    pub reconstruction: Option<ReconstructionPlan>,
    pub clip: ClipPlan,
}

fn flatten_tokens(ts: &[&Tensor]) -> Result<Tensor> {
    let n = ts[0].cols();
    let mut data = Vec::new();
    for t in ts {
        data.extend_from_slice(t.reals()?);
    }
    Tensor::real(vec![data.len() / n, n], data)
}

fn static_layer(
    fp: &ToyBlock,
    layer: Layer,
    cal: &LayerCalibration,
    traces: &[FpTrace],
    cfg: &PipelineConfig,
    timings: &mut Timings,
) -> Result<(StaticRecipe, LayerPlan)> {
    let norm = fp.norm(layer).expect("static layers have a norm");
    let w = fp.weight(layer);
    let weight = cfg.weight_scheme();
    let raw = make_scales(&cal.channel, cfg.bits);
    let hessian = cal
        .channel
        .hessian_diag()
        .ok_or_else(|| Error::Format(format!("{}: missing Hessian diagonal", layer.name())))?;
    let initial = timings.run("plan", || build_plan(&raw, cfg.alpha, &hessian))?;
    let clip = timings.run("clip", || {
        // Weight scales of the folded matrix the search is choosing for.
        let folded = fold_rows(&gather_rows(w, &initial)?, &initial.slot_scales(&raw)?)?;
        let scales = WeightScheme::per_channel(weight.bits).quantize(&folded)?.w_scales;
        let ctx = WeightContext {
            scales: &scales,
            bits: weight.bits,
            threshold: Some(initial.threshold),
        };
        let x = flatten_tokens(&traces.iter().map(|t| t.layer_input(layer)).collect::<Vec<_>>())?;
        let plan = search_channel_clips(&x, w, &ctx, cfg.bits, &cfg.clip_grid)?;
        plan.validate()?;
        Ok(plan)
    })?;
    let clipped = clip.apply_to_scales(&raw)?;
    let plan = timings.run("plan", || {
        let plan = build_plan(&clipped, cfg.alpha, &hessian)?;
        plan.validate(&clipped)?;
        Ok(plan)
    })?;
    let recipe = timings.run("fold", || StaticRecipe::new(norm, w, &clipped, &plan))?;
    Ok((
        recipe,
        LayerPlan {
            reconstruction: Some(plan),
            clip,
        },
    ))
}

fn dynamic_layer(
    fp: &ToyBlock,
    layer: Layer,
    traces: &[FpTrace],
    cfg: &PipelineConfig,
    timings: &mut Timings,
) -> Result<(DynamicRecipe, LayerPlan)> {
    timings.run("clip", || {
        let rows = DynamicRecipe::new(fp.weight(layer), 1.0, cfg.hadamard)?.rows;
        let samples = traces
            .iter()
            .map(|t| {
                let x = t.layer_input(layer);
                if cfg.hadamard {
                    hadamard_rotate(x, Side::Activation)
                } else {
                    Ok(x.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let clip = search_token_clip(&samples, &rows, cfg.bits, &cfg.clip_grid)?;
        clip.validate()?;
        let ratio = clip.layer_ratio.expect("token search sets a layer ratio");
        Ok((
            DynamicRecipe {
                rows,
                clip_ratio: ratio,
                hadamard: cfg.hadamard,
            },
            LayerPlan {
                reconstruction: None,
                clip,
            },
        ))
    })
}

/// Plan, clip and fold every layer (no compensation).
pub fn build_recipe(
    fp: &ToyBlock,
    cal: &BlockCalibration,
    traces: &[FpTrace],
    cfg: &PipelineConfig,
    timings: &mut Timings,
) -> Result<(BlockRecipe, BTreeMap<Layer, LayerPlan>)> {
    let mut plans = BTreeMap::new();
    let (qkv, p) = static_layer(fp, Layer::Qkv, &cal[&Layer::Qkv], traces, cfg, timings)?;
    plans.insert(Layer::Qkv, p);
    let (gate_up, p) = static_layer(fp, Layer::GateUp, &cal[&Layer::GateUp], traces, cfg, timings)?;
    plans.insert(Layer::GateUp, p);
    let (out, p) = dynamic_layer(fp, Layer::Out, traces, cfg, timings)?;
    plans.insert(Layer::Out, p);
    let (down, p) = dynamic_layer(fp, Layer::Down, traces, cfg, timings)?;
    plans.insert(Layer::Down, p);
    Ok((
        BlockRecipe {
            config: fp.config,
            act_bits: cfg.bits,
            weight: cfg.weight_scheme(),
            qkv,
            out,
            gate_up,
            down,
            quantize: true,
        },
        plans,
    ))
}

/// Statically calibrated baseline: every site uses one fixed scale per
/// tensor or per sequence position, with RTN weights of the original
/// matrices.
pub fn baseline_block(
    fp: &ToyBlock,
    cal: &BlockCalibration,
    act_bits: u8,
    weight: &WeightScheme,
    granularity: Granularity,
) -> Result<QuantizedBlock> {
    let scales = |layer: Layer| -> Result<Vec<f64>> {
        let stats = match granularity {
            Granularity::PerTensor => &cal[&layer].tensor,
            Granularity::PerToken => &cal[&layer].position,
            other => return Err(Error::invalid(format!("{other:?} is not a baseline granularity"))),
        };
        Ok(make_scales(stats, act_bits))
    };
    let norm_site = |layer: Layer| -> Result<StaticSite> {
        Ok(StaticSite::Calibrated {
            norm: fp.norm(layer).expect("static layers have a norm").clone(),
            granularity,
            scales: scales(layer)?,
            linear: weight.quantize(fp.weight(layer))?,
        })
    };
    let plain_site = |layer: Layer| -> Result<LinearSite> {
        Ok(LinearSite::Calibrated {
            granularity,
            scales: scales(layer)?,
            linear: weight.quantize(fp.weight(layer))?,
        })
    };
    Ok(QuantizedBlock {
        config: fp.config,
        act_bits,
        qkv: norm_site(Layer::Qkv)?,
        out: plain_site(Layer::Out)?,
        gate_up: norm_site(Layer::GateUp)?,
        down: plain_site(Layer::Down)?,
    })
}

/// Everything `quantize` produces.
#[derive(Debug, Clone)]
pub struct QuantizeOutput {
    pub recipe: BlockRecipe,
    pub plans: BTreeMap<Layer, LayerPlan>,
    pub adapters: BlockAdapters,
    pub fit: Option<FitReport>,
    pub block: QuantizedBlock,
    pub per_tensor: QuantizedBlock,
    pub per_token: QuantizedBlock,
}

pub fn quantize_block(
    fp: &ToyBlock,
    cal: &BlockCalibration,
    batches: &[Tensor],
    cfg: &PipelineConfig,
    timings: &mut Timings,
) -> Result<QuantizeOutput> {
    let traces = timings.run("trace", || traces(fp, batches))?;
    let (recipe, plans) = build_recipe(fp, cal, &traces, cfg, timings)?;
    timings.run("weight-quant", || recipe.materialize(&BlockAdapters::none()))?;
    let (adapters, fit) = if cfg.lora.rank > 0 && cfg.lora.steps > 0 {
        let (a, r) = timings.run("compensate", || {
            fit_compensation(fp, &recipe, batches, &cfg.lora, cfg.seed.wrapping_add(1))
        })?;
        (a, Some(r))
    } else {
        (BlockAdapters::none(), None)
    };
    let block = timings.run("weight-quant", || recipe.materialize(&adapters))?;
    let (per_tensor, per_token) = timings.run("baseline", || {
        Ok((
            baseline_block(fp, cal, cfg.bits, &recipe.weight, Granularity::PerTensor)?,
            baseline_block(fp, cal, cfg.bits, &recipe.weight, Granularity::PerToken)?,
        ))
    })?;
    Ok(QuantizeOutput {
        recipe,
        plans,
        adapters,
        fit,
        block,
        per_tensor,
        per_token,
    })
}

/// Contents of an exported artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub fp: ToyBlock,
    pub block: QuantizedBlock,
    pub adapters: BlockAdapters,
    pub per_tensor: QuantizedBlock,
    pub per_token: QuantizedBlock,
    pub seed: u64,
}

impl Artifact {
    pub fn to_container(&self, plans: &BTreeMap<Layer, LayerPlan>) -> Result<Container> {
        let mut c = Container::new();
        // Two 32-bit halves: every u64 seed survives the f64 payload.
        c.insert_vec("meta.seed", &[(self.seed >> 32) as f64, (self.seed & 0xffff_ffff) as f64])?;
        self.fp.write_into(&mut c, "fp")?;
        self.block.write_into(&mut c, "q")?;
        self.adapters.write_into(&mut c, "q.lora")?;
        self.per_tensor.write_into(&mut c, "base.per_tensor")?;
        self.per_token.write_into(&mut c, "base.per_token")?;
        for (layer, p) in plans {
            let key = |s: &str| format!("plan.{}.{s}", layer.name());
            if let Some(r) = &p.reconstruction {
                c.insert_scalar(key("alpha"), r.alpha);
                c.insert_scalar(key("threshold"), r.threshold);
                c.insert_indices(key("gather"), &r.gather)?;
                c.insert_indices(key("outliers"), &r.outliers)?;
                c.insert_indices(key("prune"), &r.prune)?;
            }
            c.insert_vec(key("clip_ratios"), &p.clip.ratios())?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        Ok(Self {
            fp: ToyBlock::read_from(c, "fp")?,
            block: QuantizedBlock::read_from(c, "q")?,
            adapters: BlockAdapters::read_from(c, "q.lora")?,
            per_tensor: QuantizedBlock::read_from(c, "base.per_tensor")?,
            per_token: QuantizedBlock::read_from(c, "base.per_token")?,
            seed: match c.get_vec("meta.seed")?.as_slice() {
                &[hi, lo] => ((hi as u64) << 32) | lo as u64,
                _ => return Err(Error::Format("meta.seed must hold two entries".into())),
            },
        })
    }
}

fn readout(n: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let dist = Normal::new(0.0, 1.0 / (n as f64).sqrt()).map_err(|e| Error::Numeric(e.to_string()))?;
    Tensor::real(
        vec![n, READOUT_CLASSES],
        (0..n * READOUT_CLASSES).map(|_| dist.sample(&mut rng)).collect(),
    )
}

/// Summed cross-entropy of `logits` rows against `targets`.
fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let v = logits.cols();
    let data = logits.reals()?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(t, &k)| {
            let row = &data[t * v..(t + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            lse - row[k]
        })
        .sum())
}

fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let v = t.cols();
    Ok(t.reals()?
        .chunks(v)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
                .0
        })
        .collect())
}

struct BatchEval {
    sq_err: f64,
    ce: f64,
    layer_sq_err: [f64; 4],
}

/// Compare every variant in `artifact` with its fp block on `batches`.
pub fn evaluate(artifact: &Artifact, batches: &[Tensor]) -> Result<EvalSection> {
    let fp = &artifact.fp;
    let variants = [
        ("per_tensor", &artifact.per_tensor),
        ("per_token", &artifact.per_token),
        ("per_channel", &artifact.block),
    ];
    let head = readout(fp.config.hidden, artifact.seed)?;
    let per_batch = exec::map_range(batches.len(), |b| -> Result<_> {
        let trace = fp.forward_trace(&batches[b])?;
        let logits = matmul(&trace.y, &head)?;
        let targets = argmax_rows(&logits)?;
        let fp_ce = cross_entropy(&logits, &targets)?;
        let layer_ref = Layer::ALL
            .iter()
            .map(|&l| matmul(trace.layer_input(l), fp.weight(l)))
            .collect::<Result<Vec<_>>>()?;
        let evals = variants
            .iter()
            .map(|(_, q)| -> Result<BatchEval> {
                let y = q.forward(&batches[b])?;
                let mut layer_sq_err = [0.0; 4];
                for (i, &l) in Layer::ALL.iter().enumerate() {
                    layer_sq_err[i] = q.layer_forward(l, trace.site_input(l))?.sub(&layer_ref[i])?.sq_norm()?;
                }
                Ok(BatchEval {
                    sq_err: y.sub(&trace.y)?.sq_norm()?,
                    ce: cross_entropy(&matmul(&y, &head)?, &targets)?,
                    layer_sq_err,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let layer_len: Vec<usize> = layer_ref.iter().map(Tensor::len).collect();
        Ok((trace.y.sq_norm()?, trace.y.len(), targets.len(), fp_ce, layer_len, evals))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let elems: usize = per_batch.iter().map(|b| b.1).sum();
    let tokens: usize = per_batch.iter().map(|b| b.2).sum();
    let signal = per_batch.iter().map(|b| b.0).sum::<f64>() / elems as f64;
    let fp_ce = per_batch.iter().map(|b| b.3).sum::<f64>() / tokens as f64;
    let mut layer_len = [0usize; 4];
    for b in &per_batch {
        for i in 0..4 {
            layer_len[i] += b.4[i];
        }
    }
    let rows = variants
        .iter()
        .enumerate()
        .map(|(v, (name, _))| {
            let output_mse = per_batch.iter().map(|b| b.5[v].sq_err).sum::<f64>() / elems as f64;
            let ce = per_batch.iter().map(|b| b.5[v].ce).sum::<f64>() / tokens as f64;
            let layer_mse = Layer::ALL
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let s: f64 = per_batch.iter().map(|b| b.5[v].layer_sq_err[i]).sum();
                    (l.name().to_string(), s / layer_len[i] as f64)
                })
                .collect();
            EvalRow {
                calibration: name.to_string(),
                output_mse,
                relative_mse: output_mse / signal,
                cross_entropy: ce,
                layer_mse,
            }
        })
        .collect();
    Ok(EvalSection {
        act_bits: artifact.block.act_bits,
        batches: batches.len(),
        tokens,
        fp_cross_entropy: fp_ce,
        rows,
        note: "Synthetic inputs: output MSE against the fp block, and cross-entropy of a fixed random readout \
               against fp argmax targets, stand in for perplexity."
            .to_string(),
    })
}

fn summarize_stats(cal: &LayerCalibration) -> LayerStatsSummary {
    LayerStatsSummary {
        channels: cal.channel.max_abs().len(),
        samples: cal.channel.sample_count(),
        max_abs: cal.channel.max_abs().to_vec(),
        hessian_diag: cal.channel.hessian_diag().unwrap_or_default(),
        tensor_max_abs: cal.tensor.max_abs()[0],
    }
}

pub fn cmd_calibrate(cfg: &PipelineConfig, out: &Path, timings: &mut Timings) -> Result<CalibrateSection> {
    let fp = timings.run("load", || fp_block(cfg))?;
    let batches = timings.run("load", || calibration_batches(cfg))?;
    let traces = timings.run("trace", || traces(&fp, &batches))?;
    let cal = timings.run("calibrate", || calibrate_block(&traces))?;
    timings.run("export", || {
        write_calibration_stats(&cal)?.write(out.join(CALIBRATION_FILE))?;
        let mut model = Container::new();
        fp.write_into(&mut model, "fp")?;
        model.write(out.join(MODEL_FILE))
    })?;
    Ok(CalibrateSection {
        batches: batches.len(),
        tokens: batches.iter().map(Tensor::rows).sum(),
        layers: cal.iter().map(|(l, s)| (l.name().to_string(), summarize_stats(s))).collect(),
        stats_file: CALIBRATION_FILE.to_string(),
        model_file: MODEL_FILE.to_string(),
    })
}

fn rel_err(approx: &Tensor, exact: &Tensor) -> Result<f64> {
    let denom = exact.sq_norm()?;
    let num = approx.sub(exact)?.sq_norm()?;
    Ok(if denom > 0.0 { num / denom } else { num })
}

fn weight_rel_error(recipe: &BlockRecipe, block: &QuantizedBlock, layer: Layer) -> Result<f64> {
    match layer {
        Layer::Qkv | Layer::GateUp => {
            let (r, site) = if layer == Layer::Qkv {
                (&recipe.qkv, &block.qkv)
            } else {
                (&recipe.gate_up, &block.gate_up)
            };
            let linear = site.linear().expect("quantized site");
            let exact = fold_rows(&r.rows, &r.norm.scales)?;
            rel_err(&linear.dequantized_weight()?, &exact)
        }
        Layer::Out | Layer::Down => {
            let site: &LinearSite = if layer == Layer::Out { &block.out } else { &block.down };
            let linear = site.linear().expect("quantized site");
            rel_err(&linear.dequantized_weight()?, recipe.rows(layer))
        }
    }
}

pub fn cmd_quantize(cfg: &PipelineConfig, out: &Path, timings: &mut Timings) -> Result<(QuantizeSection, QuantizeOutput)> {
    let (fp, cal, batches) = timings.run("load", || {
        let model = out.join(MODEL_FILE);
        let fp = ToyBlock::read_from(&Container::read(&model)?, "fp")?;
        if fp.config != cfg.model {
            return Err(Error::Config(format!(
                "{}: model shape {:?} differs from config {:?}",
                model.display(),
                fp.config,
                cfg.model
            )));
        }
        let cal = read_calibration_stats(&Container::read(out.join(CALIBRATION_FILE))?)?;
        Ok((fp, cal, calibration_batches(cfg)?))
    })?;
    let q = quantize_block(&fp, &cal, &batches, cfg, timings)?;
    let uncompensated = q.recipe.materialize(&BlockAdapters::none())?;
    let artifact = Artifact {
        fp,
        block: q.block.clone(),
        adapters: q.adapters.clone(),
        per_tensor: q.per_tensor.clone(),
        per_token: q.per_token.clone(),
        seed: cfg.seed,
    };
    timings.run("export", || {
        artifact.to_container(&q.plans)?.write(out.join(ARTIFACT_FILE))?;
        let plans: BTreeMap<&str, &LayerPlan> = q.plans.iter().map(|(l, p)| (l.name(), p)).collect();
        let json = serde_json::json!({ "layers": plans, "compensation": q.fit });
        let path = out.join(PLANS_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&json)?).map_err(|e| Error::io(path, e))
    })?;
    let mut layers = BTreeMap::new();
    for layer in Layer::ALL {
        let p = &q.plans[&layer];
        let r = p.reconstruction.as_ref();
        layers.insert(
            layer.name().to_string(),
            LayerQuantSummary {
                kind: if layer.is_static() { "static" } else { "dynamic" }.to_string(),
                threshold: r.map(|r| r.threshold),
                outliers: r.map(|r| r.outliers.clone()).unwrap_or_default(),
                pruned: r.map(|r| r.prune.clone()).unwrap_or_default(),
                extra_slots: r.map_or(0, ReconstructionPlan::extra_slots),
                clip_ratios: p.clip.ratios(),
                weight_rel_error: weight_rel_error(&q.recipe, &uncompensated, layer)?,
            },
        );
    }
    let compensation = q.fit.as_ref().map(|f| CompensationSummary {
        rank: f.rank,
        steps: f.steps,
        step_size: f.step_size,
        initial_loss: f.initial_loss,
        best_loss: f.best_loss,
        best_step: f.best_step,
        ratio: if f.initial_loss > 0.0 { f.best_loss / f.initial_loss } else { 1.0 },
    });
    let section = QuantizeSection {
        act_bits: cfg.bits,
        weight_bits: cfg.weight_scheme().bits,
        alpha: cfg.alpha,
        hadamard: cfg.hadamard,
        layers,
        compensation,
        artifact_file: ARTIFACT_FILE.to_string(),
        plans_file: PLANS_FILE.to_string(),
    };
    Ok((section, q))
}

/// Reads only the artifact written by `quantize` (plus fresh eval inputs).
pub fn cmd_eval(cfg: &PipelineConfig, out: &Path, timings: &mut Timings) -> Result<EvalSection> {
    let artifact = timings.run("load", || Artifact::from_container(&Container::read(out.join(ARTIFACT_FILE))?))?;
    if artifact.fp.config != cfg.model {
        return Err(Error::Config("artifact model shape differs from config".into()).in_stage("load"));
    }
    if artifact.seed != cfg.seed {
        return Err(Error::Config(format!(
            "artifact was quantized with seed {}, eval runs with seed {}",
            artifact.seed, cfg.seed
        ))
        .in_stage("load"));
    }
    let batches = timings.run("load", || eval_batches(cfg))?;
    timings.run("eval", || evaluate(&artifact, &batches))
}
