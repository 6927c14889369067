use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStatsSummary {
    pub channels: usize,
    pub samples: usize,
    /// Per-channel calibrated max-abs.
    pub max_abs: Vec<f64>,
    /// Hessian diagonal `Σ x²` per channel.
    pub hessian_diag: Vec<f64>,
    /// Per-tensor max-abs.
    pub tensor_max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateSection {
    pub batches: usize,
    pub tokens: usize,
    pub layers: BTreeMap<String, LayerStatsSummary>,
    pub stats_file: String,
    pub model_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantSummary {
    /// `static` (folded per-channel) or `dynamic` (per-token).
    pub kind: String,
    pub threshold: Option<f64>,
    pub outliers: Vec<usize>,
    pub pruned: Vec<usize>,
    pub extra_slots: usize,
    /// Per-channel ratios for static layers, one entry for dynamic layers.
    pub clip_ratios: Vec<f64>,
    /// `‖Ŵ − W‖² / ‖W‖²` of the exported effective weight.
    pub weight_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationSummary {
    pub rank: usize,
    pub steps: usize,
    pub step_size: f64,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_step: usize,
    /// `best_loss / initial_loss`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeSection {
    pub act_bits: u8,
    pub weight_bits: u8,
    pub alpha: f64,
    pub hadamard: bool,
    pub layers: BTreeMap<String, LayerQuantSummary>,
    pub compensation: Option<CompensationSummary>,
    pub artifact_file: String,
    pub plans_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// `per_tensor`, `per_token` or `per_channel`.
    pub calibration: String,
    pub output_mse: f64,
    /// `output_mse / mean(y_fp²)`.
    pub relative_mse: f64,
    pub cross_entropy: f64,
    /// Each site run alone on its fp input.
    pub layer_mse: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub act_bits: u8,
    pub batches: usize,
    pub tokens: usize,
    pub fp_cross_entropy: f64,
    pub rows: Vec<EvalRow>,
    pub note: String,
}

impl EvalSection {
    pub fn row(&self, calibration: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.calibration == calibration)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTiming {
    pub gather_ms: f64,
    pub quant_dequant_ms: f64,
    /// `quant_dequant_ms / gather_ms`.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub batch: usize,
    pub seq_len: usize,
    pub hidden: usize,
    /// Elementwise operations per token.
    pub gather_ops_per_token: usize,
    pub quant_dequant_ops_per_token: usize,
    pub timing: Option<BenchTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSection {
    pub reps: usize,
    pub warmup: usize,
    pub act_bits: u8,
    pub threads: usize,
    pub cells: Vec<BenchCell>,
    /// Gather used strictly fewer operations at every cell.
    pub op_count_check: bool,
}

/// Machine-readable output of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub toolkit_version: String,
    pub command: String,
    pub seed: u64,
    /// The config file exactly as given.
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibrate: Option<CalibrateSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantize: Option<QuantizeSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSection>,
    /// Wall-clock milliseconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl Report {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            report_version: REPORT_VERSION,
            toolkit_version: crate::VERSION.to_string(),
            command: command.to_string(),
            seed,
            config,
            calibrate: None,
            quantize: None,
            eval: None,
            bench: None,
            timings: BTreeMap::new(),
        }
    }

    /// Copy with every wall-clock measurement removed.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.timings.clear();
        if let Some(b) = &mut r.bench {
            b.cells.iter_mut().for_each(|c| c.timing = None);
        }
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Flat table of the command's main result, one record per row, each
    /// carrying the seed.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let seed = self.seed.to_string();
        let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        if let Some(c) = &self.calibrate {
            w.write_record(["seed", "layer", "channel", "max_abs", "hessian_diag"]).map_err(csv_err)?;
            for (layer, s) in &c.layers {
                for (k, (m, h)) in s.max_abs.iter().zip(&s.hessian_diag).enumerate() {
                    w.write_record([&seed, layer, &k.to_string(), &m.to_string(), &h.to_string()])
                        .map_err(csv_err)?;
                }
            }
        } else if let Some(q) = &self.quantize {
            w.write_record([
                "seed",
                "layer",
                "kind",
                "threshold",
                "outliers",
                "pruned",
                "extra_slots",
                "clip_ratio_min",
                "weight_rel_error",
            ])
            .map_err(csv_err)?;
            for (layer, s) in &q.layers {
                let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
                let min_ratio = s.clip_ratios.iter().cloned().fold(f64::INFINITY, f64::min);
                w.write_record([
                    &seed,
                    layer,
                    &s.kind,
                    &s.threshold.map(|t| t.to_string()).unwrap_or_default(),
                    &join(&s.outliers),
                    &join(&s.pruned),
                    &s.extra_slots.to_string(),
                    &min_ratio.to_string(),
                    &s.weight_rel_error.to_string(),
                ])
                .map_err(csv_err)?;
            }
        } else if let Some(e) = &self.eval {
            let mut header = vec!["seed", "calibration", "output_mse", "relative_mse", "cross_entropy"];
            let layers: Vec<String> = e.rows.first().map(|r| r.layer_mse.keys().cloned().collect()).unwrap_or_default();
            let cols: Vec<String> = layers.iter().map(|l| format!("{l}_mse")).collect();
            header.extend(cols.iter().map(String::as_str));
            w.write_record(&header).map_err(csv_err)?;
            for r in &e.rows {
                let mut rec = vec![
                    seed.clone(),
                    r.calibration.clone(),
                    r.output_mse.to_string(),
                    r.relative_mse.to_string(),
                    r.cross_entropy.to_string(),
                ];
                rec.extend(layers.iter().map(|l| r.layer_mse[l].to_string()));
                w.write_record(&rec).map_err(csv_err)?;
            }
        } else if let Some(b) = &self.bench {
            w.write_record([
                "seed",
                "batch",
                "seq_len",
                "hidden",
                "reps",
                "gather_ops_per_token",
                "quant_dequant_ops_per_token",
                "gather_ms",
                "quant_dequant_ms",
                "speedup",
            ])
            .map_err(csv_err)?;
            for c in &b.cells {
                let t = |f: fn(&BenchTiming) -> f64| c.timing.as_ref().map(|x| f(x).to_string()).unwrap_or_default();
                w.write_record([
                    seed.clone(),
                    c.batch.to_string(),
                    c.seq_len.to_string(),
                    c.hidden.to_string(),
                    b.reps.to_string(),
                    c.gather_ops_per_token.to_string(),
                    c.quant_dequant_ops_per_token.to_string(),
                    t(|x| x.gather_ms),
                    t(|x| x.quant_dequant_ms),
                    t(|x| x.speedup),
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}
