use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clip::default_grid;
use crate::compensate::LoraConfig;
use crate::error::{Error, Result};
use crate::quant::{Granularity, WeightScheme};
use crate::tensor::is_supported_bits;
use crate::toymodel::{BlockConfig, DataSource, OutlierProfile};

/// Input source as written in a config file. Synthetic profiles take their
/// seed from the pipeline seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        #[serde(default = "default_outlier_count")]
        outlier_channel_count: usize,
        #[serde(default = "default_magnitude")]
        magnitude_factor: f64,
        #[serde(default = "default_batch")]
        batch: usize,
        #[serde(default = "default_seq_len")]
        seq_len: usize,
    },
    Path(PathBuf),
}

fn default_outlier_count() -> usize {
    3
}

fn default_magnitude() -> f64 {
    100.0
}

fn default_batch() -> usize {
    4
}

fn default_seq_len() -> usize {
    32
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            outlier_channel_count: default_outlier_count(),
            magnitude_factor: default_magnitude(),
            batch: default_batch(),
            seq_len: default_seq_len(),
        }
    }
}

impl DataConfig {
    pub fn source(&self, seed: u64) -> DataSource {
        match self {
            DataConfig::Synthetic {
                outlier_channel_count,
                magnitude_factor,
                batch,
                seq_len,
            } => DataSource::Synthetic {
                profile: OutlierProfile {
                    outlier_channel_count: *outlier_channel_count,
                    magnitude_factor: *magnitude_factor,
                    seed,
                },
                batch: *batch,
                seq_len: *seq_len,
            },
            DataConfig::Path(p) => DataSource::Path(p.clone()),
        }
    }

    fn validate(&self, hidden: usize) -> Result<()> {
        if let DataConfig::Synthetic {
            outlier_channel_count,
            magnitude_factor,
            batch,
            seq_len,
        } = self
        {
            if *outlier_channel_count > hidden {
                return Err(Error::Config(format!(
                    "{outlier_channel_count} outlier channels exceed hidden size {hidden}"
                )));
            }
            if !magnitude_factor.is_finite() || *magnitude_factor <= 0.0 {
                return Err(Error::Config("magnitude_factor must be positive".into()));
            }
            if *batch == 0 || *seq_len == 0 {
                return Err(Error::Config("batch and seq_len must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Activation granularity per layer family. Only the per-channel static /
/// per-token dynamic split is implemented; the field documents it in every
/// report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GranularityConfig {
    #[serde(default = "default_static")]
    pub qkv_gate_up: Granularity,
    #[serde(default = "default_dynamic")]
    pub out_down: Granularity,
}

fn default_static() -> Granularity {
    Granularity::PerChannel
}

fn default_dynamic() -> Granularity {
    Granularity::PerToken
}

impl Default for GranularityConfig {
    fn default() -> Self {
        Self {
            qkv_gate_up: default_static(),
            out_down: default_dynamic(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_batches")]
    pub batches: Vec<usize>,
    #[serde(default = "default_seq_lens")]
    pub seq_lens: Vec<usize>,
    #[serde(default = "default_hiddens")]
    pub hidden: Vec<usize>,
}

fn default_reps() -> usize {
    500
}

fn default_warmup() -> usize {
    50
}

fn default_batches() -> Vec<usize> {
    vec![1, 16, 32]
}

fn default_seq_lens() -> Vec<usize> {
    vec![1, 128, 256]
}

fn default_hiddens() -> Vec<usize> {
    vec![64, 128, 256]
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            reps: default_reps(),
            warmup: default_warmup(),
            batches: default_batches(),
            seq_lens: default_seq_lens(),
            hidden: default_hiddens(),
        }
    }
}

/// Optional external inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// fp block container (prefix `fp`); a seeded random block otherwise.
    #[serde(default)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: BlockConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Evaluation inputs; defaults to fresh streams of `data`.
    #[serde(default)]
    pub eval_data: Option<DataConfig>,
    #[serde(default = "default_calib_batches")]
    pub calib_batches: usize,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    /// Activation bit-width.
    #[serde(default = "default_bits")]
    pub bits: u8,
    /// Weight scheme; per-channel RTN at `bits` when absent.
    #[serde(default)]
    pub weight: Option<WeightScheme>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_grid")]
    pub clip_grid: Vec<f64>,
    #[serde(default)]
    pub granularity: GranularityConfig,
    #[serde(default)]
    pub hadamard: bool,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub paths: Paths,
}

fn default_calib_batches() -> usize {
    4
}

fn default_eval_batches() -> usize {
    2
}

fn default_bits() -> u8 {
    4
}

fn default_alpha() -> f64 {
    2.0
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl PipelineConfig {
    /// Parse and validate. Returns the raw JSON value too, for the report
    /// echo.
    pub fn from_json(text: &str) -> Result<(Self, serde_json::Value)> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: Self = serde_json::from_value(raw.clone()).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok((cfg, raw))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn weight_scheme(&self) -> WeightScheme {
        self.weight.unwrap_or_else(|| WeightScheme::per_channel(self.bits))
    }

    pub fn eval_data(&self) -> &DataConfig {
        self.eval_data.as_ref().unwrap_or(&self.data)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate(self.model.hidden)?;
        if let Some(d) = &self.eval_data {
            d.validate(self.model.hidden)?;
        }
        if self.calib_batches == 0 || self.eval_batches == 0 {
            return Err(Error::Config("calib_batches and eval_batches must be positive".into()));
        }
        if !is_supported_bits(self.bits) {
            return Err(Error::Config(format!("unsupported activation bit-width {}", self.bits)));
        }
        let w = self.weight_scheme();
        if !is_supported_bits(w.bits) {
            return Err(Error::Config(format!("unsupported weight bit-width {}", w.bits)));
        }
        if w.group == Some(0) {
            return Err(Error::Config("weight group size must be positive".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha {} must be finite and nonnegative", self.alpha)));
        }
        crate::clip::check_grid(&self.clip_grid).map_err(|e| Error::Config(e.to_string()))?;
        if self.granularity != GranularityConfig::default() {
            return Err(Error::Config(
                "only per_channel static (qkv, gate_up) and per_token dynamic (out, down) are supported".into(),
            ));
        }
        if self.hadamard && !self.model.ffn.is_power_of_two() {
            return Err(Error::Config(format!("hadamard needs a power-of-two ffn size, got {}", self.model.ffn)));
        }
        self.lora.validate()?;
        let b = &self.bench;
        if b.reps == 0 || b.batches.is_empty() || b.seq_lens.is_empty() || b.hidden.is_empty() {
            return Err(Error::Config("bench grid and reps must be nonempty".into()));
        }
        if b.batches.iter().chain(&b.seq_lens).chain(&b.hidden).any(|&v| v == 0) {
            return Err(Error::Config("bench grid entries must be positive".into()));
        }
        Ok(())
    }
}
