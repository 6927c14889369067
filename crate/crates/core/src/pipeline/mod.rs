//! End-to-end pipeline: `calibrate` → `quantize` → `eval`, plus `bench`.
//!
//! Each command reads its inputs from and writes its outputs to one output
//! directory, so stages can be run separately:
//!
//! | command     | reads                        | writes                                  |
//! |-------------|------------------------------|-----------------------------------------|
//! | `calibrate` | config                       | `model.mqt`, `calibration.mqt`          |
//! | `quantize`  | `model.mqt`, `calibration.mqt` | `artifact.mqt`, `plans.json`          |
//! | `eval`      | `artifact.mqt`               |                                         |
//! | `bench`     | config                       |                                         |
//!
//! Every command also writes `<command>.json` or `<command>.csv`.

mod bench;
mod config;
mod report;
mod stages;

use std::path::{Path, PathBuf};

pub use bench::{bench_plan, cmd_bench, gather_ops_per_token, quant_dequant_ops_per_token, time_mean_ms};
pub use config::{BenchConfig, DataConfig, GranularityConfig, Paths, PipelineConfig};
pub use report::{
    BenchCell, BenchSection, BenchTiming, CalibrateSection, CompensationSummary, EvalRow, EvalSection,
    LayerQuantSummary, LayerStatsSummary, QuantizeSection, Report, REPORT_VERSION,
};
pub use stages::{
    baseline_block, build_recipe, calibrate_block, calibration_batches, cmd_calibrate, cmd_eval, cmd_quantize,
    eval_batches, evaluate, fp_block, quantize_block, read_calibration_stats, traces, write_calibration_stats,
    Artifact, BlockCalibration, LayerCalibration, LayerPlan, QuantizeOutput, Timings, ARTIFACT_FILE,
    CALIBRATION_FILE, EVAL_STREAM_OFFSET, MODEL_FILE, PLANS_FILE, READOUT_CLASSES,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Calibrate,
    Quantize,
    Eval,
    Bench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::Quantize => "quantize",
            Command::Eval => "eval",
            Command::Bench => "bench",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
        }
    }
}

/// Run one command, write its report into `out`, and return it.
pub fn run(
    command: Command,
    cfg: &PipelineConfig,
    raw_config: &serde_json::Value,
    out: &Path,
    format: Format,
) -> Result<(Report, PathBuf)> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut report = Report::new(command.name(), cfg.seed, raw_config.clone());
    let mut timings = Timings::default();
    match command {
        Command::Calibrate => report.calibrate = Some(cmd_calibrate(cfg, out, &mut timings)?),
        Command::Quantize => report.quantize = Some(cmd_quantize(cfg, out, &mut timings)?.0),
        Command::Eval => report.eval = Some(cmd_eval(cfg, out, &mut timings)?),
        Command::Bench => {
            report.bench = Some(timings.run("bench", || cmd_bench(&cfg.bench, cfg.bits, cfg.alpha, cfg.seed))?)
        }
    }
    report.timings = timings.0;
    let path = out.join(format!("{}.{}", command.name(), format.extension()));
    let text = match format {
        Format::Json => report.to_json()?,
        Format::Csv => report.to_csv()?,
    };
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok((report, path))
}
