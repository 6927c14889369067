use std::hint::black_box;
use std::time::Instant;

use crate::dimrec::{build_plan, reconstruct_activation, ReconstructionPlan};
use crate::error::{Error, Result};
use crate::exec;
use crate::quant::{calibrate, dequantize, make_scales, quantize_per_token_dynamic, Granularity};
use crate::tensor::Tensor;
use crate::toymodel::OutlierProfile;

use super::config::BenchConfig;
use super::report::{BenchCell, BenchSection, BenchTiming};

/// Tokens used to derive the benchmark's reconstruction plan.
const PLAN_TOKENS: usize = 256;

/// One copy per reconstructed slot.
pub fn gather_ops_per_token(plan: &ReconstructionPlan) -> usize {
    plan.dim()
}

/// Max-abs scan (`n`), scale (`1`), quantize (`n`), dequantize (`n`).
pub fn quant_dequant_ops_per_token(n: usize) -> usize {
    3 * n + 1
}

/// Reconstruction plan for width `n` calibrated on outlier data.
pub fn bench_plan(profile: &OutlierProfile, n: usize, bits: u8, alpha: f64) -> Result<ReconstructionPlan> {
    let x = profile.generate_stream(PLAN_TOKENS, n, 0)?;
    let stats = calibrate([&x], Granularity::PerChannel, 1, true)?;
    let h = stats.hessian_diag().expect("tracked");
    build_plan(&make_scales(&stats, bits), alpha, &h)
}

/// Mean wall-clock milliseconds of `f` over `reps` runs after `warmup`
/// discarded runs.
pub fn time_mean_ms<T>(reps: usize, warmup: usize, mut f: impl FnMut() -> T) -> f64 {
    for _ in 0..warmup {
        black_box(f());
    }
    let start = Instant::now();
    for _ in 0..reps {
        black_box(f());
    }
    start.elapsed().as_secs_f64() * 1e3 / reps as f64
}

/// Gather vs per-token quantize+dequantize over the configured grid, pinned
/// to one thread.
pub fn cmd_bench(cfg: &BenchConfig, bits: u8, alpha: f64, seed: u64) -> Result<BenchSection> {
    exec::single_threaded(|| {
        let mut cells = Vec::new();
        for &n in &cfg.hidden {
            let profile = OutlierProfile {
                outlier_channel_count: OutlierProfile::new(seed).outlier_channel_count.min(n),
                ..OutlierProfile::new(seed)
            };
            let plan = bench_plan(&profile, n, bits, alpha)?;
            for &batch in &cfg.batches {
                for &seq_len in &cfg.seq_lens {
                    let x = profile.generate_stream(batch * seq_len, n, 1)?;
                    let gather_ops = gather_ops_per_token(&plan);
                    let qd_ops = quant_dequant_ops_per_token(n);
                    if gather_ops >= qd_ops {
                        return Err(Error::Numeric(format!(
                            "op count check failed at n={n}: gather {gather_ops} vs quant+dequant {qd_ops}"
                        )));
                    }
                    let gather_ms = time_mean_ms(cfg.reps, cfg.warmup, || reconstruct_activation(&x, &plan));
                    let qd_ms = time_mean_ms(cfg.reps, cfg.warmup, || quant_dequant(&x, bits));
                    cells.push(BenchCell {
                        batch,
                        seq_len,
                        hidden: n,
                        gather_ops_per_token: gather_ops,
                        quant_dequant_ops_per_token: qd_ops,
                        timing: Some(BenchTiming {
                            gather_ms,
                            quant_dequant_ms: qd_ms,
                            speedup: qd_ms / gather_ms,
                        }),
                    });
                }
            }
        }
        Ok(BenchSection {
            reps: cfg.reps,
            warmup: cfg.warmup,
            act_bits: bits,
            threads: 1,
            cells,
            op_count_check: true,
        })
    })
}

fn quant_dequant(x: &Tensor, bits: u8) -> Result<Tensor> {
    dequantize(&quantize_per_token_dynamic(x, bits, 1.0)?)
}
