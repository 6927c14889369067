//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each, and exits nonzero if any failed.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use chanquant::clip::ClipPlan;
use chanquant::compensate::{fit_compensation, BlockAdapters, LoraConfig};
use chanquant::dimrec::{
    build_plan, compute_threshold, gather_rows, identify_neighbors, reconstruct_activation, reconstruct_norm_and_weights,
    reconstruct_weight_rows, select_prune_channels, split_scale, split_strong_params, ReconstructionPlan,
};
use chanquant::exact_sum::fsum;
use chanquant::pipeline::{
    self, build_recipe, calibrate_block, calibration_batches, eval_batches, evaluate, fp_block, quantize_block, traces,
    Artifact, Command, Format, PipelineConfig, Report, Timings,
};
use chanquant::qsm::{fold_quant_into_norm, fold_rows, folded_norm_forward, FoldedNorm};
use chanquant::quant::{
    calibrate, dequantize, hadamard_rotate, make_scales, quantize, quantize_weights, quantized_linear, Granularity,
    QuantScheme, Side, WeightScheme,
};
use chanquant::tensor::{matmul, qmax, rmsnorm, round_even};
use chanquant::toymodel::{Layer, OutlierProfile, ToyBlock};
use chanquant::{NormParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// `‖a − b‖ / ‖b‖` (absolute when `b` is zero).
fn rel(a: &Tensor, b: &Tensor) -> f64 {
    let (a, b) = (a.reals().unwrap(), b.reals().unwrap());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    Tensor::real(shape, (0..len).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn random_gamma(rng: &mut ChaCha8Rng, n: usize) -> NormParams {
    NormParams::rms((0..n).map(|_| rng.random_range(0.5..1.5)).collect())
}

fn ints_as_reals(t: &Tensor) -> Tensor {
    t.to_real()
}

fn max_abs_scales(x: &Tensor, bits: u8) -> Vec<f64> {
    make_scales(&calibrate([x], Granularity::PerChannel, 1, false).unwrap(), bits)
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("runtime {:.2}s exceeds {:?}", t.as_secs_f64(), limit))
}

fn fold_quant() -> Check {
    let start = Instant::now();
    let (mut total, mut mismatched, mut worst) = (0usize, 0usize, 0i32);
    for n in [8, 64, 512] {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + n as u64);
            let x = gaussian(&mut rng, vec![1000, n]);
            let norm = random_gamma(&mut rng, n);
            let normed = e2s(rmsnorm(&x, &norm))?;
            let scales = max_abs_scales(&normed, 4);
            let folded = e2s(folded_norm_forward(&x, &e2s(fold_quant_into_norm(&norm, &scales))?, 4))?;
            let reference = e2s(quantize(&normed, &scales, &QuantScheme::symmetric(4, Granularity::PerChannel)))?;
            for (a, b) in folded.ints.ints().unwrap().iter().zip(reference.ints.ints().unwrap()) {
                total += 1;
                if a != b {
                    mismatched += 1;
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    let rate = 1.0 - mismatched as f64 / total as f64;
    ensure(rate >= 0.999, || format!("match rate {rate:.6}"))?;
    ensure(worst <= 1, || format!("max |delta| {worst}"))?;
    within(Duration::from_secs(10), start)?;
    Ok(format!("match rate {rate:.6} over {total} elements, max |delta| {worst}"))
}

fn fold_dequant() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let profile = OutlierProfile::new(2);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let x = e2s(profile.generate_stream(16, 64, trial))?;
        let w = gaussian(&mut rng, vec![64, 16]);
        let scales = max_abs_scales(&x, 4);
        let xq = e2s(quantize(&x, &scales, &QuantScheme::symmetric(4, Granularity::PerChannel)))?;
        let eq3 = e2s(matmul(&e2s(dequantize(&xq))?, &w))?;
        let eq5 = e2s(matmul(&ints_as_reals(&xq.ints), &e2s(fold_rows(&w, &scales))?))?;
        worst = worst.max(rel(&eq5, &eq3));
    }
    ensure(worst <= 1e-9, || format!("relative error {worst:e}"))?;
    within(Duration::from_secs(5), start)?;
    Ok(format!("max relative error {worst:.2e} over 100 trials"))
}

fn integer_gemm() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(1..=32);
        let k = [16, 64, 128][rng.random_range(0..3)];
        let n = rng.random_range(1..=32);
        let act_bits = [4, 8][rng.random_range(0..2)];
        let x = gaussian(&mut rng, vec![m, k]);
        let w = gaussian(&mut rng, vec![k, n]);
        let xq = if rng.random_bool(0.5) {
            e2s(chanquant::quant::quantize_per_token_dynamic(&x, act_bits, 1.0))?
        } else {
            let s = make_scales(&calibrate([&x], Granularity::PerTensor, 1, false).unwrap(), act_bits);
            e2s(quantize(&x, &s, &QuantScheme::symmetric(act_bits, Granularity::PerTensor)))?
        };
        let scheme = WeightScheme {
            bits: [4, 8][rng.random_range(0..2)],
            group: if rng.random_bool(0.5) { Some(16) } else { None },
            symmetric: rng.random_bool(0.5),
        };
        let wq = e2s(quantize_weights(&w, &scheme))?;
        let int_path = e2s(quantized_linear(&xq, &wq))?;
        let real_path = e2s(matmul(&e2s(dequantize(&xq))?, &e2s(wq.dequantized_weight())?))?;
        worst = worst.max(rel(&int_path, &real_path));
    }
    ensure(worst <= 1e-12, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e} over 100 instances"))
}

/// Folded norm and calibrated scales for an outlier-heavy layer input.
fn static_layer_case(seed: u64, n: usize, tokens: usize) -> (Tensor, NormParams, Vec<f64>, Vec<f64>, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profile = OutlierProfile::new(seed);
    let x = profile.generate_stream(tokens, n, 0).unwrap();
    let norm = random_gamma(&mut rng, n);
    let normed = rmsnorm(&x, &norm).unwrap();
    let stats = calibrate([&normed], Granularity::PerChannel, 1, true).unwrap();
    let w = gaussian(&mut rng, vec![n, 24]);
    (x, norm, make_scales(&stats, 4), stats.hessian_diag().unwrap(), w)
}

fn lossless_reconstruction() -> Check {
    let mut worst = 0.0f64;
    let mut splits_seen = 0;
    for seed in 0..10u64 {
        for n in [64, 128] {
            let (x, norm, scales, _, w) = static_layer_case(seed, n, 256);
            let t = e2s(compute_threshold(&scales, 2.0))?;
            let (splits, outliers) = e2s(split_strong_params(&scales, t))?;
            ensure(!splits.is_empty(), || format!("seed {seed}: nothing to split"))?;
            splits_seen += splits.len();
            for (&k, pieces) in &splits {
                ensure(pieces.iter().all(|&p| p > 0.0 && p <= t), || format!("channel {k}: piece above T"))?;
                ensure(fsum(pieces.iter().copied()) == scales[k], || format!("channel {k}: pieces do not sum to s_k"))?;
            }
            let gather: Vec<usize> = (0..n)
                .flat_map(|k| std::iter::repeat_n(k, splits.get(&k).map_or(1, Vec::len)))
                .collect();
            let plan = ReconstructionPlan {
                alpha: 2.0,
                threshold: t,
                splits: splits.clone(),
                outliers,
                neighbors: vec![],
                prune: vec![],
                gather: gather.clone(),
            };
            let slot_scales: Vec<f64> = (0..n)
                .flat_map(|k| splits.get(&k).cloned().unwrap_or_else(|| vec![scales[k]]))
                .collect();
            let base = e2s(fold_quant_into_norm(&norm, &scales))?;
            let original_q = e2s(folded_norm_forward(&x, &base, 4))?;
            let original = e2s(matmul(&e2s(dequantize(&original_q))?, &w))?;

            let widened = FoldedNorm {
                base: norm.clone(),
                folded_gamma: gather.iter().map(|&k| base.folded_gamma[k]).collect(),
                folded_beta: None,
                scales: slot_scales.clone(),
                gather: Some(gather.clone()),
            };
            let q = e2s(folded_norm_forward(&x, &widened, 4))?;
            let gathered = e2s(reconstruct_activation(&ints_as_reals(&original_q.ints), &plan))?;
            ensure(q.ints.to_real() == gathered, || "widened norm disagrees with gathered integers".into())?;
            let rows: Vec<f64> = gather
                .iter()
                .zip(&slot_scales)
                .flat_map(|(&k, &p)| w.row(k).unwrap().iter().map(move |v| p * v))
                .collect();
            let rows = e2s(Tensor::real(vec![gather.len(), w.cols()], rows))?;
            let rebuilt = e2s(matmul(&ints_as_reals(&q.ints), &rows))?;
            worst = worst.max(rel(&rebuilt, &original));
        }
    }
    ensure(worst <= 1e-9, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}, {splits_seen} split channels, pieces <= T and exact sums"))
}

fn pruning_identity() -> Check {
    let mut worst = 0.0f64;
    let mut pruned_total = 0;
    for seed in 0..10u64 {
        for n in [64, 128] {
            let (x, norm, scales, hessian, w) = static_layer_case(seed, n, 256);
            let plan = e2s(build_plan(&scales, 2.0, &hessian))?;
            e2s(plan.validate(&scales))?;
            ensure(!plan.prune.is_empty(), || format!("seed {seed}: nothing pruned"))?;
            pruned_total += plan.prune.len();
            let base = e2s(fold_quant_into_norm(&norm, &scales))?;
            let q = e2s(folded_norm_forward(&x, &base, 4))?;
            let original = e2s(matmul(&e2s(dequantize(&q))?, &w))?;

            let (norm_r, _) = e2s(reconstruct_norm_and_weights(&base, &w, &plan, &WeightScheme::per_channel(8)))?;
            let q_r = e2s(folded_norm_forward(&x, &norm_r, 4))?;
            let rows = e2s(reconstruct_weight_rows(&w, &plan, &e2s(plan.slot_scales(&scales))?))?;
            let rebuilt = e2s(matmul(&ints_as_reals(&q_r.ints), &rows))?;

            // Σ_{k pruned} s_k · q_k · W_k, from the unreconstructed integers.
            let (tokens, j) = (x.rows(), w.cols());
            let qi = q.ints.ints().unwrap();
            let mut lost = vec![0.0; tokens * j];
            for t in 0..tokens {
                for &k in &plan.prune {
                    let a = scales[k] * qi[t * n + k] as f64;
                    for (c, wv) in w.row(k).unwrap().iter().enumerate() {
                        lost[t * j + c] += a * wv;
                    }
                }
            }
            let restored = e2s(rebuilt.add(&Tensor::real(vec![tokens, j], lost).unwrap()))?;
            worst = worst.max(rel(&restored, &original));
        }
    }
    ensure(worst <= 1e-9, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}, {pruned_total} channels pruned"))
}

/// Every `m`-subset of `pool`, in lexicographic order.
fn subsets(pool: &[usize], m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    if pool.len() < m {
        return vec![];
    }
    let mut out: Vec<Vec<usize>> = subsets(&pool[1..], m - 1)
        .into_iter()
        .map(|mut s| {
            s.insert(0, pool[0]);
            s
        })
        .collect();
    out.extend(subsets(&pool[1..], m));
    out
}

/// Enumerate every admissible prune set and keep the lightest; equal
/// weights go to the lexicographically smaller index set.
fn prune_oracle(outliers: &[usize], n: usize, m: usize, h: &[f64]) -> Vec<usize> {
    let neighbors: Vec<usize> = (0..n)
        .filter(|k| !outliers.contains(k))
        .filter(|&k| outliers.iter().any(|&o| o + 1 == k || k + 1 == o))
        .collect();
    let pool: Vec<usize> = if neighbors.len() >= m {
        neighbors.clone()
    } else {
        (0..n).filter(|k| !outliers.contains(k)).collect()
    };
    let mut best: Option<(Vec<f64>, Vec<usize>)> = None;
    for s in subsets(&pool, m) {
        if neighbors.len() < m && !neighbors.iter().all(|k| s.contains(k)) {
            continue;
        }
        let mut weights: Vec<f64> = s.iter().map(|&k| h[k]).collect();
        weights.sort_by(f64::total_cmp);
        let better = match &best {
            None => true,
            Some((bw, bs)) => match weights.partial_cmp(bw).unwrap() {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Equal => s < *bs,
                _ => false,
            },
        };
        if better {
            best = Some((weights, s));
        }
    }
    best.expect("admissible prune set").1
}

fn prune_table() -> Check {
    let n = 10;
    // Adjacent outliers, a neighbor shared between two outliers, boundary outliers.
    let cases: [&[usize]; 4] = [&[4, 5], &[3, 5], &[0], &[0, 9]];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    let mut regimes = [0usize; 3];
    for outliers in cases {
        let neighbors = identify_neighbors(outliers, n);
        let expected_neighbors: Vec<usize> = (0..n)
            .filter(|k| !outliers.contains(k))
            .filter(|&k| outliers.iter().any(|&o| o + 1 == k || k + 1 == o))
            .collect();
        ensure(neighbors == expected_neighbors, || {
            format!("neighbors of {outliers:?}: {neighbors:?} vs {expected_neighbors:?}")
        })?;
        for m in 1..=neighbors.len() + 2 {
            for trial in 0..20 {
                let h: Vec<f64> = if trial == 0 {
                    vec![1.0; n]
                } else {
                    (0..n).map(|_| rng.random_range(0..6) as f64).collect()
                };
                let got = e2s(select_prune_channels(&neighbors, m, &h, outliers))?;
                let want = prune_oracle(outliers, n, m, &h);
                ensure(got == want, || {
                    format!("outliers {outliers:?}, M={m}, h={h:?}: {got:?} vs oracle {want:?}")
                })?;
                checked += 1;
            }
            let idx = match neighbors.len().cmp(&m) {
                std::cmp::Ordering::Greater => 0,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 2,
            };
            regimes[idx] += 1;
        }
    }
    ensure(regimes.iter().all(|&c| c > 0), || format!("regime coverage {regimes:?}"))?;
    Ok(format!(
        "{checked} cases match the oracle (N>M: {}, N=M: {}, N<M: {} settings)",
        regimes[0], regimes[1], regimes[2]
    ))
}

fn quantize_once(cfg: &PipelineConfig) -> Result<(ToyBlock, pipeline::QuantizeOutput), String> {
    let fp = e2s(fp_block(cfg))?;
    let batches = e2s(calibration_batches(cfg))?;
    let cal = e2s(calibrate_block(&e2s(traces(&fp, &batches))?))?;
    let q = e2s(quantize_block(&fp, &cal, &batches, cfg, &mut Timings::default()))?;
    Ok((fp, q))
}

fn fig1_ordering() -> Check {
    let start = Instant::now();
    let mut ratios = Vec::new();
    for seed in 0..5u64 {
        let cfg = PipelineConfig {
            seed,
            lora: LoraConfig { steps: 0, ..LoraConfig::default() },
            ..PipelineConfig::default()
        };
        let (fp, q) = quantize_once(&cfg)?;
        let artifact = Artifact {
            fp,
            block: q.block,
            adapters: q.adapters,
            per_tensor: q.per_tensor,
            per_token: q.per_token,
            seed,
        };
        let eval = e2s(evaluate(&artifact, &e2s(eval_batches(&cfg))?))?;
        let tensor = eval.row("per_tensor").unwrap().output_mse;
        let channel = eval.row("per_channel").unwrap().output_mse;
        ensure(channel > 0.0 && tensor >= 2.0 * channel, || {
            format!("seed {seed}: per-tensor {tensor:.4e} vs per-channel {channel:.4e}")
        })?;
        ratios.push(tensor / channel);
    }
    within(Duration::from_secs(30), start)?;
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!("per-tensor / per-channel output MSE >= {min:.2} over 5 seeds {ratios:.2?}"))
}

/// Independent per-channel loss: activation round-off plus the folded
/// weight row's round-off for every split piece.
fn channel_loss(x: &[f64], w_row: &[f64], w_scales: &[f64], t: f64, act_bits: u8, w_bits: u8, ratio: f64) -> f64 {
    let max_abs = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let qa = qmax(act_bits) as f64;
    let s = ratio * max_abs / qa;
    let act: f64 = x.iter().map(|&v| (s * round_even(v / s).clamp(-qa, qa) - v).powi(2)).sum();
    let qw = qmax(w_bits) as f64;
    let mut weight = 0.0;
    for p in split_scale(s, t) {
        for (&w, &ws) in w_row.iter().zip(w_scales) {
            weight += (ws * round_even(p * w / ws).clamp(-qw, qw) - p * w).powi(2);
        }
    }
    act + weight
}

fn token_loss(samples: &[&Tensor], w: &Tensor, bits: u8, ratio: f64) -> f64 {
    let q = qmax(bits) as f64;
    let mut loss = 0.0;
    for x in samples {
        let n = x.cols();
        let data = x.reals().unwrap();
        let deq: Vec<f64> = data
            .chunks(n)
            .flat_map(|row| {
                let m = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let s = ratio * m / q;
                row.iter().map(move |&v| if s > 0.0 { s * round_even(v / s).clamp(-q, q) } else { 0.0 })
            })
            .collect();
        let flat = (*x).clone().reshape(vec![x.rows(), n]).unwrap();
        let approx = matmul(&Tensor::real(vec![x.rows(), n], deq).unwrap(), w).unwrap();
        let exact = matmul(&flat, w).unwrap();
        loss += approx.sub(&exact).unwrap().sq_norm().unwrap();
    }
    loss
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0)
}

fn clip_non_worsening() -> Check {
    let cfg = PipelineConfig::default();
    let fp = e2s(fp_block(&cfg))?;
    let batches = e2s(calibration_batches(&cfg))?;
    let tr = e2s(traces(&fp, &batches))?;
    let cal = e2s(calibrate_block(&tr))?;
    let (_, plans) = e2s(build_recipe(&fp, &cal, &tr, &cfg, &mut Timings::default()))?;
    let one = cfg.clip_grid.iter().position(|&r| r == 1.0).ok_or("grid lacks 1.0")?;
    let (mut channels, mut clipped, mut worst_gap) = (0usize, 0usize, 0.0f64);
    let w_bits = cfg.weight_scheme().bits;
    for layer in [Layer::Qkv, Layer::GateUp] {
        let clip: &ClipPlan = &plans[&layer].clip;
        let ratios = clip.per_channel_ratios.as_ref().ok_or("static layer without channel ratios")?;
        let raw = make_scales(&cal[&layer].channel, cfg.bits);
        let hessian = cal[&layer].channel.hessian_diag().unwrap();
        let initial = e2s(build_plan(&raw, cfg.alpha, &hessian))?;
        let w = fp.weight(layer);
        let folded = e2s(fold_rows(&e2s(gather_rows(w, &initial))?, &e2s(initial.slot_scales(&raw))?))?;
        let w_scales = e2s(quantize_weights(&folded, &WeightScheme::per_channel(w_bits)))?.w_scales;
        let inputs: Vec<&Tensor> = tr.iter().map(|t| t.layer_input(layer)).collect();
        let n = w.rows();
        for k in 0..n {
            let col: Vec<f64> = inputs
                .iter()
                .flat_map(|t| t.reals().unwrap().chunks(n).map(move |r| r[k]))
                .collect();
            let sel = clip.grid.iter().position(|&r| r == ratios[k]).unwrap();
            let mine_sel = channel_loss(&col, w.row(k).unwrap(), &w_scales, initial.threshold, cfg.bits, w_bits, ratios[k]);
            let mine_one = channel_loss(&col, w.row(k).unwrap(), &w_scales, initial.threshold, cfg.bits, w_bits, 1.0);
            ensure(clip.losses[k][sel] <= clip.losses[k][one], || format!("{layer:?}/{k}: selected loss above ratio 1"))?;
            ensure(close(mine_sel, clip.losses[k][sel]) && close(mine_one, clip.losses[k][one]), || {
                format!("{layer:?}/{k}: recomputed {mine_sel} / {mine_one} vs {} / {}", clip.losses[k][sel], clip.losses[k][one])
            })?;
            ensure(mine_sel <= mine_one * (1.0 + 1e-10), || format!("{layer:?}/{k}: recomputed loss worsens"))?;
            worst_gap = worst_gap.max((mine_sel - clip.losses[k][sel]).abs() / mine_sel.max(1.0));
            channels += 1;
            clipped += usize::from(ratios[k] < 1.0);
        }
    }
    for layer in [Layer::Out, Layer::Down] {
        let clip = &plans[&layer].clip;
        let r = clip.layer_ratio.ok_or("dynamic layer without a ratio")?;
        let sel = clip.grid.iter().position(|&g| g == r).unwrap();
        let inputs: Vec<&Tensor> = tr.iter().map(|t| t.layer_input(layer)).collect();
        let (mine_sel, mine_one) = (token_loss(&inputs, fp.weight(layer), cfg.bits, r), token_loss(&inputs, fp.weight(layer), cfg.bits, 1.0));
        ensure(clip.losses[0][sel] <= clip.losses[0][one], || format!("{layer:?}: selected loss above ratio 1"))?;
        ensure(close(mine_sel, clip.losses[0][sel]) && close(mine_one, clip.losses[0][one]), || {
            format!("{layer:?}: recomputed {mine_sel} / {mine_one} vs {} / {}", clip.losses[0][sel], clip.losses[0][one])
        })?;
        channels += 1;
    }
    Ok(format!(
        "{channels} channel/layer searches, {clipped} static channels clipped below 1.0, recompute gap {worst_gap:.1e}"
    ))
}

fn hadamard_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_pair = 0.0f64;
    for n in [16, 64, 256] {
        let x = gaussian(&mut rng, vec![32, n]);
        let w = gaussian(&mut rng, vec![n, 24]);
        let paired = e2s(matmul(
            &e2s(hadamard_rotate(&x, Side::Activation))?,
            &e2s(hadamard_rotate(&w, Side::Weight))?,
        ))?;
        worst_pair = worst_pair.max(rel(&paired, &e2s(matmul(&x, &w))?));
    }
    ensure(worst_pair <= 1e-10, || format!("pair identity error {worst_pair:e}"))?;
    let per_tensor_mse = |x: &Tensor, bits: u8| -> f64 {
        let s = make_scales(&calibrate([x], Granularity::PerTensor, 1, false).unwrap(), bits);
        let q = quantize(x, &s, &QuantScheme::symmetric(bits, Granularity::PerTensor)).unwrap();
        dequantize(&q).unwrap().sub(x).unwrap().sq_norm().unwrap() / x.len() as f64
    };
    let (mut gains, mut a4_decreases) = (Vec::new(), 0);
    for seed in 0..5u64 {
        let x = e2s(OutlierProfile::new(seed).generate_stream(512, 64, 0))?;
        let rotated = e2s(hadamard_rotate(&x, Side::Activation))?;
        let (before, after) = (per_tensor_mse(&x, 8), per_tensor_mse(&rotated, 8));
        ensure(after < before, || format!("seed {seed}: {after:e} >= {before:e}"))?;
        gains.push(before / after);
        // At 4 bits the unrotated quantizer flushes every normal channel to
        // zero, so rotation does not reliably help; reported only.
        a4_decreases += usize::from(per_tensor_mse(&rotated, 4) < per_tensor_mse(&x, 4));
    }
    Ok(format!(
        "pair error {worst_pair:.1e}; 8-bit per-tensor MSE reduced {gains:.1?}x over 5 seeds \
         (4-bit: reduced for {a4_decreases}/5, not asserted)"
    ))
}

fn compensation() -> Check {
    let start = Instant::now();
    let cfg = PipelineConfig {
        lora: LoraConfig { rank: 4, steps: 200, ..LoraConfig::default() },
        ..PipelineConfig::default()
    };
    let fp = e2s(fp_block(&cfg))?;
    let batches = e2s(calibration_batches(&cfg))?;
    let tr = e2s(traces(&fp, &batches))?;
    let cal = e2s(calibrate_block(&tr))?;
    let (recipe, _) = e2s(build_recipe(&fp, &cal, &tr, &cfg, &mut Timings::default()))?;
    let (adapters, fit) = e2s(fit_compensation(&fp, &recipe, &batches, &cfg.lora, 7))?;
    let mse = |a: &BlockAdapters| -> Result<f64, String> {
        let block = e2s(recipe.materialize(a))?;
        let (mut err, mut count) = (0.0, 0usize);
        for (x, t) in batches.iter().zip(&tr) {
            err += e2s(e2s(block.forward(x))?.sub(&t.y))?.sq_norm().unwrap();
            count += t.y.len();
        }
        Ok(err / count as f64)
    };
    let (before, after) = (mse(&BlockAdapters::none())?, mse(&adapters)?);
    let ratio = after / before;
    ensure(ratio <= 0.9, || format!("compensated / uncompensated MSE {ratio:.4}"))?;
    ensure(fit.best_loss <= fit.initial_loss, || "best loss exceeds initial".into())?;
    ensure(fit.losses.iter().all(|&l| l >= fit.best_loss), || "best loss is not the minimum seen".into())?;
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "MSE {before:.4e} -> {after:.4e} (ratio {ratio:.3}), best {:.4e} at step {} <= initial {:.4e}",
        fit.best_loss, fit.best_step, fit.initial_loss
    ))
}

fn bench_report() -> Check {
    let dir = e2s(tempfile::tempdir())?;
    let (cfg, raw) = e2s(PipelineConfig::from_json("{}"))?;
    let (_, path) = e2s(pipeline::run(Command::Bench, &cfg, &raw, dir.path(), Format::Json))?;
    let report = e2s(Report::from_json(&e2s(std::fs::read_to_string(&path))?))?;
    let bench = report.bench.ok_or("report has no bench section")?;
    ensure(bench.reps == 500, || format!("reps {}", bench.reps))?;
    ensure(bench.cells.len() == 27, || format!("{} grid cells", bench.cells.len()))?;
    ensure(bench.op_count_check, || "op-count check not recorded".into())?;
    let mut best: f64 = 0.0;
    for c in &bench.cells {
        ensure(c.gather_ops_per_token < c.quant_dequant_ops_per_token, || {
            format!("({}, {}, {}): op counts {} vs {}", c.batch, c.seq_len, c.hidden, c.gather_ops_per_token, c.quant_dequant_ops_per_token)
        })?;
        let t = c.timing.as_ref().ok_or("cell without timing")?;
        ensure(t.gather_ms.is_finite() && t.quant_dequant_ms.is_finite(), || "non-finite timing".into())?;
        best = best.max(t.speedup);
    }
    Ok(format!("27 cells x 500 reps, gather ops < quant+dequant ops everywhere, max speedup {best:.2}x (reported only)"))
}

fn run_pipeline(dir: &Path, raw: &serde_json::Value) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let cfg: PipelineConfig = e2s(PipelineConfig::from_json(&raw.to_string()))?.0;
    let mut out = BTreeMap::new();
    for cmd in [Command::Calibrate, Command::Quantize, Command::Eval, Command::Bench] {
        let (report, _) = e2s(pipeline::run(cmd, &cfg, raw, dir, Format::Json))?;
        out.insert(format!("{}.report", cmd.name()), e2s(report.without_timings().to_json())?.into_bytes());
    }
    for file in ["model.mqt", "calibration.mqt", "artifact.mqt", "plans.json"] {
        out.insert(file.to_string(), e2s(std::fs::read(dir.join(file)))?);
    }
    Ok(out)
}

fn determinism() -> Check {
    let raw = serde_json::json!({
        "seed": 11,
        "bench": { "reps": 3, "warmup": 1, "batches": [1], "seq_lens": [8], "hidden": [64] }
    });
    let (a, b) = (e2s(tempfile::tempdir())?, e2s(tempfile::tempdir())?);
    let first = run_pipeline(a.path(), &raw)?;
    let second = run_pipeline(b.path(), &raw)?;
    for (name, bytes) in &first {
        ensure(second.get(name) == Some(bytes), || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} artifacts and reports byte-identical across two runs", first.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 12] = [
        ("fold-quant equivalence", fold_quant),
        ("fold-dequant equivalence", fold_dequant),
        ("integer GEMM fidelity", integer_gemm),
        ("lossless reconstruction", lossless_reconstruction),
        ("pruning-error identity", pruning_identity),
        ("pruning-scheme table", prune_table),
        ("per-channel vs per-tensor ordering", fig1_ordering),
        ("clipping non-worsening", clip_non_worsening),
        ("hadamard checks", hadamard_checks),
        ("LoRA compensation", compensation),
        ("benchmark report", bench_report),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = f();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2}: PASS  {name} ({secs:.2}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2}: FAIL  {name} ({secs:.2}s): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
