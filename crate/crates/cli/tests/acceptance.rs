//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use dbgl::analysis::{analyze_dataset, chi2_sf, kruskal_wallis, AutocorrConfig};
use dbgl::data::{
    compute_delta_t, leave_variables_out, split, synthesize, Dataset, Episode, LabelFeature, LabelRule, SplitRatios,
    SplitUnit, SyntheticConfig,
};
use dbgl::metrics::{auprc, auroc, brier, ece};
use dbgl::model::{head_input_dim, AblationFlags, Dbgl, DbglConfig};
use dbgl::temporal::{self, DecayKernel, TemporalBlock};
use dbgl::{ParamSet, Scalar, Tape, Tensor};
use dbgl_cli::commands::{gradcheck_batch, prepare_splits, run_eval, run_gradcheck, run_train};
use dbgl_cli::RunConfig;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// 1 ---------------------------------------------------------------------

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let batch = gradcheck_batch().unwrap();
    assert_eq!(batch.len(), 2);
    assert!(batch.iter().all(|e| e.steps.len() == 4 && e.steps[0].mask.len() == 3));
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for kernel in DecayKernel::ALL {
        let report = run_gradcheck(0, kernel, None).unwrap();
        worst = worst.max(report.max_rel_err());
        failed.extend(report.blocks.iter().filter(|b| !b.passed).map(|b| format!("{kernel:?}/{}", b.name)));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        failed.is_empty() && worst < 1e-4 && secs < 120.0,
        format!("max rel err {worst:.2e} over 4 kernels, failing blocks {failed:?}, {secs:.1} s"),
    )
}

// 2 ---------------------------------------------------------------------

fn oracle_delta(times: &[f64], i: usize, t_max: f64) -> f64 {
    let prev = if i > 0 { Some(times[i] - times[i - 1]) } else { None };
    let next = times.get(i + 1).map(|t| t - times[i]);
    match (prev, next) {
        (Some(p), Some(q)) => (p + q) / 2.0,
        (Some(p), None) => p,
        (None, Some(q)) => q,
        (None, None) => t_max / 2.0,
    }
}

fn delta_t_oracle() -> Verdict {
    let grid = [0.0, 0.25, 1.0, 1.5, 3.0, 4.75, 9.0];
    let t_max = 12.0;
    let mut cases = 0;
    let mut branches = [0usize; 4];
    // Every subset of the grid for one variable, and each subset paired with
    // its complement for a second variable inside one episode.
    for mask in 0u32..(1 << grid.len()) {
        let a: Vec<f64> = (0..grid.len()).filter(|i| mask >> i & 1 == 1).map(|i| grid[i]).collect();
        let got = compute_delta_t(&a, t_max);
        for i in 0..a.len() {
            if got[i] != oracle_delta(&a, i, t_max) {
                return verdict(false, format!("times {a:?} index {i}: {} vs oracle", got[i]));
            }
            branches[(i > 0) as usize * 2 + (i + 1 < a.len()) as usize] += 1;
            cases += 1;
        }
        let triples: Vec<(f64, usize, f64)> =
            grid.iter().enumerate().map(|(i, &t)| (t, (mask >> i & 1) as usize, 1.0)).collect();
        let e = Episode::from_triples("p", &triples, 2, 0, t_max).unwrap();
        for v in 0..2 {
            let times = e.times_of(v);
            let mut k = 0;
            for s in &e.steps {
                let expected = if s.mask[v] {
                    k += 1;
                    oracle_delta(&times, k - 1, t_max)
                } else {
                    0.0
                };
                if s.delta_t[v] != expected {
                    return verdict(false, format!("episode mask {mask:b} variable {v} at t={}", s.time));
                }
            }
        }
    }
    verdict(
        branches.iter().all(|&b| b > 0),
        format!("{cases} observations exact; branch counts (none, next only, prev only, both) {branches:?}"),
    )
}

// 3 ---------------------------------------------------------------------

/// γ over `grid` for each of `rows` random edge rows, row-major.
fn kernel_curves<S: Scalar>(kernel: DecayKernel, stiff: bool, grid: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
    let d = 8;
    let mut params = ParamSet::<S>::new();
    let mut rng = dbgl::rng::seeded(7);
    temporal::register_params(&mut params, &mut rng, d, kernel).unwrap();
    if stiff {
        // Rates near 50 per unit time: e^{-λ·1000} would underflow unclamped.
        let name = if kernel.uses_mlp() { "decay.mlp_b2" } else { "decay.lambda_raw" };
        let t = params.get_mut(name).unwrap();
        for x in t.data_mut() {
            *x = S::from(50.0).unwrap();
        }
    }
    let mut edge_rows = Vec::with_capacity(rows * grid.len() * d);
    let mut dts = Vec::with_capacity(rows * grid.len());
    for _ in 0..rows {
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        for &g in grid {
            edge_rows.extend_from_slice(&row);
            dts.push(g);
        }
    }
    let tape = Tape::<S>::new();
    let bound = params.bind(&tape);
    let block = TemporalBlock::bind(&bound, kernel).unwrap();
    let edges = tape.constant(Tensor::from_f64(vec![dts.len(), d], &edge_rows).unwrap());
    let lambda = block.decay_rate(&tape, edges).unwrap();
    let gamma = block.decay_factor(&tape, edges, &dts).unwrap();
    (
        tape.data(gamma).iter().map(|x| x.widen()).collect(),
        tape.data(lambda).iter().map(|x| x.widen()).collect(),
    )
}

fn kernel_invariants() -> Verdict {
    let mut grid: Vec<f64> = (0..49).map(|i| if i == 0 { 0.0 } else { 1e-3 * 10f64.powf(i as f64 / 8.0) }).collect();
    grid.push(1e3);
    assert_eq!(grid.len(), 50);
    let rows = 16;
    let mut problems = Vec::new();
    let mut min_tail = f64::INFINITY;
    for kernel in DecayKernel::ALL {
        for stiff in [false, true] {
            for (label, (gamma, lambda)) in [
                ("f64", kernel_curves::<f64>(kernel, stiff, &grid, rows)),
                ("f32", kernel_curves::<f32>(kernel, stiff, &grid, rows)),
            ] {
                let tag = format!("{kernel:?}{} {label}", if stiff { " stiff" } else { "" });
                if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                    problems.push(format!("{tag}: rate not finite and non-negative"));
                }
                for curve in gamma.chunks(grid.len()) {
                    if curve[0] != 1.0 {
                        problems.push(format!("{tag}: γ(0) = {}", curve[0]));
                    }
                    if curve.windows(2).any(|w| w[1] > w[0]) || curve.iter().any(|g| !g.is_finite()) {
                        problems.push(format!("{tag}: not monotone"));
                    }
                    if kernel != DecayKernel::MlpLinear {
                        let tail = curve[grid.len() - 1];
                        min_tail = min_tail.min(tail);
                        if !(tail > 0.0) {
                            problems.push(format!("{tag}: γ(1e3) = {tail}"));
                        }
                    }
                }
            }
        }
    }
    problems.dedup();
    verdict(
        problems.is_empty(),
        format!("4 kernels × f32/f64 × normal/stiff rates, smallest exp/gaussian γ(1e3) {min_tail:.2e}; issues {problems:?}"),
    )
}

// 4 ---------------------------------------------------------------------

fn brute_auroc(s: &[f64], y: &[usize]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                den += 1.0;
                num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

fn brute_auprc(s: &[f64], y: &[usize]) -> f64 {
    let mut cuts = s.to_vec();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let pos = y.iter().filter(|&&l| l == 1).count() as f64;
    let (mut prev, mut area) = (0.0, 0.0);
    for c in cuts {
        let sel: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= c).collect();
        let tp = sel.iter().filter(|&&i| y[i] == 1).count() as f64;
        area += (tp / pos - prev) * tp / sel.len() as f64;
        prev = tp / pos;
    }
    area
}

fn brute_ece(s: &[f64], y: &[usize]) -> f64 {
    let mut total = 0.0;
    for b in 0..10 {
        let (lo, hi) = (b as f64 / 10.0, (b + 1) as f64 / 10.0);
        let m: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= lo && (s[i] < hi || (b == 9 && s[i] <= 1.0))).collect();
        if m.is_empty() {
            continue;
        }
        let n = m.len() as f64;
        let acc = m.iter().map(|&i| y[i] as f64).sum::<f64>() / n;
        let conf = m.iter().map(|&i| s[i]).sum::<f64>() / n;
        total += n / s.len() as f64 * (acc - conf).abs();
    }
    total
}

fn brute_brier(s: &[f64], y: &[usize]) -> f64 {
    s.iter().zip(y).map(|(p, &l)| (p - l as f64).powi(2)).sum::<f64>() / s.len() as f64
}

fn metric_oracles() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..200u64 {
        let mut rng = SplitMix64::seed_from_u64(1000 + seed);
        let (s, y) = loop {
            let n = rng.random_range(2..=30);
            let mut s: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            if seed % 2 == 0 {
                s.iter_mut().for_each(|x| *x = (*x * 10.0).round() / 10.0);
            }
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            if y.contains(&0) && y.contains(&1) {
                break (s, y);
            }
        };
        for (a, b) in [
            (auroc(&s, &y).unwrap(), brute_auroc(&s, &y)),
            (auprc(&s, &y).unwrap(), brute_auprc(&s, &y)),
            (ece(&s, &y, 10).unwrap(), brute_ece(&s, &y)),
            (brier(&s, &y).unwrap(), brute_brier(&s, &y)),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(worst <= 1e-12, format!("200 instances, largest deviation {worst:.1e}"))
}

// 5 ---------------------------------------------------------------------

fn chi2_tail_quadrature(x: f64, k: usize) -> f64 {
    // Γ(k/2) by the half-integer recurrence.
    let (mut g, mut a) = if k.is_multiple_of(2) { (1.0, 1.0) } else { (std::f64::consts::PI.sqrt(), 0.5) };
    while a + 1e-9 < k as f64 / 2.0 {
        g *= a;
        a += 1.0;
    }
    let c = 1.0 / (2f64.powf(k as f64 / 2.0) * g);
    let pdf = |t: f64| c * t.powf(k as f64 / 2.0 - 1.0) * (-t / 2.0).exp();
    let n = 400_000;
    let h = 400.0 / n as f64;
    let mut s = pdf(x) + pdf(x + 400.0);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(x + i as f64 * h);
    }
    s * h / 3.0
}

fn kruskal_wallis_oracle() -> Verdict {
    let groups = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]];
    let r = kruskal_wallis(&groups).unwrap();
    let n = 9.0;
    let rank_sums = [6.0, 15.0, 24.0];
    let hand = 12.0 / (n * (n + 1.0)) * rank_sums.iter().map(|x| x * x / 3.0).sum::<f64>() - 3.0 * (n + 1.0);
    let same = kruskal_wallis(&[vec![2.0, 2.0, 2.0], vec![2.0, 2.0], vec![2.0, 2.0, 2.0]]).unwrap();
    let q = chi2_tail_quadrature(7.2, 2);
    let mut worst_sf: f64 = 0.0;
    for k in 1..=5 {
        for x in [0.5, 3.0, 7.2, 12.0] {
            worst_sf = worst_sf.max((chi2_sf(x, k) - chi2_tail_quadrature(x, k)).abs());
        }
    }
    let ok = (r.h - 7.2).abs() < 1e-12
        && (r.h - hand).abs() < 1e-12
        && same.h == 0.0
        && same.p == 1.0
        && (r.p - q).abs() < 1e-6
        && worst_sf < 1e-6;
    verdict(
        ok,
        format!(
            "H = {} (hand {hand}), identical groups H = {} p = {}, |p - quadrature| = {:.1e}, tail grid {worst_sf:.1e}",
            r.h,
            same.h,
            same.p,
            (r.p - q).abs()
        ),
    )
}

// 6 ---------------------------------------------------------------------

fn ou_config(n: usize, lambdas: Vec<f64>, seed: u64) -> SyntheticConfig {
    let v = lambdas.len();
    SyntheticConfig {
        n_episodes: n,
        lambdas,
        expected_obs: vec![96.0],
        time_resolution: None,
        missing_prob: 0.0,
        seed,
        label: LabelRule {
            coefficients: vec![vec![0.0; v]],
            intercepts: vec![0.0],
            ..Default::default()
        },
        ..Default::default()
    }
}

fn decay_recovery() -> Verdict {
    let start = Instant::now();
    let truth = [0.05, 2.0];
    let mut lines = Vec::new();
    let mut ok = 0;
    for seed in 0..5 {
        let data = synthesize(&ou_config(500, truth.to_vec(), seed)).unwrap();
        let report = analyze_dataset(&data, &AutocorrConfig::default()).unwrap();
        let est: Vec<f64> = report.rows.iter().map(|r| r.fit.as_ref().map_or(f64::NAN, |f| f.lambda)).collect();
        let within = est.iter().zip(truth).all(|(e, t)| ((e - t) / t).abs() <= 0.3);
        if within && est[0] < est[1] {
            ok += 1;
        }
        lines.push(format!("{:.3}/{:.2}", est[0], est[1]));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        ok == 5 && secs < 120.0,
        format!("{ok}/5 seeds within ±30% and ordered, estimates {lines:?}, {secs:.1} s"),
    )
}

// 7 ---------------------------------------------------------------------

fn separable_task(seed: u64) -> Dataset {
    let data = synthesize(&SyntheticConfig {
        n_episodes: 64,
        lambdas: vec![0.1, 1.0, 0.5, 2.0],
        expected_obs: vec![12.0],
        label: LabelRule {
            coefficients: vec![vec![4.0, 0.0, 0.0, 0.0]],
            intercepts: vec![0.0],
            deterministic: true,
            ..Default::default()
        },
        seed,
        ..Default::default()
    })
    .unwrap();
    data.normalized(&dbgl::data::NormStats::fit(&data))
}

fn learnability() -> Verdict {
    let start = Instant::now();
    let mut reached = 0;
    let mut decreasing = 0;
    let mut firsts = Vec::new();
    for seed in 0..5 {
        let data = separable_task(seed);
        let config = DbglConfig {
            d: 16,
            codebook_size: 64,
            epochs: 200,
            // Validation is the training set; training continues until the
            // AUPRC plateau outlasts this.
            patience: 40,
            seed,
            ..Default::default()
        };
        let mut model = Dbgl::<f64>::new(config, AblationFlags::default(), data.n_vars()).unwrap();
        let history = model.fit(&data, &data).unwrap();
        let first = history.epochs.iter().find(|e| e.val_metrics.auroc.is_some_and(|a| a >= 0.99)).map(|e| e.epoch);
        reached += first.is_some() as usize;
        firsts.push(first);
        // Full-batch epochs: initial loss against the loss after five updates.
        decreasing += (history.epochs.len() >= 5 && history.epochs[4].val_loss < history.epochs[0].train_loss) as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        reached >= 4 && secs < 600.0,
        format!(
            "{reached}/5 seeds reach train AUROC ≥ 0.99 (first epochs {firsts:?}), {secs:.1} s; loss lower after 5 epochs in {decreasing}/5"
        ),
    )
}

// 8 ---------------------------------------------------------------------

fn toggle_mechanics() -> Result<(), String> {
    let batch = gradcheck_batch().map_err(|e| e.to_string())?;
    let refs: Vec<&Episode> = batch.iter().collect();
    let config = DbglConfig {
        d: 8,
        codebook_size: 8,
        seed: 3,
        ..Default::default()
    };
    let logits = |m: &Dbgl<f64>| m.logits(&refs).unwrap();
    let bump = |m: &mut Dbgl<f64>, prefix: &str| {
        let names: Vec<String> = m.params.names().iter().filter(|n| n.starts_with(prefix)).cloned().collect();
        assert!(!names.is_empty());
        for n in names {
            m.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x += 0.41);
        }
    };
    for (flag, prefix) in [("tde", "decay."), ("sna", "attn."), ("te", "edge.time_")] {
        let mut flags = AblationFlags::default();
        flags.disable(flag).unwrap();
        let mut off = Dbgl::<f64>::new(config.clone(), flags, 3).unwrap();
        let before = logits(&off);
        bump(&mut off, prefix);
        if logits(&off) != before {
            return Err(format!("{flag} off still reads {prefix}"));
        }
        let mut on = Dbgl::<f64>::new(config.clone(), AblationFlags::default(), 3).unwrap();
        let before = logits(&on);
        bump(&mut on, prefix);
        if logits(&on) == before {
            return Err(format!("{prefix} has no effect with {flag} on"));
        }
    }
    // Codebook off: no codebook exists, and a stray one is ignored.
    let mut flags = AblationFlags::default();
    flags.disable("cb").unwrap();
    let mut off = Dbgl::<f64>::new(config.clone(), flags, 3).unwrap();
    if off.params.names().iter().any(|n| n.starts_with("codebook.")) || off.flags.use_mcv {
        return Err("codebook parameters present with cb off".into());
    }
    dbgl::codebook::register_params(&mut off.params, &mut dbgl::rng::seeded(1), 8, 8).unwrap();
    let before = logits(&off);
    bump(&mut off, "codebook.");
    if logits(&off) != before {
        return Err("stray codebook is read with cb off".into());
    }
    // Head inputs shrink by exactly the removed parts.
    for (flag, width) in [("hvs", 8 + 8), ("mcv", 8 + 3 * 8)] {
        let mut flags = AblationFlags::default();
        flags.disable(flag).unwrap();
        let m = Dbgl::<f64>::new(config.clone(), flags, 3).unwrap();
        let w1 = m.params.get("head.w1").unwrap().shape()[0];
        if w1 != width || head_input_dim(8, 3, &m.flags) != width {
            return Err(format!("{flag} off: head input {w1}, expected {width}"));
        }
    }
    Ok(())
}

fn heterogeneous_task(seed: u64) -> dbgl::data::Splits {
    let data = synthesize(&SyntheticConfig {
        n_episodes: 600,
        lambdas: vec![0.02, 3.0, 0.02, 3.0],
        expected_obs: vec![16.0],
        label: LabelRule {
            feature: LabelFeature::Last,
            coefficients: vec![vec![2.0, 2.0, -2.0, -2.0]],
            intercepts: vec![0.0],
            deterministic: false,
        },
        seed,
        ..Default::default()
    })
    .unwrap();
    split(&data, &SplitRatios::default(), seed, SplitUnit::Patient).unwrap().normalized().0
}

fn ablation() -> Verdict {
    let start = Instant::now();
    if let Err(e) = toggle_mechanics() {
        return verdict(false, format!("toggle mechanics: {e}"));
    }
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let s = heterogeneous_task(seed);
        let config = DbglConfig {
            d: 16,
            codebook_size: 64,
            batch_size: 32,
            seed,
            ..Default::default()
        };
        let mut scores = Vec::new();
        for use_tde in [true, false] {
            let flags = AblationFlags {
                use_tde,
                ..Default::default()
            };
            let mut m = Dbgl::<f64>::new(config.clone(), flags, 4).unwrap();
            m.fit(&s.train, &s.val).unwrap();
            scores.push(m.evaluate(&s.val).unwrap().metrics.auprc.unwrap());
        }
        wins += (scores[0] >= scores[1]) as usize;
        pairs.push(format!("{:.4}/{:.4}", scores[0], scores[1]));
    }
    verdict(
        wins >= 4,
        format!(
            "toggles remove their computation; full ≥ w/o-TDE val AUPRC in {wins}/5 seeds (full/w/o {pairs:?}), {:.1} s",
            start.elapsed().as_secs_f64()
        ),
    )
}

// 9 ---------------------------------------------------------------------

fn determinism() -> Verdict {
    let config = RunConfig {
        seed: 12,
        synthetic: SyntheticConfig {
            n_episodes: 120,
            ..Default::default()
        },
        model: DbglConfig {
            d: 8,
            codebook_size: 32,
            batch_size: 16,
            epochs: 6,
            ..Default::default()
        },
        ..Default::default()
    }
    .resolved()
    .unwrap();
    let a = run_train(&config).unwrap();
    let b = run_train(&config).unwrap();
    let ra = serde_json::to_string_pretty(&a.report).unwrap();
    let rb = serde_json::to_string_pretty(&b.report).unwrap();
    let ca = serde_json::to_string(&a.model.to_checkpoint(&a.report.dataset.variables)).unwrap();
    let cb = serde_json::to_string(&b.model.to_checkpoint(&b.report.dataset.variables)).unwrap();
    let ea = serde_json::to_string(&run_eval(&config, &a.model, &a.report.dataset.variables).unwrap()).unwrap();
    let eb = serde_json::to_string(&run_eval(&config, &b.model, &b.report.dataset.variables).unwrap()).unwrap();
    verdict(
        ra == rb && ca == cb && ea == eb,
        format!(
            "train report {} bytes, checkpoint {} bytes, eval report {} bytes; identical: {}, {}, {}",
            ra.len(),
            ca.len(),
            ea.len(),
            ra == rb,
            ca == cb,
            ea == eb
        ),
    )
}

// 10 --------------------------------------------------------------------

fn sweep_config(rate: f64) -> RunConfig {
    let lambdas = vec![0.05, 2.0, 0.5, 1.0, 0.2, 0.1, 3.0, 0.8, 0.3, 1.5];
    let mut coefficients = vec![0.0; lambdas.len()];
    coefficients[..4].copy_from_slice(&[1.5, -1.5, 1.0, -1.0]);
    RunConfig {
        seed: 2,
        synthetic: SyntheticConfig {
            n_episodes: 300,
            lambdas,
            label: LabelRule {
                coefficients: vec![coefficients],
                intercepts: vec![0.0],
                ..Default::default()
            },
            ..Default::default()
        },
        model: DbglConfig {
            d: 16,
            codebook_size: 64,
            batch_size: 32,
            ..Default::default()
        },
        leave_out: Some(rate),
        ..Default::default()
    }
    .resolved()
    .unwrap()
}

fn leave_out_protocol() -> Verdict {
    let start = Instant::now();
    let base = prepare_splits(&sweep_config(0.1)).unwrap();
    let mut problems = Vec::new();
    for rate in [0.1, 0.2, 0.3, 0.4, 0.5] {
        let (out, lo) = leave_variables_out(&base, rate, 2).unwrap();
        if lo.hidden.len() != (rate * 10.0 + 1e-9).floor() as usize {
            problems.push(format!("rate {rate} hid {}", lo.hidden.len()));
        }
        if out.train != base.train {
            problems.push(format!("rate {rate} altered training"));
        }
        let leaked = [&out.val, &out.test]
            .iter()
            .flat_map(|d| d.episodes.iter().flat_map(|e| &e.steps))
            .any(|s| lo.hidden.iter().any(|&v| s.mask[v]));
        if leaked {
            problems.push(format!("rate {rate} leaves hidden observations"));
        }
    }
    let mut auprc = Vec::new();
    for rate in [0.1, 0.2, 0.3, 0.4, 0.5] {
        let run = run_train(&sweep_config(rate)).unwrap();
        let lo = run.report.leave_out.as_ref().unwrap();
        if lo.hidden.len() != (rate * 10.0 + 1e-9).floor() as usize {
            problems.push(format!("trained run at {rate} hid {}", lo.hidden.len()));
        }
        auprc.push(run.report.metrics["test"].metrics.auprc.map(|a| (a * 1e3).round() / 1e3));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        problems.is_empty() && secs < 900.0,
        format!("invariants hold at all five rates; sweep test AUPRC {auprc:?}; {secs:.1} s; issues {problems:?}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("elapsed-interval oracle", delta_t_oracle),
        ("kernel invariants", kernel_invariants),
        ("metric oracles", metric_oracles),
        ("Kruskal-Wallis", kruskal_wallis_oracle),
        ("decay recovery", decay_recovery),
        ("end-to-end learnability", learnability),
        ("ablation mechanics", ablation),
        ("determinism", determinism),
        ("leave-variables-out", leave_out_protocol),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += !v.pass as usize;
        println!("criterion {id:>2} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all criteria passed");
        ExitCode::SUCCESS
    }
}
