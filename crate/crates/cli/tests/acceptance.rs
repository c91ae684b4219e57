//! Acceptance suite. Each criterion prints one PASS/FAIL line with its
//! measured values and wall time; the process fails if any criterion fails.
//!
//! Criteria run one after another so the timings are not skewed by other
//! tests. Pass criterion numbers as arguments to run a subset.

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use ztprune::baselines::{avg_attention_rank, precision_at_k_excluding, RankingStrategy};
use ztprune::bench::PlantedEnsemble;
use ztprune::converge::convergence_study;
use ztprune::heads::{head_variance, mean_combine, rms_combine, vhf_mask, vhf_mask_strict, HeadBundle, VhfThresholds};
use ztprune::pipeline::slice_attention;
use ztprune::search::{mcs_search, sample_schedule, Candidate, EnsembleMember, SalientRetention, SearchOptions, SearchSpace};
use ztprune::sstage::{match_pairs, partition, prune_similar, similarity, MatchedPair, PartitionMethod, SimilarityMetric};
use ztprune::synth::{synth_depth_trace, synth_trace, DepthProfile, PlantedModel};
use ztprune::trace::TensorFlags;
use ztprune::wpr::{init_signal, wpr_run};
use ztprune::{
    budget_check, model_flops, read_trace, run_schedule, write_trace, ClsBoostMode, Error, FlopsOptions,
    ImportanceSignal, LayerTrace, ModelGeometry, ModelTrace, PruningSchedule, WprConfig,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn reference_counts() -> Vec<usize> {
    vec![197, 187, 187, 159, 159, 159, 119, 119, 119, 76, 76, 66]
}

// ---------------------------------------------------------------- oracles

/// MACs of a ViT written out term by term.
fn flops_oracle(blocks: &[usize], d: f64, patches: f64, classes: f64) -> f64 {
    let encoder: f64 = blocks
        .iter()
        .map(|&n| {
            let n = n as f64;
            // qkv + proj: 4nd², scores + weighted sum: 2n²d, MLP at ratio 4: 8nd²
            4.0 * n * d * d + 2.0 * n * n * d + 8.0 * n * d * d
        })
        .sum();
    encoder + patches * d * 768.0 + d * classes
}

/// `round(ρ·(n − r))` with halves rounded up, applied layer by layer.
fn token_count_oracle(num_blocks: usize, n0: usize, layers: &[(usize, f64, usize)]) -> Vec<usize> {
    let mut n = n0;
    let mut out = Vec::new();
    for block in 1..=num_blocks {
        out.push(n);
        if let Some(&(_, rho, r)) = layers.iter().find(|l| l.0 == block) {
            n = (rho * (n - r) as f64 + 0.5).floor() as usize;
        }
    }
    out
}

fn random_stochastic(rng: &mut ChaCha8Rng, n: usize, quantized: bool) -> Array2<f64> {
    let mut a = Array2::from_shape_fn((n, n), |_| {
        if quantized {
            f64::from(rng.random_range(1..=3u8))
        } else {
            rng.random_range(0.01..1.0)
        }
    });
    for mut row in a.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    a
}

/// `s ← Aᵀs` renormalized, `iterations` times, with plain loops.
fn power_method(a: ArrayView2<'_, f64>, s0: &[f64], iterations: usize) -> Vec<f64> {
    let n = s0.len();
    let mut s = s0.to_vec();
    for _ in 0..iterations {
        let mut next = vec![0.0; n];
        for j in 0..n {
            for i in 0..n {
                next[i] += a[[j, i]] * s[j];
            }
        }
        let total: f64 = next.iter().sum();
        s = next.into_iter().map(|v| v / total).collect();
    }
    s
}

fn oracle_similarity(u: &[f64], v: &[f64], metric: SimilarityMetric) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    match metric {
        SimilarityMetric::Dot => dot,
        SimilarityMetric::Cosine => {
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                0.0
            } else {
                dot / (nu * nv)
            }
        }
        SimilarityMetric::Minkowski(p) if p.is_infinite() => {
            -u.iter().zip(v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        }
        SimilarityMetric::Minkowski(p) => -u.iter().zip(v).map(|(a, b)| (a - b).abs().powf(p)).sum::<f64>().powf(1.0 / p),
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

fn random_trace(rng: &mut ChaCha8Rng, index: usize) -> ModelTrace {
    let heads = rng.random_range(1..=3usize);
    let dh = rng.random_range(1..=4usize);
    let n = rng.random_range(1..=12usize);
    let blocks = rng.random_range(1..=3usize);
    let mut g = ModelGeometry::vit(blocks, heads, heads * dh, n);
    g.cls_present = rng.random_bool(0.5);
    let (has_k, has_qv, has_x) = (rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5));
    let tensor3 = |rng: &mut ChaCha8Rng, shape: (usize, usize, usize)| {
        Array3::from_shape_fn(shape, |_| rng.random_range(-4.0f32..4.0))
    };
    let layers = (0..blocks)
        .map(|_| {
            let mut attention = Array3::from_shape_fn((heads, n, n), |_| rng.random_range(0.0f32..1.0));
            for mut head in attention.outer_iter_mut() {
                for mut row in head.rows_mut() {
                    let s = row.sum();
                    row.mapv_inplace(|v| v / s);
                }
            }
            let mut layer = LayerTrace::attention_only(attention);
            if has_k {
                layer.keys = Some(tensor3(rng, (heads, n, dh)));
            }
            if has_qv {
                layer.queries = Some(tensor3(rng, (heads, n, dh)));
                layer.values = Some(tensor3(rng, (heads, n, dh)));
            }
            if has_x {
                layer.x_pre = Some(Array2::from_shape_fn((n, heads * dh), |_| rng.random_range(-4.0f32..4.0)));
                layer.x_out = Some(Array2::from_shape_fn((n, heads * dh), |_| rng.random::<f32>()));
            }
            layer
        })
        .collect();
    let label = rng.random_bool(0.5).then(|| rng.random_range(0..1000u32));
    ModelTrace::new(g, layers, label, format!("rand-{index}-é")).unwrap()
}

fn to_bytes(trace: &ModelTrace) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).unwrap();
    buf
}

// ---------------------------------------------------------------- criteria

fn c1_flops() -> Check {
    let g = ModelGeometry::deit_small();
    let opts = FlopsOptions::default();
    let full = model_flops(&g, &[197; 12], &opts).map_err(|e| e.to_string())?.total_gflops;
    let t1 = budget_check(&PruningSchedule::deit_s_reference(), &g, 3.08, 0.05, &opts).map_err(|e| e.to_string())?;
    let full_oracle = flops_oracle(&[197; 12], 384.0, 196.0, 1000.0) / 1e9;
    let t1_oracle = flops_oracle(&reference_counts(), 384.0, 196.0, 1000.0) / 1e9;
    ensure((full - full_oracle).abs() < 1e-12, || format!("unpruned {full} vs oracle {full_oracle}"))?;
    ensure((t1.achieved_gflops - t1_oracle).abs() < 1e-12, || {
        format!("reference {} vs oracle {t1_oracle}", t1.achieved_gflops)
    })?;
    ensure((full - 4.55).abs() / 4.55 <= 0.02, || format!("unpruned {full:.4}G outside 4.55 ±2%"))?;
    ensure((t1.achieved_gflops - 3.08).abs() / 3.08 <= 0.05, || {
        format!("reference {:.4}G outside 3.08 ±5%", t1.achieved_gflops)
    })?;

    // The CLI reports the same totals.
    let cli = |args: &[&str]| -> Result<f64, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_ztprune")).args(args).output().map_err(|e| e.to_string())?;
        let text = String::from_utf8_lossy(&out.stdout);
        let rec: Value = serde_json::from_str(text.lines().nth(1).ok_or("no flops record")?).map_err(|e| e.to_string())?;
        rec["breakdown"]["total_gflops"].as_f64().ok_or_else(|| "missing total".to_string())
    };
    let cli_full = cli(&["flops", "--geometry", "deit-s", "--schedule", "none"])?;
    let cli_t1 = cli(&["flops", "--geometry", "deit-s", "--schedule", "reference"])?;
    ensure(cli_full == full && cli_t1 == t1.achieved_gflops, || {
        format!("CLI reports {cli_full} / {cli_t1}")
    })?;
    Ok(format!(
        "unpruned {full:.4}G (target 4.55 ±2%), reference {:.4}G (target 3.08 ±5%)",
        t1.achieved_gflops
    ))
}

fn c2_schedule_arithmetic() -> Check {
    let g = ModelGeometry::deit_small();
    let planted = PlantedModel::random_salient(&g, 8, 0.5, 0.05, 2).map_err(|e| e.to_string())?;
    let trace = synth_trace(&g, &planted).map_err(|e| e.to_string())?;
    let report = run_schedule(&trace, &PruningSchedule::deit_s_reference()).map_err(|e| e.to_string())?;
    let check = budget_check(&PruningSchedule::deit_s_reference(), &g, 3.08, 0.05, &FlopsOptions::default())
        .map_err(|e| e.to_string())?;
    let oracle = token_count_oracle(12, 197, &[(1, 1.0, 10), (3, 0.9, 10), (6, 0.8, 10), (9, 0.7, 10), (11, 1.0, 10)]);
    ensure(oracle == reference_counts(), || format!("oracle derived {oracle:?}"))?;
    ensure(report.block_token_counts == reference_counts(), || {
        format!("run_schedule counts {:?}", report.block_token_counts)
    })?;
    ensure(check.token_counts == reference_counts(), || format!("budget_check counts {:?}", check.token_counts))?;
    Ok(format!("{:?}", report.block_token_counts))
}

fn c3_wpr_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = rng.random_range(2..=32usize);
        let a = random_stochastic(&mut rng, n, false);
        let mode = if case % 2 == 0 { ClsBoostMode::Uniform } else { ClsBoostMode::Classification };
        let s0 = init_signal(n, Some(0), mode.boost(n)).map_err(|e| e.to_string())?;
        let got = wpr_run(a.view(), &s0, &WprConfig::tolerance(1e-8)).map_err(|e| format!("case {case}: {e}"))?;
        let want = power_method(a.view(), s0.values(), 1000);
        let l1: f64 = got.signal.values().iter().zip(&want).map(|(x, y)| (x - y).abs()).sum();
        worst = worst.max(l1);
        ensure(l1 <= 1e-6, || format!("case {case} (N={n}): L1 {l1:e} > 1e-6"))?;
    }
    Ok(format!("200 matrices, worst L1 {worst:.2e} (tol 1e-6)"))
}

fn c4_one_shift_bridge() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut with_ties = 0;
    for case in 0..500 {
        let n = rng.random_range(2..=40usize);
        // Every other instance uses coarse entries so column sums tie.
        let a = random_stochastic(&mut rng, n, case % 2 == 1);
        let s0 = ImportanceSignal::uniform(n).map_err(|e| e.to_string())?;
        let wpr = wpr_run(a.view(), &s0, &WprConfig::fixed(1)).map_err(|e| e.to_string())?;
        let avg = avg_attention_rank(&a.clone().insert_axis(ndarray::Axis(0))).map_err(|e| e.to_string())?;
        let (x, y) = (wpr.signal.ranked_ids(), avg.ranked_ids());
        ensure(x == y, || format!("case {case} (N={n}): {x:?} vs {y:?}"))?;
        let v = avg.values();
        let distinct: BTreeSet<u64> = v.iter().map(|f| f.to_bits()).collect();
        if distinct.len() < v.len() {
            with_ties += 1;
        }
    }
    ensure(with_ties > 0, || "no instance exercised tie-breaking".into())?;
    Ok(format!("500 instances identical, {with_ties} with tied scores"))
}

fn c5_planted_recovery() -> Check {
    let g = ModelGeometry::vit(12, 6, 384, 64);
    let clean = PlantedEnsemble {
        count: 20,
        salient: 8,
        salience_mass: 0.5,
        noise_temp: 0.0,
        seed: 50,
    };
    for member in clean.build(&g).map_err(|e| e.to_string())? {
        let truth = member.truth.as_ref().unwrap();
        for block in [0, 11] {
            let s = RankingStrategy::Wpr(30)
                .rank_block(&member.trace, block, ClsBoostMode::Classification)
                .map_err(|e| e.to_string())?;
            let p = precision_at_k_excluding(&s, truth, 8, &[0]).map_err(|e| e.to_string())?;
            ensure(p == 1.0, || format!("{} block {}: precision@8 = {p}", member.trace.source_id, block + 1))?;
        }
    }

    let cfg = configs().join("bench.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_ztprune"))
        .args(["bench", "--config", cfg.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let recs: Vec<Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let precision = |name: &str| {
        recs.iter()
            .find(|r| r["record"] == "strategy" && r["strategy"] == name)
            .and_then(|r| r["precision_mean"].as_f64())
            .ok_or_else(|| format!("bench reported no {name}"))
    };
    let wpr = precision("wpr:30")?;
    let cls = precision("cls-attention")?;
    let avg = precision("average-attention")?;
    let random = precision("random:0")?;
    // Binomial bound on the mean of T·k independent draws at p = |S|/N.
    let (s, n, k, t): (f64, f64, f64, f64) = (8.0, 64.0, 8.0, 100.0);
    let p = s / n;
    let sigma = (p * (1.0 - p) / (k * t)).sqrt();
    ensure((random - p).abs() <= 3.0 * sigma, || {
        format!("random precision {random:.4} outside {p:.4} ± 3·{sigma:.4}")
    })?;
    ensure(wpr > random, || format!("wpr {wpr} not above random {random}"))?;
    Ok(format!(
        "noise-free WPR p@8 = 1.0 on 20 traces; jittered: wpr {wpr:.3}, cls {cls:.3}, avg {avg:.3}, random {random:.4} (|S|/N = {p:.4} ± 3σ = {:.4})",
        3.0 * sigma
    ))
}

fn c6_eir_vhf() -> Check {
    // Columns are tokens A, B, C; rows are heads.
    let heads: [[f64; 3]; 3] = [[9.0, 9.0, 3.0], [9.0, 0.0, 3.0], [9.0, 0.0, 3.0]];
    let per_head: Vec<&[f64]> = heads.iter().map(|h| &h[..]).collect();
    let all = [true; 3];
    let rms = rms_combine(&per_head, &all).map_err(|e| e.to_string())?;
    let mean = mean_combine(&per_head, &all).map_err(|e| e.to_string())?;
    let rms_oracle: Vec<f64> = (0..3)
        .map(|t| (heads.iter().map(|h| h[t] * h[t]).sum::<f64>() / 3.0).sqrt())
        .collect();
    for (x, y) in rms.iter().zip(&rms_oracle) {
        ensure((x - y).abs() < 1e-12, || format!("rms {rms:?} vs oracle {rms_oracle:?}"))?;
    }
    ensure((rms_oracle[1] - 27f64.sqrt()).abs() < 1e-12, || "B should be 3√3".into())?;
    ensure(rms[0] > rms[1] && rms[1] > rms[2], || format!("EIR order broken: {rms:?}"))?;
    ensure(mean[0] > mean[1] && mean[1] == mean[2], || format!("mean should tie B and C: {mean:?}"))?;

    let t = VhfThresholds::default();
    ensure(t.v_min == 0.01 && t.v_max == 0.7, || format!("default window {t:?}"))?;
    let uniform = ImportanceSignal::uniform(16).map_err(|e| e.to_string())?;
    let mut peaked = vec![0.5 / 15.0; 16];
    peaked[3] = 0.5;
    let peaked = ImportanceSignal::new(peaked, (0..16).collect()).map_err(|e| e.to_string())?;
    // Population variance of N·s.
    let var_oracle = |s: &ImportanceSignal| {
        let n = s.len() as f64;
        let scaled: Vec<f64> = s.values().iter().map(|v| v * n).collect();
        let m = scaled.iter().sum::<f64>() / n;
        scaled.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
    };
    for s in [&uniform, &peaked] {
        ensure((head_variance(s) - var_oracle(s)).abs() < 1e-12, || "variance disagrees with oracle".into())?;
    }
    let v_peaked = head_variance(&peaked);
    let window = VhfThresholds::new(0.01, v_peaked).map_err(|e| e.to_string())?;
    let bundle = HeadBundle::new(vec![uniform.clone(), peaked.clone()]).map_err(|e| e.to_string())?;
    let mask = vhf_mask(&bundle, &window);
    ensure(mask == vec![false, true], || format!("uniform head not excluded: {mask:?}"))?;
    let edges = vhf_mask_strict(&[0.01, 0.7, 0.01 - 1e-12, 0.7 + 1e-12], &t);
    ensure(edges == vec![true, true, false, false], || format!("boundary mask {edges:?}"))?;
    Ok(format!(
        "EIR [{:.3}, {:.3}, {:.3}] A>B>C; mean [{}, {}, {}] ties B=C; var(uniform)=0 excluded; v_min/v_max inclusive",
        rms[0], rms[1], rms[2], mean[0], mean[1], mean[2]
    ))
}

fn c7_sstage() -> Check {
    let ranks = [1, 2, 3, 4, 5, 6];
    let set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
    let p = partition(&ranks, PartitionMethod::SequentialU, &[]).map_err(|e| e.to_string())?;
    ensure(set(&p.group_a) == set(&[4, 5, 6]) && set(&p.group_b) == set(&[1, 2, 3]), || {
        format!("sequential-u {p:?}")
    })?;
    let p = partition(&ranks, PartitionMethod::Alternate, &[]).map_err(|e| e.to_string())?;
    ensure(set(&p.group_a) == set(&[2, 4, 6]) && set(&p.group_b) == set(&[1, 3, 5]), || {
        format!("alternate {p:?}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let metrics = [
        SimilarityMetric::Cosine,
        SimilarityMetric::Dot,
        SimilarityMetric::Minkowski(1.0),
        SimilarityMetric::Minkowski(2.0),
        SimilarityMetric::Minkowski(f64::INFINITY),
    ];
    let methods = [
        PartitionMethod::SequentialU,
        PartitionMethod::SequentialI,
        PartitionMethod::Alternate,
        PartitionMethod::Random(11),
        PartitionMethod::NoPartition,
    ];
    let mut instances = 0;
    for n in 2..=32usize {
        for rep in 0..10 {
            let d = rng.random_range(1..=8usize);
            // Integer-valued features make exact ties common.
            let coarse = rep % 2 == 1;
            let feats = Array2::from_shape_fn((n, d), |_| {
                if coarse {
                    rng.random_range(-2..=2i32) as f32
                } else {
                    rng.random_range(-1.0f32..1.0)
                }
            });
            let mut ranked: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                ranked.swap(i, rng.random_range(0..=i));
            }
            let pinned: Vec<usize> = if rep % 3 == 0 { vec![0] } else { vec![] };
            let method = methods[rep % methods.len()];
            let metric = metrics[(n + rep) % metrics.len()];
            let part = partition(&ranked, method, &pinned).map_err(|e| e.to_string())?;
            let pairs = match_pairs(&part.group_a, &part.group_b, feats.view(), metric).map_err(|e| e.to_string())?;

            let row = |t: usize| feats.row(t).iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();
            let mut expected = Vec::new();
            for &a in &part.group_a {
                let mut best: Option<(f64, usize)> = None;
                for &b in &part.group_b {
                    if b == a {
                        continue;
                    }
                    let s = oracle_similarity(&row(a), &row(b), metric);
                    if best.is_none_or(|(bs, bid)| s > bs || (s == bs && b < bid)) {
                        best = Some((s, b));
                    }
                }
                if let Some((s, b)) = best {
                    expected.push((a, b, s));
                }
            }
            ensure(pairs.len() == expected.len(), || format!("N={n}: {} pairs vs {}", pairs.len(), expected.len()))?;
            for (got, (a, b, s)) in pairs.iter().zip(&expected) {
                ensure(got.a_token == *a && got.b_token == *b && (got.similarity - s).abs() <= 1e-9, || {
                    format!("N={n} {metric}: {got:?} vs ({a}, {b}, {s})")
                })?;
            }

            let r = rng.random_range(0..=pairs.len());
            let pruned = prune_similar(&pairs, r).map_err(|e| e.to_string())?;
            let mut order: Vec<&MatchedPair> = pairs.iter().collect();
            order.sort_by(|x, y| y.similarity.total_cmp(&x.similarity).then(x.a_token.cmp(&y.a_token)));
            let want = set(&order[..r].iter().map(|p| p.a_token).collect::<Vec<_>>());
            ensure(pruned.len() == r, || format!("pruned {} of r = {r}", pruned.len()))?;
            ensure(pruned.iter().all(|t| part.group_a.contains(t)), || "pruned a token outside A".into())?;
            ensure(set(&pruned) == want, || format!("pruned {pruned:?}, expected {want:?}"))?;
            ensure(!pruned.iter().any(|t| pinned.contains(t)), || "pruned a pinned token".into())?;
            instances += 1;
        }
    }

    // Integer features times k·2^e stay exact in f32, so only the f64
    // arithmetic inside the metric can move the result.
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let d = rng.random_range(1..=64usize);
        let u = ndarray::Array1::from_shape_fn(d, |_| rng.random_range(-1000..=1000i32) as f32);
        let v = ndarray::Array1::from_shape_fn(d, |_| rng.random_range(-1000..=1000i32) as f32);
        let base = similarity(u.view(), v.view(), SimilarityMetric::Cosine);
        for _ in 0..4 {
            let c = rng.random_range(1..=1000i32) as f32 * 2f32.powi(rng.random_range(-20..=20));
            let su = u.mapv(|x| x * c);
            let got = similarity(su.view(), v.view(), SimilarityMetric::Cosine);
            worst = worst.max((got - base).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("cosine moved by {worst:e} under scaling"))?;
    Ok(format!(
        "listed partitions match; {instances} matching instances agree with brute force; worst cosine scale drift {worst:.1e} (tol 1e-9)"
    ))
}

fn c8_pipeline_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let metrics = ["cosine", "dot", "minkowski:2", "minkowski:inf"];
    let partitions = ["sequential-u", "sequential-i", "alternate", "random:3", "none"];
    let mut layers_run = 0;
    for case in 0..40 {
        let n = rng.random_range(12..=80usize);
        let blocks = rng.random_range(2..=8usize);
        let mut g = ModelGeometry::vit(blocks, 3, 24, n);
        g.cls_present = case % 5 != 4;
        let planted = PlantedModel::random_salient(&g, 4, 0.4, 0.2, case).map_err(|e| e.to_string())?;
        let trace = synth_trace(&g, &planted).map_err(|e| e.to_string())?;
        let mut space = SearchSpace::uniform(1..=blocks, [0.5, 1.0], [0, 4], [1, blocks.min(4)], 1e9, 0.0);
        space.metric = metrics[case as usize % metrics.len()].parse().map_err(|e: Error| e.to_string())?;
        space.partition = partitions[case as usize % partitions.len()].parse().map_err(|e: Error| e.to_string())?;
        let (schedule, _) =
            sample_schedule(&space, &g, case, &FlopsOptions::default()).map_err(|e| e.to_string())?;
        let report = run_schedule(&trace, &schedule).map_err(|e| format!("case {case}: {e}"))?;
        let again = run_schedule(&trace, &schedule).map_err(|e| e.to_string())?;
        ensure(serde_json::to_vec(&report).unwrap() == serde_json::to_vec(&again).unwrap(), || {
            format!("case {case}: reports differ across reruns")
        })?;
        ensure(report.block_token_counts.windows(2).all(|w| w[1] <= w[0]), || {
            format!("case {case}: counts increase {:?}", report.block_token_counts)
        })?;
        let mut alive: Vec<usize> = (0..n).collect();
        for (b, layer) in trace.layers.iter().enumerate() {
            ensure(alive.len() == report.block_token_counts[b], || format!("case {case}: block {} count", b + 1))?;
            let view = slice_attention(layer, &alive).map_err(|e| e.to_string())?;
            for head in view.outer_iter() {
                for row in head.rows() {
                    let s = row.sum();
                    ensure((s - 1.0).abs() <= 1e-6, || format!("case {case}: row sums to {s}"))?;
                }
            }
            if let Some(l) = report.layers.iter().find(|l| l.after_block == b + 1) {
                alive = l.survivors.clone();
                layers_run += 1;
                if g.cls_present {
                    ensure(alive.contains(&0), || format!("case {case}: CLS pruned after block {}", b + 1))?;
                }
            }
        }
        ensure(alive == report.final_survivors, || format!("case {case}: survivor bookkeeping"))?;
    }
    Ok(format!("40 traces, {layers_run} pruning layers: CLS kept, counts non-increasing, rows sum to 1, reruns byte-equal"))
}

fn c9_convergence() -> Check {
    let g = ModelGeometry::vit(12, 6, 384, 197);
    let planted = PlantedModel::random_salient(&g, 8, 0.5, 0.0, 9).map_err(|e| e.to_string())?;
    let trace = synth_depth_trace(&g, &planted, DepthProfile::default(), TensorFlags::default())
        .map_err(|e| e.to_string())?;
    let points = convergence_study(&trace, &[1], 50, ClsBoostMode::Classification).map_err(|e| e.to_string())?;
    let n = g.num_tokens;
    let s0 = init_signal(n, Some(0), (n as f64).sqrt()).map_err(|e| e.to_string())?;
    let mut per_block = Vec::new();
    for (b, layer) in trace.layers.iter().enumerate() {
        let mut total = 0.0;
        for head in layer.attention.outer_iter() {
            let mut a = head.mapv(f64::from);
            for mut row in a.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            let one = power_method(a.view(), s0.values(), 1);
            let fifty = power_method(a.view(), s0.values(), 50);
            total += kl(&one, &fifty);
        }
        let oracle = total / g.num_heads as f64;
        let got = points.iter().find(|p| p.block == b + 1).map(|p| p.kl_mean).ok_or("missing block")?;
        ensure((got - oracle).abs() <= 1e-9 * oracle.max(1.0), || {
            format!("block {}: KL {got:e} vs oracle {oracle:e}", b + 1)
        })?;
        per_block.push(got);
    }
    let (first, last) = (per_block[0], per_block[11]);
    ensure(last < first, || format!("KL last {last:e} not below first {first:e}"))?;
    Ok(format!("KL(1‖50): first block {first:.3e}, last block {last:.3e}"))
}

fn c10_search() -> Check {
    let text = std::fs::read_to_string(configs().join("search.toml")).map_err(|e| e.to_string())?;
    let cfg: toml::Table = toml::from_str(&text).map_err(|e| e.to_string())?;
    let space: SearchSpace = cfg["space"].clone().try_into().map_err(|e: toml::de::Error| e.to_string())?;
    let planted: PlantedEnsemble = cfg["ensemble"]["planted"]
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| e.to_string())?;
    let g = ModelGeometry::deit_small();
    let ensemble: Vec<EnsembleMember> = planted.build(&g).map_err(|e| e.to_string())?;
    let opts = SearchOptions {
        trials: 200,
        seed: 0,
        extra: vec![PruningSchedule::deit_s_reference()],
        ..Default::default()
    };
    ensure(space.budget_gflops == 3.1, || format!("budget {}", space.budget_gflops))?;

    let start = Instant::now();
    let first = mcs_search(&space, &ensemble, &SalientRetention, &opts).map_err(|e| e.to_string())?;
    let one_run = start.elapsed();
    ensure(one_run < Duration::from_secs(120), || format!("one search took {one_run:?}"))?;
    let second = mcs_search(&space, &ensemble, &SalientRetention, &opts).map_err(|e| e.to_string())?;
    let bytes = |c: &[Candidate]| serde_json::to_vec(c).unwrap();
    ensure(bytes(&first) == bytes(&second), || "reruns are not byte-identical".into())?;
    ensure(first.len() == 201, || format!("{} candidates", first.len()))?;

    for c in &first {
        let check = budget_check(&c.schedule, &g, space.budget_gflops, space.tolerance, &FlopsOptions::default())
            .map_err(|e| e.to_string())?;
        ensure(check.pass, || format!("trial {} infeasible at {:.4}G", c.trial, check.achieved_gflops))?;
        ensure(check.achieved_gflops == c.achieved_gflops, || format!("trial {} cost mismatch", c.trial))?;
    }
    let reference = first
        .iter()
        .find(|c| c.schedule == PruningSchedule::deit_s_reference())
        .ok_or("reference schedule missing from candidates")?;
    let best = &first[0];
    ensure(first.iter().all(|c| c.objective <= best.objective), || "candidates not sorted".into())?;
    ensure(best.objective >= reference.objective, || {
        format!("best {} below reference {}", best.objective, reference.objective)
    })?;
    Ok(format!(
        "201 candidates all within 3.1G ·1.05, reruns byte-equal, best {:.4} (trial {}) >= reference {:.4}; one run {:.1}s",
        best.objective,
        best.trial,
        reference.objective,
        one_run.as_secs_f64()
    ))
}

fn c11_format() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100 {
        let trace = random_trace(&mut rng, i);
        let bytes = to_bytes(&trace);
        let back = read_trace(&bytes[..]).map_err(|e| format!("trace {i}: {e}"))?;
        ensure(back == trace, || format!("trace {i} changed on round trip"))?;
        ensure(to_bytes(&back) == bytes, || format!("trace {i} re-encodes differently"))?;
        let bits = |t: &ModelTrace| -> Vec<u32> { t.layers.iter().flat_map(|l| l.attention.iter().map(|x| x.to_bits())).collect() };
        ensure(bits(&back) == bits(&trace), || format!("trace {i} attention bits differ"))?;
    }

    let trace = random_trace(&mut rng, 100);
    let good = to_bytes(&trace);
    let mut magic = good.clone();
    magic[..4].copy_from_slice(b"ZTPQ");
    let truncated = &good[..good.len() - 3];
    let mut nan = good.clone();
    let at = ztprune::format::header_len(&trace.source_id);
    nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());

    let classify = |bytes: &[u8]| match read_trace(bytes) {
        Ok(_) => "ok".to_string(),
        Err(Error::BadMagic { .. }) => "bad-magic".into(),
        Err(Error::Truncated { .. }) => "truncated".into(),
        Err(Error::NonFinite { .. }) => "non-finite".into(),
        Err(e) => format!("other({e})"),
    };
    let got = [classify(&magic), classify(truncated), classify(&nan)];
    ensure(got == ["bad-magic", "truncated", "non-finite"], || format!("errors {got:?}"))?;
    Ok("100 random traces bit-exact; bad magic / truncation / NaN give distinct errors".into())
}

// ---------------------------------------------------------------- driver

type Criterion = (u32, &'static str, fn() -> Check, Duration);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "flops reproduction", c1_flops, Duration::from_secs(1)),
        (2, "schedule arithmetic", c2_schedule_arithmetic, Duration::from_secs(1)),
        (3, "wpr oracle equivalence", c3_wpr_oracle, Duration::from_secs(10)),
        (4, "one-shift bridge", c4_one_shift_bridge, Duration::from_secs(5)),
        (5, "planted-model recovery", c5_planted_recovery, Duration::from_secs(30)),
        (6, "eir/vhf", c6_eir_vhf, Duration::from_secs(1)),
        (7, "s-stage", c7_sstage, Duration::from_secs(10)),
        (8, "pipeline invariants", c8_pipeline_invariants, Duration::from_secs(10)),
        (9, "convergence shape", c9_convergence, Duration::from_secs(10)),
        // One search must finish in 2 min; the check runs it twice.
        (10, "search contract", c10_search, Duration::from_secs(240)),
        (11, "format round-trip", c11_format, Duration::from_secs(10)),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    let mut stdout = std::io::stdout();
    for (id, name, check, limit) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > limit => Err(format!("{detail}; took {elapsed:?}, limit {limit:?}")),
            other => other,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if result.is_err() {
            failed += 1;
        }
        writeln!(stdout, "acceptance {id:>2} {tag} [{:>7.2}s] {name}: {detail}", elapsed.as_secs_f64()).unwrap();
        stdout.flush().unwrap();
    }
    writeln!(stdout, "acceptance: {} passed, {failed} failed", ran - failed).unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}
