use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use ztprune::baselines::RankingStrategy;
use ztprune::bench::{bench_strategies, PlantedEnsemble};
use ztprune::converge::convergence_study;
use ztprune::flops::pruning_overhead;
use ztprune::format::{read_trace, read_trace_with, ReadOptions};
use ztprune::search::{mcs_search, Candidate, EnsembleMember, ImportanceMass, Objective, SalientRetention, SearchOptions};
use ztprune::synth::{synth_depth_trace, synth_trace_with, PlantedModel};
use ztprune::trace::TensorFlags;
use ztprune::{
    budget_check, model_flops, predicted_token_counts, run_schedule_with, write_trace, ClsBoostMode, ModelTrace,
    PruningSchedule,
};

use crate::config::{self, named_schedule, BenchConfig, GeometrySpec, ObjectiveKind, RunConfig, SearchConfig, SynthConfig};
use crate::error::CliError;
use crate::output::{digest_file, sha256_hex, write_atomic, InputDigest, Report};
use crate::{BenchArgs, ConvergeArgs, FlopsArgs, Global, RankArgs, SearchArgs, SimulateArgs, SynthArgs, ValidateArgs};

/// A finished command: its report and the exit code to leave with.
pub struct Outcome {
    pub report: Report,
    pub code: i32,
}

impl From<Report> for Outcome {
    fn from(report: Report) -> Self {
        Self { report, code: 0 }
    }
}

fn load_trace(path: &Path) -> Result<(ModelTrace, InputDigest), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let digest = InputDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    };
    let trace = read_trace(&bytes[..]).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok((trace, digest))
}

/// `dir/planted-7.ztpt` pairs with `dir/planted-7.truth.json`.
pub fn truth_path(trace: &Path) -> PathBuf {
    trace.with_extension("truth.json")
}

#[derive(Deserialize)]
struct TruthSidecar {
    planted: PlantedModel,
}

fn load_truth(trace: &Path) -> Result<Option<BTreeSet<usize>>, CliError> {
    let path = truth_path(trace);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let side: TruthSidecar =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(Some(side.planted.salient))
}

fn load_members(paths: &[PathBuf], report: &mut Report) -> Result<Vec<EnsembleMember>, CliError> {
    let loaded = paths
        .par_iter()
        .map(|p| {
            let (trace, digest) = load_trace(p)?;
            let truth = load_truth(p)?;
            Ok((EnsembleMember { trace, truth }, digest))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(loaded
        .into_iter()
        .map(|(m, d)| {
            report.add_input(d);
            m
        })
        .collect())
}

fn parse_tensors(names: &[String]) -> Result<TensorFlags, CliError> {
    let mut flags = TensorFlags::default();
    for n in names {
        match n.trim().to_ascii_lowercase().as_str() {
            "k" => flags.has_k = true,
            "q" | "v" | "qv" => flags.has_qv = true,
            "x" => flags.has_x = true,
            "" => {}
            other => return Err(CliError::Config(format!("unknown tensor {other:?}; expected k, q, v or x"))),
        }
    }
    Ok(flags)
}

fn fmt_g(v: f64) -> String {
    format!("{v:.4}")
}

pub fn synth(g: &Global, args: &SynthArgs) -> Result<Outcome, CliError> {
    let mut cfg: SynthConfig = config::load(g.config.as_deref())?;
    if let Some(p) = &args.geometry {
        cfg.geometry = GeometrySpec::Preset(p.clone());
    }
    if let Some(v) = args.traces {
        cfg.traces = v;
    }
    if let Some(v) = args.salient {
        cfg.salient = v;
    }
    if let Some(v) = args.salience_mass {
        cfg.salience_mass = v;
    }
    if let Some(v) = args.noise_temp {
        cfg.noise_temp = v;
    }
    if let Some(v) = &args.tensors {
        cfg.tensors = v.clone();
    }
    if args.depth_profile && cfg.depth_profile.is_none() {
        cfg.depth_profile = Some(Default::default());
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let out = g
        .out
        .as_deref()
        .ok_or_else(|| CliError::Config("synth writes trace files and needs --out DIR".into()))?;
    let geometry = cfg.geometry.resolve()?;
    let flags = parse_tensors(&cfg.tensors)?;
    let ensemble = PlantedEnsemble {
        count: cfg.traces,
        salient: cfg.salient,
        salience_mass: cfg.salience_mass,
        noise_temp: cfg.noise_temp,
        seed: cfg.seed,
    };
    if ensemble.count == 0 {
        return Err(CliError::Config("traces must be >= 1".into()));
    }
    fs::create_dir_all(out)?;

    let mut report = Report::new("synth");
    report.set_config(&cfg);
    report.set_seeds(json!({ "seed": cfg.seed }));

    let written = (0..ensemble.count)
        .into_par_iter()
        .map(|i| -> Result<Value, CliError> {
            let planted = ensemble.planted(&geometry, i)?;
            let trace = match cfg.depth_profile {
                Some(p) => synth_depth_trace(&geometry, &planted, p, flags)?,
                None => synth_trace_with(&geometry, &planted, flags)?,
            };
            let mut buf = Vec::new();
            write_trace(&trace, &mut buf)?;
            let path = out.join(format!("{}.ztpt", trace.source_id));
            write_atomic(&path, &buf)?;
            let sha = sha256_hex(&buf);
            let sidecar = json!({
                "schema_version": crate::output::SCHEMA_VERSION,
                "tool_version": env!("CARGO_PKG_VERSION"),
                "trace_sha256": sha,
                "geometry": geometry,
                "planted": planted,
            });
            let side_path = truth_path(&path);
            write_atomic(&side_path, serde_json::to_string_pretty(&sidecar).expect("json").as_bytes())?;
            Ok(json!({
                "path": path.display().to_string(),
                "truth": side_path.display().to_string(),
                "sha256": sha,
                "seed": planted.seed,
                "salient": planted.salient,
                "bytes": buf.len(),
            }))
        })
        .collect::<Result<Vec<_>, _>>()?;

    report.table(&["trace", "seed", "bytes", "salient"]);
    for rec in &written {
        report.row(vec![
            rec["path"].as_str().unwrap_or_default().to_string(),
            rec["seed"].to_string(),
            rec["bytes"].to_string(),
            rec["salient"].to_string(),
        ]);
        report.push("trace", rec);
    }
    Ok(report.into())
}

pub fn validate(g: &Global, args: &ValidateArgs) -> Result<Outcome, CliError> {
    if args.traces.is_empty() {
        return Err(CliError::Config("validate needs at least one trace".into()));
    }
    let mut report = Report::new("validate");
    report.set_config(&json!({ "row_tol": args.row_tol }));
    let _ = g;
    let opts = ReadOptions {
        lenient: true,
        row_tol: args.row_tol,
    };
    let results = args
        .traces
        .par_iter()
        .map(|p| -> Result<(InputDigest, Value), CliError> {
            let digest = digest_file(p)?;
            let bytes = fs::read(p)?;
            let rec = match read_trace_with(&bytes[..], opts) {
                Err(e) => json!({
                    "path": p.display().to_string(),
                    "ok": false,
                    "error_count": 1,
                    "errors": [e.to_string()],
                }),
                Ok(t) => {
                    let errors = t.lint_rows(args.row_tol);
                    let flags = t.flags();
                    json!({
                        "path": p.display().to_string(),
                        "ok": errors.is_empty(),
                        "source_id": t.source_id,
                        "geometry": t.geometry,
                        "has_k": flags.has_k,
                        "has_qv": flags.has_qv,
                        "has_x": flags.has_x,
                        "error_count": errors.len(),
                        "errors": errors.iter().take(20).map(|e| e.to_string()).collect::<Vec<_>>(),
                    })
                }
            };
            Ok((digest, rec))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut bad = 0;
    report.table(&["trace", "ok", "errors", "first error"]);
    for (digest, rec) in results {
        report.add_input(digest);
        if rec["ok"] != Value::Bool(true) {
            bad += 1;
        }
        report.row(vec![
            rec["path"].as_str().unwrap_or_default().to_string(),
            rec["ok"].to_string(),
            rec["error_count"].to_string(),
            rec["errors"][0].as_str().unwrap_or("").to_string(),
        ]);
        report.push("lint", &rec);
    }
    Ok(Outcome {
        report,
        code: if bad > 0 { 4 } else { 0 },
    })
}

pub fn rank(_g: &Global, args: &RankArgs) -> Result<Outcome, CliError> {
    let strategies = parse_strategies(&args.strategies)?.unwrap_or_else(|| vec![RankingStrategy::Wpr(30)]);
    let (trace, digest) = load_trace(&args.trace)?;
    let mut report = Report::new("rank");
    report.add_input(digest);
    let blocks: Vec<usize> = if args.blocks.is_empty() {
        (1..=trace.geometry.num_blocks).collect()
    } else {
        args.blocks.clone()
    };
    if let Some(&b) = blocks.iter().find(|&&b| b == 0 || b > trace.geometry.num_blocks) {
        return Err(CliError::Config(format!("block {b} outside 1..={}", trace.geometry.num_blocks)));
    }
    let mode: ClsBoostMode = args.cls_mode.into();
    report.set_config(&json!({ "strategies": strategies, "blocks": blocks, "cls_boost_mode": mode, "top": args.top }));

    let rows = blocks
        .par_iter()
        .map(|&b| {
            strategies
                .iter()
                .map(|s| Ok((b, *s, s.rank_block(&trace, b - 1, mode)?)))
                .collect::<Result<Vec<_>, ztprune::Error>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    report.table(&["block", "strategy", "top tokens"]);
    for (b, s, signal) in rows.into_iter().flatten() {
        let ranked = signal.ranked_ids();
        let shown = args.top.unwrap_or(ranked.len()).min(ranked.len());
        let scores: Vec<f64> = ranked[..shown].iter().map(|&t| signal.score_of(t).unwrap_or(0.0)).collect();
        report.row(vec![
            b.to_string(),
            s.to_string(),
            format!("{:?}", &ranked[..shown.min(10)]),
        ]);
        report.push(
            "ranking",
            &json!({ "block": b, "strategy": s, "ranked": &ranked[..shown], "scores": scores }),
        );
    }
    Ok(report.into())
}

fn resolve_schedule(preset: Option<&str>, cfg: &RunConfig) -> Result<Option<PruningSchedule>, CliError> {
    match preset {
        Some(name) => named_schedule(name).map(Some),
        None => Ok(cfg.schedule.clone()),
    }
}

pub fn simulate(g: &Global, args: &SimulateArgs) -> Result<Outcome, CliError> {
    if args.traces.is_empty() {
        return Err(CliError::Config("simulate needs at least one trace".into()));
    }
    let mut cfg: RunConfig = config::load(g.config.as_deref())?;
    let schedule = resolve_schedule(args.schedule.as_deref(), &cfg)?.unwrap_or_else(PruningSchedule::deit_s_reference);
    cfg.schedule = Some(schedule.clone());
    let mut report = Report::new("simulate");
    report.set_config(&cfg);

    let results = args
        .traces
        .par_iter()
        .map(|p| -> Result<_, CliError> {
            let (trace, digest) = load_trace(p)?;
            let r = run_schedule_with(&trace, &schedule, &cfg.flops)
                .map_err(|e| CliError::Core(e))?;
            Ok((digest, r))
        })
        .collect::<Result<Vec<_>, _>>()?;

    report.table(&["source", "token counts", "GFLOPs", "mass retained"]);
    for (digest, r) in results {
        report.add_input(digest);
        report.row(vec![
            r.source_id.clone(),
            format!("{:?}", r.block_token_counts),
            fmt_g(r.flops.total_gflops),
            fmt_g(r.importance_mass_retained),
        ]);
        report.push("prune_report", &r);
    }
    Ok(report.into())
}

pub fn flops(g: &Global, args: &FlopsArgs) -> Result<Outcome, CliError> {
    let mut cfg: RunConfig = config::load(g.config.as_deref())?;
    if let Some(name) = &args.geometry {
        cfg.geometry = Some(GeometrySpec::Preset(name.clone()));
    }
    cfg.schedule = resolve_schedule(args.schedule.as_deref(), &cfg)?;
    if let Some(b) = args.budget {
        cfg.budget_gflops = Some(b);
    }
    if let Some(t) = args.tolerance {
        cfg.tolerance = t;
    }
    let geometry = cfg.geometry.clone().unwrap_or_default().resolve()?;
    let schedule = cfg.schedule.clone().unwrap_or_default();
    let mut report = Report::new("flops");
    report.set_config(&cfg);

    let counts = predicted_token_counts(&schedule, &geometry)?;
    let mut breakdown = model_flops(&geometry, &counts, &cfg.flops)?;
    breakdown.pruning_overhead = pruning_overhead(&schedule, &geometry, &counts);
    report.push(
        "flops",
        &json!({
            "geometry": geometry,
            "schedule_layers": schedule.layers.len(),
            "token_counts": counts,
            "breakdown": breakdown,
        }),
    );
    report.table(&["block", "tokens", "GMACs"]);
    for (i, (n, f)) in counts.iter().zip(&breakdown.per_block).enumerate() {
        report.row(vec![(i + 1).to_string(), n.to_string(), format!("{:.4}", *f as f64 / 1e9)]);
    }
    report.row(vec!["patch-embed".into(), String::new(), format!("{:.4}", breakdown.patch_embed as f64 / 1e9)]);
    report.row(vec!["head".into(), String::new(), format!("{:.6}", breakdown.head as f64 / 1e9)]);
    report.row(vec!["total".into(), String::new(), fmt_g(breakdown.total_gflops)]);
    if let Some(budget) = cfg.budget_gflops {
        let check = budget_check(&schedule, &geometry, budget, cfg.tolerance, &cfg.flops)?;
        report.row(vec![
            "budget".into(),
            format!("{budget}±{}", cfg.tolerance),
            if check.pass { "pass".into() } else { "FAIL".into() },
        ]);
        report.push(
            "budget",
            &json!({ "budget_gflops": budget, "tolerance": cfg.tolerance, "pass": check.pass, "achieved_gflops": check.achieved_gflops }),
        );
    }
    Ok(report.into())
}

pub fn converge(_g: &Global, args: &ConvergeArgs) -> Result<Outcome, CliError> {
    let (trace, digest) = load_trace(&args.trace)?;
    let mode: ClsBoostMode = args.cls_mode.into();
    let mut report = Report::new("converge");
    report.add_input(digest);
    report.set_config(&json!({ "iterations": args.iterations, "reference": args.reference, "cls_boost_mode": mode }));
    let points = convergence_study(&trace, &args.iterations, args.reference, mode)?;

    let mut headers = vec!["block".to_string()];
    headers.extend(args.iterations.iter().map(|t| format!("KL@{t}")));
    report.table(&headers.iter().map(String::as_str).collect::<Vec<_>>());
    for chunk in points.chunks(args.iterations.len()) {
        let mut row = vec![chunk[0].block.to_string()];
        row.extend(chunk.iter().map(|p| format!("{:.3e}", p.kl_mean)));
        report.row(row);
    }
    for p in &points {
        report.push("convergence", p);
    }
    Ok(report.into())
}

fn parse_strategies(raw: &[String]) -> Result<Option<Vec<RankingStrategy>>, CliError> {
    if raw.is_empty() {
        return Ok(None);
    }
    raw.iter()
        .map(|s| s.parse::<RankingStrategy>().map_err(|e| CliError::Config(e.to_string())))
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

/// Reads candidate records from an earlier search report.
fn load_checkpoint(path: &Path, report: &mut Report) -> Result<Vec<Candidate>, CliError> {
    report.add_input(digest_file(path)?);
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value =
            serde_json::from_str(line).map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v["record"] == "candidate" {
            let c: Candidate = serde_json::from_value(v)
                .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
            out.push(c);
        }
    }
    Ok(out)
}

fn build_ensemble(
    spec: &config::EnsembleSpec,
    geometry: &GeometrySpec,
    report: &mut Report,
) -> Result<Vec<EnsembleMember>, CliError> {
    let mut members = Vec::new();
    if let Some(p) = &spec.planted {
        members.extend(p.build(&geometry.resolve()?)?);
    }
    members.extend(load_members(&spec.traces, report)?);
    if members.is_empty() {
        return Err(CliError::Config("the ensemble is empty; give [ensemble.planted] or traces".into()));
    }
    Ok(members)
}

pub fn search(g: &Global, args: &SearchArgs) -> Result<Outcome, CliError> {
    let path = g
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("search needs --config with a [space] table".into()))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg: SearchConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if args.include_reference {
        cfg.include_reference = true;
    }
    let mut report = Report::new("search");
    report.set_config(&cfg);
    report.set_seeds(json!({
        "search": cfg.seed,
        "ensemble": cfg.ensemble.planted.as_ref().map(|p| p.seed),
    }));
    let ensemble = build_ensemble(&cfg.ensemble, &cfg.geometry, &mut report)?;
    let resume = match &args.resume {
        Some(p) => load_checkpoint(p, &mut report)?,
        None => Vec::new(),
    };
    let objective: &dyn Objective = match cfg.objective {
        ObjectiveKind::ImportanceMass => &ImportanceMass,
        ObjectiveKind::SalientRetention => &SalientRetention,
    };
    let opts = SearchOptions {
        trials: cfg.trials,
        seed: cfg.seed,
        extra: if cfg.include_reference { vec![PruningSchedule::deit_s_reference()] } else { Vec::new() },
        resume,
        flops: cfg.flops,
    };
    let candidates = mcs_search(&cfg.space, &ensemble, objective, &opts)?;

    report.table(&["rank", "trial", "layers (block:rho:r)", "GFLOPs", "objective"]);
    for (rank, c) in candidates.iter().enumerate() {
        if rank < 10 {
            let layers: Vec<String> = c
                .schedule
                .layers
                .iter()
                .map(|l| format!("{}:{:.2}:{}", l.after_block, l.retention_rate, l.s_prune_count))
                .collect();
            report.row(vec![
                (rank + 1).to_string(),
                c.trial.to_string(),
                layers.join(" "),
                fmt_g(c.achieved_gflops),
                format!("{:.6}", c.objective),
            ]);
        }
        report.push("candidate", c);
    }
    Ok(report.into())
}

pub fn bench(g: &Global, args: &BenchArgs) -> Result<Outcome, CliError> {
    let mut cfg: BenchConfig = config::load(g.config.as_deref())?;
    if let Some(s) = parse_strategies(&args.strategies)? {
        cfg.strategies = s;
    }
    if args.block.is_some() {
        cfg.block = args.block;
    }
    if args.k.is_some() {
        cfg.k = args.k;
    }
    if !args.traces.is_empty() {
        cfg.ensemble.traces = args.traces.clone();
        cfg.ensemble.planted = None;
    }
    if let Some(p) = cfg.ensemble.planted.as_mut() {
        if let Some(n) = args.count {
            p.count = n;
        }
        if let Some(t) = args.noise_temp {
            p.noise_temp = t;
        }
        if let Some(s) = g.seed {
            p.seed = s;
        }
    }
    let mut report = Report::new("bench");
    report.set_config(&cfg);
    report.set_seeds(json!({ "ensemble": cfg.ensemble.planted.as_ref().map(|p| p.seed) }));
    let members = build_ensemble(&cfg.ensemble, &cfg.geometry, &mut report)?;
    let geometry = members[0].trace.geometry.clone();
    if members.iter().any(|m| m.trace.geometry != geometry) {
        return Err(CliError::Input("bench traces mix geometries".into()));
    }
    let block = cfg.block.unwrap_or(geometry.num_blocks);
    if block == 0 || block > geometry.num_blocks {
        return Err(CliError::Config(format!("block {block} outside 1..={}", geometry.num_blocks)));
    }
    let scores = bench_strategies(&members, &cfg.strategies, block - 1, cfg.k, cfg.cls_boost_mode)?;

    let salient = members[0].truth.as_ref().map(|t| t.len()).unwrap_or(0);
    let k = scores[0].k;
    let n = geometry.num_tokens;
    let candidates = n - usize::from(geometry.cls_present);
    let p = salient as f64 / n as f64;
    let trials = (k * members.len()) as f64;
    report.push(
        "reference",
        &json!({
            "block": block,
            "k": k,
            "salient": salient,
            "num_tokens": n,
            "traces": members.len(),
            "random_expected": salient as f64 / n as f64,
            "random_expected_exact": if k.min(salient) > 0 {
                (k * salient) as f64 / candidates as f64 / k.min(salient) as f64
            } else { 0.0 },
            "binomial_sigma": (p * (1.0 - p) / trials).sqrt(),
        }),
    );
    report.table(&["strategy", "k", "precision@k", "std", "mass retention"]);
    for s in &scores {
        report.row(vec![
            s.strategy.to_string(),
            s.k.to_string(),
            fmt_g(s.precision_mean),
            fmt_g(s.precision_std),
            fmt_g(s.mass_retention_mean),
        ]);
        report.push("strategy", s);
    }
    Ok(report.into())
}
