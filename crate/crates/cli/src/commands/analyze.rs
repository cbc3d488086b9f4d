use std::io::Write;

use serde_json::json;
use trafficmoe_core::eval::{
    bench_mode, compute_metrics, efficiency_bench, evaluate, write_bench_tsv, BenchConfig, RoutingStats,
};
use trafficmoe_core::model::{forward, ModelParams, RoutingTrace};
use trafficmoe_core::tensor::Graph;
use trafficmoe_core::Model32;

use super::{check, create, load_corpus};
use crate::args::{BenchArgs, EvalArgs, RouteTraceArgs};
use crate::config::{self, ConfigFile};
use crate::error::{CliError, CliResult};
use crate::manifest::{dir_of, Run};

pub fn eval(a: EvalArgs) -> CliResult {
    check(a.batch_size > 0, || "--batch-size must be positive".into())?;
    let mut run = Run::start("eval");
    run.config(json!({ "batch_size": a.batch_size }), None);
    run.input(&a.ckpt)?;
    run.input(&a.data)?;
    let params: Model32 = ModelParams::load(&a.ckpt)?;
    let data = load_corpus(&a.data)?;
    if data.iter().all(|s| s.label.is_none()) {
        return Err(anyhow::anyhow!("{} has no labeled sequences", a.data.display()).into());
    }
    let (cm, preds) = evaluate(&params, &data, a.batch_size)?;
    let metrics = compute_metrics(&cm);
    metrics.write_tsv(create(&a.metrics_out)?)?;
    run.output(&a.metrics_out);
    println!(
        "{} sequences: accuracy {:.4}, macro-F1 {:.4}, macro-FNR {:.4}, macro-FPR {:.4}",
        cm.total(),
        metrics.accuracy,
        metrics.macro_f1,
        metrics.macro_fnr,
        metrics.macro_fpr
    );
    if let Some(p) = &a.predictions_out {
        let mut w = create(p)?;
        writeln!(w, "index\tlabel\tpredicted")?;
        for (i, (s, pred)) in data.iter().zip(&preds.predicted).enumerate() {
            let label = s.label.map_or("-".to_string(), |l| l.to_string());
            writeln!(w, "{i}\t{label}\t{pred}")?;
        }
        w.flush()?;
        run.output(p);
    }
    if let Some(p) = &a.routing_out {
        preds.routing.write_tsv(create(p)?)?;
        run.output(p);
    }
    run.finish(dir_of(&a.metrics_out))?;
    Ok(())
}

pub fn bench(a: BenchArgs) -> CliResult {
    check(!a.batch_sizes.is_empty() && a.batch_sizes.iter().all(|&b| b > 0), || {
        "--batch-sizes must list positive sizes".into()
    })?;
    check(a.batches > 0, || "--batches must be positive".into())?;
    check(a.seq_len != Some(0), || "--seq-len must be positive".into())?;
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let mut fresh = config::model(&file, &a.model)?;
    if let Some(v) = a.vocab_size {
        fresh.vocab_size = v;
    }
    if a.ckpt.is_none() {
        fresh.validate().map_err(|e| CliError::usage(e.to_string()))?;
    }
    let seed = a.common.seed.unwrap_or(0);
    let cfg = BenchConfig {
        batch_sizes: a.batch_sizes.clone(),
        warmup_batches: a.warmup,
        timed_batches: a.batches,
        seq_len: a.seq_len,
        seed,
    };

    let mut run = Run::start("bench");
    if let Some(c) = &a.common.config {
        run.input(c)?;
    }
    let moe: Model32 = match &a.ckpt {
        Some(p) => {
            run.input(p)?;
            ModelParams::load(p)?
        }
        None => ModelParams::init(&fresh, seed)?,
    };
    if moe.config.is_dense() {
        return Err(anyhow::anyhow!("the benchmarked model must be a mixture; pass the dense one with --dense-ckpt").into());
    }
    let dense: Model32 = match &a.dense_ckpt {
        Some(p) => {
            run.input(p)?;
            ModelParams::load(p)?
        }
        None => ModelParams::init(&moe.config.dense_variant(), seed)?,
    };
    run.config(
        json!({
            "model": moe.config,
            "dense": dense.config,
            "batch_sizes": cfg.batch_sizes,
            "warmup_batches": cfg.warmup_batches,
            "timed_batches": cfg.timed_batches,
            "seq_len": cfg.seq_len.unwrap_or(moe.config.max_tokens),
        }),
        Some(seed),
    );
    let (m, d) = efficiency_bench(&moe, &dense, &cfg)?;
    write_bench_tsv(create(&a.report)?, &[&m, &d])?;
    for (rm, rd) in m.rows.iter().zip(&d.rows) {
        println!(
            "batch {:>4}: moe {:>10.1} seq/s, dense {:>10.1} seq/s, speedup {:.2}x",
            rm.batch_size,
            rm.throughput,
            rd.throughput,
            rm.throughput / rd.throughput
        );
    }
    run.output(&a.report);
    run.finish(dir_of(&a.report))?;
    Ok(())
}

pub fn route_trace(a: RouteTraceArgs) -> CliResult {
    check(a.batch_size > 0, || "--batch-size must be positive".into())?;
    check(a.limit != Some(0), || "--limit must be positive".into())?;
    let mut run = Run::start("route-trace");
    run.config(json!({ "batch_size": a.batch_size, "limit": a.limit }), None);
    run.input(&a.ckpt)?;
    run.input(&a.data)?;
    let params: Model32 = ModelParams::load(&a.ckpt)?;
    if params.config.is_dense() {
        return Err(anyhow::anyhow!("{} is a dense model without routers", a.ckpt.display()).into());
    }
    let mut data = load_corpus(&a.data)?;
    if let Some(n) = a.limit {
        data.truncate(n);
    }
    let mode = bench_mode(&params);
    let mut trace = RoutingTrace::default();
    let mut stats = RoutingStats::default();
    for chunk in data.chunks(a.batch_size) {
        let mut g = Graph::inference();
        let out = forward(&mut g, &params, chunk, mode)?;
        stats.add(&out.trace);
        trace.extend(&out.trace);
    }
    trace.write_tsv(create(&a.out)?)?;
    run.output(&a.out);
    if let Some(p) = &a.stats_out {
        stats.write_tsv(create(p)?)?;
        run.output(p);
    }
    println!(
        "routed {} tokens through {} layers; mean load variance {:.3e}",
        stats.tokens(),
        stats.num_layers(),
        stats.load_variance()
    );
    run.finish(dir_of(&a.out))?;
    Ok(())
}
