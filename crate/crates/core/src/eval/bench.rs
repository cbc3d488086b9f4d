use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{ffn_active_params, ffn_total_params, forward, forward_flops, Mode, ModelError, ModelParams};
use crate::tensor::Graph;
use crate::token::TokenSequence;
use crate::Scalar;

/// Batch sizes measured by default.
pub const DEFAULT_BATCH_SIZES: [usize; 4] = [8, 16, 32, 64];

/// Largest allowed relative difference in total parameters between the
/// mixture and its dense counterpart.
pub const PARAM_MATCH_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("parameter counts differ by more than 1%: mixture {moe}, dense {dense}")]
    ParamMismatch { moe: usize, dense: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub batch_size: usize,
    pub throughput: f64,
    pub latency_ms: f64,
    pub flops_per_seq: u64,
    /// FLOPs counted on the tape, divided by the batch size.
    pub counted_flops_per_seq: u64,
    pub active_ratio: f64,
    /// Peak activation bytes held by one forward tape.
    pub activation_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub model: String,
    pub total_params: usize,
    pub rows: Vec<BenchRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub warmup_batches: usize,
    pub timed_batches: usize,
    /// Sequence length of the random inputs; the model's `max_tokens` when `None`.
    pub seq_len: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_sizes: DEFAULT_BATCH_SIZES.to_vec(),
            warmup_batches: 3,
            timed_batches: 50,
            seq_len: None,
            seed: 0,
        }
    }
}

fn random_batch(rng: &mut ChaCha8Rng, batch: usize, seq_len: usize, vocab: usize) -> Vec<TokenSequence> {
    (0..batch)
        .map(|_| {
            let ids = (0..seq_len).map(|_| rng.random_range(5..vocab as u32)).collect();
            TokenSequence::from_ids(ids, None)
        })
        .collect()
}

/// Mode used for timing: the class head when present, otherwise the vocabulary head.
pub fn bench_mode<T>(params: &ModelParams<T>) -> Mode {
    if params.config.num_classes.is_some() {
        Mode::Classify
    } else {
        Mode::Lm
    }
}

/// Times inference of one model on random full-length batches.
pub fn bench_model<T: Scalar>(params: &ModelParams<T>, name: &str, cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.timed_batches == 0 {
        return Err(BenchError::Config("at least one timed batch is required".into()));
    }
    let seq_len = cfg.seq_len.unwrap_or(params.config.max_tokens);
    let mode = bench_mode(params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ratio = ffn_active_params(&params.config) as f64 / ffn_total_params(&params.config) as f64;
    let mut rows = Vec::with_capacity(cfg.batch_sizes.len());
    for &b in &cfg.batch_sizes {
        if b == 0 {
            return Err(BenchError::Config("batch size must be positive".into()));
        }
        let batches: Vec<Vec<TokenSequence>> = (0..cfg.warmup_batches + cfg.timed_batches)
            .map(|_| random_batch(&mut rng, b, seq_len, params.config.vocab_size))
            .collect();
        let mut counted = 0;
        let mut activation_bytes = 0;
        for batch in &batches[..cfg.warmup_batches] {
            let mut g = Graph::<T>::inference();
            forward(&mut g, params, batch, mode)?;
        }
        let start = Instant::now();
        for batch in &batches[cfg.warmup_batches..] {
            let mut g = Graph::<T>::inference();
            forward(&mut g, params, batch, mode)?;
            counted = g.flops();
            activation_bytes = activation_bytes.max(g.activation_bytes());
        }
        let secs = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        let n = cfg.timed_batches as f64;
        rows.push(BenchRow {
            batch_size: b,
            throughput: n * b as f64 / secs,
            latency_ms: secs * 1e3 / n,
            flops_per_seq: forward_flops(&params.config, b, seq_len, mode).total() / b as u64,
            counted_flops_per_seq: counted / b as u64,
            active_ratio: ratio,
            activation_bytes,
        });
    }
    Ok(BenchReport {
        model: name.to_string(),
        total_params: params.num_params(),
        rows,
    })
}

/// Benchmarks a mixture model against its parameter-matched dense variant.
pub fn efficiency_bench<T: Scalar>(
    moe: &ModelParams<T>,
    dense: &ModelParams<T>,
    cfg: &BenchConfig,
) -> Result<(BenchReport, BenchReport), BenchError> {
    let (a, b) = (moe.num_params(), dense.num_params());
    if (a as f64 - b as f64).abs() > PARAM_MATCH_TOLERANCE * a as f64 {
        return Err(BenchError::ParamMismatch { moe: a, dense: b });
    }
    let first = bench_model(moe, "moe", cfg)?;
    let second = bench_model(dense, "dense", cfg)?;
    Ok((first, second))
}

/// One TSV table for any number of reports.
pub fn write_bench_tsv<W: Write>(mut w: W, reports: &[&BenchReport]) -> std::io::Result<()> {
    writeln!(
        w,
        "model\ttotal_params\tbatch_size\tthroughput_seq_per_s\tlatency_ms\tflops_per_seq\tactive_ratio\tactivation_bytes"
    )?;
    for r in reports {
        for row in &r.rows {
            writeln!(
                w,
                "{}\t{}\t{}\t{:.3}\t{:.3}\t{}\t{:.6}\t{}",
                r.model,
                r.total_params,
                row.batch_size,
                row.throughput,
                row.latency_ms,
                row.flops_per_seq,
                row.active_ratio,
                row.activation_bytes
            )?;
        }
    }
    w.flush()
}
