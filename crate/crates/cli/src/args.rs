use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Encrypted traffic classification with a sparse mixture-of-experts transformer.
///
/// Typical pipeline: ingest -> tokenize -> pretrain -> finetune -> eval.
/// Every command appends a JSON line describing the run to
/// `manifest.jsonl` in its output directory.
#[derive(Debug, Parser)]
#[command(name = "trafficmoe", version, arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse captures into labeled session flows.
    Ingest(IngestArgs),
    /// Build a token vocabulary from stored flows.
    BuildVocab(BuildVocabArgs),
    /// Serialize and tokenize stored flows into a corpus file.
    Tokenize(TokenizeArgs),
    /// Next-token pretraining on an (unlabeled) corpus.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning with layer-wise rate decay and early stopping.
    Finetune(FinetuneArgs),
    /// Classification metrics of a checkpoint on a labeled corpus.
    Eval(EvalArgs),
    /// Inference throughput, latency and FLOPs of a model and its dense match.
    Bench(BenchArgs),
    /// Out-of-distribution train/test splits of stored flows.
    Ood(OodArgs),
    /// Per-token routing decisions of a checkpoint.
    RouteTrace(RouteTraceArgs),
    /// Run quick invariant checks; exits 0 iff all pass.
    Selftest(SelftestArgs),
}

/// Flags shared by every command that builds or trains from a config.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML file with optional [serializer], [model] and [train] tables.
    /// Flags override it; it overrides built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed; overrides the config file.
    #[arg(long, env = "TRAFFICMOE_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct SerializerArgs {
    /// Packets kept per flow (K).
    #[arg(long = "packets-per-flow", visible_alias = "k")]
    pub packets_per_flow: Option<usize>,
    /// Payload bytes sampled per packet (J).
    #[arg(long = "payload-bytes", visible_alias = "j")]
    pub payload_bytes: Option<usize>,
    /// Sequence length after padding or truncation (T).
    #[arg(long = "max-tokens")]
    pub max_tokens: Option<usize>,
    /// Bigram stride: 2 for disjoint byte pairs, 1 for overlapping.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VocabModeArg {
    /// All 65,536 byte pairs plus the five markers.
    Full,
    /// Only byte pairs seen at least `--min-freq` times.
    Wordpiece,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    #[arg(long = "vocab-mode", value_enum, default_value = "wordpiece")]
    pub vocab_mode: VocabModeArg,
    /// Minimum corpus count of a bigram in wordpiece mode.
    #[arg(long = "min-freq", default_value_t = 1)]
    pub min_freq: u64,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long = "d-model")]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Specialized experts per block (N).
    #[arg(long)]
    pub experts: Option<usize>,
    /// Experts selected per token (k).
    #[arg(long = "top-k")]
    pub top_k: Option<usize>,
    /// Shared-expert width; specialized experts use d_ff / top_k.
    #[arg(long = "d-ff")]
    pub d_ff: Option<usize>,
    #[arg(long = "init-std")]
    pub init_std: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Weight of the load-balancing loss.
    #[arg(long = "aux-weight")]
    pub aux_weight: Option<f64>,
    #[arg(long = "weight-decay")]
    pub weight_decay: Option<f64>,
    /// Stop after this many optimizer steps.
    #[arg(long = "max-steps")]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Capture file (pcap or pcapng); repeat for several.
    #[arg(long, required = true)]
    pub pcap: Vec<PathBuf>,
    /// Class label of the matching --pcap; give one per capture or none.
    #[arg(long)]
    pub label: Vec<u32>,
    /// Flows with fewer packets are dropped.
    #[arg(long = "min-packets", default_value_t = 3)]
    pub min_packets: usize,
    /// Keep micro-flows anyway.
    #[arg(long = "keep-all")]
    pub keep_all: bool,
    /// Output flow directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Flow directory written by `ingest`.
    #[arg(long)]
    pub flows: PathBuf,
    /// Vocabulary file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[command(flatten)]
    pub serializer: SerializerArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    /// Flow directory written by `ingest`.
    #[arg(long)]
    pub flows: PathBuf,
    /// Existing vocabulary; built from these flows when omitted.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Where a freshly built vocabulary goes; defaults to `<out>.vocab`.
    #[arg(long = "vocab-out")]
    pub vocab_out: Option<PathBuf>,
    #[command(flatten)]
    pub vocab_build: VocabArgs,
    /// Corpus file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub serializer: SerializerArgs,
    /// Split flows into windows of this many seconds before tokenizing.
    #[arg(long = "slice-window")]
    pub slice_window: Option<f64>,
    /// Keep sliced sub-flows shorter than three packets.
    #[arg(long = "keep-short")]
    pub keep_short: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Corpus file written by `tokenize`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary the corpus was tokenized with; sets the model's vocab size.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: ConfigArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Labeled corpus written by `tokenize`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary the corpus was tokenized with; needed without --init.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Pretrained checkpoint; tensors are copied by name.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Number of classes; one more than the largest label when omitted.
    #[arg(long = "num-classes")]
    pub num_classes: Option<usize>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Per-layer learning-rate decay factor.
    #[arg(long = "llrd-decay")]
    pub llrd_decay: Option<f64>,
    /// Train, validation and test proportions, e.g. `8,1,1`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub split: Option<Vec<f64>>,
    /// Split without preserving class proportions.
    #[arg(long = "no-stratify")]
    pub no_stratify: bool,
    #[command(flatten)]
    pub common: ConfigArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint with a class head.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Labeled corpus.
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics TSV to write.
    #[arg(long = "metrics-out")]
    pub metrics_out: PathBuf,
    /// Optional per-sequence predictions TSV.
    #[arg(long = "predictions-out")]
    pub predictions_out: Option<PathBuf>,
    /// Optional per-expert routing statistics TSV.
    #[arg(long = "routing-out")]
    pub routing_out: Option<PathBuf>,
    #[arg(long = "batch-size", default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Mixture checkpoint; a fresh model from the config when omitted.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dense checkpoint; the parameter-matched variant when omitted.
    #[arg(long = "dense-ckpt")]
    pub dense_ckpt: Option<PathBuf>,
    /// Comma-separated batch sizes.
    #[arg(long = "batch-sizes", value_delimiter = ',', default_value = "8,16,32,64")]
    pub batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Timed batches per batch size.
    #[arg(long, default_value_t = 50)]
    pub batches: usize,
    /// Sequence length of the random inputs; the model's max_tokens when omitted.
    #[arg(long = "seq-len")]
    pub seq_len: Option<usize>,
    /// Report TSV to write.
    #[arg(long)]
    pub report: PathBuf,
    /// Vocabulary size of a fresh model.
    #[arg(long = "vocab-size")]
    pub vocab_size: Option<usize>,
    #[command(flatten)]
    pub common: ConfigArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OodMode {
    /// Earliest 40% of each class span trains, latest 40% tests.
    Time,
    /// Dominant:minor sub-classes 4:1 in train and 1:4 in test.
    Proportion,
    /// Half of each coarse class's sub-classes appear only in test.
    Compose,
}

#[derive(Debug, Args)]
pub struct OodArgs {
    #[arg(long, value_enum)]
    pub mode: OodMode,
    /// Flow directory written by `ingest`; labels are fine classes.
    #[arg(long)]
    pub flows: PathBuf,
    /// TSV of `fine<TAB>coarse<TAB>dominant(0|1)`; needed by proportion and compose.
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    /// Training samples per coarse class (proportion mode).
    #[arg(long = "train-budget")]
    pub train_budget: Option<usize>,
    /// Test samples per coarse class (proportion mode).
    #[arg(long = "test-budget")]
    pub test_budget: Option<usize>,
    /// Share of each seen sub-class held out for test (compose mode).
    #[arg(long = "test-fraction", default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, env = "TRAFFICMOE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives `train/` and `test/` flow directories.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RouteTraceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus to route.
    #[arg(long)]
    pub data: PathBuf,
    /// Trace TSV: layer, token row, expert, probability, selected.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-layer load and probability TSV.
    #[arg(long = "stats-out")]
    pub stats_out: Option<PathBuf>,
    /// Route only the first this many sequences.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long = "batch-size", default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Directory for the run manifest; none is written when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
