use std::path::Path;

use serde_json::json;
use trafficmoe_core::eval::{compute_metrics, evaluate};
use trafficmoe_core::model::{ModelConfig, ModelParams};
use trafficmoe_core::token::write_corpus;
use trafficmoe_core::train::{self as core_train, split_dataset, TrainConfig, TrainOutcome};
use trafficmoe_core::Model32;

use super::{check, create, load_corpus, load_vocab};
use crate::args::{ConfigArgs, FinetuneArgs, ModelArgs, PretrainArgs, TrainArgs};
use crate::config::{self, model_flags_given, ConfigFile};
use crate::error::{CliError, CliResult};
use crate::manifest::Run;

struct Setup {
    model: ModelConfig,
    train: TrainConfig,
    /// Whether the config file or flags say anything about the architecture.
    model_overridden: bool,
}

/// Resolves and validates both configs before any input is read. The
/// vocabulary size and sequence length are filled in later from the data.
fn setup(
    common: &ConfigArgs,
    m: &ModelArgs,
    t: &TrainArgs,
    base: TrainConfig,
    extra: impl FnOnce(&mut TrainConfig),
) -> CliResult<Setup> {
    let file = ConfigFile::load(common.config.as_deref())?;
    let model = config::model(&file, m)?;
    let mut train = config::train(&file, base, t, common.seed)?;
    extra(&mut train);
    train.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let probe = ModelConfig {
        aux_weight: train.aux_weight,
        ..model.clone()
    };
    probe.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(Setup {
        model_overridden: model_flags_given(m) || model != ModelConfig::default(),
        model,
        train,
    })
}

/// The checkpoint given by `--init`, if any.
fn load_init(run: &mut Run, s: &Setup, init: Option<&Path>) -> CliResult<Option<Model32>> {
    let Some(p) = init else {
        return Ok(None);
    };
    if s.model_overridden {
        log::warn!("architecture comes from {}; model settings are ignored", p.display());
    }
    run.input(p)?;
    Ok(Some(ModelParams::load(p)?))
}

fn vocab_size(run: &mut Run, vocab: Option<&Path>) -> CliResult<usize> {
    let p = vocab.expect("checked before reading inputs");
    run.input(p)?;
    Ok(load_vocab(p)?.len())
}

fn summarize<T>(what: &str, out: &TrainOutcome<T>, dir: &Path) {
    println!(
        "{what}: {} epochs, {} steps, best epoch {}; run directory {}",
        out.epochs_run,
        out.steps,
        out.best_epoch,
        dir.display()
    );
}

pub fn pretrain(a: PretrainArgs) -> CliResult {
    check(a.init.is_some() || a.vocab.is_some(), || "--vocab is required without --init".into())?;
    let s = setup(&a.common, &a.model, &a.train, TrainConfig::pretrain(), |_| {})?;
    let mut run = Run::start("pretrain");
    if let Some(c) = &a.common.config {
        run.input(c)?;
    }
    run.input(&a.corpus)?;
    let data = load_corpus(&a.corpus)?;
    let seq_len = data[0].len();
    let params = match load_init(&mut run, &s, a.init.as_deref())? {
        Some(mut p) => {
            p.config.aux_weight = s.train.aux_weight;
            p.config.max_tokens = seq_len;
            p
        }
        None => {
            let model = ModelConfig {
                vocab_size: vocab_size(&mut run, a.vocab.as_deref())?,
                max_tokens: seq_len,
                aux_weight: s.train.aux_weight,
                num_classes: None,
                ..s.model.clone()
            };
            ModelParams::init(&model, s.train.seed)?
        }
    };
    run.config(json!({ "model": params.config, "train": s.train }), Some(s.train.seed));
    let outcome = core_train::pretrain(params, &data, &s.train, Some(&a.out))?;
    summarize("pretrain", &outcome, &a.out);
    run.output(&a.out.join("best.ckpt"));
    run.output(&a.out.join("last.ckpt"));
    run.finish(&a.out)?;
    Ok(())
}

/// Copies every tensor of `from` whose name and shape match into `to`.
fn transfer(from: &Model32, to: &mut Model32) -> usize {
    let mut copied = 0;
    for (i, name) in to.names.iter().enumerate() {
        if let Some(j) = from.index_of(name) {
            if from.tensors[j].shape() == to.tensors[i].shape() {
                to.tensors[i] = from.tensors[j].clone();
                copied += 1;
            }
        }
    }
    copied
}

pub fn finetune(a: FinetuneArgs) -> CliResult {
    check(a.init.is_some() || a.vocab.is_some(), || "--vocab is required without --init".into())?;
    check(a.num_classes != Some(0), || "--num-classes must be positive".into())?;
    let s = setup(&a.common, &a.model, &a.train, TrainConfig::finetune(), |t| {
        if let Some(p) = a.patience {
            t.patience = p;
        }
        if let Some(x) = a.llrd_decay {
            t.llrd_decay = x;
        }
        if let Some(r) = &a.split {
            t.split = [r[0], r[1], r[2]];
        }
    })?;

    let mut run = Run::start("finetune");
    if let Some(c) = &a.common.config {
        run.input(c)?;
    }
    run.input(&a.corpus)?;
    let data = load_corpus(&a.corpus)?;
    let mut max_label = 0;
    for (i, seq) in data.iter().enumerate() {
        let l = seq
            .label
            .ok_or_else(|| anyhow::anyhow!("corpus sequence {} has no label", i + 1))?;
        max_label = max_label.max(l as usize);
    }
    let classes = a.num_classes.unwrap_or(max_label + 1);
    if max_label >= classes {
        return Err(anyhow::anyhow!("label {max_label} does not fit {classes} classes").into());
    }
    let seq_len = data[0].len();
    let pretrained = load_init(&mut run, &s, a.init.as_deref())?;
    let arch = match &pretrained {
        Some(p) => p.config.clone(),
        None => ModelConfig {
            vocab_size: vocab_size(&mut run, a.vocab.as_deref())?,
            ..s.model.clone()
        },
    };
    let model = ModelConfig {
        max_tokens: seq_len,
        aux_weight: s.train.aux_weight,
        num_classes: Some(classes),
        ..arch
    };
    let mut params = ModelParams::init(&model, s.train.seed)?;
    if let Some(p) = &pretrained {
        let n = transfer(p, &mut params);
        log::info!("copied {n} of {} tensors from the pretrained checkpoint", params.len());
    }
    let stratified = !a.no_stratify;
    run.config(
        json!({ "model": params.config, "train": s.train, "stratified": stratified }),
        Some(s.train.seed),
    );

    let (train, val, test) = split_dataset(&data, s.train.split, s.train.seed, stratified);
    log::info!("split: {} train, {} validation, {} test", train.len(), val.len(), test.len());
    if train.is_empty() {
        return Err(anyhow::anyhow!("the training split is empty").into());
    }
    let outcome = core_train::finetune(params, &train, &val, &s.train, Some(&a.out))?;
    summarize("finetune", &outcome, &a.out);
    let test_path = a.out.join("test.corpus");
    write_corpus(create(&test_path)?, &test)?;
    run.output(&test_path);
    if test.is_empty() {
        log::warn!("the test split is empty; no test metrics written");
    } else {
        let (cm, _) = evaluate(&outcome.best, &test, s.train.batch_size)?;
        let metrics = compute_metrics(&cm);
        let path = a.out.join("test_metrics.tsv");
        metrics.write_tsv(create(&path)?)?;
        println!("test macro-F1 {:.4}, accuracy {:.4}", metrics.macro_f1, metrics.accuracy);
        run.output(&path);
    }
    run.output(&a.out.join("best.ckpt"));
    run.output(&a.out.join("last.ckpt"));
    run.finish(&a.out)?;
    Ok(())
}
