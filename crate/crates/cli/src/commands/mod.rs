mod analyze;
mod data;
mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::Context;
use trafficmoe_core::token::{read_corpus, TokenSequence, Vocabulary};

use crate::args::Command;
use crate::error::{CliError, CliResult};

pub fn run(command: Command) -> CliResult {
    match command {
        Command::Ingest(a) => data::ingest(a),
        Command::BuildVocab(a) => data::build_vocab(a),
        Command::Tokenize(a) => data::tokenize(a),
        Command::Ood(a) => data::ood(a),
        Command::Pretrain(a) => train::pretrain(a),
        Command::Finetune(a) => train::finetune(a),
        Command::Eval(a) => analyze::eval(a),
        Command::Bench(a) => analyze::bench(a),
        Command::RouteTrace(a) => analyze::route_trace(a),
        Command::Selftest(a) => crate::selftest::run(a),
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> CliResult {
    if ok {
        Ok(())
    } else {
        Err(CliError::Usage(msg()))
    }
}

fn load_corpus(path: &Path) -> CliResult<Vec<TokenSequence>> {
    let f = File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    let seqs = read_corpus(BufReader::new(f)).with_context(|| format!("reading corpus {}", path.display()))?;
    if seqs.is_empty() {
        return Err(anyhow::anyhow!("corpus {} is empty", path.display()).into());
    }
    let len = seqs[0].len();
    if let Some(i) = seqs.iter().position(|s| s.len() != len) {
        return Err(anyhow::anyhow!(
            "corpus {}: sequence {} has {} tokens, the first has {len}",
            path.display(),
            i + 1,
            seqs[i].len()
        )
        .into());
    }
    Ok(seqs)
}

fn load_vocab(path: &Path) -> CliResult<Vocabulary> {
    let f = File::open(path).with_context(|| format!("opening vocabulary {}", path.display()))?;
    Ok(Vocabulary::read(BufReader::new(f)).with_context(|| format!("reading vocabulary {}", path.display()))?)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}
