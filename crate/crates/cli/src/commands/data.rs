use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::json;
use trafficmoe_core::eval::{
    compose_shift_split, masked_subclasses, proportion_shift_split, time_shift_split, Hierarchy, OodSplit, Subclass,
};
use trafficmoe_core::flow::{
    filter_micro_flows, parse_capture, read_flows, reassemble_sessions, write_flows, ClassId, SessionFlow,
};
use trafficmoe_core::token::{
    build_vocabulary, serialize_flow, temporal_slice, tokenize as tokenize_flow, write_corpus, SerializerConfig,
    VocabMode,
};

use super::{check, create, load_vocab};
use crate::args::{BuildVocabArgs, IngestArgs, OodArgs, OodMode, SerializerArgs, TokenizeArgs, VocabArgs, VocabModeArg};
use crate::config::{self, ConfigFile};
use crate::error::{CliError, CliResult};
use crate::manifest::{dir_of, Run};

pub fn ingest(a: IngestArgs) -> CliResult {
    check(a.label.is_empty() || a.label.len() == a.pcap.len(), || {
        format!("{} --label values for {} --pcap files", a.label.len(), a.pcap.len())
    })?;
    check(a.min_packets > 0, || "--min-packets must be at least 1".into())?;

    let mut run = Run::start("ingest");
    run.config(
        json!({ "pcap": a.pcap, "label": a.label, "min_packets": a.min_packets, "keep_all": a.keep_all }),
        None,
    );
    let mut flows: Vec<SessionFlow> = Vec::new();
    let mut summary = String::from("capture\tlabel\tpackets\tsessions\tkept\n");
    for (i, path) in a.pcap.iter().enumerate() {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        run.input_bytes(path, &bytes);
        let packets = parse_capture(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        let sessions = reassemble_sessions(&packets);
        let n_sessions = sessions.len();
        let label = a.label.get(i).copied();
        let kept = filter_micro_flows(sessions, a.min_packets, a.keep_all);
        summary.push_str(&format!(
            "{}\t{}\t{}\t{n_sessions}\t{}\n",
            path.display(),
            label.map_or("-".to_string(), |l| l.to_string()),
            packets.len(),
            kept.len()
        ));
        flows.extend(kept.into_iter().map(|mut f| {
            f.label = label;
            f
        }));
    }
    write_flows(&a.out, &flows)?;
    let summary_path = a.out.join("ingest.tsv");
    std::fs::write(&summary_path, &summary)?;
    print!("{summary}");
    println!("wrote {} flows to {}", flows.len(), a.out.display());
    run.output(&a.out);
    run.finish(&a.out)?;
    Ok(())
}

fn vocab_mode(a: &VocabArgs) -> CliResult<VocabMode> {
    match a.vocab_mode {
        VocabModeArg::Full => Ok(VocabMode::FullBigram),
        VocabModeArg::Wordpiece => {
            check(a.min_freq > 0, || "--min-freq must be at least 1".into())?;
            Ok(VocabMode::WordPiece { min_freq: a.min_freq })
        }
    }
}

fn checked_serializer(cfg: Option<&Path>, a: &SerializerArgs) -> CliResult<SerializerConfig> {
    let ser = config::serializer(&ConfigFile::load(cfg)?, a)?;
    ser.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(ser)
}

fn read_flow_dir(run: &mut Run, dir: &Path) -> CliResult<Vec<SessionFlow>> {
    run.input(dir)?;
    Ok(read_flows(dir).with_context(|| format!("reading flows from {}", dir.display()))?)
}

pub fn build_vocab(a: BuildVocabArgs) -> CliResult {
    let mode = vocab_mode(&a.vocab)?;
    let ser = checked_serializer(a.config.as_deref(), &a.serializer)?;
    let mut run = Run::start("build-vocab");
    run.config(json!({ "serializer": ser, "vocab": mode }), None);
    if let Some(c) = &a.config {
        run.input(c)?;
    }
    let flows = read_flow_dir(&mut run, &a.flows)?;
    let serialized: Vec<_> = flows.iter().map(|f| serialize_flow(f, &ser)).collect();
    let vocab = build_vocabulary(&serialized, mode)?;
    vocab.write(create(&a.out)?)?;
    println!("vocabulary of {} tokens written to {}", vocab.len(), a.out.display());
    run.output(&a.out);
    run.finish(dir_of(&a.out))?;
    Ok(())
}

pub fn tokenize(a: TokenizeArgs) -> CliResult {
    let mode = vocab_mode(&a.vocab_build)?;
    let ser = checked_serializer(a.config.as_deref(), &a.serializer)?;
    if let Some(w) = a.slice_window {
        check(w > 0.0 && w.is_finite(), || format!("--slice-window {w} must be positive"))?;
    }
    let mut run = Run::start("tokenize");
    run.config(
        json!({
            "serializer": ser,
            "vocab": a.vocab.as_ref().map_or(json!(mode), |p| json!(p)),
            "slice_window": a.slice_window,
            "keep_short": a.keep_short,
        }),
        None,
    );
    if let Some(c) = &a.config {
        run.input(c)?;
    }
    let flows = read_flow_dir(&mut run, &a.flows)?;
    let flows: Vec<SessionFlow> = match a.slice_window {
        Some(w) => flows.iter().flat_map(|f| temporal_slice(f, w, a.keep_short)).collect(),
        None => flows,
    };
    let serialized: Vec<_> = flows.iter().map(|f| serialize_flow(f, &ser)).collect();
    let vocab = match &a.vocab {
        Some(p) => {
            run.input(p)?;
            load_vocab(p)?
        }
        None => {
            let v = build_vocabulary(&serialized, mode)?;
            let path = a.vocab_out.clone().unwrap_or_else(|| sibling(&a.out, "vocab"));
            v.write(create(&path)?)?;
            println!("vocabulary of {} tokens written to {}", v.len(), path.display());
            run.output(&path);
            v
        }
    };
    let seqs: Vec<_> = serialized
        .iter()
        .zip(&flows)
        .map(|(s, f)| tokenize_flow(s, &vocab, ser.max_tokens, f.label))
        .collect();
    write_corpus(create(&a.out)?, &seqs)?;
    println!("{} sequences of {} tokens written to {}", seqs.len(), ser.max_tokens, a.out.display());
    run.output(&a.out);
    run.finish(dir_of(&a.out))?;
    Ok(())
}

/// `path` with `.ext` appended to its full file name.
fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Reads `fine<TAB>coarse<TAB>dominant` lines; `#` starts a comment and a
/// leading header row is skipped.
pub fn parse_hierarchy(text: &str) -> anyhow::Result<Hierarchy> {
    let mut h = Hierarchy::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() || (n == 0 && line.starts_with("fine")) {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let bad = || anyhow::anyhow!("hierarchy line {}: expected `fine coarse dominant`", n + 1);
        if cols.len() != 3 {
            return Err(bad());
        }
        let fine: ClassId = cols[0].parse().map_err(|_| bad())?;
        let coarse: ClassId = cols[1].parse().map_err(|_| bad())?;
        let dominant = match cols[2] {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad()),
        };
        if h.insert(fine, Subclass { coarse, dominant }).is_some() {
            anyhow::bail!("hierarchy line {}: fine class {fine} listed twice", n + 1);
        }
    }
    Ok(h)
}

pub fn ood(a: OodArgs) -> CliResult {
    let budgets = match a.mode {
        OodMode::Proportion => match (a.train_budget, a.test_budget) {
            (Some(tr), Some(te)) => Some((tr, te)),
            _ => return Err(CliError::usage("proportion mode needs --train-budget and --test-budget")),
        },
        _ => None,
    };
    check(a.mode == OodMode::Time || a.hierarchy.is_some(), || {
        "proportion and compose modes need --hierarchy".into()
    })?;
    check((0.0..=1.0).contains(&a.test_fraction), || {
        format!("--test-fraction {} outside [0, 1]", a.test_fraction)
    })?;

    let mut run = Run::start("ood");
    let mode = format!("{:?}", a.mode).to_lowercase();
    run.config(
        json!({
            "mode": mode,
            "train_budget": a.train_budget,
            "test_budget": a.test_budget,
            "test_fraction": a.test_fraction,
        }),
        Some(a.seed),
    );
    let flows = read_flow_dir(&mut run, &a.flows)?;
    let mut labels = Vec::with_capacity(flows.len());
    for (i, f) in flows.iter().enumerate() {
        labels.push(f.label.ok_or_else(|| anyhow::anyhow!("flow {i} has no label"))?);
    }
    let hierarchy = match &a.hierarchy {
        Some(p) => {
            run.input(p)?;
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(parse_hierarchy(&text).with_context(|| p.display().to_string())?)
        }
        None => None,
    };
    let split: OodSplit = match (a.mode, &hierarchy) {
        (OodMode::Time, _) => {
            let ts: Vec<f64> = flows.iter().map(SessionFlow::first_timestamp).collect();
            time_shift_split(&ts, &labels)?
        }
        (OodMode::Proportion, Some(h)) => {
            let (tr, te) = budgets.expect("checked above");
            proportion_shift_split(&labels, h, tr, te, a.seed)?
        }
        (OodMode::Compose, Some(h)) => compose_shift_split(&labels, h, a.test_fraction, a.seed)?,
        _ => unreachable!("hierarchy presence checked above"),
    };
    let pick = |idx: &[usize]| -> Vec<SessionFlow> { idx.iter().map(|&i| flows[i].clone()).collect() };
    write_flows(&a.out.join("train"), &pick(&split.train))?;
    write_flows(&a.out.join("test"), &pick(&split.test))?;
    if let (OodMode::Compose, Some(h)) = (a.mode, &hierarchy) {
        let masked: BTreeMap<ClassId, Vec<ClassId>> = masked_subclasses(&labels, h, &split);
        let mut w = create(&a.out.join("masked.tsv"))?;
        writeln!(w, "coarse\tmasked_fine")?;
        for (c, subs) in masked {
            for s in subs {
                writeln!(w, "{c}\t{s}")?;
            }
        }
        w.flush()?;
    }
    println!("{mode} shift: {} train flows, {} test flows", split.train.len(), split.test.len());
    run.output(&a.out.join("train"));
    run.output(&a.out.join("test"));
    run.finish(&a.out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hierarchy_with_header_and_comments() {
        let h = parse_hierarchy("fine\tcoarse\tdominant\n0 0 1 # web\n1\t0\t0\n\n2 1 true\n").unwrap();
        assert_eq!(h.len(), 3);
        assert!(h[&2].dominant);
        assert_eq!(h[&1].coarse, 0);
    }

    #[test]
    fn hierarchy_rejects_duplicates_and_junk() {
        assert!(parse_hierarchy("0 0 1\n0 1 0\n").is_err());
        assert!(parse_hierarchy("0 0 maybe\n").is_err());
        assert!(parse_hierarchy("0 0\n").is_err());
    }
}
