use std::io::{BufRead, Write};

use super::{Marker, SerializedFlow, TokenError, Vocabulary};
use crate::flow::ClassId;

/// Fixed-length model input: IDs padded with `[PAD]` to `max_tokens`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub valid_mask: Vec<bool>,
    pub label: Option<ClassId>,
}

impl TokenSequence {
    /// Rebuilds the mask from `[PAD]` positions.
    pub fn from_ids(ids: Vec<u32>, label: Option<ClassId>) -> Self {
        let valid_mask = ids.iter().map(|&i| i != Marker::Pad.id()).collect();
        Self { ids, valid_mask, label }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// Every position after the first `[PAD]` is `[PAD]`, and `[END]` occurs
    /// at most once, at the last valid position.
    pub fn is_well_formed(&self) -> bool {
        let pad = Marker::Pad.id();
        let end = Marker::End.id();
        let valid = self.ids.iter().take_while(|&&i| i != pad).count();
        let tail_is_pad = self.ids[valid..].iter().all(|&i| i == pad);
        let ends: Vec<usize> = self.ids.iter().enumerate().filter(|(_, &i)| i == end).map(|(p, _)| p).collect();
        let end_ok = match ends.as_slice() {
            [] => true,
            [p] => *p + 1 == valid,
            _ => false,
        };
        let mask_ok = self.valid_mask.len() == self.ids.len()
            && self.valid_mask.iter().zip(&self.ids).all(|(&m, &i)| m == (i != pad));
        tail_is_pad && end_ok && mask_ok
    }
}

/// Maps a serialization onto vocabulary IDs, truncating to `max_tokens`
/// (the last kept position becomes `[END]`) or padding with `[PAD]`.
pub fn tokenize(flow: &SerializedFlow, vocab: &Vocabulary, max_tokens: usize, label: Option<ClassId>) -> TokenSequence {
    let mut ids: Vec<u32> = flow.tokens().iter().take(max_tokens).map(|&t| vocab.id(t)).collect();
    if flow.len() > max_tokens && max_tokens > 0 {
        ids[max_tokens - 1] = Marker::End.id();
    }
    let valid = ids.len();
    ids.resize(max_tokens, Marker::Pad.id());
    let valid_mask = (0..max_tokens).map(|i| i < valid).collect();
    TokenSequence { ids, valid_mask, label }
}

/// One sequence per line: optional `label:<int><TAB>` then space-separated IDs.
pub fn write_corpus<W: Write>(mut w: W, seqs: &[TokenSequence]) -> std::io::Result<()> {
    for s in seqs {
        if let Some(l) = s.label {
            write!(w, "label:{l}\t")?;
        }
        let mut first = true;
        for id in &s.ids {
            if !first {
                w.write_all(b" ")?;
            }
            write!(w, "{id}")?;
            first = false;
        }
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<TokenSequence>, TokenError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| TokenError::Parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || TokenError::Parse(format!("corpus line {}", n + 1));
        let (label, body) = match line.strip_prefix("label:") {
            Some(rest) => {
                let (l, body) = rest.split_once('\t').ok_or_else(bad)?;
                (Some(l.parse::<ClassId>().map_err(|_| bad())?), body)
            }
            None => (None, line.as_str()),
        };
        let ids = body
            .split_ascii_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(TokenSequence::from_ids(ids, label));
    }
    if let Some(first) = out.first() {
        let t = first.len();
        if let Some(bad) = out.iter().position(|s| s.len() != t) {
            return Err(TokenError::Parse(format!("corpus sequence {} has a different length", bad + 1)));
        }
    }
    Ok(out)
}
