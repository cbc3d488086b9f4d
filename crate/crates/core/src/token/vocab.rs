use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Marker, SerializedFlow, Token, TokenError};

/// Number of distinct byte pairs.
pub const BIGRAM_SPACE: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum VocabMode {
    /// Every byte pair gets an ID.
    FullBigram,
    /// Bigrams seen at least `min_freq` times in the corpus get an ID.
    WordPiece { min_freq: u64 },
}

/// Bigram and marker to ID mapping. Markers take IDs 0..5 in the order
/// `[PD] [PY] [PAD] [END] [UNK]`; bigrams follow in ascending byte order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    bigram_ids: Vec<Option<u32>>,
    tokens: Vec<Token>,
}

impl Vocabulary {
    fn from_bigrams(bigrams: impl IntoIterator<Item = u16>) -> Self {
        let mut tokens: Vec<Token> = Marker::ALL.iter().map(|m| Token::Marker(*m)).collect();
        let mut bigram_ids = vec![None; BIGRAM_SPACE];
        for b in bigrams {
            if bigram_ids[b as usize].is_none() {
                bigram_ids[b as usize] = Some(tokens.len() as u32);
                tokens.push(Token::Bigram(b));
            }
        }
        Self { bigram_ids, tokens }
    }

    pub fn full() -> Self {
        Self::from_bigrams(0..=u16::MAX)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn marker_id(&self, m: Marker) -> u32 {
        m.id()
    }

    /// ID of a token; bigrams outside the vocabulary map to `[UNK]`.
    pub fn id(&self, t: Token) -> u32 {
        match t {
            Token::Marker(m) => m.id(),
            Token::Bigram(b) => self.bigram_ids[b as usize].unwrap_or(Marker::Unk.id()),
        }
    }

    pub fn contains(&self, t: Token) -> bool {
        match t {
            Token::Marker(_) => true,
            Token::Bigram(b) => self.bigram_ids[b as usize].is_some(),
        }
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        self.tokens.get(id as usize).copied()
    }

    pub fn token_to_id(&self) -> HashMap<String, u32> {
        self.tokens.iter().enumerate().map(|(i, t)| (t.to_string(), i as u32)).collect()
    }

    /// `token<TAB>id` per line, sorted by ID.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        w.flush()
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, TokenError> {
        let mut bigrams = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| TokenError::Parse(e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| TokenError::Parse(format!("vocabulary line {}: missing tab", n + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| TokenError::Parse(format!("vocabulary line {}: bad id", n + 1)))?;
            if id != n {
                return Err(TokenError::Parse(format!("vocabulary line {}: ids must be dense and sorted", n + 1)));
            }
            match tok.parse::<Token>()? {
                Token::Marker(m) if m.id() as usize == id => {}
                Token::Marker(_) => return Err(TokenError::Parse(format!("marker {tok} at wrong id {id}"))),
                Token::Bigram(_) if id < Marker::ALL.len() => {
                    return Err(TokenError::Parse(format!("bigram {tok} in marker range")))
                }
                Token::Bigram(b) => bigrams.push(b),
            }
        }
        let v = Self::from_bigrams(bigrams);
        Ok(v)
    }
}

/// Builds a vocabulary over serialized flows.
pub fn build_vocabulary<'c, I>(corpus: I, mode: VocabMode) -> Result<Vocabulary, TokenError>
where
    I: IntoIterator<Item = &'c SerializedFlow>,
{
    match mode {
        VocabMode::FullBigram => Ok(Vocabulary::full()),
        VocabMode::WordPiece { min_freq } => {
            let mut counts = vec![0u64; BIGRAM_SPACE];
            let mut flows = 0usize;
            for flow in corpus {
                flows += 1;
                for t in flow.tokens() {
                    if let Token::Bigram(b) = t {
                        counts[*b as usize] += 1;
                    }
                }
            }
            if flows == 0 {
                return Err(TokenError::EmptyCorpus);
            }
            let keep = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c >= min_freq.max(1))
                .map(|(b, _)| b as u16);
            Ok(Vocabulary::from_bigrams(keep))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_bigram_size() {
        let v = build_vocabulary(std::iter::empty(), VocabMode::FullBigram).unwrap();
        assert_eq!(v.len(), 65_541);
        assert_eq!(v.id(Token::Bigram(0)), 5);
        assert_eq!(v.id(Token::Bigram(0xFFFF)), 65_540);
    }

    #[test]
    fn single_bigram_corpus() {
        let flow: SerializedFlow = "[PD] 0000 [PY] [END]".parse().unwrap();
        let v = build_vocabulary([&flow], VocabMode::WordPiece { min_freq: 1 }).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id(Token::Bigram(0x0101)), Marker::Unk.id());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = build_vocabulary(std::iter::empty(), VocabMode::WordPiece { min_freq: 1 }).unwrap_err();
        assert_eq!(err, TokenError::EmptyCorpus);
    }

    #[test]
    fn file_round_trip() {
        let flow: SerializedFlow = "[PD] 00ff 0a0b [PY] 00ff [END]".parse().unwrap();
        let v = build_vocabulary([&flow], VocabMode::WordPiece { min_freq: 1 }).unwrap();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("[PD]\t0\n[PY]\t1\n[PAD]\t2\n[END]\t3\n[UNK]\t4\n00ff\t5\n0a0b\t6\n"));
        assert_eq!(Vocabulary::read(buf.as_slice()).unwrap(), v);
    }
}
