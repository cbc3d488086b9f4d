use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TokenError;
use crate::flow::{Direction, PacketRecord, SessionFlow};

/// Length of the per-packet metadata block.
pub const META_BYTES: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SerializerConfig {
    /// Packets kept from the start of each flow (K).
    pub packets_per_flow: usize,
    /// Payload bytes sampled per packet (J).
    pub payload_bytes: usize,
    /// Sequence length T after padding or truncation.
    pub max_tokens: usize,
    /// Step between consecutive bigrams: 2 for disjoint pairs, 1 for overlapping.
    pub bigram_stride: usize,
}

impl Default for SerializerConfig {
    fn default() -> Self {
        Self {
            packets_per_flow: 10,
            payload_bytes: 40,
            max_tokens: 512,
            bigram_stride: 2,
        }
    }
}

impl SerializerConfig {
    pub fn validate(&self) -> Result<(), TokenError> {
        if self.packets_per_flow == 0 {
            return Err(TokenError::Config("packets_per_flow must be at least 1".into()));
        }
        if !matches!(self.bigram_stride, 1 | 2) {
            return Err(TokenError::Config(format!("bigram_stride must be 1 or 2, got {}", self.bigram_stride)));
        }
        let one_packet = 1 + META_BYTES.div_ceil(self.bigram_stride) + 1 + self.payload_bytes.div_ceil(self.bigram_stride) + 1;
        if self.max_tokens < one_packet {
            return Err(TokenError::Config(format!(
                "max_tokens {} cannot hold one packet ({one_packet} tokens)",
                self.max_tokens
            )));
        }
        Ok(())
    }

    /// Upper bound on valid tokens of any serialized flow.
    pub fn max_flow_tokens(&self) -> usize {
        let s = self.bigram_stride;
        self.packets_per_flow * (1 + META_BYTES.div_ceil(s) + 1 + self.payload_bytes.div_ceil(s)) + 1
    }
}

/// Fixed metadata block plus the sampled payload prefix of one packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketByteRecord {
    pub meta: [u8; META_BYTES],
    pub payload_sample: Vec<u8>,
}

/// Encodes one packet. Metadata layout (big-endian):
/// total length (2), direction (1), TCP flags (1), inter-arrival time in
/// microseconds (4), IP protocol (1), payload length (2). Every field
/// saturates at its maximum.
pub fn serialize_packet(
    pkt: &PacketRecord,
    direction: Direction,
    prev_timestamp: Option<f64>,
    payload_bytes: usize,
) -> PacketByteRecord {
    let mut meta = [0u8; META_BYTES];
    let total = pkt.total_length.min(u16::MAX as u32) as u16;
    meta[0..2].copy_from_slice(&total.to_be_bytes());
    meta[2] = match direction {
        Direction::Forward => 0,
        Direction::Backward => 1,
    };
    meta[3] = pkt.tcp_flags;
    let iat = prev_timestamp.map_or(0.0, |prev| (pkt.timestamp - prev).max(0.0));
    let micros = (iat * 1e6).round().min(u32::MAX as f64) as u32;
    meta[4..8].copy_from_slice(&micros.to_be_bytes());
    meta[8] = pkt.ip_proto;
    let plen = pkt.payload.len().min(u16::MAX as usize) as u16;
    meta[9..11].copy_from_slice(&plen.to_be_bytes());
    let take = pkt.payload.len().min(payload_bytes);
    PacketByteRecord {
        meta,
        payload_sample: pkt.payload[..take].to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Marker {
    /// Start of a packet.
    Pd,
    /// Boundary between metadata and payload.
    Py,
    Pad,
    /// End of the flow.
    End,
    Unk,
}

impl Marker {
    pub const ALL: [Marker; 5] = [Marker::Pd, Marker::Py, Marker::Pad, Marker::End, Marker::Unk];

    pub fn as_str(self) -> &'static str {
        match self {
            Marker::Pd => "[PD]",
            Marker::Py => "[PY]",
            Marker::Pad => "[PAD]",
            Marker::End => "[END]",
            Marker::Unk => "[UNK]",
        }
    }

    /// Vocabulary ID; markers occupy the first five IDs of every vocabulary.
    pub fn id(self) -> u32 {
        self as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Marker(Marker),
    /// Two bytes, first byte in the high half.
    Bigram(u16),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Marker(m) => f.write_str(m.as_str()),
            Token::Bigram(b) => write!(f, "{b:04x}"),
        }
    }
}

impl FromStr for Token {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(m) = Marker::ALL.iter().find(|m| m.as_str() == s) {
            return Ok(Token::Marker(*m));
        }
        if s.len() == 4 && s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return u16::from_str_radix(s, 16)
                .map(Token::Bigram)
                .map_err(|_| TokenError::Parse(s.to_string()));
        }
        Err(TokenError::Parse(s.to_string()))
    }
}

/// Marker-delimited bigram serialization of a flow. Its text form is the
/// hex string with markers, one token per whitespace-separated word.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SerializedFlow(pub Vec<Token>);

impl SerializedFlow {
    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for SerializedFlow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for SerializedFlow {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split_whitespace().map(Token::from_str).collect::<Result<Vec<_>, _>>().map(SerializedFlow)
    }
}

/// Bigrams of one byte region: `ceil(len / stride)` pairs starting every
/// `stride` bytes, with a missing second byte taken as zero.
pub fn region_bigrams(region: &[u8], stride: usize) -> impl Iterator<Item = u16> + '_ {
    (0..region.len()).step_by(stride.max(1)).map(move |i| {
        let hi = region[i] as u16;
        let lo = region.get(i + 1).copied().unwrap_or(0) as u16;
        (hi << 8) | lo
    })
}

/// `[PD] meta [PY] payload` for each of the first K packets, then `[END]`.
pub fn serialize_flow(flow: &SessionFlow, cfg: &SerializerConfig) -> SerializedFlow {
    let mut out = Vec::with_capacity(cfg.max_flow_tokens());
    let mut prev = None;
    for (pkt, dir) in flow.packets.iter().take(cfg.packets_per_flow) {
        let rec = serialize_packet(pkt, *dir, prev, cfg.payload_bytes);
        prev = Some(pkt.timestamp);
        out.push(Token::Marker(Marker::Pd));
        out.extend(region_bigrams(&rec.meta, cfg.bigram_stride).map(Token::Bigram));
        out.push(Token::Marker(Marker::Py));
        out.extend(region_bigrams(&rec.payload_sample, cfg.bigram_stride).map(Token::Bigram));
    }
    out.push(Token::Marker(Marker::End));
    SerializedFlow(out)
}

/// Recovers per-packet byte records from a stride-2 serialization. The
/// payload sample length is read back from the metadata length field.
pub fn decode_regions(flow: &SerializedFlow, payload_bytes: usize) -> Result<Vec<PacketByteRecord>, TokenError> {
    let mut out = Vec::new();
    let toks = flow.tokens();
    let mut i = 0;
    let bad = |why: &str| TokenError::Structure(why.to_string());
    while i < toks.len() {
        match toks[i] {
            Token::Marker(Marker::End) => break,
            Token::Marker(Marker::Pd) => {}
            _ => return Err(bad("expected [PD]")),
        }
        i += 1;
        let mut meta_raw = Vec::new();
        while let Some(Token::Bigram(b)) = toks.get(i) {
            meta_raw.extend_from_slice(&b.to_be_bytes());
            i += 1;
        }
        if toks.get(i) != Some(&Token::Marker(Marker::Py)) || meta_raw.len() < META_BYTES {
            return Err(bad("malformed metadata region"));
        }
        i += 1;
        let mut meta = [0u8; META_BYTES];
        meta.copy_from_slice(&meta_raw[..META_BYTES]);
        let mut payload = Vec::new();
        while let Some(Token::Bigram(b)) = toks.get(i) {
            payload.extend_from_slice(&b.to_be_bytes());
            i += 1;
        }
        let plen = u16::from_be_bytes([meta[9], meta[10]]) as usize;
        payload.truncate(plen.min(payload_bytes));
        out.push(PacketByteRecord {
            meta,
            payload_sample: payload,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FiveTuple;

    fn syn() -> PacketRecord {
        PacketRecord {
            timestamp: 10.0,
            src_ip: vec![10, 0, 0, 1],
            dst_ip: vec![10, 0, 0, 2],
            src_port: 4000,
            dst_port: 443,
            ip_proto: 6,
            tcp_flags: 0x02,
            total_length: 60,
            payload: vec![],
        }
    }

    fn hex(b: &[u8]) -> String {
        b.iter().map(|x| format!("{x:02X}")).collect()
    }

    #[test]
    fn syn_meta_layout() {
        let rec = serialize_packet(&syn(), Direction::Forward, None, 40);
        assert_eq!(hex(&rec.meta), "003C000200000000060000");
        assert!(rec.payload_sample.is_empty());
    }

    #[test]
    fn inter_arrival_in_microseconds() {
        let mut p = syn();
        p.timestamp = 10.001;
        let rec = serialize_packet(&p, Direction::Backward, Some(10.0), 40);
        assert_eq!(&rec.meta[4..8], &[0x00, 0x00, 0x03, 0xE8]);
        assert_eq!(rec.meta[2], 1);
    }

    #[test]
    fn fields_saturate() {
        let mut p = syn();
        p.total_length = 100_000;
        p.timestamp = 1e6;
        p.payload = vec![7; 70_000];
        let rec = serialize_packet(&p, Direction::Forward, Some(0.0), 40);
        assert_eq!(&rec.meta[0..2], &[0xFF, 0xFF]);
        assert_eq!(&rec.meta[4..8], &[0xFF; 4]);
        assert_eq!(&rec.meta[9..11], &[0xFF, 0xFF]);
    }

    #[test]
    fn payload_sample_is_prefix() {
        let mut p = syn();
        p.payload = (0..100u8).collect();
        p.total_length = 154;
        let rec = serialize_packet(&p, Direction::Forward, None, 40);
        assert_eq!(rec.payload_sample, (0..40u8).collect::<Vec<_>>());
    }

    #[test]
    fn single_empty_packet_layout() {
        let flow = SessionFlow::from_packets(FiveTuple::of(&syn()), vec![syn()], None);
        let s = serialize_flow(&flow, &SerializerConfig::default());
        assert_eq!(s.len(), 1 + 6 + 1 + 1);
        assert_eq!(s.to_string(), "[PD] 003c 0002 0000 0000 0600 0000 [PY] [END]");
        assert_eq!(s.to_string().parse::<SerializedFlow>().unwrap(), s);
    }

    #[test]
    fn stride_one_overlaps() {
        let got: Vec<u16> = region_bigrams(&[1, 2, 3], 1).collect();
        assert_eq!(got, vec![0x0102, 0x0203, 0x0300]);
        let got: Vec<u16> = region_bigrams(&[1, 2, 3], 2).collect();
        assert_eq!(got, vec![0x0102, 0x0300]);
    }

    #[test]
    fn only_first_k_packets() {
        let pkts: Vec<PacketRecord> = (0..12)
            .map(|i| PacketRecord {
                timestamp: i as f64,
                ..syn()
            })
            .collect();
        let flow = SessionFlow::from_packets(FiveTuple::of(&pkts[0]), pkts, None);
        let s = serialize_flow(&flow, &SerializerConfig::default());
        let pd = s.tokens().iter().filter(|t| **t == Token::Marker(Marker::Pd)).count();
        assert_eq!(pd, 10);
    }

    #[test]
    fn rejects_bad_tokens() {
        assert!("[PD] 12345".parse::<SerializedFlow>().is_err());
        assert!("zz00".parse::<Token>().is_err());
    }
}
