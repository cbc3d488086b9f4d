//! Flow serialization into marker-delimited bigram tokens.

mod sequence;
mod serialize;
mod slice;
mod vocab;

pub use sequence::{read_corpus, tokenize, write_corpus, TokenSequence};
pub use serialize::{
    decode_regions, region_bigrams, serialize_flow, serialize_packet, Marker, PacketByteRecord, SerializedFlow,
    SerializerConfig, Token, META_BYTES,
};
pub use slice::{temporal_slice, DEFAULT_SLICE_WINDOW, MIN_FLOW_PACKETS};
pub use vocab::{build_vocabulary, VocabMode, Vocabulary, BIGRAM_SPACE};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("cannot build a frequency vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("unparseable token input: {0}")]
    Parse(String),
    #[error("malformed serialization: {0}")]
    Structure(String),
    #[error("invalid serializer config: {0}")]
    Config(String),
}
