//! Packet capture decoding and bidirectional session reconstruction.

pub mod pcap;
mod session;
mod store;

pub use pcap::{parse_capture, PcapError};
pub use session::{filter_micro_flows, reassemble_sessions, Direction, FiveTuple, SessionFlow};
pub use store::{read_flows, write_flows, FlowStoreError, MANIFEST_FILE, PACKETS_FILE};

/// Protocol number of TCP in the IP header.
pub const IPPROTO_TCP: u8 = 6;

/// Class identifier attached to labeled flows.
pub type ClassId = u32;

/// One IP datagram as seen on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    /// Seconds since the epoch, microsecond resolution or finer.
    pub timestamp: f64,
    pub src_ip: Vec<u8>,
    pub dst_ip: Vec<u8>,
    pub src_port: u16,
    pub dst_port: u16,
    pub ip_proto: u8,
    /// Zero unless `ip_proto` is TCP.
    pub tcp_flags: u8,
    /// Bytes on the wire; never smaller than the payload.
    pub total_length: u32,
    pub payload: Vec<u8>,
}

impl PacketRecord {
    pub fn is_valid(&self) -> bool {
        self.timestamp.is_finite()
            && self.timestamp >= 0.0
            && self.total_length as usize >= self.payload.len()
            && (self.tcp_flags == 0 || self.ip_proto == IPPROTO_TCP)
    }

    /// Copy with source and destination endpoints exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            src_ip: self.dst_ip.clone(),
            dst_ip: self.src_ip.clone(),
            src_port: self.dst_port,
            dst_port: self.src_port,
            ..self.clone()
        }
    }
}
