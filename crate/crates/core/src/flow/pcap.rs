//! Classic libpcap reader and writer.
//!
//! Supported link types: Ethernet (with 802.1Q tags), raw IP, BSD loopback
//! and Linux cooked capture. Only the fixed IPv6 header is decoded; the
//! transport protocol is taken from its Next Header field.

use thiserror::Error;

use super::PacketRecord;

pub const LINKTYPE_NULL: u32 = 0;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;
pub const LINKTYPE_LINUX_SLL: u32 = 113;

const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
const MAGIC_NANOS: u32 = 0xA1B2_3C4D;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum PcapError {
    #[error("malformed pcap global header at offset {offset}: {reason}")]
    GlobalHeader { offset: usize, reason: &'static str },
    #[error("unsupported pcap link type {0}")]
    LinkType(u32),
}

#[derive(Clone, Copy)]
struct Format {
    big_endian: bool,
    nanos: bool,
}

impl Format {
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        if self.big_endian {
            u32::from_be_bytes(a)
        } else {
            u32::from_le_bytes(a)
        }
    }

    fn u16(self, b: &[u8]) -> u16 {
        if self.big_endian {
            u16::from_be_bytes([b[0], b[1]])
        } else {
            u16::from_le_bytes([b[0], b[1]])
        }
    }
}

fn global_header(bytes: &[u8]) -> Result<(Format, u32), PcapError> {
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(PcapError::GlobalHeader {
            offset: bytes.len(),
            reason: "truncated global header",
        });
    }
    let le = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let be = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let fmt = match (le, be) {
        (MAGIC_MICROS, _) => Format { big_endian: false, nanos: false },
        (MAGIC_NANOS, _) => Format { big_endian: false, nanos: true },
        (_, MAGIC_MICROS) => Format { big_endian: true, nanos: false },
        (_, MAGIC_NANOS) => Format { big_endian: true, nanos: true },
        _ => {
            return Err(PcapError::GlobalHeader {
                offset: 0,
                reason: "unknown magic number",
            })
        }
    };
    let major = fmt.u16(&bytes[4..6]);
    if major != 2 {
        return Err(PcapError::GlobalHeader {
            offset: 4,
            reason: "unsupported major version",
        });
    }
    let link = fmt.u32(&bytes[20..24]) & 0x0FFF_FFFF;
    Ok((fmt, link))
}

/// Decodes every IPv4/IPv6 frame of a classic pcap stream in capture order.
///
/// Non-IP frames are skipped. A truncated trailing record is logged and dropped.
pub fn parse_capture(bytes: &[u8]) -> Result<Vec<PacketRecord>, PcapError> {
    let (fmt, link) = global_header(bytes)?;
    if !matches!(link, LINKTYPE_NULL | LINKTYPE_ETHERNET | LINKTYPE_RAW | LINKTYPE_LINUX_SLL) {
        return Err(PcapError::LinkType(link));
    }
    let mut out = Vec::new();
    let mut off = GLOBAL_HEADER_LEN;
    while off < bytes.len() {
        if bytes.len() - off < RECORD_HEADER_LEN {
            log::warn!("truncated record header at offset {off}; dropped");
            break;
        }
        let h = &bytes[off..off + RECORD_HEADER_LEN];
        let secs = fmt.u32(&h[0..4]) as f64;
        let frac = fmt.u32(&h[4..8]) as f64;
        let incl = fmt.u32(&h[8..12]) as usize;
        let orig = fmt.u32(&h[12..16]);
        let body_start = off + RECORD_HEADER_LEN;
        if bytes.len() - body_start < incl {
            log::warn!("truncated record body at offset {off}; dropped");
            break;
        }
        let frame = &bytes[body_start..body_start + incl];
        off = body_start + incl;
        let timestamp = secs + frac / if fmt.nanos { 1e9 } else { 1e6 };
        let Some(ip) = network_layer(link, frame, fmt) else {
            continue;
        };
        if let Some(rec) = decode_ip(ip, timestamp, orig) {
            out.push(rec);
        }
    }
    Ok(out)
}

fn network_layer(link: u32, frame: &[u8], fmt: Format) -> Option<&[u8]> {
    match link {
        LINKTYPE_ETHERNET => {
            let mut pos = 12;
            let mut ether_type = u16::from_be_bytes([*frame.get(pos)?, *frame.get(pos + 1)?]);
            while ether_type == 0x8100 || ether_type == 0x88A8 {
                pos += 4;
                ether_type = u16::from_be_bytes([*frame.get(pos)?, *frame.get(pos + 1)?]);
            }
            matches!(ether_type, 0x0800 | 0x86DD).then(|| &frame[pos + 2..])
        }
        LINKTYPE_RAW => Some(frame),
        LINKTYPE_NULL => {
            // Address family is in host byte order of the capturing machine.
            let family = fmt.u32(frame.get(0..4)?);
            matches!(family, 2 | 24 | 28 | 30).then(|| &frame[4..])
        }
        LINKTYPE_LINUX_SLL => {
            let proto = u16::from_be_bytes([*frame.get(14)?, *frame.get(15)?]);
            matches!(proto, 0x0800 | 0x86DD).then(|| &frame[16..])
        }
        _ => None,
    }
}

fn decode_ip(ip: &[u8], timestamp: f64, wire_len: u32) -> Option<PacketRecord> {
    let version = ip.first()? >> 4;
    let (src, dst, proto, transport) = match version {
        4 => {
            let ihl = ((ip[0] & 0x0F) as usize) * 4;
            if ihl < 20 || ip.len() < ihl {
                return None;
            }
            let total = u16::from_be_bytes([ip[2], ip[3]]) as usize;
            let end = total.clamp(ihl, ip.len());
            (ip[12..16].to_vec(), ip[16..20].to_vec(), ip[9], &ip[ihl..end])
        }
        6 => {
            if ip.len() < 40 {
                return None;
            }
            let payload_len = u16::from_be_bytes([ip[4], ip[5]]) as usize;
            let end = (40 + payload_len).min(ip.len());
            (ip[8..24].to_vec(), ip[24..40].to_vec(), ip[6], &ip[40..end])
        }
        _ => return None,
    };
    let (src_port, dst_port, tcp_flags, payload) = match proto {
        6 if transport.len() >= 20 => {
            let data_off = ((transport[12] >> 4) as usize * 4).clamp(20, transport.len());
            (
                u16::from_be_bytes([transport[0], transport[1]]),
                u16::from_be_bytes([transport[2], transport[3]]),
                transport[13],
                &transport[data_off..],
            )
        }
        17 if transport.len() >= 8 => (
            u16::from_be_bytes([transport[0], transport[1]]),
            u16::from_be_bytes([transport[2], transport[3]]),
            0,
            &transport[8..],
        ),
        _ => (0, 0, 0, transport),
    };
    Some(PacketRecord {
        timestamp,
        src_ip: src,
        dst_ip: dst,
        src_port,
        dst_port,
        ip_proto: proto,
        tcp_flags,
        total_length: wire_len.max(payload.len() as u32),
        payload: payload.to_vec(),
    })
}

/// Frame to be written by [`write_capture`].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp_micros: u64,
    pub data: Vec<u8>,
}

/// Little-endian microsecond pcap stream.
pub fn write_capture(link_type: u32, frames: &[Frame]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&65535u32.to_le_bytes());
    out.extend_from_slice(&link_type.to_le_bytes());
    for f in frames {
        out.extend_from_slice(&((f.timestamp_micros / 1_000_000) as u32).to_le_bytes());
        out.extend_from_slice(&((f.timestamp_micros % 1_000_000) as u32).to_le_bytes());
        out.extend_from_slice(&(f.data.len() as u32).to_le_bytes());
        out.extend_from_slice(&(f.data.len() as u32).to_le_bytes());
        out.extend_from_slice(&f.data);
    }
    out
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)]) as u32)
        .sum();
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

/// Transport segment for [`ethernet_ipv4_frame`].
#[derive(Debug, Clone, Copy)]
pub enum Transport<'p> {
    Tcp { src_port: u16, dst_port: u16, flags: u8, payload: &'p [u8] },
    Udp { src_port: u16, dst_port: u16, payload: &'p [u8] },
    Icmp { payload: &'p [u8] },
}

/// Ethernet II + IPv4 frame, padded to the 60-byte Ethernet minimum.
pub fn ethernet_ipv4_frame(src: [u8; 4], dst: [u8; 4], transport: Transport<'_>) -> Vec<u8> {
    let (proto, segment) = match transport {
        Transport::Tcp { src_port, dst_port, flags, payload } => {
            let mut s = Vec::with_capacity(20 + payload.len());
            s.extend_from_slice(&src_port.to_be_bytes());
            s.extend_from_slice(&dst_port.to_be_bytes());
            s.extend_from_slice(&[0, 0, 0, 1, 0, 0, 0, 0, 0x50, flags, 0xFF, 0xFF, 0, 0, 0, 0]);
            s.extend_from_slice(payload);
            (6u8, s)
        }
        Transport::Udp { src_port, dst_port, payload } => {
            let mut s = Vec::with_capacity(8 + payload.len());
            s.extend_from_slice(&src_port.to_be_bytes());
            s.extend_from_slice(&dst_port.to_be_bytes());
            s.extend_from_slice(&((8 + payload.len()) as u16).to_be_bytes());
            s.extend_from_slice(&[0, 0]);
            s.extend_from_slice(payload);
            (17u8, s)
        }
        Transport::Icmp { payload } => {
            let mut s = vec![8, 0, 0, 0, 0, 1, 0, 1];
            s.extend_from_slice(payload);
            (1u8, s)
        }
    };
    let total = (20 + segment.len()) as u16;
    let mut ip = vec![0x45, 0];
    ip.extend_from_slice(&total.to_be_bytes());
    ip.extend_from_slice(&[0, 1, 0x40, 0, 64, proto, 0, 0]);
    ip.extend_from_slice(&src);
    ip.extend_from_slice(&dst);
    let ck = ipv4_checksum(&ip);
    ip[10..12].copy_from_slice(&ck.to_be_bytes());

    let mut frame = vec![0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01, 0x08, 0x00];
    frame.extend_from_slice(&ip);
    frame.extend_from_slice(&segment);
    if frame.len() < 60 {
        frame.resize(60, 0);
    }
    frame
}

/// Minimal ARP request frame (non-IP, skipped by the parser).
pub fn ethernet_arp_frame() -> Vec<u8> {
    let mut frame = vec![0xFF; 6];
    frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01, 0x08, 0x06]);
    frame.extend_from_slice(&[0, 1, 8, 0, 6, 4, 0, 1]);
    frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01, 10, 0, 0, 1]);
    frame.extend_from_slice(&[0, 0, 0, 0, 0, 0, 10, 0, 0, 2]);
    frame.resize(60, 0);
    frame
}

#[cfg(test)]
mod tests {
    use super::*;

    fn syn() -> Vec<u8> {
        ethernet_ipv4_frame(
            [10, 0, 0, 1],
            [10, 0, 0, 2],
            Transport::Tcp { src_port: 40000, dst_port: 443, flags: 0x02, payload: &[] },
        )
    }

    #[test]
    fn single_syn_frame() {
        let frame = syn();
        assert_eq!(frame.len(), 60);
        let cap = write_capture(LINKTYPE_ETHERNET, &[Frame { timestamp_micros: 1_500_000, data: frame }]);
        let recs = parse_capture(&cap).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.tcp_flags, 0x02);
        assert!(r.payload.is_empty());
        assert_eq!(r.total_length, 60);
        assert_eq!(r.ip_proto, 6);
        assert_eq!((r.src_port, r.dst_port), (40000, 443));
        assert_eq!(r.timestamp, 1.5);
    }

    #[test]
    fn header_only_capture_is_empty() {
        let cap = write_capture(LINKTYPE_ETHERNET, &[]);
        assert!(parse_capture(&cap).unwrap().is_empty());
    }

    #[test]
    fn arp_frames_are_skipped() {
        let tcp = |f| Frame { timestamp_micros: f, data: syn() };
        let frames = vec![
            tcp(1),
            Frame { timestamp_micros: 2, data: ethernet_arp_frame() },
            tcp(3),
            tcp(4),
        ];
        let recs = parse_capture(&write_capture(LINKTYPE_ETHERNET, &frames)).unwrap();
        assert_eq!(recs.len(), 3);
    }

    #[test]
    fn ethernet_padding_is_not_payload() {
        let frame = ethernet_ipv4_frame(
            [1, 1, 1, 1],
            [2, 2, 2, 2],
            Transport::Udp { src_port: 53, dst_port: 5353, payload: b"ab" },
        );
        let cap = write_capture(LINKTYPE_ETHERNET, &[Frame { timestamp_micros: 0, data: frame }]);
        let recs = parse_capture(&cap).unwrap();
        assert_eq!(recs[0].payload, b"ab");
        assert_eq!(recs[0].tcp_flags, 0);
    }

    #[test]
    fn truncated_trailing_record_is_dropped() {
        let mut cap = write_capture(
            LINKTYPE_ETHERNET,
            &[Frame { timestamp_micros: 0, data: syn() }, Frame { timestamp_micros: 1, data: syn() }],
        );
        cap.truncate(cap.len() - 10);
        assert_eq!(parse_capture(&cap).unwrap().len(), 1);
    }

    #[test]
    fn bad_magic_reports_offset() {
        let mut cap = write_capture(LINKTYPE_ETHERNET, &[]);
        cap[0] = 0;
        assert_eq!(
            parse_capture(&cap).unwrap_err(),
            PcapError::GlobalHeader { offset: 0, reason: "unknown magic number" }
        );
        assert!(matches!(parse_capture(&cap[..10]), Err(PcapError::GlobalHeader { offset: 10, .. })));
    }

    #[test]
    fn unsupported_link_type_is_named() {
        let cap = write_capture(147, &[]);
        let err = parse_capture(&cap).unwrap_err();
        assert_eq!(err, PcapError::LinkType(147));
        assert!(err.to_string().contains("147"));
    }

    #[test]
    fn big_endian_nanosecond_capture() {
        let frame = syn();
        let mut cap = Vec::new();
        cap.extend_from_slice(&MAGIC_NANOS.to_be_bytes());
        cap.extend_from_slice(&2u16.to_be_bytes());
        cap.extend_from_slice(&4u16.to_be_bytes());
        cap.extend_from_slice(&[0; 8]);
        cap.extend_from_slice(&65535u32.to_be_bytes());
        cap.extend_from_slice(&LINKTYPE_ETHERNET.to_be_bytes());
        cap.extend_from_slice(&7u32.to_be_bytes());
        cap.extend_from_slice(&250_000_000u32.to_be_bytes());
        cap.extend_from_slice(&(frame.len() as u32).to_be_bytes());
        cap.extend_from_slice(&(frame.len() as u32).to_be_bytes());
        cap.extend_from_slice(&frame);
        let recs = parse_capture(&cap).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].timestamp, 7.25);
    }

    #[test]
    fn raw_ipv6_udp() {
        let mut ip = vec![0x60, 0, 0, 0, 0, 12, 17, 64];
        ip.extend_from_slice(&[0xfe; 16]);
        ip.extend_from_slice(&[0xfd; 16]);
        ip.extend_from_slice(&[0x1f, 0x90, 0x00, 0x35, 0, 12, 0, 0, 9, 9, 9, 9]);
        let cap = write_capture(LINKTYPE_RAW, &[Frame { timestamp_micros: 0, data: ip }]);
        let recs = parse_capture(&cap).unwrap();
        assert_eq!(recs[0].src_ip.len(), 16);
        assert_eq!((recs[0].src_port, recs[0].dst_port), (8080, 53));
        assert_eq!(recs[0].payload, vec![9, 9, 9, 9]);
    }
}
