//! Deterministic synthetic traffic with class-dependent structure, used for
//! tests, demos and the bundled fixture captures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow::pcap::{ethernet_arp_frame, ethernet_ipv4_frame, write_capture, Frame, Transport, LINKTYPE_ETHERNET};
use crate::flow::{ClassId, FiveTuple, PacketRecord, SessionFlow, IPPROTO_TCP};
use crate::token::{build_vocabulary, serialize_flow, tokenize, SerializerConfig, TokenSequence, VocabMode, Vocabulary};

const IPPROTO_UDP: u8 = 17;
const IPPROTO_ICMP: u8 = 1;

/// Header bytes counted on the wire for a TCP packet over Ethernet and IPv4.
const TCP_OVERHEAD: u32 = 54;

fn class_payload(rng: &mut impl Rng, class: ClassId, len: usize) -> Vec<u8> {
    let base = (class as u8).wrapping_mul(16);
    let alphabet = [base | 1, base | 5, base | 9, base | 13];
    let mut out = vec![0x17, 0x03, class as u8];
    out.extend((3..len).map(|_| alphabet[rng.random_range(0..4)]));
    out.truncate(len);
    out
}

/// One TCP conversation whose sizes, timing, direction pattern and payload
/// alphabet depend on `class`.
pub fn synth_flow(rng: &mut impl Rng, class: ClassId, start: f64) -> SessionFlow {
    let client = [10, class as u8, rng.random(), rng.random::<u8>().max(1)];
    let server = [172, 16, class as u8, 1];
    let client_port = rng.random_range(1024..65000);
    let server_port = 8000 + class as u16;
    let n = rng.random_range(4..=10);
    let c = class as usize;
    let mut t = start;
    let mut packets = Vec::with_capacity(n);
    for i in 0..n {
        let forward = match c % 3 {
            0 => i % 2 == 0,
            1 => i % 3 != 2,
            _ => i == 0 || i % 4 == 3,
        };
        let flags = match i {
            0 => 0x02,
            1 => 0x12,
            _ => 0x18,
        };
        let len = if i < 2 { 0 } else { 16 + 24 * (c % 4) + rng.random_range(0..8) };
        let payload = class_payload(rng, class, len);
        let (src, sport, dst, dport) = if forward {
            (client, client_port, server, server_port)
        } else {
            (server, server_port, client, client_port)
        };
        if i > 0 {
            t += 1e-3 * (c + 1) as f64 + 1e-6 * rng.random_range(0..500) as f64;
        }
        packets.push(PacketRecord {
            timestamp: (t * 1e6).round() / 1e6,
            src_ip: src.to_vec(),
            dst_ip: dst.to_vec(),
            src_port: sport,
            dst_port: dport,
            ip_proto: IPPROTO_TCP,
            tcp_flags: flags,
            total_length: TCP_OVERHEAD + payload.len() as u32,
            payload,
        });
    }
    let key = FiveTuple::of(&packets[0]);
    SessionFlow::from_packets(key, packets, Some(class))
}

/// `per_class` flows of every class, interleaved by class, starting one
/// second apart.
pub fn synth_flows(classes: usize, per_class: usize, seed: u64) -> Vec<SessionFlow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes * per_class);
    for i in 0..per_class {
        for c in 0..classes {
            let start = 1_700_000_000.0 + (i * classes + c) as f64;
            out.push(synth_flow(&mut rng, c as ClassId, start));
        }
    }
    out
}

/// Serializer settings sized for small models: 4 packets, 8 payload bytes,
/// 48 tokens.
pub fn small_serializer() -> SerializerConfig {
    SerializerConfig {
        packets_per_flow: 4,
        payload_bytes: 8,
        max_tokens: 48,
        bigram_stride: 2,
    }
}

/// Labeled synthetic flows tokenized against a frequency vocabulary built
/// from themselves.
pub fn synth_dataset(
    classes: usize,
    per_class: usize,
    seed: u64,
    ser: &SerializerConfig,
) -> (Vocabulary, Vec<TokenSequence>) {
    let flows = synth_flows(classes, per_class, seed);
    let serialized: Vec<_> = flows.iter().map(|f| serialize_flow(f, ser)).collect();
    let vocab = build_vocabulary(&serialized, VocabMode::WordPiece { min_freq: 1 }).expect("non-empty corpus");
    let seqs = serialized
        .iter()
        .zip(&flows)
        .map(|(s, f)| tokenize(s, &vocab, ser.max_tokens, f.label))
        .collect();
    (vocab, seqs)
}

/// A flow with arbitrary field values: mixed protocols and address
/// families, random payloads (possibly empty) and random directions.
pub fn random_flow(rng: &mut impl Rng) -> SessionFlow {
    let proto = [IPPROTO_TCP, IPPROTO_UDP, IPPROTO_ICMP][rng.random_range(0..3)];
    let width = if rng.random_bool(0.2) { 16 } else { 4 };
    let a: Vec<u8> = (0..width).map(|_| rng.random()).collect();
    let b: Vec<u8> = (0..width).map(|_| rng.random()).collect();
    let (pa, pb) = if proto == IPPROTO_ICMP {
        (0, 0)
    } else {
        (rng.random(), rng.random())
    };
    let n = rng.random_range(1..=15);
    let mut t = rng.random_range(0.0..1e9);
    let mut packets = Vec::with_capacity(n);
    for _ in 0..n {
        t += rng.random_range(0.0..2.0);
        let forward = rng.random_bool(0.5);
        let len = rng.random_range(0..=120);
        let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let (src, sp, dst, dp) = if forward { (&a, pa, &b, pb) } else { (&b, pb, &a, pa) };
        packets.push(PacketRecord {
            timestamp: t,
            src_ip: src.clone(),
            dst_ip: dst.clone(),
            src_port: sp,
            dst_port: dp,
            ip_proto: proto,
            tcp_flags: if proto == IPPROTO_TCP { rng.random() } else { 0 },
            total_length: len as u32 + rng.random_range(0..100_000),
            payload,
        });
    }
    let key = FiveTuple::of(&packets[0]);
    SessionFlow::from_packets(key, packets, None)
}

fn frame_of(p: &PacketRecord) -> Option<Frame> {
    let src: [u8; 4] = p.src_ip.as_slice().try_into().ok()?;
    let dst: [u8; 4] = p.dst_ip.as_slice().try_into().ok()?;
    let transport = match p.ip_proto {
        IPPROTO_TCP => Transport::Tcp {
            src_port: p.src_port,
            dst_port: p.dst_port,
            flags: p.tcp_flags,
            payload: &p.payload,
        },
        IPPROTO_UDP => Transport::Udp {
            src_port: p.src_port,
            dst_port: p.dst_port,
            payload: &p.payload,
        },
        IPPROTO_ICMP => Transport::Icmp { payload: &p.payload },
        _ => return None,
    };
    Some(Frame {
        timestamp_micros: (p.timestamp * 1e6).round() as u64,
        data: ethernet_ipv4_frame(src, dst, transport),
    })
}

/// Ethernet capture of the IPv4 TCP, UDP and ICMP packets of `flows`,
/// in timestamp order.
pub fn flows_to_capture(flows: &[SessionFlow]) -> Vec<u8> {
    let mut frames: Vec<Frame> = flows.iter().flat_map(|f| f.packets.iter().filter_map(|(p, _)| frame_of(p))).collect();
    frames.sort_by_key(|f| f.timestamp_micros);
    write_capture(LINKTYPE_ETHERNET, &frames)
}

/// Flows per class in [`fixture_capture`] that survive micro-flow filtering.
pub const FIXTURE_FLOWS: usize = 6;

/// The bundled fixture for one class: [`FIXTURE_FLOWS`] conversations, one
/// two-packet micro-flow and one ARP frame.
pub fn fixture_capture(class: ClassId) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + class as u64);
    let mut flows: Vec<SessionFlow> = (0..FIXTURE_FLOWS)
        .map(|i| synth_flow(&mut rng, class, 1_700_000_000.0 + 2.0 * i as f64))
        .collect();
    let mut micro = synth_flow(&mut rng, class, 1_700_000_100.0);
    micro.packets.truncate(2);
    flows.push(micro);
    let mut frames: Vec<Frame> = flows.iter().flat_map(|f| f.packets.iter().filter_map(|(p, _)| frame_of(p))).collect();
    frames.push(Frame {
        timestamp_micros: 1_700_000_000_500_000,
        data: ethernet_arp_frame(),
    });
    frames.sort_by_key(|f| f.timestamp_micros);
    write_capture(LINKTYPE_ETHERNET, &frames)
}
