use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ClassId, PacketRecord};

/// Endpoint pair plus transport protocol, ordered so that
/// `(ip_a, port_a) <= (ip_b, port_b)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FiveTuple {
    pub ip_a: Vec<u8>,
    pub ip_b: Vec<u8>,
    pub port_a: u16,
    pub port_b: u16,
    pub proto: u8,
}

impl FiveTuple {
    pub fn new(ip_x: &[u8], port_x: u16, ip_y: &[u8], port_y: u16, proto: u8) -> Self {
        let (a, b) = if (ip_x, port_x) <= (ip_y, port_y) {
            ((ip_x, port_x), (ip_y, port_y))
        } else {
            ((ip_y, port_y), (ip_x, port_x))
        };
        Self {
            ip_a: a.0.to_vec(),
            ip_b: b.0.to_vec(),
            port_a: a.1,
            port_b: b.1,
            proto,
        }
    }

    pub fn of(pkt: &PacketRecord) -> Self {
        Self::new(&pkt.src_ip, pkt.src_port, &pkt.dst_ip, pkt.dst_port, pkt.ip_proto)
    }

    pub fn canonical(&self) -> Self {
        Self::new(&self.ip_a, self.port_a, &self.ip_b, self.port_b, self.proto)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }
}

/// Time-ordered packets of one five-tuple. The first packet is always
/// [`Direction::Forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct SessionFlow {
    pub key: FiveTuple,
    pub packets: Vec<(PacketRecord, Direction)>,
    pub label: Option<ClassId>,
}

impl SessionFlow {
    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn first_timestamp(&self) -> f64 {
        self.packets.first().map_or(0.0, |(p, _)| p.timestamp)
    }

    pub fn last_timestamp(&self) -> f64 {
        self.packets.last().map_or(0.0, |(p, _)| p.timestamp)
    }

    /// Builds a flow from time-ordered packets, assigning directions relative
    /// to the sender of the first packet.
    pub fn from_packets(key: FiveTuple, packets: Vec<PacketRecord>, label: Option<ClassId>) -> Self {
        let origin = packets.first().map(|p| (p.src_ip.clone(), p.src_port));
        let packets = packets
            .into_iter()
            .map(|p| {
                let dir = match &origin {
                    Some((ip, port)) if *ip == p.src_ip && *port == p.src_port => Direction::Forward,
                    _ => Direction::Backward,
                };
                (p, dir)
            })
            .collect();
        Self { key, packets, label }
    }

    pub fn is_well_formed(&self) -> bool {
        !self.packets.is_empty()
            && self.packets[0].1 == Direction::Forward
            && self.packets.windows(2).all(|w| w[0].0.timestamp <= w[1].0.timestamp)
    }
}

/// Groups packets by canonical five-tuple. Packets inside a flow are sorted
/// by timestamp with ties kept in capture order; flows are ordered by their
/// first packet.
pub fn reassemble_sessions(packets: &[PacketRecord]) -> Vec<SessionFlow> {
    let mut order: Vec<usize> = (0..packets.len()).collect();
    order.sort_by(|&a, &b| packets[a].timestamp.total_cmp(&packets[b].timestamp).then(a.cmp(&b)));

    let mut index: HashMap<FiveTuple, usize> = HashMap::new();
    let mut groups: Vec<(FiveTuple, Vec<PacketRecord>)> = Vec::new();
    for i in order {
        let key = FiveTuple::of(&packets[i]);
        let slot = *index.entry(key.clone()).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(packets[i].clone());
    }
    groups
        .into_iter()
        .map(|(key, pkts)| SessionFlow::from_packets(key, pkts, None))
        .collect()
}

/// Keeps flows with at least `min_packets` packets. `keep_all` retains every
/// flow, for classes too scarce to filter.
pub fn filter_micro_flows(flows: Vec<SessionFlow>, min_packets: usize, keep_all: bool) -> Vec<SessionFlow> {
    if keep_all {
        return flows;
    }
    flows.into_iter().filter(|f| f.len() >= min_packets.max(1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn pkt(t: f64, src: u8, sport: u16, dst: u8, dport: u16) -> PacketRecord {
        PacketRecord {
            timestamp: t,
            src_ip: vec![10, 0, 0, src],
            dst_ip: vec![10, 0, 0, dst],
            src_port: sport,
            dst_port: dport,
            ip_proto: 6,
            tcp_flags: 0x10,
            total_length: 60,
            payload: vec![],
        }
    }

    #[test]
    fn canonical_tuple_is_symmetric_and_idempotent() {
        let a = FiveTuple::new(&[10, 0, 0, 9], 80, &[10, 0, 0, 1], 5000, 6);
        let b = FiveTuple::new(&[10, 0, 0, 1], 5000, &[10, 0, 0, 9], 80, 6);
        assert_eq!(a, b);
        assert_eq!(a.canonical(), a);
        assert_eq!(a.ip_a, vec![10, 0, 0, 1]);
    }

    #[test]
    fn alternating_conversation_is_one_flow() {
        let pkts = vec![
            pkt(0.0, 1, 1000, 2, 80),
            pkt(0.1, 2, 80, 1, 1000),
            pkt(0.2, 1, 1000, 2, 80),
            pkt(0.3, 2, 80, 1, 1000),
        ];
        let flows = reassemble_sessions(&pkts);
        assert_eq!(flows.len(), 1);
        let dirs: Vec<Direction> = flows[0].packets.iter().map(|(_, d)| *d).collect();
        use Direction::*;
        assert_eq!(dirs, vec![Forward, Backward, Forward, Backward]);
    }

    #[test]
    fn distinct_tuples_are_distinct_flows() {
        let pkts = vec![pkt(0.0, 1, 1000, 2, 80), pkt(0.1, 1, 1001, 2, 80)];
        assert_eq!(reassemble_sessions(&pkts).len(), 2);
    }

    #[test]
    fn first_packet_defines_forward_even_when_late_in_capture() {
        let pkts = vec![pkt(5.0, 1, 1000, 2, 80), pkt(1.0, 2, 80, 1, 1000)];
        let flows = reassemble_sessions(&pkts);
        assert_eq!(flows[0].packets[0].0.src_ip, vec![10, 0, 0, 2]);
        assert_eq!(flows[0].packets[0].1, Direction::Forward);
        assert_eq!(flows[0].packets[1].1, Direction::Backward);
    }

    #[test]
    fn timestamp_ties_keep_capture_order() {
        let mut a = pkt(1.0, 1, 1000, 2, 80);
        a.total_length = 61;
        let mut b = pkt(1.0, 2, 80, 1, 1000);
        b.total_length = 62;
        let flows = reassemble_sessions(&[a, b]);
        let lens: Vec<u32> = flows[0].packets.iter().map(|(p, _)| p.total_length).collect();
        assert_eq!(lens, vec![61, 62]);
    }

    #[test]
    fn micro_flow_filter() {
        let sizes = [1usize, 2, 3, 5];
        let flows: Vec<SessionFlow> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let pkts = (0..n).map(|j| pkt(j as f64, 1, 1000 + i as u16, 2, 80)).collect::<Vec<_>>();
                SessionFlow::from_packets(FiveTuple::of(&pkts[0]), pkts, None)
            })
            .collect();
        let kept: Vec<usize> = filter_micro_flows(flows.clone(), 3, false).iter().map(|f| f.len()).collect();
        assert_eq!(kept, vec![3, 5]);
        assert_eq!(filter_micro_flows(flows.clone(), 1, false), flows);
        assert_eq!(filter_micro_flows(flows.clone(), 3, true), flows);
    }
}
