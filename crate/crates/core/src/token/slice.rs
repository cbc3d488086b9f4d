use crate::flow::SessionFlow;

/// Default window of [`temporal_slice`], seconds.
pub const DEFAULT_SLICE_WINDOW: f64 = 15.0;

/// Sub-flows shorter than this are dropped by [`temporal_slice`].
pub const MIN_FLOW_PACKETS: usize = 3;

/// Splits a flow into half-open windows `[t0 + i*w, t0 + (i+1)*w)` measured
/// from its first packet. Each non-empty window becomes a sub-flow with the
/// parent's key and label; directions are re-based so every sub-flow starts
/// forward. Sub-flows with fewer than [`MIN_FLOW_PACKETS`] packets are
/// dropped unless `keep_all` is set.
pub fn temporal_slice(flow: &SessionFlow, window_seconds: f64, keep_all: bool) -> Vec<SessionFlow> {
    assert!(window_seconds > 0.0, "slice window must be positive");
    let Some((first, _)) = flow.packets.first() else {
        return Vec::new();
    };
    let t0 = first.timestamp;
    let mut out: Vec<(u64, SessionFlow)> = Vec::new();
    for (pkt, dir) in &flow.packets {
        let bin = ((pkt.timestamp - t0) / window_seconds).floor().max(0.0) as u64;
        match out.last_mut() {
            Some((b, sub)) if *b == bin => sub.packets.push((pkt.clone(), *dir)),
            _ => out.push((
                bin,
                SessionFlow {
                    key: flow.key.clone(),
                    packets: vec![(pkt.clone(), *dir)],
                    label: flow.label,
                },
            )),
        }
    }
    out.into_iter()
        .map(|(_, mut sub)| {
            if sub.packets[0].1 != crate::flow::Direction::Forward {
                for (_, d) in &mut sub.packets {
                    *d = d.flipped();
                }
            }
            sub
        })
        .filter(|sub| keep_all || sub.len() >= MIN_FLOW_PACKETS)
        .collect()
}
