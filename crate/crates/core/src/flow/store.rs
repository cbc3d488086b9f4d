//! On-disk flow set: a JSON-lines manifest plus a binary packet sidecar.
//!
//! `flows.jsonl` holds one object per flow with the fields `flow` (index),
//! `ip_a`, `port_a`, `ip_b`, `port_b`, `proto`, `packets` (count), `label`
//! (integer or null) and `first_ts`.
//!
//! `packets.bin` starts with the 8-byte magic `TMOEPKTS` and a `u32` version,
//! followed by one record per packet in flow order (all little-endian):
//! `flow u32, direction u8 (0 forward, 1 backward), timestamp f64,
//! ip_len u8, src_ip, dst_ip, src_port u16, dst_port u16, ip_proto u8,
//! tcp_flags u8, total_length u32, payload_len u32, payload`.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ClassId, Direction, FiveTuple, PacketRecord, SessionFlow};

pub const MANIFEST_FILE: &str = "flows.jsonl";
pub const PACKETS_FILE: &str = "packets.bin";
const SIDECAR_MAGIC: &[u8; 8] = b"TMOEPKTS";
const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FlowStoreError {
    #[error("flow store i/o: {0}")]
    Io(#[from] io::Error),
    #[error("manifest line {line}: {source}")]
    Manifest { line: usize, source: serde_json::Error },
    #[error("invalid address {0:?}")]
    Address(String),
    #[error("packet sidecar: {0}")]
    Sidecar(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    flow: usize,
    ip_a: String,
    port_a: u16,
    ip_b: String,
    port_b: u16,
    proto: u8,
    packets: usize,
    label: Option<ClassId>,
    first_ts: f64,
}

fn ip_text(bytes: &[u8]) -> String {
    match bytes.len() {
        4 => Ipv4Addr::new(bytes[0], bytes[1], bytes[2], bytes[3]).to_string(),
        16 => {
            let mut a = [0u8; 16];
            a.copy_from_slice(bytes);
            Ipv6Addr::from(a).to_string()
        }
        _ => bytes.iter().map(|b| format!("{b:02x}")).collect(),
    }
}

fn ip_bytes(text: &str) -> Result<Vec<u8>, FlowStoreError> {
    match text.parse::<IpAddr>() {
        Ok(IpAddr::V4(v)) => Ok(v.octets().to_vec()),
        Ok(IpAddr::V6(v)) => Ok(v.octets().to_vec()),
        Err(_) => Err(FlowStoreError::Address(text.to_string())),
    }
}

pub fn write_flows(dir: &Path, flows: &[SessionFlow]) -> Result<(), FlowStoreError> {
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    let mut sidecar = BufWriter::new(fs::File::create(dir.join(PACKETS_FILE))?);
    sidecar.write_all(SIDECAR_MAGIC)?;
    sidecar.write_all(&SIDECAR_VERSION.to_le_bytes())?;
    for (i, f) in flows.iter().enumerate() {
        let line = ManifestLine {
            flow: i,
            ip_a: ip_text(&f.key.ip_a),
            port_a: f.key.port_a,
            ip_b: ip_text(&f.key.ip_b),
            port_b: f.key.port_b,
            proto: f.key.proto,
            packets: f.len(),
            label: f.label,
            first_ts: f.first_timestamp(),
        };
        serde_json::to_writer(&mut manifest, &line).map_err(io::Error::other)?;
        manifest.write_all(b"\n")?;
        for (p, d) in &f.packets {
            let mut rec = Vec::with_capacity(64 + p.payload.len());
            rec.extend_from_slice(&(i as u32).to_le_bytes());
            rec.push(matches!(d, Direction::Backward) as u8);
            rec.extend_from_slice(&p.timestamp.to_le_bytes());
            rec.push(p.src_ip.len() as u8);
            rec.extend_from_slice(&p.src_ip);
            rec.extend_from_slice(&p.dst_ip);
            rec.extend_from_slice(&p.src_port.to_le_bytes());
            rec.extend_from_slice(&p.dst_port.to_le_bytes());
            rec.push(p.ip_proto);
            rec.push(p.tcp_flags);
            rec.extend_from_slice(&p.total_length.to_le_bytes());
            rec.extend_from_slice(&(p.payload.len() as u32).to_le_bytes());
            rec.extend_from_slice(&p.payload);
            sidecar.write_all(&rec)?;
        }
    }
    manifest.flush()?;
    sidecar.flush()?;
    Ok(())
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], FlowStoreError> {
        if self.buf.len() - self.pos < n {
            return Err(FlowStoreError::Sidecar(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FlowStoreError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FlowStoreError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, FlowStoreError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64, FlowStoreError> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(f64::from_le_bytes(a))
    }
}

pub fn read_flows(dir: &Path) -> Result<Vec<SessionFlow>, FlowStoreError> {
    let manifest = BufReader::new(fs::File::open(dir.join(MANIFEST_FILE))?);
    let mut flows = Vec::new();
    for (n, line) in manifest.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine =
            serde_json::from_str(&line).map_err(|source| FlowStoreError::Manifest { line: n + 1, source })?;
        if m.flow != flows.len() {
            return Err(FlowStoreError::Sidecar(format!("manifest flow {} out of order", m.flow)));
        }
        let key = FiveTuple::new(&ip_bytes(&m.ip_a)?, m.port_a, &ip_bytes(&m.ip_b)?, m.port_b, m.proto);
        flows.push((
            SessionFlow {
                key,
                packets: Vec::with_capacity(m.packets),
                label: m.label,
            },
            m.packets,
        ));
    }
    let raw = fs::read(dir.join(PACKETS_FILE))?;
    let mut c = Cursor { buf: &raw, pos: 0 };
    if c.take(8)? != SIDECAR_MAGIC || c.u32()? != SIDECAR_VERSION {
        return Err(FlowStoreError::Sidecar("bad header".into()));
    }
    while c.pos < raw.len() {
        let flow = c.u32()? as usize;
        let dir_flag = c.u8()?;
        let timestamp = c.f64()?;
        let ip_len = c.u8()? as usize;
        let src_ip = c.take(ip_len)?.to_vec();
        let dst_ip = c.take(ip_len)?.to_vec();
        let src_port = c.u16()?;
        let dst_port = c.u16()?;
        let ip_proto = c.u8()?;
        let tcp_flags = c.u8()?;
        let total_length = c.u32()?;
        let payload_len = c.u32()? as usize;
        let payload = c.take(payload_len)?.to_vec();
        let (f, _) = flows
            .get_mut(flow)
            .ok_or_else(|| FlowStoreError::Sidecar(format!("packet references unknown flow {flow}")))?;
        let direction = if dir_flag == 0 { Direction::Forward } else { Direction::Backward };
        f.packets.push((
            PacketRecord {
                timestamp,
                src_ip,
                dst_ip,
                src_port,
                dst_port,
                ip_proto,
                tcp_flags,
                total_length,
                payload,
            },
            direction,
        ));
    }
    flows
        .into_iter()
        .map(|(f, expected)| {
            if f.packets.len() == expected {
                Ok(f)
            } else {
                Err(FlowStoreError::Sidecar(format!(
                    "flow has {} packets, manifest says {expected}",
                    f.packets.len()
                )))
            }
        })
        .collect()
}
