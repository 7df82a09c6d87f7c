//! Frame capture: JSON lines and pcap export.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::addr::SockAddr;
use super::frame::{flags, Frame, FrameKind};
use super::SimTime;

pub const CAPTURE_FORMAT: &str = "v2g-capture";
pub const CAPTURE_VERSION: u32 = 1;
/// pcap link type reserved for private use (USER0).
pub const PCAP_LINKTYPE: u32 = 147;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub sim_time: SimTime,
    pub node: String,
    pub direction: Direction,
    pub frame: Frame,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptureHeader {
    format: String,
    version: u32,
}

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("missing capture header")]
    MissingHeader,
    #[error("unsupported capture format {format} version {version}")]
    Unsupported { format: String, version: u32 },
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[CaptureRecord]) -> io::Result<()> {
    let header = CaptureHeader {
        format: CAPTURE_FORMAT.to_string(),
        version: CAPTURE_VERSION,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<CaptureRecord>, CaptureError> {
    let mut lines = r.lines().enumerate();
    let header_line = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
            None => return Err(CaptureError::MissingHeader),
        }
    };
    let header: CaptureHeader =
        serde_json::from_str(&header_line).map_err(|_| CaptureError::MissingHeader)?;
    if header.format != CAPTURE_FORMAT || header.version != CAPTURE_VERSION {
        return Err(CaptureError::Unsupported {
            format: header.format,
            version: header.version,
        });
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CaptureError::Malformed {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Classic pcap with microsecond timestamps taken from simulated time.
pub fn write_pcap<W: Write>(mut w: W, records: &[CaptureRecord]) -> io::Result<()> {
    w.write_all(&0xa1b2_c3d4u32.to_le_bytes())?;
    w.write_all(&2u16.to_le_bytes())?;
    w.write_all(&4u16.to_le_bytes())?;
    w.write_all(&0i32.to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&65_535u32.to_le_bytes())?;
    w.write_all(&PCAP_LINKTYPE.to_le_bytes())?;
    for r in records {
        let bytes = r.frame.to_bytes();
        let len = bytes.len() as u32;
        w.write_all(&((r.sim_time / 1_000_000) as u32).to_le_bytes())?;
        w.write_all(&((r.sim_time % 1_000_000) as u32).to_le_bytes())?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&bytes)?;
    }
    w.flush()
}

/// Rebuilds the byte streams seen at `node` in `direction`, keyed by
/// (source, destination). Retransmissions are collapsed; reassembly stops at
/// the first gap.
pub fn reassemble_streams(
    records: &[CaptureRecord],
    node: &str,
    direction: Direction,
) -> BTreeMap<(SockAddr, SockAddr), Vec<u8>> {
    // Per flow: first data sequence number and segments keyed by sequence.
    type Flow = (Option<u32>, BTreeMap<u32, Vec<u8>>);
    let mut flows: BTreeMap<(SockAddr, SockAddr), Flow> = BTreeMap::new();
    for r in records {
        if r.node != node || r.direction != direction || r.frame.kind != FrameKind::StreamSegment {
            continue;
        }
        let Some((h, data)) = r.frame.segment() else {
            continue;
        };
        let entry = flows
            .entry((r.frame.meta.src(), r.frame.meta.dst()))
            .or_default();
        if h.has(flags::SYN) && entry.0.is_none() {
            entry.0 = Some(h.seq.wrapping_add(1));
        }
        if !data.is_empty() {
            let slot = entry.1.entry(h.seq).or_default();
            if data.len() > slot.len() {
                *slot = data.to_vec();
            }
        }
    }
    flows
        .into_iter()
        .map(|(key, (start, segments))| {
            let mut expected = start
                .or_else(|| segments.keys().next().copied())
                .unwrap_or(0);
            let mut bytes = Vec::new();
            for (seq, data) in segments {
                let end = seq.wrapping_add(data.len() as u32);
                if seq > expected {
                    break;
                }
                if end > expected {
                    bytes.extend_from_slice(&data[(expected - seq) as usize..]);
                    expected = end;
                }
            }
            (key, bytes)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::addr::{LinkAddress, NetAddress};
    use crate::netsim::frame::{NetMeta, SegmentHeader};

    fn record(t: SimTime, seq: u32, f: u8, data: &[u8]) -> CaptureRecord {
        CaptureRecord {
            sim_time: t,
            node: "h".into(),
            direction: Direction::Out,
            frame: Frame {
                src_link: LinkAddress::derived("a"),
                dst_link: LinkAddress::derived("b"),
                kind: FrameKind::StreamSegment,
                meta: NetMeta {
                    src_net: NetAddress::derived("a"),
                    dst_net: NetAddress::derived("b"),
                    src_port: 50000,
                    dst_port: 15118,
                },
                payload: SegmentHeader {
                    flags: f,
                    seq,
                    ack: 0,
                }
                .encode(data),
            },
        }
    }

    #[test]
    fn empty_capture_is_header_only() {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "{\"format\":\"v2g-capture\",\"version\":1}\n");
        assert!(read_jsonl(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = vec![
            record(5, 1, flags::SYN, &[]),
            record(9, 2, flags::ACK, b"hello"),
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        assert_eq!(read_jsonl(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn rejects_foreign_header() {
        let text = "{\"format\":\"other\",\"version\":1}\n";
        assert!(matches!(
            read_jsonl(text.as_bytes()),
            Err(CaptureError::Unsupported { .. })
        ));
        assert!(matches!(
            read_jsonl("".as_bytes()),
            Err(CaptureError::MissingHeader)
        ));
    }

    #[test]
    fn pcap_layout() {
        let recs = vec![record(1_500_000, 2, flags::ACK, b"xy")];
        let mut buf = Vec::new();
        write_pcap(&mut buf, &recs).unwrap();
        assert_eq!(&buf[..4], &[0xd4, 0xc3, 0xb2, 0xa1]);
        assert_eq!(u32::from_le_bytes(buf[20..24].try_into().unwrap()), 147);
        assert_eq!(u32::from_le_bytes(buf[24..28].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[28..32].try_into().unwrap()), 500_000);
        let len = u32::from_le_bytes(buf[32..36].try_into().unwrap()) as usize;
        assert_eq!(len, recs[0].frame.wire_len());
        assert_eq!(buf.len(), 24 + 16 + len);
    }

    #[test]
    fn reassembly_collapses_retransmits() {
        let recs = vec![
            record(0, 10, flags::SYN, &[]),
            record(1, 11, flags::ACK, b"abc"),
            record(2, 14, flags::ACK, b"def"),
            record(3, 11, flags::ACK, b"abc"),
            record(4, 14, flags::ACK, b"def"),
            record(5, 17, flags::ACK, b"g"),
        ];
        let streams = reassemble_streams(&recs, "h", Direction::Out);
        assert_eq!(streams.values().next().unwrap(), b"abcdefg");
        assert!(reassemble_streams(&recs, "h", Direction::In).is_empty());
    }
}
