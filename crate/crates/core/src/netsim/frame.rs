use serde::{Deserialize, Serialize};

use super::addr::{LinkAddress, NetAddress, SockAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    NeighborSolicitation,
    NeighborAdvertisement,
    Datagram,
    StreamSegment,
}

impl FrameKind {
    pub const fn code(self) -> u8 {
        match self {
            FrameKind::NeighborSolicitation => 1,
            FrameKind::NeighborAdvertisement => 2,
            FrameKind::Datagram => 3,
            FrameKind::StreamSegment => 4,
        }
    }
}

/// Network and transport addressing carried by every non-link frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetMeta {
    pub src_net: NetAddress,
    pub dst_net: NetAddress,
    pub src_port: u16,
    pub dst_port: u16,
}

impl NetMeta {
    pub fn src(&self) -> SockAddr {
        SockAddr::new(self.src_net, self.src_port)
    }

    pub fn dst(&self) -> SockAddr {
        SockAddr::new(self.dst_net, self.dst_port)
    }
}

/// Link address, network meta and kind-specific payload.
///
/// Neighbor solicitations carry the 16-byte target address; advertisements
/// carry the target followed by the 6-byte link address answering for it.
/// Stream segments carry a [`SegmentHeader`] followed by data.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub src_link: LinkAddress,
    pub dst_link: LinkAddress,
    pub kind: FrameKind,
    pub meta: NetMeta,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
}

/// Fixed per-frame overhead: two link addresses, kind, and the network meta.
pub const FRAME_OVERHEAD: usize = 6 + 6 + 1 + 16 + 16 + 2 + 2;

impl Frame {
    pub fn wire_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }

    /// Flat byte layout used for pcap export: dst link, src link, kind code,
    /// src net, dst net, src port, dst port, payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.dst_link.0);
        out.extend_from_slice(&self.src_link.0);
        out.push(self.kind.code());
        out.extend_from_slice(&self.meta.src_net.octets());
        out.extend_from_slice(&self.meta.dst_net.octets());
        out.extend_from_slice(&self.meta.src_port.to_be_bytes());
        out.extend_from_slice(&self.meta.dst_port.to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn neighbor_solicitation(
        src_link: LinkAddress,
        src_net: NetAddress,
        target: NetAddress,
    ) -> Self {
        Frame {
            src_link,
            dst_link: LinkAddress::BROADCAST,
            kind: FrameKind::NeighborSolicitation,
            meta: NetMeta {
                src_net,
                dst_net: NetAddress::ALL_NODES,
                src_port: 0,
                dst_port: 0,
            },
            payload: target.octets().to_vec(),
        }
    }

    /// Advertisement sent from `src_link` claiming `target` lives at
    /// `answer`, addressed back to the soliciting host.
    pub fn neighbor_advertisement(
        src_link: LinkAddress,
        dst_link: LinkAddress,
        dst_net: NetAddress,
        target: NetAddress,
        answer: LinkAddress,
    ) -> Self {
        let mut payload = target.octets().to_vec();
        payload.extend_from_slice(&answer.0);
        Frame {
            src_link,
            dst_link,
            kind: FrameKind::NeighborAdvertisement,
            meta: NetMeta {
                src_net: target,
                dst_net,
                src_port: 0,
                dst_port: 0,
            },
            payload,
        }
    }

    /// Target of a solicitation or advertisement.
    pub fn neighbor_target(&self) -> Option<NetAddress> {
        match self.kind {
            FrameKind::NeighborSolicitation | FrameKind::NeighborAdvertisement
                if self.payload.len() >= 16 =>
            {
                let mut o = [0u8; 16];
                o.copy_from_slice(&self.payload[..16]);
                Some(NetAddress::from_octets(o))
            }
            _ => None,
        }
    }

    /// Link address announced by an advertisement.
    pub fn advertised_link(&self) -> Option<LinkAddress> {
        if self.kind == FrameKind::NeighborAdvertisement && self.payload.len() == 22 {
            let mut o = [0u8; 6];
            o.copy_from_slice(&self.payload[16..22]);
            Some(LinkAddress(o))
        } else {
            None
        }
    }

    pub fn segment(&self) -> Option<(SegmentHeader, &[u8])> {
        if self.kind == FrameKind::StreamSegment {
            SegmentHeader::decode(&self.payload)
        } else {
            None
        }
    }
}

pub mod flags {
    pub const SYN: u8 = 0x01;
    pub const ACK: u8 = 0x02;
    pub const FIN: u8 = 0x04;
    pub const RST: u8 = 0x08;
}

pub const SEGMENT_HEADER_LEN: usize = 9;

/// Stream transport header: flags byte, sequence number, cumulative ack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentHeader {
    pub flags: u8,
    pub seq: u32,
    pub ack: u32,
}

impl SegmentHeader {
    pub fn has(&self, flag: u8) -> bool {
        self.flags & flag != 0
    }

    pub fn encode(&self, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(SEGMENT_HEADER_LEN + data.len());
        out.push(self.flags);
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.ack.to_be_bytes());
        out.extend_from_slice(data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<(SegmentHeader, &[u8])> {
        if bytes.len() < SEGMENT_HEADER_LEN {
            return None;
        }
        let header = SegmentHeader {
            flags: bytes[0],
            seq: u32::from_be_bytes([bytes[1], bytes[2], bytes[3], bytes[4]]),
            ack: u32::from_be_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]),
        };
        Some((header, &bytes[SEGMENT_HEADER_LEN..]))
    }
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_header_round_trip() {
        let h = SegmentHeader {
            flags: flags::SYN | flags::ACK,
            seq: 0xDEADBEEF,
            ack: 7,
        };
        let bytes = h.encode(b"xy");
        assert_eq!(bytes.len(), SEGMENT_HEADER_LEN + 2);
        let (back, data) = SegmentHeader::decode(&bytes).unwrap();
        assert_eq!(back, h);
        assert_eq!(data, b"xy");
        assert!(SegmentHeader::decode(&bytes[..8]).is_none());
    }

    #[test]
    fn neighbor_payloads() {
        let target = NetAddress::derived("se");
        let ns = Frame::neighbor_solicitation(
            LinkAddress::derived("ev"),
            NetAddress::derived("ev"),
            target,
        );
        assert_eq!(ns.neighbor_target(), Some(target));
        assert!(ns.dst_link.is_group());
        let na = Frame::neighbor_advertisement(
            LinkAddress::derived("m"),
            ns.src_link,
            ns.meta.src_net,
            target,
            LinkAddress::derived("m"),
        );
        assert_eq!(na.neighbor_target(), Some(target));
        assert_eq!(na.advertised_link(), Some(LinkAddress::derived("m")));
    }
}
