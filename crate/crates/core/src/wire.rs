//! V2GTP session-layer framing and SECC Discovery Protocol payloads.
//!
//! Every V2GTP frame is an 8-byte header followed by the payload:
//!
//! ```text
//! +---------+-----------------+--------------+----------------+
//! | version | inverse version | payload type | payload length |
//! |  0x01   |      0xFE       |   u16 (BE)   |    u32 (BE)    |
//! +---------+-----------------+--------------+----------------+
//! ```
//!
//! SDP payloads ride inside V2GTP frames but are never EXI-compressed.

use thiserror::Error;

use crate::netsim::NetAddress;

pub const V2GTP_VERSION: u8 = 0x01;
pub const V2GTP_INVERSE_VERSION: u8 = !V2GTP_VERSION;
pub const V2GTP_HEADER_LEN: usize = 8;

/// UDP port the SECC listens on for discovery requests.
pub const SDP_SERVER_PORT: u16 = 15118;

pub const SDP_REQUEST_LEN: usize = 2;
pub const SDP_RESPONSE_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("header declares {declared} payload bytes but {actual} were supplied")]
    LengthMismatch { declared: u32, actual: usize },
    #[error("unsupported protocol version {0:#04x}")]
    BadVersion(u8),
    #[error("inverse version {0:#04x} is not the complement of the version byte")]
    BadInverseVersion(u8),
    #[error("unknown payload type {0:#06x}")]
    UnknownPayloadType(u16),
    #[error("frame truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("SDP payload has length {actual}, expected {expected}")]
    BadLength { expected: usize, actual: usize },
    #[error("unknown SDP security byte {0:#04x}")]
    UnknownSecurityByte(u8),
    #[error("unknown SDP transport byte {0:#04x}")]
    UnknownTransportByte(u8),
    #[error("SDP response advertises port 0")]
    ZeroPort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PayloadType {
    ExiV2gMessage,
    SdpRequest,
    SdpResponse,
}

impl PayloadType {
    pub const fn code(self) -> u16 {
        match self {
            PayloadType::ExiV2gMessage => 0x8001,
            PayloadType::SdpRequest => 0x9000,
            PayloadType::SdpResponse => 0x9001,
        }
    }

    pub fn from_code(code: u16) -> Result<Self, WireError> {
        match code {
            0x8001 => Ok(PayloadType::ExiV2gMessage),
            0x9000 => Ok(PayloadType::SdpRequest),
            0x9001 => Ok(PayloadType::SdpResponse),
            other => Err(WireError::UnknownPayloadType(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct V2gtpHeader {
    pub version: u8,
    pub inverse_version: u8,
    pub payload_type: PayloadType,
    pub payload_length: u32,
}

impl V2gtpHeader {
    /// Header for `payload_type` carrying `payload_length` bytes, with the
    /// fixed version pair.
    pub fn new(payload_type: PayloadType, payload_length: u32) -> Self {
        Self {
            version: V2GTP_VERSION,
            inverse_version: V2GTP_INVERSE_VERSION,
            payload_type,
            payload_length,
        }
    }
}

/// A decoded frame together with how many input bytes it occupied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedFrame {
    pub header: V2gtpHeader,
    pub payload: Vec<u8>,
    pub consumed: usize,
}

pub fn encode_v2gtp(header: &V2gtpHeader, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if header.payload_length as usize != payload.len() {
        return Err(WireError::LengthMismatch {
            declared: header.payload_length,
            actual: payload.len(),
        });
    }
    let mut out = Vec::with_capacity(V2GTP_HEADER_LEN + payload.len());
    out.push(header.version);
    out.push(header.inverse_version);
    out.extend_from_slice(&header.payload_type.code().to_be_bytes());
    out.extend_from_slice(&header.payload_length.to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Wraps `payload` in a header with the matching length. Payloads longer than
/// `u32::MAX` cannot occur inside a simulation frame.
pub fn frame(payload_type: PayloadType, payload: &[u8]) -> Vec<u8> {
    let header = V2gtpHeader::new(payload_type, payload.len() as u32);
    encode_v2gtp(&header, payload).expect("header length derived from payload")
}

/// Decodes exactly one frame from the front of `bytes`. Trailing bytes are
/// left for the caller and reported through [`DecodedFrame::consumed`].
pub fn decode_v2gtp(bytes: &[u8]) -> Result<DecodedFrame, WireError> {
    if bytes.is_empty() {
        return Err(WireError::Truncated {
            needed: V2GTP_HEADER_LEN,
            available: 0,
        });
    }
    if bytes[0] != V2GTP_VERSION {
        return Err(WireError::BadVersion(bytes[0]));
    }
    if bytes.len() < 2 {
        return Err(WireError::Truncated {
            needed: V2GTP_HEADER_LEN,
            available: bytes.len(),
        });
    }
    if bytes[1] != !bytes[0] {
        return Err(WireError::BadInverseVersion(bytes[1]));
    }
    if bytes.len() < V2GTP_HEADER_LEN {
        return Err(WireError::Truncated {
            needed: V2GTP_HEADER_LEN,
            available: bytes.len(),
        });
    }
    let payload_type = PayloadType::from_code(u16::from_be_bytes([bytes[2], bytes[3]]))?;
    let payload_length = u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let needed = V2GTP_HEADER_LEN + payload_length as usize;
    if bytes.len() < needed {
        return Err(WireError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    Ok(DecodedFrame {
        header: V2gtpHeader {
            version: bytes[0],
            inverse_version: bytes[1],
            payload_type,
            payload_length,
        },
        payload: bytes[V2GTP_HEADER_LEN..needed].to_vec(),
        consumed: needed,
    })
}

/// Result of looking for a complete frame at the front of a stream buffer.
#[derive(Debug, PartialEq, Eq)]
pub enum Reassembly {
    Frame(DecodedFrame),
    /// More bytes are needed before a frame can be decoded.
    Incomplete,
    Invalid(WireError),
}

/// Stream-oriented wrapper over [`decode_v2gtp`] that separates "need more
/// bytes" from genuinely malformed input.
pub fn next_frame(buffer: &[u8]) -> Reassembly {
    match decode_v2gtp(buffer) {
        Ok(frame) => Reassembly::Frame(frame),
        Err(WireError::Truncated { .. }) => Reassembly::Incomplete,
        Err(e) => Reassembly::Invalid(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Security {
    SecuredWithTls,
    PlainTcp,
}

impl Security {
    pub const fn code(self) -> u8 {
        match self {
            Security::SecuredWithTls => 0x00,
            Security::PlainTcp => 0x10,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            0x00 => Ok(Security::SecuredWithTls),
            0x10 => Ok(Security::PlainTcp),
            other => Err(WireError::UnknownSecurityByte(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transport {
    Tcp,
}

impl Transport {
    pub const fn code(self) -> u8 {
        match self {
            Transport::Tcp => 0x00,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            0x00 => Ok(Transport::Tcp),
            other => Err(WireError::UnknownTransportByte(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SdpRequest {
    pub security: Security,
    pub transport: Transport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SdpResponse {
    pub secc_address: NetAddress,
    pub secc_port: u16,
    pub security: Security,
    pub transport: Transport,
}

pub fn encode_sdp_request(req: &SdpRequest) -> Vec<u8> {
    vec![req.security.code(), req.transport.code()]
}

pub fn decode_sdp_request(bytes: &[u8]) -> Result<SdpRequest, WireError> {
    if bytes.len() != SDP_REQUEST_LEN {
        return Err(WireError::BadLength {
            expected: SDP_REQUEST_LEN,
            actual: bytes.len(),
        });
    }
    Ok(SdpRequest {
        security: Security::from_code(bytes[0])?,
        transport: Transport::from_code(bytes[1])?,
    })
}

pub fn encode_sdp_response(res: &SdpResponse) -> Vec<u8> {
    let mut out = Vec::with_capacity(SDP_RESPONSE_LEN);
    out.extend_from_slice(&res.secc_address.octets());
    out.extend_from_slice(&res.secc_port.to_be_bytes());
    out.push(res.security.code());
    out.push(res.transport.code());
    out
}

pub fn decode_sdp_response(bytes: &[u8]) -> Result<SdpResponse, WireError> {
    if bytes.len() != SDP_RESPONSE_LEN {
        return Err(WireError::BadLength {
            expected: SDP_RESPONSE_LEN,
            actual: bytes.len(),
        });
    }
    let mut addr = [0u8; 16];
    addr.copy_from_slice(&bytes[..16]);
    let secc_port = u16::from_be_bytes([bytes[16], bytes[17]]);
    let security = Security::from_code(bytes[18])?;
    let transport = Transport::from_code(bytes[19])?;
    if secc_port == 0 {
        return Err(WireError::ZeroPort);
    }
    Ok(SdpResponse {
        secc_address: NetAddress::from_octets(addr),
        secc_port,
        security,
        transport,
    })
}
