//! V2GTP message stream over a connection, optionally inside secure
//! records.

use rand::RngCore;
use thiserror::Error;

use crate::securechannel::{
    next_record, ClientHandshake, HandshakeFailure, Identity, RecordError, Role, SecureChannel,
    ServerHandshake, TrustAnchor, RECORD_ALERT, RECORD_DATA,
};
use crate::wire::{frame, next_frame, PayloadType, Reassembly, WireError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("handshake failed: {0:?}")]
    Handshake(HandshakeFailure),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Framing(#[from] WireError),
    #[error("channel not established")]
    NotEstablished,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelEvent {
    /// The secure handshake finished.
    Established,
    Payload(PayloadType, Vec<u8>),
    Failed(ChannelError),
}

enum Handshake {
    Client(ClientHandshake),
    Server(ServerHandshake),
}

enum Mode {
    Plain,
    Handshaking(Box<Handshake>),
    Secured(SecureChannel),
    Failed,
}

/// Turns stream bytes into V2GTP payloads and back.
pub struct MessageChannel {
    raw: Vec<u8>,
    plain: Vec<u8>,
    mode: Mode,
}

impl MessageChannel {
    pub fn plain() -> Self {
        Self {
            raw: Vec::new(),
            plain: Vec::new(),
            mode: Mode::Plain,
        }
    }

    /// Client side of a secured connection, with the hello to send.
    pub fn client<R: RngCore>(anchor: TrustAnchor, rng: &mut R) -> (Self, Vec<u8>) {
        let (hs, hello) = ClientHandshake::start(anchor, rng);
        let ch = Self {
            raw: Vec::new(),
            plain: Vec::new(),
            mode: Mode::Handshaking(Box::new(Handshake::Client(hs))),
        };
        (ch, hello)
    }

    pub fn server<R: RngCore>(identity: Identity, rng: &mut R) -> Self {
        Self {
            raw: Vec::new(),
            plain: Vec::new(),
            mode: Mode::Handshaking(Box::new(Handshake::Server(ServerHandshake::new(
                identity, rng,
            )))),
        }
    }

    pub fn is_established(&self) -> bool {
        matches!(self.mode, Mode::Plain | Mode::Secured(_))
    }

    pub fn is_secured(&self) -> bool {
        matches!(self.mode, Mode::Secured(_))
    }

    pub fn has_failed(&self) -> bool {
        matches!(self.mode, Mode::Failed)
    }

    /// Certificate presented by the server, on the client side.
    pub fn server_certificate(&self) -> Option<&crate::securechannel::Certificate> {
        match &self.mode {
            Mode::Handshaking(hs) => match hs.as_ref() {
                Handshake::Client(c) => c.server_certificate(),
                Handshake::Server(_) => None,
            },
            _ => None,
        }
    }

    /// Feeds bytes read from the stream. Returns bytes to write back and
    /// what was decoded.
    pub fn receive(&mut self, data: &[u8]) -> (Vec<u8>, Vec<ChannelEvent>) {
        let mut reply = Vec::new();
        let mut events = Vec::new();
        if matches!(self.mode, Mode::Failed) {
            return (reply, events);
        }
        self.raw.extend_from_slice(data);
        if let Err(e) = self.drain_records(&mut reply, &mut events) {
            self.mode = Mode::Failed;
            events.push(ChannelEvent::Failed(e));
            return (reply, events);
        }
        loop {
            let buf = if matches!(self.mode, Mode::Plain) {
                &mut self.raw
            } else {
                &mut self.plain
            };
            match next_frame(buf) {
                Reassembly::Frame(f) => {
                    buf.drain(..f.consumed);
                    events.push(ChannelEvent::Payload(f.header.payload_type, f.payload));
                }
                Reassembly::Incomplete => break,
                Reassembly::Invalid(e) => {
                    self.mode = Mode::Failed;
                    events.push(ChannelEvent::Failed(e.into()));
                    break;
                }
            }
        }
        (reply, events)
    }

    fn drain_records(
        &mut self,
        reply: &mut Vec<u8>,
        events: &mut Vec<ChannelEvent>,
    ) -> Result<(), ChannelError> {
        loop {
            if matches!(self.mode, Mode::Plain) {
                return Ok(());
            }
            let Some((kind, body, used)) = next_record(&self.raw) else {
                return Ok(());
            };
            let body = body.to_vec();
            self.raw.drain(..used);
            match &mut self.mode {
                Mode::Handshaking(hs) => {
                    let result = match hs.as_mut() {
                        Handshake::Client(c) => c.on_record(kind, &body),
                        Handshake::Server(s) => s.on_record(kind, &body),
                    };
                    match result {
                        Ok(progress) => {
                            for r in progress.send {
                                reply.extend_from_slice(&r);
                            }
                            if let Some(keys) = progress.keys {
                                let role = match hs.as_ref() {
                                    Handshake::Client(_) => Role::Client,
                                    Handshake::Server(_) => Role::Server,
                                };
                                self.mode = Mode::Secured(SecureChannel::new(keys, role));
                                events.push(ChannelEvent::Established);
                            }
                        }
                        Err((reason, alerts)) => {
                            for r in alerts {
                                reply.extend_from_slice(&r);
                            }
                            return Err(ChannelError::Handshake(reason));
                        }
                    }
                }
                Mode::Secured(sc) => match kind {
                    RECORD_DATA => {
                        let pt = sc.open_body(&body)?;
                        self.plain.extend_from_slice(&pt);
                    }
                    RECORD_ALERT => {
                        let code = body.first().copied().unwrap_or(0);
                        return Err(ChannelError::Handshake(HandshakeFailure::from_alert(code)));
                    }
                    _ => return Err(RecordError::Malformed.into()),
                },
                Mode::Plain | Mode::Failed => return Ok(()),
            }
        }
    }

    /// Frames a payload for the stream.
    pub fn send(
        &mut self,
        payload_type: PayloadType,
        payload: &[u8],
    ) -> Result<Vec<u8>, ChannelError> {
        let framed = frame(payload_type, payload);
        match &mut self.mode {
            Mode::Plain => Ok(framed),
            Mode::Secured(sc) => Ok(sc.seal(&framed)?),
            Mode::Handshaking(_) | Mode::Failed => Err(ChannelError::NotEstablished),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::securechannel::generate_identity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn plain_frames_split_across_reads() {
        let mut tx = MessageChannel::plain();
        let mut rx = MessageChannel::plain();
        let mut bytes = tx.send(PayloadType::ExiV2gMessage, b"one").unwrap();
        bytes.extend(tx.send(PayloadType::ExiV2gMessage, b"two").unwrap());
        let mut got = Vec::new();
        for chunk in bytes.chunks(3) {
            got.extend(rx.receive(chunk).1);
        }
        assert_eq!(
            got,
            vec![
                ChannelEvent::Payload(PayloadType::ExiV2gMessage, b"one".to_vec()),
                ChannelEvent::Payload(PayloadType::ExiV2gMessage, b"two".to_vec()),
            ]
        );
    }

    #[test]
    fn plain_garbage_fails_once() {
        let mut rx = MessageChannel::plain();
        let (_, ev) = rx.receive(&[0x02, 0xFD, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(
            ev.as_slice(),
            [ChannelEvent::Failed(ChannelError::Framing(_))]
        ));
        assert!(rx.receive(b"more").1.is_empty());
    }

    fn pair(
        seed: u64,
        trusted: bool,
    ) -> (
        MessageChannel,
        MessageChannel,
        Vec<ChannelEvent>,
        Vec<ChannelEvent>,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ca = generate_identity("ca", None, &mut rng);
        let other = generate_identity("ca", None, &mut rng);
        let server_id = generate_identity("secc", Some(&ca), &mut rng);
        let anchor = if trusted { ca.anchor() } else { other.anchor() };
        let (mut c, hello) = MessageChannel::client(anchor, &mut rng);
        let mut s = MessageChannel::server(server_id, &mut rng);
        let (mut cev, mut sev) = (Vec::new(), Vec::new());
        let mut to_server = hello;
        for _ in 0..4 {
            let (to_client, e) = s.receive(&std::mem::take(&mut to_server));
            sev.extend(e);
            let (back, e) = c.receive(&to_client);
            cev.extend(e);
            to_server = back;
        }
        (c, s, cev, sev)
    }

    #[test]
    fn secured_round_trip() {
        let (mut c, mut s, cev, sev) = pair(1, true);
        assert_eq!(cev, vec![ChannelEvent::Established]);
        assert_eq!(sev, vec![ChannelEvent::Established]);
        assert!(c.is_secured() && s.is_secured());
        let rec = c.send(PayloadType::ExiV2gMessage, b"hello").unwrap();
        assert!(!rec.windows(5).any(|w| w == b"hello"));
        let (_, ev) = s.receive(&rec);
        assert_eq!(
            ev,
            vec![ChannelEvent::Payload(
                PayloadType::ExiV2gMessage,
                b"hello".to_vec()
            )]
        );
        let (_, ev) = s.receive(&rec);
        assert!(matches!(
            ev.as_slice(),
            [ChannelEvent::Failed(ChannelError::Record(
                RecordError::AuthenticationFailure
            ))]
        ));
    }

    #[test]
    fn untrusted_server_fails_on_both_sides() {
        let (mut c, _, cev, sev) = pair(2, false);
        assert_eq!(
            cev,
            vec![ChannelEvent::Failed(ChannelError::Handshake(
                HandshakeFailure::CertificateVerifyFailure
            ))]
        );
        assert_eq!(
            sev,
            vec![ChannelEvent::Failed(ChannelError::Handshake(
                HandshakeFailure::CertificateVerifyFailure
            ))]
        );
        assert_eq!(
            c.send(PayloadType::ExiV2gMessage, b"x"),
            Err(ChannelError::NotEstablished)
        );
    }
}
