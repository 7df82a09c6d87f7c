//! Certificate-authenticated secure channel: a three-flight handshake over
//! an ordered byte stream, then sealed records.
//!
//! Primitives: Ed25519 for certificates and the server key-share signature,
//! X25519 for key agreement, HKDF-SHA256 for the key schedule, HMAC-SHA256
//! for the finished checks, ChaCha20-Poly1305 for records.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

pub const RECORD_HANDSHAKE: u8 = 0x16;
pub const RECORD_DATA: u8 = 0x17;
pub const RECORD_ALERT: u8 = 0x15;
pub const RECORD_HEADER_LEN: usize = 3;
pub const MAX_RECORD_BODY: usize = u16::MAX as usize;

const HS_CLIENT_HELLO: u8 = 1;
const HS_SERVER_HELLO: u8 = 2;
const HS_CLIENT_FINISHED: u8 = 3;
const HS_SERVER_FINISHED: u8 = 4;

const CERT_CONTEXT: &[u8] = b"v2gemu certificate\0";
const SHARE_CONTEXT: &[u8] = b"v2gemu server share\0";

type HmacSha256 = Hmac<Sha256>;

mod hex_array {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(
        bytes: &[u8; N],
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(
        d: D,
    ) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; N];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Certificate {
    pub subject_name: String,
    #[serde(with = "hex_array")]
    pub public_key: [u8; 32],
    pub issuer_name: String,
    #[serde(with = "hex_array")]
    pub signature: [u8; 64],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrustAnchor {
    pub name: String,
    #[serde(with = "hex_array")]
    pub verification_key: [u8; 32],
}

/// A certificate together with the signing key for its public key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Identity {
    pub certificate: Certificate,
    #[serde(with = "hex_array")]
    pub signing_key: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionKeys {
    pub client_to_server: [u8; 32],
    pub server_to_client: [u8; 32],
    pub transcript_hash: [u8; 32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error, Serialize, Deserialize)]
pub enum HandshakeFailure {
    #[error("certificate verification failed")]
    CertificateVerifyFailure,
    #[error("handshake transcript mismatch")]
    TranscriptMismatch,
    #[error("handshake timed out")]
    Timeout,
}

impl HandshakeFailure {
    pub fn alert_code(self) -> u8 {
        match self {
            HandshakeFailure::CertificateVerifyFailure => 1,
            HandshakeFailure::TranscriptMismatch => 2,
            HandshakeFailure::Timeout => 3,
        }
    }

    pub fn from_alert(code: u8) -> Self {
        match code {
            1 => HandshakeFailure::CertificateVerifyFailure,
            3 => HandshakeFailure::Timeout,
            _ => HandshakeFailure::TranscriptMismatch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("record authentication failed")]
    AuthenticationFailure,
    #[error("malformed record")]
    Malformed,
    #[error("record body too large")]
    TooLarge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl Direction {
    fn byte(self) -> u8 {
        match self {
            Direction::ClientToServer => 0,
            Direction::ServerToClient => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

// -- certificates -------------------------------------------------------------

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn signed_content(subject: &str, key: &[u8; 32]) -> Vec<u8> {
    let mut m = CERT_CONTEXT.to_vec();
    put_str(&mut m, subject);
    m.extend_from_slice(key);
    m
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N)?.try_into().ok()
    }

    fn u16(&mut self) -> Option<u16> {
        self.array::<2>().map(u16::from_be_bytes)
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl Certificate {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_str(&mut out, &self.subject_name);
        out.extend_from_slice(&self.public_key);
        put_str(&mut out, &self.issuer_name);
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let mut r = Reader::new(bytes);
        let cert = Certificate {
            subject_name: r.string()?,
            public_key: r.array()?,
            issuer_name: r.string()?,
            signature: r.array()?,
        };
        r.done().then_some(cert)
    }

    /// True when the certificate names `anchor` as issuer and its signature
    /// verifies under the anchor's key.
    pub fn verify(&self, anchor: &TrustAnchor) -> bool {
        if self.issuer_name != anchor.name {
            return false;
        }
        let Ok(key) = VerifyingKey::from_bytes(&anchor.verification_key) else {
            return false;
        };
        key.verify_strict(
            &signed_content(&self.subject_name, &self.public_key),
            &Signature::from_bytes(&self.signature),
        )
        .is_ok()
    }
}

impl Identity {
    pub fn name(&self) -> &str {
        &self.certificate.subject_name
    }

    fn key(&self) -> SigningKey {
        SigningKey::from_bytes(&self.signing_key)
    }

    /// Anchor that verifies certificates this identity issues.
    pub fn anchor(&self) -> TrustAnchor {
        TrustAnchor {
            name: self.certificate.subject_name.clone(),
            verification_key: self.key().verifying_key().to_bytes(),
        }
    }
}

/// Creates a key pair for `name` and a certificate signed by `issuer`, or a
/// self-signed one when no issuer is given.
pub fn generate_identity<R: RngCore>(
    name: &str,
    issuer: Option<&Identity>,
    rng: &mut R,
) -> Identity {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    let key = SigningKey::from_bytes(&seed);
    let public_key = key.verifying_key().to_bytes();
    let content = signed_content(name, &public_key);
    let (issuer_name, signature) = match issuer {
        Some(ca) => (ca.name().to_string(), ca.key().sign(&content)),
        None => (name.to_string(), key.sign(&content)),
    };
    Identity {
        certificate: Certificate {
            subject_name: name.to_string(),
            public_key,
            issuer_name,
            signature: signature.to_bytes(),
        },
        signing_key: seed,
    }
}

// -- records ------------------------------------------------------------------

pub fn frame_record(kind: u8, body: &[u8]) -> Result<Vec<u8>, RecordError> {
    if body.len() > MAX_RECORD_BODY {
        return Err(RecordError::TooLarge);
    }
    let mut out = Vec::with_capacity(RECORD_HEADER_LEN + body.len());
    out.push(kind);
    out.extend_from_slice(&(body.len() as u16).to_be_bytes());
    out.extend_from_slice(body);
    Ok(out)
}

/// Splits the first complete record off `buf`: (type, body, bytes consumed).
pub fn next_record(buf: &[u8]) -> Option<(u8, &[u8], usize)> {
    if buf.len() < RECORD_HEADER_LEN {
        return None;
    }
    let len = u16::from_be_bytes([buf[1], buf[2]]) as usize;
    let end = RECORD_HEADER_LEN + len;
    (buf.len() >= end).then(|| (buf[0], &buf[RECORD_HEADER_LEN..end], end))
}

fn nonce(direction: Direction, counter: u64) -> [u8; 12] {
    let mut n = [0u8; 12];
    n[0] = direction.byte();
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

fn key_for(keys: &SessionKeys, direction: Direction) -> &[u8; 32] {
    match direction {
        Direction::ClientToServer => &keys.client_to_server,
        Direction::ServerToClient => &keys.server_to_client,
    }
}

/// Encrypts `plaintext` as a data record with sequence number `counter`.
pub fn seal(
    keys: &SessionKeys,
    direction: Direction,
    counter: u64,
    plaintext: &[u8],
) -> Result<Vec<u8>, RecordError> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key_for(keys, direction)));
    let aad = counter.to_be_bytes();
    let ct = cipher
        .encrypt(
            Nonce::from_slice(&nonce(direction, counter)),
            Payload {
                msg: plaintext,
                aad: &aad,
            },
        )
        .map_err(|_| RecordError::TooLarge)?;
    let mut body = aad.to_vec();
    body.extend_from_slice(&ct);
    frame_record(RECORD_DATA, &body)
}

/// Decrypts a full data record, requiring sequence number `expected`.
pub fn open(
    keys: &SessionKeys,
    direction: Direction,
    expected: u64,
    record: &[u8],
) -> Result<Vec<u8>, RecordError> {
    let (kind, body, used) = next_record(record).ok_or(RecordError::Malformed)?;
    if kind != RECORD_DATA || used != record.len() {
        return Err(RecordError::Malformed);
    }
    open_body(keys, direction, expected, body)
}

fn open_body(
    keys: &SessionKeys,
    direction: Direction,
    expected: u64,
    body: &[u8],
) -> Result<Vec<u8>, RecordError> {
    if body.len() < 8 + 16 {
        return Err(RecordError::Malformed);
    }
    let counter = u64::from_be_bytes(body[..8].try_into().expect("8 bytes"));
    if counter != expected {
        return Err(RecordError::AuthenticationFailure);
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key_for(keys, direction)));
    cipher
        .decrypt(
            Nonce::from_slice(&nonce(direction, counter)),
            Payload {
                msg: &body[8..],
                aad: &body[..8],
            },
        )
        .map_err(|_| RecordError::AuthenticationFailure)
}

/// Record layer state for one established connection.
#[derive(Debug, Clone)]
pub struct SecureChannel {
    keys: SessionKeys,
    role: Role,
    sent: u64,
    received: u64,
}

impl SecureChannel {
    pub fn new(keys: SessionKeys, role: Role) -> Self {
        Self {
            keys,
            role,
            sent: 0,
            received: 0,
        }
    }

    pub fn keys(&self) -> &SessionKeys {
        &self.keys
    }

    fn outgoing(&self) -> Direction {
        match self.role {
            Role::Client => Direction::ClientToServer,
            Role::Server => Direction::ServerToClient,
        }
    }

    fn incoming(&self) -> Direction {
        match self.role {
            Role::Client => Direction::ServerToClient,
            Role::Server => Direction::ClientToServer,
        }
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> Result<Vec<u8>, RecordError> {
        let rec = seal(&self.keys, self.outgoing(), self.sent, plaintext)?;
        self.sent += 1;
        Ok(rec)
    }

    /// Opens the body of a data record taken from the stream.
    pub fn open_body(&mut self, body: &[u8]) -> Result<Vec<u8>, RecordError> {
        let pt = open_body(&self.keys, self.incoming(), self.received, body)?;
        self.received += 1;
        Ok(pt)
    }

    pub fn open(&mut self, record: &[u8]) -> Result<Vec<u8>, RecordError> {
        let pt = open(&self.keys, self.incoming(), self.received, record)?;
        self.received += 1;
        Ok(pt)
    }
}

// -- handshake ------------------------------------------------------------------

/// Result of feeding one handshake or alert record to a handshake state
/// machine.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Progress {
    /// Framed records to send to the peer, in order.
    pub send: Vec<Vec<u8>>,
    /// Keys, once this side considers the handshake complete.
    pub keys: Option<SessionKeys>,
}

fn alert(reason: HandshakeFailure) -> Vec<u8> {
    frame_record(RECORD_ALERT, &[reason.alert_code()]).expect("one byte")
}

fn hs_record(body: &[u8]) -> Vec<u8> {
    frame_record(RECORD_HANDSHAKE, body).expect("handshake flights are small")
}

struct Schedule {
    c2s: [u8; 32],
    s2c: [u8; 32],
    client_finished: [u8; 32],
    server_finished: [u8; 32],
}

fn schedule(shared: &[u8; 32], client_random: &[u8; 32], server_random: &[u8; 32]) -> Schedule {
    let mut salt = client_random.to_vec();
    salt.extend_from_slice(server_random);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let expand = |label: &[u8]| {
        let mut okm = [0u8; 32];
        hk.expand(label, &mut okm)
            .expect("32 bytes is a valid length");
        okm
    };
    Schedule {
        c2s: expand(b"c2s key"),
        s2c: expand(b"s2c key"),
        client_finished: expand(b"client finished"),
        server_finished: expand(b"server finished"),
    }
}

fn mac(key: &[u8; 32], transcript: &[u8]) -> [u8; 32] {
    let digest = Sha256::digest(transcript);
    let mut m = <HmacSha256 as Mac>::new_from_slice(key).expect("any key length");
    m.update(&digest);
    m.finalize().into_bytes().into()
}

fn mac_ok(key: &[u8; 32], transcript: &[u8], tag: &[u8]) -> bool {
    let digest = Sha256::digest(transcript);
    let mut m = <HmacSha256 as Mac>::new_from_slice(key).expect("any key length");
    m.update(&digest);
    m.verify_slice(tag).is_ok()
}

fn random32<R: RngCore>(rng: &mut R) -> [u8; 32] {
    let mut b = [0u8; 32];
    rng.fill_bytes(&mut b);
    b
}

enum ClientState {
    AwaitServerHello,
    AwaitServerFinished { schedule: Schedule },
    Done,
    Failed,
}

pub struct ClientHandshake {
    anchor: TrustAnchor,
    client_random: [u8; 32],
    secret: StaticSecret,
    transcript: Vec<u8>,
    state: ClientState,
    server_certificate: Option<Certificate>,
}

impl ClientHandshake {
    /// Starts a handshake; the returned record is the client hello.
    pub fn start<R: RngCore>(anchor: TrustAnchor, rng: &mut R) -> (Self, Vec<u8>) {
        let client_random = random32(rng);
        let secret = StaticSecret::from(random32(rng));
        let mut hello = vec![HS_CLIENT_HELLO];
        hello.extend_from_slice(&client_random);
        let hs = ClientHandshake {
            anchor,
            client_random,
            secret,
            transcript: hello.clone(),
            state: ClientState::AwaitServerHello,
            server_certificate: None,
        };
        (hs, hs_record(&hello))
    }

    pub fn server_certificate(&self) -> Option<&Certificate> {
        self.server_certificate.as_ref()
    }

    fn fail(
        &mut self,
        reason: HandshakeFailure,
        notify: bool,
    ) -> Result<Progress, (HandshakeFailure, Vec<Vec<u8>>)> {
        self.state = ClientState::Failed;
        Err((
            reason,
            if notify {
                vec![alert(reason)]
            } else {
                Vec::new()
            },
        ))
    }

    /// Feeds one record (type and body). On failure returns the reason and
    /// any alert to send.
    pub fn on_record(
        &mut self,
        kind: u8,
        body: &[u8],
    ) -> Result<Progress, (HandshakeFailure, Vec<Vec<u8>>)> {
        if kind == RECORD_ALERT {
            let code = body.first().copied().unwrap_or(0);
            return self.fail(HandshakeFailure::from_alert(code), false);
        }
        if kind != RECORD_HANDSHAKE {
            return self.fail(HandshakeFailure::TranscriptMismatch, true);
        }
        match std::mem::replace(&mut self.state, ClientState::Failed) {
            ClientState::AwaitServerHello => self.server_hello(body),
            ClientState::AwaitServerFinished { schedule } => {
                let ok = body.len() == 33
                    && body[0] == HS_SERVER_FINISHED
                    && mac_ok(&schedule.server_finished, &self.transcript, &body[1..]);
                if !ok {
                    return self.fail(HandshakeFailure::TranscriptMismatch, true);
                }
                self.transcript.extend_from_slice(body);
                self.state = ClientState::Done;
                Ok(Progress {
                    send: Vec::new(),
                    keys: Some(SessionKeys {
                        client_to_server: schedule.c2s,
                        server_to_client: schedule.s2c,
                        transcript_hash: Sha256::digest(&self.transcript).into(),
                    }),
                })
            }
            ClientState::Done | ClientState::Failed => {
                self.fail(HandshakeFailure::TranscriptMismatch, true)
            }
        }
    }

    fn server_hello(&mut self, body: &[u8]) -> Result<Progress, (HandshakeFailure, Vec<Vec<u8>>)> {
        let mut r = Reader::new(body);
        let parsed = (|| {
            if r.take(1)? != [HS_SERVER_HELLO] {
                return None;
            }
            let server_random: [u8; 32] = r.array()?;
            let share: [u8; 32] = r.array()?;
            let cert_len = r.u16()? as usize;
            let cert = Certificate::from_bytes(r.take(cert_len)?)?;
            let sig: [u8; 64] = r.array()?;
            r.done().then_some((server_random, share, cert, sig))
        })();
        let Some((server_random, share, cert, sig)) = parsed else {
            return self.fail(HandshakeFailure::TranscriptMismatch, true);
        };
        let mut signed = SHARE_CONTEXT.to_vec();
        signed.extend_from_slice(&server_random);
        signed.extend_from_slice(&share);
        let share_ok = VerifyingKey::from_bytes(&cert.public_key)
            .map(|k| {
                k.verify_strict(&signed, &Signature::from_bytes(&sig))
                    .is_ok()
            })
            .unwrap_or(false);
        let cert_ok = cert.verify(&self.anchor);
        self.server_certificate = Some(cert);
        if !(cert_ok && share_ok) {
            return self.fail(HandshakeFailure::CertificateVerifyFailure, true);
        }
        self.transcript.extend_from_slice(body);
        let shared = self
            .secret
            .diffie_hellman(&PublicKey::from(share))
            .to_bytes();
        let schedule = schedule(&shared, &self.client_random, &server_random);
        let mut finished = vec![HS_CLIENT_FINISHED];
        finished.extend_from_slice(PublicKey::from(&self.secret).as_bytes());
        let mut t = self.transcript.clone();
        t.extend_from_slice(&finished);
        finished.extend_from_slice(&mac(&schedule.client_finished, &t));
        self.transcript.extend_from_slice(&finished);
        self.state = ClientState::AwaitServerFinished { schedule };
        Ok(Progress {
            send: vec![hs_record(&finished)],
            keys: None,
        })
    }
}

enum ServerState {
    AwaitClientHello,
    AwaitClientFinished {
        client_random: [u8; 32],
        server_random: [u8; 32],
    },
    Done,
    Failed,
}

pub struct ServerHandshake {
    identity: Identity,
    secret: StaticSecret,
    server_random: [u8; 32],
    transcript: Vec<u8>,
    state: ServerState,
}

impl ServerHandshake {
    pub fn new<R: RngCore>(identity: Identity, rng: &mut R) -> Self {
        Self {
            identity,
            server_random: random32(rng),
            secret: StaticSecret::from(random32(rng)),
            transcript: Vec::new(),
            state: ServerState::AwaitClientHello,
        }
    }

    fn fail(
        &mut self,
        reason: HandshakeFailure,
        notify: bool,
    ) -> Result<Progress, (HandshakeFailure, Vec<Vec<u8>>)> {
        self.state = ServerState::Failed;
        Err((
            reason,
            if notify {
                vec![alert(reason)]
            } else {
                Vec::new()
            },
        ))
    }

    pub fn on_record(
        &mut self,
        kind: u8,
        body: &[u8],
    ) -> Result<Progress, (HandshakeFailure, Vec<Vec<u8>>)> {
        if kind == RECORD_ALERT {
            let code = body.first().copied().unwrap_or(0);
            return self.fail(HandshakeFailure::from_alert(code), false);
        }
        if kind != RECORD_HANDSHAKE {
            return self.fail(HandshakeFailure::TranscriptMismatch, true);
        }
        match std::mem::replace(&mut self.state, ServerState::Failed) {
            ServerState::AwaitClientHello => {
                if body.len() != 33 || body[0] != HS_CLIENT_HELLO {
                    return self.fail(HandshakeFailure::TranscriptMismatch, true);
                }
                let client_random: [u8; 32] = body[1..].try_into().expect("32 bytes");
                self.transcript.extend_from_slice(body);
                let share = PublicKey::from(&self.secret).to_bytes();
                let mut signed = SHARE_CONTEXT.to_vec();
                signed.extend_from_slice(&self.server_random);
                signed.extend_from_slice(&share);
                let sig = self.identity.key().sign(&signed);
                let cert = self.identity.certificate.to_bytes();
                let mut hello = vec![HS_SERVER_HELLO];
                hello.extend_from_slice(&self.server_random);
                hello.extend_from_slice(&share);
                hello.extend_from_slice(&(cert.len() as u16).to_be_bytes());
                hello.extend_from_slice(&cert);
                hello.extend_from_slice(&sig.to_bytes());
                self.transcript.extend_from_slice(&hello);
                self.state = ServerState::AwaitClientFinished {
                    client_random,
                    server_random: self.server_random,
                };
                Ok(Progress {
                    send: vec![hs_record(&hello)],
                    keys: None,
                })
            }
            ServerState::AwaitClientFinished {
                client_random,
                server_random,
            } => {
                if body.len() != 1 + 32 + 32 || body[0] != HS_CLIENT_FINISHED {
                    return self.fail(HandshakeFailure::TranscriptMismatch, true);
                }
                let share: [u8; 32] = body[1..33].try_into().expect("32 bytes");
                let shared = self
                    .secret
                    .diffie_hellman(&PublicKey::from(share))
                    .to_bytes();
                let schedule = schedule(&shared, &client_random, &server_random);
                let mut t = self.transcript.clone();
                t.extend_from_slice(&body[..33]);
                if !mac_ok(&schedule.client_finished, &t, &body[33..]) {
                    return self.fail(HandshakeFailure::TranscriptMismatch, true);
                }
                self.transcript.extend_from_slice(body);
                let mut finished = vec![HS_SERVER_FINISHED];
                finished.extend_from_slice(&mac(&schedule.server_finished, &self.transcript));
                self.transcript.extend_from_slice(&finished);
                self.state = ServerState::Done;
                Ok(Progress {
                    send: vec![hs_record(&finished)],
                    keys: Some(SessionKeys {
                        client_to_server: schedule.c2s,
                        server_to_client: schedule.s2c,
                        transcript_hash: Sha256::digest(&self.transcript).into(),
                    }),
                })
            }
            ServerState::Done | ServerState::Failed => {
                self.fail(HandshakeFailure::TranscriptMismatch, true)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn pki(seed: u64) -> (Identity, Identity) {
        let mut r = rng(seed);
        let ca = generate_identity("root", None, &mut r);
        let se = generate_identity("se", Some(&ca), &mut r);
        (ca, se)
    }

    #[derive(Debug, PartialEq)]
    enum Outcome {
        Ok(SessionKeys, SessionKeys),
        Failed(Option<HandshakeFailure>, Option<HandshakeFailure>),
    }

    /// Runs a handshake in memory, one flight at a time; `tamper` sees each
    /// flight (index, bytes) before delivery.
    fn run(
        anchor: TrustAnchor,
        server_id: Identity,
        mut tamper: impl FnMut(usize, &mut Vec<u8>),
    ) -> Outcome {
        let mut r = rng(99);
        let (mut client, hello) = ClientHandshake::start(anchor, &mut r);
        let mut server = ServerHandshake::new(server_id, &mut r);
        let mut keys: [Option<SessionKeys>; 2] = [None, None];
        let mut errs: [Option<HandshakeFailure>; 2] = [None, None];
        let mut pending = hello;
        let mut to_server = true;
        let mut flight = 0;
        while !pending.is_empty() && flight < 8 {
            let mut bytes = std::mem::take(&mut pending);
            tamper(flight, &mut bytes);
            flight += 1;
            let side = usize::from(to_server);
            let mut buf = &bytes[..];
            while let Some((kind, body, used)) = next_record(buf) {
                buf = &buf[used..];
                let res = if to_server {
                    server.on_record(kind, body)
                } else {
                    client.on_record(kind, body)
                };
                match res {
                    Ok(p) => {
                        keys[side] = keys[side].take().or(p.keys);
                        pending.extend(p.send.concat());
                    }
                    Err((e, alerts)) => {
                        errs[side] = errs[side].or(Some(e));
                        pending.extend(alerts.concat());
                    }
                }
            }
            if !buf.is_empty() && errs[side].is_none() && keys[side].is_none() {
                // the peer would wait forever for the rest of the record
                errs[side] = Some(HandshakeFailure::Timeout);
            }
            to_server = !to_server;
        }
        match keys {
            [Some(c), Some(s)] if errs == [None, None] => Outcome::Ok(c, s),
            _ => Outcome::Failed(errs[0], errs[1]),
        }
    }

    #[test]
    fn identity_verifies_under_issuer_only() {
        let (ca, se) = pki(1);
        assert!(se.certificate.verify(&ca.anchor()));
        assert!(ca.certificate.verify(&ca.anchor()));
        let (other, _) = pki(2);
        assert!(!se.certificate.verify(&other.anchor()));
        let mut renamed = other.anchor();
        renamed.name = "root".into();
        assert!(!se.certificate.verify(&renamed));
    }

    #[test]
    fn identity_is_deterministic() {
        let (a, b) = (pki(5), pki(5));
        assert_eq!(a.1.certificate.to_bytes(), b.1.certificate.to_bytes());
        assert_ne!(pki(6).1.certificate, a.1.certificate);
        assert_eq!(
            Certificate::from_bytes(&a.1.certificate.to_bytes()),
            Some(a.1.certificate.clone())
        );
    }

    #[test]
    fn identity_json_round_trip() {
        let (_, se) = pki(3);
        let text = serde_json::to_string(&se).unwrap();
        assert_eq!(serde_json::from_str::<Identity>(&text).unwrap(), se);
    }

    #[test]
    fn honest_handshake_agrees() {
        let (ca, se) = pki(1);
        match run(ca.anchor(), se, |_, _| {}) {
            Outcome::Ok(c, s) => assert_eq!(c, s),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn foreign_certificate_rejected() {
        let (ca, _) = pki(1);
        let (_, forged) = pki(2);
        assert_eq!(
            run(ca.anchor(), forged, |_, _| {}),
            Outcome::Failed(
                Some(HandshakeFailure::CertificateVerifyFailure),
                Some(HandshakeFailure::CertificateVerifyFailure)
            )
        );
    }

    /// Flips every byte position of every flight in turn.
    #[test]
    fn any_flipped_byte_fails() {
        let (ca, se) = pki(1);
        let mut lens = Vec::new();
        run(ca.anchor(), se.clone(), |i, b| {
            if lens.len() == i {
                lens.push(b.len());
            }
        });
        assert_eq!(lens.len(), 4);
        for (target, &len) in lens.iter().enumerate() {
            for pos in 0..len {
                let out = run(ca.anchor(), se.clone(), |i, b| {
                    if i == target {
                        b[pos] ^= 0x01;
                    }
                });
                let Outcome::Failed(c, s) = &out else {
                    panic!("flight {target} byte {pos} went unnoticed");
                };
                let reasons: Vec<_> = [c, s].into_iter().flatten().copied().collect();
                assert!(!reasons.is_empty(), "flight {target} byte {pos}");
                let header = pos < RECORD_HEADER_LEN;
                for r in reasons {
                    match r {
                        HandshakeFailure::TranscriptMismatch => {}
                        HandshakeFailure::Timeout => assert!(header, "flight {target} byte {pos}"),
                        HandshakeFailure::CertificateVerifyFailure => {
                            assert_eq!(target, 1, "byte {pos}")
                        }
                    }
                }
                if target != 1 && !header {
                    assert!(
                        c.iter()
                            .chain(s.iter())
                            .all(|r| *r == HandshakeFailure::TranscriptMismatch),
                        "flight {target} byte {pos}: {out:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn records_round_trip_and_reject_tampering() {
        let (ca, se) = pki(1);
        let Outcome::Ok(keys, _) = run(ca.anchor(), se, |_, _| {}) else {
            panic!()
        };
        let mut client = SecureChannel::new(keys.clone(), Role::Client);
        let mut server = SecureChannel::new(keys, Role::Server);
        let r1 = client.seal(b"first").unwrap();
        let r2 = client.seal(b"second").unwrap();
        assert_eq!(server.open(&r1).unwrap(), b"first");
        assert_eq!(server.open(&r2).unwrap(), b"second");
        assert_eq!(server.open(&r1), Err(RecordError::AuthenticationFailure));

        let r3 = client.seal(b"third").unwrap();
        for pos in RECORD_HEADER_LEN + 8..r3.len() {
            let mut bad = r3.clone();
            bad[pos] ^= 0x80;
            assert_eq!(
                server.clone().open(&bad),
                Err(RecordError::AuthenticationFailure)
            );
        }
        assert_eq!(server.open(&r3).unwrap(), b"third");

        // a record sealed for one direction does not open in the other
        let back = server.seal(b"reply").unwrap();
        assert!(client.clone().open(&r1).is_err());
        assert_eq!(client.open(&back).unwrap(), b"reply");
    }

    #[test]
    fn every_message_kind_seals() {
        use crate::messages::{encode_message, MessageKind};
        let (ca, se) = pki(1);
        let Outcome::Ok(keys, _) = run(ca.anchor(), se, |_, _| {}) else {
            panic!()
        };
        let mut c = SecureChannel::new(keys.clone(), Role::Client);
        let mut s = SecureChannel::new(keys, Role::Server);
        for &k in MessageKind::ALL {
            let bytes = encode_message(&crate::messages::tests::sample(k));
            assert_eq!(s.open(&c.seal(&bytes).unwrap()).unwrap(), bytes);
        }
    }
}
