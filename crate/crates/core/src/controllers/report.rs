use serde::{Deserialize, Serialize};

use crate::messages::{MessageKind, MeterInfo, ResponseCode, SessionId, Stage, STAGE_SESSION_STOP};
use crate::netsim::{SimTime, SockAddr};
use crate::securechannel::HandshakeFailure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Completed,
    FailedNegotiation,
    FailedHandshake,
    FailedSequence,
    FailedDiscoveryTimeout,
    FailedTransport,
    /// The SECC answered with a non-OK response code.
    FailedRejected,
}

impl Outcome {
    pub const ALL: &'static [Outcome] = &[
        Outcome::Completed,
        Outcome::FailedNegotiation,
        Outcome::FailedHandshake,
        Outcome::FailedSequence,
        Outcome::FailedDiscoveryTimeout,
        Outcome::FailedTransport,
        Outcome::FailedRejected,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Completed => "Completed",
            Outcome::FailedNegotiation => "FailedNegotiation",
            Outcome::FailedHandshake => "FailedHandshake",
            Outcome::FailedSequence => "FailedSequence",
            Outcome::FailedDiscoveryTimeout => "FailedDiscoveryTimeout",
            Outcome::FailedTransport => "FailedTransport",
            Outcome::FailedRejected => "FailedRejected",
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Outcome::ALL
            .iter()
            .copied()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| format!("unknown outcome {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flow {
    Sent,
    Received,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TranscriptEntry {
    pub at: SimTime,
    pub flow: Flow,
    pub kind: MessageKind,
    pub session_id: SessionId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_code: Option<ResponseCode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChargeSessionReport {
    pub outcome: Outcome,
    pub last_stage_reached: Option<Stage>,
    pub response_code: Option<ResponseCode>,
    pub handshake_failure: Option<HandshakeFailure>,
    pub session_id: SessionId,
    pub secured: bool,
    pub peer: Option<SockAddr>,
    pub sdp_attempts: u32,
    pub messages_sent: u32,
    pub messages_received: u32,
    pub meter: Option<MeterInfo>,
    /// Meter values come from the emulator's model, not hardware.
    pub meter_synthetic: bool,
    pub paused: bool,
    pub started_at: SimTime,
    pub finished_at: SimTime,
    pub detail: Option<String>,
    pub transcript: Vec<TranscriptEntry>,
}

impl ChargeSessionReport {
    pub fn new(started_at: SimTime) -> Self {
        Self {
            outcome: Outcome::FailedTransport,
            last_stage_reached: None,
            response_code: None,
            handshake_failure: None,
            session_id: SessionId::ZERO,
            secured: false,
            peer: None,
            sdp_attempts: 0,
            messages_sent: 0,
            messages_received: 0,
            meter: None,
            meter_synthetic: true,
            paused: false,
            started_at,
            finished_at: started_at,
            detail: None,
            transcript: Vec::new(),
        }
    }

    pub fn is_completed(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    /// `Completed` exactly when the session-stop stage was reached.
    pub fn is_consistent(&self) -> bool {
        self.is_completed() == (self.last_stage_reached == Some(STAGE_SESSION_STOP))
    }

    pub fn kinds(&self, flow: Flow) -> Vec<MessageKind> {
        self.transcript
            .iter()
            .filter(|e| e.flow == flow)
            .map(|e| e.kind)
            .collect()
    }
}
