//! Interceptor pipeline and the built-in attack scenarios.

use serde::{Deserialize, Serialize};

use crate::messages::{
    decode_message, encode_message, Body, ChargeProgress, EnergyTransferMode, MessageKind,
    V2GMessage,
};
use crate::netsim::{NetAddress, SimTime};
use crate::wire::{decode_sdp_response, encode_sdp_response, PayloadType};

/// Which way an intercepted payload was travelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Toward {
    Secc,
    Evcc,
}

impl Toward {
    pub fn reverse(self) -> Self {
        match self {
            Toward::Secc => Toward::Evcc,
            Toward::Evcc => Toward::Secc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PayloadClass {
    SdpRequest,
    SdpResponse,
    V2gMessage,
    Other,
}

impl PayloadClass {
    pub fn of(payload_type: PayloadType) -> Self {
        match payload_type {
            PayloadType::SdpRequest => PayloadClass::SdpRequest,
            PayloadType::SdpResponse => PayloadClass::SdpResponse,
            PayloadType::ExiV2gMessage => PayloadClass::V2gMessage,
        }
    }
}

/// One payload handed to an interceptor. `payload` is the V2GTP payload
/// without its header.
#[derive(Debug, Clone)]
pub struct Intercepted<'a> {
    pub at: SimTime,
    pub toward: Toward,
    pub class: PayloadClass,
    pub payload: &'a [u8],
    /// Decoded form of a V2G message payload.
    pub message: Option<&'a V2GMessage>,
    /// The MitM's own network address.
    pub own_net: NetAddress,
}

/// Extra payload emitted alongside an intercepted one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    pub toward: Toward,
    pub payload_type: PayloadType,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InterceptorDecision {
    Forward,
    Drop,
    Replace(Vec<u8>),
    /// Forwards the original, then sends the extra payloads.
    Inject(Vec<Injection>),
}

pub trait Interceptor {
    fn intercept(&mut self, item: &Intercepted<'_>) -> InterceptorDecision;
}

impl<F> Interceptor for F
where
    F: FnMut(&Intercepted<'_>) -> InterceptorDecision,
{
    fn intercept(&mut self, item: &Intercepted<'_>) -> InterceptorDecision {
        self(item)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "type")]
pub enum AttackScenario {
    PassthroughLogger,
    /// Points the SDP response at the MitM proxy; with `rewrite_address`
    /// the advertised address is replaced by the MitM's own as well.
    SdpPortRewrite {
        new_port: u16,
        rewrite_address: bool,
    },
    DosVersionRewrite {
        major: u32,
        minor: u32,
    },
    ServiceListTamper {
        add: Vec<EnergyTransferMode>,
        remove: Vec<EnergyTransferMode>,
    },
    PowerDeliveryStop,
    Blackhole,
}

impl AttackScenario {
    pub fn name(&self) -> &'static str {
        match self {
            AttackScenario::PassthroughLogger => "PassthroughLogger",
            AttackScenario::SdpPortRewrite { .. } => "SdpPortRewrite",
            AttackScenario::DosVersionRewrite { .. } => "DosVersionRewrite",
            AttackScenario::ServiceListTamper { .. } => "ServiceListTamper",
            AttackScenario::PowerDeliveryStop => "PowerDeliveryStop",
            AttackScenario::Blackhole => "Blackhole",
        }
    }

    /// Port the MitM proxy must listen on besides intercepted SECC ports.
    pub fn proxy_port(&self) -> Option<u16> {
        match self {
            AttackScenario::SdpPortRewrite { new_port, .. } => Some(*new_port),
            _ => None,
        }
    }
}

fn replace_message(msg: &V2GMessage, body: Body) -> InterceptorDecision {
    InterceptorDecision::Replace(encode_message(&V2GMessage::new(msg.session_id, body)))
}

impl Interceptor for AttackScenario {
    fn intercept(&mut self, item: &Intercepted<'_>) -> InterceptorDecision {
        use InterceptorDecision::*;
        match (self, item.class) {
            (
                AttackScenario::SdpPortRewrite {
                    new_port,
                    rewrite_address,
                },
                PayloadClass::SdpResponse,
            ) => {
                let Ok(mut res) = decode_sdp_response(item.payload) else {
                    return Forward;
                };
                res.secc_port = *new_port;
                if *rewrite_address {
                    res.secc_address = item.own_net;
                }
                Replace(encode_sdp_response(&res))
            }
            (AttackScenario::Blackhole, PayloadClass::V2gMessage) => Drop,
            (scenario, PayloadClass::V2gMessage) => {
                let Some(msg) = item.message else {
                    return Forward;
                };
                match (scenario, &msg.body) {
                    (
                        AttackScenario::DosVersionRewrite { major, minor },
                        Body::SupportedAppProtocolReq { protocols },
                    ) => {
                        let protocols = protocols
                            .iter()
                            .cloned()
                            .map(|mut p| {
                                p.version_major = *major;
                                p.version_minor = *minor;
                                p
                            })
                            .collect();
                        replace_message(msg, Body::SupportedAppProtocolReq { protocols })
                    }
                    (
                        AttackScenario::ServiceListTamper { add, remove },
                        Body::ServiceDiscoveryRes {
                            response_code,
                            free_service,
                            energy_transfer_modes,
                            payment_options,
                        },
                    ) => {
                        let mut modes: Vec<_> = energy_transfer_modes
                            .iter()
                            .copied()
                            .filter(|m| !remove.contains(m))
                            .collect();
                        for m in add.iter() {
                            if !modes.contains(m) {
                                modes.push(*m);
                            }
                        }
                        replace_message(
                            msg,
                            Body::ServiceDiscoveryRes {
                                response_code: *response_code,
                                free_service: *free_service,
                                energy_transfer_modes: modes,
                                payment_options: payment_options.clone(),
                            },
                        )
                    }
                    (
                        AttackScenario::PowerDeliveryStop,
                        Body::PowerDeliveryReq {
                            charge_progress: ChargeProgress::Start,
                        },
                    ) => replace_message(
                        msg,
                        Body::PowerDeliveryReq {
                            charge_progress: ChargeProgress::Stop,
                        },
                    ),
                    _ => Forward,
                }
            }
            _ => Forward,
        }
    }
}

/// Replaces the session id of every request of `kind` with `session_id`.
#[derive(Debug, Clone)]
pub struct SessionIdForger {
    pub kind: MessageKind,
    pub session_id: crate::messages::SessionId,
}

impl Interceptor for SessionIdForger {
    fn intercept(&mut self, item: &Intercepted<'_>) -> InterceptorDecision {
        match item.message {
            Some(msg) if msg.kind() == self.kind => InterceptorDecision::Replace(encode_message(
                &V2GMessage::new(self.session_id, msg.body.clone()),
            )),
            _ => InterceptorDecision::Forward,
        }
    }
}

/// Decodes a payload for logging; `None` when it is not a V2G message.
pub(crate) fn try_decode(payload: &[u8]) -> Option<V2GMessage> {
    decode_message(payload).ok()
}
