//! Typed V2G application messages, their document form, and the
//! charge-sequence ordering.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_exi_bytes, encode_exi, CodecError, DocNode};
use crate::netsim::LinkAddress;

/// Position of a message kind in the charge sequence.
pub type Stage = u8;

pub const STAGE_SUPPORTED_APP_PROTOCOL: Stage = 0;
pub const STAGE_SESSION_SETUP: Stage = 1;
pub const STAGE_SERVICE_DISCOVERY: Stage = 2;
pub const STAGE_PAYMENT_SERVICE_SELECTION: Stage = 3;
pub const STAGE_AUTHORIZATION: Stage = 4;
pub const STAGE_CHARGE_PARAMETER_DISCOVERY: Stage = 5;
pub const STAGE_CABLE_CHECK: Stage = 6;
pub const STAGE_PRE_CHARGE: Stage = 7;
pub const STAGE_POWER_DELIVERY_START: Stage = 8;
pub const STAGE_CHARGING_LOOP: Stage = 9;
pub const STAGE_POWER_DELIVERY_STOP: Stage = 10;
pub const STAGE_WELDING_DETECTION: Stage = 11;
pub const STAGE_SESSION_STOP: Stage = 12;

pub const ISO_NAMESPACE: &str = "urn:iso:15118:2:2013:MsgDef";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SessionId(pub [u8; 8]);

impl SessionId {
    pub const ZERO: SessionId = SessionId([0; 8]);

    pub fn is_zero(&self) -> bool {
        self.0 == [0; 8]
    }

    pub fn from_u64(v: u64) -> Self {
        SessionId(v.to_be_bytes())
    }

    pub fn as_u64(&self) -> u64 {
        u64::from_be_bytes(self.0)
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode_upper(self.0))
    }
}

impl FromStr for SessionId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.strip_prefix("0x").unwrap_or(s);
        if s.len() != 16 {
            return Err(format!("session id must be 16 hex digits, got {s:?}"));
        }
        let mut out = [0u8; 8];
        hex::decode_to_slice(s, &mut out).map_err(|e| format!("bad session id {s:?}: {e}"))?;
        Ok(SessionId(out))
    }
}

impl Serialize for SessionId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SessionId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AppProtocol {
    pub namespace: String,
    pub version_major: u32,
    pub version_minor: u32,
    pub schema_id: u8,
    pub priority: u8,
}

impl AppProtocol {
    pub fn iso(schema_id: u8, priority: u8) -> Self {
        Self {
            namespace: ISO_NAMESPACE.to_string(),
            version_major: 2,
            version_minor: 0,
            schema_id,
            priority,
        }
    }
}

macro_rules! text_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(concat!("unknown ", stringify!($name), " {:?}"), other)),
                }
            }
        }
    };
}

text_enum!(EnergyTransferMode {
    AcSinglePhase => "AC_single_phase",
    AcThreePhase => "AC_three_phase",
    DcExtended => "DC_extended",
});

impl EnergyTransferMode {
    pub fn branch(self) -> ChargeBranch {
        match self {
            EnergyTransferMode::AcSinglePhase | EnergyTransferMode::AcThreePhase => {
                ChargeBranch::Ac
            }
            EnergyTransferMode::DcExtended => ChargeBranch::Dc,
        }
    }
}

text_enum!(ResponseCode {
    Ok => "OK",
    FailedNoNegotiation => "FAILED_NoNegotiation",
    FailedUnknownSession => "FAILED_UnknownSession",
    FailedWrongEnergyTransferMode => "FAILED_WrongEnergyTransferMode",
    FailedServiceSelection => "FAILED_ServiceSelection",
    FailedGeneric => "FAILED",
});

text_enum!(ChargeProgress {
    Start => "Start",
    Stop => "Stop",
});

text_enum!(TerminationType {
    Terminate => "Terminate",
    Pause => "Pause",
});

text_enum!(PaymentOption {
    Contract => "Contract",
    ExternalPayment => "ExternalPayment",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChargeBranch {
    Ac,
    Dc,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MeterInfo {
    pub meter_id: String,
    /// Watt-hours.
    pub reading: u64,
    /// Simulated milliseconds.
    pub timestamp: u64,
}

macro_rules! kinds {
    ($($kind:ident),+ $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum MessageKind {
            $($kind),+
        }

        impl MessageKind {
            pub const ALL: &'static [MessageKind] = &[$(MessageKind::$kind),+];

            pub fn name(self) -> &'static str {
                match self {
                    $(MessageKind::$kind => stringify!($kind)),+
                }
            }

            pub fn from_name(name: &str) -> Option<Self> {
                match name {
                    $(stringify!($kind) => Some(MessageKind::$kind),)+
                    _ => None,
                }
            }
        }
    };
}

kinds!(
    SupportedAppProtocolReq,
    SupportedAppProtocolRes,
    SessionSetupReq,
    SessionSetupRes,
    ServiceDiscoveryReq,
    ServiceDiscoveryRes,
    PaymentServiceSelectionReq,
    PaymentServiceSelectionRes,
    AuthorizationReq,
    AuthorizationRes,
    ChargeParameterDiscoveryReq,
    ChargeParameterDiscoveryRes,
    PowerDeliveryReq,
    PowerDeliveryRes,
    ChargingStatusReq,
    ChargingStatusRes,
    CableCheckReq,
    CableCheckRes,
    PreChargeReq,
    PreChargeRes,
    CurrentDemandReq,
    CurrentDemandRes,
    WeldingDetectionReq,
    WeldingDetectionRes,
    MeteringReceiptReq,
    MeteringReceiptRes,
    SessionStopReq,
    SessionStopRes,
    CertificateInstallationReq,
    CertificateInstallationRes,
    CertificateUpdateReq,
    CertificateUpdateRes,
);

impl MessageKind {
    pub fn is_request(self) -> bool {
        self.name().ends_with("Req")
    }

    /// The other half of a Req/Res pair. Kinds are declared pairwise.
    pub fn counterpart(self) -> MessageKind {
        let i = self as usize;
        MessageKind::ALL[i ^ 1]
    }

    /// Stage of the kind, ignoring PowerDelivery progress (reported as the
    /// start stage). Certificate kinds have none.
    pub fn base_stage(self) -> Option<Stage> {
        use MessageKind::*;
        Some(match self {
            SupportedAppProtocolReq | SupportedAppProtocolRes => STAGE_SUPPORTED_APP_PROTOCOL,
            SessionSetupReq | SessionSetupRes => STAGE_SESSION_SETUP,
            ServiceDiscoveryReq | ServiceDiscoveryRes => STAGE_SERVICE_DISCOVERY,
            PaymentServiceSelectionReq | PaymentServiceSelectionRes => {
                STAGE_PAYMENT_SERVICE_SELECTION
            }
            AuthorizationReq | AuthorizationRes => STAGE_AUTHORIZATION,
            ChargeParameterDiscoveryReq | ChargeParameterDiscoveryRes => {
                STAGE_CHARGE_PARAMETER_DISCOVERY
            }
            CableCheckReq | CableCheckRes => STAGE_CABLE_CHECK,
            PreChargeReq | PreChargeRes => STAGE_PRE_CHARGE,
            PowerDeliveryReq | PowerDeliveryRes => STAGE_POWER_DELIVERY_START,
            ChargingStatusReq | ChargingStatusRes | CurrentDemandReq | CurrentDemandRes
            | MeteringReceiptReq | MeteringReceiptRes => STAGE_CHARGING_LOOP,
            WeldingDetectionReq | WeldingDetectionRes => STAGE_WELDING_DETECTION,
            SessionStopReq | SessionStopRes => STAGE_SESSION_STOP,
            CertificateInstallationReq
            | CertificateInstallationRes
            | CertificateUpdateReq
            | CertificateUpdateRes => return None,
        })
    }

    fn allowed_in(self, branch: ChargeBranch) -> bool {
        use MessageKind::*;
        match self {
            ChargingStatusReq | ChargingStatusRes => branch == ChargeBranch::Ac,
            CableCheckReq | CableCheckRes | PreChargeReq | PreChargeRes | CurrentDemandReq
            | CurrentDemandRes | WeldingDetectionReq | WeldingDetectionRes => {
                branch == ChargeBranch::Dc
            }
            _ => true,
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    SupportedAppProtocolReq {
        protocols: Vec<AppProtocol>,
    },
    SupportedAppProtocolRes {
        response_code: ResponseCode,
        schema_id: Option<u8>,
    },
    SessionSetupReq {
        evcc_id: LinkAddress,
    },
    SessionSetupRes {
        response_code: ResponseCode,
        evse_id: String,
        timestamp: u64,
    },
    ServiceDiscoveryReq,
    ServiceDiscoveryRes {
        response_code: ResponseCode,
        free_service: bool,
        energy_transfer_modes: Vec<EnergyTransferMode>,
        payment_options: Vec<PaymentOption>,
    },
    PaymentServiceSelectionReq {
        selected_payment_option: PaymentOption,
    },
    PaymentServiceSelectionRes {
        response_code: ResponseCode,
    },
    AuthorizationReq,
    AuthorizationRes {
        response_code: ResponseCode,
    },
    ChargeParameterDiscoveryReq {
        requested_mode: EnergyTransferMode,
        max_voltage: u32,
        max_current: u32,
        energy_request: u64,
        /// Number of charging-loop passes the EV intends to run.
        charging_loops: u32,
        /// Measurement accuracy in permille.
        voltage_accuracy: u32,
    },
    ChargeParameterDiscoveryRes {
        response_code: ResponseCode,
        max_voltage: u32,
        max_current: u32,
    },
    PowerDeliveryReq {
        charge_progress: ChargeProgress,
    },
    PowerDeliveryRes {
        response_code: ResponseCode,
    },
    ChargingStatusReq,
    ChargingStatusRes {
        response_code: ResponseCode,
        evse_id: String,
        meter_info: MeterInfo,
    },
    CableCheckReq,
    CableCheckRes {
        response_code: ResponseCode,
    },
    PreChargeReq {
        target_voltage: u32,
    },
    PreChargeRes {
        response_code: ResponseCode,
        present_voltage: u32,
    },
    CurrentDemandReq {
        target_voltage: u32,
        target_current: u32,
    },
    CurrentDemandRes {
        response_code: ResponseCode,
        present_voltage: u32,
        present_current: u32,
        meter_info: MeterInfo,
    },
    WeldingDetectionReq,
    WeldingDetectionRes {
        response_code: ResponseCode,
        present_voltage: u32,
    },
    MeteringReceiptReq {
        meter_info: MeterInfo,
    },
    MeteringReceiptRes {
        response_code: ResponseCode,
    },
    SessionStopReq {
        termination_type: TerminationType,
    },
    SessionStopRes {
        response_code: ResponseCode,
    },
    CertificateInstallationReq,
    CertificateInstallationRes {
        response_code: ResponseCode,
    },
    CertificateUpdateReq,
    CertificateUpdateRes {
        response_code: ResponseCode,
    },
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        use MessageKind as K;
        match self {
            Body::SupportedAppProtocolReq { .. } => K::SupportedAppProtocolReq,
            Body::SupportedAppProtocolRes { .. } => K::SupportedAppProtocolRes,
            Body::SessionSetupReq { .. } => K::SessionSetupReq,
            Body::SessionSetupRes { .. } => K::SessionSetupRes,
            Body::ServiceDiscoveryReq => K::ServiceDiscoveryReq,
            Body::ServiceDiscoveryRes { .. } => K::ServiceDiscoveryRes,
            Body::PaymentServiceSelectionReq { .. } => K::PaymentServiceSelectionReq,
            Body::PaymentServiceSelectionRes { .. } => K::PaymentServiceSelectionRes,
            Body::AuthorizationReq => K::AuthorizationReq,
            Body::AuthorizationRes { .. } => K::AuthorizationRes,
            Body::ChargeParameterDiscoveryReq { .. } => K::ChargeParameterDiscoveryReq,
            Body::ChargeParameterDiscoveryRes { .. } => K::ChargeParameterDiscoveryRes,
            Body::PowerDeliveryReq { .. } => K::PowerDeliveryReq,
            Body::PowerDeliveryRes { .. } => K::PowerDeliveryRes,
            Body::ChargingStatusReq => K::ChargingStatusReq,
            Body::ChargingStatusRes { .. } => K::ChargingStatusRes,
            Body::CableCheckReq => K::CableCheckReq,
            Body::CableCheckRes { .. } => K::CableCheckRes,
            Body::PreChargeReq { .. } => K::PreChargeReq,
            Body::PreChargeRes { .. } => K::PreChargeRes,
            Body::CurrentDemandReq { .. } => K::CurrentDemandReq,
            Body::CurrentDemandRes { .. } => K::CurrentDemandRes,
            Body::WeldingDetectionReq => K::WeldingDetectionReq,
            Body::WeldingDetectionRes { .. } => K::WeldingDetectionRes,
            Body::MeteringReceiptReq { .. } => K::MeteringReceiptReq,
            Body::MeteringReceiptRes { .. } => K::MeteringReceiptRes,
            Body::SessionStopReq { .. } => K::SessionStopReq,
            Body::SessionStopRes { .. } => K::SessionStopRes,
            Body::CertificateInstallationReq => K::CertificateInstallationReq,
            Body::CertificateInstallationRes { .. } => K::CertificateInstallationRes,
            Body::CertificateUpdateReq => K::CertificateUpdateReq,
            Body::CertificateUpdateRes { .. } => K::CertificateUpdateRes,
        }
    }

    pub fn response_code(&self) -> Option<ResponseCode> {
        match self {
            Body::SupportedAppProtocolRes { response_code, .. }
            | Body::SessionSetupRes { response_code, .. }
            | Body::ServiceDiscoveryRes { response_code, .. }
            | Body::PaymentServiceSelectionRes { response_code }
            | Body::AuthorizationRes { response_code }
            | Body::ChargeParameterDiscoveryRes { response_code, .. }
            | Body::PowerDeliveryRes { response_code }
            | Body::ChargingStatusRes { response_code, .. }
            | Body::CableCheckRes { response_code }
            | Body::PreChargeRes { response_code, .. }
            | Body::CurrentDemandRes { response_code, .. }
            | Body::WeldingDetectionRes { response_code, .. }
            | Body::MeteringReceiptRes { response_code }
            | Body::SessionStopRes { response_code }
            | Body::CertificateInstallationRes { response_code }
            | Body::CertificateUpdateRes { response_code } => Some(*response_code),
            _ => None,
        }
    }

    /// Response paired with `kind` (a request, or the response itself)
    /// carrying `code` and neutral values for the other fields.
    pub fn failure_response(kind: MessageKind, code: ResponseCode) -> Body {
        use MessageKind as K;
        let response_code = code;
        let response = if kind.is_request() {
            kind.counterpart()
        } else {
            kind
        };
        match response {
            K::SupportedAppProtocolRes => Body::SupportedAppProtocolRes {
                response_code,
                schema_id: None,
            },
            K::SessionSetupRes => Body::SessionSetupRes {
                response_code,
                evse_id: String::new(),
                timestamp: 0,
            },
            K::ServiceDiscoveryRes => Body::ServiceDiscoveryRes {
                response_code,
                free_service: false,
                energy_transfer_modes: Vec::new(),
                payment_options: Vec::new(),
            },
            K::PaymentServiceSelectionRes => Body::PaymentServiceSelectionRes { response_code },
            K::AuthorizationRes => Body::AuthorizationRes { response_code },
            K::ChargeParameterDiscoveryRes => Body::ChargeParameterDiscoveryRes {
                response_code,
                max_voltage: 0,
                max_current: 0,
            },
            K::PowerDeliveryRes => Body::PowerDeliveryRes { response_code },
            K::ChargingStatusRes => Body::ChargingStatusRes {
                response_code,
                evse_id: String::new(),
                meter_info: MeterInfo::default(),
            },
            K::CableCheckRes => Body::CableCheckRes { response_code },
            K::PreChargeRes => Body::PreChargeRes {
                response_code,
                present_voltage: 0,
            },
            K::CurrentDemandRes => Body::CurrentDemandRes {
                response_code,
                present_voltage: 0,
                present_current: 0,
                meter_info: MeterInfo::default(),
            },
            K::WeldingDetectionRes => Body::WeldingDetectionRes {
                response_code,
                present_voltage: 0,
            },
            K::MeteringReceiptRes => Body::MeteringReceiptRes { response_code },
            K::SessionStopRes => Body::SessionStopRes { response_code },
            K::CertificateInstallationRes => Body::CertificateInstallationRes { response_code },
            K::CertificateUpdateRes => Body::CertificateUpdateRes { response_code },
            other => unreachable!("{other} is not a response kind"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct V2GMessage {
    pub session_id: SessionId,
    pub body: Body,
}

impl V2GMessage {
    pub fn new(session_id: SessionId, body: Body) -> Self {
        Self { session_id, body }
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MessageError {
    #[error("unknown message kind {0:?}")]
    UnknownMessageKind(String),
    #[error("{kind}: missing field {field}")]
    MissingField { kind: String, field: String },
    #[error("{kind}: bad value for {field}: {reason}")]
    BadFieldFormat {
        kind: String,
        field: String,
        reason: String,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Stage of one body; PowerDelivery maps to start or stop per its progress.
pub fn stage_of(body: &Body) -> Option<Stage> {
    match body {
        Body::PowerDeliveryReq {
            charge_progress: ChargeProgress::Stop,
        } => Some(STAGE_POWER_DELIVERY_STOP),
        _ => body.kind().base_stage(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("sequence violation: expected stage {expected:?}, got {kind} (stage {got:?})")]
pub struct SequenceViolation {
    pub expected: Vec<Stage>,
    pub got: Option<Stage>,
    pub kind: MessageKind,
}

/// Stages that may follow `previous` on `branch`.
pub fn next_stages(previous: Option<Stage>, branch: ChargeBranch) -> Vec<Stage> {
    let dc = branch == ChargeBranch::Dc;
    match previous {
        None => vec![STAGE_SUPPORTED_APP_PROTOCOL],
        Some(STAGE_CHARGE_PARAMETER_DISCOVERY) if dc => vec![STAGE_CABLE_CHECK],
        Some(STAGE_CHARGE_PARAMETER_DISCOVERY) => vec![STAGE_POWER_DELIVERY_START],
        Some(STAGE_CABLE_CHECK) => vec![STAGE_PRE_CHARGE],
        Some(STAGE_PRE_CHARGE) => vec![STAGE_POWER_DELIVERY_START],
        Some(STAGE_POWER_DELIVERY_START) => vec![STAGE_CHARGING_LOOP],
        Some(STAGE_CHARGING_LOOP) => vec![STAGE_CHARGING_LOOP, STAGE_POWER_DELIVERY_STOP],
        Some(STAGE_POWER_DELIVERY_STOP) if dc => vec![STAGE_WELDING_DETECTION],
        Some(STAGE_POWER_DELIVERY_STOP) | Some(STAGE_WELDING_DETECTION) => vec![STAGE_SESSION_STOP],
        Some(STAGE_SESSION_STOP) => Vec::new(),
        Some(s) if s < STAGE_CHARGE_PARAMETER_DISCOVERY => vec![s + 1],
        Some(_) => Vec::new(),
    }
}

pub fn validate_transition(
    previous: Option<Stage>,
    next: &Body,
    branch: ChargeBranch,
) -> Result<(), SequenceViolation> {
    let expected = next_stages(previous, branch);
    let got = stage_of(next);
    let kind = next.kind();
    match got {
        Some(s) if expected.contains(&s) && kind.allowed_in(branch) => Ok(()),
        _ => Err(SequenceViolation {
            expected,
            got,
            kind,
        }),
    }
}

// -- document form ----------------------------------------------------------

fn leaf(name: &str, value: impl fmt::Display) -> DocNode {
    DocNode::with_text(name, value.to_string())
}

fn meter_doc(m: &MeterInfo) -> DocNode {
    DocNode::with_children(
        "meterInfo",
        vec![
            leaf("meterId", &m.meter_id),
            leaf("meterReading", m.reading),
            leaf("timestamp", m.timestamp),
        ],
    )
}

fn body_fields(body: &Body) -> Vec<DocNode> {
    let rc = |c: &ResponseCode| leaf("responseCode", c);
    match body {
        Body::SupportedAppProtocolReq { protocols } => protocols
            .iter()
            .map(|p| {
                DocNode::with_children(
                    "appProtocol",
                    vec![
                        leaf("protocolNamespace", &p.namespace),
                        leaf("versionNumberMajor", p.version_major),
                        leaf("versionNumberMinor", p.version_minor),
                        leaf("schemaId", p.schema_id),
                        leaf("priority", p.priority),
                    ],
                )
            })
            .collect(),
        Body::SupportedAppProtocolRes {
            response_code,
            schema_id,
        } => {
            let mut v = vec![rc(response_code)];
            if let Some(id) = schema_id {
                v.push(leaf("schemaId", id));
            }
            v
        }
        Body::SessionSetupReq { evcc_id } => vec![leaf("evccId", hex::encode_upper(evcc_id.0))],
        Body::SessionSetupRes {
            response_code,
            evse_id,
            timestamp,
        } => vec![
            rc(response_code),
            leaf("evseId", evse_id),
            leaf("evseTimestamp", timestamp),
        ],
        Body::ServiceDiscoveryRes {
            response_code,
            free_service,
            energy_transfer_modes,
            payment_options,
        } => {
            let mut v = vec![rc(response_code)];
            v.push(DocNode::with_children(
                "paymentOptionList",
                payment_options
                    .iter()
                    .map(|p| leaf("paymentOption", p))
                    .collect(),
            ));
            v.push(DocNode::with_children(
                "chargeService",
                vec![
                    leaf("freeService", free_service),
                    DocNode::with_children(
                        "supportedEnergyTransferMode",
                        energy_transfer_modes
                            .iter()
                            .map(|m| leaf("energyTransferMode", m))
                            .collect(),
                    ),
                ],
            ));
            v
        }
        Body::PaymentServiceSelectionReq {
            selected_payment_option,
        } => {
            vec![leaf("selectedPaymentOption", selected_payment_option)]
        }
        Body::ChargeParameterDiscoveryReq {
            requested_mode,
            max_voltage,
            max_current,
            energy_request,
            charging_loops,
            voltage_accuracy,
        } => vec![
            leaf("requestedEnergyTransferMode", requested_mode),
            leaf("evMaximumVoltage", max_voltage),
            leaf("evMaximumCurrent", max_current),
            leaf("evEnergyRequest", energy_request),
            leaf("chargingLoops", charging_loops),
            leaf("voltageAccuracy", voltage_accuracy),
        ],
        Body::ChargeParameterDiscoveryRes {
            response_code,
            max_voltage,
            max_current,
        } => vec![
            rc(response_code),
            leaf("evseMaximumVoltage", max_voltage),
            leaf("evseMaximumCurrent", max_current),
        ],
        Body::PowerDeliveryReq { charge_progress } => vec![leaf("chargeProgress", charge_progress)],
        Body::ChargingStatusRes {
            response_code,
            evse_id,
            meter_info,
        } => vec![
            rc(response_code),
            leaf("evseId", evse_id),
            meter_doc(meter_info),
        ],
        Body::PreChargeReq { target_voltage } => vec![leaf("evTargetVoltage", target_voltage)],
        Body::PreChargeRes {
            response_code,
            present_voltage,
        }
        | Body::WeldingDetectionRes {
            response_code,
            present_voltage,
        } => vec![
            rc(response_code),
            leaf("evsePresentVoltage", present_voltage),
        ],
        Body::CurrentDemandReq {
            target_voltage,
            target_current,
        } => vec![
            leaf("evTargetVoltage", target_voltage),
            leaf("evTargetCurrent", target_current),
        ],
        Body::CurrentDemandRes {
            response_code,
            present_voltage,
            present_current,
            meter_info,
        } => vec![
            rc(response_code),
            leaf("evsePresentVoltage", present_voltage),
            leaf("evsePresentCurrent", present_current),
            meter_doc(meter_info),
        ],
        Body::MeteringReceiptReq { meter_info } => vec![meter_doc(meter_info)],
        Body::SessionStopReq { termination_type } => {
            vec![leaf("chargingSession", termination_type)]
        }
        Body::PaymentServiceSelectionRes { response_code }
        | Body::AuthorizationRes { response_code }
        | Body::PowerDeliveryRes { response_code }
        | Body::CableCheckRes { response_code }
        | Body::MeteringReceiptRes { response_code }
        | Body::SessionStopRes { response_code }
        | Body::CertificateInstallationRes { response_code }
        | Body::CertificateUpdateRes { response_code } => vec![rc(response_code)],
        Body::ServiceDiscoveryReq
        | Body::AuthorizationReq
        | Body::ChargingStatusReq
        | Body::CableCheckReq
        | Body::WeldingDetectionReq
        | Body::CertificateInstallationReq
        | Body::CertificateUpdateReq => Vec::new(),
    }
}

pub fn to_doc(msg: &V2GMessage) -> DocNode {
    let header = DocNode::with_children("header", vec![leaf("sessionId", msg.session_id)]);
    let mut body_node = DocNode::new(msg.kind().name());
    body_node.children = body_fields(&msg.body);
    DocNode::with_children(
        "v2gMessage",
        vec![header, DocNode::with_children("body", vec![body_node])],
    )
}

/// Reader over one element's children with kind-tagged errors. Every child
/// must be consumed in document order.
struct Fields<'a> {
    kind: &'a str,
    children: &'a [DocNode],
    pos: usize,
}

impl<'a> Fields<'a> {
    fn new(kind: &'a str, node: &'a DocNode) -> Result<Self, MessageError> {
        let f = Fields {
            kind,
            children: &node.children,
            pos: 0,
        };
        if node.text.as_deref().is_some_and(|t| !t.is_empty()) || !node.attributes.is_empty() {
            return Err(f.bad(&node.name, "unexpected content"));
        }
        Ok(f)
    }

    fn missing(&self, field: &str) -> MessageError {
        MessageError::MissingField {
            kind: self.kind.to_string(),
            field: field.to_string(),
        }
    }

    fn bad(&self, field: &str, reason: impl Into<String>) -> MessageError {
        MessageError::BadFieldFormat {
            kind: self.kind.to_string(),
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    fn peek_is(&self, name: &str) -> bool {
        self.children.get(self.pos).is_some_and(|c| c.name == name)
    }

    fn node(&mut self, name: &str) -> Result<&'a DocNode, MessageError> {
        if !self.peek_is(name) {
            return Err(self.missing(name));
        }
        let n = &self.children[self.pos];
        self.pos += 1;
        Ok(n)
    }

    fn text(&mut self, name: &str) -> Result<&'a str, MessageError> {
        let n = self.node(name)?;
        if !n.children.is_empty() || !n.attributes.is_empty() {
            return Err(self.bad(name, "expected a text leaf"));
        }
        Ok(n.text.as_deref().unwrap_or(""))
    }

    fn string(&mut self, name: &str) -> Result<String, MessageError> {
        self.text(name).map(str::to_string)
    }

    fn number<T: FromStr>(&mut self, name: &str) -> Result<T, MessageError> {
        let t = self.text(name)?;
        parse_decimal(t)
            .ok_or_else(|| self.bad(name, format!("expected a decimal number, got {t:?}")))
    }

    fn parsed<T: FromStr<Err = String>>(&mut self, name: &str) -> Result<T, MessageError> {
        let t = self.text(name)?;
        t.parse().map_err(|e: String| self.bad(name, e))
    }

    fn boolean(&mut self, name: &str) -> Result<bool, MessageError> {
        match self.text(name)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(self.bad(name, format!("expected true or false, got {other:?}"))),
        }
    }

    fn finish(self) -> Result<(), MessageError> {
        match self.children.get(self.pos) {
            None => Ok(()),
            Some(extra) => Err(self.bad(&extra.name, "unexpected element")),
        }
    }
}

fn parse_decimal<T: FromStr>(t: &str) -> Option<T> {
    let canonical =
        !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()) && (t == "0" || !t.starts_with('0'));
    canonical.then(|| t.parse().ok()).flatten()
}

fn meter_from(f: &mut Fields<'_>) -> Result<MeterInfo, MessageError> {
    let node = f.node("meterInfo")?;
    let mut m = Fields::new(f.kind, node)?;
    let info = MeterInfo {
        meter_id: m.string("meterId")?,
        reading: m.number("meterReading")?,
        timestamp: m.number("timestamp")?,
    };
    m.finish()?;
    Ok(info)
}

fn body_from(kind: MessageKind, node: &DocNode) -> Result<Body, MessageError> {
    use MessageKind as K;
    let mut f = Fields::new(kind.name(), node)?;
    let body = match kind {
        K::SupportedAppProtocolReq => {
            let mut protocols = Vec::new();
            while f.peek_is("appProtocol") {
                let n = f.node("appProtocol")?;
                let mut p = Fields::new(kind.name(), n)?;
                protocols.push(AppProtocol {
                    namespace: p.string("protocolNamespace")?,
                    version_major: p.number("versionNumberMajor")?,
                    version_minor: p.number("versionNumberMinor")?,
                    schema_id: p.number("schemaId")?,
                    priority: p.number("priority")?,
                });
                p.finish()?;
            }
            Body::SupportedAppProtocolReq { protocols }
        }
        K::SupportedAppProtocolRes => {
            let response_code = f.parsed("responseCode")?;
            let schema_id = if f.peek_is("schemaId") {
                Some(f.number("schemaId")?)
            } else {
                None
            };
            Body::SupportedAppProtocolRes {
                response_code,
                schema_id,
            }
        }
        K::SessionSetupReq => {
            let t = f.text("evccId")?;
            let mut id = [0u8; 6];
            if t.len() != 12
                || t.bytes().any(|b| b.is_ascii_lowercase())
                || hex::decode_to_slice(t, &mut id).is_err()
            {
                return Err(f.bad(
                    "evccId",
                    format!("expected 12 uppercase hex digits, got {t:?}"),
                ));
            }
            Body::SessionSetupReq {
                evcc_id: LinkAddress(id),
            }
        }
        K::SessionSetupRes => Body::SessionSetupRes {
            response_code: f.parsed("responseCode")?,
            evse_id: f.string("evseId")?,
            timestamp: f.number("evseTimestamp")?,
        },
        K::ServiceDiscoveryReq => Body::ServiceDiscoveryReq,
        K::ServiceDiscoveryRes => {
            let response_code = f.parsed("responseCode")?;
            let mut payment_options = Vec::new();
            let list = f.node("paymentOptionList")?;
            let mut pl = Fields::new(kind.name(), list)?;
            while pl.peek_is("paymentOption") {
                payment_options.push(pl.parsed("paymentOption")?);
            }
            pl.finish()?;
            let svc = f.node("chargeService")?;
            let mut s = Fields::new(kind.name(), svc)?;
            let free_service = s.boolean("freeService")?;
            let modes = s.node("supportedEnergyTransferMode")?;
            let mut ml = Fields::new(kind.name(), modes)?;
            let mut energy_transfer_modes = Vec::new();
            while ml.peek_is("energyTransferMode") {
                energy_transfer_modes.push(ml.parsed("energyTransferMode")?);
            }
            ml.finish()?;
            s.finish()?;
            Body::ServiceDiscoveryRes {
                response_code,
                free_service,
                energy_transfer_modes,
                payment_options,
            }
        }
        K::PaymentServiceSelectionReq => Body::PaymentServiceSelectionReq {
            selected_payment_option: f.parsed("selectedPaymentOption")?,
        },
        K::PaymentServiceSelectionRes => Body::PaymentServiceSelectionRes {
            response_code: f.parsed("responseCode")?,
        },
        K::AuthorizationReq => Body::AuthorizationReq,
        K::AuthorizationRes => Body::AuthorizationRes {
            response_code: f.parsed("responseCode")?,
        },
        K::ChargeParameterDiscoveryReq => Body::ChargeParameterDiscoveryReq {
            requested_mode: f.parsed("requestedEnergyTransferMode")?,
            max_voltage: f.number("evMaximumVoltage")?,
            max_current: f.number("evMaximumCurrent")?,
            energy_request: f.number("evEnergyRequest")?,
            charging_loops: f.number("chargingLoops")?,
            voltage_accuracy: f.number("voltageAccuracy")?,
        },
        K::ChargeParameterDiscoveryRes => Body::ChargeParameterDiscoveryRes {
            response_code: f.parsed("responseCode")?,
            max_voltage: f.number("evseMaximumVoltage")?,
            max_current: f.number("evseMaximumCurrent")?,
        },
        K::PowerDeliveryReq => Body::PowerDeliveryReq {
            charge_progress: f.parsed("chargeProgress")?,
        },
        K::PowerDeliveryRes => Body::PowerDeliveryRes {
            response_code: f.parsed("responseCode")?,
        },
        K::ChargingStatusReq => Body::ChargingStatusReq,
        K::ChargingStatusRes => Body::ChargingStatusRes {
            response_code: f.parsed("responseCode")?,
            evse_id: f.string("evseId")?,
            meter_info: meter_from(&mut f)?,
        },
        K::CableCheckReq => Body::CableCheckReq,
        K::CableCheckRes => Body::CableCheckRes {
            response_code: f.parsed("responseCode")?,
        },
        K::PreChargeReq => Body::PreChargeReq {
            target_voltage: f.number("evTargetVoltage")?,
        },
        K::PreChargeRes => Body::PreChargeRes {
            response_code: f.parsed("responseCode")?,
            present_voltage: f.number("evsePresentVoltage")?,
        },
        K::CurrentDemandReq => Body::CurrentDemandReq {
            target_voltage: f.number("evTargetVoltage")?,
            target_current: f.number("evTargetCurrent")?,
        },
        K::CurrentDemandRes => Body::CurrentDemandRes {
            response_code: f.parsed("responseCode")?,
            present_voltage: f.number("evsePresentVoltage")?,
            present_current: f.number("evsePresentCurrent")?,
            meter_info: meter_from(&mut f)?,
        },
        K::WeldingDetectionReq => Body::WeldingDetectionReq,
        K::WeldingDetectionRes => Body::WeldingDetectionRes {
            response_code: f.parsed("responseCode")?,
            present_voltage: f.number("evsePresentVoltage")?,
        },
        K::MeteringReceiptReq => Body::MeteringReceiptReq {
            meter_info: meter_from(&mut f)?,
        },
        K::MeteringReceiptRes => Body::MeteringReceiptRes {
            response_code: f.parsed("responseCode")?,
        },
        K::SessionStopReq => Body::SessionStopReq {
            termination_type: f.parsed("chargingSession")?,
        },
        K::SessionStopRes => Body::SessionStopRes {
            response_code: f.parsed("responseCode")?,
        },
        K::CertificateInstallationReq => Body::CertificateInstallationReq,
        K::CertificateInstallationRes => Body::CertificateInstallationRes {
            response_code: f.parsed("responseCode")?,
        },
        K::CertificateUpdateReq => Body::CertificateUpdateReq,
        K::CertificateUpdateRes => Body::CertificateUpdateRes {
            response_code: f.parsed("responseCode")?,
        },
    };
    f.finish()?;
    Ok(body)
}

pub fn from_doc(node: &DocNode) -> Result<V2GMessage, MessageError> {
    if node.name != "v2gMessage" {
        return Err(MessageError::UnknownMessageKind(node.name.clone()));
    }
    let mut root = Fields::new("v2gMessage", node)?;
    let header = root.node("header")?;
    let mut h = Fields::new("header", header)?;
    let sid = h.parsed::<SessionId>("sessionId")?;
    h.finish()?;
    let body_node = root.node("body")?;
    root.finish()?;
    let [inner] = body_node.children.as_slice() else {
        return Err(MessageError::BadFieldFormat {
            kind: "v2gMessage".into(),
            field: "body".into(),
            reason: format!(
                "expected exactly one message element, found {}",
                body_node.children.len()
            ),
        });
    };
    let kind = MessageKind::from_name(&inner.name)
        .ok_or_else(|| MessageError::UnknownMessageKind(inner.name.clone()))?;
    Ok(V2GMessage {
        session_id: sid,
        body: body_from(kind, inner)?,
    })
}

/// EXI bytes of a message.
pub fn encode_message(msg: &V2GMessage) -> Vec<u8> {
    encode_exi(&to_doc(msg)).bytes
}

pub fn decode_message(bytes: &[u8]) -> Result<V2GMessage, MessageError> {
    from_doc(&decode_exi_bytes(bytes)?)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::codec::{parse_xml_text, to_xml_pretty, to_xml_text};
    use proptest::prelude::*;

    pub(crate) fn sample(kind: MessageKind) -> V2GMessage {
        let sid = SessionId::from_u64(0x0011_2233_4455_6677);
        let meter = MeterInfo {
            meter_id: "METER-1".into(),
            reading: 1250,
            timestamp: 4200,
        };
        use MessageKind as K;
        let body = match kind {
            K::SupportedAppProtocolReq => Body::SupportedAppProtocolReq {
                protocols: vec![AppProtocol::iso(1, 1)],
            },
            K::SupportedAppProtocolRes => Body::SupportedAppProtocolRes {
                response_code: ResponseCode::Ok,
                schema_id: Some(1),
            },
            K::SessionSetupReq => Body::SessionSetupReq {
                evcc_id: LinkAddress([0x02, 0x00, 0x00, 0xAB, 0xCD, 0xEF]),
            },
            K::SessionSetupRes => Body::SessionSetupRes {
                response_code: ResponseCode::Ok,
                evse_id: "SE-1".into(),
                timestamp: 12,
            },
            K::ServiceDiscoveryReq => Body::ServiceDiscoveryReq,
            K::ServiceDiscoveryRes => Body::ServiceDiscoveryRes {
                response_code: ResponseCode::Ok,
                free_service: true,
                energy_transfer_modes: vec![
                    EnergyTransferMode::AcSinglePhase,
                    EnergyTransferMode::AcThreePhase,
                ],
                payment_options: vec![PaymentOption::ExternalPayment],
            },
            K::PaymentServiceSelectionReq => Body::PaymentServiceSelectionReq {
                selected_payment_option: PaymentOption::ExternalPayment,
            },
            K::ChargeParameterDiscoveryReq => Body::ChargeParameterDiscoveryReq {
                requested_mode: EnergyTransferMode::AcThreePhase,
                max_voltage: 400,
                max_current: 32,
                energy_request: 5000,
                charging_loops: 4,
                voltage_accuracy: 50,
            },
            K::ChargeParameterDiscoveryRes => Body::ChargeParameterDiscoveryRes {
                response_code: ResponseCode::Ok,
                max_voltage: 400,
                max_current: 32,
            },
            K::PowerDeliveryReq => Body::PowerDeliveryReq {
                charge_progress: ChargeProgress::Start,
            },
            K::ChargingStatusRes => Body::ChargingStatusRes {
                response_code: ResponseCode::Ok,
                evse_id: "SE-1".into(),
                meter_info: meter.clone(),
            },
            K::PreChargeReq => Body::PreChargeReq {
                target_voltage: 400,
            },
            K::PreChargeRes => Body::PreChargeRes {
                response_code: ResponseCode::Ok,
                present_voltage: 398,
            },
            K::CurrentDemandReq => Body::CurrentDemandReq {
                target_voltage: 400,
                target_current: 30,
            },
            K::CurrentDemandRes => Body::CurrentDemandRes {
                response_code: ResponseCode::Ok,
                present_voltage: 399,
                present_current: 30,
                meter_info: meter.clone(),
            },
            K::WeldingDetectionRes => Body::WeldingDetectionRes {
                response_code: ResponseCode::Ok,
                present_voltage: 0,
            },
            K::MeteringReceiptReq => Body::MeteringReceiptReq { meter_info: meter },
            K::SessionStopReq => Body::SessionStopReq {
                termination_type: TerminationType::Terminate,
            },
            // the remaining requests carry no fields
            k if k.is_request() => body_from(k, &DocNode::new(k.name())).unwrap(),
            k => Body::failure_response(k, ResponseCode::Ok),
        };
        let session_id = if matches!(
            kind,
            K::SupportedAppProtocolReq | K::SupportedAppProtocolRes
        ) {
            SessionId::ZERO
        } else {
            sid
        };
        V2GMessage::new(session_id, body)
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[ -~]{0,12}"
    }

    fn arb_meter() -> impl Strategy<Value = MeterInfo> {
        (arb_text(), any::<u64>(), any::<u64>()).prop_map(|(meter_id, reading, timestamp)| {
            MeterInfo {
                meter_id,
                reading,
                timestamp,
            }
        })
    }

    fn arb_enum<T: Copy + fmt::Debug + 'static>(all: &'static [T]) -> impl Strategy<Value = T> {
        proptest::sample::select(all)
    }

    fn arb_protocol() -> impl Strategy<Value = AppProtocol> {
        (
            arb_text(),
            any::<u32>(),
            any::<u32>(),
            any::<u8>(),
            1u8..=20,
        )
            .prop_map(|(namespace, a, b, id, p)| AppProtocol {
                namespace,
                version_major: a,
                version_minor: b,
                schema_id: id,
                priority: p,
            })
    }

    pub(crate) fn arb_body() -> impl Strategy<Value = Body> {
        let rc = || arb_enum(ResponseCode::ALL);
        prop_oneof![
            proptest::collection::vec(arb_protocol(), 0..4)
                .prop_map(|protocols| Body::SupportedAppProtocolReq { protocols }),
            (rc(), proptest::option::of(any::<u8>())).prop_map(|(response_code, schema_id)| {
                Body::SupportedAppProtocolRes {
                    response_code,
                    schema_id,
                }
            }),
            any::<[u8; 6]>().prop_map(|b| Body::SessionSetupReq {
                evcc_id: LinkAddress(b)
            }),
            (rc(), arb_text(), any::<u64>()).prop_map(|(response_code, evse_id, timestamp)| {
                Body::SessionSetupRes {
                    response_code,
                    evse_id,
                    timestamp,
                }
            }),
            Just(Body::ServiceDiscoveryReq),
            (
                rc(),
                any::<bool>(),
                proptest::collection::vec(arb_enum(EnergyTransferMode::ALL), 0..4),
                proptest::collection::vec(arb_enum(PaymentOption::ALL), 0..3)
            )
                .prop_map(
                    |(response_code, free_service, energy_transfer_modes, payment_options)| {
                        Body::ServiceDiscoveryRes {
                            response_code,
                            free_service,
                            energy_transfer_modes,
                            payment_options,
                        }
                    }
                ),
            arb_enum(PaymentOption::ALL).prop_map(|p| Body::PaymentServiceSelectionReq {
                selected_payment_option: p
            }),
            rc().prop_map(|response_code| Body::PaymentServiceSelectionRes { response_code }),
            Just(Body::AuthorizationReq),
            rc().prop_map(|response_code| Body::AuthorizationRes { response_code }),
            (
                arb_enum(EnergyTransferMode::ALL),
                any::<u32>(),
                any::<u32>(),
                any::<u64>(),
                any::<u32>(),
                any::<u32>()
            )
                .prop_map(|(m, v, c, e, l, a)| Body::ChargeParameterDiscoveryReq {
                    requested_mode: m,
                    max_voltage: v,
                    max_current: c,
                    energy_request: e,
                    charging_loops: l,
                    voltage_accuracy: a,
                }),
            (rc(), any::<u32>(), any::<u32>()).prop_map(
                |(response_code, max_voltage, max_current)| {
                    Body::ChargeParameterDiscoveryRes {
                        response_code,
                        max_voltage,
                        max_current,
                    }
                }
            ),
            arb_enum(ChargeProgress::ALL)
                .prop_map(|charge_progress| Body::PowerDeliveryReq { charge_progress }),
            rc().prop_map(|response_code| Body::PowerDeliveryRes { response_code }),
            Just(Body::ChargingStatusReq),
            (rc(), arb_text(), arb_meter()).prop_map(|(response_code, evse_id, meter_info)| {
                Body::ChargingStatusRes {
                    response_code,
                    evse_id,
                    meter_info,
                }
            }),
            Just(Body::CableCheckReq),
            rc().prop_map(|response_code| Body::CableCheckRes { response_code }),
            any::<u32>().prop_map(|target_voltage| Body::PreChargeReq { target_voltage }),
            (rc(), any::<u32>()).prop_map(|(response_code, present_voltage)| Body::PreChargeRes {
                response_code,
                present_voltage
            }),
            (any::<u32>(), any::<u32>()).prop_map(|(target_voltage, target_current)| {
                Body::CurrentDemandReq {
                    target_voltage,
                    target_current,
                }
            }),
            (rc(), any::<u32>(), any::<u32>(), arb_meter()).prop_map(
                |(response_code, v, c, meter_info)| {
                    Body::CurrentDemandRes {
                        response_code,
                        present_voltage: v,
                        present_current: c,
                        meter_info,
                    }
                }
            ),
            Just(Body::WeldingDetectionReq),
            (rc(), any::<u32>()).prop_map(|(response_code, present_voltage)| {
                Body::WeldingDetectionRes {
                    response_code,
                    present_voltage,
                }
            }),
            arb_meter().prop_map(|meter_info| Body::MeteringReceiptReq { meter_info }),
            rc().prop_map(|response_code| Body::MeteringReceiptRes { response_code }),
            arb_enum(TerminationType::ALL)
                .prop_map(|termination_type| Body::SessionStopReq { termination_type }),
            rc().prop_map(|response_code| Body::SessionStopRes { response_code }),
            Just(Body::CertificateInstallationReq),
            rc().prop_map(|response_code| Body::CertificateInstallationRes { response_code }),
            Just(Body::CertificateUpdateReq),
            rc().prop_map(|response_code| Body::CertificateUpdateRes { response_code }),
        ]
    }

    pub(crate) fn arb_message() -> impl Strategy<Value = V2GMessage> {
        (any::<[u8; 8]>(), arb_body()).prop_map(|(sid, body)| V2GMessage::new(SessionId(sid), body))
    }

    proptest! {
        #[test]
        fn doc_round_trip(m in arb_message()) {
            prop_assert_eq!(from_doc(&to_doc(&m)).unwrap(), m.clone());
            prop_assert_eq!(decode_message(&encode_message(&m)).unwrap(), m.clone());
            let xml = to_xml_text(&to_doc(&m));
            prop_assert_eq!(from_doc(&parse_xml_text(&xml).unwrap()).unwrap(), m);
        }
    }

    #[test]
    fn kinds_pair_up() {
        for &k in MessageKind::ALL {
            assert_ne!(k.is_request(), k.counterpart().is_request());
            assert_eq!(k.counterpart().counterpart(), k);
            assert_eq!(
                k.name().trim_end_matches("Req").trim_end_matches("Res"),
                k.counterpart()
                    .name()
                    .trim_end_matches("Req")
                    .trim_end_matches("Res")
            );
            assert_eq!(sample(k).kind(), k);
        }
    }

    #[test]
    fn version_zero_renders_as_zeros() {
        let m = V2GMessage::new(
            SessionId::ZERO,
            Body::SupportedAppProtocolReq {
                protocols: vec![AppProtocol {
                    version_major: 0,
                    version_minor: 0,
                    ..AppProtocol::iso(1, 1)
                }],
            },
        );
        let doc = to_doc(&m);
        let p = doc
            .child("body")
            .unwrap()
            .child("SupportedAppProtocolReq")
            .unwrap()
            .child("appProtocol")
            .unwrap();
        assert_eq!(p.child("versionNumberMajor").unwrap().text(), Some("0"));
        assert_eq!(p.child("versionNumberMinor").unwrap().text(), Some("0"));
        assert_eq!(
            doc.child("header")
                .unwrap()
                .child("sessionId")
                .unwrap()
                .text(),
            Some("0000000000000000")
        );
    }

    #[test]
    fn from_doc_errors() {
        assert_eq!(
            from_doc(&DocNode::new("UnknownThing")),
            Err(MessageError::UnknownMessageKind("UnknownThing".into()))
        );
        let mut doc = to_doc(&sample(MessageKind::AuthorizationReq));
        doc.children[1].children[0].name = "Bogus".into();
        assert_eq!(
            from_doc(&doc),
            Err(MessageError::UnknownMessageKind("Bogus".into()))
        );

        let mut doc = to_doc(&sample(MessageKind::PreChargeReq));
        doc.children[1].children[0].children.clear();
        assert!(
            matches!(from_doc(&doc), Err(MessageError::MissingField { field, .. }) if field == "evTargetVoltage")
        );

        let mut doc = to_doc(&sample(MessageKind::PreChargeReq));
        doc.children[1].children[0].children[0].text = Some("04".into());
        assert!(matches!(
            from_doc(&doc),
            Err(MessageError::BadFieldFormat { .. })
        ));

        let mut doc = to_doc(&sample(MessageKind::AuthorizationReq));
        doc.children[0].children[0].text = Some("xyz".into());
        assert!(
            matches!(from_doc(&doc), Err(MessageError::BadFieldFormat { field, .. }) if field == "sessionId")
        );
    }

    #[test]
    fn stage_order() {
        let st = |k| stage_of(&sample(k).body).unwrap();
        assert_eq!(st(MessageKind::SessionSetupReq), 1);
        assert_eq!(st(MessageKind::ServiceDiscoveryReq), 2);
        let staged: Vec<Stage> = MessageKind::ALL
            .iter()
            .filter_map(|&k| stage_of(&sample(k).body))
            .collect();
        assert_eq!(
            *staged.iter().min().unwrap(),
            st(MessageKind::SupportedAppProtocolReq)
        );
        assert_eq!(
            *staged.iter().max().unwrap(),
            st(MessageKind::SessionStopReq)
        );
        assert_eq!(
            stage_of(&Body::PowerDeliveryReq {
                charge_progress: ChargeProgress::Stop
            }),
            Some(STAGE_POWER_DELIVERY_STOP)
        );
        assert_eq!(stage_of(&Body::CertificateInstallationReq), None);
    }

    #[test]
    fn transitions() {
        let pd = |p| Body::PowerDeliveryReq { charge_progress: p };
        assert!(validate_transition(Some(5), &pd(ChargeProgress::Start), ChargeBranch::Ac).is_ok());
        let err =
            validate_transition(Some(1), &pd(ChargeProgress::Start), ChargeBranch::Ac).unwrap_err();
        assert_eq!(err.expected, vec![2]);
        assert_eq!(err.got, Some(8));

        let mut prev = Some(STAGE_POWER_DELIVERY_START);
        for _ in 0..3 {
            validate_transition(prev, &Body::ChargingStatusReq, ChargeBranch::Ac).unwrap();
            prev = Some(STAGE_CHARGING_LOOP);
        }
        validate_transition(prev, &pd(ChargeProgress::Stop), ChargeBranch::Ac).unwrap();

        assert!(validate_transition(Some(8), &Body::ChargingStatusReq, ChargeBranch::Dc).is_err());
        assert!(validate_transition(
            Some(9),
            &sample(MessageKind::MeteringReceiptReq).body,
            ChargeBranch::Dc
        )
        .is_ok());
        assert!(validate_transition(Some(5), &Body::CableCheckReq, ChargeBranch::Ac).is_err());
        assert!(
            validate_transition(Some(10), &Body::WeldingDetectionReq, ChargeBranch::Dc).is_ok()
        );
        assert!(validate_transition(
            Some(12),
            &sample(MessageKind::SessionStopReq).body,
            ChargeBranch::Ac
        )
        .is_err());
        assert!(validate_transition(None, &Body::CertificateUpdateReq, ChargeBranch::Ac).is_err());
    }

    /// Walks every branch along its only legal path.
    #[test]
    fn full_paths() {
        let path = |branch| {
            let mut prev = None;
            let mut seen = vec![];
            while let Some(&next) = next_stages(prev, branch).last() {
                seen.push(next);
                prev = Some(next);
            }
            seen
        };
        assert_eq!(path(ChargeBranch::Ac), vec![0, 1, 2, 3, 4, 5, 8, 9, 10, 12]);
        assert_eq!(
            path(ChargeBranch::Dc),
            vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]
        );
    }

    #[test]
    fn golden_documents() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/messages");
        for &k in MessageKind::ALL {
            let text = to_xml_pretty(&to_doc(&sample(k)));
            let path = dir.join(format!("{}.xml", k.name()));
            if std::env::var_os("V2GEMU_BLESS").is_some() {
                std::fs::create_dir_all(&dir).unwrap();
                std::fs::write(&path, format!("{text}\n")).unwrap();
            }
            let golden = std::fs::read_to_string(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(golden.trim_end(), text, "{}", k.name());
        }
    }
}
