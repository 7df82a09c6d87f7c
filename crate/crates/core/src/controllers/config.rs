//! EV and SE configuration and their key=value property files.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::messages::{AppProtocol, EnergyTransferMode, SessionId, TerminationType};
use crate::netsim::{LinkAddress, SimTime, MILLIS, SECONDS};
use crate::wire::SDP_SERVER_PORT;

pub const DEFAULT_V2G_PORT: u16 = 15200;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown property key {key:?}")]
    UnknownPropertyKey { key: String, line: usize },
    #[error("line {line}: {key}={value:?}: {reason}")]
    ConstraintViolation {
        key: String,
        value: String,
        reason: String,
        line: usize,
    },
    #[error("line {line}: {reason}")]
    Syntax { reason: String, line: usize },
}

/// One `key=value` entry with its 1-based source line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Property {
    pub key: String,
    pub value: String,
    pub line: usize,
}

impl Property {
    pub fn new(key: &str, value: &str, line: usize) -> Self {
        Self {
            key: key.to_string(),
            value: value.to_string(),
            line,
        }
    }

    pub fn violation(&self, reason: impl Into<String>) -> ConfigError {
        ConfigError::ConstraintViolation {
            key: self.key.clone(),
            value: self.value.clone(),
            reason: reason.into(),
            line: self.line,
        }
    }

    pub fn boolean(&self) -> Result<bool, ConfigError> {
        match self.value.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(self.violation("boolean expected (true or false)")),
        }
    }

    pub fn number<T: std::str::FromStr>(&self) -> Result<T, ConfigError> {
        self.value
            .parse()
            .map_err(|_| self.violation("number expected"))
    }

    pub fn mode(&self, text: &str) -> Result<EnergyTransferMode, ConfigError> {
        text.trim().parse().map_err(|_| {
            self.violation("expected one of AC_single_phase, AC_three_phase, DC_extended")
        })
    }
}

/// Splits a property file into entries. Blank lines and lines starting
/// with `#` are skipped; duplicate keys are rejected.
pub fn parse_properties(text: &str) -> Result<Vec<Property>, ConfigError> {
    let mut out: Vec<Property> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (k, v) = trimmed.split_once('=').ok_or_else(|| ConfigError::Syntax {
            reason: format!("expected key=value, got {trimmed:?}"),
            line,
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                reason: "empty key".into(),
                line,
            });
        }
        if out.iter().any(|p| p.key == key) {
            return Err(ConfigError::Syntax {
                reason: format!("duplicate key {key:?}"),
                line,
            });
        }
        out.push(Property::new(key, v.trim(), line));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvConfig {
    /// Measurement accuracy as a fraction in (0, 1].
    pub voltage_accuracy: f64,
    pub tls: bool,
    /// Requested session id; absent means "no session yet".
    pub session_id: Option<SessionId>,
    pub network_interface: String,
    pub energy_transfer_mode_requested: EnergyTransferMode,
    /// Defaults to the host's link address.
    pub evcc_id: Option<LinkAddress>,
    pub charging_loop_iterations: u32,
    pub energy_request: u64,
    pub max_voltage: u32,
    pub max_current: u32,
    pub protocols: Vec<AppProtocol>,
    pub termination: TerminationType,
    /// Path of the trust anchor file; resolved by the caller.
    pub tls_anchor: Option<String>,
    /// Port the SDP request is sent to.
    pub sdp_port: u16,
    pub sdp_interval: SimTime,
    pub sdp_attempts: u32,
    pub response_timeout: SimTime,
}

impl Default for EvConfig {
    fn default() -> Self {
        Self {
            voltage_accuracy: 0.05,
            tls: false,
            session_id: None,
            network_interface: "eth0".into(),
            energy_transfer_mode_requested: EnergyTransferMode::AcThreePhase,
            evcc_id: None,
            charging_loop_iterations: 3,
            energy_request: 6000,
            max_voltage: 400,
            max_current: 32,
            protocols: vec![AppProtocol::iso(1, 1)],
            termination: TerminationType::Terminate,
            tls_anchor: None,
            sdp_port: SDP_SERVER_PORT,
            sdp_interval: 250 * MILLIS,
            sdp_attempts: 10,
            response_timeout: 2 * SECONDS,
        }
    }
}

fn parse_version(p: &Property) -> Result<(u32, u32), ConfigError> {
    let (a, b) = p
        .value
        .split_once('.')
        .ok_or_else(|| p.violation("expected MAJOR.MINOR"))?;
    match (a.parse(), b.parse()) {
        (Ok(a), Ok(b)) => Ok((a, b)),
        _ => Err(p.violation("expected MAJOR.MINOR")),
    }
}

impl EvConfig {
    pub const KEYS: &'static [&'static str] = &[
        "voltage.accuracy",
        "tls",
        "session.id",
        "network.interface",
        "energy.transfermode.requested",
        "evcc.id",
        "charging.loop.iterations",
        "energy.request",
        "max.voltage",
        "max.current",
        "protocol.version",
        "session.termination",
        "tls.anchor",
        "sdp.port",
    ];

    pub fn from_properties(props: &[Property]) -> Result<Self, ConfigError> {
        let mut c = EvConfig::default();
        for p in props {
            match p.key.as_str() {
                "voltage.accuracy" => {
                    let v: f64 = p.number()?;
                    if !(v > 0.0 && v <= 1.0) {
                        return Err(p.violation("must be in (0, 1]"));
                    }
                    c.voltage_accuracy = v;
                }
                "tls" => c.tls = p.boolean()?,
                "session.id" => {
                    let id: SessionId = p.value.parse().map_err(|e: String| p.violation(e))?;
                    c.session_id = (!id.is_zero()).then_some(id);
                }
                "network.interface" => c.network_interface = p.value.clone(),
                "energy.transfermode.requested" => {
                    c.energy_transfer_mode_requested = p.mode(&p.value)?
                }
                "evcc.id" => {
                    c.evcc_id = Some(p.value.parse().map_err(|_| {
                        p.violation("expected a link address like 02:00:00:00:00:01")
                    })?)
                }
                "charging.loop.iterations" => {
                    let n: u32 = p.number()?;
                    if n == 0 {
                        return Err(p.violation("must be at least 1"));
                    }
                    c.charging_loop_iterations = n;
                }
                "energy.request" => c.energy_request = p.number()?,
                "max.voltage" => c.max_voltage = p.number()?,
                "max.current" => c.max_current = p.number()?,
                "protocol.version" => {
                    let (major, minor) = parse_version(p)?;
                    for proto in &mut c.protocols {
                        proto.version_major = major;
                        proto.version_minor = minor;
                    }
                }
                "session.termination" => {
                    c.termination = p
                        .value
                        .parse()
                        .map_err(|_| p.violation("expected Terminate or Pause"))?
                }
                "tls.anchor" => c.tls_anchor = Some(p.value.clone()),
                "sdp.port" => c.sdp_port = p.number()?,
                _ => {
                    return Err(ConfigError::UnknownPropertyKey {
                        key: p.key.clone(),
                        line: p.line,
                    })
                }
            }
        }
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_properties(&parse_properties(text)?)
    }

    /// Accuracy in permille, as carried on the wire.
    pub fn accuracy_permille(&self) -> u32 {
        (self.voltage_accuracy * 1000.0).round() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeConfig {
    pub free_service: bool,
    pub network_interface: String,
    pub energy_transfer_modes_supported: Vec<EnergyTransferMode>,
    pub evse_id: String,
    pub sdp_port: u16,
    /// Stream port advertised in SDP responses.
    pub v2g_port: u16,
    pub tls: bool,
    /// Path of the identity file; resolved by the caller.
    pub tls_identity: Option<String>,
    pub protocols: Vec<AppProtocol>,
    pub max_voltage: u32,
    pub max_current: u32,
    pub meter_id: String,
    pub idle_timeout: SimTime,
}

impl Default for SeConfig {
    fn default() -> Self {
        Self {
            free_service: false,
            network_interface: "eth0".into(),
            energy_transfer_modes_supported: vec![
                EnergyTransferMode::AcSinglePhase,
                EnergyTransferMode::AcThreePhase,
            ],
            evse_id: "EVSE-1".into(),
            sdp_port: SDP_SERVER_PORT,
            v2g_port: DEFAULT_V2G_PORT,
            tls: false,
            tls_identity: None,
            protocols: vec![AppProtocol::iso(1, 1)],
            max_voltage: 400,
            max_current: 32,
            meter_id: "METER-1".into(),
            idle_timeout: 5 * SECONDS,
        }
    }
}

impl SeConfig {
    pub const KEYS: &'static [&'static str] = &[
        "free.service",
        "network.interface",
        "energy.transfermodes.supported",
        "evse.id",
        "sdp.port",
        "v2g.port",
        "tls",
        "tls.identity",
        "max.voltage",
        "max.current",
        "meter.id",
    ];

    pub fn from_properties(props: &[Property]) -> Result<Self, ConfigError> {
        let mut c = SeConfig::default();
        for p in props {
            match p.key.as_str() {
                "free.service" => c.free_service = p.boolean()?,
                "network.interface" => c.network_interface = p.value.clone(),
                "energy.transfermodes.supported" => {
                    let modes = p
                        .value
                        .split(',')
                        .map(|m| p.mode(m))
                        .collect::<Result<Vec<_>, _>>()?;
                    if modes.is_empty() {
                        return Err(p.violation("at least one mode required"));
                    }
                    if modes.iter().collect::<BTreeSet<_>>().len() != modes.len() {
                        return Err(p.violation("duplicate mode"));
                    }
                    c.energy_transfer_modes_supported = modes;
                }
                "evse.id" => c.evse_id = p.value.clone(),
                "sdp.port" => c.sdp_port = p.number()?,
                "v2g.port" => c.v2g_port = p.number()?,
                "tls" => c.tls = p.boolean()?,
                "tls.identity" => c.tls_identity = Some(p.value.clone()),
                "max.voltage" => c.max_voltage = p.number()?,
                "max.current" => c.max_current = p.number()?,
                "meter.id" => c.meter_id = p.value.clone(),
                _ => {
                    return Err(ConfigError::UnknownPropertyKey {
                        key: p.key.clone(),
                        line: p.line,
                    })
                }
            }
        }
        for (key, port) in [("sdp.port", c.sdp_port), ("v2g.port", c.v2g_port)] {
            if port == 0 {
                return Err(ConfigError::ConstraintViolation {
                    key: key.into(),
                    value: "0".into(),
                    reason: "port must be non-zero".into(),
                    line: props.iter().find(|p| p.key == key).map_or(0, |p| p.line),
                });
            }
        }
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_properties(&parse_properties(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ev_documented_keys() {
        let c = EvConfig::parse(
            "# vehicle\nvoltage.accuracy=0.1\ntls=true\nsession.id=0011223344556677\nnetwork.interface=ev-eth0\nenergy.transfermode.requested=DC_extended\n",
        )
        .unwrap();
        assert_eq!(c.voltage_accuracy, 0.1);
        assert!(c.tls);
        assert_eq!(
            c.session_id,
            Some(SessionId::from_u64(0x0011_2233_4455_6677))
        );
        assert_eq!(c.network_interface, "ev-eth0");
        assert_eq!(
            c.energy_transfer_mode_requested,
            EnergyTransferMode::DcExtended
        );
        assert_eq!(c.accuracy_permille(), 100);
    }

    #[test]
    fn se_documented_keys() {
        let c = SeConfig::parse("free.service=true\nnetwork.interface=se-eth0\nenergy.transfermodes.supported=AC_single_phase,DC_extended\n").unwrap();
        assert!(c.free_service);
        assert_eq!(
            c.energy_transfer_modes_supported,
            vec![
                EnergyTransferMode::AcSinglePhase,
                EnergyTransferMode::DcExtended
            ]
        );
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(
            SeConfig::parse("free.service=maybe"),
            Err(ConfigError::ConstraintViolation { line: 1, .. })
        ));
        assert!(matches!(
            SeConfig::parse("\ncolour=blue"),
            Err(ConfigError::UnknownPropertyKey { line: 2, .. })
        ));
        assert!(matches!(
            SeConfig::parse("energy.transfermodes.supported=AC_single_phase,AC_single_phase"),
            Err(ConfigError::ConstraintViolation { .. })
        ));
        assert!(matches!(
            EvConfig::parse("voltage.accuracy=0"),
            Err(ConfigError::ConstraintViolation { .. })
        ));
        assert!(matches!(
            EvConfig::parse("voltage.accuracy=1.5"),
            Err(ConfigError::ConstraintViolation { .. })
        ));
        assert!(matches!(
            EvConfig::parse("charging.loop.iterations=0"),
            Err(ConfigError::ConstraintViolation { .. })
        ));
        assert!(matches!(
            EvConfig::parse("tls"),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(matches!(
            EvConfig::parse("tls=true\ntls=false"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            EvConfig::parse("energy.transfermode.requested=AC"),
            Err(ConfigError::ConstraintViolation { .. })
        ));
    }

    #[test]
    fn protocol_version_override() {
        let c = EvConfig::parse("protocol.version=0.0").unwrap();
        assert_eq!(
            (c.protocols[0].version_major, c.protocols[0].version_minor),
            (0, 0)
        );
    }
}
