//! Supply equipment side: SDP server, session logic and the application
//! that serves vehicles one connection at a time.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::channel::{ChannelError, ChannelEvent, MessageChannel};
use super::config::SeConfig;
use super::negotiation::{assign_session_id, negotiate_protocol};
use crate::messages::{
    decode_message, encode_message, stage_of, validate_transition, Body, ChargeBranch, MessageKind,
    MeterInfo, PaymentOption, ResponseCode, SessionId, Stage, TerminationType, V2GMessage,
    STAGE_SESSION_STOP,
};
use crate::netsim::{
    AppEvent, AppId, Application, ConnId, HostCtx, NodeId, SimError, SimTime, Simulation, SockAddr,
    StackError, MILLIS, SECONDS,
};
use crate::securechannel::{HandshakeFailure, Identity};
use crate::wire::{
    decode_sdp_request, decode_v2gtp, encode_sdp_response, frame, PayloadType, SdpResponse,
    Security, Transport,
};

/// What the SECC does after answering one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeccReply {
    pub response: Option<V2GMessage>,
    /// Close the connection once the response is sent.
    pub close: bool,
}

/// Per-connection SECC protocol state.
#[derive(Debug, Clone)]
pub struct SeccSession {
    session_id: Option<SessionId>,
    last_stage: Option<Stage>,
    branch: Option<ChargeBranch>,
    meter: MeterInfo,
    increment: u64,
    accuracy_permille: u32,
    paused: bool,
    rng: ChaCha20Rng,
}

impl SeccSession {
    pub fn new(seed: u64, meter_id: &str) -> Self {
        Self {
            session_id: None,
            last_stage: None,
            branch: None,
            meter: MeterInfo {
                meter_id: meter_id.to_string(),
                reading: 0,
                timestamp: 0,
            },
            increment: 0,
            accuracy_permille: 0,
            paused: false,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn session_id(&self) -> Option<SessionId> {
        self.session_id
    }

    pub fn last_stage(&self) -> Option<Stage> {
        self.last_stage
    }

    pub fn meter(&self) -> &MeterInfo {
        &self.meter
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    fn header(&self) -> SessionId {
        self.session_id.unwrap_or(SessionId::ZERO)
    }

    fn reply(&self, body: Body, close: bool) -> SeccReply {
        SeccReply {
            response: Some(V2GMessage::new(self.header(), body)),
            close,
        }
    }

    fn reject(&self, kind: MessageKind, code: ResponseCode) -> SeccReply {
        self.reply(Body::failure_response(kind, code), true)
    }

    /// Advances the synthetic meter by one charging-loop step:
    /// `increment * (1 + u)` with `u` uniform in ±accuracy.
    fn meter_step(&mut self, now: SimTime) -> MeterInfo {
        let acc = f64::from(self.accuracy_permille) / 1000.0;
        let u = if acc > 0.0 {
            self.rng.gen_range(-acc..=acc)
        } else {
            0.0
        };
        let delta = (self.increment as f64 * (1.0 + u)).round().max(0.0) as u64;
        self.meter.reading += delta;
        self.meter.timestamp = now / MILLIS;
        self.meter.clone()
    }

    /// Answers one decoded request.
    pub fn handle(&mut self, config: &SeConfig, msg: &V2GMessage, now: SimTime) -> SeccReply {
        let kind = msg.kind();
        if !kind.is_request() {
            return SeccReply {
                response: None,
                close: true,
            };
        }
        if kind.base_stage().is_none() {
            return self.reject(kind, ResponseCode::FailedGeneric);
        }
        let needs_session = !matches!(
            kind,
            MessageKind::SupportedAppProtocolReq | MessageKind::SessionSetupReq
        );
        if needs_session && self.session_id != Some(msg.session_id) {
            return self.reject(kind, ResponseCode::FailedUnknownSession);
        }
        let branch = self.branch.unwrap_or(ChargeBranch::Ac);
        if validate_transition(self.last_stage, &msg.body, branch).is_err() {
            return self.reject(kind, ResponseCode::FailedGeneric);
        }
        let stage = stage_of(&msg.body);
        let ok = ResponseCode::Ok;
        let mut close = false;
        let body = match &msg.body {
            Body::SupportedAppProtocolReq { protocols } => {
                match negotiate_protocol(protocols, &config.protocols) {
                    Ok(schema) => Body::SupportedAppProtocolRes {
                        response_code: ok,
                        schema_id: Some(schema),
                    },
                    Err(_) => {
                        return self.reject(kind, ResponseCode::FailedNoNegotiation);
                    }
                }
            }
            Body::SessionSetupReq { .. } => {
                self.session_id = Some(assign_session_id(Some(msg.session_id), &mut self.rng));
                Body::SessionSetupRes {
                    response_code: ok,
                    evse_id: config.evse_id.clone(),
                    timestamp: now / SECONDS,
                }
            }
            Body::ServiceDiscoveryReq => Body::ServiceDiscoveryRes {
                response_code: ok,
                free_service: config.free_service,
                energy_transfer_modes: config.energy_transfer_modes_supported.clone(),
                payment_options: if config.free_service {
                    vec![PaymentOption::ExternalPayment]
                } else {
                    vec![PaymentOption::Contract, PaymentOption::ExternalPayment]
                },
            },
            Body::PaymentServiceSelectionReq {
                selected_payment_option,
            } => {
                if config.free_service && *selected_payment_option != PaymentOption::ExternalPayment
                {
                    return self.reject(kind, ResponseCode::FailedServiceSelection);
                }
                Body::PaymentServiceSelectionRes { response_code: ok }
            }
            Body::AuthorizationReq => Body::AuthorizationRes { response_code: ok },
            Body::ChargeParameterDiscoveryReq {
                requested_mode,
                energy_request,
                charging_loops,
                voltage_accuracy,
                ..
            } => {
                if !config
                    .energy_transfer_modes_supported
                    .contains(requested_mode)
                {
                    return self.reject(kind, ResponseCode::FailedWrongEnergyTransferMode);
                }
                self.branch = Some(requested_mode.branch());
                let loops = u64::from((*charging_loops).max(1));
                self.increment = (energy_request + loops / 2) / loops;
                self.accuracy_permille = (*voltage_accuracy).min(1000);
                Body::ChargeParameterDiscoveryRes {
                    response_code: ok,
                    max_voltage: config.max_voltage,
                    max_current: config.max_current,
                }
            }
            Body::CableCheckReq => Body::CableCheckRes { response_code: ok },
            Body::PreChargeReq { target_voltage } => Body::PreChargeRes {
                response_code: ok,
                present_voltage: (*target_voltage).min(config.max_voltage),
            },
            Body::PowerDeliveryReq { .. } => Body::PowerDeliveryRes { response_code: ok },
            Body::ChargingStatusReq => Body::ChargingStatusRes {
                response_code: ok,
                evse_id: config.evse_id.clone(),
                meter_info: self.meter_step(now),
            },
            Body::CurrentDemandReq {
                target_voltage,
                target_current,
            } => Body::CurrentDemandRes {
                response_code: ok,
                present_voltage: (*target_voltage).min(config.max_voltage),
                present_current: (*target_current).min(config.max_current),
                meter_info: self.meter_step(now),
            },
            Body::WeldingDetectionReq => Body::WeldingDetectionRes {
                response_code: ok,
                present_voltage: 0,
            },
            Body::MeteringReceiptReq { .. } => Body::MeteringReceiptRes { response_code: ok },
            Body::SessionStopReq { termination_type } => {
                self.paused = *termination_type == TerminationType::Pause;
                close = true;
                Body::SessionStopRes { response_code: ok }
            }
            other => unreachable!("{} is not a handled request", other.kind()),
        };
        self.last_stage = stage.or(self.last_stage);
        self.reply(body, close)
    }
}

/// Summary of one served connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ServedSession {
    pub peer: SockAddr,
    pub session_id: Option<SessionId>,
    pub last_stage_reached: Option<Stage>,
    pub completed: bool,
    pub paused: bool,
    pub secured: bool,
    pub handshake_failure: Option<HandshakeFailure>,
    pub messages_received: u32,
    pub meter: MeterInfo,
}

struct Active {
    conn: ConnId,
    peer: SockAddr,
    channel: MessageChannel,
    session: SeccSession,
    handshake_failure: Option<HandshakeFailure>,
    received: u32,
    idle_token: u64,
}

/// SECC application; create it with [`secc_start`].
pub struct SeccApp {
    config: SeConfig,
    identity: Option<Identity>,
    rng: ChaCha20Rng,
    active: Option<Active>,
    queue: VecDeque<(ConnId, SockAddr)>,
    pending: BTreeMap<ConnId, Vec<u8>>,
    served: Vec<ServedSession>,
    next_token: u64,
    sdp_requests: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SeccStartError {
    #[error("port {0} already in use")]
    PortInUse(u16),
    #[error("tls is enabled but no identity was provided")]
    MissingIdentity,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Binds the SDP and stream ports on `node` and installs the SECC.
pub fn secc_start(
    sim: &mut Simulation,
    node: NodeId,
    config: SeConfig,
    identity: Option<Identity>,
    seed: u64,
) -> Result<AppId, SeccStartError> {
    if config.tls && identity.is_none() {
        return Err(SeccStartError::MissingIdentity);
    }
    let app = sim.app_count(node);
    let name = sim.node_name(node).to_string();
    let stack = sim
        .stack_mut(node)
        .ok_or(SeccStartError::Sim(SimError::NotAHost(name)))?;
    let in_use = |e: StackError| match e {
        StackError::PortInUse(p) => SeccStartError::PortInUse(p),
        _ => SeccStartError::PortInUse(config.sdp_port),
    };
    stack.bind_udp(app, config.sdp_port).map_err(in_use)?;
    if let Err(e) = stack.listen(app, config.v2g_port) {
        stack.unbind_udp(config.sdp_port);
        return Err(in_use(e));
    }
    let id = sim.add_app(node, Box::new(SeccApp::new(config, identity, seed)))?;
    debug_assert_eq!(id, app);
    Ok(id)
}

impl SeccApp {
    fn new(config: SeConfig, identity: Option<Identity>, seed: u64) -> Self {
        let identity = if config.tls { identity } else { None };
        Self {
            config,
            identity,
            rng: ChaCha20Rng::seed_from_u64(seed),
            active: None,
            queue: VecDeque::new(),
            pending: BTreeMap::new(),
            served: Vec::new(),
            next_token: 0,
            sdp_requests: 0,
        }
    }

    pub fn config(&self) -> &SeConfig {
        &self.config
    }

    /// Connections served so far, in order.
    pub fn served(&self) -> &[ServedSession] {
        &self.served
    }

    pub fn sdp_requests(&self) -> u32 {
        self.sdp_requests
    }

    pub fn is_busy(&self) -> bool {
        self.active.is_some()
    }

    fn secured(&self) -> bool {
        self.identity.is_some()
    }

    fn on_sdp(&mut self, ctx: &mut HostCtx<'_>, src: SockAddr, payload: &[u8]) {
        let Ok(f) = decode_v2gtp(payload) else { return };
        if f.header.payload_type != PayloadType::SdpRequest
            || decode_sdp_request(&f.payload).is_err()
        {
            return;
        }
        self.sdp_requests += 1;
        let res = SdpResponse {
            secc_address: ctx.net(),
            secc_port: self.config.v2g_port,
            security: if self.secured() {
                Security::SecuredWithTls
            } else {
                Security::PlainTcp
            },
            transport: Transport::Tcp,
        };
        let bytes = frame(PayloadType::SdpResponse, &encode_sdp_response(&res));
        let _ = ctx.send_datagram(self.config.sdp_port, src, bytes);
    }

    fn arm_idle(&mut self, ctx: &mut HostCtx<'_>) {
        self.next_token += 1;
        if let Some(a) = &mut self.active {
            a.idle_token = self.next_token;
            ctx.set_timer(self.config.idle_timeout, self.next_token);
        }
    }

    fn activate(&mut self, ctx: &mut HostCtx<'_>, conn: ConnId, peer: SockAddr) {
        let channel = match &self.identity {
            Some(id) => MessageChannel::server(id.clone(), &mut self.rng),
            None => MessageChannel::plain(),
        };
        self.active = Some(Active {
            conn,
            peer,
            channel,
            session: SeccSession::new(self.rng.next_u64(), &self.config.meter_id),
            handshake_failure: None,
            received: 0,
            idle_token: 0,
        });
        self.arm_idle(ctx);
        if let Some(data) = self.pending.remove(&conn) {
            self.on_data(ctx, &data);
        }
    }

    /// Ends the active session and picks up the next queued connection.
    fn finish(&mut self, ctx: &mut HostCtx<'_>, abort: bool) {
        let Some(a) = self.active.take() else { return };
        if abort {
            ctx.abort(a.conn);
        } else {
            ctx.close(a.conn);
        }
        self.served.push(ServedSession {
            peer: a.peer,
            session_id: a.session.session_id(),
            last_stage_reached: a.session.last_stage(),
            completed: a.session.last_stage() == Some(STAGE_SESSION_STOP),
            paused: a.session.paused(),
            secured: a.channel.is_secured(),
            handshake_failure: a.handshake_failure,
            messages_received: a.received,
            meter: a.session.meter().clone(),
        });
        if let Some((conn, peer)) = self.queue.pop_front() {
            self.activate(ctx, conn, peer);
        }
    }

    fn on_data(&mut self, ctx: &mut HostCtx<'_>, data: &[u8]) {
        let Some(a) = &mut self.active else { return };
        let (reply, events) = a.channel.receive(data);
        if !reply.is_empty() {
            let _ = ctx.write(a.conn, &reply);
        }
        for ev in events {
            let Some(a) = &mut self.active else { return };
            match ev {
                ChannelEvent::Established => {}
                ChannelEvent::Payload(PayloadType::ExiV2gMessage, bytes) => {
                    let Ok(msg) = decode_message(&bytes) else {
                        self.finish(ctx, true);
                        return;
                    };
                    a.received += 1;
                    let reply = a.session.handle(&self.config, &msg, ctx.now());
                    if let Some(res) = reply.response {
                        match a
                            .channel
                            .send(PayloadType::ExiV2gMessage, &encode_message(&res))
                        {
                            Ok(out) => {
                                let _ = ctx.write(a.conn, &out);
                            }
                            Err(_) => {
                                self.finish(ctx, true);
                                return;
                            }
                        }
                    }
                    if reply.close {
                        self.finish(ctx, false);
                        return;
                    }
                    self.arm_idle(ctx);
                }
                ChannelEvent::Payload(..) => {
                    self.finish(ctx, true);
                    return;
                }
                ChannelEvent::Failed(e) => {
                    if let ChannelError::Handshake(r) = e {
                        a.handshake_failure = Some(r);
                    }
                    self.finish(ctx, false);
                    return;
                }
            }
        }
    }
}

impl Application for SeccApp {
    fn start(&mut self, _ctx: &mut HostCtx<'_>) {}

    fn on_event(&mut self, ctx: &mut HostCtx<'_>, event: AppEvent) {
        match event {
            AppEvent::Datagram { src, dst, payload } if dst.port == self.config.sdp_port => {
                self.on_sdp(ctx, src, &payload)
            }
            AppEvent::StreamAccepted { conn, remote, .. } => {
                if self.active.is_none() {
                    self.activate(ctx, conn, remote);
                } else {
                    self.queue.push_back((conn, remote));
                }
            }
            AppEvent::StreamData { conn, data } => {
                if self.active.as_ref().is_some_and(|a| a.conn == conn) {
                    self.on_data(ctx, &data);
                } else if self.queue.iter().any(|(c, _)| *c == conn) {
                    self.pending
                        .entry(conn)
                        .or_default()
                        .extend_from_slice(&data);
                }
            }
            AppEvent::StreamPeerClosed { conn } | AppEvent::StreamReset { conn, .. } => {
                if self.active.as_ref().is_some_and(|a| a.conn == conn) {
                    self.finish(ctx, false);
                } else {
                    self.queue.retain(|(c, _)| *c != conn);
                    self.pending.remove(&conn);
                }
            }
            AppEvent::Timer { token }
                if self.active.as_ref().is_some_and(|a| a.idle_token == token) =>
            {
                self.finish(ctx, true);
            }
            _ => {}
        }
    }
}
