//! Vehicle side: discovery, connection set-up and the request sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::channel::{ChannelError, ChannelEvent, MessageChannel};
use super::config::EvConfig;
use super::report::{ChargeSessionReport, Flow, Outcome, TranscriptEntry};
use crate::messages::{
    decode_message, encode_message, stage_of, Body, ChargeBranch, ChargeProgress, MessageKind,
    PaymentOption, ResponseCode, SessionId, V2GMessage, STAGE_SESSION_STOP,
};
use crate::netsim::{AppEvent, Application, ConnId, HostCtx, NetAddress, SockAddr};
use crate::securechannel::{HandshakeFailure, TrustAnchor};
use crate::wire::{
    decode_sdp_response, decode_v2gtp, encode_sdp_request, frame, PayloadType, SdpRequest,
    Security, Transport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Idle,
    Discovering,
    Connecting,
    Handshaking,
    Awaiting(MessageKind),
    Done,
}

/// EVCC application. Runs one charging session and keeps its report.
pub struct EvccApp {
    config: EvConfig,
    anchor: Option<TrustAnchor>,
    rng: ChaCha20Rng,
    state: State,
    report: ChargeSessionReport,
    sdp_port: u16,
    conn: Option<ConnId>,
    channel: Option<MessageChannel>,
    token: u64,
    pending_hello: Option<Vec<u8>>,
    session: SessionId,
    loops_done: u32,
    last_progress: ChargeProgress,
}

impl EvccApp {
    pub fn new(config: EvConfig, anchor: Option<TrustAnchor>, seed: u64) -> Self {
        Self {
            config,
            anchor,
            rng: ChaCha20Rng::seed_from_u64(seed),
            state: State::Idle,
            report: ChargeSessionReport::new(0),
            sdp_port: 0,
            conn: None,
            channel: None,
            token: 0,
            pending_hello: None,
            session: SessionId::ZERO,
            loops_done: 0,
            last_progress: ChargeProgress::Start,
        }
    }

    pub fn config(&self) -> &EvConfig {
        &self.config
    }

    pub fn report(&self) -> &ChargeSessionReport {
        &self.report
    }

    pub fn is_finished(&self) -> bool {
        self.state == State::Done
    }

    fn branch(&self) -> ChargeBranch {
        self.config.energy_transfer_mode_requested.branch()
    }

    fn arm(&mut self, ctx: &mut HostCtx<'_>, delay: u64) {
        self.token += 1;
        ctx.set_timer(delay, self.token);
    }

    fn finish(&mut self, ctx: &mut HostCtx<'_>, outcome: Outcome, detail: Option<String>) {
        if self.state == State::Done {
            return;
        }
        self.state = State::Done;
        self.token += 1;
        self.report.outcome = outcome;
        self.report.detail = detail;
        self.report.finished_at = ctx.now();
        if self.sdp_port != 0 {
            ctx.unbind_udp(self.sdp_port);
            self.sdp_port = 0;
        }
        if let Some(conn) = self.conn.take() {
            ctx.close(conn);
        }
    }

    fn send_discovery(&mut self, ctx: &mut HostCtx<'_>) {
        let req = SdpRequest {
            security: if self.config.tls {
                Security::SecuredWithTls
            } else {
                Security::PlainTcp
            },
            transport: Transport::Tcp,
        };
        let bytes = frame(PayloadType::SdpRequest, &encode_sdp_request(&req));
        let dst = SockAddr::new(NetAddress::ALL_NODES, self.config.sdp_port);
        let _ = ctx.send_datagram(self.sdp_port, dst, bytes);
        self.report.sdp_attempts += 1;
        let interval = self.config.sdp_interval;
        self.arm(ctx, interval);
    }

    fn on_sdp_response(&mut self, ctx: &mut HostCtx<'_>, payload: &[u8]) {
        let Ok(f) = decode_v2gtp(payload) else { return };
        if f.header.payload_type != PayloadType::SdpResponse {
            return;
        }
        let Ok(res) = decode_sdp_response(&f.payload) else {
            return;
        };
        let peer = SockAddr::new(res.secc_address, res.secc_port);
        self.report.peer = Some(peer);
        ctx.unbind_udp(self.sdp_port);
        self.sdp_port = 0;
        let secured = res.security == Security::SecuredWithTls;
        if secured && !self.config.tls {
            return self.finish(
                ctx,
                Outcome::FailedHandshake,
                Some("SECC only offers TLS".into()),
            );
        }
        let channel = if secured {
            let Some(anchor) = self.anchor.clone() else {
                return self.finish(
                    ctx,
                    Outcome::FailedHandshake,
                    Some("no trust anchor configured".into()),
                );
            };
            let (ch, hello) = MessageChannel::client(anchor, &mut self.rng);
            Some((ch, hello))
        } else {
            None
        };
        match ctx.connect(peer) {
            Ok(conn) => {
                self.conn = Some(conn);
                self.state = State::Connecting;
                self.channel = Some(match channel {
                    Some((ch, hello)) => {
                        self.pending_hello = Some(hello);
                        ch
                    }
                    None => MessageChannel::plain(),
                });
            }
            Err(e) => self.finish(ctx, Outcome::FailedTransport, Some(e.to_string())),
        }
    }

    fn send_request(&mut self, ctx: &mut HostCtx<'_>, body: Body) {
        let (Some(conn), Some(ch)) = (self.conn, self.channel.as_mut()) else {
            return;
        };
        let kind = body.kind();
        let header = if kind == MessageKind::SessionSetupReq {
            self.config.session_id.unwrap_or(SessionId::ZERO)
        } else {
            self.session
        };
        if let Some(stage) = stage_of(&body).filter(|s| *s != STAGE_SESSION_STOP) {
            self.report.last_stage_reached = Some(stage);
        }
        if let Body::PowerDeliveryReq { charge_progress } = &body {
            self.last_progress = *charge_progress;
        }
        let msg = V2GMessage::new(header, body);
        let bytes = match ch.send(PayloadType::ExiV2gMessage, &encode_message(&msg)) {
            Ok(b) => b,
            Err(e) => return self.finish(ctx, Outcome::FailedTransport, Some(e.to_string())),
        };
        if let Err(e) = ctx.write(conn, &bytes) {
            return self.finish(ctx, Outcome::FailedTransport, Some(e.to_string()));
        }
        self.report.messages_sent += 1;
        self.report.transcript.push(TranscriptEntry {
            at: ctx.now(),
            flow: Flow::Sent,
            kind,
            session_id: header,
            response_code: None,
        });
        self.state = State::Awaiting(kind.counterpart());
        let timeout = self.config.response_timeout;
        self.arm(ctx, timeout);
    }

    fn loop_request(&self) -> Body {
        match self.branch() {
            ChargeBranch::Ac => Body::ChargingStatusReq,
            ChargeBranch::Dc => Body::CurrentDemandReq {
                target_voltage: self.config.max_voltage,
                target_current: self.config.max_current,
            },
        }
    }

    /// Request that follows a successful response, or `None` once the
    /// session is over.
    fn next_request(&mut self, res: &Body) -> Option<Body> {
        let c = &self.config;
        let dc = self.branch() == ChargeBranch::Dc;
        Some(match res {
            Body::SupportedAppProtocolRes { .. } => Body::SessionSetupReq {
                evcc_id: c.evcc_id.unwrap_or_default(),
            },
            Body::SessionSetupRes { .. } => Body::ServiceDiscoveryReq,
            Body::ServiceDiscoveryRes {
                payment_options, ..
            } => Body::PaymentServiceSelectionReq {
                selected_payment_option: if payment_options
                    .contains(&PaymentOption::ExternalPayment)
                    || payment_options.is_empty()
                {
                    PaymentOption::ExternalPayment
                } else {
                    payment_options[0]
                },
            },
            Body::PaymentServiceSelectionRes { .. } => Body::AuthorizationReq,
            Body::AuthorizationRes { .. } => Body::ChargeParameterDiscoveryReq {
                requested_mode: c.energy_transfer_mode_requested,
                max_voltage: c.max_voltage,
                max_current: c.max_current,
                energy_request: c.energy_request,
                charging_loops: c.charging_loop_iterations,
                voltage_accuracy: c.accuracy_permille(),
            },
            Body::ChargeParameterDiscoveryRes { .. } if dc => Body::CableCheckReq,
            Body::ChargeParameterDiscoveryRes { .. } | Body::PreChargeRes { .. } => {
                Body::PowerDeliveryReq {
                    charge_progress: ChargeProgress::Start,
                }
            }
            Body::CableCheckRes { .. } => Body::PreChargeReq {
                target_voltage: c.max_voltage,
            },
            Body::PowerDeliveryRes { .. } => match (self.last_progress, dc) {
                (ChargeProgress::Start, _) => {
                    self.loops_done = 0;
                    self.loop_request()
                }
                (ChargeProgress::Stop, true) => Body::WeldingDetectionReq,
                (ChargeProgress::Stop, false) => Body::SessionStopReq {
                    termination_type: c.termination,
                },
            },
            Body::ChargingStatusRes { .. } | Body::CurrentDemandRes { .. } => {
                self.loops_done += 1;
                if self.loops_done < c.charging_loop_iterations {
                    self.loop_request()
                } else {
                    Body::PowerDeliveryReq {
                        charge_progress: ChargeProgress::Stop,
                    }
                }
            }
            Body::WeldingDetectionRes { .. } => Body::SessionStopReq {
                termination_type: c.termination,
            },
            _ => return None,
        })
    }

    fn on_message(&mut self, ctx: &mut HostCtx<'_>, msg: V2GMessage) {
        let kind = msg.kind();
        let code = msg.body.response_code();
        self.report.messages_received += 1;
        self.report.transcript.push(TranscriptEntry {
            at: ctx.now(),
            flow: Flow::Received,
            kind,
            session_id: msg.session_id,
            response_code: code,
        });
        let State::Awaiting(expected) = self.state else {
            return self.finish(
                ctx,
                Outcome::FailedSequence,
                Some(format!("unexpected {kind}")),
            );
        };
        if kind != expected {
            return self.finish(
                ctx,
                Outcome::FailedSequence,
                Some(format!("expected {expected}, got {kind}")),
            );
        }
        if let Some(code) = code.filter(|c| *c != ResponseCode::Ok) {
            self.report.response_code = Some(code);
            let outcome = if kind == MessageKind::SupportedAppProtocolRes {
                Outcome::FailedNegotiation
            } else {
                Outcome::FailedRejected
            };
            return self.finish(ctx, outcome, None);
        }
        match kind {
            MessageKind::SupportedAppProtocolRes => {}
            MessageKind::SessionSetupRes => {
                if msg.session_id.is_zero() {
                    return self.finish(
                        ctx,
                        Outcome::FailedSequence,
                        Some("SECC assigned session id zero".into()),
                    );
                }
                self.session = msg.session_id;
                self.report.session_id = msg.session_id;
            }
            _ if msg.session_id != self.session => {
                return self.finish(
                    ctx,
                    Outcome::FailedSequence,
                    Some(format!(
                        "session id {} does not match {}",
                        msg.session_id, self.session
                    )),
                );
            }
            _ => {}
        }
        if let Body::ChargingStatusRes { meter_info, .. }
        | Body::CurrentDemandRes { meter_info, .. } = &msg.body
        {
            if self
                .report
                .meter
                .as_ref()
                .is_some_and(|m| meter_info.reading < m.reading)
            {
                return self.finish(
                    ctx,
                    Outcome::FailedSequence,
                    Some("meter reading decreased".into()),
                );
            }
            self.report.meter = Some(meter_info.clone());
        }
        match self.next_request(&msg.body) {
            Some(body) => self.send_request(ctx, body),
            None => {
                self.report.last_stage_reached = Some(STAGE_SESSION_STOP);
                self.report.paused =
                    self.config.termination == crate::messages::TerminationType::Pause;
                self.finish(ctx, Outcome::Completed, None)
            }
        }
    }

    fn on_stream_data(&mut self, ctx: &mut HostCtx<'_>, data: &[u8]) {
        let (Some(conn), Some(ch)) = (self.conn, self.channel.as_mut()) else {
            return;
        };
        let (reply, events) = ch.receive(data);
        if !reply.is_empty() {
            let _ = ctx.write(conn, &reply);
        }
        for ev in events {
            if self.state == State::Done {
                return;
            }
            match ev {
                ChannelEvent::Established => {
                    self.report.secured = true;
                    self.start_session(ctx);
                }
                ChannelEvent::Payload(PayloadType::ExiV2gMessage, bytes) => {
                    match decode_message(&bytes) {
                        Ok(msg) => self.on_message(ctx, msg),
                        Err(e) => self.finish(
                            ctx,
                            Outcome::FailedSequence,
                            Some(format!("undecodable message: {e}")),
                        ),
                    }
                }
                ChannelEvent::Payload(t, _) => self.finish(
                    ctx,
                    Outcome::FailedSequence,
                    Some(format!("unexpected payload type {t:?}")),
                ),
                ChannelEvent::Failed(ChannelError::Handshake(r))
                    if self.state == State::Handshaking =>
                {
                    self.report.handshake_failure = Some(r);
                    self.finish(ctx, Outcome::FailedHandshake, None)
                }
                ChannelEvent::Failed(e) => {
                    self.finish(ctx, Outcome::FailedTransport, Some(e.to_string()))
                }
            }
        }
    }

    fn start_session(&mut self, ctx: &mut HostCtx<'_>) {
        let protocols = self.config.protocols.clone();
        self.send_request(ctx, Body::SupportedAppProtocolReq { protocols });
    }
}

impl Application for EvccApp {
    fn start(&mut self, ctx: &mut HostCtx<'_>) {
        self.report = ChargeSessionReport::new(ctx.now());
        if self.config.evcc_id.is_none() {
            self.config.evcc_id = Some(ctx.link());
        }
        match ctx.bind_udp(0) {
            Ok(port) => {
                self.sdp_port = port;
                self.state = State::Discovering;
                self.send_discovery(ctx);
            }
            Err(e) => self.finish(ctx, Outcome::FailedTransport, Some(e.to_string())),
        }
    }

    fn on_event(&mut self, ctx: &mut HostCtx<'_>, event: AppEvent) {
        if self.state == State::Done {
            return;
        }
        match event {
            AppEvent::Datagram { dst, payload, .. } if dst.port == self.sdp_port => {
                if self.state == State::Discovering {
                    self.on_sdp_response(ctx, &payload);
                }
            }
            AppEvent::Timer { token } if token == self.token => match self.state {
                State::Discovering if self.report.sdp_attempts < self.config.sdp_attempts => {
                    self.send_discovery(ctx)
                }
                State::Discovering => self.finish(ctx, Outcome::FailedDiscoveryTimeout, None),
                State::Handshaking => {
                    self.report.handshake_failure = Some(HandshakeFailure::Timeout);
                    self.finish(ctx, Outcome::FailedHandshake, None)
                }
                State::Awaiting(kind) => self.finish(
                    ctx,
                    Outcome::FailedTransport,
                    Some(format!("timed out waiting for {kind}")),
                ),
                _ => {}
            },
            AppEvent::StreamConnected { conn } if Some(conn) == self.conn => {
                match self.pending_hello.take() {
                    Some(hello) => {
                        self.state = State::Handshaking;
                        let _ = ctx.write(conn, &hello);
                        let timeout = self.config.response_timeout;
                        self.arm(ctx, timeout);
                    }
                    None => self.start_session(ctx),
                }
            }
            AppEvent::StreamConnectFailed { conn, error } if Some(conn) == self.conn => {
                self.conn = None;
                self.finish(
                    ctx,
                    Outcome::FailedTransport,
                    Some(format!("connect failed: {error:?}")),
                )
            }
            AppEvent::StreamData { conn, data } if Some(conn) == self.conn => {
                self.on_stream_data(ctx, &data)
            }
            AppEvent::StreamPeerClosed { conn } | AppEvent::StreamReset { conn, .. }
                if Some(conn) == self.conn =>
            {
                let outcome = if self.state == State::Handshaking {
                    Outcome::FailedHandshake
                } else {
                    Outcome::FailedTransport
                };
                self.finish(ctx, outcome, Some("connection closed by peer".into()))
            }
            _ => {}
        }
    }
}
