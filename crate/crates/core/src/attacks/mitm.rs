//! The MitM host application: raw frame interception, neighbor spoofing
//! and a stream proxy that relays V2GTP payloads through an interceptor.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::interceptor::{
    try_decode, Intercepted, Interceptor, InterceptorDecision, PayloadClass, Toward,
};
use crate::codec::to_xml_text;
use crate::controllers::{ChannelEvent, MessageChannel};
use crate::messages::{to_doc, MessageKind};
use crate::netsim::{
    AppEvent, Application, ConnId, Frame, FrameKind, FrameVerdict, HostCtx, LinkAddress,
    NetAddress, SimTime, SockAddr,
};
use crate::securechannel::{generate_identity, Identity, TrustAnchor};
use crate::wire::{
    decode_sdp_response, decode_v2gtp, frame as v2gtp, PayloadType, Security, SDP_SERVER_PORT,
};

/// Decisions applied so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MitmStats {
    pub intercepted: u64,
    pub forwarded: u64,
    pub modified: u64,
    pub dropped: u64,
    /// Decisions that triggered injections.
    pub injected: u64,
    pub injected_payloads: u64,
    /// Payloads forwarded because they did not decode.
    pub decode_failures: u64,
    /// Frames relayed without interception.
    pub relayed_frames: u64,
    pub spoofed_advertisements: u64,
    pub proxied_connections: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Applied {
    Forward,
    Drop,
    Replace,
    Inject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InterceptLogEntry {
    pub at: SimTime,
    pub toward: Toward,
    pub class: PayloadClass,
    pub kind: Option<MessageKind>,
    pub applied: Applied,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xml: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct MitmOptions {
    /// Extra port the proxy accepts connections on.
    pub proxy_port: Option<u16>,
    /// Trust anchor for re-originated secured connections.
    pub upstream_anchor: Option<TrustAnchor>,
    /// Record the XML form of every decoded message.
    pub log_xml: bool,
    pub seed: u64,
}

struct ProxyPair {
    down: ConnId,
    up: Option<ConnId>,
    up_ready: bool,
    target: SockAddr,
    secured: bool,
    down_ch: MessageChannel,
    up_ch: Option<MessageChannel>,
    backlog: Vec<(PayloadType, Vec<u8>)>,
}

pub struct MitmApp {
    interceptor: Box<dyn Interceptor>,
    options: MitmOptions,
    identity: Identity,
    rng: ChaCha20Rng,
    pub(crate) redirected: bool,
    pub(crate) spoofing: bool,
    learned: BTreeMap<NetAddress, LinkAddress>,
    seccs: BTreeMap<u16, (SockAddr, Security)>,
    last_secc: Option<(SockAddr, Security)>,
    listening: BTreeSet<u16>,
    pairs: Vec<ProxyPair>,
    stats: MitmStats,
    log: Vec<InterceptLogEntry>,
}

impl MitmApp {
    pub fn new(interceptor: Box<dyn Interceptor>, options: MitmOptions) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(options.seed);
        let identity = generate_identity("mitm", None, &mut rng);
        Self {
            interceptor,
            options,
            identity,
            rng,
            redirected: false,
            spoofing: false,
            learned: BTreeMap::new(),
            seccs: BTreeMap::new(),
            last_secc: None,
            listening: BTreeSet::new(),
            pairs: Vec::new(),
            stats: MitmStats::default(),
            log: Vec::new(),
        }
    }

    pub fn stats(&self) -> MitmStats {
        self.stats
    }

    pub fn log(&self) -> &[InterceptLogEntry] {
        &self.log
    }

    pub fn is_spoofing(&self) -> bool {
        self.spoofing
    }

    /// SECC endpoints learned from SDP responses, keyed by port.
    pub fn learned_seccs(&self) -> impl Iterator<Item = SockAddr> + '_ {
        self.seccs.values().map(|(a, _)| *a)
    }

    fn listen(&mut self, ctx: &mut HostCtx<'_>, port: u16) {
        if self.listening.insert(port) {
            let _ = ctx.listen(port);
        }
    }

    /// Runs the interceptor on one payload and books the decision.
    fn decide(
        &mut self,
        now: SimTime,
        own_net: NetAddress,
        toward: Toward,
        payload_type: PayloadType,
        payload: &[u8],
    ) -> InterceptorDecision {
        self.stats.intercepted += 1;
        let class = PayloadClass::of(payload_type);
        let message = (class == PayloadClass::V2gMessage)
            .then(|| try_decode(payload))
            .flatten();
        let decision = if class == PayloadClass::V2gMessage && message.is_none() {
            self.stats.decode_failures += 1;
            InterceptorDecision::Forward
        } else {
            self.interceptor.intercept(&Intercepted {
                at: now,
                toward,
                class,
                payload,
                message: message.as_ref(),
                own_net,
            })
        };
        let applied = match &decision {
            InterceptorDecision::Forward => {
                self.stats.forwarded += 1;
                Applied::Forward
            }
            InterceptorDecision::Drop => {
                self.stats.dropped += 1;
                Applied::Drop
            }
            InterceptorDecision::Replace(_) => {
                self.stats.modified += 1;
                Applied::Replace
            }
            InterceptorDecision::Inject(extra) => {
                self.stats.injected += 1;
                self.stats.injected_payloads += extra.len() as u64;
                Applied::Inject
            }
        };
        self.log.push(InterceptLogEntry {
            at: now,
            toward,
            class,
            kind: message.as_ref().map(|m| m.kind()),
            applied,
            xml: message
                .as_ref()
                .filter(|_| self.options.log_xml)
                .map(|m| to_xml_text(&to_doc(m))),
        });
        decision
    }

    /// Puts a captured frame back on the wire towards its real owner.
    fn relay(&mut self, ctx: &mut HostCtx<'_>, mut frame: Frame) {
        let own = ctx.link();
        if frame.dst_link == own {
            let Some(&real) = self.learned.get(&frame.meta.dst_net) else {
                return;
            };
            frame.dst_link = real;
            frame.src_link = own;
        }
        ctx.transmit_raw(frame, 0);
    }

    fn on_sdp_frame(&mut self, ctx: &mut HostCtx<'_>, frame: &Frame) {
        let Ok(decoded) = decode_v2gtp(&frame.payload) else {
            self.stats.intercepted += 1;
            self.stats.forwarded += 1;
            self.stats.decode_failures += 1;
            return self.relay(ctx, frame.clone());
        };
        let ptype = decoded.header.payload_type;
        let toward = if ptype == PayloadType::SdpResponse {
            Toward::Evcc
        } else {
            Toward::Secc
        };
        if ptype == PayloadType::SdpResponse {
            if let Ok(res) = decode_sdp_response(&decoded.payload) {
                let real = SockAddr::new(res.secc_address, res.secc_port);
                self.seccs.insert(res.secc_port, (real, res.security));
                self.last_secc = Some((real, res.security));
                self.listen(ctx, res.secc_port);
            }
        }
        let decision = self.decide(ctx.now(), ctx.net(), toward, ptype, &decoded.payload);
        let rebuilt = |payload_type: PayloadType, body: &[u8], reverse: bool| {
            let mut f = frame.clone();
            f.payload = v2gtp(payload_type, body);
            if reverse {
                std::mem::swap(&mut f.src_link, &mut f.dst_link);
                std::mem::swap(&mut f.meta.src_net, &mut f.meta.dst_net);
                std::mem::swap(&mut f.meta.src_port, &mut f.meta.dst_port);
            }
            f
        };
        match decision {
            InterceptorDecision::Forward => self.relay(ctx, frame.clone()),
            InterceptorDecision::Drop => {}
            InterceptorDecision::Replace(p) => self.relay(ctx, rebuilt(ptype, &p, false)),
            InterceptorDecision::Inject(extra) => {
                self.relay(ctx, frame.clone());
                for inj in extra {
                    let f = rebuilt(inj.payload_type, &inj.payload, inj.toward != toward);
                    self.relay(ctx, f);
                }
            }
        }
    }

    fn pair_index(&self, conn: ConnId) -> Option<(usize, bool)> {
        self.pairs.iter().enumerate().find_map(|(i, p)| {
            if p.down == conn {
                Some((i, true))
            } else if p.up == Some(conn) {
                Some((i, false))
            } else {
                None
            }
        })
    }

    fn drop_pair(&mut self, ctx: &mut HostCtx<'_>, i: usize, abort: bool) {
        let p = self.pairs.remove(i);
        for conn in std::iter::once(p.down).chain(p.up) {
            if abort {
                ctx.abort(conn);
            } else {
                ctx.close(conn);
            }
        }
    }

    fn on_accept(&mut self, ctx: &mut HostCtx<'_>, conn: ConnId, local: SockAddr) {
        let endpoint = if Some(local.port) == self.options.proxy_port {
            self.last_secc
        } else {
            self.seccs
                .get(&local.port)
                .copied()
                .map(|(real, sec)| (if local.net == ctx.net() { real } else { local }, sec))
                .or(Some((local, Security::PlainTcp)))
        };
        let Some((target, security)) = endpoint else {
            ctx.abort(conn);
            return;
        };
        self.stats.proxied_connections += 1;
        let secured = security == Security::SecuredWithTls;
        let down_ch = if secured {
            MessageChannel::server(self.identity.clone(), &mut self.rng)
        } else {
            MessageChannel::plain()
        };
        self.pairs.push(ProxyPair {
            down: conn,
            up: None,
            up_ready: false,
            target,
            secured,
            down_ch,
            up_ch: None,
            backlog: Vec::new(),
        });
        if !secured {
            let i = self.pairs.len() - 1;
            self.open_upstream(ctx, i);
        }
    }

    fn open_upstream(&mut self, ctx: &mut HostCtx<'_>, i: usize) {
        let target = self.pairs[i].target;
        match ctx.connect(target) {
            Ok(up) => self.pairs[i].up = Some(up),
            Err(_) => self.drop_pair(ctx, i, true),
        }
    }

    fn send(
        &mut self,
        ctx: &mut HostCtx<'_>,
        i: usize,
        toward: Toward,
        payload_type: PayloadType,
        payload: &[u8],
    ) {
        let p = &mut self.pairs[i];
        match toward {
            Toward::Evcc => {
                if let Ok(bytes) = p.down_ch.send(payload_type, payload) {
                    let _ = ctx.write(p.down, &bytes);
                }
            }
            Toward::Secc => match (p.up, p.up_ch.as_mut()) {
                (Some(up), Some(ch)) if p.up_ready && ch.is_established() => {
                    if let Ok(bytes) = ch.send(payload_type, payload) {
                        let _ = ctx.write(up, &bytes);
                    }
                }
                _ => p.backlog.push((payload_type, payload.to_vec())),
            },
        }
    }

    fn flush_backlog(&mut self, ctx: &mut HostCtx<'_>, i: usize) {
        for (t, payload) in std::mem::take(&mut self.pairs[i].backlog) {
            self.send(ctx, i, Toward::Secc, t, &payload);
        }
    }

    fn relay_payload(
        &mut self,
        ctx: &mut HostCtx<'_>,
        i: usize,
        toward: Toward,
        ptype: PayloadType,
        payload: Vec<u8>,
    ) {
        match self.decide(ctx.now(), ctx.net(), toward, ptype, &payload) {
            InterceptorDecision::Forward => self.send(ctx, i, toward, ptype, &payload),
            InterceptorDecision::Drop => {}
            InterceptorDecision::Replace(p) => self.send(ctx, i, toward, ptype, &p),
            InterceptorDecision::Inject(extra) => {
                self.send(ctx, i, toward, ptype, &payload);
                for inj in extra {
                    self.send(ctx, i, inj.toward, inj.payload_type, &inj.payload);
                }
            }
        }
    }

    fn on_stream_data(&mut self, ctx: &mut HostCtx<'_>, i: usize, downstream: bool, data: &[u8]) {
        let p = &mut self.pairs[i];
        let (conn, ch) = if downstream {
            (p.down, &mut p.down_ch)
        } else {
            let Some(ch) = p.up_ch.as_mut() else { return };
            (p.up.expect("upstream channel implies connection"), ch)
        };
        let (reply, events) = ch.receive(data);
        if !reply.is_empty() {
            let _ = ctx.write(conn, &reply);
        }
        let toward = if downstream {
            Toward::Secc
        } else {
            Toward::Evcc
        };
        for ev in events {
            let Some((i, _)) = self.pair_index(conn) else {
                return;
            };
            match ev {
                ChannelEvent::Established if downstream => self.open_upstream(ctx, i),
                ChannelEvent::Established => self.flush_backlog(ctx, i),
                ChannelEvent::Payload(t, payload) => self.relay_payload(ctx, i, toward, t, payload),
                ChannelEvent::Failed(_) => return self.drop_pair(ctx, i, false),
            }
        }
    }

    fn on_upstream_connected(&mut self, ctx: &mut HostCtx<'_>, i: usize) {
        let p = &mut self.pairs[i];
        p.up_ready = true;
        if p.secured {
            let Some(anchor) = self.options.upstream_anchor.clone() else {
                return self.drop_pair(ctx, i, true);
            };
            let (ch, hello) = MessageChannel::client(anchor, &mut self.rng);
            let p = &mut self.pairs[i];
            p.up_ch = Some(ch);
            let _ = ctx.write(p.up.expect("connected"), &hello);
        } else {
            p.up_ch = Some(MessageChannel::plain());
            self.flush_backlog(ctx, i);
        }
    }
}

impl Application for MitmApp {
    fn start(&mut self, ctx: &mut HostCtx<'_>) {
        if let Some(port) = self.options.proxy_port {
            self.listen(ctx, port);
        }
    }

    fn on_event(&mut self, ctx: &mut HostCtx<'_>, event: AppEvent) {
        match event {
            AppEvent::StreamAccepted { conn, local, .. } => self.on_accept(ctx, conn, local),
            AppEvent::StreamConnected { conn } => {
                if let Some((i, false)) = self.pair_index(conn) {
                    self.on_upstream_connected(ctx, i);
                }
            }
            AppEvent::StreamConnectFailed { conn, .. } => {
                if let Some((i, _)) = self.pair_index(conn) {
                    self.pairs[i].up = None;
                    self.drop_pair(ctx, i, true);
                }
            }
            AppEvent::StreamData { conn, data } => {
                if let Some((i, downstream)) = self.pair_index(conn) {
                    self.on_stream_data(ctx, i, downstream, &data);
                }
            }
            AppEvent::StreamPeerClosed { conn } => {
                if let Some((i, _)) = self.pair_index(conn) {
                    self.drop_pair(ctx, i, false);
                }
            }
            AppEvent::StreamReset { conn, .. } => {
                if let Some((i, _)) = self.pair_index(conn) {
                    self.drop_pair(ctx, i, true);
                }
            }
            _ => {}
        }
    }

    fn on_frame(&mut self, ctx: &mut HostCtx<'_>, frame: &Frame) -> FrameVerdict {
        let own_link = ctx.link();
        let own_net = ctx.net();
        if frame.src_link == own_link {
            return FrameVerdict::Pass;
        }
        if frame.kind != FrameKind::NeighborAdvertisement
            && !frame.src_link.is_group()
            && frame.meta.src_net != own_net
            && frame.meta.src_net != NetAddress::UNSPECIFIED
        {
            self.learned.insert(frame.meta.src_net, frame.src_link);
        }
        match frame.kind {
            FrameKind::NeighborSolicitation => {
                if let Some(target) = frame
                    .neighbor_target()
                    .filter(|t| self.spoofing && *t != own_net)
                {
                    self.stats.spoofed_advertisements += 1;
                    ctx.transmit_raw(
                        Frame::neighbor_advertisement(
                            own_link,
                            frame.src_link,
                            frame.meta.src_net,
                            target,
                            own_link,
                        ),
                        0,
                    );
                }
                FrameVerdict::Pass
            }
            FrameKind::NeighborAdvertisement => FrameVerdict::Pass,
            _ if frame.meta.dst_net == own_net => FrameVerdict::Pass,
            // Group frames reach every host; only take them over when the
            // switch hands them to us instead of the victims.
            _ if frame.dst_link.is_group() && !self.redirected => FrameVerdict::Pass,
            FrameKind::Datagram => {
                if frame.meta.dst_port == SDP_SERVER_PORT || frame.meta.src_port == SDP_SERVER_PORT
                {
                    self.on_sdp_frame(ctx, frame);
                } else {
                    self.stats.relayed_frames += 1;
                    self.relay(ctx, frame.clone());
                }
                FrameVerdict::Consumed
            }
            FrameKind::StreamSegment => {
                if self.listening.contains(&frame.meta.dst_port) {
                    return FrameVerdict::Pass;
                }
                self.stats.relayed_frames += 1;
                self.relay(ctx, frame.clone());
                FrameVerdict::Consumed
            }
        }
    }
}
