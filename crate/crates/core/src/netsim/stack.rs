//! Per-host protocol stack: neighbor resolution, datagrams, and a small
//! reliable stream transport (cumulative-ack go-back-N).

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use super::addr::{LinkAddress, NetAddress, SockAddr};
use super::frame::{
    flags, Frame, FrameKind, NetMeta, SegmentHeader, FRAME_OVERHEAD, SEGMENT_HEADER_LEN,
};
use super::{SimTime, MILLIS, SECONDS};

pub type AppId = usize;
pub type ConnId = u64;

pub const EPHEMERAL_PORT_START: u16 = 49152;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackConfig {
    pub mtu: usize,
    pub solicitations: u32,
    pub solicitation_interval: SimTime,
    pub neighbor_lifetime: SimTime,
    pub retransmit_timeout: SimTime,
    pub max_retransmits: u32,
    pub window_segments: usize,
    /// Delay before an honest host answers a neighbor solicitation.
    pub processing_delay: SimTime,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            mtu: 1500,
            solicitations: 3,
            solicitation_interval: 100 * MILLIS,
            neighbor_lifetime: 30 * SECONDS,
            retransmit_timeout: 200 * MILLIS,
            max_retransmits: 6,
            window_segments: 8,
            processing_delay: 20,
        }
    }
}

impl StackConfig {
    pub fn max_datagram_payload(&self) -> usize {
        self.mtu.saturating_sub(FRAME_OVERHEAD)
    }

    pub fn mss(&self) -> usize {
        self.mtu
            .saturating_sub(FRAME_OVERHEAD + SEGMENT_HEADER_LEN)
            .max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StackError {
    #[error("port {0} already in use")]
    PortInUse(u16),
    #[error("payload of {size} bytes exceeds the {max}-byte limit")]
    PayloadTooLarge { size: usize, max: usize },
    #[error("connection {0} is not open")]
    NotConnected(ConnId),
    #[error("no ephemeral ports left")]
    PortsExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, serde::Serialize, serde::Deserialize)]
pub enum StreamError {
    #[error("connection refused")]
    ConnectionRefused,
    #[error("neighbor resolution timed out")]
    ResolveTimeout,
    #[error("retransmission limit reached")]
    Timeout,
    #[error("connection reset by peer")]
    Reset,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppEvent {
    Timer {
        token: u64,
    },
    Datagram {
        src: SockAddr,
        dst: SockAddr,
        payload: Vec<u8>,
    },
    StreamConnected {
        conn: ConnId,
    },
    StreamConnectFailed {
        conn: ConnId,
        error: StreamError,
    },
    StreamAccepted {
        conn: ConnId,
        local: SockAddr,
        remote: SockAddr,
    },
    StreamData {
        conn: ConnId,
        data: Vec<u8>,
    },
    /// The peer finished sending; no more data will arrive.
    StreamPeerClosed {
        conn: ConnId,
    },
    StreamReset {
        conn: ConnId,
        error: StreamError,
    },
    Resolved {
        target: NetAddress,
        link: LinkAddress,
    },
    ResolveFailed {
        target: NetAddress,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackTimer {
    Retransmit { conn: ConnId, generation: u64 },
    Resolve { target: NetAddress, attempt: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StackOutput {
    Transmit {
        frame: Frame,
        delay: SimTime,
    },
    Timer {
        delay: SimTime,
        timer: StackTimer,
    },
    AppTimer {
        app: AppId,
        delay: SimTime,
        token: u64,
    },
    App {
        app: AppId,
        event: AppEvent,
    },
}

#[derive(Debug, Clone, Copy)]
struct NeighborEntry {
    link: LinkAddress,
    expires: SimTime,
}

#[derive(Debug)]
enum Waiting {
    Frame(Frame),
    Notify(AppId),
}

#[derive(Debug, Default)]
struct PendingResolve {
    waiting: Vec<Waiting>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConnState {
    SynSent,
    SynReceived,
    Established,
}

#[derive(Debug)]
struct Conn {
    owner: AppId,
    local: SockAddr,
    remote: SockAddr,
    state: ConnState,
    iss: u32,
    snd_una: u32,
    snd_nxt: u32,
    /// Unacknowledged and unsent data, starting at `snd_una`.
    send_buf: VecDeque<u8>,
    fin_queued: bool,
    fin_sent: bool,
    fin_acked: bool,
    rcv_nxt: u32,
    peer_fin: bool,
    app_closed: bool,
    retries: u32,
    timer_generation: u64,
    timer_armed: bool,
}

impl Conn {
    fn data_in_flight(&self) -> usize {
        self.snd_nxt.wrapping_sub(self.snd_una) as usize
            - usize::from(self.fin_sent && !self.fin_acked)
    }
}

#[derive(Debug)]
pub struct HostStack {
    pub link: LinkAddress,
    pub net: NetAddress,
    pub config: StackConfig,
    /// Deliver frames not addressed to this host to applications.
    pub promiscuous: bool,
    /// Accept stream connections addressed to any network address for a
    /// locally bound port, answering as that address.
    pub transparent: bool,
    neighbors: BTreeMap<NetAddress, NeighborEntry>,
    pending: BTreeMap<NetAddress, PendingResolve>,
    udp: BTreeMap<u16, AppId>,
    listeners: BTreeMap<u16, AppId>,
    conns: BTreeMap<ConnId, Conn>,
    conn_index: BTreeMap<(SockAddr, SockAddr), ConnId>,
    next_conn: ConnId,
    next_ephemeral: u16,
}

impl HostStack {
    pub fn new(link: LinkAddress, net: NetAddress, config: StackConfig) -> Self {
        Self {
            link,
            net,
            config,
            promiscuous: false,
            transparent: false,
            neighbors: BTreeMap::new(),
            pending: BTreeMap::new(),
            udp: BTreeMap::new(),
            listeners: BTreeMap::new(),
            conns: BTreeMap::new(),
            conn_index: BTreeMap::new(),
            next_conn: 1,
            next_ephemeral: EPHEMERAL_PORT_START,
        }
    }

    /// Cached link address for `target`, if present and not expired.
    pub fn neighbor(&self, now: SimTime, target: NetAddress) -> Option<LinkAddress> {
        self.neighbors
            .get(&target)
            .filter(|e| e.expires > now)
            .map(|e| e.link)
    }

    pub fn neighbor_entries(&self) -> impl Iterator<Item = (NetAddress, LinkAddress)> + '_ {
        self.neighbors.iter().map(|(n, e)| (*n, e.link))
    }

    fn port_taken(&self, port: u16) -> bool {
        self.udp.contains_key(&port)
            || self.listeners.contains_key(&port)
            || self.conn_index.keys().any(|(local, _)| local.port == port)
    }

    fn ephemeral_port(&mut self) -> Result<u16, StackError> {
        for _ in 0..(u16::MAX - EPHEMERAL_PORT_START) {
            let p = self.next_ephemeral;
            self.next_ephemeral = if p == u16::MAX {
                EPHEMERAL_PORT_START
            } else {
                p + 1
            };
            if !self.port_taken(p) {
                return Ok(p);
            }
        }
        Err(StackError::PortsExhausted)
    }

    /// Binds a datagram port; port 0 picks an ephemeral one.
    pub fn bind_udp(&mut self, app: AppId, port: u16) -> Result<u16, StackError> {
        let port = if port == 0 {
            self.ephemeral_port()?
        } else {
            port
        };
        if self.udp.contains_key(&port) {
            return Err(StackError::PortInUse(port));
        }
        self.udp.insert(port, app);
        Ok(port)
    }

    pub fn unbind_udp(&mut self, port: u16) {
        self.udp.remove(&port);
    }

    pub fn listen(&mut self, app: AppId, port: u16) -> Result<(), StackError> {
        if self.listeners.contains_key(&port) {
            return Err(StackError::PortInUse(port));
        }
        self.listeners.insert(port, app);
        Ok(())
    }

    pub fn unlisten(&mut self, port: u16) {
        self.listeners.remove(&port);
    }

    pub fn is_listening(&self, port: u16) -> bool {
        self.listeners.contains_key(&port)
    }

    pub fn open_connections(&self) -> usize {
        self.conns.len()
    }

    pub fn conn_endpoints(&self, conn: ConnId) -> Option<(SockAddr, SockAddr)> {
        self.conns.get(&conn).map(|c| (c.local, c.remote))
    }

    // -- neighbor resolution ------------------------------------------------

    /// Sends `frame` (dst link filled in here) toward `dst_net`, resolving the
    /// neighbor first when needed.
    fn send_ip(&mut self, now: SimTime, out: &mut Vec<StackOutput>, mut frame: Frame) {
        let dst_net = frame.meta.dst_net;
        if dst_net.is_multicast() {
            frame.dst_link = LinkAddress::BROADCAST;
            out.push(StackOutput::Transmit { frame, delay: 0 });
        } else if let Some(link) = self.neighbor(now, dst_net) {
            frame.dst_link = link;
            out.push(StackOutput::Transmit { frame, delay: 0 });
        } else {
            self.enqueue_resolve(now, out, dst_net, Waiting::Frame(frame));
        }
    }

    fn enqueue_resolve(
        &mut self,
        _now: SimTime,
        out: &mut Vec<StackOutput>,
        target: NetAddress,
        waiting: Waiting,
    ) {
        let fresh = !self.pending.contains_key(&target);
        self.pending
            .entry(target)
            .or_default()
            .waiting
            .push(waiting);
        if fresh {
            self.solicit(out, target, 1);
        }
    }

    fn solicit(&mut self, out: &mut Vec<StackOutput>, target: NetAddress, attempt: u32) {
        out.push(StackOutput::Transmit {
            frame: Frame::neighbor_solicitation(self.link, self.net, target),
            delay: 0,
        });
        out.push(StackOutput::Timer {
            delay: self.config.solicitation_interval,
            timer: StackTimer::Resolve { target, attempt },
        });
    }

    /// Resolves `target` on behalf of `app`, answering with a `Resolved` or
    /// `ResolveFailed` event.
    pub fn resolve(
        &mut self,
        now: SimTime,
        out: &mut Vec<StackOutput>,
        app: AppId,
        target: NetAddress,
    ) {
        if let Some(link) = self.neighbor(now, target) {
            out.push(StackOutput::App {
                app,
                event: AppEvent::Resolved { target, link },
            });
        } else {
            self.enqueue_resolve(now, out, target, Waiting::Notify(app));
        }
    }

    fn resolve_timer(
        &mut self,
        now: SimTime,
        out: &mut Vec<StackOutput>,
        target: NetAddress,
        attempt: u32,
    ) {
        if !self.pending.contains_key(&target) {
            return;
        }
        if attempt < self.config.solicitations {
            self.solicit(out, target, attempt + 1);
            return;
        }
        let pending = self.pending.remove(&target).unwrap_or_default();
        for w in pending.waiting {
            match w {
                Waiting::Notify(app) => out.push(StackOutput::App {
                    app,
                    event: AppEvent::ResolveFailed { target },
                }),
                Waiting::Frame(frame) => {
                    if frame.kind == FrameKind::StreamSegment {
                        let key = (frame.meta.src(), frame.meta.dst());
                        if let Some(&conn) = self.conn_index.get(&key) {
                            self.fail_conn(now, out, conn, StreamError::ResolveTimeout);
                        }
                    }
                }
            }
        }
    }

    fn learn_neighbor(
        &mut self,
        now: SimTime,
        out: &mut Vec<StackOutput>,
        target: NetAddress,
        link: LinkAddress,
    ) {
        // Only answers to an outstanding solicitation are adopted; the first
        // one wins.
        let Some(pending) = self.pending.remove(&target) else {
            return;
        };
        self.neighbors.insert(
            target,
            NeighborEntry {
                link,
                expires: now + self.config.neighbor_lifetime,
            },
        );
        for w in pending.waiting {
            match w {
                Waiting::Notify(app) => out.push(StackOutput::App {
                    app,
                    event: AppEvent::Resolved { target, link },
                }),
                Waiting::Frame(mut frame) => {
                    frame.dst_link = link;
                    out.push(StackOutput::Transmit { frame, delay: 0 });
                }
            }
        }
    }

    // -- datagrams ----------------------------------------------------------

    pub fn send_datagram(
        &mut self,
        now: SimTime,
        out: &mut Vec<StackOutput>,
        src_port: u16,
        dst: SockAddr,
        payload: Vec<u8>,
    ) -> Result<(), StackError> {
        let max = self.config.max_datagram_payload();
        if payload.len() > max {
            return Err(StackError::PayloadTooLarge {
                size: payload.len(),
                max,
            });
        }
        let frame = Frame {
            src_link: self.link,
            dst_link: LinkAddress::BROADCAST,
            kind: FrameKind::Datagram,
            meta: NetMeta {
                src_net: self.net,
                dst_net: dst.net,
                src_port,
                dst_port: dst.port,
            },
            payload,
        };
        self.send_ip(now, out, frame);
        Ok(())
    }

    // -- streams ------------------------------------------------------------

    fn iss_for(conn: ConnId) -> u32 {
        (conn as u32).wrapping_mul(100_000).wrapping_add(1)
    }

    fn segment_frame(&self, conn: &Conn, flag_bits: u8, seq: u32, data: &[u8]) -> Frame {
        let header = SegmentHeader {
            flags: flag_bits,
            seq,
            ack: if flag_bits & flags::ACK != 0 {
                conn.rcv_nxt
            } else {
                0
            },
        };
        Frame {
            src_link: self.link,
            dst_link: LinkAddress::BROADCAST,
            kind: FrameKind::StreamSegment,
            meta: NetMeta {
                src_net: conn.local.net,
                dst_net: conn.remote.net,
                src_port: conn.local.port,
                dst_port: conn.remote.port,
            },
            payload: header.encode(data),
        }
    }

    fn emit(
        &mut self,
        now: SimTime,
        out: &mut Vec<StackOutput>,
        conn: ConnId,
        flag_bits: u8,
        seq: u32,
        data: &[u8],
    ) {
        let frame = {
            let c = &self.conns[&conn];
            self.segment_frame(c, flag_bits, seq, data)
        };
        self.send_ip(now, out, frame);
    }

    fn arm_timer(&mut self, out: &mut Vec<StackOutput>, conn: ConnId) {
        let rto = self.config.retransmit_timeout;
        if let Some(c) = self.conns.get_mut(&conn) {
            if !c.timer_armed {
                c.timer_armed = true;
                c.timer_generation += 1;
                out.push(StackOutput::Timer {
                    delay: rto,
                    timer: StackTimer::Retransmit {
                        conn,
                        generation: c.timer_generation,
                    },
                });
            }
        }
    }

    fn disarm_timer(&mut self, conn: ConnId) {
        if let Some(c) = self.conns.get_mut(&conn) {
            c.timer_armed = false;
            c.timer_generation += 1;
        }
    }

    /// Opens a stream to `dst`. Completion arrives as `StreamConnected` or
    /// `StreamConnectFailed`.
    pub fn connect(
        &mut self,
        now: SimTime,
        out: &mut Vec<StackOutput>,
        app: AppId,
        dst: SockAddr,
    ) -> Result<ConnId, StackError> {
        let port = self.ephemeral_port()?;
        let id = self.next_conn;
        self.next_conn += 1;
        let iss = Self::iss_for(id);
        let local = SockAddr::new(self.net, port);
        self.conns.insert(
            id,
            Conn {
                owner: app,
                local,
                remote: dst,
                state: ConnState::SynSent,
                iss,
                snd_una: iss,
                snd_nxt: iss.wrapping_add(1),
                send_buf: VecDeque::new(),
                fin_queued: false,
                fin_sent: false,
                fin_acked: false,
                rcv_nxt: 0,
                peer_fin: false,
                app_closed: false,
                retries: 0,
                timer_generation: 0,
                timer_armed: false,
            },
        );
        self.conn_index.insert((local, dst), id);
        self.emit(now, out, id, flags::SYN, iss, &[]);
        self.arm_timer(out, id);
        Ok(id)
    }

    pub fn write(
        &mut self,
        now: SimTime,
        out: &mut Vec<StackOutput>,
        conn: ConnId,
        data: &[u8],
    ) -> Result<(), StackError> {
        let c = self
            .conns
            .get_mut(&conn)
            .ok_or(StackError::NotConnected(conn))?;
        if c.fin_queued {
            return Err(StackError::NotConnected(conn));
        }
        c.send_buf.extend(data);
        self.pump(now, out, conn);
        Ok(())
    }

    /// Graceful close: queued data is delivered, then a FIN.
    pub fn close(&mut self, now: SimTime, out: &mut Vec<StackOutput>, conn: ConnId) {
        if let Some(c) = self.conns.get_mut(&conn) {
            c.app_closed = true;
            c.fin_queued = true;
            self.pump(now, out, conn);
            self.maybe_reap(conn);
        }
    }

    pub fn abort(&mut self, now: SimTime, out: &mut Vec<StackOutput>, conn: ConnId) {
        if let Some(c) = self.conns.get(&conn) {
            let seq = c.snd_nxt;
            self.emit(now, out, conn, flags::RST | flags::ACK, seq, &[]);
            self.remove_conn(conn);
        }
    }

    fn remove_conn(&mut self, conn: ConnId) -> Option<Conn> {
        let c = self.conns.remove(&conn)?;
        self.conn_index.remove(&(c.local, c.remote));
        Some(c)
    }

    fn maybe_reap(&mut self, conn: ConnId) {
        if let Some(c) = self.conns.get(&conn) {
            if c.app_closed && c.fin_acked && c.peer_fin {
                self.remove_conn(conn);
            }
        }
    }

    fn fail_conn(
        &mut self,
        _now: SimTime,
        out: &mut Vec<StackOutput>,
        conn: ConnId,
        error: StreamError,
    ) {
        if let Some(c) = self.remove_conn(conn) {
            if c.app_closed {
                return;
            }
            let event = if c.state == ConnState::SynSent {
                AppEvent::StreamConnectFailed { conn, error }
            } else if c.state == ConnState::SynReceived {
                // never surfaced to the application
                return;
            } else {
                AppEvent::StreamReset { conn, error }
            };
            out.push(StackOutput::App {
                app: c.owner,
                event,
            });
        }
    }

    fn pump(&mut self, now: SimTime, out: &mut Vec<StackOutput>, conn: ConnId) {
        let mss = self.config.mss();
        let window = self.config.window_segments * mss;
        let mut segments = Vec::new();
        {
            let Some(c) = self.conns.get_mut(&conn) else {
                return;
            };
            if c.state != ConnState::Established {
                return;
            }
            let mut in_flight = c.data_in_flight();
            while in_flight < c.send_buf.len() && in_flight < window {
                let len = mss
                    .min(c.send_buf.len() - in_flight)
                    .min(window - in_flight);
                let data: Vec<u8> = c
                    .send_buf
                    .range(in_flight..in_flight + len)
                    .copied()
                    .collect();
                segments.push((flags::ACK, c.snd_nxt, data));
                c.snd_nxt = c.snd_nxt.wrapping_add(len as u32);
                in_flight += len;
            }
            if c.fin_queued && !c.fin_sent && in_flight == c.send_buf.len() {
                segments.push((flags::FIN | flags::ACK, c.snd_nxt, Vec::new()));
                c.snd_nxt = c.snd_nxt.wrapping_add(1);
                c.fin_sent = true;
            }
        }
        for (f, seq, data) in segments {
            self.emit(now, out, conn, f, seq, &data);
        }
        let outstanding = self
            .conns
            .get(&conn)
            .is_some_and(|c| c.snd_nxt != c.snd_una);
        if outstanding {
            self.arm_timer(out, conn);
        }
    }

    fn on_ack(&mut self, now: SimTime, out: &mut Vec<StackOutput>, conn: ConnId, ack: u32) {
        let progressed = {
            let Some(c) = self.conns.get_mut(&conn) else {
                return;
            };
            let acked = ack.wrapping_sub(c.snd_una) as usize;
            let outstanding = c.snd_nxt.wrapping_sub(c.snd_una) as usize;
            if acked == 0 || acked > outstanding {
                false
            } else {
                let data = acked.min(c.send_buf.len());
                c.send_buf.drain(..data);
                if c.fin_sent && ack == c.snd_nxt {
                    c.fin_acked = true;
                }
                c.snd_una = ack;
                c.retries = 0;
                true
            }
        };
        if progressed {
            self.disarm_timer(conn);
            self.pump(now, out, conn);
            self.maybe_reap(conn);
        }
    }

    fn retransmit(
        &mut self,
        now: SimTime,
        out: &mut Vec<StackOutput>,
        conn: ConnId,
        generation: u64,
    ) {
        let max = self.config.max_retransmits;
        let (state, give_up) = {
            let Some(c) = self.conns.get_mut(&conn) else {
                return;
            };
            if c.timer_generation != generation || !c.timer_armed {
                return;
            }
            c.timer_armed = false;
            c.retries += 1;
            (c.state, c.retries > max)
        };
        if give_up {
            self.fail_conn(now, out, conn, StreamError::Timeout);
            return;
        }
        match state {
            ConnState::SynSent => {
                let iss = self.conns[&conn].iss;
                self.emit(now, out, conn, flags::SYN, iss, &[]);
                self.arm_timer(out, conn);
            }
            ConnState::SynReceived => {
                let iss = self.conns[&conn].iss;
                self.emit(now, out, conn, flags::SYN | flags::ACK, iss, &[]);
                self.arm_timer(out, conn);
            }
            ConnState::Established => {
                if let Some(c) = self.conns.get_mut(&conn) {
                    c.snd_nxt = c.snd_una;
                    if !c.fin_acked {
                        c.fin_sent = false;
                    }
                }
                self.pump(now, out, conn);
            }
        }
    }

    pub fn on_timer(&mut self, now: SimTime, out: &mut Vec<StackOutput>, timer: StackTimer) {
        match timer {
            StackTimer::Retransmit { conn, generation } => {
                self.retransmit(now, out, conn, generation)
            }
            StackTimer::Resolve { target, attempt } => {
                self.resolve_timer(now, out, target, attempt)
            }
        }
    }

    fn accepts_net(&self, net: NetAddress) -> bool {
        net == self.net || net.is_multicast()
    }

    /// Processes a frame handed to this host by its link.
    pub fn receive(&mut self, now: SimTime, out: &mut Vec<StackOutput>, frame: &Frame) {
        if frame.src_link == self.link {
            return;
        }
        let for_us = frame.dst_link == self.link || frame.dst_link.is_group();
        if !for_us && !self.promiscuous {
            return;
        }
        match frame.kind {
            FrameKind::NeighborSolicitation => {
                if let Some(target) = frame.neighbor_target() {
                    if target == self.net {
                        out.push(StackOutput::Transmit {
                            frame: Frame::neighbor_advertisement(
                                self.link,
                                frame.src_link,
                                frame.meta.src_net,
                                self.net,
                                self.link,
                            ),
                            delay: self.config.processing_delay,
                        });
                    }
                }
            }
            FrameKind::NeighborAdvertisement => {
                if frame.meta.dst_net == self.net {
                    if let (Some(target), Some(link)) =
                        (frame.neighbor_target(), frame.advertised_link())
                    {
                        self.learn_neighbor(now, out, target, link);
                    }
                }
            }
            FrameKind::Datagram => {
                if !self.accepts_net(frame.meta.dst_net) {
                    return;
                }
                if let Some(&app) = self.udp.get(&frame.meta.dst_port) {
                    out.push(StackOutput::App {
                        app,
                        event: AppEvent::Datagram {
                            src: frame.meta.src(),
                            dst: frame.meta.dst(),
                            payload: frame.payload.clone(),
                        },
                    });
                }
            }
            FrameKind::StreamSegment => self.receive_segment(now, out, frame),
        }
    }

    fn receive_segment(&mut self, now: SimTime, out: &mut Vec<StackOutput>, frame: &Frame) {
        let Some((header, data)) = frame.segment() else {
            return;
        };
        let local = frame.meta.dst();
        let remote = frame.meta.src();
        if let Some(&conn) = self.conn_index.get(&(local, remote)) {
            self.segment_for_conn(now, out, conn, header, data);
            return;
        }
        let addressed = local.net == self.net || (self.transparent && !local.net.is_multicast());
        if !addressed || header.has(flags::RST) {
            return;
        }
        if !header.has(flags::SYN) || header.has(flags::ACK) {
            // stray segment for a connection we do not know
            if local.net == self.net {
                let rst = Frame {
                    src_link: self.link,
                    dst_link: frame.src_link,
                    kind: FrameKind::StreamSegment,
                    meta: NetMeta {
                        src_net: local.net,
                        dst_net: remote.net,
                        src_port: local.port,
                        dst_port: remote.port,
                    },
                    payload: SegmentHeader {
                        flags: flags::RST,
                        seq: header.ack,
                        ack: 0,
                    }
                    .encode(&[]),
                };
                out.push(StackOutput::Transmit {
                    frame: rst,
                    delay: 0,
                });
            }
            return;
        }
        let Some(&owner) = self.listeners.get(&local.port) else {
            if local.net == self.net {
                let rst = Frame {
                    src_link: self.link,
                    dst_link: frame.src_link,
                    kind: FrameKind::StreamSegment,
                    meta: NetMeta {
                        src_net: local.net,
                        dst_net: remote.net,
                        src_port: local.port,
                        dst_port: remote.port,
                    },
                    payload: SegmentHeader {
                        flags: flags::RST | flags::ACK,
                        seq: 0,
                        ack: header.seq.wrapping_add(1),
                    }
                    .encode(&[]),
                };
                out.push(StackOutput::Transmit {
                    frame: rst,
                    delay: 0,
                });
            }
            return;
        };
        let id = self.next_conn;
        self.next_conn += 1;
        let iss = Self::iss_for(id);
        self.conns.insert(
            id,
            Conn {
                owner,
                local,
                remote,
                state: ConnState::SynReceived,
                iss,
                snd_una: iss,
                snd_nxt: iss.wrapping_add(1),
                send_buf: VecDeque::new(),
                fin_queued: false,
                fin_sent: false,
                fin_acked: false,
                rcv_nxt: header.seq.wrapping_add(1),
                peer_fin: false,
                app_closed: false,
                retries: 0,
                timer_generation: 0,
                timer_armed: false,
            },
        );
        self.conn_index.insert((local, remote), id);
        self.emit(now, out, id, flags::SYN | flags::ACK, iss, &[]);
        self.arm_timer(out, id);
    }

    fn segment_for_conn(
        &mut self,
        now: SimTime,
        out: &mut Vec<StackOutput>,
        conn: ConnId,
        header: SegmentHeader,
        data: &[u8],
    ) {
        if header.has(flags::RST) {
            let refused = self.conns[&conn].state == ConnState::SynSent;
            self.fail_conn(
                now,
                out,
                conn,
                if refused {
                    StreamError::ConnectionRefused
                } else {
                    StreamError::Reset
                },
            );
            return;
        }
        let state = self.conns[&conn].state;
        match state {
            ConnState::SynSent => {
                let c = &self.conns[&conn];
                if header.has(flags::SYN)
                    && header.has(flags::ACK)
                    && header.ack == c.iss.wrapping_add(1)
                {
                    let owner = c.owner;
                    if let Some(c) = self.conns.get_mut(&conn) {
                        c.rcv_nxt = header.seq.wrapping_add(1);
                        c.snd_una = header.ack;
                        c.state = ConnState::Established;
                        c.retries = 0;
                    }
                    self.disarm_timer(conn);
                    let seq = self.conns[&conn].snd_nxt;
                    self.emit(now, out, conn, flags::ACK, seq, &[]);
                    out.push(StackOutput::App {
                        app: owner,
                        event: AppEvent::StreamConnected { conn },
                    });
                    self.pump(now, out, conn);
                }
                return;
            }
            ConnState::SynReceived => {
                let c = &self.conns[&conn];
                if header.has(flags::SYN) && !header.has(flags::ACK) {
                    let iss = c.iss;
                    self.emit(now, out, conn, flags::SYN | flags::ACK, iss, &[]);
                    return;
                }
                if !(header.has(flags::ACK) && header.ack == c.iss.wrapping_add(1)) {
                    return;
                }
                let (owner, local, remote) = (c.owner, c.local, c.remote);
                if let Some(c) = self.conns.get_mut(&conn) {
                    c.snd_una = header.ack;
                    c.state = ConnState::Established;
                    c.retries = 0;
                }
                self.disarm_timer(conn);
                out.push(StackOutput::App {
                    app: owner,
                    event: AppEvent::StreamAccepted {
                        conn,
                        local,
                        remote,
                    },
                });
            }
            ConnState::Established => {
                if header.has(flags::SYN) {
                    // our handshake ACK was lost; repeat it
                    let seq = self.conns[&conn].snd_nxt;
                    self.emit(now, out, conn, flags::ACK, seq, &[]);
                    return;
                }
            }
        }

        if header.has(flags::ACK) {
            self.on_ack(now, out, conn, header.ack);
        }
        let Some(c) = self.conns.get_mut(&conn) else {
            return;
        };
        let carries = !data.is_empty() || header.has(flags::FIN);
        if !carries {
            return;
        }
        let owner = c.owner;
        let mut events = Vec::new();
        if header.seq == c.rcv_nxt && !c.peer_fin {
            if !data.is_empty() {
                c.rcv_nxt = c.rcv_nxt.wrapping_add(data.len() as u32);
                events.push(AppEvent::StreamData {
                    conn,
                    data: data.to_vec(),
                });
            }
            if header.has(flags::FIN) {
                c.rcv_nxt = c.rcv_nxt.wrapping_add(1);
                c.peer_fin = true;
                events.push(AppEvent::StreamPeerClosed { conn });
            }
        }
        let app_closed = c.app_closed;
        let seq = c.snd_nxt;
        self.emit(now, out, conn, flags::ACK, seq, &[]);
        if !app_closed {
            for event in events {
                out.push(StackOutput::App { app: owner, event });
            }
        }
        self.maybe_reap(conn);
    }
}
