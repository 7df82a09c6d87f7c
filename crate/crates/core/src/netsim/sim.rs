//! Discrete-event scheduler tying hosts, switches and links together.

use std::any::Any;
use std::collections::{BTreeMap, VecDeque};

use sha2::{Digest, Sha256};

use super::addr::{LinkAddress, NetAddress, SockAddr};
use super::capture::{CaptureRecord, Direction};
use super::frame::Frame;
use super::stack::{
    AppEvent, AppId, ConnId, HostStack, StackConfig, StackError, StackOutput, StackTimer,
};
use super::switch::{switch_forward, PortId, SwitchState};
use super::SimTime;

pub type NodeId = usize;

/// Whether an application swallowed a frame before the stack saw it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameVerdict {
    Pass,
    Consumed,
}

pub trait AsAny: Any {
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

impl<T: Any> AsAny for T {
    fn as_any(&self) -> &dyn Any {
        self
    }
    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Something running on a host. Applications only talk to the network
/// through their [`HostCtx`].
pub trait Application: AsAny {
    fn start(&mut self, ctx: &mut HostCtx<'_>);

    fn on_event(&mut self, ctx: &mut HostCtx<'_>, event: AppEvent);

    /// Raw frame hook, consulted before the stack. Only promiscuous
    /// applications need it.
    fn on_frame(&mut self, _ctx: &mut HostCtx<'_>, _frame: &Frame) -> FrameVerdict {
        FrameVerdict::Pass
    }
}

pub struct HostCtx<'a> {
    now: SimTime,
    app: AppId,
    name: &'a str,
    stack: &'a mut HostStack,
    out: &'a mut Vec<StackOutput>,
}

impl<'a> HostCtx<'a> {
    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn app_id(&self) -> AppId {
        self.app
    }

    pub fn host_name(&self) -> &str {
        self.name
    }

    pub fn link(&self) -> LinkAddress {
        self.stack.link
    }

    pub fn net(&self) -> NetAddress {
        self.stack.net
    }

    pub fn stack(&self) -> &HostStack {
        self.stack
    }

    pub fn stack_mut(&mut self) -> &mut HostStack {
        self.stack
    }

    pub fn bind_udp(&mut self, port: u16) -> Result<u16, StackError> {
        self.stack.bind_udp(self.app, port)
    }

    pub fn unbind_udp(&mut self, port: u16) {
        self.stack.unbind_udp(port)
    }

    pub fn listen(&mut self, port: u16) -> Result<(), StackError> {
        self.stack.listen(self.app, port)
    }

    pub fn unlisten(&mut self, port: u16) {
        self.stack.unlisten(port)
    }

    pub fn send_datagram(
        &mut self,
        src_port: u16,
        dst: SockAddr,
        payload: Vec<u8>,
    ) -> Result<(), StackError> {
        self.stack
            .send_datagram(self.now, self.out, src_port, dst, payload)
    }

    pub fn connect(&mut self, dst: SockAddr) -> Result<ConnId, StackError> {
        self.stack.connect(self.now, self.out, self.app, dst)
    }

    pub fn write(&mut self, conn: ConnId, data: &[u8]) -> Result<(), StackError> {
        self.stack.write(self.now, self.out, conn, data)
    }

    pub fn close(&mut self, conn: ConnId) {
        self.stack.close(self.now, self.out, conn)
    }

    pub fn abort(&mut self, conn: ConnId) {
        self.stack.abort(self.now, self.out, conn)
    }

    pub fn resolve(&mut self, target: NetAddress) {
        self.stack.resolve(self.now, self.out, self.app, target)
    }

    pub fn neighbor(&self, target: NetAddress) -> Option<LinkAddress> {
        self.stack.neighbor(self.now, target)
    }

    pub fn set_timer(&mut self, delay: SimTime, token: u64) {
        self.out.push(StackOutput::AppTimer {
            app: self.app,
            delay,
            token,
        });
    }

    /// Puts a frame on the wire as-is, bypassing the stack.
    pub fn transmit_raw(&mut self, frame: Frame, delay: SimTime) {
        self.out.push(StackOutput::Transmit { frame, delay });
    }
}

#[derive(Debug, Clone, Copy)]
struct Link {
    peer: NodeId,
    peer_port: PortId,
    latency: SimTime,
}

pub struct Host {
    pub stack: HostStack,
    apps: Vec<Option<Box<dyn Application>>>,
}

enum NodeBody {
    Host(Host),
    Switch(SwitchState),
}

struct Node {
    name: String,
    ports: Vec<Option<Link>>,
    body: NodeBody,
}

#[derive(Debug)]
enum Event {
    Deliver {
        node: NodeId,
        port: PortId,
        frame: Frame,
    },
    Transmit {
        node: NodeId,
        frame: Frame,
    },
    StackTimer {
        node: NodeId,
        timer: StackTimer,
    },
    AppTimer {
        node: NodeId,
        app: AppId,
        token: u64,
    },
    AppStart {
        node: NodeId,
        app: AppId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    /// The stop predicate returned true.
    Stopped,
    /// No events left.
    Quiescent,
    /// Simulated time reached the limit.
    LimitReached,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("node {0} does not exist")]
    NoSuchNode(NodeId),
    #[error("node {0} is not a host")]
    NotAHost(String),
    #[error("host {0} already has a link")]
    HostPortBusy(String),
}

pub struct Simulation {
    now: SimTime,
    seq: u64,
    queue: BTreeMap<(SimTime, u64), Event>,
    nodes: Vec<Node>,
    names: BTreeMap<String, NodeId>,
    capture: Vec<CaptureRecord>,
    pub capture_enabled: bool,
    seed: u64,
    events_processed: u64,
}

/// Stable 64-bit seed derived from a master seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

impl Simulation {
    pub fn new(seed: u64) -> Self {
        Self {
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            nodes: Vec::new(),
            names: BTreeMap::new(),
            capture: Vec::new(),
            capture_enabled: true,
            seed,
            events_processed: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    pub fn add_host(
        &mut self,
        name: &str,
        link: LinkAddress,
        net: NetAddress,
        config: StackConfig,
    ) -> NodeId {
        self.push_node(
            name,
            1,
            NodeBody::Host(Host {
                stack: HostStack::new(link, net, config),
                apps: Vec::new(),
            }),
        )
    }

    pub fn add_switch(&mut self, name: &str) -> NodeId {
        self.push_node(name, 0, NodeBody::Switch(SwitchState::new(0)))
    }

    fn push_node(&mut self, name: &str, ports: usize, body: NodeBody) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            name: name.to_string(),
            ports: vec![None; ports],
            body,
        });
        self.names.insert(name.to_string(), id);
        id
    }

    fn free_port(&mut self, node: NodeId) -> Result<PortId, SimError> {
        let n = self.nodes.get_mut(node).ok_or(SimError::NoSuchNode(node))?;
        match &mut n.body {
            NodeBody::Host(_) => {
                if n.ports[0].is_some() {
                    Err(SimError::HostPortBusy(n.name.clone()))
                } else {
                    Ok(0)
                }
            }
            NodeBody::Switch(state) => {
                n.ports.push(None);
                state.port_count = n.ports.len();
                Ok(n.ports.len() - 1)
            }
        }
    }

    /// Connects two nodes with a bidirectional link; returns the port used
    /// on each side.
    pub fn connect(
        &mut self,
        a: NodeId,
        b: NodeId,
        latency: SimTime,
    ) -> Result<(PortId, PortId), SimError> {
        if let (Some(na), Some(nb)) = (self.nodes.get(a), self.nodes.get(b)) {
            for n in [na, nb] {
                if matches!(n.body, NodeBody::Host(_)) && n.ports[0].is_some() {
                    return Err(SimError::HostPortBusy(n.name.clone()));
                }
            }
        }
        let pa = self.free_port(a)?;
        let pb = self.free_port(b)?;
        self.nodes[a].ports[pa] = Some(Link {
            peer: b,
            peer_port: pb,
            latency,
        });
        self.nodes[b].ports[pb] = Some(Link {
            peer: a,
            peer_port: pa,
            latency,
        });
        Ok((pa, pb))
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn node_name(&self, node: NodeId) -> &str {
        &self.nodes[node].name
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_host(&self, node: NodeId) -> bool {
        matches!(
            self.nodes.get(node).map(|n| &n.body),
            Some(NodeBody::Host(_))
        )
    }

    pub fn host(&self, node: NodeId) -> Option<&Host> {
        match &self.nodes.get(node)?.body {
            NodeBody::Host(h) => Some(h),
            NodeBody::Switch(_) => None,
        }
    }

    pub fn host_mut(&mut self, node: NodeId) -> Option<&mut Host> {
        match &mut self.nodes.get_mut(node)?.body {
            NodeBody::Host(h) => Some(h),
            NodeBody::Switch(_) => None,
        }
    }

    pub fn stack(&self, node: NodeId) -> Option<&HostStack> {
        self.host(node).map(|h| &h.stack)
    }

    pub fn stack_mut(&mut self, node: NodeId) -> Option<&mut HostStack> {
        self.host_mut(node).map(|h| &mut h.stack)
    }

    pub fn switch(&self, node: NodeId) -> Option<&SwitchState> {
        match &self.nodes.get(node)?.body {
            NodeBody::Switch(s) => Some(s),
            NodeBody::Host(_) => None,
        }
    }

    pub fn switch_mut(&mut self, node: NodeId) -> Option<&mut SwitchState> {
        match &mut self.nodes.get_mut(node)?.body {
            NodeBody::Switch(s) => Some(s),
            NodeBody::Host(_) => None,
        }
    }

    /// Switches in the topology, in creation order.
    pub fn switches(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&id| matches!(self.nodes[id].body, NodeBody::Switch(_)))
            .collect()
    }

    /// Port on `from` whose link leads directly to `to`.
    pub fn port_toward(&self, from: NodeId, to: NodeId) -> Option<PortId> {
        self.nodes
            .get(from)?
            .ports
            .iter()
            .position(|l| l.is_some_and(|l| l.peer == to))
    }

    /// Port on `switch` through which `target` is reached, following the
    /// tree of links.
    pub fn port_leading_to(&self, switch: NodeId, target: NodeId) -> Option<PortId> {
        let node = self.nodes.get(switch)?;
        for (port, link) in node.ports.iter().enumerate() {
            let Some(link) = link else { continue };
            let mut stack = vec![(link.peer, switch)];
            while let Some((n, from)) = stack.pop() {
                if n == target {
                    return Some(port);
                }
                for l in self.nodes[n].ports.iter().flatten() {
                    if l.peer != from {
                        stack.push((l.peer, n));
                    }
                }
            }
        }
        None
    }

    pub fn add_app(&mut self, node: NodeId, app: Box<dyn Application>) -> Result<AppId, SimError> {
        let now = self.now;
        self.add_app_at(node, app, now)
    }

    /// Installs an application whose `start` runs at simulated time `at`.
    pub fn add_app_at(
        &mut self,
        node: NodeId,
        app: Box<dyn Application>,
        at: SimTime,
    ) -> Result<AppId, SimError> {
        let name = self
            .nodes
            .get(node)
            .ok_or(SimError::NoSuchNode(node))?
            .name
            .clone();
        let host = self.host_mut(node).ok_or(SimError::NotAHost(name))?;
        let id = host.apps.len();
        host.apps.push(Some(app));
        self.schedule(at.max(self.now), Event::AppStart { node, app: id });
        Ok(id)
    }

    pub fn app<T: Application>(&self, node: NodeId, app: AppId) -> Option<&T> {
        self.host(node)?
            .apps
            .get(app)?
            .as_deref()?
            .as_any()
            .downcast_ref()
    }

    pub fn app_mut<T: Application>(&mut self, node: NodeId, app: AppId) -> Option<&mut T> {
        self.host_mut(node)?
            .apps
            .get_mut(app)?
            .as_deref_mut()?
            .as_any_mut()
            .downcast_mut()
    }

    pub fn app_count(&self, node: NodeId) -> usize {
        self.host(node).map_or(0, |h| h.apps.len())
    }

    pub fn capture(&self) -> &[CaptureRecord] {
        &self.capture
    }

    pub fn take_capture(&mut self) -> Vec<CaptureRecord> {
        std::mem::take(&mut self.capture)
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    fn schedule(&mut self, at: SimTime, event: Event) {
        self.seq += 1;
        self.queue.insert((at, self.seq), event);
    }

    /// Sends a frame out of a host's interface as if the host emitted it.
    pub fn inject(&mut self, node: NodeId, frame: Frame) {
        let now = self.now;
        self.schedule(now, Event::Transmit { node, frame });
    }

    fn record(&mut self, node: NodeId, direction: Direction, frame: &Frame) {
        if self.capture_enabled {
            self.capture.push(CaptureRecord {
                sim_time: self.now,
                node: self.nodes[node].name.clone(),
                direction,
                frame: frame.clone(),
            });
        }
    }

    fn send_on_port(&mut self, node: NodeId, port: PortId, frame: Frame) {
        if let Some(Some(link)) = self.nodes[node].ports.get(port).copied() {
            let at = self.now + link.latency;
            self.schedule(
                at,
                Event::Deliver {
                    node: link.peer,
                    port: link.peer_port,
                    frame,
                },
            );
        }
    }

    fn with_app<F>(&mut self, node: NodeId, app: AppId, f: F) -> Vec<StackOutput>
    where
        F: FnOnce(&mut dyn Application, &mut HostCtx<'_>),
    {
        let now = self.now;
        let mut out = Vec::new();
        let n = &mut self.nodes[node];
        let NodeBody::Host(host) = &mut n.body else {
            return out;
        };
        let Some(mut a) = host.apps.get_mut(app).and_then(Option::take) else {
            return out;
        };
        {
            let mut ctx = HostCtx {
                now,
                app,
                name: &n.name,
                stack: &mut host.stack,
                out: &mut out,
            };
            f(a.as_mut(), &mut ctx);
        }
        host.apps[app] = Some(a);
        out
    }

    fn drain(&mut self, node: NodeId, outputs: Vec<StackOutput>) {
        let mut queue: VecDeque<StackOutput> = outputs.into();
        while let Some(o) = queue.pop_front() {
            match o {
                StackOutput::Transmit { frame, delay: 0 } => self.host_transmit(node, frame),
                StackOutput::Transmit { frame, delay } => {
                    let at = self.now + delay;
                    self.schedule(at, Event::Transmit { node, frame });
                }
                StackOutput::Timer { delay, timer } => {
                    let at = self.now + delay;
                    self.schedule(at, Event::StackTimer { node, timer });
                }
                StackOutput::AppTimer { app, delay, token } => {
                    let at = self.now + delay;
                    self.schedule(at, Event::AppTimer { node, app, token });
                }
                StackOutput::App { app, event } => {
                    let more = self.with_app(node, app, |a, ctx| a.on_event(ctx, event));
                    queue.extend(more);
                }
            }
        }
    }

    fn host_transmit(&mut self, node: NodeId, frame: Frame) {
        self.record(node, Direction::Out, &frame);
        self.send_on_port(node, 0, frame);
    }

    fn deliver(&mut self, node: NodeId, port: PortId, frame: Frame) {
        self.record(node, Direction::In, &frame);
        let now = self.now;
        match &mut self.nodes[node].body {
            NodeBody::Switch(state) => {
                let egress = switch_forward(state, port, &frame);
                for (p, f) in egress {
                    self.record(node, Direction::Out, &f);
                    self.send_on_port(node, p, f);
                }
            }
            NodeBody::Host(host) => {
                let apps = host.apps.len();
                let mut consumed = false;
                for app in 0..apps {
                    let mut verdict = FrameVerdict::Pass;
                    let out = self.with_app(node, app, |a, ctx| verdict = a.on_frame(ctx, &frame));
                    self.drain(node, out);
                    if verdict == FrameVerdict::Consumed {
                        consumed = true;
                        break;
                    }
                }
                if !consumed {
                    let mut out = Vec::new();
                    if let Some(stack) = self.stack_mut(node) {
                        stack.receive(now, &mut out, &frame);
                    }
                    self.drain(node, out);
                }
            }
        }
    }

    /// Processes the next event; false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(((at, _), event)) = self.queue.pop_first() else {
            return false;
        };
        self.now = at;
        self.events_processed += 1;
        match event {
            Event::Deliver { node, port, frame } => self.deliver(node, port, frame),
            Event::Transmit { node, frame } => self.host_transmit(node, frame),
            Event::StackTimer { node, timer } => {
                let mut out = Vec::new();
                if let Some(stack) = self.stack_mut(node) {
                    stack.on_timer(at, &mut out, timer);
                }
                self.drain(node, out);
            }
            Event::AppTimer { node, app, token } => {
                let out = self.with_app(node, app, |a, ctx| {
                    a.on_event(ctx, AppEvent::Timer { token })
                });
                self.drain(node, out);
            }
            Event::AppStart { node, app } => {
                let out = self.with_app(node, app, |a, ctx| a.start(ctx));
                self.drain(node, out);
            }
        }
        true
    }

    /// Runs until `stop` holds, the queue empties, or the next event would
    /// fall after `limit`.
    pub fn run_until<F>(&mut self, limit: SimTime, mut stop: F) -> RunOutcome
    where
        F: FnMut(&Simulation) -> bool,
    {
        loop {
            if stop(self) {
                return RunOutcome::Stopped;
            }
            match self.queue.keys().next() {
                None => return RunOutcome::Quiescent,
                Some(&(at, _)) if at > limit => {
                    self.now = limit;
                    return RunOutcome::LimitReached;
                }
                Some(_) => {
                    self.step();
                }
            }
        }
    }

    pub fn run_for(&mut self, duration: SimTime) -> RunOutcome {
        let limit = self.now.saturating_add(duration);
        self.run_until(limit, |_| false)
    }
}
