//! Deterministic simulated network: hosts with a small stack, learning
//! switches with flow tables, and point-to-point links.

pub mod addr;
pub mod capture;
pub mod frame;
pub mod sim;
pub mod stack;
pub mod switch;
pub mod topology;

/// Simulated time in microseconds.
pub type SimTime = u64;

pub const MICROS: SimTime = 1;
pub const MILLIS: SimTime = 1_000;
pub const SECONDS: SimTime = 1_000_000;

pub use addr::{AddressParseError, LinkAddress, NetAddress, SockAddr};
pub use capture::{
    read_jsonl, reassemble_streams, write_jsonl, write_pcap, CaptureError, CaptureRecord,
    Direction, CAPTURE_FORMAT, CAPTURE_VERSION, PCAP_LINKTYPE,
};
pub use frame::{Frame, FrameKind, NetMeta};
pub use sim::{
    derive_seed, Application, FrameVerdict, HostCtx, NodeId, RunOutcome, SimError, Simulation,
};
pub use stack::{AppEvent, AppId, ConnId, StackConfig, StackError, StreamError};
pub use switch::{switch_forward, FlowAction, FlowMatch, FlowRule, PortId, SwitchState};
pub use topology::{
    build_network, resolved_addresses, BuildError, LinkSpec, NetworkSpec, NodeRole, NodeSpec,
    DEFAULT_LATENCY,
};
