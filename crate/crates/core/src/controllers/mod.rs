//! EVCC and SECC state machines running as simulator applications.

mod channel;
mod config;
mod evcc;
mod negotiation;
mod report;
mod secc;


pub use channel::{ChannelError, ChannelEvent, MessageChannel};
pub use config::{parse_properties, ConfigError, EvConfig, Property, SeConfig, DEFAULT_V2G_PORT};
pub use evcc::EvccApp;
pub use negotiation::{assign_session_id, negotiate_protocol, offer_matches, FailedNoNegotiation};
pub use report::{ChargeSessionReport, Flow, Outcome, TranscriptEntry};
pub use secc::{secc_start, SeccApp, SeccReply, SeccSession, SeccStartError, ServedSession};
