//! Declarative topology files and run orchestration.

mod run;
mod topology;


pub use run::{
    resolve_seed, run, Expectation, RunError, RunOptions, RunOutput, RunReport, SeedError,
    DEFAULT_SEED, REPORT_FORMAT, REPORT_VERSION, SEED_ENV, SETTLE_TIME,
};
pub use topology::{
    mitm_switch, parse_topology, parse_topology_file, CaptureMode, NodeDecl, NodeKind,
    TopologyError, TopologySpec, DEFAULT_DURATION, DEFAULT_PROXY_PORT,
};
