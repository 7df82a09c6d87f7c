//! Run orchestration: build the network, start SECCs, attach the MitM,
//! charge every EV and collect the report.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::topology::{mitm_switch, NodeDecl, NodeKind, TopologySpec};
use crate::attacks::{
    mitm_app, mitm_attach, mitm_install_scenario, spoof_neighbors, AttackError, AttackScenario,
    MitmStats,
};
use crate::controllers::{
    secc_start, ChargeSessionReport, EvccApp, Outcome, SeccApp, SeccStartError, ServedSession,
};
use crate::netsim::{
    build_network, derive_seed, write_jsonl, AppId, BuildError, CaptureRecord, NodeId, SimError,
    SimTime, Simulation, SECONDS,
};
use crate::securechannel::{generate_identity, Identity, TrustAnchor};

pub const DEFAULT_SEED: u64 = 1;
pub const SEED_ENV: &str = "V2GEMU_SEED";
pub const REPORT_FORMAT: &str = "v2gemu-run-report";
pub const REPORT_VERSION: u32 = 1;
/// Time allowed after the last EV finishes for connection teardown.
pub const SETTLE_TIME: SimTime = SECONDS;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{SEED_ENV}={value:?} is not an unsigned integer")]
pub struct SeedError {
    pub value: String,
}

/// Seed precedence: command line, then file, then environment, then the
/// built-in default.
pub fn resolve_seed(
    cli: Option<u64>,
    file: Option<u64>,
    env: Option<&str>,
) -> Result<u64, SeedError> {
    if let Some(s) = cli.or(file) {
        return Ok(s);
    }
    match env {
        Some(v) => v.trim().parse().map_err(|_| SeedError {
            value: v.to_string(),
        }),
        None => Ok(DEFAULT_SEED),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Overrides the file's seed.
    pub seed: Option<u64>,
    /// Start every EV at time zero instead of one after another.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Expectation {
    pub ev: String,
    pub expected: Outcome,
    /// Absent when the EV never got to run.
    pub actual: Option<Outcome>,
    pub met: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub spec_digest: String,
    pub parallel: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<AttackScenario>,
    pub per_ev: BTreeMap<String, ChargeSessionReport>,
    pub per_se: BTreeMap<String, Vec<ServedSession>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mitm_stats: Option<MitmStats>,
    pub expectations: Vec<Expectation>,
    pub expectations_met: bool,
    pub timed_out: bool,
    pub finished_at: SimTime,
    pub capture_records: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capture_path: Option<String>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub capture: Vec<CaptureRecord>,
}

impl RunOutput {
    pub fn capture_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &self.capture).expect("writing to memory");
        buf
    }

    /// Writes the JSON-lines capture and records its path in the report.
    pub fn write_capture(&mut self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.capture_jsonl())?;
        self.report.capture_path = Some(path.display().to_string());
        Ok(())
    }

    pub fn write_report(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.report.to_json())
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("building the network: {0}")]
    Build(#[from] BuildError),
    #[error("node {node}: {reason}")]
    Pki { node: String, reason: String },
    #[error("starting SECC {node}: {source}")]
    Secc {
        node: String,
        source: SeccStartError,
    },
    #[error("attaching the MitM: {0}")]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid topology: {0}")]
    Topology(#[from] super::TopologyError),
    #[error("duration limit reached with sessions unfinished")]
    SimulationTimeout(Box<RunOutput>),
}

fn read_json<T: for<'de> Deserialize<'de>>(
    spec: &TopologySpec,
    node: &NodeDecl,
    value: &str,
) -> Result<T, RunError> {
    let path = spec.resolve_path(value);
    let pki = |reason: String| RunError::Pki {
        node: node.name.clone(),
        reason,
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| pki(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| pki(format!("parsing {}: {e}", path.display())))
}

/// Anchor files may hold a bare trust anchor or a whole identity.
fn load_anchor(spec: &TopologySpec, node: &NodeDecl, value: &str) -> Result<TrustAnchor, RunError> {
    match read_json::<TrustAnchor>(spec, node, value) {
        Ok(a) => Ok(a),
        Err(first) => read_json::<Identity>(spec, node, value)
            .map(|i| i.anchor())
            .map_err(|_| first),
    }
}

/// Automatically provisioned PKI: one root per run, derived from the seed.
struct AutoPki {
    root: Identity,
    rng: ChaCha20Rng,
}

impl AutoPki {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "pki"));
        let root = generate_identity("v2gemu-root", None, &mut rng);
        Self { root, rng }
    }

    fn issue(&mut self, name: &str) -> Identity {
        generate_identity(name, Some(&self.root), &mut self.rng)
    }
}

struct Ev {
    name: String,
    node: NodeId,
    app: Option<AppId>,
    builder: Option<EvccApp>,
}

fn ev_finished(sim: &Simulation, ev: &Ev) -> bool {
    ev.app.is_none_or(|a| {
        sim.app::<EvccApp>(ev.node, a)
            .is_some_and(EvccApp::is_finished)
    })
}

pub fn run(spec: &TopologySpec, options: &RunOptions) -> Result<RunOutput, RunError> {
    let seed = options.seed.or(spec.seed).unwrap_or(DEFAULT_SEED);
    let mut sim = build_network(&spec.network_spec(), seed)?;
    let node_id = |sim: &Simulation, name: &str| sim.node_id(name).expect("node built from spec");
    let mut pki = AutoPki::new(seed);

    let mut seccs: Vec<(String, NodeId, AppId)> = Vec::new();
    for n in spec.of_kind(NodeKind::Se) {
        let cfg = spec.se_config(n)?;
        let identity = match (&cfg.tls_identity, cfg.tls) {
            (_, false) => None,
            (Some(path), true) => Some(read_json::<Identity>(spec, n, path)?),
            (None, true) => Some(pki.issue(&n.name)),
        };
        let node = node_id(&sim, &n.name);
        let app = secc_start(
            &mut sim,
            node,
            cfg,
            identity,
            derive_seed(seed, &format!("secc:{}", n.name)),
        )
        .map_err(|source| RunError::Secc {
            node: n.name.clone(),
            source,
        })?;
        seccs.push((n.name.clone(), node, app));
    }

    let mitm = spec.of_kind(NodeKind::Mitm).next();
    if let Some(m) = mitm {
        let node = node_id(&sim, &m.name);
        let scenario = spec
            .scenario
            .clone()
            .unwrap_or(AttackScenario::PassthroughLogger);
        mitm_install_scenario(&mut sim, node, scenario, derive_seed(seed, "mitm"))?;
        if m.capture.redirect {
            let switch = mitm_switch(spec, m).expect("validated");
            let victims: Vec<NodeId> = m.victims.iter().map(|v| node_id(&sim, v)).collect();
            mitm_attach(&mut sim, &switch.name, node, &victims)?;
        }
        if m.capture.spoof {
            spoof_neighbors(&mut sim, node)?;
        }
    }

    let mut evs = Vec::new();
    for n in spec.of_kind(NodeKind::Ev) {
        let cfg = spec.ev_config(n)?;
        let anchor = match (&cfg.tls_anchor, cfg.tls) {
            (_, false) => None,
            (Some(path), true) => Some(load_anchor(spec, n, path)?),
            (None, true) => Some(pki.root.anchor()),
        };
        let app = EvccApp::new(cfg, anchor, derive_seed(seed, &format!("evcc:{}", n.name)));
        evs.push(Ev {
            name: n.name.clone(),
            node: node_id(&sim, &n.name),
            app: None,
            builder: Some(app),
        });
    }

    let limit = spec.duration_limit;
    let mut timed_out = false;
    if options.parallel {
        for ev in &mut evs {
            let app = ev.builder.take().expect("fresh");
            ev.app = Some(sim.add_app(ev.node, Box::new(app))?);
        }
        sim.run_until(limit, |s| evs.iter().all(|e| ev_finished(s, e)));
        timed_out = !evs.iter().all(|e| ev_finished(&sim, e));
    } else {
        for ev in &mut evs {
            let app = ev.builder.take().expect("fresh");
            ev.app = Some(sim.add_app(ev.node, Box::new(app))?);
            let ev = &*ev;
            sim.run_until(limit, |s| ev_finished(s, ev));
            if !ev_finished(&sim, ev) {
                timed_out = true;
                break;
            }
        }
    }
    if !timed_out {
        let until = sim.now().saturating_add(SETTLE_TIME).min(limit);
        sim.run_until(until, |_| false);
    }

    let mut per_ev = BTreeMap::new();
    let mut expectations = Vec::new();
    for ev in &evs {
        let report = ev
            .app
            .and_then(|a| sim.app::<EvccApp>(ev.node, a))
            .map(|a| a.report().clone());
        let decl = spec.node(&ev.name).expect("ev from spec");
        let expected = spec.expected_outcome(decl);
        let finished = ev_finished(&sim, ev) && ev.app.is_some();
        let actual = report.as_ref().filter(|_| finished).map(|r| r.outcome);
        expectations.push(Expectation {
            ev: ev.name.clone(),
            expected,
            actual,
            met: actual == Some(expected),
        });
        if let Some(r) = report {
            per_ev.insert(ev.name.clone(), r);
        }
    }
    let per_se = seccs
        .iter()
        .map(|(name, node, app)| {
            let served = sim
                .app::<SeccApp>(*node, *app)
                .map(|s| s.served().to_vec())
                .unwrap_or_default();
            (name.clone(), served)
        })
        .collect();
    let mitm_stats = mitm.and_then(|m| mitm_app(&sim, node_id(&sim, &m.name)).map(|a| a.stats()));

    let capture = sim.take_capture();
    let report = RunReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        seed,
        spec_digest: spec.digest(),
        parallel: options.parallel,
        scenario: mitm.map(|_| {
            spec.scenario
                .clone()
                .unwrap_or(AttackScenario::PassthroughLogger)
        }),
        per_ev,
        per_se,
        mitm_stats,
        expectations_met: expectations.iter().all(|e| e.met),
        expectations,
        timed_out,
        finished_at: sim.now(),
        capture_records: capture.len(),
        capture_path: None,
    };
    let out = RunOutput { report, capture };
    if timed_out {
        return Err(RunError::SimulationTimeout(Box::new(out)));
    }
    Ok(out)
}
