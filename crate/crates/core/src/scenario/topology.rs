//! Topology files: a header of run-wide keys followed by one section per
//! node and an optional `[scenario]` section.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attacks::AttackScenario;
use crate::controllers::{ConfigError, EvConfig, Outcome, Property, SeConfig};
use crate::messages::EnergyTransferMode;
use crate::netsim::{
    build_network, BuildError, LinkAddress, LinkSpec, NetAddress, NetworkSpec, NodeSpec, SimTime,
    DEFAULT_LATENCY, MICROS, MILLIS, SECONDS,
};

pub const DEFAULT_DURATION: SimTime = 600 * SECONDS;
pub const DEFAULT_PROXY_PORT: u16 = 8080;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: unknown property key {key:?}")]
    UnknownPropertyKey { key: String, line: usize },
    #[error("line {line}: {key}={value:?}: {reason}")]
    ConstraintViolation {
        key: String,
        value: String,
        reason: String,
        line: usize,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl From<ConfigError> for TopologyError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::UnknownPropertyKey { key, line } => {
                TopologyError::UnknownPropertyKey { key, line }
            }
            ConfigError::ConstraintViolation {
                key,
                value,
                reason,
                line,
            } => TopologyError::ConstraintViolation {
                key,
                value,
                reason,
                line,
            },
            ConfigError::Syntax { reason, line } => TopologyError::Parse { line, reason },
        }
    }
}

fn violation(p: &Property, reason: impl Into<String>) -> TopologyError {
    p.violation(reason).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Ev,
    Se,
    Switch,
    Mitm,
    Host,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Ev => "ev",
            NodeKind::Se => "se",
            NodeKind::Switch => "switch",
            NodeKind::Mitm => "mitm",
            NodeKind::Host => "host",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            NodeKind::Ev,
            NodeKind::Se,
            NodeKind::Switch,
            NodeKind::Mitm,
            NodeKind::Host,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }

    pub fn is_host(self) -> bool {
        self != NodeKind::Switch
    }
}

/// How the MitM gets hold of victim traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureMode {
    pub redirect: bool,
    pub spoof: bool,
}

impl Default for CaptureMode {
    fn default() -> Self {
        Self {
            redirect: true,
            spoof: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDecl {
    pub name: String,
    pub kind: NodeKind,
    /// Line of the section header.
    pub line: usize,
    pub links: Vec<String>,
    pub link_address: Option<LinkAddress>,
    pub net_address: Option<NetAddress>,
    /// Controller properties for `ev` and `se` nodes.
    pub properties: Vec<Property>,
    pub expect: Option<Outcome>,
    pub capture: CaptureMode,
    /// Empty means every other host.
    pub victims: Vec<String>,
}

impl NodeDecl {
    fn new(name: &str, kind: NodeKind, line: usize) -> Self {
        Self {
            name: name.to_string(),
            kind,
            line,
            links: Vec::new(),
            link_address: None,
            net_address: None,
            properties: Vec::new(),
            expect: None,
            capture: CaptureMode::default(),
            victims: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologySpec {
    pub seed: Option<u64>,
    pub duration_limit: SimTime,
    pub latency: SimTime,
    /// Expected outcome for EVs without their own `expect`.
    pub expect: Option<Outcome>,
    pub nodes: Vec<NodeDecl>,
    pub scenario: Option<AttackScenario>,
    /// Directory relative paths in properties resolve against.
    pub base_dir: Option<PathBuf>,
}

impl TopologySpec {
    pub fn node(&self, name: &str) -> Option<&NodeDecl> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn of_kind(&self, kind: NodeKind) -> impl Iterator<Item = &NodeDecl> {
        self.nodes.iter().filter(move |n| n.kind == kind)
    }

    pub fn ev_config(&self, node: &NodeDecl) -> Result<EvConfig, TopologyError> {
        Ok(EvConfig::from_properties(&node.properties)?)
    }

    pub fn se_config(&self, node: &NodeDecl) -> Result<SeConfig, TopologyError> {
        Ok(SeConfig::from_properties(&node.properties)?)
    }

    pub fn expected_outcome(&self, node: &NodeDecl) -> Outcome {
        node.expect.or(self.expect).unwrap_or(Outcome::Completed)
    }

    pub fn resolve_path(&self, value: &str) -> PathBuf {
        match &self.base_dir {
            Some(dir) if Path::new(value).is_relative() => dir.join(value),
            _ => PathBuf::from(value),
        }
    }

    /// Comment-free rendering that parses back to the same spec.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        if let Some(seed) = self.seed {
            writeln!(s, "seed = {seed}").unwrap();
        }
        writeln!(s, "duration = {}", format_duration(self.duration_limit)).unwrap();
        writeln!(s, "latency = {}", format_duration(self.latency)).unwrap();
        if let Some(e) = self.expect {
            writeln!(s, "expect = {e}").unwrap();
        }
        for n in &self.nodes {
            writeln!(s, "\n[{} {}]", n.kind.as_str(), n.name).unwrap();
            if !n.links.is_empty() {
                writeln!(s, "links = {}", n.links.join(", ")).unwrap();
            }
            if let Some(a) = n.link_address {
                writeln!(s, "link.address = {a}").unwrap();
            }
            if let Some(a) = n.net_address {
                writeln!(s, "net.address = {a}").unwrap();
            }
            if let Some(e) = n.expect {
                writeln!(s, "expect = {e}").unwrap();
            }
            if n.kind == NodeKind::Mitm {
                let mut modes = Vec::new();
                if n.capture.redirect {
                    modes.push("redirect");
                }
                if n.capture.spoof {
                    modes.push("spoof");
                }
                writeln!(s, "capture = {}", modes.join(", ")).unwrap();
                if !n.victims.is_empty() {
                    writeln!(s, "victims = {}", n.victims.join(", ")).unwrap();
                }
            }
            for p in &n.properties {
                writeln!(s, "{} = {}", p.key, p.value).unwrap();
            }
        }
        if let Some(sc) = &self.scenario {
            writeln!(s, "\n[scenario]\ntype = {}", sc.name()).unwrap();
            match sc {
                AttackScenario::SdpPortRewrite {
                    new_port,
                    rewrite_address,
                } => writeln!(
                    s,
                    "new.port = {new_port}\nrewrite.address = {rewrite_address}"
                )
                .unwrap(),
                AttackScenario::DosVersionRewrite { major, minor } => {
                    writeln!(s, "major = {major}\nminor = {minor}").unwrap()
                }
                AttackScenario::ServiceListTamper { add, remove } => {
                    let join = |m: &[EnergyTransferMode]| {
                        m.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", ")
                    };
                    writeln!(s, "add = {}\nremove = {}", join(add), join(remove)).unwrap()
                }
                _ => {}
            }
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    pub fn network_spec(&self) -> NetworkSpec {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let mut spec = if n.kind.is_host() {
                    NodeSpec::host(&n.name)
                } else {
                    NodeSpec::switch(&n.name)
                };
                spec.link_address = n.link_address.or_else(|| match n.kind {
                    NodeKind::Ev => EvConfig::from_properties(&n.properties)
                        .ok()
                        .and_then(|c| c.evcc_id),
                    _ => None,
                });
                spec.net_address = n.net_address;
                spec
            })
            .collect();
        let links = self
            .nodes
            .iter()
            .flat_map(|n| {
                n.links.iter().map(|peer| LinkSpec {
                    latency: self.latency,
                    ..LinkSpec::new(&n.name, peer)
                })
            })
            .collect();
        NetworkSpec {
            nodes,
            links,
            ..NetworkSpec::default()
        }
    }
}

fn format_duration(t: SimTime) -> String {
    if t.is_multiple_of(SECONDS) {
        format!("{}s", t / SECONDS)
    } else if t.is_multiple_of(MILLIS) {
        format!("{}ms", t / MILLIS)
    } else {
        format!("{t}us")
    }
}

fn parse_duration(p: &Property) -> Result<SimTime, TopologyError> {
    let v = p.value.as_str();
    let (digits, unit) = v
        .find(|c: char| !c.is_ascii_digit())
        .map_or((v, "s"), |i| (&v[..i], v[i..].trim()));
    let scale = match unit {
        "us" => MICROS,
        "ms" => MILLIS,
        "s" => SECONDS,
        _ => return Err(violation(p, "expected a duration like 500ms, 2s or 100us")),
    };
    let n: u64 = digits
        .parse()
        .map_err(|_| violation(p, "expected a duration like 500ms, 2s or 100us"))?;
    n.checked_mul(scale)
        .ok_or_else(|| violation(p, "duration too large"))
}

fn parse_outcome(p: &Property) -> Result<Outcome, TopologyError> {
    p.value.parse().map_err(|e: String| violation(p, e))
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_modes(p: &Property) -> Result<Vec<EnergyTransferMode>, TopologyError> {
    split_list(&p.value)
        .iter()
        .map(|m| p.mode(m).map_err(Into::into))
        .collect()
}

fn parse_scenario(props: &[Property], line: usize) -> Result<AttackScenario, TopologyError> {
    let ty = props
        .iter()
        .find(|p| p.key == "type")
        .ok_or_else(|| TopologyError::Parse {
            line,
            reason: "[scenario] needs a type".into(),
        })?;
    let allowed: &[&str] = match ty.value.as_str() {
        "PassthroughLogger" | "PowerDeliveryStop" | "Blackhole" => &[],
        "SdpPortRewrite" => &["new.port", "rewrite.address"],
        "DosVersionRewrite" => &["major", "minor"],
        "ServiceListTamper" => &["add", "remove"],
        _ => {
            return Err(violation(
                ty,
                "expected PassthroughLogger, SdpPortRewrite, DosVersionRewrite, ServiceListTamper, PowerDeliveryStop or Blackhole",
            ))
        }
    };
    if let Some(p) = props
        .iter()
        .find(|p| p.key != "type" && !allowed.contains(&p.key.as_str()))
    {
        return Err(TopologyError::UnknownPropertyKey {
            key: p.key.clone(),
            line: p.line,
        });
    }
    let get = |k: &str| props.iter().find(|p| p.key == k);
    let scenario = match ty.value.as_str() {
        "PassthroughLogger" => AttackScenario::PassthroughLogger,
        "PowerDeliveryStop" => AttackScenario::PowerDeliveryStop,
        "Blackhole" => AttackScenario::Blackhole,
        "SdpPortRewrite" => {
            let new_port = match get("new.port") {
                Some(p) => {
                    let port: u16 = p.number()?;
                    if port == 0 {
                        return Err(violation(p, "port must be non-zero"));
                    }
                    port
                }
                None => DEFAULT_PROXY_PORT,
            };
            let rewrite_address = get("rewrite.address")
                .map(|p| p.boolean())
                .transpose()?
                .unwrap_or(false);
            AttackScenario::SdpPortRewrite {
                new_port,
                rewrite_address,
            }
        }
        "DosVersionRewrite" => AttackScenario::DosVersionRewrite {
            major: get("major").map(|p| p.number()).transpose()?.unwrap_or(0),
            minor: get("minor").map(|p| p.number()).transpose()?.unwrap_or(0),
        },
        _ => AttackScenario::ServiceListTamper {
            add: get("add").map(parse_modes).transpose()?.unwrap_or_default(),
            remove: get("remove")
                .map(parse_modes)
                .transpose()?
                .unwrap_or_default(),
        },
    };
    Ok(scenario)
}

enum Section {
    Header,
    Node(usize),
    Scenario,
}

fn apply_node_key(node: &mut NodeDecl, p: Property) -> Result<(), TopologyError> {
    match p.key.as_str() {
        "links" | "link" => node.links.extend(split_list(&p.value)),
        "link.address" => {
            node.link_address = Some(
                p.value
                    .parse()
                    .map_err(|_| violation(&p, "expected a link address like 02:00:00:00:00:01"))?,
            )
        }
        "net.address" => {
            node.net_address = Some(
                p.value
                    .parse()
                    .map_err(|_| violation(&p, "expected a network address like fe80::1"))?,
            )
        }
        "expect" if node.kind == NodeKind::Ev => node.expect = Some(parse_outcome(&p)?),
        "capture" if node.kind == NodeKind::Mitm => {
            let mut mode = CaptureMode {
                redirect: false,
                spoof: false,
            };
            for m in split_list(&p.value) {
                match m.as_str() {
                    "redirect" => mode.redirect = true,
                    "spoof" => mode.spoof = true,
                    _ => return Err(violation(&p, "expected a list of redirect, spoof")),
                }
            }
            if !mode.redirect && !mode.spoof {
                return Err(violation(&p, "at least one capture technique required"));
            }
            node.capture = mode;
        }
        "victims" if node.kind == NodeKind::Mitm => node.victims = split_list(&p.value),
        _ if matches!(node.kind, NodeKind::Ev | NodeKind::Se) => node.properties.push(p),
        _ => {
            return Err(TopologyError::UnknownPropertyKey {
                key: p.key,
                line: p.line,
            })
        }
    }
    Ok(())
}

pub fn parse_topology(text: &str) -> Result<TopologySpec, TopologyError> {
    let mut spec = TopologySpec {
        seed: None,
        duration_limit: DEFAULT_DURATION,
        latency: DEFAULT_LATENCY,
        expect: None,
        nodes: Vec::new(),
        scenario: None,
        base_dir: None,
    };
    let mut section = Section::Header;
    let mut scenario_props: Vec<Property> = Vec::new();
    let mut seen_keys: BTreeSet<String> = BTreeSet::new();
    let mut scenario_line = None;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if let Some(inner) = t.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| TopologyError::Parse {
                    line,
                    reason: "unterminated section header".into(),
                })?;
            let words: Vec<&str> = inner.split_whitespace().collect();
            seen_keys.clear();
            section = match words.as_slice() {
                ["scenario"] => {
                    if scenario_line.is_some() {
                        return Err(TopologyError::Parse {
                            line,
                            reason: "only one [scenario] section allowed".into(),
                        });
                    }
                    scenario_line = Some(line);
                    Section::Scenario
                }
                [kind, name] => {
                    let kind = NodeKind::parse(kind).ok_or_else(|| TopologyError::Parse {
                        line,
                        reason: format!(
                            "unknown node kind {kind:?}; expected ev, se, switch, mitm or host"
                        ),
                    })?;
                    if !name
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
                    {
                        return Err(TopologyError::Parse {
                            line,
                            reason: format!(
                                "node name {name:?} may only use letters, digits, '-' and '_'"
                            ),
                        });
                    }
                    if let Some(prev) = spec.node(name) {
                        return Err(TopologyError::ConstraintViolation {
                            key: "name".into(),
                            value: name.to_string(),
                            reason: format!(
                                "duplicate node name (first declared on line {})",
                                prev.line
                            ),
                            line,
                        });
                    }
                    spec.nodes.push(NodeDecl::new(name, kind, line));
                    Section::Node(spec.nodes.len() - 1)
                }
                _ => {
                    return Err(TopologyError::Parse {
                        line,
                        reason: "expected [<kind> <name>] or [scenario]".into(),
                    })
                }
            };
            continue;
        }
        let (k, v) = t.split_once('=').ok_or_else(|| TopologyError::Parse {
            line,
            reason: format!("expected key = value, got {t:?}"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(TopologyError::Parse {
                line,
                reason: "empty key".into(),
            });
        }
        if !seen_keys.insert(key.to_string()) {
            return Err(TopologyError::Parse {
                line,
                reason: format!("duplicate key {key:?} in this section"),
            });
        }
        let p = Property::new(key, v.trim(), line);
        match section {
            Section::Header => match key {
                "seed" => spec.seed = Some(p.number()?),
                "duration" => {
                    spec.duration_limit = parse_duration(&p)?;
                    if spec.duration_limit == 0 {
                        return Err(violation(&p, "must be positive"));
                    }
                }
                "latency" => spec.latency = parse_duration(&p)?,
                "expect" => spec.expect = Some(parse_outcome(&p)?),
                _ => {
                    return Err(TopologyError::UnknownPropertyKey {
                        key: key.to_string(),
                        line,
                    })
                }
            },
            Section::Node(idx) => apply_node_key(&mut spec.nodes[idx], p)?,
            Section::Scenario => scenario_props.push(p),
        }
    }

    if let Some(line) = scenario_line {
        spec.scenario = Some(parse_scenario(&scenario_props, line)?);
    }
    validate(&spec, scenario_line)?;
    Ok(spec)
}

pub fn parse_topology_file(path: &Path) -> Result<TopologySpec, TopologyError> {
    let text = std::fs::read_to_string(path).map_err(|source| TopologyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut spec = parse_topology(&text)?;
    spec.base_dir = path.parent().map(Path::to_path_buf);
    Ok(spec)
}

fn node_violation(
    node: &NodeDecl,
    key: &str,
    value: &str,
    reason: impl Into<String>,
) -> TopologyError {
    TopologyError::ConstraintViolation {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
        line: node.line,
    }
}

fn validate(spec: &TopologySpec, scenario_line: Option<usize>) -> Result<(), TopologyError> {
    let mitms: Vec<&NodeDecl> = spec.of_kind(NodeKind::Mitm).collect();
    if let Some(second) = mitms.get(1) {
        return Err(node_violation(
            second,
            "kind",
            "mitm",
            "at most one mitm node is supported",
        ));
    }
    if let (Some(line), None) = (scenario_line, mitms.first()) {
        return Err(TopologyError::ConstraintViolation {
            key: "scenario".into(),
            value: spec.scenario.as_ref().map_or("", |s| s.name()).into(),
            reason: "a scenario needs a mitm node".into(),
            line,
        });
    }
    if spec.of_kind(NodeKind::Se).next().is_none() && spec.of_kind(NodeKind::Ev).next().is_none() {
        return Err(TopologyError::Parse {
            line: 1,
            reason: "topology declares neither ev nor se nodes".into(),
        });
    }

    for n in &spec.nodes {
        match n.kind {
            NodeKind::Ev => {
                spec.ev_config(n)?;
            }
            NodeKind::Se => {
                spec.se_config(n)?;
            }
            _ => {}
        }
        let mut peers = BTreeSet::new();
        for peer in &n.links {
            if spec.node(peer).is_none() {
                return Err(node_violation(n, "links", peer, "unknown node"));
            }
            if !peers.insert(peer) {
                return Err(node_violation(n, "links", peer, "link listed twice"));
            }
            if let Some(back) = spec.node(peer).filter(|p| p.links.contains(&n.name)) {
                if back.line < n.line {
                    return Err(node_violation(
                        n,
                        "links",
                        peer,
                        format!("link already declared by {}", back.name),
                    ));
                }
            }
        }
    }

    if let Some(m) = mitms.first() {
        for v in &m.victims {
            match spec.node(v) {
                Some(d) if d.kind.is_host() && d.name != m.name => {}
                _ => {
                    return Err(node_violation(
                        m,
                        "victims",
                        v,
                        "victims must be other host nodes",
                    ))
                }
            }
        }
        if m.capture.redirect && mitm_switch(spec, m).is_none() {
            return Err(node_violation(
                m,
                "capture",
                "redirect",
                "redirect needs the mitm linked to a switch",
            ));
        }
    }

    let mut lines: BTreeMap<&str, usize> = BTreeMap::new();
    for n in &spec.nodes {
        lines.insert(&n.name, n.line);
    }
    if let Err(e) = build_network(&spec.network_spec(), 0) {
        let (name, reason) = match &e {
            BuildError::DuplicateName(n) => (n.clone(), e.to_string()),
            BuildError::DanglingLink { a, .. }
            | BuildError::SelfLink { a, .. }
            | BuildError::Loop { a, .. } => (a.clone(), e.to_string()),
            BuildError::AddressCollision { second, .. } => (second.clone(), e.to_string()),
            BuildError::HostMultiLinked(n) => (n.clone(), e.to_string()),
        };
        return Err(TopologyError::ConstraintViolation {
            key: "links".into(),
            value: name.clone(),
            reason,
            line: lines.get(name.as_str()).copied().unwrap_or(0),
        });
    }
    Ok(())
}

/// The switch the MitM host is linked to, if any.
pub fn mitm_switch<'a>(spec: &'a TopologySpec, mitm: &NodeDecl) -> Option<&'a NodeDecl> {
    let own = mitm.links.iter().filter_map(|p| spec.node(p));
    let other = spec.nodes.iter().filter(|n| n.links.contains(&mitm.name));
    own.chain(other).find(|n| n.kind == NodeKind::Switch)
}
