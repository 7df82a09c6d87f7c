//! Building a [`Simulation`] from a declarative node and link list.

use std::collections::BTreeMap;

use thiserror::Error;

use super::addr::{LinkAddress, NetAddress};
use super::sim::{NodeId, SimError, Simulation};
use super::stack::StackConfig;
use super::{SimTime, MILLIS};

pub const DEFAULT_LATENCY: SimTime = MILLIS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Host,
    Switch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub name: String,
    pub role: NodeRole,
    /// Derived from the name when absent.
    pub link_address: Option<LinkAddress>,
    pub net_address: Option<NetAddress>,
}

impl NodeSpec {
    pub fn host(name: &str) -> Self {
        Self {
            name: name.to_string(),
            role: NodeRole::Host,
            link_address: None,
            net_address: None,
        }
    }

    pub fn switch(name: &str) -> Self {
        Self {
            name: name.to_string(),
            role: NodeRole::Switch,
            link_address: None,
            net_address: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub latency: SimTime,
}

impl LinkSpec {
    pub fn new(a: &str, b: &str) -> Self {
        Self {
            a: a.to_string(),
            b: b.to_string(),
            latency: DEFAULT_LATENCY,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct NetworkSpec {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    pub stack: StackConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("duplicate node name {0}")]
    DuplicateName(String),
    #[error("link {a} -- {b} names an unknown node {missing}")]
    DanglingLink {
        a: String,
        b: String,
        missing: String,
    },
    #[error("nodes {first} and {second} share address {address}")]
    AddressCollision {
        first: String,
        second: String,
        address: String,
    },
    #[error("link {a} -- {b} connects a node to itself")]
    SelfLink { a: String, b: String },
    #[error("link {a} -- {b} closes a loop")]
    Loop { a: String, b: String },
    #[error("host {0} has more than one link")]
    HostMultiLinked(String),
}

/// Addresses each host ends up with.
pub fn resolved_addresses(spec: &NodeSpec) -> (LinkAddress, NetAddress) {
    (
        spec.link_address
            .unwrap_or_else(|| LinkAddress::derived(&spec.name)),
        spec.net_address
            .unwrap_or_else(|| NetAddress::derived(&spec.name)),
    )
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = x;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Simulation, BuildError> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, n) in spec.nodes.iter().enumerate() {
        if index.insert(n.name.as_str(), i).is_some() {
            return Err(BuildError::DuplicateName(n.name.clone()));
        }
    }

    let mut links_seen: BTreeMap<String, String> = BTreeMap::new();
    let mut nets_seen: BTreeMap<NetAddress, String> = BTreeMap::new();
    for n in spec.nodes.iter().filter(|n| n.role == NodeRole::Host) {
        let (link, net) = resolved_addresses(n);
        if let Some(first) = links_seen.insert(link.to_string(), n.name.clone()) {
            return Err(BuildError::AddressCollision {
                first,
                second: n.name.clone(),
                address: link.to_string(),
            });
        }
        if let Some(first) = nets_seen.insert(net, n.name.clone()) {
            return Err(BuildError::AddressCollision {
                first,
                second: n.name.clone(),
                address: net.to_string(),
            });
        }
    }

    let mut parent: Vec<usize> = (0..spec.nodes.len()).collect();
    let mut endpoints = Vec::with_capacity(spec.links.len());
    for l in &spec.links {
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| BuildError::DanglingLink {
                    a: l.a.clone(),
                    b: l.b.clone(),
                    missing: name.to_string(),
                })
        };
        let a = lookup(&l.a)?;
        let b = lookup(&l.b)?;
        if a == b {
            return Err(BuildError::SelfLink {
                a: l.a.clone(),
                b: l.b.clone(),
            });
        }
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb {
            return Err(BuildError::Loop {
                a: l.a.clone(),
                b: l.b.clone(),
            });
        }
        parent[ra] = rb;
        endpoints.push((a, b, l.latency));
    }

    let mut sim = Simulation::new(seed);
    let mut ids: Vec<NodeId> = Vec::with_capacity(spec.nodes.len());
    for n in &spec.nodes {
        let id = match n.role {
            NodeRole::Host => {
                let (link, net) = resolved_addresses(n);
                sim.add_host(&n.name, link, net, spec.stack.clone())
            }
            NodeRole::Switch => sim.add_switch(&n.name),
        };
        ids.push(id);
    }
    for (a, b, latency) in endpoints {
        sim.connect(ids[a], ids[b], latency).map_err(|e| match e {
            SimError::HostPortBusy(name) => BuildError::HostMultiLinked(name),
            other => unreachable!("connect on known nodes: {other}"),
        })?;
    }
    Ok(sim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(nodes: Vec<NodeSpec>, links: Vec<LinkSpec>) -> NetworkSpec {
        NetworkSpec {
            nodes,
            links,
            stack: StackConfig::default(),
        }
    }

    #[test]
    fn builds_star() {
        let s = spec(
            vec![
                NodeSpec::host("ev"),
                NodeSpec::host("se"),
                NodeSpec::switch("sw"),
            ],
            vec![LinkSpec::new("ev", "sw"), LinkSpec::new("se", "sw")],
        );
        let sim = build_network(&s, 1).unwrap();
        let sw = sim.node_id("sw").unwrap();
        assert_eq!(sim.switch(sw).unwrap().port_count, 2);
        assert_eq!(sim.port_toward(sw, sim.node_id("se").unwrap()), Some(1));
    }

    #[test]
    fn rejects_bad_topologies() {
        let dup = spec(vec![NodeSpec::host("a"), NodeSpec::switch("a")], vec![]);
        assert_eq!(
            build_network(&dup, 0).err(),
            Some(BuildError::DuplicateName("a".into()))
        );

        let dangling = spec(
            vec![NodeSpec::host("a")],
            vec![LinkSpec::new("a", "nowhere")],
        );
        assert!(
            matches!(build_network(&dangling, 0), Err(BuildError::DanglingLink { missing, .. }) if missing == "nowhere")
        );

        let mut b = NodeSpec::host("b");
        b.net_address = Some(NetAddress::derived("a"));
        let collide = spec(vec![NodeSpec::host("a"), b], vec![]);
        assert!(matches!(
            build_network(&collide, 0),
            Err(BuildError::AddressCollision { .. })
        ));

        let looped = spec(
            vec![NodeSpec::switch("s1"), NodeSpec::switch("s2")],
            vec![LinkSpec::new("s1", "s2"), LinkSpec::new("s2", "s1")],
        );
        assert!(matches!(
            build_network(&looped, 0),
            Err(BuildError::Loop { .. })
        ));

        let multi = spec(
            vec![
                NodeSpec::host("h"),
                NodeSpec::switch("s1"),
                NodeSpec::switch("s2"),
            ],
            vec![LinkSpec::new("h", "s1"), LinkSpec::new("h", "s2")],
        );
        assert_eq!(
            build_network(&multi, 0).err(),
            Some(BuildError::HostMultiLinked("h".into()))
        );
    }
}
