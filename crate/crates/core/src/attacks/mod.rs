//! MitM node, switch wiring, and the interceptor pipeline.

mod interceptor;
mod mitm;


use thiserror::Error;

pub use interceptor::{
    AttackScenario, Injection, Intercepted, Interceptor, InterceptorDecision, PayloadClass,
    SessionIdForger, Toward,
};
pub use mitm::{Applied, InterceptLogEntry, MitmApp, MitmOptions, MitmStats};

use crate::codec::{decode_exi_bytes, encode_exi, parse_xml_text, to_xml_text, CodecError};
use crate::netsim::{
    AppId, FlowAction, FlowMatch, FlowRule, FrameKind, NodeId, SimError, Simulation,
};
use crate::wire::SDP_SERVER_PORT;

pub const REDIRECT_PRIORITY: i32 = 100;
/// Frames the MitM sends back out follow normal forwarding.
pub const MITM_EGRESS_PRIORITY: i32 = 200;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackError {
    #[error("unknown switch {0:?}")]
    UnknownSwitch(String),
    #[error("MitM host {0:?} is not linked to the switch")]
    MitmNotLinked(String),
    #[error("node {0:?} runs no MitM application")]
    NotAMitm(String),
    #[error("victim {0} is not a host")]
    BadVictim(NodeId),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Installs a MitM application on `node` and makes its stack promiscuous
/// and transparent.
pub fn mitm_install(
    sim: &mut Simulation,
    node: NodeId,
    interceptor: Box<dyn Interceptor>,
    options: MitmOptions,
) -> Result<AppId, AttackError> {
    let name = sim.node_name(node).to_string();
    let stack = sim
        .stack_mut(node)
        .ok_or(AttackError::Sim(SimError::NotAHost(name)))?;
    stack.promiscuous = true;
    stack.transparent = true;
    Ok(sim.add_app(node, Box::new(MitmApp::new(interceptor, options)))?)
}

/// Installs one of the built-in scenarios.
pub fn mitm_install_scenario(
    sim: &mut Simulation,
    node: NodeId,
    scenario: AttackScenario,
    seed: u64,
) -> Result<AppId, AttackError> {
    let options = MitmOptions {
        proxy_port: scenario.proxy_port(),
        log_xml: scenario == AttackScenario::PassthroughLogger,
        seed,
        ..MitmOptions::default()
    };
    mitm_install(sim, node, Box::new(scenario), options)
}

fn mitm_app_mut(sim: &mut Simulation, node: NodeId) -> Result<&mut MitmApp, AttackError> {
    let id = (0..sim.app_count(node)).find(|&a| sim.app::<MitmApp>(node, a).is_some());
    let name = sim.node_name(node).to_string();
    id.and_then(|a| sim.app_mut::<MitmApp>(node, a))
        .ok_or(AttackError::NotAMitm(name))
}

pub fn mitm_app(sim: &Simulation, node: NodeId) -> Option<&MitmApp> {
    (0..sim.app_count(node)).find_map(|a| sim.app::<MitmApp>(node, a))
}

/// Programs `switch` so SDP datagrams and stream segments between any two
/// victims go to the MitM's port. An empty victim list means every other
/// host.
pub fn mitm_attach(
    sim: &mut Simulation,
    switch: &str,
    mitm: NodeId,
    victims: &[NodeId],
) -> Result<(), AttackError> {
    let sw = sim
        .node_id(switch)
        .filter(|&n| sim.switch(n).is_some())
        .ok_or_else(|| AttackError::UnknownSwitch(switch.to_string()))?;
    let mitm_name = sim.node_name(mitm).to_string();
    let port = sim
        .port_leading_to(sw, mitm)
        .ok_or_else(|| AttackError::MitmNotLinked(mitm_name.clone()))?;
    let mitm_link = sim
        .stack(mitm)
        .ok_or(AttackError::Sim(SimError::NotAHost(mitm_name)))?
        .link;
    let victims: Vec<NodeId> = if victims.is_empty() {
        (0..sim.node_count())
            .filter(|&n| n != mitm && sim.is_host(n))
            .collect()
    } else {
        victims.to_vec()
    };
    let links = victims
        .iter()
        .map(|&v| {
            sim.stack(v)
                .map(|s| s.link)
                .ok_or(AttackError::BadVictim(v))
        })
        .collect::<Result<Vec<_>, _>>()?;
    mitm_app_mut(sim, mitm)?.redirected = true;
    let state = sim.switch_mut(sw).expect("checked above");
    state.no_learn.insert(port);
    state.mac_table.insert(mitm_link, port);
    state.add_rule(FlowRule {
        priority: MITM_EGRESS_PRIORITY,
        matcher: FlowMatch {
            in_port: Some(port),
            ..FlowMatch::default()
        },
        action: FlowAction::Normal,
    });
    for &a in &links {
        state.add_rule(FlowRule {
            priority: REDIRECT_PRIORITY,
            matcher: FlowMatch {
                src_link: Some(a),
                kind: Some(FrameKind::Datagram),
                dst_port: Some(SDP_SERVER_PORT),
                ..FlowMatch::default()
            },
            action: FlowAction::RedirectToPort(port),
        });
        for &b in links.iter().filter(|&&b| b != a) {
            for kind in [FrameKind::Datagram, FrameKind::StreamSegment] {
                state.add_rule(FlowRule {
                    priority: REDIRECT_PRIORITY,
                    matcher: FlowMatch {
                        src_link: Some(a),
                        dst_link: Some(b),
                        kind: Some(kind),
                        ..FlowMatch::default()
                    },
                    action: FlowAction::RedirectToPort(port),
                });
            }
        }
    }
    Ok(())
}

/// Makes the MitM answer every neighbor solicitation with its own link
/// address, ahead of the honest owner.
pub fn spoof_neighbors(sim: &mut Simulation, mitm: NodeId) -> Result<(), AttackError> {
    mitm_app_mut(sim, mitm)?.spoofing = true;
    Ok(())
}

/// EXI payload to XML text.
pub fn decode_payload(exi: &[u8]) -> Result<String, CodecError> {
    Ok(to_xml_text(&decode_exi_bytes(exi)?))
}

/// XML text to EXI payload.
pub fn encode_payload(xml: &str) -> Result<Vec<u8>, CodecError> {
    Ok(encode_exi(&parse_xml_text(xml)?).bytes)
}
