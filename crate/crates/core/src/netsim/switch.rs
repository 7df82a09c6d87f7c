//! Learning switch with a priority-ordered flow table.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::addr::LinkAddress;
use super::frame::{Frame, FrameKind};

pub type PortId = usize;

/// Predicate over a frame; `None` fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowMatch {
    pub in_port: Option<PortId>,
    pub src_link: Option<LinkAddress>,
    pub dst_link: Option<LinkAddress>,
    pub kind: Option<FrameKind>,
    pub dst_port: Option<u16>,
}

impl FlowMatch {
    pub fn matches(&self, ingress: PortId, frame: &Frame) -> bool {
        self.in_port.is_none_or(|p| p == ingress)
            && self.src_link.is_none_or(|l| l == frame.src_link)
            && self.dst_link.is_none_or(|l| l == frame.dst_link)
            && self.kind.is_none_or(|k| k == frame.kind)
            && self.dst_port.is_none_or(|p| p == frame.meta.dst_port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowAction {
    /// Learning-switch forwarding.
    Normal,
    RedirectToPort(PortId),
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRule {
    pub priority: i32,
    pub matcher: FlowMatch,
    pub action: FlowAction,
}

#[derive(Debug, Clone, Default)]
pub struct SwitchState {
    pub port_count: usize,
    pub mac_table: BTreeMap<LinkAddress, PortId>,
    /// Sorted by descending priority; equal priorities keep insertion order.
    rules: Vec<FlowRule>,
    /// Ports whose source addresses are never learned.
    pub no_learn: BTreeSet<PortId>,
}

impl SwitchState {
    pub fn new(port_count: usize) -> Self {
        Self {
            port_count,
            ..Self::default()
        }
    }

    pub fn add_rule(&mut self, rule: FlowRule) {
        let at = self
            .rules
            .iter()
            .position(|r| r.priority < rule.priority)
            .unwrap_or(self.rules.len());
        self.rules.insert(at, rule);
    }

    pub fn rules(&self) -> &[FlowRule] {
        &self.rules
    }

    /// Action of the highest-priority matching rule, or `Normal` by default.
    pub fn decide(&self, ingress: PortId, frame: &Frame) -> FlowAction {
        self.rules
            .iter()
            .find(|r| r.matcher.matches(ingress, frame))
            .map_or(FlowAction::Normal, |r| r.action)
    }

    fn flood(&self, ingress: PortId) -> Vec<PortId> {
        (0..self.port_count).filter(|&p| p != ingress).collect()
    }
}

/// Decides egress ports for a frame arriving on `ingress`, learning its
/// source address when the normal action applies.
pub fn switch_forward(
    state: &mut SwitchState,
    ingress: PortId,
    frame: &Frame,
) -> Vec<(PortId, Frame)> {
    let ports = match state.decide(ingress, frame) {
        FlowAction::Drop => Vec::new(),
        FlowAction::RedirectToPort(p) if p != ingress && p < state.port_count => vec![p],
        FlowAction::RedirectToPort(_) => Vec::new(),
        FlowAction::Normal => {
            if !frame.src_link.is_group() && !state.no_learn.contains(&ingress) {
                state.mac_table.insert(frame.src_link, ingress);
            }
            if frame.dst_link.is_group() {
                state.flood(ingress)
            } else {
                match state.mac_table.get(&frame.dst_link) {
                    Some(&p) if p == ingress => Vec::new(),
                    Some(&p) => vec![p],
                    None => state.flood(ingress),
                }
            }
        }
    };
    ports.into_iter().map(|p| (p, frame.clone())).collect()
}
