//! In-process simulation of the aggregation / reservation / dispatch protocol over a tree of
//! aggregators, with accounting of every message sent.
//!
//! Packets travel up the tree once. The root turns a reserved energy into `x*` and broadcasts
//! it; every leaf truncates itself. During dispatch the root broadcasts one level per step and
//! tracks the fleet through a group model built from the curves it received, so leaves never
//! report state while discharging. Before the first recharge step each leaf reports its
//! recharge profile once, since the discharge packet carries no charge-side ratings.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dispatch::{
    self, apply_input, device_response, fill_level, DispatchStep, LevelGroup, Mode, SimulationLog,
};
use crate::dlr::{DlrPacket, Reservation};
use crate::error::{DlrError, Result};
use crate::fleet::{Device, Efficiency, FleetState, StaircaseSignal};
use crate::pwl::EpCurve;
use crate::TOL;

/// Node of an aggregation tree. Aggregators cache the packet of their subtree.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf {
        id: String,
        device: Device,
    },
    Aggregator {
        id: String,
        children: Vec<TreeNode>,
        packet: DlrPacket,
    },
}

impl TreeNode {
    pub fn leaf(id: impl Into<String>, device: Device) -> TreeNode {
        TreeNode::Leaf {
            id: id.into(),
            device,
        }
    }

    /// Builds an aggregator and computes its packet from the children.
    pub fn aggregator(id: impl Into<String>, children: Vec<TreeNode>) -> Result<TreeNode> {
        if children.is_empty() {
            return Err(DlrError::InvalidDevice("aggregator has no children".into()));
        }
        let packet = children
            .iter()
            .fold(DlrPacket::empty(), |acc, c| acc.aggregate(&c.packet()));
        Ok(TreeNode::Aggregator {
            id: id.into(),
            children,
            packet,
        })
    }

    pub fn id(&self) -> &str {
        match self {
            TreeNode::Leaf { id, .. } | TreeNode::Aggregator { id, .. } => id,
        }
    }

    pub fn packet(&self) -> DlrPacket {
        match self {
            TreeNode::Leaf { device, .. } => DlrPacket::from_device(device),
            TreeNode::Aggregator { packet, .. } => packet.clone(),
        }
    }

    pub fn children(&self) -> &[TreeNode] {
        match self {
            TreeNode::Leaf { .. } => &[],
            TreeNode::Aggregator { children, .. } => children,
        }
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<(&'a str, &'a Device)>) {
        match self {
            TreeNode::Leaf { id, device } => out.push((id, device)),
            TreeNode::Aggregator { children, .. } => {
                children.iter().for_each(|c| c.collect_leaves(out))
            }
        }
    }
}

/// Aggregation tree rooted at a top-level aggregator (or a lone leaf).
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationTree {
    root: TreeNode,
}

impl AggregationTree {
    pub fn new(root: TreeNode) -> Self {
        AggregationTree { root }
    }

    /// One aggregator holding every device as a direct leaf.
    pub fn flat(fleet: &FleetState) -> Self {
        let leaves = fleet
            .devices()
            .iter()
            .enumerate()
            .map(|(i, d)| TreeNode::leaf(format!("d{i}"), *d))
            .collect();
        AggregationTree::new(TreeNode::aggregator("root", leaves).expect("fleet is non-empty"))
    }

    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    /// Leaves in depth-first order.
    pub fn leaves(&self) -> Vec<(&str, &Device)> {
        let mut out = Vec::new();
        self.root.collect_leaves(&mut out);
        out
    }

    /// All devices in depth-first leaf order.
    pub fn fleet(&self) -> FleetState {
        FleetState::new(self.leaves().into_iter().map(|(_, d)| *d).collect())
            .expect("tree has at least one leaf")
    }

    pub fn packet(&self) -> DlrPacket {
        self.root.packet()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Aggregation,
    Reservation,
    /// One upward pass of recharge profiles between the last discharge and first recharge step.
    RechargeSetup,
    Dispatch,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Aggregation => "aggregation",
            Phase::Reservation => "reservation",
            Phase::RechargeSetup => "recharge_setup",
            Phase::Dispatch => "dispatch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    PacketUp,
    ReserveEd,
    BroadcastXStar,
    /// Recharge profile (charge ratings against time-to-charge) of a subtree, sent once before
    /// the first recharge step.
    RechargeProfileUp,
    BroadcastZHat,
    BroadcastYHat,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Sender of requests into the root.
pub const DISPATCHER: &str = "dispatcher";
/// Receiver of a broadcast: every leaf below the sender.
pub const BROADCAST: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub phase: Phase,
    pub kind: MessageKind,
    pub sender: String,
    pub receiver: String,
    pub scalar_count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCount {
    pub messages: usize,
    pub scalars: usize,
    pub max_payload: usize,
}

/// Per-phase message and scalar counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageAudit {
    pub phases: BTreeMap<Phase, PhaseCount>,
    pub dispatch_steps: usize,
}

impl MessageAudit {
    pub fn phase(&self, phase: Phase) -> PhaseCount {
        self.phases.get(&phase).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
struct LeafState {
    id: String,
    real: Device,
    virt: Device,
}

/// Root-side model of the fleet: groups of devices that share a level.
#[derive(Debug, Clone)]
struct RootModel {
    mode: Mode,
    groups: Vec<LevelGroup>,
}

impl RootModel {
    fn from_curve(mode: Mode, curve: &EpCurve) -> Self {
        RootModel {
            mode,
            groups: curve
                .to_segments()
                .into_iter()
                .map(|s| LevelGroup {
                    rate: s.power,
                    level: s.duration,
                })
                .collect(),
        }
    }

    fn advance(&mut self, z: f64, dt: f64) {
        for g in &mut self.groups {
            g.level -= (g.level - z).clamp(0.0, dt);
        }
    }
}

/// One run of the protocol over a tree.
#[derive(Debug, Clone)]
pub struct ProtocolSession<'a> {
    tree: &'a AggregationTree,
    tol: f64,
    packet: Option<DlrPacket>,
    reservation: Option<Reservation>,
    leaves: Vec<LeafState>,
    model: Option<RootModel>,
    messages: Vec<ProtocolMessage>,
    steps: usize,
}

impl<'a> ProtocolSession<'a> {
    pub fn new(tree: &'a AggregationTree) -> Self {
        Self::with_tol(tree, TOL)
    }

    pub fn with_tol(tree: &'a AggregationTree, tol: f64) -> Self {
        let leaves = tree
            .leaves()
            .into_iter()
            .map(|(id, d)| LeafState {
                id: id.to_string(),
                real: *d,
                virt: *d,
            })
            .collect();
        ProtocolSession {
            tree,
            tol,
            packet: None,
            reservation: None,
            leaves,
            model: None,
            messages: Vec::new(),
            steps: 0,
        }
    }

    fn send(&mut self, phase: Phase, kind: MessageKind, sender: &str, receiver: &str, scalars: usize) {
        self.messages.push(ProtocolMessage {
            phase,
            kind,
            sender: sender.to_string(),
            receiver: receiver.to_string(),
            scalar_count: scalars,
        });
    }

    /// Every node sends its packet to its parent; returns the root packet.
    pub fn aggregate_up(&mut self) -> DlrPacket {
        fn walk(node: &TreeNode, out: &mut Vec<ProtocolMessage>) -> DlrPacket {
            match node {
                TreeNode::Leaf { device, .. } => DlrPacket::from_device(device),
                TreeNode::Aggregator { id, children, .. } => {
                    let mut acc = DlrPacket::empty();
                    for c in children {
                        let p = walk(c, out);
                        out.push(ProtocolMessage {
                            phase: Phase::Aggregation,
                            kind: MessageKind::PacketUp,
                            sender: c.id().to_string(),
                            receiver: id.clone(),
                            scalar_count: p.scalar_count(),
                        });
                        acc = acc.aggregate(&p);
                    }
                    acc
                }
            }
        }
        let mut out = Vec::new();
        let packet = walk(self.tree.root(), &mut out);
        self.messages.extend(out);
        self.packet = Some(packet.clone());
        packet
    }

    /// The root reserves `ed`, broadcasts `x*`, and every leaf truncates itself. Returns the
    /// per-leaf virtual time-to-go in depth-first order.
    pub fn reserve_down(&mut self, ed: f64) -> Result<Vec<f64>> {
        let packet = match &self.packet {
            Some(p) => p.clone(),
            None => self.aggregate_up(),
        };
        let root = self.tree.root().id().to_string();
        self.send(Phase::Reservation, MessageKind::ReserveEd, DISPATCHER, &root, 1);
        let r = packet.reserve(ed)?;
        self.send(Phase::Reservation, MessageKind::BroadcastXStar, &root, BROADCAST, 1);
        for leaf in &mut self.leaves {
            leaf.virt = leaf.real.truncated(r.x_star);
        }
        self.model = Some(RootModel::from_curve(Mode::Discharge, &r.truncated_capacity));
        self.reservation = Some(r);
        Ok(self.leaves.iter().map(|l| l.virt.time_to_go()).collect())
    }

    pub fn reservation(&self) -> Option<&Reservation> {
        self.reservation.as_ref()
    }

    fn recharge_profile_up(&mut self) -> EpCurve {
        fn walk(
            node: &TreeNode,
            leaves: &mut std::slice::Iter<'_, LeafState>,
            out: &mut Vec<ProtocolMessage>,
        ) -> EpCurve {
            match node {
                TreeNode::Leaf { .. } => {
                    let leaf = leaves.next().expect("leaf order matches tree");
                    FleetState::new(vec![leaf.virt])
                        .expect("one device")
                        .recharge_capacity()
                }
                TreeNode::Aggregator { id, children, .. } => {
                    let mut acc = EpCurve::zero();
                    for c in children {
                        let curve = walk(c, leaves, out);
                        out.push(ProtocolMessage {
                            phase: Phase::RechargeSetup,
                            kind: MessageKind::RechargeProfileUp,
                            sender: c.id().to_string(),
                            receiver: id.clone(),
                            scalar_count: 2 * curve.vertices().len(),
                        });
                        acc = acc.minkowski_add(&curve);
                    }
                    acc
                }
            }
        }
        let mut out = Vec::new();
        let curve = walk(self.tree.root(), &mut self.leaves.iter(), &mut out);
        self.messages.extend(out);
        curve
    }

    /// Serves one step: the root solves for the level from its model and broadcasts it; each
    /// leaf computes its own input. Returns the step with per-leaf inputs in depth-first order.
    pub fn broadcast_dispatch(&mut self, level: f64, dt: f64, mode: Mode) -> Result<DispatchStep> {
        if self.reservation.is_none() {
            return Err(DlrError::ReservationViolated(
                "dispatch requested before a reservation".into(),
            ));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(DlrError::InvalidSignal(format!(
                "step length must be positive, got {dt}"
            )));
        }
        let current = self.model.as_ref().map(|m| m.mode).unwrap_or(Mode::Discharge);
        match (current, mode) {
            (Mode::Recharge, Mode::Discharge) => {
                return Err(DlrError::InvalidSignal(
                    "discharge requested after recharging started".into(),
                ))
            }
            (Mode::Discharge, Mode::Recharge) => {
                let profile = self.recharge_profile_up();
                self.model = Some(RootModel::from_curve(Mode::Recharge, &profile));
            }
            _ => {}
        }
        let energy = match mode {
            Mode::Discharge if level.is_nan() || level < 0.0 => {
                return Err(DlrError::NegativePower(level))
            }
            Mode::Recharge if level.is_nan() || level > 0.0 => {
                return Err(DlrError::InvalidSignal(format!(
                    "recharge request must be non-positive, got {level}"
                )))
            }
            Mode::Discharge => level * dt,
            Mode::Recharge => -level * dt,
        };
        let model = self.model.as_mut().expect("model set by reservation");
        let z = fill_level(&model.groups, energy, dt, self.tol).map_err(|available| {
            DlrError::InfeasibleStep {
                step: self.steps,
                requested: energy,
                available,
            }
        })?;
        model.advance(z, dt);

        let root = self.tree.root().id().to_string();
        let kind = match mode {
            Mode::Discharge => MessageKind::BroadcastZHat,
            Mode::Recharge => MessageKind::BroadcastYHat,
        };
        self.send(Phase::Dispatch, kind, &root, BROADCAST, 1);
        self.steps += 1;

        let inputs: Vec<f64> = self
            .leaves
            .iter_mut()
            .map(|leaf| {
                let u = leaf_response(&leaf.virt, z, dt, mode);
                leaf.virt = apply_input(&leaf.virt, u, dt);
                leaf.real = apply_input(&leaf.real, u, dt);
                u
            })
            .collect();
        Ok(DispatchStep {
            mode,
            z_hat: z,
            p_request: level,
            per_device_u: inputs,
        })
    }

    /// Runs a full discharge-then-recharge cycle after `reserve_down`.
    pub fn run_cycle(&mut self, signal: &StaircaseSignal) -> Result<SimulationLog> {
        let r = self.reservation.clone().ok_or_else(|| {
            DlrError::ReservationViolated("cycle requested before a reservation".into())
        })?;
        dispatch::check_cycle_energies(&r, signal, self.tol)?;
        let mut log = SimulationLog::new(signal.dt(), &self.real_fleet(), &self.virtual_fleet());
        let start = signal.recharge_start();
        for (k, &level) in signal.levels().iter().enumerate() {
            let mode = if k < start { Mode::Discharge } else { Mode::Recharge };
            let s = self
                .broadcast_dispatch(level, signal.dt(), mode)
                .map_err(|e| dispatch::tag_step(e, k))?;
            log.record(s, self.real_fleet().time_to_go(), self.virtual_fleet().time_to_go());
        }
        Ok(log)
    }

    pub fn leaf_ids(&self) -> Vec<&str> {
        self.leaves.iter().map(|l| l.id.as_str()).collect()
    }

    pub fn real_fleet(&self) -> FleetState {
        FleetState::new(self.leaves.iter().map(|l| l.real).collect()).expect("non-empty")
    }

    pub fn virtual_fleet(&self) -> FleetState {
        FleetState::new(self.leaves.iter().map(|l| l.virt).collect()).expect("non-empty")
    }

    pub fn messages(&self) -> &[ProtocolMessage] {
        &self.messages
    }

    pub fn message_audit(&self) -> MessageAudit {
        let mut audit = MessageAudit {
            dispatch_steps: self.steps,
            ..Default::default()
        };
        for m in &self.messages {
            let c = audit.phases.entry(m.phase).or_default();
            c.messages += 1;
            c.scalars += m.scalar_count;
            c.max_payload = c.max_payload.max(m.scalar_count);
        }
        audit
    }
}

/// Input a leaf applies for a broadcast level, computed from its own state only.
pub fn leaf_response(device: &Device, level: f64, dt: f64, mode: Mode) -> f64 {
    match mode {
        Mode::Discharge => device_response(device.p_discharge_max(), device.time_to_go(), level, dt),
        Mode::Recharge => match device.eta() {
            Efficiency::Finite(_) => {
                -device_response(device.p_charge_max(), device.time_to_charge(), level, dt)
            }
            Efficiency::NoRecovery => 0.0,
        },
    }
}
