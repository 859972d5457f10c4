//! Discrete-time, full-duplex, packet-granular network engine.
//!
//! Time advances in steps of length `tau = 8 * beta / (omega * eff)` seconds.
//! Per step every live, non-overloaded node can send at most one packet of
//! beta bytes and receive at most one. Queued transfers contend for receiver
//! slots; contention is resolved by unbiased random arbitration: receivers
//! are visited in a fresh random order and each picks uniformly among the
//! queued transfers whose sender still has a free upload slot, so a sender
//! declined by one receiver can still serve another in the same step.
//!
//! Nodes suffer overloaded periods (Poisson onsets, geometrically
//! distributed whole-step durations) during which they neither send nor
//! receive; transfers touching them simply stall. Failed nodes abort their
//! transfers.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::placement::NodeId;

pub type TransferId = u64;
pub type Step = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetsimError {
    #[error("transfer size must be positive")]
    EmptyTransfer,
    #[error("transfer size {bytes} is not a multiple of the packet size {beta}")]
    NotPacketAligned { bytes: u64, beta: u64 },
    #[error("source and destination must differ (node {0})")]
    SelfTransfer(NodeId),
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("node {0} is failed")]
    FailedNode(NodeId),
    #[error("gate transfer {0} does not exist")]
    UnknownGate(TransferId),
}

/// Link and step-quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    /// Symmetric up/down link bandwidth in bits per second.
    pub omega_bps: f64,
    /// Network efficiency in (0, 1]; models header and retransmit overhead.
    pub eff: f64,
    /// Packet size in bytes; every transfer is a whole number of packets.
    pub beta: u64,
}

impl SimParams {
    pub const DEFAULT_OMEGA_BPS: f64 = 1e9;
    pub const DEFAULT_EFF: f64 = 0.8;

    pub fn new(beta: u64) -> Self {
        SimParams {
            omega_bps: Self::DEFAULT_OMEGA_BPS,
            eff: Self::DEFAULT_EFF,
            beta,
        }
    }

    /// Step duration in seconds: the time one beta-byte packet occupies the
    /// effective link.
    pub fn tau_seconds(&self) -> f64 {
        (self.beta * 8) as f64 / (self.omega_bps * self.eff)
    }
}

/// System-wide overload process parameters.
///
/// `arrivals_per_step` nodes switch to overloaded per step on average and
/// stay so for `mean_duration_steps` steps on average, putting the
/// steady-state expected overloaded count at `arrivals * duration`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverloadParams {
    pub arrivals_per_step: f64,
    pub mean_duration_steps: f64,
}

impl OverloadParams {
    pub fn expected_overloaded_fraction(&self, n_nodes: usize) -> f64 {
        (self.arrivals_per_step * self.mean_duration_steps / n_nodes as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Liveness {
    Live,
    Failed,
}

#[derive(Debug, Clone)]
struct NodeState {
    liveness: Liveness,
    /// Last step of the current overloaded period; 0 means none.
    overloaded_until: Step,
}

#[derive(Debug, Clone)]
struct Transfer {
    src: NodeId,
    dst: NodeId,
    packets_total: u64,
    packets_remaining: u64,
    delivered: u64,
    tag: u64,
    /// Pipelining: this transfer may deliver packet i only after the gate
    /// transfer has delivered more than i packets as of the step start.
    gate: Option<TransferId>,
}

/// A transfer that finished this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletedTransfer {
    pub id: TransferId,
    pub src: NodeId,
    pub dst: NodeId,
    pub tag: u64,
    pub bytes: u64,
}

/// A transfer removed because one endpoint failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AbortedTransfer {
    pub id: TransferId,
    pub src: NodeId,
    pub dst: NodeId,
    pub tag: u64,
    pub delivered_bytes: u64,
}

/// Outcome of one step.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    pub step: Step,
    pub packets_moved: u64,
    pub completed: Vec<CompletedTransfer>,
}

/// One delivered packet, for the optional debug step trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketTrace {
    pub step: Step,
    pub src: NodeId,
    pub dst: NodeId,
    pub tag: u64,
}

/// The network state: nodes, queued transfers and the engine RNG.
pub struct World {
    params: SimParams,
    overload: Option<OverloadParams>,
    poisson: Option<Poisson<f64>>,
    nodes: Vec<NodeState>,
    transfers: BTreeMap<TransferId, Transfer>,
    next_transfer_id: TransferId,
    step: Step,
    rng: ChaCha12Rng,
    uploaded: Vec<u64>,
    trace: Option<Vec<PacketTrace>>,
}

impl World {
    /// Creates a world of live nodes. When overload parameters are given the
    /// process starts in its stationary regime: each node is overloaded with
    /// the steady-state probability and a fresh residual duration.
    pub fn new(
        n_nodes: usize,
        params: SimParams,
        overload: Option<OverloadParams>,
        seed: u64,
    ) -> World {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut nodes = vec![
            NodeState {
                liveness: Liveness::Live,
                overloaded_until: 0,
            };
            n_nodes
        ];
        let poisson = overload
            .filter(|p| p.arrivals_per_step > 0.0)
            .map(|p| Poisson::new(p.arrivals_per_step).expect("positive arrival rate"));
        if let Some(p) = overload.filter(|p| p.arrivals_per_step > 0.0) {
            let frac = p.expected_overloaded_fraction(n_nodes);
            for node in nodes.iter_mut() {
                if rng.random::<f64>() < frac {
                    // Residual of a geometric duration is geometric again.
                    node.overloaded_until = geometric(&mut rng, p.mean_duration_steps);
                }
            }
        }
        World {
            params,
            overload,
            poisson,
            nodes,
            transfers: BTreeMap::new(),
            next_transfer_id: 0,
            step: 0,
            rng,
            uploaded: vec![0; n_nodes],
            trace: None,
        }
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Index of the last executed step; 0 before the first step runs.
    pub fn step(&self) -> Step {
        self.step
    }

    pub fn is_live(&self, node: NodeId) -> bool {
        self.nodes[node].liveness == Liveness::Live
    }

    pub fn is_overloaded(&self, node: NodeId) -> bool {
        self.nodes[node].overloaded_until >= self.step.max(1)
    }

    /// Live and not overloaded: able to occupy a slot this step.
    pub fn is_available(&self, node: NodeId) -> bool {
        self.is_live(node) && !self.is_overloaded(node)
    }

    pub fn overloaded_count(&self) -> usize {
        (0..self.nodes.len())
            .filter(|&v| self.is_live(v) && self.is_overloaded(v))
            .count()
    }

    /// Total bytes each node has uploaded so far.
    pub fn uploaded_bytes(&self) -> &[u64] {
        &self.uploaded
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Option<&[PacketTrace]> {
        self.trace.as_deref()
    }

    pub fn active_transfers(&self) -> usize {
        self.transfers.len()
    }

    pub fn transfer_delivered_bytes(&self, id: TransferId) -> Option<u64> {
        self.transfers.get(&id).map(|t| t.delivered * self.params.beta)
    }

    /// Queues a transfer of `bytes` from src to dst.
    pub fn submit_transfer(
        &mut self,
        src: NodeId,
        dst: NodeId,
        bytes: u64,
        tag: u64,
    ) -> Result<TransferId, NetsimError> {
        self.submit(src, dst, bytes, tag, None)
    }

    /// Queues a transfer that forwards data arriving through `gate`: packet
    /// i leaves one step after the gate has delivered packet i.
    pub fn submit_gated_transfer(
        &mut self,
        src: NodeId,
        dst: NodeId,
        bytes: u64,
        tag: u64,
        gate: TransferId,
    ) -> Result<TransferId, NetsimError> {
        if !self.transfers.contains_key(&gate) {
            return Err(NetsimError::UnknownGate(gate));
        }
        self.submit(src, dst, bytes, tag, Some(gate))
    }

    fn submit(
        &mut self,
        src: NodeId,
        dst: NodeId,
        bytes: u64,
        tag: u64,
        gate: Option<TransferId>,
    ) -> Result<TransferId, NetsimError> {
        if src >= self.nodes.len() {
            return Err(NetsimError::UnknownNode(src));
        }
        if dst >= self.nodes.len() {
            return Err(NetsimError::UnknownNode(dst));
        }
        if src == dst {
            return Err(NetsimError::SelfTransfer(src));
        }
        if bytes == 0 {
            return Err(NetsimError::EmptyTransfer);
        }
        if bytes % self.params.beta != 0 {
            return Err(NetsimError::NotPacketAligned {
                bytes,
                beta: self.params.beta,
            });
        }
        if !self.is_live(src) {
            return Err(NetsimError::FailedNode(src));
        }
        if !self.is_live(dst) {
            return Err(NetsimError::FailedNode(dst));
        }
        let id = self.next_transfer_id;
        self.next_transfer_id += 1;
        let packets = bytes / self.params.beta;
        self.transfers.insert(
            id,
            Transfer {
                src,
                dst,
                packets_total: packets,
                packets_remaining: packets,
                delivered: 0,
                tag,
                gate,
            },
        );
        Ok(id)
    }

    /// Removes a queued transfer, returning its delivered byte count.
    pub fn cancel_transfer(&mut self, id: TransferId) -> Option<u64> {
        self.transfers
            .remove(&id)
            .map(|t| t.delivered * self.params.beta)
    }

    /// Marks a node failed and aborts every transfer touching it.
    pub fn fail_node(&mut self, node: NodeId) -> Vec<AbortedTransfer> {
        self.nodes[node].liveness = Liveness::Failed;
        let beta = self.params.beta;
        let doomed: Vec<TransferId> = self
            .transfers
            .iter()
            .filter(|(_, t)| t.src == node || t.dst == node)
            .map(|(&id, _)| id)
            .collect();
        doomed
            .into_iter()
            .map(|id| {
                let t = self.transfers.remove(&id).unwrap();
                AbortedTransfer {
                    id,
                    src: t.src,
                    dst: t.dst,
                    tag: t.tag,
                    delivered_bytes: t.delivered * beta,
                }
            })
            .collect()
    }

    /// Brings a failed node back, empty. Any overload window it was in keeps
    /// running; the machine is busy regardless of what it stores.
    pub fn reboot_node(&mut self, node: NodeId) {
        self.nodes[node].liveness = Liveness::Live;
    }

    /// Forces a node to be overloaded through the given step (tests and
    /// scripted scenarios).
    pub fn force_overload(&mut self, node: NodeId, through_step: Step) {
        self.nodes[node].overloaded_until = through_step;
    }

    /// Runs one full step: overload transitions, then packet matching.
    pub fn advance_step(&mut self) -> StepReport {
        self.begin_step();
        self.deliver_packets()
    }

    /// Advances the clock and samples overload transitions for the new step.
    pub fn begin_step(&mut self) {
        self.step += 1;
        if let (Some(params), Some(poisson)) = (self.overload, self.poisson.as_ref()) {
            let onsets = poisson.sample(&mut self.rng) as u64;
            if onsets == 0 {
                return;
            }
            let eligible: Vec<NodeId> = (0..self.nodes.len())
                .filter(|&v| self.is_live(v) && !self.is_overloaded(v))
                .collect();
            let count = (onsets as usize).min(eligible.len());
            if count == 0 {
                return;
            }
            let picks = rand::seq::index::sample(&mut self.rng, eligible.len(), count);
            for i in picks.iter() {
                let node = eligible[i];
                let duration = geometric(&mut self.rng, params.mean_duration_steps);
                self.nodes[node].overloaded_until = self.step + duration - 1;
            }
        }
    }

    /// Matches senders to receivers for the current step and moves one
    /// packet per matched pair.
    pub fn deliver_packets(&mut self) -> StepReport {
        let mut report = StepReport {
            step: self.step,
            ..StepReport::default()
        };
        if self.transfers.is_empty() {
            return report;
        }

        // Pipelined transfers compare against their gate's delivery count as
        // of the step start, so data forwarded this step left its origin on
        // an earlier step.
        let gate_floor: HashMap<TransferId, u64> = self
            .transfers
            .iter()
            .filter_map(|(&id, t)| {
                t.gate.map(|g| {
                    let floor = self
                        .transfers
                        .get(&g)
                        .map(|gt| gt.delivered)
                        // A finished gate has delivered everything.
                        .unwrap_or(u64::MAX);
                    (id, floor)
                })
            })
            .collect();

        let mut by_dst: BTreeMap<NodeId, Vec<TransferId>> = BTreeMap::new();
        for (&id, t) in &self.transfers {
            by_dst.entry(t.dst).or_default().push(id);
        }

        let mut receivers: Vec<NodeId> = by_dst.keys().copied().collect();
        use rand::seq::SliceRandom;
        receivers.shuffle(&mut self.rng);

        let mut up_used = vec![false; self.nodes.len()];
        let mut down_used = vec![false; self.nodes.len()];

        for &dst in &receivers {
            if !self.is_available(dst) {
                continue;
            }
            debug_assert!(!down_used[dst], "receiver visited twice in one step");
            let candidates: Vec<TransferId> = by_dst[&dst]
                .iter()
                .copied()
                .filter(|id| {
                    let t = &self.transfers[id];
                    t.packets_remaining > 0
                        && self.is_available(t.src)
                        && !up_used[t.src]
                        && gate_floor.get(id).is_none_or(|&floor| t.delivered < floor)
                })
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let id = candidates[self.rng.random_range(0..candidates.len())];
            let (src, tag, finished, delivered_total) = {
                let t = self.transfers.get_mut(&id).unwrap();
                t.packets_remaining -= 1;
                t.delivered += 1;
                (t.src, t.tag, t.packets_remaining == 0, t.delivered)
            };
            debug_assert!(!up_used[src], "sender matched twice in one step");
            up_used[src] = true;
            down_used[dst] = true;
            self.uploaded[src] += self.params.beta;
            report.packets_moved += 1;
            if let Some(trace) = self.trace.as_mut() {
                trace.push(PacketTrace {
                    step: self.step,
                    src,
                    dst,
                    tag,
                });
            }
            if finished {
                let t = self.transfers.remove(&id).unwrap();
                debug_assert_eq!(delivered_total, t.packets_total);
                report.completed.push(CompletedTransfer {
                    id,
                    src: t.src,
                    dst: t.dst,
                    tag: t.tag,
                    bytes: t.packets_total * self.params.beta,
                });
            }
        }
        report
    }
}

/// Whole-step overload duration with mean `mean` on {1, 2, ...}: the
/// discretization of an exponential holding time that keeps the configured
/// mean exact (a naive ceil would inflate short means and with them the
/// steady-state overloaded fraction).
fn geometric(rng: &mut impl Rng, mean: f64) -> u64 {
    debug_assert!(mean >= 1.0);
    let p = 1.0 / mean;
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = rng.random();
    let draw = ((1.0 - u).ln() / (1.0 - p).ln()).ceil();
    (draw as u64).max(1)
}
