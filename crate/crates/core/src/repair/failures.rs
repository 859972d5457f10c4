//! Failure events: node deletion, object-loss determination, repair
//! spawning and mid-repair recovery.

use std::collections::BTreeSet;

use rand::Rng;

use super::{Batch, Phase, ProcState, RepairId, Role, Simulation};
use crate::analysis::RepairRecord;
use crate::coding::{is_recoverable, FragmentSet};
use crate::netsim::AbortedTransfer;
use crate::placement::{NodeId, ObjectId};

/// A failure to inject into the running simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FailureEvent {
    /// One node loses all its data; `None` picks a live node uniformly.
    SingleNode { node: Option<NodeId> },
    /// A fraction theta of all nodes fail simultaneously.
    Correlated { theta: f64 },
}

/// What an injection did.
#[derive(Debug, Clone, Default)]
pub struct InjectionReport {
    pub failed_nodes: Vec<NodeId>,
    pub lost_fragments: Vec<(ObjectId, usize)>,
    /// Objects whose survivor set fails the recoverability oracle; they
    /// spawn no repairs.
    pub lost_objects: Vec<ObjectId>,
    pub spawned: Vec<RepairId>,
}

impl Simulation {
    /// Deletes the targeted nodes' data, marks unrecoverable objects lost,
    /// spawns repair processes for everything else, and reboots the failed
    /// nodes empty (so even fully clustered placements keep a newcomer
    /// candidate).
    pub fn inject_failure(&mut self, event: &FailureEvent) -> InjectionReport {
        let targets: Vec<NodeId> = match *event {
            FailureEvent::SingleNode { node: Some(v) } => vec![v],
            FailureEvent::SingleNode { node: None } => {
                let live: Vec<NodeId> = (0..self.world.n_nodes())
                    .filter(|&v| self.world.is_live(v))
                    .collect();
                vec![live[self.rng.random_range(0..live.len())]]
            }
            FailureEvent::Correlated { theta } => {
                let live: Vec<NodeId> = (0..self.world.n_nodes())
                    .filter(|&v| self.world.is_live(v))
                    .collect();
                let count =
                    crate::analysis::failed_count(self.world.n_nodes(), theta) as usize;
                let count = count.min(live.len());
                rand::seq::index::sample(&mut self.rng, live.len(), count)
                    .iter()
                    .map(|i| live[i])
                    .collect()
            }
        };
        let failed_set: BTreeSet<NodeId> = targets.iter().copied().collect();
        let mut report = InjectionReport {
            failed_nodes: targets.clone(),
            ..InjectionReport::default()
        };
        let mut affected: BTreeSet<ObjectId> = BTreeSet::new();

        for &node in &targets {
            for aborted in self.world.fail_node(node) {
                self.handle_abort(aborted, &mut affected);
            }
            let stored = std::mem::take(&mut self.node_frags[node]);
            for (object, frag) in stored {
                self.live[object].remove(frag);
                self.claimed[object].remove(frag);
                if !self.object_lost[object] {
                    affected.insert(object);
                    report.lost_fragments.push((object, frag));
                }
            }
        }

        // Repairs whose newcomer died restart on a fresh node.
        let dead_newcomers: Vec<RepairId> = self
            .active
            .iter()
            .copied()
            .filter(|&id| failed_set.contains(&self.repairs[id].newcomer))
            .collect();
        for &id in &dead_newcomers {
            affected.insert(self.repairs[id].object);
        }

        for &node in &targets {
            self.world.reboot_node(node);
        }

        for object in affected {
            self.reconcile_object(object, &failed_set, &mut report);
        }
        report
    }

    /// Credits partial bytes of an aborted transfer and patches the owning
    /// repair's state so it reselects sources.
    fn handle_abort(&mut self, a: AbortedTransfer, affected: &mut BTreeSet<ObjectId>) {
        let Some(role) = self.roles.remove(&a.id) else {
            return;
        };
        match role {
            Role::RgcUnit { repair, frag } => {
                let proc = &mut self.repairs[repair];
                proc.bytes += a.delivered_bytes;
                affected.insert(proc.object);
                if let ProcState::Rgc(s) = &mut proc.state {
                    s.engaged.remove(frag);
                    s.outstanding.retain(|&t| t != a.id);
                }
            }
            Role::SrcLeg { repair, frag } => {
                let proc = &mut self.repairs[repair];
                proc.bytes += a.delivered_bytes;
                affected.insert(proc.object);
                if let ProcState::Src(s) = &mut proc.state {
                    if let Some(leg) = s.legs.iter_mut().find(|l| l.frag == frag) {
                        leg.received += a.delivered_bytes;
                        leg.transfer = None;
                    }
                    s.pair = None;
                }
            }
            Role::SrcFar { repair } | Role::SrcMid { repair } => {
                let proc = &mut self.repairs[repair];
                proc.bytes += a.delivered_bytes;
                affected.insert(proc.object);
                // A broken pipeline restarts from scratch: cancel the
                // surviving half of the chain too.
                let partner = if let ProcState::SrcP(s) = &mut proc.state {
                    s.pair = None;
                    match role {
                        Role::SrcFar { .. } => {
                            s.far = None;
                            s.mid.take()
                        }
                        _ => {
                            s.mid = None;
                            s.far.take()
                        }
                    }
                } else {
                    None
                };
                if let Some(tid) = partner {
                    self.roles.remove(&tid);
                    if let Some(bytes) = self.world.cancel_transfer(tid) {
                        self.repairs[repair].bytes += bytes;
                    }
                }
            }
            Role::CrgcDown { batch, member } => {
                let repair = match &self.batches[batch] {
                    Batch::Crgc(bt) => bt.members[member],
                    _ => unreachable!(),
                };
                self.repairs[repair].bytes += a.delivered_bytes;
                affected.insert(self.batches[batch].object());
            }
            Role::CrgcExch { batch, to_member } => {
                let repair = match &self.batches[batch] {
                    Batch::Crgc(bt) => bt.members[to_member],
                    _ => unreachable!(),
                };
                self.repairs[repair].bytes += a.delivered_bytes;
                affected.insert(self.batches[batch].object());
            }
            Role::ReconDown { batch, .. } => {
                let repair = match &self.batches[batch] {
                    Batch::Recon(bt) => bt.members[0],
                    _ => unreachable!(),
                };
                self.repairs[repair].bytes += a.delivered_bytes;
                affected.insert(self.batches[batch].object());
            }
            Role::ReconDist { batch, member } => {
                let repair = match &self.batches[batch] {
                    Batch::Recon(bt) => bt.members[member],
                    _ => unreachable!(),
                };
                self.repairs[repair].bytes += a.delivered_bytes;
                affected.insert(self.batches[batch].object());
            }
        }
    }

    /// Re-evaluates one object after its survivor set changed.
    fn reconcile_object(
        &mut self,
        object: ObjectId,
        failed: &BTreeSet<NodeId>,
        report: &mut InjectionReport,
    ) {
        if self.object_lost[object] {
            return;
        }
        if !is_recoverable(&self.code, self.live[object]) {
            self.mark_object_lost(object, report);
            return;
        }
        match self.strategy {
            super::Strategy::EcLazy | super::Strategy::Crgc => {
                self.rebuild_batch(object, failed, report)
            }
            _ => {
                // Individual repairs: restart those whose newcomer died
                // (abort handling already pruned dead sources), then rebuild
                // any fallback batch and spawn processes for fresh losses.
                let ids: Vec<RepairId> = self
                    .active
                    .iter()
                    .copied()
                    .filter(|&id| self.repairs[id].object == object)
                    .collect();
                let mut batched: Vec<RepairId> = Vec::new();
                for id in ids {
                    if matches!(self.repairs[id].state, ProcState::Batched { .. }) {
                        batched.push(id);
                        continue;
                    }
                    if failed.contains(&self.repairs[id].newcomer) {
                        self.restart_repair(id);
                    }
                }
                if !batched.is_empty() {
                    self.rebuild_fallback_batch(object, batched, failed);
                }
                self.spawn_missing(object, report);
            }
        }
    }

    fn mark_object_lost(&mut self, object: ObjectId, report: &mut InjectionReport) {
        self.object_lost[object] = true;
        self.metrics.objects_lost += 1;
        report.lost_objects.push(object);
        let step = self.world.step();
        if let Some(b) = self.object_batch[object] {
            self.cancel_batch_transfers(b);
            self.retire_batch(b);
        }
        // Abandon in-flight repairs.
        let ids: Vec<RepairId> = self
            .active
            .iter()
            .copied()
            .filter(|&id| self.repairs[id].object == object)
            .collect();
        let mut covered = FragmentSet::empty();
        for id in ids {
            self.cancel_repair_transfers(id);
            let proc = &mut self.repairs[id];
            proc.phase = Phase::Unrepairable;
            proc.end_step = step;
            covered.insert(proc.fragment);
            self.claimed[object].remove(proc.fragment);
            self.active.remove(&id);
            let proc = &self.repairs[id];
            self.metrics.records.push(RepairRecord {
                object,
                fragment: proc.fragment,
                strategy: self.strategy.label(),
                start_step: proc.start_step,
                end_step: step,
                bytes: proc.bytes,
                fallback: proc.fallback,
                lost: true,
            });
        }
        // Lost fragments that never had a repair process.
        let missing =
            FragmentSet::from_bits(FragmentSet::full(self.code.n()).bits() & !self.live[object].bits() & !covered.bits());
        for fragment in missing.iter() {
            self.metrics.records.push(RepairRecord {
                object,
                fragment,
                strategy: self.strategy.label(),
                start_step: step,
                end_step: step,
                bytes: 0,
                fallback: false,
                lost: true,
            });
        }
    }

    /// Tears the object's batch down (if any), folds every pending fragment
    /// into a fresh one, and re-picks dead newcomers.
    fn rebuild_batch(
        &mut self,
        object: ObjectId,
        failed: &BTreeSet<NodeId>,
        report: &mut InjectionReport,
    ) {
        let mut members: Vec<RepairId> = self
            .active
            .iter()
            .copied()
            .filter(|&id| self.repairs[id].object == object)
            .collect();
        if let Some(b) = self.object_batch[object].take() {
            self.cancel_batch_transfers(b);
            self.active_batches.remove(&b);
        }
        for &id in &members {
            if failed.contains(&self.repairs[id].newcomer) {
                self.repick_newcomer(id);
            }
        }
        // Fragments lost in this event get processes and join the batch.
        let fresh = self.missing_fragments(object);
        for fragment in fresh.iter() {
            let id = self.spawn_repair(object, fragment);
            report.spawned.push(id);
            members.push(id);
        }
        if !members.is_empty() {
            self.form_batch(object, members, false);
        }
    }

    /// Rebuilds the reconstruction batch that pair repairs of this object
    /// had fallen back into.
    fn rebuild_fallback_batch(
        &mut self,
        object: ObjectId,
        members: Vec<RepairId>,
        failed: &BTreeSet<NodeId>,
    ) {
        if let Some(b) = self.object_batch[object].take() {
            self.cancel_batch_transfers(b);
            self.active_batches.remove(&b);
        }
        for &id in &members {
            if failed.contains(&self.repairs[id].newcomer) {
                self.repick_newcomer(id);
            }
        }
        self.form_batch(object, members, true);
    }

    fn missing_fragments(&self, object: ObjectId) -> FragmentSet {
        FragmentSet::from_bits(
            FragmentSet::full(self.code.n()).bits()
                & !self.live[object].bits()
                & !self.claimed[object].bits(),
        )
    }

    fn spawn_missing(&mut self, object: ObjectId, report: &mut InjectionReport) {
        for fragment in self.missing_fragments(object).iter() {
            let id = self.spawn_repair(object, fragment);
            report.spawned.push(id);
        }
    }

    /// Moves a repair whose newcomer died onto a fresh node.
    fn repick_newcomer(&mut self, id: RepairId) {
        let (object, fragment) = (self.repairs[id].object, self.repairs[id].fragment);
        self.claimed[object].remove(fragment);
        let newcomer = self.choose_newcomer(object);
        self.claimed[object].insert(fragment);
        self.loc[object][fragment] = newcomer;
        self.repairs[id].newcomer = newcomer;
    }

    /// Full restart of a repair whose newcomer died: fresh node, fresh
    /// strategy state; accumulated bytes and the start step remain.
    fn restart_repair(&mut self, id: RepairId) {
        self.cancel_repair_transfers(id);
        self.repick_newcomer(id);
        let fresh = self.fresh_state();
        self.repairs[id].state = fresh;
    }
}
