//! Failure injection and per-strategy repair state machines.
//!
//! A [`Simulation`] couples a [`World`] with the current fragment locations
//! and drives one repair process per lost fragment. Strategies differ in how
//! sources are picked and how many bytes move:
//!
//! - lazy EC and the universal fallback reconstruct the whole object at one
//!   newcomer, which then redistributes fresh fragments to the others;
//! - RGC engages the first d live holders that are free, streaming one
//!   reduced-size unit from each;
//! - CRGC batches all lost fragments of an object (d = n - f), adding an
//!   exchange phase among the newcomers after their downloads finish;
//! - SRC picks a random live repair pair and downloads both fragments;
//! - SRCp waits for the first pair whose members are simultaneously free
//!   and pipelines one fragment through the pair, finishing in P+1 steps
//!   instead of 2P.
//!
//! Newcomers are uniformly random live cluster nodes not already holding (or
//! regenerating) a fragment of the object; a failed node reboots empty right
//! after injection, so even the fully clustered placement always has a
//! candidate. A node failing mid-repair aborts its transfers and the owning
//! processes reselect sources.

mod failures;

pub use failures::{FailureEvent, InjectionReport};

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::analysis::{MetricsLog, RepairRecord};
use crate::coding::{is_recoverable, unit_transfer_crgc, CodeConfig, CodeFamily, FragmentSet};
use crate::netsim::{CompletedTransfer, OverloadParams, SimParams, TransferId, World};
use crate::placement::{NodeId, ObjectId, PlacementMap};

pub type RepairId = usize;
type BatchId = usize;

#[derive(Debug, Error)]
pub enum RepairError {
    #[error("strategy {strategy} does not apply to code family {family}")]
    StrategyMismatch {
        strategy: &'static str,
        family: CodeFamily,
    },
    #[error("repair degree d={d} out of range for an ({n},{k}) code")]
    BadDegree { d: usize, n: usize, k: usize },
    #[error("placement stores {placed} fragments per object but the code has n={n}")]
    FragmentMismatch { placed: usize, n: usize },
    #[error("{what} of {bytes} bytes is not a multiple of the packet size {beta}")]
    Granularity {
        what: &'static str,
        bytes: u64,
        beta: u64,
    },
    #[error(transparent)]
    Coding(#[from] crate::coding::CodingError),
    #[error("simulation still active after {0} steps")]
    Stalled(u64),
}

/// Repair strategy an experiment runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Lazy whole-object reconstruction over all lost fragments of an object.
    EcLazy,
    /// Regenerating repair with fixed degree d, one failure at a time.
    Rgc { d: usize },
    /// Collaborative repair: per object, f = lost fragments and d = n - f.
    Crgc,
    /// Pair repair with uniformly random pair selection.
    Src,
    /// Pair repair pipelined through the first simultaneously free pair.
    SrcP,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::EcLazy => "ec-lazy",
            Strategy::Rgc { .. } => "rgc",
            Strategy::Crgc => "crgc",
            Strategy::Src => "src",
            Strategy::SrcP => "srcp",
        }
    }

    pub fn family(self) -> CodeFamily {
        match self {
            Strategy::EcLazy => CodeFamily::Ec,
            Strategy::Rgc { .. } => CodeFamily::Rgc,
            Strategy::Crgc => CodeFamily::Crgc,
            Strategy::Src => CodeFamily::Src,
            Strategy::SrcP => CodeFamily::SrcP,
        }
    }
}

/// Phase of one repair; transitions are monotone left to right, or straight
/// to `Unrepairable`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Selecting,
    Downloading,
    Exchanging,
    Done,
    Unrepairable,
}

/// State machine regenerating one lost fragment at one newcomer node.
#[derive(Debug)]
pub struct RepairProcess {
    pub id: RepairId,
    pub object: ObjectId,
    pub fragment: usize,
    pub newcomer: NodeId,
    pub phase: Phase,
    pub start_step: u64,
    pub end_step: u64,
    /// Bytes moved on behalf of this repair, including discarded partials.
    pub bytes: u64,
    pub fallback: bool,
    state: ProcState,
}

impl RepairProcess {
    pub fn duration_steps(&self) -> u64 {
        self.end_step - self.start_step
    }
}

#[derive(Debug)]
enum ProcState {
    Rgc(RgcState),
    Src(SrcState),
    SrcP(SrcPState),
    Batched { batch: BatchId },
}

#[derive(Debug, Default)]
struct RgcState {
    /// Source fragments engaged (submitted or already delivered).
    engaged: FragmentSet,
    /// Source fragments whose unit arrived completely.
    have: FragmentSet,
    outstanding: Vec<TransferId>,
}

#[derive(Debug, Default)]
struct SrcState {
    pair: Option<(usize, usize)>,
    legs: Vec<SrcLeg>,
}

/// Download progress from one pair member; survives pair reselection when
/// the new pair reuses the fragment.
#[derive(Debug)]
struct SrcLeg {
    frag: usize,
    received: u64,
    transfer: Option<TransferId>,
}

#[derive(Debug, Default)]
struct SrcPState {
    pair: Option<(usize, usize)>,
    far: Option<TransferId>,
    mid: Option<TransferId>,
}

#[derive(Debug)]
enum Batch {
    Crgc(CrgcBatch),
    Recon(ReconBatch),
}

impl Batch {
    fn object(&self) -> ObjectId {
        match self {
            Batch::Crgc(b) => b.object,
            Batch::Recon(b) => b.object,
        }
    }

    fn members(&self) -> &[RepairId] {
        match self {
            Batch::Crgc(b) => &b.members,
            Batch::Recon(b) => &b.members,
        }
    }
}

/// Download-then-exchange batch over the f lost fragments of one object.
#[derive(Debug)]
struct CrgcBatch {
    object: ObjectId,
    d: usize,
    unit: u64,
    members: Vec<RepairId>,
    engaged: FragmentSet,
    downloads_left: Vec<usize>,
    exchanges_left: Vec<usize>,
    done_members: usize,
}

/// Whole-object reconstruction: the first member downloads a decodable set
/// of k fragments and then distributes fresh fragments to the others.
#[derive(Debug)]
struct ReconBatch {
    object: ObjectId,
    members: Vec<RepairId>,
    /// Source fragments with fully delivered downloads.
    have: FragmentSet,
    /// Source fragments engaged, including completed ones.
    engaged: FragmentSet,
    distributions_sent: bool,
    done_members: usize,
}

/// Discrete-time repair simulation over one placement.
pub struct Simulation {
    code: CodeConfig,
    strategy: Strategy,
    world: World,
    placement: PlacementMap,
    /// Current node of each (object, fragment); meaningful while the
    /// fragment is claimed (live or under repair).
    loc: Vec<Vec<NodeId>>,
    /// Live fragments per object.
    live: Vec<FragmentSet>,
    /// Live plus under-repair fragments; the nodes they map to are off
    /// limits for new newcomers of the same object.
    claimed: Vec<FragmentSet>,
    /// Live fragments stored per node.
    node_frags: Vec<Vec<(ObjectId, usize)>>,
    object_lost: Vec<bool>,
    repairs: Vec<RepairProcess>,
    active: BTreeSet<RepairId>,
    batches: Vec<Batch>,
    active_batches: BTreeSet<BatchId>,
    object_batch: Vec<Option<BatchId>>,
    batch_transfers: Vec<Vec<TransferId>>,
    roles: HashMap<TransferId, Role>,
    rng: ChaCha12Rng,
    metrics: MetricsLog,
}

#[derive(Debug, Clone, Copy)]
enum Role {
    RgcUnit { repair: RepairId, frag: usize },
    SrcLeg { repair: RepairId, frag: usize },
    SrcFar { repair: RepairId },
    SrcMid { repair: RepairId },
    CrgcDown { batch: BatchId, member: usize },
    CrgcExch { batch: BatchId, to_member: usize },
    ReconDown { batch: BatchId, frag: usize },
    ReconDist { batch: BatchId, member: usize },
}

impl Simulation {
    pub fn new(
        code: CodeConfig,
        strategy: Strategy,
        placement: PlacementMap,
        params: SimParams,
        overload: Option<OverloadParams>,
        seed: u64,
    ) -> Result<Self, RepairError> {
        if strategy.family() != code.family() {
            return Err(RepairError::StrategyMismatch {
                strategy: strategy.label(),
                family: code.family(),
            });
        }
        let (n, k) = (code.n(), code.k());
        if placement.config().fragments_per_object != n {
            return Err(RepairError::FragmentMismatch {
                placed: placement.config().fragments_per_object,
                n,
            });
        }
        let fragment = code.fragment_size();
        if fragment % params.beta != 0 {
            return Err(RepairError::Granularity {
                what: "fragment",
                bytes: fragment,
                beta: params.beta,
            });
        }
        match strategy {
            Strategy::Rgc { d } => {
                if d < k || d > n - 1 {
                    return Err(RepairError::BadDegree { d, n, k });
                }
                let unit = unit_transfer_crgc(code.object_size(), k as u64, d as u64, 1)?;
                if unit % params.beta != 0 {
                    return Err(RepairError::Granularity {
                        what: "repair unit",
                        bytes: unit,
                        beta: params.beta,
                    });
                }
            }
            Strategy::Crgc => {
                // Batches adapt f dynamically with d = n - f, which keeps the
                // per-transfer unit at B / (k * (n - k)) for every batch.
                let unit =
                    unit_transfer_crgc(code.object_size(), k as u64, (n - 1) as u64, 1)?;
                if unit % params.beta != 0 {
                    return Err(RepairError::Granularity {
                        what: "repair unit",
                        bytes: unit,
                        beta: params.beta,
                    });
                }
            }
            Strategy::Src | Strategy::SrcP => {
                debug_assert!(code.structure().is_some());
            }
            Strategy::EcLazy => {}
        }

        let n_nodes = placement.num_nodes();
        let num_objects = placement.num_objects();
        let world = World::new(n_nodes, params, overload, seed);
        let mut node_frags: Vec<Vec<(ObjectId, usize)>> = vec![Vec::new(); n_nodes];
        let mut loc = Vec::with_capacity(num_objects);
        for object in 0..num_objects {
            let nodes = placement.object_nodes(object).to_vec();
            for (frag, &node) in nodes.iter().enumerate() {
                node_frags[node].push((object, frag));
            }
            loc.push(nodes);
        }
        let mut metrics = MetricsLog::new(params.tau_seconds(), seed);
        metrics.objects_total = num_objects;
        Ok(Simulation {
            code,
            strategy,
            world,
            placement,
            loc,
            live: vec![FragmentSet::full(n); num_objects],
            claimed: vec![FragmentSet::full(n); num_objects],
            node_frags,
            object_lost: vec![false; num_objects],
            repairs: Vec::new(),
            active: BTreeSet::new(),
            batches: Vec::new(),
            active_batches: BTreeSet::new(),
            object_batch: vec![None; num_objects],
            batch_transfers: Vec::new(),
            roles: HashMap::new(),
            rng: ChaCha12Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15),
            metrics,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut World {
        &mut self.world
    }

    pub fn code(&self) -> &CodeConfig {
        &self.code
    }

    pub fn placement(&self) -> &PlacementMap {
        &self.placement
    }

    pub fn repair(&self, id: RepairId) -> &RepairProcess {
        &self.repairs[id]
    }

    pub fn repairs(&self) -> &[RepairProcess] {
        &self.repairs
    }

    pub fn active_repairs(&self) -> usize {
        self.active.len()
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty()
    }

    pub fn live_fragments(&self, object: ObjectId) -> FragmentSet {
        self.live[object]
    }

    pub fn is_object_lost(&self, object: ObjectId) -> bool {
        self.object_lost[object]
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.metrics
    }

    /// Finalizes and returns the metrics log.
    pub fn into_metrics(mut self) -> MetricsLog {
        self.metrics.steps = self.world.step();
        self.metrics.uploaded_per_node = self.world.uploaded_bytes().to_vec();
        self.metrics
    }

    /// Runs one step: repairs engage sources, then packets move.
    pub fn step(&mut self) {
        self.world.begin_step();
        self.drive_active();
        let report = self.world.deliver_packets();
        for completion in report.completed {
            self.on_transfer_complete(completion);
        }
    }

    /// Steps until every repair has terminated, with a safety cap.
    pub fn run_to_completion(&mut self, max_steps: u64) -> Result<u64, RepairError> {
        let start = self.world.step();
        while !self.is_idle() {
            if self.world.step() - start >= max_steps {
                return Err(RepairError::Stalled(max_steps));
            }
            self.step();
        }
        Ok(self.world.step() - start)
    }

    // ---- driving ------------------------------------------------------

    fn drive_active(&mut self) {
        let ids: Vec<RepairId> = self.active.iter().copied().collect();
        // Plain RGC handles one failure of an object at a time; the lowest
        // pending id (spawn order follows fragment order) goes first.
        let mut rgc_seen: BTreeSet<ObjectId> = BTreeSet::new();
        for id in ids {
            if !self.active.contains(&id) {
                continue;
            }
            match &self.repairs[id].state {
                ProcState::Rgc(_) => {
                    if !rgc_seen.insert(self.repairs[id].object) {
                        continue;
                    }
                    self.drive_rgc(id);
                }
                ProcState::Src(_) => self.drive_src(id),
                ProcState::SrcP(_) => self.drive_srcp(id),
                ProcState::Batched { .. } => {}
            }
        }
        let batch_ids: Vec<BatchId> = self.active_batches.iter().copied().collect();
        for b in batch_ids {
            if !self.active_batches.contains(&b) {
                continue;
            }
            match &self.batches[b] {
                Batch::Crgc(_) => self.drive_crgc_batch(b),
                Batch::Recon(_) => self.drive_recon_batch(b),
            }
        }
    }

    fn rgc_degree(&self) -> usize {
        match self.strategy {
            Strategy::Rgc { d } => d,
            _ => unreachable!("rgc state only exists under the rgc strategy"),
        }
    }

    fn drive_rgc(&mut self, id: RepairId) {
        let object = self.repairs[id].object;
        let d = self.rgc_degree();
        let unit = unit_transfer_crgc(
            self.code.object_size(),
            self.code.k() as u64,
            d as u64,
            1,
        )
        .expect("validated at construction");
        let state = match &self.repairs[id].state {
            ProcState::Rgc(s) => s,
            _ => unreachable!(),
        };
        let engaged_count = state.engaged.len();
        if engaged_count >= d {
            return;
        }
        // Not enough distinct sources can ever be engaged: reconstruct the
        // whole object instead.
        let candidates = self.live[object].bits() & !state.engaged.bits();
        let candidates = FragmentSet::from_bits(candidates);
        if engaged_count + candidates.len() < d {
            self.convert_to_fallback(vec![id]);
            return;
        }
        let newcomer = self.repairs[id].newcomer;
        let mut to_engage: Vec<(usize, NodeId)> = Vec::new();
        for frag in candidates.iter() {
            if engaged_count + to_engage.len() >= d {
                break;
            }
            let holder = self.loc[object][frag];
            if self.world.is_available(holder) {
                to_engage.push((frag, holder));
            }
        }
        for (frag, holder) in to_engage {
            let tid = self
                .world
                .submit_transfer(holder, newcomer, unit, id as u64)
                .expect("endpoints validated");
            self.roles.insert(tid, Role::RgcUnit { repair: id, frag });
            let proc = &mut self.repairs[id];
            proc.phase = Phase::Downloading;
            match &mut proc.state {
                ProcState::Rgc(s) => {
                    s.engaged.insert(frag);
                    s.outstanding.push(tid);
                }
                _ => unreachable!(),
            }
        }
    }

    fn drive_src(&mut self, id: RepairId) {
        let proc = &self.repairs[id];
        let (object, fragment, newcomer) = (proc.object, proc.fragment, proc.newcomer);
        let needs_pair = matches!(&proc.state, ProcState::Src(s) if s.pair.is_none());
        if !needs_pair {
            return;
        }
        let structure = self.code.structure().expect("src code carries a structure");
        let live_pairs = structure.live_pairs(fragment, self.live[object]);
        if live_pairs.is_empty() {
            self.convert_to_fallback(vec![id]);
            return;
        }
        let pair = live_pairs[self.rng.random_range(0..live_pairs.len())];
        let fragment_size = self.code.fragment_size();
        // Partial data from a member of the new pair is kept; legs from
        // anyone else are discarded and their transfers stopped.
        let stale: Vec<TransferId> = {
            let state = match &mut self.repairs[id].state {
                ProcState::Src(s) => s,
                _ => unreachable!(),
            };
            let mut stale = Vec::new();
            state.legs.retain_mut(|leg| {
                if leg.frag == pair.0 || leg.frag == pair.1 {
                    true
                } else {
                    if let Some(tid) = leg.transfer.take() {
                        stale.push(tid);
                    }
                    false
                }
            });
            stale
        };
        for tid in stale {
            self.roles.remove(&tid);
            if let Some(bytes) = self.world.cancel_transfer(tid) {
                self.repairs[id].bytes += bytes;
            }
        }
        let mut submissions: Vec<(usize, u64)> = Vec::new();
        {
            let state = match &mut self.repairs[id].state {
                ProcState::Src(s) => s,
                _ => unreachable!(),
            };
            state.pair = Some(pair);
            for frag in [pair.0, pair.1] {
                if !state.legs.iter().any(|l| l.frag == frag) {
                    state.legs.push(SrcLeg {
                        frag,
                        received: 0,
                        transfer: None,
                    });
                }
            }
            for leg in &state.legs {
                if leg.received < fragment_size && leg.transfer.is_none() {
                    submissions.push((leg.frag, fragment_size - leg.received));
                }
            }
        }
        for (frag, bytes) in submissions {
            let holder = self.loc[object][frag];
            let tid = self
                .world
                .submit_transfer(holder, newcomer, bytes, id as u64)
                .expect("endpoints validated");
            self.roles.insert(tid, Role::SrcLeg { repair: id, frag });
            let state = match &mut self.repairs[id].state {
                ProcState::Src(s) => s,
                _ => unreachable!(),
            };
            state
                .legs
                .iter_mut()
                .find(|l| l.frag == frag)
                .expect("leg created above")
                .transfer = Some(tid);
        }
        self.repairs[id].phase = Phase::Downloading;
        self.check_src_done(id);
    }

    fn drive_srcp(&mut self, id: RepairId) {
        let proc = &self.repairs[id];
        let (object, fragment, newcomer) = (proc.object, proc.fragment, proc.newcomer);
        let waiting = matches!(&proc.state, ProcState::SrcP(s) if s.pair.is_none());
        if !waiting {
            return;
        }
        let structure = self.code.structure().expect("src code carries a structure");
        let live_pairs = structure.live_pairs(fragment, self.live[object]);
        if live_pairs.is_empty() {
            self.convert_to_fallback(vec![id]);
            return;
        }
        // First pair in structure order whose members can both upload now.
        let ready = live_pairs.into_iter().find(|&(y, z)| {
            self.world.is_available(self.loc[object][y])
                && self.world.is_available(self.loc[object][z])
        });
        let Some((mid_frag, far_frag)) = ready else {
            return; // keep waiting
        };
        let fragment_size = self.code.fragment_size();
        let mid_holder = self.loc[object][mid_frag];
        let far_holder = self.loc[object][far_frag];
        let far = self
            .world
            .submit_transfer(far_holder, mid_holder, fragment_size, id as u64)
            .expect("endpoints validated");
        // The middle node combines byte by byte with its own fragment and
        // forwards, one step behind.
        let mid = self
            .world
            .submit_gated_transfer(mid_holder, newcomer, fragment_size, id as u64, far)
            .expect("gate submitted above");
        self.roles.insert(far, Role::SrcFar { repair: id });
        self.roles.insert(mid, Role::SrcMid { repair: id });
        let proc = &mut self.repairs[id];
        proc.phase = Phase::Downloading;
        match &mut proc.state {
            ProcState::SrcP(s) => {
                s.pair = Some((mid_frag, far_frag));
                s.far = Some(far);
                s.mid = Some(mid);
            }
            _ => unreachable!(),
        }
    }

    fn drive_crgc_batch(&mut self, b: BatchId) {
        let (object, d, unit, engaged_count) = match &self.batches[b] {
            Batch::Crgc(batch) => (
                batch.object,
                batch.d,
                batch.unit,
                batch.engaged.len(),
            ),
            _ => unreachable!(),
        };
        if engaged_count >= d {
            return;
        }
        let candidates =
            FragmentSet::from_bits(self.live[object].bits() & {
                match &self.batches[b] {
                    Batch::Crgc(batch) => !batch.engaged.bits(),
                    _ => unreachable!(),
                }
            });
        let members: Vec<RepairId> = self.batches[b].members().to_vec();
        let mut engaged_now = engaged_count;
        for frag in candidates.iter() {
            if engaged_now >= d {
                break;
            }
            let holder = self.loc[object][frag];
            if !self.world.is_available(holder) {
                continue;
            }
            for (m, &member) in members.iter().enumerate() {
                let newcomer = self.repairs[member].newcomer;
                let tid = self
                    .world
                    .submit_transfer(holder, newcomer, unit, member as u64)
                    .expect("endpoints validated");
                self.roles.insert(tid, Role::CrgcDown { batch: b, member: m });
                self.batch_transfers[b].push(tid);
                self.repairs[member].phase = Phase::Downloading;
            }
            match &mut self.batches[b] {
                Batch::Crgc(batch) => batch.engaged.insert(frag),
                _ => unreachable!(),
            }
            engaged_now += 1;
        }
    }

    fn drive_recon_batch(&mut self, b: BatchId) {
        let k = self.code.k();
        let (object, leader, engaged) = match &self.batches[b] {
            Batch::Recon(batch) => (batch.object, batch.members[0], batch.engaged),
            _ => unreachable!(),
        };
        if engaged.len() >= k {
            return;
        }
        let leader_newcomer = self.repairs[leader].newcomer;
        let fragment_size = self.code.fragment_size();
        let candidates = FragmentSet::from_bits(self.live[object].bits() & !engaged.bits());
        let mut to_engage: Vec<(usize, NodeId)> = Vec::new();
        {
            let mut engaged_cols: Vec<u32> = match self.code.structure() {
                Some(s) => engaged.iter().map(|f| s.column(f)).collect(),
                None => Vec::new(),
            };
            let mut count = engaged.len();
            for frag in candidates.iter() {
                if count >= k {
                    break;
                }
                // Non-MDS codes must download a decodable set: engage a
                // fragment only if its column grows the GF(2) span.
                if let Some(s) = self.code.structure() {
                    let col = s.column(frag);
                    let before = crate::coding::gf2_rank(engaged_cols.iter().copied());
                    let after =
                        crate::coding::gf2_rank(engaged_cols.iter().copied().chain([col]));
                    if after == before {
                        continue;
                    }
                    if self.world.is_available(self.loc[object][frag]) {
                        engaged_cols.push(col);
                        to_engage.push((frag, self.loc[object][frag]));
                        count += 1;
                    }
                } else if self.world.is_available(self.loc[object][frag]) {
                    to_engage.push((frag, self.loc[object][frag]));
                    count += 1;
                }
            }
        }
        for (frag, holder) in to_engage {
            let tid = self
                .world
                .submit_transfer(holder, leader_newcomer, fragment_size, leader as u64)
                .expect("endpoints validated");
            self.roles.insert(tid, Role::ReconDown { batch: b, frag });
            self.batch_transfers[b].push(tid);
            match &mut self.batches[b] {
                Batch::Recon(batch) => batch.engaged.insert(frag),
                _ => unreachable!(),
            }
            self.repairs[leader].phase = Phase::Downloading;
        }
    }

    // ---- completions ---------------------------------------------------

    fn on_transfer_complete(&mut self, c: CompletedTransfer) {
        let Some(role) = self.roles.remove(&c.id) else {
            return;
        };
        match role {
            Role::RgcUnit { repair, frag } => {
                let d = self.rgc_degree();
                let proc = &mut self.repairs[repair];
                proc.bytes += c.bytes;
                let done = match &mut proc.state {
                    ProcState::Rgc(s) => {
                        s.have.insert(frag);
                        s.outstanding.retain(|&t| t != c.id);
                        s.have.len() >= d
                    }
                    _ => unreachable!(),
                };
                if done {
                    self.finish_repair(repair);
                }
            }
            Role::SrcLeg { repair, frag } => {
                let proc = &mut self.repairs[repair];
                proc.bytes += c.bytes;
                match &mut proc.state {
                    ProcState::Src(s) => {
                        let leg = s
                            .legs
                            .iter_mut()
                            .find(|l| l.frag == frag)
                            .expect("completed leg exists");
                        leg.received += c.bytes;
                        leg.transfer = None;
                    }
                    _ => unreachable!(),
                }
                self.check_src_done(repair);
            }
            Role::SrcFar { repair } => {
                let proc = &mut self.repairs[repair];
                proc.bytes += c.bytes;
                if let ProcState::SrcP(s) = &mut proc.state {
                    s.far = None;
                }
            }
            Role::SrcMid { repair } => {
                let proc = &mut self.repairs[repair];
                proc.bytes += c.bytes;
                if let ProcState::SrcP(s) = &mut proc.state {
                    debug_assert!(s.far.is_none(), "gating finishes the feed first");
                    s.mid = None;
                }
                self.finish_repair(repair);
            }
            Role::CrgcDown { batch, member } => {
                let (repair, downloads_left, f) = match &mut self.batches[batch] {
                    Batch::Crgc(bt) => {
                        bt.downloads_left[member] -= 1;
                        (bt.members[member], bt.downloads_left[member], bt.members.len())
                    }
                    _ => unreachable!(),
                };
                self.repairs[repair].bytes += c.bytes;
                if downloads_left == 0 {
                    if f == 1 {
                        self.finish_crgc_member(batch, member);
                    } else {
                        self.repairs[repair].phase = Phase::Exchanging;
                        self.submit_crgc_exchanges(batch, member);
                        self.check_crgc_member(batch, member);
                    }
                }
            }
            Role::CrgcExch { batch, to_member } => {
                let repair = match &mut self.batches[batch] {
                    Batch::Crgc(bt) => {
                        bt.exchanges_left[to_member] -= 1;
                        bt.members[to_member]
                    }
                    _ => unreachable!(),
                };
                self.repairs[repair].bytes += c.bytes;
                self.check_crgc_member(batch, to_member);
            }
            Role::ReconDown { batch, frag } => {
                let (leader, downloads_done) = match &mut self.batches[batch] {
                    Batch::Recon(bt) => {
                        bt.have.insert(frag);
                        (bt.members[0], bt.have.len())
                    }
                    _ => unreachable!(),
                };
                self.repairs[leader].bytes += c.bytes;
                if downloads_done >= self.code.k() {
                    self.finish_recon_leader(batch);
                }
            }
            Role::ReconDist { batch, member } => {
                let repair = match &self.batches[batch] {
                    Batch::Recon(bt) => bt.members[member],
                    _ => unreachable!(),
                };
                self.repairs[repair].bytes += c.bytes;
                self.finish_recon_member(batch, member);
            }
        }
    }

    fn check_src_done(&mut self, id: RepairId) {
        let fragment_size = self.code.fragment_size();
        let done = match &self.repairs[id].state {
            ProcState::Src(s) => match s.pair {
                Some((a, b)) => [a, b].iter().all(|&frag| {
                    s.legs
                        .iter()
                        .any(|l| l.frag == frag && l.received >= fragment_size)
                }),
                None => false,
            },
            _ => unreachable!(),
        };
        if done {
            self.finish_repair(id);
        }
    }

    fn submit_crgc_exchanges(&mut self, b: BatchId, member: usize) {
        let (unit, members) = match &self.batches[b] {
            Batch::Crgc(bt) => (bt.unit, bt.members.clone()),
            _ => unreachable!(),
        };
        let src = self.repairs[members[member]].newcomer;
        for (other, &other_id) in members.iter().enumerate() {
            if other == member {
                continue;
            }
            let dst = self.repairs[other_id].newcomer;
            let tid = self
                .world
                .submit_transfer(src, dst, unit, other_id as u64)
                .expect("endpoints validated");
            self.roles.insert(
                tid,
                Role::CrgcExch {
                    batch: b,
                    to_member: other,
                },
            );
            self.batch_transfers[b].push(tid);
        }
    }

    fn check_crgc_member(&mut self, b: BatchId, member: usize) {
        let ready = match &self.batches[b] {
            Batch::Crgc(bt) => {
                bt.downloads_left[member] == 0 && bt.exchanges_left[member] == 0
            }
            _ => unreachable!(),
        };
        if ready {
            self.finish_crgc_member(b, member);
        }
    }

    fn finish_crgc_member(&mut self, b: BatchId, member: usize) {
        let (repair, all_done) = match &mut self.batches[b] {
            Batch::Crgc(bt) => {
                bt.done_members += 1;
                (bt.members[member], bt.done_members == bt.members.len())
            }
            _ => unreachable!(),
        };
        self.finish_repair(repair);
        if all_done {
            self.retire_batch(b);
        }
    }

    fn finish_recon_leader(&mut self, b: BatchId) {
        let (leader, members) = match &mut self.batches[b] {
            Batch::Recon(bt) => {
                debug_assert!(!bt.distributions_sent);
                bt.distributions_sent = true;
                bt.done_members += 1;
                (bt.members[0], bt.members.clone())
            }
            _ => unreachable!(),
        };
        let fragment_size = self.code.fragment_size();
        let src = self.repairs[leader].newcomer;
        self.finish_repair(leader);
        for (m, &member) in members.iter().enumerate().skip(1) {
            let dst = self.repairs[member].newcomer;
            let tid = self
                .world
                .submit_transfer(src, dst, fragment_size, member as u64)
                .expect("endpoints validated");
            self.roles.insert(tid, Role::ReconDist { batch: b, member: m });
            self.batch_transfers[b].push(tid);
        }
        if members.len() == 1 {
            self.retire_batch(b);
        }
    }

    fn finish_recon_member(&mut self, b: BatchId, member: usize) {
        let (repair, all_done) = match &mut self.batches[b] {
            Batch::Recon(bt) => {
                bt.done_members += 1;
                (bt.members[member], bt.done_members == bt.members.len())
            }
            _ => unreachable!(),
        };
        self.finish_repair(repair);
        if all_done {
            self.retire_batch(b);
        }
    }

    fn retire_batch(&mut self, b: BatchId) {
        self.active_batches.remove(&b);
        let object = self.batches[b].object();
        if self.object_batch[object] == Some(b) {
            self.object_batch[object] = None;
        }
    }

    fn finish_repair(&mut self, id: RepairId) {
        let proc = &mut self.repairs[id];
        debug_assert!(matches!(
            proc.phase,
            Phase::Selecting | Phase::Downloading | Phase::Exchanging
        ));
        proc.phase = Phase::Done;
        proc.end_step = self.world.step();
        let (object, fragment, newcomer) = (proc.object, proc.fragment, proc.newcomer);
        self.live[object].insert(fragment);
        debug_assert!(self.claimed[object].contains(fragment));
        debug_assert_eq!(self.loc[object][fragment], newcomer);
        self.node_frags[newcomer].push((object, fragment));
        self.active.remove(&id);
        let proc = &self.repairs[id];
        self.metrics.records.push(RepairRecord {
            object,
            fragment,
            strategy: self.strategy.label(),
            start_step: proc.start_step,
            end_step: proc.end_step,
            bytes: proc.bytes,
            fallback: proc.fallback,
            lost: false,
        });
    }

    // ---- spawning ------------------------------------------------------

    /// Picks a uniformly random live cluster node that neither holds nor is
    /// regenerating a fragment of the object.
    fn choose_newcomer(&mut self, object: ObjectId) -> NodeId {
        let cluster = self.placement.cluster_of_object(object);
        let taken: Vec<NodeId> = self.claimed[object]
            .iter()
            .map(|frag| self.loc[object][frag])
            .collect();
        let candidates: Vec<NodeId> = self
            .placement
            .cluster_nodes(cluster)
            .filter(|&v| self.world.is_live(v) && !taken.contains(&v))
            .collect();
        assert!(
            !candidates.is_empty(),
            "cluster_size >= n guarantees a newcomer candidate"
        );
        candidates[self.rng.random_range(0..candidates.len())]
    }

    fn fresh_state(&self) -> ProcState {
        match self.strategy {
            Strategy::Rgc { .. } => ProcState::Rgc(RgcState::default()),
            Strategy::Src => ProcState::Src(SrcState::default()),
            Strategy::SrcP => ProcState::SrcP(SrcPState::default()),
            Strategy::EcLazy | Strategy::Crgc => ProcState::Batched { batch: usize::MAX },
        }
    }

    /// Spawns a repair process for a lost fragment of a recoverable object.
    fn spawn_repair(&mut self, object: ObjectId, fragment: usize) -> RepairId {
        debug_assert!(!self.live[object].contains(fragment));
        debug_assert!(!self.claimed[object].contains(fragment));
        let newcomer = self.choose_newcomer(object);
        self.claimed[object].insert(fragment);
        self.loc[object][fragment] = newcomer;
        let id = self.repairs.len();
        self.repairs.push(RepairProcess {
            id,
            object,
            fragment,
            newcomer,
            phase: Phase::Selecting,
            start_step: self.world.step(),
            end_step: 0,
            bytes: 0,
            fallback: false,
            state: self.fresh_state(),
        });
        self.active.insert(id);
        id
    }

    /// Groups pending repairs of one object into a reconstruction or CRGC
    /// batch. Members must already exist and be active.
    fn form_batch(&mut self, object: ObjectId, mut members: Vec<RepairId>, fallback: bool) {
        debug_assert!(!members.is_empty());
        // The member with the lowest fragment index reconstructs first.
        members.sort_by_key(|&id| self.repairs[id].fragment);
        let b = self.batches.len();
        let batch = if fallback || matches!(self.strategy, Strategy::EcLazy) {
            for &m in &members {
                self.repairs[m].fallback = fallback;
                self.repairs[m].state = ProcState::Batched { batch: b };
            }
            Batch::Recon(ReconBatch {
                object,
                members,
                have: FragmentSet::empty(),
                engaged: FragmentSet::empty(),
                distributions_sent: false,
                done_members: 0,
            })
        } else {
            // f = lost fragments of the object, d = n - f = the live rest.
            let f = members.len();
            let d = self.live[object].len();
            debug_assert_eq!(d + f, self.code.n(), "batch must cover every lost fragment");
            debug_assert!(d >= self.code.k());
            let unit = unit_transfer_crgc(
                self.code.object_size(),
                self.code.k() as u64,
                d as u64,
                f as u64,
            )
            .expect("dynamic d = n - f keeps the unit fixed");
            for &m in &members {
                self.repairs[m].state = ProcState::Batched { batch: b };
            }
            Batch::Crgc(CrgcBatch {
                object,
                d,
                unit,
                members,
                engaged: FragmentSet::empty(),
                downloads_left: vec![d; f],
                exchanges_left: vec![f - 1; f],
                done_members: 0,
            })
        };
        self.batches.push(batch);
        self.batch_transfers.push(Vec::new());
        self.active_batches.insert(b);
        self.object_batch[object] = Some(b);
    }

    /// Reroutes repairs that cannot proceed with their native strategy into
    /// a whole-object reconstruction batch.
    fn convert_to_fallback(&mut self, ids: Vec<RepairId>) {
        debug_assert!(!ids.is_empty());
        let object = self.repairs[ids[0]].object;
        // Cancel whatever the repairs had in flight.
        for &id in &ids {
            self.cancel_repair_transfers(id);
        }
        // Join the object's existing reconstruction batch if one is running.
        if let Some(b) = self.object_batch[object] {
            if let Batch::Recon(_) = &self.batches[b] {
                self.join_recon_batch(b, ids);
                return;
            }
        }
        self.form_batch(object, ids, true);
    }

    fn join_recon_batch(&mut self, b: BatchId, ids: Vec<RepairId>) {
        for &id in &ids {
            self.repairs[id].fallback = true;
            self.repairs[id].state = ProcState::Batched { batch: b };
        }
        let (distributions_sent, leader) = match &mut self.batches[b] {
            Batch::Recon(bt) => {
                bt.members.extend(ids.iter().copied());
                (bt.distributions_sent, bt.members[0])
            }
            _ => unreachable!(),
        };
        if distributions_sent {
            // Reconstruction already finished: send the joiners their
            // fragments right away.
            let src = self.repairs[leader].newcomer;
            let fragment_size = self.code.fragment_size();
            let member_base = match &self.batches[b] {
                Batch::Recon(bt) => bt.members.len() - ids.len(),
                _ => unreachable!(),
            };
            for (i, &id) in ids.iter().enumerate() {
                let dst = self.repairs[id].newcomer;
                let tid = self
                    .world
                    .submit_transfer(src, dst, fragment_size, id as u64)
                    .expect("endpoints validated");
                self.roles.insert(
                    tid,
                    Role::ReconDist {
                        batch: b,
                        member: member_base + i,
                    },
                );
                self.batch_transfers[b].push(tid);
            }
        }
    }

    /// Cancels a repair's outstanding transfers, crediting partial bytes.
    fn cancel_repair_transfers(&mut self, id: RepairId) {
        let tids: Vec<TransferId> = match &mut self.repairs[id].state {
            ProcState::Rgc(s) => std::mem::take(&mut s.outstanding),
            ProcState::Src(s) => s
                .legs
                .iter_mut()
                .filter_map(|l| l.transfer.take())
                .collect(),
            ProcState::SrcP(s) => s.far.take().into_iter().chain(s.mid.take()).collect(),
            ProcState::Batched { .. } => Vec::new(),
        };
        for tid in tids {
            self.roles.remove(&tid);
            if let Some(bytes) = self.world.cancel_transfer(tid) {
                self.repairs[id].bytes += bytes;
            }
        }
    }

    /// Cancels every outstanding transfer of a batch, crediting partials to
    /// the repairs they were feeding.
    fn cancel_batch_transfers(&mut self, b: BatchId) {
        let tids = std::mem::take(&mut self.batch_transfers[b]);
        for tid in tids {
            let Some(role) = self.roles.remove(&tid) else {
                continue;
            };
            if let Some(bytes) = self.world.cancel_transfer(tid) {
                let repair = match (role, &self.batches[b]) {
                    (Role::CrgcDown { member, .. }, Batch::Crgc(bt)) => bt.members[member],
                    (Role::CrgcExch { to_member, .. }, Batch::Crgc(bt)) => bt.members[to_member],
                    (Role::ReconDown { .. }, Batch::Recon(bt)) => bt.members[0],
                    (Role::ReconDist { member, .. }, Batch::Recon(bt)) => bt.members[member],
                    _ => unreachable!("batch transfer with a foreign role"),
                };
                self.repairs[repair].bytes += bytes;
            }
        }
    }
}

#[cfg(test)]
mod tests;
