//! Discrete-time repair simulator and analytic toolkit for erasure-coded
//! networked storage.
//!
//! The crate models a cluster of storage nodes holding erasure-coded objects
//! and simulates the regeneration of lost fragments under different coding
//! schemes: classical erasure codes with lazy repair, (collaborative)
//! regenerating codes, and self-repairing codes with an optional pipelined
//! repair path. Alongside the simulator it ships exact analytic oracles
//! (repair-traffic formulas, static resilience by enumeration, a
//! hypergeometric lost-object calculator) used to cross-check simulation
//! results.
//!
//! Module map:
//! - [`coding`]: code parameters, normalized repair-traffic formulas,
//!   GF(2) structures for pair repair, recoverability oracles.
//! - [`placement`]: assignment of fragments to nodes, random or clustered.
//! - [`netsim`]: the step-quantized full-duplex network engine with random
//!   arbitration and a stochastic node-overload process.
//! - [`repair`]: failure injection and per-strategy repair state machines.
//! - [`analysis`]: metrics aggregation and the analytic oracles.

pub mod analysis;
pub mod coding;
pub mod netsim;
pub mod placement;
pub mod repair;

pub use coding::{CodeConfig, CodeFamily, FragmentSet, SrcStructure};
pub use netsim::{OverloadParams, SimParams, World};
pub use placement::{NodeId, ObjectId, PlacementConfig, PlacementMap};
pub use repair::{FailureEvent, Simulation, Strategy};
