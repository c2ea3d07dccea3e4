//! Simulator and optimization engine for dynamic spectrum sharing between a
//! terrestrial 5G network and a LEO satellite.
//!
//! Three service slices share one band through per-cycle bandwidth-part plans:
//! delay-sensitive traffic (D) on the widest numerology, mixed traffic (M)
//! served by both terrestrial access points and the satellite, and
//! satellite-only traffic (S). A digital twin predicts positions, traffic and
//! channels one cycle ahead; a joint resource-allocation planner turns the
//! predictions into bandwidth, steering, association and power decisions; a
//! per-subframe refinement stage repairs the terrestrial share of those
//! decisions against measured channels and actual arrivals.
//!
//! Module map:
//! - [`grid`]: multi-numerology time/frequency arithmetic and band-plan rules
//! - [`channel`]: Rician channel synthesis for the real and twin environments
//! - [`phy`]: SINR, interference and achievable-rate evaluation
//! - [`dtwin`]: position/traffic/channel prediction
//! - [`queueing`]: traffic steering, queue evolution, congestion objective
//! - [`sca`]: surrogate primitives and binary/steering recovery
//! - [`conic`]: convex subproblem assembly and the exponential-cone solver
//! - [`planner`]: the joint planner, the refinement loop, and benchmarks
//! - [`harness`]: scenarios, the simulation loop, reports, and the CLI

pub mod channel;
pub mod conic;
pub mod dtwin;
pub mod grid;
pub mod harness;
pub mod phy;
pub mod planner;
pub mod queueing;
pub mod sca;
pub mod seeds;
