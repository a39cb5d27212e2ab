//! Capacity-managed Mixture-of-Experts routing under expert parallelism.
//!
//! The crate simulates one MoE layer sharded across devices. Tokens are routed
//! top-k, then dispatched under a capacity policy:
//!
//! * vanilla (no capacity),
//! * count-based dropping and its global-fallback variant,
//! * MACS: entropy-weighted effective load, capacities that follow the batch's
//!   visual/text balance, same-device semantic rerouting of overflow and a
//!   retention-ordered fail-safe drop.
//!
//! Assignments are turned into stage latencies (dispatch, compute, aggregate)
//! and load statistics. Workloads are synthetic and fully seeded.
//!
//! ```text
//! workload ──▶ entropy ──▶ capacity ──▶ dispatch ──▶ sim ──▶ report
//!                 ▲                        ▲
//!                 └──── calibration ───────┘
//! ```

pub mod calibration;
pub mod capacity;
pub mod config;
pub mod dispatch;
pub mod entropy;
pub mod error;
pub mod model;
pub mod report;
pub mod sim;
pub mod workload;

pub use calibration::{ExpertClass, ExpertProfile, RoutingLog};
pub use capacity::{CapacityParams, CapacityPlan};
pub use config::RunConfig;
pub use dispatch::{DispatchOutcome, DispatchParams, Policy, RerouteScope};
pub use entropy::{EntropyParams, LoadLedger, NormScope};
pub use error::{Error, Result};
pub use model::{build_topology, top_k_route, Assignment, GateVector, Modality, SlotStatus, Token, Topology};
pub use sim::{LatencyBreakdown, LatencyModel};
pub use workload::{GateSpec, WorkloadSpec};
