//! Expert-parallel latency model.
//!
//! A layer costs three stages: token dispatch (all-to-all out), expert
//! computation and result aggregation (all-to-all back). Devices synchronize
//! at the end of computation, so compute time is set by the busiest expert
//! (or busiest device).

use serde::{Deserialize, Serialize};

use crate::entropy::LoadLedger;
use crate::error::{Error, Result};
use crate::model::{Assignment, Token, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComputeMode {
    #[default]
    PerExpertMax,
    PerDeviceSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub cost_per_token_compute: f64,
    pub cost_per_crossdev_token: f64,
    pub cost_per_result_token: f64,
    pub compute_mode: ComputeMode,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            cost_per_token_compute: 1.0,
            cost_per_crossdev_token: 0.01,
            cost_per_result_token: 0.01,
            compute_mode: ComputeMode::PerExpertMax,
        }
    }
}

impl LatencyModel {
    /// Compute-only model: one time unit per token, free communication.
    pub fn pure_compute() -> Self {
        LatencyModel {
            cost_per_token_compute: 1.0,
            cost_per_crossdev_token: 0.0,
            cost_per_result_token: 0.0,
            compute_mode: ComputeMode::PerExpertMax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("latency.cost_per_token_compute", self.cost_per_token_compute),
            ("latency.cost_per_crossdev_token", self.cost_per_crossdev_token),
            ("latency.cost_per_result_token", self.cost_per_result_token),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::range(name, "must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub dispatch: f64,
    pub compute: f64,
    pub aggregate: f64,
    pub total: f64,
}

impl LatencyBreakdown {
    pub fn new(dispatch: f64, compute: f64, aggregate: f64) -> Self {
        LatencyBreakdown {
            dispatch,
            compute,
            aggregate,
            total: dispatch + compute + aggregate,
        }
    }

    pub fn communication(&self) -> f64 {
        self.dispatch + self.aggregate
    }
}

/// Terminal per-expert loads: reroutes count at their target, drops nowhere.
pub fn expert_loads(assignment: &Assignment, tokens: &[Token], num_experts: usize) -> Result<LoadLedger> {
    let mut ledger = LoadLedger::new(num_experts);
    for s in &assignment.slots {
        if !s.status.is_resolved() {
            return Err(Error::UnresolvedSlot {
                token: s.token,
                rank: s.rank,
            });
        }
        if let Some(e) = s.status.destination() {
            ledger.charge(e, tokens[s.token].weight);
        }
    }
    Ok(ledger)
}

/// Crossing counts `(dispatch, aggregate)`.
///
/// Every slot is shipped from its token's origin device to the routed expert,
/// including slots later dropped there. A reroute to another device costs a
/// second hop. Aggregation returns each processed slot to its origin.
pub fn crossings(assignment: &Assignment, topology: &Topology) -> (u64, u64) {
    let (mut out, mut back) = (0u64, 0u64);
    for s in &assignment.slots {
        let origin = topology.origin_device(s.token);
        let routed_dev = topology.device_of(s.routed);
        out += u64::from(origin != routed_dev);
        if let Some(dest) = s.status.destination() {
            let dest_dev = topology.device_of(dest);
            out += u64::from(dest_dev != routed_dev);
            back += u64::from(dest_dev != origin);
        }
    }
    (out, back)
}

pub fn layer_latency(
    assignment: &Assignment,
    loads: &LoadLedger,
    topology: &Topology,
    model: &LatencyModel,
) -> LatencyBreakdown {
    let busiest = match model.compute_mode {
        ComputeMode::PerExpertMax => loads.raw_count.iter().copied().max().unwrap_or(0),
        ComputeMode::PerDeviceSum => (0..topology.num_devices())
            .map(|d| topology.experts_on(d).map(|e| loads.raw_count[e]).sum::<u64>())
            .max()
            .unwrap_or(0),
    };
    let (out, back) = crossings(assignment, topology);
    LatencyBreakdown::new(
        model.cost_per_crossdev_token * out as f64,
        model.cost_per_token_compute * busiest as f64,
        model.cost_per_result_token * back as f64,
    )
}

pub fn speedup(baseline: &LatencyBreakdown, treated: &LatencyBreakdown) -> Result<f64> {
    if treated.total <= 0.0 {
        return Err(Error::DivideByZero("treated latency is zero"));
    }
    Ok(baseline.total / treated.total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceStats {
    pub max: u64,
    pub mean: f64,
    /// 1.0 when no expert holds any token.
    pub max_over_mean: f64,
    /// Raw load per expert index.
    pub histogram: Vec<u64>,
}

pub fn imbalance_stats(loads: &[u64]) -> ImbalanceStats {
    let max = loads.iter().copied().max().unwrap_or(0);
    let mean = if loads.is_empty() {
        0.0
    } else {
        loads.iter().sum::<u64>() as f64 / loads.len() as f64
    };
    let max_over_mean = if mean > 0.0 { max as f64 / mean } else { 1.0 };
    ImbalanceStats {
        max,
        mean,
        max_over_mean,
        histogram: loads.to_vec(),
    }
}
