//! Run configuration.
//!
//! Configs are JSON documents. Every section is optional and defaulted; unknown
//! keys are rejected. Seeds of the sub-generators default to values derived from
//! the top-level `seed` and are written back into the resolved config, so the
//! echo saved next to every output reproduces the run exactly.

use serde::{Deserialize, Serialize};

use crate::capacity::CapacityParams;
use crate::dispatch::{DispatchParams, Policy, RerouteScope};
use crate::entropy::EntropyParams;
use crate::error::{Error, Result};
use crate::model::{build_topology, Topology};
use crate::sim::LatencyModel;
use crate::workload::{EntropyProfile, GateSpec, ModalityAffinity, Skew, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub num_experts: usize,
    pub num_devices: usize,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            num_experts: 8,
            num_devices: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub k: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig { k: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub num_text: usize,
    pub num_visual: usize,
    pub feature_dim: usize,
    pub seed: Option<u64>,
    pub visual_entropy_profile: EntropyProfile,
    pub groups: usize,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        let w = WorkloadSpec::default();
        WorkloadConfig {
            num_text: w.num_text,
            num_visual: w.num_visual,
            feature_dim: w.feature_dim,
            seed: None,
            visual_entropy_profile: w.visual_entropy_profile,
            groups: w.groups,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AffinityConfig {
    /// Defaults to the first quarter of the experts.
    pub visual_experts: Option<Vec<usize>>,
    /// Defaults to the last quarter of the experts.
    pub text_experts: Option<Vec<usize>>,
    pub bonus: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatesConfig {
    pub seed: Option<u64>,
    pub skew: Skew,
    pub modality_affinity: AffinityConfig,
    pub logit_std: f64,
}

impl Default for GatesConfig {
    fn default() -> Self {
        GatesConfig {
            seed: None,
            skew: Skew {
                hotspot_experts: vec![0],
                hotspot_mass: 0.0,
            },
            modality_affinity: AffinityConfig::default(),
            logit_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DispatchConfig {
    /// Policies executed by `run` and `sweep`. Vanilla is always simulated as
    /// the speedup baseline.
    pub policies: Vec<Policy>,
    pub eta: f64,
    pub reroute_scope: RerouteScope,
    pub expansion: bool,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        let d = DispatchParams::default();
        DispatchConfig {
            policies: Policy::ALL.to_vec(),
            eta: d.eta,
            reroute_scope: d.reroute_scope,
            expansion: d.expansion,
        }
    }
}

impl DispatchConfig {
    pub fn params(&self, policy: Policy) -> DispatchParams {
        DispatchParams {
            policy,
            eta: self.eta,
            reroute_scope: self.reroute_scope,
            expansion: self.expansion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub samples_per_modality: usize,
    pub threshold: f64,
    pub seed: Option<u64>,
    /// Model shape used for the centroid memory estimate.
    pub layers: u64,
    pub hidden_dim: u64,
    pub bytes_per_value: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            samples_per_modality: 8192,
            threshold: 0.1,
            seed: None,
            layers: 48,
            hidden_dim: 2048,
            bytes_per_value: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: "out".into(),
            formats: vec![OutputFormat::Json, OutputFormat::Csv],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub topology: TopologyConfig,
    pub routing: RoutingConfig,
    pub workload: WorkloadConfig,
    pub gates: GatesConfig,
    pub entropy: EntropyParams,
    pub capacity: CapacityParams,
    pub dispatch: DispatchConfig,
    pub latency: LatencyModel,
    pub calibration: CalibrationConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            topology: TopologyConfig::default(),
            routing: RoutingConfig::default(),
            workload: WorkloadConfig::default(),
            gates: GatesConfig::default(),
            entropy: EntropyParams::default(),
            capacity: CapacityParams::default(),
            dispatch: DispatchConfig::default(),
            latency: LatencyModel::default(),
            calibration: CalibrationConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Parses, defaults and validates a JSON config.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.to_string();
        if message.starts_with("unknown field") {
            Error::UnknownField { path, message }
        } else {
            Error::Parse {
                path,
                line: inner.line(),
                column: inner.column(),
                message,
            }
        }
    })?;
    let config = raw.resolved();
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    /// Fills every derived default (sub-seeds, affinity sets).
    pub fn resolved(mut self) -> Self {
        let n = self.topology.num_experts;
        let quarter = (n / 4).max(1).min(n);
        self.workload.seed.get_or_insert(self.seed);
        self.gates.seed.get_or_insert(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        self.calibration.seed.get_or_insert(self.seed.wrapping_add(0xca11_b8a7));
        let a = &mut self.gates.modality_affinity;
        a.visual_experts.get_or_insert_with(|| (0..quarter).collect());
        a.text_experts.get_or_insert_with(|| (n - quarter..n).collect());
        a.bonus.get_or_insert(1.5);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let topology = self.build_topology()?;
        let k = self.routing.k;
        if k == 0 || k > topology.num_experts() {
            return Err(Error::range("routing.k", format!("{k} not in [1, {}]", topology.num_experts())));
        }
        self.workload_spec().validate().map_err(|e| Error::range("workload", e.to_string()))?;
        self.gate_spec().validate()?;
        self.entropy.validate()?;
        self.capacity.validate()?;
        DispatchParams {
            policy: Policy::Macs,
            eta: self.dispatch.eta,
            reroute_scope: self.dispatch.reroute_scope,
            expansion: self.dispatch.expansion,
        }
        .validate()?;
        if self.dispatch.policies.is_empty() {
            return Err(Error::range("dispatch.policies", "at least one policy required"));
        }
        self.latency.validate()?;
        let c = &self.calibration;
        if c.samples_per_modality == 0 {
            return Err(Error::range("calibration.samples_per_modality", "must be >= 1"));
        }
        if !(c.threshold.is_finite() && c.threshold > 0.0) {
            return Err(Error::range("calibration.threshold", "must be > 0"));
        }
        if c.layers == 0 || c.hidden_dim == 0 || c.bytes_per_value == 0 {
            return Err(Error::range("calibration", "layers, hidden_dim and bytes_per_value must be >= 1"));
        }
        Ok(())
    }

    pub fn build_topology(&self) -> Result<Topology> {
        build_topology(self.topology.num_experts, self.topology.num_devices)
            .map_err(|e| Error::range("topology", e.to_string()))
    }

    pub fn workload_spec(&self) -> WorkloadSpec {
        let w = &self.workload;
        WorkloadSpec {
            num_text: w.num_text,
            num_visual: w.num_visual,
            feature_dim: w.feature_dim,
            seed: w.seed.unwrap_or(self.seed),
            visual_entropy_profile: w.visual_entropy_profile,
            groups: w.groups,
        }
    }

    pub fn gate_spec(&self) -> GateSpec {
        let resolved = self.clone().resolved();
        let g = &resolved.gates;
        let a = &g.modality_affinity;
        GateSpec {
            num_experts: self.topology.num_experts,
            seed: g.seed.unwrap_or_default(),
            skew: g.skew.clone(),
            modality_affinity: ModalityAffinity {
                visual_experts: a.visual_experts.clone().unwrap_or_default(),
                text_experts: a.text_experts.clone().unwrap_or_default(),
                bonus: a.bonus.unwrap_or_default(),
            },
            logit_std: g.logit_std,
        }
    }

    pub fn calibration_seed(&self) -> u64 {
        self.calibration.seed.unwrap_or(self.seed.wrapping_add(0xca11_b8a7))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
