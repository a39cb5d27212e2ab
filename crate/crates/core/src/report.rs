//! Run, sweep and calibrate commands, and the files they emit.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, centroid_memory_bytes, classes_of, ExpertClass, ExpertProfile};
use crate::capacity::CapacityPlan;
use crate::config::{OutputFormat, RunConfig};
use crate::dispatch::{dispatch, DispatchEvents, DispatchOutcome, Event, Policy};
use crate::entropy::apply_semantic_weights;
use crate::error::{Error, Result};
use crate::model::{GateVector, Token, Topology};
use crate::sim::{expert_loads, imbalance_stats, layer_latency, speedup, ImbalanceStats, LatencyBreakdown};
use crate::workload::{gen_batch, gen_calibration_log, gen_gates};

pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Metrics of one policy on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub policy: Policy,
    pub drop_rate: f64,
    pub reroute_rate: f64,
    pub retained_gate_mass_fraction: f64,
    pub admissions: usize,
    pub reroutes: usize,
    pub drops: usize,
    pub imbalance: ImbalanceStats,
    pub latency: LatencyBreakdown,
    pub speedup_vs_vanilla: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub r_v: f64,
    pub c_base: f64,
    pub count_capacity: usize,
    pub capacities: Vec<f64>,
    pub expert_classes: Vec<ExpertClass>,
    pub policies: Vec<RunMetrics>,
}

impl RunReport {
    pub fn metrics(&self, policy: Policy) -> Option<&RunMetrics> {
        self.policies.iter().find(|m| m.policy == policy)
    }
}

/// Report plus the per-policy dispatch results it was computed from.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub outcomes: Vec<DispatchOutcome>,
}

impl RunArtifacts {
    pub fn outcome(&self, policy: Policy) -> Option<&DispatchOutcome> {
        self.outcomes.iter().find(|o| o.policy == policy)
    }
}

/// Offline calibration state shared by every cell of a run or sweep.
#[derive(Debug, Clone)]
pub struct Calibrated {
    pub topology: Topology,
    pub profiles: Vec<ExpertProfile>,
}

impl Calibrated {
    pub fn centroids(&self) -> Vec<Option<Vec<f64>>> {
        self.profiles.iter().map(|p| p.centroid.clone()).collect()
    }
}

pub fn run_calibration(config: &RunConfig) -> Result<Calibrated> {
    config.validate()?;
    let topology = config.build_topology()?;
    let log = gen_calibration_log(
        config.calibration.samples_per_modality,
        &config.workload_spec(),
        &config.gate_spec(),
        config.routing.k,
        config.calibration_seed(),
    )?;
    let profiles = calibrate(&log, &topology, config.calibration.threshold)?;
    Ok(Calibrated { topology, profiles })
}

/// The weighted batch and its router gates.
pub fn generate(config: &RunConfig) -> Result<(Vec<Token>, Vec<GateVector>)> {
    let mut batch = gen_batch(&config.workload_spec())?;
    apply_semantic_weights(&mut batch.tokens, &config.entropy)?;
    let gates = gen_gates(&batch.tokens, &config.gate_spec())?;
    Ok((batch.tokens, gates))
}

/// Dispatches and simulates every configured policy (plus Vanilla as the
/// baseline) against a prepared calibration.
pub fn simulate(config: &RunConfig, calibrated: &Calibrated) -> Result<RunArtifacts> {
    config.validate()?;
    let topology = &calibrated.topology;
    let (tokens, gates) = generate(config)?;
    let k = config.routing.k;
    let classes = classes_of(&calibrated.profiles);
    let plan = CapacityPlan::build(&tokens, k, &classes, &config.capacity)?;
    let centroids = calibrated.centroids();

    let mut policies: Vec<Policy> = vec![Policy::Vanilla];
    for &p in &config.dispatch.policies {
        if !policies.contains(&p) {
            policies.push(p);
        }
    }
    let mut outcomes = Vec::with_capacity(policies.len());
    let mut latencies = Vec::with_capacity(policies.len());
    for &policy in &policies {
        let outcome = dispatch(&tokens, &gates, k, &plan, topology, &centroids, &config.dispatch.params(policy))?;
        let loads = expert_loads(&outcome.assignment, &tokens, topology.num_experts())?;
        latencies.push(layer_latency(&outcome.assignment, &loads, topology, &config.latency));
        outcomes.push(outcome);
    }
    let baseline = latencies[0];
    let mut metrics = Vec::new();
    for (outcome, latency) in outcomes.iter().zip(&latencies) {
        if outcome.policy == Policy::Vanilla && !config.dispatch.policies.contains(&Policy::Vanilla) {
            continue;
        }
        metrics.push(metrics_for(outcome, *latency, &baseline)?);
    }
    if !config.dispatch.policies.contains(&Policy::Vanilla) {
        outcomes.remove(0);
    }
    Ok(RunArtifacts {
        report: RunReport {
            config: config.clone(),
            r_v: plan.r_v,
            c_base: plan.c_base,
            count_capacity: plan.count_capacity(),
            capacities: plan.c_j.clone(),
            expert_classes: classes,
            policies: metrics,
        },
        outcomes,
    })
}

fn metrics_for(outcome: &DispatchOutcome, latency: LatencyBreakdown, baseline: &LatencyBreakdown) -> Result<RunMetrics> {
    let ev = &outcome.events;
    let slots = ev.total_slots() as f64;
    let mass = ev.retained_gate_mass + ev.dropped_gate_mass;
    Ok(RunMetrics {
        policy: outcome.policy,
        drop_rate: ev.drops as f64 / slots,
        reroute_rate: ev.reroutes as f64 / slots,
        retained_gate_mass_fraction: if mass > 0.0 { ev.retained_gate_mass / mass } else { 1.0 },
        admissions: ev.admissions,
        reroutes: ev.reroutes,
        drops: ev.drops,
        imbalance: imbalance_stats(&outcome.ledger.raw_count),
        latency,
        speedup_vs_vanilla: speedup(baseline, &latency)?,
    })
}

/// Calibrates and simulates in one go, without touching the filesystem.
pub fn run(config: &RunConfig) -> Result<RunArtifacts> {
    let calibrated = run_calibration(config)?;
    simulate(config, &calibrated)
}

fn out_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&config.output.dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_resolved_config(dir: &Path, config: &RunConfig) -> Result<()> {
    write_file(&dir.join("resolved_config.json"), format!("{}\n", config.to_json()).as_bytes())
}

/// `run`: simulates and writes `report.json`, `metrics.csv`, `events.jsonl`
/// and `loads_heatmap.csv` (depending on the configured formats).
pub fn cmd_run(config: &RunConfig) -> Result<RunArtifacts> {
    let artifacts = run(config)?;
    let dir = out_dir(config)?;
    write_resolved_config(&dir, config)?;
    if config.output.formats.contains(&OutputFormat::Json) {
        let json = serde_json::to_string_pretty(&artifacts.report).expect("report serializes");
        write_file(&dir.join("report.json"), format!("{json}\n").as_bytes())?;
    }
    if config.output.formats.contains(&OutputFormat::Csv) {
        let mut csv = metrics_csv_header();
        for m in &artifacts.report.policies {
            csv.push_str(&metrics_csv_row("none", None, &artifacts.report, m));
        }
        write_file(&dir.join("metrics.csv"), csv.as_bytes())?;
    }
    let events_path = dir.join("events.jsonl");
    let file = fs::File::create(&events_path).map_err(|e| Error::io(&events_path, e))?;
    let mut w = BufWriter::new(file);
    for o in &artifacts.outcomes {
        write_policy_events(&mut w, o.policy, &o.events).map_err(|e| Error::io(&events_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&events_path, e))?;
    write_file(&dir.join("loads_heatmap.csv"), loads_heatmap_csv(&artifacts).as_bytes())?;
    Ok(artifacts)
}

#[derive(Serialize)]
struct PolicyEvent<'a> {
    policy: Policy,
    #[serde(flatten)]
    event: &'a Event,
}

fn write_policy_events<W: std::io::Write>(w: &mut W, policy: Policy, events: &DispatchEvents) -> std::io::Result<()> {
    for event in &events.records {
        serde_json::to_writer(&mut *w, &PolicyEvent { policy, event })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Experts (rows) by policy (columns) matrix of terminal raw loads.
pub fn loads_heatmap_csv(artifacts: &RunArtifacts) -> String {
    let mut s = String::from("expert,device,class");
    for o in &artifacts.outcomes {
        write!(s, ",{}", o.policy.as_str()).unwrap();
    }
    s.push('\n');
    let n = artifacts.report.capacities.len();
    let topo = artifacts.report.config.build_topology().expect("validated topology");
    for j in 0..n {
        let class = artifacts.report.expert_classes[j];
        write!(s, "{j},{},{}", topo.device_of(j), class_str(class)).unwrap();
        for o in &artifacts.outcomes {
            write!(s, ",{}", o.ledger.raw_count[j]).unwrap();
        }
        s.push('\n');
    }
    s
}

fn class_str(c: ExpertClass) -> &'static str {
    match c {
        ExpertClass::Visual => "visual",
        ExpertClass::Text => "text",
        ExpertClass::Shared => "shared",
    }
}

pub const METRICS_COLUMNS: [&str; 21] = [
    "schema_version",
    "axis",
    "value",
    "policy",
    "drop_rate",
    "reroute_rate",
    "retained_gate_mass_fraction",
    "admissions",
    "reroutes",
    "drops",
    "max_load",
    "mean_load",
    "max_over_mean",
    "latency_dispatch",
    "latency_compute",
    "latency_aggregate",
    "latency_total",
    "speedup_vs_vanilla",
    "r_v",
    "c_base",
    "capacities",
];

pub fn metrics_csv_header() -> String {
    format!("{}\n", METRICS_COLUMNS.join(","))
}

/// One CSV row. Floats use Rust's shortest round-trip formatting; the
/// capacity vector is `;`-separated in a single column.
pub fn metrics_csv_row(axis: &str, value: Option<f64>, report: &RunReport, m: &RunMetrics) -> String {
    let caps: Vec<String> = report.capacities.iter().map(|c| c.to_string()).collect();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        CSV_SCHEMA_VERSION,
        axis,
        value.map(|v| v.to_string()).unwrap_or_default(),
        m.policy.as_str(),
        m.drop_rate,
        m.reroute_rate,
        m.retained_gate_mass_fraction,
        m.admissions,
        m.reroutes,
        m.drops,
        m.imbalance.max,
        m.imbalance.mean,
        m.imbalance.max_over_mean,
        m.latency.dispatch,
        m.latency.compute,
        m.latency.aggregate,
        m.latency.total,
        m.speedup_vs_vanilla,
        report.r_v,
        report.c_base,
        caps.join(";"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Gamma0,
    Rho,
    DeltaSemantic,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Gamma0 => "gamma0",
            SweepAxis::Rho => "rho",
            SweepAxis::DeltaSemantic => "delta_semantic",
        }
    }

    pub fn apply(self, config: &RunConfig, value: f64) -> RunConfig {
        let mut c = config.clone();
        match self {
            SweepAxis::Gamma0 => c.capacity.gamma0 = value,
            SweepAxis::Rho => c.capacity.rho = value,
            SweepAxis::DeltaSemantic => c.entropy.delta_semantic = value,
        }
        c
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma0" => Ok(SweepAxis::Gamma0),
            "rho" => Ok(SweepAxis::Rho),
            "delta_semantic" => Ok(SweepAxis::DeltaSemantic),
            other => Err(Error::range("axis", format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// Parses a comma-separated list of reals.
pub fn parse_values(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(|v| {
            let v = v.trim();
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::range("values", format!("`{v}` is not a finite number")))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub cells: Vec<(f64, RunReport)>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = metrics_csv_header();
        for (value, report) in &self.cells {
            for m in &report.policies {
                s.push_str(&metrics_csv_row(self.axis.as_str(), Some(*value), report, m));
            }
        }
        s
    }

    /// Column of one metric for one policy, in sweep order.
    pub fn column(&self, policy: Policy, f: impl Fn(&RunMetrics) -> f64) -> Vec<f64> {
        self.cells
            .iter()
            .filter_map(|(_, r)| r.metrics(policy).map(&f))
            .collect()
    }
}

/// Runs one cell per value, all with the config's seed. Cells are independent
/// and evaluated in parallel.
pub fn sweep(config: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepResult> {
    if values.len() < 2 {
        return Err(Error::range("values", "a sweep needs at least two values"));
    }
    let configs: Vec<RunConfig> = values.iter().map(|&v| axis.apply(config, v)).collect();
    for c in &configs {
        c.validate()?;
    }
    let calibrated = run_calibration(config)?;
    let cells = configs
        .par_iter()
        .map(|c| simulate(c, &calibrated).map(|a| a.report))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        axis,
        cells: values.iter().copied().zip(cells).collect(),
    })
}

/// `sweep`: writes `sweep_<axis>.csv` and returns the CSV text.
pub fn cmd_sweep(config: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<String> {
    let result = sweep(config, axis, values)?;
    let csv = result.to_csv();
    let dir = out_dir(config)?;
    write_resolved_config(&dir, config)?;
    write_file(&dir.join(format!("sweep_{}.csv", axis.as_str())), csv.as_bytes())?;
    Ok(csv)
}

#[derive(Debug, Clone)]
pub struct CalibrationOutput {
    pub profiles: Vec<ExpertProfile>,
    pub memory_bytes: u64,
    pub memory_line: String,
    pub document: String,
}

pub fn calibration_document(profiles: &[ExpertProfile]) -> String {
    format!("{}\n", serde_json::to_string_pretty(profiles).expect("profiles serialize"))
}

/// `calibrate`: writes `calibration.json` and reports the centroid memory
/// footprint of a model with the configured shape.
pub fn cmd_calibrate(config: &RunConfig) -> Result<CalibrationOutput> {
    let calibrated = run_calibration(config)?;
    let c = &config.calibration;
    let experts = config.topology.num_experts as u64;
    let memory_bytes = centroid_memory_bytes(c.layers, experts, c.hidden_dim, c.bytes_per_value)?;
    let memory_line = format!(
        "centroid memory: {memory_bytes} bytes (layers={}, experts={experts}, hidden={}, bytes_per_value={})",
        c.layers, c.hidden_dim, c.bytes_per_value
    );
    let document = calibration_document(&calibrated.profiles);
    let dir = out_dir(config)?;
    write_resolved_config(&dir, config)?;
    write_file(&dir.join("calibration.json"), document.as_bytes())?;
    Ok(CalibrationOutput {
        profiles: calibrated.profiles,
        memory_bytes,
        memory_line,
        document,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn small(extra: &str) -> RunConfig {
        parse_config(&format!(
            r#"{{"seed": 3, "calibration": {{"samples_per_modality": 300}}{extra}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn vanilla_has_no_drops() {
        let a = run(&small("")).unwrap();
        let v = a.report.metrics(Policy::Vanilla).unwrap();
        assert_eq!((v.drop_rate, v.reroute_rate), (0.0, 0.0));
        assert_eq!(v.speedup_vs_vanilla, 1.0);
    }

    #[test]
    fn unconstrained_macs_matches_vanilla_metrics() {
        let a = run(&small(r#", "capacity": {"gamma0": 1e6}"#)).unwrap();
        let v = a.report.metrics(Policy::Vanilla).unwrap();
        let m = a.report.metrics(Policy::Macs).unwrap();
        assert_eq!(v.drop_rate, m.drop_rate);
        assert_eq!(v.reroute_rate, m.reroute_rate);
        assert_eq!(v.imbalance, m.imbalance);
        assert_eq!(v.latency, m.latency);
    }

    #[test]
    fn rates_are_consistent() {
        let a = run(&small(r#", "capacity": {"gamma0": 0.5}"#)).unwrap();
        for m in &a.report.policies {
            assert!(m.drop_rate + m.reroute_rate <= 1.0);
            assert!((0.0..=1.0).contains(&m.retained_gate_mass_fraction));
        }
    }

    #[test]
    fn vanilla_baseline_runs_even_when_not_listed() {
        let a = run(&small(r#", "dispatch": {"policies": ["macs"]}"#)).unwrap();
        assert_eq!(a.report.policies.len(), 1);
        assert_eq!(a.outcomes.len(), 1);
        assert!(a.report.policies[0].speedup_vs_vanilla > 0.0);
    }

    #[test]
    fn sweep_needs_two_values() {
        assert!(sweep(&small(""), SweepAxis::Gamma0, &[0.5]).is_err());
        assert!(sweep(&small(""), SweepAxis::Rho, &[0.0, 3.0]).is_err());
    }

    #[test]
    fn parse_axis_and_values() {
        assert_eq!("rho".parse::<SweepAxis>().unwrap(), SweepAxis::Rho);
        assert!("gamma".parse::<SweepAxis>().is_err());
        assert_eq!(parse_values("0.25, 0.5,1").unwrap(), vec![0.25, 0.5, 1.0]);
        assert!(parse_values("0.25,x").is_err());
    }

    #[test]
    fn csv_rows_have_every_column() {
        let a = run(&small("")).unwrap();
        let row = metrics_csv_row("none", None, &a.report, &a.report.policies[0]);
        assert_eq!(row.trim_end().split(',').count(), METRICS_COLUMNS.len());
    }
}
