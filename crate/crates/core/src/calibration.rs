//! Offline expert calibration.
//!
//! A routing log from a modality-balanced calibration set yields, per expert,
//! the activation frequency under each modality, a specialization score
//! `f_vis - f_txt`, a visual/text/shared class and a semantic centroid (mean
//! feature of the tokens routed to it).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Modality, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertClass {
    Visual,
    Text,
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub modality: Modality,
    pub feature: Vec<f64>,
    pub experts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingLog {
    num_experts: usize,
    k: usize,
    entries: Vec<LogEntry>,
}

impl RoutingLog {
    pub fn new(num_experts: usize, k: usize) -> Self {
        RoutingLog {
            num_experts,
            k,
            entries: Vec::new(),
        }
    }

    /// Appends an entry after checking it selects exactly `k` distinct experts.
    pub fn push(&mut self, entry: LogEntry) -> Result<()> {
        if entry.experts.len() != self.k {
            return Err(Error::LengthMismatch {
                expected: self.k,
                got: entry.experts.len(),
            });
        }
        for (i, &e) in entry.experts.iter().enumerate() {
            if e >= self.num_experts || entry.experts[..i].contains(&e) {
                return Err(Error::BadK {
                    k: self.k,
                    num_experts: self.num_experts,
                });
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Fraction of `modality` entries whose top-k set contains each expert.
pub fn activation_frequency(log: &RoutingLog, modality: Modality) -> Result<Vec<f64>> {
    let mut hits = vec![0u64; log.num_experts];
    let mut n = 0u64;
    for entry in log.entries.iter().filter(|e| e.modality == modality) {
        n += 1;
        for &e in &entry.experts {
            hits[e] += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyModality(modality.as_str()));
    }
    Ok(hits.into_iter().map(|h| h as f64 / n as f64).collect())
}

/// Thresholds `f_vis - f_txt`: `>= threshold` is visual, `<= -threshold` text,
/// anything in between shared.
pub fn classify_experts(f_vis: &[f64], f_txt: &[f64], threshold: f64) -> Result<Vec<ExpertClass>> {
    if f_vis.len() != f_txt.len() {
        return Err(Error::LengthMismatch {
            expected: f_vis.len(),
            got: f_txt.len(),
        });
    }
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Error::range("calibration.threshold", "must be > 0"));
    }
    Ok(f_vis
        .iter()
        .zip(f_txt)
        .map(|(v, t)| classify(v - t, threshold))
        .collect())
}

fn classify(delta: f64, threshold: f64) -> ExpertClass {
    if delta >= threshold {
        ExpertClass::Visual
    } else if delta <= -threshold {
        ExpertClass::Text
    } else {
        ExpertClass::Shared
    }
}

/// Mean feature per expert over every entry routed to it. Experts that were
/// never activated get `None`.
pub fn compute_centroids(log: &RoutingLog) -> Vec<Option<Vec<f64>>> {
    let mut sums: Vec<Option<Vec<f64>>> = vec![None; log.num_experts];
    let mut counts = vec![0u64; log.num_experts];
    for entry in &log.entries {
        for &e in &entry.experts {
            counts[e] += 1;
            match &mut sums[e] {
                Some(acc) => acc.iter_mut().zip(&entry.feature).for_each(|(a, x)| *a += x),
                slot @ None => *slot = Some(entry.feature.clone()),
            }
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(sum, n)| sum.map(|v| v.into_iter().map(|x| x / n as f64).collect()))
        .collect()
}

/// Bytes needed to store one centroid per expert per layer.
pub fn centroid_memory_bytes(layers: u64, experts: u64, hidden: u64, bytes_per_value: u64) -> Result<u64> {
    layers
        .checked_mul(experts)
        .and_then(|v| v.checked_mul(hidden))
        .and_then(|v| v.checked_mul(bytes_per_value))
        .ok_or(Error::Overflow("centroid memory"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertProfile {
    pub expert_id: usize,
    pub device_id: usize,
    pub class: ExpertClass,
    pub f_vis: f64,
    pub f_txt: f64,
    pub delta_spec: f64,
    pub centroid: Option<Vec<f64>>,
}

/// Runs the whole calibration pass over a log.
pub fn calibrate(log: &RoutingLog, topology: &Topology, threshold: f64) -> Result<Vec<ExpertProfile>> {
    if log.num_experts != topology.num_experts() {
        return Err(Error::LengthMismatch {
            expected: topology.num_experts(),
            got: log.num_experts,
        });
    }
    let f_vis = activation_frequency(log, Modality::Visual)?;
    let f_txt = activation_frequency(log, Modality::Text)?;
    let classes = classify_experts(&f_vis, &f_txt, threshold)?;
    let centroids = compute_centroids(log);
    Ok(centroids
        .into_iter()
        .enumerate()
        .map(|(j, centroid)| ExpertProfile {
            expert_id: j,
            device_id: topology.device_of(j),
            class: classes[j],
            f_vis: f_vis[j],
            f_txt: f_txt[j],
            delta_spec: f_vis[j] - f_txt[j],
            centroid,
        })
        .collect())
}

pub fn classes_of(profiles: &[ExpertProfile]) -> Vec<ExpertClass> {
    profiles.iter().map(|p| p.class).collect()
}
