//! Seeded synthetic workloads: multimodal token batches, skewed router gates
//! and calibration routing logs.
//!
//! All randomness comes from `ChaCha8Rng`, whose output stream is fixed across
//! platforms, so every generator is a pure function of its spec.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration::{LogEntry, RoutingLog};
use crate::error::{Error, Result};
use crate::model::{top_k_route, GateVector, Modality, Token};

/// Controls how sharp visual-token features are. Larger logit scales give
/// peakier softmax distributions, hence lower entropy and higher weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyProfile {
    pub foreground_fraction: f64,
    pub fg_logit_scale: f64,
    pub bg_logit_scale: f64,
}

impl Default for EntropyProfile {
    fn default() -> Self {
        EntropyProfile {
            foreground_fraction: 0.3,
            fg_logit_scale: 4.0,
            bg_logit_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub num_text: usize,
    pub num_visual: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub visual_entropy_profile: EntropyProfile,
    /// Number of images the visual tokens are split across.
    pub groups: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            num_text: 64,
            num_visual: 256,
            feature_dim: 32,
            seed: 0,
            visual_entropy_profile: EntropyProfile::default(),
            groups: 4,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let p = &self.visual_entropy_profile;
        if self.num_text + self.num_visual == 0 {
            return Err(Error::SpecInvalid("batch has no tokens".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::SpecInvalid("feature_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&p.foreground_fraction) {
            return Err(Error::SpecInvalid("foreground_fraction must lie in [0, 1]".into()));
        }
        if !(p.bg_logit_scale > 0.0 && p.fg_logit_scale > p.bg_logit_scale && p.fg_logit_scale.is_finite()) {
            return Err(Error::SpecInvalid("need fg_logit_scale > bg_logit_scale > 0".into()));
        }
        if self.num_visual > 0 && (self.groups == 0 || self.groups > self.num_visual) {
            return Err(Error::SpecInvalid(format!(
                "cannot split {} visual tokens into {} groups",
                self.num_visual, self.groups
            )));
        }
        Ok(())
    }
}

/// A generated batch plus the foreground mask the generator used.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Token>,
    /// Indexed by token id; always `false` for text.
    pub foreground: Vec<bool>,
}

fn gaussian_feature(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Text tokens take ids `0..num_text`, visual tokens follow. Visual group ids
/// are contiguous blocks of near-equal size.
pub fn gen_batch(spec: &WorkloadSpec) -> Result<Batch> {
    spec.validate()?;
    let profile = &spec.visual_entropy_profile;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.num_text + spec.num_visual;
    let mut tokens = Vec::with_capacity(total);
    let mut foreground = vec![false; total];
    for id in 0..spec.num_text {
        let feature = gaussian_feature(&mut rng, spec.feature_dim, profile.fg_logit_scale);
        tokens.push(Token::text(id, feature, 0));
    }
    for i in 0..spec.num_visual {
        let id = spec.num_text + i;
        let fg = rng.random_bool(profile.foreground_fraction);
        let scale = if fg {
            profile.fg_logit_scale
        } else {
            profile.bg_logit_scale
        };
        let feature = gaussian_feature(&mut rng, spec.feature_dim, scale);
        let group = i * spec.groups / spec.num_visual;
        tokens.push(Token::visual(id, feature, group));
        foreground[id] = fg;
    }
    Ok(Batch { tokens, foreground })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Skew {
    pub hotspot_experts: Vec<usize>,
    /// Gate mass each visual token places on the hotspot set (shared equally).
    pub hotspot_mass: f64,
}

/// Logit bonus applied to experts preferred by each modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModalityAffinity {
    pub visual_experts: Vec<usize>,
    pub text_experts: Vec<usize>,
    pub bonus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub num_experts: usize,
    pub seed: u64,
    pub skew: Skew,
    pub modality_affinity: ModalityAffinity,
    /// Standard deviation of the random router logits.
    pub logit_std: f64,
}

impl GateSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_experts;
        if n == 0 {
            return Err(Error::SpecInvalid("gate spec needs at least one expert".into()));
        }
        if !(0.0..1.0).contains(&self.skew.hotspot_mass) {
            return Err(Error::range("gates.skew.hotspot_mass", "must lie in [0, 1)"));
        }
        if self.skew.hotspot_mass > 0.0 && self.skew.hotspot_experts.is_empty() {
            return Err(Error::range("gates.skew.hotspot_experts", "empty with positive hotspot_mass"));
        }
        let a = &self.modality_affinity;
        for (field, set) in [
            ("gates.skew.hotspot_experts", &self.skew.hotspot_experts),
            ("gates.modality_affinity.visual_experts", &a.visual_experts),
            ("gates.modality_affinity.text_experts", &a.text_experts),
        ] {
            if let Some(e) = set.iter().find(|&&e| e >= n) {
                return Err(Error::range(field, format!("expert {e} >= {n}")));
            }
        }
        if !(a.bonus.is_finite() && self.logit_std.is_finite() && self.logit_std >= 0.0) {
            return Err(Error::range("gates", "bonus and logit_std must be finite, logit_std >= 0"));
        }
        Ok(())
    }
}

/// Router gates for a batch: softmax of Gaussian logits plus the modality
/// bonus, then for visual tokens a mixture that puts exactly `hotspot_mass`
/// extra mass on the hotspot experts.
pub fn gen_gates(tokens: &[Token], spec: &GateSpec) -> Result<Vec<GateVector>> {
    spec.validate()?;
    let n = spec.num_experts;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let affinity = &spec.modality_affinity;
    let hot = &spec.skew.hotspot_experts;
    let h = spec.skew.hotspot_mass;
    tokens
        .iter()
        .map(|t| {
            let preferred = match t.modality {
                Modality::Visual => &affinity.visual_experts,
                Modality::Text => &affinity.text_experts,
            };
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let noise: f64 = rng.sample(StandardNormal);
                    let bonus = if preferred.contains(&j) { affinity.bonus } else { 0.0 };
                    spec.logit_std * noise + bonus
                })
                .collect();
            let mut p = crate::entropy::softmax(&logits)?;
            if t.is_visual() && h > 0.0 {
                let share = h / hot.len() as f64;
                p.iter_mut().for_each(|v| *v *= 1.0 - h);
                for &e in hot {
                    p[e] += share;
                }
            }
            GateVector::new(p)
        })
        .collect()
}

/// Routing log over `samples_per_modality` text and visual tokens drawn with the
/// batch feature generator, routed top-k through [`gen_gates`].
pub fn gen_calibration_log(
    samples_per_modality: usize,
    workload: &WorkloadSpec,
    gates: &GateSpec,
    k: usize,
    seed: u64,
) -> Result<RoutingLog> {
    if samples_per_modality == 0 {
        return Err(Error::SpecInvalid("calibration needs at least one sample per modality".into()));
    }
    let spec = WorkloadSpec {
        num_text: samples_per_modality,
        num_visual: samples_per_modality,
        seed,
        groups: workload.groups.clamp(1, samples_per_modality),
        ..workload.clone()
    };
    let batch = gen_batch(&spec)?;
    let gate_spec = GateSpec {
        seed: seed.rotate_left(17) ^ 0x5eed_ca1b,
        ..gates.clone()
    };
    let gate_vectors = gen_gates(&batch.tokens, &gate_spec)?;
    let mut log = RoutingLog::new(gates.num_experts, k);
    for (t, g) in batch.tokens.into_iter().zip(&gate_vectors) {
        let route = top_k_route(t.id, g, k)?;
        log.push(LogEntry {
            modality: t.modality,
            feature: t.feature,
            experts: route.experts().collect(),
        })?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{activation_frequency, calibrate, ExpertClass};
    use crate::entropy::{apply_semantic_weights, EntropyParams};
    use crate::model::build_topology;

    fn gate_spec(n: usize) -> GateSpec {
        GateSpec {
            num_experts: n,
            seed: 1,
            skew: Skew::default(),
            modality_affinity: ModalityAffinity::default(),
            logit_std: 1.0,
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let spec = WorkloadSpec {
            num_text: 0,
            num_visual: 0,
            ..WorkloadSpec::default()
        };
        assert!(matches!(gen_batch(&spec), Err(Error::SpecInvalid(_))));
    }

    #[test]
    fn text_only_batch() {
        let spec = WorkloadSpec {
            num_text: 10,
            num_visual: 0,
            ..WorkloadSpec::default()
        };
        let b = gen_batch(&spec).unwrap();
        assert_eq!(b.tokens.len(), 10);
        assert!(b.tokens.iter().all(|t| t.weight == 1.0 && !t.is_visual()));
    }

    #[test]
    fn foreground_tokens_outweigh_background_seed42() {
        let spec = WorkloadSpec {
            num_text: 0,
            num_visual: 100,
            seed: 42,
            ..WorkloadSpec::default()
        };
        let mut b = gen_batch(&spec).unwrap();
        apply_semantic_weights(&mut b.tokens, &EntropyParams::default()).unwrap();
        let mean = |fg: bool| {
            let w: Vec<f64> = b
                .tokens
                .iter()
                .filter(|t| b.foreground[t.id] == fg)
                .map(|t| t.weight)
                .collect();
            w.iter().sum::<f64>() / w.len() as f64
        };
        assert!(mean(true) > mean(false));
    }

    #[test]
    fn groups_are_contiguous_blocks() {
        let spec = WorkloadSpec {
            num_text: 3,
            num_visual: 10,
            groups: 3,
            ..WorkloadSpec::default()
        };
        let b = gen_batch(&spec).unwrap();
        let groups: Vec<usize> = b.tokens.iter().filter(|t| t.is_visual()).map(|t| t.group_id).collect();
        assert!(groups.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        assert_eq!(groups.first(), Some(&0));
        assert_eq!(groups.last(), Some(&2));
    }

    #[test]
    fn background_has_higher_entropy_across_seeds() {
        for seed in 0..20 {
            let spec = WorkloadSpec {
                num_text: 0,
                num_visual: 60,
                seed,
                ..WorkloadSpec::default()
            };
            let mut b = gen_batch(&spec).unwrap();
            apply_semantic_weights(&mut b.tokens, &EntropyParams::default()).unwrap();
            let mean = |fg: bool| {
                let h: Vec<f64> = b
                    .tokens
                    .iter()
                    .filter(|t| b.foreground[t.id] == fg)
                    .map(|t| t.entropy.unwrap())
                    .collect();
                h.iter().sum::<f64>() / h.len() as f64
            };
            assert!(mean(false) > mean(true), "seed {seed}");
        }
    }

    #[test]
    fn generators_are_pure() {
        let spec = WorkloadSpec::default();
        assert_eq!(gen_batch(&spec).unwrap(), gen_batch(&spec).unwrap());
        let b = gen_batch(&spec).unwrap();
        assert_eq!(gen_gates(&b.tokens, &gate_spec(8)).unwrap(), gen_gates(&b.tokens, &gate_spec(8)).unwrap());
    }

    #[test]
    fn unskewed_gates_spread_evenly() {
        let spec = WorkloadSpec {
            num_text: 500,
            num_visual: 500,
            seed: 42,
            ..WorkloadSpec::default()
        };
        let b = gen_batch(&spec).unwrap();
        let gates = gen_gates(&b.tokens, &gate_spec(8)).unwrap();
        for j in 0..8 {
            let avg = gates.iter().map(|g| g.get(j)).sum::<f64>() / 1000.0;
            assert!(avg <= 3.0 / 8.0, "expert {j}: {avg}");
        }
        assert!(gates
            .iter()
            .all(|g| (g.values().iter().sum::<f64>() - 1.0).abs() < 1e-6));
    }

    #[test]
    fn hotspot_concentrates_visual_mass() {
        let spec = WorkloadSpec {
            num_text: 0,
            num_visual: 500,
            seed: 42,
            ..WorkloadSpec::default()
        };
        let b = gen_batch(&spec).unwrap();
        let gs = GateSpec {
            skew: Skew {
                hotspot_experts: vec![0],
                hotspot_mass: 0.8,
            },
            ..gate_spec(8)
        };
        let gates = gen_gates(&b.tokens, &gs).unwrap();
        assert!(gates.iter().all(|g| g.get(0) >= 0.8));
        let avg = gates.iter().map(|g| g.get(0)).sum::<f64>() / 500.0;
        assert!(avg >= 0.5);
    }

    #[test]
    fn gate_spec_validation() {
        let mut gs = gate_spec(4);
        gs.skew.hotspot_mass = 1.0;
        assert!(gs.validate().is_err());
        let mut gs = gate_spec(4);
        gs.skew = Skew {
            hotspot_experts: vec![4],
            hotspot_mass: 0.5,
        };
        assert!(gs.validate().is_err());
    }

    #[test]
    fn tiny_calibration_log() {
        let log = gen_calibration_log(1, &WorkloadSpec::default(), &gate_spec(8), 2, 3).unwrap();
        assert_eq!(log.len(), 2);
        assert!(log.entries().iter().all(|e| e.experts.len() == 2));
    }

    #[test]
    fn visual_affinity_yields_visual_expert() {
        let gs = GateSpec {
            modality_affinity: ModalityAffinity {
                visual_experts: vec![0],
                text_experts: vec![],
                bonus: 2.0,
            },
            ..gate_spec(8)
        };
        let log = gen_calibration_log(500, &WorkloadSpec::default(), &gs, 2, 42).unwrap();
        let topo = build_topology(8, 2).unwrap();
        let profiles = calibrate(&log, &topo, 0.1).unwrap();
        assert_eq!(profiles[0].class, ExpertClass::Visual);
        let f = activation_frequency(&log, Modality::Visual).unwrap();
        assert!((f.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }
}
