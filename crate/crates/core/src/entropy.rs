//! Entropy-weighted expert load.
//!
//! Visual tokens are scored by the Shannon entropy of `softmax(feature)`,
//! z-scored within their normalization group and squashed through a sigmoid
//! into a semantic weight. Flat (high-entropy) tokens end up light, sharp
//! ones heavy. Text tokens always weigh 1.0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Modality, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Statistics per image (`group_id`).
    #[default]
    PerGroup,
    /// One set of statistics over every visual token in the batch.
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyParams {
    pub delta_semantic: f64,
    pub epsilon: f64,
    pub norm_scope: NormScope,
}

impl Default for EntropyParams {
    fn default() -> Self {
        EntropyParams {
            delta_semantic: 1.5,
            epsilon: 1e-6,
            norm_scope: NormScope::PerGroup,
        }
    }
}

impl EntropyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_semantic.is_finite() && self.delta_semantic > 0.0) {
            return Err(Error::range("entropy.delta_semantic", "must be > 0"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::range("entropy.epsilon", "must be > 0"));
        }
        Ok(())
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_finite(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Entropy of `softmax(feature)` in nats.
pub fn shannon_entropy(feature: &[f64]) -> Result<f64> {
    let probs = softmax(feature)?;
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    // Rounding can push a near-one-hot distribution a hair below zero.
    Ok(h.max(0.0))
}

/// Z-scores entropies within each normalization group using the population
/// standard deviation: `(H - mean) / (std + epsilon)`.
///
/// Under [`NormScope::PerGroup`] the group ids must form a gap-free range
/// `0..=max`; a missing id is reported as [`Error::EmptyGroup`].
pub fn normalize_entropy(
    entropies: &[f64],
    groups: &[usize],
    params: &EntropyParams,
) -> Result<Vec<f64>> {
    if entropies.len() != groups.len() {
        return Err(Error::LengthMismatch {
            expected: entropies.len(),
            got: groups.len(),
        });
    }
    check_finite(entropies)?;
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        let key = match params.norm_scope {
            NormScope::PerGroup => g,
            NormScope::PerBatch => 0,
        };
        members.entry(key).or_default().push(i);
    }
    if params.norm_scope == NormScope::PerGroup {
        if let Some(&last) = members.keys().next_back() {
            if let Some(group) = (0..=last).find(|g| !members.contains_key(g)) {
                return Err(Error::EmptyGroup { group });
            }
        }
    }

    let mut out = vec![0.0; entropies.len()];
    for idx in members.values() {
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| entropies[i]).sum::<f64>() / n;
        let var = idx
            .iter()
            .map(|&i| (entropies[i] - mean).powi(2))
            .sum::<f64>()
            / n;
        let denom = var.sqrt() + params.epsilon;
        for &i in idx {
            out[i] = (entropies[i] - mean) / denom;
        }
    }
    Ok(out)
}

/// `1.0` for text, `sigmoid(-delta * h_norm)` for visual tokens.
pub fn semantic_weight(modality: Modality, normalized_entropy: f64, params: &EntropyParams) -> f64 {
    match modality {
        Modality::Text => 1.0,
        Modality::Visual => {
            let w = 1.0 / (1.0 + (params.delta_semantic * normalized_entropy).exp());
            w.max(f64::MIN_POSITIVE)
        }
    }
}

/// Sum of the semantic weights of the tokens held by one expert.
pub fn effective_load<I: IntoIterator<Item = f64>>(weights: I) -> f64 {
    weights.into_iter().sum()
}

/// Computes entropy, normalized entropy and weight for every visual token in
/// place. Text tokens are reset to weight 1.0 with no entropy.
pub fn apply_semantic_weights(tokens: &mut [Token], params: &EntropyParams) -> Result<()> {
    params.validate()?;
    let visual: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i].is_visual()).collect();
    let mut entropies = Vec::with_capacity(visual.len());
    for &i in &visual {
        entropies.push(shannon_entropy(&tokens[i].feature)?);
    }
    let groups: Vec<usize> = visual.iter().map(|&i| tokens[i].group_id).collect();
    let normalized = normalize_entropy(&entropies, &groups, params)?;
    for t in tokens.iter_mut().filter(|t| !t.is_visual()) {
        t.entropy = None;
        t.weight = 1.0;
    }
    for ((&i, h), hn) in visual.iter().zip(entropies).zip(normalized) {
        tokens[i].entropy = Some(h);
        tokens[i].weight = semantic_weight(Modality::Visual, hn, params);
    }
    Ok(())
}

/// Per-expert effective load and raw token count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadLedger {
    pub effective_load: Vec<f64>,
    pub raw_count: Vec<u64>,
}

impl LoadLedger {
    pub fn new(num_experts: usize) -> Self {
        LoadLedger {
            effective_load: vec![0.0; num_experts],
            raw_count: vec![0; num_experts],
        }
    }

    pub fn charge(&mut self, expert: usize, weight: f64) {
        self.effective_load[expert] += weight;
        self.raw_count[expert] += 1;
    }

    pub fn num_experts(&self) -> usize {
        self.raw_count.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(delta: f64) -> EntropyParams {
        EntropyParams {
            delta_semantic: delta,
            ..EntropyParams::default()
        }
    }

    /// Neumaier-compensated sum, used as the high-precision reference.
    fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for v in values {
            let t = sum + v;
            if sum.abs() >= v.abs() {
                c += (sum - t) + v;
            } else {
                c += (v - t) + sum;
            }
            sum = t;
        }
        sum + c
    }

    #[test]
    fn uniform_entropy_is_ln_dim() {
        let h = shannon_entropy(&[0.7; 16]).unwrap();
        assert!((h - 16f64.ln()).abs() < 1e-12);
        assert!((h - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn near_one_hot_entropy() {
        assert!(shannon_entropy(&[50.0, 0.0, 0.0, 0.0]).unwrap() < 1e-8);
    }

    #[test]
    fn entropy_matches_logsumexp_route() {
        // H = logsumexp(z) - sum p_i z_i, evaluated with compensated sums.
        let z = [1.0, 0.5, 0.0];
        let m = 1.0f64;
        let s = compensated_sum(z.iter().map(|&v| (v - m).exp()));
        let lse = m + s.ln();
        let expected = lse - compensated_sum(z.iter().map(|&v| (v - m).exp() / s * v));
        let got = shannon_entropy(&z).unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
        assert!((got - 1.020_191_336_726_831).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_non_finite() {
        assert!(matches!(
            shannon_entropy(&[0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(shannon_entropy(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn identical_group_normalizes_to_zero() {
        let out = normalize_entropy(&[2.0; 3], &[0; 3], &EntropyParams::default()).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn two_point_group() {
        let eps = 1e-6;
        let out = normalize_entropy(&[1.0, 3.0], &[0, 0], &EntropyParams::default()).unwrap();
        assert!((out[0] + 1.0 / (1.0 + eps)).abs() < 1e-15);
        assert!((out[1] - 1.0 / (1.0 + eps)).abs() < 1e-15);
    }

    #[test]
    fn per_group_independent_means() {
        let h = [1.0, 2.0, 3.0, 10.0, 20.0];
        let g = [0, 0, 0, 1, 1];
        let out = normalize_entropy(&h, &g, &EntropyParams::default()).unwrap();
        for group in 0..2 {
            let vals: Vec<f64> = (0..5).filter(|&i| g[i] == group).map(|i| out[i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            let var = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
            assert!((var.sqrt() - 1.0).abs() < 1e-5);
        }
        let batch = EntropyParams {
            norm_scope: NormScope::PerBatch,
            ..EntropyParams::default()
        };
        let out = normalize_entropy(&h, &g, &batch).unwrap();
        assert!(out.iter().sum::<f64>().abs() < 1e-12);
        // Group 0 is entirely below the batch mean.
        assert!(out[..3].iter().all(|&v| v < 0.0));
    }

    #[test]
    fn missing_group_is_empty_group_error() {
        let err = normalize_entropy(&[1.0, 2.0], &[0, 2], &EntropyParams::default());
        assert!(matches!(err, Err(Error::EmptyGroup { group: 1 })));
        assert!(normalize_entropy(&[1.0], &[0, 0], &EntropyParams::default()).is_err());
    }

    #[test]
    fn single_token_group_gets_half_weight() {
        let out = normalize_entropy(&[3.3], &[0], &EntropyParams::default()).unwrap();
        assert_eq!(out, vec![0.0]);
        assert_eq!(semantic_weight(Modality::Visual, out[0], &params(1.5)), 0.5);
    }

    #[test]
    fn weights() {
        let p = params(1.5);
        assert_eq!(semantic_weight(Modality::Text, 123.0, &p), 1.0);
        assert_eq!(semantic_weight(Modality::Visual, 0.0, &p), 0.5);
        let w = semantic_weight(Modality::Visual, 1.0, &p);
        assert!((w - 1.0 / (1.0 + 1.5f64.exp())).abs() < 1e-15);
        assert!((w - 0.18243).abs() < 1e-5);
    }

    #[test]
    fn effective_load_sums() {
        assert_eq!(effective_load([1.0; 5]), 5.0);
        assert_eq!(effective_load([0.5, 0.25, 1.0]), 1.75);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..100).map(|_| rng.random_range(f64::EPSILON..=1.0)).collect();
        let reference = compensated_sum(w.iter().copied());
        assert!((effective_load(w.iter().copied()) - reference).abs() < 1e-12);
        let mut rev = w.clone();
        rev.reverse();
        assert!((effective_load(rev) - reference).abs() < 1e-12);
    }

    #[test]
    fn apply_weights_to_batch() {
        let mut tokens = vec![
            Token::text(0, vec![0.0, 1.0], 0),
            Token::visual(1, vec![5.0, 0.0], 0),
            Token::visual(2, vec![0.1, 0.0], 0),
        ];
        apply_semantic_weights(&mut tokens, &params(1.5)).unwrap();
        assert_eq!(tokens[0].weight, 1.0);
        assert!(tokens[0].entropy.is_none());
        // The sharper token is heavier.
        assert!(tokens[1].weight > 0.5 && tokens[2].weight < 0.5);
        assert!(tokens[1].entropy.unwrap() < tokens[2].entropy.unwrap());
    }

    proptest::proptest! {
        #[test]
        fn entropy_shift_invariant(v in proptest::collection::vec(-20.0f64..20.0, 1..32), c in -100.0f64..100.0) {
            let h = shannon_entropy(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            proptest::prop_assert!((h - shannon_entropy(&shifted).unwrap()).abs() < 1e-9);
            proptest::prop_assert!(h >= 0.0 && h <= (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn weight_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, d in 0.1f64..4.0) {
            proptest::prop_assume!(a < b);
            let p = params(d);
            proptest::prop_assert!(semantic_weight(Modality::Visual, a, &p) > semantic_weight(Modality::Visual, b, &p));
        }

        #[test]
        fn effective_load_bounded_by_count(w in proptest::collection::vec(1e-6f64..=1.0, 0..50)) {
            let l = effective_load(w.iter().copied());
            proptest::prop_assert!(l <= w.len() as f64 + 1e-12);
        }
    }
}
