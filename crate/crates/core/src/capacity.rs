//! Static and modality-adaptive expert capacities.

use serde::{Deserialize, Serialize};

use crate::calibration::ExpertClass;
use crate::error::{Error, Result};
use crate::model::Token;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacityParams {
    pub gamma0: f64,
    pub rho: f64,
    pub c_min: f64,
}

impl Default for CapacityParams {
    fn default() -> Self {
        CapacityParams {
            gamma0: 1.0,
            rho: 0.6,
            c_min: 1.0,
        }
    }
}

impl CapacityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0.is_finite() && self.gamma0 > 0.0) {
            return Err(Error::range("capacity.gamma0", "must be > 0"));
        }
        if !(0.0..=2.0).contains(&self.rho) {
            return Err(Error::range("capacity.rho", format!("{} not in [0, 2]", self.rho)));
        }
        if !(self.c_min.is_finite() && self.c_min > 0.0) {
            return Err(Error::range("capacity.c_min", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityPlan {
    pub c_base: f64,
    pub c_j: Vec<f64>,
    pub r_v: f64,
}

impl CapacityPlan {
    pub fn num_experts(&self) -> usize {
        self.c_j.len()
    }

    /// Builds the per-expert plan for a weighted batch.
    pub fn build(
        tokens: &[Token],
        k: usize,
        classes: &[ExpertClass],
        params: &CapacityParams,
    ) -> Result<Self> {
        let c_base = base_capacity(tokens.len(), k, classes.len(), params.gamma0);
        let r_v = effective_visual_ratio(tokens)?;
        let c_j = classes
            .iter()
            .map(|&c| adaptive_capacity(c_base, params.rho, modality_bias(c), r_v, params.c_min))
            .collect();
        Ok(CapacityPlan { c_base, c_j, r_v })
    }

    /// Whole-token capacity for the count-based baselines.
    pub fn count_capacity(&self) -> usize {
        count_capacity(self.c_base)
    }
}

/// `gamma * tokens * k / experts`, unrounded.
pub fn base_capacity(num_tokens: usize, k: usize, num_experts: usize, gamma0: f64) -> f64 {
    gamma0 * num_tokens as f64 * k as f64 / num_experts as f64
}

/// Floor of a real capacity, never below one token.
pub fn count_capacity(c_base: f64) -> usize {
    if c_base >= usize::MAX as f64 {
        usize::MAX
    } else {
        (c_base.floor() as usize).max(1)
    }
}

/// Share of the batch's total semantic weight carried by visual tokens.
pub fn effective_visual_ratio(tokens: &[Token]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (visual, total) = tokens.iter().fold((0.0, 0.0), |(v, t), tok| {
        if tok.is_visual() {
            (v + tok.weight, t + tok.weight)
        } else {
            (v, t + tok.weight)
        }
    });
    Ok(visual / total)
}

pub fn modality_bias(class: ExpertClass) -> i8 {
    match class {
        ExpertClass::Visual => 1,
        ExpertClass::Text => -1,
        ExpertClass::Shared => 0,
    }
}

/// `max(c_min, c_base * (1 + rho * bias * (r_v - 0.5)))`.
pub fn adaptive_capacity(c_base: f64, rho: f64, bias: i8, r_v: f64, c_min: f64) -> f64 {
    let scaled = c_base * (1.0 + rho * f64::from(bias) * (r_v - 0.5));
    scaled.max(c_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Token;

    #[test]
    fn base_capacity_values() {
        assert_eq!(base_capacity(128, 2, 8, 1.0), 32.0);
        assert_eq!(base_capacity(100, 1, 8, 0.5), 6.25);
        // 1.8 * 4096 * 8 / 128 = 1.8 * 256 = 460.8
        assert!((base_capacity(4096, 8, 128, 1.8) - 460.8).abs() < 1e-12);
    }

    #[test]
    fn count_capacity_floors_at_one() {
        assert_eq!(count_capacity(6.25), 6);
        assert_eq!(count_capacity(0.3), 1);
        assert_eq!(count_capacity(1e30), usize::MAX);
    }

    fn weighted(visual: bool, w: f64, id: usize) -> Token {
        let mut t = if visual {
            Token::visual(id, vec![0.0], 0)
        } else {
            Token::text(id, vec![0.0], 0)
        };
        t.weight = w;
        t
    }

    #[test]
    fn visual_ratio() {
        let text = vec![weighted(false, 1.0, 0), weighted(false, 1.0, 1)];
        assert_eq!(effective_visual_ratio(&text).unwrap(), 0.0);
        let vis = vec![weighted(true, 0.3, 0), weighted(true, 0.9, 1)];
        assert_eq!(effective_visual_ratio(&vis).unwrap(), 1.0);
        let mixed = vec![
            weighted(true, 0.5, 0),
            weighted(true, 0.5, 1),
            weighted(false, 1.0, 2),
        ];
        assert_eq!(effective_visual_ratio(&mixed).unwrap(), 0.5);
        assert!(matches!(effective_visual_ratio(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn bias_values() {
        assert_eq!(modality_bias(ExpertClass::Visual), 1);
        assert_eq!(modality_bias(ExpertClass::Shared), 0);
        assert_eq!(modality_bias(ExpertClass::Text), -1);
    }

    #[test]
    fn adaptive_values() {
        assert_eq!(adaptive_capacity(32.0, 0.6, 0, 0.9, 1.0), 32.0);
        for rho in [0.0, 0.6, 2.0] {
            for m in [-1, 0, 1] {
                assert_eq!(adaptive_capacity(32.0, rho, m, 0.5, 1.0), 32.0);
            }
        }
        assert!((adaptive_capacity(32.0, 0.6, 1, 0.8, 1.0) - 37.76).abs() < 1e-12);
        // Clamp.
        assert_eq!(adaptive_capacity(1.0, 2.0, -1, 1.0, 1.0), 1.0);
    }

    #[test]
    fn symmetric_population_conserves_total() {
        let classes = [
            ExpertClass::Visual,
            ExpertClass::Text,
            ExpertClass::Shared,
            ExpertClass::Visual,
            ExpertClass::Text,
        ];
        for r_v in [0.0, 0.2, 0.77, 1.0] {
            let total: f64 = classes
                .iter()
                .map(|&c| adaptive_capacity(40.0, 0.6, modality_bias(c), r_v, 0.0))
                .sum();
            assert!((total - 5.0 * 40.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rho_zero_is_static() {
        let tokens: Vec<Token> = (0..10).map(|i| weighted(i % 3 == 0, 0.4, i)).collect();
        let classes = [ExpertClass::Visual, ExpertClass::Text, ExpertClass::Shared, ExpertClass::Visual];
        let p = CapacityParams {
            gamma0: 0.5,
            rho: 0.0,
            c_min: 1.0,
        };
        let plan = CapacityPlan::build(&tokens, 2, &classes, &p).unwrap();
        assert!(plan.c_j.iter().all(|&c| c == base_capacity(10, 2, 4, 0.5)));
    }

    #[test]
    fn params_validation() {
        assert!(CapacityParams { rho: 3.5, ..Default::default() }.validate().is_err());
        assert!(CapacityParams { gamma0: 0.0, ..Default::default() }.validate().is_err());
        assert!(CapacityParams::default().validate().is_ok());
    }

    proptest::proptest! {
        #[test]
        fn monotone_in_visual_ratio(a in 0.0f64..=1.0, b in 0.0f64..=1.0, rho in 0.0f64..=2.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            proptest::prop_assert!(adaptive_capacity(50.0, rho, 1, lo, 0.0) <= adaptive_capacity(50.0, rho, 1, hi, 0.0));
            proptest::prop_assert!(adaptive_capacity(50.0, rho, -1, lo, 0.0) >= adaptive_capacity(50.0, rho, -1, hi, 0.0));
            proptest::prop_assert_eq!(adaptive_capacity(50.0, rho, 0, lo, 0.0), adaptive_capacity(50.0, rho, 0, hi, 0.0));
            proptest::prop_assert!(adaptive_capacity(0.5, rho, -1, hi, 1.0) >= 1.0);
        }
    }
}
