//! Domain types shared by the routing, capacity and simulation layers.
//!
//! Everything here is immutable once built. [`top_k_route`] is the plain
//! router used by the vanilla baseline and by calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a gate vector.
pub const GATE_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
        }
    }
}

/// One routed unit of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub id: usize,
    pub modality: Modality,
    pub feature: Vec<f64>,
    /// Image/sample the token belongs to; drives per-group entropy normalization.
    pub group_id: usize,
    /// Shannon entropy of `softmax(feature)` in nats. Only set for visual tokens.
    pub entropy: Option<f64>,
    /// Semantic weight in (0, 1]. Always 1.0 for text.
    pub weight: f64,
}

impl Token {
    pub fn text(id: usize, feature: Vec<f64>, group_id: usize) -> Self {
        Token {
            id,
            modality: Modality::Text,
            feature,
            group_id,
            entropy: None,
            weight: 1.0,
        }
    }

    /// A visual token starts at weight 1.0 until the entropy pipeline runs.
    pub fn visual(id: usize, feature: Vec<f64>, group_id: usize) -> Self {
        Token {
            id,
            modality: Modality::Visual,
            feature,
            group_id,
            entropy: None,
            weight: 1.0,
        }
    }

    pub fn is_visual(&self) -> bool {
        self.modality == Modality::Visual
    }
}

/// Expert-to-device placement under expert parallelism.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    num_experts: usize,
    num_devices: usize,
    device_of: Vec<usize>,
}

/// Places experts on devices in contiguous blocks of `num_experts / num_devices`.
pub fn build_topology(num_experts: usize, num_devices: usize) -> Result<Topology> {
    if num_devices == 0 || num_experts < num_devices || num_experts % num_devices != 0 {
        return Err(Error::NonDivisible {
            num_experts,
            num_devices,
        });
    }
    let per_device = num_experts / num_devices;
    let device_of = (0..num_experts).map(|j| j / per_device).collect();
    Ok(Topology {
        num_experts,
        num_devices,
        device_of,
    })
}

impl Topology {
    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn num_devices(&self) -> usize {
        self.num_devices
    }

    pub fn experts_per_device(&self) -> usize {
        self.num_experts / self.num_devices
    }

    pub fn device_of(&self, expert: usize) -> usize {
        self.device_of[expert]
    }

    pub fn experts_on(&self, device: usize) -> std::ops::Range<usize> {
        let per = self.experts_per_device();
        device * per..(device + 1) * per
    }

    /// Device a token is dispatched from: round-robin by token index.
    pub fn origin_device(&self, token: usize) -> usize {
        token % self.num_devices
    }
}

/// Router output for one token: a probability distribution over experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GateVector(Vec<f64>);

impl GateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::BadGates("empty gate vector".into()));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if let Some(i) = values.iter().position(|&v| v < 0.0) {
            return Err(Error::BadGates(format!("negative gate at expert {i}")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > GATE_SUM_TOLERANCE {
            return Err(Error::BadGates(format!("gates sum to {sum}")));
        }
        Ok(GateVector(values))
    }

    /// Numerically stable softmax of raw router logits.
    pub fn softmax(logits: &[f64]) -> Result<Self> {
        let probs = crate::entropy::softmax(logits)?;
        GateVector::new(probs)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, expert: usize) -> f64 {
        self.0[expert]
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Experts ordered by gate value descending, ties by index ascending.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        order
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub token_id: usize,
    /// `(expert, gate)` pairs, descending by gate.
    pub chosen: Vec<(usize, f64)>,
}

impl RoutingDecision {
    pub fn experts(&self) -> impl Iterator<Item = usize> + '_ {
        self.chosen.iter().map(|&(e, _)| e)
    }

    pub fn contains(&self, expert: usize) -> bool {
        self.chosen.iter().any(|&(e, _)| e == expert)
    }
}

/// Selects the `k` largest gates. Ties go to the smaller expert index.
pub fn top_k_route(token_id: usize, gates: &GateVector, k: usize) -> Result<RoutingDecision> {
    let n = gates.len();
    if k == 0 || k > n {
        return Err(Error::BadK { k, num_experts: n });
    }
    let values = gates.values();
    let mut order: Vec<usize> = (0..n).collect();
    let by_rank = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if k < n {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_by(by_rank);
    Ok(RoutingDecision {
        token_id,
        chosen: order.into_iter().map(|e| (e, values[e])).collect(),
    })
}

/// Terminal outcome of one (token, expert-slot).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SlotStatus {
    Pending,
    Admitted { expert: usize },
    Rerouted { from: usize, to: usize },
    Dropped { from: usize },
}

impl SlotStatus {
    /// Expert that ends up processing the slot, if any.
    pub fn destination(self) -> Option<usize> {
        match self {
            SlotStatus::Admitted { expert } => Some(expert),
            SlotStatus::Rerouted { to, .. } => Some(to),
            SlotStatus::Dropped { .. } | SlotStatus::Pending => None,
        }
    }

    pub fn is_resolved(self) -> bool {
        !matches!(self, SlotStatus::Pending)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub token: usize,
    /// Position within the token's top-k list.
    pub rank: usize,
    /// Expert chosen by the router.
    pub routed: usize,
    /// Raw gate value of the routed expert; never renormalized.
    pub gate: f64,
    pub status: SlotStatus,
    /// Global event sequence number of the resolving event.
    pub seq: u64,
}

/// Per-slot dispatch outcome for a whole batch, ordered by (token, rank).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub k: usize,
    pub slots: Vec<Slot>,
}

impl Assignment {
    /// Pending slots for every token's top-k routing.
    pub fn from_routes(routes: &[RoutingDecision], k: usize) -> Self {
        let slots = routes
            .iter()
            .flat_map(|r| {
                r.chosen.iter().enumerate().map(move |(rank, &(e, g))| Slot {
                    token: r.token_id,
                    rank,
                    routed: e,
                    gate: g,
                    status: SlotStatus::Pending,
                    seq: 0,
                })
            })
            .collect();
        Assignment { k, slots }
    }

    pub fn slot_index(&self, token: usize, rank: usize) -> usize {
        token * self.k + rank
    }

    pub fn slots_of(&self, token: usize) -> &[Slot] {
        let start = token * self.k;
        &self.slots[start..start + self.k]
    }

    /// Equality of everything except event sequence numbers, which depend on
    /// each policy's processing order.
    pub fn same_slots(&self, other: &Assignment) -> bool {
        self.k == other.k
            && self.slots.len() == other.slots.len()
            && self.slots.iter().zip(&other.slots).all(|(a, b)| {
                a.token == b.token
                    && a.rank == b.rank
                    && a.routed == b.routed
                    && a.gate.to_bits() == b.gate.to_bits()
                    && a.status == b.status
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn topology_block_placement() {
        let t = build_topology(8, 4).unwrap();
        assert_eq!(t.device_of(5), 2);
        assert_eq!(t.experts_per_device(), 2);
        let t = build_topology(128, 8).unwrap();
        assert_eq!(t.experts_per_device(), 16);
        for d in 0..8 {
            assert_eq!((0..128).filter(|&j| t.device_of(j) == d).count(), 16);
        }
        assert!(matches!(build_topology(7, 2), Err(Error::NonDivisible { .. })));
        assert!(build_topology(2, 4).is_err());
        assert!(build_topology(4, 0).is_err());
    }

    #[test]
    fn top_k_unique_max() {
        let g = GateVector::new(vec![0.1, 0.6, 0.3]).unwrap();
        assert_eq!(top_k_route(0, &g, 1).unwrap().chosen, vec![(1, 0.6)]);
    }

    #[test]
    fn top_k_ties_by_index() {
        let g = GateVector::new(vec![0.25; 4]).unwrap();
        assert_eq!(
            top_k_route(0, &g, 2).unwrap().chosen,
            vec![(0, 0.25), (1, 0.25)]
        );
    }

    #[test]
    fn top_k_bad_k() {
        let g = GateVector::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(top_k_route(0, &g, 0), Err(Error::BadK { .. })));
        assert!(matches!(top_k_route(0, &g, 3), Err(Error::BadK { .. })));
    }

    #[test]
    fn top_k_matches_full_sort_seed7() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g = GateVector::softmax(&logits).unwrap();
        let mut all: Vec<(usize, f64)> = g.values().iter().copied().enumerate().collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(top_k_route(0, &g, 2).unwrap().chosen, all[..2].to_vec());
    }

    #[test]
    fn gate_vector_validation() {
        assert!(GateVector::new(vec![0.5, 0.4]).is_err());
        assert!(GateVector::new(vec![1.2, -0.2]).is_err());
        assert!(GateVector::new(vec![f64::NAN, 1.0]).is_err());
        assert!(GateVector::new(vec![0.5, 0.5 + 1e-7]).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn top_k_equals_sorted_prefix(raw in proptest::collection::vec(0u8..5, 1..64), k_frac in 0.0f64..1.0) {
            // Small integer weights force plenty of ties.
            let total: f64 = raw.iter().map(|&v| v as f64 + 1.0).sum();
            let values: Vec<f64> = raw.iter().map(|&v| (v as f64 + 1.0) / total).collect();
            let g = GateVector::new(values.clone()).unwrap();
            let k = 1 + ((values.len() - 1) as f64 * k_frac) as usize;
            let mut all: Vec<(usize, f64)> = values.into_iter().enumerate().collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let got = top_k_route(3, &g, k).unwrap();
            proptest::prop_assert_eq!(&got.chosen, &all[..k].to_vec());
            proptest::prop_assert_eq!(got, top_k_route(3, &g, k).unwrap());
        }
    }
}
