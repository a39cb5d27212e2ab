//! Capacity-constrained token dispatch.
//!
//! Policies:
//!
//! * `Vanilla`: every top-k slot is admitted, no capacity.
//! * `CaiDrop`: whole-token capacity per expert, highest gates kept, the rest dropped.
//! * `CaiExpanded`: like `CaiDrop`, but overflow falls back to the token's next-best
//!   expert (by gate, anywhere) that still has room.
//! * `Macs`: entropy-weighted admission against adaptive capacities, processed in
//!   retention order; overflow is rerouted to the best-scoring expert with spare
//!   capacity (same device under `RerouteScope::Local`), otherwise dropped.
//! * `MacsNoExpand`: MACS admission and drop order without rerouting.
//!
//! Every run produces an [`Assignment`], a [`LoadLedger`] of terminal loads and an
//! ordered event log.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::capacity::CapacityPlan;
use crate::entropy::LoadLedger;
use crate::error::{Error, Result};
use crate::model::{top_k_route, Assignment, GateVector, RoutingDecision, SlotStatus, Token, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Vanilla,
    CaiDrop,
    CaiExpanded,
    Macs,
    MacsNoExpand,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::Vanilla,
        Policy::CaiDrop,
        Policy::CaiExpanded,
        Policy::Macs,
        Policy::MacsNoExpand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Vanilla => "vanilla",
            Policy::CaiDrop => "cai_drop",
            Policy::CaiExpanded => "cai_expanded",
            Policy::Macs => "macs",
            Policy::MacsNoExpand => "macs_no_expand",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RerouteScope {
    #[default]
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeepRule {
    /// Highest gate first, ties by token index.
    #[default]
    GateDesc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchParams {
    pub policy: Policy,
    pub eta: f64,
    pub reroute_scope: RerouteScope,
    pub expansion: bool,
}

impl Default for DispatchParams {
    fn default() -> Self {
        DispatchParams {
            policy: Policy::Macs,
            eta: 0.5,
            reroute_scope: RerouteScope::Local,
            expansion: true,
        }
    }
}

impl DispatchParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::range("dispatch.eta", format!("{} not in [0, 1]", self.eta)));
        }
        Ok(())
    }

    fn reroutes(&self) -> bool {
        self.policy == Policy::Macs && self.expansion
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Admit,
    Reroute,
    Drop,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub kind: EventKind,
    pub token: usize,
    pub from: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub to: Option<usize>,
    pub gate: f64,
    pub weight: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub retention: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DispatchEvents {
    pub admissions: usize,
    pub reroutes: usize,
    pub drops: usize,
    pub records: Vec<Event>,
    pub retained_gate_mass: f64,
    pub dropped_gate_mass: f64,
}

impl DispatchEvents {
    pub fn total_slots(&self) -> usize {
        self.admissions + self.reroutes + self.drops
    }

    fn push(&mut self, mut event: Event) -> u64 {
        let seq = self.records.len() as u64;
        event.seq = seq;
        match event.kind {
            EventKind::Admit => self.admissions += 1,
            EventKind::Reroute => self.reroutes += 1,
            EventKind::Drop => self.drops += 1,
        }
        if event.kind == EventKind::Drop {
            self.dropped_gate_mass += event.gate;
        } else {
            self.retained_gate_mass += event.gate;
        }
        self.records.push(event);
        seq
    }

    /// Writes one JSON object per event.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.records {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchOutcome {
    pub policy: Policy,
    pub assignment: Assignment,
    pub events: DispatchEvents,
    pub ledger: LoadLedger,
}

/// Top-k routes for a batch. Token ids must equal their position.
pub fn route_batch(tokens: &[Token], gates: &[GateVector], k: usize) -> Result<Vec<RoutingDecision>> {
    if tokens.len() != gates.len() {
        return Err(Error::LengthMismatch {
            expected: tokens.len(),
            got: gates.len(),
        });
    }
    tokens
        .iter()
        .zip(gates)
        .enumerate()
        .map(|(i, (t, g))| {
            if t.id != i {
                return Err(Error::SpecInvalid(format!("token at position {i} has id {}", t.id)));
            }
            top_k_route(t.id, g, k)
        })
        .collect()
}

/// Bookkeeping shared by every policy while a batch is resolved.
struct Resolver<'a> {
    tokens: &'a [Token],
    assignment: Assignment,
    events: DispatchEvents,
    ledger: LoadLedger,
}

impl<'a> Resolver<'a> {
    fn new(tokens: &'a [Token], gates: &[GateVector], k: usize, num_experts: usize) -> Result<Self> {
        if let Some(g) = gates.iter().find(|g| g.len() != num_experts) {
            return Err(Error::LengthMismatch {
                expected: num_experts,
                got: g.len(),
            });
        }
        let routes = route_batch(tokens, gates, k)?;
        Ok(Resolver {
            tokens,
            assignment: Assignment::from_routes(&routes, k),
            events: DispatchEvents::default(),
            ledger: LoadLedger::new(num_experts),
        })
    }

    fn resolve(&mut self, slot: usize, status: SlotStatus, retention: Option<f64>, score: Option<f64>) {
        let s = &self.assignment.slots[slot];
        let weight = self.tokens[s.token].weight;
        let (kind, from, to) = match status {
            SlotStatus::Admitted { expert } => (EventKind::Admit, expert, None),
            SlotStatus::Rerouted { from, to } => (EventKind::Reroute, from, Some(to)),
            SlotStatus::Dropped { from } => (EventKind::Drop, from, None),
            SlotStatus::Pending => unreachable!("resolving to pending"),
        };
        if let Some(dest) = status.destination() {
            self.ledger.charge(dest, weight);
        }
        let seq = self.events.push(Event {
            seq: 0,
            kind,
            token: s.token,
            from,
            to,
            gate: s.gate,
            weight,
            retention,
            score,
        });
        let s = &mut self.assignment.slots[slot];
        s.status = status;
        s.seq = seq;
    }

    fn finish(self, policy: Policy) -> DispatchOutcome {
        DispatchOutcome {
            policy,
            assignment: self.assignment,
            events: self.events,
            ledger: self.ledger,
        }
    }

    /// Slot indices ordered by gate descending, then token, then rank.
    fn gate_order(&self) -> Vec<usize> {
        let slots = &self.assignment.slots;
        let mut order: Vec<usize> = (0..slots.len()).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (&slots[a], &slots[b]);
            y.gate
                .total_cmp(&x.gate)
                .then(x.token.cmp(&y.token))
                .then(x.rank.cmp(&y.rank))
        });
        order
    }
}

/// Unconstrained top-k dispatch.
pub fn dispatch_vanilla(tokens: &[Token], gates: &[GateVector], k: usize, topology: &Topology) -> Result<DispatchOutcome> {
    let mut r = Resolver::new(tokens, gates, k, topology.num_experts())?;
    for i in 0..r.assignment.slots.len() {
        let expert = r.assignment.slots[i].routed;
        r.resolve(i, SlotStatus::Admitted { expert }, None, None);
    }
    Ok(r.finish(Policy::Vanilla))
}

/// Count-based capacity: each expert keeps its `capacity` highest-gate slots
/// and drops the rest.
pub fn dispatch_capped_count(
    tokens: &[Token],
    gates: &[GateVector],
    k: usize,
    capacity: usize,
    keep_rule: KeepRule,
    topology: &Topology,
) -> Result<DispatchOutcome> {
    if capacity == 0 {
        return Err(Error::range("capacity", "count capacity must be >= 1"));
    }
    let mut r = Resolver::new(tokens, gates, k, topology.num_experts())?;
    let order = match keep_rule {
        KeepRule::GateDesc => r.gate_order(),
    };
    for i in order {
        let expert = r.assignment.slots[i].routed;
        if (r.ledger.raw_count[expert] as usize) < capacity {
            r.resolve(i, SlotStatus::Admitted { expert }, None, None);
        } else {
            r.resolve(i, SlotStatus::Dropped { from: expert }, None, None);
        }
    }
    Ok(r.finish(Policy::CaiDrop))
}

/// Count-based capacity with a global fallback: after the primary pass, each
/// overflow slot (in gate order) moves to the highest-gate expert that has room
/// and does not already hold the token.
pub fn dispatch_cai_expanded(
    tokens: &[Token],
    gates: &[GateVector],
    k: usize,
    capacity: usize,
    topology: &Topology,
) -> Result<DispatchOutcome> {
    if capacity == 0 {
        return Err(Error::range("capacity", "count capacity must be >= 1"));
    }
    let mut r = Resolver::new(tokens, gates, k, topology.num_experts())?;
    let mut counts = vec![0usize; topology.num_experts()];
    let mut overflow = Vec::new();
    for i in r.gate_order() {
        let expert = r.assignment.slots[i].routed;
        if counts[expert] < capacity {
            counts[expert] += 1;
            r.resolve(i, SlotStatus::Admitted { expert }, None, None);
        } else {
            overflow.push(i);
        }
    }
    for i in overflow {
        let (token, from) = (r.assignment.slots[i].token, r.assignment.slots[i].routed);
        let held: Vec<usize> = r
            .assignment
            .slots_of(token)
            .iter()
            .flat_map(|s| [Some(s.routed), s.status.destination()])
            .flatten()
            .collect();
        let target = gates[token]
            .ranked()
            .into_iter()
            .find(|&e| !held.contains(&e) && counts[e] < capacity);
        match target {
            Some(to) => {
                counts[to] += 1;
                r.resolve(i, SlotStatus::Rerouted { from, to }, None, None);
            }
            None => r.resolve(i, SlotStatus::Dropped { from }, None, None),
        }
    }
    Ok(r.finish(Policy::CaiExpanded))
}

/// `weight * max_j gate_j`: low values are dropped first.
pub fn retention_score(weight: f64, gates: &GateVector) -> f64 {
    weight * gates.max()
}

/// Cosine similarity, or 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// `(1 - eta) * gate + eta * cos(feature, centroid)`; an absent centroid
/// contributes no similarity.
pub fn reroute_score(feature: &[f64], gate: f64, centroid: Option<&[f64]>, eta: f64) -> f64 {
    let sim = centroid.map_or(0.0, |c| cosine_similarity(feature, c));
    (1.0 - eta) * gate + eta * sim
}

/// Everything a reroute decision reads besides the token itself.
#[derive(Debug, Clone, Copy)]
pub struct RerouteContext<'a> {
    pub topology: &'a Topology,
    pub capacities: &'a [f64],
    pub centroids: &'a [Option<Vec<f64>>],
    pub eta: f64,
    pub scope: RerouteScope,
}

/// Picks the reroute target for an overflow token: the highest-scoring expert
/// (ties to the lower index) other than `from` and `excluded` whose effective
/// load can absorb the token's weight, restricted to `from`'s device under
/// [`RerouteScope::Local`]. Returns the target and its score.
pub fn local_reroute(
    ctx: &RerouteContext<'_>,
    ledger: &LoadLedger,
    token: &Token,
    gates: &GateVector,
    from: usize,
    excluded: &[usize],
) -> Option<(usize, f64)> {
    let candidates = match ctx.scope {
        RerouteScope::Local => ctx.topology.experts_on(ctx.topology.device_of(from)),
        RerouteScope::Global => 0..ctx.topology.num_experts(),
    };
    let mut best: Option<(usize, f64)> = None;
    for e in candidates {
        if e == from || excluded.contains(&e) {
            continue;
        }
        if ledger.effective_load[e] + token.weight > ctx.capacities[e] {
            continue;
        }
        let score = reroute_score(&token.feature, gates.get(e), ctx.centroids[e].as_deref(), ctx.eta);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((e, score));
        }
    }
    best
}

/// MACS dispatch.
///
/// Slots are processed once, in descending retention order (ties by token
/// index, then slot rank). A slot is admitted when its expert's effective load
/// plus the token weight fits the expert's capacity; otherwise it is rerouted
/// (if the policy allows) or dropped. The first drop at an expert closes it to
/// the rest of its contenders, which all carry equal or lower retention, so
/// drops at every expert are exactly its lowest-retention contenders.
///
/// Reroute targets never include an expert already in the token's top-k set or
/// already chosen for another of its slots. `MacsNoExpand` (or `expansion =
/// false`) would confine targets to that top-k set, so it never reroutes.
pub fn dispatch_macs(
    tokens: &[Token],
    gates: &[GateVector],
    k: usize,
    plan: &CapacityPlan,
    topology: &Topology,
    centroids: &[Option<Vec<f64>>],
    params: &DispatchParams,
) -> Result<DispatchOutcome> {
    let n = topology.num_experts();
    if plan.num_experts() != n {
        return Err(Error::PlanMismatch {
            plan: plan.num_experts(),
            topology: n,
        });
    }
    if centroids.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: centroids.len(),
        });
    }
    params.validate()?;
    let mut r = Resolver::new(tokens, gates, k, n)?;
    let retention: Vec<f64> = tokens
        .iter()
        .zip(gates)
        .map(|(t, g)| retention_score(t.weight, g))
        .collect();

    let mut order: Vec<usize> = (0..r.assignment.slots.len()).collect();
    {
        let slots = &r.assignment.slots;
        order.sort_by(|&a, &b| {
            let (x, y) = (&slots[a], &slots[b]);
            retention[y.token]
                .total_cmp(&retention[x.token])
                .then(x.token.cmp(&y.token))
                .then(x.rank.cmp(&y.rank))
        });
    }

    let ctx = RerouteContext {
        topology,
        capacities: &plan.c_j,
        centroids,
        eta: params.eta,
        scope: params.reroute_scope,
    };
    let mut closed = vec![false; n];
    for i in order {
        let (token, from) = (r.assignment.slots[i].token, r.assignment.slots[i].routed);
        let tok = &tokens[token];
        let ret = Some(retention[token]);
        if !closed[from] && r.ledger.effective_load[from] + tok.weight <= plan.c_j[from] {
            r.resolve(i, SlotStatus::Admitted { expert: from }, ret, None);
            continue;
        }
        let target = if !closed[from] && params.reroutes() {
            let excluded: Vec<usize> = r
                .assignment
                .slots_of(token)
                .iter()
                .flat_map(|s| [Some(s.routed), s.status.destination()])
                .flatten()
                .collect();
            local_reroute(&ctx, &r.ledger, tok, &gates[token], from, &excluded)
        } else {
            None
        };
        match target {
            Some((to, score)) => r.resolve(i, SlotStatus::Rerouted { from, to }, ret, Some(score)),
            None => {
                closed[from] = true;
                r.resolve(i, SlotStatus::Dropped { from }, ret, None);
            }
        }
    }
    Ok(r.finish(params.policy))
}

/// Dispatches a batch under any policy. Count baselines use the plan's
/// whole-token base capacity.
pub fn dispatch(
    tokens: &[Token],
    gates: &[GateVector],
    k: usize,
    plan: &CapacityPlan,
    topology: &Topology,
    centroids: &[Option<Vec<f64>>],
    params: &DispatchParams,
) -> Result<DispatchOutcome> {
    match params.policy {
        Policy::Vanilla => dispatch_vanilla(tokens, gates, k, topology),
        Policy::CaiDrop => dispatch_capped_count(
            tokens,
            gates,
            k,
            plan.count_capacity(),
            KeepRule::GateDesc,
            topology,
        ),
        Policy::CaiExpanded => dispatch_cai_expanded(tokens, gates, k, plan.count_capacity(), topology),
        Policy::Macs | Policy::MacsNoExpand => {
            dispatch_macs(tokens, gates, k, plan, topology, centroids, params)
        }
    }
}
