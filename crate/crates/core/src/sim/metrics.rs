//! Run metrics and the discounted objective, computed from trace records only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::control_rl::{reward, RewardWeights, Transition};
use crate::netmodel::TrafficClass;

use super::config::ObjectiveWeights;
use super::trace::{ClassTick, Payload, TraceRecord};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// Share of Type-I active time with sufficient keys, %.
    pub secure_session_uptime: f64,
    /// Grams CO2 per securely delivered bit; `None` with nothing delivered.
    pub carbon_per_bit: Option<f64>,
    /// `None` when no handover completed.
    pub handover_jitter_max_ms: Option<f64>,
    pub handover_jitter_p99_ms: Option<f64>,
    pub handovers_completed: u64,
    pub handover_downtime_s: f64,
    /// Consumed over generated key, %; 0 when nothing was generated.
    pub key_utilization: f64,
    pub key_generated_bits: f64,
    pub key_consumed_bits: f64,
    pub objective_j: f64,
    pub carbon_g: f64,
    pub secure_bits: f64,
    pub type_i_outage_ticks: u64,
    pub type_i_unsafe_ticks: u64,
    /// Type-I/II flow-ticks whose data-path latency exceeded the class target.
    pub latency_slo_violations: u64,
    pub shield_overrides: u64,
}

impl MetricsSummary {
    /// Scalar metrics in a fixed order, for comparison tables. Absent values
    /// are omitted.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("secure_session_uptime", self.secure_session_uptime)];
        if let Some(c) = self.carbon_per_bit {
            v.push(("carbon_per_bit", c));
        }
        if let Some(j) = self.handover_jitter_max_ms {
            v.push(("handover_jitter_max_ms", j));
        }
        if let Some(j) = self.handover_jitter_p99_ms {
            v.push(("handover_jitter_p99_ms", j));
        }
        v.extend([
            ("handovers_completed", self.handovers_completed as f64),
            ("handover_downtime_s", self.handover_downtime_s),
            ("key_utilization", self.key_utilization),
            ("objective_j", self.objective_j),
            ("carbon_g", self.carbon_g),
            ("secure_bits", self.secure_bits),
            ("type_i_outage_ticks", self.type_i_outage_ticks as f64),
            ("type_i_unsafe_ticks", self.type_i_unsafe_ticks as f64),
            ("latency_slo_violations", self.latency_slo_violations as f64),
            ("shield_overrides", self.shield_overrides as f64),
        ]);
        v
    }
}

/// Raw quantities of one Tier-1 tick, shared by the objective and the reward.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickTotals {
    pub classes: BTreeMap<TrafficClass, ClassTick>,
    pub generated_bits: f64,
    pub carbon_g: f64,
}

impl TickTotals {
    pub fn total(&self) -> ClassTick {
        let mut all = ClassTick::default();
        for c in self.classes.values() {
            all.merge(c);
        }
        all
    }

    /// Secure over demanded bits; 1 with no demand.
    pub fn secure_ratio(&self) -> f64 {
        let all = self.total();
        if all.demand_bits > 0.0 {
            all.secure_bits / all.demand_bits
        } else {
            1.0
        }
    }

    /// Mean data-path latency over carried flow-ticks, ms.
    pub fn mean_latency_ms(&self) -> f64 {
        let all = self.total();
        if all.carried_ticks > 0 {
            1e3 * all.latency_sum_s / all.carried_ticks as f64
        } else {
            0.0
        }
    }

    /// Keyed share of Type-I activity; 1 with no Type-I activity.
    pub fn availability(&self) -> f64 {
        match self.classes.get(&TrafficClass::TypeI) {
            Some(c) if c.active_ticks > 0 => c.keyed_ticks as f64 / c.active_ticks as f64,
            _ => 1.0,
        }
    }

    pub fn utility(&self, w: &ObjectiveWeights) -> f64 {
        w.w1 * self.secure_ratio() - w.w2 * self.mean_latency_ms() - w.w3 * self.carbon_g + w.w4 * self.availability()
    }

    /// Reward of the tick seen as one decision step: generated key rate
    /// against Type-I key demand.
    pub fn reward(&self, tier1_s: f64, w: &RewardWeights) -> f64 {
        let type_i = self.classes.get(&TrafficClass::TypeI).copied().unwrap_or_default();
        let t = Transition {
            skr_meas: self.generated_bits / tier1_s,
            skr_target: type_i.demand_bits / tier1_s,
            latency: self.mean_latency_ms(),
            carbon: self.carbon_g,
            key_outage: type_i.outage_ticks > 0,
        };
        reward(&t, w)
    }
}

/// Per-tick totals keyed by tick index, in tick order.
pub fn tick_totals(records: &[TraceRecord]) -> BTreeMap<u64, TickTotals> {
    let mut ticks: BTreeMap<u64, TickTotals> = BTreeMap::new();
    for r in records {
        match &r.payload {
            Payload::FlowTick { tick, classes } => ticks.entry(*tick).or_default().classes = classes.clone(),
            Payload::KeyTick { tick, generated_bits, .. } => ticks.entry(*tick).or_default().generated_bits = *generated_bits,
            Payload::EnergyTick { tick, carbon_g, .. } => ticks.entry(*tick).or_default().carbon_g = *carbon_g,
            _ => {}
        }
    }
    ticks
}

/// J = Σ_k γ^k (w1·R_secure/R_demand − w2·L − w3·E + w4·A) over Tier-1 ticks k.
pub fn objective_eval(records: &[TraceRecord], w: &ObjectiveWeights) -> f64 {
    let mut j = 0.0;
    let mut discount = 1.0;
    for totals in tick_totals(records).values() {
        j += discount * totals.utility(w);
        discount *= w.gamma;
    }
    j
}

/// Nearest-rank percentile of a non-empty sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

pub fn compute_metrics(records: &[TraceRecord]) -> MetricsSummary {
    let weights = records
        .iter()
        .find_map(|r| match &r.payload {
            Payload::Header { objective, .. } => Some(*objective),
            _ => None,
        })
        .unwrap_or_default();
    let mut per_class: BTreeMap<TrafficClass, ClassTick> = BTreeMap::new();
    let (mut generated, mut consumed, mut carbon) = (0.0, 0.0, 0.0);
    let mut jitters = Vec::new();
    let mut downtime = 0.0;
    let mut overrides = 0;
    for r in records {
        match &r.payload {
            Payload::FlowTick { classes, .. } => {
                for (class, c) in classes {
                    per_class.entry(*class).or_default().merge(c);
                }
            }
            Payload::KeyTick { generated_bits, consumed_bits, .. } => {
                generated += generated_bits;
                consumed += consumed_bits;
            }
            Payload::EnergyTick { carbon_g, .. } => carbon += carbon_g,
            Payload::HandoverDone { jitter_ms, downtime_s, .. } => {
                jitters.push(*jitter_ms);
                downtime += downtime_s;
            }
            Payload::ControlTick { shield, .. } => overrides += shield.masked + shield.classical + shield.failsafe,
            _ => {}
        }
    }
    let type_i = per_class.get(&TrafficClass::TypeI).copied().unwrap_or_default();
    let uptime = if type_i.active_ticks > 0 {
        100.0 * type_i.keyed_ticks as f64 / type_i.active_ticks as f64
    } else {
        100.0
    };
    let secure_bits: f64 = per_class.values().map(|c| c.secure_bits).sum();
    let slo = [TrafficClass::TypeI, TrafficClass::TypeII]
        .iter()
        .filter_map(|c| per_class.get(c))
        .map(|c| c.slo_violation_ticks)
        .sum();
    MetricsSummary {
        secure_session_uptime: uptime,
        carbon_per_bit: (secure_bits > 0.0).then(|| carbon / secure_bits),
        handover_jitter_max_ms: jitters.iter().copied().reduce(f64::max),
        handover_jitter_p99_ms: (!jitters.is_empty()).then(|| percentile(&jitters, 99.0)),
        handovers_completed: jitters.len() as u64,
        handover_downtime_s: downtime,
        key_utilization: if generated > 0.0 { (100.0 * consumed / generated).min(100.0) } else { 0.0 },
        key_generated_bits: generated,
        key_consumed_bits: consumed,
        objective_j: objective_eval(records, &weights),
        carbon_g: carbon,
        secure_bits,
        type_i_outage_ticks: type_i.outage_ticks,
        type_i_unsafe_ticks: type_i.unsafe_ticks,
        latency_slo_violations: slo,
        shield_overrides: overrides,
    }
}
