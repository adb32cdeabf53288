//! Line-delimited JSON trace: one self-describing record per line.
//!
//! Tier-2 activity is folded into one aggregate record per category and
//! Tier-1 tick; discrete events (contacts, handover phases, fallback
//! transitions, outages, plans) are written as they happen.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::control_mpc::FlightPlan;
use crate::control_rl::{CurvePoint, RewardWeights};
use crate::error::{Error, Result};
use crate::netmodel::TrafficClass;
use crate::protocols::{FallbackMode, HandoverPhase};
use crate::sdqn::TelemetryRecord;

use super::config::ObjectiveWeights;
use super::metrics::MetricsSummary;

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Channel,
    Energy,
    Key,
    Flow,
    Handover,
    Fallback,
    Control,
    Violation,
}

/// Tier-2 flow accounting of one class over one Tier-1 tick. Counts are in
/// flow-ticks (one flow active for one Tier-2 tick).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassTick {
    pub active_ticks: u64,
    /// Ticks with the class key requirement met.
    pub keyed_ticks: u64,
    pub outage_ticks: u64,
    /// Type-I ticks scheduled onto a key-starved link.
    pub unsafe_ticks: u64,
    pub demand_bits: f64,
    pub secure_bits: f64,
    /// Sum of data-path latency over carried ticks, s.
    pub latency_sum_s: f64,
    pub carried_ticks: u64,
    pub max_latency_s: f64,
    pub slo_violation_ticks: u64,
}

impl ClassTick {
    pub fn merge(&mut self, o: &ClassTick) {
        self.active_ticks += o.active_ticks;
        self.keyed_ticks += o.keyed_ticks;
        self.outage_ticks += o.outage_ticks;
        self.unsafe_ticks += o.unsafe_ticks;
        self.demand_bits += o.demand_bits;
        self.secure_bits += o.secure_bits;
        self.latency_sum_s += o.latency_sum_s;
        self.carried_ticks += o.carried_ticks;
        self.max_latency_s = self.max_latency_s.max(o.max_latency_s);
        self.slo_violation_ticks += o.slo_violation_ticks;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ShieldCounts {
    pub pass: u64,
    pub masked: u64,
    pub classical: u64,
    pub failsafe: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Header {
        format_version: u32,
        name: String,
        controller: String,
        seed: u64,
        duration_s: f64,
        tier1_s: f64,
        tier2_s: f64,
        objective: ObjectiveWeights,
        reward: RewardWeights,
    },
    FlowTick {
        tick: u64,
        classes: BTreeMap<TrafficClass, ClassTick>,
    },
    KeyTick {
        tick: u64,
        generated_bits: f64,
        consumed_bits: f64,
        expired_bits: f64,
        stored_bits: BTreeMap<String, f64>,
    },
    EnergyTick {
        tick: u64,
        carbon_g: f64,
        ogs_carbon_g: f64,
        bulk_carbon_g: f64,
        sat_soc_percent: BTreeMap<String, f64>,
    },
    ChannelTick {
        tick: u64,
        /// Mean key rate per active downlink over the tick, bit/s.
        downlink_skr_bps: BTreeMap<String, f64>,
    },
    ControlTick {
        tick: u64,
        shield: ShieldCounts,
        rl_reward: f64,
    },
    ContactRise {
        sat_id: String,
        site_id: String,
    },
    ContactSet {
        sat_id: String,
        site_id: String,
    },
    CloudChange {
        site_id: String,
        cloud: bool,
    },
    FlowStart {
        flow_id: String,
        class: TrafficClass,
        path: Vec<String>,
        candidates: usize,
    },
    FlowEnd {
        flow_id: String,
    },
    FlowRejected {
        flow_id: String,
        reason: String,
    },
    BulkDeferred {
        flow_id: String,
        site_id: Option<String>,
        run_at_s: f64,
        forecast_grams: f64,
    },
    HandoverPhase {
        session: String,
        site_id: String,
        phase: HandoverPhase,
    },
    HandoverDone {
        session: String,
        site_id: String,
        outgoing: String,
        incoming: String,
        make_before_break: bool,
        /// Data-path latency step at the switch, ms.
        jitter_ms: f64,
        downtime_s: f64,
    },
    HandoverAborted {
        session: String,
        site_id: String,
        reason: String,
    },
    Fallback {
        site_id: String,
        from: FallbackMode,
        to: FallbackMode,
    },
    FlightPlan {
        plan: FlightPlan,
    },
    LearningCurve {
        points: Vec<CurvePoint>,
    },
    Telemetry {
        records: Vec<TelemetryRecord>,
    },
    KeyOutageStart {
        flow_id: String,
        site_id: Option<String>,
    },
    KeyOutageEnd {
        flow_id: String,
    },
    UnsafeSchedule {
        flow_id: String,
        link: String,
    },
    Summary {
        metrics: MetricsSummary,
    },
}

impl Payload {
    pub fn category(&self) -> Category {
        use Payload::*;
        match self {
            Header { .. } | ControlTick { .. } | FlightPlan { .. } | LearningCurve { .. } | Telemetry { .. }
            | Summary { .. } => Category::Control,
            FlowTick { .. } | FlowStart { .. } | FlowEnd { .. } | FlowRejected { .. } | BulkDeferred { .. } => {
                Category::Flow
            }
            KeyTick { .. } => Category::Key,
            EnergyTick { .. } => Category::Energy,
            ChannelTick { .. } | ContactRise { .. } | ContactSet { .. } | CloudChange { .. } => Category::Channel,
            HandoverPhase { .. } | HandoverDone { .. } | HandoverAborted { .. } => Category::Handover,
            Fallback { .. } => Category::Fallback,
            KeyOutageStart { .. } | KeyOutageEnd { .. } | UnsafeSchedule { .. } => Category::Violation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub category: Category,
    pub payload: Payload,
}

impl TraceRecord {
    pub fn new(t: f64, payload: Payload) -> Self {
        Self { t, category: payload.category(), payload }
    }
}

/// In-memory trace that enforces non-decreasing time.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, t: f64, payload: Payload) {
        debug_assert!(self.records.last().is_none_or(|r| r.t <= t), "trace time went backwards at {t}");
        self.records.push(TraceRecord::new(t, payload));
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TraceRecord> {
        self.records
    }
}

pub fn write_trace<W: Write>(records: &[TraceRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Io(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn trace_to_bytes(records: &[TraceRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_trace(records, &mut buf)?;
    Ok(buf)
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut out: Vec<TraceRecord> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("trace line {}: {e}", i + 1)))?;
        if rec.category != rec.payload.category() {
            return Err(Error::Parse(format!("trace line {}: category does not match payload", i + 1)));
        }
        if out.last().is_some_and(|p| p.t > rec.t) {
            return Err(Error::Parse(format!("trace line {}: time goes backwards", i + 1)));
        }
        out.push(rec);
    }
    match out.first().map(|r| &r.payload) {
        Some(Payload::Header { format_version, .. }) if *format_version == TRACE_FORMAT_VERSION => Ok(out),
        Some(Payload::Header { format_version, .. }) => {
            Err(Error::Parse(format!("trace format_version {format_version} unsupported")))
        }
        _ => Err(Error::Parse("trace has no header record".into())),
    }
}
