//! Link-layer protocols: make-before-break satellite handover, hybrid
//! FSO/RF fallback, QKD turbo triggering and entanglement-swap scheduling.
//!
//! All state machines are pure step functions; a rejected event returns an
//! error and leaves the caller's state untouched.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::channel::{entanglement_ttl, memory_fidelity, QuantumMemorySpec, QBER_LIMIT};
use crate::error::{Error, Result};
use crate::netmodel::TimeVaryingGraph;
use crate::orbits::SPEED_OF_LIGHT_KM_S;
use crate::sdqn::{install_flow, FlowTable, FlowTableEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoverPhase {
    Idle,
    Predicted,
    PreEstablishing,
    BufferSync,
    StateTransferred,
    Switched,
    TornDown,
}

impl HandoverPhase {
    pub const ALL: [HandoverPhase; 7] = [
        HandoverPhase::Idle,
        HandoverPhase::Predicted,
        HandoverPhase::PreEstablishing,
        HandoverPhase::BufferSync,
        HandoverPhase::StateTransferred,
        HandoverPhase::Switched,
        HandoverPhase::TornDown,
    ];
}

/// Opaque session state copied to the incoming satellite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SessionCheckpoint {
    pub packets_sent: u64,
    pub iv_counter: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoverSession {
    pub flow_id: String,
    pub outgoing: String,
    pub incoming: Option<String>,
    pub phase: HandoverPhase,
    pub checkpoint: SessionCheckpoint,
    /// Key the incoming link must hold before the switch, bits.
    pub switch_threshold_bits: f64,
    /// Link currently carrying the flow.
    pub carrying: String,
    pub phase_times: Vec<(HandoverPhase, f64)>,
}

impl HandoverSession {
    pub fn new(flow_id: impl Into<String>, outgoing: impl Into<String>, switch_threshold_bits: f64) -> Self {
        let outgoing = outgoing.into();
        Self {
            flow_id: flow_id.into(),
            carrying: outgoing.clone(),
            outgoing,
            incoming: None,
            phase: HandoverPhase::Idle,
            checkpoint: SessionCheckpoint::default(),
            switch_threshold_bits,
            phase_times: vec![],
        }
    }

    pub fn entered(&self, phase: HandoverPhase) -> Option<f64> {
        self.phase_times.iter().rev().find(|(p, _)| *p == phase).map(|(_, t)| *t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MbbEvent {
    /// Handover horizon reached; `incoming` is the next link.
    Predict { t: f64, incoming: String },
    /// Incoming link acquired and generating key.
    PreEstablish { t: f64 },
    /// Incoming key store reported.
    SyncBuffers { t: f64, incoming_buffer_bits: f64 },
    /// Session state shipped over the inter-satellite link.
    TransferState { t: f64, isl_distance_km: f64, serialization_s: f64, checkpoint: SessionCheckpoint },
    /// Soft switch onto the incoming link.
    Switch { t: f64, incoming_buffer_bits: f64, entry: FlowTableEntry },
    TearDown { t: f64 },
    /// Incoming link lost.
    IncomingFailed { t: f64 },
}

impl MbbEvent {
    pub fn time(&self) -> f64 {
        match self {
            MbbEvent::Predict { t, .. }
            | MbbEvent::PreEstablish { t }
            | MbbEvent::SyncBuffers { t, .. }
            | MbbEvent::TransferState { t, .. }
            | MbbEvent::Switch { t, .. }
            | MbbEvent::TearDown { t }
            | MbbEvent::IncomingFailed { t } => *t,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            MbbEvent::Predict { .. } => "predict",
            MbbEvent::PreEstablish { .. } => "pre_establish",
            MbbEvent::SyncBuffers { .. } => "sync_buffers",
            MbbEvent::TransferState { .. } => "transfer_state",
            MbbEvent::Switch { .. } => "switch",
            MbbEvent::TearDown { .. } => "tear_down",
            MbbEvent::IncomingFailed { .. } => "incoming_failed",
        }
    }
}

/// Default serialization delay of the state transfer, s.
pub const STATE_TRANSFER_SERIALIZATION_S: f64 = 1e-4;

/// Advances a handover session. The switch installs the new flow entry
/// atomically; an incoming-link failure before the switch aborts to Idle
/// with the outgoing link still carrying the flow.
pub fn mbb_step(
    session: &HandoverSession,
    event: &MbbEvent,
    table: &mut FlowTable,
    graph: &TimeVaryingGraph,
) -> Result<HandoverSession> {
    use HandoverPhase::*;
    let reject = || Error::IllegalTransition { from: format!("{:?}", session.phase), to: event.name().into() };
    let mut s = session.clone();
    let enter = |s: &mut HandoverSession, p: HandoverPhase, t: f64| {
        s.phase = p;
        s.phase_times.push((p, t));
    };
    match (session.phase, event) {
        (Idle | TornDown, MbbEvent::Predict { t, incoming }) => {
            if *incoming == session.carrying {
                return Err(reject());
            }
            s.phase_times.clear();
            s.outgoing = session.carrying.clone();
            s.incoming = Some(incoming.clone());
            enter(&mut s, Predicted, *t);
        }
        (Predicted, MbbEvent::PreEstablish { t }) => enter(&mut s, PreEstablishing, *t),
        (PreEstablishing, MbbEvent::SyncBuffers { t, incoming_buffer_bits }) => {
            if *incoming_buffer_bits < session.switch_threshold_bits {
                return Err(reject());
            }
            enter(&mut s, BufferSync, *t);
        }
        (BufferSync, MbbEvent::TransferState { t, isl_distance_km, serialization_s, checkpoint }) => {
            s.checkpoint = *checkpoint;
            let delay = isl_distance_km.max(0.0) / SPEED_OF_LIGHT_KM_S + serialization_s.max(0.0);
            enter(&mut s, StateTransferred, t + delay);
        }
        (StateTransferred, MbbEvent::Switch { t, incoming_buffer_bits, entry }) => {
            if *incoming_buffer_bits < session.switch_threshold_bits
                || entry.flow_id != session.flow_id
                || session.entered(StateTransferred).is_some_and(|ts| *t < ts)
            {
                return Err(reject());
            }
            install_flow(table, entry.clone(), graph)?;
            s.carrying = session.incoming.clone().expect("incoming set when predicted");
            enter(&mut s, Switched, *t);
        }
        (Switched, MbbEvent::TearDown { t }) => enter(&mut s, TornDown, *t),
        (Predicted | PreEstablishing | BufferSync | StateTransferred, MbbEvent::IncomingFailed { t }) => {
            s.carrying = session.outgoing.clone();
            s.incoming = None;
            enter(&mut s, Idle, *t);
        }
        _ => return Err(reject()),
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FallbackMode {
    FsoOk,
    RfFallback,
    Failsafe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackState {
    pub link_id: String,
    pub mode: FallbackMode,
    pub entered_at: f64,
    pub buffered_key_at_entry: f64,
    /// Start of the current run of healthy FSO observations.
    pub healthy_since: Option<f64>,
}

impl FallbackState {
    pub fn new(link_id: impl Into<String>, t: f64) -> Self {
        Self { link_id: link_id.into(), mode: FallbackMode::FsoOk, entered_at: t, buffered_key_at_entry: 0.0, healthy_since: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkObservables {
    pub t: f64,
    pub qber: f64,
    pub beacon: bool,
    pub snr_db: f64,
    pub key_buffer_bits: f64,
    /// Type-I key demand of one Tier-2 tick, bits.
    pub tick_demand_bits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FallbackConfig {
    pub qber_limit: f64,
    /// SNR below which the FSO link is treated as failed, dB.
    pub snr_threshold_db: f64,
    pub hysteresis_db: f64,
    pub dwell_s: f64,
}

impl Default for FallbackConfig {
    fn default() -> Self {
        Self { qber_limit: QBER_LIMIT, snr_threshold_db: 10.0, hysteresis_db: 3.0, dwell_s: 1.0 }
    }
}

/// Advances the fallback state machine by one observation.
pub fn fallback_step(state: &FallbackState, obs: &LinkObservables, cfg: &FallbackConfig) -> FallbackState {
    use FallbackMode::*;
    let mut s = state.clone();
    let failed = !obs.beacon || obs.qber > cfg.qber_limit || obs.snr_db < cfg.snr_threshold_db;
    let healthy = obs.beacon && obs.qber <= cfg.qber_limit && obs.snr_db >= cfg.snr_threshold_db + cfg.hysteresis_db;
    let enter = |s: &mut FallbackState, m: FallbackMode| {
        s.mode = m;
        s.entered_at = obs.t;
        s.buffered_key_at_entry = obs.key_buffer_bits;
        s.healthy_since = None;
    };
    match state.mode {
        FsoOk => {
            if failed {
                enter(&mut s, RfFallback);
            }
        }
        RfFallback | Failsafe => {
            s.healthy_since = if healthy { Some(state.healthy_since.unwrap_or(obs.t)) } else { None };
            if s.healthy_since.is_some_and(|h| obs.t - h >= cfg.dwell_s) {
                enter(&mut s, FsoOk);
            } else if state.mode == RfFallback && obs.key_buffer_bits < obs.tick_demand_bits {
                enter(&mut s, Failsafe);
            }
        }
    }
    s
}

/// Debounced detector for key consumption outpacing generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurboTrigger {
    pub window_s: f64,
    /// Turbo clears once SKR exceeds consumption by this factor.
    pub margin: f64,
    pub active: bool,
    over_since: Option<f64>,
}

impl Default for TurboTrigger {
    fn default() -> Self {
        Self::new(1.0, 1.2)
    }
}

impl TurboTrigger {
    pub fn new(window_s: f64, margin: f64) -> Self {
        Self { window_s, margin, active: false, over_since: None }
    }

    /// Feeds one sample of measured rates; returns the turbo flag.
    pub fn update(&mut self, t: f64, consumption_bps: f64, skr_bps: f64) -> bool {
        if consumption_bps > skr_bps {
            let since = *self.over_since.get_or_insert(t);
            if t - since >= self.window_s - 1e-9 {
                self.active = true;
            }
        } else {
            self.over_since = None;
            if self.active && skr_bps > consumption_bps * self.margin {
                self.active = false;
            }
        }
        self.active
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntangledPair {
    pub pair_id: u64,
    pub link: String,
    pub created_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapSchedule {
    pub pair_a: EntangledPair,
    pub pair_b: EntangledPair,
    pub measurement_time: f64,
    /// Product of the two storage fidelities (heuristic).
    pub fidelity_estimate: f64,
    pub end_to_end: EntangledPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum SwapRejection {
    /// A pair has outlived the entanglement TTL.
    Ttl { age_s: f64, ttl_s: f64 },
    LowFidelity { estimate: f64, f_min: f64 },
}

/// Schedules the swap at the earliest time both pairs exist, not before
/// `t_now`.
pub fn schedule_swap(
    a: &EntangledPair,
    b: &EntangledPair,
    t_now: f64,
    mem: &QuantumMemorySpec,
    end_to_end_id: u64,
) -> Result<std::result::Result<SwapSchedule, SwapRejection>> {
    let ttl = entanglement_ttl(mem)?;
    let t = t_now.max(a.created_at).max(b.created_at);
    let (age_a, age_b) = (t - a.created_at, t - b.created_at);
    let oldest = age_a.max(age_b);
    if oldest > ttl {
        return Ok(Err(SwapRejection::Ttl { age_s: oldest, ttl_s: ttl }));
    }
    let estimate = memory_fidelity(mem, age_a)? * memory_fidelity(mem, age_b)?;
    if estimate < mem.f_min {
        return Ok(Err(SwapRejection::LowFidelity { estimate, f_min: mem.f_min }));
    }
    Ok(Ok(SwapSchedule {
        pair_a: a.clone(),
        pair_b: b.clone(),
        measurement_time: t,
        fidelity_estimate: estimate,
        end_to_end: EntangledPair { pair_id: end_to_end_id, link: format!("{}+{}", a.link, b.link), created_at: t },
    }))
}

/// Bounded store of link-level pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMemory {
    pub spec: QuantumMemorySpec,
    pairs: VecDeque<EntangledPair>,
    next_id: u64,
    pub swaps: u64,
    pub consumed_pairs: u64,
}

impl PairMemory {
    pub fn new(spec: QuantumMemorySpec) -> Self {
        Self { spec, pairs: VecDeque::new(), next_id: 0, swaps: 0, consumed_pairs: 0 }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stores a fresh pair; returns its id, or `None` when memory is full.
    pub fn store(&mut self, link: &str, t: f64) -> Option<u64> {
        if self.pairs.len() >= self.spec.capacity as usize {
            return None;
        }
        let id = self.next_id;
        self.next_id += 1;
        self.pairs.push_back(EntangledPair { pair_id: id, link: link.to_string(), created_at: t });
        Some(id)
    }

    /// Drops pairs older than the TTL; returns how many.
    pub fn expire(&mut self, t: f64) -> Result<usize> {
        let ttl = entanglement_ttl(&self.spec)?;
        let before = self.pairs.len();
        self.pairs.retain(|p| t - p.created_at <= ttl);
        Ok(before - self.pairs.len())
    }

    /// Swaps the oldest pair of `link_a` with the oldest of `link_b`. Both
    /// pairs leave memory whether or not the swap is accepted.
    pub fn swap_oldest(
        &mut self,
        link_a: &str,
        link_b: &str,
        t: f64,
    ) -> Result<Option<std::result::Result<SwapSchedule, SwapRejection>>> {
        let ia = self.pairs.iter().position(|p| p.link == link_a);
        let ib = self.pairs.iter().position(|p| p.link == link_b && Some(p.pair_id) != ia.map(|i| self.pairs[i].pair_id));
        let (Some(ia), Some(ib)) = (ia, ib) else { return Ok(None) };
        let (a, b) = (self.pairs[ia].clone(), self.pairs[ib].clone());
        let id = self.next_id;
        let out = schedule_swap(&a, &b, t, &self.spec, id)?;
        self.pairs.retain(|p| p.pair_id != a.pair_id && p.pair_id != b.pair_id);
        self.consumed_pairs += 2;
        if out.is_ok() {
            self.next_id += 1;
            self.swaps += 1;
        }
        Ok(Some(out))
    }
}
