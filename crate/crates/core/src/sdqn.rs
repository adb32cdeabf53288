//! Controller data-plane abstraction: telemetry records, intent translation,
//! flow tables and the key-management ledger.
//!
//! Telemetry field names are kept exactly as the YANG extension names them
//! (hyphenated). Key material is accounted in 256-bit blocks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::netmodel::{NodeState, SecurityMode, TimeVaryingGraph, TrafficClass};

pub const TELEMETRY_FORMAT_VERSION: u32 = 1;
/// Key block size, bits.
pub const KEY_BLOCK_BITS: u64 = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub format_version: u32,
    pub node_id: String,
    pub t: f64,
    #[serde(rename = "quantum-link-fidelity")]
    pub quantum_link_fidelity: BTreeMap<String, f64>,
    #[serde(rename = "key-buffer-fill-level")]
    pub key_buffer_fill_level: BTreeMap<String, u64>,
    #[serde(rename = "turbulence-forecast-index")]
    pub turbulence_forecast_index: f64,
    #[serde(rename = "carbon-intensity-source")]
    pub carbon_intensity_source: f64,
    #[serde(rename = "battery-state-of-charge")]
    pub battery_state_of_charge: f64,
}

/// Per-node observables that are not part of [`NodeState`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeObservables {
    pub link_fidelity: BTreeMap<String, f64>,
    pub turbulence_forecast_index: f64,
    pub carbon_intensity: f64,
}

/// One record per node, values copied from the inputs.
pub fn collect_telemetry(
    nodes: &[NodeState],
    observables: &BTreeMap<String, NodeObservables>,
    t: f64,
) -> Vec<TelemetryRecord> {
    let empty = NodeObservables::default();
    nodes
        .iter()
        .map(|n| {
            let obs = observables.get(&n.node_id).unwrap_or(&empty);
            TelemetryRecord {
                format_version: TELEMETRY_FORMAT_VERSION,
                node_id: n.node_id.clone(),
                t,
                quantum_link_fidelity: obs.link_fidelity.clone(),
                key_buffer_fill_level: n.key_buffers.clone(),
                turbulence_forecast_index: obs.turbulence_forecast_index,
                carbon_intensity_source: obs.carbon_intensity,
                battery_state_of_charge: n.soc_percent(),
            }
        })
        .collect()
}

/// Writes records as line-delimited JSON.
pub fn write_telemetry<W: Write>(records: &[TelemetryRecord], mut out: W) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_telemetry<R: BufRead>(input: R) -> Result<Vec<TelemetryRecord>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            let l = l?;
            serde_json::from_str(&l).map_err(|e| Error::Parse(format!("telemetry: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub intent_id: String,
    pub src: String,
    pub dst: String,
    pub class: TrafficClass,
    pub security_mode: SecurityMode,
    #[serde(default)]
    pub priority: u8,
    #[serde(default)]
    pub residency_forbidden_regions: BTreeSet<String>,
}

/// Candidate paths plus the constraints handed to the controllers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub intent_id: String,
    pub class: TrafficClass,
    pub candidate_paths: Vec<Vec<String>>,
    /// One-time-pad key must be available on every tick (Type-I).
    pub otp_key_continuity: bool,
    /// The flow consumes no quantum key.
    pub zero_key: bool,
    pub pqc: bool,
    pub latency_target_s: f64,
}

/// Maximum number of candidate paths kept per intent.
pub const MAX_CANDIDATE_PATHS: usize = 4;

/// Translates an intent into candidate paths that avoid every node located in
/// a forbidden region. Paths are loop-free, ordered by latency then node ids.
pub fn translate_intent(
    intent: &Intent,
    graph: &TimeVaryingGraph,
    node_regions: &BTreeMap<String, String>,
) -> Result<Policy> {
    for node in [&intent.src, &intent.dst] {
        if !graph.has_node(node) {
            return Err(Error::InfeasibleIntent(format!("{}: unknown node {node}", intent.intent_id)));
        }
    }
    let spec = intent.class.spec();
    if intent.security_mode.strength() < spec.security_mode.strength() {
        return Err(Error::InfeasibleIntent(format!(
            "{}: {:?} is weaker than the {:?} minimum for {}",
            intent.intent_id,
            intent.security_mode,
            spec.security_mode,
            intent.class.label()
        )));
    }
    let forbidden = |n: &str| {
        node_regions
            .get(n)
            .is_some_and(|r| intent.residency_forbidden_regions.contains(r))
    };
    let base = Policy {
        intent_id: intent.intent_id.clone(),
        class: intent.class,
        candidate_paths: vec![],
        otp_key_continuity: spec.security_mode == SecurityMode::Otp,
        zero_key: intent.class == TrafficClass::TypeIV,
        pqc: intent.security_mode == SecurityMode::Pqc,
        latency_target_s: spec.latency_target_s,
    };
    if forbidden(&intent.src) || forbidden(&intent.dst) {
        return Err(Error::InfeasibleIntent(format!(
            "{}: endpoint in a forbidden region",
            intent.intent_id
        )));
    }
    if intent.src == intent.dst {
        return Ok(Policy { candidate_paths: vec![vec![intent.src.clone()]], ..base });
    }
    let mut found: Vec<(f64, Vec<String>)> = Vec::new();
    let mut stack = vec![intent.src.clone()];
    enumerate_paths(graph, &intent.dst, &forbidden, &mut stack, 0.0, &mut found);
    if found.is_empty() {
        return Err(Error::InfeasibleIntent(format!(
            "{}: no residency-legal path {} -> {}",
            intent.intent_id, intent.src, intent.dst
        )));
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    found.truncate(MAX_CANDIDATE_PATHS);
    Ok(Policy { candidate_paths: found.into_iter().map(|(_, p)| p).collect(), ..base })
}

const MAX_PATH_HOPS: usize = 8;

fn enumerate_paths<F: Fn(&str) -> bool>(
    graph: &TimeVaryingGraph,
    dst: &str,
    forbidden: &F,
    stack: &mut Vec<String>,
    latency: f64,
    out: &mut Vec<(f64, Vec<String>)>,
) {
    let here = stack.last().expect("non-empty").clone();
    if here == dst {
        out.push((latency, stack.clone()));
        return;
    }
    if stack.len() > MAX_PATH_HOPS {
        return;
    }
    let mut next: Vec<(String, f64)> = graph
        .incident(&here)
        .filter_map(|e| e.other(&here).map(|n| (n.to_string(), e.latency_s)))
        .collect();
    next.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    next.dedup_by(|a, b| a.0 == b.0);
    for (n, l) in next {
        if stack.contains(&n) || forbidden(&n) {
            continue;
        }
        stack.push(n);
        enumerate_paths(graph, dst, forbidden, stack, latency + l, out);
        stack.pop();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyBlockState {
    Generated,
    Stored,
    Consumed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmsLedgerEntry {
    pub key_block_id: u64,
    pub link: String,
    pub bits: u64,
    pub state: KeyBlockState,
    pub t_generated: f64,
    pub t_final: Option<f64>,
}

/// Applies a ledger transition. Legal moves are generated → stored and
/// stored → consumed | expired, with non-decreasing timestamps.
pub fn kml_transition(entry: &KmsLedgerEntry, to: KeyBlockState, t: f64) -> Result<KmsLedgerEntry> {
    use KeyBlockState::*;
    let legal = matches!((entry.state, to), (Generated, Stored) | (Stored, Consumed) | (Stored, Expired));
    let last = entry.t_final.unwrap_or(entry.t_generated);
    if !legal || t < last {
        return Err(Error::IllegalTransition {
            from: format!("{:?}", entry.state),
            to: format!("{to:?}"),
        });
    }
    let mut next = entry.clone();
    next.state = to;
    if matches!(to, Consumed | Expired) {
        next.t_final = Some(t);
    }
    Ok(next)
}

/// consumed bits / generated bits over a set of ledger entries.
pub fn key_utilization(entries: &[KmsLedgerEntry]) -> f64 {
    let generated: u64 = entries.iter().map(|e| e.bits).sum();
    let consumed: u64 = entries
        .iter()
        .filter(|e| e.state == KeyBlockState::Consumed)
        .map(|e| e.bits)
        .sum();
    if generated == 0 {
        0.0
    } else {
        consumed as f64 / generated as f64
    }
}

/// Bit totals per terminal state for one key store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub generated_bits: u64,
    pub consumed_bits: u64,
    pub expired_bits: u64,
}

/// FIFO key store for one link. Fractional generated bits accumulate until a
/// full block exists; blocks are consumed oldest first, and a block is marked
/// consumed when its last bit is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyStore {
    pub link: String,
    /// Shelf life of stored blocks, s; `None` keeps them forever.
    pub max_age_s: Option<f64>,
    pending_bits: f64,
    next_block_id: u64,
    /// (block id, generation time) of unopened stored blocks.
    stored: VecDeque<(u64, f64)>,
    /// Remaining bits of the partially consumed block.
    open_remaining: u64,
    totals: LedgerTotals,
    /// Bits of fully drained blocks, kept separately from partial use.
    consumed_blocks: u64,
}

impl KeyStore {
    pub fn new(link: impl Into<String>, max_age_s: Option<f64>) -> Self {
        Self {
            link: link.into(),
            max_age_s,
            pending_bits: 0.0,
            next_block_id: 0,
            stored: VecDeque::new(),
            open_remaining: 0,
            totals: LedgerTotals::default(),
            consumed_blocks: 0,
        }
    }

    /// Adds `bits` of distilled key at time `t`; returns new whole blocks.
    pub fn generate(&mut self, bits: f64, t: f64) -> u64 {
        if !(bits > 0.0) {
            return 0;
        }
        self.pending_bits += bits;
        let blocks = (self.pending_bits / KEY_BLOCK_BITS as f64).floor() as u64;
        self.pending_bits -= (blocks * KEY_BLOCK_BITS) as f64;
        for _ in 0..blocks {
            self.stored.push_back((self.next_block_id, t));
            self.next_block_id += 1;
        }
        self.totals.generated_bits += blocks * KEY_BLOCK_BITS;
        blocks
    }

    /// Pre-loads whole blocks (initial key stock).
    pub fn preload(&mut self, bits: u64, t: f64) {
        self.generate(bits as f64, t);
    }

    pub fn available_bits(&self) -> u64 {
        self.stored.len() as u64 * KEY_BLOCK_BITS + self.open_remaining
    }

    /// Consumes `bits` all-or-nothing; returns false (and consumes nothing)
    /// when the store holds fewer bits.
    pub fn consume(&mut self, bits: u64) -> bool {
        if bits > self.available_bits() {
            return false;
        }
        let mut need = bits;
        while need > 0 {
            if self.open_remaining == 0 {
                self.stored.pop_front().expect("availability checked");
                self.open_remaining = KEY_BLOCK_BITS;
            }
            let take = need.min(self.open_remaining);
            self.open_remaining -= take;
            need -= take;
            if self.open_remaining == 0 {
                self.consumed_blocks += 1;
            }
        }
        self.totals.consumed_bits += bits;
        true
    }

    /// Expires unopened blocks older than the shelf life; returns bits.
    pub fn expire(&mut self, t: f64) -> u64 {
        let Some(age) = self.max_age_s else { return 0 };
        let mut bits = 0;
        while let Some(&(_, tg)) = self.stored.front() {
            if t - tg <= age {
                break;
            }
            self.stored.pop_front();
            bits += KEY_BLOCK_BITS;
        }
        self.totals.expired_bits += bits;
        bits
    }

    pub fn totals(&self) -> LedgerTotals {
        self.totals
    }

    /// Σ terminal-state bits + still-stored bits; equals generated bits.
    pub fn conservation_residual(&self) -> i64 {
        self.totals.generated_bits as i64
            - self.totals.consumed_bits as i64
            - self.totals.expired_bits as i64
            - self.available_bits() as i64
    }

    pub fn utilization(&self) -> f64 {
        if self.totals.generated_bits == 0 {
            0.0
        } else {
            self.totals.consumed_bits as f64 / self.totals.generated_bits as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTableEntry {
    pub flow_id: String,
    pub path: Vec<String>,
    /// Key store feeding this flow, if keyed.
    pub key_source: Option<String>,
    pub active: bool,
    pub installed_at: f64,
}

/// Flow table with at most one active entry per flow. Only the active entry
/// and the one it replaced are retained.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowTable {
    entries: BTreeMap<String, (FlowTableEntry, Option<FlowTableEntry>)>,
}

impl FlowTable {
    pub fn active(&self, flow_id: &str) -> Option<&FlowTableEntry> {
        self.entries.get(flow_id).map(|(a, _)| a).filter(|a| a.active)
    }

    pub fn previous(&self, flow_id: &str) -> Option<&FlowTableEntry> {
        self.entries.get(flow_id).and_then(|(_, p)| p.as_ref())
    }

    pub fn active_count(&self, flow_id: &str) -> usize {
        self.entries.get(flow_id).map_or(0, |(a, p)| {
            a.active as usize + p.as_ref().map_or(0, |p| p.active as usize)
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Deactivates a flow (completed or halted).
    pub fn remove(&mut self, flow_id: &str) {
        self.entries.remove(flow_id);
    }

    /// SHA-256 over the canonical serialization.
    pub fn state_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("serializable");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Checks that consecutive path nodes are adjacent in `graph`.
pub fn validate_path(path: &[String], graph: &TimeVaryingGraph) -> Result<()> {
    if path.is_empty() {
        return Err(Error::InvalidPath("empty path".into()));
    }
    for n in path {
        if !graph.has_node(n) {
            return Err(Error::InvalidPath(format!("unknown node {n}")));
        }
    }
    for w in path.windows(2) {
        if graph.edge_between(&w[0], &w[1]).is_none() {
            return Err(Error::InvalidPath(format!("no edge {} -> {}", w[0], w[1])));
        }
    }
    Ok(())
}

/// Atomically installs `entry` as the active entry of its flow. The previous
/// active entry is deactivated in the same step; on error the table is left
/// untouched.
pub fn install_flow(table: &mut FlowTable, entry: FlowTableEntry, graph: &TimeVaryingGraph) -> Result<()> {
    validate_path(&entry.path, graph)?;
    let entry = FlowTableEntry { active: true, ..entry };
    let previous = table.entries.remove(&entry.flow_id).map(|(mut old, _)| {
        old.active = false;
        old
    });
    table.entries.insert(entry.flow_id.clone(), (entry, previous));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{EdgeKind, EdgeState, EdgeStatus, NodeKind};

    fn graph(edges: &[(&str, &str)]) -> TimeVaryingGraph {
        let mut nodes = BTreeSet::new();
        let edges = edges
            .iter()
            .map(|(a, b)| {
                nodes.insert(a.to_string());
                nodes.insert(b.to_string());
                EdgeState {
                    edge_id: format!("{a}-{b}"),
                    kind: EdgeKind::Fiber,
                    a: a.to_string(),
                    b: b.to_string(),
                    classical_capacity_bps: 1e9,
                    latency_s: 1e-4,
                    current_eta: 1.0,
                    current_skr_bps: 0.0,
                    status: EdgeStatus::Up,
                    channel: None,
                }
            })
            .collect();
        TimeVaryingGraph { t: 0.0, nodes: nodes.into_iter().collect(), edges }
    }

    fn node(id: &str) -> NodeState {
        NodeState {
            battery_capacity_wh: 100.0,
            battery_soc_wh: 100.0,
            ..NodeState::grid(id, NodeKind::Ogs, "r1")
        }
    }

    #[test]
    fn telemetry_copies_values() {
        let mut empty = node("ogs-1");
        empty.key_buffers.insert("space".into(), 0);
        let recs = collect_telemetry(&[empty], &BTreeMap::new(), 5.0);
        assert_eq!(recs[0].battery_state_of_charge, 100.0);
        assert_eq!(recs[0].key_buffer_fill_level["space"], 0);
    }

    #[test]
    fn telemetry_round_trip_is_exact() {
        let mut n = node("ogs-1");
        n.key_buffers.insert("space".into(), 123_456_789);
        n.battery_soc_wh = 33.333333333333336;
        let mut obs = BTreeMap::new();
        obs.insert(
            "ogs-1".to_string(),
            NodeObservables {
                link_fidelity: [("fso:ogs-1:sat-0-0".to_string(), 0.987654321)].into(),
                turbulence_forecast_index: 0.1234567890123,
                carbon_intensity: 287.5,
            },
        );
        let recs = collect_telemetry(&[n], &obs, 1.0 / 3.0);
        let mut buf = Vec::new();
        write_telemetry(&recs, &mut buf).unwrap();
        let back = read_telemetry(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
        let line = String::from_utf8(buf).unwrap();
        for name in [
            "quantum-link-fidelity",
            "key-buffer-fill-level",
            "turbulence-forecast-index",
            "carbon-intensity-source",
            "battery-state-of-charge",
        ] {
            assert!(line.contains(&format!("\"{name}\"")), "{name}");
        }
    }

    fn intent(src: &str, dst: &str, class: TrafficClass) -> Intent {
        Intent {
            intent_id: "i1".into(),
            src: src.into(),
            dst: dst.into(),
            class,
            security_mode: class.spec().security_mode,
            priority: 0,
            residency_forbidden_regions: BTreeSet::new(),
        }
    }

    #[test]
    fn intent_translation_cases() {
        let g = graph(&[("a", "b"), ("b", "c"), ("c", "d")]);
        let regions: BTreeMap<String, String> = [("a", "eu"), ("b", "eu"), ("c", "us"), ("d", "eu")]
            .iter()
            .map(|(n, r)| (n.to_string(), r.to_string()))
            .collect();
        let same = translate_intent(&intent("a", "a", TrafficClass::TypeI), &g, &regions).unwrap();
        assert_eq!(same.candidate_paths, vec![vec!["a".to_string()]]);
        assert!(same.otp_key_continuity);
        let bulk = translate_intent(&intent("a", "d", TrafficClass::TypeIV), &g, &regions).unwrap();
        assert!(bulk.zero_key && bulk.pqc && !bulk.otp_key_continuity);
        let mut blocked = intent("a", "d", TrafficClass::TypeII);
        blocked.residency_forbidden_regions.insert("us".into());
        assert!(matches!(translate_intent(&blocked, &g, &regions), Err(Error::InfeasibleIntent(_))));
        let mut weak = intent("a", "d", TrafficClass::TypeI);
        weak.security_mode = SecurityMode::Aes128Batch;
        assert!(translate_intent(&weak, &g, &regions).is_err());
    }

    #[test]
    fn candidate_paths_avoid_forbidden_nodes() {
        let g = graph(&[("a", "b"), ("b", "d"), ("a", "c"), ("c", "d")]);
        let regions: BTreeMap<String, String> =
            [("b", "x")].iter().map(|(n, r)| (n.to_string(), r.to_string())).collect();
        let mut i = intent("a", "d", TrafficClass::TypeII);
        i.residency_forbidden_regions.insert("x".into());
        let p = translate_intent(&i, &g, &regions).unwrap();
        assert_eq!(p.candidate_paths, vec![vec!["a", "c", "d"]]);
    }

    fn entry(id: u64, state: KeyBlockState) -> KmsLedgerEntry {
        KmsLedgerEntry { key_block_id: id, link: "l".into(), bits: 256, state, t_generated: 0.0, t_final: None }
    }

    #[test]
    fn ledger_state_machine() {
        use KeyBlockState::*;
        let e = entry(0, Generated);
        let s = kml_transition(&e, Stored, 1.0).unwrap();
        let c = kml_transition(&s, Consumed, 2.0).unwrap();
        assert_eq!(c.t_final, Some(2.0));
        assert!(kml_transition(&c, Stored, 3.0).is_err());
        assert!(kml_transition(&e, Consumed, 1.0).is_err());
        let x = kml_transition(&s, Expired, 5.0).unwrap();
        assert!(kml_transition(&x, Consumed, 6.0).is_err());
        let before = KmsLedgerEntry { t_final: Some(4.0), ..kml_transition(&s, Expired, 4.0).unwrap() };
        assert!(kml_transition(&KmsLedgerEntry { state: Stored, ..before }, Consumed, 3.0).is_err());
    }

    #[test]
    fn five_block_toy_utilization() {
        use KeyBlockState::*;
        let mut ledger: Vec<KmsLedgerEntry> = (0..5).map(|i| entry(i, Generated)).collect();
        for e in ledger.iter_mut() {
            *e = kml_transition(e, Stored, 1.0).unwrap();
        }
        for i in [0, 2, 3] {
            ledger[i] = kml_transition(&ledger[i], Consumed, 2.0).unwrap();
        }
        ledger[1] = kml_transition(&ledger[1], Expired, 3.0).unwrap();
        // 3 of 5 blocks consumed
        assert!((key_utilization(&ledger) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn key_store_accounting() {
        let mut s = KeyStore::new("ogs-1~space", Some(100.0));
        assert_eq!(s.generate(1000.0, 0.0), 3);
        assert_eq!(s.available_bits(), 768);
        assert!(s.consume(300));
        assert_eq!(s.available_bits(), 468);
        assert!(!s.consume(469));
        assert_eq!(s.available_bits(), 468);
        s.generate(100.0, 50.0);
        assert_eq!(s.available_bits(), 724);
        // the only unopened block was generated at t = 0
        assert_eq!(s.expire(150.0), 256);
        assert_eq!(s.conservation_residual(), 0);
        let t = s.totals();
        assert_eq!((t.generated_bits, t.consumed_bits, t.expired_bits), (1024, 300, 256));
        assert!((s.utilization() - 300.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn install_flow_is_atomic() {
        let g = graph(&[("a", "b"), ("b", "c"), ("a", "c")]);
        let mut table = FlowTable::default();
        let e1 = FlowTableEntry {
            flow_id: "f".into(),
            path: vec!["a".into(), "b".into(), "c".into()],
            key_source: None,
            active: true,
            installed_at: 1.0,
        };
        install_flow(&mut table, e1.clone(), &g).unwrap();
        assert_eq!(table.active_count("f"), 1);
        let e2 = FlowTableEntry { path: vec!["a".into(), "c".into()], installed_at: 2.0, ..e1.clone() };
        install_flow(&mut table, e2, &g).unwrap();
        assert_eq!(table.active_count("f"), 1);
        assert_eq!(table.active("f").unwrap().path, ["a", "c"]);
        let prev = table.previous("f").unwrap();
        assert!(!prev.active);
        assert_eq!(prev.path, ["a", "b", "c"]);
        let hash = table.state_hash();
        let bad = FlowTableEntry { path: vec!["a".into(), "z".into()], installed_at: 3.0, ..e1 };
        assert!(install_flow(&mut table, bad, &g).is_err());
        assert_eq!(table.state_hash(), hash);
    }
}
