//! Time-varying network graph, node resources, traffic classes and demand,
//! and carbon accounting.
//!
//! Power × carbon intensity gives a rate (gCO₂/h); costs here are multiplied
//! by the step length so that they come out in grams.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::channel::{
    rf_fallback_capacity, sample_fso_link, ChannelSample, FsoTerminal, QkdLinkModel,
    RfLinkModel, RfWeather, SiteConditions,
};
use crate::error::{Error, Result};
use crate::orbits::{elevation_of, slant_range_km, GroundSite, SatelliteState, SiteKind};
use crate::orbits::{propagation_delay, SPEED_OF_LIGHT_KM_S};

/// Group index of standard single-mode fiber.
pub const FIBER_GROUP_INDEX: f64 = 1.468;
/// Joules per kWh, as W·s per kWh.
pub const WS_PER_KWH: f64 = 3.6e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Industrial,
    Ogs,
    Satellite,
    Haps,
}

impl From<SiteKind> for NodeKind {
    fn from(kind: SiteKind) -> Self {
        match kind {
            SiteKind::Industrial => NodeKind::Industrial,
            SiteKind::Ogs | SiteKind::HapsAnchor => NodeKind::Ogs,
            SiteKind::Haps => NodeKind::Haps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub node_id: String,
    pub kind: NodeKind,
    pub battery_soc_wh: f64,
    pub battery_capacity_wh: f64,
    pub battery_reserve_wh: f64,
    pub solar_input_w: f64,
    pub load_w: f64,
    pub memory_slots_used: u32,
    pub memory_capacity: u32,
    pub carbon_region_id: String,
    /// Stored key per peer, bits.
    pub key_buffers: BTreeMap<String, u64>,
}

impl NodeState {
    /// Grid-powered node without a battery model.
    pub fn grid(node_id: impl Into<String>, kind: NodeKind, region: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            kind,
            battery_soc_wh: 0.0,
            battery_capacity_wh: 0.0,
            battery_reserve_wh: 0.0,
            solar_input_w: 0.0,
            load_w: 0.0,
            memory_slots_used: 0,
            memory_capacity: 0,
            carbon_region_id: region.into(),
            key_buffers: BTreeMap::new(),
        }
    }

    pub fn soc_percent(&self) -> f64 {
        if self.battery_capacity_wh > 0.0 {
            100.0 * self.battery_soc_wh / self.battery_capacity_wh
        } else {
            100.0
        }
    }
}

/// Result of one battery integration step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryStep {
    pub node: NodeState,
    /// The committed state of charge fell below the reserve.
    pub reserve_violation: bool,
}

/// Integrates `(solar − load)` over `dt_s` and clamps to `[0, capacity]`.
pub fn battery_step(node: &NodeState, dt_s: f64) -> Result<BatteryStep> {
    if !(dt_s > 0.0) {
        return Err(Error::param("dt_s", "must be positive"));
    }
    let mut next = node.clone();
    let delta_wh = (node.solar_input_w - node.load_w) * dt_s / 3600.0;
    next.battery_soc_wh = (node.battery_soc_wh + delta_wh).clamp(0.0, node.battery_capacity_wh);
    let reserve_violation = next.battery_soc_wh < node.battery_reserve_wh;
    Ok(BatteryStep { node: next, reserve_violation })
}

/// Result of one key-buffer update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyStep {
    pub buffer: u64,
    pub consumed: u64,
    pub key_outage: bool,
}

/// `buffer + generated − consumed − expired`. A consumption request larger
/// than what remains after generation and expiry is refused whole and flagged
/// as a key outage.
pub fn key_buffer_step(buffer: u64, generated: u64, requested: u64, expired: u64) -> KeyStep {
    let available = (buffer + generated).saturating_sub(expired);
    if requested > available {
        KeyStep { buffer: available, consumed: 0, key_outage: true }
    } else {
        KeyStep { buffer: available - requested, consumed: requested, key_outage: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Fiber,
    FsoGroundSat,
    Oisl,
    Rf,
    QuantumCoexist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeStatus {
    Up,
    Degraded,
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeState {
    pub edge_id: String,
    pub kind: EdgeKind,
    pub a: String,
    pub b: String,
    pub classical_capacity_bps: f64,
    pub latency_s: f64,
    pub current_eta: f64,
    pub current_skr_bps: f64,
    pub status: EdgeStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel: Option<ChannelSample>,
}

impl EdgeState {
    pub fn other(&self, node: &str) -> Option<&str> {
        if self.a == node {
            Some(&self.b)
        } else if self.b == node {
            Some(&self.a)
        } else {
            None
        }
    }

    pub fn is_quantum(&self) -> bool {
        matches!(self.kind, EdgeKind::FsoGroundSat | EdgeKind::QuantumCoexist | EdgeKind::Oisl)
    }
}

/// Static fiber span between two ground nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberLink {
    pub a: String,
    pub b: String,
    pub length_km: f64,
    #[serde(default = "default_fiber_capacity")]
    pub capacity_bps: f64,
    /// Key rate of a coexisting QKD channel on this span, 0 if none.
    #[serde(default)]
    pub qkd_skr_bps: f64,
}

fn default_fiber_capacity() -> f64 {
    10e9
}

impl FiberLink {
    pub fn latency_s(&self) -> f64 {
        self.length_km * FIBER_GROUP_INDEX / SPEED_OF_LIGHT_KM_S
    }

    pub fn edge_id(&self) -> String {
        let (x, y) = ordered(&self.a, &self.b);
        format!("fiber:{x}:{y}")
    }
}

fn ordered<'a>(a: &'a str, b: &'a str) -> (&'a str, &'a str) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

pub fn fso_edge_id(site: &str, sat: &str) -> String {
    format!("fso:{site}:{sat}")
}

pub fn rf_edge_id(site: &str, sat: &str) -> String {
    format!("rf:{site}:{sat}")
}

/// Static topology: ground sites and fiber spans.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Topology {
    pub sites: Vec<GroundSite>,
    pub fiber: Vec<FiberLink>,
}

/// Per-site weather at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteWeather {
    pub conditions: SiteConditions,
    pub rf: RfWeather,
}

/// Radio and optical link models shared by every space edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModels<'a> {
    pub terminal: &'a FsoTerminal,
    pub qkd: &'a QkdLinkModel,
    pub rf: &'a RfLinkModel,
}

/// Network graph G(t) = (V, E(t)).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeVaryingGraph {
    pub t: f64,
    pub nodes: Vec<String>,
    pub edges: Vec<EdgeState>,
}

impl TimeVaryingGraph {
    pub fn edge(&self, edge_id: &str) -> Option<&EdgeState> {
        self.edges.iter().find(|e| e.edge_id == edge_id)
    }

    pub fn has_node(&self, node: &str) -> bool {
        self.nodes.iter().any(|n| n == node)
    }

    /// Edges incident on `node`, in edge order.
    pub fn incident<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a EdgeState> + 'a {
        self.edges
            .iter()
            .filter(move |e| e.status != EdgeStatus::Down && (e.a == node || e.b == node))
    }

    /// Cheapest usable edge between two adjacent nodes.
    pub fn edge_between<'a>(&'a self, a: &'a str, b: &str) -> Option<&'a EdgeState> {
        self.incident(a)
            .filter(|e| e.other(a) == Some(b))
            .min_by(|x, y| x.latency_s.total_cmp(&y.latency_s).then(x.edge_id.cmp(&y.edge_id)))
    }

    /// Sum of edge latencies along a node path; `None` if a hop is missing.
    pub fn path_latency(&self, path: &[String]) -> Option<f64> {
        path.windows(2)
            .map(|w| self.edge_between(&w[0], &w[1]).map(|e| e.latency_s))
            .sum()
    }
}

/// Builds the graph at `t`: fiber spans always, an FSO edge for every
/// (OGS/HAPS, satellite) pair above the mask with a clear line of sight and an
/// RF edge for every OGS pair above the mask. Every FSO edge carries a fresh
/// channel sample.
pub fn snapshot<R: Rng + ?Sized, W: Fn(&GroundSite) -> SiteWeather>(
    t: f64,
    topology: &Topology,
    sats: &[SatelliteState],
    weather: W,
    models: LinkModels<'_>,
    rng: &mut R,
) -> Result<TimeVaryingGraph> {
    let mut nodes: Vec<String> = topology.sites.iter().map(|s| s.site_id.clone()).collect();
    nodes.extend(sats.iter().map(|s| s.sat_id.clone()));
    let mut edges = Vec::new();
    for f in &topology.fiber {
        let coexist = f.qkd_skr_bps > 0.0;
        edges.push(EdgeState {
            edge_id: f.edge_id(),
            kind: if coexist { EdgeKind::QuantumCoexist } else { EdgeKind::Fiber },
            a: f.a.clone(),
            b: f.b.clone(),
            classical_capacity_bps: f.capacity_bps,
            latency_s: f.latency_s(),
            current_eta: 1.0,
            current_skr_bps: f.qkd_skr_bps,
            status: EdgeStatus::Up,
            channel: None,
        });
    }
    for site in &topology.sites {
        if !matches!(site.kind, SiteKind::Ogs | SiteKind::HapsAnchor | SiteKind::Haps) {
            continue;
        }
        let wx = weather(site);
        for sat in sats {
            let el = elevation_of(site, sat.position);
            if el < site.min_elevation_deg {
                continue;
            }
            let range = slant_range_km(site, sat);
            let latency = propagation_delay(range);
            if !wx.conditions.cloud {
                let sample =
                    sample_fso_link(models.terminal, models.qkd, range, el, &wx.conditions, rng)?;
                edges.push(EdgeState {
                    edge_id: fso_edge_id(&site.site_id, &sat.sat_id),
                    kind: EdgeKind::FsoGroundSat,
                    a: site.site_id.clone(),
                    b: sat.sat_id.clone(),
                    classical_capacity_bps: 1e9,
                    latency_s: latency,
                    current_eta: sample.budget.eta_total,
                    current_skr_bps: sample.skr_bps,
                    status: if sample.skr_bps > 0.0 { EdgeStatus::Up } else { EdgeStatus::Degraded },
                    channel: Some(sample),
                });
            }
            if site.kind != SiteKind::Haps {
                edges.push(EdgeState {
                    edge_id: rf_edge_id(&site.site_id, &sat.sat_id),
                    kind: EdgeKind::Rf,
                    a: site.site_id.clone(),
                    b: sat.sat_id.clone(),
                    classical_capacity_bps: rf_fallback_capacity(models.rf, range, wx.rf),
                    latency_s: latency,
                    current_eta: 0.0,
                    current_skr_bps: 0.0,
                    status: EdgeStatus::Up,
                    channel: None,
                });
            }
        }
    }
    Ok(TimeVaryingGraph { t, nodes, edges })
}

#[derive(Clone, PartialEq)]
struct Label {
    cost: f64,
    path: Vec<String>,
}

impl Eq for Label {}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (cost, path)
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.path.cmp(&self.path))
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-cost path by Dijkstra. Equal-cost paths are resolved to the
/// lexicographically smallest node sequence. Nodes in `avoid` are never
/// entered (endpoints excepted); `usable` filters edges.
pub fn shortest_path<F, U>(
    graph: &TimeVaryingGraph,
    src: &str,
    dst: &str,
    avoid: &BTreeSet<String>,
    usable: U,
    weight: F,
) -> Option<(Vec<String>, f64)>
where
    F: Fn(&EdgeState) -> f64,
    U: Fn(&EdgeState) -> bool,
{
    if !graph.has_node(src) || !graph.has_node(dst) {
        return None;
    }
    let mut settled = BTreeSet::new();
    let mut heap = BinaryHeap::new();
    heap.push(Label { cost: 0.0, path: vec![src.to_string()] });
    while let Some(Label { cost, path }) = heap.pop() {
        let node = path.last().expect("non-empty path").clone();
        if !settled.insert(node.clone()) {
            continue;
        }
        if node == dst {
            return Some((path, cost));
        }
        for e in graph.incident(&node).filter(|e| usable(e)) {
            let next = e.other(&node).expect("incident edge").to_string();
            if settled.contains(&next) || (avoid.contains(&next) && next != dst) {
                continue;
            }
            let mut p = path.clone();
            p.push(next);
            heap.push(Label { cost: cost + weight(e), path: p });
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrafficClass {
    #[serde(rename = "type_i")]
    TypeI,
    #[serde(rename = "type_ii")]
    TypeII,
    #[serde(rename = "type_iii")]
    TypeIII,
    #[serde(rename = "type_iv")]
    TypeIV,
}

impl TrafficClass {
    pub const ALL: [TrafficClass; 4] =
        [TrafficClass::TypeI, TrafficClass::TypeII, TrafficClass::TypeIII, TrafficClass::TypeIV];

    pub fn spec(self) -> TrafficClassSpec {
        match self {
            TrafficClass::TypeI => TrafficClassSpec {
                class: self,
                latency_target_s: 1e-3,
                reliability_target: 0.99999,
                security_mode: SecurityMode::Otp,
                key_consumption: KeyConsumption::DataRate,
            },
            TrafficClass::TypeII => TrafficClassSpec {
                class: self,
                latency_target_s: 50e-3,
                reliability_target: 0.99999,
                security_mode: SecurityMode::Aes256Rekey,
                key_consumption: KeyConsumption::Periodic { bits: 256, period_s: 10.0 },
            },
            TrafficClass::TypeIII => TrafficClassSpec {
                class: self,
                latency_target_s: 10.0,
                reliability_target: 0.999,
                security_mode: SecurityMode::Aes128Batch,
                key_consumption: KeyConsumption::Periodic { bits: 128, period_s: 3600.0 },
            },
            TrafficClass::TypeIV => TrafficClassSpec {
                class: self,
                latency_target_s: f64::INFINITY,
                reliability_target: 0.99,
                security_mode: SecurityMode::Pqc,
                key_consumption: KeyConsumption::Zero,
            },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TrafficClass::TypeI => "type_i",
            TrafficClass::TypeII => "type_ii",
            TrafficClass::TypeIII => "type_iii",
            TrafficClass::TypeIV => "type_iv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityMode {
    Otp,
    Aes256Rekey,
    Aes128Batch,
    Pqc,
}

impl SecurityMode {
    /// Relative strength used to check that an intent does not ask for less
    /// than its class minimum.
    pub fn strength(self) -> u8 {
        match self {
            SecurityMode::Otp => 3,
            SecurityMode::Aes256Rekey => 2,
            SecurityMode::Aes128Batch => 1,
            SecurityMode::Pqc => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum KeyConsumption {
    /// One key bit per data bit (one-time pad).
    DataRate,
    /// `bits` of fresh key every `period_s` after flow start.
    Periodic { bits: u64, period_s: f64 },
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficClassSpec {
    pub class: TrafficClass,
    pub latency_target_s: f64,
    pub reliability_target: f64,
    pub security_mode: SecurityMode,
    pub key_consumption: KeyConsumption,
}

impl TrafficClassSpec {
    /// Key bits needed over `(t0, t1]` by a flow that started at `start_s`
    /// with `data_rate_bps`. Data-rate keys are returned as a real number of
    /// bits; callers quantize.
    pub fn key_demand_bits(&self, data_rate_bps: f64, start_s: f64, t0: f64, t1: f64) -> f64 {
        match self.key_consumption {
            KeyConsumption::DataRate => data_rate_bps * (t1 - t0).max(0.0),
            KeyConsumption::Periodic { bits, period_s } => {
                let k = |t: f64| ((t - start_s) / period_s).floor().max(0.0);
                (k(t1) - k(t0)).max(0.0) * bits as f64
            }
            KeyConsumption::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDemand {
    pub flow_id: String,
    pub src: String,
    pub dst: String,
    pub class: TrafficClass,
    pub data_rate_bps: f64,
    pub start_s: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub residency_forbidden_regions: BTreeSet<String>,
    /// Completion deadline for bulk transfers, s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_s: Option<f64>,
}

impl FlowDemand {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    pub fn active_at(&self, t: f64) -> bool {
        t >= self.start_s && t < self.end_s()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data_rate_bps > 0.0) {
            return Err(Error::param("data_rate_bps", format!("flow {} rate must be > 0", self.flow_id)));
        }
        if !(self.duration_s >= 0.0) || !(self.start_s >= 0.0) {
            return Err(Error::param("flow", format!("flow {} has negative timing", self.flow_id)));
        }
        Ok(())
    }
}

/// Grid carbon-intensity time series, piecewise constant between samples.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CarbonRegion {
    pub region_id: String,
    /// (timestamp_s, gCO₂/kWh), sorted by time.
    pub ci_series: Vec<(f64, f64)>,
}

impl CarbonRegion {
    pub fn constant(region_id: impl Into<String>, ci: f64) -> Self {
        Self { region_id: region_id.into(), ci_series: vec![(0.0, ci)] }
    }

    /// Intensity in force at `t`; `None` before the first sample.
    pub fn ci_at(&self, t: f64) -> Option<f64> {
        let idx = self.ci_series.partition_point(|(ts, _)| *ts <= t);
        idx.checked_sub(1).map(|i| self.ci_series[i].1)
    }
}

/// All carbon regions by id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CarbonTable {
    pub regions: BTreeMap<String, CarbonRegion>,
}

#[derive(Debug, Deserialize)]
struct CiRow {
    timestamp_s: f64,
    region_id: String,
    gco2_per_kwh: f64,
}

impl CarbonTable {
    pub fn ci_at(&self, region: &str, t: f64) -> Result<f64> {
        self.regions
            .get(region)
            .and_then(|r| r.ci_at(t))
            .ok_or_else(|| Error::Config(format!("no carbon intensity for region {region} at t={t}")))
    }

    pub fn insert(&mut self, region: CarbonRegion) {
        self.regions.insert(region.region_id.clone(), region);
    }

    /// Parses `timestamp_s,region_id,gco2_per_kwh` rows (header required).
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut table = CarbonTable::default();
        for row in rdr.deserialize::<CiRow>() {
            let row = row.map_err(|e| Error::Parse(format!("carbon intensity csv: {e}")))?;
            if !(row.gco2_per_kwh >= 0.0) {
                return Err(Error::param("gco2_per_kwh", format!("{} must be >= 0", row.gco2_per_kwh)));
            }
            table
                .regions
                .entry(row.region_id.clone())
                .or_insert_with(|| CarbonRegion { region_id: row.region_id.clone(), ci_series: vec![] })
                .ci_series
                .push((row.timestamp_s, row.gco2_per_kwh));
        }
        for region in table.regions.values_mut() {
            region.ci_series.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        Ok(table)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
        Self::from_csv_reader(file)
    }

    /// Every region must have a sample at or before `t0`.
    pub fn covers(&self, region: &str, t0: f64) -> bool {
        self.regions.get(region).is_some_and(|r| r.ci_at(t0).is_some())
    }
}

/// Electrical load of one node on a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLoad {
    pub node_id: String,
    pub power_w: f64,
    pub region_id: String,
}

/// Σ P_n · CI_n(t) · Δt over the path, in grams of CO₂.
pub fn carbon_cost(path: &[NodeLoad], table: &CarbonTable, t: f64, dt_s: f64) -> Result<f64> {
    path.iter().try_fold(0.0, |acc, n| {
        Ok(acc + n.power_w * table.ci_at(&n.region_id, t)? * dt_s / WS_PER_KWH)
    })
}

/// Power draw of a node with `active_transceivers` links in use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PowerModel {
    pub base_w: f64,
    pub per_transceiver_w: f64,
    /// Detector cryocooler, drawn only while a QKD receiver is active.
    pub cryocooler_w: f64,
}

impl PowerModel {
    pub fn power_w(&self, active_transceivers: u32, qkd_active: bool) -> f64 {
        self.base_w
            + self.per_transceiver_w * active_transceivers as f64
            + if qkd_active { self.cryocooler_w } else { 0.0 }
    }
}

/// Poisson flow arrivals between two endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonGenerator {
    pub prefix: String,
    pub src: String,
    pub dst: String,
    pub class: TrafficClass,
    pub rate_per_hour: f64,
    pub mean_duration_s: f64,
    pub data_rate_bps: f64,
    #[serde(default)]
    pub residency_forbidden_regions: BTreeSet<String>,
    /// Relative deadline after arrival for bulk transfers, s.
    #[serde(default)]
    pub deadline_after_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrafficSpec {
    #[serde(default)]
    pub flows: Vec<FlowDemand>,
    #[serde(default)]
    pub generators: Vec<PoissonGenerator>,
}

/// Expands the traffic spec into a concrete demand list over `[0, horizon)`,
/// sorted by start time then flow id.
pub fn demand_generator<R: Rng + ?Sized>(
    spec: &TrafficSpec,
    horizon_s: f64,
    rng: &mut R,
) -> Result<Vec<FlowDemand>> {
    let mut out: Vec<FlowDemand> = spec.flows.clone();
    for g in &spec.generators {
        if g.rate_per_hour <= 0.0 {
            continue;
        }
        let gap = Exp::new(g.rate_per_hour / 3600.0)
            .map_err(|e| Error::param("rate_per_hour", e.to_string()))?;
        let dur = Exp::new(1.0 / g.mean_duration_s.max(1e-9))
            .map_err(|e| Error::param("mean_duration_s", e.to_string()))?;
        let mut t = 0.0;
        let mut k = 0;
        loop {
            t += gap.sample(rng);
            if t >= horizon_s {
                break;
            }
            out.push(FlowDemand {
                flow_id: format!("{}-{k}", g.prefix),
                src: g.src.clone(),
                dst: g.dst.clone(),
                class: g.class,
                data_rate_bps: g.data_rate_bps,
                start_s: t,
                duration_s: dur.sample(rng),
                residency_forbidden_regions: g.residency_forbidden_regions.clone(),
                deadline_s: g.deadline_after_s.map(|d| t + d),
            });
            k += 1;
        }
    }
    for f in &out {
        f.validate()?;
    }
    out.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then_with(|| a.flow_id.cmp(&b.flow_id)));
    Ok(out)
}
