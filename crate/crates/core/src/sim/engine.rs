//! Two-rate scenario engine.
//!
//! Tier-1 ticks (default 60 s) run estimation, forecasting and flight
//! planning; Tier-2 ticks (default 10 ms) run the channel, key stores,
//! routing, handovers and fallback. Geometry and weather are refreshed once
//! per simulated second. Within a tick the phase order is fixed: geometry
//! and weather events, flow arrivals and departures, link management,
//! channel sampling and key generation, then key consumption.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::channel::{
    evaluate_fso_link, expected_fso_link, fso_link_inputs, sample_pointing_error, ChannelSample, FsoLinkSetup,
    IrradianceProcess, SiteConditions,
};
use crate::control_mpc::{
    carbon_aware_defer, plan_contacts, predict_handover_horizon, ContactOption, DeferWindow, FlightPlan,
    PlanningHorizon,
};
use crate::control_rl::{
    shield_filter, train, LaserLevel, LinearPolicy, LinkFeatures, RlAction, RlState, ShieldDecision, ShieldRuleSet,
    ToyConfig, TrainConfig,
};
use crate::error::{Error, Result};
use crate::netmodel::{
    fso_edge_id, shortest_path, EdgeKind, EdgeState, EdgeStatus, FlowDemand, NodeKind, NodeState, TimeVaryingGraph,
    TrafficClass,
};
use crate::observability::{
    forecast_feeds, kalman_predict, kalman_update, predict_snr, qkd_snr_threshold_db, ForecastFeeds, KalmanState,
    LinkGeometry, SeeingMeasurement,
};
use crate::orbits::{contact_windows, elevation_of, norm, propagate, sub, ContactWindow, GroundSite, SiteKind, Vec3,
    SPEED_OF_LIGHT_KM_S};
use crate::protocols::{
    fallback_step, mbb_step, FallbackMode, FallbackState, HandoverPhase, HandoverSession, LinkObservables, MbbEvent,
    SessionCheckpoint, TurboTrigger,
};
use crate::sdqn::{
    collect_telemetry, install_flow, translate_intent, FlowTable, FlowTableEntry, Intent, KeyStore, NodeObservables,
};

use super::config::{ControllerKind, SimConfig};
use super::metrics::{compute_metrics, MetricsSummary, TickTotals};
use super::trace::{ClassTick, Payload, ShieldCounts, Trace, TraceRecord, TRACE_FORMAT_VERSION};
use super::weather::WeatherTruth;

/// Spacing of cached ephemeris samples and of geometry refreshes, s.
const GEOMETRY_STEP_S: f64 = 1.0;
/// Shortest trimmed contact kept as a planning option, s.
const MIN_OPTION_S: f64 = 30.0;
/// Samples per contact used for its forecast key rate.
const FORECAST_SAMPLES: usize = 5;
/// Largest gap between losing a link and acquiring the next one that still
/// counts as a handover, s.
const HANDOVER_GAP_S: f64 = 60.0;

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub metrics: MetricsSummary,
}

/// Runs one scenario with the controller named in `cfg`.
pub fn run_scenario(cfg: &SimConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let cfg = cfg.canonical();
    let mut engine = Engine::new(&cfg, seed)?;
    engine.run()?;
    Ok(engine.finish())
}

/// Independent random stream `id` of a run.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Satellite positions sampled every second, linearly interpolated.
struct Ephemeris {
    n: usize,
    steps: usize,
    pos: Vec<Vec3>,
    sunlit: Vec<bool>,
}

impl Ephemeris {
    fn new(cfg: &SimConfig, t_end: f64) -> Result<Self> {
        let steps = (t_end / GEOMETRY_STEP_S).ceil() as usize + 2;
        let n = cfg.constellation.total() as usize;
        let mut pos = Vec::with_capacity(steps * n);
        let mut sunlit = Vec::with_capacity(steps * n);
        for k in 0..steps {
            for s in propagate(&cfg.constellation, k as f64 * GEOMETRY_STEP_S)? {
                pos.push(s.position);
                sunlit.push(!s.in_eclipse);
            }
        }
        Ok(Self { n, steps, pos, sunlit })
    }

    fn pos(&self, sat: usize, t: f64) -> Vec3 {
        let x = (t / GEOMETRY_STEP_S).clamp(0.0, (self.steps - 2) as f64);
        let k = x.floor() as usize;
        let f = x - k as f64;
        let (a, b) = (self.pos[k * self.n + sat], self.pos[(k + 1) * self.n + sat]);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), a[2] + f * (b[2] - a[2])]
    }

    fn sunlit(&self, sat: usize, t: f64) -> bool {
        let k = ((t / GEOMETRY_STEP_S).floor().max(0.0) as usize).min(self.steps - 1);
        self.sunlit[k * self.n + sat]
    }
}

/// Optical link in use at a site.
struct Link {
    sat: usize,
    setup: FsoLinkSetup,
    process: IrradianceProcess,
    elevation_deg: f64,
    range_km: f64,
    /// Key generation start, s.
    since: f64,
    last: Option<ChannelSample>,
}

/// Make-before-break handover being driven at a site.
struct MbbRun {
    incoming: usize,
    predict_at: f64,
    deadline: f64,
    session: String,
    jitter_ms: Option<f64>,
}

struct OptSite {
    id: String,
    site: GroundSite,
    pos: Vec3,
    region: String,
    kind: SiteKind,
    wx: usize,
    store_id: String,
    store: KeyStore,
    link: Option<Link>,
    incoming: Option<Link>,
    acquiring: Option<(usize, f64)>,
    /// Time and data-path latency of the last lost link.
    lost: Option<(f64, f64)>,
    session: HandoverSession,
    mbb: Option<MbbRun>,
    handovers: u64,
    fallback: FallbackState,
    turbo: TurboTrigger,
    cond: SiteConditions,
    visible: Vec<bool>,
    kalman: KalmanState,
    windows: Vec<ContactWindow>,
    /// Key drawn during the current Tier-2 tick, bits.
    tick_consumed: f64,
    tick_flows: u32,
    gen_bps: f64,
    /// Time with at least one downlink up in the current Tier-1 tick, s.
    acc_active_s: f64,
    acc_link_s: f64,
    acc_qkd_s: f64,
    acc_skr: f64,
    acc_skr_n: u64,
}

impl OptSite {
    fn latency_s(&self) -> Option<f64> {
        self.link.as_ref().map(|l| l.range_km / SPEED_OF_LIGHT_KM_S)
    }

    fn quality(&self, skr_scale: f64) -> f64 {
        match (&self.link, self.fallback.mode) {
            (Some(_), FallbackMode::FsoOk) => (self.gen_bps / skr_scale).clamp(0.0, 1.0),
            _ => 0.0,
        }
    }
}

struct SatRt {
    id: String,
    soc_wh: f64,
    plan: Option<FlightPlan>,
    acc_dl_s: f64,
    acc_dl_level_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FlowPhase {
    Pending,
    Active,
    Done,
}

struct FlowRt {
    demand: FlowDemand,
    phase: FlowPhase,
    run_start: f64,
    run_end: f64,
    path_latency_s: f64,
    /// Run region for bulk transfers.
    run_region: String,
    /// (optical site index, fiber latency from the source).
    candidates: Vec<(usize, f64)>,
    home: Option<usize>,
    carry_bits: f64,
    keyed: bool,
    outage: bool,
    unsafe_now: bool,
    rules: ShieldRuleSet,
    rl_state: RlState,
}

#[derive(Default)]
struct TickAcc {
    classes: BTreeMap<TrafficClass, ClassTick>,
    shield: ShieldCounts,
    bulk_carbon_g: f64,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    seed: u64,
    kind: ControllerKind,
    dt: f64,
    ticks_per_t1: u64,
    t1_count: u64,
    truth: WeatherTruth,
    eph: Ephemeris,
    sites: Vec<OptSite>,
    sats: Vec<SatRt>,
    flows: Vec<FlowRt>,
    static_graph: TimeVaryingGraph,
    node_regions: BTreeMap<String, String>,
    table: FlowTable,
    policy: Option<LinearPolicy>,
    snr_threshold_db: f64,
    trace: Trace,
    acc: TickAcc,
    prev_totals: (u64, u64, u64),
    channel_rngs: Vec<ChaCha8Rng>,
    forecast_rng: ChaCha8Rng,
    seeing_rng: ChaCha8Rng,
    feeds: Option<ForecastFeeds>,
}

fn fiber_graph(cfg: &SimConfig) -> TimeVaryingGraph {
    let edges = cfg
        .fiber
        .iter()
        .map(|f| EdgeState {
            edge_id: f.edge_id(),
            kind: if f.qkd_skr_bps > 0.0 { EdgeKind::QuantumCoexist } else { EdgeKind::Fiber },
            a: f.a.clone(),
            b: f.b.clone(),
            classical_capacity_bps: f.capacity_bps,
            latency_s: f.latency_s(),
            current_eta: 1.0,
            current_skr_bps: f.qkd_skr_bps,
            status: EdgeStatus::Up,
            channel: None,
        })
        .collect();
    TimeVaryingGraph { t: 0.0, nodes: cfg.sites.iter().map(|s| s.site.site_id.clone()).collect(), edges }
}

fn fiber_latency(graph: &TimeVaryingGraph, a: &str, b: &str) -> Option<f64> {
    if a == b {
        return Some(0.0);
    }
    shortest_path(graph, a, b, &BTreeSet::new(), |e| e.status != EdgeStatus::Down, |e| e.latency_s).map(|(_, c)| c)
}

fn argmax(w: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in w.iter().enumerate() {
        if *v > 0.0 && best.is_none_or(|b| *v > w[b]) {
            best = Some(i);
        }
    }
    best
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig, seed: u64) -> Result<Self> {
        let dt = cfg.ticks.tier2_s;
        let ticks_per_t1 = (cfg.ticks.tier1_s / dt).round() as u64;
        let t1_count = (cfg.duration_s / cfg.ticks.tier1_s).ceil() as u64;
        let horizon_s = cfg.control.mpc_horizon_steps as f64 * cfg.ticks.tier1_s;
        let carbon = cfg.carbon_table()?;

        let mut traffic_rng = stream(seed, 2);
        let demands = crate::netmodel::demand_generator(&cfg.traffic, cfg.duration_s, &mut traffic_rng)?;
        let truth = WeatherTruth::new(cfg, carbon, &demands, &mut stream(seed, 1));
        let eph = Ephemeris::new(cfg, cfg.duration_s + horizon_s + cfg.ticks.tier1_s)?;
        let sat_ids: Vec<String> = propagate(&cfg.constellation, 0.0)?.into_iter().map(|s| s.sat_id).collect();
        let static_graph = fiber_graph(cfg);
        let node_regions = cfg.sites.iter().map(|s| (s.site.site_id.clone(), s.region_id.clone())).collect();

        let mut sites = Vec::new();
        for s in cfg.sites.iter().filter(|s| s.is_optical()) {
            let id = s.site.site_id.clone();
            let store_id = format!("qkd:{id}");
            let mut store = KeyStore::new(store_id.clone(), cfg.control.key_max_age_s);
            store.preload(cfg.control.initial_key_bits as u64, 0.0);
            let wx = truth.site_index(&id).expect("site known to the weather model");
            let windows = contact_windows(&cfg.constellation, &s.site, 0.0, cfg.duration_s + horizon_s)?;
            sites.push(OptSite {
                session: HandoverSession::new(format!("downlink:{id}"), "", 0.0),
                fallback: FallbackState::new(format!("fso:{id}"), 0.0),
                turbo: TurboTrigger::new(cfg.control.turbo_window_s, cfg.control.turbo_margin),
                cond: truth.conditions_by_index(wx, 0.0),
                kalman: KalmanState::from_r0(s.r0_zenith_m, 0.25, cfg.control.kalman_q, 0.0),
                visible: vec![false; sat_ids.len()],
                pos: s.site.position(),
                site: s.site.clone(),
                region: s.region_id.clone(),
                kind: s.site.kind,
                id,
                wx,
                store_id,
                store,
                link: None,
                incoming: None,
                acquiring: None,
                lost: None,
                mbb: None,
                handovers: 0,
                windows,
                tick_consumed: 0.0,
                tick_flows: 0,
                gen_bps: 0.0,
                acc_active_s: 0.0,
                acc_link_s: 0.0,
                acc_qkd_s: 0.0,
                acc_skr: 0.0,
                acc_skr_n: 0,
            });
        }
        let soc0 = cfg.sat_energy.capacity_wh * cfg.control.initial_soc_fraction.clamp(0.0, 1.0);
        let sats = sat_ids
            .into_iter()
            .map(|id| SatRt { id, soc_wh: soc0, plan: None, acc_dl_s: 0.0, acc_dl_level_s: 0.0 })
            .collect();

        let flows = demands
            .into_iter()
            .map(|d| {
                let candidates: Vec<(usize, f64)> = sites
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| fiber_latency(&static_graph, &d.src, &s.id).map(|l| (i, l)))
                    .collect();
                let home = crate::control_rl::baseline_shortest_path(&static_graph, &d.src, &d.src)
                    .ok()
                    .and_then(|_| {
                        candidates.iter().min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))).map(|c| c.0)
                    });
                let tick_demand = d.data_rate_bps * dt;
                let mut links: Vec<LinkFeatures> = candidates
                    .iter()
                    .map(|(i, lat)| LinkFeatures {
                        link_id: sites[*i].store_id.clone(),
                        keyed: true,
                        queue_depth_bits: 0.0,
                        link_quality: 0.0,
                        key_buffer_bits: 0.0,
                        neighbor_load: 0.0,
                        latency_s: *lat,
                    })
                    .collect();
                links.push(LinkFeatures {
                    link_id: "classical".into(),
                    keyed: false,
                    queue_depth_bits: 0.0,
                    link_quality: 1.0,
                    key_buffer_bits: 0.0,
                    neighbor_load: 0.0,
                    latency_s: 0.0,
                });
                let src_region = cfg.site(&d.src).map(|s| s.region_id.clone()).unwrap_or_default();
                FlowRt {
                    rules: ShieldRuleSet::canonical(cfg.control.critical_threshold_ticks * tick_demand),
                    rl_state: RlState { links, head_class: d.class },
                    phase: FlowPhase::Pending,
                    run_start: d.start_s,
                    run_end: d.end_s(),
                    path_latency_s: 0.0,
                    run_region: src_region,
                    candidates,
                    home,
                    carry_bits: 0.0,
                    keyed: false,
                    outage: false,
                    unsafe_now: false,
                    demand: d,
                }
            })
            .collect();

        let channel_rngs = (0..sites.len()).map(|i| stream(seed, 100 + i as u64)).collect();
        Ok(Self {
            cfg,
            seed,
            kind: cfg.controller,
            dt,
            ticks_per_t1,
            t1_count,
            truth,
            eph,
            sites,
            sats,
            flows,
            static_graph,
            node_regions,
            table: FlowTable::default(),
            policy: None,
            snr_threshold_db: qkd_snr_threshold_db(&cfg.qkd),
            trace: Trace::default(),
            acc: TickAcc::default(),
            prev_totals: (0, 0, 0),
            channel_rngs,
            forecast_rng: stream(seed, 4),
            seeing_rng: stream(seed, 6),
            feeds: None,
        })
    }

    fn run(&mut self) -> Result<()> {
        let cfg = self.cfg;
        self.trace.push(
            0.0,
            Payload::Header {
                format_version: TRACE_FORMAT_VERSION,
                name: cfg.name.clone(),
                controller: self.kind.name().into(),
                seed: self.seed,
                duration_s: cfg.duration_s,
                tier1_s: cfg.ticks.tier1_s,
                tier2_s: cfg.ticks.tier2_s,
                objective: cfg.objective,
                reward: cfg.reward,
            },
        );
        if self.kind.is_ai() {
            let tc = TrainConfig {
                episodes: cfg.control.rl_episodes,
                learning_rate: cfg.control.rl_learning_rate,
                ..TrainConfig::default()
            };
            let train_seed: u64 = stream(self.seed, 5).random();
            let out = train(&LinearPolicy::default(), &ToyConfig::default(), &cfg.reward, &tc, train_seed)?;
            let mut policy = out.policy;
            policy.scales.key_bits = cfg.control.key_scale_bits;
            self.policy = Some(policy);
            self.trace.push(0.0, Payload::LearningCurve { points: out.curve });
        }
        let steps_per_geometry = ((GEOMETRY_STEP_S / self.dt).round() as u64).max(1);
        let total_ticks = (cfg.duration_s / self.dt).round() as u64;
        for k1 in 0..self.t1_count {
            let t1 = k1 as f64 * cfg.ticks.tier1_s;
            self.tier1_start(k1, t1)?;
            let first = k1 * self.ticks_per_t1;
            let last = ((k1 + 1) * self.ticks_per_t1).min(total_ticks);
            for k2 in first..last {
                let t = k2 as f64 * self.dt;
                if k2 % steps_per_geometry == 0 {
                    self.refresh_geometry(t);
                }
                self.tier2(t)?;
            }
            let t_end = (last as f64 * self.dt).min(cfg.duration_s);
            self.tier1_end(k1, t_end);
        }
        Ok(())
    }

    fn finish(mut self) -> RunOutput {
        let metrics = compute_metrics(self.trace.records());
        self.trace.push(self.cfg.duration_s, Payload::Summary { metrics: metrics.clone() });
        RunOutput { trace: self.trace.into_records(), metrics }
    }

    // ---- Tier 1 -------------------------------------------------------

    fn tier1_start(&mut self, k1: u64, t: f64) -> Result<()> {
        if self.kind.is_ai() {
            self.estimate(t)?;
            self.plan(t)?;
        }
        self.telemetry(k1, t);
        Ok(())
    }

    /// Seeing-monitor update of every site filter and fresh forecasts.
    fn estimate(&mut self, t: f64) -> Result<()> {
        let cfg = self.cfg;
        let noise = Normal::new(0.0, cfg.weather.seeing_noise_m.max(0.0)).map_err(|e| Error::param("seeing_noise_m", e.to_string()))?;
        for s in &mut self.sites {
            let truth_r0 = self.truth.r0_by_index(s.wx, t);
            let measured = (truth_r0 + noise.sample(&mut self.seeing_rng)).max(1e-3);
            let prior = kalman_predict(&s.kalman, (t - s.kalman.last_update_s).max(0.0))?;
            let m = SeeingMeasurement {
                site_id: s.id.clone(),
                t,
                r0_measured_m: measured,
                theta0_measured_urad: 0.0,
                noise_sigma_m: cfg.weather.seeing_noise_m,
            };
            s.kalman = kalman_update(&prior, &m)?;
        }
        let ids: Vec<String> = self.sites.iter().map(|s| s.id.clone()).collect();
        let regions: Vec<String> = self.sites.iter().map(|s| s.region.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let horizon = cfg.control.mpc_horizon_steps as f64 * cfg.ticks.tier1_s;
        self.feeds = Some(forecast_feeds(&self.truth, &ids, &regions, t, horizon, &cfg.control.forecast, &mut self.forecast_rng));
        Ok(())
    }

    fn geometry(&self, site: usize, sat: usize, t: f64) -> (f64, f64) {
        let p = self.eph.pos(sat, t);
        let s = &self.sites[site];
        (elevation_of(&s.site, p), norm(sub(p, s.pos)))
    }

    fn forecast_conditions(&self, site: usize, t: f64) -> SiteConditions {
        let s = &self.sites[site];
        let feeds = self.feeds.as_ref();
        let cloud = feeds.is_some_and(|f| f.cloud_at(&s.id, t));
        let r0 = feeds.and_then(|f| f.r0_at(&s.id, t)).unwrap_or_else(|| s.kalman.r0_m());
        let ext = if s.kind == SiteKind::Haps { 0.0 } else { self.cfg.terminal.clear_extinction_db_per_km };
        SiteConditions { r0_zenith_m: r0, extinction_db_per_km: ext, cloud }
    }

    /// Forecast mean key rate of a contact over `[t0, t1]`.
    fn forecast_skr(&self, site: usize, sat: usize, t0: f64, t1: f64) -> f64 {
        let n = FORECAST_SAMPLES;
        let mut total = 0.0;
        for i in 0..n {
            let tau = t0 + (t1 - t0) * (i as f64 + 0.5) / n as f64;
            let (el, range) = self.geometry(site, sat, tau);
            if el < self.sites[site].site.min_elevation_deg {
                continue;
            }
            let cond = self.forecast_conditions(site, tau);
            if let Ok(s) = expected_fso_link(&self.cfg.terminal, &self.cfg.qkd, range, el, &cond) {
                total += s.skr_bps;
            }
        }
        total / n as f64
    }

    /// Flight plans for every satellite, in id order; sites already claimed
    /// by an earlier satellite are trimmed from later options.
    fn plan(&mut self, t: f64) -> Result<()> {
        let cfg = self.cfg;
        let horizon = PlanningHorizon { t0: t, step_s: cfg.ticks.tier1_s, steps: cfg.control.mpc_horizon_steps };
        let h_end = horizon.end();
        let mut claims: Vec<(usize, f64, f64)> = Vec::new();
        for sat in 0..self.sats.len() {
            let mut options = Vec::new();
            for (si, s) in self.sites.iter().enumerate() {
                let ci = if self.kind.carbon_aware() {
                    self.feeds.as_ref().and_then(|f| f.ci_at(&s.region, t)).unwrap_or(0.0)
                } else {
                    0.0
                };
                for w in s.windows.iter().filter(|w| w.sat_id == self.sats[sat].id && w.t_set > t && w.t_rise < h_end) {
                    let mut pieces = vec![(w.t_rise.max(t), w.t_set.min(h_end))];
                    for &(cs, c0, c1) in claims.iter().filter(|c| c.0 == si) {
                        debug_assert_eq!(cs, si);
                        pieces = pieces
                            .into_iter()
                            .flat_map(|(a, b)| [(a, b.min(c0)), (a.max(c1), b)])
                            .filter(|(a, b)| b > a)
                            .collect();
                    }
                    for (a, b) in pieces.into_iter().filter(|(a, b)| b - a >= MIN_OPTION_S) {
                        options.push(ContactOption {
                            sat_id: self.sats[sat].id.clone(),
                            site_id: s.id.clone(),
                            t_start: a,
                            t_end: b,
                            forecast_skr_bps: self.forecast_skr(si, sat, a, b),
                            site_ci: ci,
                        });
                    }
                }
            }
            let sunlit: Vec<bool> =
                (0..horizon.steps).map(|k| self.eph.sunlit(sat, t + k as f64 * horizon.step_s)).collect();
            let plan = plan_contacts(&self.sats[sat].id, self.sats[sat].soc_wh, &options, &cfg.sat_energy, &sunlit, &horizon);
            for a in &plan.actions {
                if let Some((site, _)) = a.downlink() {
                    let (a0, a1) = a.interval();
                    let si = self.sites.iter().position(|s| s.id == site).expect("planned site exists");
                    claims.push((si, a0, a1));
                }
            }
            let changed = self.sats[sat].plan.as_ref().is_none_or(|p| p.actions != plan.actions);
            if changed {
                self.trace.push(t, Payload::FlightPlan { plan: plan.clone() });
            }
            self.sats[sat].plan = Some(plan);
        }
        Ok(())
    }

    fn telemetry(&mut self, k1: u64, t: f64) {
        let cfg = self.cfg;
        let mut nodes = Vec::new();
        let mut obs = BTreeMap::new();
        for s in &cfg.sites {
            let id = &s.site.site_id;
            let mut node = NodeState::grid(id.clone(), NodeKind::from(s.site.kind), s.region_id.clone());
            let mut o = NodeObservables {
                carbon_intensity: self.truth.carbon().ci_at(&s.region_id, t).unwrap_or(0.0),
                ..Default::default()
            };
            if let Some(os) = self.sites.iter().find(|o| &o.id == id) {
                node.key_buffers.insert(os.store_id.clone(), os.store.available_bits());
                o.turbulence_forecast_index = os.kalman.r0_m();
                if let Some(l) = os.link.as_ref().and_then(|l| l.last.map(|c| (l.sat, c))) {
                    o.link_fidelity.insert(self.sats[l.0].id.clone(), 1.0 - l.1.qber);
                }
            }
            nodes.push(node);
            obs.insert(id.clone(), o);
        }
        for sat in &self.sats {
            let mut node = NodeState::grid(sat.id.clone(), NodeKind::Satellite, "space");
            node.battery_soc_wh = sat.soc_wh;
            node.battery_capacity_wh = cfg.sat_energy.capacity_wh;
            node.battery_reserve_wh = cfg.sat_energy.reserve_wh;
            nodes.push(node);
        }
        let _ = k1;
        self.trace.push(t, Payload::Telemetry { records: collect_telemetry(&nodes, &obs, t) });
    }

    fn tier1_end(&mut self, k1: u64, t: f64) {
        let cfg = self.cfg;
        let span = cfg.ticks.tier1_s;
        let t_start = k1 as f64 * span;
        let mut stored = BTreeMap::new();
        for s in &mut self.sites {
            s.store.expire(t);
            stored.insert(s.store_id.clone(), s.store.available_bits() as f64);
        }
        let totals = self.sites.iter().fold((0u64, 0u64, 0u64), |acc, s| {
            let x = s.store.totals();
            (acc.0 + x.generated_bits, acc.1 + x.consumed_bits, acc.2 + x.expired_bits)
        });
        let (g, c, e) = (
            (totals.0 - self.prev_totals.0) as f64,
            (totals.1 - self.prev_totals.1) as f64,
            (totals.2 - self.prev_totals.2) as f64,
        );
        self.prev_totals = totals;

        // Ground-station power and satellite batteries.
        let mut ogs_g = 0.0;
        let mut skr = BTreeMap::new();
        for s in &mut self.sites {
            if s.kind != SiteKind::Haps {
                let p = &cfg.ogs_power;
                // Stations are charged only while they serve a downlink.
                let joules = p.base_w * s.acc_active_s + p.per_transceiver_w * s.acc_link_s + p.cryocooler_w * s.acc_qkd_s;
                ogs_g += joules * self.truth.carbon().ci_at(&s.region, t_start).unwrap_or(0.0) / 3.6e6;
            }
            if s.acc_skr_n > 0 {
                skr.insert(s.id.clone(), s.acc_skr / s.acc_skr_n as f64);
            }
            s.acc_active_s = 0.0;
            s.acc_link_s = 0.0;
            s.acc_qkd_s = 0.0;
            s.acc_skr = 0.0;
            s.acc_skr_n = 0;
        }
        let mut soc = BTreeMap::new();
        let en = &cfg.sat_energy;
        for (i, sat) in self.sats.iter_mut().enumerate() {
            let load = if sat.acc_dl_s > 0.0 { en.awake_load_w } else { en.sleep_load_w };
            let solar = if self.eph.sunlit(i, t_start) { en.solar_w } else { 0.0 };
            let wh = (solar * span - load * span - en.laser_w * sat.acc_dl_level_s) / 3600.0;
            sat.soc_wh = (sat.soc_wh + wh).clamp(0.0, en.capacity_wh);
            sat.acc_dl_s = 0.0;
            sat.acc_dl_level_s = 0.0;
            soc.insert(sat.id.clone(), 100.0 * sat.soc_wh / en.capacity_wh);
        }
        let acc = std::mem::take(&mut self.acc);
        let carbon = ogs_g + acc.bulk_carbon_g;
        let totals = TickTotals { classes: acc.classes.clone(), generated_bits: g, carbon_g: carbon };
        let rl_reward = totals.reward(span, &cfg.reward);
        self.trace.push(t, Payload::FlowTick { tick: k1, classes: acc.classes });
        self.trace.push(t, Payload::KeyTick { tick: k1, generated_bits: g, consumed_bits: c, expired_bits: e, stored_bits: stored });
        self.trace.push(
            t,
            Payload::EnergyTick { tick: k1, carbon_g: carbon, ogs_carbon_g: ogs_g, bulk_carbon_g: acc.bulk_carbon_g, sat_soc_percent: soc },
        );
        self.trace.push(t, Payload::ChannelTick { tick: k1, downlink_skr_bps: skr });
        self.trace.push(t, Payload::ControlTick { tick: k1, shield: acc.shield, rl_reward });
    }

    // ---- Geometry and weather -----------------------------------------

    fn refresh_geometry(&mut self, t: f64) {
        for si in 0..self.sites.len() {
            let cond = self.truth.conditions_by_index(self.sites[si].wx, t);
            if cond.cloud != self.sites[si].cond.cloud {
                let id = self.sites[si].id.clone();
                self.trace.push(t, Payload::CloudChange { site_id: id, cloud: cond.cloud });
            }
            self.sites[si].cond = cond;
            for sat in 0..self.sats.len() {
                let (el, _) = self.geometry(si, sat, t);
                let vis = el >= self.sites[si].site.min_elevation_deg;
                if vis != self.sites[si].visible[sat] {
                    self.sites[si].visible[sat] = vis;
                    let (sat_id, site_id) = (self.sats[sat].id.clone(), self.sites[si].id.clone());
                    let p = if vis { Payload::ContactRise { sat_id, site_id } } else { Payload::ContactSet { sat_id, site_id } };
                    self.trace.push(t, p);
                }
            }
            let term = self.cfg.terminal;
            for which in 0..2 {
                let geom = {
                    let s = &self.sites[si];
                    let l = if which == 0 { s.link.as_ref() } else { s.incoming.as_ref() };
                    l.map(|l| l.sat)
                };
                if let Some(sat) = geom {
                    let (el, range) = self.geometry(si, sat, t);
                    let s = &mut self.sites[si];
                    let l = if which == 0 { s.link.as_mut() } else { s.incoming.as_mut() }.expect("link present");
                    l.elevation_deg = el;
                    l.range_km = range;
                    if let Ok(setup) = fso_link_inputs(&term, range, el.max(1e-3), &s.cond) {
                        l.setup = setup;
                        l.process.set_params(setup.params);
                    }
                }
            }
        }
    }

    fn new_link(&mut self, si: usize, sat: usize, t: f64) -> Option<Link> {
        let (el, range) = self.geometry(si, sat, t);
        let setup = fso_link_inputs(&self.cfg.terminal, range, el.max(1e-3), &self.sites[si].cond).ok()?;
        let process = IrradianceProcess::new(setup.params, self.cfg.terminal.turbulence_rho, &mut self.channel_rngs[si]);
        Some(Link { sat, setup, process, elevation_deg: el, range_km: range, since: t, last: None })
    }

    fn visible(&self, si: usize, sat: usize) -> bool {
        self.sites[si].visible[sat]
    }

    fn sat_busy(&self, sat: usize) -> bool {
        self.sites.iter().any(|s| {
            s.link.as_ref().is_some_and(|l| l.sat == sat)
                || s.incoming.as_ref().is_some_and(|l| l.sat == sat)
                || s.acquiring.is_some_and(|a| a.0 == sat)
        })
    }

    fn current_graph(&self, t: f64) -> TimeVaryingGraph {
        let mut g = self.static_graph.clone();
        g.t = t;
        g.nodes.extend(self.sats.iter().map(|s| s.id.clone()));
        for s in &self.sites {
            if s.cond.cloud {
                continue;
            }
            for (sat, vis) in s.visible.iter().enumerate() {
                if *vis {
                    let (_, range) = self.geometry(self.sites.iter().position(|x| x.id == s.id).unwrap_or(0), sat, t);
                    g.edges.push(EdgeState {
                        edge_id: fso_edge_id(&s.id, &self.sats[sat].id),
                        kind: EdgeKind::FsoGroundSat,
                        a: s.id.clone(),
                        b: self.sats[sat].id.clone(),
                        classical_capacity_bps: 1e9,
                        latency_s: range / SPEED_OF_LIGHT_KM_S,
                        current_eta: 0.0,
                        current_skr_bps: 0.0,
                        status: EdgeStatus::Up,
                        channel: None,
                    });
                }
            }
        }
        g
    }

    fn downlink_entry(&self, si: usize, sat: usize, t: f64) -> FlowTableEntry {
        let s = &self.sites[si];
        FlowTableEntry {
            flow_id: s.session.flow_id.clone(),
            path: vec![s.id.clone(), self.sats[sat].id.clone()],
            key_source: Some(s.store_id.clone()),
            active: true,
            installed_at: t,
        }
    }

    // ---- Tier 2 -------------------------------------------------------

    fn tier2(&mut self, t: f64) -> Result<()> {
        self.flow_events(t)?;
        for si in 0..self.sites.len() {
            self.manage_links(si, t)?;
        }
        let type_i_tick: f64 = self
            .flows
            .iter()
            .filter(|f| f.phase == FlowPhase::Active && f.demand.class == TrafficClass::TypeI)
            .map(|f| f.demand.data_rate_bps * self.dt)
            .sum();
        for si in 0..self.sites.len() {
            self.channel_step(si, t, type_i_tick);
        }
        for s in &mut self.sites {
            s.tick_consumed = 0.0;
            s.tick_flows = 0;
        }
        self.consume_keys(t);
        if self.kind.is_ai() {
            for s in &mut self.sites {
                if s.link.is_some() {
                    s.turbo.update(t, s.tick_consumed / self.dt, s.gen_bps);
                } else {
                    s.turbo = TurboTrigger::new(s.turbo.window_s, s.turbo.margin);
                }
            }
        }
        Ok(())
    }

    fn flow_events(&mut self, t: f64) -> Result<()> {
        let eps = 1e-9;
        for fi in 0..self.flows.len() {
            match self.flows[fi].phase {
                FlowPhase::Pending if t + eps >= self.flows[fi].demand.start_s => self.activate(fi, t)?,
                FlowPhase::Active if t + eps >= self.flows[fi].run_end => {
                    self.flows[fi].phase = FlowPhase::Done;
                    let id = self.flows[fi].demand.flow_id.clone();
                    if self.flows[fi].outage {
                        self.trace.push(t, Payload::KeyOutageEnd { flow_id: id.clone() });
                    }
                    self.table.remove(&id);
                    self.trace.push(t, Payload::FlowEnd { flow_id: id });
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn activate(&mut self, fi: usize, t: f64) -> Result<()> {
        let d = self.flows[fi].demand.clone();
        let intent = Intent {
            intent_id: d.flow_id.clone(),
            src: d.src.clone(),
            dst: d.dst.clone(),
            class: d.class,
            security_mode: d.class.spec().security_mode,
            priority: 0,
            residency_forbidden_regions: d.residency_forbidden_regions.clone(),
        };
        let policy = match translate_intent(&intent, &self.static_graph, &self.node_regions) {
            Ok(p) => p,
            Err(e) => {
                self.flows[fi].phase = FlowPhase::Done;
                self.trace.push(t, Payload::FlowRejected { flow_id: d.flow_id, reason: e.to_string() });
                return Ok(());
            }
        };
        let path = policy.candidate_paths[0].clone();
        let latency = self.static_graph.path_latency(&path).unwrap_or(0.0);
        let key_source = self.flows[fi].home.map(|h| self.sites[h].store_id.clone());
        install_flow(
            &mut self.table,
            FlowTableEntry { flow_id: d.flow_id.clone(), path: path.clone(), key_source, active: true, installed_at: t },
            &self.static_graph,
        )?;
        let f = &mut self.flows[fi];
        f.path_latency_s = latency;
        if let Some(classical) = f.rl_state.links.last_mut() {
            classical.latency_s = latency;
        }
        f.phase = FlowPhase::Active;
        self.trace.push(t, Payload::FlowStart { flow_id: d.flow_id.clone(), class: d.class, path, candidates: policy.candidate_paths.len() });
        if d.class == TrafficClass::TypeIV {
            self.schedule_bulk(fi, t);
        }
        Ok(())
    }

    /// Chooses when and where a bulk transfer runs.
    fn schedule_bulk(&mut self, fi: usize, t: f64) {
        let cfg = self.cfg;
        let d = self.flows[fi].demand.clone();
        let now_ci = self.truth.carbon().ci_at(&self.flows[fi].run_region, t).unwrap_or(0.0);
        let mut windows = Vec::new();
        if self.kind.carbon_aware() {
            // Only contacts inside the forecast horizon and the episode.
            let horizon = t + cfg.control.mpc_horizon_steps as f64 * cfg.ticks.tier1_s;
            let limit = d.deadline_s.unwrap_or(f64::INFINITY).min(horizon).min(cfg.duration_s);
            for (si, s) in self.sites.iter().enumerate() {
                if s.kind == SiteKind::Haps {
                    continue;
                }
                for w in s.windows.iter().filter(|w| w.t_set > t && w.t_rise < limit) {
                    let (a, b) = (w.t_rise.max(t), w.t_set.min(limit));
                    let mid = 0.5 * (a + b);
                    if self.forecast_conditions(si, mid).cloud {
                        continue;
                    }
                    let Some(ci) = self.feeds.as_ref().and_then(|f| f.ci_at(&s.region, a)) else { continue };
                    windows.push(DeferWindow { site_id: s.id.clone(), t_start: a, t_end: b, ci_gco2_per_kwh: ci, power_w: cfg.control.bulk_power_w });
                }
            }
        }
        let mut now = d.clone();
        now.start_s = t;
        let decision = carbon_aware_defer(&[now], &windows, now_ci, cfg.control.bulk_power_w).remove(0);
        let f = &mut self.flows[fi];
        f.run_start = decision.t_start;
        f.run_end = decision.t_end;
        if let Some(site) = &decision.site_id {
            if let Some(s) = cfg.site(site) {
                f.run_region = s.region_id.clone();
            }
            self.trace.push(
                t,
                Payload::BulkDeferred {
                    flow_id: d.flow_id,
                    site_id: decision.site_id.clone(),
                    run_at_s: decision.t_start,
                    forecast_grams: decision.forecast_grams,
                },
            );
        }
    }

    /// Acquisition, loss and handover of the optical link at one site.
    fn manage_links(&mut self, si: usize, t: f64) -> Result<()> {
        let cfg = self.cfg;
        let dt = self.dt;
        // Loss of the carrying link below the elevation mask.
        if let Some(sat) = self.sites[si].link.as_ref().map(|l| l.sat) {
            if !self.visible(si, sat) {
                let lat = self.sites[si].latency_s().unwrap_or(0.0);
                self.abort_mbb(si, t, "outgoing link lost")?;
                let s = &mut self.sites[si];
                s.link = None;
                s.lost = Some((t, lat));
                let flow = s.session.flow_id.clone();
                self.table.remove(&flow);
            }
        }
        // Acquisition in progress.
        if let Some((sat, ready)) = self.sites[si].acquiring {
            if !self.visible(si, sat) || self.sites[si].cond.cloud {
                self.sites[si].acquiring = None;
            } else if t + 1e-9 >= ready {
                self.sites[si].acquiring = None;
                if let Some(link) = self.new_link(si, sat, t) {
                    let graph = self.current_graph(t);
                    let entry = self.downlink_entry(si, sat, t);
                    install_flow(&mut self.table, entry, &graph)?;
                    let threshold = self.switch_threshold();
                    let s = &mut self.sites[si];
                    let link_id = fso_edge_id(&s.id, &self.sats[sat].id);
                    s.session = HandoverSession::new(s.session.flow_id.clone(), link_id, threshold);
                    let new_lat = link.range_km / SPEED_OF_LIGHT_KM_S;
                    s.link = Some(link);
                    if let Some((t_lost, old_lat)) = s.lost.take() {
                        if t - t_lost <= HANDOVER_GAP_S {
                            s.handovers += 1;
                            let session = format!("{}#{}", s.session.flow_id, s.handovers);
                            let p = Payload::HandoverDone {
                                session,
                                site_id: s.id.clone(),
                                outgoing: String::new(),
                                incoming: self.sats[sat].id.clone(),
                                make_before_break: false,
                                jitter_ms: 1e3 * (new_lat - old_lat).abs(),
                                downtime_s: t - t_lost,
                            };
                            self.trace.push(t, p);
                        }
                    }
                }
            }
        }
        // Cold start of a new link.
        if self.sites[si].link.is_none() && self.sites[si].acquiring.is_none() && !self.sites[si].cond.cloud {
            if let Some(sat) = self.pick_cold(si, t) {
                self.sites[si].acquiring = Some((sat, t + cfg.control.acquisition_s));
            }
        }
        if self.kind.is_ai() && self.sites[si].link.is_some() {
            self.drive_mbb(si, t, dt)?;
        }
        Ok(())
    }

    fn switch_threshold(&self) -> f64 {
        let type_i: f64 = self
            .flows
            .iter()
            .filter(|f| f.demand.class == TrafficClass::TypeI)
            .map(|f| f.demand.data_rate_bps)
            .fold(0.0, f64::max);
        self.cfg.control.critical_threshold_ticks * type_i * self.dt
    }

    fn sat_can_serve(&self, sat: usize) -> bool {
        self.sats[sat].soc_wh > self.cfg.sat_energy.reserve_wh
    }

    /// Satellite to acquire at an idle site.
    fn pick_cold(&self, si: usize, t: f64) -> Option<usize> {
        let usable = |sat: usize| self.visible(si, sat) && !self.sat_busy(sat) && self.sat_can_serve(sat);
        if self.kind.is_ai() {
            let site = &self.sites[si].id;
            (0..self.sats.len()).find(|&sat| {
                usable(sat)
                    && self.sats[sat].plan.as_ref().and_then(|p| p.downlink_at(t)).is_some_and(|(s, _)| s == site)
            })
        } else {
            if !self.baseline_serves(si) {
                return None;
            }
            (0..self.sats.len())
                .filter(|&sat| usable(sat))
                .map(|sat| (sat, self.geometry(si, sat, t).0))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(sat, _)| sat)
        }
    }

    /// The static baseline operates only the home stations of its flows.
    fn baseline_serves(&self, si: usize) -> bool {
        self.flows.iter().any(|f| f.home == Some(si))
    }

    fn abort_mbb(&mut self, si: usize, t: f64, reason: &str) -> Result<()> {
        let Some(run) = self.sites[si].mbb.take() else { return Ok(()) };
        self.sites[si].incoming = None;
        let phase = self.sites[si].session.phase;
        if matches!(phase, HandoverPhase::Predicted | HandoverPhase::PreEstablishing | HandoverPhase::BufferSync | HandoverPhase::StateTransferred) {
            let graph = TimeVaryingGraph::default();
            let s = mbb_step(&self.sites[si].session, &MbbEvent::IncomingFailed { t }, &mut self.table, &graph)?;
            self.sites[si].session = s;
            self.phase_record(si, t);
        }
        let site_id = self.sites[si].id.clone();
        self.trace.push(t, Payload::HandoverAborted { session: run.session, site_id, reason: reason.into() });
        Ok(())
    }

    fn phase_record(&mut self, si: usize, t: f64) {
        let s = &self.sites[si];
        let session = match &s.mbb {
            Some(r) => r.session.clone(),
            None => s.session.flow_id.clone(),
        };
        self.trace.push(t, Payload::HandoverPhase { session, site_id: s.id.clone(), phase: s.session.phase });
    }

    fn mbb_event(&mut self, si: usize, ev: MbbEvent, graph: &TimeVaryingGraph) -> Result<()> {
        let t = ev.time();
        let s = mbb_step(&self.sites[si].session, &ev, &mut self.table, graph)?;
        self.sites[si].session = s;
        self.phase_record(si, t);
        Ok(())
    }

    /// Finds the successor of the carrying satellite and the predicted
    /// switch time: the instant the two slant ranges match best.
    fn plan_mbb(&self, si: usize, t: f64) -> Option<MbbRun> {
        let s = &self.sites[si];
        let a = s.link.as_ref()?.sat;
        let a_id = &self.sats[a].id;
        let a_set = s.windows.iter().find(|w| &w.sat_id == a_id && w.t_rise <= t && t < w.t_set)?.t_set;
        let lead = self.cfg.control.handover_lead_s;
        let horizon = predict_handover_horizon(a_id, &s.id, &s.windows, t, lead)?;
        let wanted = |sat: usize, w: &ContactWindow| {
            self.sats[sat].plan.as_ref().is_some_and(|p| {
                p.actions.iter().any(|act| {
                    act.downlink().is_some_and(|(site, _)| site == s.id) && {
                        let (x, y) = act.interval();
                        x < w.t_set && y > w.t_rise
                    }
                })
            })
        };
        let (b, w) = s
            .windows
            .iter()
            .filter(|w| w.t_rise < a_set - 2.0 * self.dt && w.t_set > a_set && &w.sat_id != a_id)
            .filter_map(|w| self.sats.iter().position(|x| x.id == w.sat_id).map(|b| (b, w)))
            .filter(|(b, w)| wanted(*b, w) && !self.sat_busy(*b))
            .min_by(|x, y| x.1.t_rise.total_cmp(&y.1.t_rise))?;
        let mut best = (f64::INFINITY, a_set);
        let mut tau = w.t_rise.max(t);
        while tau < a_set {
            let d = (self.geometry(si, a, tau).1 - self.geometry(si, b, tau).1).abs();
            if d < best.0 {
                best = (d, tau);
            }
            tau += GEOMETRY_STEP_S;
        }
        let predict_at = (best.1 - lead).min(horizon).max(t);
        Some(MbbRun {
            incoming: b,
            predict_at,
            deadline: a_set - 2.0 * self.dt,
            session: format!("{}#{}", s.session.flow_id, s.handovers + 1),
            jitter_ms: None,
        })
    }

    fn drive_mbb(&mut self, si: usize, t: f64, dt: f64) -> Result<()> {
        use HandoverPhase::*;
        let on_second = (t / GEOMETRY_STEP_S - (t / GEOMETRY_STEP_S).round()).abs() < 1e-6;
        if self.sites[si].mbb.is_none() {
            if on_second && matches!(self.sites[si].session.phase, Idle | TornDown) {
                self.sites[si].mbb = self.plan_mbb(si, t);
            }
            if self.sites[si].mbb.is_none() {
                return Ok(());
            }
        }
        let (b, predict_at, deadline) = {
            let r = self.sites[si].mbb.as_ref().expect("checked");
            (r.incoming, r.predict_at, r.deadline)
        };
        let empty = TimeVaryingGraph::default();
        let phase = self.sites[si].session.phase;
        if phase != Idle && phase != TornDown && phase != Switched && self.sites[si].cond.cloud {
            return self.abort_mbb(si, t, "incoming link failed");
        }
        match phase {
            Idle | TornDown => {
                if t + 1e-9 >= predict_at {
                    let incoming = fso_edge_id(&self.sites[si].id, &self.sats[b].id);
                    self.mbb_event(si, MbbEvent::Predict { t, incoming }, &empty)?;
                }
            }
            Predicted => {
                if on_second && self.visible(si, b) && !self.sites[si].cond.cloud {
                    let (el, range) = self.geometry(si, b, t);
                    let s = &self.sites[si];
                    let geom = LinkGeometry {
                        link_id: fso_edge_id(&s.id, &self.sats[b].id),
                        range_km: range,
                        elevation_deg: el,
                        extinction_db_per_km: s.cond.extinction_db_per_km,
                        cloud: false,
                    };
                    let est = predict_snr(t, &geom, &self.cfg.terminal, &self.cfg.qkd, &s.kalman, self.snr_threshold_db)?;
                    if est.p_above_qkd_threshold >= 0.5 {
                        if let Some(link) = self.new_link(si, b, t) {
                            self.sites[si].incoming = Some(link);
                            self.mbb_event(si, MbbEvent::PreEstablish { t }, &empty)?;
                        }
                    }
                }
            }
            PreEstablishing => {
                let since = self.sites[si].incoming.as_ref().map_or(t, |l| l.since);
                let bits = self.sites[si].store.available_bits() as f64;
                if t - since >= self.cfg.control.buffer_sync_s - 1e-9 && bits >= self.sites[si].session.switch_threshold_bits {
                    self.mbb_event(si, MbbEvent::SyncBuffers { t, incoming_buffer_bits: bits }, &empty)?;
                    let a = self.sites[si].link.as_ref().expect("carrying").sat;
                    let isl = norm(sub(self.eph.pos(a, t), self.eph.pos(b, t)));
                    let checkpoint = SessionCheckpoint { packets_sent: (t / dt).round() as u64, iv_counter: self.sites[si].handovers };
                    let ev = MbbEvent::TransferState {
                        t,
                        isl_distance_km: isl,
                        serialization_s: self.cfg.control.state_transfer_serialization_s,
                        checkpoint,
                    };
                    self.mbb_event(si, ev, &empty)?;
                }
            }
            StateTransferred => {
                let ready = self.sites[si].session.entered(StateTransferred).unwrap_or(t);
                let lat_a = self.sites[si].latency_s().unwrap_or(0.0);
                let lat_b = self.sites[si].incoming.as_ref().map_or(lat_a, |l| l.range_km / SPEED_OF_LIGHT_KM_S);
                let step = (lat_b - lat_a).abs();
                if t + 1e-12 >= ready && (step <= self.cfg.control.switch_jitter_budget_s || t + 1e-9 >= deadline) {
                    let bits = self.sites[si].store.available_bits() as f64;
                    let graph = self.current_graph(t);
                    let entry = self.downlink_entry(si, b, t);
                    self.mbb_event(si, MbbEvent::Switch { t, incoming_buffer_bits: bits, entry }, &graph)?;
                    let s = &mut self.sites[si];
                    s.link = s.incoming.take();
                    if let Some(r) = s.mbb.as_mut() {
                        r.jitter_ms = Some(1e3 * step);
                    }
                }
            }
            Switched => {
                self.mbb_event(si, MbbEvent::TearDown { t }, &empty)?;
                let run = self.sites[si].mbb.take().expect("handover running");
                let s = &mut self.sites[si];
                s.handovers += 1;
                let outgoing = s.session.outgoing.clone();
                let incoming = s.session.carrying.clone();
                let p = Payload::HandoverDone {
                    session: run.session,
                    site_id: s.id.clone(),
                    outgoing,
                    incoming,
                    make_before_break: true,
                    jitter_ms: run.jitter_ms.unwrap_or(0.0),
                    downtime_s: 0.0,
                };
                self.trace.push(t, p);
            }
            BufferSync => {}
        }
        Ok(())
    }

    /// Samples the links of one site, feeds the key store and steps the
    /// fallback machine.
    fn channel_step(&mut self, si: usize, t: f64, type_i_tick_bits: f64) {
        let cfg = self.cfg;
        let dt = self.dt;
        let level = self.laser_level(si, t);
        let site = &mut self.sites[si];
        let rng = &mut self.channel_rngs[si];
        let mut generated = 0.0;
        let mut primary: Option<ChannelSample> = None;
        if site.link.is_some() || site.incoming.is_some() {
            site.acc_active_s += dt;
        }
        for which in 0..2 {
            let link = if which == 0 { site.link.as_mut() } else { site.incoming.as_mut() };
            let Some(link) = link else { continue };
            let irradiance = link.process.next(rng);
            let offset = sample_pointing_error(cfg.terminal.pointing_jitter_urad, rng);
            let sample = evaluate_fso_link(&cfg.qkd, &link.setup.inputs, link.setup.sigma_r2, site.cond.cloud, irradiance, offset, level);
            link.last = Some(sample);
            let sat = &mut self.sats[link.sat];
            sat.acc_dl_s += dt;
            sat.acc_dl_level_s += dt * level;
            site.acc_link_s += dt;
            if which == 0 {
                primary = Some(sample);
            }
            if site.fallback.mode == FallbackMode::FsoOk && sample.beacon {
                generated += sample.skr_bps * dt;
                site.acc_qkd_s += dt;
            }
        }
        if let Some(sample) = primary {
            let obs = LinkObservables {
                t,
                qber: sample.qber,
                beacon: sample.beacon,
                snr_db: sample.snr_db,
                key_buffer_bits: site.store.available_bits() as f64,
                tick_demand_bits: type_i_tick_bits,
            };
            let next = fallback_step(&site.fallback, &obs, &cfg.control.fallback);
            if next.mode != site.fallback.mode {
                let p = Payload::Fallback { site_id: site.id.clone(), from: site.fallback.mode, to: next.mode };
                self.trace.push(t, p);
            }
            site.fallback = next;
            site.acc_skr += generated / dt;
            site.acc_skr_n += 1;
        }
        site.gen_bps = generated / dt;
        if generated > 0.0 {
            site.store.generate(generated, t);
        }
    }

    /// Laser power factor of a site's downlink: the planned level, raised
    /// to turbo while consumption outpaces generation.
    fn laser_level(&self, si: usize, t: f64) -> f64 {
        if !self.kind.is_ai() {
            return LaserLevel::Nominal.power_factor();
        }
        let s = &self.sites[si];
        let planned = s
            .link
            .as_ref()
            .and_then(|l| self.sats[l.sat].plan.as_ref())
            .and_then(|p| p.downlink_at(t))
            .filter(|(site, _)| *site == s.id)
            .map_or(1.0, |(_, level)| level);
        if s.turbo.active {
            planned.max(LaserLevel::Turbo.power_factor())
        } else {
            planned
        }
    }

    fn class_acc(&mut self, class: TrafficClass) -> &mut ClassTick {
        self.acc.classes.entry(class).or_default()
    }

    fn consume_keys(&mut self, t: f64) {
        let dt = self.dt;
        for fi in 0..self.flows.len() {
            if self.flows[fi].phase != FlowPhase::Active {
                continue;
            }
            let class = self.flows[fi].demand.class;
            match class {
                TrafficClass::TypeI => self.type_i_tick(fi, t),
                TrafficClass::TypeII | TrafficClass::TypeIII => self.rekeyed_tick(fi, t),
                TrafficClass::TypeIV => {
                    let f = &self.flows[fi];
                    if t + 1e-9 < f.run_start {
                        continue;
                    }
                    let bits = f.demand.data_rate_bps * dt;
                    let ci = self.truth.carbon().ci_at(&f.run_region, t).unwrap_or(0.0);
                    self.acc.bulk_carbon_g += self.cfg.control.bulk_power_w * ci * dt / 3.6e6;
                    let c = self.class_acc(class);
                    c.active_ticks += 1;
                    c.keyed_ticks += 1;
                    c.demand_bits += bits;
                    c.secure_bits += bits;
                }
            }
        }
    }

    fn type_i_tick(&mut self, fi: usize, t: f64) {
        let dt = self.dt;
        let demand = self.flows[fi].demand.data_rate_bps * dt;
        let need_f = self.flows[fi].carry_bits + demand;
        let need = need_f.floor() as u64;
        // Chosen store (site index) or None for classical/failsafe.
        let mut choice: Option<usize> = None;
        let mut carried = true;
        if let Some(policy) = &self.policy {
            let scale = self.cfg.control.skr_scale_bps;
            let f = &mut self.flows[fi];
            for (k, (si, _)) in f.candidates.iter().enumerate() {
                let s = &self.sites[*si];
                let l = &mut f.rl_state.links[k];
                l.key_buffer_bits = s.store.available_bits() as f64;
                l.link_quality = s.quality(scale);
                l.queue_depth_bits = s.tick_consumed;
                l.neighbor_load = s.tick_flows as f64 / 4.0;
            }
            let action = RlAction { next_hop_weights: policy.hop_probabilities(&f.rl_state), laser: LaserLevel::Nominal };
            let decision = shield_filter(&f.rl_state, &action, &f.rules);
            match &decision {
                ShieldDecision::Pass { .. } => self.acc.shield.pass += 1,
                ShieldDecision::Masked { .. } => self.acc.shield.masked += 1,
                ShieldDecision::Classical { .. } => self.acc.shield.classical += 1,
                ShieldDecision::Failsafe { .. } => self.acc.shield.failsafe += 1,
            }
            match decision.action().and_then(|a| argmax(&a.next_hop_weights)) {
                Some(k) if k < f.candidates.len() => choice = Some(f.candidates[k].0),
                Some(_) => {}
                None => carried = false,
            }
        } else {
            choice = self.flows[fi].home;
        }
        let mut keyed = false;
        let mut unsafe_now = false;
        if let Some(si) = choice {
            let buffer = self.sites[si].store.available_bits() as f64;
            let starved = self.flows[fi]
                .rules
                .rules
                .iter()
                .any(|r| r.class == TrafficClass::TypeI && buffer < r.critical_threshold_bits);
            let s = &mut self.sites[si];
            if starved {
                unsafe_now = true;
            }
            if s.store.consume(need) {
                keyed = true;
                s.tick_consumed += need as f64;
            } else {
                unsafe_now = true;
            }
            s.tick_flows += 1;
        }
        let f = &mut self.flows[fi];
        f.carry_bits = if keyed { need_f - need as f64 } else { f.carry_bits };
        let latency = f.path_latency_s;
        let flow_id = f.demand.flow_id.clone();
        let (was_out, was_unsafe) = (f.outage, f.unsafe_now);
        f.outage = !keyed;
        f.unsafe_now = unsafe_now;
        if !keyed && !was_out {
            let site_id = choice.map(|si| self.sites[si].id.clone());
            self.trace.push(t, Payload::KeyOutageStart { flow_id: flow_id.clone(), site_id });
        } else if keyed && was_out {
            self.trace.push(t, Payload::KeyOutageEnd { flow_id: flow_id.clone() });
        }
        if unsafe_now && !was_unsafe {
            let link = choice.map(|si| self.sites[si].store_id.clone()).unwrap_or_default();
            self.trace.push(t, Payload::UnsafeSchedule { flow_id, link });
        }
        let target = TrafficClass::TypeI.spec().latency_target_s;
        let c = self.class_acc(TrafficClass::TypeI);
        c.active_ticks += 1;
        c.demand_bits += demand;
        if keyed {
            c.keyed_ticks += 1;
            c.secure_bits += demand;
        } else {
            c.outage_ticks += 1;
        }
        if unsafe_now {
            c.unsafe_ticks += 1;
        }
        if carried {
            c.carried_ticks += 1;
            c.latency_sum_s += latency;
            c.max_latency_s = c.max_latency_s.max(latency);
            if latency > target {
                c.slo_violation_ticks += 1;
            }
        }
    }

    /// Periodically rekeyed classes, carried over a satellite when a
    /// station link is up and over fiber otherwise.
    fn rekeyed_tick(&mut self, fi: usize, t: f64) {
        let dt = self.dt;
        let (class, rate, start) = {
            let d = &self.flows[fi].demand;
            (d.class, d.data_rate_bps, d.start_s)
        };
        let spec = class.spec();
        let first = t - dt < start + 1e-12;
        let mut need = spec.key_demand_bits(rate, start, t - dt, t);
        if first {
            if let crate::netmodel::KeyConsumption::Periodic { bits, .. } = spec.key_consumption {
                need = bits as f64;
            }
        }
        if !self.flows[fi].keyed && need == 0.0 {
            if let crate::netmodel::KeyConsumption::Periodic { bits, .. } = spec.key_consumption {
                need = bits as f64;
            }
        }
        let store = if self.policy.is_some() {
            self.flows[fi]
                .candidates
                .iter()
                .map(|c| c.0)
                .max_by(|a, b| self.sites[*a].store.available_bits().cmp(&self.sites[*b].store.available_bits()).then(b.cmp(a)))
        } else {
            self.flows[fi].home
        };
        if need > 0.0 {
            let ok = store.is_some_and(|si| self.sites[si].store.consume(need as u64));
            self.flows[fi].keyed = ok;
        }
        // Data path.
        let backhaul = self.cfg.control.backhaul_latency_s;
        let via = |si: usize| -> Option<f64> {
            let s = &self.sites[si];
            if s.fallback.mode == FallbackMode::Failsafe {
                return None;
            }
            s.latency_s()
        };
        let sat_path = if self.policy.is_some() {
            self.flows[fi]
                .candidates
                .iter()
                .filter_map(|(si, fl)| via(*si).map(|l| (fl + l + backhaul, *si)))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        } else {
            self.flows[fi].home.and_then(|h| {
                let fl = self.flows[fi].candidates.iter().find(|c| c.0 == h).map_or(0.0, |c| c.1);
                via(h).map(|l| (fl + l + backhaul, h))
            })
        };
        let latency = sat_path.map_or(self.flows[fi].path_latency_s, |p| p.0);
        let throttle = match (class, sat_path) {
            (TrafficClass::TypeIII, Some((_, si))) => self.laser_level(si, t).min(1.0),
            _ => 1.0,
        };
        let keyed = self.flows[fi].keyed;
        let bits = rate * dt;
        let c = self.class_acc(class);
        c.active_ticks += 1;
        c.demand_bits += bits;
        if keyed {
            c.keyed_ticks += 1;
            c.secure_bits += bits * throttle;
        } else {
            c.outage_ticks += 1;
        }
        c.carried_ticks += 1;
        c.latency_sum_s += latency;
        c.max_latency_s = c.max_latency_s.max(latency);
        if latency > spec.latency_target_s {
            c.slo_violation_ticks += 1;
        }
    }
}
