//! Tier-2 routing agent: reward shaping, the safety shield, a linear softmax
//! policy trained by REINFORCE on a small routing toy, and the static
//! shortest-path baseline.
//!
//! The reward coefficients carry an `_r` suffix so they are not confused
//! with the Gamma-Gamma α/β or the objective discount γ.

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{shortest_path, EdgeStatus, TimeVaryingGraph, TrafficClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub alpha_r: f64,
    pub beta_r: f64,
    pub gamma_r: f64,
    pub delta_r: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { alpha_r: 1.0, beta_r: 0.1, gamma_r: 0.01, delta_r: 100.0 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha_r, self.beta_r, self.gamma_r, self.delta_r].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::param("reward_weights", "must be non-negative"));
        }
        Ok(())
    }
}

/// Outcome of one decision, in the units the reward expects: latency in ms,
/// carbon in grams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub skr_meas: f64,
    pub skr_target: f64,
    pub latency: f64,
    pub carbon: f64,
    pub key_outage: bool,
}

/// r = α·SKR_meas/SKR_target − β·latency − γ·carbon − δ·1[outage].
pub fn reward(t: &Transition, w: &RewardWeights) -> f64 {
    let ratio = if t.skr_target > 0.0 { t.skr_meas / t.skr_target } else { 0.0 };
    w.alpha_r * ratio - w.beta_r * t.latency - w.gamma_r * t.carbon - if t.key_outage { w.delta_r } else { 0.0 }
}

/// Observables of one candidate next hop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkFeatures {
    pub link_id: String,
    /// The hop draws one-time-pad key from a QKD store.
    pub keyed: bool,
    pub queue_depth_bits: f64,
    /// Channel efficiency proxy in [0, 1].
    pub link_quality: f64,
    pub key_buffer_bits: f64,
    pub neighbor_load: f64,
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlState {
    pub links: Vec<LinkFeatures>,
    pub head_class: TrafficClass,
}

/// Normalization constants for policy inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureScales {
    pub queue_bits: f64,
    pub key_bits: f64,
    pub latency_s: f64,
}

impl Default for FeatureScales {
    fn default() -> Self {
        Self { queue_bits: 1e6, key_bits: 2e4, latency_s: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaserLevel {
    Low,
    Nominal,
    Turbo,
}

impl LaserLevel {
    pub const ALL: [LaserLevel; 3] = [LaserLevel::Low, LaserLevel::Nominal, LaserLevel::Turbo];

    /// Transmit power relative to nominal.
    pub fn power_factor(self) -> f64 {
        match self {
            LaserLevel::Low => 0.5,
            LaserLevel::Nominal => 1.0,
            LaserLevel::Turbo => 1.5,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlAction {
    pub next_hop_weights: Vec<f64>,
    pub laser: LaserLevel,
}

impl RlAction {
    pub fn is_valid(&self) -> bool {
        let s: f64 = self.next_hop_weights.iter().sum();
        self.next_hop_weights.iter().all(|w| *w >= 0.0 && w.is_finite()) && (s - 1.0).abs() <= 1e-9
    }

    /// Index of the largest weight, first on ties.
    pub fn argmax(&self) -> Option<usize> {
        self.next_hop_weights
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, w)| match best {
                Some((_, bw)) if bw >= *w => best,
                _ => Some((i, *w)),
            })
            .map(|(i, _)| i)
    }

    /// Draws a hop index from the weights.
    pub fn sample_hop<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        if self.next_hop_weights.is_empty() {
            return None;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.next_hop_weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return Some(i);
            }
        }
        self.next_hop_weights.iter().rposition(|w| *w > 0.0)
    }
}

/// One shield predicate: for flows of `class`, keyed hops whose buffer is
/// below `critical_threshold_bits` must not be scheduled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShieldRule {
    pub class: TrafficClass,
    pub critical_threshold_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShieldRuleSet {
    pub rules: Vec<ShieldRule>,
}

impl ShieldRuleSet {
    /// The canonical Type-I rule alone.
    pub fn canonical(critical_threshold_bits: f64) -> Self {
        Self { rules: vec![ShieldRule { class: TrafficClass::TypeI, critical_threshold_bits }] }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rules.iter().any(|r| r.class == TrafficClass::TypeI) {
            return Err(Error::param("shield", "the Type-I key-buffer rule is mandatory"));
        }
        Ok(())
    }

    /// True when scheduling `class` on `link` breaks a rule.
    pub fn forbids(&self, class: TrafficClass, link: &LinkFeatures) -> bool {
        link.keyed
            && self
                .rules
                .iter()
                .any(|r| r.class == class && link.key_buffer_bits < r.critical_threshold_bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ShieldDecision {
    Pass { action: RlAction },
    /// Starved hops removed from the proposal.
    Masked { action: RlAction, rule: usize },
    /// No safe keyed hop left; the flow goes over a classical link.
    Classical { action: RlAction, rule: usize },
    /// Neither a safe keyed hop nor a classical link exists.
    Failsafe { rule: usize },
}

impl ShieldDecision {
    pub fn action(&self) -> Option<&RlAction> {
        match self {
            ShieldDecision::Pass { action }
            | ShieldDecision::Masked { action, .. }
            | ShieldDecision::Classical { action, .. } => Some(action),
            ShieldDecision::Failsafe { .. } => None,
        }
    }
}

/// Validates a proposed action. Forbidden hops are zeroed and the rest
/// renormalized; if nothing safe remains, the weight moves to classical
/// links, and without those the decision escalates to failsafe.
pub fn shield_filter(state: &RlState, proposed: &RlAction, rules: &ShieldRuleSet) -> ShieldDecision {
    let forbidden: Vec<bool> = state.links.iter().map(|l| rules.forbids(state.head_class, l)).collect();
    let touches = proposed
        .next_hop_weights
        .iter()
        .zip(&forbidden)
        .any(|(w, f)| *f && *w > 0.0);
    if !touches {
        return ShieldDecision::Pass { action: proposed.clone() };
    }
    let rule = rules
        .rules
        .iter()
        .position(|r| r.class == state.head_class)
        .expect("a rule forbade a hop");
    let kept: Vec<f64> = proposed
        .next_hop_weights
        .iter()
        .zip(&forbidden)
        .map(|(w, f)| if *f { 0.0 } else { *w })
        .collect();
    let total: f64 = kept.iter().sum();
    if total > 0.0 {
        let weights = kept.iter().map(|w| w / total).collect();
        return ShieldDecision::Masked { action: RlAction { next_hop_weights: weights, laser: proposed.laser }, rule };
    }
    let classical: Vec<bool> = state.links.iter().map(|l| !l.keyed).collect();
    let n = classical.iter().filter(|c| **c).count();
    if n == 0 {
        return ShieldDecision::Failsafe { rule };
    }
    let weights = classical.iter().map(|c| if *c { 1.0 / n as f64 } else { 0.0 }).collect();
    ShieldDecision::Classical { action: RlAction { next_hop_weights: weights, laser: proposed.laser }, rule }
}

const HOP_FEATURES: usize = 7;
const LASER_FEATURES: usize = 3;

/// Softmax policy with scores linear in normalized hop features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub hop_theta: [f64; HOP_FEATURES],
    pub laser_theta: [[f64; LASER_FEATURES]; 3],
    pub scales: FeatureScales,
}

impl Default for LinearPolicy {
    fn default() -> Self {
        Self { hop_theta: [0.0; HOP_FEATURES], laser_theta: [[0.0; LASER_FEATURES]; 3], scales: FeatureScales::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    /// Weights are the softmax distribution; the laser level is sampled.
    Sample,
    /// One-hot on the best hop; the laser level is the argmax.
    Greedy,
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

impl LinearPolicy {
    fn hop_features(&self, link: &LinkFeatures, class: TrafficClass) -> [f64; HOP_FEATURES] {
        let s = &self.scales;
        let keyed = if link.keyed { 1.0 } else { 0.0 };
        let otp = if class == TrafficClass::TypeI { 1.0 } else { 0.0 };
        [
            link.link_quality.clamp(0.0, 1.0),
            keyed * (link.key_buffer_bits / s.key_bits).clamp(0.0, 1.0),
            (link.queue_depth_bits / s.queue_bits).clamp(0.0, 1.0),
            link.neighbor_load.clamp(0.0, 1.0),
            keyed,
            (link.latency_s / s.latency_s).clamp(0.0, 1.0),
            (1.0 - keyed) * otp,
        ]
    }

    fn laser_features(&self, state: &RlState) -> [f64; LASER_FEATURES] {
        let keyed: Vec<&LinkFeatures> = state.links.iter().filter(|l| l.keyed).collect();
        if keyed.is_empty() {
            return [1.0, 0.0, 0.0];
        }
        let n = keyed.len() as f64;
        let fill = keyed.iter().map(|l| (l.key_buffer_bits / self.scales.key_bits).clamp(0.0, 1.0)).sum::<f64>() / n;
        let q = keyed.iter().map(|l| l.link_quality.clamp(0.0, 1.0)).sum::<f64>() / n;
        [1.0, fill, q]
    }

    pub fn hop_probabilities(&self, state: &RlState) -> Vec<f64> {
        let scores: Vec<f64> = state
            .links
            .iter()
            .map(|l| dot(&self.hop_theta, &self.hop_features(l, state.head_class)))
            .collect();
        softmax(&scores)
    }

    pub fn laser_probabilities(&self, state: &RlState) -> Vec<f64> {
        let f = self.laser_features(state);
        softmax(&self.laser_theta.iter().map(|t| dot(t, &f)).collect::<Vec<_>>())
    }

    fn is_finite(&self) -> bool {
        self.hop_theta.iter().chain(self.laser_theta.iter().flatten()).all(|v| v.is_finite())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maps a state to an action.
pub fn policy_act<R: Rng + ?Sized>(policy: &LinearPolicy, state: &RlState, mode: ActMode, rng: &mut R) -> RlAction {
    let probs = policy.hop_probabilities(state);
    let lp = policy.laser_probabilities(state);
    match mode {
        ActMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut level = LaserLevel::Turbo;
            for (i, p) in lp.iter().enumerate() {
                acc += p;
                if u < acc {
                    level = LaserLevel::ALL[i];
                    break;
                }
            }
            RlAction { next_hop_weights: probs, laser: level }
        }
        ActMode::Greedy => {
            let best = argmax(&probs);
            let weights = (0..probs.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect();
            RlAction { next_hop_weights: weights, laser: LaserLevel::ALL[argmax(&lp)] }
        }
    }
}

/// Routing toy used to train the agent: a source with two keyed FSO hops
/// and one classical fiber hop towards the same destination (five nodes in
/// total). Hop qualities follow AR(1) fading; keyed hops refill their
/// buffers at a quality-dependent key rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub steps_per_episode: usize,
    pub tick_s: f64,
    /// Key rate of each keyed hop at quality 1, bit/s.
    pub skr_bps: [f64; 2],
    pub latency_s: [f64; 3],
    pub mean_quality: [f64; 2],
    pub fade_rho: f64,
    pub fade_sigma: f64,
    pub initial_key_bits: f64,
    pub buffer_cap_bits: f64,
    /// Key demand of the two traffic classes offered, bit/s.
    pub type_i_key_bps: f64,
    pub type_ii_key_bps: f64,
    pub type_i_share: f64,
    /// Carbon charged per tick at nominal laser power, g.
    pub laser_grams_per_tick: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            steps_per_episode: 200,
            tick_s: 0.01,
            skr_bps: [12_000.0, 6_000.0],
            latency_s: [0.004, 0.005, 0.001],
            mean_quality: [0.6, 0.8],
            fade_rho: 0.95,
            fade_sigma: 0.15,
            initial_key_bits: 200.0,
            buffer_cap_bits: 20_000.0,
            type_i_key_bps: 6_000.0,
            type_ii_key_bps: 1_000.0,
            type_i_share: 0.7,
            laser_grams_per_tick: 1.0,
        }
    }
}

impl ToyConfig {
    /// Default critical threshold: two ticks of Type-I demand.
    pub fn critical_threshold_bits(&self) -> f64 {
        2.0 * self.type_i_key_bps * self.tick_s
    }
}

/// Mutable toy state.
#[derive(Debug, Clone)]
pub struct ToyEnv {
    pub cfg: ToyConfig,
    quality: [f64; 2],
    buffers: [f64; 2],
    class: TrafficClass,
    step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyStep {
    pub reward: f64,
    pub key_outage: bool,
    /// A Type-I demand was scheduled on a keyed hop below the threshold.
    pub unsafe_type_i: bool,
    pub done: bool,
}

impl ToyEnv {
    pub fn new<R: Rng + ?Sized>(cfg: ToyConfig, rng: &mut R) -> Self {
        let mut env = Self {
            quality: cfg.mean_quality,
            buffers: [cfg.initial_key_bits; 2],
            class: TrafficClass::TypeI,
            step: 0,
            cfg,
        };
        env.draw_class(rng);
        env
    }

    fn draw_class<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.class = if rng.random::<f64>() < self.cfg.type_i_share { TrafficClass::TypeI } else { TrafficClass::TypeII };
    }

    fn demand_bits(&self) -> f64 {
        let rate = if self.class == TrafficClass::TypeI { self.cfg.type_i_key_bps } else { self.cfg.type_ii_key_bps };
        rate * self.cfg.tick_s
    }

    pub fn state(&self) -> RlState {
        let c = &self.cfg;
        let mut links: Vec<LinkFeatures> = (0..2)
            .map(|i| LinkFeatures {
                link_id: format!("fso-{i}"),
                keyed: true,
                queue_depth_bits: 0.0,
                link_quality: self.quality[i],
                key_buffer_bits: self.buffers[i],
                neighbor_load: 0.3,
                latency_s: c.latency_s[i],
            })
            .collect();
        links.push(LinkFeatures {
            link_id: "fiber".into(),
            keyed: false,
            queue_depth_bits: 0.0,
            link_quality: 1.0,
            key_buffer_bits: 0.0,
            neighbor_load: 0.3,
            latency_s: c.latency_s[2],
        });
        RlState { links, head_class: self.class }
    }

    /// Executes hop `hop` with laser level `laser`.
    pub fn step<R: Rng + ?Sized>(&mut self, hop: usize, laser: LaserLevel, w: &RewardWeights, rng: &mut R) -> ToyStep {
        let c = self.cfg.clone();
        let demand = self.demand_bits();
        let threshold = c.critical_threshold_bits();
        let mut key_outage = false;
        let mut unsafe_type_i = false;
        let mut delivered = 0.0;
        if hop < 2 {
            if self.class == TrafficClass::TypeI && self.buffers[hop] < threshold {
                unsafe_type_i = true;
            }
            if self.buffers[hop] >= demand {
                self.buffers[hop] -= demand;
                delivered = demand;
            } else {
                key_outage = true;
            }
        }
        let t = Transition {
            skr_meas: delivered / c.tick_s,
            skr_target: demand / c.tick_s,
            latency: c.latency_s[hop.min(2)] * 1e3,
            carbon: c.laser_grams_per_tick * laser.power_factor(),
            key_outage,
        };
        let r = reward(&t, w);
        for i in 0..2 {
            let z: f64 = StandardNormal.sample(rng);
            let q = c.mean_quality[i] + c.fade_rho * (self.quality[i] - c.mean_quality[i]) + c.fade_sigma * z;
            self.quality[i] = q.clamp(0.0, 1.0);
            let gen = c.skr_bps[i] * self.quality[i] * laser.power_factor() * c.tick_s;
            self.buffers[i] = (self.buffers[i] + gen).min(c.buffer_cap_bits);
        }
        self.step += 1;
        self.draw_class(rng);
        ToyStep { reward: r, key_outage, unsafe_type_i, done: self.step >= c.steps_per_episode }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub learning_rate: f64,
    pub discount: f64,
    pub shield: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { episodes: 300, learning_rate: 0.01, discount: 0.95, shield: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub mean_return: f64,
    pub outage_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub policy: LinearPolicy,
    pub curve: Vec<CurvePoint>,
    /// Type-I decisions onto starved keyed hops over all training episodes.
    pub unsafe_type_i: usize,
}

struct Grad {
    hop: [f64; HOP_FEATURES],
    laser: [[f64; LASER_FEATURES]; 3],
}

/// Totals of one or more toy episodes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeStats {
    pub total_return: f64,
    pub key_outages: usize,
    pub type_i_key_outages: usize,
    pub unsafe_type_i: usize,
}

/// Runs one episode; returns its totals and the per-step score-function
/// gradients with rewards.
fn run_episode(
    policy: &LinearPolicy,
    cfg: &ToyConfig,
    w: &RewardWeights,
    shield: Option<&ShieldRuleSet>,
    mode: ActMode,
    rng: &mut ChaCha8Rng,
) -> (EpisodeStats, Vec<(Grad, f64)>) {
    let mut env = ToyEnv::new(cfg.clone(), rng);
    let mut stats = EpisodeStats::default();
    let mut steps = Vec::with_capacity(cfg.steps_per_episode);
    loop {
        let state = env.state();
        let proposed = policy_act(policy, &state, mode, rng);
        let (action, masked) = match shield.map(|s| shield_filter(&state, &proposed, s)) {
            None | Some(ShieldDecision::Pass { .. }) => (proposed.clone(), false),
            Some(ShieldDecision::Masked { action, .. }) => (action, false),
            Some(ShieldDecision::Classical { action, .. }) => (action, true),
            Some(ShieldDecision::Failsafe { .. }) => unreachable!("the toy always has a classical hop"),
        };
        let hop = match mode {
            ActMode::Greedy => action.argmax().expect("non-empty"),
            ActMode::Sample => action.sample_hop(rng).expect("non-empty"),
        };
        let out = env.step(hop, action.laser, w, rng);
        stats.total_return += out.reward;
        stats.key_outages += out.key_outage as usize;
        stats.type_i_key_outages += (out.key_outage && state.head_class == TrafficClass::TypeI) as usize;
        stats.unsafe_type_i += out.unsafe_type_i as usize;

        // ∇ log π over the hops the shield left available.
        let mut g = Grad { hop: [0.0; HOP_FEATURES], laser: [[0.0; LASER_FEATURES]; 3] };
        if !masked {
            let allowed: Vec<usize> =
                (0..state.links.len()).filter(|i| action.next_hop_weights[*i] > 0.0 || *i == hop).collect();
            let feats: Vec<[f64; HOP_FEATURES]> =
                allowed.iter().map(|i| policy.hop_features(&state.links[*i], state.head_class)).collect();
            let scores: Vec<f64> = feats.iter().map(|f| dot(&policy.hop_theta, f)).collect();
            let p = softmax(&scores);
            let chosen = allowed.iter().position(|i| *i == hop).expect("chosen hop allowed");
            for (j, f) in feats.iter().enumerate() {
                let coef = if j == chosen { 1.0 } else { 0.0 } - p[j];
                for k in 0..HOP_FEATURES {
                    g.hop[k] += coef * f[k];
                }
            }
        }
        let lf = policy.laser_features(&state);
        let lp = policy.laser_probabilities(&state);
        for (a, pa) in lp.iter().enumerate() {
            let coef = if a == action.laser.index() { 1.0 } else { 0.0 } - pa;
            for k in 0..LASER_FEATURES {
                g.laser[a][k] += coef * lf[k];
            }
        }
        steps.push((g, out.reward));
        if out.done {
            break;
        }
    }
    (stats, steps)
}

/// Trains the policy with REINFORCE (discounted returns-to-go, running-mean
/// baseline). The shield filters every exploratory action when enabled.
pub fn train(
    initial: &LinearPolicy,
    toy: &ToyConfig,
    w: &RewardWeights,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    w.validate()?;
    let shield = ShieldRuleSet::canonical(toy.critical_threshold_bits());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = initial.clone();
    let mut curve = Vec::with_capacity(cfg.episodes);
    let mut unsafe_total = 0;
    let mut baseline: Option<f64> = None;
    for episode in 0..cfg.episodes {
        let (stats, steps) = run_episode(&policy, toy, w, cfg.shield.then_some(&shield), ActMode::Sample, &mut rng);
        let (ret, outages, unsafe_count) = (stats.total_return, stats.key_outages, stats.unsafe_type_i);
        if !ret.is_finite() {
            return Err(Error::Diverged { episode, detail: format!("episode return {ret}") });
        }
        unsafe_total += unsafe_count;
        curve.push(CurvePoint { episode, mean_return: ret, outage_count: outages });
        // Returns-to-go.
        let mut g_t = vec![0.0; steps.len()];
        let mut acc = 0.0;
        for (i, (_, r)) in steps.iter().enumerate().rev() {
            acc = r + cfg.discount * acc;
            g_t[i] = acc;
        }
        let mean = g_t.iter().sum::<f64>() / g_t.len().max(1) as f64;
        let b = *baseline.get_or_insert(mean);
        let scale = cfg.learning_rate / steps.len().max(1) as f64;
        for ((g, _), gt) in steps.iter().zip(&g_t) {
            let adv = (gt - b).clamp(-1e3, 1e3);
            for k in 0..HOP_FEATURES {
                policy.hop_theta[k] += scale * adv * g.hop[k];
            }
            for a in 0..3 {
                for k in 0..LASER_FEATURES {
                    policy.laser_theta[a][k] += scale * adv * g.laser[a][k];
                }
            }
        }
        baseline = Some(0.9 * b + 0.1 * mean);
        if !policy.is_finite() {
            return Err(Error::Diverged { episode, detail: "non-finite policy parameters".into() });
        }
    }
    Ok(TrainOutcome { policy, curve, unsafe_type_i: unsafe_total })
}

/// Mean episode return of a policy on the toy.
pub fn evaluate(policy: &LinearPolicy, toy: &ToyConfig, w: &RewardWeights, mode: ActMode, episodes: usize, seed: u64) -> f64 {
    evaluate_stats(policy, toy, w, mode, episodes, seed).total_return / episodes.max(1) as f64
}

/// Shielded evaluation totals summed over `episodes`.
pub fn evaluate_stats(
    policy: &LinearPolicy,
    toy: &ToyConfig,
    w: &RewardWeights,
    mode: ActMode,
    episodes: usize,
    seed: u64,
) -> EpisodeStats {
    let shield = ShieldRuleSet::canonical(toy.critical_threshold_bits());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = EpisodeStats::default();
    for _ in 0..episodes {
        let (s, _) = run_episode(policy, toy, w, Some(&shield), mode, &mut rng);
        acc.total_return += s.total_return;
        acc.key_outages += s.key_outages;
        acc.type_i_key_outages += s.type_i_key_outages;
        acc.unsafe_type_i += s.unsafe_type_i;
    }
    acc
}

/// Writes `episode,mean_return,outage_count` rows.
pub fn write_learning_curve<W: Write>(curve: &[CurvePoint], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for p in curve {
        wtr.serialize(p).map_err(|e| Error::Io(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Minimum-latency path over every edge that is not down. Key buffers,
/// carbon and forecasts are ignored.
pub fn baseline_shortest_path(graph: &TimeVaryingGraph, src: &str, dst: &str) -> Result<(Vec<String>, f64)> {
    shortest_path(graph, src, dst, &BTreeSet::new(), |e| e.status != EdgeStatus::Down, |e| e.latency_s)
        .ok_or_else(|| Error::NoPath { src: src.to_string(), dst: dst.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{EdgeKind, EdgeState};

    #[test]
    fn reward_examples() {
        let w = RewardWeights::default();
        let base = Transition { skr_meas: 5.0, skr_target: 5.0, latency: 0.0, carbon: 0.0, key_outage: false };
        assert_eq!(reward(&base, &w), w.alpha_r);
        let out = Transition { key_outage: true, ..base };
        assert_eq!(reward(&base, &w) - reward(&out, &w), w.delta_r);
        let t = Transition { skr_meas: 1.0, skr_target: 2.0, latency: 2.0, carbon: 10.0, key_outage: false };
        assert!((reward(&t, &w) - 0.2).abs() < 1e-12);
    }

    fn link(id: &str, keyed: bool, buf: f64) -> LinkFeatures {
        LinkFeatures {
            link_id: id.into(),
            keyed,
            queue_depth_bits: 0.0,
            link_quality: 0.5,
            key_buffer_bits: buf,
            neighbor_load: 0.0,
            latency_s: 0.001,
        }
    }

    #[test]
    fn shield_reroutes_starved_type_i() {
        let rules = ShieldRuleSet::canonical(100.0);
        let state = RlState { links: vec![link("fso", true, 10.0), link("fiber", false, 0.0)], head_class: TrafficClass::TypeI };
        let a = RlAction { next_hop_weights: vec![1.0, 0.0], laser: LaserLevel::Nominal };
        match shield_filter(&state, &a, &rules) {
            ShieldDecision::Classical { action, rule } => {
                assert_eq!(rule, 0);
                assert_eq!(action.next_hop_weights, vec![0.0, 1.0]);
            }
            d => panic!("{d:?}"),
        }
        let rich = RlState { links: vec![link("fso", true, 1e4), link("fiber", false, 0.0)], ..state.clone() };
        assert_eq!(shield_filter(&rich, &a, &rules), ShieldDecision::Pass { action: a.clone() });
        let lonely = RlState { links: vec![link("fso", true, 10.0)], ..state };
        let a1 = RlAction { next_hop_weights: vec![1.0], laser: LaserLevel::Nominal };
        assert!(matches!(shield_filter(&lonely, &a1, &rules), ShieldDecision::Failsafe { .. }));
        assert!(ShieldRuleSet { rules: vec![] }.validate().is_err());
    }

    #[test]
    fn shield_exhaustive_three_link_sweep() {
        let rules = ShieldRuleSet::canonical(100.0);
        let buffers = [0.0, 99.0, 100.0, 500.0];
        let weights = [0.0, 0.25, 0.5, 1.0];
        let mut checked = 0;
        for class in TrafficClass::ALL {
            for keyed_mask in 0..8u8 {
                for b0 in buffers {
                    for b1 in buffers {
                        for b2 in buffers {
                            let bufs = [b0, b1, b2];
                            let links: Vec<LinkFeatures> = (0..3)
                                .map(|i| link(&format!("l{i}"), keyed_mask & (1 << i) != 0, bufs[i]))
                                .collect();
                            let state = RlState { links, head_class: class };
                            for w0 in weights {
                                for w1 in weights {
                                    for w2 in weights {
                                        let s = w0 + w1 + w2;
                                        if s == 0.0 {
                                            continue;
                                        }
                                        let a = RlAction {
                                            next_hop_weights: vec![w0 / s, w1 / s, w2 / s],
                                            laser: LaserLevel::Nominal,
                                        };
                                        let d = shield_filter(&state, &a, &rules);
                                        checked += 1;
                                        let Some(out) = d.action() else { continue };
                                        assert!(out.is_valid());
                                        for (i, w) in out.next_hop_weights.iter().enumerate() {
                                            if *w > 0.0 && class == TrafficClass::TypeI {
                                                assert!(!rules.forbids(class, &state.links[i]));
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        assert!(checked > 10_000);
    }

    #[test]
    fn untrained_policy_is_uniform_and_deterministic() {
        let p = LinearPolicy::default();
        let state = RlState {
            links: vec![link("a", true, 1.0), link("b", true, 5.0), link("c", false, 0.0)],
            head_class: TrafficClass::TypeII,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = policy_act(&p, &state, ActMode::Sample, &mut rng);
        assert!(a.next_hop_weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
        assert!(a.is_valid());
        let g = policy_act(&p, &state, ActMode::Greedy, &mut rng);
        assert_eq!(g.next_hop_weights, vec![1.0, 0.0, 0.0]);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(policy_act(&p, &state, ActMode::Sample, &mut r1), policy_act(&p, &state, ActMode::Sample, &mut r2));
    }

    #[test]
    fn zero_learning_rate_leaves_policy_unchanged() {
        let cfg = TrainConfig { episodes: 5, learning_rate: 0.0, ..Default::default() };
        let out = train(&LinearPolicy::default(), &ToyConfig::default(), &RewardWeights::default(), &cfg, 3).unwrap();
        assert_eq!(out.policy, LinearPolicy::default());
    }

    #[test]
    fn training_beats_random_and_stays_safe() {
        let toy = ToyConfig::default();
        let w = RewardWeights::default();
        let cfg = TrainConfig::default();
        let out = train(&LinearPolicy::default(), &toy, &w, &cfg, 7).unwrap();
        assert_eq!(out.unsafe_type_i, 0);
        let first: f64 = out.curve[..10].iter().map(|c| c.mean_return).sum::<f64>() / 10.0;
        let last: f64 = out.curve[out.curve.len() - 10..].iter().map(|c| c.mean_return).sum::<f64>() / 10.0;
        assert!(last > first, "{first} -> {last}");
        let random = evaluate(&LinearPolicy::default(), &toy, &w, ActMode::Sample, 30, 99);
        let trained = evaluate(&out.policy, &toy, &w, ActMode::Greedy, 30, 99);
        assert!(trained > random, "{trained} vs {random}");
        let again = train(&LinearPolicy::default(), &toy, &w, &cfg, 7).unwrap();
        assert_eq!(again.curve, out.curve);
    }

    #[test]
    fn learning_curve_csv() {
        let curve = [CurvePoint { episode: 0, mean_return: 1.5, outage_count: 2 }];
        let mut buf = Vec::new();
        write_learning_curve(&curve, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "episode,mean_return,outage_count\n0,1.5,2\n");
    }

    fn edge(a: &str, b: &str, lat: f64) -> EdgeState {
        EdgeState {
            edge_id: format!("{a}-{b}"),
            kind: EdgeKind::Fiber,
            a: a.into(),
            b: b.into(),
            classical_capacity_bps: 1e9,
            latency_s: lat,
            current_eta: 1.0,
            current_skr_bps: 0.0,
            status: EdgeStatus::Up,
            channel: None,
        }
    }

    #[test]
    fn baseline_paths() {
        let g = TimeVaryingGraph {
            t: 0.0,
            nodes: vec!["a".into(), "b".into(), "c".into(), "z".into()],
            edges: vec![edge("a", "b", 1.0), edge("b", "c", 1.0), edge("a", "c", 3.0)],
        };
        assert_eq!(baseline_shortest_path(&g, "a", "b").unwrap().0, ["a", "b"]);
        let (p, l) = baseline_shortest_path(&g, "a", "c").unwrap();
        assert_eq!(p, ["a", "b", "c"]);
        assert_eq!(l, 2.0);
        assert!(matches!(baseline_shortest_path(&g, "a", "z"), Err(Error::NoPath { .. })));
    }
}
