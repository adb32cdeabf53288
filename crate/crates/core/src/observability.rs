//! Seeing-sensor fusion and link-quality forecasting.
//!
//! Each site keeps one scalar random-walk Kalman filter on ln r0, so the
//! Fried parameter stays positive under Gaussian updates. SNR predictions push
//! the posterior through the channel model at three Gauss–Hermite sigma
//! points. Forecast feeds are ground-truth timelines corrupted by seeded
//! noise and a lead-time bias.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::channel::{
    expected_fso_link, fso_link_inputs, secret_key_rate, snr_db, FsoTerminal, QkdLinkModel,
    SiteConditions,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeeingMeasurement {
    pub site_id: String,
    pub t: f64,
    pub r0_measured_m: f64,
    pub theta0_measured_urad: f64,
    /// One-sigma measurement error on r0, m.
    pub noise_sigma_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    /// Posterior mean of ln r0.
    pub mean: f64,
    pub variance: f64,
    /// Random-walk variance growth per second.
    pub process_noise_q: f64,
    pub last_update_s: f64,
}

impl KalmanState {
    pub fn from_r0(r0_m: f64, variance: f64, q: f64, t: f64) -> Self {
        Self { mean: r0_m.ln(), variance, process_noise_q: q, last_update_s: t }
    }

    pub fn r0_m(&self) -> f64 {
        self.mean.exp()
    }
}

/// Random-walk prediction: the mean is unchanged, the variance grows by q·Δt.
pub fn kalman_predict(state: &KalmanState, dt_s: f64) -> Result<KalmanState> {
    if !(dt_s >= 0.0) {
        return Err(Error::param("dt_s", "must be >= 0"));
    }
    Ok(KalmanState {
        variance: state.variance + state.process_noise_q * dt_s,
        last_update_s: state.last_update_s + dt_s,
        ..*state
    })
}

/// Scalar update with gain K = P / (P + R). The r0 noise is mapped to the
/// log domain as σ_ln = σ_m / r0_measured.
pub fn kalman_update(state: &KalmanState, m: &SeeingMeasurement) -> Result<KalmanState> {
    if !(m.noise_sigma_m >= 0.0) {
        return Err(Error::param("noise_sigma_m", "must be >= 0"));
    }
    if !(m.r0_measured_m > 0.0) {
        return Err(Error::param("r0_measured_m", "must be positive"));
    }
    let r = (m.noise_sigma_m / m.r0_measured_m).powi(2);
    let p = state.variance;
    if r.is_infinite() || p + r == 0.0 {
        return Ok(*state);
    }
    let k = p / (p + r);
    Ok(KalmanState {
        mean: state.mean + k * (m.r0_measured_m.ln() - state.mean),
        variance: (1.0 - k) * p,
        last_update_s: state.last_update_s.max(m.t),
        ..*state
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrEstimate {
    pub link_id: String,
    pub t: f64,
    pub snr_mean_db: f64,
    pub snr_variance_db2: f64,
    pub p_above_qkd_threshold: f64,
}

/// Slant-path geometry and weather for one prospective link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkGeometry {
    pub link_id: String,
    pub range_km: f64,
    pub elevation_deg: f64,
    pub extinction_db_per_km: f64,
    pub cloud: bool,
}

const DB_PER_NEPER: f64 = 10.0 / std::f64::consts::LN_10;

/// Three-point Gauss–Hermite nodes (in standard deviations) and weights in
/// sixths.
const SIGMA_POINTS: [(f64, u32); 3] = [(0.0, 4), (-1.732_050_807_568_877_2, 1), (1.732_050_807_568_877_2, 1)];

fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + x2 / x * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// E[ln X] and Var[ln X] for X ~ Gamma(shape, 1/shape).
fn log_moments(shape: f64) -> (f64, f64) {
    if shape.is_infinite() {
        (0.0, 0.0)
    } else {
        (digamma(shape) - shape.ln(), trigamma(shape))
    }
}

/// Smallest SNR (dB) at which the asymptotic key rate is positive.
pub fn qkd_snr_threshold_db(qkd: &QkdLinkModel) -> f64 {
    if secret_key_rate(qkd, 1.0) <= 0.0 {
        return f64::INFINITY;
    }
    let (mut lo, mut hi) = (-300.0f64, 0.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if secret_key_rate(qkd, 10f64.powf(mid / 10.0)) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    snr_db(qkd, 10f64.powf(hi / 10.0))
}

/// SNR distribution for a prospective link given the ln r0 posterior. Each
/// sigma point contributes the log-averaged SNR of its Gamma-Gamma channel;
/// `p_above_qkd_threshold` is the sigma-point mass at or above the threshold.
pub fn predict_snr(
    t: f64,
    geom: &LinkGeometry,
    terminal: &FsoTerminal,
    qkd: &QkdLinkModel,
    estimate: &KalmanState,
    threshold_db: f64,
) -> Result<SnrEstimate> {
    let sd = estimate.variance.max(0.0).sqrt();
    let mut points = Vec::with_capacity(3);
    for (z, w) in SIGMA_POINTS {
        let r0 = (estimate.mean + z * sd).exp();
        let cond = SiteConditions {
            r0_zenith_m: r0,
            extinction_db_per_km: geom.extinction_db_per_km,
            cloud: geom.cloud,
        };
        let mean_field = expected_fso_link(terminal, qkd, geom.range_km, geom.elevation_deg, &cond)?;
        let setup = fso_link_inputs(terminal, geom.range_km, geom.elevation_deg, &cond)?;
        let (ma, va) = log_moments(setup.params.alpha);
        let (mb, vb) = log_moments(setup.params.beta);
        let (snr, var) = if geom.cloud {
            (mean_field.snr_db, 0.0)
        } else {
            (mean_field.snr_db + DB_PER_NEPER * (ma + mb), DB_PER_NEPER.powi(2) * (va + vb))
        };
        points.push((w, snr, var));
    }
    let weight = |w: u32| w as f64 / 6.0;
    let mean: f64 = points.iter().map(|(w, s, _)| weight(*w) * s).sum();
    let variance: f64 = points.iter().map(|(w, s, v)| weight(*w) * ((s - mean).powi(2) + v)).sum();
    let sixths: u32 = points.iter().filter(|(_, s, _)| *s >= threshold_db).map(|(w, _, _)| w).sum();
    let p = weight(sixths);
    Ok(SnrEstimate {
        link_id: geom.link_id.clone(),
        t,
        snr_mean_db: mean,
        snr_variance_db2: variance,
        p_above_qkd_threshold: p.clamp(0.0, 1.0),
    })
}

/// Ground-truth scenario timelines that forecasts are derived from.
pub trait Timelines {
    fn r0_at(&self, site: &str, t: f64) -> f64;
    fn cloud_at(&self, site: &str, t: f64) -> bool;
    fn ci_at(&self, region: &str, t: f64) -> f64;
    /// Aggregate offered load, bits/s.
    fn demand_at(&self, t: f64) -> f64;
    fn end_s(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    /// Multiplicative log-normal noise on r0.
    pub r0_log_sigma: f64,
    /// The cloud forecast shows conditions `cloud_lead_s` ahead of truth.
    pub cloud_lead_s: f64,
    /// Relative Gaussian noise on carbon intensity.
    pub ci_rel_sigma: f64,
    /// Relative Gaussian noise on aggregate demand.
    pub demand_rel_sigma: f64,
    /// Sample spacing of the feeds, s.
    pub step_s: f64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self { r0_log_sigma: 0.0, cloud_lead_s: 0.0, ci_rel_sigma: 0.0, demand_rel_sigma: 0.0, step_s: 60.0 }
    }
}

/// Controller-facing forecasts sampled on a regular grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ForecastFeeds {
    pub times: Vec<f64>,
    /// Forecast r0 per site (the turbulence-forecast-index input).
    pub turbulence: BTreeMap<String, Vec<f64>>,
    pub cloud: BTreeMap<String, Vec<bool>>,
    pub ci: BTreeMap<String, Vec<f64>>,
    pub demand_bps: Vec<f64>,
}

impl ForecastFeeds {
    fn index(&self, t: f64) -> Option<usize> {
        let i = self.times.partition_point(|ts| *ts <= t);
        i.checked_sub(1)
    }

    pub fn cloud_at(&self, site: &str, t: f64) -> bool {
        match (self.index(t), self.cloud.get(site)) {
            (Some(i), Some(v)) => v[i],
            _ => false,
        }
    }

    pub fn r0_at(&self, site: &str, t: f64) -> Option<f64> {
        self.index(t).and_then(|i| self.turbulence.get(site).map(|v| v[i]))
    }

    pub fn ci_at(&self, region: &str, t: f64) -> Option<f64> {
        self.index(t).and_then(|i| self.ci.get(region).map(|v| v[i]))
    }
}

/// Builds forecasts over `[t, t + horizon]`, truncated at the scenario end.
pub fn forecast_feeds<T: Timelines + ?Sized, R: Rng + ?Sized>(
    truth: &T,
    sites: &[String],
    regions: &[String],
    t: f64,
    horizon_s: f64,
    cfg: &ForecastConfig,
    rng: &mut R,
) -> ForecastFeeds {
    let end = (t + horizon_s).min(truth.end_s());
    let step = cfg.step_s.max(1e-3);
    let mut feeds = ForecastFeeds::default();
    let mut tau = t;
    while tau <= end {
        feeds.times.push(tau);
        tau += step;
    }
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    for site in sites {
        let r0: Vec<f64> = feeds
            .times
            .iter()
            .map(|&s| {
                let noise = if cfg.r0_log_sigma > 0.0 { (cfg.r0_log_sigma * normal()).exp() } else { 1.0 };
                truth.r0_at(site, s) * noise
            })
            .collect();
        let cloud: Vec<bool> = feeds
            .times
            .iter()
            .map(|&s| truth.cloud_at(site, (s + cfg.cloud_lead_s).min(truth.end_s())))
            .collect();
        feeds.turbulence.insert(site.clone(), r0);
        feeds.cloud.insert(site.clone(), cloud);
    }
    for region in regions {
        let ci: Vec<f64> = feeds
            .times
            .iter()
            .map(|&s| {
                let noise = if cfg.ci_rel_sigma > 0.0 { 1.0 + cfg.ci_rel_sigma * normal() } else { 1.0 };
                (truth.ci_at(region, s) * noise).max(0.0)
            })
            .collect();
        feeds.ci.insert(region.clone(), ci);
    }
    feeds.demand_bps = feeds
        .times
        .iter()
        .map(|&s| {
            let noise = if cfg.demand_rel_sigma > 0.0 { 1.0 + cfg.demand_rel_sigma * normal() } else { 1.0 };
            (truth.demand_at(s) * noise).max(0.0)
        })
        .collect();
    feeds
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state() -> KalmanState {
        KalmanState::from_r0(0.1, 0.04, 1e-4, 0.0)
    }

    fn meas(r0: f64, sigma: f64) -> SeeingMeasurement {
        SeeingMeasurement {
            site_id: "ogs-1".into(),
            t: 10.0,
            r0_measured_m: r0,
            theta0_measured_urad: 7.0,
            noise_sigma_m: sigma,
        }
    }

    #[test]
    fn predict_properties() {
        let s = state();
        assert_eq!(kalman_predict(&s, 0.0).unwrap(), s);
        assert!(kalman_predict(&s, 5.0).unwrap().variance > s.variance);
        let twice = kalman_predict(&kalman_predict(&s, 7.0).unwrap(), 7.0).unwrap();
        let once = kalman_predict(&s, 14.0).unwrap();
        assert!((twice.variance - once.variance).abs() < 1e-15);
        assert_eq!(twice.mean, once.mean);
        assert!(kalman_predict(&s, -1.0).is_err());
    }

    #[test]
    fn update_limits() {
        let s = state();
        let exact = kalman_update(&s, &meas(0.05, 0.0)).unwrap();
        assert!((exact.mean - 0.05f64.ln()).abs() < 1e-15);
        assert_eq!(exact.variance, 0.0);
        let useless = kalman_update(&s, &meas(0.05, f64::INFINITY)).unwrap();
        assert_eq!(useless.mean, s.mean);
        assert_eq!(useless.variance, s.variance);
        // R = P: gain one half
        let r0 = 0.05;
        let sigma = s.variance.sqrt() * r0;
        let half = kalman_update(&s, &meas(r0, sigma)).unwrap();
        assert!((half.mean - 0.5 * (s.mean + r0.ln())).abs() < 1e-12);
        assert!((half.variance - 0.5 * s.variance).abs() < 1e-15);
    }

    #[test]
    fn trigamma_reference() {
        // ψ1(1) = π²/6, ψ1(0.5) = π²/2
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((trigamma(1.0) - pi2 / 6.0).abs() < 1e-10);
        assert!((trigamma(0.5) - pi2 / 2.0).abs() < 1e-10);
    }

    fn geom() -> LinkGeometry {
        LinkGeometry {
            link_id: "fso:ogs-1:sat-0-0".into(),
            range_km: 900.0,
            elevation_deg: 35.0,
            extinction_db_per_km: 0.2,
            cloud: false,
        }
    }

    #[test]
    fn snr_prediction_limits() {
        let term = FsoTerminal::default();
        let qkd = QkdLinkModel::default();
        let exact = KalmanState { variance: 0.0, ..state() };
        let point = predict_snr(0.0, &geom(), &term, &qkd, &exact, 0.0).unwrap();
        assert_eq!(point.p_above_qkd_threshold, 1.0);
        let above = predict_snr(0.0, &geom(), &term, &qkd, &exact, point.snr_mean_db + 1.0).unwrap();
        assert_eq!(above.p_above_qkd_threshold, 0.0);
        let low = predict_snr(0.0, &geom(), &term, &qkd, &state(), -150.0).unwrap();
        assert_eq!(low.p_above_qkd_threshold, 1.0);
        let cloudy = LinkGeometry { cloud: true, ..geom() };
        let c = predict_snr(0.0, &cloudy, &term, &qkd, &state(), qkd_snr_threshold_db(&qkd)).unwrap();
        assert_eq!(c.p_above_qkd_threshold, 0.0);
    }

    #[test]
    fn p_above_is_monotone_in_threshold() {
        let term = FsoTerminal::default();
        let qkd = QkdLinkModel::default();
        let wide = KalmanState { variance: 1.0, ..state() };
        let mut last = 1.0;
        for k in 0..80 {
            let thr = -10.0 + k as f64;
            let p = predict_snr(0.0, &geom(), &term, &qkd, &wide, thr).unwrap().p_above_qkd_threshold;
            assert!(p <= last + 1e-15);
            last = p;
        }
    }

    #[test]
    fn widening_the_posterior_splits_the_mass() {
        // Threshold placed just below the point SNR: a sharp estimate is
        // certain, a wide one is not. Monte Carlo over the ln r0 prior gives
        // the reference mass split.
        let term = FsoTerminal::default();
        let qkd = QkdLinkModel::default();
        let sharp = KalmanState { variance: 0.0, ..state() };
        let point = predict_snr(0.0, &geom(), &term, &qkd, &sharp, 0.0).unwrap().snr_mean_db;
        let thr = point - 0.05;
        assert_eq!(predict_snr(0.0, &geom(), &term, &qkd, &sharp, thr).unwrap().p_above_qkd_threshold, 1.0);
        let wide = KalmanState { variance: 0.25, ..state() };
        let p_wide = predict_snr(0.0, &geom(), &term, &qkd, &wide, thr).unwrap().p_above_qkd_threshold;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let s = KalmanState { mean: wide.mean + 0.5 * z, variance: 0.0, ..wide };
                predict_snr(0.0, &geom(), &term, &qkd, &s, thr).unwrap().p_above_qkd_threshold > 0.5
            })
            .count();
        let p_mc = hits as f64 / n as f64;
        assert!(p_wide < 1.0);
        assert!(p_mc < 1.0 && p_mc > 0.0);
        assert!((p_wide - p_mc).abs() < 0.5);
    }

    struct Truth;

    impl Timelines for Truth {
        fn r0_at(&self, _: &str, t: f64) -> f64 {
            0.1 + 1e-5 * t
        }
        fn cloud_at(&self, site: &str, t: f64) -> bool {
            site == "ogs-1" && (600.0..1200.0).contains(&t)
        }
        fn ci_at(&self, _: &str, _: f64) -> f64 {
            300.0
        }
        fn demand_at(&self, _: f64) -> f64 {
            1e4
        }
        fn end_s(&self) -> f64 {
            3600.0
        }
    }

    #[test]
    fn forecast_feeds_behaviour() {
        let sites = vec!["ogs-1".to_string()];
        let regions = vec!["grid".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let exact = forecast_feeds(&Truth, &sites, &regions, 0.0, 7200.0, &ForecastConfig::default(), &mut rng);
        assert_eq!(*exact.times.last().unwrap(), 3600.0);
        for (i, t) in exact.times.iter().enumerate() {
            assert_eq!(exact.turbulence["ogs-1"][i], Truth.r0_at("ogs-1", *t));
            assert_eq!(exact.cloud["ogs-1"][i], Truth.cloud_at("ogs-1", *t));
        }
        let lead = ForecastConfig { cloud_lead_s: 300.0, ..Default::default() };
        let f = forecast_feeds(&Truth, &sites, &regions, 0.0, 3600.0, &lead, &mut rng);
        let first = |feeds: &ForecastFeeds| feeds.times.iter().copied().find(|t| feeds.cloud_at("ogs-1", *t)).unwrap();
        assert_eq!(first(&exact) - first(&f), 300.0);
        let noisy = ForecastConfig { r0_log_sigma: 0.2, ci_rel_sigma: 0.1, demand_rel_sigma: 0.1, ..Default::default() };
        let a = forecast_feeds(&Truth, &sites, &regions, 0.0, 3600.0, &noisy, &mut ChaCha8Rng::seed_from_u64(8));
        let b = forecast_feeds(&Truth, &sites, &regions, 0.0, 3600.0, &noisy, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
    }

    #[test]
    fn forecast_noise_matches_config_over_seeds() {
        let sites = vec!["ogs-1".to_string()];
        let cfg = ForecastConfig { r0_log_sigma: 0.2, step_s: 10.0, ..Default::default() };
        let mut logs = Vec::new();
        for seed in 0..20 {
            let f = forecast_feeds(&Truth, &sites, &[], 0.0, 3600.0, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            for (i, t) in f.times.iter().enumerate() {
                logs.push((f.turbulence["ogs-1"][i] / Truth.r0_at("ogs-1", *t)).ln());
            }
        }
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let sd = (logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 4.0 * 0.2 / n.sqrt());
        assert!((sd - 0.2).abs() < 0.01);
    }
}
