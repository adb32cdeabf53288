//! Scenario configuration, read from TOML.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{FsoTerminal, QkdLinkModel, RfLinkModel};
use crate::control_mpc::SatEnergyModel;
use crate::control_rl::RewardWeights;
use crate::error::{Error, Result};
use crate::netmodel::{CarbonRegion, CarbonTable, FiberLink, PowerModel, TrafficSpec};
use crate::observability::ForecastConfig;
use crate::orbits::{ConstellationSpec, GroundSite, SiteKind};
use crate::protocols::FallbackConfig;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ControllerKind {
    #[serde(rename = "ai")]
    Ai,
    #[serde(rename = "baseline-shortest-path")]
    BaselineShortestPath,
    #[serde(rename = "carbon-blind-ai")]
    CarbonBlindAi,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] =
        [ControllerKind::Ai, ControllerKind::BaselineShortestPath, ControllerKind::CarbonBlindAi];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Ai => "ai",
            ControllerKind::BaselineShortestPath => "baseline-shortest-path",
            ControllerKind::CarbonBlindAi => "carbon-blind-ai",
        }
    }

    pub fn is_ai(self) -> bool {
        self != ControllerKind::BaselineShortestPath
    }

    pub fn carbon_aware(self) -> bool {
        self == ControllerKind::Ai
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown controller {s:?}")))
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    #[serde(flatten)]
    pub site: GroundSite,
    pub region_id: String,
    /// Zenith Fried parameter in calm conditions, m.
    #[serde(default = "default_r0")]
    pub r0_zenith_m: f64,
}

fn default_r0() -> f64 {
    0.1
}

impl SiteConfig {
    /// Site hosts an optical terminal that can reach the constellation.
    pub fn is_optical(&self) -> bool {
        matches!(self.site.kind, SiteKind::Ogs | SiteKind::HapsAnchor | SiteKind::Haps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ticks {
    pub tier1_s: f64,
    pub tier2_s: f64,
}

impl Default for Ticks {
    fn default() -> Self {
        Self { tier1_s: 60.0, tier2_s: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarbonConfig {
    /// CSV with `timestamp_s,region_id,gco2_per_kwh`, relative to the config.
    #[serde(default)]
    pub ci_csv: Option<PathBuf>,
    #[serde(default)]
    pub regions: Vec<ConstantRegion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantRegion {
    pub region_id: String,
    pub gco2_per_kwh: f64,
}

/// Band of cloud and strong turbulence moving east at constant speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherFront {
    pub name: String,
    pub start_s: f64,
    #[serde(default = "f64_infinity")]
    pub end_s: f64,
    /// Longitude of the band centre at `start_s`, degrees.
    pub lon_start_deg: f64,
    pub speed_deg_per_hour: f64,
    pub width_deg: f64,
    #[serde(default = "lat_min")]
    pub lat_min_deg: f64,
    #[serde(default = "lat_max")]
    pub lat_max_deg: f64,
    #[serde(default = "yes")]
    pub cloud: bool,
    /// Multiplier on r0 inside the band.
    #[serde(default = "one")]
    pub r0_factor: f64,
    /// Extinction inside the band, dB/km (replaces the clear value).
    #[serde(default)]
    pub extinction_db_per_km: Option<f64>,
}

fn f64_infinity() -> f64 {
    f64::INFINITY
}
fn lat_min() -> f64 {
    -90.0
}
fn lat_max() -> f64 {
    90.0
}
fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeatherConfig {
    pub fronts: Vec<WeatherFront>,
    /// Amplitude of the slow log-r0 variation around each site's base value.
    pub r0_log_amplitude: f64,
    pub r0_period_s: f64,
    /// One-sigma error of seeing-monitor r0 readings, m.
    pub seeing_noise_m: f64,
}

impl Default for WeatherConfig {
    fn default() -> Self {
        Self { fronts: vec![], r0_log_amplitude: 0.2, r0_period_s: 1800.0, seeing_noise_m: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub gamma: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 0.01, w3: 0.1, w4: 1.0, gamma: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub mpc_horizon_steps: usize,
    pub handover_lead_s: f64,
    /// Largest data-path latency step accepted for a soft switch, s.
    pub switch_jitter_budget_s: f64,
    pub state_transfer_serialization_s: f64,
    /// Key demand the incoming link must cover before switching, s.
    pub buffer_sync_s: f64,
    /// Shield threshold in Tier-2 ticks of Type-I demand.
    pub critical_threshold_ticks: f64,
    pub forecast: ForecastConfig,
    /// Random-walk growth of the ln r0 filter variance, 1/s.
    pub kalman_q: f64,
    pub rl_episodes: usize,
    pub rl_learning_rate: f64,
    /// Key store level treated as full by the policy, bits.
    pub key_scale_bits: f64,
    /// Key rate treated as excellent link quality by the policy, bit/s.
    pub skr_scale_bps: f64,
    pub turbo_window_s: f64,
    pub turbo_margin: f64,
    pub fallback: FallbackConfig,
    /// Key stock of every site store at t = 0, bits.
    pub initial_key_bits: f64,
    pub key_max_age_s: Option<f64>,
    /// Ground network latency behind the satellite for carried flows, s.
    pub backhaul_latency_s: f64,
    /// Link acquisition time without make-before-break, s.
    pub acquisition_s: f64,
    /// Power drawn while a bulk transfer runs, W.
    pub bulk_power_w: f64,
    /// Satellite battery charge at t = 0 as a fraction of capacity.
    pub initial_soc_fraction: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            mpc_horizon_steps: 30,
            handover_lead_s: 30.0,
            switch_jitter_budget_s: 5e-4,
            state_transfer_serialization_s: 1e-4,
            buffer_sync_s: 1.0,
            critical_threshold_ticks: 2.0,
            forecast: ForecastConfig { r0_log_sigma: 0.1, cloud_lead_s: 600.0, ci_rel_sigma: 0.05, demand_rel_sigma: 0.0, step_s: 60.0 },
            kalman_q: 1e-5,
            rl_episodes: 150,
            rl_learning_rate: 0.01,
            key_scale_bits: 2e6,
            skr_scale_bps: 2e4,
            turbo_window_s: 1.0,
            turbo_margin: 1.2,
            fallback: FallbackConfig::default(),
            initial_key_bits: 1e6,
            key_max_age_s: None,
            backhaul_latency_s: 5e-3,
            acquisition_s: 2.0,
            bulk_power_w: 400.0,
            initial_soc_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub format_version: u32,
    pub name: String,
    pub duration_s: f64,
    #[serde(default = "default_controller")]
    pub controller: ControllerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ticks: Ticks,
    pub constellation: ConstellationSpec,
    pub sites: Vec<SiteConfig>,
    #[serde(default)]
    pub fiber: Vec<FiberLink>,
    #[serde(default)]
    pub carbon: CarbonConfig,
    #[serde(default)]
    pub traffic: TrafficSpec,
    #[serde(default)]
    pub weather: WeatherConfig,
    #[serde(default)]
    pub terminal: FsoTerminal,
    #[serde(default)]
    pub qkd: QkdLinkModel,
    #[serde(default)]
    pub rf: RfLinkModel,
    #[serde(default)]
    pub sat_energy: SatEnergyModel,
    #[serde(default = "default_ogs_power")]
    pub ogs_power: PowerModel,
    #[serde(default)]
    pub objective: ObjectiveWeights,
    #[serde(default)]
    pub reward: RewardWeights,
    #[serde(default)]
    pub control: ControlConfig,
    /// Directory relative paths are resolved against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_controller() -> ControllerKind {
    ControllerKind::Ai
}

fn default_ogs_power() -> PowerModel {
    PowerModel { base_w: 300.0, per_transceiver_w: 150.0, cryocooler_w: 250.0 }
}

impl SimConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    /// Copy with every keyed list sorted by its id. The engine runs on this
    /// form, so the order of entries in a scenario file never reaches the trace.
    pub fn canonical(&self) -> Self {
        let mut c = self.clone();
        c.sites.sort_by(|a, b| a.site.site_id.cmp(&b.site.site_id));
        c.fiber.sort_by(|x, y| (&x.a, &x.b).cmp(&(&y.a, &y.b)));
        c.carbon.regions.sort_by(|a, b| a.region_id.cmp(&b.region_id));
        c.traffic.flows.sort_by(|a, b| a.flow_id.cmp(&b.flow_id));
        c.traffic.generators.sort_by(|a, b| a.prefix.cmp(&b.prefix));
        c.weather.fronts.sort_by(|a, b| a.name.cmp(&b.name));
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    pub fn site(&self, id: &str) -> Option<&SiteConfig> {
        self.sites.iter().find(|s| s.site.site_id == id)
    }

    /// Carbon table from the CSV file and the constant regions.
    pub fn carbon_table(&self) -> Result<CarbonTable> {
        let mut table = match &self.carbon.ci_csv {
            Some(p) => CarbonTable::from_csv_path(&self.base_dir.join(p))?,
            None => CarbonTable::default(),
        };
        for r in &self.carbon.regions {
            table.insert(CarbonRegion::constant(r.region_id.clone(), r.gco2_per_kwh));
        }
        Ok(table)
    }

    /// Checks every invariant the engine relies on.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "format_version {} unsupported (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::param("duration_s", "must be positive"));
        }
        let t = self.ticks;
        if !(t.tier2_s > 0.0) || !(t.tier1_s >= t.tier2_s) {
            return Err(Error::param("ticks", "need 0 < tier2_s <= tier1_s"));
        }
        let ratio = t.tier1_s / t.tier2_s;
        if (ratio - ratio.round()).abs() > 1e-6 {
            return Err(Error::param("ticks", "tier1_s must be a multiple of tier2_s"));
        }
        self.constellation.validate()?;
        self.terminal.validate()?;
        self.sat_energy.validate()?;
        self.reward.validate()?;
        let w = self.objective;
        if [w.w1, w.w2, w.w3, w.w4].iter().any(|v| !(*v >= 0.0)) || !(0.0..=1.0).contains(&w.gamma) {
            return Err(Error::param("objective", "weights must be >= 0 and gamma in [0, 1]"));
        }
        let mut ids = BTreeSet::new();
        for s in &self.sites {
            s.site.validate()?;
            if !ids.insert(s.site.site_id.as_str()) {
                return Err(Error::Config(format!("duplicate site {}", s.site.site_id)));
            }
            if !(s.r0_zenith_m > 0.0) {
                return Err(Error::param("r0_zenith_m", format!("{} must be positive", s.site.site_id)));
            }
        }
        for f in &self.fiber {
            for end in [&f.a, &f.b] {
                if !ids.contains(end.as_str()) {
                    return Err(Error::Config(format!("fiber endpoint {end} is not a site")));
                }
            }
            if !(f.length_km >= 0.0) {
                return Err(Error::param("length_km", "must be >= 0"));
            }
        }
        let table = self.carbon_table()?;
        for s in &self.sites {
            if !table.covers(&s.region_id, 0.0) {
                return Err(Error::Config(format!("region {} of {} has no carbon intensity at t=0", s.region_id, s.site.site_id)));
            }
        }
        for f in &self.traffic.flows {
            f.validate()?;
        }
        let endpoints = self.traffic.flows.iter().map(|f| (&f.src, &f.dst, &f.flow_id)).chain(
            self.traffic.generators.iter().map(|g| (&g.src, &g.dst, &g.prefix)),
        );
        for (src, dst, id) in endpoints {
            for end in [src, dst] {
                match self.site(end) {
                    Some(s) if s.site.kind == SiteKind::Industrial => {}
                    _ => return Err(Error::Config(format!("{id}: endpoint {end} must be an industrial site"))),
                }
            }
        }
        for front in &self.weather.fronts {
            if !(front.width_deg > 0.0) || !(front.r0_factor > 0.0) {
                return Err(Error::param("fronts", format!("{}: width and r0_factor must be positive", front.name)));
            }
        }
        let c = &self.control;
        if c.mpc_horizon_steps == 0 || !(c.critical_threshold_ticks >= 0.0) || !(c.initial_key_bits >= 0.0) {
            return Err(Error::param("control", "horizon >= 1, threshold and initial keys >= 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
format_version = 1
name = "mini"
duration_s = 60.0

[constellation]
planes = 1
sats_per_plane = 2
altitude_km = 550.0
inclination_deg = 53.0

[[sites]]
site_id = "plant"
latitude_deg = 48.0
longitude_deg = 11.0
kind = "industrial"
region_id = "de"

[[carbon.regions]]
region_id = "de"
gco2_per_kwh = 300.0
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = SimConfig::from_toml_str(MINIMAL, Path::new(".")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.controller, ControllerKind::Ai);
        assert_eq!(cfg.ticks.tier2_s, 0.01);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad_version = MINIMAL.replace("format_version = 1", "format_version = 7");
        assert!(SimConfig::from_toml_str(&bad_version, Path::new(".")).unwrap().validate().is_err());
        let unknown_top = MINIMAL.replace("name = \"mini\"", "name = \"mini\"\nbogus = 3");
        assert!(SimConfig::from_toml_str(&unknown_top, Path::new(".")).is_err());
        let unknown_nested = format!("{MINIMAL}\nbogus = 3\n");
        assert!(SimConfig::from_toml_str(&unknown_nested, Path::new(".")).is_err());
        let no_region = MINIMAL.replace("region_id = \"de\"\n\n", "region_id = \"fr\"\n\n");
        assert!(SimConfig::from_toml_str(&no_region, Path::new(".")).unwrap().validate().is_err());
    }

    #[test]
    fn controller_names_round_trip() {
        for c in ControllerKind::ALL {
            assert_eq!(c.name().parse::<ControllerKind>().unwrap(), c);
        }
        assert!("nope".parse::<ControllerKind>().is_err());
    }
}
