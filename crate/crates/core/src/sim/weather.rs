//! Ground-truth weather, carbon and demand timelines of a scenario.

use std::collections::BTreeMap;

use rand::Rng;

use crate::channel::SiteConditions;
use crate::netmodel::{CarbonTable, FlowDemand};
use crate::observability::Timelines;
use crate::orbits::SiteKind;

use super::config::{SimConfig, WeatherFront};

#[derive(Debug, Clone)]
struct SiteTruth {
    id: String,
    lat: f64,
    lon: f64,
    r0_base: f64,
    /// HAPS platforms fly above the cloud deck.
    above_clouds: bool,
    phase: f64,
}

/// Deterministic scenario truth. The only randomness is the per-site phase
/// of the slow r0 oscillation, drawn once at construction.
#[derive(Debug, Clone)]
pub struct WeatherTruth {
    sites: Vec<SiteTruth>,
    index: BTreeMap<String, usize>,
    fronts: Vec<WeatherFront>,
    clear_extinction: f64,
    r0_log_amplitude: f64,
    r0_period_s: f64,
    carbon: CarbonTable,
    /// (start, end, rate) of every flow, for aggregate demand.
    demand: Vec<(f64, f64, f64)>,
    end_s: f64,
}

impl WeatherTruth {
    pub fn new<R: Rng + ?Sized>(
        cfg: &SimConfig,
        carbon: CarbonTable,
        flows: &[FlowDemand],
        rng: &mut R,
    ) -> Self {
        let sites: Vec<SiteTruth> = cfg
            .sites
            .iter()
            .map(|s| SiteTruth {
                id: s.site.site_id.clone(),
                lat: s.site.latitude_deg,
                lon: s.site.longitude_deg,
                r0_base: s.r0_zenith_m,
                above_clouds: s.site.kind == SiteKind::Haps,
                phase: rng.random::<f64>() * std::f64::consts::TAU,
            })
            .collect();
        let index = sites.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        Self {
            sites,
            index,
            fronts: cfg.weather.fronts.clone(),
            clear_extinction: cfg.terminal.clear_extinction_db_per_km,
            r0_log_amplitude: cfg.weather.r0_log_amplitude,
            r0_period_s: cfg.weather.r0_period_s,
            carbon,
            demand: flows.iter().map(|f| (f.start_s, f.end_s(), f.data_rate_bps)).collect(),
            end_s: cfg.duration_s,
        }
    }

    pub fn site_index(&self, site: &str) -> Option<usize> {
        self.index.get(site).copied()
    }

    fn fronts_over(&self, i: usize, t: f64) -> impl Iterator<Item = &WeatherFront> + '_ {
        let s = &self.sites[i];
        self.fronts.iter().filter(move |f| {
            if t < f.start_s || t >= f.end_s || s.lat < f.lat_min_deg || s.lat > f.lat_max_deg {
                return false;
            }
            let centre = f.lon_start_deg + f.speed_deg_per_hour * (t - f.start_s) / 3600.0;
            (s.lon - centre).abs() <= 0.5 * f.width_deg
        })
    }

    pub fn r0_by_index(&self, i: usize, t: f64) -> f64 {
        let s = &self.sites[i];
        let wobble = if self.r0_period_s > 0.0 {
            self.r0_log_amplitude * (std::f64::consts::TAU * t / self.r0_period_s + s.phase).sin()
        } else {
            0.0
        };
        let factor: f64 = self.fronts_over(i, t).map(|f| f.r0_factor).product();
        s.r0_base * wobble.exp() * factor
    }

    pub fn cloud_by_index(&self, i: usize, t: f64) -> bool {
        !self.sites[i].above_clouds && self.fronts_over(i, t).any(|f| f.cloud)
    }

    pub fn conditions_by_index(&self, i: usize, t: f64) -> SiteConditions {
        let ext = self
            .fronts_over(i, t)
            .filter_map(|f| f.extinction_db_per_km)
            .fold(self.clear_extinction, f64::max);
        let ext = if self.sites[i].above_clouds { 0.0 } else { ext };
        SiteConditions { r0_zenith_m: self.r0_by_index(i, t), extinction_db_per_km: ext, cloud: self.cloud_by_index(i, t) }
    }

    pub fn carbon(&self) -> &CarbonTable {
        &self.carbon
    }
}

impl Timelines for WeatherTruth {
    fn r0_at(&self, site: &str, t: f64) -> f64 {
        self.site_index(site).map_or(f64::NAN, |i| self.r0_by_index(i, t))
    }

    fn cloud_at(&self, site: &str, t: f64) -> bool {
        self.site_index(site).is_some_and(|i| self.cloud_by_index(i, t))
    }

    fn ci_at(&self, region: &str, t: f64) -> f64 {
        self.carbon.ci_at(region, t).unwrap_or(0.0)
    }

    fn demand_at(&self, t: f64) -> f64 {
        self.demand.iter().filter(|(a, b, _)| t >= *a && t < *b).map(|(_, _, r)| r).sum()
    }

    fn end_s(&self) -> f64 {
        self.end_s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::config::SimConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::Path;

    fn cfg() -> SimConfig {
        let text = r#"
format_version = 1
name = "wx"
duration_s = 7200.0
[constellation]
planes = 1
sats_per_plane = 1
altitude_km = 550.0
inclination_deg = 53.0
[[sites]]
site_id = "west"
latitude_deg = 45.0
longitude_deg = 0.0
kind = "ogs"
region_id = "r"
[[sites]]
site_id = "east"
latitude_deg = 45.0
longitude_deg = 5.0
kind = "ogs"
region_id = "r"
[[sites]]
site_id = "balloon"
latitude_deg = 45.0
longitude_deg = 5.0
kind = "haps"
region_id = "r"
[[carbon.regions]]
region_id = "r"
gco2_per_kwh = 100.0
[weather]
r0_log_amplitude = 0.0
[[weather.fronts]]
name = "storm"
start_s = 0.0
lon_start_deg = 0.0
speed_deg_per_hour = 5.0
width_deg = 2.0
r0_factor = 0.5
extinction_db_per_km = 3.0
"#;
        SimConfig::from_toml_str(text, Path::new(".")).unwrap()
    }

    #[test]
    fn front_moves_east() {
        let c = cfg();
        let wx = WeatherTruth::new(&c, c.carbon_table().unwrap(), &[], &mut ChaCha8Rng::seed_from_u64(1));
        assert!(wx.cloud_at("west", 0.0));
        assert!(!wx.cloud_at("east", 0.0));
        assert!(!wx.cloud_at("west", 3600.0));
        assert!(wx.cloud_at("east", 3600.0));
        assert!(!wx.cloud_at("balloon", 3600.0));
        assert!((wx.r0_at("east", 3600.0) - 0.05).abs() < 1e-12);
        assert!((wx.r0_at("east", 0.0) - 0.1).abs() < 1e-12);
        let i = wx.site_index("east").unwrap();
        assert_eq!(wx.conditions_by_index(i, 3600.0).extinction_db_per_km, 3.0);
        assert_eq!(wx.conditions_by_index(i, 0.0).extinction_db_per_km, c.terminal.clear_extinction_db_per_km);
    }
}
