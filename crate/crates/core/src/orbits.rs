//! Walker-Delta constellation propagation and ground-site geometry.
//!
//! Orbits are circular two-body Keplerian orbits around a spherical Earth.
//! Positions are produced in an Earth-centred inertial frame and rotated into
//! the Earth-fixed frame with a constant sidereal rate (GMST = 0 at epoch).
//! The Sun moves on a circular ecliptic orbit with a one-year period and the
//! Earth's shadow is a cylinder of radius `EARTH_RADIUS_KM`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Standard gravitational parameter of the Earth, km³/s².
pub const MU_EARTH: f64 = 398_600.4418;
/// Mean spherical Earth radius, km.
pub const EARTH_RADIUS_KM: f64 = 6371.0;
/// Speed of light in vacuum, km/s.
pub const SPEED_OF_LIGHT_KM_S: f64 = 299_792.458;
/// Sidereal rotation rate of the Earth, rad/s.
pub const EARTH_ROTATION_RAD_S: f64 = 7.292_115_146_706_979e-5;
/// Length of the simplified solar year, s.
pub const YEAR_S: f64 = 365.25 * 86_400.0;
/// Obliquity of the ecliptic, degrees.
pub const OBLIQUITY_DEG: f64 = 23.44;

/// Coarse scan step for window search, s.
const WINDOW_SCAN_STEP_S: f64 = 10.0;
/// Bisection tolerance on window boundaries, s.
const WINDOW_BISECT_TOL_S: f64 = 1e-3;

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Rotation about the Earth's polar (z) axis by `angle` radians.
pub fn rotate_z(v: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

/// Walker-Delta `i: T/P/F` constellation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstellationSpec {
    pub planes: u32,
    pub sats_per_plane: u32,
    pub altitude_km: f64,
    pub inclination_deg: f64,
    /// Walker phasing factor F, `0 <= F < planes`.
    #[serde(default)]
    pub phasing_factor: u32,
    /// Simulated time at which the seeded slots apply, s.
    #[serde(default)]
    pub epoch_s: f64,
    /// RAAN of plane 0, degrees.
    #[serde(default)]
    pub raan_offset_deg: f64,
    /// Argument of latitude of satellite 0 in plane 0 at epoch, degrees.
    #[serde(default)]
    pub anomaly_offset_deg: f64,
}

impl ConstellationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.planes == 0 || self.sats_per_plane == 0 {
            return Err(Error::param("constellation", "zero satellites"));
        }
        if !(300.0..=2000.0).contains(&self.altitude_km) {
            return Err(Error::param(
                "altitude_km",
                format!("{} outside LEO regime [300, 2000]", self.altitude_km),
            ));
        }
        if !(0.0..=180.0).contains(&self.inclination_deg) {
            return Err(Error::param(
                "inclination_deg",
                format!("{} outside [0, 180]", self.inclination_deg),
            ));
        }
        if self.phasing_factor >= self.planes {
            return Err(Error::param(
                "phasing_factor",
                format!("{} must be < planes ({})", self.phasing_factor, self.planes),
            ));
        }
        Ok(())
    }

    pub fn total(&self) -> u32 {
        self.planes * self.sats_per_plane
    }

    pub fn semi_major_axis_km(&self) -> f64 {
        EARTH_RADIUS_KM + self.altitude_km
    }

    pub fn mean_motion(&self) -> f64 {
        (MU_EARTH / self.semi_major_axis_km().powi(3)).sqrt()
    }

    pub fn period_s(&self) -> f64 {
        orbital_period_s(self.altitude_km)
    }

    /// Plane RAAN and argument of latitude at epoch for each satellite, in
    /// radians, ordered by (plane, slot).
    pub fn slots(&self) -> Vec<SatSlot> {
        let total = self.total() as f64;
        let mut out = Vec::with_capacity(self.total() as usize);
        for p in 0..self.planes {
            let raan = (self.raan_offset_deg + 360.0 * p as f64 / self.planes as f64).to_radians();
            for s in 0..self.sats_per_plane {
                let u0 = self.anomaly_offset_deg
                    + 360.0 * s as f64 / self.sats_per_plane as f64
                    + 360.0 * self.phasing_factor as f64 * p as f64 / total;
                out.push(SatSlot {
                    sat_id: sat_id(p, s),
                    plane: p,
                    raan_rad: raan,
                    u0_rad: u0.to_radians().rem_euclid(2.0 * PI),
                });
            }
        }
        out
    }
}

/// Canonical satellite identifier.
pub fn sat_id(plane: u32, slot: u32) -> String {
    format!("sat-{plane}-{slot}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatSlot {
    pub sat_id: String,
    pub plane: u32,
    pub raan_rad: f64,
    pub u0_rad: f64,
}

/// Orbital period of a circular orbit at `altitude_km`, s.
pub fn orbital_period_s(altitude_km: f64) -> f64 {
    let a = EARTH_RADIUS_KM + altitude_km;
    2.0 * PI * (a.powi(3) / MU_EARTH).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatelliteState {
    pub sat_id: String,
    pub plane: u32,
    /// Simulated time of this state, s.
    pub t: f64,
    /// Inertial position, km.
    pub position_eci: Vec3,
    /// Earth-fixed position, km.
    pub position: Vec3,
    /// Inertial velocity, km/s.
    pub velocity: Vec3,
    pub in_eclipse: bool,
}

fn inertial_state(a: f64, n: f64, inc: f64, raan: f64, u: f64) -> (Vec3, Vec3) {
    let (su, cu) = u.sin_cos();
    let (so, co) = raan.sin_cos();
    let (si, ci) = inc.sin_cos();
    let r = [
        a * (co * cu - so * su * ci),
        a * (so * cu + co * su * ci),
        a * su * si,
    ];
    let v = [
        a * n * (-co * su - so * cu * ci),
        a * n * (-so * su + co * cu * ci),
        a * n * cu * si,
    ];
    (r, v)
}

/// Greenwich sidereal angle at simulated time `t` (0 at the epoch).
pub fn earth_rotation_angle(spec_epoch_s: f64, t: f64) -> f64 {
    EARTH_ROTATION_RAD_S * (t - spec_epoch_s)
}

/// Propagates every satellite of `spec` to time `t`.
pub fn propagate(spec: &ConstellationSpec, t: f64) -> Result<Vec<SatelliteState>> {
    spec.validate()?;
    if t < spec.epoch_s {
        return Err(Error::param("t", format!("{t} precedes epoch {}", spec.epoch_s)));
    }
    let a = spec.semi_major_axis_km();
    let n = spec.mean_motion();
    let inc = spec.inclination_deg.to_radians();
    let theta = earth_rotation_angle(spec.epoch_s, t);
    Ok(spec
        .slots()
        .into_iter()
        .map(|slot| {
            let u = slot.u0_rad + n * (t - spec.epoch_s);
            let (r, v) = inertial_state(a, n, inc, slot.raan_rad, u);
            SatelliteState {
                in_eclipse: shadowed(r, t),
                sat_id: slot.sat_id,
                plane: slot.plane,
                t,
                position_eci: r,
                position: rotate_z(r, -theta),
                velocity: v,
            }
        })
        .collect())
}

/// Unit vector towards the Sun in the inertial frame at time `t`
/// (vernal equinox at t = 0).
pub fn sun_direction(t: f64) -> Vec3 {
    let lam = 2.0 * PI * t / YEAR_S;
    let eps = OBLIQUITY_DEG.to_radians();
    [lam.cos(), lam.sin() * eps.cos(), lam.sin() * eps.sin()]
}

fn shadowed(r_eci: Vec3, t: f64) -> bool {
    let s = sun_direction(t);
    let along = dot(r_eci, s);
    if along >= 0.0 {
        return false;
    }
    let perp = sub(r_eci, scale(s, along));
    norm(perp) < EARTH_RADIUS_KM
}

/// Cylindrical-umbra eclipse test for a propagated state.
pub fn in_eclipse(sat: &SatelliteState, t: f64) -> bool {
    shadowed(sat.position_eci, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Industrial,
    Ogs,
    HapsAnchor,
    Haps,
}

/// Default elevation mask, degrees.
pub const DEFAULT_ELEVATION_MASK_DEG: f64 = 20.0;

fn default_mask() -> f64 {
    DEFAULT_ELEVATION_MASK_DEG
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundSite {
    pub site_id: String,
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    #[serde(default)]
    pub altitude_km: f64,
    #[serde(default = "default_mask")]
    pub min_elevation_deg: f64,
    pub kind: SiteKind,
}

impl GroundSite {
    pub fn new(id: &str, lat: f64, lon: f64, kind: SiteKind) -> Self {
        Self {
            site_id: id.to_string(),
            latitude_deg: lat,
            longitude_deg: lon,
            altitude_km: 0.0,
            min_elevation_deg: DEFAULT_ELEVATION_MASK_DEG,
            kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude_deg) {
            return Err(Error::param(
                "latitude_deg",
                format!("{}: {} outside [-90, 90]", self.site_id, self.latitude_deg),
            ));
        }
        if !(-90.0..=90.0).contains(&self.min_elevation_deg) {
            return Err(Error::param(
                "min_elevation_deg",
                format!("{}: {}", self.site_id, self.min_elevation_deg),
            ));
        }
        Ok(())
    }

    /// Earth-fixed position, km.
    pub fn position(&self) -> Vec3 {
        let r = EARTH_RADIUS_KM + self.altitude_km;
        let (sl, cl) = self.latitude_deg.to_radians().sin_cos();
        let (so, co) = self.longitude_deg.to_radians().sin_cos();
        [r * cl * co, r * cl * so, r * sl]
    }
}

/// Great-circle surface distance between two sites, km.
pub fn ground_distance_km(a: &GroundSite, b: &GroundSite) -> f64 {
    let pa = a.position();
    let pb = b.position();
    let c = (dot(pa, pb) / (norm(pa) * norm(pb))).clamp(-1.0, 1.0);
    EARTH_RADIUS_KM * c.acos()
}

/// Elevation of an Earth-fixed point `target` seen from `site`, degrees.
pub fn elevation_of(site: &GroundSite, target: Vec3) -> f64 {
    let p = site.position();
    let d = sub(target, p);
    let up = scale(p, 1.0 / norm(p));
    let vertical = dot(d, up);
    let horizontal = norm(sub(d, scale(up, vertical)));
    vertical.atan2(horizontal).to_degrees()
}

/// Geometric elevation of `sat` above the local horizon of `site`, degrees.
pub fn elevation(site: &GroundSite, sat: &SatelliteState) -> f64 {
    elevation_of(site, sat.position)
}

/// Straight-line site-to-satellite distance, km.
pub fn slant_range_km(site: &GroundSite, sat: &SatelliteState) -> f64 {
    norm(sub(sat.position, site.position()))
}

/// Slant range to an orbit of `altitude_km` seen at `elevation_deg`, km.
pub fn slant_range_at_elevation(altitude_km: f64, elevation_deg: f64) -> f64 {
    let re = EARTH_RADIUS_KM;
    let a = re + altitude_km;
    let e = elevation_deg.to_radians();
    (a * a - (re * e.cos()).powi(2)).sqrt() - re * e.sin()
}

/// One-way light-time over `distance_km`, s.
pub fn propagation_delay(distance_km: f64) -> f64 {
    debug_assert!(distance_km >= 0.0);
    distance_km.max(0.0) / SPEED_OF_LIGHT_KM_S
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactWindow {
    pub sat_id: String,
    pub site_id: String,
    pub t_rise: f64,
    pub t_set: f64,
    pub t_max_elev: f64,
    pub max_elevation_deg: f64,
}

impl ContactWindow {
    pub fn duration_s(&self) -> f64 {
        self.t_set - self.t_rise
    }

    pub fn covers(&self, t0: f64, t1: f64) -> bool {
        self.t_rise <= t0 && t1 <= self.t_set
    }

    pub fn contains(&self, t: f64) -> bool {
        self.t_rise <= t && t <= self.t_set
    }
}

/// Fast single-satellite evaluator used by the window search.
struct SatTrack {
    a: f64,
    n: f64,
    inc: f64,
    raan: f64,
    u0: f64,
    epoch: f64,
}

impl SatTrack {
    fn ecef(&self, t: f64) -> Vec3 {
        let u = self.u0 + self.n * (t - self.epoch);
        let (r, _) = inertial_state(self.a, self.n, self.inc, self.raan, u);
        rotate_z(r, -earth_rotation_angle(self.epoch, t))
    }
}

fn bisect(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    // f(lo) and f(hi) straddle zero.
    let flo = f(lo);
    while hi - lo > WINDOW_BISECT_TOL_S {
        let mid = 0.5 * (lo + hi);
        if (f(mid) >= 0.0) == (flo >= 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn golden_max(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > 1e-3 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

/// Visibility windows of every satellite over `site` in `[t0, t1]`, sorted by
/// rise time. Windows already open at `t0` (or still open at `t1`) are
/// truncated to the query interval.
pub fn contact_windows(
    spec: &ConstellationSpec,
    site: &GroundSite,
    t0: f64,
    t1: f64,
) -> Result<Vec<ContactWindow>> {
    spec.validate()?;
    site.validate()?;
    if t0 >= t1 {
        return Err(Error::param("t0", format!("t0 = {t0} must precede t1 = {t1}")));
    }
    let mask = site.min_elevation_deg;
    let mut out = Vec::new();
    for slot in spec.slots() {
        let track = SatTrack {
            a: spec.semi_major_axis_km(),
            n: spec.mean_motion(),
            inc: spec.inclination_deg.to_radians(),
            raan: slot.raan_rad,
            u0: slot.u0_rad,
            epoch: spec.epoch_s,
        };
        let f = |t: f64| elevation_of(site, track.ecef(t)) - mask;
        let mut open: Option<f64> = if f(t0) > 0.0 { Some(t0) } else { None };
        let mut prev_t = t0;
        let mut prev_f = f(t0);
        let mut t = t0;
        while t < t1 {
            t = (t + WINDOW_SCAN_STEP_S).min(t1);
            let ft = f(t);
            if prev_f <= 0.0 && ft > 0.0 {
                open = Some(bisect(&f, prev_t, t));
            } else if prev_f > 0.0 && ft <= 0.0 {
                if let Some(rise) = open.take() {
                    let set = bisect(&f, prev_t, t);
                    push_window(&mut out, &slot.sat_id, site, &f, rise, set, mask);
                }
            }
            prev_t = t;
            prev_f = ft;
        }
        if let Some(rise) = open {
            push_window(&mut out, &slot.sat_id, site, &f, rise, t1, mask);
        }
    }
    out.sort_by(|a, b| {
        a.t_rise
            .total_cmp(&b.t_rise)
            .then_with(|| a.sat_id.cmp(&b.sat_id))
    });
    Ok(out)
}

fn push_window(
    out: &mut Vec<ContactWindow>,
    sat: &str,
    site: &GroundSite,
    f: &dyn Fn(f64) -> f64,
    rise: f64,
    set: f64,
    mask: f64,
) {
    if set <= rise {
        return;
    }
    let t_max = golden_max(f, rise, set);
    let max_el = f(t_max) + mask;
    if max_el < mask {
        return;
    }
    out.push(ContactWindow {
        sat_id: sat.to_string(),
        site_id: site.site_id.clone(),
        t_rise: rise,
        t_set: set,
        t_max_elev: t_max.clamp(rise + 1e-9, set - 1e-9),
        max_elevation_deg: max_el,
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec_550() -> ConstellationSpec {
        ConstellationSpec {
            planes: 2,
            sats_per_plane: 4,
            altitude_km: 550.0,
            inclination_deg: 53.0,
            phasing_factor: 1,
            epoch_s: 0.0,
            raan_offset_deg: 0.0,
            anomaly_offset_deg: 0.0,
        }
    }

    #[test]
    fn period_at_550_km() {
        // 2π·sqrt(6921³ / 398600.4418) by hand: 5729.6 s.
        let t = orbital_period_s(550.0);
        let a: f64 = 6921.0;
        let oracle = 2.0 * PI * (a * a * a / 398_600.4418).sqrt();
        assert!((t - oracle).abs() < 1e-9);
        assert!((t / 60.0 - 95.5).abs() < 0.5, "period {t}");
    }

    #[test]
    fn zero_satellites_rejected() {
        let mut s = spec_550();
        s.sats_per_plane = 0;
        assert!(propagate(&s, 0.0).is_err());
        let mut s = spec_550();
        s.altitude_km = 200.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn before_epoch_rejected() {
        let mut s = spec_550();
        s.epoch_s = 100.0;
        assert!(propagate(&s, 50.0).is_err());
    }

    #[test]
    fn epoch_positions_sit_on_their_slots() {
        let s = spec_550();
        let states = propagate(&s, 0.0).unwrap();
        assert_eq!(states.len(), 8);
        for (st, slot) in states.iter().zip(s.slots()) {
            // plane 0, u0 = 0 => on the x axis, in the equatorial plane
            let a = s.semi_major_axis_km();
            let expect = inertial_state(a, s.mean_motion(), 53f64.to_radians(), slot.raan_rad, slot.u0_rad).0;
            for k in 0..3 {
                assert!((st.position_eci[k] - expect[k]).abs() < 1e-9);
            }
        }
        let first = &states[0].position_eci;
        assert!((first[0] - 6921.0).abs() < 1e-9 && first[1].abs() < 1e-9 && first[2].abs() < 1e-9);
    }

    #[test]
    fn radius_and_speed_are_constant() {
        let s = spec_550();
        let a = s.semi_major_axis_km();
        let v = (MU_EARTH / a).sqrt();
        for k in 0..50 {
            let t = k as f64 * 137.3;
            for st in propagate(&s, t).unwrap() {
                assert!((norm(st.position) - a).abs() < 1e-6);
                assert!((norm(st.position_eci) - a).abs() < 1e-6);
                assert!((norm(st.velocity) - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inertial_period_property() {
        let s = spec_550();
        let t = 1234.5;
        let p = s.period_s();
        let a = propagate(&s, t).unwrap();
        let b = propagate(&s, t + p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(norm(sub(x.position_eci, y.position_eci)) < 1e-6);
        }
    }

    fn zenith_sat(site: &GroundSite, alt: f64) -> SatelliteState {
        let p = site.position();
        let r = scale(p, (EARTH_RADIUS_KM + alt) / norm(p));
        SatelliteState {
            sat_id: "z".into(),
            plane: 0,
            t: 0.0,
            position_eci: r,
            position: r,
            velocity: [0.0; 3],
            in_eclipse: false,
        }
    }

    #[test]
    fn zenith_and_antipode_geometry() {
        let site = GroundSite::new("s", 48.1, 11.6, SiteKind::Ogs);
        let sat = zenith_sat(&site, 550.0);
        assert!((elevation(&site, &sat) - 90.0).abs() < 1e-6);
        assert!((slant_range_km(&site, &sat) - 550.0).abs() < 1e-9);
        let mut anti = sat.clone();
        anti.position = scale(sat.position, -1.0);
        assert!(elevation(&site, &anti) < 0.0);
    }

    #[test]
    fn elevation_invariant_under_common_rotation() {
        let s = spec_550();
        let site = GroundSite::new("s", 30.0, 10.0, SiteKind::Ogs);
        for st in propagate(&s, 900.0).unwrap() {
            let e0 = elevation(&site, &st);
            for rot in [0.3_f64, 1.7, -2.2] {
                let mut site2 = site.clone();
                site2.longitude_deg += rot.to_degrees();
                let mut st2 = st.clone();
                st2.position = rotate_z(st.position, rot);
                assert!((elevation(&site2, &st2) - e0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn slant_range_formula_matches_geometry() {
        assert!((slant_range_at_elevation(550.0, 90.0) - 550.0).abs() < 1e-9);
        let r20 = slant_range_at_elevation(550.0, 20.0);
        assert!(r20 > 1200.0 && r20 < 1400.0, "{r20}");
    }

    #[test]
    fn propagation_delay_values() {
        assert_eq!(propagation_delay(0.0), 0.0);
        let d = propagation_delay(550.0);
        assert!((d * 1e3 - 1.834).abs() < 1e-3, "{d}");
        for el in [20.0, 45.0, 90.0] {
            let rtt = 2.0 * propagation_delay(slant_range_at_elevation(550.0, el)) * 1e3;
            assert!(rtt >= 3.0 && rtt <= 9.5, "rtt {rtt} at {el}");
        }
    }

    #[test]
    fn eclipse_sunward_and_shadow() {
        let t = 0.0; // sun along +x
        let mk = |r: Vec3| SatelliteState {
            sat_id: "x".into(),
            plane: 0,
            t,
            position_eci: r,
            position: r,
            velocity: [0.0; 3],
            in_eclipse: false,
        };
        assert!(!in_eclipse(&mk([6921.0, 0.0, 0.0]), t));
        assert!(in_eclipse(&mk([-6921.0, 0.0, 0.0]), t));
        assert!(in_eclipse(&mk([-6921.0, 6000.0, 0.0]), t));
        assert!(!in_eclipse(&mk([-6921.0, 6500.0, 0.0]), t));
    }

    #[test]
    fn eclipse_fraction_equatorial_equinox() {
        // Sweep oracle: cylinder shadow occupies the arc where |sin u| < R/a on
        // the night side, i.e. fraction = asin(R/a) / π.
        let s = ConstellationSpec {
            planes: 1,
            sats_per_plane: 1,
            inclination_deg: 0.0,
            phasing_factor: 0,
            ..spec_550()
        };
        let p = s.period_s();
        let n = 100_000;
        let mut shadowed_count = 0;
        for k in 0..n {
            let t = p * k as f64 / n as f64;
            let st = &propagate(&s, t).unwrap()[0];
            if st.in_eclipse {
                shadowed_count += 1;
            }
        }
        let frac = shadowed_count as f64 / n as f64;
        let analytic = (EARTH_RADIUS_KM / s.semi_major_axis_km()).asin() / PI;
        assert!((frac - analytic).abs() < 2e-3, "{frac} vs {analytic}");
        assert!((frac - 0.3727).abs() < 5e-3);
    }

    fn overhead_site(s: &ConstellationSpec) -> GroundSite {
        // sub-satellite point of sat-0-0 at t = 300 s
        let st = &propagate(s, 300.0).unwrap()[0];
        let p = st.position;
        let lat = (p[2] / norm(p)).asin().to_degrees();
        let lon = p[1].atan2(p[0]).to_degrees();
        GroundSite::new("o", lat, lon, SiteKind::Ogs)
    }

    #[test]
    fn overhead_pass_duration_is_minutes() {
        let s = spec_550();
        let site = overhead_site(&s);
        let w = contact_windows(&s, &site, 0.0, 1200.0).unwrap();
        let w: Vec<_> = w.into_iter().filter(|w| w.sat_id == "sat-0-0").collect();
        assert_eq!(w.len(), 1);
        let d = w[0].duration_s();
        assert!(d > 120.0 && d < 600.0, "duration {d}");
        assert!(w[0].max_elevation_deg > 85.0);
        assert!(w[0].t_rise < w[0].t_max_elev && w[0].t_max_elev < w[0].t_set);
    }

    #[test]
    fn mask_90_is_empty_and_masks_nest() {
        let s = spec_550();
        let mut site = overhead_site(&s);
        site.min_elevation_deg = 90.0;
        assert!(contact_windows(&s, &site, 0.0, 1200.0).unwrap().is_empty());
        let mut prev: Option<(f64, f64)> = None;
        for mask in [10.0, 20.0, 40.0] {
            site.min_elevation_deg = mask;
            let w = contact_windows(&s, &site, 0.0, 1200.0).unwrap();
            let w = w.iter().find(|w| w.sat_id == "sat-0-0").unwrap();
            if let Some((r, st)) = prev {
                assert!(w.t_rise >= r && w.t_set <= st);
            }
            prev = Some((w.t_rise, w.t_set));
        }
    }

    #[test]
    fn window_boundaries_bracket_mask() {
        let s = spec_550();
        let site = GroundSite::new("b", 45.0, 8.0, SiteKind::Ogs);
        let wins = contact_windows(&s, &site, 0.0, 7200.0).unwrap();
        assert!(!wins.is_empty());
        let by_id: std::collections::HashMap<_, _> = s
            .slots()
            .into_iter()
            .map(|sl| (sl.sat_id.clone(), sl))
            .collect();
        for w in &wins {
            let sl = &by_id[&w.sat_id];
            let track = SatTrack {
                a: s.semi_major_axis_km(),
                n: s.mean_motion(),
                inc: s.inclination_deg.to_radians(),
                raan: sl.raan_rad,
                u0: sl.u0_rad,
                epoch: 0.0,
            };
            let el = |t: f64| elevation_of(&site, track.ecef(t));
            assert!(el(0.5 * (w.t_rise + w.t_set)) >= 20.0);
            if w.t_rise > 0.0 {
                assert!(el(w.t_rise - 1.0) < 20.0);
            }
            if w.t_set < 7200.0 {
                assert!(el(w.t_set + 1.0) < 20.0);
            }
        }
        for pair in wins.windows(2) {
            assert!(pair[0].t_rise <= pair[1].t_rise);
        }
    }
}
