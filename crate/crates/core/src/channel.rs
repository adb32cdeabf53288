//! FSO link budget, Gamma-Gamma scintillation, secret-key rate, quantum
//! memory decoherence and the Ka-band RF fallback link.
//!
//! Irradiance is normalized so that its mean equals `mean_irradiance`. The
//! Gamma-Gamma shape parameters follow the Andrews–Phillips plane-wave
//! expressions, with the aperture-averaged variant used whenever a receiver
//! aperture is given.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Asymptotic BB84 QBER above which no secret key can be distilled (f_EC = 1).
pub const QBER_LIMIT: f64 = 0.11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurbulenceProfile {
    pub rytov_variance: f64,
    pub fried_parameter_m: f64,
    pub outer_scale_m: f64,
    /// Path-integrated C_n² label, m^(1/3).
    pub cn2_index: f64,
    pub isoplanatic_angle_urad: f64,
}

impl TurbulenceProfile {
    /// Builds a consistent profile from a Fried parameter.
    pub fn from_fried(r0_m: f64, wavelength_nm: f64, path_m: f64) -> Result<Self> {
        if r0_m <= 0.0 {
            return Err(Error::param("fried_parameter_m", "r0 must be positive"));
        }
        let k = wavenumber(wavelength_nm);
        let cn2_l = r0_m.powf(-5.0 / 3.0) / (0.423 * k * k);
        Ok(Self {
            rytov_variance: rytov_from_fried(r0_m, wavelength_nm, path_m),
            fried_parameter_m: r0_m,
            outer_scale_m: 20.0,
            cn2_index: cn2_l,
            // θ0 = 0.314 r0 / H̄ with H̄ = path length
            isoplanatic_angle_urad: 0.314 * r0_m / path_m * 1e6,
        })
    }
}

/// Optical wavenumber 2π/λ, 1/m.
pub fn wavenumber(wavelength_nm: f64) -> f64 {
    2.0 * std::f64::consts::PI / (wavelength_nm * 1e-9)
}

/// Plane-wave Rytov variance implied by a Fried parameter over a turbulent
/// path of `path_m` metres:
/// σ_R² = 1.23 C_n² k^{7/6} L^{11/6} with C_n² L = r0^{-5/3} / (0.423 k²).
pub fn rytov_from_fried(r0_m: f64, wavelength_nm: f64, path_m: f64) -> f64 {
    let k = wavenumber(wavelength_nm);
    (1.23 / 0.423) * (path_m / k).powf(5.0 / 6.0) * r0_m.powf(-5.0 / 3.0)
}

/// Inverse of [`rytov_from_fried`].
pub fn fried_from_rytov(sigma_r2: f64, wavelength_nm: f64, path_m: f64) -> f64 {
    let k = wavenumber(wavelength_nm);
    ((1.23 / 0.423) * (path_m / k).powf(5.0 / 6.0) / sigma_r2).powf(3.0 / 5.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaGammaParams {
    pub alpha: f64,
    pub beta: f64,
    pub mean_irradiance: f64,
}

impl GammaGammaParams {
    pub fn new(alpha: f64, beta: f64, mean_irradiance: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > 0.0) {
            return Err(Error::param("alpha/beta", "shape parameters must be positive"));
        }
        if !(mean_irradiance > 0.0) {
            return Err(Error::param("mean_irradiance", "must be positive"));
        }
        Ok(Self {
            alpha,
            beta,
            mean_irradiance,
        })
    }

    /// σ_I² = 1/α + 1/β + 1/(αβ).
    pub fn scintillation_index(&self) -> f64 {
        1.0 / self.alpha + 1.0 / self.beta + 1.0 / (self.alpha * self.beta)
    }

    pub fn is_degenerate(&self) -> bool {
        self.alpha.is_infinite() && self.beta.is_infinite()
    }
}

/// Maps a Rytov variance to Gamma-Gamma shape parameters.
///
/// `aperture_m = 0` gives the point-receiver forms. A positive aperture uses
/// d = sqrt(k D² / 4L) over a turbulent path of `range_km`.
pub fn rytov_to_gg(
    sigma_r2: f64,
    aperture_m: f64,
    range_km: f64,
    wavelength_nm: f64,
) -> Result<GammaGammaParams> {
    if !(sigma_r2 >= 0.0) {
        return Err(Error::param("sigma_r2", format!("{sigma_r2} must be >= 0")));
    }
    if aperture_m < 0.0 {
        return Err(Error::param("aperture_m", "must be >= 0"));
    }
    if sigma_r2 == 0.0 {
        return Ok(GammaGammaParams {
            alpha: f64::INFINITY,
            beta: f64::INFINITY,
            mean_irradiance: 1.0,
        });
    }
    let d2 = if aperture_m > 0.0 && range_km > 0.0 {
        wavenumber(wavelength_nm) * aperture_m * aperture_m / (4.0 * range_km * 1e3)
    } else {
        0.0
    };
    let s125 = sigma_r2.powf(12.0 / 5.0);
    let ln_x = 0.49 * sigma_r2 / (1.0 + 0.65 * d2 + 1.11 * s125).powf(7.0 / 6.0);
    let ln_y = 0.51 * sigma_r2 * (1.0 + 0.69 * s125).powf(-5.0 / 6.0)
        / (1.0 + 0.90 * d2 + 0.62 * d2 * s125).powf(5.0 / 6.0);
    Ok(GammaGammaParams {
        alpha: 1.0 / ln_x.exp_m1(),
        beta: 1.0 / ln_y.exp_m1(),
        mean_irradiance: 1.0,
    })
}

/// Draws one normalized irradiance sample: I0 · X · Y with
/// X ~ Gamma(α, 1/α), Y ~ Gamma(β, 1/β).
pub fn sample_irradiance<R: Rng + ?Sized>(params: &GammaGammaParams, rng: &mut R) -> f64 {
    let x = unit_gamma(params.alpha, rng);
    let y = unit_gamma(params.beta, rng);
    params.mean_irradiance * x * y
}

fn unit_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape.is_infinite() {
        return 1.0;
    }
    Gamma::new(shape, 1.0 / shape)
        .expect("shape validated positive")
        .sample(rng)
}

/// Temporally correlated irradiance: each Gamma factor is independently
/// renewed with probability `1 - rho` per tick, so the marginal stays exactly
/// Gamma-Gamma while the autocorrelation decays as `rho^k`.
#[derive(Debug, Clone)]
pub struct IrradianceProcess {
    pub params: GammaGammaParams,
    pub rho: f64,
    large: f64,
    small: f64,
}

impl IrradianceProcess {
    pub fn new<R: Rng + ?Sized>(params: GammaGammaParams, rho: f64, rng: &mut R) -> Self {
        Self {
            large: unit_gamma(params.alpha, rng),
            small: unit_gamma(params.beta, rng),
            params,
            rho: rho.clamp(0.0, 1.0),
        }
    }

    pub fn set_params(&mut self, params: GammaGammaParams) {
        self.params = params;
    }

    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        if self.rho == 0.0 || rng.random::<f64>() >= self.rho {
            self.large = unit_gamma(self.params.alpha, rng);
        }
        if self.rho == 0.0 || rng.random::<f64>() >= self.rho {
            self.small = unit_gamma(self.params.beta, rng);
        }
        self.params.mean_irradiance * self.large * self.small
    }
}

/// ln K_ν(x) for x > 0 via the integral ∫₀^∞ exp(−x cosh t) cosh(νt) dt,
/// evaluated with the trapezoid rule in log space.
pub fn ln_bessel_k(nu: f64, x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let nu = nu.abs();
    let g = |t: f64| -x * t.cosh() + ln_cosh(nu * t);
    // Peak of g: x sinh t = ν tanh(νt); bracket by scanning.
    let h = (0.1 / x.sqrt()).min(0.02).max(1e-3);
    let mut t_peak = 0.0;
    let mut g_peak = g(0.0);
    let mut t = h;
    loop {
        let v = g(t);
        if v > g_peak {
            g_peak = v;
            t_peak = t;
        } else if t > t_peak + 1.0 && v < g_peak - 60.0 {
            break;
        }
        t += h;
        if t > 60.0 {
            break;
        }
    }
    let mut sum = 0.5 * (g(0.0) - g_peak).exp();
    let mut t = h;
    loop {
        let v = g(t);
        sum += (v - g_peak).exp();
        if t > t_peak && v < g_peak - 60.0 {
            break;
        }
        t += h;
    }
    g_peak + (sum * h).ln()
}

fn ln_cosh(y: f64) -> f64 {
    let a = y.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Gamma-Gamma probability density at normalized irradiance `irradiance`.
pub fn gg_pdf(irradiance: f64, params: &GammaGammaParams) -> Result<f64> {
    if !(irradiance > 0.0) {
        return Err(Error::param("irradiance", "pdf defined for I > 0"));
    }
    let (a, b) = (params.alpha, params.beta);
    let x = irradiance / params.mean_irradiance;
    let half = 0.5 * (a + b);
    let ln_p = std::f64::consts::LN_2 + half * (a * b).ln() - ln_gamma(a) - ln_gamma(b)
        - irradiance.ln()
        + half * x.ln()
        + ln_bessel_k(a - b, 2.0 * (a * b * x).sqrt());
    Ok(ln_p.exp())
}

/// Static link-budget inputs for one FSO link at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudgetInputs {
    pub wavelength_nm: f64,
    pub rx_aperture_m: f64,
    /// 1/e² beam divergence half-angle, µrad.
    pub divergence_urad: f64,
    pub range_km: f64,
    pub extinction_db_per_km: f64,
    /// Length of the absorbing atmospheric path, km.
    pub atm_path_km: f64,
    pub pointing_jitter_urad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub eta_geo: f64,
    pub eta_atm: f64,
    pub eta_turb: f64,
    pub eta_point: f64,
    pub eta_total: f64,
    pub wavelength_nm: f64,
    pub rx_aperture_m: f64,
    pub range_km: f64,
    pub extinction_db_per_km: f64,
    pub pointing_jitter_urad: f64,
}

/// Beam radius at the receiver, m.
pub fn beam_radius_m(inputs: &LinkBudgetInputs) -> f64 {
    inputs.divergence_urad * 1e-6 * inputs.range_km * 1e3
}

/// Fraction of a Gaussian beam of radius `w` collected by a centred circular
/// aperture of diameter `d`.
pub fn geometric_efficiency(inputs: &LinkBudgetInputs) -> f64 {
    let w = beam_radius_m(inputs);
    if w <= 0.0 {
        return 1.0;
    }
    let a = 0.5 * inputs.rx_aperture_m;
    -(-2.0 * a * a / (w * w)).exp_m1()
}

/// Beer-Lambert extinction over the atmospheric path.
pub fn atmospheric_efficiency(extinction_db_per_km: f64, path_km: f64) -> f64 {
    10f64.powf(-extinction_db_per_km * path_km / 10.0)
}

/// Draws a radial pointing error (µrad), Rayleigh with the configured jitter.
pub fn sample_pointing_error<R: Rng + ?Sized>(jitter_urad: f64, rng: &mut R) -> f64 {
    if jitter_urad <= 0.0 {
        return 0.0;
    }
    // inverse-CDF Rayleigh draw
    let u: f64 = rng.random();
    jitter_urad * (-2.0 * (1.0 - u).ln()).sqrt()
}

/// Loss from a radial pointing offset on a Gaussian beam.
pub fn pointing_efficiency(inputs: &LinkBudgetInputs, offset_urad: f64) -> f64 {
    let w = inputs.divergence_urad;
    if w <= 0.0 {
        return 1.0;
    }
    (-2.0 * offset_urad * offset_urad / (w * w)).exp()
}

/// Composes the four transmittance factors for one instant. `irradiance` is
/// the normalized turbulence sample, `pointing_offset_urad` the sampled
/// radial pointing error.
pub fn link_transmittance(
    inputs: &LinkBudgetInputs,
    irradiance: f64,
    pointing_offset_urad: f64,
) -> LinkBudget {
    let eta_geo = geometric_efficiency(inputs);
    let eta_atm = atmospheric_efficiency(inputs.extinction_db_per_km, inputs.atm_path_km);
    let eta_turb = irradiance.max(0.0);
    let eta_point = pointing_efficiency(inputs, pointing_offset_urad);
    LinkBudget {
        eta_total: compose_eta(eta_geo, eta_atm, eta_turb, eta_point),
        eta_geo,
        eta_atm,
        eta_turb,
        eta_point,
        wavelength_nm: inputs.wavelength_nm,
        rx_aperture_m: inputs.rx_aperture_m,
        range_km: inputs.range_km,
        extinction_db_per_km: inputs.extinction_db_per_km,
        pointing_jitter_urad: inputs.pointing_jitter_urad,
    }
}

/// Product of the factors, clamped to [0, 1].
pub fn compose_eta(geo: f64, atm: f64, turb: f64, point: f64) -> f64 {
    (geo * atm * turb * point).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QkdLinkModel {
    pub pulse_rate_hz: f64,
    pub sift_factor: f64,
    pub detector_efficiency: f64,
    pub dark_count_rate_hz: f64,
    pub intrinsic_error: f64,
    pub ec_inefficiency: f64,
}

impl Default for QkdLinkModel {
    fn default() -> Self {
        Self {
            pulse_rate_hz: 1e8,
            sift_factor: 0.5,
            detector_efficiency: 0.6,
            dark_count_rate_hz: 100.0,
            intrinsic_error: 0.01,
            ec_inefficiency: 1.16,
        }
    }
}

impl QkdLinkModel {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.pulse_rate_hz > 0.0) {
            return Err(Error::param("pulse_rate_hz", "must be positive"));
        }
        if !unit(self.sift_factor) || !unit(self.detector_efficiency) || !unit(self.intrinsic_error) {
            return Err(Error::param("qkd", "sift/detector/intrinsic error must lie in [0, 1]"));
        }
        if self.dark_count_rate_hz < 0.0 {
            return Err(Error::param("dark_count_rate_hz", "must be >= 0"));
        }
        if self.ec_inefficiency < 1.0 {
            return Err(Error::param("ec_inefficiency", "must be >= 1"));
        }
        Ok(())
    }

    /// QBER at channel transmittance `eta_total`.
    pub fn qber(&self, eta_total: f64) -> f64 {
        let signal = self.pulse_rate_hz * eta_total * self.detector_efficiency;
        let dark = self.dark_count_rate_hz;
        if signal + dark <= 0.0 {
            return 0.5;
        }
        (self.intrinsic_error * signal + 0.5 * dark) / (signal + dark)
    }
}

/// Binary Shannon entropy, bits.
pub fn binary_entropy(q: f64) -> f64 {
    if q <= 0.0 || q >= 1.0 {
        return 0.0;
    }
    -q * q.log2() - (1.0 - q) * (1.0 - q).log2()
}

/// Asymptotic BB84 secret-key rate, bits/s.
pub fn secret_key_rate(model: &QkdLinkModel, eta_total: f64) -> f64 {
    let eta = eta_total.clamp(0.0, 1.0);
    let eta_sys = eta * model.detector_efficiency;
    let q = model.qber(eta);
    let h = binary_entropy(q);
    let fraction = (1.0 - model.ec_inefficiency * h - h).max(0.0);
    model.pulse_rate_hz * model.sift_factor * eta_sys * fraction
}

fn default_f_min() -> f64 {
    0.85
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantumMemorySpec {
    pub t2_s: f64,
    #[serde(default = "default_f_min")]
    pub f_min: f64,
    pub capacity: u32,
}

impl QuantumMemorySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t2_s > 0.0) {
            return Err(Error::param("t2_s", "must be positive"));
        }
        if !(0.5..=1.0).contains(&self.f_min) {
            return Err(Error::param("f_min", "must lie in [0.5, 1]"));
        }
        Ok(())
    }
}

/// F(t) = (1 + exp(−t/T2)) / 2.
pub fn memory_fidelity(spec: &QuantumMemorySpec, storage_time_s: f64) -> Result<f64> {
    if storage_time_s < 0.0 {
        return Err(Error::param("storage_time_s", "must be >= 0"));
    }
    Ok(0.5 * (1.0 + (-storage_time_s / spec.t2_s).exp()))
}

/// Longest storage time keeping fidelity at or above F_min:
/// T2 · ln(1 / (2 F_min − 1)).
pub fn entanglement_ttl(spec: &QuantumMemorySpec) -> Result<f64> {
    if !(spec.f_min > 0.5) {
        return Err(Error::param("f_min", "TTL undefined for F_min <= 0.5"));
    }
    if spec.f_min > 1.0 {
        return Err(Error::param("f_min", "must be <= 1"));
    }
    Ok(spec.t2_s * (1.0 / (2.0 * spec.f_min - 1.0)).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RfWeather {
    #[default]
    Clear,
    HeavyRain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RfLinkModel {
    pub nominal_capacity_bps: f64,
    /// Capacity multiplier under heavy rain, in [0, 1].
    pub rain_factor: f64,
}

impl Default for RfLinkModel {
    fn default() -> Self {
        Self {
            nominal_capacity_bps: 200e6,
            rain_factor: 0.35,
        }
    }
}

/// Classical Ka-band capacity of a visible RF link. RF never carries qubits,
/// so its key-rate contribution is identically zero (see [`rf_key_rate`]).
pub fn rf_fallback_capacity(model: &RfLinkModel, range_km: f64, weather: RfWeather) -> f64 {
    debug_assert!(range_km >= 0.0);
    match weather {
        RfWeather::Clear => model.nominal_capacity_bps,
        RfWeather::HeavyRain => model.nominal_capacity_bps * model.rain_factor,
    }
}

pub fn rf_key_rate() -> f64 {
    0.0
}

/// Ground or HAPS FSO terminal used for satellite QKD contacts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FsoTerminal {
    pub wavelength_nm: f64,
    pub rx_aperture_m: f64,
    pub divergence_urad: f64,
    pub pointing_jitter_urad: f64,
    /// Clear-air extinction inside the absorbing layer, dB/km.
    pub clear_extinction_db_per_km: f64,
    /// Thickness of the absorbing layer above the terminal, km.
    pub extinction_height_km: f64,
    /// Thickness of the turbulent layer above the terminal, km.
    pub turbulence_height_km: f64,
    /// Per-tick renewal correlation of the scintillation process.
    pub turbulence_rho: f64,
    /// Receiver field stop, µrad; 0 disables seeing-limited coupling loss.
    pub field_of_view_urad: f64,
}

impl Default for FsoTerminal {
    fn default() -> Self {
        Self {
            wavelength_nm: 850.0,
            rx_aperture_m: 0.4,
            divergence_urad: 10.0,
            pointing_jitter_urad: 1.0,
            clear_extinction_db_per_km: 0.2,
            extinction_height_km: 2.0,
            turbulence_height_km: 20.0,
            turbulence_rho: 0.9,
            field_of_view_urad: 20.0,
        }
    }
}

impl FsoTerminal {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength_nm > 0.0) || !(self.rx_aperture_m > 0.0) || !(self.divergence_urad > 0.0) {
            return Err(Error::param("terminal", "wavelength, aperture and divergence must be positive"));
        }
        if self.pointing_jitter_urad < 0.0
            || self.clear_extinction_db_per_km < 0.0
            || self.extinction_height_km < 0.0
            || self.turbulence_height_km < 0.0
            || self.field_of_view_urad < 0.0
        {
            return Err(Error::param("terminal", "jitter, extinction and layer heights must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.turbulence_rho) {
            return Err(Error::param("turbulence_rho", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Atmospheric conditions seen by one terminal at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteConditions {
    /// Zenith Fried parameter at the operating wavelength, m.
    pub r0_zenith_m: f64,
    /// Extinction inside the absorbing layer, dB/km.
    pub extinction_db_per_km: f64,
    /// Optically thick cloud on the line of sight.
    pub cloud: bool,
}

/// One evaluated FSO QKD link instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSample {
    pub budget: LinkBudget,
    pub sigma_r2: f64,
    pub skr_bps: f64,
    pub qber: f64,
    /// Detected signal over dark counts, dB.
    pub snr_db: f64,
    /// Beacon acquired (false under cloud).
    pub beacon: bool,
}

/// Static inputs and scintillation parameters of a slant FSO link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FsoLinkSetup {
    pub inputs: LinkBudgetInputs,
    pub params: GammaGammaParams,
    pub sigma_r2: f64,
}

pub fn fso_link_inputs(
    term: &FsoTerminal,
    range_km: f64,
    elevation_deg: f64,
    cond: &SiteConditions,
) -> Result<FsoLinkSetup> {
    let sin_el = elevation_deg.to_radians().sin().max(1e-3);
    let atm_path_km = term.extinction_height_km / sin_el;
    let turb_path_km = term.turbulence_height_km / sin_el;
    let r0_slant = cond.r0_zenith_m * sin_el.powf(0.6);
    let sigma_r2 = if term.turbulence_height_km > 0.0 {
        rytov_from_fried(r0_slant, term.wavelength_nm, turb_path_km * 1e3)
    } else {
        0.0
    };
    let mut params = rytov_to_gg(sigma_r2, term.rx_aperture_m, turb_path_km, term.wavelength_nm)?;
    params.mean_irradiance = field_stop_coupling(term, r0_slant);
    let inputs = LinkBudgetInputs {
        wavelength_nm: term.wavelength_nm,
        rx_aperture_m: term.rx_aperture_m,
        divergence_urad: term.divergence_urad,
        range_km,
        extinction_db_per_km: cond.extinction_db_per_km,
        atm_path_km,
        pointing_jitter_urad: term.pointing_jitter_urad,
    };
    Ok(FsoLinkSetup { inputs, params, sigma_r2 })
}

/// Fraction of the seeing-blurred spot passing the receiver field stop:
/// 1 / (1 + (λ / (r0 θ_fov))²). Equals 1 with the field stop disabled.
pub fn field_stop_coupling(term: &FsoTerminal, r0_m: f64) -> f64 {
    if term.field_of_view_urad <= 0.0 || r0_m.is_infinite() {
        return 1.0;
    }
    let seeing_urad = term.wavelength_nm * 1e-9 / r0_m * 1e6;
    1.0 / (1.0 + (seeing_urad / term.field_of_view_urad).powi(2))
}

/// Signal-to-dark ratio in dB at transmittance `eta_total`.
pub fn snr_db(model: &QkdLinkModel, eta_total: f64) -> f64 {
    let signal = model.pulse_rate_hz * eta_total * model.detector_efficiency;
    let dark = model.dark_count_rate_hz.max(1e-12);
    if signal <= 0.0 {
        return -200.0;
    }
    (10.0 * (signal / dark).log10()).max(-200.0)
}

/// Evaluates one link instant from already drawn turbulence and pointing
/// samples. `skr_gain` scales the key rate (turbo mode).
pub fn evaluate_fso_link(
    model: &QkdLinkModel,
    inputs: &LinkBudgetInputs,
    sigma_r2: f64,
    cloud: bool,
    irradiance: f64,
    pointing_offset_urad: f64,
    skr_gain: f64,
) -> ChannelSample {
    let mut budget = link_transmittance(inputs, irradiance, pointing_offset_urad);
    if cloud {
        budget.eta_atm = 0.0;
        budget.eta_total = 0.0;
    }
    let skr_bps = secret_key_rate(model, budget.eta_total) * skr_gain.max(0.0);
    ChannelSample {
        qber: model.qber(budget.eta_total),
        snr_db: snr_db(model, budget.eta_total),
        budget,
        sigma_r2,
        skr_bps,
        beacon: !cloud,
    }
}

/// Draws one FSO link instant with independent turbulence and pointing samples.
pub fn sample_fso_link<R: Rng + ?Sized>(
    term: &FsoTerminal,
    model: &QkdLinkModel,
    range_km: f64,
    elevation_deg: f64,
    cond: &SiteConditions,
    rng: &mut R,
) -> Result<ChannelSample> {
    let setup = fso_link_inputs(term, range_km, elevation_deg, cond)?;
    let irradiance = sample_irradiance(&setup.params, rng);
    let offset = sample_pointing_error(term.pointing_jitter_urad, rng);
    Ok(evaluate_fso_link(model, &setup.inputs, setup.sigma_r2, cond.cloud, irradiance, offset, 1.0))
}

/// Mean-field link: mean irradiance and the Rayleigh-averaged pointing loss
/// 1 / (1 + 4σ²/θ²). Used for forecasts and planning.
pub fn expected_fso_link(
    term: &FsoTerminal,
    model: &QkdLinkModel,
    range_km: f64,
    elevation_deg: f64,
    cond: &SiteConditions,
) -> Result<ChannelSample> {
    let setup = fso_link_inputs(term, range_km, elevation_deg, cond)?;
    let mut sample = evaluate_fso_link(
        model,
        &setup.inputs,
        setup.sigma_r2,
        cond.cloud,
        setup.params.mean_irradiance,
        0.0,
        1.0,
    );
    let ratio = term.pointing_jitter_urad / term.divergence_urad;
    let eta_point = 1.0 / (1.0 + 4.0 * ratio * ratio);
    if !cond.cloud {
        let b = &mut sample.budget;
        b.eta_point = eta_point;
        b.eta_total = compose_eta(b.eta_geo, b.eta_atm, b.eta_turb, eta_point);
        sample.skr_bps = secret_key_rate(model, b.eta_total);
        sample.qber = model.qber(b.eta_total);
        sample.snr_db = snr_db(model, b.eta_total);
    }
    Ok(sample)
}
