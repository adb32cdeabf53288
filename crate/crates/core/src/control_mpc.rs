//! Tier-1 predictive scheduling: a condensed linear-quadratic MPC solver,
//! per-satellite flight planning, carbon-aware deferral of bulk transfers
//! and handover-horizon prediction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::FlowDemand;
use crate::orbits::ContactWindow;

/// Finite-horizon LQ problem with box constraints.
///
/// `b` holds one input matrix (time-invariant) or `horizon` matrices.
/// `disturbance` is empty or holds one forecast term per step. Bounds may be
/// infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    pub horizon: usize,
    pub a: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub disturbance: Vec<DVector<f64>>,
    pub x_min: DVector<f64>,
    pub x_max: DVector<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
}

impl MpcProblem {
    /// Unconstrained problem with time-invariant dynamics.
    pub fn new(horizon: usize, a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        let n = a.nrows();
        let m = b.ncols();
        Self {
            horizon,
            a,
            b: vec![b],
            q,
            r,
            disturbance: vec![],
            x_min: DVector::from_element(n, f64::NEG_INFINITY),
            x_max: DVector::from_element(n, f64::INFINITY),
            u_min: DVector::from_element(m, f64::NEG_INFINITY),
            u_max: DVector::from_element(m, f64::INFINITY),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.first().map_or(0, |b| b.ncols())
    }

    fn b_at(&self, k: usize) -> &DMatrix<f64> {
        if self.b.len() == 1 {
            &self.b[0]
        } else {
            &self.b[k]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.control_dim();
        if self.horizon == 0 {
            return Err(Error::param("horizon", "must be at least 1"));
        }
        if !self.a.is_square() || self.q.shape() != (n, n) || self.r.shape() != (m, m) {
            return Err(Error::param("dimensions", "A, Q must be n x n and R m x m"));
        }
        if self.b.len() != 1 && self.b.len() != self.horizon {
            return Err(Error::param("b", "need one matrix or one per step"));
        }
        if self.b.iter().any(|b| b.shape() != (n, m)) {
            return Err(Error::param("b", "must be n x m"));
        }
        if !self.disturbance.is_empty()
            && (self.disturbance.len() != self.horizon || self.disturbance.iter().any(|d| d.len() != n))
        {
            return Err(Error::param("disturbance", "need one n-vector per step"));
        }
        if [&self.x_min, &self.x_max].iter().any(|v| v.len() != n)
            || [&self.u_min, &self.u_max].iter().any(|v| v.len() != m)
        {
            return Err(Error::param("bounds", "dimension mismatch"));
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(lo, hi)| lo > hi) {
            return Err(Error::param("u bounds", "u_min > u_max"));
        }
        let sym = |x: &DMatrix<f64>| (x - x.transpose()).amax() <= 1e-12 * (1.0 + x.amax());
        if !sym(&self.q) || !sym(&self.r) {
            return Err(Error::param("Q/R", "must be symmetric"));
        }
        if self.q.clone().symmetric_eigenvalues().min() < -1e-12 {
            return Err(Error::param("Q", "must be positive semidefinite"));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(Error::param("R", "must be positive definite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// Controls u[0..H-1].
    pub u: Vec<DVector<f64>>,
    /// Predicted states x[1..H].
    pub x: Vec<DVector<f64>>,
    pub objective: f64,
    pub iterations: usize,
}

pub const MPC_MAX_ITERATIONS: usize = 10_000;
pub const MPC_TOLERANCE: f64 = 1e-8;
const MAX_OUTER: usize = 40;
const FEASIBILITY_TOL: f64 = 1e-6;

/// Stacked prediction X = Φ x0 + Γ U + c for states x[1..H].
struct Condensed {
    phi: DMatrix<f64>,
    gamma: DMatrix<f64>,
    c: DVector<f64>,
}

fn condense(p: &MpcProblem) -> Condensed {
    let (n, m, h) = (p.state_dim(), p.control_dim(), p.horizon);
    let mut apow = vec![DMatrix::<f64>::identity(n, n)];
    for k in 1..=h {
        apow.push(&p.a * &apow[k - 1]);
    }
    let mut phi = DMatrix::zeros(n * h, n);
    let mut gamma = DMatrix::zeros(n * h, m * h);
    let mut c = DVector::zeros(n * h);
    for k in 0..h {
        phi.view_mut((k * n, 0), (n, n)).copy_from(&apow[k + 1]);
        for j in 0..=k {
            let blk = &apow[k - j] * p.b_at(j);
            gamma.view_mut((k * n, j * m), (n, m)).copy_from(&blk);
            if let Some(d) = p.disturbance.get(j) {
                let add = &apow[k - j] * d;
                let mut seg = c.rows_mut(k * n, n);
                seg += add;
            }
        }
    }
    Condensed { phi, gamma, c }
}

fn block_diag(m: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    let d = m.nrows();
    let mut out = DMatrix::zeros(d * h, d * h);
    for k in 0..h {
        out.view_mut((k * d, k * d), (d, d)).copy_from(m);
    }
    out
}

/// Upper bound on the spectral radius of a symmetric matrix.
fn gershgorin(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Solves the MPC problem by projected Nesterov gradient descent. Control
/// bounds are handled by projection, state bounds by an augmented
/// Lagrangian outer loop.
pub fn solve_mpc(p: &MpcProblem, x0: &DVector<f64>) -> Result<MpcSolution> {
    p.validate()?;
    let (n, m, h) = (p.state_dim(), p.control_dim(), p.horizon);
    if x0.len() != n {
        return Err(Error::param("x0", "dimension mismatch"));
    }
    if x0.iter().enumerate().any(|(i, v)| *v < p.x_min[i] - FEASIBILITY_TOL || *v > p.x_max[i] + FEASIBILITY_TOL) {
        return Err(Error::param("x0", "violates state constraints"));
    }
    let cd = condense(p);
    let qbar = block_diag(&p.q, h);
    let rbar = block_diag(&p.r, h);
    let hess = cd.gamma.transpose() * &qbar * &cd.gamma + &rbar;
    let free = &cd.phi * x0 + &cd.c;
    let lin = cd.gamma.transpose() * &qbar * &free;
    let constant = free.dot(&(&qbar * &free));
    let quad = |u: &DVector<f64>| u.dot(&(&hess * u)) + 2.0 * lin.dot(u) + constant;

    // State bounds as G U <= g.
    let mut g_rows: Vec<(usize, f64, f64)> = Vec::new(); // (row of gamma, sign, bound)
    for k in 0..h {
        for i in 0..n {
            let row = k * n + i;
            if p.x_max[i].is_finite() {
                g_rows.push((row, 1.0, p.x_max[i] - free[row]));
            }
            if p.x_min[i].is_finite() {
                g_rows.push((row, -1.0, free[row] - p.x_min[i]));
            }
        }
    }
    let nc = g_rows.len();
    let mut gmat = DMatrix::zeros(nc, m * h);
    let mut gvec = DVector::zeros(nc);
    for (ci, (row, sign, bound)) in g_rows.iter().enumerate() {
        gmat.row_mut(ci).copy_from(&(cd.gamma.row(*row) * *sign));
        gvec[ci] = *bound;
    }
    let gtg_norm = if nc > 0 { gershgorin(&(gmat.transpose() * &gmat)) } else { 0.0 };
    let h_norm = gershgorin(&hess);

    let lo = DVector::from_fn(m * h, |i, _| p.u_min[i % m]);
    let hi = DVector::from_fn(m * h, |i, _| p.u_max[i % m]);
    let project = |u: &mut DVector<f64>| {
        for i in 0..u.len() {
            u[i] = u[i].clamp(lo[i], hi[i]);
        }
    };

    let mut u = DVector::zeros(m * h);
    project(&mut u);
    let mut lambda = DVector::<f64>::zeros(nc);
    let mut rho = 10.0 * (1.0 + h_norm) / (1.0 + gtg_norm);
    let mut iterations = 0;
    let mut prev_violation = f64::INFINITY;

    for _ in 0..MAX_OUTER {
        let lipschitz = 2.0 * h_norm + rho * gtg_norm + 1e-12;
        let merit = |u: &DVector<f64>| {
            let mut v = quad(u);
            if nc > 0 {
                let s = &lambda + (&gmat * u - &gvec) * rho;
                v += s.iter().map(|x| x.max(0.0).powi(2)).sum::<f64>() / (2.0 * rho)
                    - lambda.norm_squared() / (2.0 * rho);
            }
            v
        };
        let grad = |u: &DVector<f64>| {
            let mut g = (&hess * u + &lin) * 2.0;
            if nc > 0 {
                let s = (&lambda + (&gmat * u - &gvec) * rho).map(|x| x.max(0.0));
                g += gmat.transpose() * s;
            }
            g
        };
        // FISTA with adaptive restart.
        let mut y = u.clone();
        let mut tk: f64 = 1.0;
        let mut f_u = merit(&u);
        for _ in 0..MPC_MAX_ITERATIONS {
            iterations += 1;
            let mut next = &y - grad(&y) / lipschitz;
            project(&mut next);
            let f_next = merit(&next);
            if f_next > f_u {
                y = u.clone();
                tk = 1.0;
                continue;
            }
            let step = (&next - &u).norm() * lipschitz;
            let decrease = f_u - f_next;
            let t_next = (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) / 2.0;
            y = &next + (&next - &u) * ((tk - 1.0) / t_next);
            tk = t_next;
            u = next;
            f_u = f_next;
            if step <= MPC_TOLERANCE || (decrease <= MPC_TOLERANCE * 1e-4 && step <= MPC_TOLERANCE * 1e3) {
                break;
            }
        }
        if nc == 0 {
            break;
        }
        let gu = &gmat * &u - &gvec;
        let violation = gu.max().max(0.0);
        lambda = (&lambda + &gu * rho).map(|x| x.max(0.0));
        if violation <= 1e-10 {
            // Complementarity: inactive multipliers must be zero.
            let slack_ok = gu.iter().zip(lambda.iter()).all(|(g, l)| *l == 0.0 || g.abs() <= 1e-8);
            if slack_ok {
                break;
            }
        }
        if violation > 0.25 * prev_violation {
            rho *= 10.0;
        }
        prev_violation = violation;
    }

    let x_stack = &free + &cd.gamma * &u;
    let violation = (0..h * n)
        .map(|row| {
            let i = row % n;
            (p.x_min[i] - x_stack[row]).max(x_stack[row] - p.x_max[i]).max(0.0)
        })
        .fold(0.0, f64::max);
    if violation > FEASIBILITY_TOL {
        return Err(Error::Infeasible(format!("state bound violated by {violation:.3e}")));
    }
    let objective = quad(&u);
    Ok(MpcSolution {
        u: (0..h).map(|k| u.rows(k * m, m).into_owned()).collect(),
        x: (0..h).map(|k| x_stack.rows(k * n, n).into_owned()).collect(),
        objective,
        iterations,
    })
}

/// Objective of a given control sequence, for comparisons.
pub fn mpc_objective(p: &MpcProblem, x0: &DVector<f64>, u: &[DVector<f64>]) -> f64 {
    let mut x = x0.clone();
    let mut j = 0.0;
    for (k, uk) in u.iter().enumerate() {
        x = &p.a * &x + p.b_at(k) * uk;
        if let Some(d) = p.disturbance.get(k) {
            x += d;
        }
        j += x.dot(&(&p.q * &x)) + uk.dot(&(&p.r * uk));
    }
    j
}

/// Satellite power budget used for flight planning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SatEnergyModel {
    pub capacity_wh: f64,
    pub reserve_wh: f64,
    pub awake_load_w: f64,
    pub sleep_load_w: f64,
    /// Optical terminal draw at full laser power.
    pub laser_w: f64,
    /// Solar array output when sunlit.
    pub solar_w: f64,
}

impl Default for SatEnergyModel {
    fn default() -> Self {
        Self {
            capacity_wh: 200.0,
            reserve_wh: 60.0,
            awake_load_w: 60.0,
            sleep_load_w: 25.0,
            laser_w: 120.0,
            solar_w: 110.0,
        }
    }
}

impl SatEnergyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.capacity_wh > 0.0) || !(0.0..=self.capacity_wh).contains(&self.reserve_wh) {
            return Err(Error::param("sat_energy", "need 0 <= reserve <= capacity, capacity > 0"));
        }
        if [self.awake_load_w, self.sleep_load_w, self.laser_w, self.solar_w].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::param("sat_energy", "powers must be non-negative"));
        }
        Ok(())
    }

    /// Net power for one step.
    pub fn net_power_w(&self, sunlit: bool, downlink_fraction: f64, laser_level: f64) -> f64 {
        let load = if downlink_fraction > 0.0 { self.awake_load_w } else { self.sleep_load_w };
        let solar = if sunlit { self.solar_w } else { 0.0 };
        solar - load - self.laser_w * downlink_fraction * laser_level
    }
}

/// Candidate downlink with its forecast value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactOption {
    pub sat_id: String,
    pub site_id: String,
    pub t_start: f64,
    pub t_end: f64,
    /// Expected secret-key rate under the forecast; zero when cloud-blocked.
    pub forecast_skr_bps: f64,
    pub site_ci: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanningHorizon {
    pub t0: f64,
    pub step_s: f64,
    pub steps: usize,
}

impl PlanningHorizon {
    pub fn end(&self) -> f64 {
        self.t0 + self.step_s * self.steps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum PlanAction {
    Downlink { site_id: String, t_start: f64, t_end: f64 },
    /// Downlink at reduced laser power; Type-III keying is throttled.
    LaserPower { site_id: String, level: f64, t_start: f64, t_end: f64 },
    Sleep { t_start: f64, t_end: f64 },
}

impl PlanAction {
    pub fn interval(&self) -> (f64, f64) {
        match self {
            PlanAction::Downlink { t_start, t_end, .. }
            | PlanAction::LaserPower { t_start, t_end, .. }
            | PlanAction::Sleep { t_start, t_end } => (*t_start, *t_end),
        }
    }

    /// Site and laser level when the action is a downlink.
    pub fn downlink(&self) -> Option<(&str, f64)> {
        match self {
            PlanAction::Downlink { site_id, .. } => Some((site_id, 1.0)),
            PlanAction::LaserPower { site_id, level, .. } => Some((site_id, *level)),
            PlanAction::Sleep { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeferDecision {
    pub flow_id: String,
    pub site_id: Option<String>,
    pub t_start: f64,
    pub t_end: f64,
    pub forecast_grams: f64,
}

/// Timed action schedule for one satellite. Deferred bulk transfers ride
/// on downlinks, so they are kept apart from the non-overlapping actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightPlan {
    pub sat_id: String,
    pub created_at: f64,
    pub actions: Vec<PlanAction>,
    #[serde(default)]
    pub deferred_bulk: Vec<DeferDecision>,
}

impl FlightPlan {
    /// Downlink site and laser level at time `t`.
    pub fn downlink_at(&self, t: f64) -> Option<(&str, f64)> {
        self.actions.iter().find_map(|a| {
            let (s, e) = a.interval();
            if t >= s && t < e {
                a.downlink()
            } else {
                None
            }
        })
    }

    /// Actions are ordered and non-overlapping, and each downlink lies
    /// inside a contact window for its site.
    pub fn check(&self, windows: &[ContactWindow]) -> Result<()> {
        let eps = 1e-9;
        for w in self.actions.windows(2) {
            if w[1].interval().0 < w[0].interval().1 - eps {
                return Err(Error::param("flight_plan", "overlapping actions"));
            }
        }
        for a in &self.actions {
            if let Some((site, _)) = a.downlink() {
                let (s, e) = a.interval();
                let covered = windows.iter().any(|w| {
                    w.sat_id == self.sat_id && w.site_id == site && w.t_rise <= s + eps && w.t_set >= e - eps
                });
                if !covered {
                    return Err(Error::param("flight_plan", format!("downlink to {site} outside a contact window")));
                }
            }
        }
        Ok(())
    }
}

/// Battery trajectory of a plan over the horizon, with the charge clamped at
/// capacity. Entry k is the charge at the end of step k.
pub fn simulate_plan_energy(
    plan: &FlightPlan,
    soc_wh: f64,
    energy: &SatEnergyModel,
    sunlit: &[bool],
    horizon: &PlanningHorizon,
) -> Vec<f64> {
    let mut soc = soc_wh;
    (0..horizon.steps)
        .map(|k| {
            let (s, e) = (horizon.t0 + k as f64 * horizon.step_s, horizon.t0 + (k + 1) as f64 * horizon.step_s);
            let mut used = 0.0;
            for a in &plan.actions {
                if let Some((_, level)) = a.downlink() {
                    let (a0, a1) = a.interval();
                    let ov = (e.min(a1) - s.max(a0)).max(0.0) / horizon.step_s;
                    used += ov * level;
                }
            }
            let frac = step_downlink_fraction(plan, s, e, horizon.step_s);
            let load = if frac > 0.0 { energy.awake_load_w } else { energy.sleep_load_w };
            let solar = if sunlit.get(k).copied().unwrap_or(true) { energy.solar_w } else { 0.0 };
            soc = (soc + (solar - load - energy.laser_w * used) * horizon.step_s / 3600.0).min(energy.capacity_wh);
            soc
        })
        .collect()
}

fn step_downlink_fraction(plan: &FlightPlan, s: f64, e: f64, step: f64) -> f64 {
    plan.actions
        .iter()
        .filter(|a| a.downlink().is_some())
        .map(|a| {
            let (a0, a1) = a.interval();
            (e.min(a1) - s.max(a0)).max(0.0) / step
        })
        .sum()
}

/// Safety margin kept above the reserve, Wh.
const RESERVE_MARGIN_WH: f64 = 1e-3;

/// Builds a flight plan for one satellite: one site per pass (highest
/// forecast key rate, then lowest site CI, then site id), laser power set by
/// the MPC so that the battery stays above reserve. Passes that cannot be
/// afforded even with the laser fully throttled are dropped, latest first.
pub fn plan_contacts(
    sat_id: &str,
    soc_wh: f64,
    options: &[ContactOption],
    energy: &SatEnergyModel,
    sunlit: &[bool],
    horizon: &PlanningHorizon,
) -> FlightPlan {
    let t_end = horizon.end();
    let mut mine: Vec<&ContactOption> = options
        .iter()
        .filter(|o| o.sat_id == sat_id && o.forecast_skr_bps > 0.0 && o.t_end > horizon.t0 && o.t_start < t_end)
        .collect();
    mine.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then_with(|| a.site_id.cmp(&b.site_id)));
    // Group overlapping windows into passes.
    let mut passes: Vec<Vec<&ContactOption>> = Vec::new();
    let mut pass_end = f64::NEG_INFINITY;
    for o in mine {
        if o.t_start < pass_end {
            passes.last_mut().expect("open pass").push(o);
            pass_end = pass_end.max(o.t_end);
        } else {
            passes.push(vec![o]);
            pass_end = o.t_end;
        }
    }
    let mut chosen: Vec<(String, f64, f64)> = passes
        .iter()
        .map(|p| {
            let best = p
                .iter()
                .min_by(|a, b| {
                    b.forecast_skr_bps
                        .total_cmp(&a.forecast_skr_bps)
                        .then(a.site_ci.total_cmp(&b.site_ci))
                        .then_with(|| a.site_id.cmp(&b.site_id))
                })
                .expect("non-empty pass");
            (best.site_id.clone(), best.t_start.max(horizon.t0), best.t_end.min(t_end))
        })
        .collect();
    // Consecutive passes may still touch after clipping; keep them disjoint.
    for i in 1..chosen.len() {
        if chosen[i].1 < chosen[i - 1].2 {
            chosen[i].1 = chosen[i - 1].2;
        }
    }
    chosen.retain(|c| c.2 > c.1);

    loop {
        if let Some(plan) = throttle_plan(sat_id, soc_wh, &chosen, energy, sunlit, horizon) {
            return plan;
        }
        if chosen.pop().is_none() {
            return FlightPlan {
                sat_id: sat_id.to_string(),
                created_at: horizon.t0,
                actions: sleep_only(horizon),
                deferred_bulk: vec![],
            };
        }
    }
}

fn sleep_only(horizon: &PlanningHorizon) -> Vec<PlanAction> {
    vec![PlanAction::Sleep { t_start: horizon.t0, t_end: horizon.end() }]
}

fn throttle_plan(
    sat_id: &str,
    soc_wh: f64,
    chosen: &[(String, f64, f64)],
    energy: &SatEnergyModel,
    sunlit: &[bool],
    horizon: &PlanningHorizon,
) -> Option<FlightPlan> {
    let steps = horizon.steps;
    let dt_h = horizon.step_s / 3600.0;
    let step_bounds = |k: usize| (horizon.t0 + k as f64 * horizon.step_s, horizon.t0 + (k + 1) as f64 * horizon.step_s);
    let cover: Vec<f64> = (0..steps)
        .map(|k| {
            let (s, e) = step_bounds(k);
            chosen.iter().map(|c| (e.min(c.2) - s.max(c.1)).max(0.0)).sum::<f64>() / horizon.step_s
        })
        .collect();
    // u_k: laser throttle in [0, 1]; soc_{k+1} = soc_k + d_k + B_k u_k.
    let reserve = energy.reserve_wh + RESERVE_MARGIN_WH;
    let levels: Vec<f64> = if chosen.is_empty() || steps == 0 {
        vec![1.0; steps]
    } else {
        let b: Vec<DMatrix<f64>> =
            cover.iter().map(|c| DMatrix::from_element(1, 1, energy.laser_w * c * dt_h)).collect();
        let disturbance = (0..steps)
            .map(|k| {
                let sun = sunlit.get(k).copied().unwrap_or(true);
                DVector::from_element(1, energy.net_power_w(sun, cover[k], 1.0) * dt_h)
            })
            .collect();
        let problem = MpcProblem {
            horizon: steps,
            a: DMatrix::identity(1, 1),
            b,
            q: DMatrix::zeros(1, 1),
            r: DMatrix::identity(1, 1),
            disturbance,
            x_min: DVector::from_element(1, reserve.min(soc_wh)),
            x_max: DVector::from_element(1, f64::INFINITY),
            u_min: DVector::zeros(1),
            u_max: DVector::from_element(1, 1.0),
        };
        let sol = solve_mpc(&problem, &DVector::from_element(1, soc_wh)).ok()?;
        sol.u.iter().map(|u| (1.0 - u[0]).clamp(0.0, 1.0)).collect()
    };

    let mut actions = Vec::new();
    let mut cursor = horizon.t0;
    for (site, s, e) in chosen {
        if *s > cursor {
            actions.push(PlanAction::Sleep { t_start: cursor, t_end: *s });
        }
        // Split the downlink at step boundaries where the laser level changes.
        let mut seg_start = *s;
        let level_at = |t: f64| {
            let k = (((t - horizon.t0) / horizon.step_s).floor() as usize).min(steps.saturating_sub(1));
            let l = levels.get(k).copied().unwrap_or(1.0);
            if l >= 1.0 - 1e-6 {
                1.0
            } else {
                (l * 1e6).floor() / 1e6
            }
        };
        while seg_start < *e {
            let level = level_at(seg_start);
            let mut seg_end = *e;
            let mut k = ((seg_start - horizon.t0) / horizon.step_s).floor() as usize + 1;
            while (horizon.t0 + k as f64 * horizon.step_s) < *e {
                let b = horizon.t0 + k as f64 * horizon.step_s;
                if level_at(b) != level {
                    seg_end = b;
                    break;
                }
                k += 1;
            }
            if level >= 1.0 {
                actions.push(PlanAction::Downlink { site_id: site.clone(), t_start: seg_start, t_end: seg_end });
            } else {
                actions.push(PlanAction::LaserPower { site_id: site.clone(), level, t_start: seg_start, t_end: seg_end });
            }
            seg_start = seg_end;
        }
        cursor = *e;
    }
    if cursor < horizon.end() {
        actions.push(PlanAction::Sleep { t_start: cursor, t_end: horizon.end() });
    }
    let plan = FlightPlan { sat_id: sat_id.to_string(), created_at: horizon.t0, actions, deferred_bulk: vec![] };
    let floor = energy.reserve_wh.min(soc_wh);
    let traj = simulate_plan_energy(&plan, soc_wh, energy, sunlit, horizon);
    // Without downlinks the plan is as frugal as it gets.
    if chosen.is_empty() || traj.iter().all(|s| *s >= floor) {
        Some(plan)
    } else {
        None
    }
}

/// Window in which a deferred bulk transfer may run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeferWindow {
    pub site_id: String,
    pub t_start: f64,
    pub t_end: f64,
    /// Forecast carbon intensity over the window, gCO2/kWh.
    pub ci_gco2_per_kwh: f64,
    /// Power drawn while the transfer runs, W.
    pub power_w: f64,
}

/// Assigns each Type-IV flow the option with the lowest forecast emissions:
/// running now, or a feasible window. Ties go to the earliest start, then to
/// running now, then site id.
pub fn carbon_aware_defer(flows: &[FlowDemand], windows: &[DeferWindow], now_ci: f64, now_power_w: f64) -> Vec<DeferDecision> {
    flows
        .iter()
        .map(|f| {
            let deadline = f.deadline_s.unwrap_or(f64::INFINITY);
            let dur = f.duration_s;
            let immediate = DeferDecision {
                flow_id: f.flow_id.clone(),
                site_id: None,
                t_start: f.start_s,
                t_end: f.start_s + dur,
                forecast_grams: now_power_w * now_ci * dur / 3.6e6,
            };
            if deadline - f.start_s <= dur {
                return immediate;
            }
            let deferred = windows.iter().filter_map(|w| {
                    let s = w.t_start.max(f.start_s);
                    let e = s + dur;
                    (e <= w.t_end + 1e-9 && e <= deadline + 1e-9).then(|| DeferDecision {
                        flow_id: f.flow_id.clone(),
                        site_id: Some(w.site_id.clone()),
                        t_start: s,
                        t_end: e,
                        forecast_grams: w.power_w * w.ci_gco2_per_kwh * dur / 3.6e6,
                    })
                });
            // Running now competes with the windows and wins ties.
            std::iter::once(immediate.clone())
                .chain(deferred)
                .min_by(|a, b| {
                    a.forecast_grams
                        .total_cmp(&b.forecast_grams)
                        .then(a.t_start.total_cmp(&b.t_start))
                        .then_with(|| a.site_id.is_some().cmp(&b.site_id.is_some()))
                        .then_with(|| a.site_id.cmp(&b.site_id))
                })
                .unwrap_or(immediate)
        })
        .collect()
}

/// Default lead time covering make-before-break preparation, s.
pub const HANDOVER_LEAD_S: f64 = 30.0;

/// Handover trigger for the pass of `sat_id` over `site_id` in progress at
/// `t`: the set time minus `lead_s`, clamped to `t`.
pub fn predict_handover_horizon(
    sat_id: &str,
    site_id: &str,
    windows: &[ContactWindow],
    t: f64,
    lead_s: f64,
) -> Option<f64> {
    windows
        .iter()
        .find(|w| w.sat_id == sat_id && w.site_id == site_id && w.t_rise <= t && t < w.t_set)
        .map(|w| (w.t_set - lead_s).max(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(h: usize) -> MpcProblem {
        let one = DMatrix::from_element(1, 1, 1.0);
        MpcProblem::new(h, one.clone(), one.clone(), one.clone(), one)
    }

    fn grid_oracle(x_min: f64) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..=4000 {
            let u0 = -2.0 + i as f64 * 1e-3;
            let x1 = 1.0 + u0;
            if x1 < x_min - 1e-12 {
                continue;
            }
            for j in 0..=4000 {
                let u1 = -2.0 + j as f64 * 1e-3;
                let x2 = x1 + u1;
                if x2 < x_min - 1e-12 {
                    continue;
                }
                best = best.min(x1 * x1 + x2 * x2 + u0 * u0 + u1 * u1);
            }
        }
        best
    }

    #[test]
    fn origin_is_fixed_point() {
        let sol = solve_mpc(&scalar(5), &DVector::zeros(1)).unwrap();
        assert!(sol.objective.abs() < 1e-12);
        assert!(sol.u.iter().all(|u| u[0].abs() < 1e-9));
    }

    #[test]
    fn scalar_toy_matches_grid_search() {
        let mut p = scalar(2);
        p.u_min = DVector::from_element(1, -2.0);
        p.u_max = DVector::from_element(1, 2.0);
        let x0 = DVector::from_element(1, 1.0);
        let sol = solve_mpc(&p, &x0).unwrap();
        let oracle = grid_oracle(f64::NEG_INFINITY);
        assert!((sol.objective - oracle).abs() < 1e-4, "{} vs {oracle}", sol.objective);
        assert!((sol.objective - 0.6).abs() < 1e-8);
        // binding reserve
        p.x_min = DVector::from_element(1, 0.5);
        let sol = solve_mpc(&p, &x0).unwrap();
        let oracle = grid_oracle(0.5);
        assert!((sol.objective - oracle).abs() < 1e-4, "{} vs {oracle}", sol.objective);
        assert!(sol.x.iter().all(|x| x[0] >= 0.5 - 1e-6));
        assert!((sol.x[1][0] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_problems() {
        let mut p = scalar(2);
        p.r = DMatrix::zeros(1, 1);
        assert!(solve_mpc(&p, &DVector::zeros(1)).is_err());
        let mut p = scalar(0);
        p.horizon = 0;
        assert!(p.validate().is_err());
        let mut p = scalar(2);
        p.x_min = DVector::from_element(1, 0.0);
        assert!(solve_mpc(&p, &DVector::from_element(1, -1.0)).is_err());
    }

    #[test]
    fn reports_infeasible() {
        let mut p = scalar(3);
        p.u_min = DVector::from_element(1, -0.1);
        p.u_max = DVector::from_element(1, 0.0);
        p.disturbance = vec![DVector::from_element(1, -1.0); 3];
        p.x_min = DVector::from_element(1, 0.0);
        let r = solve_mpc(&p, &DVector::from_element(1, 1.0));
        assert!(matches!(r, Err(Error::Infeasible(_))), "{r:?}");
    }

    fn opt(site: &str, s: f64, e: f64, skr: f64, ci: f64) -> ContactOption {
        ContactOption { sat_id: "sat-0-0".into(), site_id: site.into(), t_start: s, t_end: e, forecast_skr_bps: skr, site_ci: ci }
    }

    fn horizon() -> PlanningHorizon {
        PlanningHorizon { t0: 0.0, step_s: 60.0, steps: 30 }
    }

    #[test]
    fn single_window_selected() {
        let e = SatEnergyModel::default();
        let plan = plan_contacts("sat-0-0", 180.0, &[opt("ogs-a", 300.0, 700.0, 1e4, 100.0)], &e, &[true; 30], &horizon());
        assert_eq!(plan.downlink_at(500.0), Some(("ogs-a", 1.0)));
        assert_eq!(plan.downlink_at(100.0), None);
    }

    #[test]
    fn site_diversity_prefers_clear_site() {
        let e = SatEnergyModel::default();
        let opts = [opt("ogs-a", 300.0, 700.0, 0.0, 50.0), opt("ogs-b", 310.0, 690.0, 8e3, 300.0)];
        let plan = plan_contacts("sat-0-0", 180.0, &opts, &e, &[true; 30], &horizon());
        assert_eq!(plan.downlink_at(500.0).unwrap().0, "ogs-b");
        // equal rates: lower CI, then id
        let opts = [opt("ogs-b", 300.0, 700.0, 8e3, 50.0), opt("ogs-a", 300.0, 700.0, 8e3, 300.0)];
        let plan = plan_contacts("sat-0-0", 180.0, &opts, &e, &[true; 30], &horizon());
        assert_eq!(plan.downlink_at(500.0).unwrap().0, "ogs-b");
    }

    #[test]
    fn eclipse_pass_throttles_laser_and_keeps_reserve() {
        let e = SatEnergyModel::default();
        let sunlit = [false; 30];
        let h = horizon();
        let opts = [opt("ogs-a", 120.0, 1320.0, 1e4, 100.0)];
        let soc0 = 110.0;
        let plan = plan_contacts("sat-0-0", soc0, &opts, &e, &sunlit, &h);
        let throttled = plan.actions.iter().any(|a| matches!(a, PlanAction::LaserPower { level, .. } if *level < 1.0));
        assert!(throttled, "{plan:?}");
        let traj = simulate_plan_energy(&plan, soc0, &e, &sunlit, &h);
        assert!(traj.iter().all(|s| *s >= e.reserve_wh - 1e-9), "{traj:?}");
    }

    #[test]
    fn plan_respects_windows_and_order() {
        let e = SatEnergyModel::default();
        let opts = [opt("ogs-a", 100.0, 400.0, 1e4, 1.0), opt("ogs-b", 350.0, 800.0, 2e4, 1.0)];
        let plan = plan_contacts("sat-0-0", 180.0, &opts, &e, &[true; 30], &horizon());
        let windows: Vec<ContactWindow> = opts
            .iter()
            .map(|o| ContactWindow {
                sat_id: o.sat_id.clone(),
                site_id: o.site_id.clone(),
                t_rise: o.t_start,
                t_set: o.t_end,
                t_max_elev: 0.5 * (o.t_start + o.t_end),
                max_elevation_deg: 60.0,
            })
            .collect();
        plan.check(&windows).unwrap();
    }

    fn bulk(id: &str, start: f64, dur: f64, deadline: f64) -> FlowDemand {
        FlowDemand {
            flow_id: id.into(),
            src: "a".into(),
            dst: "b".into(),
            class: crate::netmodel::TrafficClass::TypeIV,
            data_rate_bps: 1e6,
            start_s: start,
            duration_s: dur,
            residency_forbidden_regions: Default::default(),
            deadline_s: Some(deadline),
        }
    }

    fn dwin(site: &str, s: f64, e: f64, ci: f64) -> DeferWindow {
        DeferWindow { site_id: site.into(), t_start: s, t_end: e, ci_gco2_per_kwh: ci, power_w: 500.0 }
    }

    #[test]
    fn deferral_picks_low_carbon_window() {
        let flows = [bulk("f", 0.0, 100.0, 5000.0)];
        let w = [dwin("hi", 500.0, 1000.0, 300.0), dwin("lo", 2000.0, 2500.0, 50.0)];
        let d = carbon_aware_defer(&flows, &w, 300.0, 500.0);
        assert_eq!(d[0].site_id.as_deref(), Some("lo"));
        // 500 W * 50 g/kWh * 100 s
        assert!((d[0].forecast_grams - 500.0 * 50.0 * 100.0 / 3.6e6).abs() < 1e-12);
        let flat = [dwin("b", 2000.0, 2500.0, 200.0), dwin("a", 500.0, 1000.0, 200.0)];
        assert_eq!(carbon_aware_defer(&flows, &flat, 300.0, 500.0)[0].site_id.as_deref(), Some("a"));
        let scaled: Vec<DeferWindow> =
            w.iter().map(|x| DeferWindow { ci_gco2_per_kwh: x.ci_gco2_per_kwh * 7.0, ..x.clone() }).collect();
        assert_eq!(carbon_aware_defer(&flows, &scaled, 7.0 * 300.0, 500.0)[0].site_id, d[0].site_id);
    }

    #[test]
    fn deferral_respects_deadlines() {
        let tight = [bulk("f", 0.0, 100.0, 100.0)];
        let w = [dwin("lo", 10.0, 500.0, 1.0)];
        let d = carbon_aware_defer(&tight, &w, 300.0, 500.0);
        assert_eq!(d[0].site_id, None);
        assert_eq!(d[0].t_start, 0.0);
        let f = [bulk("f", 0.0, 100.0, 1500.0)];
        let late = [dwin("lo", 1450.0, 3000.0, 1.0)];
        let d = carbon_aware_defer(&f, &late, 300.0, 500.0);
        assert!(d[0].t_end <= 1500.0);
    }

    #[test]
    fn handover_horizon() {
        let w = ContactWindow {
            sat_id: "s".into(),
            site_id: "g".into(),
            t_rise: 100.0,
            t_set: 500.0,
            t_max_elev: 300.0,
            max_elevation_deg: 50.0,
        };
        let ws = [w];
        assert_eq!(predict_handover_horizon("s", "g", &ws, 200.0, 30.0), Some(470.0));
        assert_eq!(predict_handover_horizon("s", "g", &ws, 490.0, 30.0), Some(490.0));
        assert_eq!(predict_handover_horizon("s", "g", &ws, 600.0, 30.0), None);
    }
}
