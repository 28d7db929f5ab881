//! Verification harness: conservation monitors, convergence studies against
//! RK4 oracles, the small-horizon KKT oracle, regularity sweeps and
//! derivative cross-checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{residual_order_k, run_trajectory, NewtonSettings, StepState, TrajectoryRecord};
use crate::liegroup::{AlgebraVector, CoalgebraVector, GroupElement, GroupTag};
use crate::model::{Func, HoSystemModel, ReducedWindow, SlotDerivative};
use crate::systems::{
    beanie_discrete_limit_rhs, beanie_first_order_initial_state, build_beanie_model, build_electron_model,
    electron_continuous_rhs, electron_state_from_samples, omega_from_group, rk4_integrate, BeanieParams,
    BeanieVariant, ElectronParams,
};

/// Condition estimates above this are flagged.
pub const COND_FLAG: f64 = 1e12;

// ------------------------------------------------------------- monitors

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitorSeries {
    pub values: Vec<f64>,
    pub deviations: Vec<f64>,
    pub max_deviation: f64,
}

impl MonitorSeries {
    fn from_deviations(values: Vec<f64>, deviations: Vec<f64>) -> Self {
        let max_deviation = deviations.iter().copied().fold(0.0, f64::max);
        MonitorSeries {
            values,
            deviations,
            max_deviation,
        }
    }

    fn drift(values: Vec<f64>) -> Self {
        let v0 = values.first().copied().unwrap_or(0.0);
        let dev = values.iter().map(|v| (v - v0).abs()).collect();
        Self::from_deviations(values, dev)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Monitor {
    Active(MonitorSeries),
    NotApplicable { note: String },
}

impl Monitor {
    pub fn series(&self) -> Option<&MonitorSeries> {
        match self {
            Monitor::Active(s) => Some(s),
            Monitor::NotApplicable { .. } => None,
        }
    }

    fn na(note: &str) -> Self {
        Monitor::NotApplicable { note: note.to_string() }
    }
}

/// Per-window monitors of a trajectory. `length` is the number of windows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConservationReport {
    pub length: usize,
    /// SO(2) charge slot `xi_n` (first group part of each window).
    pub charge: Monitor,
    /// `|lambda_n - lambda_0|`.
    pub multiplier_drift: Monitor,
    /// Body rotation rate `-angle(g~_n A_n^-1) / h` on SE(2).
    pub omega3: Monitor,
    /// `|M_n - Ad*_{W_{n-1}} M_{n-1}|`, with `M_n` the multiplier-augmented
    /// momentum; one entry per window from index `k` on.
    pub transport: Monitor,
    pub constraints: Monitor,
}

fn window_w(model: &HoSystemModel, w: &ReducedWindow) -> GroupElement {
    let a = model.connection().eval_a(w.shape(0).as_slice(), w.shape(1).as_slice());
    w.group(0).compose(&a.inverse())
}

/// Augmented momentum `M_n = sum_o right D_{o+k+2}(L + lambda chi)(a_{n-o})`.
fn augmented_momentum(
    model: &HoSystemModel,
    windows: &[ReducedWindow],
    lambdas: &[DVector<f64>],
    n: usize,
) -> Result<CoalgebraVector> {
    let k = model.order();
    let mut m = CoalgebraVector::zero(model.tag());
    for o in 0..k {
        let j = n - o;
        let d = model.augmented_slot_derivative(o + k + 2, &windows[j], lambdas[j].as_slice())?;
        m = m.add(d.right());
    }
    Ok(m)
}

pub fn monitor_trajectory(model: &HoSystemModel, rec: &TrajectoryRecord) -> Result<ConservationReport> {
    let k = model.order();
    let wins = &rec.windows;
    let len = wins.len();
    let has_m = model.n_constraints() > 0;

    let charge = if model.tag() == GroupTag::So2 && has_m {
        Monitor::Active(MonitorSeries::drift(wins.iter().map(|w| w.group(0).angle()).collect()))
    } else {
        Monitor::na("no constrained SO(2) charge slot")
    };
    let multiplier_drift = if has_m {
        let l0 = &rec.lambdas[0];
        let dev: Vec<f64> = rec.lambdas.iter().map(|l| (l - l0).amax()).collect();
        Monitor::Active(MonitorSeries::from_deviations(dev.clone(), dev))
    } else {
        Monitor::na("no constraints")
    };
    let omega3 = if model.tag() == GroupTag::Se2 {
        let h = model.h();
        Monitor::Active(MonitorSeries::drift(
            wins.iter().map(|w| -window_w(model, w).angle() / h).collect(),
        ))
    } else {
        Monitor::na("group is not SE(2)")
    };
    let mut transport = Vec::new();
    if len > k {
        let mut prev = augmented_momentum(model, wins, &rec.lambdas, k - 1)?;
        for n in k..len {
            let cur = augmented_momentum(model, wins, &rec.lambdas, n)?;
            let moved = window_w(model, &wins[n - 1]).coadjoint(&prev);
            transport.push(cur.sub(&moved).norm_inf());
            prev = cur;
        }
    }
    let constraints = if has_m {
        let v = wins
            .iter()
            .map(|w| model.eval_chi(w).map(|c| c.amax()))
            .collect::<Result<Vec<f64>>>()?;
        Monitor::Active(MonitorSeries::from_deviations(v.clone(), v))
    } else {
        Monitor::na("no constraints")
    };
    Ok(ConservationReport {
        length: len,
        charge,
        multiplier_drift,
        omega3,
        transport: Monitor::Active(MonitorSeries::from_deviations(transport.clone(), transport)),
        constraints,
    })
}

// ---------------------------------------------------------- convergence

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorNorm {
    Sup,
    Rms,
}

/// Dense RK4 solution on a uniform grid of step `h_ref`.
#[derive(Debug, Clone)]
pub struct OracleGrid {
    pub h_ref: f64,
    pub states: Vec<DVector<f64>>,
}

impl OracleGrid {
    pub fn solve<F>(rhs: F, y0: &DVector<f64>, h_ref: f64, horizon: f64) -> Result<Self>
    where
        F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
    {
        let n = grid_steps(horizon, h_ref)?;
        Ok(OracleGrid {
            h_ref,
            states: rk4_integrate(rhs, y0, h_ref, n)?,
        })
    }

    /// State at a grid time.
    pub fn at(&self, t: f64) -> Result<&DVector<f64>> {
        let i = grid_steps(t, self.h_ref).or_else(|_| {
            if t == 0.0 {
                Ok(0)
            } else {
                Err(Error::Inconsistent(format!("t = {t} is off the oracle grid")))
            }
        })?;
        self.states
            .get(i)
            .ok_or_else(|| Error::Inconsistent(format!("t = {t} beyond the oracle horizon")))
    }
}

/// `round(t / h)` when `t` is an integer multiple of `h`.
fn grid_steps(t: f64, h: f64) -> Result<usize> {
    let x = t / h;
    let n = x.round();
    if !(h > 0.0) || n < 1.0 || (x - n).abs() > 1e-6 * n.max(1.0) {
        return Err(Error::Parameter(format!("{t} is not a positive multiple of {h}")));
    }
    Ok(n as usize)
}

/// Discrete samples of one run: times and compared components.
#[derive(Debug, Clone)]
pub struct ConvergenceRun {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub h: Vec<f64>,
    pub errors: Vec<f64>,
    /// `log(e_i / e_{i+1}) / log(h_i / h_{i+1})` for consecutive pairs.
    pub pair_orders: Vec<f64>,
    /// Least-squares slope of `log e` against `log h` over the used points.
    pub fitted_order: f64,
    /// Root-mean-square residual of that fit.
    pub fit_residual: f64,
    pub used: Vec<bool>,
    pub solution_magnitude: f64,
    /// Set when some run did not converge; the report is then unreliable.
    pub flag: Option<String>,
}

impl ConvergenceReport {
    pub fn within(&self, band: (f64, f64)) -> bool {
        self.flag.is_none() && self.fitted_order >= band.0 && self.fitted_order <= band.1
    }
}

fn least_squares_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let res = (x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - my - slope * (a - mx)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    (slope, res)
}

/// Runs `run(h)` for each step size, measures the error against `oracle` on
/// the run's own grid, and fits the order. The coarsest point is left out
/// of the fit when its error exceeds 10% of the solution magnitude.
pub fn convergence_study<R>(h_list: &[f64], norm: ErrorNorm, oracle: &OracleGrid, run: R) -> Result<ConvergenceReport>
where
    R: Fn(f64) -> Result<ConvergenceRun>,
{
    if h_list.len() < 2 {
        return Err(Error::Parameter("a convergence study needs at least two step sizes".into()));
    }
    if h_list.windows(2).any(|p| p[1] >= p[0]) || h_list.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::Parameter("step sizes must be positive and strictly decreasing".into()));
    }
    let finest = h_list[h_list.len() - 1];
    if oracle.h_ref > finest / 100.0 * (1.0 + 1e-9) {
        return Err(Error::Parameter(format!(
            "oracle step {} is coarser than 1/100 of the finest step {finest}",
            oracle.h_ref
        )));
    }
    let mut errors = Vec::with_capacity(h_list.len());
    let mut magnitude: f64 = 0.0;
    let mut flag = None;
    for &h in h_list {
        let r = run(h)?;
        if !r.converged && flag.is_none() {
            flag = Some(format!("run with h = {h} did not converge"));
        }
        let mut sup: f64 = 0.0;
        let mut sq = 0.0;
        for (t, v) in r.times.iter().zip(&r.values) {
            let exact = oracle.at(*t)?;
            let e = (v - exact.rows(0, v.len())).amax();
            magnitude = magnitude.max(exact.rows(0, v.len()).amax());
            sup = sup.max(e);
            sq += e * e;
        }
        let err = match norm {
            ErrorNorm::Sup => sup,
            ErrorNorm::Rms => (sq / r.times.len().max(1) as f64).sqrt(),
        };
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("error norm at h = {h}")));
        }
        errors.push(err);
    }
    let mut used = vec![true; h_list.len()];
    if h_list.len() > 2 && errors[0] > 0.1 * magnitude {
        used[0] = false;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = h_list
        .iter()
        .zip(&errors)
        .zip(&used)
        .filter(|(_, u)| **u)
        .map(|((h, e), _)| (h.ln(), e.ln()))
        .unzip();
    let (fitted_order, fit_residual) = least_squares_slope(&x, &y);
    let pair_orders = (0..h_list.len() - 1)
        .map(|i| (errors[i] / errors[i + 1]).ln() / (h_list[i] / h_list[i + 1]).ln())
        .collect();
    Ok(ConvergenceReport {
        h: h_list.to_vec(),
        errors,
        pair_orders,
        fitted_order,
        fit_residual,
        used,
        solution_magnitude: magnitude,
        flag,
    })
}

/// Electron discrete flow against RK4 of the continuous equations. Each run
/// starts from oracle samples at `0, h, 2h, 3h` and marches to `horizon`;
/// positions are compared at every grid point.
pub fn electron_convergence(
    params: &ElectronParams,
    initial: &[f64; 12],
    h_list: &[f64],
    horizon: f64,
    settings: &NewtonSettings,
    oracle_factor: usize,
    norm: ErrorNorm,
) -> Result<ConvergenceReport> {
    let h_min = h_list.iter().copied().fold(f64::INFINITY, f64::min);
    let p = *params;
    let oracle = OracleGrid::solve(
        |_, y: &DVector<f64>| electron_continuous_rhs(&p, y.as_slice()),
        &DVector::from_row_slice(initial),
        h_min / oracle_factor as f64,
        horizon,
    )?;
    convergence_study(h_list, norm, &oracle, |h| {
        let total = grid_steps(horizon, h)?;
        if total < 4 {
            return Err(Error::Parameter(format!("horizon {horizon} too short for h = {h}")));
        }
        let xs: Vec<DVector<f64>> = (0..4)
            .map(|i| oracle.at(i as f64 * h).map(|s| s.rows(0, 3).into_owned()))
            .collect::<Result<_>>()?;
        let model = build_electron_model(params, h)?;
        let state = electron_state_from_samples(params, [&xs[0], &xs[1], &xs[2], &xs[3]], 0.0)?;
        let rec = run_trajectory(&model, &state, total - 3, settings)?;
        let pts = rec.shape_points();
        Ok(ConvergenceRun {
            times: (0..pts.len()).map(|i| i as f64 * h).collect(),
            values: pts,
            converged: rec.completed(),
        })
    })
}

/// First-order beanie flow against RK4 of its continuous limit; compares
/// `(psi_n, Omega^n)` on the grid.
#[allow(clippy::too_many_arguments)]
pub fn beanie_first_order_convergence(
    params: &BeanieParams,
    psi0: f64,
    psi_dot0: f64,
    omega0: [f64; 3],
    h_list: &[f64],
    horizon: f64,
    settings: &NewtonSettings,
    oracle_factor: usize,
) -> Result<ConvergenceReport> {
    let h_min = h_list.iter().copied().fold(f64::INFINITY, f64::min);
    let p = params.clone();
    let y0 = DVector::from_row_slice(&[psi0, psi_dot0, omega0[0], omega0[1], omega0[2]]);
    let oracle = OracleGrid::solve(
        |_, y: &DVector<f64>| beanie_discrete_limit_rhs(&p, y.as_slice()),
        &y0,
        h_min / oracle_factor as f64,
        horizon,
    )?;
    let c = params.coupling();
    convergence_study(h_list, ErrorNorm::Sup, &oracle, |h| {
        let total = grid_steps(horizon, h)?;
        let model = build_beanie_model(params, h, BeanieVariant::FirstOrder)?;
        let state = beanie_first_order_initial_state(params, h, psi0, psi_dot0, omega0)?;
        let rec = run_trajectory(&model, &state, total - 1, settings)?;
        let mut values = Vec::new();
        let mut times = Vec::new();
        for (n, w) in rec.windows.iter().enumerate() {
            let om = omega_from_group(w.group(0), w.shape(1)[0] - w.shape(0)[0], c, h);
            // Compare (psi, Omega) against oracle components (0, 2, 3, 4).
            let exact = oracle.at(n as f64 * h)?;
            let mut v = exact.clone();
            v[0] = w.shape(0)[0];
            v[1] = exact[1];
            v[2] = om[0];
            v[3] = om[1];
            v[4] = om[2];
            values.push(v);
            times.push(n as f64 * h);
        }
        Ok(ConvergenceRun {
            times,
            values,
            converged: rec.completed(),
        })
    })
}

// ---------------------------------------------------------- regularity

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularitySweep {
    /// One estimate per attempted step (the failing one included).
    pub steps: Vec<usize>,
    pub estimates: Vec<f64>,
    /// Steps whose estimate exceeds the flag threshold or is infinite.
    pub flagged: Vec<usize>,
    /// Largest `|ln(c_{i+1} / c_i)|` over consecutive finite estimates.
    pub max_log_ratio: f64,
}

pub fn regularity_sweep(rec: &TrajectoryRecord) -> RegularitySweep {
    let mut steps: Vec<usize> = rec.reports.iter().map(|r| r.step).collect();
    let mut estimates: Vec<f64> = rec.reports.iter().map(|r| r.cond_estimate).collect();
    if let Some(f) = &rec.failure {
        let cond = match f.error {
            Error::Regularity { cond, .. } => cond,
            _ => f.report.cond_estimate,
        };
        steps.push(f.report.step);
        estimates.push(cond);
    }
    let flagged = steps
        .iter()
        .zip(&estimates)
        .filter(|(_, c)| !(**c <= COND_FLAG))
        .map(|(s, _)| *s)
        .collect();
    let max_log_ratio = estimates
        .windows(2)
        .filter(|p| p[0].is_finite() && p[1].is_finite())
        .map(|p| (p[1] / p[0]).ln().abs())
        .fold(0.0, f64::max);
    RegularitySweep {
        steps,
        estimates,
        flagged,
        max_log_ratio,
    }
}

// ---------------------------------------------------------- derivatives

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotCheck {
    /// `"L"` or `"chi^a"` (1-based).
    pub func: String,
    pub slot: usize,
    pub worst_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub windows: usize,
    pub entries: Vec<SlotCheck>,
}

impl DerivativeReport {
    pub fn worst(&self) -> Option<&SlotCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.worst_relative_error.total_cmp(&b.worst_relative_error))
    }

    pub fn failures(&self, tol: f64) -> Vec<&SlotCheck> {
        self.entries.iter().filter(|e| !(e.worst_relative_error <= tol)).collect()
    }
}

/// Random windows of the model's shape: shape entries in `[-1, 1]`, SO(2)
/// angles in `[-1, 1]`, SE(2) parts with angle in `[-0.3, 0.3]` and
/// translation in `[-0.1, 0.1]^2`.
pub fn random_windows(model: &HoSystemModel, count: usize, seed: u64) -> Vec<ReducedWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, r) = (model.order(), model.shape_dim());
    (0..count)
        .map(|_| {
            let shapes = (0..=k)
                .map(|_| DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let groups = (0..k)
                .map(|_| match model.tag() {
                    GroupTag::So2 => GroupElement::so2(rng.random_range(-1.0..1.0)),
                    GroupTag::Se2 => GroupElement::se2(
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                    ),
                })
                .collect();
            ReducedWindow::new(shapes, groups).expect("consistent random window")
        })
        .collect()
}

fn derivative_entries(d: &SlotDerivative) -> Vec<f64> {
    match d {
        SlotDerivative::Shape(s) => s.iter().copied().collect(),
        SlotDerivative::Group { right, .. } => right.coords().to_vec(),
    }
}

/// Shipped derivatives against central differences on the given windows;
/// relative error `|a - fd|_inf / max(|fd|_inf, 1)`, worst over windows.
pub fn derivative_check(model: &HoSystemModel, windows: &[ReducedWindow]) -> Result<DerivativeReport> {
    let k = model.order();
    let mut funcs = vec![Func::Lagrangian];
    funcs.extend((0..model.n_constraints()).map(Func::Constraint));
    let mut entries = Vec::new();
    for func in funcs {
        for slot in 1..=2 * k + 1 {
            let mut worst: f64 = 0.0;
            for w in windows {
                let a = derivative_entries(&model.slot_derivative(func, slot, w)?);
                let f = derivative_entries(&model.fd_slot_derivative(func, slot, w)?);
                let diff = a.iter().zip(&f).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                let scale = f.iter().map(|v| v.abs()).fold(1.0, f64::max);
                worst = worst.max(diff / scale);
            }
            entries.push(SlotCheck {
                func: match func {
                    Func::Lagrangian => "L".to_string(),
                    Func::Constraint(a) => format!("chi^{}", a + 1),
                },
                slot,
                worst_relative_error: worst,
            });
        }
    }
    Ok(DerivativeReport {
        windows: windows.len(),
        entries,
    })
}

// ------------------------------------------------------------------ KKT

/// Unreduced configurations `q_j = (p_j, g_j)` with one multiplier vector
/// per window.
#[derive(Debug, Clone, PartialEq)]
pub struct KktPoint {
    pub shapes: Vec<DVector<f64>>,
    pub groups: Vec<GroupElement>,
    pub lambdas: Vec<DVector<f64>>,
}

impl KktPoint {
    /// Rebuilds `g_{j+1} = g_j g~_j A_j^-1` from a marching record with
    /// `g_0 = e`.
    pub fn from_record(model: &HoSystemModel, rec: &TrajectoryRecord) -> Self {
        let shapes = rec.shape_points();
        let parts = rec.group_parts();
        let mut groups = vec![GroupElement::identity(model.tag())];
        for (j, gt) in parts.iter().enumerate() {
            let a = model.connection().eval_a(shapes[j].as_slice(), shapes[j + 1].as_slice());
            let next = groups[j].compose(gt).compose(&a.inverse());
            groups.push(next);
        }
        KktPoint {
            shapes,
            groups,
            lambdas: rec.lambdas.clone(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.shapes.len() - 1
    }

    /// Reduced windows `a_j`, `j = 0..=N-k`.
    pub fn windows(&self, model: &HoSystemModel) -> Result<Vec<ReducedWindow>> {
        let k = model.order();
        let n = self.horizon();
        if n < 2 * k || self.groups.len() != n + 1 || self.lambdas.len() != n - k + 1 {
            return Err(Error::Inconsistent(format!(
                "KKT point with {} points, {} groups, {} multiplier vectors does not fit k = {k}",
                n + 1,
                self.groups.len(),
                self.lambdas.len()
            )));
        }
        let parts: Vec<GroupElement> = (0..n)
            .map(|i| {
                let a = model.connection().eval_a(self.shapes[i].as_slice(), self.shapes[i + 1].as_slice());
                self.groups[i].inverse().compose(&self.groups[i + 1]).compose(&a)
            })
            .collect();
        (0..=n - k)
            .map(|j| ReducedWindow::new(self.shapes[j..=j + k].to_vec(), parts[j..j + k].to_vec()))
            .collect()
    }

    fn distance(&self, other: &KktPoint) -> f64 {
        let mut d: f64 = 0.0;
        for (a, b) in self.shapes.iter().zip(&other.shapes) {
            d = d.max((a - b).amax());
        }
        for (a, b) in self.groups.iter().zip(&other.groups) {
            d = d.max(a.inverse().compose(b).log().norm_inf());
        }
        for (a, b) in self.lambdas.iter().zip(&other.lambdas) {
            d = d.max((a - b).amax());
        }
        d
    }
}

/// Stationarity of the constrained action sum `sum_j L(a_j) + lambda_j .
/// chi(a_j)` in every interior configuration `q_k..q_{N-k}` (shape rows, then
/// left-trivialized group rows), followed by every constraint value.
/// Rows carry the model's row scale.
pub fn kkt_residual(model: &HoSystemModel, point: &KktPoint) -> Result<DVector<f64>> {
    let (k, r, d, m) = (model.order(), model.shape_dim(), model.group_dim(), model.n_constraints());
    let n = point.horizon();
    let wins = point.windows(model)?;
    let conn = model.connection();
    let scale = model.row_scale();
    let interior = n - 2 * k + 1;
    let mut out = DVector::zeros(interior * (r + d) + wins.len() * m);
    let lam = |j: usize| point.lambdas[j].as_slice();
    // Left and right gradients of the action with respect to g~_i.
    let part_grad = |i: usize| -> Result<(CoalgebraVector, CoalgebraVector)> {
        let mut left = CoalgebraVector::zero(model.tag());
        let mut right = CoalgebraVector::zero(model.tag());
        for j in i.saturating_sub(k - 1)..=i.min(n - k) {
            let dz = model.augmented_slot_derivative(i - j + k + 2, &wins[j], lam(j))?;
            left = left.add(dz.left());
            right = right.add(dz.right());
        }
        Ok((left, right))
    };
    for (row, i) in (k..=n - k).enumerate() {
        let base = row * (r + d);
        let mut shape = DVector::zeros(r);
        for j in i - k..=i {
            shape += model.augmented_slot_derivative(i - j + 1, &wins[j], lam(j))?.shape();
        }
        let (left_prev, right_prev) = part_grad(i - 1)?;
        let (left_cur, right_cur) = part_grad(i)?;
        let p = |t: usize| point.shapes[t].as_slice();
        shape += conn.hat_l_contraction(2, p(i - 1), p(i), &left_prev)?;
        shape += conn.hat_l_contraction(1, p(i), p(i + 1), &left_cur)?;
        // Moving g_i changes g~_{i-1} on the right through W_{i-1} = g_{i-1}^-1 g_i
        // and g~_i on the left.
        let w_prev = point.groups[i - 1].inverse().compose(&point.groups[i]);
        let group = w_prev.coadjoint(&right_prev).sub(&right_cur);
        out.rows_mut(base, r).copy_from(&(shape * scale.shape));
        for a in 0..d {
            out[base + r + a] = group.get(a) * scale.momentum;
        }
    }
    let base = interior * (r + d);
    for (j, w) in wins.iter().enumerate() {
        let chi = model.eval_chi(w)?;
        for a in 0..m {
            out[base + j * m + a] = chi[a] * scale.constraint;
        }
    }
    Ok(out)
}

/// Fixed data of a KKT problem: the first and last `k` configurations, the
/// multipliers of the first `k` windows, and the horizon `N`.
#[derive(Debug, Clone)]
pub struct KktBoundary {
    pub horizon: usize,
    pub head: Vec<(DVector<f64>, GroupElement)>,
    pub tail: Vec<(DVector<f64>, GroupElement)>,
    pub history_lambdas: Vec<DVector<f64>>,
}

impl KktBoundary {
    pub fn from_point(model: &HoSystemModel, p: &KktPoint) -> Self {
        let k = model.order();
        let n = p.horizon();
        let q = |j: usize| (p.shapes[j].clone(), p.groups[j]);
        KktBoundary {
            horizon: n,
            head: (0..k).map(q).collect(),
            tail: (n - k + 1..=n).map(q).collect(),
            history_lambdas: p.lambdas[..k].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KktOutcome {
    pub converged: bool,
    pub point: Option<KktPoint>,
    /// Sup-norm of the scaled KKT residual at the returned point.
    pub residual: f64,
    /// Worst scaled step residual over the interior indices at that point.
    pub step_residual: f64,
    pub starts: usize,
    pub converged_starts: usize,
    pub deviation_from_reference: Option<f64>,
    pub note: Option<String>,
}

const KKT_TOL: f64 = 1e-11;

fn kkt_unknowns(model: &HoSystemModel, b: &KktBoundary) -> (usize, usize) {
    let (k, r, d) = (model.order(), model.shape_dim(), model.group_dim());
    let interior = b.horizon + 1 - 2 * k;
    (interior * (r + d), (b.horizon - k + 1) * model.n_constraints())
}

fn apply_kkt_step(model: &HoSystemModel, base: &KktPoint, delta: &[f64]) -> KktPoint {
    let (k, r, d, m) = (model.order(), model.shape_dim(), model.group_dim(), model.n_constraints());
    let mut p = base.clone();
    let n = base.horizon();
    let mut o = 0;
    for i in k..=n - k {
        for s in 0..r {
            p.shapes[i][s] += delta[o + s];
        }
        let xi = AlgebraVector::new(model.tag(), &delta[o + r..o + r + d]);
        p.groups[i] = p.groups[i].compose(&GroupElement::exp(&xi));
        o += r + d;
    }
    for l in p.lambdas.iter_mut() {
        for a in 0..m {
            l[a] += delta[o + a];
        }
        o += m;
    }
    p
}

fn kkt_system(model: &HoSystemModel, b: &KktBoundary, p: &KktPoint) -> Result<DVector<f64>> {
    let f = kkt_residual(model, p)?;
    let m = model.n_constraints();
    let pins = b.history_lambdas.len() * m;
    let mut out = DVector::zeros(f.len() + pins);
    out.rows_mut(0, f.len()).copy_from(&f);
    for (j, l) in b.history_lambdas.iter().enumerate() {
        for a in 0..m {
            out[f.len() + j * m + a] = p.lambdas[j][a] - l[a];
        }
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("KKT residual".into()));
    }
    Ok(out)
}

fn kkt_newton(model: &HoSystemModel, b: &KktBoundary, start: KktPoint) -> Result<(KktPoint, f64)> {
    let (nq, nl) = kkt_unknowns(model, b);
    let nz = nq + nl;
    let mut p = start;
    let mut f = kkt_system(model, b, &p)?;
    let mut norm = f.amax();
    for _ in 0..60 {
        if norm <= KKT_TOL {
            break;
        }
        let mut jac = DMatrix::zeros(f.len(), nz);
        let mut delta = vec![0.0; nz];
        for c in 0..nz {
            let step = 1e-6;
            delta[c] = step;
            let fp = kkt_system(model, b, &apply_kkt_step(model, &p, &delta))?;
            delta[c] = -step;
            let fm = kkt_system(model, b, &apply_kkt_step(model, &p, &delta))?;
            delta[c] = 0.0;
            jac.set_column(c, &((fp - fm) / (2.0 * step)));
        }
        let svd = jac.svd(true, true);
        let tol = svd.singular_values.max() * 1e-13;
        let dz = svd
            .solve(&(-&f), tol)
            .map_err(|e| Error::Inconsistent(format!("KKT least-squares solve: {e}")))?;
        let mut alpha = 1.0;
        loop {
            let step: Vec<f64> = dz.iter().map(|v| v * alpha).collect();
            let trial = apply_kkt_step(model, &p, &step);
            match kkt_system(model, b, &trial) {
                Ok(ft) if ft.amax() < norm => {
                    p = trial;
                    norm = ft.amax();
                    f = ft;
                    break;
                }
                _ if alpha < 1e-4 => return Ok((p, norm)),
                _ => alpha *= 0.5,
            }
        }
    }
    Ok((p, norm))
}

/// Initial guess: interior points interpolated between the last head and
/// first tail configuration, groups advanced by a constant increment, plus
/// seeded noise of size `noise`.
fn kkt_start(model: &HoSystemModel, b: &KktBoundary, rng: &mut ChaCha8Rng, noise: f64) -> KktPoint {
    let k = model.order();
    let n = b.horizon;
    let (pa, ga) = &b.head[k - 1];
    let (pb, gb) = &b.tail[0];
    let span = (n - k + 1 - (k - 1)) as f64;
    // With k >= 2 the head carries a group increment; repeating it avoids
    // the branch ambiguity of interpolating a wrapped logarithm.
    let log = if k >= 2 {
        b.head[k - 2].1.inverse().compose(ga).log().scale(span)
    } else {
        ga.inverse().compose(gb).log()
    };
    let mut shapes = Vec::new();
    let mut groups = Vec::new();
    for (p, g) in &b.head {
        shapes.push(p.clone());
        groups.push(*g);
    }
    for i in k..=n - k {
        let s = (i - (k - 1)) as f64 / span;
        let p = pa + (pb - pa) * s + DVector::from_fn(pa.len(), |_, _| noise * rng.random_range(-1.0..1.0));
        let mut xi = log.scale(s);
        let jitter = AlgebraVector::new(
            model.tag(),
            &(0..model.group_dim()).map(|_| noise * rng.random_range(-1.0..1.0)).collect::<Vec<_>>(),
        );
        xi = xi.add(&jitter);
        shapes.push(p);
        groups.push(ga.compose(&GroupElement::exp(&xi)));
    }
    for (p, g) in &b.tail {
        shapes.push(p.clone());
        groups.push(*g);
    }
    let mut lambdas = b.history_lambdas.clone();
    while lambdas.len() < n - k + 1 {
        lambdas.push(DVector::from_fn(model.n_constraints(), |_, _| noise * rng.random_range(-1.0..1.0)));
    }
    KktPoint {
        shapes,
        groups,
        lambdas,
    }
}

/// Worst scaled step residual `residual_order_k` over `n = k..=N-k`.
pub fn step_residual_at(model: &HoSystemModel, p: &KktPoint) -> Result<f64> {
    let k = model.order();
    let wins = p.windows(model)?;
    let mut worst: f64 = 0.0;
    for n in k..wins.len() {
        let state = StepState::new(wins[n - k..n].to_vec(), p.lambdas[n - k..n].to_vec(), n)?;
        let mut f = residual_order_k(model, &state, &wins[n], p.lambdas[n].as_slice())?;
        model.scale_rows(&mut f);
        worst = worst.max(f.amax());
    }
    Ok(worst)
}

/// Solves the KKT system of the constrained action sum for the given
/// boundary data by Gauss-Newton from `starts` seeded starting points. With
/// a reference, the converged root closest to it is returned.
pub fn kkt_oracle(
    model: &HoSystemModel,
    boundary: &KktBoundary,
    reference: Option<&KktPoint>,
    seed: u64,
    starts: usize,
) -> Result<KktOutcome> {
    let k = model.order();
    if boundary.horizon < 2 * k || boundary.horizon > 6 {
        return Err(Error::Parameter(format!(
            "KKT oracle needs 2k <= N <= 6, got N = {} for k = {k}",
            boundary.horizon
        )));
    }
    if boundary.head.len() != k || boundary.tail.len() != k || boundary.history_lambdas.len() != k {
        return Err(Error::Inconsistent("KKT boundary needs k head, tail and multiplier entries".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(KktPoint, f64, f64)> = None;
    let mut converged_starts = 0;
    for s in 0..starts.max(1) {
        let noise = if s == 0 { 0.0 } else { 0.05 * s as f64 };
        let start = kkt_start(model, boundary, &mut rng, noise);
        let Ok((p, res)) = kkt_newton(model, boundary, start) else {
            continue;
        };
        if res > 1e-9 {
            continue;
        }
        converged_starts += 1;
        let dist = reference.map(|r| p.distance(r)).unwrap_or(0.0);
        if best.as_ref().is_none_or(|(_, _, d)| dist < *d) {
            best = Some((p, res, dist));
        }
    }
    match best {
        Some((p, _, dist)) => {
            let residual = kkt_residual(model, &p)?.amax();
            let step_residual = step_residual_at(model, &p)?;
            Ok(KktOutcome {
                converged: true,
                point: Some(p),
                residual,
                step_residual,
                starts: starts.max(1),
                converged_starts,
                deviation_from_reference: reference.map(|_| dist),
                note: None,
            })
        }
        None => Ok(KktOutcome {
            converged: false,
            point: None,
            residual: f64::NAN,
            step_residual: f64::NAN,
            starts: starts.max(1),
            converged_starts: 0,
            deviation_from_reference: None,
            note: Some("oracle inconclusive: no start converged".into()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connection::trivial_connection;
    use crate::systems::{electron_initial_state, BeaniePotential};

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn quadratic(h: f64) -> HoSystemModel {
        HoSystemModel::new(
            "quad",
            1,
            0,
            h,
            trivial_connection(1, GroupTag::So2),
            move |w| {
                let v = (w.shape(1)[0] - w.shape(0)[0]) / h;
                0.5 * h * v * v - 0.5 * h * w.shape(0)[0].powi(2) + 0.5 * w.group(0).angle().powi(2) / h
            },
            |_| DVector::zeros(0),
        )
        .unwrap()
    }

    #[test]
    fn kkt_on_linear_problem_matches_recursion() {
        let h = 0.2;
        let model = quadratic(h);
        let n = 6;
        // Discrete EL: x_{j+1} = 2x_j - x_{j-1} - h^2 x_j; angles constant rate.
        let mut x = vec![1.0, 1.1];
        for j in 1..n {
            let next = 2.0 * x[j] - x[j - 1] - h * h * x[j];
            x.push(next);
        }
        let groups: Vec<GroupElement> = (0..=n).map(|j| GroupElement::so2(0.1 * j as f64)).collect();
        let exact = KktPoint {
            shapes: x.iter().map(|v| dv(&[*v])).collect(),
            groups,
            lambdas: vec![DVector::zeros(0); n],
        };
        let f0 = kkt_residual(&model, &exact).unwrap();
        // Derivatives of this model come from central differences.
        assert!(f0.amax() < 1e-9, "{f0}");
        let b = KktBoundary::from_point(&model, &exact);
        let out = kkt_oracle(&model, &b, Some(&exact), 1, 3).unwrap();
        assert!(out.converged);
        assert!(out.deviation_from_reference.unwrap() < 1e-9);
        assert!(out.step_residual < 1e-9);
    }

    // The KKT rows are derivatives of the unreduced action sum.
    #[test]
    fn kkt_residual_matches_action_gradient() {
        let h = 0.1;
        let p = BeanieParams::default();
        let model = build_beanie_model(&p, h, BeanieVariant::OptimalControl).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let point = KktPoint {
            shapes: (0..=n).map(|_| dv(&[rng.random_range(-0.5..0.5)])).collect(),
            groups: (0..=n)
                .map(|_| {
                    GroupElement::se2(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-0.2..0.2),
                    )
                })
                .collect(),
            lambdas: (0..=n - 2)
                .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        };
        let action = |q: &KktPoint| -> f64 {
            q.windows(&model)
                .unwrap()
                .iter()
                .enumerate()
                .map(|(j, w)| model.eval_ld(w).unwrap() + q.lambdas[j].dot(&model.eval_chi(w).unwrap()))
                .sum()
        };
        let f = kkt_residual(&model, &point).unwrap();
        let sc = model.row_scale();
        let dh = 1e-6;
        for (row, i) in (2..=n - 2).enumerate() {
            let mut qp = point.clone();
            qp.shapes[i][0] += dh;
            let mut qm = point.clone();
            qm.shapes[i][0] -= dh;
            let fd = (action(&qp) - action(&qm)) / (2.0 * dh);
            assert!((f[row * 4] / sc.shape - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "{} vs {fd}", f[row * 4] / sc.shape);
            for a in 0..3 {
                let e = AlgebraVector::basis(GroupTag::Se2, a);
                let mut qp = point.clone();
                qp.groups[i] = qp.groups[i].compose(&GroupElement::exp(&e.scale(dh)));
                let mut qm = point.clone();
                qm.groups[i] = qm.groups[i].compose(&GroupElement::exp(&e.scale(-dh)));
                let fd = (action(&qp) - action(&qm)) / (2.0 * dh);
                let got = f[row * 4 + 1 + a] / sc.momentum;
                assert!((got - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "{a}: {got} vs {fd}");
            }
        }
    }

    #[test]
    fn electron_monitors_and_single_window() {
        let p = ElectronParams::default();
        let h = 0.01;
        let model = build_electron_model(&p, h).unwrap();
        let init = [1.0, 0.0, 0.5, 0.0, 1.0, 0.0, -1.0, 0.0, -0.5, 0.0, -1.0, 0.0];
        let state = electron_initial_state(&p, h, &init, 0.3).unwrap();
        let rec = run_trajectory(&model, &state, 50, &NewtonSettings::default()).unwrap();
        let rep = monitor_trajectory(&model, &rec).unwrap();
        assert_eq!(rep.length, rec.windows.len());
        assert_eq!(rep.charge.series().unwrap().values.len(), rep.length);
        assert!(rep.charge.series().unwrap().max_deviation <= 1e-15);
        assert!(rep.multiplier_drift.series().unwrap().max_deviation <= 1e-9);
        assert!(rep.transport.series().unwrap().max_deviation <= 1e-9);
        assert!(matches!(rep.omega3, Monitor::NotApplicable { .. }));
        // Single window of a first-order model.
        let bp = BeanieParams::default();
        let bm = build_beanie_model(&bp, h, BeanieVariant::FirstOrder).unwrap();
        let s = beanie_first_order_initial_state(&bp, h, 0.0, 0.1, [1.0, 0.0, 0.2]).unwrap();
        let single = TrajectoryRecord {
            order: 1,
            windows: s.windows().to_vec(),
            lambdas: s.lambdas().to_vec(),
            reports: vec![],
            failure: None,
        };
        let r = monitor_trajectory(&bm, &single).unwrap();
        assert!(r.transport.series().unwrap().values.is_empty());
        assert!(matches!(r.charge, Monitor::NotApplicable { .. }));
        assert_eq!(r.omega3.series().unwrap().values.len(), 1);
        assert_eq!(monitor_trajectory(&bm, &single).unwrap(), r);
    }

    #[test]
    fn beanie_transport_per_step() {
        let p = BeanieParams::default();
        let h = 0.01;
        let model = build_beanie_model(&p, h, BeanieVariant::FirstOrder).unwrap();
        let s = beanie_first_order_initial_state(&p, h, 0.3, 0.2, [0.8, -0.4, 0.6]).unwrap();
        let rec = run_trajectory(&model, &s, 300, &NewtonSettings::default()).unwrap();
        let rep = monitor_trajectory(&model, &rec).unwrap();
        assert_eq!(rep.transport.series().unwrap().values.len(), 300);
        assert!(rep.transport.series().unwrap().max_deviation <= 1e-9);
        assert!(rep.omega3.series().unwrap().max_deviation <= 1e-9);
    }

    #[test]
    fn regularity_sweep_on_nominal_and_duplicate_constraints() {
        let p = ElectronParams::default();
        let h = 0.01;
        let model = build_electron_model(&p, h).unwrap();
        let init = [1.0, 0.0, 0.5, 0.0, 1.0, 0.0, -1.0, 0.0, -0.5, 0.0, -1.0, 0.0];
        let state = electron_initial_state(&p, h, &init, 0.0).unwrap();
        let rec = run_trajectory(&model, &state, 100, &NewtonSettings::default()).unwrap();
        let sw = regularity_sweep(&rec);
        assert!(sw.flagged.is_empty());
        assert!(sw.estimates.iter().all(|c| *c < 1e10));
        assert!(sw.max_log_ratio < 2.0);
        // Two identical constraint rows.
        let q = p.charge_ratio();
        let dup = HoSystemModel::new(
            "dup",
            2,
            2,
            h,
            trivial_connection(3, GroupTag::So2),
            |_| 0.0,
            move |w| {
                let c = 0.5 * (w.group(0).angle() + w.group(1).angle()) - q;
                dv(&[c, c])
            },
        )
        .unwrap();
        let s2 = StepState::new(
            state.windows().to_vec(),
            vec![DVector::zeros(2), DVector::zeros(2)],
            2,
        )
        .unwrap();
        let rec = run_trajectory(&dup, &s2, 3, &NewtonSettings::default()).unwrap();
        let sw = regularity_sweep(&rec);
        assert_eq!(sw.flagged, vec![2]);
    }

    #[test]
    fn derivative_check_reports() {
        let bp = BeanieParams::default();
        let m = build_beanie_model(&bp, 0.01, BeanieVariant::OptimalControl).unwrap();
        let wins = random_windows(&m, 10, 3);
        let rep = derivative_check(&m, &wins).unwrap();
        assert_eq!(rep.entries.len(), 4 * 5);
        assert!(rep.worst().unwrap().worst_relative_error <= 1e-6, "{:?}", rep.worst());
        let fd = m.finite_difference_provider();
        let rep = derivative_check(&fd, &wins).unwrap();
        assert_eq!(rep.worst().unwrap().worst_relative_error, 0.0);
        let bad = BeanieParams {
            epsilon_sign: -1.0,
            ..bp
        };
        let m = build_beanie_model(&bad, 0.01, BeanieVariant::OptimalControl).unwrap();
        let rep = derivative_check(&m, &wins).unwrap();
        let fails = rep.failures(1e-5);
        assert!(!fails.is_empty());
        assert!(fails.iter().all(|f| f.func.starts_with("chi") && f.slot >= 4));
    }

    #[test]
    fn convergence_rejects_bad_lists_and_is_deterministic() {
        let p = ElectronParams::default();
        let init = [1.0, 0.0, 0.5, 0.0, 1.0, 0.0, -1.0, 0.0, -0.5, 0.0, -1.0, 0.0];
        let s = NewtonSettings::default();
        assert!(electron_convergence(&p, &init, &[0.01], 0.2, &s, 100, ErrorNorm::Sup).is_err());
        assert!(electron_convergence(&p, &init, &[0.01, 0.02], 0.2, &s, 100, ErrorNorm::Sup).is_err());
        let a = electron_convergence(&p, &init, &[0.02, 0.01], 0.2, &s, 100, ErrorNorm::Sup).unwrap();
        let b = electron_convergence(&p, &init, &[0.02, 0.01], 0.2, &s, 100, ErrorNorm::Sup).unwrap();
        assert_eq!(a, b);
        let fine = electron_convergence(&p, &init, &[0.02, 0.01], 0.2, &s, 200, ErrorNorm::Sup).unwrap();
        for (x, y) in a.errors.iter().zip(&fine.errors) {
            assert!((x - y).abs() <= 0.01 * y);
        }
    }

    #[test]
    fn beanie_first_order_converges_to_its_limit() {
        let p = BeanieParams {
            potential: BeaniePotential::Cosine { v0: 0.5 },
            ..Default::default()
        };
        let rep = beanie_first_order_convergence(
            &p,
            0.3,
            0.2,
            [1.0, 0.0, 0.7],
            &[0.04, 0.02, 0.01, 0.005],
            1.0,
            &NewtonSettings::default(),
            100,
        )
        .unwrap();
        assert!(rep.flag.is_none());
        assert!((0.8..=1.2).contains(&rep.fitted_order), "{rep:?}");
    }
}
