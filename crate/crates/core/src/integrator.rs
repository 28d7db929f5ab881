//! Step residuals of the discrete constrained Lagrange-Poincare equations and
//! the Newton marching solver built on them.
//!
//! A step at index `n` takes the history windows `a_{n-k} .. a_{n-1}` with
//! their multipliers and solves for the window `a_n` (only its last shape
//! point and last group part are new) together with `lambda^n`.

use std::fmt;

use nalgebra::DVector;

use crate::connection::ShapeCovector;
use crate::error::{Error, Result};
use crate::liegroup::{CoalgebraVector, GroupElement};
use crate::model::{condition_estimate, regularity_matrix, Func, HoSystemModel, ReducedWindow};

/// History needed to take one step: the `k` most recent windows and
/// multipliers. `n` is the index of the window the next step produces.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    windows: Vec<ReducedWindow>,
    lambdas: Vec<DVector<f64>>,
    n: usize,
}

impl StepState {
    pub fn new(windows: Vec<ReducedWindow>, lambdas: Vec<DVector<f64>>, n: usize) -> Result<Self> {
        let k = windows
            .first()
            .map(|w| w.order())
            .ok_or_else(|| Error::Inconsistent("step state needs at least one window".into()))?;
        if windows.len() != k || lambdas.len() != k {
            return Err(Error::Inconsistent(format!(
                "order {k} needs {k} windows and {k} multiplier vectors, got {} and {}",
                windows.len(),
                lambdas.len()
            )));
        }
        if n < k {
            return Err(Error::Inconsistent(format!("step index {n} is below the order {k}")));
        }
        if lambdas.iter().any(|l| l.len() != lambdas[0].len()) {
            return Err(Error::Inconsistent("multiplier vectors differ in length".into()));
        }
        for pair in windows.windows(2) {
            check_overlap(&pair[0], &pair[1])?;
        }
        Ok(StepState { windows, lambdas, n })
    }

    pub fn order(&self) -> usize {
        self.windows.len()
    }

    /// Index of the window the next step solves for.
    pub fn index(&self) -> usize {
        self.n
    }

    pub fn windows(&self) -> &[ReducedWindow] {
        &self.windows
    }

    pub fn lambdas(&self) -> &[DVector<f64>] {
        &self.lambdas
    }

    pub fn newest(&self) -> &ReducedWindow {
        &self.windows[self.windows.len() - 1]
    }

    pub fn newest_lambda(&self) -> &DVector<f64> {
        &self.lambdas[self.lambdas.len() - 1]
    }

    fn advanced(&self, w: ReducedWindow, lambda: DVector<f64>) -> StepState {
        let mut windows = self.windows[1..].to_vec();
        windows.push(w);
        let mut lambdas = self.lambdas[1..].to_vec();
        lambdas.push(lambda);
        StepState {
            windows,
            lambdas,
            n: self.n + 1,
        }
    }
}

/// Checks that `b` continues `a` by one index: shared shape points and group
/// parts must be identical.
pub fn check_overlap(a: &ReducedWindow, b: &ReducedWindow) -> Result<()> {
    let k = a.order();
    if b.order() != k || b.shape_dim() != a.shape_dim() || b.tag() != a.tag() {
        return Err(Error::Inconsistent("consecutive windows differ in layout".into()));
    }
    for s in 1..=k {
        if a.shape(s) != b.shape(s - 1) {
            return Err(Error::Inconsistent(format!(
                "shape point {s} of a window differs from shape point {} of its successor",
                s - 1
            )));
        }
    }
    for j in 1..k {
        if a.group(j) != b.group(j - 1) {
            return Err(Error::Inconsistent(format!(
                "group part {j} of a window differs from group part {} of its successor",
                j - 1
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    /// Differences of the newest-window terms, built from the model's
    /// derivative providers.
    Assembled,
    /// Central differences of the full step residual.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    /// Sup-norm tolerance on the row-scaled residual.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Initial step length; halved while the residual grows, down to 1/64.
    pub damping: f64,
    pub jacobian: JacobianMode,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            tolerance: 1e-10,
            max_iterations: 50,
            damping: 1.0,
            jacobian: JacobianMode::Assembled,
        }
    }
}

impl NewtonSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Parameter(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Parameter("max_iterations must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Parameter(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        Ok(())
    }
}

const DAMPING_FLOOR: f64 = 1.0 / 64.0;
const COND_WARN: f64 = 1e12;
/// History windows must satisfy the constraints to this (row-scaled) level.
const HISTORY_CONSTRAINT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Index of the window this step produced.
    pub step: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Row-scaled sup-norm residual, the quantity compared with the tolerance.
    pub residual: f64,
    /// Unscaled sup-norm residual.
    pub raw_residual: f64,
    /// Residual before each Newton update and after the last one.
    pub residual_history: Vec<f64>,
    pub cond_estimate: f64,
    /// Momentum covector of the state after the step.
    pub momentum: CoalgebraVector,
    pub constraint_residuals: Vec<f64>,
    pub warning: Option<String>,
}

/// A step that did not converge or hit a singular Jacobian. Carries the last
/// iterate so callers can still inspect it.
#[derive(Debug, Clone)]
pub struct StepFailure {
    pub error: Error,
    pub report: StepReport,
    pub last_window: ReducedWindow,
    pub last_lambda: DVector<f64>,
}

impl fmt::Display for StepFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for StepFailure {}

fn stack(model: &HoSystemModel, shape: &ShapeCovector, mom: &CoalgebraVector, chi: &DVector<f64>) -> DVector<f64> {
    let (r, d, m) = (model.shape_dim(), model.group_dim(), model.n_constraints());
    let mut out = DVector::zeros(r + d + m);
    out.rows_mut(0, r).copy_from(shape);
    for a in 0..d {
        out[r + a] = mom.get(a);
    }
    out.rows_mut(r + d, m).copy_from(chi);
    out
}

/// `W_{j} = g~_j A(p_j, p_{j+1})^-1` for the window starting at index `j`.
fn window_w(model: &HoSystemModel, w: &ReducedWindow) -> GroupElement {
    let a = model.connection().eval_a(w.shape(0).as_slice(), w.shape(1).as_slice());
    w.group(0).compose(&a.inverse())
}

/// General-order step residual: `wins[i]` is window `n - k + i` for
/// `i = 0..=k`, `lams[i]` its multipliers. Unscaled.
fn assemble(model: &HoSystemModel, wins: &[&ReducedWindow], lams: &[&[f64]]) -> Result<DVector<f64>> {
    let k = model.order();
    let conn = model.connection();
    let newest = wins[k];
    let prev = wins[k - 1];
    let (pn, pn1) = (newest.shape(0).as_slice(), newest.shape(1).as_slice());
    let (pm, pm1) = (prev.shape(0).as_slice(), prev.shape(1).as_slice());
    let mut shape = DVector::zeros(model.shape_dim());
    let mut mom_n = CoalgebraVector::zero(model.tag());
    let mut mom_prev = CoalgebraVector::zero(model.tag());
    for (i, w) in wins.iter().enumerate() {
        // Window n - o sees p_n in shape slot o + 1, g~_n in group slot
        // o + k + 2 and g~_{n-1} in group slot o + k + 1.
        let o = k - i;
        shape += model.augmented_slot_derivative(o + 1, w, lams[i])?.shape();
        if o < k {
            let dz = model.augmented_slot_derivative(o + k + 2, w, lams[i])?;
            shape += conn.hat_l_contraction(1, pn, pn1, dz.left())?;
            mom_n = mom_n.add(dz.right());
        }
        if o >= 1 {
            let dz = model.augmented_slot_derivative(o + k + 1, w, lams[i])?;
            shape += conn.hat_l_contraction(2, pm, pm1, dz.left())?;
            mom_prev = mom_prev.add(dz.right());
        }
    }
    let mom = mom_n.sub(&window_w(model, prev).coadjoint(&mom_prev));
    let chi = model.eval_chi(newest)?;
    Ok(stack(model, &shape, &mom, &chi))
}

fn check_lambda(model: &HoSystemModel, lambda: &[f64]) -> Result<()> {
    if lambda.len() != model.n_constraints() {
        return Err(Error::Inconsistent(format!(
            "{} multipliers for {} constraints",
            lambda.len(),
            model.n_constraints()
        )));
    }
    Ok(())
}

/// Step residual for any order `k`: shape stationarity at `p_n`, momentum
/// transport `M_n - Ad*_{W_{n-1}} M_{n-1}` including the multiplier terms,
/// and the constraints of the candidate window. Unscaled.
pub fn residual_order_k(
    model: &HoSystemModel,
    state: &StepState,
    candidate: &ReducedWindow,
    lambda: &[f64],
) -> Result<DVector<f64>> {
    if state.order() != model.order() {
        return Err(Error::Inconsistent(format!(
            "state of order {} for a model of order {}",
            state.order(),
            model.order()
        )));
    }
    check_overlap(state.newest(), candidate)?;
    check_lambda(model, lambda)?;
    for l in state.lambdas() {
        check_lambda(model, l.as_slice())?;
    }
    let mut wins: Vec<&ReducedWindow> = state.windows().iter().collect();
    wins.push(candidate);
    let mut lams: Vec<&[f64]> = state.lambdas().iter().map(|l| l.as_slice()).collect();
    lams.push(lambda);
    assemble(model, &wins, &lams)
}

/// First-order residual written out term by term: Lagrangian parts and
/// multiplier-weighted constraint parts are accumulated separately.
pub fn residual_first_order(
    model: &HoSystemModel,
    a_prev: &ReducedWindow,
    a_n: &ReducedWindow,
    lam_prev: &[f64],
    lam_n: &[f64],
) -> Result<DVector<f64>> {
    if model.order() != 1 {
        return Err(Error::Parameter(format!("first-order residual on a model of order {}", model.order())));
    }
    check_overlap(a_prev, a_n)?;
    check_lambda(model, lam_prev)?;
    check_lambda(model, lam_n)?;
    let conn = model.connection();
    let (pn, pn1) = (a_n.shape(0).as_slice(), a_n.shape(1).as_slice());
    let (pm, pm1) = (a_prev.shape(0).as_slice(), a_prev.shape(1).as_slice());
    let lag = Func::Lagrangian;

    let d3n = model.slot_derivative(lag, 3, a_n)?;
    let d3p = model.slot_derivative(lag, 3, a_prev)?;
    // Summed oldest window first, like the general assembly, so the two agree
    // to the last bit when there are no constraints.
    let mut shape = model.slot_derivative(lag, 2, a_prev)?.shape().clone();
    shape += conn.hat_l_contraction(2, pm, pm1, d3p.left())?;
    shape += model.slot_derivative(lag, 1, a_n)?.shape();
    shape += conn.hat_l_contraction(1, pn, pn1, d3n.left())?;

    let mut eps_n = CoalgebraVector::zero(model.tag());
    let mut eps_prev = CoalgebraVector::zero(model.tag());
    for a in 0..model.n_constraints() {
        let c = Func::Constraint(a);
        let c3n = model.slot_derivative(c, 3, a_n)?;
        let c3p = model.slot_derivative(c, 3, a_prev)?;
        let cur = model.slot_derivative(c, 1, a_n)?.shape() + conn.hat_l_contraction(1, pn, pn1, c3n.left())?;
        let old = model.slot_derivative(c, 2, a_prev)?.shape() + conn.hat_l_contraction(2, pm, pm1, c3p.left())?;
        shape += cur * lam_n[a] + old * lam_prev[a];
        eps_n = eps_n.add(&c3n.right().scale(lam_n[a]));
        eps_prev = eps_prev.add(&c3p.right().scale(lam_prev[a]));
    }
    let w = window_w(model, a_prev);
    let mom = d3n
        .right()
        .sub(&w.coadjoint(d3p.right()))
        .add(&eps_n)
        .sub(&w.coadjoint(&eps_prev));
    Ok(stack(model, &shape, &mom, &model.eval_chi(a_n)?))
}

/// Second-order residual written out term by term for windows
/// `a_{n-2}, a_{n-1}, a_n`.
pub fn residual_second_order(
    model: &HoSystemModel,
    windows: [&ReducedWindow; 3],
    lambdas: [&[f64]; 3],
) -> Result<DVector<f64>> {
    if model.order() != 2 {
        return Err(Error::Parameter(format!("second-order residual on a model of order {}", model.order())));
    }
    let [a2, a1, a0] = windows;
    let [l2, l1, l0] = lambdas;
    check_overlap(a2, a1)?;
    check_overlap(a1, a0)?;
    for l in lambdas {
        check_lambda(model, l)?;
    }
    let conn = model.connection();
    let (pn, pn1) = (a0.shape(0).as_slice(), a0.shape(1).as_slice());
    let (pm, pm1) = (a1.shape(0).as_slice(), a1.shape(1).as_slice());
    let hat1 = |mu: &CoalgebraVector| conn.hat_l_contraction(1, pn, pn1, mu);
    let hat2 = |mu: &CoalgebraVector| conn.hat_l_contraction(2, pm, pm1, mu);
    let d = |f: Func, slot: usize, w: &ReducedWindow| model.slot_derivative(f, slot, w);
    let lag = Func::Lagrangian;

    let d4_0 = d(lag, 4, a0)?;
    let d5_1 = d(lag, 5, a1)?;
    let d4_1 = d(lag, 4, a1)?;
    let d5_2 = d(lag, 5, a2)?;
    let mut shape = d(lag, 1, a0)?.shape() + d(lag, 2, a1)?.shape() + d(lag, 3, a2)?.shape();
    shape += hat1(&d4_0.left().add(d5_1.left()))?;
    shape += hat2(&d4_1.left().add(d5_2.left()))?;
    let m_n = d4_0.right().add(d5_1.right());
    let m_prev = d4_1.right().add(d5_2.right());

    let tag = model.tag();
    let (mut e_n4, mut e_n5) = (CoalgebraVector::zero(tag), CoalgebraVector::zero(tag));
    let (mut e_p4, mut e_p5) = (CoalgebraVector::zero(tag), CoalgebraVector::zero(tag));
    for a in 0..model.n_constraints() {
        let c = Func::Constraint(a);
        let c4_0 = d(c, 4, a0)?;
        let c5_1 = d(c, 5, a1)?;
        let c4_1 = d(c, 4, a1)?;
        let c5_2 = d(c, 5, a2)?;
        shape += d(c, 1, a0)?.shape() * l0[a];
        shape += d(c, 3, a2)?.shape() * l2[a];
        shape += hat1(&c4_0.left().scale(l0[a]).add(&c5_1.left().scale(l1[a])))?;
        shape += hat2(&c4_1.left().scale(l1[a]).add(&c5_2.left().scale(l2[a])))?;
        shape += d(c, 2, a1)?.shape() * l1[a];
        e_n4 = e_n4.add(&c4_0.right().scale(l0[a]));
        e_n5 = e_n5.add(&c5_1.right().scale(l1[a]));
        e_p4 = e_p4.add(&c4_1.right().scale(l1[a]));
        e_p5 = e_p5.add(&c5_2.right().scale(l2[a]));
    }
    let w = window_w(model, a1);
    let mom = m_n
        .sub(&w.coadjoint(&m_prev))
        .add(&e_n4)
        .add(&e_n5)
        .sub(&w.coadjoint(&e_p4.add(&e_p5)));
    Ok(stack(model, &shape, &mom, &model.eval_chi(a0)?))
}

/// `M` of the newest window in `state`: the right-trivialized Lagrangian
/// derivatives of every stored window with respect to the newest group part.
pub fn momentum_covector(model: &HoSystemModel, state: &StepState) -> Result<CoalgebraVector> {
    let k = model.order();
    let mut m = CoalgebraVector::zero(model.tag());
    for (i, w) in state.windows().iter().enumerate() {
        // The newest group part sits at slot 2k + 1 - (k - 1 - i).
        let slot = k + 2 + i;
        m = m.add(model.slot_derivative(Func::Lagrangian, slot, w)?.right());
    }
    Ok(m)
}

/// Predictor: linear extrapolation of the shape point, group extrapolation
/// by the last increment (copy for k = 1), multipliers copied.
pub fn predict(state: &StepState) -> (ReducedWindow, DVector<f64>) {
    let w = state.newest();
    let k = w.order();
    let p = w.shape(k) * 2.0 - w.shape(k - 1);
    let g = if k >= 2 {
        let last = w.group(k - 1);
        last.compose(&w.group(k - 2).inverse().compose(last))
    } else {
        *w.group(0)
    };
    (w.shifted(p, g), state.newest_lambda().clone())
}

fn scaled_residual(model: &HoSystemModel, state: &StepState, w: &ReducedWindow, lam: &[f64]) -> Result<DVector<f64>> {
    let mut f = residual_order_k(model, state, w, lam)?;
    model.scale_rows(&mut f);
    if !f.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("step residual at step {}", state.index())));
    }
    Ok(f)
}

fn fd_jacobian(
    model: &HoSystemModel,
    state: &StepState,
    w: &ReducedWindow,
    lam: &[f64],
) -> Result<nalgebra::DMatrix<f64>> {
    let n = model.step_dim();
    let steps = model.unknown_steps(w, lam);
    let mut jac = nalgebra::DMatrix::zeros(n, n);
    let mut delta = vec![0.0; n];
    for c in 0..n {
        delta[c] = steps[c];
        let (wp, lp) = model.perturb(w, lam, &delta);
        delta[c] = -steps[c];
        let (wm, lm) = model.perturb(w, lam, &delta);
        delta[c] = 0.0;
        let col = (scaled_residual(model, state, &wp, &lp)? - scaled_residual(model, state, &wm, &lm)?) / (2.0 * steps[c]);
        jac.set_column(c, &col);
    }
    Ok(jac)
}

fn jacobian(
    model: &HoSystemModel,
    state: &StepState,
    w: &ReducedWindow,
    lam: &[f64],
    mode: JacobianMode,
) -> Result<nalgebra::DMatrix<f64>> {
    match mode {
        JacobianMode::Assembled => regularity_matrix(model, w, lam),
        JacobianMode::FiniteDifference => fd_jacobian(model, state, w, lam),
    }
}

fn unscaled_norm(model: &HoSystemModel, state: &StepState, w: &ReducedWindow, lam: &[f64]) -> f64 {
    residual_order_k(model, state, w, lam).map(|f| f.amax()).unwrap_or(f64::NAN)
}

/// Solves one step by damped Newton iteration from the predictor. Group
/// unknowns are updated through `g <- g exp(delta)`.
pub fn step_advance(
    model: &HoSystemModel,
    state: &StepState,
    settings: &NewtonSettings,
) -> std::result::Result<(StepState, StepReport), Box<StepFailure>> {
    let (w0, l0) = predict(state);
    let empty = StepReport {
        step: state.index(),
        converged: false,
        iterations: 0,
        residual: f64::NAN,
        raw_residual: f64::NAN,
        residual_history: Vec::new(),
        cond_estimate: f64::NAN,
        momentum: CoalgebraVector::zero(model.tag()),
        constraint_residuals: Vec::new(),
        warning: None,
    };
    let fail = |error: Error, report: StepReport, w: &ReducedWindow, l: &DVector<f64>| {
        Box::new(StepFailure {
            error,
            report,
            last_window: w.clone(),
            last_lambda: l.clone(),
        })
    };
    if let Err(e) = settings.validate().and_then(|_| check_history(model, state)) {
        return Err(fail(e, empty, &w0, &l0));
    }
    let step = state.index();
    let mut report = empty;
    let (mut w, mut lam) = (w0, l0);

    let pre = match regularity_matrix(model, &w, lam.as_slice()) {
        Ok(j) => condition_estimate(&j),
        Err(e) => return Err(fail(e, report, &w, &lam)),
    };
    if !pre.is_finite() {
        report.cond_estimate = pre;
        return Err(fail(Error::Regularity { step, cond: pre }, report, &w, &lam));
    }
    if pre > COND_WARN {
        report.warning = Some(format!("regularity condition estimate {pre:.3e} at the predictor"));
    }

    let mut f = match scaled_residual(model, state, &w, lam.as_slice()) {
        Ok(f) => f,
        Err(e) => return Err(fail(e, report, &w, &lam)),
    };
    let mut norm = f.amax();
    report.residual_history.push(norm);
    while norm > settings.tolerance && report.iterations < settings.max_iterations {
        let jac = match jacobian(model, state, &w, lam.as_slice(), settings.jacobian) {
            Ok(j) => j,
            Err(e) => return Err(fail(e, report, &w, &lam)),
        };
        let Some(delta) = jac.clone().lu().solve(&(-&f)) else {
            let cond = condition_estimate(&jac);
            report.cond_estimate = cond;
            return Err(fail(Error::Regularity { step, cond }, report, &w, &lam));
        };
        report.iterations += 1;
        let mut alpha = settings.damping;
        loop {
            let trial_delta: Vec<f64> = delta.iter().map(|v| v * alpha).collect();
            let (wt, lt) = model.perturb(&w, lam.as_slice(), &trial_delta);
            let ft = scaled_residual(model, state, &wt, &lt);
            match ft {
                Ok(ft) if ft.amax() < norm || alpha <= DAMPING_FLOOR => {
                    w = wt;
                    lam = DVector::from_vec(lt);
                    norm = ft.amax();
                    f = ft;
                    break;
                }
                Err(e) if alpha <= DAMPING_FLOOR => return Err(fail(e, report, &w, &lam)),
                _ => alpha *= 0.5,
            }
        }
        report.residual_history.push(norm);
    }
    report.residual = norm;
    report.raw_residual = unscaled_norm(model, state, &w, lam.as_slice());
    report.constraint_residuals = model.eval_chi(&w).map(|c| c.iter().copied().collect()).unwrap_or_default();
    report.cond_estimate = regularity_matrix(model, &w, lam.as_slice())
        .map(|j| condition_estimate(&j))
        .unwrap_or(f64::NAN);
    if norm > settings.tolerance {
        let error = Error::StepFailure {
            step,
            iterations: report.iterations,
            residual: norm,
        };
        return Err(fail(error, report, &w, &lam));
    }
    report.converged = true;
    let next = state.advanced(w.clone(), lam.clone());
    report.momentum = match momentum_covector(model, &next) {
        Ok(m) => m,
        Err(e) => return Err(fail(e, report, &w, &lam)),
    };
    Ok((next, report))
}

/// History windows must already satisfy the constraints.
fn check_history(model: &HoSystemModel, state: &StepState) -> Result<()> {
    if state.order() != model.order() {
        return Err(Error::Inconsistent(format!(
            "state of order {} for a model of order {}",
            state.order(),
            model.order()
        )));
    }
    for (i, w) in state.windows().iter().enumerate() {
        let worst = model.eval_chi(w)?.amax() * model.row_scale().constraint;
        if worst > HISTORY_CONSTRAINT_TOL {
            return Err(Error::Inconsistent(format!(
                "history window {} violates the constraints by {worst:.3e}",
                state.index() - state.order() + i
            )));
        }
    }
    Ok(())
}

/// Output of a marching run: every window from `a_0` on with its
/// multipliers, one report per solved step, and the failure that stopped the
/// run early, if any.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub order: usize,
    pub windows: Vec<ReducedWindow>,
    pub lambdas: Vec<DVector<f64>>,
    pub reports: Vec<StepReport>,
    pub failure: Option<Box<StepFailure>>,
}

impl TrajectoryRecord {
    /// Shape samples `p_0, p_1, ..` covered by the stored windows.
    pub fn shape_points(&self) -> Vec<DVector<f64>> {
        let mut out: Vec<DVector<f64>> = self.windows.iter().map(|w| w.shape(0).clone()).collect();
        if let Some(last) = self.windows.last() {
            out.extend(last.shapes()[1..].iter().cloned());
        }
        out
    }

    /// Reduced group samples `g~_0, g~_1, ..`.
    pub fn group_parts(&self) -> Vec<GroupElement> {
        let mut out: Vec<GroupElement> = self.windows.iter().map(|w| *w.group(0)).collect();
        if let Some(last) = self.windows.last() {
            out.extend(last.groups()[1..].iter().copied());
        }
        out
    }

    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Marches `steps` steps from `initial`. Stops at the first failure and keeps
/// everything computed before it.
pub fn run_trajectory(
    model: &HoSystemModel,
    initial: &StepState,
    steps: usize,
    settings: &NewtonSettings,
) -> Result<TrajectoryRecord> {
    if steps == 0 {
        return Err(Error::Parameter("a trajectory needs at least one step".into()));
    }
    settings.validate()?;
    let mut rec = TrajectoryRecord {
        order: initial.order(),
        windows: initial.windows().to_vec(),
        lambdas: initial.lambdas().to_vec(),
        reports: Vec::with_capacity(steps),
        failure: None,
    };
    let mut state = initial.clone();
    for _ in 0..steps {
        match step_advance(model, &state, settings) {
            Ok((next, report)) => {
                rec.windows.push(next.newest().clone());
                rec.lambdas.push(next.newest_lambda().clone());
                rec.reports.push(report);
                state = next;
            }
            Err(f) => {
                rec.failure = Some(f);
                break;
            }
        }
    }
    Ok(rec)
}
