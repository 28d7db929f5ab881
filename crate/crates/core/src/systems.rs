//! Ready-made systems: a charged particle in a magnetic field (second order,
//! one charge constraint) and two planar rigid bodies joined at their
//! centre of mass (first-order free flow and a second-order optimal control
//! problem), plus continuous right-hand sides and an RK4 oracle.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::connection::{beanie_connection, trivial_connection, ShapeCovector};
use crate::error::{Error, Result};
use crate::integrator::StepState;
use crate::liegroup::{CoalgebraVector, GroupElement, GroupTag};
use crate::model::{AnalyticDerivatives, Func, HoSystemModel, ReducedWindow, RowScale};

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(v)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be positive and finite, got {v}")))
    }
}

// ---------------------------------------------------------------- electron

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElectronPotential {
    /// `phi = |x|^2`, so `grad phi = 2x`.
    Quadratic,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElectronParams {
    pub mass: f64,
    pub charge: f64,
    pub light_speed: f64,
    /// Constant magnetic field.
    pub field: [f64; 3],
    pub potential: ElectronPotential,
}

impl Default for ElectronParams {
    fn default() -> Self {
        ElectronParams {
            mass: 1.0,
            charge: 1.0,
            light_speed: 1.0,
            field: [0.0, 0.0, 1.0],
            potential: ElectronPotential::Quadratic,
        }
    }
}

impl ElectronParams {
    /// Cyclotron frequency `e B_z / (m c)`.
    pub fn omega(&self) -> f64 {
        self.charge * self.field[2] / (self.mass * self.light_speed)
    }

    /// `e / c`, the value the charge slot is constrained to.
    pub fn charge_ratio(&self) -> f64 {
        self.charge / self.light_speed
    }

    pub fn validate(&self) -> Result<()> {
        positive("mass", self.mass)?;
        positive("light_speed", self.light_speed)?;
        if !self.charge.is_finite() || self.field.iter().any(|b| !b.is_finite()) {
            return Err(Error::Parameter("charge and field must be finite".into()));
        }
        // The charge slot is an SO(2) angle, so e/c must be representable.
        if self.charge_ratio().abs() >= PI {
            return Err(Error::Parameter(format!(
                "|charge / light_speed| must be below pi, got {}",
                self.charge_ratio()
            )));
        }
        Ok(())
    }

    fn cross(&self) -> Matrix3<f64> {
        let [bx, by, bz] = self.field;
        Matrix3::new(0.0, -bz, by, bz, 0.0, -bx, -by, bx, 0.0)
    }

    fn grad_phi_matrix(&self) -> Matrix3<f64> {
        match self.potential {
            ElectronPotential::Quadratic => Matrix3::identity() * 2.0,
            ElectronPotential::None => Matrix3::zeros(),
        }
    }
}

fn v3(p: &DVector<f64>) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

/// The control residual `u = m (x2 - 2 x1 + x0)/h^2 + grad phi(x0) - (e/c) v x B`
/// with `v = (x1 - x0)/h`, and its Jacobians with respect to `x0, x1, x2`.
fn electron_u(p: &ElectronParams, h: f64, w: &ReducedWindow) -> (Vector3<f64>, [Matrix3<f64>; 3]) {
    let (x0, x1, x2) = (v3(w.shape(0)), v3(w.shape(1)), v3(w.shape(2)));
    let q = p.charge_ratio();
    let bx = p.cross();
    let g = p.grad_phi_matrix();
    let vel = (x1 - x0) / h;
    let u = (x2 - x1 * 2.0 + x0) * (p.mass / (h * h)) + g * x0 + bx * vel * q;
    let id = Matrix3::identity();
    let a = p.mass / (h * h);
    let jac = [id * a + g - bx * (q / h), id * (-2.0 * a) + bx * (q / h), id * a];
    (u, jac)
}

struct ElectronDerivatives {
    params: ElectronParams,
    h: f64,
}

impl AnalyticDerivatives for ElectronDerivatives {
    fn shape(&self, func: Func, slot: usize, w: &ReducedWindow) -> Option<ShapeCovector> {
        match func {
            Func::Lagrangian => {
                let (u, jac) = electron_u(&self.params, self.h, w);
                let g = jac[slot - 1].transpose() * u * self.h;
                Some(dv(g.as_slice()))
            }
            Func::Constraint(_) => Some(DVector::zeros(3)),
        }
    }

    fn group_right(&self, func: Func, slot: usize, _w: &ReducedWindow) -> Option<CoalgebraVector> {
        let v = if matches!(func, Func::Constraint(0)) { 0.5 } else { 0.0 };
        debug_assert!(slot == 4 || slot == 5);
        Some(CoalgebraVector::new(GroupTag::So2, &[v]))
    }
}

/// Electron model: order 2, shape `R^3`, one charge slot on SO(2), trivial
/// connection. The constraint pins the mean of the two charge slots,
/// `(xi_n + xi_{n+1}) / 2 - e/c = 0`, so each step determines the newest
/// charge and its multiplier.
pub fn build_electron_model(params: &ElectronParams, h: f64) -> Result<HoSystemModel> {
    params.validate()?;
    positive("h", h)?;
    let p = *params;
    let q = p.charge_ratio();
    let model = HoSystemModel::new(
        "electron",
        2,
        1,
        h,
        trivial_connection(3, GroupTag::So2),
        move |w| {
            let (u, _) = electron_u(&p, h, w);
            0.5 * h * u.norm_squared()
        },
        move |w| dv(&[0.5 * (w.group(0).angle() + w.group(1).angle()) - q]),
    )?
    .with_analytic(Arc::new(ElectronDerivatives { params: p, h }))
    .with_row_scale(RowScale {
        shape: h * h * h,
        momentum: 1.0,
        constraint: 1.0,
    })
    .with_params(vec![
        ("mass".into(), p.mass),
        ("charge".into(), p.charge),
        ("light_speed".into(), p.light_speed),
        ("b_x".into(), p.field[0]),
        ("b_y".into(), p.field[1]),
        ("b_z".into(), p.field[2]),
    ]);
    Ok(model)
}

/// Electron window `(x0, x1, x2, xi, xi)`.
pub fn electron_window(x: [&DVector<f64>; 3], xi: f64) -> Result<ReducedWindow> {
    ReducedWindow::new(
        x.iter().map(|p| (*p).clone()).collect(),
        vec![GroupElement::so2(xi), GroupElement::so2(xi)],
    )
}

/// Fourth-order optimality equations of the continuous electron problem for
/// an aligned field and quadratic potential. `state = (x, x', x'', x''')`,
/// returns its time derivative.
pub fn electron_continuous_rhs(params: &ElectronParams, state: &[f64]) -> Result<DVector<f64>> {
    if params.field[0] != 0.0 || params.field[1] != 0.0 || params.potential != ElectronPotential::Quadratic {
        return Err(Error::Parameter(
            "continuous electron equations need B = (0, 0, B_z) and the quadratic potential".into(),
        ));
    }
    if state.len() != 12 {
        return Err(Error::Inconsistent(format!("electron state has 12 entries, got {}", state.len())));
    }
    let (m, w) = (params.mass, params.omega());
    let x = &state[0..3];
    let v = &state[3..6];
    let a = &state[6..9];
    let j = &state[9..12];
    let s = [
        2.0 * w * j[1] + a[0] * (w * w - 4.0 / m) + 4.0 * w / m * v[1] - 4.0 * x[0] / (m * m),
        -2.0 * w * j[0] + a[1] * (w * w - 4.0 / m) - 4.0 * w / m * v[0] - 4.0 * x[1] / (m * m),
        -4.0 * a[2] / m - 4.0 * x[2] / (m * m),
    ];
    let mut out = DVector::zeros(12);
    out.rows_mut(0, 9).copy_from_slice(&state[3..12]);
    out.rows_mut(9, 3).copy_from_slice(&s);
    Ok(out)
}

/// Electron start: samples `x(0), x(h), x(2h), x(3h)` of the continuous
/// solution (RK4 at `h/100`) and builds the two history windows with the
/// charge slot at `e/c` and multipliers `lambda0`.
pub fn electron_initial_state(params: &ElectronParams, h: f64, initial: &[f64; 12], lambda0: f64) -> Result<StepState> {
    params.validate()?;
    positive("h", h)?;
    let sub = 100;
    let p = *params;
    let traj = rk4_integrate(
        |_, y: &DVector<f64>| electron_continuous_rhs(&p, y.as_slice()),
        &dv(initial),
        h / sub as f64,
        3 * sub,
    )?;
    let xs: Vec<DVector<f64>> = (0..4).map(|i| traj[i * sub].rows(0, 3).into_owned()).collect();
    electron_state_from_samples(params, [&xs[0], &xs[1], &xs[2], &xs[3]], lambda0)
}

/// History windows from four given position samples.
pub fn electron_state_from_samples(params: &ElectronParams, xs: [&DVector<f64>; 4], lambda0: f64) -> Result<StepState> {
    let xi = params.charge_ratio();
    let w0 = electron_window([xs[0], xs[1], xs[2]], xi)?;
    let w1 = electron_window([xs[1], xs[2], xs[3]], xi)?;
    StepState::new(vec![w0, w1], vec![dv(&[lambda0]), dv(&[lambda0])], 2)
}

// ------------------------------------------------------------------ beanie

/// Periodic cubic spline through samples on a uniform grid over `[0, 2 pi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicSpline {
    values: Vec<f64>,
    second: Vec<f64>,
    step: f64,
}

impl PeriodicSpline {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        if n < 4 {
            return Err(Error::Parameter(format!("tabulated potential needs at least 4 samples, got {n}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("tabulated potential has non-finite samples".into()));
        }
        let step = 2.0 * PI / n as f64;
        let mut a = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for i in 0..n {
            let (im, ip) = ((i + n - 1) % n, (i + 1) % n);
            a[(i, im)] += 1.0;
            a[(i, i)] += 4.0;
            a[(i, ip)] += 1.0;
            rhs[i] = 6.0 * (values[ip] - 2.0 * values[i] + values[im]) / (step * step);
        }
        let second = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Parameter("spline system is singular".into()))?;
        Ok(PeriodicSpline {
            values,
            second: second.iter().copied().collect(),
            step,
        })
    }

    /// Value and first three derivatives at `t`.
    pub fn eval(&self, t: f64) -> [f64; 4] {
        let n = self.values.len();
        let d = self.step;
        let u = t.rem_euclid(2.0 * PI);
        let i = ((u / d).floor() as usize).min(n - 1);
        let j = (i + 1) % n;
        let s = u - i as f64 * d;
        let r = d - s;
        let (mi, mj) = (self.second[i], self.second[j]);
        let (yi, yj) = (self.values[i], self.values[j]);
        let ci = yi / d - mi * d / 6.0;
        let cj = yj / d - mj * d / 6.0;
        [
            mi * r.powi(3) / (6.0 * d) + mj * s.powi(3) / (6.0 * d) + ci * r + cj * s,
            -mi * r * r / (2.0 * d) + mj * s * s / (2.0 * d) - ci + cj,
            mi * r / d + mj * s / d,
            (mj - mi) / d,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BeaniePotential {
    Zero,
    /// `V0 (1 - cos psi)`.
    Cosine { v0: f64 },
    Tabulated(PeriodicSpline),
}

impl BeaniePotential {
    /// `V`, `V'`, `V''`, `V'''` at `psi`.
    pub fn eval(&self, psi: f64) -> [f64; 4] {
        match self {
            BeaniePotential::Zero => [0.0; 4],
            BeaniePotential::Cosine { v0 } => {
                let (s, c) = psi.sin_cos();
                [v0 * (1.0 - c), v0 * s, v0 * c, -v0 * s]
            }
            BeaniePotential::Tabulated(s) => s.eval(psi),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeanieParams {
    pub mass: f64,
    pub i1: f64,
    pub i2: f64,
    pub potential: BeaniePotential,
    /// Multiplies the closed-form constraint group gradients. Anything but 1
    /// deliberately breaks them (used to exercise the derivative check).
    pub epsilon_sign: f64,
}

impl Default for BeanieParams {
    fn default() -> Self {
        BeanieParams {
            mass: 1.0,
            i1: 1.0,
            i2: 0.5,
            potential: BeaniePotential::Cosine { v0: 1.0 },
            epsilon_sign: 1.0,
        }
    }
}

impl BeanieParams {
    /// `I2 / (I1 + I2)`.
    pub fn coupling(&self) -> f64 {
        self.i2 / (self.i1 + self.i2)
    }

    /// `I1 I2 / (I1 + I2)`.
    pub fn reduced_inertia(&self) -> f64 {
        self.i1 * self.i2 / (self.i1 + self.i2)
    }

    pub fn validate(&self) -> Result<()> {
        positive("mass", self.mass)?;
        positive("i1", self.i1)?;
        positive("i2", self.i2)?;
        if !self.epsilon_sign.is_finite() {
            return Err(Error::Parameter("epsilon_sign must be finite".into()));
        }
        if let BeaniePotential::Cosine { v0 } = self.potential {
            if !v0.is_finite() {
                return Err(Error::Parameter("v0 must be finite".into()));
            }
        }
        // Derivative consistency of the potential.
        let dh = 1e-5;
        for i in 0..16 {
            let psi = -3.0 + 0.41 * i as f64;
            let [_, d1, d2, _] = self.potential.eval(psi);
            let fd1 = (self.potential.eval(psi + dh)[0] - self.potential.eval(psi - dh)[0]) / (2.0 * dh);
            let fd2 = (self.potential.eval(psi + dh)[1] - self.potential.eval(psi - dh)[1]) / (2.0 * dh);
            let scale = 1.0 + d1.abs().max(d2.abs());
            if (fd1 - d1).abs() > 1e-6 * scale || (fd2 - d2).abs() > 1e-6 * scale {
                return Err(Error::Parameter(format!(
                    "potential derivatives disagree with finite differences at psi = {psi}"
                )));
            }
        }
        Ok(())
    }

    fn record(&self) -> Vec<(String, f64)> {
        let mut v = vec![
            ("mass".to_string(), self.mass),
            ("i1".to_string(), self.i1),
            ("i2".to_string(), self.i2),
        ];
        if let BeaniePotential::Cosine { v0 } = self.potential {
            v.push(("v0".into(), v0));
        }
        if self.epsilon_sign != 1.0 {
            v.push(("epsilon_sign".into(), self.epsilon_sign));
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeanieVariant {
    FirstOrder,
    OptimalControl,
}

/// Body velocities `(Omega1, Omega2, Omega3)` encoded by a reduced group part
/// with shape increment `dpsi`: translation `h (Omega1, Omega2)` and rotation
/// `-h (Omega3 - c dpsi / h)` counter-clockwise.
pub fn omega_from_group(g: &GroupElement, dpsi: f64, c: f64, h: f64) -> [f64; 3] {
    let t = g.translation();
    [t.x / h, t.y / h, (-g.angle() + c * dpsi) / h]
}

/// Inverse of [`omega_from_group`].
pub fn group_from_omega(omega: [f64; 3], dpsi: f64, c: f64, h: f64) -> GroupElement {
    GroupElement::se2(-(h * omega[2] - c * dpsi), h * omega[0], h * omega[1])
}

/// `Omega` from two consecutive absolute configurations `(theta, x, y)`.
pub fn omega_from_configurations(g0: [f64; 3], g1: [f64; 3], h: f64) -> [f64; 3] {
    let (s, c) = g0[0].sin_cos();
    let (dx, dy) = (g1[1] - g0[1], g1[2] - g0[2]);
    [
        (c * dx + s * dy) / h,
        (-s * dx + c * dy) / h,
        -(g1[0] - g0[0]) / h,
    ]
}

/// Absolute configurations `g_{n+1} = g_n g~_n A_n^-1` from `g_0` and a list
/// of reduced group parts with their shape pairs.
pub fn reconstruct_configurations(
    params: &BeanieParams,
    g0: GroupElement,
    groups: &[GroupElement],
    psi: &[f64],
) -> Result<Vec<GroupElement>> {
    if psi.len() < groups.len() + 1 {
        return Err(Error::Inconsistent("need one more shape sample than group parts".into()));
    }
    let conn = beanie_connection(params.i1, params.i2)?;
    let mut out = vec![g0];
    for (n, gt) in groups.iter().enumerate() {
        let a = conn.eval_a(&[psi[n]], &[psi[n + 1]]);
        let next = out[n].compose(gt).compose(&a.inverse());
        out.push(next);
    }
    Ok(out)
}

struct BeanieFirstDerivatives {
    p: BeanieParams,
    h: f64,
}

impl AnalyticDerivatives for BeanieFirstDerivatives {
    fn shape(&self, func: Func, slot: usize, w: &ReducedWindow) -> Option<ShapeCovector> {
        if func != Func::Lagrangian {
            return None;
        }
        let (p0, p1) = (w.shape(0)[0], w.shape(1)[0]);
        let om = omega_from_group(w.group(0), p1 - p0, self.p.coupling(), self.h);
        let common = self.p.i2 * om[2] + self.p.reduced_inertia() * (p1 - p0) / self.h;
        match slot {
            1 => Some(dv(&[-common])),
            2 => Some(dv(&[common - self.h * self.p.potential.eval(p1)[1]])),
            _ => None,
        }
    }

    fn group_right(&self, func: Func, _slot: usize, w: &ReducedWindow) -> Option<CoalgebraVector> {
        if func != Func::Lagrangian {
            return None;
        }
        let dpsi = w.shape(1)[0] - w.shape(0)[0];
        let om = omega_from_group(w.group(0), dpsi, self.p.coupling(), self.h);
        let m = self.p.mass;
        Some(CoalgebraVector::new(
            GroupTag::Se2,
            &[m * om[0], m * om[1], (self.p.i1 + self.p.i2) * om[2]],
        ))
    }
}

/// Right-trivialized gradients of the three control constraints with respect
/// to the two group slots of an optimal-control window.
pub fn beanie_constraint_group_gradients(params: &BeanieParams, h: f64, w: &ReducedWindow) -> [[[f64; 3]; 3]; 2] {
    let c = params.coupling();
    let om0 = omega_from_group(w.group(0), w.shape(1)[0] - w.shape(0)[0], c, h);
    let om1 = omega_from_group(w.group(1), w.shape(2)[0] - w.shape(1)[0], c, h);
    let th = om0[2] - c * (w.shape(1)[0] - w.shape(0)[0]) / h;
    let slot4 = [
        [-1.0 / h, -th, h * th * om0[0] - 2.0 * om0[1]],
        [th, -1.0 / h, 2.0 * om0[0] + h * th * om0[1]],
        [0.0, 0.0, -1.0 / h],
    ];
    let slot5 = [[1.0 / h, 0.0, om1[1]], [0.0, 1.0 / h, -om1[0]], [0.0, 0.0, 1.0 / h]];
    [slot4, slot5]
}

struct BeanieControlDerivatives {
    p: BeanieParams,
    h: f64,
}

impl AnalyticDerivatives for BeanieControlDerivatives {
    fn shape(&self, func: Func, slot: usize, w: &ReducedWindow) -> Option<ShapeCovector> {
        let h = self.h;
        let c = self.p.coupling();
        match func {
            Func::Lagrangian => {
                let (p0, p1, p2) = (w.shape(0)[0], w.shape(1)[0], w.shape(2)[0]);
                let mr = self.p.reduced_inertia();
                let [_, v1, v2, _] = self.p.potential.eval(p1);
                let u = mr * (p2 - 2.0 * p1 + p0) / (h * h) + v1;
                let du = match slot {
                    1 | 3 => mr / (h * h),
                    _ => -2.0 * mr / (h * h) + v2,
                };
                Some(dv(&[h * u * du]))
            }
            Func::Constraint(a) => {
                let g = if a == 2 {
                    match slot {
                        1 | 3 => c / h,
                        _ => -2.0 * c / h,
                    }
                } else {
                    0.0
                };
                Some(dv(&[g]))
            }
        }
    }

    fn group_right(&self, func: Func, slot: usize, w: &ReducedWindow) -> Option<CoalgebraVector> {
        match func {
            Func::Lagrangian => Some(CoalgebraVector::zero(GroupTag::Se2)),
            Func::Constraint(a) => {
                let grads = beanie_constraint_group_gradients(&self.p, self.h, w);
                let row = grads[slot - 4][a];
                Some(CoalgebraVector::new(GroupTag::Se2, &row).scale(self.p.epsilon_sign))
            }
        }
    }
}

/// Two-body planar system: `FirstOrder` is the free flow (k = 1, no
/// constraints), `OptimalControl` the energy-minimum control problem (k = 2,
/// three constraints).
pub fn build_beanie_model(params: &BeanieParams, h: f64, variant: BeanieVariant) -> Result<HoSystemModel> {
    params.validate()?;
    positive("h", h)?;
    let conn = beanie_connection(params.i1, params.i2)?;
    let c = params.coupling();
    let mr = params.reduced_inertia();
    let p = params.clone();
    match variant {
        BeanieVariant::FirstOrder => {
            let lag = {
                let p = p.clone();
                move |w: &ReducedWindow| {
                    let (p0, p1) = (w.shape(0)[0], w.shape(1)[0]);
                    let om = omega_from_group(w.group(0), p1 - p0, c, h);
                    0.5 * p.mass * h * (om[0] * om[0] + om[1] * om[1])
                        + 0.5 * (p.i1 + p.i2) * h * om[2] * om[2]
                        + 0.5 * mr * (p1 - p0).powi(2) / h
                        - h * p.potential.eval(p1)[0]
                }
            };
            Ok(HoSystemModel::new("beanie-first-order", 1, 0, h, conn, lag, |_| DVector::zeros(0))?
                .with_analytic(Arc::new(BeanieFirstDerivatives { p: p.clone(), h }))
                .with_params(p.record()))
        }
        BeanieVariant::OptimalControl => {
            let lag = {
                let p = p.clone();
                move |w: &ReducedWindow| {
                    let (p0, p1, p2) = (w.shape(0)[0], w.shape(1)[0], w.shape(2)[0]);
                    let u = mr * (p2 - 2.0 * p1 + p0) / (h * h) + p.potential.eval(p1)[1];
                    0.5 * h * u * u
                }
            };
            let chi = move |w: &ReducedWindow| beanie_constraints(c, h, w);
            Ok(HoSystemModel::new("beanie-optimal-control", 2, 3, h, conn, lag, chi)?
                .with_analytic(Arc::new(BeanieControlDerivatives { p: p.clone(), h }))
                .with_row_scale(RowScale {
                    shape: h * h * h,
                    momentum: h,
                    constraint: 1.0,
                })
                .with_params(p.record()))
        }
    }
}

fn beanie_constraints(c: f64, h: f64, w: &ReducedWindow) -> DVector<f64> {
    let d0 = w.shape(1)[0] - w.shape(0)[0];
    let d1 = w.shape(2)[0] - w.shape(1)[0];
    let a = omega_from_group(w.group(0), d0, c, h);
    let b = omega_from_group(w.group(1), d1, c, h);
    dv(&[
        b[0] - a[0] - h * a[1] * a[2] + c * d0 * a[1],
        b[1] - a[1] + h * a[0] * a[2] - c * d0 * a[0],
        b[2] - a[2],
    ])
}

/// The control constraints solved forward: the `Omega` that makes
/// `chi = 0` given the previous `Omega` and shape increment.
pub fn beanie_constrained_next_omega(c: f64, h: f64, omega: [f64; 3], dpsi: f64) -> [f64; 3] {
    let th = omega[2] - c * dpsi / h;
    [omega[0] + h * omega[1] * th, omega[1] - h * omega[0] * th, omega[2]]
}

/// First-order start: window `(psi0, psi0 + h psi_dot0, g~(Omega0))`.
pub fn beanie_first_order_initial_state(
    params: &BeanieParams,
    h: f64,
    psi0: f64,
    psi_dot0: f64,
    omega0: [f64; 3],
) -> Result<StepState> {
    params.validate()?;
    positive("h", h)?;
    let psi1 = psi0 + h * psi_dot0;
    let g = group_from_omega(omega0, psi1 - psi0, params.coupling(), h);
    let w = ReducedWindow::new(vec![dv(&[psi0]), dv(&[psi1])], vec![g])?;
    StepState::new(vec![w], vec![DVector::zeros(0)], 1)
}

/// Optimal-control start from four shape samples and `Omega^0`. `Omega^1`,
/// `Omega^2` follow from the constraints, so both history windows satisfy
/// them; the two multiplier vectors are given.
pub fn beanie_control_initial_state(
    params: &BeanieParams,
    h: f64,
    psi: [f64; 4],
    omega0: [f64; 3],
    lambdas: [[f64; 3]; 2],
) -> Result<StepState> {
    params.validate()?;
    positive("h", h)?;
    let c = params.coupling();
    let mut omegas = vec![omega0];
    for n in 0..2 {
        let next = beanie_constrained_next_omega(c, h, omegas[n], psi[n + 1] - psi[n]);
        omegas.push(next);
    }
    let g: Vec<GroupElement> = (0..3).map(|n| group_from_omega(omegas[n], psi[n + 1] - psi[n], c, h)).collect();
    let shapes: Vec<DVector<f64>> = psi.iter().map(|v| dv(&[*v])).collect();
    let w0 = ReducedWindow::new(shapes[0..3].to_vec(), vec![g[0], g[1]])?;
    let w1 = ReducedWindow::new(shapes[1..4].to_vec(), vec![g[1], g[2]])?;
    StepState::new(vec![w0, w1], vec![dv(&lambdas[0]), dv(&lambdas[1])], 2)
}

/// Labels of the constraint covectors pulled back to the algebra, as listed
/// for the optimal-control problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsilonLabel {
    /// Component `alpha` (0-based) of the slot-4 covector at window `n`.
    N4(usize),
    /// Slot-5 covector of window `n - 1`.
    N5(usize),
    /// Slot-4 covector of window `n - 1`.
    Prev4(usize),
    /// Slot-5 covector of window `n - 2`.
    Prev5(usize),
}

impl EpsilonLabel {
    /// The eight listed formulas (the `(n, 5)` and `(n-1, 4)` third
    /// components are not listed separately; `(n-1, 5)` is one entry).
    pub fn listed() -> [EpsilonLabel; 8] {
        use EpsilonLabel::*;
        [N4(0), N4(1), N4(2), N5(0), N5(1), Prev4(0), Prev4(1), Prev5(0)]
    }

    pub fn name(&self) -> String {
        match self {
            EpsilonLabel::N4(a) => format!("eps^{}_(n,4)", a + 1),
            EpsilonLabel::N5(a) => format!("eps^{}_(n,5)", a + 1),
            EpsilonLabel::Prev4(a) => format!("eps^{}_(n-1,4)", a + 1),
            EpsilonLabel::Prev5(a) => format!("eps^{}_(n-1,5)", a + 1),
        }
    }
}

/// The constraint covectors exactly as listed in closed form, evaluated from
/// `Omega` and `vartheta = Omega3 - c dpsi / h` of the window the formula
/// refers to. Kept as a reference: these expressions do not agree with
/// differentiation of the constraints (see [`beanie_constraint_group_gradients`]).
pub fn listed_epsilon(label: EpsilonLabel, h: f64, omega: [f64; 3], vartheta: f64) -> [f64; 3] {
    let (s, c) = (h * vartheta).sin_cos();
    let hv = h * vartheta;
    let (o1, o2) = (h * omega[0], h * omega[1]);
    match label {
        EpsilonLabel::N4(0) => [-c + hv * s, s + hv * c, o1 * c + o2 * s - hv * (o1 * s + o2 * c) - o2],
        EpsilonLabel::N4(1) => [-s + hv * c, -c - hv * s, o1 * s + o2 * c + hv * (o2 * s - o1 * c) + o1],
        EpsilonLabel::N4(_) | EpsilonLabel::Prev4(2) => [0.0, 0.0, 1.0],
        EpsilonLabel::N5(0) | EpsilonLabel::Prev4(0) => [c, -s, -o1 * c + o2 * s],
        EpsilonLabel::N5(1) | EpsilonLabel::Prev4(1) => [s, c, -o1 * s - o2 * c],
        EpsilonLabel::N5(_) | EpsilonLabel::Prev4(_) | EpsilonLabel::Prev5(_) => [0.0; 3],
    }
}

/// Continuous reduced flow, state `(psi, psi', Omega1, Omega2, Omega3)`,
/// with the body-velocity equations in the printed sign convention:
/// `Omega1' = Omega2 (Omega3 - c psi')`, `Omega2' = -Omega1 (..)`,
/// `Omega3' = 0`, `I1 I2/(I1+I2) psi'' = -V'(psi)`.
pub fn beanie_reduced_rhs(params: &BeanieParams, state: &[f64]) -> Result<DVector<f64>> {
    if state.len() != 5 {
        return Err(Error::Inconsistent(format!("reduced beanie state has 5 entries, got {}", state.len())));
    }
    let c = params.coupling();
    let th = state[4] - c * state[1];
    Ok(dv(&[
        state[1],
        -params.potential.eval(state[0])[1] / params.reduced_inertia(),
        state[3] * th,
        -state[2] * th,
        0.0,
    ]))
}

/// Continuous limit of the first-order discrete flow, same state layout as
/// [`beanie_reduced_rhs`]: `(Omega1, Omega2)` turns with rate `Omega3`
/// (`Omega1' = -Omega3 Omega2`, `Omega2' = Omega3 Omega1`).
pub fn beanie_discrete_limit_rhs(params: &BeanieParams, state: &[f64]) -> Result<DVector<f64>> {
    if state.len() != 5 {
        return Err(Error::Inconsistent(format!("reduced beanie state has 5 entries, got {}", state.len())));
    }
    Ok(dv(&[
        state[1],
        -params.potential.eval(state[0])[1] / params.reduced_inertia(),
        -state[4] * state[3],
        state[4] * state[2],
        0.0,
    ]))
}

/// Continuous optimality system of the control problem, transcribed as
/// printed. State `(psi, psi', psi'', psi''', l1, l1', l2, l2', l3, l3',
/// Omega1, Omega2, Omega3)`.
pub fn beanie_optimality_rhs(params: &BeanieParams, state: &[f64]) -> Result<DVector<f64>> {
    if state.len() != 13 {
        return Err(Error::Inconsistent(format!("optimality state has 13 entries, got {}", state.len())));
    }
    let (i1, i2) = (params.i1, params.i2);
    let c = params.coupling();
    let mr = params.reduced_inertia();
    let [psi, pd, pdd, pddd, l1, l1d, l2, l2d, _l3, l3d, o1, o2, o3] = <[f64; 13]>::try_from(state).unwrap();
    let [_, v1, v2, v3] = params.potential.eval(psi);
    let o1d = o2 * o3 - c * pd * o2;
    let o2d = -o1 * o3 + c * pd * o1;
    let o3d = 0.0;
    let d2v1 = v3 * pd * pd + v2 * pdd;
    let p4 = (l1 * (o1 * o3 + o2d - o1 * pd * c) + l2 * (o2 * o3 - o1d - o2 * pd * c)
        - d2v1
        - (i1 + i2) / i2 * v2 * (mr * pdd + v1))
        / mr;
    let l1dd = l2 * (o3d - c * pdd) + l1 * c * (2.0 * pd * o3 - o3 * o3 - pd * c);
    let l2dd = l1 * (c * pdd - o3d) + l1d * pd * c * (1.0 - l2) - l2 * (o3 * o3 - c * pd * o3d)
        + l2 * l2 * pd / (i1 + i2) * (o3 - c * pd);
    let l3dd = o2 * (l2d - 2.0 * l1d) - l1 * o2d + l1 * o1d + l2d * o1 + (l1 * o1 + l2 * o2) * (o3 - c * pd);
    Ok(dv(&[pd, pdd, pddd, p4, l1d, l1dd, l2d, l2dd, l3d, l3dd, o1d, o2d, o3d]))
}

// --------------------------------------------------------------------- RK4

/// Classical fourth-order Runge-Kutta, `n` steps of size `h_ref` from `y0`.
/// Returns all `n + 1` states.
pub fn rk4_integrate<F>(rhs: F, y0: &DVector<f64>, h_ref: f64, n: usize) -> Result<Vec<DVector<f64>>>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    positive("h_ref", h_ref)?;
    let mut out = Vec::with_capacity(n + 1);
    out.push(y0.clone());
    let mut y = y0.clone();
    for i in 0..n {
        let t = i as f64 * h_ref;
        let k1 = rhs(t, &y)?;
        let k2 = rhs(t + 0.5 * h_ref, &(&y + &k1 * (0.5 * h_ref)))?;
        let k3 = rhs(t + 0.5 * h_ref, &(&y + &k2 * (0.5 * h_ref)))?;
        let k4 = rhs(t + h_ref, &(&y + &k3 * h_ref))?;
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h_ref / 6.0);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("RK4 state at step {}", i + 1)));
        }
        out.push(y.clone());
    }
    Ok(out)
}
