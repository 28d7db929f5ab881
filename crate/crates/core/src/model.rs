//! System descriptions: discrete Lagrangians and constraints on reduced
//! windows, slot derivatives, and the regularity (step Jacobian) matrix.
//!
//! Slots are numbered from 1 as in a window `(p_0, .., p_k, g_0, .., g_{k-1})`:
//! shape slots `1..=k+1`, group slots `k+2..=2k+1`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::connection::{LocalDiscreteConnection, ShapeCovector};
use crate::error::{Error, Result};
use crate::liegroup::{
    right_trivialized_gradient, AlgebraVector, CoalgebraVector, GroupElement, GroupTag,
};

/// One evaluation point of a discrete Lagrangian: `k + 1` shape points and
/// `k` reduced group parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedWindow {
    shapes: Vec<DVector<f64>>,
    groups: Vec<GroupElement>,
}

impl ReducedWindow {
    pub fn new(shapes: Vec<DVector<f64>>, groups: Vec<GroupElement>) -> Result<Self> {
        if groups.is_empty() || shapes.len() != groups.len() + 1 {
            return Err(Error::Inconsistent(format!(
                "window needs k >= 1 group parts and k + 1 shape points, got {} and {}",
                groups.len(),
                shapes.len()
            )));
        }
        let r = shapes[0].len();
        if shapes.iter().any(|p| p.len() != r) {
            return Err(Error::Inconsistent("shape points differ in dimension".into()));
        }
        let tag = groups[0].tag();
        if groups.iter().any(|g| g.tag() != tag) {
            return Err(Error::TagMismatch(tag, groups.iter().find(|g| g.tag() != tag).unwrap().tag()));
        }
        let w = ReducedWindow { shapes, groups };
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("window {w:?}")));
        }
        Ok(w)
    }

    pub fn order(&self) -> usize {
        self.groups.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.shapes[0].len()
    }

    pub fn tag(&self) -> GroupTag {
        self.groups[0].tag()
    }

    pub fn shapes(&self) -> &[DVector<f64>] {
        &self.shapes
    }

    pub fn groups(&self) -> &[GroupElement] {
        &self.groups
    }

    /// Shape point `i` (0-based).
    pub fn shape(&self, i: usize) -> &DVector<f64> {
        &self.shapes[i]
    }

    /// Group part `j` (0-based).
    pub fn group(&self, j: usize) -> &GroupElement {
        &self.groups[j]
    }

    pub fn is_finite(&self) -> bool {
        self.shapes.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.groups.iter().all(|g| g.is_finite())
    }

    pub fn with_shape(&self, i: usize, p: DVector<f64>) -> Self {
        let mut w = self.clone();
        w.shapes[i] = p;
        w
    }

    pub fn with_group(&self, j: usize, g: GroupElement) -> Self {
        let mut w = self.clone();
        w.groups[j] = g;
        w
    }

    /// The window one step later, continuing with `p_next` and `g_next`.
    pub fn shifted(&self, p_next: DVector<f64>, g_next: GroupElement) -> Self {
        let mut shapes = self.shapes[1..].to_vec();
        shapes.push(p_next);
        let mut groups = self.groups[1..].to_vec();
        groups.push(g_next);
        ReducedWindow { shapes, groups }
    }
}

/// Which scalar function of a window is being differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Lagrangian,
    /// Constraint component, 0-based.
    Constraint(usize),
}

/// Derivative with respect to one slot. Group slots carry both trivializations.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotDerivative {
    Shape(ShapeCovector),
    Group {
        left: CoalgebraVector,
        right: CoalgebraVector,
    },
}

impl SlotDerivative {
    pub fn shape(&self) -> &ShapeCovector {
        match self {
            SlotDerivative::Shape(s) => s,
            SlotDerivative::Group { .. } => panic!("group-slot derivative used as shape covector"),
        }
    }

    pub fn left(&self) -> &CoalgebraVector {
        match self {
            SlotDerivative::Group { left, .. } => left,
            SlotDerivative::Shape(_) => panic!("shape-slot derivative used as group covector"),
        }
    }

    pub fn right(&self) -> &CoalgebraVector {
        match self {
            SlotDerivative::Group { right, .. } => right,
            SlotDerivative::Shape(_) => panic!("shape-slot derivative used as group covector"),
        }
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &SlotDerivative) -> SlotDerivative {
        match (self, other) {
            (SlotDerivative::Shape(a), SlotDerivative::Shape(b)) => SlotDerivative::Shape(a + b * s),
            (
                SlotDerivative::Group { left, right },
                SlotDerivative::Group { left: l2, right: r2 },
            ) => SlotDerivative::Group {
                left: left.add(&l2.scale(s)),
                right: right.add(&r2.scale(s)),
            },
            _ => panic!("mixing shape and group slot derivatives"),
        }
    }

    /// Largest absolute entry.
    pub fn norm_inf(&self) -> f64 {
        match self {
            SlotDerivative::Shape(s) => s.amax(),
            SlotDerivative::Group { right, .. } => right.norm_inf(),
        }
    }

    pub fn entries(&self) -> Vec<f64> {
        match self {
            SlotDerivative::Shape(s) => s.iter().copied().collect(),
            SlotDerivative::Group { right, .. } => right.coords().to_vec(),
        }
    }
}

/// Closed-form slot derivatives a model may supply. Returning `None` falls
/// back to central differences for that (function, slot) pair.
pub trait AnalyticDerivatives: Send + Sync {
    fn shape(&self, func: Func, slot: usize, w: &ReducedWindow) -> Option<ShapeCovector>;

    /// Right-trivialized gradient for a group slot.
    fn group_right(&self, func: Func, slot: usize, w: &ReducedWindow) -> Option<CoalgebraVector>;
}

type ScalarFn = Arc<dyn Fn(&ReducedWindow) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&ReducedWindow) -> DVector<f64> + Send + Sync>;

/// Row scaling applied to the step residual and its Jacobian: factors for
/// the shape, momentum and constraint rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowScale {
    pub shape: f64,
    pub momentum: f64,
    pub constraint: f64,
}

impl Default for RowScale {
    fn default() -> Self {
        RowScale {
            shape: 1.0,
            momentum: 1.0,
            constraint: 1.0,
        }
    }
}

/// A higher-order system on a trivialized bundle with discrete Lagrangian,
/// constraints and connection.
#[derive(Clone)]
pub struct HoSystemModel {
    name: String,
    k: usize,
    r: usize,
    m: usize,
    tag: GroupTag,
    h: f64,
    connection: LocalDiscreteConnection,
    params: Vec<(String, f64)>,
    lagrangian: ScalarFn,
    constraints: VectorFn,
    analytic: Option<Arc<dyn AnalyticDerivatives>>,
    row_scale: RowScale,
}

impl fmt::Debug for HoSystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HoSystemModel")
            .field("name", &self.name)
            .field("k", &self.k)
            .field("r", &self.r)
            .field("m", &self.m)
            .field("tag", &self.tag)
            .field("h", &self.h)
            .field("params", &self.params)
            .field("analytic", &self.analytic.is_some())
            .finish()
    }
}

impl HoSystemModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new<L, C>(
        name: &str,
        k: usize,
        m: usize,
        h: f64,
        connection: LocalDiscreteConnection,
        lagrangian: L,
        constraints: C,
    ) -> Result<Self>
    where
        L: Fn(&ReducedWindow) -> f64 + Send + Sync + 'static,
        C: Fn(&ReducedWindow) -> DVector<f64> + Send + Sync + 'static,
    {
        if k == 0 {
            return Err(Error::Parameter("order k must be at least 1".into()));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Parameter(format!("time step h must be positive, got {h}")));
        }
        Ok(HoSystemModel {
            name: name.to_string(),
            k,
            r: connection.shape_dim(),
            m,
            tag: connection.tag(),
            h,
            connection,
            params: Vec::new(),
            lagrangian: Arc::new(lagrangian),
            constraints: Arc::new(constraints),
            analytic: None,
            row_scale: RowScale::default(),
        })
    }

    pub fn with_analytic(mut self, provider: Arc<dyn AnalyticDerivatives>) -> Self {
        self.analytic = Some(provider);
        self
    }

    pub fn with_params(mut self, params: Vec<(String, f64)>) -> Self {
        self.params = params;
        self
    }

    pub fn with_row_scale(mut self, scale: RowScale) -> Self {
        self.row_scale = scale;
        self
    }

    /// The same model with every derivative taken by central differences.
    pub fn finite_difference_provider(&self) -> Self {
        let mut out = self.clone();
        out.analytic = None;
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn order(&self) -> usize {
        self.k
    }
    pub fn shape_dim(&self) -> usize {
        self.r
    }
    pub fn group_dim(&self) -> usize {
        self.tag.dim()
    }
    pub fn n_constraints(&self) -> usize {
        self.m
    }
    pub fn tag(&self) -> GroupTag {
        self.tag
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn connection(&self) -> &LocalDiscreteConnection {
        &self.connection
    }
    pub fn params(&self) -> &[(String, f64)] {
        &self.params
    }
    pub fn row_scale(&self) -> RowScale {
        self.row_scale
    }
    pub fn has_analytic(&self) -> bool {
        self.analytic.is_some()
    }

    /// Size of one step's unknowns: new shape point, new group part, multipliers.
    pub fn step_dim(&self) -> usize {
        self.r + self.tag.dim() + self.m
    }

    fn check_window(&self, w: &ReducedWindow) -> Result<()> {
        if w.order() != self.k || w.shape_dim() != self.r {
            return Err(Error::Inconsistent(format!(
                "window (k={}, r={}) does not fit model {} (k={}, r={})",
                w.order(),
                w.shape_dim(),
                self.name,
                self.k,
                self.r
            )));
        }
        if w.tag() != self.tag {
            return Err(Error::TagMismatch(self.tag, w.tag()));
        }
        Ok(())
    }

    fn check_slot(&self, slot: usize) -> Result<()> {
        if slot == 0 || slot > 2 * self.k + 1 {
            return Err(Error::SlotOutOfRange {
                slot,
                max: 2 * self.k + 1,
            });
        }
        Ok(())
    }

    pub fn is_shape_slot(&self, slot: usize) -> bool {
        slot <= self.k + 1
    }

    pub fn eval_ld(&self, w: &ReducedWindow) -> Result<f64> {
        self.check_window(w)?;
        let v = (self.lagrangian)(w);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("L_d of {} at {w:?}", self.name)));
        }
        Ok(v)
    }

    pub fn eval_chi(&self, w: &ReducedWindow) -> Result<DVector<f64>> {
        self.check_window(w)?;
        let v = (self.constraints)(w);
        if v.len() != self.m {
            return Err(Error::Inconsistent(format!(
                "constraint map returned {} values, model declares {}",
                v.len(),
                self.m
            )));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("constraints of {} at {w:?}", self.name)));
        }
        Ok(v)
    }

    /// Derivative of `L_d` or one constraint with respect to `slot`, using the
    /// analytic provider when it covers the pair.
    pub fn slot_derivative(&self, func: Func, slot: usize, w: &ReducedWindow) -> Result<SlotDerivative> {
        self.check_window(w)?;
        self.check_slot(slot)?;
        if let Func::Constraint(a) = func {
            if a >= self.m {
                return Err(Error::Inconsistent(format!("constraint index {a} >= m = {}", self.m)));
            }
        }
        if let Some(an) = &self.analytic {
            if self.is_shape_slot(slot) {
                if let Some(s) = an.shape(func, slot, w) {
                    return Ok(SlotDerivative::Shape(s));
                }
            } else if let Some(right) = an.group_right(func, slot, w) {
                let g = w.group(slot - self.k - 2);
                return Ok(SlotDerivative::Group {
                    left: g.coadjoint(&right),
                    right,
                });
            }
        }
        self.fd_slot_derivative(func, slot, w)
    }

    /// Central-difference derivative, ignoring any analytic provider.
    pub fn fd_slot_derivative(&self, func: Func, slot: usize, w: &ReducedWindow) -> Result<SlotDerivative> {
        self.check_window(w)?;
        self.check_slot(slot)?;
        let f = |q: &ReducedWindow| -> f64 {
            match func {
                Func::Lagrangian => (self.lagrangian)(q),
                Func::Constraint(a) => (self.constraints)(q)[a],
            }
        };
        let mut out = fd_vector_slot(self.k, slot, w, |q| DVector::from_element(1, f(q)))?;
        Ok(out.remove(0))
    }

    /// Derivatives of every constraint component with respect to `slot`.
    pub fn constraint_slot_derivatives(&self, slot: usize, w: &ReducedWindow) -> Result<Vec<SlotDerivative>> {
        self.check_window(w)?;
        self.check_slot(slot)?;
        if self.m == 0 {
            return Ok(Vec::new());
        }
        if self.analytic.is_some() {
            return (0..self.m)
                .map(|a| self.slot_derivative(Func::Constraint(a), slot, w))
                .collect();
        }
        let chi = self.constraints.clone();
        fd_vector_slot(self.k, slot, w, |q| chi(q))
    }

    /// Derivative of `L_d + lambda . chi` with respect to `slot`.
    pub fn augmented_slot_derivative(
        &self,
        slot: usize,
        w: &ReducedWindow,
        lambda: &[f64],
    ) -> Result<SlotDerivative> {
        let mut d = self.slot_derivative(Func::Lagrangian, slot, w)?;
        if self.m > 0 {
            if lambda.len() != self.m {
                return Err(Error::Inconsistent(format!(
                    "{} multipliers for {} constraints",
                    lambda.len(),
                    self.m
                )));
            }
            for (a, dc) in self.constraint_slot_derivatives(slot, w)?.iter().enumerate() {
                d = d.axpy(lambda[a], dc);
            }
        }
        Ok(d)
    }

    /// Terms of the step residual contributed by the newest window `w` with
    /// its multipliers: shape stationarity through slot 1 (including the
    /// connection contraction at `A(p_0, p_1)`), the momentum covector through
    /// slot `k + 2`, and the constraint values. Unscaled.
    pub fn newest_window_terms(&self, w: &ReducedWindow, lambda: &[f64]) -> Result<DVector<f64>> {
        let (r, d, k) = (self.r, self.tag.dim(), self.k);
        let mut out = DVector::zeros(self.step_dim());
        let shape = self.augmented_slot_derivative(1, w, lambda)?;
        let group = self.augmented_slot_derivative(k + 2, w, lambda)?;
        let contraction = self.connection.hat_l_contraction(
            1,
            w.shape(0).as_slice(),
            w.shape(1).as_slice(),
            group.left(),
        )?;
        out.rows_mut(0, r).copy_from(&(shape.shape() + contraction));
        for a in 0..d {
            out[r + a] = group.right().get(a);
        }
        if self.m > 0 {
            out.rows_mut(r + d, self.m).copy_from(&self.eval_chi(w)?);
        }
        Ok(out)
    }

    /// Multiplies residual rows by the model's row scale.
    pub fn scale_rows(&self, v: &mut DVector<f64>) {
        let (r, d) = (self.r, self.tag.dim());
        for i in 0..v.len() {
            v[i] *= self.row_factor(i, r, d);
        }
    }

    fn row_factor(&self, i: usize, r: usize, d: usize) -> f64 {
        if i < r {
            self.row_scale.shape
        } else if i < r + d {
            self.row_scale.momentum
        } else {
            self.row_scale.constraint
        }
    }

    /// Applies step unknowns `delta = (dp, dg, dlambda)` to the newest window:
    /// `p_k += dp`, `g_{k-1} <- g_{k-1} exp(dg)`, `lambda += dlambda`.
    pub fn perturb(&self, w: &ReducedWindow, lambda: &[f64], delta: &[f64]) -> (ReducedWindow, Vec<f64>) {
        let (r, d, k) = (self.r, self.tag.dim(), self.k);
        let mut p = w.shape(k).clone();
        for s in 0..r {
            p[s] += delta[s];
        }
        let xi = AlgebraVector::new(self.tag, &delta[r..r + d]);
        let g = w.group(k - 1).compose(&GroupElement::exp(&xi));
        let lam: Vec<f64> = lambda.iter().zip(&delta[r + d..]).map(|(l, dl)| l + dl).collect();
        (w.with_shape(k, p).with_group(k - 1, g), lam)
    }

    /// Jacobian chart step sizes for the unknowns at `(w, lambda)`.
    pub(crate) fn unknown_steps(&self, w: &ReducedWindow, lambda: &[f64]) -> Vec<f64> {
        let (r, d, k) = (self.r, self.tag.dim(), self.k);
        let rel = if self.analytic.is_some() { 1e-6 } else { 1e-4 };
        let mut steps = Vec::with_capacity(self.step_dim());
        for s in 0..r {
            steps.push(rel * w.shape(k)[s].abs().max(1.0));
        }
        let gs = rel * w.group(k - 1).sup_norm().max(1.0);
        steps.extend(std::iter::repeat_n(gs, d));
        for l in lambda {
            steps.push(rel * l.abs().max(1.0));
        }
        steps
    }
}

/// Central differences of a vector-valued window function with respect to
/// one slot; returns one derivative per output component.
fn fd_vector_slot<F>(k: usize, slot: usize, w: &ReducedWindow, f: F) -> Result<Vec<SlotDerivative>>
where
    F: Fn(&ReducedWindow) -> DVector<f64>,
{
    let nonfinite = || Error::NonFinite(format!("finite differences at slot {slot} of {w:?}"));
    if slot <= k + 1 {
        let i = slot - 1;
        let p = w.shape(i);
        let mut cols: Vec<DVector<f64>> = Vec::new();
        for s in 0..p.len() {
            let h = 1e-6 * p[s].abs().max(1.0);
            let mut pp = p.clone();
            pp[s] += h;
            let mut pm = p.clone();
            pm[s] -= h;
            let fp = f(&w.with_shape(i, pp));
            let fm = f(&w.with_shape(i, pm));
            let col = (fp - fm) / (2.0 * h);
            if !col.iter().all(|v| v.is_finite()) {
                return Err(nonfinite());
            }
            cols.push(col);
        }
        let n_out = f(w).len();
        Ok((0..n_out)
            .map(|a| SlotDerivative::Shape(DVector::from_iterator(p.len(), cols.iter().map(|c| c[a]))))
            .collect())
    } else {
        let j = slot - k - 2;
        let g = *w.group(j);
        let n_out = f(w).len();
        let mut out = Vec::with_capacity(n_out);
        for a in 0..n_out {
            let right = right_trivialized_gradient(|q| f(&w.with_group(j, *q))[a], &g)
                .map_err(|_| nonfinite())?;
            out.push(SlotDerivative::Group {
                left: g.coadjoint(&right),
                right,
            });
        }
        Ok(out)
    }
}

/// Regularity matrix at the newest window: the Jacobian of the step
/// residual with respect to `(p_k, g_{k-1}, lambda)`, rows ordered
/// (shape, momentum, constraints) and scaled by the model's row scale.
pub fn regularity_matrix(model: &HoSystemModel, w: &ReducedWindow, lambda: &[f64]) -> Result<DMatrix<f64>> {
    let n = model.step_dim();
    let steps = model.unknown_steps(w, lambda);
    let mut jac = DMatrix::zeros(n, n);
    for c in 0..n {
        let mut delta = vec![0.0; n];
        delta[c] = steps[c];
        let (wp, lp) = model.perturb(w, lambda, &delta);
        delta[c] = -steps[c];
        let (wm, lm) = model.perturb(w, lambda, &delta);
        let fp = model.newest_window_terms(&wp, &lp)?;
        let fm = model.newest_window_terms(&wm, &lm)?;
        jac.set_column(c, &((fp - fm) / (2.0 * steps[c])));
    }
    for i in 0..n {
        let f = model.row_factor(i, model.r, model.tag.dim());
        jac.row_mut(i).scale_mut(f);
    }
    Ok(jac)
}

/// Ratio of extreme singular values; infinite for a singular matrix.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if !max.is_finite() {
        return f64::INFINITY;
    }
    if min <= max * f64::EPSILON * 1e-2 || min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connection::trivial_connection;
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    // Quadratic first-order model on R^2 x SO(2) with one constraint that
    // couples shape and group slots.
    fn toy_model() -> HoSystemModel {
        HoSystemModel::new(
            "toy",
            1,
            1,
            0.1,
            trivial_connection(2, GroupTag::So2),
            |w| {
                let d = w.shape(1) - w.shape(0);
                0.5 * d.norm_squared() / 0.1 + 0.3 * w.group(0).angle().powi(2) + 0.2 * w.shape(0)[0] * w.group(0).angle()
            },
            |w| dv(&[w.shape(1)[0] + w.shape(1)[1] + w.group(0).angle() - 1.0]),
        )
        .unwrap()
    }

    fn toy_window() -> ReducedWindow {
        ReducedWindow::new(vec![dv(&[0.1, 0.2]), dv(&[0.3, -0.1])], vec![GroupElement::so2(0.4)]).unwrap()
    }

    #[test]
    fn window_shape_checks() {
        assert!(ReducedWindow::new(vec![dv(&[0.0])], vec![GroupElement::so2(0.0)]).is_err());
        assert!(ReducedWindow::new(vec![dv(&[0.0]), dv(&[f64::NAN])], vec![GroupElement::so2(0.0)]).is_err());
        let w = ReducedWindow::new(
            vec![dv(&[0.0]), dv(&[1.0]), dv(&[2.0])],
            vec![GroupElement::so2(0.1), GroupElement::so2(0.2)],
        )
        .unwrap();
        assert_eq!(w.order(), 2);
        let s = w.shifted(dv(&[3.0]), GroupElement::so2(0.3));
        assert_eq!(s.shape(0)[0], 1.0);
        assert_eq!(s.group(1).angle(), 0.3);
    }

    #[test]
    fn constant_lagrangian_has_zero_derivatives() {
        let m = HoSystemModel::new("c", 2, 0, 0.1, trivial_connection(1, GroupTag::Se2), |_| 3.0, |_| DVector::zeros(0))
            .unwrap();
        let w = ReducedWindow::new(
            vec![dv(&[0.1]), dv(&[0.2]), dv(&[0.4])],
            vec![GroupElement::se2(0.1, 0.2, 0.3), GroupElement::se2(-0.2, 0.0, 1.0)],
        )
        .unwrap();
        for slot in 1..=5 {
            assert_eq!(m.slot_derivative(Func::Lagrangian, slot, &w).unwrap().norm_inf(), 0.0);
        }
        assert!(matches!(
            m.slot_derivative(Func::Lagrangian, 6, &w),
            Err(Error::SlotOutOfRange { slot: 6, max: 5 })
        ));
    }

    #[test]
    fn fd_on_quadratic_is_exact() {
        let m = toy_model();
        let w = toy_window();
        // d/dp0 of 0.5|p1-p0|^2/h + 0.2 p0_x theta.
        let d1 = m.slot_derivative(Func::Lagrangian, 1, &w).unwrap();
        let want = [-(0.3 - 0.1) / 0.1 + 0.2 * 0.4, -(-0.1 - 0.2) / 0.1];
        for s in 0..2 {
            assert!((d1.shape()[s] - want[s]).abs() <= 1e-9);
        }
        let d3 = m.slot_derivative(Func::Lagrangian, 3, &w).unwrap();
        assert!((d3.right().get(0) - (0.6 * 0.4 + 0.2 * 0.1)).abs() <= 1e-9);
    }

    #[test]
    fn fd_of_constant_constraint_is_zero() {
        let m = HoSystemModel::new("c", 1, 1, 0.1, trivial_connection(1, GroupTag::So2), |_| 0.0, |_| dv(&[2.0]))
            .unwrap();
        let w = ReducedWindow::new(vec![dv(&[0.3]), dv(&[0.5])], vec![GroupElement::so2(1.0)]).unwrap();
        for slot in 1..=3 {
            assert!(m.slot_derivative(Func::Constraint(0), slot, &w).unwrap().norm_inf() <= 1e-9);
        }
    }

    #[test]
    fn eval_rejects_mismatched_window() {
        let m = toy_model();
        let w = ReducedWindow::new(vec![dv(&[0.1]), dv(&[0.3])], vec![GroupElement::so2(0.4)]).unwrap();
        assert!(m.eval_ld(&w).is_err());
    }

    #[test]
    fn zero_constraint_regularity_matrix_is_unconstrained_jacobian() {
        let m = HoSystemModel::new(
            "free",
            1,
            0,
            0.1,
            trivial_connection(1, GroupTag::So2),
            |w| 0.5 * (w.shape(1)[0] - w.shape(0)[0]).powi(2) + 0.5 * w.group(0).angle().powi(2),
            |_| DVector::zeros(0),
        )
        .unwrap();
        let w = ReducedWindow::new(vec![dv(&[0.0]), dv(&[0.5])], vec![GroupElement::so2(0.2)]).unwrap();
        let j = regularity_matrix(&m, &w, &[]).unwrap();
        assert_eq!(j.shape(), (2, 2));
        // Nested central differences: accurate to ~1e-6.
        assert!((j[(0, 0)] + 1.0).abs() < 2e-5);
        assert!(j[(0, 1)].abs() < 2e-5 && j[(1, 0)].abs() < 2e-5);
        assert!((j[(1, 1)] - 1.0).abs() < 2e-5);
    }

    // The block matrix assembled from its printed definition for k = 1 on a
    // trivial bundle: rows (D12 L~, D3 D3 L~ , M13), (D2 mu, D3 mu, eps),
    // (D2 chi, D3 chi, 0), each block by its own central differences.
    #[test]
    fn regularity_matrix_matches_block_definition() {
        let m = toy_model();
        let w = toy_window();
        let lambda = [0.7];
        let got = regularity_matrix(&m, &w, &lambda).unwrap();
        let h = 1e-5;
        let aug1 = |q: &ReducedWindow| m.augmented_slot_derivative(1, q, &lambda).unwrap().shape().clone();
        let aug3 = |q: &ReducedWindow| m.augmented_slot_derivative(3, q, &lambda).unwrap().right().get(0);
        let mut want = DMatrix::zeros(4, 4);
        for s in 0..2 {
            let mut pp = w.shape(1).clone();
            pp[s] += h;
            let mut pm = w.shape(1).clone();
            pm[s] -= h;
            let (wp, wm) = (w.with_shape(1, pp), w.with_shape(1, pm));
            let col = (aug1(&wp) - aug1(&wm)) / (2.0 * h);
            want[(0, s)] = col[0];
            want[(1, s)] = col[1];
            want[(2, s)] = (aug3(&wp) - aug3(&wm)) / (2.0 * h);
            want[(3, s)] = m.slot_derivative(Func::Constraint(0), 2, &w).unwrap().shape()[s];
        }
        let th = w.group(0).angle();
        let (wp, wm) = (w.with_group(0, GroupElement::so2(th + h)), w.with_group(0, GroupElement::so2(th - h)));
        let col = (aug1(&wp) - aug1(&wm)) / (2.0 * h);
        want[(0, 2)] = col[0];
        want[(1, 2)] = col[1];
        want[(2, 2)] = (aug3(&wp) - aug3(&wm)) / (2.0 * h);
        want[(3, 2)] = m.slot_derivative(Func::Constraint(0), 3, &w).unwrap().right().get(0);
        let d1c = m.slot_derivative(Func::Constraint(0), 1, &w).unwrap();
        want[(0, 3)] = d1c.shape()[0];
        want[(1, 3)] = d1c.shape()[1];
        want[(2, 3)] = m.slot_derivative(Func::Constraint(0), 3, &w).unwrap().right().get(0);
        assert!((&got - &want).amax() <= 2e-5, "{}", got - want);
    }

    #[test]
    fn duplicate_constraints_make_matrix_singular() {
        let m = HoSystemModel::new(
            "dup",
            1,
            2,
            0.1,
            trivial_connection(1, GroupTag::So2),
            |w| 0.5 * (w.shape(1)[0] - w.shape(0)[0]).powi(2),
            |w| {
                let c = w.group(0).angle() - 0.5;
                dv(&[c, c])
            },
        )
        .unwrap();
        let w = ReducedWindow::new(vec![dv(&[0.0]), dv(&[0.5])], vec![GroupElement::so2(0.5)]).unwrap();
        let j = regularity_matrix(&m, &w, &[0.0, 0.0]).unwrap();
        assert!(condition_estimate(&j) > 1e12);
    }

    proptest! {
        #[test]
        fn slot_derivatives_are_linear(a in -2.0..2.0f64, b in -2.0..2.0f64, lam in -2.0..2.0f64,
                                       x in -1.0..1.0f64, th in -1.0..1.0f64) {
            let m = toy_model();
            let w = ReducedWindow::new(vec![dv(&[x, 0.2]), dv(&[0.3, x])], vec![GroupElement::so2(th)]).unwrap();
            let lhs_model = HoSystemModel::new(
                "combo", 1, 0, 0.1, trivial_connection(2, GroupTag::So2),
                {
                    let m = m.clone();
                    move |q| a * m.eval_ld(q).unwrap() + b * m.eval_chi(q).unwrap()[0]
                },
                |_| DVector::zeros(0),
            ).unwrap();
            for slot in 1..=3 {
                let lhs = lhs_model.slot_derivative(Func::Lagrangian, slot, &w).unwrap();
                let dl = m.slot_derivative(Func::Lagrangian, slot, &w).unwrap();
                let dc = m.slot_derivative(Func::Constraint(0), slot, &w).unwrap();
                let rhs: Vec<f64> = dl.entries().iter().zip(dc.entries()).map(|(u, v)| a * u + b * v).collect();
                for (p, q) in lhs.entries().iter().zip(rhs) {
                    prop_assert!((p - q).abs() <= 1e-8);
                }
                let aug = m.augmented_slot_derivative(slot, &w, &[lam]).unwrap();
                let direct: Vec<f64> = dl.entries().iter().zip(dc.entries()).map(|(u, v)| u + lam * v).collect();
                for (p, q) in aug.entries().iter().zip(direct) {
                    prop_assert!((p - q).abs() <= 1e-12);
                }
            }
        }
    }
}
