//! SO(2) and SE(2) kernels: group law, exp/log, Ad/Ad*, ad/ad*, and
//! trivialized gradients of scalar functions.
//!
//! se(2) coordinates are taken in the basis
//!
//! ```text
//! e1 = [[0,0,1],[0,0,0],[0,0,0]]   e2 = [[0,0,0],[0,0,1],[0,0,0]]
//! e3 = [[0,1,0],[-1,0,0],[0,0,0]]
//! ```
//!
//! so `e3` generates a clockwise turn: `exp(t e3)` rotates the plane by `-t`.
//! so(2) uses the counter-clockwise generator, so its coordinate is the
//! angular rate of the stored angle. Covectors pair with vectors through the
//! plain dot product of coordinates.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum GroupTag {
    So2,
    Se2,
}

impl GroupTag {
    /// Dimension of the group (and of its algebra).
    pub fn dim(self) -> usize {
        match self {
            GroupTag::So2 => 1,
            GroupTag::Se2 => 3,
        }
    }
}

/// Wraps an angle into (-pi, pi]. Angles already in range come back untouched.
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let r = theta.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

fn rot(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Block of `e3` acting on translations.
fn j2() -> Matrix2<f64> {
    Matrix2::new(0.0, 1.0, -1.0, 0.0)
}

fn check(a: GroupTag, b: GroupTag) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::TagMismatch(a, b))
    }
}

fn expect_tags(a: GroupTag, b: GroupTag) {
    if let Err(e) = check(a, b) {
        panic!("contract violation: {e}");
    }
}

/// Element of SO(2) or SE(2), stored as a wrapped angle plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupElement {
    tag: GroupTag,
    theta: f64,
    x: f64,
    y: f64,
}

impl GroupElement {
    pub fn identity(tag: GroupTag) -> Self {
        GroupElement {
            tag,
            theta: 0.0,
            x: 0.0,
            y: 0.0,
        }
    }

    pub fn so2(theta: f64) -> Self {
        GroupElement {
            tag: GroupTag::So2,
            theta: wrap_angle(theta),
            x: 0.0,
            y: 0.0,
        }
    }

    pub fn se2(theta: f64, x: f64, y: f64) -> Self {
        GroupElement {
            tag: GroupTag::Se2,
            theta: wrap_angle(theta),
            x,
            y,
        }
    }

    pub fn tag(&self) -> GroupTag {
        self.tag
    }

    /// Counter-clockwise rotation angle in (-pi, pi].
    pub fn angle(&self) -> f64 {
        self.theta
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.x.is_finite() && self.y.is_finite()
    }

    /// Homogeneous 3x3 matrix; SO(2) elements get a zero translation column.
    pub fn matrix(&self) -> Matrix3<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix3::new(c, -s, self.x, s, c, self.y, 0.0, 0.0, 1.0)
    }

    /// Largest absolute entry of the matrix view.
    pub fn sup_norm(&self) -> f64 {
        self.matrix().amax()
    }

    pub fn try_compose(&self, other: &GroupElement) -> Result<GroupElement> {
        check(self.tag, other.tag)?;
        let t = rot(self.theta) * other.translation() + self.translation();
        Ok(GroupElement {
            tag: self.tag,
            theta: wrap_angle(self.theta + other.theta),
            x: t.x,
            y: t.y,
        })
    }

    /// Group product `self * other`. Panics on a tag mismatch.
    pub fn compose(&self, other: &GroupElement) -> GroupElement {
        self.try_compose(other)
            .unwrap_or_else(|e| panic!("contract violation: {e}"))
    }

    pub fn inverse(&self) -> GroupElement {
        let t = -(rot(-self.theta) * self.translation());
        GroupElement {
            tag: self.tag,
            theta: wrap_angle(-self.theta),
            x: t.x,
            y: t.y,
        }
    }

    pub fn exp(xi: &AlgebraVector) -> GroupElement {
        match xi.tag {
            GroupTag::So2 => GroupElement::so2(xi.c[0]),
            GroupTag::Se2 => {
                let phi = -xi.c[2];
                let (a, b) = v_coeffs(phi);
                let v = Vector2::new(xi.c[0], xi.c[1]);
                let t = Matrix2::new(a, -b, b, a) * v;
                GroupElement::se2(phi, t.x, t.y)
            }
        }
    }

    pub fn log(&self) -> AlgebraVector {
        match self.tag {
            GroupTag::So2 => AlgebraVector::new(GroupTag::So2, &[self.theta]),
            GroupTag::Se2 => {
                let phi = self.theta;
                let (a, b) = v_coeffs(phi);
                let det = a * a + b * b;
                let v = Matrix2::new(a, b, -b, a) * self.translation() / det;
                AlgebraVector::new(GroupTag::Se2, &[v.x, v.y, -phi])
            }
        }
    }

    /// `Ad_g xi = g xi g^-1`.
    pub fn adjoint(&self, xi: &AlgebraVector) -> AlgebraVector {
        expect_tags(self.tag, xi.tag);
        match self.tag {
            GroupTag::So2 => *xi,
            GroupTag::Se2 => {
                let v = Vector2::new(xi.c[0], xi.c[1]);
                let w = xi.c[2];
                let u = rot(self.theta) * v - w * (j2() * self.translation());
                AlgebraVector::new(GroupTag::Se2, &[u.x, u.y, w])
            }
        }
    }

    /// `Ad*_g`, the dual of `Ad_g`: `<Ad*_g mu, xi> = <mu, Ad_g xi>`.
    pub fn coadjoint(&self, mu: &CoalgebraVector) -> CoalgebraVector {
        expect_tags(self.tag, mu.tag);
        match self.tag {
            GroupTag::So2 => *mu,
            GroupTag::Se2 => {
                let mv = Vector2::new(mu.c[0], mu.c[1]);
                let r = rot(self.theta).transpose() * mv;
                let w = mu.c[2] - mv.dot(&(j2() * self.translation()));
                CoalgebraVector::new(GroupTag::Se2, &[r.x, r.y, w])
            }
        }
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tag {
            GroupTag::So2 => write!(f, "SO2(theta={:.6})", self.theta),
            GroupTag::Se2 => write!(
                f,
                "SE2(theta={:.6}, x={:.6}, y={:.6})",
                self.theta, self.x, self.y
            ),
        }
    }
}

/// Coefficients (sin p / p, (1 - cos p) / p) of the SE(2) V-matrix.
fn v_coeffs(phi: f64) -> (f64, f64) {
    if phi.abs() < 1e-6 {
        let p2 = phi * phi;
        let a = 1.0 - p2 / 6.0 + p2 * p2 / 120.0 - p2 * p2 * p2 / 5040.0;
        let b = phi * (0.5 - p2 / 24.0 + p2 * p2 / 720.0 - p2 * p2 * p2 / 40320.0);
        (a, b)
    } else {
        (phi.sin() / phi, (1.0 - phi.cos()) / phi)
    }
}

macro_rules! coord_vector {
    ($name:ident) => {
        #[derive(Debug, Clone, Copy, PartialEq)]
        pub struct $name {
            tag: GroupTag,
            c: Vector3<f64>,
        }

        impl $name {
            /// Builds from coordinates; `coords.len()` must equal the group dimension.
            pub fn new(tag: GroupTag, coords: &[f64]) -> Self {
                assert_eq!(coords.len(), tag.dim(), "coordinate count");
                let mut c = Vector3::zeros();
                for (i, v) in coords.iter().enumerate() {
                    c[i] = *v;
                }
                $name { tag, c }
            }

            pub fn zero(tag: GroupTag) -> Self {
                $name {
                    tag,
                    c: Vector3::zeros(),
                }
            }

            /// Unit vector along basis direction `a` (0-based).
            pub fn basis(tag: GroupTag, a: usize) -> Self {
                let mut out = Self::zero(tag);
                out.c[a] = 1.0;
                out
            }

            pub fn tag(&self) -> GroupTag {
                self.tag
            }

            pub fn coords(&self) -> &[f64] {
                &self.c.as_slice()[..self.tag.dim()]
            }

            pub fn get(&self, a: usize) -> f64 {
                self.c[a]
            }

            pub fn is_finite(&self) -> bool {
                self.c.iter().all(|v| v.is_finite())
            }

            pub fn scale(&self, s: f64) -> Self {
                $name {
                    tag: self.tag,
                    c: self.c * s,
                }
            }

            pub fn add(&self, other: &Self) -> Self {
                expect_tags(self.tag, other.tag);
                $name {
                    tag: self.tag,
                    c: self.c + other.c,
                }
            }

            pub fn sub(&self, other: &Self) -> Self {
                self.add(&other.scale(-1.0))
            }

            pub fn norm_inf(&self) -> f64 {
                self.c.amax()
            }
        }
    };
}

coord_vector!(AlgebraVector);
coord_vector!(CoalgebraVector);

impl AlgebraVector {
    pub fn hat(&self) -> Matrix3<f64> {
        match self.tag {
            GroupTag::So2 => {
                let w = self.c[0];
                Matrix3::new(0.0, -w, 0.0, w, 0.0, 0.0, 0.0, 0.0, 0.0)
            }
            GroupTag::Se2 => {
                let (v1, v2, w) = (self.c[0], self.c[1], self.c[2]);
                Matrix3::new(0.0, w, v1, -w, 0.0, v2, 0.0, 0.0, 0.0)
            }
        }
    }

    /// Inverse of [`AlgebraVector::hat`]; off-pattern entries are ignored.
    pub fn vee(tag: GroupTag, m: &Matrix3<f64>) -> AlgebraVector {
        match tag {
            GroupTag::So2 => AlgebraVector::new(tag, &[m[(1, 0)]]),
            GroupTag::Se2 => AlgebraVector::new(tag, &[m[(0, 2)], m[(1, 2)], m[(0, 1)]]),
        }
    }

    /// Lie bracket `[self, eta]`.
    pub fn bracket(&self, eta: &AlgebraVector) -> AlgebraVector {
        expect_tags(self.tag, eta.tag);
        match self.tag {
            GroupTag::So2 => AlgebraVector::zero(GroupTag::So2),
            GroupTag::Se2 => {
                let v = Vector2::new(self.c[0], self.c[1]);
                let u = Vector2::new(eta.c[0], eta.c[1]);
                let t = j2() * (self.c[2] * u - eta.c[2] * v);
                AlgebraVector::new(GroupTag::Se2, &[t.x, t.y, 0.0])
            }
        }
    }

    /// `ad*_self mu`, defined by `<ad*_xi mu, eta> = <mu, [xi, eta]>`.
    pub fn co_bracket(&self, mu: &CoalgebraVector) -> CoalgebraVector {
        expect_tags(self.tag, mu.tag);
        match self.tag {
            GroupTag::So2 => CoalgebraVector::zero(GroupTag::So2),
            GroupTag::Se2 => {
                let mv = Vector2::new(mu.c[0], mu.c[1]);
                let v = Vector2::new(self.c[0], self.c[1]);
                let t = self.c[2] * (j2().transpose() * mv);
                let w = -mv.dot(&(j2() * v));
                CoalgebraVector::new(GroupTag::Se2, &[t.x, t.y, w])
            }
        }
    }
}

pub fn pairing(mu: &CoalgebraVector, xi: &AlgebraVector) -> f64 {
    expect_tags(mu.tag, xi.tag);
    mu.c.dot(&xi.c)
}

/// Free-function form of [`GroupElement::compose`] that reports tag mismatches.
pub fn compose(g: &GroupElement, h: &GroupElement) -> Result<GroupElement> {
    g.try_compose(h)
}

pub fn exp_map(xi: &AlgebraVector) -> GroupElement {
    GroupElement::exp(xi)
}

pub fn log_map(g: &GroupElement) -> AlgebraVector {
    g.log()
}

pub fn adjoint_action(g: &GroupElement, xi: &AlgebraVector) -> Result<AlgebraVector> {
    check(g.tag, xi.tag)?;
    Ok(g.adjoint(xi))
}

pub fn coadjoint_action(g: &GroupElement, mu: &CoalgebraVector) -> Result<CoalgebraVector> {
    check(g.tag, mu.tag)?;
    Ok(g.coadjoint(mu))
}

pub fn ad_operator(xi: &AlgebraVector, eta: &AlgebraVector) -> Result<AlgebraVector> {
    check(xi.tag, eta.tag)?;
    Ok(xi.bracket(eta))
}

pub fn co_ad_operator(xi: &AlgebraVector, mu: &CoalgebraVector) -> Result<CoalgebraVector> {
    check(xi.tag, mu.tag)?;
    Ok(xi.co_bracket(mu))
}

/// Finite-difference step used for group directions at `g`.
pub fn group_fd_step(g: &GroupElement) -> f64 {
    1e-6 * g.sup_norm().max(1.0)
}

fn trivialized_gradient<F>(f: F, g: &GroupElement, left: bool) -> Result<CoalgebraVector>
where
    F: Fn(&GroupElement) -> f64,
{
    let tag = g.tag;
    let h = group_fd_step(g);
    let mut out = CoalgebraVector::zero(tag);
    for a in 0..tag.dim() {
        let step = |t: f64| {
            let e = GroupElement::exp(&AlgebraVector::basis(tag, a).scale(t));
            if left {
                g.compose(&e)
            } else {
                e.compose(g)
            }
        };
        let fp = f(&step(h));
        let fm = f(&step(-h));
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("trivialized gradient at {g}")));
        }
        out.c[a] = (fp - fm) / (2.0 * h);
    }
    Ok(out)
}

/// Component `a` is `d/dt f(g exp(t e_a))` at `t = 0`, by central differences.
pub fn left_trivialized_gradient<F>(f: F, g: &GroupElement) -> Result<CoalgebraVector>
where
    F: Fn(&GroupElement) -> f64,
{
    trivialized_gradient(f, g, true)
}

/// Component `a` is `d/dt f(exp(t e_a) g)` at `t = 0`, by central differences.
pub fn right_trivialized_gradient<F>(f: F, g: &GroupElement) -> Result<CoalgebraVector>
where
    F: Fn(&GroupElement) -> f64,
{
    trivialized_gradient(f, g, false)
}
