//! Discrete principal connections in a local trivialization.
//!
//! A connection is a map `A(p0, p1)` from pairs of shape points to the group.
//! Its partial derivatives are kept left-trivialized: column `s` of slot `i`
//! is the algebra vector `A^-1 dA/dp_i^s`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::liegroup::{pairing, AlgebraVector, CoalgebraVector, GroupElement, GroupTag};

/// Covector on shape space, one entry per shape coordinate.
pub type ShapeCovector = DVector<f64>;

type Evaluator = Arc<dyn Fn(&[f64], &[f64]) -> GroupElement + Send + Sync>;
type Partials = Arc<dyn Fn(&[f64], &[f64]) -> [Vec<AlgebraVector>; 2] + Send + Sync>;

#[derive(Clone)]
pub struct LocalDiscreteConnection {
    r: usize,
    tag: GroupTag,
    trivial: bool,
    eval: Evaluator,
    partials: Option<Partials>,
}

impl fmt::Debug for LocalDiscreteConnection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalDiscreteConnection")
            .field("r", &self.r)
            .field("tag", &self.tag)
            .field("trivial", &self.trivial)
            .field("analytic_partials", &self.partials.is_some())
            .finish()
    }
}

impl LocalDiscreteConnection {
    /// A user connection; without `partials`, derivatives fall back to
    /// central differences.
    pub fn new<F>(r: usize, tag: GroupTag, eval: F, partials: Option<Partials>) -> Self
    where
        F: Fn(&[f64], &[f64]) -> GroupElement + Send + Sync + 'static,
    {
        LocalDiscreteConnection {
            r,
            tag,
            trivial: false,
            eval: Arc::new(eval),
            partials,
        }
    }

    pub fn shape_dim(&self) -> usize {
        self.r
    }

    pub fn tag(&self) -> GroupTag {
        self.tag
    }

    pub fn is_trivial(&self) -> bool {
        self.trivial
    }

    pub fn has_analytic_partials(&self) -> bool {
        self.partials.is_some()
    }

    pub fn eval_a(&self, p0: &[f64], p1: &[f64]) -> GroupElement {
        if self.trivial {
            return GroupElement::identity(self.tag);
        }
        (self.eval)(p0, p1)
    }

    /// Left-trivialized partials `[D1A, D2A]`, `r` algebra vectors each.
    pub fn partials(&self, p0: &[f64], p1: &[f64]) -> [Vec<AlgebraVector>; 2] {
        if self.trivial {
            let z = vec![AlgebraVector::zero(self.tag); self.r];
            return [z.clone(), z];
        }
        match &self.partials {
            Some(f) => f(p0, p1),
            None => self.fd_partials(p0, p1),
        }
    }

    /// Central-difference partials, regardless of any analytic override.
    pub fn fd_partials(&self, p0: &[f64], p1: &[f64]) -> [Vec<AlgebraVector>; 2] {
        let a_inv = self.eval_a(p0, p1).inverse();
        let mut out = [Vec::with_capacity(self.r), Vec::with_capacity(self.r)];
        for (slot, col) in out.iter_mut().enumerate() {
            for s in 0..self.r {
                let base = if slot == 0 { p0 } else { p1 };
                let h = 1e-6 * base[s].abs().max(1.0);
                let shifted = |d: f64| {
                    let mut q = base.to_vec();
                    q[s] += d;
                    let g = if slot == 0 {
                        self.eval_a(&q, p1)
                    } else {
                        self.eval_a(p0, &q)
                    };
                    a_inv.compose(&g).log()
                };
                col.push(shifted(h).sub(&shifted(-h)).scale(0.5 / h));
            }
        }
        out
    }

    /// Maps a group covector, left-trivialized at `W A(p0, p1)`, to the shape
    /// covector `s -> <covector, A^-1 dA/dp_slot^s>`. `slot` is 1 or 2.
    pub fn hat_l_contraction(
        &self,
        slot: usize,
        p0: &[f64],
        p1: &[f64],
        covector: &CoalgebraVector,
    ) -> Result<ShapeCovector> {
        if !(1..=2).contains(&slot) {
            return Err(Error::SlotOutOfRange { slot, max: 2 });
        }
        if self.trivial {
            return Ok(DVector::zeros(self.r));
        }
        let cols = &self.partials(p0, p1)[slot - 1];
        Ok(DVector::from_iterator(
            self.r,
            cols.iter().map(|c| pairing(covector, c)),
        ))
    }
}

/// Identity-valued connection of a trivial bundle.
pub fn trivial_connection(r: usize, tag: GroupTag) -> LocalDiscreteConnection {
    LocalDiscreteConnection {
        r,
        tag,
        trivial: true,
        eval: Arc::new(move |_, _| GroupElement::identity(tag)),
        partials: None,
    }
}

/// Connection of the two-body planar system: a pure rotation by
/// `I2 / (I1 + I2) * (psi1 - psi0)` counter-clockwise, no translation.
///
/// Because `e3` turns clockwise, the left-trivialized partials are
/// `D1A = +c e3` and `D2A = -c e3` with `c = I2 / (I1 + I2)`.
pub fn beanie_connection(i1: f64, i2: f64) -> Result<LocalDiscreteConnection> {
    if !(i1 > 0.0 && i2 > 0.0 && i1.is_finite() && i2.is_finite()) {
        return Err(Error::Parameter(format!(
            "inertias must be positive, got I1={i1}, I2={i2}"
        )));
    }
    let c = i2 / (i1 + i2);
    let e3 = AlgebraVector::basis(GroupTag::Se2, 2);
    let partials: Partials = Arc::new(move |_, _| [vec![e3.scale(c)], vec![e3.scale(-c)]]);
    Ok(LocalDiscreteConnection::new(
        1,
        GroupTag::Se2,
        move |p0, p1| GroupElement::se2(c * (p1[0] - p0[0]), 0.0, 0.0),
        Some(partials),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::left_trivialized_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn trivial_connection_is_identity_with_zero_contraction() {
        let conn = trivial_connection(3, GroupTag::So2);
        assert_eq!(
            conn.eval_a(&[1.0, 2.0, 3.0], &[0.0, -1.0, 5.0]),
            GroupElement::identity(GroupTag::So2)
        );
        let mu = CoalgebraVector::new(GroupTag::So2, &[2.5]);
        for slot in 1..=2 {
            let s = conn.hat_l_contraction(slot, &[0.0; 3], &[1.0; 3], &mu).unwrap();
            assert_eq!(s, DVector::zeros(3));
        }
    }

    #[test]
    fn contraction_rejects_bad_slot() {
        let conn = trivial_connection(1, GroupTag::Se2);
        let mu = CoalgebraVector::zero(GroupTag::Se2);
        assert!(matches!(
            conn.hat_l_contraction(3, &[0.0], &[0.0], &mu),
            Err(Error::SlotOutOfRange { slot: 3, .. })
        ));
    }

    #[test]
    fn beanie_rotation_angles() {
        let conn = beanie_connection(1.0, 1.0).unwrap();
        assert_eq!(conn.eval_a(&[0.3], &[0.3]), GroupElement::identity(GroupTag::Se2));
        let a = conn.eval_a(&[0.0], &[PI]);
        assert!((a.angle() - PI / 2.0).abs() < 1e-15);
        assert_eq!(a.translation().norm(), 0.0);
        let b = conn.eval_a(&[1.0], &[1.4]);
        assert!((b.angle() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn beanie_rejects_nonpositive_inertia() {
        assert!(beanie_connection(0.0, 1.0).is_err());
        assert!(beanie_connection(1.0, -2.0).is_err());
    }

    #[test]
    fn beanie_partials_match_finite_differences() {
        let conn = beanie_connection(1.3, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p0 = [rng.random_range(-2.0..2.0)];
            let p1 = [rng.random_range(-2.0..2.0)];
            let an = conn.partials(&p0, &p1);
            let fd = conn.fd_partials(&p0, &p1);
            for slot in 0..2 {
                assert!(an[slot][0].sub(&fd[slot][0]).norm_inf() <= 1e-8);
            }
        }
        let c = 0.7 / 2.0;
        let an = conn.partials(&[0.0], &[0.0]);
        assert!((an[0][0].get(2) - c).abs() < 1e-15);
        assert!((an[1][0].get(2) + c).abs() < 1e-15);
    }

    #[test]
    fn beanie_connection_composes_additively() {
        let conn = beanie_connection(2.0, 0.5).unwrap();
        let ab = conn.eval_a(&[0.1], &[0.9]).compose(&conn.eval_a(&[0.9], &[-0.4]));
        let direct = conn.eval_a(&[0.1], &[-0.4]);
        assert!((ab.matrix() - direct.matrix()).norm() < 1e-15);
    }

    // d/dt F(W A(p0(t), p1(t))) must equal the sum of both contractions
    // applied to the curve velocities.
    #[test]
    fn contraction_satisfies_chain_rule() {
        let conn = beanie_connection(1.1, 0.6).unwrap();
        let f = |g: &GroupElement| {
            let t = g.translation();
            (2.0 * g.angle()).sin() + t.x * t.y + 0.5 * t.x
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let w = GroupElement::se2(
                rng.random_range(-3.0..3.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let (a0, a1) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let (v0, v1) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let path = |t: f64| f(&w.compose(&conn.eval_a(&[a0 + v0 * t], &[a1 + v1 * t])));
            let dt = 1e-6;
            let fd = (path(dt) - path(-dt)) / (2.0 * dt);
            let g = w.compose(&conn.eval_a(&[a0], &[a1]));
            let grad = left_trivialized_gradient(f, &g).unwrap();
            let s1 = conn.hat_l_contraction(1, &[a0], &[a1], &grad).unwrap();
            let s2 = conn.hat_l_contraction(2, &[a0], &[a1], &grad).unwrap();
            let pred = s1[0] * v0 + s2[0] * v1;
            assert!((fd - pred).abs() <= 1e-5 * (1.0 + f(&g).abs()), "{fd} vs {pred}");
        }
    }

    #[test]
    fn user_connection_uses_fd_partials() {
        let conn = LocalDiscreteConnection::new(
            2,
            GroupTag::Se2,
            |p0, p1| GroupElement::se2(p1[0] - p0[1], 0.5 * p0[0], p1[1] * p1[1]),
            None,
        );
        let f = |g: &GroupElement| g.translation().x + g.translation().y + g.angle();
        let (p0, p1) = ([0.3, -0.2], [0.5, 0.8]);
        let g = conn.eval_a(&p0, &p1);
        let grad = left_trivialized_gradient(f, &g).unwrap();
        let s1 = conn.hat_l_contraction(1, &p0, &p1, &grad).unwrap();
        let s2 = conn.hat_l_contraction(2, &p0, &p1, &grad).unwrap();
        // Direct partial derivatives of f(A(p0, p1)).
        assert!((s1[0] - 0.5).abs() < 1e-6 && (s1[1] + 1.0).abs() < 1e-6);
        assert!((s2[0] - 1.0).abs() < 1e-6 && (s2[1] - 1.6).abs() < 1e-6);
    }
}
