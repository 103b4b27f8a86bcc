//! Singularity measure of a two-link arm and its derivatives.
//!
//! The arm is singular when the unit direction vectors `f(q)` (link 1) and
//! `g(q)` (link 2) are parallel. With `η(q) = fᵀg` the measure is
//! `z(q) = 1 − ε − η(q)`, and the safe configurations are `z ≥ 0`.
//!
//! Sign convention used everywhere in the crate: `Γ = ∂η/∂q` and
//! `ż = −Γᵀ v`.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3x2, Vector3};
#[allow(unused_imports)]
use num_traits::Float;

/// Evaluates `η`, its gradient and its Hessian. Implemented by
/// [`SingularityGeometry`]; validation routines take the trait so that they
/// can be exercised against deliberately broken derivatives.
pub trait EtaModel {
    fn eta(&self, q: &DVector<f64>) -> f64;
    fn grad_eta(&self, q: &DVector<f64>) -> DVector<f64>;
    fn hess_eta(&self, q: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularityGeometry {
    /// Offset of link 2 relative to link 1, rad.
    pub q_ini: f64,
    /// Safety threshold, `0 < ε < 1`.
    pub epsilon: f64,
}

/// Direction vectors with first and second derivatives.
///
/// `jac_*` rows are components, columns are joints; `hess_*[i]` is the
/// Hessian of component `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionDerivatives {
    pub f: Vector3<f64>,
    pub g: Vector3<f64>,
    pub jac_f: Matrix3x2<f64>,
    pub jac_g: Matrix3x2<f64>,
    pub hess_f: [Matrix2<f64>; 3],
    pub hess_g: [Matrix2<f64>; 3],
}

/// Per-component suprema of the direction-vector derivatives over a joint box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionBounds {
    pub f_q: f64,
    pub g_q: f64,
    pub f_q2: f64,
    pub g_q2: f64,
}

impl DirectionBounds {
    /// Bound on `‖∂η/∂q‖`: `3(f_q + g_q)`.
    pub fn eta_qmax(&self) -> f64 {
        3.0 * (self.f_q + self.g_q)
    }

    /// Bound on `‖∂²η/∂q²‖`: `3(f_q² + 2 f_q g_q + g_q²)`.
    pub fn eta_max2(&self) -> f64 {
        3.0 * (self.f_q2 + 2.0 * self.f_q * self.g_q + self.g_q2)
    }
}

impl Default for SingularityGeometry {
    fn default() -> Self {
        Self { q_ini: core::f64::consts::PI / 12.0, epsilon: 0.05 }
    }
}

fn check_two_link(q: &DVector<f64>) {
    assert_eq!(q.len(), 2, "singularity geometry is defined for two joints");
}

impl SingularityGeometry {
    pub fn new(q_ini: f64, epsilon: f64) -> Self {
        Self { q_ini, epsilon }
    }

    pub fn is_valid(&self) -> bool {
        self.epsilon > 0.0 && self.epsilon < 1.0 && self.q_ini.is_finite()
    }

    /// Absolute angle of link 2.
    fn theta(&self, q: &DVector<f64>) -> f64 {
        q[0] + q[1] + self.q_ini
    }

    /// `f = [cos q1, sin q1, 0]`, `g = [cos q12, sin q12, 0]`.
    pub fn direction_vectors(&self, q: &DVector<f64>) -> (Vector3<f64>, Vector3<f64>) {
        check_two_link(q);
        let th = self.theta(q);
        (
            Vector3::new(q[0].cos(), q[0].sin(), 0.0),
            Vector3::new(th.cos(), th.sin(), 0.0),
        )
    }

    pub fn direction_derivatives(&self, q: &DVector<f64>) -> DirectionDerivatives {
        let (f, g) = self.direction_vectors(q);
        let (s1, c1) = q[0].sin_cos();
        let (st, ct) = self.theta(q).sin_cos();
        let jac_f = Matrix3x2::new(-s1, 0.0, c1, 0.0, 0.0, 0.0);
        let jac_g = Matrix3x2::new(-st, -st, ct, ct, 0.0, 0.0);
        let hess_f = [
            Matrix2::new(-c1, 0.0, 0.0, 0.0),
            Matrix2::new(-s1, 0.0, 0.0, 0.0),
            Matrix2::zeros(),
        ];
        let ones = Matrix2::from_element(1.0);
        let hess_g = [ones * -ct, ones * -st, Matrix2::zeros()];
        DirectionDerivatives { f, g, jac_f, jac_g, hess_f, hess_g }
    }

    pub fn z_value(&self, q: &DVector<f64>) -> f64 {
        1.0 - self.epsilon - self.eta(q)
    }

    /// `ż = −Γᵀv`.
    pub fn z_rate(&self, q: &DVector<f64>, v: &DVector<f64>) -> f64 {
        -self.grad_eta(q).dot(v)
    }

    /// Closed-form suprema of the direction-vector derivatives over
    /// `q ∈ [-q_max, q_max]²`.
    pub fn direction_bounds(&self, q_max: f64) -> DirectionBounds {
        let (s1, c1) = (sup_abs_sin(-q_max, q_max), sup_abs_cos(-q_max, q_max));
        let lo = -2.0 * q_max + self.q_ini;
        let hi = 2.0 * q_max + self.q_ini;
        let (st, ct) = (sup_abs_sin(lo, hi), sup_abs_cos(lo, hi));
        let sqrt2 = core::f64::consts::SQRT_2;
        DirectionBounds {
            f_q: s1.max(c1),
            g_q: sqrt2 * st.max(ct),
            f_q2: s1.max(c1),
            g_q2: 2.0 * st.max(ct),
        }
    }
}

impl EtaModel for SingularityGeometry {
    fn eta(&self, q: &DVector<f64>) -> f64 {
        let (f, g) = self.direction_vectors(q);
        f.dot(&g)
    }

    /// `Σᵢ (∂fᵢ/∂q) gᵢ + fᵢ (∂gᵢ/∂q)`.
    fn grad_eta(&self, q: &DVector<f64>) -> DVector<f64> {
        let d = self.direction_derivatives(q);
        let grad = d.jac_f.transpose() * d.g + d.jac_g.transpose() * d.f;
        DVector::from_column_slice(grad.as_slice())
    }

    /// `Σᵢ (∂²fᵢ) gᵢ + ∂fᵢ ∂gᵢᵀ + ∂gᵢ ∂fᵢᵀ + fᵢ (∂²gᵢ)`.
    fn hess_eta(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let d = self.direction_derivatives(q);
        let mut h = Matrix2::zeros();
        for i in 0..3 {
            let df = d.jac_f.row(i).transpose();
            let dg = d.jac_g.row(i).transpose();
            h += d.hess_f[i] * d.g[i] + df * dg.transpose() + dg * df.transpose() + d.hess_g[i] * d.f[i];
        }
        DMatrix::from_column_slice(2, 2, h.as_slice())
    }
}

/// `sup |sin t|` for `t ∈ [lo, hi]`.
pub fn sup_abs_sin(lo: f64, hi: f64) -> f64 {
    sup_abs_cos(lo - core::f64::consts::FRAC_PI_2, hi - core::f64::consts::FRAC_PI_2)
}

/// `sup |cos t|` for `t ∈ [lo, hi]`.
pub fn sup_abs_cos(lo: f64, hi: f64) -> f64 {
    use core::f64::consts::PI;
    debug_assert!(lo <= hi);
    // |cos| peaks at multiples of π.
    if (hi / PI).floor() >= (lo / PI).ceil() {
        return 1.0;
    }
    lo.cos().abs().max(hi.cos().abs())
}
