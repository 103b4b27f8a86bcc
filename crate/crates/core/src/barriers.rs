//! Barrier functions and the robust CBF rows they induce.
//!
//! Every condition is returned as a [`ConstraintRow`] `aᵀu ≤ b`, linear in
//! the torque `u`. All model terms come from the nominal robot; the learned
//! mismatch enters through its mean `μ(x)` and the uniform margin `λ̄`.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
#[allow(unused_imports)]
use num_traits::Float;

use crate::geometry::{EtaModel, SingularityGeometry};
use crate::gp::MismatchModel;
use crate::robot::{JointState, ModelError, Plant, RobotParams};

/// Rows whose coefficient vector is shorter than this cannot constrain `u`.
pub const DEGENERATE_ROW_NORM: f64 = 1e-12;

/// Extended class-𝒦 functions used by the barriers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassK {
    /// `s`
    Linear,
    /// `s³`
    Cubic,
    /// `atan(s)`
    Arctan,
}

impl ClassK {
    pub fn eval(self, s: f64) -> f64 {
        match self {
            ClassK::Linear => s,
            ClassK::Cubic => s * s * s,
            ClassK::Arctan => s.atan(),
        }
    }

    pub fn derivative(self, s: f64) -> f64 {
        match self {
            ClassK::Linear => 1.0,
            ClassK::Cubic => 3.0 * s * s,
            ClassK::Arctan => 1.0 / (1.0 + s * s),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassK::Linear => "linear",
            ClassK::Cubic => "cubic",
            ClassK::Arctan => "arctan",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "linear" => Some(ClassK::Linear),
            "cubic" => Some(ClassK::Cubic),
            "arctan" => Some(ClassK::Arctan),
            _ => None,
        }
    }
}

impl fmt::Display for ClassK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierParams {
    /// Gain inside `h = ż + γ β₁(z)`.
    pub gamma: f64,
    /// Decay gain of the singularity condition `ḣ ≥ −δ β₂(h)`.
    pub delta: f64,
    /// Decay gain of the velocity conditions.
    pub k: f64,
    pub beta1: ClassK,
    pub beta2: ClassK,
    pub beta3: ClassK,
}

impl BarrierParams {
    /// `γ = 29`, `δ = 10⁵`, `k = 20`, `β₁ = z`, `β₂ = h³`, `β₃ = atan`.
    pub fn reference() -> Self {
        Self {
            gamma: 29.0,
            delta: 1e5,
            k: 20.0,
            beta1: ClassK::Linear,
            beta2: ClassK::Cubic,
            beta3: ClassK::Arctan,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.gamma, self.delta, self.k].iter().all(|x| *x > 0.0 && x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RowTag {
    Singularity,
    VelUpper(usize),
    VelLower(usize),
}

impl fmt::Display for RowTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowTag::Singularity => f.write_str("singularity"),
            RowTag::VelUpper(i) => write!(f, "vel_upper_{}", i + 1),
            RowTag::VelLower(i) => write!(f, "vel_lower_{}", i + 1),
        }
    }
}

/// `aᵀu ≤ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub a: DVector<f64>,
    pub b: f64,
    pub tag: RowTag,
}

impl ConstraintRow {
    /// `b − aᵀu`; non-negative when the row holds.
    pub fn margin(&self, u: &DVector<f64>) -> f64 {
        self.b - self.a.dot(u)
    }

    pub fn is_finite(&self) -> bool {
        self.b.is_finite() && self.a.iter().all(|x| x.is_finite())
    }
}

/// `h(x) = ż + γ β₁(z)` with `ż = −Γᵀv`.
pub fn h_value(geom: &SingularityGeometry, params: &BarrierParams, x: &JointState) -> f64 {
    geom.z_rate(&x.q, &x.v) + params.gamma * params.beta1.eval(geom.z_value(&x.q))
}

/// Analytic `ḣ` for a given joint acceleration:
/// `−vᵀ(∂²η/∂q²)v − Γᵀq̈ − γ β₁'(z) Γᵀv`.
pub fn h_rate(geom: &SingularityGeometry, params: &BarrierParams, x: &JointState, qdd: &DVector<f64>) -> f64 {
    let grad = geom.grad_eta(&x.q);
    let hess = geom.hess_eta(&x.q);
    let slope = params.beta1.derivative(geom.z_value(&x.q));
    -x.v.dot(&(hess * &x.v)) - grad.dot(qdd) - params.gamma * slope * grad.dot(&x.v)
}

/// `(v_max − vᵢ, vᵢ − v_min)` per joint, with `v_min = −v_max`.
pub fn velocity_barriers(v_max: f64, v: &DVector<f64>) -> Vec<(f64, f64)> {
    v.iter().map(|vi| (v_max - vi, vi + v_max)).collect()
}

/// Outcome of assembling the singularity row.
#[derive(Debug, Clone, PartialEq)]
pub enum SingularityRow {
    Row(ConstraintRow),
    /// `Γ ≈ 0` and the residual `0 ≤ b` holds: nothing to enforce.
    Dropped { b: f64 },
    /// `Γ ≈ 0` and `0 ≤ b` fails: no torque can satisfy the condition.
    Violated { b: f64 },
}

impl SingularityRow {
    pub fn row(&self) -> Option<&ConstraintRow> {
        match self {
            SingularityRow::Row(r) => Some(r),
            _ => None,
        }
    }
}

/// State-dependent nominal-model quantities shared by all rows at one state.
pub struct RowContext {
    mass: Cholesky<f64, Dyn>,
    /// `C v + G + μ`.
    pub drift: DVector<f64>,
    /// Uniform mismatch margin `λ̄`.
    pub lambda_bar: f64,
}

impl RowContext {
    pub fn new(
        robot: &RobotParams,
        mismatch: &dyn MismatchModel,
        lambda_bar: f64,
        x: &JointState,
    ) -> Result<Self, ModelError> {
        let m = robot.mass_matrix(&x.q, Plant::Nominal);
        let mass = Cholesky::new(m).ok_or_else(|| ModelError::IndefiniteMass {
            q: x.q.iter().copied().collect(),
        })?;
        let drift = robot.coriolis_matrix(&x.q, &x.v, Plant::Nominal) * &x.v
            + robot.gravity_vector(&x.q, Plant::Nominal)
            + mismatch.mean(x);
        Ok(Self { mass, drift, lambda_bar })
    }

    /// `M⁻¹ w` for the nominal inertia.
    pub fn solve(&self, w: &DVector<f64>) -> DVector<f64> {
        self.mass.solve(w)
    }

    pub fn inverse_mass(&self) -> DMatrix<f64> {
        self.mass.inverse()
    }
}

/// Robust singularity condition rearranged to `aᵀu ≤ b` with `a = M⁻¹Γ`:
///
/// `b = aᵀ(Cv + G + μ) − γ β₁'(z) Γᵀv − vᵀ(∂²η/∂q²)v + δ β₂(h) − ‖a‖ λ̄`.
pub fn singularity_row(
    geom: &SingularityGeometry,
    params: &BarrierParams,
    ctx: &RowContext,
    x: &JointState,
) -> SingularityRow {
    let grad = geom.grad_eta(&x.q);
    let hess = geom.hess_eta(&x.q);
    let z = geom.z_value(&x.q);
    let h = h_value(geom, params, x);
    let a = ctx.solve(&grad);
    let grad_v = grad.dot(&x.v);
    let vhv = x.v.dot(&(hess * &x.v));
    let mut b = a.dot(&ctx.drift) - params.gamma * params.beta1.derivative(z) * grad_v - vhv
        + params.delta * params.beta2.eval(h);
    b -= a.norm() * ctx.lambda_bar;
    if a.norm() < DEGENERATE_ROW_NORM {
        if b >= 0.0 {
            SingularityRow::Dropped { b }
        } else {
            SingularityRow::Violated { b }
        }
    } else {
        SingularityRow::Row(ConstraintRow { a, b, tag: RowTag::Singularity })
    }
}

/// Robust velocity conditions, two rows per joint:
///
/// `eᵢᵀM⁻¹(u − Cv − G − μ) ≤ k β₃(v_max − vᵢ) − ‖eᵢᵀM⁻¹‖ λ̄` and
/// `eᵢᵀM⁻¹(u − Cv − G − μ) ≥ −k β₃(vᵢ − v_min) + ‖eᵢᵀM⁻¹‖ λ̄`.
pub fn velocity_rows(params: &BarrierParams, v_max: f64, ctx: &RowContext, x: &JointState) -> Vec<ConstraintRow> {
    let n = x.dof();
    let inv = ctx.inverse_mass();
    let barriers = velocity_barriers(v_max, &x.v);
    let mut rows = Vec::with_capacity(2 * n);
    for (i, (upper, lower)) in barriers.into_iter().enumerate() {
        let a: DVector<f64> = inv.row(i).transpose();
        let nominal = a.dot(&ctx.drift);
        let margin = a.norm() * ctx.lambda_bar;
        rows.push(ConstraintRow {
            b: nominal + params.k * params.beta3.eval(upper) - margin,
            a: a.clone(),
            tag: RowTag::VelUpper(i),
        });
        rows.push(ConstraintRow {
            b: -nominal + params.k * params.beta3.eval(lower) - margin,
            a: -a,
            tag: RowTag::VelLower(i),
        });
    }
    rows
}
