//! Bound constants and the barrier-parameter calculus.
//!
//! `δ*` is the smallest decay gain for which the sufficient condition
//! `Ψ(x) ≤ δ β₂(h(x))` holds over the search region, and `γ*` the largest
//! `γ` for which the actuators can still hold `h = 0`.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::barriers::{h_value, BarrierParams};
use crate::geometry::{DirectionBounds, EtaModel, SingularityGeometry};
use crate::gp::MismatchModel;
use crate::optimize::{nelder_mead, NelderMeadOptions};
use crate::robot::{JointState, Plant, RobotParams};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TuningError {
    #[error("search region is empty: no grid state has z >= 0 and h >= {h_floor}")]
    EmptyRegion { h_floor: f64 },
    #[error("actuation check failed: u_max falls short of the required effort by {deficit}")]
    Actuation { deficit: f64 },
    #[error("grid resolution must be at least 2 points per axis, got {0}")]
    Resolution(usize),
}

/// How the norm of an `n`-vector with entries bounded by `c` is bounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormFactor {
    /// `√3 c`, as printed in the reference derivation regardless of `n`.
    Paper,
    /// `√n c`.
    Tight,
}

impl NormFactor {
    pub fn root(self, n: usize) -> f64 {
        match self {
            NormFactor::Paper => 3f64.sqrt(),
            NormFactor::Tight => (n as f64).sqrt(),
        }
    }

    pub fn square(self, n: usize) -> f64 {
        match self {
            NormFactor::Paper => 3.0,
            NormFactor::Tight => n as f64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NormFactor::Paper => "paper",
            NormFactor::Tight => "tight",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(NormFactor::Paper),
            "tight" => Some(NormFactor::Tight),
            _ => None,
        }
    }
}

impl fmt::Display for NormFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelBounds {
    pub dof: usize,
    pub q_max: f64,
    pub v_max: f64,
    pub u_max: f64,
    /// Eigenvalue range of `M(q)⁻¹` over the joint box.
    pub m_min: f64,
    pub m_max: f64,
    /// `sup ‖C(q, v)‖ / ‖v‖`.
    pub c_max: f64,
    pub g_max: f64,
    pub directions: DirectionBounds,
    pub lambda_bar: f64,
}

impl ModelBounds {
    pub fn eta_qmax(&self) -> f64 {
        self.directions.eta_qmax()
    }

    pub fn eta_max2(&self) -> f64 {
        self.directions.eta_max2()
    }

    pub fn with_lambda_bar(self, lambda_bar: f64) -> Self {
        Self { lambda_bar, ..self }
    }
}

/// Evenly spaced points on `[lo, hi]`, endpoints included.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => alloc::vec![0.5 * (lo + hi)],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Visits every point of the tensor grid `axes[0] × axes[1] × …`.
pub fn for_each_grid_point(axes: &[Vec<f64>], mut visit: impl FnMut(&[f64])) {
    if axes.iter().any(|a| a.is_empty()) {
        return;
    }
    let mut idx = alloc::vec![0usize; axes.len()];
    let mut point: Vec<f64> = axes.iter().map(|a| a[0]).collect();
    loop {
        visit(&point);
        let mut d = 0;
        loop {
            if d == axes.len() {
                return;
            }
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                point[d] = axes[d][idx[d]];
                break;
            }
            idx[d] = 0;
            point[d] = axes[d][0];
            d += 1;
        }
    }
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 2 {
        let (a, b, d) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
        let mean = 0.5 * (a + d);
        let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        return alloc::vec![mean - r, mean + r];
    }
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 2 && m.ncols() == 2 {
        let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
        let s = a * a + b * b + c * c + d * d;
        let det = a * d - b * c;
        return (0.5 * (s + (s * s - 4.0 * det * det).max(0.0).sqrt())).sqrt();
    }
    m.clone().singular_values().max()
}

/// Unit directions used to evaluate `sup_v ‖C(q, v)‖ / ‖v‖`. `C` is linear in
/// `v`, so antipodal directions are redundant.
fn velocity_directions(n: usize) -> Vec<DVector<f64>> {
    if n == 2 {
        return (0..720)
            .map(|i| {
                let th = core::f64::consts::PI * i as f64 / 720.0;
                DVector::from_column_slice(&[th.cos(), th.sin()])
            })
            .collect();
    }
    let mut dirs = Vec::new();
    let axes: Vec<Vec<f64>> = (0..n).map(|_| alloc::vec![-1.0, 0.0, 1.0]).collect();
    for_each_grid_point(&axes, |p| {
        let v = DVector::from_column_slice(p);
        if v.norm() > 0.0 {
            dirs.push(v.normalize());
        }
    });
    dirs
}

/// Grid sweep over `q ∈ [-q_max, q_max]ⁿ` of the nominal model.
pub fn compute_model_bounds(
    robot: &RobotParams,
    geom: &SingularityGeometry,
    resolution: usize,
) -> Result<ModelBounds, TuningError> {
    if resolution < 2 {
        return Err(TuningError::Resolution(resolution));
    }
    let n = robot.dof();
    let axis = linspace(-robot.q_max, robot.q_max, resolution);
    let axes: Vec<Vec<f64>> = (0..n).map(|_| axis.clone()).collect();
    let dirs = velocity_directions(n);
    let (mut m_min, mut m_max, mut c_max, mut g_max) = (f64::INFINITY, 0.0f64, 0.0f64, 0.0f64);
    for_each_grid_point(&axes, |p| {
        let q = DVector::from_column_slice(p);
        let ev = symmetric_eigenvalues(&robot.mass_matrix(&q, Plant::Nominal));
        m_max = m_max.max(1.0 / ev[0]);
        m_min = m_min.min(1.0 / ev[n - 1]);
        // C(q, v) = Σ_k v_k C(q, e_k).
        let basis: Vec<DMatrix<f64>> = (0..n)
            .map(|k| {
                let mut e = DVector::zeros(n);
                e[k] = 1.0;
                robot.coriolis_matrix(&q, &e, Plant::Nominal)
            })
            .collect();
        for v in &dirs {
            let mut c = DMatrix::zeros(n, n);
            for (k, ck) in basis.iter().enumerate() {
                c += ck * v[k];
            }
            c_max = c_max.max(spectral_norm(&c));
        }
        g_max = g_max.max(robot.gravity_vector(&q, Plant::Nominal).norm());
    });
    Ok(ModelBounds {
        dof: n,
        q_max: robot.q_max,
        v_max: robot.v_max,
        u_max: robot.u_max,
        m_min,
        m_max,
        c_max,
        g_max,
        directions: geom.direction_bounds(robot.q_max),
        lambda_bar: 0.0,
    })
}

/// `Ψ = η_q m (κ u + κ² c v² + g + ‖μ‖ + λ̄) + κ² η₂ v² + κ γ β₁' η_q v`,
/// with `κ` the norm factor.
pub fn psi(bounds: &ModelBounds, norm: NormFactor, mu_norm: f64, gamma: f64, beta1_slope: f64) -> f64 {
    let k = norm.root(bounds.dof);
    let k2 = norm.square(bounds.dof);
    let v2 = bounds.v_max * bounds.v_max;
    bounds.eta_qmax()
        * bounds.m_max
        * (k * bounds.u_max + k2 * bounds.c_max * v2 + bounds.g_max + mu_norm + bounds.lambda_bar)
        + k2 * bounds.eta_max2() * v2
        + k * gamma * beta1_slope * bounds.eta_qmax() * bounds.v_max
}

/// `ξ = κ² η₂ v² + η_q m (c' v² + g + ‖μ‖ + λ̄)`. The printed derivation
/// uses `c' = c` here (not `κ² c` as in `Ψ`); [`NormFactor::Paper`] keeps
/// that, [`NormFactor::Tight`] uses `c' = n c`.
pub fn xi(bounds: &ModelBounds, norm: NormFactor, mu_norm: f64) -> f64 {
    let k2 = norm.square(bounds.dof);
    let v2 = bounds.v_max * bounds.v_max;
    let c_factor = match norm {
        NormFactor::Paper => 1.0,
        NormFactor::Tight => k2,
    };
    k2 * bounds.eta_max2() * v2
        + bounds.eta_qmax() * bounds.m_max * (c_factor * bounds.c_max * v2 + bounds.g_max + mu_norm + bounds.lambda_bar)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuationCheck {
    pub pass: bool,
    /// `u_max − ξ / (κ η_q m)`.
    pub margin: f64,
    pub xi: f64,
}

pub fn check_actuation(bounds: &ModelBounds, norm: NormFactor, mu_max: f64) -> ActuationCheck {
    let xi = xi(bounds, norm, mu_max);
    let margin = bounds.u_max - xi / (norm.root(bounds.dof) * bounds.eta_qmax() * bounds.m_max);
    ActuationCheck { pass: margin > 0.0, margin, xi }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// Coarse grid points per state axis used to seed the local searches.
    pub per_axis: usize,
    /// Number of best grid points refined by Nelder–Mead.
    pub starts: usize,
    /// Lower limit on `h` inside the search region.
    pub h_floor: f64,
    pub nelder_mead: NelderMeadOptions,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { per_axis: 20, starts: 8, h_floor: 1e-3, nelder_mead: NelderMeadOptions::default() }
    }
}

/// Everything the parameter calculus reads.
pub struct TuningProblem<'a> {
    pub bounds: ModelBounds,
    pub geom: SingularityGeometry,
    pub params: BarrierParams,
    pub mismatch: &'a dyn MismatchModel,
    pub norm: NormFactor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extremum {
    pub value: f64,
    pub state: JointState,
    pub evaluations: usize,
}

impl TuningProblem<'_> {
    fn state_box(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.bounds.dof;
        let mut lo = alloc::vec![-self.bounds.q_max; n];
        let mut hi = alloc::vec![self.bounds.q_max; n];
        lo.extend(core::iter::repeat(-self.bounds.v_max).take(n));
        hi.extend(core::iter::repeat(self.bounds.v_max).take(n));
        (lo, hi)
    }

    /// Whether `x` lies in `{z ≥ 0, h ≥ h_floor}`.
    pub fn in_region(&self, x: &JointState, h_floor: f64) -> bool {
        self.geom.z_value(&x.q) >= 0.0 && h_value(&self.geom, &self.params, x) >= h_floor
    }

    pub fn mu_norm(&self, x: &JointState) -> f64 {
        self.mismatch.mean(x).norm()
    }

    /// `Ψ(x)` at the configured `γ`.
    pub fn psi_at(&self, x: &JointState) -> f64 {
        let slope = self.params.beta1.derivative(self.geom.z_value(&x.q));
        psi(&self.bounds, self.norm, self.mu_norm(x), self.params.gamma, slope)
    }

    /// Minimizes `objective` over the region: coarse grid, then Nelder–Mead
    /// from the best feasible grid points. `objective` returns `None` outside
    /// the region.
    fn minimize(
        &self,
        search: &SearchConfig,
        objective: &dyn Fn(&JointState) -> Option<f64>,
    ) -> Result<Extremum, TuningError> {
        if search.per_axis < 2 {
            return Err(TuningError::Resolution(search.per_axis));
        }
        let n = self.bounds.dof;
        let (lo, hi) = self.state_box();
        let axes: Vec<Vec<f64>> = lo.iter().zip(&hi).map(|(l, h)| linspace(*l, *h, search.per_axis)).collect();
        let mut evaluations = 0usize;
        let mut seeds: Vec<(f64, Vec<f64>)> = Vec::new();
        for_each_grid_point(&axes, |p| {
            evaluations += 1;
            if let Some(f) = objective(&JointState::from_stacked(p)) {
                seeds.push((f, p.to_vec()));
            }
        });
        if seeds.is_empty() {
            return Err(TuningError::EmptyRegion { h_floor: search.h_floor });
        }
        seeds.sort_by(|a, b| a.0.total_cmp(&b.0));
        seeds.truncate(search.starts.max(1));
        let counter = core::cell::Cell::new(0usize);
        let f = |p: &[f64]| {
            counter.set(counter.get() + 1);
            objective(&JointState::from_stacked(p)).unwrap_or(f64::INFINITY)
        };
        let mut best: Option<(f64, Vec<f64>)> = None;
        for (f0, x0) in seeds {
            let m = nelder_mead(&f, &x0, &lo, &hi, &search.nelder_mead);
            let (fv, xv) = if m.f <= f0 { (m.f, m.x) } else { (f0, x0) };
            if best.as_ref().map_or(true, |b| fv < b.0) {
                best = Some((fv, xv));
            }
        }
        let (value, x) = best.expect("at least one seed");
        debug_assert_eq!(x.len(), 2 * n);
        Ok(Extremum { value, state: JointState::from_stacked(&x), evaluations: evaluations + counter.get() })
    }

    /// `max ‖μ(x)‖` over the region with `h ≥ h_floor`.
    pub fn max_mean_norm(&self, search: &SearchConfig) -> Result<Extremum, TuningError> {
        let obj = |x: &JointState| self.in_region(x, search.h_floor).then(|| -self.mu_norm(x));
        let e = self.minimize(search, &obj)?;
        Ok(Extremum { value: -e.value, ..e })
    }

    /// `δ* = max Ψ(x) / β₂(h(x))` over the region.
    pub fn delta_star(&self, search: &SearchConfig) -> Result<Extremum, TuningError> {
        let obj = |x: &JointState| {
            if !self.in_region(x, search.h_floor) {
                return None;
            }
            let h = h_value(&self.geom, &self.params, x);
            let denom = self.params.beta2.eval(h);
            (denom > 0.0).then(|| -self.psi_at(x) / denom)
        };
        let e = self.minimize(search, &obj)?;
        Ok(Extremum { value: -e.value, ..e })
    }

    /// `γ* = min (κ η_q m u_max − ξ(x)) / (κ β₁'(z) η_q v_max)` over the
    /// region. Fails when the actuation check fails at the largest `‖μ‖`.
    pub fn gamma_star(&self, search: &SearchConfig) -> Result<Extremum, TuningError> {
        let mu = self.max_mean_norm(search)?;
        let check = check_actuation(&self.bounds, self.norm, mu.value);
        if !check.pass {
            return Err(TuningError::Actuation { deficit: -check.margin });
        }
        let b = &self.bounds;
        let k = self.norm.root(b.dof);
        let obj = |x: &JointState| {
            if !self.in_region(x, search.h_floor) {
                return None;
            }
            let slope = self.params.beta1.derivative(self.geom.z_value(&x.q));
            let num = k * b.eta_qmax() * b.m_max * b.u_max - xi(b, self.norm, self.mu_norm(x));
            let den = k * slope * b.eta_qmax() * b.v_max;
            Some(if den > 0.0 { num / den } else { f64::INFINITY })
        };
        self.minimize(search, &obj)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBoundReport {
    pub samples: usize,
    pub eta_qmax: f64,
    pub eta_max2: f64,
    pub worst_grad: f64,
    pub worst_hess: f64,
    /// Samples where `‖Γ‖ > η_qmax` or `‖H‖ > η_max2`.
    pub violations: usize,
    /// Samples where either bound is attained with equality.
    pub ties: usize,
}

impl DerivativeBoundReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn grad_ratio(&self) -> f64 {
        self.worst_grad / self.eta_qmax
    }

    pub fn hess_ratio(&self) -> f64 {
        self.worst_hess / self.eta_max2
    }
}

/// Checks `‖∂η/∂q‖ ≤ 3(f_q + g_q)` and `‖∂²η/∂q²‖ ≤ 3(f_q² + 2 f_q g_q + g_q²)`
/// (spectral norm) at every sample.
pub fn verify_derivative_bounds<E: EtaModel + ?Sized>(
    model: &E,
    bounds: &DirectionBounds,
    samples: &[DVector<f64>],
) -> DerivativeBoundReport {
    let (eq, e2) = (bounds.eta_qmax(), bounds.eta_max2());
    let mut report = DerivativeBoundReport {
        samples: samples.len(),
        eta_qmax: eq,
        eta_max2: e2,
        worst_grad: 0.0,
        worst_hess: 0.0,
        violations: 0,
        ties: 0,
    };
    for q in samples {
        let g = model.grad_eta(q).norm();
        let h = spectral_norm(&model.hess_eta(q));
        report.worst_grad = report.worst_grad.max(g);
        report.worst_hess = report.worst_hess.max(h);
        if !(g <= eq && h <= e2) {
            report.violations += 1;
        } else if g == eq || h == e2 {
            report.ties += 1;
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDifferenceReport {
    pub samples: usize,
    /// Largest `|analytic − fd| / max(1, |analytic|)` over gradient entries.
    pub grad_error: f64,
    /// Same for Hessian entries (differences of the analytic gradient).
    pub hess_error: f64,
}

/// Central-difference comparison of the analytic `Γ` and Hessian.
pub fn finite_difference_check<E: EtaModel + ?Sized>(model: &E, samples: &[DVector<f64>]) -> FiniteDifferenceReport {
    let mut report = FiniteDifferenceReport { samples: samples.len(), grad_error: 0.0, hess_error: 0.0 };
    let (hg, hh) = (1e-5, 1e-5);
    for q in samples {
        let n = q.len();
        let grad = model.grad_eta(q);
        let hess = model.hess_eta(q);
        for j in 0..n {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[j] += hg;
            qm[j] -= hg;
            let fd = (model.eta(&qp) - model.eta(&qm)) / (2.0 * hg);
            report.grad_error = report.grad_error.max((grad[j] - fd).abs() / grad[j].abs().max(1.0));
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[j] += hh;
            qm[j] -= hh;
            let col = (model.grad_eta(&qp) - model.grad_eta(&qm)) / (2.0 * hh);
            for i in 0..n {
                let err = (hess[(i, j)] - col[i]).abs() / hess[(i, j)].abs().max(1.0);
                report.hess_error = report.hess_error.max(err);
            }
        }
    }
    report
}
