//! Gaussian-process regression of the model mismatch with a deterministic
//! prediction-error bound.
//!
//! Each output dimension `i` gets an independent zero-mean GP with a
//! squared-exponential kernel. For a known RKHS-norm bound `B_i` on the
//! mismatch, `‖μ(x) − d(x)‖ ≤ λ(x) = sqrt(Σᵢ (B_i² − ω_i + M) σ_i²(x))`,
//! where `ω_i = yᵢᵀ (K + σ_v² I)⁻¹ yᵢ`. Because the kernel is stationary the
//! bound is capped uniformly by `λ̄ = sqrt(Σᵢ (B_i² − ω_i + M) sf_i²)`.

use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::robot::{JointState, ModelError, Plant, RobotParams};

/// Jitter ladder tried when factorizing the Gram matrix.
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("empty dataset")]
    Empty,
    #[error("row {row}: {reason}")]
    BadRow { row: usize, reason: &'static str },
    #[error("noise variance must be positive, got {0}")]
    NoiseVariance(f64),
    #[error("kernel hyperparameters must be positive (sf = {sf}, el = {el})")]
    Kernel { sf: f64, el: f64 },
    #[error("expected {expected} per-dimension values, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("Gram matrix of output {dim} is not positive definite even with jitter 1e-6 (duplicate inputs with inconsistent targets?)")]
    IllConditioned { dim: usize },
    #[error(
        "RKHS bound too small for output {dim}: B² − ω + M = {radicand:.6e} ≤ 0 \
         (B = {b}, ω = {omega:.6e}, M = {m}); raise B above sqrt(ω − M)"
    )]
    RkhsBoundTooSmall { dim: usize, b: f64, omega: f64, m: usize, radicand: f64 },
    #[error("requested {requested} samples from a log of {available}")]
    Subsample { requested: usize, available: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Squared-exponential kernel `sf² exp(−‖a − b‖² / (2 el²))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub sf: f64,
    pub el: f64,
}

impl KernelParams {
    pub fn new(sf: f64, el: f64) -> Self {
        Self { sf, el }
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if self.sf > 0.0 && self.el > 0.0 && self.sf.is_finite() && self.el.is_finite() {
            Ok(())
        } else {
            Err(GpError::Kernel { sf: self.sf, el: self.el })
        }
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.sf * self.sf * (-0.5 * d2 / (self.el * self.el)).exp()
    }

    /// `max_x k(x, x)`; exact for a stationary kernel.
    pub fn prior_variance(&self) -> f64 {
        self.sf * self.sf
    }

    pub fn gram(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let m = points.ncols();
        let mut k = DMatrix::zeros(m, m);
        for j in 0..m {
            for i in j..m {
                let v = self.eval(points.column(i).as_slice(), points.column(j).as_slice());
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}

/// One logged time step: state, true acceleration and applied torque.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample {
    pub t: f64,
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub qdd: DVector<f64>,
    pub u: DVector<f64>,
}

impl ResidualSample {
    pub fn state(&self) -> JointState {
        JointState::new(self.q.clone(), self.v.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub sample: ResidualSample,
    /// `Y = u − M q̈ − C v − G` against the nominal model.
    pub residual: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Vec<DatasetRow>,
    pub noise_variance: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Output dimension `n`.
    pub fn dof(&self) -> usize {
        self.rows.first().map_or(0, |r| r.residual.len())
    }

    /// Regression inputs as columns of a `2n × M` matrix.
    pub fn input_matrix(&self) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self.rows.iter().map(|r| r.sample.state().stacked()).collect();
        DMatrix::from_columns(&cols)
    }

    pub fn targets(&self, dim: usize) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.rows.iter().map(|r| r.residual[dim]))
    }

    /// `m` rows drawn uniformly without replacement, kept in log order.
    pub fn subsample(&self, m: usize, seed: u64) -> Result<Dataset, GpError> {
        if m > self.len() || m == 0 {
            return Err(GpError::Subsample { requested: m, available: self.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, self.len(), m).into_vec();
        picked.sort_unstable();
        Ok(Dataset {
            rows: picked.into_iter().map(|i| self.rows[i].clone()).collect(),
            noise_variance: self.noise_variance,
        })
    }
}

/// Turns a trajectory log into regression targets against the nominal model.
pub fn collect_residuals(
    log: &[ResidualSample],
    nominal: &RobotParams,
    noise_variance: f64,
) -> Result<Dataset, GpError> {
    if !(noise_variance > 0.0) {
        return Err(GpError::NoiseVariance(noise_variance));
    }
    let n = nominal.dof();
    let mut rows = Vec::with_capacity(log.len());
    let mut last_t = f64::NEG_INFINITY;
    for (row, s) in log.iter().enumerate() {
        if s.q.len() != n || s.v.len() != n || s.qdd.len() != n || s.u.len() != n {
            return Err(GpError::BadRow { row, reason: "column count does not match robot dof" });
        }
        let finite = s.t.is_finite()
            && [&s.q, &s.v, &s.qdd, &s.u].iter().all(|c| c.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(GpError::BadRow { row, reason: "non-finite value" });
        }
        if s.t <= last_t {
            return Err(GpError::BadRow { row, reason: "time stamps not strictly increasing" });
        }
        last_t = s.t;
        let residual = &s.u
            - nominal.mass_matrix(&s.q, Plant::Nominal) * &s.qdd
            - nominal.coriolis_matrix(&s.q, &s.v, Plant::Nominal) * &s.v
            - nominal.gravity_vector(&s.q, Plant::Nominal);
        rows.push(DatasetRow { sample: s.clone(), residual });
    }
    if rows.is_empty() {
        return Err(GpError::Empty);
    }
    Ok(Dataset { rows, noise_variance })
}

/// Factorization of `K + (σ_v² + jitter) I`.
fn factorize(
    kernel: &KernelParams,
    points: &DMatrix<f64>,
    noise_variance: f64,
    dim: usize,
) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    let gram = kernel.gram(points);
    let m = points.ncols();
    for &jitter in &JITTER_LADDER {
        let mut a = gram.clone();
        for i in 0..m {
            a[(i, i)] += noise_variance + jitter;
        }
        if let Some(chol) = Cholesky::new(a) {
            if jitter > 0.0 {
                log::warn!("GP output {dim}: Gram matrix needed jitter {jitter:e}");
            }
            return Ok((chol, jitter));
        }
    }
    Err(GpError::IllConditioned { dim })
}

/// Fitted regressor for one output dimension.
#[derive(Debug, Clone)]
pub struct OutputModel {
    pub kernel: KernelParams,
    /// Lower Cholesky factor of `K + (σ_v² + jitter) I`.
    pub factor: DMatrix<f64>,
    /// `(K + σ_v² I)⁻¹ y`.
    pub alpha: DVector<f64>,
    /// `yᵀ (K + σ_v² I)⁻¹ y`.
    pub omega: f64,
    /// RKHS-norm bound `B_i`.
    pub rkhs_bound: f64,
    pub jitter: f64,
}

impl OutputModel {
    /// `B² − ω + M`, the weight of this dimension's variance in `λ(x)`.
    pub fn bound_weight(&self, m: usize) -> f64 {
        self.rkhs_bound * self.rkhs_bound - self.omega + m as f64
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    /// Training inputs as columns (`2n × M`).
    pub points: DMatrix<f64>,
    pub noise_variance: f64,
    pub outputs: Vec<OutputModel>,
    lambda_bar: f64,
}

impl GpModel {
    /// Fits one GP per output dimension. `kernels` and `rkhs_bounds` hold one
    /// entry per output.
    pub fn fit(dataset: &Dataset, kernels: &[KernelParams], rkhs_bounds: &[f64]) -> Result<Self, GpError> {
        if dataset.is_empty() {
            return Err(GpError::Empty);
        }
        if !(dataset.noise_variance > 0.0) {
            return Err(GpError::NoiseVariance(dataset.noise_variance));
        }
        let n = dataset.dof();
        if kernels.len() != n {
            return Err(GpError::Arity { expected: n, got: kernels.len() });
        }
        if rkhs_bounds.len() != n {
            return Err(GpError::Arity { expected: n, got: rkhs_bounds.len() });
        }
        let points = dataset.input_matrix();
        let mut outputs = Vec::with_capacity(n);
        for dim in 0..n {
            kernels[dim].validate()?;
            let (chol, jitter) = factorize(&kernels[dim], &points, dataset.noise_variance, dim)?;
            let y = dataset.targets(dim);
            let alpha = chol.solve(&y);
            let omega = y.dot(&alpha);
            outputs.push(OutputModel {
                kernel: kernels[dim],
                factor: chol.unpack(),
                alpha,
                omega,
                rkhs_bound: rkhs_bounds[dim],
                jitter,
            });
        }
        Self::from_parts(points, dataset.noise_variance, outputs)
    }

    /// Reassembles a model from stored parts, re-checking the bound guard.
    pub fn from_parts(
        points: DMatrix<f64>,
        noise_variance: f64,
        outputs: Vec<OutputModel>,
    ) -> Result<Self, GpError> {
        let mut model = Self { points, noise_variance, outputs, lambda_bar: 0.0 };
        model.lambda_bar = model.uniform_bound()?;
        Ok(model)
    }

    /// Rebuilds the factorizations from inputs and hyperparameters (used when
    /// loading a model that stores only `X`, `α`, `ω` and `B`).
    pub fn refactorize(
        points: DMatrix<f64>,
        noise_variance: f64,
        kernels: &[KernelParams],
        alphas: Vec<DVector<f64>>,
        omegas: &[f64],
        rkhs_bounds: &[f64],
    ) -> Result<Self, GpError> {
        let n = kernels.len();
        if alphas.len() != n || omegas.len() != n || rkhs_bounds.len() != n {
            return Err(GpError::Arity { expected: n, got: alphas.len().min(omegas.len()).min(rkhs_bounds.len()) });
        }
        let mut outputs = Vec::with_capacity(n);
        for (dim, alpha) in alphas.into_iter().enumerate() {
            kernels[dim].validate()?;
            let (chol, jitter) = factorize(&kernels[dim], &points, noise_variance, dim)?;
            outputs.push(OutputModel {
                kernel: kernels[dim],
                factor: chol.unpack(),
                alpha,
                omega: omegas[dim],
                rkhs_bound: rkhs_bounds[dim],
                jitter,
            });
        }
        Self::from_parts(points, noise_variance, outputs)
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    pub fn dof(&self) -> usize {
        self.outputs.len()
    }

    fn kernel_vector(&self, kernel: &KernelParams, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.points.column_iter().map(|c| kernel.eval(c.as_slice(), x)),
        )
    }

    /// Posterior mean only (cheaper than [`Self::predict`]).
    pub fn mean(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.dof(),
            self.outputs.iter().map(|out| self.kernel_vector(&out.kernel, x).dot(&out.alpha)),
        )
    }

    /// Posterior mean and variance per output dimension. Variances are
    /// clamped at zero against round-off.
    pub fn predict(&self, x: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let n = self.dof();
        let mut mu = DVector::zeros(n);
        let mut var = DVector::zeros(n);
        for (i, out) in self.outputs.iter().enumerate() {
            let k = self.kernel_vector(&out.kernel, x);
            mu[i] = k.dot(&out.alpha);
            let w = out
                .factor
                .solve_lower_triangular(&k)
                .expect("Cholesky factor has a positive diagonal");
            let raw = out.kernel.eval(x, x) - w.norm_squared();
            if raw < 0.0 {
                log::debug!("GP output {i}: clamped posterior variance {raw:e} to zero");
            }
            var[i] = raw.max(0.0);
        }
        (mu, var)
    }

    fn weights(&self) -> Result<Vec<f64>, GpError> {
        let m = self.len();
        self.outputs
            .iter()
            .enumerate()
            .map(|(dim, out)| {
                let radicand = out.bound_weight(m);
                if radicand > 0.0 && radicand.is_finite() {
                    Ok(radicand)
                } else {
                    Err(GpError::RkhsBoundTooSmall { dim, b: out.rkhs_bound, omega: out.omega, m, radicand })
                }
            })
            .collect()
    }

    /// State-dependent error bound `λ(x)`.
    pub fn error_bound(&self, x: &[f64]) -> Result<f64, GpError> {
        let weights = self.weights()?;
        let (_, var) = self.predict(x);
        Ok(weights.iter().zip(var.iter()).map(|(w, s2)| w * s2).sum::<f64>().sqrt())
    }

    /// State-independent cap `λ̄`; the stationary kernel attains
    /// `max k(x, x) = sf²` everywhere, so no search over the state box is needed.
    pub fn uniform_bound(&self) -> Result<f64, GpError> {
        let weights = self.weights()?;
        Ok(weights
            .iter()
            .zip(&self.outputs)
            .map(|(w, out)| w * out.kernel.prior_variance())
            .sum::<f64>()
            .sqrt())
    }

    /// Cached `λ̄`.
    pub fn lambda_bar(&self) -> f64 {
        self.lambda_bar
    }
}

/// Learned estimate of the torque mismatch `d(x)` as seen by the filter.
pub trait MismatchModel: Sync {
    fn mean(&self, x: &JointState) -> DVector<f64>;
    /// State-dependent error bound `λ(x)`, logged for diagnostics.
    fn error_bound(&self, x: &JointState) -> f64;
}

impl MismatchModel for GpModel {
    fn mean(&self, x: &JointState) -> DVector<f64> {
        GpModel::mean(self, x.stacked().as_slice())
    }

    fn error_bound(&self, x: &JointState) -> f64 {
        // The bound guard was checked when the model was built.
        GpModel::error_bound(self, x.stacked().as_slice()).unwrap_or(f64::NAN)
    }
}

/// No compensation: `μ ≡ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroMismatch {
    pub dof: usize,
}

impl MismatchModel for ZeroMismatch {
    fn mean(&self, _x: &JointState) -> DVector<f64> {
        DVector::zeros(self.dof)
    }

    fn error_bound(&self, _x: &JointState) -> f64 {
        0.0
    }
}

/// Noise-regularized RKHS-norm estimate `sqrt(yᵀ (K + σ_v² I)⁻¹ y)` of the
/// function sampled at `points` (columns). Used to pick `B_i` from a dense
/// mismatch sample.
pub fn interpolant_rkhs_norm(
    kernel: &KernelParams,
    points: &DMatrix<f64>,
    targets: &DVector<f64>,
    noise_variance: f64,
) -> Result<f64, GpError> {
    kernel.validate()?;
    let (chol, _) = factorize(kernel, points, noise_variance, 0)?;
    Ok(targets.dot(&chol.solve(targets)).max(0.0).sqrt())
}

/// `B_i = safety_factor · ‖interpolant_i‖` for every output dimension of `dense`.
pub fn estimate_rkhs_bounds(
    dense: &Dataset,
    kernels: &[KernelParams],
    safety_factor: f64,
) -> Result<Vec<f64>, GpError> {
    let n = dense.dof();
    if kernels.len() != n {
        return Err(GpError::Arity { expected: n, got: kernels.len() });
    }
    let points = dense.input_matrix();
    (0..n)
        .map(|dim| {
            interpolant_rkhs_norm(&kernels[dim], &points, &dense.targets(dim), dense.noise_variance)
                .map(|norm| safety_factor * norm)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn sample(t: f64, q: [f64; 2], v: [f64; 2], u: [f64; 2], robot: &RobotParams) -> ResidualSample {
        let x = JointState::from_slices(&q, &v);
        let u = DVector::from_column_slice(&u);
        let qdd = robot.forward_dynamics(&x, &u, Plant::True).unwrap();
        ResidualSample { t, q: x.q, v: x.v, qdd, u }
    }

    fn single_point_dataset() -> Dataset {
        let row = DatasetRow {
            sample: ResidualSample {
                t: 0.0,
                q: DVector::from_vec(vec![0.1, 0.2]),
                v: DVector::from_vec(vec![0.3, -0.4]),
                qdd: DVector::zeros(2),
                u: DVector::zeros(2),
            },
            residual: DVector::from_vec(vec![0.7, -0.2]),
        };
        Dataset { rows: vec![row], noise_variance: 1e-3 }
    }

    #[test]
    fn single_point_mean_is_shrunk_target() {
        let ds = single_point_dataset();
        let k = KernelParams::new(0.5, 1.0);
        let gp = GpModel::fit(&ds, &[k, k], &[10.0, 10.0]).unwrap();
        let x0 = [0.1, 0.2, 0.3, -0.4];
        let (mu, _) = gp.predict(&x0);
        let kxx = 0.25;
        assert_relative_eq!(mu[0], 0.7 * kxx / (kxx + 1e-3), max_relative = 1e-12);
        assert_relative_eq!(mu[1], -0.2 * kxx / (kxx + 1e-3), max_relative = 1e-12);
    }

    #[test]
    fn far_away_recovers_prior() {
        let ds = single_point_dataset();
        let k = KernelParams::new(0.5, 1.0);
        let gp = GpModel::fit(&ds, &[k, k], &[10.0, 10.0]).unwrap();
        let (mu, var) = gp.predict(&[100.0, 0.0, 0.0, 0.0]);
        assert!(mu.norm() < 1e-300);
        assert_relative_eq!(var[0], 0.25, max_relative = 1e-15);
    }

    #[test]
    fn small_bound_is_rejected() {
        let ds = single_point_dataset();
        let k = KernelParams::new(0.5, 1.0);
        // ω ≈ 0.49/0.251 ≈ 1.95; B² − ω + 1 < 0 for B = 0.5.
        let err = GpModel::fit(&ds, &[k, k], &[0.5, 10.0]).unwrap_err();
        assert!(matches!(err, GpError::RkhsBoundTooSmall { dim: 0, .. }));
    }

    #[test]
    fn residuals_vanish_without_tip() {
        let robot = RobotParams::reference().without_tip();
        let log: Vec<_> = (0..5)
            .map(|i| sample(i as f64 * 0.01, [0.1 * i as f64, 0.3], [0.2, -0.1], [1.0, -0.5], &robot))
            .collect();
        let ds = collect_residuals(&log, &robot, 1e-3).unwrap();
        for r in &ds.rows {
            assert!(r.residual.norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_misaligned_and_non_finite_rows() {
        let robot = RobotParams::reference();
        let mut log = vec![sample(0.0, [0.1, 0.3], [0.2, -0.1], [1.0, -0.5], &robot)];
        log.push(log[0].clone());
        assert!(matches!(
            collect_residuals(&log, &robot, 1e-3),
            Err(GpError::BadRow { row: 1, .. })
        ));
        log[1].t = 0.01;
        log[1].qdd = DVector::zeros(3);
        assert!(collect_residuals(&log, &robot, 1e-3).is_err());
        log[1].qdd = DVector::from_vec(vec![f64::NAN, 0.0]);
        assert!(collect_residuals(&log, &robot, 1e-3).is_err());
    }

    #[test]
    fn subsample_size_and_determinism() {
        let robot = RobotParams::reference();
        let log: Vec<_> = (0..1000)
            .map(|i| {
                let t = i as f64 * 1e-3;
                sample(t, [t.sin(), 0.4], [t.cos(), 0.1], [0.5, -0.5], &robot)
            })
            .collect();
        let ds = collect_residuals(&log, &robot, 1e-3).unwrap();
        let a = ds.subsample(200, 7).unwrap();
        let b = ds.subsample(200, 7).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a, b);
        assert!(a.rows.windows(2).all(|w| w[0].sample.t < w[1].sample.t));
        assert!(ds.subsample(1001, 7).is_err());
    }
}
