//! Planar serial-link manipulator: inertia, Coriolis and gravity terms,
//! forward dynamics and a fixed-step RK4 integrator.
//!
//! Joint `i` rotates link `i` relative to link `i - 1`. Link 2 (and every
//! link after it) carries the constant offset `q_ini`, so the absolute angle
//! of link `l` is `sum(q[0..=l]) + q_ini` for `l >= 1`.
//!
//! Two plants share the same geometry: the *nominal* model the controller
//! knows, and the *true* plant that additionally carries a point mass at the
//! distal end of the last link. Their difference is the model mismatch.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use thiserror::Error;

/// Standard gravity, m/s².
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("inertia matrix is not positive definite at q = {q:?}")]
    IndefiniteMass { q: Vec<f64> },
    #[error("dimension mismatch: expected {expected} joints, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid robot parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Which dynamics to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plant {
    /// The model known to the controller (no tip mass).
    Nominal,
    /// The simulated ground truth (tip mass included).
    True,
}

/// Joint positions and velocities, `x = [q, v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

impl JointState {
    pub fn new(q: DVector<f64>, v: DVector<f64>) -> Self {
        assert_eq!(q.len(), v.len(), "q and v must have the same length");
        Self { q, v }
    }

    pub fn from_slices(q: &[f64], v: &[f64]) -> Self {
        Self::new(DVector::from_column_slice(q), DVector::from_column_slice(v))
    }

    pub fn at_rest(q: &[f64]) -> Self {
        Self::new(DVector::from_column_slice(q), DVector::zeros(q.len()))
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }

    /// Stacked `[q; v]`, the regression input of the mismatch model.
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.dof();
        DVector::from_fn(2 * n, |i, _| if i < n { self.q[i] } else { self.v[i - n] })
    }

    pub fn from_stacked(x: &[f64]) -> Self {
        let n = x.len() / 2;
        Self::from_slices(&x[..n], &x[n..2 * n])
    }
}

/// Geometry and material of one link, modelled as a uniform solid cylinder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    /// Joint-to-joint length, m.
    pub length: f64,
    /// Cylinder radius, m.
    pub radius: f64,
    /// Material density, kg/m³.
    pub density: f64,
}

impl LinkParams {
    pub fn mass(&self) -> f64 {
        PI * self.radius * self.radius * self.length * self.density
    }

    /// Inertia about the centre of mass for rotation perpendicular to the
    /// cylinder axis.
    pub fn com_inertia(&self) -> f64 {
        self.mass() * (3.0 * self.radius * self.radius + self.length * self.length) / 12.0
    }

    pub fn com_distance(&self) -> f64 {
        0.5 * self.length
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotParams {
    pub links: Vec<LinkParams>,
    /// Constant angle offset of link 2 relative to link 1, rad.
    pub q_ini: f64,
    /// Symmetric joint limit: `q ∈ [-q_max, q_max]`.
    pub q_max: f64,
    /// Symmetric velocity limit, rad/s.
    pub v_max: f64,
    /// Symmetric torque limit, N·m.
    pub u_max: f64,
    /// Point mass at the end of the last link, present only in the true plant.
    pub tip_mass: f64,
    /// Motion in the horizontal plane: gravity does no work.
    pub planar: bool,
}

/// A rigid mass element attached to link `link` at distance `offset` from
/// that link's proximal joint.
#[derive(Debug, Clone, Copy)]
struct Body {
    link: usize,
    mass: f64,
    offset: f64,
    inertia: f64,
}

impl RobotParams {
    /// The two identical steel links used for the reference experiment.
    pub fn reference() -> Self {
        let link = LinkParams { length: 0.5, radius: 0.01, density: 7.8e3 };
        Self {
            links: vec![link, link],
            q_ini: PI / 12.0,
            q_max: PI / 3.0,
            v_max: 2.0,
            u_max: 5.0,
            tip_mass: 0.2,
            planar: true,
        }
    }

    pub fn dof(&self) -> usize {
        self.links.len()
    }

    /// Same robot with the hidden tip mass removed.
    pub fn without_tip(&self) -> Self {
        Self { tip_mass: 0.0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.links.is_empty() {
            return Err(ModelError::InvalidParameter("robot needs at least one link"));
        }
        for l in &self.links {
            if !(l.length > 0.0 && l.radius > 0.0 && l.density > 0.0) {
                return Err(ModelError::InvalidParameter(
                    "link length, radius and density must be strictly positive",
                ));
            }
        }
        if !(self.q_max > 0.0 && self.v_max > 0.0 && self.u_max > 0.0) {
            return Err(ModelError::InvalidParameter("q_max, v_max and u_max must be positive"));
        }
        if !(self.tip_mass >= 0.0) {
            return Err(ModelError::InvalidParameter("tip_mass must be non-negative"));
        }
        if !self.q_ini.is_finite() {
            return Err(ModelError::InvalidParameter("q_ini must be finite"));
        }
        Ok(())
    }

    fn check_dim(&self, len: usize) -> Result<(), ModelError> {
        if len != self.dof() {
            return Err(ModelError::Dimension { expected: self.dof(), got: len });
        }
        Ok(())
    }

    fn bodies(&self, plant: Plant) -> Vec<Body> {
        let mut bodies: Vec<Body> = self
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| Body {
                link: i,
                mass: l.mass(),
                offset: l.com_distance(),
                inertia: l.com_inertia(),
            })
            .collect();
        if plant == Plant::True && self.tip_mass > 0.0 {
            let last = self.dof() - 1;
            bodies.push(Body {
                link: last,
                mass: self.tip_mass,
                offset: self.links[last].length,
                inertia: 0.0,
            });
        }
        bodies
    }

    /// Absolute angle of every link.
    pub fn link_angles(&self, q: &DVector<f64>) -> Vec<f64> {
        let mut acc = 0.0;
        q.iter()
            .enumerate()
            .map(|(i, qi)| {
                acc += qi;
                if i >= 1 {
                    acc + self.q_ini
                } else {
                    acc
                }
            })
            .collect()
    }

    /// Lever arm of `body` along link `l` (`l <= body.link`).
    fn arm(&self, body: &Body, l: usize) -> f64 {
        if l == body.link {
            body.offset
        } else {
            self.links[l].length
        }
    }

    /// Translational Jacobian (2×n) of a body's position.
    fn body_jacobian(&self, body: &Body, angles: &[f64]) -> DMatrix<f64> {
        let n = self.dof();
        let mut jac = DMatrix::zeros(2, n);
        for j in 0..=body.link {
            for l in j..=body.link {
                let r = self.arm(body, l);
                jac[(0, j)] -= r * angles[l].sin();
                jac[(1, j)] += r * angles[l].cos();
            }
        }
        jac
    }

    /// Partial derivative of [`Self::body_jacobian`] with respect to `q_k`.
    fn body_jacobian_partial(&self, body: &Body, angles: &[f64], k: usize) -> DMatrix<f64> {
        let n = self.dof();
        let mut djac = DMatrix::zeros(2, n);
        for j in 0..=body.link {
            for l in j.max(k)..=body.link {
                let r = self.arm(body, l);
                djac[(0, j)] -= r * angles[l].cos();
                djac[(1, j)] -= r * angles[l].sin();
            }
        }
        djac
    }

    fn body_height(&self, body: &Body, angles: &[f64]) -> f64 {
        (0..=body.link).map(|l| self.arm(body, l) * angles[l].sin()).sum()
    }

    /// Joint-space inertia matrix `M(q)`.
    pub fn mass_matrix(&self, q: &DVector<f64>, plant: Plant) -> DMatrix<f64> {
        let n = self.dof();
        let angles = self.link_angles(q);
        let mut m = DMatrix::zeros(n, n);
        for body in self.bodies(plant) {
            let jac = self.body_jacobian(&body, &angles);
            m += body.mass * jac.transpose() * &jac;
            for j in 0..=body.link {
                for k in 0..=body.link {
                    m[(j, k)] += body.inertia;
                }
            }
        }
        m
    }

    /// `∂M/∂q_k` for every `k`.
    pub fn mass_matrix_partials(&self, q: &DVector<f64>, plant: Plant) -> Vec<DMatrix<f64>> {
        let n = self.dof();
        let angles = self.link_angles(q);
        let bodies = self.bodies(plant);
        (0..n)
            .map(|k| {
                let mut dm = DMatrix::zeros(n, n);
                for body in &bodies {
                    let jac = self.body_jacobian(body, &angles);
                    let djac = self.body_jacobian_partial(body, &angles, k);
                    let prod = djac.transpose() * &jac;
                    dm += body.mass * (&prod + prod.transpose());
                }
                dm
            })
            .collect()
    }

    /// Coriolis/centrifugal matrix from Christoffel symbols of the first
    /// kind, so that `Ṁ − 2C` is skew-symmetric.
    pub fn coriolis_matrix(&self, q: &DVector<f64>, v: &DVector<f64>, plant: Plant) -> DMatrix<f64> {
        let n = self.dof();
        let dm = self.mass_matrix_partials(q, plant);
        DMatrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| 0.5 * (dm[k][(i, j)] + dm[j][(i, k)] - dm[i][(j, k)]) * v[k])
                .sum()
        })
    }

    /// Gravity torques for an arm moving in a vertical plane; identically
    /// zero when `planar` is set.
    pub fn gravity_vector(&self, q: &DVector<f64>, plant: Plant) -> DVector<f64> {
        let n = self.dof();
        let mut g = DVector::zeros(n);
        if self.planar {
            return g;
        }
        let angles = self.link_angles(q);
        for body in self.bodies(plant) {
            let jac = self.body_jacobian(&body, &angles);
            for j in 0..n {
                g[j] += body.mass * GRAVITY * jac[(1, j)];
            }
        }
        g
    }

    /// Joint accelerations `M⁻¹(u − C v − G)` of the selected plant.
    pub fn forward_dynamics(
        &self,
        x: &JointState,
        u: &DVector<f64>,
        plant: Plant,
    ) -> Result<DVector<f64>, ModelError> {
        self.check_dim(x.dof())?;
        self.check_dim(u.len())?;
        let m = self.mass_matrix(&x.q, plant);
        let rhs = u - self.coriolis_matrix(&x.q, &x.v, plant) * &x.v - self.gravity_vector(&x.q, plant);
        let chol = Cholesky::new(m).ok_or_else(|| ModelError::IndefiniteMass {
            q: x.q.iter().copied().collect(),
        })?;
        Ok(chol.solve(&rhs))
    }

    /// Torque-level mismatch `d` between nominal model and true plant when
    /// input `u` is applied at `x`:
    /// `d = (M_t − M_n) q̈ + (C_t − C_n) v + (G_t − G_n)` with `q̈` the true
    /// acceleration. Equivalently `d = u − M_n q̈ − C_n v − G_n`.
    pub fn mismatch_truth(&self, x: &JointState, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let qdd = self.forward_dynamics(x, u, Plant::True)?;
        let dm = self.mass_matrix(&x.q, Plant::True) - self.mass_matrix(&x.q, Plant::Nominal);
        let dc = self.coriolis_matrix(&x.q, &x.v, Plant::True)
            - self.coriolis_matrix(&x.q, &x.v, Plant::Nominal);
        let dg = self.gravity_vector(&x.q, Plant::True) - self.gravity_vector(&x.q, Plant::Nominal);
        Ok(dm * qdd + dc * &x.v + dg)
    }

    /// One classical Runge–Kutta step with `u` held constant over `dt`.
    pub fn step_rk4(
        &self,
        x: &JointState,
        u: &DVector<f64>,
        dt: f64,
        plant: Plant,
    ) -> Result<JointState, ModelError> {
        let deriv = |s: &JointState| -> Result<(DVector<f64>, DVector<f64>), ModelError> {
            Ok((s.v.clone(), self.forward_dynamics(s, u, plant)?))
        };
        let shifted = |s: &JointState, k: &(DVector<f64>, DVector<f64>), h: f64| {
            JointState { q: &s.q + &k.0 * h, v: &s.v + &k.1 * h }
        };
        let k1 = deriv(x)?;
        let k2 = deriv(&shifted(x, &k1, 0.5 * dt))?;
        let k3 = deriv(&shifted(x, &k2, 0.5 * dt))?;
        let k4 = deriv(&shifted(x, &k3, dt))?;
        let w = dt / 6.0;
        Ok(JointState {
            q: &x.q + (&k1.0 + &k2.0 * 2.0 + &k3.0 * 2.0 + &k4.0) * w,
            v: &x.v + (&k1.1 + &k2.1 * 2.0 + &k3.1 * 2.0 + &k4.1) * w,
        })
    }

    /// Kinetic plus potential energy.
    pub fn energy(&self, x: &JointState, plant: Plant) -> f64 {
        let kinetic = 0.5 * x.v.dot(&(self.mass_matrix(&x.q, plant) * &x.v));
        if self.planar {
            return kinetic;
        }
        let angles = self.link_angles(&x.q);
        let potential: f64 = self
            .bodies(plant)
            .iter()
            .map(|b| b.mass * GRAVITY * self.body_height(b, &angles))
            .sum();
        kinetic + potential
    }

    /// End-effector position Jacobian (2×n). For two links this is
    /// `[[-l1 s1 - l2 s12, -l2 s12], [l1 c1 + l2 c12, l2 c12]]`
    /// with `q12 = q1 + q2 + q_ini`.
    pub fn jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dof();
        let angles = self.link_angles(q);
        let mut jac = DMatrix::zeros(2, n);
        for j in 0..n {
            for l in j..n {
                let len = self.links[l].length;
                jac[(0, j)] -= len * angles[l].sin();
                jac[(1, j)] += len * angles[l].cos();
            }
        }
        jac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn robot() -> RobotParams {
        RobotParams::reference()
    }

    #[test]
    fn link_mass_and_inertia() {
        let l = robot().links[0];
        assert_relative_eq!(l.mass(), PI * 1e-4 * 0.5 * 7.8e3, max_relative = 1e-14);
        assert_relative_eq!(l.com_inertia(), l.mass() * (3e-4 + 0.25) / 12.0, max_relative = 1e-14);
    }

    #[test]
    fn zero_velocity_gives_zero_coriolis() {
        let r = robot();
        let q = DVector::from_vec(vec![0.3, -0.7]);
        let c = r.coriolis_matrix(&q, &DVector::zeros(2), Plant::True);
        assert!(c.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn planar_gravity_vanishes() {
        let r = robot();
        let q = DVector::from_vec(vec![0.3, -0.7]);
        assert!(r.gravity_vector(&q, Plant::True).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tip_free_plant_has_no_mismatch() {
        let r = robot().without_tip();
        let x = JointState::from_slices(&[0.2, 0.5], &[1.0, -0.4]);
        let u = DVector::from_vec(vec![1.5, -2.0]);
        let d = r.mismatch_truth(&x, &u).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn force_balance_gives_zero_acceleration() {
        let r = robot();
        let x = JointState::from_slices(&[0.2, 0.5], &[1.0, -0.4]);
        let u = r.coriolis_matrix(&x.q, &x.v, Plant::True) * &x.v + r.gravity_vector(&x.q, Plant::True);
        let qdd = r.forward_dynamics(&x, &u, Plant::True).unwrap();
        assert!(qdd.norm() < 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let r = robot();
        let x = JointState::from_slices(&[0.2, 0.5, 0.1], &[1.0, -0.4, 0.0]);
        let u = DVector::zeros(3);
        assert!(matches!(
            r.forward_dynamics(&x, &u, Plant::True),
            Err(ModelError::Dimension { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn validate_rejects_negative_tip_mass() {
        let r = RobotParams { tip_mass: -0.1, ..robot() };
        assert!(r.validate().is_err());
        assert!(robot().validate().is_ok());
    }
}
