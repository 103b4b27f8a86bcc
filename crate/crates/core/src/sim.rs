//! Closed-loop episodes on the true plant with a PID nominal controller.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use nalgebra::DVector;
#[allow(unused_imports)]
use num_traits::Float;

use crate::barriers::RowTag;
use crate::filter::{FilterOutput, SafetyLayer};
use crate::gp::ResidualSample;
use crate::qp::{ActiveConstraint, QpStatus};
use crate::robot::{JointState, ModelError, Plant, RobotParams};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("joint {} left [-q_max, q_max] at t = {t:.4} s (q = {q:.6})", joint + 1)]
    JointLimit { t: f64, joint: usize, q: f64 },
    #[error("state became non-finite at t = {t:.4} s")]
    NonFinite { t: f64 },
    #[error("invalid episode setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Robust filter with GP compensation and margin.
    FilteredGp,
    /// Filter on the nominal model only: `μ ≡ 0`, `λ̄ = 0`.
    FilteredNoGp,
    /// Nominal controller straight to the actuators.
    Unfiltered,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::FilteredGp, Mode::FilteredNoGp, Mode::Unfiltered];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FilteredGp => "filtered+gp",
            Mode::FilteredNoGp => "filtered-gp",
            Mode::Unfiltered => "unfiltered",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == name)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `q(t) = offset + amplitude · sin(2π f t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointReference {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub offset: f64,
}

impl JointReference {
    pub fn constant(value: f64) -> Self {
        Self { amplitude: 0.0, frequency: 0.0, phase: 0.0, offset: value }
    }

    pub fn position(&self, t: f64) -> f64 {
        self.offset + self.amplitude * (2.0 * PI * self.frequency * t + self.phase).sin()
    }

    pub fn velocity(&self, t: f64) -> f64 {
        let w = 2.0 * PI * self.frequency;
        self.amplitude * w * (w * t + self.phase).cos()
    }

    pub fn peak_position(&self) -> f64 {
        self.offset.abs() + self.amplitude.abs()
    }

    pub fn peak_velocity(&self) -> f64 {
        self.amplitude.abs() * 2.0 * PI * self.frequency.abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub joints: Vec<JointReference>,
    pub duration: f64,
}

impl TrajectorySpec {
    pub fn at(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let n = self.joints.len();
        (
            DVector::from_iterator(n, self.joints.iter().map(|j| j.position(t))),
            DVector::from_iterator(n, self.joints.iter().map(|j| j.velocity(t))),
        )
    }

    /// The reference state at `t = 0`.
    pub fn initial_state(&self) -> JointState {
        let (q, v) = self.at(0.0);
        JointState::new(q, v)
    }

    /// Checks the reference stays inside the joint and velocity boxes.
    pub fn validate(&self, q_max: f64, v_max: f64) -> Result<(), String> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(alloc::format!("duration must be positive, got {}", self.duration));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if j.peak_position() > q_max {
                return Err(alloc::format!(
                    "joint {} reference reaches {:.4} rad, beyond q_max = {:.4}",
                    i + 1,
                    j.peak_position(),
                    q_max
                ));
            }
            if j.peak_velocity() > v_max {
                return Err(alloc::format!(
                    "joint {} reference velocity reaches {:.4} rad/s, beyond v_max = {:.4}",
                    i + 1,
                    j.peak_velocity(),
                    v_max
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PidGains {
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
    pub kv: Vec<f64>,
}

impl PidGains {
    /// The same gains on every joint.
    pub fn uniform(n: usize, kp: f64, ki: f64, kv: f64) -> Self {
        Self { kp: alloc::vec![kp; n], ki: alloc::vec![ki; n], kv: alloc::vec![kv; n] }
    }

    /// `k_p = 200`, `k_i = 200`, `k_v = 10`.
    pub fn reference(n: usize) -> Self {
        Self::uniform(n, 200.0, 200.0, 10.0)
    }

    pub fn is_valid(&self) -> bool {
        self.kp.len() == self.ki.len()
            && self.ki.len() == self.kv.len()
            && self.kp.iter().chain(&self.ki).chain(&self.kv).all(|g| *g >= 0.0 && g.is_finite())
    }
}

/// One PID update. The integral advances by `e · dt` (explicit Euler) and is
/// clamped to `±u_max / k_i`.
pub fn pid_nominal(
    gains: &PidGains,
    x: &JointState,
    ref_q: &DVector<f64>,
    ref_v: &DVector<f64>,
    integral: &DVector<f64>,
    dt: f64,
    u_max: f64,
) -> (DVector<f64>, DVector<f64>) {
    let n = x.dof();
    let mut u = DVector::zeros(n);
    let mut next = integral.clone();
    for i in 0..n {
        let e = ref_q[i] - x.q[i];
        next[i] += e * dt;
        if gains.ki[i] > 0.0 {
            let cap = u_max / gains.ki[i];
            next[i] = next[i].clamp(-cap, cap);
        }
        u[i] = gains.kp[i] * e + gains.ki[i] * next[i] + gains.kv[i] * (ref_v[i] - x.v[i]);
    }
    (u, next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub t: f64,
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    /// True-plant acceleration under the applied torque.
    pub qdd: DVector<f64>,
    pub u_nom: DVector<f64>,
    pub u: DVector<f64>,
    pub z: f64,
    pub h: f64,
    pub lambda_x: f64,
    pub status: QpStatus,
    pub active_mask: u64,
    pub slack_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub dof: usize,
    pub dt: f64,
    pub rows: Vec<EpisodeRow>,
}

impl EpisodeLog {
    pub fn z_min(&self) -> f64 {
        self.rows.iter().map(|r| r.z).fold(f64::INFINITY, f64::min)
    }

    pub fn h_min(&self) -> f64 {
        self.rows.iter().map(|r| r.h).fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_velocity(&self) -> f64 {
        self.rows.iter().map(|r| r.v.amax()).fold(0.0, f64::max)
    }

    pub fn max_abs_torque(&self) -> f64 {
        self.rows.iter().map(|r| r.u.amax()).fold(0.0, f64::max)
    }

    pub fn count_status(&self, status: QpStatus) -> usize {
        self.rows.iter().filter(|r| r.status == status).count()
    }

    /// First time `z < 0`, if any.
    pub fn first_violation(&self) -> Option<f64> {
        self.rows.iter().find(|r| r.z < 0.0).map(|r| r.t)
    }

    /// Rows as regression samples for [`crate::gp::collect_residuals`].
    pub fn residual_samples(&self) -> Vec<ResidualSample> {
        self.rows
            .iter()
            .map(|r| ResidualSample { t: r.t, q: r.q.clone(), v: r.v.clone(), qdd: r.qdd.clone(), u: r.u.clone() })
            .collect()
    }
}

/// Bit layout of [`EpisodeRow::active_mask`]: bit 0 singularity, bits
/// `1 + 2i` / `2 + 2i` velocity upper/lower of joint `i`, then bits
/// `1 + 2n + 2i` / `2 + 2n + 2i` torque upper/lower.
pub fn active_mask(out: &FilterOutput, n: usize) -> u64 {
    let mut mask = 0u64;
    for tag in &out.result.active_tags {
        mask |= 1 << match tag {
            RowTag::Singularity => 0,
            RowTag::VelUpper(i) => 1 + 2 * i,
            RowTag::VelLower(i) => 2 + 2 * i,
        };
    }
    for c in &out.result.active {
        match c {
            ActiveConstraint::TorqueUpper(i) => mask |= 1 << (1 + 2 * n + 2 * i),
            ActiveConstraint::TorqueLower(i) => mask |= 1 << (2 + 2 * n + 2 * i),
            ActiveConstraint::Row(_) => {}
        }
    }
    mask
}

/// Everything needed to run one closed-loop episode.
pub struct Episode<'a> {
    /// True plant (tip mass included).
    pub robot: &'a RobotParams,
    pub reference: &'a TrajectorySpec,
    pub gains: &'a PidGains,
    pub dt: f64,
    pub initial: JointState,
    pub layer: &'a dyn SafetyLayer,
}

impl Episode<'_> {
    pub fn steps(&self) -> usize {
        (self.reference.duration / self.dt).round() as usize
    }
}

/// Integrates the true plant for the reference duration with RK4 at `dt`,
/// holding each filtered torque over its step. Aborts when a joint leaves its
/// box or the state goes non-finite.
pub fn run_episode(ep: &Episode<'_>) -> Result<EpisodeLog, SimError> {
    let n = ep.robot.dof();
    if !(ep.dt > 0.0 && ep.dt.is_finite()) {
        return Err(SimError::Setup(alloc::format!("dt must be positive, got {}", ep.dt)));
    }
    if ep.initial.dof() != n || ep.reference.joints.len() != n || ep.gains.kp.len() != n {
        return Err(SimError::Setup(alloc::format!("dimension mismatch: robot has {n} joints")));
    }
    let steps = ep.steps();
    let mut x = ep.initial.clone();
    let mut integral = DVector::zeros(n);
    let mut rows = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * ep.dt;
        if !x.is_finite() {
            return Err(SimError::NonFinite { t });
        }
        if let Some((joint, q)) = x.q.iter().enumerate().find(|(_, q)| q.abs() > ep.robot.q_max) {
            return Err(SimError::JointLimit { t, joint, q: *q });
        }
        let (ref_q, ref_v) = ep.reference.at(t);
        let (u_nom, next) = pid_nominal(ep.gains, &x, &ref_q, &ref_v, &integral, ep.dt, ep.robot.u_max);
        integral = next;
        let out = ep.layer.apply(&x, &u_nom)?;
        let u = out.result.u_star.clone();
        let qdd = ep.robot.forward_dynamics(&x, &u, Plant::True)?;
        let next_x = if k < steps { Some(ep.robot.step_rk4(&x, &u, ep.dt, Plant::True)?) } else { None };
        rows.push(EpisodeRow {
            t,
            q: x.q.clone(),
            v: x.v.clone(),
            qdd,
            u_nom,
            u,
            z: out.z,
            h: out.h,
            lambda_x: out.lambda_x,
            status: out.result.status,
            active_mask: active_mask(&out, n),
            slack_total: out.result.slack_total(),
        });
        if let Some(nx) = next_x {
            x = nx;
        }
    }
    Ok(EpisodeLog { dof: n, dt: ep.dt, rows })
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// series is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.len() < 2 {
        return f64::NAN;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return f64::NAN;
    }
    cov / (va * vb).sqrt()
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut r = alloc::vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = 0.5 * (i + j) as f64 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}
