//! Robust CBF safety filter: rows from [`crate::barriers`], solved by
//! [`crate::qp::solve_qp`].

use alloc::vec::Vec;

use nalgebra::DVector;

use crate::barriers::{self, BarrierParams, ConstraintRow, RowContext, SingularityRow};
use crate::geometry::SingularityGeometry;
use crate::gp::MismatchModel;
use crate::qp::{solve_qp, FilterResult, QpProblem, QpStatus};
use crate::robot::{JointState, ModelError, RobotParams};

/// Anything that turns a nominal torque into the torque actually applied.
pub trait SafetyLayer: Sync {
    fn apply(&self, x: &JointState, u_nom: &DVector<f64>) -> Result<FilterOutput, ModelError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub result: FilterResult,
    pub z: f64,
    pub h: f64,
    /// `λ(x)` of the mismatch model, for diagnostics only.
    pub lambda_x: f64,
    /// Set when the singularity row degenerated (`Γ ≈ 0`); holds its `b`.
    pub degenerate_b: Option<f64>,
}

/// Robust CBF filter built on the nominal model plus a mismatch model.
pub struct CbfFilter<'a> {
    pub robot: &'a RobotParams,
    pub geom: SingularityGeometry,
    pub params: BarrierParams,
    pub mismatch: &'a dyn MismatchModel,
    /// Uniform margin `λ̄` used in every row.
    pub lambda_bar: f64,
}

impl<'a> CbfFilter<'a> {
    /// All CBF rows at `x` plus the singularity-row outcome.
    pub fn rows(&self, x: &JointState) -> Result<(Vec<ConstraintRow>, SingularityRow), ModelError> {
        let ctx = RowContext::new(self.robot, self.mismatch, self.lambda_bar, x)?;
        let sing = barriers::singularity_row(&self.geom, &self.params, &ctx, x);
        let mut rows = Vec::with_capacity(1 + 2 * x.dof());
        if let Some(r) = sing.row() {
            rows.push(r.clone());
        }
        rows.extend(barriers::velocity_rows(&self.params, self.robot.v_max, &ctx, x));
        Ok((rows, sing))
    }
}

impl SafetyLayer for CbfFilter<'_> {
    fn apply(&self, x: &JointState, u_nom: &DVector<f64>) -> Result<FilterOutput, ModelError> {
        let (rows, sing) = self.rows(x)?;
        let mut result = solve_qp(&QpProblem { u_nom: u_nom.clone(), rows, u_max: self.robot.u_max });
        let degenerate_b = match sing {
            SingularityRow::Row(_) => None,
            SingularityRow::Dropped { b } => Some(b),
            SingularityRow::Violated { b } => {
                // No torque can satisfy the condition; keep the solve but flag it.
                log::warn!("singularity condition unsatisfiable at a critical point of eta (b = {b:e})");
                if result.status == QpStatus::Optimal {
                    result.status = QpStatus::Relaxed;
                }
                result.slack.insert(0, -b);
                Some(b)
            }
        };
        Ok(FilterOutput {
            z: self.geom.z_value(&x.q),
            h: barriers::h_value(&self.geom, &self.params, x),
            lambda_x: self.mismatch.error_bound(x),
            result,
            degenerate_b,
        })
    }
}

/// Pass-through: the nominal torque clamped to the actuator box.
pub struct Unfiltered<'a> {
    pub robot: &'a RobotParams,
    pub geom: SingularityGeometry,
    pub params: BarrierParams,
}

impl SafetyLayer for Unfiltered<'_> {
    fn apply(&self, x: &JointState, u_nom: &DVector<f64>) -> Result<FilterOutput, ModelError> {
        let u_max = self.robot.u_max;
        Ok(FilterOutput {
            result: FilterResult {
                u_star: u_nom.map(|u| u.clamp(-u_max, u_max)),
                status: QpStatus::Optimal,
                active: Vec::new(),
                multipliers: Vec::new(),
                active_tags: Vec::new(),
                slack: Vec::new(),
                iterations: 0,
            },
            z: self.geom.z_value(&x.q),
            h: barriers::h_value(&self.geom, &self.params, x),
            lambda_x: 0.0,
            degenerate_b: None,
        })
    }
}
