//! Small dense QP: `min ½‖u − u_nom‖²` subject to `aᵀu ≤ b` rows and a
//! symmetric box `|uᵢ| ≤ u_max`.
//!
//! Solved with a primal active-set method. A feasible start comes from an
//! elastic phase 1 (one slack per row with a large linear penalty); rows are
//! normalized first so the penalty is exact whenever the rows are feasible
//! inside the box. If phase 1
//! cannot drive every slack to zero the problem is re-solved with quadratic
//! slack penalties and flagged as relaxed. Working-set changes use Bland's
//! smallest-index rule, which rules out cycling.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};

use crate::barriers::{ConstraintRow, RowTag, DEGENERATE_ROW_NORM};

/// Quadratic weight on row slacks in relaxed solves.
pub const RELAXATION_WEIGHT: f64 = 1e6;
/// Linear slack penalty of the elastic phase, per unit of `1 + u_max`.
const ELASTIC_PENALTY: f64 = 1e4;
/// Largest elastic slack still treated as zero.
const FEASIBILITY_TOL: f64 = 1e-9;
const MULTIPLIER_TOL: f64 = 1e-12;
/// Relative step length below which the working set is considered optimal.
const STEP_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub u_nom: DVector<f64>,
    pub rows: Vec<ConstraintRow>,
    pub u_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QpStatus {
    Optimal,
    /// Rows could not all hold inside the box; slacks were spent.
    Relaxed,
    /// Non-finite data or an iteration cap; `u_star` is the clamped nominal.
    Infeasible,
}

impl QpStatus {
    pub fn code(self) -> u8 {
        match self {
            QpStatus::Optimal => 0,
            QpStatus::Relaxed => 1,
            QpStatus::Infeasible => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Relaxed => "relaxed",
            QpStatus::Infeasible => "infeasible",
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(QpStatus::Optimal),
            1 => Some(QpStatus::Relaxed),
            2 => Some(QpStatus::Infeasible),
            _ => None,
        }
    }
}

impl fmt::Display for QpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifies a constraint of the assembled problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActiveConstraint {
    /// Index into [`QpProblem::rows`].
    Row(usize),
    TorqueUpper(usize),
    TorqueLower(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub u_star: DVector<f64>,
    pub status: QpStatus,
    /// Working set at termination, in ascending constraint order.
    pub active: Vec<ActiveConstraint>,
    /// Lagrange multipliers aligned with `active` (zero-length when relaxed
    /// or infeasible).
    pub multipliers: Vec<f64>,
    /// Tags of the active rows (box constraints excluded).
    pub active_tags: Vec<RowTag>,
    /// Per-row slack, aligned with [`QpProblem::rows`].
    pub slack: Vec<f64>,
    pub iterations: usize,
}

impl FilterResult {
    pub fn slack_total(&self) -> f64 {
        self.slack.iter().sum()
    }
}

/// `min ½ Σ hⱼ(xⱼ − cⱼ)² + lᵀx` s.t. `Gx ≤ g`, solved from a feasible start.
struct ActiveSetQp {
    h: Vec<f64>,
    c: Vec<f64>,
    l: Vec<f64>,
    g_rows: Vec<DVector<f64>>,
    g_rhs: Vec<f64>,
}

struct ActiveSetSolution {
    x: DVector<f64>,
    working: Vec<usize>,
    multipliers: Vec<f64>,
    iterations: usize,
}

impl ActiveSetQp {
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(x.len(), (0..x.len()).map(|j| self.h[j] * (x[j] - self.c[j]) + self.l[j]))
    }

    /// Equality-constrained step on the working set. Returns the step and
    /// the working-set multipliers.
    fn eqp(&self, grad: &DVector<f64>, working: &[usize]) -> Option<(DVector<f64>, Vec<f64>)> {
        let n = grad.len();
        let hinv = DVector::from_iterator(n, self.h.iter().map(|h| 1.0 / h));
        let hinv_grad = grad.component_mul(&hinv);
        let lambda = if working.is_empty() {
            DVector::zeros(0)
        } else {
            let k = working.len();
            let mut s = DMatrix::zeros(k, k);
            let mut rhs = DVector::zeros(k);
            for (r, &i) in working.iter().enumerate() {
                let ai = self.g_rows[i].component_mul(&hinv);
                rhs[r] = -ai.dot(grad);
                for (c, &j) in working.iter().enumerate() {
                    s[(r, c)] = ai.dot(&self.g_rows[j]);
                }
            }
            s.lu().solve(&rhs)?
        };
        let mut p = -hinv_grad;
        for (r, &i) in working.iter().enumerate() {
            p -= self.g_rows[i].component_mul(&hinv) * lambda[r];
        }
        Some((p, lambda.iter().copied().collect()))
    }

    /// Magnitude of the terms summed into a step, for a relative zero test.
    fn step_scale(&self, grad: &DVector<f64>, working: &[usize], lambda: &[f64]) -> f64 {
        let mut m = 0.0f64;
        for j in 0..grad.len() {
            let mut t = grad[j].abs();
            for (&i, l) in working.iter().zip(lambda) {
                t += (l * self.g_rows[i][j]).abs();
            }
            m = m.max(t / self.h[j]);
        }
        m
    }

    fn solve(&self, x0: DVector<f64>, max_iter: usize) -> Option<ActiveSetSolution> {
        let mut x = x0;
        let mut working: Vec<usize> = Vec::new();
        // After a full, unblocked step x already minimizes over the working set;
        // whatever step is computed next is rounding noise.
        let mut at_minimizer = false;
        for iter in 0..max_iter {
            let grad = self.gradient(&x);
            let (p, lambda) = self.eqp(&grad, &working)?;
            let scale = 1.0 + x.amax() + self.step_scale(&grad, &working, &lambda);
            if at_minimizer || p.amax() <= STEP_TOL * scale {
                // Bland: drop the lowest-indexed constraint with a negative multiplier.
                let drop = working
                    .iter()
                    .zip(&lambda)
                    .filter(|(_, l)| **l < -MULTIPLIER_TOL)
                    .map(|(i, _)| *i)
                    .min();
                match drop {
                    None => {
                        let mut pairs: Vec<(usize, f64)> = working.into_iter().zip(lambda).collect();
                        pairs.sort_unstable_by_key(|(i, _)| *i);
                        let (working, multipliers) = pairs.into_iter().unzip();
                        return Some(ActiveSetSolution { x, working, multipliers, iterations: iter + 1 });
                    }
                    Some(i) => working.retain(|&w| w != i),
                }
                at_minimizer = false;
                continue;
            }
            let mut alpha = 1.0;
            let mut blocking = None;
            for (i, row) in self.g_rows.iter().enumerate() {
                if working.contains(&i) {
                    continue;
                }
                let ap = row.dot(&p);
                if ap <= 1e-14 * row.amax() * p.amax() {
                    continue;
                }
                let step = ((self.g_rhs[i] - row.dot(&x)) / ap).max(0.0);
                // Strict comparison keeps the lowest index among ties.
                if step < alpha {
                    alpha = step;
                    blocking = Some(i);
                }
            }
            x += p * alpha;
            match blocking {
                Some(i) => working.push(i),
                None => at_minimizer = true,
            }
        }
        None
    }
}

fn clamp_box(u: &DVector<f64>, u_max: f64) -> DVector<f64> {
    u.map(|ui| ui.clamp(-u_max, u_max))
}

fn box_constraints(n: usize, offset: usize, dim: usize, u_max: f64) -> (Vec<DVector<f64>>, Vec<f64>) {
    let mut rows = Vec::with_capacity(2 * n);
    let mut rhs = Vec::with_capacity(2 * n);
    for j in 0..n {
        let mut up = DVector::zeros(dim);
        up[offset + j] = 1.0;
        rows.push(up.clone());
        rhs.push(u_max);
        rows.push(-up);
        rhs.push(u_max);
    }
    (rows, rhs)
}

fn decode(index: usize, m: usize) -> ActiveConstraint {
    if index < m {
        ActiveConstraint::Row(index)
    } else {
        let j = (index - m) / 2;
        if (index - m) % 2 == 0 {
            ActiveConstraint::TorqueUpper(j)
        } else {
            ActiveConstraint::TorqueLower(j)
        }
    }
}

fn iteration_cap(vars: usize, cons: usize) -> usize {
    50 * (vars + cons + 1)
}

/// Solves the safety-filter QP. `u_nom` is clamped into the box first, so the
/// objective measures deviation from the clamped nominal.
pub fn solve_qp(problem: &QpProblem) -> FilterResult {
    let n = problem.u_nom.len();
    let m = problem.rows.len();
    let u_max = problem.u_max;
    let finite = problem.u_nom.iter().all(|x| x.is_finite())
        && u_max.is_finite()
        && u_max >= 0.0
        && problem.rows.iter().all(|r| r.is_finite() && r.a.len() == n);
    if !finite {
        let u_star = if problem.u_nom.iter().all(|x| x.is_finite()) && u_max.is_finite() {
            clamp_box(&problem.u_nom, u_max.abs())
        } else {
            DVector::zeros(n)
        };
        return FilterResult {
            u_star,
            status: QpStatus::Infeasible,
            active: Vec::new(),
            multipliers: Vec::new(),
            active_tags: Vec::new(),
            slack: vec![0.0; m],
            iterations: 0,
        };
    }
    let u0 = clamp_box(&problem.u_nom, u_max);

    // Normalized rows for the exact phases; degenerate rows either hold for
    // every u (skip) or for none (forces relaxation).
    let mut norm_rows = Vec::with_capacity(m);
    let mut norm_rhs = Vec::with_capacity(m);
    let mut kept = Vec::with_capacity(m);
    let mut hopeless = false;
    for (i, row) in problem.rows.iter().enumerate() {
        let na = row.a.norm();
        if na < DEGENERATE_ROW_NORM {
            hopeless |= row.b < 0.0;
            continue;
        }
        norm_rows.push(&row.a / na);
        norm_rhs.push(row.b / na);
        kept.push(i);
    }
    let k = kept.len();

    let violated = (0..k).any(|r| norm_rows[r].dot(&u0) > norm_rhs[r]);
    let mut start = Some(u0.clone());
    let mut phase1_iters = 0;
    if !hopeless && violated {
        // Elastic phase 1 over (u, s).
        let dim = n + k;
        let mut g_rows = Vec::with_capacity(2 * k + 2 * n);
        let mut g_rhs = Vec::with_capacity(2 * k + 2 * n);
        for r in 0..k {
            let mut row = DVector::zeros(dim);
            row.rows_mut(0, n).copy_from(&norm_rows[r]);
            row[n + r] = -1.0;
            g_rows.push(row);
            g_rhs.push(norm_rhs[r]);
        }
        for r in 0..k {
            let mut row = DVector::zeros(dim);
            row[n + r] = -1.0;
            g_rows.push(row);
            g_rhs.push(0.0);
        }
        let (br, bb) = box_constraints(n, 0, dim, u_max);
        g_rows.extend(br);
        g_rhs.extend(bb);
        let mut c = vec![0.0; dim];
        c[..n].copy_from_slice(u0.as_slice());
        let mut l = vec![0.0; dim];
        l[n..].iter_mut().for_each(|x| *x = ELASTIC_PENALTY * (1.0 + u_max));
        let qp = ActiveSetQp { h: vec![1.0; dim], c, l, g_rows, g_rhs };
        let mut x0 = DVector::zeros(dim);
        x0.rows_mut(0, n).copy_from(&u0);
        for r in 0..k {
            x0[n + r] = (norm_rows[r].dot(&u0) - norm_rhs[r]).max(0.0);
        }
        let cap = iteration_cap(dim, qp.g_rows.len());
        start = match qp.solve(x0, cap) {
            Some(sol) => {
                phase1_iters = sol.iterations;
                let s_max = sol.x.rows(n, k).iter().fold(0.0f64, |acc, s| acc.max(*s));
                (s_max <= FEASIBILITY_TOL).then(|| sol.x.rows(0, n).into_owned())
            }
            None => None,
        };
    }

    if let (false, Some(u_start)) = (hopeless, start) {
        let mut g_rows = norm_rows.clone();
        let mut g_rhs = norm_rhs.clone();
        let (br, bb) = box_constraints(n, 0, n, u_max);
        g_rows.extend(br);
        g_rhs.extend(bb);
        let qp = ActiveSetQp { h: vec![1.0; n], c: u0.iter().copied().collect(), l: vec![0.0; n], g_rows, g_rhs };
        let cap = iteration_cap(n, qp.g_rows.len());
        if let Some(sol) = qp.solve(u_start, cap) {
            // Multipliers refer to normalized rows; rescale to the caller's rows.
            let active: Vec<ActiveConstraint> = sol
                .working
                .iter()
                .map(|&w| match decode(w, k) {
                    ActiveConstraint::Row(r) => ActiveConstraint::Row(kept[r]),
                    other => other,
                })
                .collect();
            let multipliers = sol
                .working
                .iter()
                .zip(&sol.multipliers)
                .map(|(&w, &lam)| if w < k { lam / problem.rows[kept[w]].a.norm() } else { lam })
                .collect();
            return finish(problem, clamp_box(&sol.x, u_max), QpStatus::Optimal, active, multipliers, vec![0.0; m], phase1_iters + sol.iterations);
        }
        return infeasible(problem, u0, phase1_iters);
    }

    relaxed(problem, u0, phase1_iters)
}

/// Quadratic-penalty re-solve over `(u, s)` on the caller's (unnormalized)
/// rows. Always feasible from `u = clamp(u_nom)`, `s = max(0, aᵀu − b)`.
fn relaxed(problem: &QpProblem, u0: DVector<f64>, prior_iters: usize) -> FilterResult {
    let n = u0.len();
    let m = problem.rows.len();
    let dim = n + m;
    let mut g_rows = Vec::with_capacity(m + 2 * n);
    let mut g_rhs = Vec::with_capacity(m + 2 * n);
    for (i, row) in problem.rows.iter().enumerate() {
        let mut r = DVector::zeros(dim);
        r.rows_mut(0, n).copy_from(&row.a);
        r[n + i] = -1.0;
        g_rows.push(r);
        g_rhs.push(row.b);
    }
    let (br, bb) = box_constraints(n, 0, dim, problem.u_max);
    g_rows.extend(br);
    g_rhs.extend(bb);
    let mut h = vec![1.0; dim];
    h[n..].iter_mut().for_each(|x| *x = RELAXATION_WEIGHT);
    let mut c = vec![0.0; dim];
    c[..n].copy_from_slice(u0.as_slice());
    let qp = ActiveSetQp { h, c, l: vec![0.0; dim], g_rows, g_rhs };
    let mut x0 = DVector::zeros(dim);
    x0.rows_mut(0, n).copy_from(&u0);
    for (i, row) in problem.rows.iter().enumerate() {
        x0[n + i] = (row.a.dot(&u0) - row.b).max(0.0);
    }
    let cap = iteration_cap(dim, qp.g_rows.len());
    match qp.solve(x0, cap) {
        Some(sol) => {
            let u = clamp_box(&sol.x.rows(0, n).into_owned(), problem.u_max);
            let slack = problem.rows.iter().map(|r| (r.a.dot(&u) - r.b).max(0.0)).collect();
            let active = sol.working.iter().map(|&w| decode(w, m)).collect();
            finish(problem, u, QpStatus::Relaxed, active, Vec::new(), slack, prior_iters + sol.iterations)
        }
        None => infeasible(problem, u0, prior_iters),
    }
}

fn infeasible(problem: &QpProblem, u0: DVector<f64>, iterations: usize) -> FilterResult {
    log::warn!("safety QP hit its iteration cap; emitting the clamped nominal torque");
    let slack = problem.rows.iter().map(|r| (r.a.dot(&u0) - r.b).max(0.0)).collect();
    finish(problem, u0, QpStatus::Infeasible, Vec::new(), Vec::new(), slack, iterations)
}

fn finish(
    problem: &QpProblem,
    u_star: DVector<f64>,
    status: QpStatus,
    active: Vec<ActiveConstraint>,
    multipliers: Vec<f64>,
    slack: Vec<f64>,
    iterations: usize,
) -> FilterResult {
    let active_tags = active
        .iter()
        .filter_map(|c| match c {
            ActiveConstraint::Row(i) => Some(problem.rows[*i].tag),
            _ => None,
        })
        .collect();
    FilterResult { u_star, status, active, multipliers, active_tags, slack, iterations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn row(a: [f64; 2], b: f64) -> ConstraintRow {
        ConstraintRow { a: DVector::from_column_slice(&a), b, tag: RowTag::Singularity }
    }

    fn problem(u: [f64; 2], rows: Vec<ConstraintRow>) -> QpProblem {
        QpProblem { u_nom: DVector::from_column_slice(&u), rows, u_max: 5.0 }
    }

    #[test]
    fn unconstrained_returns_nominal() {
        let r = solve_qp(&problem([1.0, -2.0], vec![]));
        assert_eq!(r.status, QpStatus::Optimal);
        assert_eq!(r.u_star.as_slice(), &[1.0, -2.0]);
        assert!(r.active.is_empty());
    }

    #[test]
    fn nominal_outside_box_is_clamped() {
        let r = solve_qp(&problem([9.0, -7.0], vec![]));
        assert_eq!(r.u_star.as_slice(), &[5.0, -5.0]);
    }

    #[test]
    fn halfspace_projection() {
        let a = [1.0, 2.0];
        let r = solve_qp(&problem([2.0, 2.0], vec![row(a, 1.0)]));
        // u − a (aᵀu − b)/‖a‖² with aᵀu = 6.
        assert_abs_diff_eq!(r.u_star[0], 2.0 - 5.0 / 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.u_star[1], 2.0 - 10.0 / 5.0, epsilon = 1e-12);
        assert_eq!(r.active, vec![ActiveConstraint::Row(0)]);
        assert_abs_diff_eq!(r.multipliers[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn contradictory_rows_relax() {
        let rows = vec![row([1.0, 0.0], -1.0), row([-1.0, 0.0], -1.0)];
        let r = solve_qp(&problem([0.0, 0.0], rows));
        assert_eq!(r.status, QpStatus::Relaxed);
        assert!(r.slack_total() > 1.9);
        assert!(r.u_star.amax() <= 5.0);
    }

    #[test]
    fn row_outside_box_reach_relaxes_within_box() {
        let r = solve_qp(&problem([0.0, 0.0], vec![row([1.0, 0.0], -8.0)]));
        assert_eq!(r.status, QpStatus::Relaxed);
        assert_eq!(r.u_star[0], -5.0);
        assert_abs_diff_eq!(r.slack[0], 3.0, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_rows() {
        let slack = solve_qp(&problem([1.0, 1.0], vec![row([0.0, 0.0], 1.0)]));
        assert_eq!(slack.status, QpStatus::Optimal);
        let bad = solve_qp(&problem([1.0, 1.0], vec![row([0.0, 0.0], -1.0)]));
        assert_eq!(bad.status, QpStatus::Relaxed);
    }

    #[test]
    fn non_finite_input_is_reported() {
        let r = solve_qp(&problem([f64::NAN, 0.0], vec![]));
        assert_eq!(r.status, QpStatus::Infeasible);
        assert_eq!(r.u_star.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn vertex_solution() {
        let rows = vec![row([1.0, 1.0], 0.0), row([1.0, -1.0], 0.0)];
        let r = solve_qp(&problem([3.0, 0.5], rows));
        assert_abs_diff_eq!(r.u_star[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.u_star[1], 0.0, epsilon = 1e-12);
        assert_eq!(r.active.len(), 2);
    }

    #[test]
    fn large_rhs_relaxation_converges() {
        let rows = vec![
            row([4.077528206777307, -13.242034416154445], -6.64853197425199e1),
            row([4.8280543533975635, -11.60647261263214], 2.7101204551232894e2),
            row([-4.8280543533975635, 11.60647261263214], 2.693717928920417e2),
            row([-11.60647261263214, 37.69276433972262], 1.766943390185641e2),
            row([11.60647261263214, -37.69276433972262], 6.1294992774208566e1),
        ];
        let r = solve_qp(&problem([0.27313396360819814, -0.35863804699848145], rows));
        assert_ne!(r.status, QpStatus::Infeasible, "{r:?}");
    }
}
