use nalgebra::{DVector, Matrix2, Vector2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use singcbf_core::barriers::{ConstraintRow, RowTag};
use singcbf_core::qp::{solve_qp, QpProblem, QpStatus};

const U_MAX: f64 = 5.0;

fn row(a: [f64; 2], b: f64, i: usize) -> ConstraintRow {
    ConstraintRow { a: DVector::from_column_slice(&a), b, tag: RowTag::VelUpper(i) }
}

/// All half-spaces of the problem (rows, then the four box faces) as
/// `(a, b)` with `aᵀu ≤ b`.
fn halfspaces(p: &QpProblem) -> Vec<(Vector2<f64>, f64)> {
    let mut hs: Vec<(Vector2<f64>, f64)> = p.rows.iter().map(|r| (Vector2::new(r.a[0], r.a[1]), r.b)).collect();
    for j in 0..2 {
        let mut e = Vector2::zeros();
        e[j] = 1.0;
        hs.push((e, p.u_max));
        hs.push((-e, p.u_max));
    }
    hs
}

/// Exhaustive active-set enumeration: project the clamped nominal onto the
/// affine hull of every subset of at most two constraints, keep the feasible
/// candidates, return the closest. `None` when no candidate is feasible.
fn enumerate(p: &QpProblem) -> Option<Vector2<f64>> {
    let u0 = Vector2::new(p.u_nom[0].clamp(-p.u_max, p.u_max), p.u_nom[1].clamp(-p.u_max, p.u_max));
    let hs = halfspaces(p);
    let feasible = |u: &Vector2<f64>| hs.iter().all(|(a, b)| a.dot(u) <= b + 1e-9 * (1.0 + b.abs()));
    let mut candidates = vec![u0];
    for i in 0..hs.len() {
        let (a, b) = hs[i];
        candidates.push(u0 - a * ((a.dot(&u0) - b) / a.norm_squared()));
        for &(c, d) in &hs[i + 1..] {
            let m = Matrix2::new(a[0], a[1], c[0], c[1]);
            if m.determinant().abs() < 1e-12 {
                continue;
            }
            candidates.push(m.try_inverse().unwrap() * Vector2::new(b, d));
        }
    }
    candidates
        .into_iter()
        .filter(feasible)
        .min_by(|x, y| (x - u0).norm_squared().total_cmp(&(y - u0).norm_squared()))
}

fn random_problem(rng: &mut ChaCha8Rng) -> QpProblem {
    let m = rng.gen_range(0..=6);
    let rows = (0..m)
        .map(|i| row([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], rng.gen_range(-3.0..3.0), i))
        .collect();
    QpProblem {
        u_nom: DVector::from_column_slice(&[rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)]),
        rows,
        u_max: U_MAX,
    }
}

#[test]
fn matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut feasible, mut infeasible) = (0, 0);
    for k in 0..1000 {
        let p = random_problem(&mut rng);
        let res = solve_qp(&p);
        match enumerate(&p) {
            Some(u) => {
                feasible += 1;
                assert_eq!(res.status, QpStatus::Optimal, "instance {k}: {p:?}");
                let err = (res.u_star[0] - u[0]).abs().max((res.u_star[1] - u[1]).abs());
                assert!(err <= 1e-6, "instance {k}: error {err:e}");
            }
            None => {
                infeasible += 1;
                assert_eq!(res.status, QpStatus::Relaxed, "instance {k}");
            }
        }
        assert!(res.u_star.amax() <= U_MAX);
    }
    assert!(feasible > 500 && infeasible > 10, "{feasible} feasible / {infeasible} infeasible");
}

/// Stationarity: `u0 − u*` lies in the cone of the active normals; checked by
/// a least-squares fit with non-negative coefficients.
#[test]
fn kkt_conditions_at_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut checked = 0;
    for _ in 0..500 {
        let p = random_problem(&mut rng);
        let res = solve_qp(&p);
        if res.status != QpStatus::Optimal {
            continue;
        }
        let u = Vector2::new(res.u_star[0], res.u_star[1]);
        let u0 = Vector2::new(p.u_nom[0].clamp(-U_MAX, U_MAX), p.u_nom[1].clamp(-U_MAX, U_MAX));
        let active: Vec<Vector2<f64>> = halfspaces(&p)
            .into_iter()
            .filter(|(a, b)| (a.dot(&u) - b).abs() <= 1e-9 * (1.0 + b.abs()))
            .map(|(a, _)| a)
            .collect();
        let r = u0 - u;
        if active.is_empty() {
            assert!(r.norm() <= 1e-12);
            continue;
        }
        // Best non-negative combination over subsets of at most two normals.
        let mut best = f64::INFINITY;
        for i in 0..active.len() {
            let a = active[i];
            let t = a.dot(&r) / a.norm_squared();
            if t >= -1e-10 {
                best = best.min((r - a * t).norm());
            }
            for c in &active[i + 1..] {
                let m = Matrix2::from_columns(&[a, *c]);
                if let Some(inv) = (m.transpose() * &m).try_inverse() {
                    let coef = inv * m.transpose() * r;
                    if coef.iter().all(|&x| x >= -1e-10) {
                        best = best.min((r - m * coef).norm());
                    }
                }
            }
        }
        assert!(best <= 1e-8, "stationarity residual {best:e}");
        checked += 1;
    }
    assert!(checked > 200);
}

#[test]
fn halfspace_projection_closed_form() {
    let a = [0.6, -0.8];
    let p = QpProblem { u_nom: DVector::from_column_slice(&[1.0, -2.0]), rows: vec![row(a, 0.5, 0)], u_max: U_MAX };
    let res = solve_qp(&p);
    let excess = 0.6 * 1.0 + 0.8 * 2.0 - 0.5;
    assert!((res.u_star[0] - (1.0 - 0.6 * excess)).abs() < 1e-12);
    assert!((res.u_star[1] - (-2.0 + 0.8 * excess)).abs() < 1e-12);
    assert_eq!(res.status, QpStatus::Optimal);
}

proptest! {
    #[test]
    fn box_holds_in_every_status(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = random_problem(&mut rng);
        // Push some rows far outside the box to exercise relaxation.
        for r in &mut p.rows {
            r.b *= 10.0;
        }
        let res = solve_qp(&p);
        prop_assert!(res.u_star.amax() <= U_MAX);
        prop_assert!(res.status != QpStatus::Infeasible);
        if res.status == QpStatus::Optimal {
            prop_assert!(res.slack.iter().all(|s| *s == 0.0));
        }
    }

    #[test]
    fn idempotent(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng);
        let first = solve_qp(&p);
        prop_assume!(first.status == QpStatus::Optimal);
        let again = solve_qp(&QpProblem { u_nom: first.u_star.clone(), ..p });
        // Re-solving may take a different pivot path; agreement is to roundoff.
        prop_assert!((again.u_star - &first.u_star).amax() <= 1e-10 * (1.0 + first.u_star.amax()));
    }

    #[test]
    fn satisfied_nominal_is_returned_exactly(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = random_problem(&mut rng);
        let u0 = p.u_nom.map(|u| u.clamp(-U_MAX, U_MAX));
        for r in &mut p.rows {
            r.b = r.b.abs() + r.a.dot(&u0);
        }
        let res = solve_qp(&p);
        prop_assert_eq!(res.status, QpStatus::Optimal);
        prop_assert_eq!(res.u_star, u0);
    }
}
