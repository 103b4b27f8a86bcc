use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use singcbf_core::barriers::{h_value, BarrierParams};
use singcbf_core::filter::CbfFilter;
use singcbf_core::geometry::EtaModel;
use singcbf_core::gp::ZeroMismatch;
use singcbf_core::robot::{JointState, RobotParams};
use singcbf_core::tuning::{
    check_actuation, compute_model_bounds, psi, xi, ModelBounds, NormFactor, SearchConfig, TuningError, TuningProblem,
};
use singcbf_core::SingularityGeometry;

fn bounds(lambda_bar: f64) -> ModelBounds {
    let nominal = RobotParams::reference().without_tip();
    compute_model_bounds(&nominal, &SingularityGeometry::default(), 61).unwrap().with_lambda_bar(lambda_bar)
}

fn search(h_floor: f64) -> SearchConfig {
    SearchConfig { per_axis: 7, starts: 4, h_floor, ..SearchConfig::default() }
}

fn problem<'a>(b: ModelBounds, zero: &'a ZeroMismatch, norm: NormFactor) -> TuningProblem<'a> {
    TuningProblem { bounds: b, geom: SingularityGeometry::default(), params: BarrierParams::reference(), mismatch: zero, norm }
}

#[test]
fn coriolis_bound_matches_closed_form() {
    // Planar arm: C = s(θ)·[[−v2, −(v1 + v2)], [v1, 0]] with
    // s = m2 l1 l2 / 2 · sin θ without the tip; |sin θ| peaks at the box edge.
    let r = RobotParams::reference().without_tip();
    let (l1, l2) = (r.links[0].length, r.links[1].length);
    let k = r.links[1].mass() * l1 * l2 / 2.0;
    let s = k * (r.q_max + r.q_ini).sin();
    let oracle = (0..100_000)
        .map(|i| {
            let a = std::f64::consts::PI * i as f64 / 100_000.0;
            let (v1, v2) = (a.cos(), a.sin());
            DMatrix::from_row_slice(2, 2, &[-v2, -(v1 + v2), v1, 0.0]).singular_values().max() * s.abs()
        })
        .fold(0.0, f64::max);
    let b = bounds(0.0);
    assert!(b.c_max <= oracle * (1.0 + 1e-9), "{} > {oracle}", b.c_max);
    assert!(b.c_max >= oracle * (1.0 - 1e-4), "{} << {oracle}", b.c_max);
}

#[test]
fn gravity_bound_reflects_plane() {
    assert_eq!(bounds(0.0).g_max, 0.0);
    let tilted = RobotParams { planar: false, ..RobotParams::reference() }.without_tip();
    let b = compute_model_bounds(&tilted, &SingularityGeometry::default(), 31).unwrap();
    assert!(b.g_max > 0.0);
}

#[test]
fn psi_is_monotone_in_each_input() {
    let b = bounds(1.0);
    for norm in [NormFactor::Paper, NormFactor::Tight] {
        let base = psi(&b, norm, 0.5, 10.0, 1.0);
        assert!(psi(&b, norm, 0.6, 10.0, 1.0) > base);
        assert!(psi(&b, norm, 0.5, 11.0, 1.0) > base);
        assert!(psi(&b.clone().with_lambda_bar(2.0), norm, 0.5, 10.0, 1.0) > base);
        assert!(psi(&ModelBounds { u_max: 2.0 * b.u_max, ..b.clone() }, norm, 0.5, 10.0, 1.0) > base);
        assert!(xi(&b, norm, 0.6) > xi(&b, norm, 0.5));
    }
}

#[test]
fn delta_star_matches_closed_form_for_constant_psi() {
    // With μ ≡ 0 and a linear β₁, Ψ does not depend on x, so the supremum of
    // Ψ / h³ sits on the floor h = h_floor.
    let zero = ZeroMismatch { dof: 2 };
    let b = bounds(0.5);
    let p = problem(b.clone(), &zero, NormFactor::Paper);
    let h_floor = 0.05;
    let got = p.delta_star(&search(h_floor)).unwrap();
    let oracle = psi(&b, NormFactor::Paper, 0.0, p.params.gamma, 1.0) / h_floor.powi(3);
    assert!((got.value - oracle).abs() <= 1e-3 * oracle, "{} vs {oracle}", got.value);
    assert!(got.value <= oracle * (1.0 + 1e-12));
}

#[test]
fn delta_star_dominates_psi_over_region() {
    let zero = ZeroMismatch { dof: 2 };
    let p = problem(bounds(0.5), &zero, NormFactor::Paper);
    let h_floor = 0.05;
    let d = p.delta_star(&search(h_floor)).unwrap().value;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut hit, mut tries) = (0, 0);
    while hit < 10_000 {
        tries += 1;
        let x = JointState::from_slices(
            &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        );
        if !p.in_region(&x, h_floor) {
            continue;
        }
        // Margin for Nelder–Mead stopping short of the floor.
        let h = h_value(&p.geom, &p.params, &x);
        assert!(p.psi_at(&x) <= d * p.params.beta2.eval(h) * (1.0 + 1e-3));
        hit += 1;
    }
    assert!(tries < 1_000_000);
}

#[test]
fn delta_star_responds_to_inputs() {
    let zero = ZeroMismatch { dof: 2 };
    let b = bounds(0.5);
    let base = problem(b.clone(), &zero, NormFactor::Paper).delta_star(&search(0.05)).unwrap().value;
    let stronger = ModelBounds { u_max: 2.0 * b.u_max, ..b.clone() };
    let doubled = problem(stronger, &zero, NormFactor::Paper).delta_star(&search(0.05)).unwrap().value;
    assert!(doubled > base);
    let higher_floor = problem(b, &zero, NormFactor::Paper).delta_star(&search(0.1)).unwrap().value;
    assert!(higher_floor <= base);
}

#[test]
fn gamma_star_closed_form_and_margin_dependence() {
    let zero = ZeroMismatch { dof: 2 };
    let k = 3f64.sqrt();
    let mut prev = f64::INFINITY;
    for lb in [0.0, 1.0, 2.0] {
        let b = bounds(lb);
        let got = problem(b.clone(), &zero, NormFactor::Paper).gamma_star(&search(0.05)).unwrap().value;
        let oracle = (k * b.eta_qmax() * b.m_max * b.u_max - xi(&b, NormFactor::Paper, 0.0)) / (k * b.eta_qmax() * b.v_max);
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs(), "{got} vs {oracle}");
        assert!(got < prev);
        prev = got;
    }
}

#[test]
fn gamma_star_requires_actuation() {
    let zero = ZeroMismatch { dof: 2 };
    let b = bounds(0.0);
    let check = check_actuation(&b, NormFactor::Tight, 0.0);
    let lb = 1.0 + check.margin * 2f64.sqrt() * b.eta_qmax() * b.m_max;
    match problem(bounds(lb), &zero, NormFactor::Tight).gamma_star(&search(0.05)) {
        Err(TuningError::Actuation { deficit }) => assert!(deficit > 0.0),
        other => panic!("expected an actuation failure, got {other:?}"),
    }
}

/// With `γ ≤ γ*` the singularity condition on `h = 0` admits a torque in the
/// actuator box, so the QP never has to relax there.
#[test]
fn gamma_star_keeps_boundary_feasible() {
    let zero = ZeroMismatch { dof: 2 };
    let lambda_bar = 1.0;
    let b = bounds(lambda_bar);
    let gamma = problem(b, &zero, NormFactor::Paper).gamma_star(&search(0.05)).unwrap().value;
    let nominal = RobotParams::reference().without_tip();
    let geom = SingularityGeometry::default();
    let params = BarrierParams { gamma, ..BarrierParams::reference() };
    let f = CbfFilter { robot: &nominal, geom, params, mismatch: &zero, lambda_bar };
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut probed = 0;
    while probed < 2000 {
        let q = DVector::from_column_slice(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        let z = geom.z_value(&q);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = DVector::from_column_slice(&[angle.cos(), angle.sin()]);
        let gv = geom.grad_eta(&q).dot(&dir);
        if z < 0.0 || gv.abs() < 1e-9 {
            continue;
        }
        let v = &dir * (gamma * z / gv);
        if v.amax() > nominal.v_max {
            continue;
        }
        let x = JointState::new(q, v);
        let (_, sing) = f.rows(&x).unwrap();
        let row = sing.row().expect("regular state").clone();
        // min over the box of aᵀu is −u_max‖a‖₁.
        assert!(-nominal.u_max * row.a.lp_norm(1) <= row.b, "infeasible at {x:?}");
        probed += 1;
    }
}
