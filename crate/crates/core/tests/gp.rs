use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use singcbf_core::gp::{
    estimate_rkhs_bounds, interpolant_rkhs_norm, Dataset, DatasetRow, GpError, GpModel, KernelParams, ResidualSample,
};

const NOISE_VAR: f64 = 1e-3;

fn rbf(k: &KernelParams, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    k.sf * k.sf * (-d2 / (2.0 * k.el * k.el)).exp()
}

fn random_state(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let q = std::f64::consts::PI / 3.0;
    vec![rng.gen_range(-q..q), rng.gen_range(-q..q), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]
}

fn dataset(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Dataset {
    let rows = inputs
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (x, y))| DatasetRow {
            sample: ResidualSample {
                t: i as f64,
                q: DVector::from_column_slice(&x[..2]),
                v: DVector::from_column_slice(&x[2..]),
                qdd: DVector::zeros(2),
                u: DVector::zeros(2),
            },
            residual: DVector::from_column_slice(y),
        })
        .collect();
    Dataset { rows, noise_variance: NOISE_VAR }
}

/// A function in the kernel's RKHS, `f = Σ c_j k(·, z_j)`, with its norm.
struct RkhsFunction {
    centres: Vec<Vec<f64>>,
    coeffs: Vec<f64>,
    kernel: KernelParams,
}

impl RkhsFunction {
    fn random(rng: &mut ChaCha8Rng, kernel: KernelParams, centres: usize, norm: f64) -> Self {
        let centres: Vec<Vec<f64>> = (0..centres).map(|_| random_state(rng)).collect();
        let raw: Vec<f64> = (0..centres.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Self { centres, coeffs: raw, kernel };
        let scale = norm / f.norm();
        Self { coeffs: f.coeffs.iter().map(|c| c * scale).collect(), ..f }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.centres.iter().zip(&self.coeffs).map(|(z, c)| c * rbf(&self.kernel, x, z)).sum()
    }

    /// `sqrt(cᵀ K c)`.
    fn norm(&self) -> f64 {
        let mut s = 0.0;
        for (zi, ci) in self.centres.iter().zip(&self.coeffs) {
            for (zj, cj) in self.centres.iter().zip(&self.coeffs) {
                s += ci * cj * rbf(&self.kernel, zi, zj);
            }
        }
        s.sqrt()
    }
}

/// Posterior mean and variance via an LU solve of the dense system.
fn lu_posterior(k: &KernelParams, xs: &[Vec<f64>], y: &[f64], x: &[f64]) -> (f64, f64) {
    let m = xs.len();
    let gram = DMatrix::from_fn(m, m, |i, j| rbf(k, &xs[i], &xs[j]) + if i == j { NOISE_VAR } else { 0.0 });
    let lu = gram.lu();
    let kx = DVector::from_fn(m, |i, _| rbf(k, &xs[i], x));
    let alpha = lu.solve(&DVector::from_column_slice(y)).unwrap();
    let w = lu.solve(&kx).unwrap();
    (kx.dot(&alpha), k.sf * k.sf - kx.dot(&w))
}

#[test]
fn posterior_matches_dense_lu() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let kernels = [KernelParams::new(0.5, 0.8), KernelParams::new(0.01, 1.0)];
    let xs: Vec<Vec<f64>> = (0..60).map(|_| random_state(&mut rng)).collect();
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0].sin() + 0.3 * x[2], 0.01 * x[1] * x[3]]).collect();
    let gp = GpModel::fit(&dataset(&xs, &ys), &kernels, &[50.0, 50.0]).unwrap();
    for _ in 0..50 {
        let x = random_state(&mut rng);
        let (mean, var) = gp.predict(&x);
        for d in 0..2 {
            let y: Vec<f64> = ys.iter().map(|v| v[d]).collect();
            let (m, v) = lu_posterior(&kernels[d], &xs, &y, &x);
            assert!((mean[d] - m).abs() < 1e-9 * (1.0 + m.abs()), "mean {d}: {} vs {m}", mean[d]);
            assert!((var[d] - v).abs() < 1e-9 * kernels[d].sf.powi(2), "var {d}: {} vs {v}", var[d]);
        }
    }
}

#[test]
fn error_bound_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let kernels = [KernelParams::new(0.3, 1.0); 2];
    let xs: Vec<Vec<f64>> = (0..40).map(|_| random_state(&mut rng)).collect();
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![0.1 * x[0], -0.2 * x[3]]).collect();
    let bounds = [3.0, 4.0];
    let gp = GpModel::fit(&dataset(&xs, &ys), &kernels, &bounds).unwrap();
    let m = xs.len() as f64;
    let omega: Vec<f64> = (0..2)
        .map(|d| {
            let y: Vec<f64> = ys.iter().map(|v| v[d]).collect();
            let gram = DMatrix::from_fn(xs.len(), xs.len(), |i, j| {
                rbf(&kernels[d], &xs[i], &xs[j]) + if i == j { NOISE_VAR } else { 0.0 }
            });
            let yv = DVector::from_column_slice(&y);
            yv.dot(&gram.lu().solve(&yv).unwrap())
        })
        .collect();
    for _ in 0..20 {
        let x = random_state(&mut rng);
        let lambda: f64 = (0..2)
            .map(|d| {
                let y: Vec<f64> = ys.iter().map(|v| v[d]).collect();
                let (_, var) = lu_posterior(&kernels[d], &xs, &y, &x);
                (bounds[d] * bounds[d] - omega[d] + m) * var
            })
            .sum::<f64>()
            .sqrt();
        let got = gp.error_bound(&x).unwrap();
        assert!((got - lambda).abs() < 1e-9 * lambda, "{got} vs {lambda}");
    }
    // λ̄ uses the prior variance sf² in every dimension.
    let lbar: f64 = (0..2).map(|d| (bounds[d] * bounds[d] - omega[d] + m) * 0.09).sum::<f64>().sqrt();
    assert!((gp.lambda_bar() - lbar).abs() < 1e-9 * lbar);
}

#[test]
fn training_point_prediction_is_close_to_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = [KernelParams::new(1.0, 1.0); 2];
    let xs: Vec<Vec<f64>> = (0..30).map(|_| random_state(&mut rng)).collect();
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0].cos(), x[1] - x[2]]).collect();
    let gp = GpModel::fit(&dataset(&xs, &ys), &k, &[100.0, 100.0]).unwrap();
    for (x, y) in xs.iter().zip(&ys) {
        let mu = gp.mean(x);
        assert!((mu[0] - y[0]).abs() < 0.05 && (mu[1] - y[1]).abs() < 0.05);
    }
}

#[test]
fn refactorized_model_predicts_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = [KernelParams::new(0.01, 1.0); 2];
    let xs: Vec<Vec<f64>> = (0..80).map(|_| random_state(&mut rng)).collect();
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![0.3 * x[0], 0.1 * x[3]]).collect();
    let gp = GpModel::fit(&dataset(&xs, &ys), &k, &[100.0, 60.0]).unwrap();
    let alphas = gp.outputs.iter().map(|o| o.alpha.clone()).collect();
    let omegas: Vec<f64> = gp.outputs.iter().map(|o| o.omega).collect();
    let bounds: Vec<f64> = gp.outputs.iter().map(|o| o.rkhs_bound).collect();
    let back = GpModel::refactorize(gp.points.clone(), gp.noise_variance, &k, alphas, &omegas, &bounds).unwrap();
    assert_eq!(back.lambda_bar(), gp.lambda_bar());
    for _ in 0..20 {
        let x = random_state(&mut rng);
        assert_eq!(back.predict(&x), gp.predict(&x));
    }
}

#[test]
fn regularized_norm_never_exceeds_true_rkhs_norm() {
    // yᵀ(K + σ²I)⁻¹y ≤ yᵀK⁻¹y ≤ ‖f‖² for samples of f.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let kernel = KernelParams::new(0.01, 1.0);
    for _ in 0..5 {
        let f = RkhsFunction::random(&mut rng, kernel, 15, 50.0);
        let xs: Vec<Vec<f64>> = (0..150).map(|_| random_state(&mut rng)).collect();
        let points = DMatrix::from_fn(4, xs.len(), |i, j| xs[j][i]);
        let y = DVector::from_iterator(xs.len(), xs.iter().map(|x| f.eval(x)));
        let est = interpolant_rkhs_norm(&kernel, &points, &y, NOISE_VAR).unwrap();
        assert!(est <= f.norm() * (1.0 + 1e-9), "{est} > {}", f.norm());
    }
}

/// Deterministic error bound on functions of known RKHS norm with bounded
/// noise `|v| ≤ σ_v`: `‖μ(x) − f(x)‖ ≤ λ(x)` at every probe.
#[test]
fn error_bound_holds_for_rkhs_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let kernel = KernelParams::new(0.01, 1.0);
    let sigma = NOISE_VAR.sqrt();
    let fs = [RkhsFunction::random(&mut rng, kernel, 20, 60.0), RkhsFunction::random(&mut rng, kernel, 20, 30.0)];
    let xs: Vec<Vec<f64>> = (0..200).map(|_| random_state(&mut rng)).collect();
    let ys: Vec<Vec<f64>> =
        xs.iter().map(|x| fs.iter().map(|f| f.eval(x) + rng.gen_range(-sigma..=sigma)).collect()).collect();
    let bounds: Vec<f64> = fs.iter().map(|f| f.norm()).collect();
    let gp = GpModel::fit(&dataset(&xs, &ys), &[kernel; 2], &bounds).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let x = random_state(&mut rng);
        let err = (gp.mean(&x) - DVector::from_iterator(2, fs.iter().map(|f| f.eval(&x)))).norm();
        let bound = gp.error_bound(&x).unwrap();
        worst = worst.max(err / bound);
    }
    assert!(worst <= 1.0, "worst |mu - f| / lambda = {worst}");
    let est = estimate_rkhs_bounds(&dataset(&xs, &ys), &[kernel; 2], 1.0).unwrap();
    assert!(est.iter().all(|b| b.is_finite() && *b > 0.0));
}

#[test]
fn bound_guard_is_a_hard_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = [KernelParams::new(0.01, 1.0); 2];
    let xs: Vec<Vec<f64>> = (0..20).map(|_| random_state(&mut rng)).collect();
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![30.0 * x[0], 0.0]).collect();
    match GpModel::fit(&dataset(&xs, &ys), &k, &[0.0, 10.0]) {
        Err(GpError::RkhsBoundTooSmall { dim: 0, .. }) => {}
        other => panic!("expected RkhsBoundTooSmall, got {other:?}"),
    }
}
