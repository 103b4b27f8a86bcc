//! End-to-end experiment steps shared by the CLI and the test suites.

use std::fmt::Write as _;

use anyhow::{anyhow, Context, Result};
use log::info;
use nalgebra::{DMatrix, DVector};
use singcbf_core::barriers::{BarrierParams, ClassK};
use singcbf_core::filter::{CbfFilter, SafetyLayer, Unfiltered};
use singcbf_core::geometry::EtaModel;
use singcbf_core::gp::{collect_residuals, Dataset, GpModel, ZeroMismatch};
use singcbf_core::robot::{JointState, Plant, RobotParams};
use singcbf_core::sim::{run_episode, Episode, EpisodeLog, Mode, PidGains, SimError, TrajectorySpec};
use singcbf_core::tuning::{
    check_actuation, compute_model_bounds, finite_difference_check, linspace, verify_derivative_bounds, xi,
    Extremum, ModelBounds, NormFactor, TuningProblem,
};
use singcbf_core::{QpStatus, SingularityGeometry};

use crate::config::RunConfig;
use crate::sweep::{logspace, CellOutcome, SweepGrid};

/// Published values the tuning report is compared against.
pub const PAPER_GAMMA_STAR: f64 = 29.987;
pub const PAPER_DELTA_STAR: f64 = 5.924;
pub const PAPER_M_MAX: f64 = 49.246;
pub const PAPER_C_MAX: f64 = 0.243;
pub const PAPER_LAMBDA_BAR: f64 = 3.52;

/// A validated configuration with every derived model object built once.
#[derive(Debug, Clone)]
pub struct Stack {
    pub config: RunConfig,
    /// The simulated plant, tip mass included.
    pub robot: RobotParams,
    /// What the filter and the tuning calculus see.
    pub nominal: RobotParams,
    pub geom: SingularityGeometry,
    pub params: BarrierParams,
    pub gains: PidGains,
}

impl Stack {
    pub fn new(config: RunConfig) -> Self {
        let robot = config.robot_params();
        Self {
            nominal: robot.without_tip(),
            robot,
            geom: config.geometry(),
            params: config.barrier_params(),
            gains: config.gains(),
            config,
        }
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    /// Unfiltered PID run of the excitation trajectory on the true plant.
    pub fn excitation_log(&self) -> Result<EpisodeLog, SimError> {
        let exc = self.config.excitation_trajectory();
        let layer = Unfiltered { robot: &self.robot, geom: self.geom, params: self.params };
        run_episode(&Episode {
            robot: &self.robot,
            reference: &exc,
            gains: &self.gains,
            dt: self.dt(),
            initial: exc.initial_state(),
            layer: &layer,
        })
    }

    /// Residuals at every step of the excitation run.
    pub fn full_dataset(&self) -> Result<Dataset> {
        let log = self.excitation_log().context("excitation episode")?;
        Ok(collect_residuals(&log.residual_samples(), &self.nominal, self.config.gp.noise_variance)?)
    }

    /// The `M`-point training set drawn with the configured seed.
    pub fn training_dataset(&self) -> Result<Dataset> {
        let full = self.full_dataset()?;
        Ok(full.subsample(self.config.gp.dataset_size, self.config.seed)?)
    }

    pub fn fit(&self, dataset: &Dataset) -> Result<GpModel> {
        let model = GpModel::fit(dataset, &self.config.kernels(), &self.config.gp.rkhs_bounds)?;
        info!("GP fitted on {} points, lambda_bar = {}", model.len(), model.lambda_bar());
        Ok(model)
    }

    pub fn simulate(
        &self,
        mode: Mode,
        gp: Option<&GpModel>,
        reference: &TrajectorySpec,
        params: BarrierParams,
    ) -> Result<EpisodeLog, SimError> {
        let zero = ZeroMismatch { dof: self.robot.dof() };
        let unfiltered = Unfiltered { robot: &self.robot, geom: self.geom, params };
        let filtered;
        let layer: &dyn SafetyLayer = match mode {
            Mode::Unfiltered => &unfiltered,
            Mode::FilteredNoGp => {
                filtered = CbfFilter { robot: &self.nominal, geom: self.geom, params, mismatch: &zero, lambda_bar: 0.0 };
                &filtered
            }
            Mode::FilteredGp => {
                let gp = gp.ok_or_else(|| SimError::Setup("mode filtered+gp needs a fitted GP".into()))?;
                filtered =
                    CbfFilter { robot: &self.nominal, geom: self.geom, params, mismatch: gp, lambda_bar: gp.lambda_bar() };
                &filtered
            }
        };
        run_episode(&Episode {
            robot: &self.robot,
            reference,
            gains: &self.gains,
            dt: self.dt(),
            initial: reference.initial_state(),
            layer,
        })
    }

    pub fn model_bounds(&self, lambda_bar: f64) -> Result<ModelBounds> {
        Ok(compute_model_bounds(&self.nominal, &self.geom, self.config.tuning.bound_resolution)?
            .with_lambda_bar(lambda_bar))
    }

    pub fn tune(&self, gp: &GpModel) -> Result<TuneReport> {
        let bounds = self.model_bounds(gp.lambda_bar())?;
        let primary = self.config.norm();
        let other = match primary {
            NormFactor::Paper => NormFactor::Tight,
            NormFactor::Tight => NormFactor::Paper,
        };
        let (a, b) = rayon::join(|| self.tune_norm(&bounds, gp, primary), || self.tune_norm(&bounds, gp, other));
        Ok(TuneReport { bounds, gp_points: gp.len(), norms: vec![a, b] })
    }

    fn tune_norm(&self, bounds: &ModelBounds, gp: &GpModel, norm: NormFactor) -> NormReport {
        let problem = TuningProblem { bounds: *bounds, geom: self.geom, params: self.params, mismatch: gp, norm };
        let search = self.config.search();
        let mu = problem.max_mean_norm(&search).map_err(|e| e.to_string());
        let mu_max = mu.as_ref().map(|e| e.value).unwrap_or(f64::NAN);
        let actuation = check_actuation(bounds, norm, mu_max);
        NormReport {
            norm,
            mu_max,
            xi_range: (xi(bounds, norm, 0.0), xi(bounds, norm, mu_max)),
            actuation_margin: actuation.margin,
            gamma_star: problem.gamma_star(&search).map_err(|e| e.to_string()),
            delta_star: problem.delta_star(&search).map_err(|e| e.to_string()),
        }
    }

    /// The sweep axes: explicit lists when configured, otherwise spans around
    /// `(γ*, δ*)`.
    pub fn sweep_axes(&self, star: Option<(f64, f64)>) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = &self.config.sweep;
        let need = || star.ok_or_else(|| anyhow!("sweep spans are relative to gamma*/delta*, which are unavailable"));
        let gammas = match &s.gamma {
            Some(g) => g.clone(),
            None => linspace(s.gamma_span[0] * need()?.0, s.gamma_span[1] * need()?.0, s.points),
        };
        let deltas = match &s.delta {
            Some(d) => d.clone(),
            None => logspace(s.delta_span[0] * need()?.1, s.delta_span[1] * need()?.1, s.points),
        };
        Ok((gammas, deltas))
    }

    /// Runs a filtered+gp episode of the reference trajectory in every cell.
    pub fn sweep(&self, gp: &GpModel, gammas: Vec<f64>, deltas: Vec<f64>, star: Option<(f64, f64)>) -> SweepGrid {
        let reference = self.config.reference_trajectory();
        SweepGrid::run(gammas, deltas, star, |gamma, delta| {
            let params = BarrierParams { gamma, delta, ..self.params };
            match self.simulate(Mode::FilteredGp, Some(gp), &reference, params) {
                Ok(log) => CellOutcome { z_min: Some(log.z_min()), relaxed: log.count_status(QpStatus::Relaxed), error: None },
                Err(e) => CellOutcome { z_min: None, relaxed: 0, error: Some(e.to_string()) },
            }
        })
    }

    /// The model-level check suite run by `validate`.
    pub fn validate(&self, eta: &dyn EtaModel, gp: &GpModel) -> Vec<Check> {
        let q_max = self.robot.q_max;
        let mut checks = Vec::new();

        let fd_samples = grid_samples(q_max, 45);
        let fd = finite_difference_check(eta, &fd_samples);
        checks.push(Check::new(
            "eta gradient vs central differences",
            fd.grad_error <= 1e-7,
            format!("max rel error {:.3e} (tol 1e-7)", fd.grad_error),
        ));
        checks.push(Check::new(
            "eta Hessian vs central differences",
            fd.hess_error <= 1e-5,
            format!("max rel error {:.3e} (tol 1e-5)", fd.hess_error),
        ));

        let bound_samples = grid_samples(q_max, 317);
        let report = verify_derivative_bounds(eta, &self.geom.direction_bounds(q_max), &bound_samples);
        checks.push(Check::new(
            "derivative bounds",
            report.passed(),
            format!(
                "{} samples, {} violations, worst |grad| ratio {:.4}, worst |hess| ratio {:.4}",
                report.samples,
                report.violations,
                report.grad_ratio(),
                report.hess_ratio()
            ),
        ));

        let skew = self.skew_symmetry_error(&grid_samples(q_max, 21));
        checks.push(Check::new("skew symmetry of Mdot - 2C", skew <= 1e-6, format!("max rel residual {skew:.3e} (tol 1e-6)")));

        let drift = self.energy_drift(1.0);
        checks.push(Check::new(
            "energy conservation (unforced, 1 s)",
            drift <= 1e-6,
            format!("relative drift {drift:.3e} (tol 1e-6)"),
        ));

        let mono = [ClassK::Linear, ClassK::Cubic, ClassK::Arctan].iter().all(|k| class_k_ok(*k));
        checks.push(Check::new("class-K functions", mono, "strictly increasing on 1000 points, zero at zero".into()));

        let lb = gp.lambda_bar();
        checks.push(Check::new("GP error bound", lb.is_finite() && lb > 0.0, format!("lambda_bar = {lb}")));

        match self.model_bounds(lb) {
            Ok(bounds) => {
                let problem =
                    TuningProblem { bounds, geom: self.geom, params: self.params, mismatch: gp, norm: self.config.norm() };
                match problem.max_mean_norm(&self.config.search()) {
                    Ok(mu) => {
                        let act = check_actuation(&bounds, self.config.norm(), mu.value);
                        checks.push(Check::new("actuation", act.pass, format!("margin {:.6}", act.margin)));
                    }
                    Err(e) => checks.push(Check::new("actuation", false, e.to_string())),
                }
            }
            Err(e) => checks.push(Check::new("actuation", false, e.to_string())),
        }
        checks
    }

    /// Largest `‖(Ṁ − 2C) + (Ṁ − 2C)ᵀ‖ / (1 + ‖Ṁ‖)` over the samples and a
    /// few velocity directions, on the true plant. `Ṁ` is a central
    /// difference of `M` along `v`, independent of the analytic partials
    /// that `C` is built from.
    pub fn skew_symmetry_error(&self, samples: &[DVector<f64>]) -> f64 {
        let n = self.robot.dof();
        let velocities = [[1.0, 0.0], [0.0, 1.0], [1.3, -0.7], [-2.0, 2.0]];
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for q in samples {
            for v in &velocities {
                let v = DVector::from_column_slice(&v[..n]);
                let mdot = (self.robot.mass_matrix(&(q + &v * eps), Plant::True)
                    - self.robot.mass_matrix(&(q - &v * eps), Plant::True))
                    / (2.0 * eps);
                let s = &mdot - self.robot.coriolis_matrix(q, &v, Plant::True) * 2.0;
                worst = worst.max((&s + s.transpose()).norm() / (1.0 + mdot.norm()));
            }
        }
        worst
    }

    /// Relative change of the true plant's energy over `duration` with zero
    /// torque, RK4 at the configured `dt`.
    pub fn energy_drift(&self, duration: f64) -> f64 {
        let n = self.robot.dof();
        let mut x = JointState::from_slices(&vec![0.2; n], &vec![1.0; n]);
        x.q[0] = -0.3;
        let u = DVector::zeros(n);
        let e0 = self.robot.energy(&x, Plant::True);
        let steps = (duration / self.dt()).round() as usize;
        for _ in 0..steps {
            match self.robot.step_rk4(&x, &u, self.dt(), Plant::True) {
                Ok(next) => x = next,
                Err(_) => return f64::INFINITY,
            }
        }
        (self.robot.energy(&x, Plant::True) - e0).abs() / e0.abs()
    }
}

fn class_k_ok(k: ClassK) -> bool {
    let grid = linspace(-10.0, 10.0, 1000);
    k.eval(0.0) == 0.0 && grid.windows(2).all(|w| k.eval(w[0]) < k.eval(w[1]))
}

/// `per_axis²` joint configurations covering `[-q_max, q_max]²`.
pub fn grid_samples(q_max: f64, per_axis: usize) -> Vec<DVector<f64>> {
    let axis = linspace(-q_max, q_max, per_axis);
    axis.iter().flat_map(|&a| axis.iter().map(move |&b| DVector::from_column_slice(&[a, b]))).collect()
}

/// One named pass/fail line of the validation suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Self { name, pass, detail }
    }
}

/// Wraps an `η` model and perturbs its Hessian. Used as a negative control
/// for the validation suite.
pub struct CorruptedHessian<'a> {
    pub inner: &'a dyn EtaModel,
    pub offset: f64,
}

impl EtaModel for CorruptedHessian<'_> {
    fn eta(&self, q: &DVector<f64>) -> f64 {
        self.inner.eta(q)
    }

    fn grad_eta(&self, q: &DVector<f64>) -> DVector<f64> {
        self.inner.grad_eta(q)
    }

    fn hess_eta(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.inner.hess_eta(q).add_scalar(self.offset)
    }
}

/// Tuning results for one norm factor.
#[derive(Debug, Clone, PartialEq)]
pub struct NormReport {
    pub norm: NormFactor,
    pub mu_max: f64,
    /// `ξ` with `‖μ‖ = 0` and with `‖μ‖ = μ_max`.
    pub xi_range: (f64, f64),
    pub actuation_margin: f64,
    pub gamma_star: Result<Extremum, String>,
    pub delta_star: Result<Extremum, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    pub bounds: ModelBounds,
    pub gp_points: usize,
    /// The configured norm factor first.
    pub norms: Vec<NormReport>,
}

fn rel_dev(value: f64, target: f64) -> f64 {
    (value - target) / target
}

fn state_text(x: &JointState) -> String {
    x.stacked().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

impl TuneReport {
    pub fn primary(&self) -> &NormReport {
        &self.norms[0]
    }

    pub fn succeeded(&self) -> bool {
        let p = self.primary();
        p.gamma_star.is_ok() && p.delta_star.is_ok() && p.actuation_margin > 0.0
    }

    /// `(key, value)` pairs in report order; both output formats derive
    /// from this list.
    pub fn entries(&self) -> Vec<(String, String)> {
        let b = &self.bounds;
        let d = &b.directions;
        let mut out: Vec<(String, String)> = [
            ("m_min", b.m_min),
            ("m_max", b.m_max),
            ("m_max_rel_dev", rel_dev(b.m_max, PAPER_M_MAX)),
            ("c_max", b.c_max),
            ("c_max_rel_dev", rel_dev(b.c_max, PAPER_C_MAX)),
            ("g_max", b.g_max),
            ("f_q", d.f_q),
            ("g_q", d.g_q),
            ("f_q2", d.f_q2),
            ("g_q2", d.g_q2),
            ("eta_qmax", b.eta_qmax()),
            ("eta_max2", b.eta_max2()),
            ("lambda_bar", b.lambda_bar),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.to_string()))
        .collect();
        out.push(("gp_points".into(), self.gp_points.to_string()));
        for r in &self.norms {
            let p = r.norm.name();
            let mut put = |k: &str, v: String| out.push((format!("{p}.{k}"), v));
            put("mu_max", r.mu_max.to_string());
            put("xi_min", r.xi_range.0.to_string());
            put("xi_max", r.xi_range.1.to_string());
            put("actuation_margin", r.actuation_margin.to_string());
            for (name, res, target) in
                [("gamma_star", &r.gamma_star, PAPER_GAMMA_STAR), ("delta_star", &r.delta_star, PAPER_DELTA_STAR)]
            {
                match res {
                    Ok(e) => {
                        put(name, e.value.to_string());
                        put(&format!("{name}_rel_dev"), rel_dev(e.value, target).to_string());
                        put(&format!("{name}_state"), state_text(&e.state));
                    }
                    Err(msg) => put(name, format!("error: {msg}")),
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# singcbf tuning report\n");
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["quantity", "value"])?;
        for (k, v) in self.entries() {
            w.write_record([k, v])?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}
