//! Run configuration: TOML on disk, validated as a whole before use.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use singcbf_core::barriers::{BarrierParams, ClassK};
use singcbf_core::gp::KernelParams;
use singcbf_core::optimize::NelderMeadOptions;
use singcbf_core::robot::{LinkParams, RobotParams};
use singcbf_core::sim::{JointReference, PidGains, TrajectorySpec};
use singcbf_core::tuning::{NormFactor, SearchConfig};
use singcbf_core::SingularityGeometry;

/// The shipped reference configuration.
pub const REFERENCE_TOML: &str = include_str!("../config/reference.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dt: f64,
    pub norm_factor: String,
    pub robot: RobotSection,
    pub geometry: GeometrySection,
    pub gp: GpSection,
    pub barrier: BarrierSection,
    pub controller: ControllerSection,
    pub reference: TrajectorySection,
    pub excitation: TrajectorySection,
    pub tuning: TuningSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSection {
    pub q_max: f64,
    pub v_max: f64,
    pub u_max: f64,
    pub tip_mass: f64,
    pub planar: bool,
    pub links: Vec<LinkSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    pub length: f64,
    pub radius: f64,
    pub density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub q_ini: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSection {
    pub sf: Vec<f64>,
    pub el: Vec<f64>,
    pub noise_variance: f64,
    pub dataset_size: usize,
    pub rkhs_bounds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSection {
    pub gamma: f64,
    pub delta: f64,
    pub k: f64,
    pub beta1: String,
    pub beta2: String,
    pub beta3: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
    pub kv: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    pub duration: f64,
    pub joints: Vec<JointSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSection {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSection {
    /// Grid points per joint axis for `m_max`, `c_max`, `g_max`.
    pub bound_resolution: usize,
    /// Coarse grid points per state axis for the `γ*`/`δ*` searches.
    pub per_axis: usize,
    pub starts: usize,
    pub h_floor: f64,
}

/// Sweep grid. Without explicit `gamma`/`delta` lists the axes span
/// `gamma_span · γ*` linearly and `delta_span · δ*` logarithmically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub points: usize,
    pub gamma_span: [f64; 2],
    pub delta_span: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
}

/// One validation finding, located in the source file when possible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub key: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.key, self.message),
            None => write!(f, "{}: {}", self.key, self.message),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{origin}: {source}")]
    Parse { origin: String, source: Box<toml::de::Error> },
    #[error("{origin}: {} problem(s)\n{}", issues.len(), render(issues))]
    Invalid { origin: String, issues: Vec<Issue> },
}

fn render(issues: &[Issue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

impl RunConfig {
    pub fn reference() -> Self {
        Self::from_toml_str(REFERENCE_TOML, "reference.toml").expect("shipped config is valid")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Parses and validates. Every problem found is reported, not only the first.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { origin: origin.to_owned(), source: Box::new(e) })?;
        let mut issues = cfg.issues();
        for issue in &mut issues {
            issue.line = locate(text, &issue.key);
        }
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid { origin: origin.to_owned(), issues })
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dof(&self) -> usize {
        self.robot.links.len()
    }

    /// Every constraint violated by this configuration.
    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        let mut bad = |key: &str, message: String| {
            out.push(Issue { key: key.to_owned(), line: None, message });
        };
        let n = self.dof();
        let positive = |x: f64| x > 0.0 && x.is_finite();

        if !positive(self.dt) {
            bad("dt", format!("must be positive and finite, got {}", self.dt));
        }
        if NormFactor::from_name(&self.norm_factor).is_none() {
            bad("norm_factor", format!("expected \"paper\" or \"tight\", got {:?}", self.norm_factor));
        }

        let r = &self.robot;
        if n == 0 {
            bad("robot.links", "at least one link is required".into());
        }
        if n != 2 {
            bad("robot.links", format!("the singularity measure is defined for two links, got {n}"));
        }
        for (i, l) in r.links.iter().enumerate() {
            for (name, v) in [("length", l.length), ("radius", l.radius), ("density", l.density)] {
                if !positive(v) {
                    bad(&format!("robot.links[{i}].{name}"), format!("must be positive, got {v}"));
                }
            }
        }
        for (name, v) in [("q_max", r.q_max), ("v_max", r.v_max), ("u_max", r.u_max)] {
            if !positive(v) {
                bad(&format!("robot.{name}"), format!("must be positive (limits are symmetric), got {v}"));
            }
        }
        if r.q_max > std::f64::consts::PI {
            bad("robot.q_max", format!("must not exceed pi, got {}", r.q_max));
        }
        if !(r.tip_mass >= 0.0 && r.tip_mass.is_finite()) {
            bad("robot.tip_mass", format!("must be non-negative, got {}", r.tip_mass));
        }

        let g = &self.geometry;
        if !(g.epsilon > 0.0 && g.epsilon < 1.0) {
            bad("geometry.epsilon", format!("must lie in (0, 1), got {}", g.epsilon));
        }
        if !g.q_ini.is_finite() {
            bad("geometry.q_ini", "must be finite".into());
        }

        let gp = &self.gp;
        for (name, v) in [("sf", &gp.sf), ("el", &gp.el), ("rkhs_bounds", &gp.rkhs_bounds)] {
            if v.len() != n {
                bad(&format!("gp.{name}"), format!("needs one entry per joint ({n}), got {}", v.len()));
            }
            if let Some(x) = v.iter().find(|x| !positive(**x)) {
                bad(&format!("gp.{name}"), format!("entries must be positive, got {x}"));
            }
        }
        if !positive(gp.noise_variance) {
            bad("gp.noise_variance", format!("must be positive, got {}", gp.noise_variance));
        }
        if gp.dataset_size == 0 {
            bad("gp.dataset_size", "must be at least 1".into());
        }
        if self.dt > 0.0 && self.excitation.duration > 0.0 {
            let available = (self.excitation.duration / self.dt).round() as usize + 1;
            if gp.dataset_size > available {
                bad(
                    "gp.dataset_size",
                    format!("{} exceeds the {available} samples of the excitation episode", gp.dataset_size),
                );
            }
        }

        let b = &self.barrier;
        for (name, v) in [("gamma", b.gamma), ("delta", b.delta), ("k", b.k)] {
            if !positive(v) {
                bad(&format!("barrier.{name}"), format!("must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", &b.beta1), ("beta2", &b.beta2), ("beta3", &b.beta3)] {
            if ClassK::from_name(v).is_none() {
                bad(&format!("barrier.{name}"), format!("expected linear, cubic or arctan, got {v:?}"));
            }
        }

        let c = &self.controller;
        for (name, v) in [("kp", &c.kp), ("ki", &c.ki), ("kv", &c.kv)] {
            if v.len() != n {
                bad(&format!("controller.{name}"), format!("needs one entry per joint ({n}), got {}", v.len()));
            }
            if let Some(x) = v.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
                bad(&format!("controller.{name}"), format!("gains must be non-negative, got {x}"));
            }
        }

        for (section, t) in [("reference", &self.reference), ("excitation", &self.excitation)] {
            if !positive(t.duration) {
                bad(&format!("{section}.duration"), format!("must be positive, got {}", t.duration));
            }
            if t.joints.len() != n {
                bad(&format!("{section}.joints"), format!("needs one entry per joint ({n}), got {}", t.joints.len()));
            }
            for (i, j) in t.joints.iter().enumerate() {
                let jr = joint_reference(j);
                if !(j.frequency >= 0.0) {
                    bad(&format!("{section}.joints"), format!("joint {} frequency must be non-negative", i + 1));
                }
                if jr.peak_position() > r.q_max {
                    bad(
                        &format!("{section}.joints"),
                        format!("joint {} reaches {:.4} rad, beyond q_max = {:.4}", i + 1, jr.peak_position(), r.q_max),
                    );
                }
                if jr.peak_velocity() > r.v_max {
                    bad(
                        &format!("{section}.joints"),
                        format!("joint {} reaches {:.4} rad/s, beyond v_max = {:.4}", i + 1, jr.peak_velocity(), r.v_max),
                    );
                }
            }
        }

        let t = &self.tuning;
        if t.bound_resolution < 2 {
            bad("tuning.bound_resolution", format!("must be at least 2, got {}", t.bound_resolution));
        }
        if t.per_axis < 2 {
            bad("tuning.per_axis", format!("must be at least 2, got {}", t.per_axis));
        }
        if t.starts == 0 {
            bad("tuning.starts", "must be at least 1".into());
        }
        if !(t.h_floor >= 0.0 && t.h_floor.is_finite()) {
            bad("tuning.h_floor", format!("must be non-negative, got {}", t.h_floor));
        }

        let s = &self.sweep;
        if s.points == 0 {
            bad("sweep.points", "must be at least 1".into());
        }
        if !(positive(s.gamma_span[0]) && s.gamma_span[0] <= s.gamma_span[1]) {
            bad("sweep.gamma_span", format!("must satisfy 0 < lo <= hi, got {:?}", s.gamma_span));
        }
        if !(positive(s.delta_span[0]) && s.delta_span[0] <= s.delta_span[1]) {
            bad("sweep.delta_span", format!("must satisfy 0 < lo <= hi, got {:?}", s.delta_span));
        }
        for (name, grid) in [("gamma", &s.gamma), ("delta", &s.delta)] {
            if let Some(v) = grid {
                if v.is_empty() || v.iter().any(|x| !positive(*x)) {
                    bad(&format!("sweep.{name}"), "explicit grids must be non-empty and positive".into());
                }
            }
        }
        out
    }

    pub fn robot_params(&self) -> RobotParams {
        RobotParams {
            links: self
                .robot
                .links
                .iter()
                .map(|l| LinkParams { length: l.length, radius: l.radius, density: l.density })
                .collect(),
            q_ini: self.geometry.q_ini,
            q_max: self.robot.q_max,
            v_max: self.robot.v_max,
            u_max: self.robot.u_max,
            tip_mass: self.robot.tip_mass,
            planar: self.robot.planar,
        }
    }

    pub fn geometry(&self) -> SingularityGeometry {
        SingularityGeometry::new(self.geometry.q_ini, self.geometry.epsilon)
    }

    pub fn barrier_params(&self) -> BarrierParams {
        let b = &self.barrier;
        let class = |s: &str| ClassK::from_name(s).expect("validated");
        BarrierParams {
            gamma: b.gamma,
            delta: b.delta,
            k: b.k,
            beta1: class(&b.beta1),
            beta2: class(&b.beta2),
            beta3: class(&b.beta3),
        }
    }

    pub fn kernels(&self) -> Vec<KernelParams> {
        self.gp.sf.iter().zip(&self.gp.el).map(|(sf, el)| KernelParams::new(*sf, *el)).collect()
    }

    pub fn gains(&self) -> PidGains {
        let c = &self.controller;
        PidGains { kp: c.kp.clone(), ki: c.ki.clone(), kv: c.kv.clone() }
    }

    pub fn norm(&self) -> NormFactor {
        NormFactor::from_name(&self.norm_factor).expect("validated")
    }

    pub fn reference_trajectory(&self) -> TrajectorySpec {
        self.reference.spec()
    }

    pub fn excitation_trajectory(&self) -> TrajectorySpec {
        self.excitation.spec()
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            per_axis: self.tuning.per_axis,
            starts: self.tuning.starts,
            h_floor: self.tuning.h_floor,
            nelder_mead: NelderMeadOptions::default(),
        }
    }
}

impl TrajectorySection {
    pub fn spec(&self) -> TrajectorySpec {
        TrajectorySpec { joints: self.joints.iter().map(joint_reference).collect(), duration: self.duration }
    }
}

fn joint_reference(j: &JointSection) -> JointReference {
    JointReference { amplitude: j.amplitude, frequency: j.frequency, phase: j.phase, offset: j.offset }
}

/// 1-based line of `key` (dotted path, optional `[i]` index) in `text`.
/// Falls back to the section header when the key itself is not written.
fn locate(text: &str, key: &str) -> Option<usize> {
    let path: Vec<&str> = key.split('.').map(|p| p.split('[').next().unwrap_or(p)).collect();
    let (leaf, section) = path.split_last()?;
    let section = section.join(".");
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(h) = line.strip_prefix('[') {
            current = h.trim_matches(|c| c == '[' || c == ']').trim().to_owned();
            if current == section && header_line.is_none() {
                header_line = Some(i + 1);
            }
            continue;
        }
        let in_section = current == section || (section.is_empty() && current.is_empty());
        if in_section || current.starts_with(&format!("{section}.")) {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == *leaf {
                    return Some(i + 1);
                }
            }
        }
        if current == key && header_line.is_none() {
            header_line = Some(i + 1);
        }
    }
    header_line
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locate_finds_keys_and_sections() {
        let text = "seed = 1\n[robot]\nq_max = 1\n\n[[robot.links]]\nlength = 2\n";
        assert_eq!(locate(text, "seed"), Some(1));
        assert_eq!(locate(text, "robot.q_max"), Some(3));
        assert_eq!(locate(text, "robot.links[0].length"), Some(6));
        assert_eq!(locate(text, "robot.v_max"), Some(2));
    }
}
