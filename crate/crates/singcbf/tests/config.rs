use singcbf::{ConfigError, RunConfig};

const REFERENCE: &str = include_str!("../config/reference.toml");

#[test]
fn reference_parses_and_round_trips() {
    let cfg = RunConfig::reference();
    assert_eq!(cfg.dof(), 2);
    let back = RunConfig::from_toml_str(&cfg.to_toml(), "round-trip").unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn reference_values() {
    let cfg = RunConfig::reference();
    let robot = cfg.robot_params();
    assert!((robot.q_max - std::f64::consts::FRAC_PI_3).abs() < 1e-15);
    assert!((cfg.geometry().q_ini - std::f64::consts::PI / 12.0).abs() < 1e-15);
    assert_eq!((robot.v_max, robot.u_max, robot.tip_mass), (2.0, 5.0, 0.2));
    // Steel rods, 0.5 m by 1 cm radius.
    let m = robot.links[0].mass();
    assert!((m - 7800.0 * std::f64::consts::PI * 1e-4 * 0.5).abs() < 1e-12);
    assert!(cfg.reference_trajectory().validate(robot.q_max, robot.v_max).is_ok());
    assert!(cfg.excitation_trajectory().validate(robot.q_max, robot.v_max).is_ok());
}

#[test]
fn unknown_key_is_a_parse_error() {
    let text = REFERENCE.replace("dt = 0.001", "dt = 0.001\ntimestep = 0.002");
    match RunConfig::from_toml_str(&text, "typo.toml") {
        Err(e @ ConfigError::Parse { .. }) => assert!(e.to_string().contains("timestep"), "{e}"),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn every_issue_is_reported_with_its_line() {
    let text = REFERENCE
        .replace("dt = 0.001", "dt = -0.001")
        .replace("u_max = 5.0", "u_max = 0.0")
        .replace("epsilon = 0.05", "epsilon = 1.5")
        .replace("noise_variance = 0.001", "noise_variance = 0.0");
    let line_of = |needle: &str| text.lines().position(|l| l.starts_with(needle)).unwrap() + 1;
    let issues = match RunConfig::from_toml_str(&text, "bad.toml") {
        Err(ConfigError::Invalid { issues, .. }) => issues,
        other => panic!("expected validation issues, got {other:?}"),
    };
    for (key, needle) in [
        ("dt", "dt ="),
        ("robot.u_max", "u_max ="),
        ("geometry.epsilon", "epsilon ="),
        ("gp.noise_variance", "noise_variance ="),
    ] {
        let issue = issues.iter().find(|i| i.key == key).unwrap_or_else(|| panic!("no issue for {key}: {issues:?}"));
        assert_eq!(issue.line, Some(line_of(needle)), "{key}");
    }
}

#[test]
fn reference_outside_joint_box_is_rejected() {
    let text = REFERENCE.replace(
        "{ amplitude = 0.6, frequency = 0.25, phase = 1.5707963267948966, offset = 0.3 }",
        "{ amplitude = 0.9, frequency = 0.25, phase = 1.5707963267948966, offset = 0.3 }",
    );
    assert_ne!(text, REFERENCE);
    match RunConfig::from_toml_str(&text, "wide.toml") {
        Err(ConfigError::Invalid { issues, .. }) => {
            assert!(issues.iter().any(|i| i.key.starts_with("reference")), "{issues:?}")
        }
        other => panic!("expected validation issues, got {other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(RunConfig::load(&dir.path().join("absent.toml")), Err(ConfigError::Io { .. })));
}
