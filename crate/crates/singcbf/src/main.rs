use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use singcbf::formats::{read_dataset_csv, read_gp_model, write_dataset_csv, write_episode_csv, write_gp_model, write_sweep_csv};
use singcbf::pipeline::{CorruptedHessian, Stack};
use singcbf::{plot, ConfigError, RunConfig};
use singcbf_core::gp::GpModel;
use singcbf_core::sim::Mode;
use singcbf_core::QpStatus;

/// Singularity-avoiding robust CBF safety filter for a two-link arm.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    /// Run configuration (TOML). Defaults to the shipped reference setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write SVG plots.
    #[arg(long, global = true)]
    plots: bool,
    /// Use a saved GP model instead of fitting one from a fresh dataset.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Model bounds, gamma* and delta* for both norm factors.
    Tune,
    /// Fit the GP and write the model file.
    FitGp {
        /// Dataset CSV; generated from the excitation run when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run one episode of the reference trajectory.
    Simulate {
        #[arg(long, value_parser = parse_mode)]
        mode: Mode,
    },
    /// z_min over the (gamma, delta) grid.
    Sweep,
    /// Derivative, dynamics and bound checks.
    Validate {
        #[arg(long, hide = true)]
        corrupt_hessian: bool,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode {s:?}; expected one of {}", names.join(", "))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn verdict(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn file_stem(mode: Mode) -> &'static str {
    match mode {
        Mode::FilteredGp => "filtered_gp",
        Mode::FilteredNoGp => "filtered_nogp",
        Mode::Unfiltered => "unfiltered",
    }
}

fn obtain_gp(cli: &Cli, stack: &Stack) -> Result<GpModel> {
    match &cli.model {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read model {}", path.display()))?;
            read_gp_model(&text).with_context(|| format!("invalid model file {}", path.display()))
        }
        None => stack.fit(&stack.training_dataset()?),
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::reference(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let stack = Stack::new(config);
    fs::create_dir_all(&cli.out).with_context(|| format!("cannot create {}", cli.out.display()))?;
    let out = |name: &str| cli.out.join(name);

    match &cli.command {
        Command::Tune => {
            let gp = obtain_gp(cli, &stack)?;
            let report = stack.tune(&gp)?;
            let text = report.to_text();
            write(&out("tune_report.txt"), &text)?;
            write(&out("tune_report.csv"), report.to_csv()?)?;
            print!("{text}");
            Ok(verdict(report.succeeded()))
        }
        Command::FitGp { dataset } => {
            let ds = match dataset {
                Some(path) => {
                    let file = fs::File::open(path).with_context(|| format!("cannot open dataset {}", path.display()))?;
                    read_dataset_csv(file, stack.config.gp.noise_variance)
                        .with_context(|| format!("invalid dataset {}", path.display()))?
                }
                None => {
                    let ds = stack.training_dataset()?;
                    let mut buf = Vec::new();
                    write_dataset_csv(&ds, &mut buf)?;
                    write(&out("dataset.csv"), buf)?;
                    ds
                }
            };
            let gp = stack.fit(&ds)?;
            write(&out("gp_model.txt"), write_gp_model(&gp))?;
            println!("points = {}", gp.len());
            println!("lambda_bar = {}", gp.lambda_bar());
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { mode } => {
            let gp = match mode {
                Mode::FilteredGp => Some(obtain_gp(cli, &stack)?),
                _ => None,
            };
            let reference = stack.config.reference_trajectory();
            let log = stack.simulate(*mode, gp.as_ref(), &reference, stack.params)?;
            let stem = file_stem(*mode);
            let mut buf = Vec::new();
            write_episode_csv(&log, &mut buf)?;
            write(&out(&format!("episode_{stem}.csv")), buf)?;
            if cli.plots {
                for (name, svg) in plot::episode_plots(&log, &reference) {
                    write(&out(&format!("episode_{stem}_{name}")), svg)?;
                }
            }
            println!("mode = {mode}");
            println!("steps = {}", log.rows.len());
            println!("z_min = {}", log.z_min());
            println!("h_min = {}", log.h_min());
            println!("max_abs_velocity = {}", log.max_abs_velocity());
            println!("max_abs_torque = {}", log.max_abs_torque());
            println!("relaxed_steps = {}", log.count_status(QpStatus::Relaxed));
            if let Some(t) = log.first_violation() {
                println!("first_violation_t = {t}");
            }
            Ok(verdict(*mode != Mode::FilteredGp || log.z_min() >= 0.0))
        }
        Command::Sweep => {
            let gp = obtain_gp(cli, &stack)?;
            let report = stack.tune(&gp)?;
            let p = report.primary();
            let star = match (&p.gamma_star, &p.delta_star) {
                (Ok(g), Ok(d)) => Some((g.value, d.value)),
                _ => None,
            };
            let (gammas, deltas) = stack.sweep_axes(star)?;
            info!("sweeping {} x {} cells", gammas.len(), deltas.len());
            let grid = stack.sweep(&gp, gammas, deltas, star);
            let mut buf = Vec::new();
            write_sweep_csv(&grid, &mut buf)?;
            write(&out("sweep.csv"), buf)?;
            if cli.plots {
                let svg = plot::contour(
                    "z_min over (gamma, delta)",
                    &grid.gammas,
                    &grid.deltas,
                    |i, j| grid.cell(i, j).z_min,
                    "gamma",
                    "delta",
                );
                write(&out("sweep.svg"), svg)?;
            }
            let (rho_g, rho_d) = grid.trend();
            let unsafe_cells = grid.unsafe_in_region().len();
            println!("cells = {}", grid.cells.len());
            println!("failed_cells = {}", grid.failed_cells());
            println!("spearman_gamma = {rho_g}");
            println!("spearman_delta = {rho_d}");
            println!("unsafe_in_region = {unsafe_cells}");
            Ok(verdict(rho_g <= -0.8 && rho_d <= -0.8 && unsafe_cells == 0))
        }
        Command::Validate { corrupt_hessian } => {
            let gp = obtain_gp(cli, &stack)?;
            let corrupted = CorruptedHessian { inner: &stack.geom, offset: 1e-2 };
            let eta: &dyn singcbf_core::geometry::EtaModel = if *corrupt_hessian { &corrupted } else { &stack.geom };
            let checks = stack.validate(eta, &gp);
            for c in &checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(verdict(checks.iter().all(|c| c.pass)))
        }
    }
}
