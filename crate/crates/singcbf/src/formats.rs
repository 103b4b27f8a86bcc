//! On-disk formats: episode and dataset CSV, the GP model dump, sweep grids.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! file reads back bit-identically.

use std::fmt::Write as _;
use std::io::{Read, Write};

use anyhow::{anyhow, bail, ensure, Context, Result};
use nalgebra::{DMatrix, DVector};
use singcbf_core::gp::{Dataset, DatasetRow, GpModel, KernelParams, ResidualSample};
use singcbf_core::sim::EpisodeLog;

use crate::sweep::SweepGrid;

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

pub fn episode_header(n: usize) -> Vec<String> {
    let mut h = vec!["t".to_owned()];
    for p in ["q", "v", "qdd", "unom", "u"] {
        h.extend(indexed(p, n));
    }
    h.extend(["z", "h", "lambda_x", "qp_status", "active_mask", "slack_total"].map(String::from));
    h
}

pub fn write_episode_csv<W: Write>(log: &EpisodeLog, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(episode_header(log.dof))?;
    for r in &log.rows {
        let mut rec = vec![r.t.to_string()];
        for col in [&r.q, &r.v, &r.qdd, &r.u_nom, &r.u] {
            rec.extend(col.iter().map(f64::to_string));
        }
        rec.push(r.z.to_string());
        rec.push(r.h.to_string());
        rec.push(r.lambda_x.to_string());
        rec.push(r.status.name().to_owned());
        rec.push(r.active_mask.to_string());
        rec.push(r.slack_total.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Column-major view of an episode CSV, keyed by header name.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r.records().map(|rec| Ok(rec?.iter().map(String::from).collect())).collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| anyhow!("missing column {name:?}"))
    }

    pub fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| r[c].parse::<f64>().with_context(|| format!("row {}: column {name}", i + 1)))
            .collect()
    }

    pub fn strings(&self, name: &str) -> Result<Vec<&str>> {
        let c = self.column(name)?;
        Ok(self.rows.iter().map(|r| r[c].as_str()).collect())
    }
}

pub fn dataset_header(n: usize) -> Vec<String> {
    let mut h = vec!["t".to_owned()];
    for p in ["q", "v", "qdd", "u", "Y"] {
        h.extend(indexed(p, n));
    }
    h
}

pub fn write_dataset_csv<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let n = ds.dof();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(dataset_header(n))?;
    for row in &ds.rows {
        let s = &row.sample;
        let mut rec = vec![s.t.to_string()];
        for col in [&s.q, &s.v, &s.qdd, &s.u, &row.residual] {
            rec.extend(col.iter().map(f64::to_string));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset_csv`]. The header fixes `n`.
pub fn read_dataset_csv<R: Read>(input: R, noise_variance: f64) -> Result<Dataset> {
    let table = CsvTable::read(input)?;
    let cols = table.header.len();
    ensure!(cols >= 6 && (cols - 1) % 5 == 0, "dataset header has {cols} columns; expected 1 + 5n");
    let n = (cols - 1) / 5;
    ensure!(table.header == dataset_header(n), "dataset header does not match t, q, v, qdd, u, Y");
    let mut rows = Vec::with_capacity(table.rows.len());
    let mut last_t = f64::NEG_INFINITY;
    for (i, rec) in table.rows.iter().enumerate() {
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("dataset row {}", i + 1))?;
        ensure!(vals.iter().all(|v| v.is_finite()), "dataset row {} has a non-finite value", i + 1);
        ensure!(vals[0] > last_t, "dataset row {}: time stamps must increase", i + 1);
        last_t = vals[0];
        let block = |k: usize| DVector::from_column_slice(&vals[1 + k * n..1 + (k + 1) * n]);
        rows.push(DatasetRow {
            sample: ResidualSample { t: vals[0], q: block(0), v: block(1), qdd: block(2), u: block(3) },
            residual: block(4),
        });
    }
    ensure!(!rows.is_empty(), "dataset is empty");
    Ok(Dataset { rows, noise_variance })
}

const MODEL_MAGIC: &str = "singcbf-gp-model 1";

/// Text dump of a fitted GP: hyperparameters, `B`, `ω`, `α` per output and the
/// training inputs. Cholesky factors are rebuilt on load.
pub fn write_gp_model(model: &GpModel) -> String {
    let mut s = String::new();
    writeln!(s, "{MODEL_MAGIC}").unwrap();
    writeln!(s, "inputs {}", model.points.nrows()).unwrap();
    writeln!(s, "points {}", model.points.ncols()).unwrap();
    writeln!(s, "outputs {}", model.outputs.len()).unwrap();
    writeln!(s, "noise_variance {}", model.noise_variance).unwrap();
    writeln!(s, "lambda_bar {}", model.lambda_bar()).unwrap();
    for (i, o) in model.outputs.iter().enumerate() {
        writeln!(
            s,
            "output {i} sf {} el {} rkhs_bound {} omega {} jitter {}",
            o.kernel.sf, o.kernel.el, o.rkhs_bound, o.omega, o.jitter
        )
        .unwrap();
        writeln!(s, "alpha {}", join(o.alpha.iter())).unwrap();
    }
    writeln!(s, "X").unwrap();
    for c in model.points.column_iter() {
        writeln!(s, "{}", join(c.iter())).unwrap();
    }
    s
}

fn join<'a>(it: impl Iterator<Item = &'a f64>) -> String {
    it.map(f64::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_floats(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace().map(|t| t.parse::<f64>().with_context(|| format!("bad number {t:?}"))).collect()
}

fn keyed<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
    let line = line.ok_or_else(|| anyhow!("model file ends before {key:?}"))?;
    line.strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| anyhow!("expected {key:?}, found {line:?}"))
}

pub fn read_gp_model(text: &str) -> Result<GpModel> {
    let mut lines = text.lines();
    ensure!(lines.next() == Some(MODEL_MAGIC), "not a GP model file (missing {MODEL_MAGIC:?} header)");
    let inputs: usize = keyed(lines.next(), "inputs")?.parse()?;
    let points: usize = keyed(lines.next(), "points")?.parse()?;
    let outputs: usize = keyed(lines.next(), "outputs")?.parse()?;
    let noise_variance: f64 = keyed(lines.next(), "noise_variance")?.parse()?;
    let stored_lambda: f64 = keyed(lines.next(), "lambda_bar")?.parse()?;
    let mut kernels = Vec::with_capacity(outputs);
    let mut bounds = Vec::with_capacity(outputs);
    let mut omegas = Vec::with_capacity(outputs);
    let mut alphas = Vec::with_capacity(outputs);
    for i in 0..outputs {
        let head: Vec<&str> = keyed(lines.next(), &format!("output {i}"))?.split_whitespace().collect();
        let field = |name: &str| -> Result<f64> {
            let pos = head.iter().position(|t| *t == name).ok_or_else(|| anyhow!("output {i}: missing {name}"))?;
            Ok(head.get(pos + 1).ok_or_else(|| anyhow!("output {i}: {name} has no value"))?.parse()?)
        };
        kernels.push(KernelParams::new(field("sf")?, field("el")?));
        bounds.push(field("rkhs_bound")?);
        omegas.push(field("omega")?);
        let alpha = parse_floats(keyed(lines.next(), "alpha")?)?;
        ensure!(alpha.len() == points, "output {i}: alpha has {} entries, expected {points}", alpha.len());
        alphas.push(DVector::from_vec(alpha));
    }
    ensure!(lines.next() == Some("X"), "missing X block");
    let mut data = Vec::with_capacity(inputs * points);
    for p in 0..points {
        let col = parse_floats(lines.next().ok_or_else(|| anyhow!("X ends after {p} points"))?)?;
        ensure!(col.len() == inputs, "X point {p} has {} coordinates, expected {inputs}", col.len());
        data.extend(col);
    }
    let x = DMatrix::from_vec(inputs, points, data);
    let model = GpModel::refactorize(x, noise_variance, &kernels, alphas, &omegas, &bounds)?;
    if model.lambda_bar() != stored_lambda {
        bail!("lambda_bar recomputed as {} but the file stores {stored_lambda}", model.lambda_bar());
    }
    Ok(model)
}

pub fn write_sweep_csv<W: Write>(grid: &SweepGrid, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["gamma", "delta", "z_min", "relaxed_steps", "in_region", "error"])?;
    for c in &grid.cells {
        w.write_record([
            c.gamma.to_string(),
            c.delta.to_string(),
            c.z_min.map_or_else(String::new, |z| z.to_string()),
            c.relaxed.to_string(),
            c.in_region.to_string(),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
