//! CSV and JSON artifact formats.
//!
//! Floats are written with Rust's shortest round-trip formatting, so equal
//! values always produce equal bytes.

use std::fs;
use std::path::{Path, PathBuf};

use mvmd_core::frozen::{PoissonSolution, RateOperator};
use mvmd_core::measure::{Histogram1d, ParticleCloud};
use mvmd_core::multiscale::OccupationMeasure;
use mvmd_core::rate::FeedbackControls;
use mvmd_core::sde::PathGrid;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

fn table(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn numbered(prefix: &str, count: usize) -> Vec<String> {
    (0..count).map(|i| format!("{prefix}{i}")).collect()
}

pub fn json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable artifact");
    s.push('\n');
    s
}

/// `t, v0, …, v{dim−1}`
pub fn path_csv(p: &PathGrid) -> String {
    let mut header = vec!["t".to_string()];
    header.extend(numbered("v", p.dim()));
    let g = *p.grid();
    table(
        &header,
        (0..g.nodes()).map(|k| {
            let mut r = vec![num(g.t(k))];
            r.extend(p.at(k).iter().map(|v| num(*v)));
            r
        }),
    )
}

/// Several scalar series over the same grid, one column each.
pub fn series_csv(p: &PathGrid, names: &[&str]) -> String {
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().map(|s| s.to_string()));
    let g = *p.grid();
    table(
        &header,
        (0..g.nodes()).map(|k| {
            let mut r = vec![num(g.t(k))];
            r.extend(p.at(k).iter().map(|v| num(*v)));
            r
        }),
    )
}

/// One point per row, columns `v0, …`.
pub fn cloud_csv(c: &ParticleCloud) -> String {
    table(&numbered("v", c.dim()), c.points().map(|p| p.iter().map(|v| num(*v)).collect()))
}

/// `bin_left, mass`
pub fn histogram_csv(h: &Histogram1d) -> String {
    table(
        &["bin_left".into(), "mass".into()],
        (0..h.bins()).map(|i| vec![num(h.bin_left(i)), num(h.mass[i])]),
    )
}

/// `t, q00, q01, …, regime, gamma`
pub fn rate_operator_csv(q: &RateOperator) -> String {
    let n = q.n();
    let mut header = vec!["t".to_string()];
    for i in 0..n {
        for j in 0..n {
            header.push(format!("q{i}_{j}"));
        }
    }
    header.push("regime".into());
    header.push("gamma".into());
    let g = *q.grid();
    let (reg, gamma) = (q.regime().index().to_string(), num(q.regime().gamma()));
    table(
        &header,
        (0..g.nodes()).map(|k| {
            let mut r = vec![num(g.t(k))];
            r.extend(q.q(k).iter().map(|v| num(*v)));
            r.push(reg.clone());
            r.push(gamma.clone());
            r
        }),
    )
}

#[derive(Serialize)]
struct PoissonJson<'a> {
    x: &'a [f64],
    y: &'a [f64],
    value: &'a [f64],
    #[serde(rename = "SE")]
    se: &'a [f64],
    #[serde(rename = "S")]
    horizon: f64,
    #[serde(rename = "R")]
    replicas: usize,
    growth_constant: f64,
}

/// `{x, y, value, SE, S, R, growth_constant}`
pub fn poisson_json(p: &PoissonSolution) -> String {
    json(&PoissonJson {
        x: &p.x,
        y: &p.y,
        value: &p.value,
        se: &p.se,
        horizon: p.horizon,
        replicas: p.replicas,
        growth_constant: p.growth_constant,
    })
}

/// Dense `time_bin, <axis slots…>, mass` with one row per cell.
pub fn occupation_csv(o: &OccupationMeasure) -> String {
    let mut header = vec!["time_bin".to_string()];
    header.extend(numbered("h1_", o.spec.h1.len()));
    header.extend(numbered("h2_", o.spec.h2.len()));
    header.extend(numbered("y", o.spec.y.len()));
    header.push("mass".into());
    let cells = o.mass.len() / o.spec.time_bins;
    table(
        &header,
        (0..o.spec.time_bins).flat_map(|b| {
            (0..cells).map(move |c| {
                let mut r = vec![b.to_string()];
                r.extend(o.slots_of(c).iter().map(|s| s.to_string()));
                r.push(num(o.time_bin_mass(b)[c]));
                r
            })
        }),
    )
}

#[derive(Serialize)]
struct OccupationHeader<'a> {
    spec: &'a mvmd_core::multiscale::BinSpec,
    horizon: f64,
    window: f64,
    total_mass: f64,
    overflow_mass: f64,
    slot_layout: &'static str,
}

pub fn occupation_header(o: &OccupationMeasure) -> String {
    json(&OccupationHeader {
        spec: &o.spec,
        horizon: o.horizon,
        window: o.window,
        total_mass: o.total(),
        overflow_mass: o.overflow_mass,
        slot_layout: "slot 0 is the underflow bin, slot bins+1 the overflow bin",
    })
}

/// `t, y_bin, y0…, weight, h1_0…, h2_0…`
pub fn controls_csv(c: &FeedbackControls) -> String {
    let mut header = vec!["t".to_string(), "y_bin".to_string()];
    header.extend(numbered("y", c.ys.m));
    header.push("weight".into());
    header.extend(numbered("h1_", c.d1));
    header.extend(numbered("h2_", c.d2));
    let count = c.ys.count();
    table(
        &header,
        (0..c.grid.nodes()).flat_map(|k| {
            (0..count).map(move |i| {
                let mut r = vec![num(c.grid.t(k)), i.to_string()];
                r.extend(c.ys.point(i).iter().map(|v| num(*v)));
                r.push(num(c.ys.weight(k, i)));
                r.extend(c.h1(k, i).iter().map(|v| num(*v)));
                r.extend(c.h2(k, i).iter().map(|v| num(*v)));
                r
            })
        }),
    )
}

/// A row of the plot-ready long format.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongRow {
    pub study: String,
    pub param: f64,
    pub value: f64,
    pub se: f64,
}

/// `study, param, value, se`
pub fn long_csv(rows: &[LongRow]) -> String {
    table(
        &["study".into(), "param".into(), "value".into(), "se".into()],
        rows.iter()
            .map(|r| vec![r.study.clone(), num(r.param), num(r.value), num(r.se)]),
    )
}

/// Writes `name` under `dir`, creating the directory.
pub fn write(dir: &Path, name: &str, contents: &str) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    fs::write(&p, contents)?;
    Ok(p)
}
