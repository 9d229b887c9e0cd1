//! Model and campaign configuration files.
//!
//! Files are TOML with the sections `[model]`, `[grid]`, `[regime]`,
//! `[sweep.<name>]` and `[study.<name>]`. Every key is checked; an unknown
//! key is reported with its full dotted path.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::Path;

use mvmd_core::dsl::{Dims, ModelSources, ProbeSpec};
use mvmd_core::experiments::{SweepParam, SweepSpec};
use mvmd_core::frozen::Regime;
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

/// A table whose reads are tracked so leftovers can be reported.
struct Section<'a> {
    path: String,
    table: &'a Table,
    seen: RefCell<BTreeSet<String>>,
}

impl<'a> Section<'a> {
    fn new(path: &str, table: &'a Table) -> Self {
        Self {
            path: path.into(),
            table,
            seen: RefCell::new(BTreeSet::new()),
        }
    }

    fn key_path(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.into()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.seen.borrow_mut().insert(key.into());
        self.table.get(key)
    }

    fn err(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::new(self.key_path(key), message)
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Float(v)) => Ok(Some(*v)),
            Some(Value::Integer(v)) => Ok(Some(*v as f64)),
            Some(_) => Err(self.err(key, "expected a number")),
        }
    }

    fn f64(&self, key: &str) -> Result<f64> {
        self.opt_f64(key)?.ok_or_else(|| self.err(key, "missing"))
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Integer(v)) if *v >= 0 => Ok(Some(*v as usize)),
            Some(_) => Err(self.err(key, "expected a non-negative integer")),
        }
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.opt_usize(key)?.ok_or_else(|| self.err(key, "missing"))
    }

    fn opt_u64(&self, key: &str) -> Result<Option<u64>> {
        Ok(self.opt_usize(key)?.map(|v| v as u64))
    }

    fn opt_str(&self, key: &str) -> Result<Option<&'a str>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(_) => Err(self.err(key, "expected a string")),
        }
    }

    fn str(&self, key: &str) -> Result<&'a str> {
        self.opt_str(key)?.ok_or_else(|| self.err(key, "missing"))
    }

    fn opt_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(*b)),
            Some(_) => Err(self.err(key, "expected true or false")),
        }
    }

    /// A number or an array of numbers.
    fn opt_vec(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let num = |v: &Value| match v {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => None,
        };
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| num(v).ok_or_else(|| self.err(key, "expected an array of numbers")))
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(v) => num(v)
                .map(|f| Some(vec![f]))
                .ok_or_else(|| self.err(key, "expected a number or an array of numbers")),
        }
    }

    fn range(&self, key: &str, default: (f64, f64)) -> Result<(f64, f64)> {
        match self.opt_vec(key)? {
            None => Ok(default),
            Some(v) if v.len() == 2 && v[0] < v[1] => Ok((v[0], v[1])),
            Some(_) => Err(self.err(key, "expected [lo, hi] with lo < hi")),
        }
    }

    fn finish(self) -> Result<()> {
        let seen = self.seen.borrow();
        match self.table.keys().find(|k| !seen.contains(*k)) {
            Some(k) => Err(self.err(k, "unknown key")),
            None => Ok(()),
        }
    }
}

fn table<'a>(parent: &Section<'a>, key: &str) -> Result<Option<&'a Table>> {
    match parent.get(key) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(_) => Err(parent.err(key, "expected a table")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub sources: ModelSources,
    pub probe: ProbeSpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSection {
    pub horizon: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSection {
    pub regime: Regime,
    pub delta: f64,
    pub epsilon: f64,
    pub lambda: Option<f64>,
    pub particles: usize,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySection {
    pub name: String,
    pub kind: StudyKind,
    pub sweep: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StudyKind {
    Averaging {
        epsilon_ratio: f64,
        particles: Option<usize>,
        slope: f64,
        tolerance: f64,
    },
    Moments {
        epsilon_ratio: f64,
        particles: Option<usize>,
        h1: Vec<f64>,
        h2: Vec<f64>,
        deviation_tolerance: f64,
        fast_bound: f64,
    },
    Regularity {
        particles: Option<usize>,
        h1: Vec<f64>,
        h2: Vec<f64>,
        slope: f64,
        tolerance: f64,
    },
    Khasminskii {
        test: String,
        resolution: f64,
        time_bins: usize,
    },
    Mdp {
        radius: f64,
        systems: usize,
        particles: Option<usize>,
        epsilon_ratio: f64,
        analytic_q: Option<Vec<f64>>,
        analytic_a: Option<Vec<f64>>,
        interval: Option<(f64, f64)>,
        require_decreasing: bool,
    },
    Gap {
        particles: Option<usize>,
        h1: Vec<f64>,
        h2: Vec<f64>,
        slope: f64,
        tolerance: f64,
    },
    Occupation {
        epsilon_ratio: f64,
        particles: Option<usize>,
        h1: Vec<f64>,
        h2: Vec<f64>,
        y_range: (f64, f64),
        bins: usize,
        time_bins: usize,
        factor: f64,
    },
}

impl StudyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StudyKind::Averaging { .. } => "averaging",
            StudyKind::Moments { .. } => "moments",
            StudyKind::Regularity { .. } => "regularity",
            StudyKind::Khasminskii { .. } => "khasminskii",
            StudyKind::Mdp { .. } => "mdp",
            StudyKind::Gap { .. } => "gap",
            StudyKind::Occupation { .. } => "occupation",
        }
    }

    /// The sweep parameter the study expects.
    pub fn sweep_parameter(&self) -> SweepParam {
        match self {
            StudyKind::Regularity { .. } => SweepParam::Window,
            StudyKind::Khasminskii { .. } => SweepParam::Epsilon,
            _ => SweepParam::Delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub grid: Option<GridSection>,
    pub regime: Option<RegimeSection>,
    pub sweeps: Vec<(String, SweepSpec)>,
    pub studies: Vec<StudySection>,
}

impl Config {
    pub fn sweep(&self, name: &str) -> Option<&SweepSpec> {
        self.sweeps.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn grid(&self) -> Result<GridSection> {
        self.grid.ok_or_else(|| ConfigError::new("grid", "section required"))
    }

    pub fn regime(&self) -> Result<&RegimeSection> {
        self.regime.as_ref().ok_or_else(|| ConfigError::new("regime", "section required"))
    }
}

pub fn load(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new(path.display().to_string(), format!("cannot read: {e}")))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<Config> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::new("", e.message().to_string()))?;
    let top = Section::new("", &root);
    let seed = top.opt_u64("seed")?;
    let model = parse_model(table(&top, "model")?.ok_or_else(|| ConfigError::new("model", "section required"))?)?;
    let grid = table(&top, "grid")?.map(parse_grid).transpose()?;
    let regime = table(&top, "regime")?.map(|t| parse_regime(t, model.sources.dims)).transpose()?;
    let mut sweeps = Vec::new();
    if let Some(t) = table(&top, "sweep")? {
        for (name, v) in t {
            let path = format!("sweep.{name}");
            let Value::Table(st) = v else {
                return Err(ConfigError::new(path, "expected a table"));
            };
            sweeps.push((name.clone(), parse_sweep(&path, st)?));
        }
    }
    let mut studies = Vec::new();
    if let Some(t) = table(&top, "study")? {
        for (name, v) in t {
            let path = format!("study.{name}");
            let Value::Table(st) = v else {
                return Err(ConfigError::new(path, "expected a table"));
            };
            let s = parse_study(&path, name, st)?;
            let spec = sweeps
                .iter()
                .find(|(n, _)| *n == s.sweep)
                .map(|(_, s)| s)
                .ok_or_else(|| ConfigError::new(format!("{path}.sweep"), format!("no sweep named `{}`", s.sweep)))?;
            if spec.parameter != s.kind.sweep_parameter() {
                return Err(ConfigError::new(
                    format!("{path}.sweep"),
                    format!("{} studies sweep {:?}, not {:?}", s.kind.name(), s.kind.sweep_parameter(), spec.parameter),
                ));
            }
            studies.push(s);
        }
    }
    top.finish()?;
    Ok(Config {
        seed,
        model,
        grid,
        regime,
        sweeps,
        studies,
    })
}

/// Key of a matrix entry: `sigma01` for single-digit indices, `sigma0_1` always.
fn matrix_key(prefix: &str, i: usize, j: usize, s: &Section<'_>) -> Option<String> {
    let a = format!("{prefix}{i}_{j}");
    if s.table.contains_key(&a) {
        return Some(a);
    }
    if i < 10 && j < 10 {
        let b = format!("{prefix}{i}{j}");
        if s.table.contains_key(&b) {
            return Some(b);
        }
    }
    None
}

fn parse_model(t: &Table) -> Result<ModelSection> {
    let s = Section::new("model", t);
    let dims = Dims {
        n: s.usize("n")?,
        m: s.usize("m")?,
        d1: s.usize("d1")?,
        d2: s.usize("d2")?,
    };
    let vector = |prefix: &str, len: usize| -> Result<Vec<String>> {
        (0..len)
            .map(|i| {
                let k = format!("{prefix}{i}");
                s.str(&k).map(String::from)
            })
            .collect()
    };
    let matrix = |prefix: &str, r: usize, c: usize| -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let k = matrix_key(prefix, i, j, &s).ok_or_else(|| s.err(&format!("{prefix}{i}{j}"), "missing"))?;
                out.push(s.str(&k)?.to_string());
            }
        }
        Ok(out)
    };
    let sources = ModelSources {
        dims,
        b: vector("b", dims.n)?,
        sigma: matrix("sigma", dims.n, dims.d1)?,
        f: vector("f", dims.m)?,
        g: matrix("g", dims.m, dims.d2)?,
    };
    let d = ProbeSpec::default();
    let probe = ProbeSpec {
        x_range: s.range("x_range", d.x_range)?,
        y_range: s.range("y_range", d.y_range)?,
        mean_range: s.range("mean_range", d.mean_range)?,
        spread_max: s.f64_or("spread_max", d.spread_max)?,
        probes: s.opt_usize("probes")?.unwrap_or(d.probes),
        seed: s.opt_u64("probe_seed")?.unwrap_or(d.seed),
    };
    s.finish()?;
    Ok(ModelSection { sources, probe })
}

fn parse_grid(t: &Table) -> Result<GridSection> {
    let s = Section::new("grid", t);
    let g = GridSection {
        horizon: s.f64("horizon")?,
        dt: s.f64("dt")?,
    };
    if !(g.horizon > 0.0 && g.dt > 0.0 && g.dt <= g.horizon) {
        return Err(ConfigError::new("grid", "need 0 < dt ≤ horizon"));
    }
    s.finish()?;
    Ok(g)
}

fn parse_regime(t: &Table, dims: Dims) -> Result<RegimeSection> {
    let s = Section::new("regime", t);
    let regime = match s.opt_usize("regime")?.unwrap_or(1) {
        1 => {
            if s.opt_f64("gamma")?.is_some() {
                return Err(s.err("gamma", "only regime 2 takes gamma"));
            }
            Regime::One
        }
        2 => Regime::Two { gamma: s.f64("gamma")? },
        r => return Err(s.err("regime", format!("regime must be 1 or 2, got {r}"))),
    };
    let delta = s.f64("delta")?;
    let epsilon = match (s.opt_f64("epsilon")?, regime) {
        (Some(e), _) => e,
        (None, Regime::Two { gamma }) => gamma * delta,
        (None, Regime::One) => return Err(s.err("epsilon", "missing")),
    };
    let x0 = s.opt_vec("x0")?.unwrap_or_else(|| vec![0.0; dims.n]);
    let y0 = s.opt_vec("y0")?.unwrap_or_else(|| vec![0.0; dims.m]);
    if x0.len() != dims.n {
        return Err(s.err("x0", format!("expected {} entries", dims.n)));
    }
    if y0.len() != dims.m {
        return Err(s.err("y0", format!("expected {} entries", dims.m)));
    }
    let r = RegimeSection {
        regime,
        delta,
        epsilon,
        lambda: s.opt_f64("lambda")?,
        particles: s.opt_usize("particles")?.unwrap_or(128),
        x0,
        y0,
    };
    s.finish()?;
    Ok(r)
}

fn parse_sweep(path: &str, t: &Table) -> Result<SweepSpec> {
    let s = Section::new(path, t);
    let parameter = match s.str("parameter")? {
        "delta" => SweepParam::Delta,
        "epsilon" => SweepParam::Epsilon,
        "window" => SweepParam::Window,
        "particles" => SweepParam::Particles,
        "dt" => SweepParam::Dt,
        other => return Err(s.err("parameter", format!("unknown sweep parameter `{other}`"))),
    };
    let spec = SweepSpec::new(
        parameter,
        s.f64("start")?,
        s.f64("factor")?,
        s.usize("count")?,
        s.opt_usize("replicas")?.unwrap_or(1),
    )
    .map_err(|e| ConfigError::new(path, e.to_string()))?;
    s.finish()?;
    Ok(spec)
}

fn parse_study(path: &str, name: &str, t: &Table) -> Result<StudySection> {
    let s = Section::new(path, t);
    let kind_name = s.str("kind")?;
    let sweep = s.str("sweep")?.to_string();
    let seed = s.opt_u64("seed")?;
    let control = |key: &str| -> Result<Vec<f64>> { Ok(s.opt_vec(key)?.unwrap_or_else(|| vec![0.0])) };
    let kind = match kind_name {
        "averaging" => StudyKind::Averaging {
            epsilon_ratio: s.f64_or("epsilon_ratio", 1.0)?,
            particles: s.opt_usize("particles")?,
            slope: s.f64_or("slope", 1.0)?,
            tolerance: s.f64_or("tolerance", 0.3)?,
        },
        "moments" => StudyKind::Moments {
            epsilon_ratio: s.f64_or("epsilon_ratio", 1.0)?,
            particles: s.opt_usize("particles")?,
            h1: control("h1")?,
            h2: control("h2")?,
            deviation_tolerance: s.f64_or("deviation_tolerance", 0.3)?,
            fast_bound: s.f64_or("fast_bound", 1.3)?,
        },
        "regularity" => StudyKind::Regularity {
            particles: s.opt_usize("particles")?,
            h1: control("h1")?,
            h2: control("h2")?,
            slope: s.f64_or("slope", 1.0)?,
            tolerance: s.f64_or("tolerance", 0.2)?,
        },
        "khasminskii" => StudyKind::Khasminskii {
            test: s.opt_str("test")?.unwrap_or("tanh(y0)").to_string(),
            resolution: s.f64_or("resolution", 10.0)?,
            time_bins: s.opt_usize("time_bins")?.unwrap_or(10),
        },
        "mdp" => StudyKind::Mdp {
            radius: s.f64("radius")?,
            systems: s.usize("systems")?,
            particles: s.opt_usize("particles")?,
            epsilon_ratio: s.f64_or("epsilon_ratio", 0.1)?,
            analytic_q: s.opt_vec("q")?,
            analytic_a: s.opt_vec("a")?,
            interval: match s.opt_vec("interval")? {
                None => None,
                Some(v) if v.len() == 2 && v[0] <= v[1] => Some((v[0], v[1])),
                Some(_) => return Err(s.err("interval", "expected [lo, hi]")),
            },
            require_decreasing: s.opt_bool("decreasing")?.unwrap_or(true),
        },
        "gap" => StudyKind::Gap {
            particles: s.opt_usize("particles")?,
            h1: control("h1")?,
            h2: control("h2")?,
            slope: s.f64_or("slope", 1.0)?,
            tolerance: s.f64_or("tolerance", 0.5)?,
        },
        "occupation" => StudyKind::Occupation {
            epsilon_ratio: s.f64_or("epsilon_ratio", 1.0)?,
            particles: s.opt_usize("particles")?,
            h1: control("h1")?,
            h2: control("h2")?,
            y_range: s.range("y_range", (-2.5, 3.5))?,
            bins: s.opt_usize("bins")?.unwrap_or(60),
            time_bins: s.opt_usize("time_bins")?.unwrap_or(5),
            factor: s.f64_or("factor", 2.0)?,
        },
        other => return Err(s.err("kind", format!("unknown study kind `{other}`"))),
    };
    s.finish()?;
    Ok(StudySection {
        name: name.into(),
        kind,
        sweep,
        seed,
    })
}
