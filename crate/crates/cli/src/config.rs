//! Run configuration: a flat `key = value` file overlaid by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use threshold_lab::fixedpoint::SolverConfig;
use threshold_lab::meanfield::IntegratorConfig;
use threshold_lab::metrics::Criterion;
use threshold_lab::sim::{Sampling, SimConfig, TieBreak};
use threshold_lab::ModelParams;

use crate::exit::CliError;

/// Every key accepted in a config file; flags use the same names with `-`.
pub const KEYS: &[&str] = &[
    "lambda",
    "mu",
    "d",
    "m",
    "n_servers",
    "seed",
    "t_warmup",
    "t_measure",
    "n_batches",
    "n_replications",
    "queue_cap",
    "sampling",
    "tie_break",
    "k_max",
    "tol_ode",
    "tol_fixedpoint",
    "t_end",
    "output_interval",
    "param",
    "values",
    "method",
    "n",
    "bound",
    "criterion",
    "m_max",
    "out",
    "batches_csv",
];

/// Raw key/value pairs, later ones overriding earlier ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig(BTreeMap<String, String>);

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KEYS.contains(&key) {
            return Err(CliError::invalid(format!("unknown key `{key}`")));
        }
        self.0.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::invalid(format!(
                    "config line {}: expected `key = value`, got `{line}`",
                    i + 1
                ))
            })?;
            raw.set(key.trim(), value)?;
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::invalid(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn overlay(&mut self, other: &RawConfig) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| CliError::invalid(format!("invalid value `{v}` for `{key}`")))
            })
            .transpose()
    }
}

/// Quantity varied by `sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Mu,
    D,
    M,
    NServers,
}

impl SweepParam {
    fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "lambda" => SweepParam::Lambda,
            "mu" => SweepParam::Mu,
            "d" => SweepParam::D,
            "m" => SweepParam::M,
            "n_servers" => SweepParam::NServers,
            _ => {
                return Err(CliError::invalid(format!(
                    "invalid value `{s}` for `param` (expected lambda, mu, d, m or n_servers)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Mu => "mu",
            SweepParam::D => "d",
            SweepParam::M => "m",
            SweepParam::NServers => "n_servers",
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, SweepParam::D | SweepParam::M | SweepParam::NServers)
    }
}

/// How `sweep` evaluates a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    FixedPoint,
    Simulation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

/// Simulation settings not tied to a particular `(params, n_servers)` point.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub n_servers: usize,
    pub seed: u64,
    pub t_warmup: Option<f64>,
    pub t_measure: Option<f64>,
    pub n_batches: usize,
    pub n_replications: usize,
    pub queue_cap: Option<u32>,
    pub sampling: Sampling,
    pub tie_break: TieBreak,
}

impl SimSettings {
    /// Concrete config at `params` with `n_servers` servers; unset windows
    /// take the simulator defaults for that point.
    pub fn at(&self, params: &ModelParams, n_servers: usize) -> SimConfig {
        let base = SimConfig::defaults(params, n_servers, self.seed);
        SimConfig {
            t_warmup: self.t_warmup.unwrap_or(base.t_warmup),
            t_measure: self.t_measure.unwrap_or(base.t_measure),
            n_batches: self.n_batches,
            n_replications: self.n_replications,
            queue_cap: self.queue_cap,
            sampling: self.sampling,
            tie_break: self.tie_break,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Field-validated; stability is checked by the commands that need it.
    pub params: ModelParams,
    pub sim: SimSettings,
    pub solver: SolverConfig,
    pub integrator: IntegratorConfig,
    /// Working levels kept by `ode`.
    pub ode_levels: usize,
    pub t_end: f64,
    pub sweep: Option<SweepSpec>,
    pub method: Method,
    /// Server counts for `compare`.
    pub n_list: Vec<usize>,
    pub bound: Option<f64>,
    pub criterion: Criterion,
    pub m_max: usize,
    pub out: Option<PathBuf>,
    pub batches_csv: Option<PathBuf>,
}

/// Defaults: `mu = 1`, `m = 2`, `lambda = 0.39`, `d = 2`, 100 servers.
impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        let params = ModelParams {
            lambda: raw.parsed("lambda")?.unwrap_or(0.39),
            mu: raw.parsed("mu")?.unwrap_or(1.0),
            d: raw.parsed("d")?.unwrap_or(2),
            m: raw.parsed("m")?.unwrap_or(2),
        }
        .validate()
        .map_err(CliError::from)?;

        let sim = SimSettings {
            n_servers: positive(raw, "n_servers")?.unwrap_or(100),
            seed: raw.parsed("seed")?.unwrap_or(1),
            t_warmup: non_negative(raw, "t_warmup")?,
            t_measure: positive_real(raw, "t_measure")?,
            n_batches: raw.parsed("n_batches")?.unwrap_or(20),
            n_replications: positive(raw, "n_replications")?.unwrap_or(1),
            queue_cap: raw.parsed("queue_cap")?,
            sampling: match raw.get("sampling") {
                None | Some("without") => Sampling::WithoutReplacement,
                Some("with") => Sampling::WithReplacement,
                Some(v) => return Err(bad_choice("sampling", v, "without or with")),
            },
            tie_break: match raw.get("tie_break") {
                None | Some("uniform") => TieBreak::Uniform,
                Some("prefer-working") => TieBreak::PreferWorking,
                Some(v) => return Err(bad_choice("tie_break", v, "uniform or prefer-working")),
            },
        };
        if sim.n_batches < 2 {
            return Err(CliError::invalid(format!(
                "invalid value `{}` for `n_batches` (need at least 2)",
                sim.n_batches
            )));
        }

        let mut solver = SolverConfig::default();
        let mut integrator = IntegratorConfig::default();
        let k_max: Option<usize> = positive(raw, "k_max")?;
        if let Some(k) = k_max {
            solver.k_max = k;
        }
        if let Some(tol) = positive_real(raw, "tol_fixedpoint")? {
            solver.inner_tol = tol;
            solver.outer_tol = tol;
        }
        if let Some(tol) = positive_real(raw, "tol_ode")? {
            integrator.step_tol = tol;
        }
        integrator.output_interval = Some(positive_real(raw, "output_interval")?.unwrap_or(0.5));

        let sweep = match (raw.get("param"), raw.get("values")) {
            (Some(p), Some(v)) => {
                let param = SweepParam::parse(p)?;
                let values = parse_values(v)?;
                if param.is_integer() && values.iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
                    return Err(CliError::invalid(format!(
                        "invalid value `{v}` for `values` (`{p}` takes positive integers)"
                    )));
                }
                Some(SweepSpec { param, values })
            }
            (None, None) => None,
            (Some(_), None) => return Err(CliError::invalid("`param` given without `values`")),
            (None, Some(_)) => return Err(CliError::invalid("`values` given without `param`")),
        };

        let n_list = match raw.get("n") {
            None => vec![20, 50, 100, 200, 500],
            Some(v) => v
                .split(',')
                .map(|s| match s.trim().parse::<usize>() {
                    Ok(n) if n >= 1 => Ok(n),
                    _ => Err(CliError::invalid(format!("invalid value `{v}` for `n`"))),
                })
                .collect::<Result<_, _>>()?,
        };

        Ok(RunConfig {
            params,
            sim,
            solver,
            integrator,
            ode_levels: k_max.unwrap_or(params.m + 30).max(params.m + 1),
            t_end: positive_real(raw, "t_end")?.unwrap_or(50.0),
            sweep,
            method: match raw.get("method") {
                None | Some("fixedpoint") => Method::FixedPoint,
                Some("simulation") => Method::Simulation,
                Some(v) => return Err(bad_choice("method", v, "fixedpoint or simulation")),
            },
            n_list,
            bound: raw.parsed("bound")?,
            criterion: match raw.get("criterion") {
                None | Some("eq") => Criterion::Eq,
                Some("es") => Criterion::Es,
                Some(v) => return Err(bad_choice("criterion", v, "eq or es")),
            },
            m_max: raw.parsed("m_max")?.unwrap_or(50),
            out: raw.get("out").map(PathBuf::from),
            batches_csv: raw.get("batches_csv").map(PathBuf::from),
        })
    }
}

fn bad_choice(key: &str, value: &str, expected: &str) -> CliError {
    CliError::invalid(format!(
        "invalid value `{value}` for `{key}` (expected {expected})"
    ))
}

fn positive(raw: &RawConfig, key: &str) -> Result<Option<usize>, CliError> {
    match raw.parsed::<usize>(key)? {
        Some(0) => Err(CliError::invalid(format!(
            "invalid value `0` for `{key}` (must be positive)"
        ))),
        x => Ok(x),
    }
}

fn positive_real(raw: &RawConfig, key: &str) -> Result<Option<f64>, CliError> {
    match raw.parsed::<f64>(key)? {
        Some(x) if !(x.is_finite() && x > 0.0) => Err(CliError::invalid(format!(
            "invalid value `{x}` for `{key}` (must be positive)"
        ))),
        x => Ok(x),
    }
}

fn non_negative(raw: &RawConfig, key: &str) -> Result<Option<f64>, CliError> {
    match raw.parsed::<f64>(key)? {
        Some(x) if !(x.is_finite() && x >= 0.0) => Err(CliError::invalid(format!(
            "invalid value `{x}` for `{key}` (must be non-negative)"
        ))),
        x => Ok(x),
    }
}

/// A comma list, or `start:stop:step` inclusive of `stop` within `step / 2`.
/// Range points are rounded to 12 decimals so `0.09 + 2 * 0.05` prints as `0.19`.
pub fn parse_values(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::invalid(format!("invalid value `{text}` for `values`"));
    let parts: Vec<&str> = text.split(':').map(str::trim).collect();
    let values = match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step): (f64, f64, f64) = (
                start.parse().map_err(|_| bad())?,
                stop.parse().map_err(|_| bad())?,
                step.parse().map_err(|_| bad())?,
            );
            if !(step > 0.0 && start.is_finite() && stop.is_finite() && stop >= start) {
                return Err(bad());
            }
            let count = ((stop - start) / step + 0.5).floor() as usize + 1;
            (0..count)
                .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
                .collect()
        }
        [_] => text
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad()),
    };
    if values.is_empty() || values.iter().any(|x| !x.is_finite()) {
        return Err(bad());
    }
    Ok(values)
}
