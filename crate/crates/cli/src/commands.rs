//! The subcommands. Each writes its artifact and returns, or fails with an
//! exit-coded error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use threshold_lab::fixedpoint::{solve, StationaryDistribution};
use threshold_lab::meanfield::integrate;
use threshold_lab::metrics::{optimal_threshold, Criterion, PerformanceReport, ThresholdChoice};
use threshold_lab::sim::{run_ensemble, SimReport};
use threshold_lab::{omega_distance, FractionState, ModelParams};

use crate::config::{Method, RunConfig, SweepParam};
use crate::exit::CliError;

type CliResult<T = ()> = Result<T, CliError>;

/// Opens `path`, or stdout when absent.
fn sink(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| {
            CliError::invalid(format!("cannot write {}: {e}", p.display()))
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult {
    let mut out = sink(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::invalid(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn csv_writer(path: Option<&Path>) -> CliResult<csv::Writer<Box<dyn Write>>> {
    Ok(csv::Writer::from_writer(sink(path)?))
}

/// Shortest round-trip form, with an exponent at extreme magnitudes.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::invalid(format!("csv output failed: {e}"))
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    #[serde(flatten)]
    distribution: &'a StationaryDistribution,
    performance: PerformanceReport,
}

pub fn solve_cmd(cfg: &RunConfig) -> CliResult {
    let dist = solve(&cfg.params, &cfg.solver)?;
    let output = SolveOutput {
        distribution: &dist,
        performance: PerformanceReport::from_distribution(&dist),
    };
    write_json(cfg.out.as_deref(), &output)
}

/// Trajectory from the empty system.
pub fn ode_cmd(cfg: &RunConfig) -> CliResult {
    let start = FractionState::empty(cfg.params.m, cfg.ode_levels);
    let traj = integrate(&start, &cfg.params, cfg.t_end, &cfg.integrator)?;
    let mut out = sink(cfg.out.as_deref())?;
    traj.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    #[serde(flatten)]
    report: &'a SimReport,
    performance: PerformanceReport,
}

/// JSON report plus the per-batch CSV. The CSV goes to `batches_csv`, or next
/// to the JSON file with a `.csv` extension.
pub fn simulate_cmd(cfg: &RunConfig) -> CliResult {
    let sim = cfg.sim.at(&cfg.params, cfg.sim.n_servers);
    let report = run_ensemble(&cfg.params, &sim)?;
    write_json(
        cfg.out.as_deref(),
        &SimulateOutput {
            report: &report,
            performance: PerformanceReport::from_simulation(&report),
        },
    )?;
    let batches: Option<PathBuf> = cfg
        .batches_csv
        .clone()
        .or_else(|| cfg.out.as_ref().map(|p| p.with_extension("csv")));
    if let Some(path) = batches {
        let mut out = sink(Some(&path))?;
        report.write_batches_csv(&mut out)?;
        out.flush()?;
    }
    Ok(())
}

/// Simulated against mean-field mean queue length for each server count.
pub fn compare_cmd(cfg: &RunConfig) -> CliResult {
    let params = cfg.params.require_stable()?;
    let dist = solve(&params, &cfg.solver)?;
    let fixed = dist.to_state();
    let eq_meanfield = PerformanceReport::from_distribution(&dist).eq;
    let mut out = csv_writer(cfg.out.as_deref())?;
    out.write_record([
        "n_servers",
        "eq_simulated",
        "eq_half_width",
        "eq_meanfield",
        "relative_error",
        "omega_distance",
    ])
    .map_err(csv_error)?;
    for &n in &cfg.n_list {
        let report = run_ensemble(&params, &cfg.sim.at(&params, n))?;
        let simulated = FractionState::new(report.u_hat.clone(), report.v_hat.clone())?;
        let eq = report.eq_mean.mean;
        out.write_record([
            n.to_string(),
            num(eq),
            num(report.eq_mean.half_width),
            num(eq_meanfield),
            num((eq - eq_meanfield).abs() / eq_meanfield),
            num(omega_distance(&simulated, &fixed).value()),
        ])
        .map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

fn sweep_point(cfg: &RunConfig, param: SweepParam, value: f64) -> CliResult<PerformanceReport> {
    let mut params = cfg.params;
    let mut n_servers = cfg.sim.n_servers;
    match param {
        SweepParam::Lambda => params.lambda = value,
        SweepParam::Mu => params.mu = value,
        SweepParam::D => params.d = value as usize,
        SweepParam::M => params.m = value as usize,
        SweepParam::NServers => n_servers = value as usize,
    }
    let params: ModelParams = params.validate()?;
    Ok(match cfg.method {
        Method::FixedPoint => PerformanceReport::from_distribution(&solve(&params, &cfg.solver)?),
        Method::Simulation => {
            let params = params.require_stable()?;
            PerformanceReport::from_simulation(&run_ensemble(
                &params,
                &cfg.sim.at(&params, n_servers),
            )?)
        }
    })
}

/// Tidy CSV over the sweep values. Points run in parallel and are written in
/// input order. Failed points keep their row with empty measures and the
/// reason in a trailing `failure` column, which only appears when needed;
/// the command then exits with the first failure's code.
pub fn sweep_cmd(cfg: &RunConfig) -> CliResult {
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::invalid("sweep needs `param` and `values`"))?;
    if spec.param == SweepParam::NServers && cfg.method == Method::FixedPoint {
        return Err(CliError::invalid(
            "`param = n_servers` needs `method = simulation` (the mean-field limit has no server count)",
        ));
    }
    let results: Vec<CliResult<PerformanceReport>> = spec
        .values
        .par_iter()
        .map(|&v| sweep_point(cfg, spec.param, v))
        .collect();
    let failed = results.iter().any(Result::is_err);
    let mut out = csv_writer(cfg.out.as_deref())?;
    let mut header = vec![
        "param",
        "value",
        "eq",
        "es_paper",
        "es_little",
        "energy_saving",
    ];
    if failed {
        header.push("failure");
    }
    out.write_record(&header).map_err(csv_error)?;
    let mut first_failure = None;
    for (value, result) in spec.values.iter().zip(results) {
        let value = if spec.param.is_integer() {
            (*value as usize).to_string()
        } else {
            num(*value)
        };
        let mut row = vec![spec.param.name().to_string(), value];
        match result {
            Ok(r) => {
                row.extend([r.eq, r.es_paper, r.es_little, r.energy_saving].map(num));
                if failed {
                    row.push(String::new());
                }
            }
            Err(e) => {
                row.extend(std::iter::repeat_n(String::new(), 4));
                row.push(e.message.clone());
                first_failure.get_or_insert(e);
            }
        }
        out.write_record(&row).map_err(csv_error)?;
    }
    out.flush()?;
    match first_failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct ThresholdOutput {
    lambda: f64,
    mu: f64,
    d: usize,
    criterion: Criterion,
    bound: f64,
    m_max: usize,
    #[serde(flatten)]
    choice: ThresholdChoice,
}

pub fn optimal_m_cmd(cfg: &RunConfig) -> CliResult {
    let bound = cfg
        .bound
        .ok_or_else(|| CliError::invalid("optimal-m needs `bound`"))?;
    let choice = optimal_threshold(&cfg.params, bound, cfg.criterion, cfg.m_max, &cfg.solver)?;
    write_json(
        cfg.out.as_deref(),
        &ThresholdOutput {
            lambda: cfg.params.lambda,
            mu: cfg.params.mu,
            d: cfg.params.d,
            criterion: cfg.criterion,
            bound,
            m_max: cfg.m_max,
            choice,
        },
    )
}
