//! Parallel trajectory ensembles and their statistics.
//!
//! Trajectory `i` draws from the stream `(base_seed, first_index + i)`, so the
//! result does not depend on the worker count. Means are accumulated in index
//! order.

use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::engine::{
    run_trajectory, sampling_intervals, DpControls, StepStatistics, TrajectoryOptions,
    TrajectoryRecord,
};
use crate::error::{invalid, Error, Result};
use crate::hilbert::StateVector;
use crate::integrating::{run_trajectory_integrating, IntegratingControls};
use crate::models::{Column, QuantumSystem};
use crate::ode::StepControl;
use crate::series::TimeSeries;

/// Trajectory method and its controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Stepwise(DpControls),
    Integrating(IntegratingControls),
}

impl Method {
    pub fn dt_sample(&self) -> f64 {
        match self {
            Method::Stepwise(c) => c.dt_sample,
            Method::Integrating(c) => c.dt_sample,
        }
    }

    pub fn t_final(&self) -> f64 {
        match self {
            Method::Stepwise(c) => c.t_final,
            Method::Integrating(c) => c.t_final,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Method::Stepwise(c) => c.validate(),
            Method::Integrating(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub method: Method,
    pub ode: StepControl,
    pub n_traj: usize,
    pub base_seed: u64,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
    /// Stream index of the first trajectory.
    pub first_index: u64,
    pub record_steps: bool,
    /// Largest tolerated fraction of failed trajectories.
    pub max_failure_fraction: f64,
}

impl EnsembleConfig {
    pub fn new(method: Method, n_traj: usize, base_seed: u64) -> Self {
        Self {
            method,
            ode: StepControl::default(),
            n_traj,
            base_seed,
            jobs: 0,
            first_index: 0,
            record_steps: false,
            max_failure_fraction: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.ode.validate()?;
        if self.n_traj == 0 {
            return Err(invalid("nTraj", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.max_failure_fraction) {
            return Err(invalid("maxFailureFraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Runs one trajectory of `cfg` with stream index `index`.
pub fn run_one(
    psi0: &StateVector,
    sys: &QuantumSystem,
    cfg: &EnsembleConfig,
    index: u64,
) -> Result<TrajectoryRecord> {
    let opts = TrajectoryOptions {
        record_steps: cfg.record_steps,
    };
    match &cfg.method {
        Method::Stepwise(c) => run_trajectory(psi0, sys, c, &cfg.ode, cfg.base_seed, index, opts),
        Method::Integrating(c) => {
            run_trajectory_integrating(psi0, sys, c, &cfg.ode, cfg.base_seed, index, opts)
        }
    }
}

/// Runs every trajectory of `cfg`, returned in index order. Failed
/// trajectories are kept with their failure recorded.
pub fn run_trajectories(
    psi0: &StateVector,
    sys: &QuantumSystem,
    cfg: &EnsembleConfig,
) -> Result<Vec<TrajectoryRecord>> {
    cfg.validate()?;
    let work = || {
        (0..cfg.n_traj as u64)
            .into_par_iter()
            .map(|i| run_one(psi0, sys, cfg, cfg.first_index + i))
            .collect::<Result<Vec<_>>>()
    };
    if cfg.jobs == 0 {
        work()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| invalid("jobs", e.to_string()))?
            .install(work)
    }
}

/// Mean with its standard error, over per-trajectory values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_values(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let se = if x.len() > 1 {
            (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, se }
    }

    /// Ratio `sum num / sum den` with its delta-method standard error.
    pub fn ratio(num: &[f64], den: &[f64]) -> Self {
        let n = num.len() as f64;
        let r = num.iter().sum::<f64>() / den.iter().sum::<f64>();
        let dbar = den.iter().sum::<f64>() / n;
        let se = if num.len() > 1 {
            let s2 = num
                .iter()
                .zip(den)
                .map(|(a, b)| (a - r * b).powi(2))
                .sum::<f64>()
                / (n - 1.0);
            (s2 / n).sqrt() / dbar
        } else {
            f64::NAN
        };
        Self { mean: r, se }
    }
}

/// Step-level and jump statistics of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStatistics {
    pub n_traj: usize,
    pub n_completed: usize,
    /// `(stream index, message)` of each failed trajectory.
    pub failed: Vec<(u64, String)>,
    pub totals: StepStatistics,
    /// Pooled `sum dt / steps`.
    pub mean_dt: Estimate,
    /// Average over trajectories of each trajectory's `sum dt / steps`.
    pub mean_dt_per_trajectory: f64,
    /// `sum dt^2 / sum dt`, the time average of the step size.
    pub time_weighted_dt: Estimate,
    /// Time average of `1 / r_tot` along trajectories.
    pub mean_inverse_rate: Estimate,
    pub full_step_fraction: f64,
    /// Mean jump count per trajectory and channel.
    pub jumps: Vec<Estimate>,
    /// Mean of `jumps[0] - jumps[1]` per trajectory.
    pub jump_difference: Option<Estimate>,
    /// Pearson correlation between the step size and the tracked observable
    /// at the step start.
    pub dt_tracked_correlation: Option<f64>,
    pub rejections: u64,
    pub retrieval_failures: u64,
    pub max_norm_drift: f64,
}

/// Ensemble means, their standard errors and the step statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub mean: TimeSeries,
    /// Standard errors of the plain (non-variance) columns, named `se_<column>`.
    pub standard_error: TimeSeries,
    pub raw_mean: Vec<C64>,
    pub stats: EnsembleStatistics,
}

impl EnsembleResult {
    pub fn column(&self, name: &str) -> &[f64] {
        self.mean.column(name).unwrap_or(&[])
    }
}

fn correlation(s: &StepStatistics) -> Option<f64> {
    if s.paired < 2 {
        return None;
    }
    let n = s.paired as f64;
    let (mx, my) = (s.sum_dt_paired / n, s.sum_n / n);
    let cov = s.sum_dt_n / n - mx * my;
    let vx = s.sum_dt2_paired / n - mx * mx;
    let vy = s.sum_n2 / n - my * my;
    if vx > 0.0 && vy > 0.0 {
        Some(cov / (vx * vy).sqrt())
    } else {
        None
    }
}

/// Reduces trajectory records into ensemble means and statistics. Failed
/// trajectories are excluded; more than `max_failure_fraction` of them is an
/// error.
pub fn summarize(
    records: &[TrajectoryRecord],
    sys: &QuantumSystem,
    dt_sample: f64,
    max_failure_fraction: f64,
) -> Result<EnsembleResult> {
    if records.is_empty() {
        return Err(invalid("records", "empty ensemble"));
    }
    let failed: Vec<(u64, String)> = records
        .iter()
        .filter_map(|r| {
            r.failure
                .as_ref()
                .map(|f| (r.stream, format!("t = {}: {}", f.t, f.error)))
        })
        .collect();
    if failed.len() as f64 > max_failure_fraction * records.len() as f64 {
        return Err(Error::EnsembleFailure {
            failed: failed.len(),
            total: records.len(),
            first_index: failed[0].0 as usize,
            first_message: failed[0].1.clone(),
        });
    }
    let done: Vec<&TrajectoryRecord> = records.iter().filter(|r| r.is_complete()).collect();
    let obs = sys.observables();
    let k = obs.len();
    let n_samples = done[0].n_samples();
    let nt = done.len() as f64;

    let mut raw_mean = vec![C64::new(0.0, 0.0); n_samples * k];
    let mut raw_sq = vec![C64::new(0.0, 0.0); n_samples * k];
    for r in &done {
        for ((m, s), x) in raw_mean.iter_mut().zip(raw_sq.iter_mut()).zip(&r.samples) {
            *m += x;
            *s += C64::new(x.re * x.re, x.im * x.im);
        }
    }
    raw_mean.iter_mut().for_each(|m| *m /= nt);
    raw_sq.iter_mut().for_each(|s| *s /= nt);

    let grid = TimeSeries::uniform_grid(dt_sample, n_samples - 1);
    let names: Vec<String> = obs.column_names().iter().map(|s| s.to_string()).collect();
    let mut columns = vec![Vec::with_capacity(n_samples); names.len()];
    for u in 0..n_samples {
        for (c, v) in columns
            .iter_mut()
            .zip(obs.derive(&raw_mean[u * k..(u + 1) * k]))
        {
            c.push(v);
        }
    }
    let mean = TimeSeries::new(grid.clone(), names, columns)?;

    let se_of = |u: usize, i: usize, im: bool| {
        let (m, s) = (raw_mean[u * k + i], raw_sq[u * k + i]);
        let var = if im {
            s.im - m.im * m.im
        } else {
            s.re - m.re * m.re
        };
        if done.len() > 1 {
            (var.max(0.0) * nt / (nt - 1.0) / nt).sqrt()
        } else {
            f64::NAN
        }
    };
    let mut se_names = Vec::new();
    let mut se_cols = Vec::new();
    for (name, col) in &obs.columns {
        let (i, im) = match *col {
            Column::Re(i) => (i, false),
            Column::Im(i) => (i, true),
            Column::Variance { .. } => continue,
        };
        se_names.push(format!("se_{name}"));
        se_cols.push((0..n_samples).map(|u| se_of(u, i, im)).collect());
    }
    let standard_error = TimeSeries::new(grid, se_names, se_cols)?;

    let mut totals = StepStatistics::with_channels(sys.jumps().len());
    for r in &done {
        totals.merge(&r.stats);
    }
    let per =
        |f: &dyn Fn(&StepStatistics) -> f64| done.iter().map(|r| f(&r.stats)).collect::<Vec<f64>>();
    let sum_dt = per(&|s| s.sum_dt);
    let steps = per(&|s| s.steps as f64);
    let mean_dt = Estimate::ratio(&sum_dt, &steps);
    let mean_dt_per_trajectory = sum_dt.iter().zip(&steps).map(|(a, b)| a / b).sum::<f64>() / nt;
    let time_weighted_dt = Estimate::ratio(&per(&|s| s.sum_dt2), &sum_dt);
    let mean_inverse_rate = Estimate::from_values(&per(&|s| s.sum_dt_over_rate / s.sum_dt));
    let jumps: Vec<Estimate> = (0..sys.jumps().len())
        .map(|m| Estimate::from_values(&per(&|s| s.jumps[m] as f64)))
        .collect();
    let jump_difference = (sys.jumps().len() >= 2)
        .then(|| Estimate::from_values(&per(&|s| s.jumps[0] as f64 - s.jumps[1] as f64)));

    let stats = EnsembleStatistics {
        n_traj: records.len(),
        n_completed: done.len(),
        failed,
        full_step_fraction: totals.full_steps as f64 / totals.steps as f64,
        dt_tracked_correlation: correlation(&totals),
        rejections: totals.rejections,
        retrieval_failures: done.iter().map(|r| r.retrieval_failures).sum(),
        max_norm_drift: done.iter().map(|r| r.max_norm_drift).fold(1.0, f64::max),
        totals,
        mean_dt,
        mean_dt_per_trajectory,
        time_weighted_dt,
        mean_inverse_rate,
        jumps,
        jump_difference,
    };
    Ok(EnsembleResult {
        mean,
        standard_error,
        raw_mean,
        stats,
    })
}

/// Runs and summarizes an ensemble.
pub fn run_ensemble(
    psi0: &StateVector,
    sys: &QuantumSystem,
    cfg: &EnsembleConfig,
) -> Result<EnsembleResult> {
    let records = run_trajectories(psi0, sys, cfg)?;
    summarize(
        &records,
        sys,
        cfg.method.dt_sample(),
        cfg.max_failure_fraction,
    )
}

/// Predicted time-averaged step size `dp * <1 / r_tot>` for the thermal mode,
/// with `r_tot = 2 kappa ((2 n_th + 1) <n> + n_th)`. Each history holds
/// `(dt, <n>)` pairs along one trajectory; the result averages the per
/// trajectory time averages.
pub fn predicted_mean_dt(
    dp: f64,
    kappa: f64,
    n_th: f64,
    histories: &[Vec<(f64, f64)>],
) -> Result<f64> {
    if histories.is_empty() {
        return Err(invalid("histories", "empty"));
    }
    let mut acc = 0.0;
    for h in histories {
        let total: f64 = h.iter().map(|p| p.0).sum();
        if !(total > 0.0) {
            return Err(invalid("histories", "zero duration"));
        }
        let inv: f64 = h
            .iter()
            .map(|&(dt, n)| dt / (2.0 * kappa * ((2.0 * n_th + 1.0) * n + n_th)))
            .sum();
        acc += inv / total;
    }
    Ok(dp * acc / histories.len() as f64)
}

/// Jump-probability limit at which a Fock state `|n>` of the thermal mode can
/// just take a full sampling interval `dt_sample` in one step.
pub fn critical_dp(n: usize, kappa: f64, n_th: f64, dt_sample: f64) -> f64 {
    2.0 * kappa * dt_sample * ((2.0 * n_th + 1.0) * n as f64 + n_th)
}

/// How samples enter a time average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeAverage {
    /// Plain mean of samples taken at equal time intervals.
    EqualTime,
    /// Samples taken once per step, weighted by the step size.
    EqualSteps,
}

/// Average of `(value, dt)` samples. `EqualSteps` requires every `dt`.
pub fn time_average(samples: &[(f64, Option<f64>)], method: TimeAverage) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("samples", "empty"));
    }
    match method {
        TimeAverage::EqualTime => {
            Ok(samples.iter().map(|s| s.0).sum::<f64>() / samples.len() as f64)
        }
        TimeAverage::EqualSteps => {
            let (mut num, mut den) = (0.0, 0.0);
            for &(v, dt) in samples {
                let dt = dt.ok_or_else(|| {
                    invalid(
                        "samples",
                        "equal-steps averaging needs a step size on every sample",
                    )
                })?;
                num += dt * v;
                den += dt;
            }
            if !(den > 0.0) {
                return Err(invalid("samples", "step sizes sum to zero"));
            }
            Ok(num / den)
        }
    }
}

/// Checks that every record was sampled on the same grid.
pub fn check_grid(records: &[TrajectoryRecord], dt_sample: f64, t_final: f64) -> Result<()> {
    let want = sampling_intervals(dt_sample, t_final)? + 1;
    match records
        .iter()
        .find(|r| r.is_complete() && r.n_samples() != want)
    {
        Some(r) => Err(Error::InvariantViolation(format!(
            "trajectory {} has {} samples, expected {want}",
            r.stream,
            r.n_samples()
        ))),
        None => Ok(()),
    }
}
