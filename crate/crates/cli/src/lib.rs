//! Batch front-end: resolves a flat `key=value` configuration, runs one
//! engine, solver or chain oracle, and writes `series.csv`, `stats.csv` and a
//! `manifest` that reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, Command};
use mcwf::engine::DpControls;
use mcwf::ensemble::{
    run_trajectories, summarize, time_average, EnsembleConfig, EnsembleStatistics, Method,
    TimeAverage,
};
use mcwf::integrating::IntegratingControls;
use mcwf::master::{evolve_master, DensityMatrix};
use mcwf::oracle::{gillespie_trajectory, run_discrete_chain, state_at, ChainSpec};
use mcwf::rng::trajectory_rng;
use mcwf::series::TimeSeries;
use mcwf::{
    make_mode_system, make_particle_system, ModeParams, ParticleParams, Picture, QuantumSystem,
    StateVector, StepControl, C64,
};
use serde_json::json;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Every configuration key with its default and help text. An empty default
/// is derived from other keys.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model", "mode", "mode | particle"),
    ("method", "stepwise", "stepwise | integrating | master | oracle-gillespie | oracle-discrete"),
    ("picture", "", "schroedinger | interaction | non-unitary-interaction (default interaction for master, otherwise non-unitary-interaction)"),
    ("init", "fock:0", "initial state: fock:N, coherent:RE[,IM] or k:K (particle wave number)"),
    ("cutoff", "80", "mode basis size"),
    ("kappa", "1", "mode damping rate"),
    ("nTh", "0", "thermal occupancy"),
    ("eta", "0", "real part of the drive amplitude"),
    ("etaIm", "0", "imaginary part of the drive amplitude"),
    ("delta", "0", "detuning"),
    ("kCutoff", "32", "particle wave-number cutoff"),
    ("omegaRec", "1", "particle recoil frequency"),
    ("V", "1", "particle lattice depth"),
    ("KRatio", "1", "lattice wave number in units of the basis spacing"),
    ("dpLimit", "0.1", "jump-probability limit per step"),
    ("dpOvershoot", "", "rejection threshold (default 10 dpLimit)"),
    ("renormalize", "true", "renormalize the state after every step"),
    ("Dt", "0.05", "sampling interval"),
    ("T", "5", "final time"),
    ("epsAbs", "1e-12", "absolute ODE tolerance"),
    ("epsRel", "1e-6", "relative ODE tolerance"),
    ("dtMin", "1e-14", "smallest ODE step"),
    ("dtMax", "inf", "largest ODE step"),
    ("normTol", "0.001", "norm tolerance of the integrating method"),
    ("maxIters", "5", "jump-time search iterations of the integrating method"),
    ("nTraj", "100", "number of trajectories"),
    ("seed", "1", "base seed"),
    ("jobs", "0", "worker threads (0 = all cores)"),
    ("sampling", "equal-time", "time-average rule for stats: equal-time | equal-steps"),
    ("output", ".", "output directory"),
];

/// A run-time failure with its process exit status.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Validation { key: String, message: String },
    Numeric(String),
    Truncation(String),
    Io(String),
}

impl CliError {
    fn invalid(key: &str, message: impl Into<String>) -> Self {
        CliError::Validation {
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation { .. } => 2,
            CliError::Numeric(_) => 3,
            CliError::Truncation(_) => 4,
            CliError::Io(_) => 1,
        }
    }

    /// One-line JSON record for stderr.
    pub fn to_json(&self) -> String {
        let v = match self {
            CliError::Validation { key, message } => {
                json!({"error": "validation", "key": key, "message": message})
            }
            CliError::Numeric(m) => json!({"error": "numeric", "message": m}),
            CliError::Truncation(m) => json!({"error": "truncation", "message": m}),
            CliError::Io(m) => json!({"error": "io", "message": m}),
        };
        v.to_string()
    }
}

impl From<mcwf::Error> for CliError {
    fn from(e: mcwf::Error) -> Self {
        use mcwf::Error as E;
        match e {
            E::InvalidParameter { name, reason } => CliError::invalid(name, reason),
            E::InvalidDimension(m) => CliError::invalid("cutoff", m),
            E::DimensionMismatch { .. } => CliError::invalid("init", e.to_string()),
            E::Truncation { .. } | E::CutoffOverflow { .. } => CliError::Truncation(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Mode,
    Particle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Stepwise,
    Integrating,
    Master,
    OracleGillespie,
    OracleDiscrete,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Fock(usize),
    Coherent(C64),
    WaveNumber(i64),
}

/// Fully validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Model,
    pub method: MethodKind,
    pub picture: Picture,
    pub init: Init,
    pub mode: ModeParams,
    pub particle: ParticleParams,
    pub dp: DpControls,
    pub integrating: IntegratingControls,
    pub ode: StepControl,
    pub n_traj: usize,
    pub seed: u64,
    pub jobs: usize,
    pub sampling: TimeAverage,
    pub output: PathBuf,
    /// Resolved `key=value` pairs in `KEYS` order.
    pub resolved: Vec<(String, String)>,
}

fn command() -> Command {
    let mut cmd = Command::new("mcwf")
        .version(VERSION)
        .about("Monte Carlo wave-function trajectories, master equation and chain oracles for a thermal mode")
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat key=value configuration file; flags override its values"),
        );
    for &(key, default, help) in KEYS {
        let help = if default.is_empty() {
            help.to_string()
        } else {
            format!("{help} [default: {default}]")
        };
        cmd = cmd.arg(Arg::new(key).long(key).value_name("VALUE").help(help));
    }
    cmd
}

/// Reads `key=value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::invalid("config", format!("line {}: expected key=value", i + 1))
        })?;
        let k = k.trim();
        if !KEYS.iter().any(|e| e.0 == k) {
            return Err(CliError::invalid(
                k,
                format!("unknown key on config line {}", i + 1),
            ));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Outcome of argument parsing: a configuration or text to print and exit.
#[derive(Debug)]
pub enum Parsed {
    Run(Box<RunConfig>),
    Exit(String),
}

/// Parses `argv` (program name first). Flags override the `--config` file.
pub fn parse_args<I, S>(argv: I) -> Result<Parsed, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let m = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    Ok(Parsed::Exit(e.to_string()))
                }
                _ => Err(CliError::invalid("argv", e.kind().to_string())),
            };
        }
    };
    let mut map = match m.get_one::<String>("config") {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::invalid("config", format!("{path}: {e}")))?;
            parse_config_text(&text)?
        }
        None => BTreeMap::new(),
    };
    for &(key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            map.insert(key.to_string(), v.clone());
        }
    }
    resolve(&map).map(|c| Parsed::Run(Box::new(c)))
}

struct Lookup<'a> {
    map: &'a BTreeMap<String, String>,
}

impl Lookup<'_> {
    fn raw(&self, key: &str) -> String {
        match self.map.get(key) {
            Some(v) => v.clone(),
            None => KEYS
                .iter()
                .find(|e| e.0 == key)
                .map(|e| e.1.to_string())
                .unwrap_or_default(),
        }
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| CliError::invalid(key, format!("cannot parse `{v}`")))
    }

    fn real(&self, key: &str) -> Result<f64, CliError> {
        let x: f64 = self.parse(key)?;
        if x.is_nan() {
            return Err(CliError::invalid(key, "must be a number"));
        }
        Ok(x)
    }

    fn finite(&self, key: &str) -> Result<f64, CliError> {
        let x = self.real(key)?;
        if !x.is_finite() {
            return Err(CliError::invalid(key, "must be finite"));
        }
        Ok(x)
    }
}

fn parse_init(v: &str) -> Result<Init, CliError> {
    let bad = || CliError::invalid("init", format!("cannot parse `{v}`"));
    let (kind, rest) = v.split_once(':').ok_or_else(bad)?;
    match kind {
        "fock" => rest.trim().parse().map(Init::Fock).map_err(|_| bad()),
        "k" => rest.trim().parse().map(Init::WaveNumber).map_err(|_| bad()),
        "coherent" => {
            let mut parts = rest.split(',').map(|s| s.trim().parse::<f64>());
            let re = parts.next().ok_or_else(bad)?.map_err(|_| bad())?;
            let im = parts.next().transpose().map_err(|_| bad())?.unwrap_or(0.0);
            if parts.next().is_some() || !re.is_finite() || !im.is_finite() {
                return Err(bad());
            }
            Ok(Init::Coherent(C64::new(re, im)))
        }
        _ => Err(bad()),
    }
}

/// Validates a merged key map into a run configuration.
pub fn resolve(map: &BTreeMap<String, String>) -> Result<RunConfig, CliError> {
    if let Some(k) = map.keys().find(|k| !KEYS.iter().any(|e| e.0 == k.as_str())) {
        return Err(CliError::invalid(k, "unknown key"));
    }
    let l = Lookup { map };
    let model = match l.raw("model").as_str() {
        "mode" => Model::Mode,
        "particle" => Model::Particle,
        other => {
            return Err(CliError::invalid(
                "model",
                format!("unknown model `{other}`"),
            ))
        }
    };
    let method = match l.raw("method").as_str() {
        "stepwise" => MethodKind::Stepwise,
        "integrating" => MethodKind::Integrating,
        "master" => MethodKind::Master,
        "oracle-gillespie" => MethodKind::OracleGillespie,
        "oracle-discrete" => MethodKind::OracleDiscrete,
        other => {
            return Err(CliError::invalid(
                "method",
                format!("unknown method `{other}`"),
            ))
        }
    };
    let picture: Picture = match l.raw("picture").as_str() {
        "" if method == MethodKind::Master => Picture::Interaction,
        "" => Picture::NonUnitaryInteraction,
        v => v.parse().map_err(CliError::from)?,
    };
    let init = parse_init(&l.raw("init"))?;
    let mode = ModeParams {
        cutoff: l.parse("cutoff")?,
        kappa: l.finite("kappa")?,
        n_th: l.finite("nTh")?,
        eta: C64::new(l.finite("eta")?, l.finite("etaIm")?),
        delta: l.finite("delta")?,
    };
    let particle = ParticleParams {
        k_cutoff: l.parse("kCutoff")?,
        omega_rec: l.finite("omegaRec")?,
        v: l.finite("V")?,
        k_ratio: l.parse("KRatio")?,
    };
    match model {
        Model::Mode => mode.validate()?,
        Model::Particle => particle.validate()?,
    }
    let dt_sample = l.finite("Dt")?;
    let t_final = l.finite("T")?;
    let mut dp = DpControls::new(l.finite("dpLimit")?, dt_sample, t_final);
    if !l.raw("dpOvershoot").is_empty() {
        dp.dp_overshoot = l.finite("dpOvershoot")?;
    }
    dp.renormalize = l.parse("renormalize")?;
    let mut integrating = IntegratingControls::new(dt_sample, t_final);
    integrating.norm_tol = l.finite("normTol")?;
    integrating.max_iters = l.parse("maxIters")?;
    let mut ode = StepControl::new(l.finite("epsAbs")?, l.finite("epsRel")?);
    ode.dt_min = l.finite("dtMin")?;
    ode.dt_max = l.real("dtMax")?;
    ode.validate()?;
    let sampling = match l.raw("sampling").as_str() {
        "equal-time" => TimeAverage::EqualTime,
        "equal-steps" => TimeAverage::EqualSteps,
        other => {
            return Err(CliError::invalid(
                "sampling",
                format!("unknown rule `{other}`"),
            ))
        }
    };
    let n_traj: usize = l.parse("nTraj")?;
    if n_traj == 0 {
        return Err(CliError::invalid("nTraj", "must be at least 1"));
    }

    match method {
        MethodKind::Stepwise | MethodKind::OracleDiscrete => dp.validate()?,
        MethodKind::Integrating => integrating.validate()?,
        MethodKind::Master | MethodKind::OracleGillespie => {
            mcwf::engine::sampling_intervals(dt_sample, t_final)?;
        }
    }
    if sampling == TimeAverage::EqualSteps && method != MethodKind::Stepwise {
        return Err(CliError::invalid(
            "sampling",
            "equal-steps averaging needs the stepwise method",
        ));
    }
    if matches!(
        method,
        MethodKind::OracleGillespie | MethodKind::OracleDiscrete
    ) {
        if model != Model::Mode {
            return Err(CliError::invalid(
                "method",
                "chain oracles describe the mode model",
            ));
        }
        if mode.eta != C64::new(0.0, 0.0) {
            return Err(CliError::invalid(
                "eta",
                "chain oracles need an undriven mode",
            ));
        }
        if !matches!(init, Init::Fock(_)) {
            return Err(CliError::invalid(
                "init",
                "chain oracles start from a Fock state",
            ));
        }
    }
    match (model, init) {
        (Model::Mode, Init::WaveNumber(_)) => {
            return Err(CliError::invalid(
                "init",
                "k:K applies to the particle model",
            ))
        }
        (Model::Particle, Init::Coherent(_)) => {
            return Err(CliError::invalid(
                "init",
                "coherent states apply to the mode model",
            ))
        }
        _ => {}
    }

    let mut resolved = Vec::with_capacity(KEYS.len());
    for &(key, _, _) in KEYS {
        let v = match key {
            "dpOvershoot" => dp.dp_overshoot.to_string(),
            "picture" => picture.to_string(),
            _ => l.raw(key),
        };
        resolved.push((key.to_string(), v));
    }
    Ok(RunConfig {
        model,
        method,
        picture,
        init,
        mode,
        particle,
        dp,
        integrating,
        ode,
        n_traj,
        seed: l.parse("seed")?,
        jobs: l.parse("jobs")?,
        sampling,
        output: PathBuf::from(l.raw("output")),
        resolved,
    })
}

impl RunConfig {
    pub fn system(&self) -> Result<QuantumSystem, CliError> {
        Ok(match self.model {
            Model::Mode => make_mode_system(&self.mode, self.picture)?,
            Model::Particle => make_particle_system(&self.particle, self.picture)?,
        })
    }

    pub fn initial_state(&self) -> Result<StateVector, CliError> {
        let dim = match self.model {
            Model::Mode => self.mode.cutoff,
            Model::Particle => self.particle.dim(),
        };
        Ok(match self.init {
            Init::Fock(n) => {
                if n >= dim {
                    return Err(CliError::invalid(
                        "init",
                        format!("label {n} outside the basis of size {dim}"),
                    ));
                }
                StateVector::fock(n, dim)?
            }
            Init::Coherent(alpha) => StateVector::coherent(alpha, dim)?.state,
            Init::WaveNumber(k) => {
                let i = self.particle.index(k).ok_or_else(|| {
                    CliError::invalid("init", format!("wave number {k} outside the basis"))
                })?;
                StateVector::fock(i, dim)?
            }
        })
    }

    /// Text of the `manifest` file; feeding it back through `--config`
    /// reproduces the run.
    pub fn manifest(&self) -> String {
        let mut s = format!("# mcwf-cli {VERSION}\n");
        for (k, v) in &self.resolved {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Tabular result of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub stats: Vec<(String, String)>,
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn series_output(mean: &TimeSeries, extra: Option<&TimeSeries>) -> Output {
    let mut header = vec!["t".to_string()];
    header.extend(mean.names().iter().cloned());
    if let Some(e) = extra {
        header.extend(e.names().iter().cloned());
    }
    let rows = (0..mean.len())
        .map(|u| {
            let mut r = vec![mean.grid()[u]];
            r.extend(mean.row(u));
            if let Some(e) = extra {
                r.extend(e.row(u));
            }
            r
        })
        .collect();
    Output {
        header,
        rows,
        stats: Vec::new(),
    }
}

fn ensemble_stats(s: &EnsembleStatistics) -> Vec<(String, String)> {
    let mut v = vec![
        ("n_traj".to_string(), s.n_traj.to_string()),
        ("n_completed".into(), s.n_completed.to_string()),
        ("n_failed".into(), s.failed.len().to_string()),
        ("steps".into(), s.totals.steps.to_string()),
        ("rejections".into(), s.rejections.to_string()),
        ("mean_dt".into(), num(s.mean_dt.mean)),
        ("se_mean_dt".into(), num(s.mean_dt.se)),
        (
            "mean_dt_per_trajectory".into(),
            num(s.mean_dt_per_trajectory),
        ),
        ("time_weighted_dt".into(), num(s.time_weighted_dt.mean)),
        ("se_time_weighted_dt".into(), num(s.time_weighted_dt.se)),
        ("mean_inverse_rate".into(), num(s.mean_inverse_rate.mean)),
        ("full_step_fraction".into(), num(s.full_step_fraction)),
    ];
    for (m, j) in s.jumps.iter().enumerate() {
        v.push((format!("jumps_{m}"), num(j.mean)));
        v.push((format!("se_jumps_{m}"), num(j.se)));
    }
    if !s.jumps.is_empty() {
        let mean = s.jumps.iter().map(|j| j.mean).sum::<f64>() / s.jumps.len() as f64;
        v.push(("jumps_mean".into(), num(mean)));
    }
    if let Some(d) = s.jump_difference {
        v.push(("jump_difference".into(), num(d.mean)));
        v.push(("se_jump_difference".into(), num(d.se)));
    }
    v.push((
        "dt_tracked_correlation".into(),
        s.dt_tracked_correlation.map_or("nan".into(), num),
    ));
    v.push((
        "retrieval_failures".into(),
        s.retrieval_failures.to_string(),
    ));
    v.push(("max_norm_drift".into(), num(s.max_norm_drift)));
    v
}

fn tracked_time_average(
    cfg: &RunConfig,
    sys: &QuantumSystem,
    mean: &TimeSeries,
    s: Option<&EnsembleStatistics>,
) -> Result<Option<(String, f64)>, CliError> {
    let obs = sys.observables();
    let Some(i) = obs.tracked else {
        return Ok(None);
    };
    let Some(name) = obs
        .columns
        .iter()
        .find(|c| matches!(c.1, mcwf::models::Column::Re(j) if j == i))
        .map(|c| c.0)
    else {
        return Ok(None);
    };
    let value = match cfg.sampling {
        TimeAverage::EqualTime => {
            let samples: Vec<(f64, Option<f64>)> = mean
                .column(name)
                .unwrap_or(&[])
                .iter()
                .map(|&v| (v, None))
                .collect();
            time_average(&samples, TimeAverage::EqualTime)?
        }
        TimeAverage::EqualSteps => {
            let t = &s
                .ok_or_else(|| CliError::invalid("sampling", "no step statistics"))?
                .totals;
            if !(t.sum_dt_paired > 0.0) {
                return Err(CliError::invalid("sampling", "no tracked step samples"));
            }
            t.sum_dt_n / t.sum_dt_paired
        }
    };
    Ok(Some((format!("time_average_{name}"), value)))
}

fn run_ensemble_method(
    cfg: &RunConfig,
    sys: &QuantumSystem,
    psi: &StateVector,
) -> Result<Output, CliError> {
    let method = match cfg.method {
        MethodKind::Stepwise => Method::Stepwise(cfg.dp),
        _ => Method::Integrating(cfg.integrating),
    };
    let mut ec = EnsembleConfig::new(method, cfg.n_traj, cfg.seed);
    ec.ode = cfg.ode;
    ec.jobs = cfg.jobs;
    let records = run_trajectories(psi, sys, &ec)?;
    let result = match summarize(&records, sys, method.dt_sample(), ec.max_failure_fraction) {
        Ok(r) => r,
        Err(e) => {
            let first = records.iter().find_map(|r| r.failure.as_ref());
            return Err(match first {
                Some(f)
                    if matches!(
                        f.error,
                        mcwf::Error::CutoffOverflow { .. } | mcwf::Error::Truncation { .. }
                    ) =>
                {
                    CliError::Truncation(e.to_string())
                }
                _ => e.into(),
            });
        }
    };
    let mut out = series_output(&result.mean, Some(&result.standard_error));
    out.stats = ensemble_stats(&result.stats);
    if let Some((k, v)) = tracked_time_average(cfg, sys, &result.mean, Some(&result.stats))? {
        out.stats.push((k, num(v)));
    }
    Ok(out)
}

fn run_master(cfg: &RunConfig, sys: &QuantumSystem, psi: &StateVector) -> Result<Output, CliError> {
    let rho0 = DensityMatrix::from_pure(psi)?;
    let sol = evolve_master(&rho0, sys, cfg.dp.dt_sample, cfg.dp.t_final, &cfg.ode)?;
    let mut out = series_output(&sol.series, None);
    out.stats = vec![
        ("steps".into(), sol.steps.to_string()),
        (
            "max_hermiticity_error".into(),
            num(sol.max_hermiticity_error),
        ),
        ("max_trace_error".into(), num(sol.max_trace_error)),
    ];
    if let Some((k, v)) = tracked_time_average(cfg, sys, &sol.series, None)? {
        out.stats.push((k, num(v)));
    }
    Ok(out)
}

/// Mode columns from per-run photon numbers; Fock states have `<a> = 0`.
fn chain_output(cfg: &RunConfig, samples: &[Vec<usize>]) -> Output {
    let intervals = samples[0].len() - 1;
    let grid = TimeSeries::uniform_grid(cfg.dp.dt_sample, intervals);
    let n = samples.len() as f64;
    let rows = (0..=intervals)
        .map(|u| {
            let m = samples.iter().map(|s| s[u] as f64).sum::<f64>() / n;
            let m2 = samples.iter().map(|s| (s[u] as f64).powi(2)).sum::<f64>() / n;
            let se = if samples.len() > 1 {
                ((m2 - m * m).max(0.0) / (n - 1.0)).sqrt()
            } else {
                f64::NAN
            };
            vec![grid[u], 0.0, 0.0, m, m2 - m * m, se]
        })
        .collect();
    Output {
        header: ["t", "re_a", "im_a", "n", "var_n", "se_n"]
            .map(String::from)
            .to_vec(),
        rows,
        stats: Vec::new(),
    }
}

fn run_oracle(cfg: &RunConfig, psi: &StateVector) -> Result<Output, CliError> {
    let Init::Fock(n0) = cfg.init else {
        return Err(CliError::invalid(
            "init",
            "chain oracles start from a Fock state",
        ));
    };
    let spec = ChainSpec::new(cfg.mode.kappa, cfg.mode.n_th)?;
    let intervals = mcwf::engine::sampling_intervals(cfg.dp.dt_sample, cfg.dp.t_final)?;
    let mut samples = Vec::with_capacity(cfg.n_traj);
    let mut jumps = [0u64; 2];
    let mut steps = 0u64;
    let mut rejections = 0u64;
    for i in 0..cfg.n_traj as u64 {
        let mut rng = trajectory_rng(cfg.seed, i);
        match cfg.method {
            MethodKind::OracleGillespie => {
                let path = gillespie_trajectory(n0, &spec, cfg.dp.t_final, &mut rng);
                let mut prev = n0;
                for &(_, n) in &path {
                    jumps[if n < prev { 0 } else { 1 }] += 1;
                    prev = n;
                }
                samples.push(
                    (0..=intervals)
                        .map(|u| {
                            state_at(n0, &path, mcwf::engine::sample_time(u, cfg.dp.dt_sample))
                        })
                        .collect(),
                );
            }
            _ => {
                let run = run_discrete_chain(n0, &spec, &cfg.dp, cfg.ode.dt_max, &mut rng)?;
                jumps[0] += run.jumps[0];
                jumps[1] += run.jumps[1];
                steps += run.steps;
                rejections += run.rejections;
                samples.push(run.samples);
            }
        }
        if samples
            .last()
            .is_some_and(|s| s.iter().any(|&n| n + 1 >= psi.cutoff()))
        {
            return Err(CliError::Truncation(format!(
                "chain run {i} reached the cutoff {}",
                psi.cutoff()
            )));
        }
    }
    let mut out = chain_output(cfg, &samples);
    let nt = cfg.n_traj as f64;
    out.stats = vec![
        ("n_traj".into(), cfg.n_traj.to_string()),
        ("jumps_0".into(), num(jumps[0] as f64 / nt)),
        ("jumps_1".into(), num(jumps[1] as f64 / nt)),
        (
            "jumps_mean".into(),
            num((jumps[0] + jumps[1]) as f64 / 2.0 / nt),
        ),
        (
            "jump_difference".into(),
            num((jumps[0] as f64 - jumps[1] as f64) / nt),
        ),
    ];
    if cfg.method == MethodKind::OracleDiscrete {
        out.stats.push(("steps".into(), steps.to_string()));
        out.stats
            .push(("rejections".into(), rejections.to_string()));
        out.stats
            .push(("mean_dt".into(), num(cfg.dp.t_final * nt / steps as f64)));
    }
    let n_col: Vec<(f64, Option<f64>)> = out.rows.iter().map(|r| (r[3], None)).collect();
    out.stats.push((
        "time_average_n".into(),
        num(time_average(&n_col, TimeAverage::EqualTime)?),
    ));
    Ok(out)
}

/// Runs the configured method without touching the file system.
pub fn compute(cfg: &RunConfig) -> Result<Output, CliError> {
    let sys = cfg.system()?;
    let psi = cfg.initial_state()?;
    match cfg.method {
        MethodKind::Stepwise | MethodKind::Integrating => run_ensemble_method(cfg, &sys, &psi),
        MethodKind::Master => run_master(cfg, &sys, &psi),
        MethodKind::OracleGillespie | MethodKind::OracleDiscrete => run_oracle(cfg, &psi),
    }
}

pub fn series_csv(out: &Output) -> String {
    let mut s = out.header.join(",");
    s.push('\n');
    for r in &out.rows {
        let cells: Vec<String> = r.iter().map(|&x| num(x)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn stats_csv(out: &Output) -> String {
    let mut s = String::from("field,value\n");
    for (k, v) in &out.stats {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

/// Runs and writes `series.csv`, `stats.csv` and `manifest` into the output
/// directory. Returns the written paths.
pub fn run(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let out = compute(cfg)?;
    let dir: &Path = &cfg.output;
    fs::create_dir_all(dir)?;
    let files = [
        ("series.csv", series_csv(&out)),
        ("stats.csv", stats_csv(&out)),
        ("manifest", cfg.manifest()),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}
