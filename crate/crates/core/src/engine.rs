//! The stepwise adaptive trajectory engine.
//!
//! Each step runs the no-jump ODE step, renormalizes exactly, evaluates the
//! jump rates on the evolved state, optionally rejects an overshooting step,
//! and then decides on at most one jump with a single uniform draw. The next
//! trial step is capped so that its total jump probability stays below `dp`.

use std::ops::Range;

use num_complex::Complex64 as C64;
use rand::Rng;
use smallvec::SmallVec;

use crate::error::{invalid, Error, Result};
use crate::evolution::{shrink_support, NoJumpStepper};
use crate::hilbert::{normalize_slice, Operator, StateVector};
use crate::models::QuantumSystem;
use crate::ode::StepControl;
use crate::rng::trajectory_rng;

pub type Rates = SmallVec<[f64; 4]>;

/// Edge population above which the basis is considered breached.
pub const CUTOFF_POPULATION_LIMIT: f64 = 1e-6;

/// Stepwise jump-probability control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpControls {
    /// Largest total jump probability a trial step may carry.
    pub dp_limit: f64,
    /// Accepted steps whose jump probability exceeds this are rejected.
    pub dp_overshoot: f64,
    pub dt_sample: f64,
    pub t_final: f64,
    /// Rescale the state to unit norm after every ODE step.
    pub renormalize: bool,
}

impl DpControls {
    pub fn new(dp_limit: f64, dt_sample: f64, t_final: f64) -> Self {
        Self {
            dp_limit,
            dp_overshoot: 10.0 * dp_limit,
            dt_sample,
            t_final,
            renormalize: true,
        }
    }

    /// Effectively switches off step rejection.
    pub fn without_rejection(mut self) -> Self {
        self.dp_overshoot = 1e6;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dp_limit > 0.0 && self.dp_limit < 1.0) {
            return Err(invalid(
                "dpLimit",
                format!("must lie in (0, 1), got {}", self.dp_limit),
            ));
        }
        if !(self.dp_overshoot > self.dp_limit) {
            return Err(invalid("dpOvershoot", "must exceed dpLimit"));
        }
        sampling_intervals(self.dt_sample, self.t_final)?;
        Ok(())
    }

    pub fn intervals(&self) -> usize {
        sampling_intervals(self.dt_sample, self.t_final).unwrap_or(0)
    }
}

/// Number of sampling intervals `T / Dt`, which must be an integer.
pub fn sampling_intervals(dt_sample: f64, t_final: f64) -> Result<usize> {
    if !(dt_sample > 0.0) || !dt_sample.is_finite() {
        return Err(invalid("Dt", "must be positive and finite"));
    }
    if !(t_final >= dt_sample) || !t_final.is_finite() {
        return Err(invalid("T", "must be finite and at least Dt"));
    }
    let u = (t_final / dt_sample).round();
    if (u * dt_sample - t_final).abs() > 1e-9 * t_final {
        return Err(invalid(
            "T",
            format!("{t_final} is not a multiple of Dt = {dt_sample}"),
        ));
    }
    Ok(u as usize)
}

/// Sampling instant `u * Dt`.
#[inline]
pub fn sample_time(u: usize, dt_sample: f64) -> f64 {
    u as f64 * dt_sample
}

/// Log entry of one attempted step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t_before: f64,
    pub dt_did: f64,
    pub jump_index: Option<usize>,
    pub rates: Rates,
    pub dp_step: f64,
    pub rejected_layer2: bool,
    /// Norm of the evolved state before renormalization.
    pub norm_correction: f64,
    /// Tracked observable at the step start.
    pub tracked_before: Option<f64>,
}

/// Outcome of the jump draw of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpDecision {
    pub draw: f64,
    pub selected: Option<usize>,
    /// `Pi_m = r_m / r_tot`.
    pub probabilities: Rates,
}

/// Fires when `draw < r_tot dt`; the channel is the first `m` with
/// `draw < sum_{i <= m} r_i dt`.
pub fn decide_jump(draw: f64, rates: &[f64], dt: f64) -> JumpDecision {
    let r_tot: f64 = rates.iter().sum();
    let probabilities = if r_tot > 0.0 {
        rates.iter().map(|r| r / r_tot).collect()
    } else {
        rates.iter().map(|_| 0.0).collect()
    };
    let mut selected = None;
    if draw < r_tot * dt {
        let mut acc = 0.0;
        for (m, r) in rates.iter().enumerate() {
            acc += r * dt;
            if draw < acc {
                selected = Some(m);
                break;
            }
        }
        if selected.is_none() {
            selected = rates.iter().rposition(|&r| r > 0.0);
        }
    }
    JumpDecision {
        draw,
        selected,
        probabilities,
    }
}

fn checked_rate(channel: usize, r: f64) -> Result<f64> {
    if !r.is_finite() {
        return Err(Error::NonFinite("jump rate"));
    }
    if r < -1e-12 {
        return Err(Error::NegativeRate { channel, rate: r });
    }
    Ok(r.max(0.0))
}

/// `r_m = <psi|J_m^dagger J_m|psi>` for a normalized `psi`.
pub fn jump_rates(psi: &StateVector, jumps: &[Operator]) -> Result<Vec<f64>> {
    jumps
        .iter()
        .enumerate()
        .map(|(m, j)| {
            let jpsi = j.apply(psi)?;
            checked_rate(m, jpsi.norm_sqr())
        })
        .collect()
}

fn rates_into(
    rate_ops: &[Operator],
    psi: &[C64],
    support: &Range<usize>,
    norm2: f64,
    out: &mut Rates,
) -> Result<f64> {
    out.clear();
    let mut total = 0.0;
    for (m, op) in rate_ops.iter().enumerate() {
        let r = checked_rate(m, op.sandwich_range(psi, support.clone()).re / norm2)?;
        total += r;
        out.push(r);
    }
    Ok(total)
}

/// `min(dt_next_ode, dp / r_tot)`, or `dt_next_ode` when nothing can jump.
pub fn cap_dt_next(dt_next_ode: f64, r_tot: f64, dp_limit: f64) -> f64 {
    if r_tot > 0.0 {
        dt_next_ode.min(dp_limit / r_tot)
    } else {
        dt_next_ode
    }
}

/// Result of [`StepwiseEngine::advance`].
#[derive(Debug, Clone, PartialEq)]
pub struct Advance {
    pub t: f64,
    pub dt_try_next: f64,
    /// The stepper's own suggestion before the jump-probability cap.
    pub dt_next_ode: f64,
    /// Total rate on the evolved state, before any jump.
    pub r_tot: f64,
    pub record: StepRecord,
}

/// Per-trajectory workspace of the stepwise method.
#[derive(Debug, Clone)]
pub struct StepwiseEngine<'a> {
    sys: &'a QuantumSystem,
    ctl: DpControls,
    ode: StepControl,
    stepper: NoJumpStepper,
    cache: Vec<C64>,
    scratch: Vec<C64>,
    rates: Rates,
    support: Range<usize>,
    norm2: f64,
}

impl<'a> StepwiseEngine<'a> {
    pub fn new(sys: &'a QuantumSystem, ctl: DpControls, ode: StepControl) -> Result<Self> {
        ctl.validate()?;
        ode.validate()?;
        let dim = sys.dim();
        Ok(Self {
            sys,
            ctl,
            ode,
            stepper: NoJumpStepper::new(dim),
            cache: vec![C64::new(0.0, 0.0); dim],
            scratch: vec![C64::new(0.0, 0.0); dim],
            rates: Rates::new(),
            support: 0..dim,
            norm2: 1.0,
        })
    }

    /// Prepares for a new trajectory starting from `psi`.
    pub fn reset(&mut self, psi: &[C64]) -> Result<()> {
        if psi.len() != self.sys.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.sys.dim(),
                found: psi.len(),
            });
        }
        self.support = shrink_support(psi, 0..psi.len());
        self.norm2 = psi.iter().map(|z| z.norm_sqr()).sum();
        if self.norm2 == 0.0 {
            return Err(Error::DegenerateState);
        }
        Ok(())
    }

    pub fn support(&self) -> Range<usize> {
        self.support.clone()
    }

    /// Squared norm of the stored state.
    pub fn norm_sqr(&self) -> f64 {
        self.norm2
    }

    /// Rates on `psi` as it stands.
    pub fn current_rates(&mut self, psi: &[C64]) -> Result<f64> {
        rates_into(
            self.sys.rate_operators(),
            psi,
            &self.support,
            self.norm2,
            &mut self.rates,
        )
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Expectation of the tracked observable on `psi`.
    pub fn tracked(&self, psi: &[C64]) -> Option<f64> {
        let obs = self.sys.observables();
        obs.tracked
            .map(|i| obs.ops[i].sandwich_range(psi, self.support.clone()).re / self.norm2)
    }

    /// Largest normalized population on the system's basis edges.
    pub fn edge_population(&self, psi: &[C64]) -> f64 {
        self.sys
            .edges()
            .iter()
            .filter(|e| self.support.contains(e))
            .map(|&e| psi[e].norm_sqr() / self.norm2)
            .fold(0.0, f64::max)
    }

    /// One step of the stepwise method from `(psi, t)` with trial size `dt_try`.
    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        psi: &mut [C64],
        t: f64,
        dt_try: f64,
        rng: &mut R,
    ) -> Result<Advance> {
        let support_before = self.support.clone();
        let norm2_before = self.norm2;
        self.cache[support_before.clone()].copy_from_slice(&psi[support_before.clone()]);
        let tracked_before = self.tracked(psi);

        let info = self
            .stepper
            .step(self.sys, psi, &mut self.support, t, dt_try, &self.ode)?;
        let norm2 = psi[self.support.clone()]
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>();
        let norm_correction = norm2.sqrt();
        if self.ctl.renormalize {
            normalize_slice(&mut psi[self.support.clone()])?;
            self.norm2 = 1.0;
        } else {
            if !(norm2 > 0.0) || !norm2.is_finite() {
                return Err(if norm2 == 0.0 {
                    Error::DegenerateState
                } else {
                    Error::NonFinite("state norm")
                });
            }
            self.norm2 = norm2;
        }
        let r_tot = rates_into(
            self.sys.rate_operators(),
            psi,
            &self.support,
            self.norm2,
            &mut self.rates,
        )?;
        let dp_step = r_tot * info.dt_did;

        if dp_step > self.ctl.dp_overshoot {
            psi[self.support.clone()].fill(C64::new(0.0, 0.0));
            psi[support_before.clone()].copy_from_slice(&self.cache[support_before.clone()]);
            self.support = support_before;
            self.norm2 = norm2_before;
            return Ok(Advance {
                t,
                dt_try_next: self.ctl.dp_limit / r_tot,
                dt_next_ode: info.dt_next,
                r_tot,
                record: StepRecord {
                    t_before: t,
                    dt_did: info.dt_did,
                    jump_index: None,
                    rates: self.rates.clone(),
                    dp_step,
                    rejected_layer2: true,
                    norm_correction,
                    tracked_before,
                },
            });
        }

        let draw: f64 = rng.random();
        let decision = decide_jump(draw, &self.rates, info.dt_did);
        if let Some(m) = decision.selected {
            self.jump(psi, m)?;
        }
        Ok(Advance {
            t: t + info.dt_did,
            dt_try_next: cap_dt_next(info.dt_next, r_tot, self.ctl.dp_limit),
            dt_next_ode: info.dt_next,
            r_tot,
            record: StepRecord {
                t_before: t,
                dt_did: info.dt_did,
                jump_index: decision.selected,
                rates: self.rates.clone(),
                dp_step,
                rejected_layer2: false,
                norm_correction,
                tracked_before,
            },
        })
    }

    fn jump(&mut self, psi: &mut [C64], m: usize) -> Result<()> {
        let j = &self.sys.jumps()[m];
        let out = j.apply_range_into(psi, self.support.clone(), &mut self.scratch);
        psi[self.support.clone()].fill(C64::new(0.0, 0.0));
        psi[out.clone()].copy_from_slice(&self.scratch[out.clone()]);
        self.support = shrink_support(psi, out);
        let n2: f64 = psi[self.support.clone()].iter().map(|z| z.norm_sqr()).sum();
        if n2 == 0.0 {
            return Err(Error::DegenerateState);
        }
        // Without renormalization the jump keeps the running norm.
        let target = if self.ctl.renormalize {
            1.0
        } else {
            self.norm2
        };
        let s = (target / n2).sqrt();
        psi[self.support.clone()].iter_mut().for_each(|z| *z *= s);
        self.norm2 = target;
        Ok(())
    }
}

/// Running sums over accepted steps, mergeable across trajectories.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStatistics {
    pub steps: u64,
    pub rejections: u64,
    pub full_steps: u64,
    pub jumps: SmallVec<[u64; 4]>,
    pub sum_dt: f64,
    pub sum_dt2: f64,
    /// `sum dt / r_tot`, with `r_tot` taken at each step start.
    pub sum_dt_over_rate: f64,
    /// Steps that entered the dt-tracked co-moments below.
    pub paired: u64,
    pub sum_n: f64,
    pub sum_n2: f64,
    pub sum_dt_n: f64,
    pub sum_dt_paired: f64,
    pub sum_dt2_paired: f64,
}

impl StepStatistics {
    pub fn with_channels(channels: usize) -> Self {
        Self {
            jumps: SmallVec::from_elem(0, channels),
            ..Self::default()
        }
    }

    pub fn merge(&mut self, o: &Self) {
        self.steps += o.steps;
        self.rejections += o.rejections;
        self.full_steps += o.full_steps;
        if self.jumps.len() < o.jumps.len() {
            self.jumps.resize(o.jumps.len(), 0);
        }
        for (a, b) in self.jumps.iter_mut().zip(&o.jumps) {
            *a += b;
        }
        self.sum_dt += o.sum_dt;
        self.sum_dt2 += o.sum_dt2;
        self.sum_dt_over_rate += o.sum_dt_over_rate;
        self.paired += o.paired;
        self.sum_n += o.sum_n;
        self.sum_n2 += o.sum_n2;
        self.sum_dt_n += o.sum_dt_n;
        self.sum_dt_paired += o.sum_dt_paired;
        self.sum_dt2_paired += o.sum_dt2_paired;
    }

    pub(crate) fn record_plain(&mut self, dt: f64, dt_sample: f64) {
        self.record(dt, dt_sample, 0.0, None, None);
    }

    fn record(
        &mut self,
        dt: f64,
        dt_sample: f64,
        r_start: f64,
        n_start: Option<f64>,
        jump: Option<usize>,
    ) {
        self.steps += 1;
        if dt >= dt_sample * (1.0 - 1e-12) {
            self.full_steps += 1;
        }
        if let Some(m) = jump {
            self.jumps[m] += 1;
        }
        self.sum_dt += dt;
        self.sum_dt2 += dt * dt;
        if r_start > 0.0 {
            self.sum_dt_over_rate += dt / r_start;
        }
        if let Some(n) = n_start {
            self.paired += 1;
            self.sum_n += n;
            self.sum_n2 += n * n;
            self.sum_dt_n += dt * n;
            self.sum_dt_paired += dt;
            self.sum_dt2_paired += dt * dt;
        }
    }
}

/// Why a trajectory stopped early.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub t: f64,
    pub error: Error,
}

/// Everything one trajectory produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub stream: u64,
    /// Raw expectation values, `n_observables` per sampling instant.
    pub samples: Vec<C64>,
    pub n_observables: usize,
    pub final_state: Vec<C64>,
    pub steps: Vec<StepRecord>,
    pub stats: StepStatistics,
    pub failure: Option<Failure>,
    /// Jump-time searches that ran out of iterations (integrating method only).
    pub retrieval_failures: u64,
    /// Largest `max(|psi|, 1/|psi|)` seen on the stored state.
    pub max_norm_drift: f64,
    /// Time actually reached.
    pub t_end: f64,
}

impl TrajectoryRecord {
    pub(crate) fn new(
        seed: u64,
        stream: u64,
        n_observables: usize,
        channels: usize,
        capacity: usize,
    ) -> Self {
        Self {
            seed,
            stream,
            samples: Vec::with_capacity(capacity * n_observables),
            n_observables,
            final_state: Vec::new(),
            steps: Vec::new(),
            stats: StepStatistics::with_channels(channels),
            failure: None,
            retrieval_failures: 0,
            max_norm_drift: 1.0,
            t_end: 0.0,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len() / self.n_observables.max(1)
    }

    pub fn sample(&self, u: usize) -> &[C64] {
        &self.samples[u * self.n_observables..(u + 1) * self.n_observables]
    }

    /// Real part of raw observable `k` at every recorded instant.
    pub fn observable(&self, k: usize) -> Vec<f64> {
        self.samples
            .chunks_exact(self.n_observables)
            .map(|s| s[k].re)
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    pub(crate) fn push_sample(
        &mut self,
        sys: &QuantumSystem,
        psi: &[C64],
        support: Range<usize>,
        norm2: f64,
    ) {
        let start = self.samples.len();
        self.samples
            .resize(start + self.n_observables, C64::new(0.0, 0.0));
        sys.observables()
            .sample_range_into(psi, support, &mut self.samples[start..]);
        if norm2 != 1.0 {
            self.samples[start..].iter_mut().for_each(|z| *z /= norm2);
        }
    }
}

/// Options that do not affect the trajectory itself.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrajectoryOptions {
    pub record_steps: bool,
}

pub(crate) fn check_initial(psi0: &StateVector, sys: &QuantumSystem) -> Result<Vec<C64>> {
    if psi0.cutoff() != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            found: psi0.cutoff(),
        });
    }
    let n2 = psi0.norm_sqr();
    if (n2 - 1.0).abs() > 1e-10 {
        return Err(invalid(
            "psi0",
            format!("initial state must be normalized, |psi|^2 = {n2}"),
        ));
    }
    Ok(psi0.amplitudes().to_vec())
}

/// Runs one stepwise trajectory on the stream `(seed, stream)`.
pub fn run_trajectory(
    psi0: &StateVector,
    sys: &QuantumSystem,
    ctl: &DpControls,
    ode: &StepControl,
    seed: u64,
    stream: u64,
    opts: TrajectoryOptions,
) -> Result<TrajectoryRecord> {
    let mut psi = check_initial(psi0, sys)?;
    let mut engine = StepwiseEngine::new(sys, *ctl, *ode)?;
    engine.reset(&psi)?;
    let intervals = ctl.intervals();
    let mut rng = trajectory_rng(seed, stream);
    let mut rec = TrajectoryRecord::new(
        seed,
        stream,
        sys.observables().len(),
        sys.jumps().len(),
        intervals + 1,
    );
    rec.push_sample(sys, &psi, 0..psi.len(), 1.0);

    let mut r_start = engine.current_rates(&psi)?;
    let mut dt_try = cap_dt_next(ctl.dt_sample, r_start, ctl.dp_limit).min(ode.dt_max);
    let mut t = 0.0;
    let mut u = 0;
    while u < intervals {
        let boundary = sample_time(u + 1, ctl.dt_sample);
        let dt_suggest = dt_try;
        let clipped = t + dt_try >= boundary;
        let h = if clipped { boundary - t } else { dt_try };
        let adv = match engine.advance(&mut psi, t, h, &mut rng) {
            Ok(a) => a,
            Err(error) => {
                rec.failure = Some(Failure { t, error });
                break;
            }
        };
        if opts.record_steps {
            rec.steps.push(adv.record.clone());
        }
        if adv.record.rejected_layer2 {
            rec.stats.rejections += 1;
            dt_try = adv.dt_try_next;
            continue;
        }
        rec.stats.record(
            adv.record.dt_did,
            ctl.dt_sample,
            r_start,
            adv.record.tracked_before,
            adv.record.jump_index,
        );
        let completed = clipped && adv.record.dt_did == h;
        t = if completed || adv.t >= boundary {
            boundary
        } else {
            adv.t
        };
        let mut dt_next_ode = adv.dt_next_ode;
        if completed {
            // Clipping to the sampling grid must not shrink later steps.
            dt_next_ode = dt_next_ode.max(dt_suggest);
        }
        dt_try = cap_dt_next(dt_next_ode, adv.r_tot, ctl.dp_limit);
        r_start = if adv.record.jump_index.is_some() {
            match engine.current_rates(&psi) {
                Ok(r) => r,
                Err(error) => {
                    rec.failure = Some(Failure { t, error });
                    break;
                }
            }
        } else {
            adv.r_tot
        };
        let norm = engine.norm_sqr().sqrt();
        rec.max_norm_drift = rec.max_norm_drift.max(norm).max(1.0 / norm);
        let edge = engine.edge_population(&psi);
        if edge > CUTOFF_POPULATION_LIMIT {
            rec.failure = Some(Failure {
                t,
                error: Error::CutoffOverflow {
                    t,
                    population: edge,
                },
            });
            break;
        }
        if t == boundary {
            rec.push_sample(sys, &psi, engine.support(), engine.norm_sqr());
            u += 1;
        }
    }
    rec.t_end = t;
    rec.final_state = psi;
    Ok(rec)
}
