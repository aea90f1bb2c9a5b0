//! The norm-integrating trajectory method.
//!
//! The state evolves without renormalization under `H_nH`. A jump fires when
//! `|psi|^2` falls to a threshold drawn uniformly at the start of each
//! segment; the crossing time is recovered by re-integrating from the last
//! step start and refining with interpolation and bisection.

use num_complex::Complex64 as C64;
use rand::Rng;

use crate::engine::{
    check_initial, sample_time, sampling_intervals, Failure, Rates, TrajectoryOptions,
    TrajectoryRecord,
};
use crate::error::{invalid, Error, Result};
use crate::evolution::NoJumpStepper;
use crate::hilbert::norm_sqr;
use crate::models::QuantumSystem;
use crate::ode::StepControl;
use crate::rng::trajectory_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratingControls {
    /// Accepted `| |psi(t*)|^2 - r |` at the retrieved jump time.
    pub norm_tol: f64,
    /// Re-integrations allowed per jump-time search.
    pub max_iters: usize,
    pub dt_sample: f64,
    pub t_final: f64,
}

impl IntegratingControls {
    pub fn new(dt_sample: f64, t_final: f64) -> Self {
        Self {
            norm_tol: 1e-3,
            max_iters: 5,
            dt_sample,
            t_final,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.norm_tol > 0.0 && self.norm_tol < 0.1) {
            return Err(invalid(
                "normTol",
                format!("must lie in (0, 0.1), got {}", self.norm_tol),
            ));
        }
        if self.max_iters == 0 {
            return Err(invalid("maxIters", "must be at least 1"));
        }
        sampling_intervals(self.dt_sample, self.t_final)?;
        Ok(())
    }
}

/// Result of a jump-time search.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpTime<S> {
    pub t: f64,
    pub state: S,
    pub norm_sqr: f64,
    pub iterations: usize,
    /// False when the iterations ran out before reaching the tolerance.
    pub converged: bool,
}

/// Finds `t*` in `(lo.0, hi.0]` with `|N(t*) - threshold| <= norm_tol`, where
/// `N` is the squared norm returned by `reintegrate`. `lo` and `hi` are
/// `(t, N(t), state)` triples bracketing the crossing.
pub fn find_jump_time<S, F>(
    lo: (f64, f64, S),
    hi: (f64, f64, S),
    threshold: f64,
    mut reintegrate: F,
    norm_tol: f64,
    max_iters: usize,
) -> Result<JumpTime<S>>
where
    S: Clone,
    F: FnMut(f64, &S, f64) -> Result<(f64, S)>,
{
    let (mut t_lo, mut n_lo, mut s_lo) = lo;
    let (mut t_hi, mut n_hi, s_hi) = hi;
    if !(n_lo > threshold && threshold >= n_hi) {
        return Err(Error::NonBracketing {
            norm_lo: n_lo,
            norm_hi: n_hi,
            threshold,
        });
    }
    let mut best = JumpTime {
        t: t_hi,
        state: s_hi,
        norm_sqr: n_hi,
        iterations: 0,
        converged: (n_hi - threshold).abs() <= norm_tol,
    };
    if best.converged {
        return Ok(best);
    }
    let mut width_before = t_hi - t_lo;
    for it in 1..=max_iters {
        let frac = if n_hi > 0.0 && n_lo > 0.0 {
            // Exact for exponential decay of the norm.
            (threshold.ln() - n_lo.ln()) / (n_hi.ln() - n_lo.ln())
        } else {
            (n_lo - threshold) / (n_lo - n_hi)
        };
        let width = t_hi - t_lo;
        let stalled = it > 1 && width > 0.5 * width_before;
        let frac = if stalled || !frac.is_finite() {
            0.5
        } else {
            frac.clamp(0.01, 0.99)
        };
        width_before = width;
        let t = t_lo + frac * width;
        let (n, s) = reintegrate(t_lo, &s_lo, t)?;
        if (n - threshold).abs() < (best.norm_sqr - threshold).abs() {
            best = JumpTime {
                t,
                state: s.clone(),
                norm_sqr: n,
                iterations: it,
                converged: false,
            };
        }
        best.iterations = it;
        if (n - threshold).abs() <= norm_tol {
            best.converged = true;
            return Ok(best);
        }
        if n > threshold {
            t_lo = t;
            n_lo = n;
            s_lo = s;
        } else {
            t_hi = t;
            n_hi = n;
        }
    }
    Ok(best)
}

/// Adaptive no-jump evolution of `psi` from `t0` to `t1` without renormalization.
fn evolve_to(
    sys: &QuantumSystem,
    stepper: &mut NoJumpStepper,
    psi: &mut [C64],
    t0: f64,
    t1: f64,
    dt_hint: f64,
    ode: &StepControl,
) -> Result<()> {
    let mut t = t0;
    let mut dt = dt_hint;
    let mut support = 0..psi.len();
    while t < t1 {
        let h = dt.min(t1 - t);
        let info = stepper.step(sys, psi, &mut support, t, h, ode)?;
        if info.dt_did == h && h == t1 - t {
            break;
        }
        t += info.dt_did;
        dt = info.dt_next;
    }
    Ok(())
}

/// Runs one integrating-method trajectory on the stream `(seed, stream)`.
pub fn run_trajectory_integrating(
    psi0: &crate::hilbert::StateVector,
    sys: &QuantumSystem,
    ctl: &IntegratingControls,
    ode: &StepControl,
    seed: u64,
    stream: u64,
    _opts: TrajectoryOptions,
) -> Result<TrajectoryRecord> {
    ctl.validate()?;
    ode.validate()?;
    let mut psi = check_initial(psi0, sys)?;
    let dim = sys.dim();
    let intervals = sampling_intervals(ctl.dt_sample, ctl.t_final)?;
    let mut rng = trajectory_rng(seed, stream);
    let mut rec = TrajectoryRecord::new(
        seed,
        stream,
        sys.observables().len(),
        sys.jumps().len(),
        intervals + 1,
    );
    rec.push_sample(sys, &psi, 0..dim, 1.0);

    let mut stepper = NoJumpStepper::new(dim);
    let mut retrieval = NoJumpStepper::new(dim);
    let mut seg_start = psi.clone();
    let mut rates = Rates::new();
    let mut threshold: f64 = rng.random();
    let mut t = 0.0;
    let mut dt_try = ctl.dt_sample;
    let mut u = 0;
    let mut support = 0..dim;
    let result: Result<()> = (|| {
        while u < intervals {
            let boundary = sample_time(u + 1, ctl.dt_sample);
            if t >= boundary {
                // A jump retrieved exactly at the sampling instant.
                t = boundary;
                rec.push_sample(sys, &psi, 0..dim, norm_sqr(&psi));
                u += 1;
                continue;
            }
            let dt_suggest = dt_try;
            let clipped = t + dt_try >= boundary;
            let h = if clipped { boundary - t } else { dt_try };
            let n_lo = norm_sqr(&psi);
            seg_start.copy_from_slice(&psi);
            let info = stepper.step(sys, &mut psi, &mut support, t, h, ode)?;
            rec.stats.record_plain(info.dt_did, ctl.dt_sample);
            let completed = clipped && info.dt_did == h;
            let t_hi = if completed { boundary } else { t + info.dt_did };
            dt_try = if completed {
                info.dt_next.max(dt_suggest)
            } else {
                info.dt_next
            };
            let n_hi = norm_sqr(&psi);
            if !n_hi.is_finite() {
                return Err(Error::NonFinite("state norm"));
            }
            if n_hi <= threshold {
                let dt_hint = info.dt_did;
                let found = find_jump_time(
                    (t, n_lo, seg_start.clone()),
                    (t_hi, n_hi, psi.clone()),
                    threshold,
                    |t0, s0: &Vec<C64>, t1| {
                        let mut s = s0.clone();
                        evolve_to(sys, &mut retrieval, &mut s, t0, t1, dt_hint, ode)?;
                        Ok((norm_sqr(&s), s))
                    },
                    ctl.norm_tol,
                    ctl.max_iters,
                )?;
                if !found.converged {
                    rec.retrieval_failures += 1;
                }
                psi.copy_from_slice(&found.state);
                t = found.t;
                let n2 = norm_sqr(&psi);
                rates.clear();
                let mut r_tot = 0.0;
                for op in sys.rate_operators() {
                    let r = (op.sandwich(&psi).re / n2).max(0.0);
                    r_tot += r;
                    rates.push(r);
                }
                // Fresh draw for the channel, scaled by the total rate.
                let s: f64 = rng.random();
                let target = s * r_tot;
                let mut acc = 0.0;
                let mut channel = rates.iter().rposition(|&r| r > 0.0);
                for (m, r) in rates.iter().enumerate() {
                    acc += r;
                    if target < acc {
                        channel = Some(m);
                        break;
                    }
                }
                if let Some(m) = channel {
                    let mut out = vec![C64::new(0.0, 0.0); dim];
                    sys.jumps()[m].apply_into(&psi, &mut out);
                    psi = out;
                    rec.stats.jumps[m] += 1;
                }
                crate::hilbert::normalize_slice(&mut psi)?;
                support = 0..dim;
                threshold = rng.random();
                continue;
            }
            t = t_hi;
            if t == boundary {
                let edge = sys.edge_population(&psi);
                if edge > crate::engine::CUTOFF_POPULATION_LIMIT {
                    return Err(Error::CutoffOverflow {
                        t,
                        population: edge,
                    });
                }
                rec.push_sample(sys, &psi, support.clone(), n_hi);
                u += 1;
            }
        }
        Ok(())
    })();
    if let Err(error) = result {
        rec.failure = Some(Failure { t, error });
    }
    rec.t_end = t;
    rec.final_state = psi;
    Ok(rec)
}
