//! Birth-death chain oracles for the undriven thermal mode.
//!
//! `X(t)` is the continuous-time chain with up rate `lambda(n)` and down rate
//! `mu(n)`; `Y(t)` is its time discretization with one jump at most per step.
//! For a Fock initial state and no drive the stepwise engine reduces to `Y`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::engine::{cap_dt_next, decide_jump, sample_time, DpControls};
use crate::error::{invalid, Error, Result};

/// Growth of the trial step when nothing but jump-probability control acts.
const FREE_GROWTH: f64 = 5.0;

/// Rates of the thermal birth-death chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSpec {
    pub kappa: f64,
    pub n_th: f64,
}

impl ChainSpec {
    pub fn new(kappa: f64, n_th: f64) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(invalid("kappa", "must be positive"));
        }
        if !(n_th >= 0.0) || !n_th.is_finite() {
            return Err(invalid("nTh", "must be non-negative"));
        }
        Ok(Self { kappa, n_th })
    }

    /// Absorption rate `2 kappa (n + 1) n_th`.
    pub fn lambda(&self, n: usize) -> f64 {
        2.0 * self.kappa * (n as f64 + 1.0) * self.n_th
    }

    /// Emission rate `2 kappa (n_th + 1) n`.
    pub fn mu(&self, n: usize) -> f64 {
        2.0 * self.kappa * (self.n_th + 1.0) * n as f64
    }

    pub fn q(&self, n: usize) -> f64 {
        self.lambda(n) + self.mu(n)
    }

    /// `n_th + (n0 - n_th) exp(-2 kappa t)`.
    pub fn mean(&self, n0: usize, t: f64) -> f64 {
        self.n_th + (n0 as f64 - self.n_th) * (-2.0 * self.kappa * t).exp()
    }
}

/// Channel labels shared with the mode model: 0 is emission, 1 absorption.
pub const EMISSION: usize = 0;
pub const ABSORPTION: usize = 1;

/// Exact sample path of `X` on `[0, t_final]` as `(jump time, new state)` pairs.
pub fn gillespie_trajectory<R: Rng + ?Sized>(
    n0: usize,
    spec: &ChainSpec,
    t_final: f64,
    rng: &mut R,
) -> Vec<(f64, usize)> {
    let mut path = Vec::new();
    let mut n = n0;
    let mut t = 0.0;
    loop {
        let q = spec.q(n);
        if q == 0.0 {
            break;
        }
        t += Exp::new(q).expect("positive rate").sample(rng);
        if t > t_final {
            break;
        }
        let up = rng.random::<f64>() * q < spec.lambda(n);
        n = if up { n + 1 } else { n - 1 };
        path.push((t, n));
    }
    path
}

/// State of a Gillespie path at time `t`.
pub fn state_at(n0: usize, path: &[(f64, usize)], t: f64) -> usize {
    match path.iter().rposition(|p| p.0 <= t) {
        Some(i) => path[i].1,
        None => n0,
    }
}

/// One step of `Y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainStep {
    pub n: usize,
    pub jump: Option<usize>,
    /// `dp / q(n)` when a jump-probability limit was supplied.
    pub dt_next: Option<f64>,
}

/// Advances `Y` by `dt` using the uniform `draw`: emission when
/// `draw < mu dt`, absorption when `draw < (mu + lambda) dt`.
pub fn discrete_chain_step(
    n: usize,
    dt: f64,
    dp: Option<f64>,
    spec: &ChainSpec,
    draw: f64,
) -> Result<ChainStep> {
    let q = spec.q(n);
    if q * dt > 1.0 {
        return Err(Error::InvalidTransition(q * dt));
    }
    let d = decide_jump(draw, &[spec.mu(n), spec.lambda(n)], dt);
    let next = match d.selected {
        Some(EMISSION) => n - 1,
        Some(_) => n + 1,
        None => n,
    };
    Ok(ChainStep {
        n: next,
        jump: d.selected,
        dt_next: dp.map(|dp| if q > 0.0 { dp / q } else { f64::INFINITY }),
    })
}

/// Sampled states and jump counts of one run of `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRun {
    /// State at every sampling instant, starting with `n0`.
    pub samples: Vec<usize>,
    pub jumps: [u64; 2],
    pub steps: u64,
    pub rejections: u64,
}

/// Runs `Y` with the same step-size policy as the stepwise engine on a
/// Fock state: jump-probability cap, growth by five, clipping to the
/// sampling grid, and overshoot rejection.
pub fn run_discrete_chain<R: Rng + ?Sized>(
    n0: usize,
    spec: &ChainSpec,
    ctl: &DpControls,
    dt_max: f64,
    rng: &mut R,
) -> Result<ChainRun> {
    ctl.validate()?;
    let intervals = ctl.intervals();
    let mut run = ChainRun {
        samples: Vec::with_capacity(intervals + 1),
        jumps: [0; 2],
        steps: 0,
        rejections: 0,
    };
    run.samples.push(n0);
    let mut n = n0;
    let mut t = 0.0;
    let mut dt_try = cap_dt_next(ctl.dt_sample, spec.q(n), ctl.dp_limit).min(dt_max);
    let mut u = 0;
    while u < intervals {
        let boundary = sample_time(u + 1, ctl.dt_sample);
        let dt_suggest = dt_try;
        let clipped = t + dt_try >= boundary;
        let h = if clipped { boundary - t } else { dt_try };
        let q = spec.q(n);
        if q * h > ctl.dp_overshoot {
            run.rejections += 1;
            dt_try = ctl.dp_limit / q;
            continue;
        }
        let draw: f64 = rng.random();
        let d = decide_jump(draw, &[spec.mu(n), spec.lambda(n)], h);
        run.steps += 1;
        if let Some(m) = d.selected {
            run.jumps[m] += 1;
            n = if m == EMISSION { n - 1 } else { n + 1 };
        }
        let mut dt_next = (FREE_GROWTH * h).min(dt_max);
        t = if clipped { boundary } else { t + h };
        if clipped {
            dt_next = dt_next.max(dt_suggest);
        }
        dt_try = cap_dt_next(dt_next, q, ctl.dp_limit);
        if t == boundary {
            run.samples.push(n);
            u += 1;
        }
    }
    Ok(run)
}

/// Probability of following a path through states with holding rates
/// `holding[0..=k]` via transitions with rates `transitions[0..k]`, ending in
/// the last state at time `t`. Evaluated as an entry of the matrix
/// exponential of the path's bidiagonal generator.
pub fn path_probability(holding: &[f64], transitions: &[f64], t: f64) -> f64 {
    let k = transitions.len();
    assert_eq!(holding.len(), k + 1);
    let g = DMatrix::from_fn(k + 1, k + 1, |r, c| {
        if r == c {
            -holding[r] * t
        } else if c == r + 1 {
            transitions[r] * t
        } else {
            0.0
        }
    });
    g.exp()[(0, k)]
}

/// Probabilities of ending at `n-2 ..= n+2` after `dt` with at most two jumps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Le2Probabilities {
    pub down2: f64,
    pub down1: f64,
    pub stay: f64,
    pub up1: f64,
    pub up2: f64,
}

impl Le2Probabilities {
    /// Outcomes ordered `n-2, n-1, n, n+1, n+2`.
    pub fn as_array(&self) -> [f64; 5] {
        [self.down2, self.down1, self.stay, self.up1, self.up2]
    }

    pub fn total(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

fn distinct(a: f64, b: f64) -> bool {
    (a - b).abs() >= 1e-9 * a.abs().max(b.abs())
}

/// `(1 - e^{-x}) / x`.
fn phi1(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        -(-x).exp_m1() / x
    }
}

/// `(e^{-x} - 1 + x) / x^2`.
fn psi2(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        let mut term = 0.5;
        let mut sum = 0.0;
        for k in 3..14 {
            sum += term;
            term *= -x / k as f64;
        }
        sum
    } else {
        ((-x).exp_m1() + x) / (x * x)
    }
}

/// `(e^{-a t} - e^{-b t}) / (b - a)`, the one-jump simplex integral.
fn one_jump(a: f64, b: f64, t: f64) -> f64 {
    t * (-a * t).exp() * phi1((b - a) * t)
}

/// `one_jump(a, b, t) - t` without cancellation.
fn one_jump_excess(a: f64, b: f64, t: f64) -> f64 {
    let x = (b - a) * t;
    t * ((-a * t).exp_m1() * phi1(x) - x * psi2(x))
}

/// Closed forms for `P[X(t + dt) = m, #jumps <= 2 | X(t) = n]`. Coinciding
/// holding rates fall back to [`path_probability`].
pub fn le2_jump_probabilities(n: usize, dt: f64, spec: &ChainSpec) -> Result<Le2Probabilities> {
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(invalid("dt", "must be finite and non-negative"));
    }
    let q = |m: usize| spec.q(m);
    let (lam, mu) = (|m: usize| spec.lambda(m), |m: usize| spec.mu(m));
    let qn = q(n);
    let e_n = (-qn * dt).exp();

    // Out and back through a neighbour with holding rate `qm`.
    let round_trip = |rate: f64, qm: f64| -> f64 {
        if rate == 0.0 {
            0.0
        } else if distinct(qn, qm) {
            rate / (qn - qm) * (one_jump(qn, qm, dt) - dt * e_n)
        } else {
            rate * path_probability(&[qn, qm, qn], &[1.0, 1.0], dt)
        }
    };
    let single = |rate: f64, qm: f64| -> f64 {
        if rate == 0.0 {
            0.0
        } else if distinct(qn, qm) {
            rate * one_jump(qn, qm, dt)
        } else {
            rate * dt * e_n
        }
    };
    let double = |rate: f64, q1: f64, q2: f64| -> f64 {
        if rate == 0.0 {
            0.0
        } else if distinct(qn, q1) && distinct(qn, q2) && distinct(q1, q2) {
            rate / (q2 - q1) * (one_jump(qn, q1, dt) - one_jump(qn, q2, dt))
        } else {
            rate * path_probability(&[qn, q1, q2], &[1.0, 1.0], dt)
        }
    };

    let up_down = round_trip(lam(n) * mu(n + 1), q(n + 1));
    let down_up = if n > 0 {
        round_trip(mu(n) * lam(n - 1), q(n - 1))
    } else {
        0.0
    };
    let p = Le2Probabilities {
        stay: e_n + up_down + down_up,
        up1: single(lam(n), q(n + 1)),
        down1: if n > 0 { single(mu(n), q(n - 1)) } else { 0.0 },
        up2: double(lam(n) * lam(n + 1), q(n + 1), q(n + 2)),
        down2: if n > 1 {
            double(mu(n) * mu(n - 1), q(n - 1), q(n - 2))
        } else {
            0.0
        },
    };
    if p.as_array().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("two-jump probability"));
    }
    Ok(p)
}

/// `E[X(t+dt) - Y(t+dt) | X(t) = Y(t) = n]`. The rates are linear in `n`,
/// so the mean of `X` relaxes exactly as `n_th + (n - n_th) e^{-2 kappa dt}`
/// and the gap is `(n - n_th)(e^{-2 kappa dt} - 1 + 2 kappa dt)`.
pub fn one_step_mean_gap(n: usize, dt: f64, spec: &ChainSpec) -> Result<f64> {
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(invalid("dt", "must be finite and non-negative"));
    }
    if spec.q(n) * dt > 1.0 {
        return Err(Error::InvalidTransition(spec.q(n) * dt));
    }
    let x = 2.0 * spec.kappa * dt;
    let excess = if x < 1e-3 {
        // e^{-x} - 1 + x by its alternating series.
        let mut term = x * x / 2.0;
        let mut sum = 0.0;
        for k in 3..12 {
            sum += term;
            term *= -x / k as f64;
        }
        sum
    } else {
        (-x).exp_m1() + x
    };
    Ok((n as f64 - spec.n_th) * excess)
}

/// The gap with the mean of `X` restricted to paths of at most two jumps,
/// the remaining mass being assigned to the starting state. Agrees with
/// [`one_step_mean_gap`] to order `dt^2` only; the neglected three-jump
/// mass dominates unless `q(n) dt` is far below one.
pub fn le2_mean_gap(n: usize, dt: f64, spec: &ChainSpec) -> Result<f64> {
    let p = le2_jump_probabilities(n, dt, spec)?;
    let qn = spec.q(n);
    // One-jump terms minus their first-order parts, which cancel the
    // discretized drift `(lambda - mu) dt`.
    let up = spec.lambda(n) * one_jump_excess(qn, spec.q(n + 1), dt);
    let down = if n > 0 {
        spec.mu(n) * one_jump_excess(qn, spec.q(n - 1), dt)
    } else {
        0.0
    };
    Ok(2.0 * (p.up2 - p.down2) + up - down)
}

/// `P(T1 + T2 + T3 < dt)` for independent exponential times with rates `g`.
pub fn three_jump_prob(g: [f64; 3], dt: f64) -> Result<f64> {
    if g.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(invalid("g", "rates must be positive"));
    }
    let [g1, g2, g3] = g;
    let all_distinct = distinct(g1, g2) && distinct(g1, g3) && distinct(g2, g3);
    let closed = if all_distinct {
        let f = |x: f64| -(-x * dt).exp_m1() / x;
        g1 * g2 * g3 / (g1 - g2) * ((f(g2) - f(g3)) / (g3 - g2) - (f(g1) - f(g3)) / (g3 - g1))
    } else {
        f64::NAN
    };
    // Small values lose digits to cancellation in the closed form.
    let p = if closed.is_finite() && closed > 1e-6 {
        closed
    } else {
        path_probability(&[g1, g2, g3, 0.0], &[g1, g2, g3], dt)
    };
    Ok(p.clamp(0.0, 1.0))
}
