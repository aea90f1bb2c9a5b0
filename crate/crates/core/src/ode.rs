//! Embedded Cash-Karp 5(4) Runge-Kutta stepping with try/did/next step sizes.

use num_complex::Complex64 as C64;

use crate::error::{invalid, Error, Result};

const A2: f64 = 1.0 / 5.0;
const A3: f64 = 3.0 / 10.0;
const A4: f64 = 3.0 / 5.0;
const A5: f64 = 1.0;
const A6: f64 = 7.0 / 8.0;
const B21: f64 = 1.0 / 5.0;
const B31: f64 = 3.0 / 40.0;
const B32: f64 = 9.0 / 40.0;
const B41: f64 = 3.0 / 10.0;
const B42: f64 = -9.0 / 10.0;
const B43: f64 = 6.0 / 5.0;
const B51: f64 = -11.0 / 54.0;
const B52: f64 = 5.0 / 2.0;
const B53: f64 = -70.0 / 27.0;
const B54: f64 = 35.0 / 27.0;
const B61: f64 = 1631.0 / 55296.0;
const B62: f64 = 175.0 / 512.0;
const B63: f64 = 575.0 / 13824.0;
const B64: f64 = 44275.0 / 110592.0;
const B65: f64 = 253.0 / 4096.0;
const C1: f64 = 37.0 / 378.0;
const C3: f64 = 250.0 / 621.0;
const C4: f64 = 125.0 / 594.0;
const C6: f64 = 512.0 / 1771.0;
const DC1: f64 = C1 - 2825.0 / 27648.0;
const DC3: f64 = C3 - 18575.0 / 48384.0;
const DC4: f64 = C4 - 13525.0 / 55296.0;
const DC5: f64 = -277.0 / 14336.0;
const DC6: f64 = C6 - 1.0 / 4.0;

const SAFETY: f64 = 0.9;
const MAX_GROWTH: f64 = 5.0;
const MIN_SHRINK: f64 = 0.2;

/// Tolerances and step bounds for the adaptive stepper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            eps_abs: 1e-12,
            eps_rel: 1e-6,
            dt_min: 1e-14,
            dt_max: f64::INFINITY,
        }
    }
}

impl StepControl {
    pub fn new(eps_abs: f64, eps_rel: f64) -> Self {
        Self {
            eps_abs,
            eps_rel,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_abs >= 0.0 && self.eps_rel >= 0.0)
            || !self.eps_abs.is_finite()
            || !self.eps_rel.is_finite()
        {
            return Err(invalid(
                "epsAbs/epsRel",
                "tolerances must be finite and non-negative",
            ));
        }
        if self.eps_abs == 0.0 && self.eps_rel == 0.0 {
            return Err(invalid("epsAbs/epsRel", "tolerances cannot both be zero"));
        }
        if !(self.dt_min > 0.0) || !(self.dt_min <= self.dt_max) {
            return Err(invalid("dt_min", "need 0 < dt_min <= dt_max"));
        }
        Ok(())
    }
}

/// Outcome of one accepted adaptive step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: Vec<C64>,
    pub dt_did: f64,
    pub dt_next: f64,
    pub err_norm: f64,
}

/// Step sizes of an accepted step; the new state is written to the caller's buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub dt_did: f64,
    pub dt_next: f64,
    pub err_norm: f64,
}

/// Scratch storage for the Cash-Karp stages. Carries no state between calls.
#[derive(Debug, Clone)]
pub struct CashKarp {
    k: [Vec<C64>; 6],
    tmp: Vec<C64>,
    err: Vec<C64>,
}

impl CashKarp {
    pub fn new(dim: usize) -> Self {
        let z = vec![C64::new(0.0, 0.0); dim];
        Self {
            k: [
                z.clone(),
                z.clone(),
                z.clone(),
                z.clone(),
                z.clone(),
                z.clone(),
            ],
            tmp: z.clone(),
            err: z,
        }
    }

    pub fn dim(&self) -> usize {
        self.tmp.len()
    }

    /// Adaptive step from `(t, y)` trying `dt_try`; result written to `out`.
    /// `y` may be shorter than the scratch dimension.
    pub fn step<F>(
        &mut self,
        rhs: &mut F,
        t: f64,
        y: &[C64],
        out: &mut [C64],
        dt_try: f64,
        ctl: &StepControl,
    ) -> Result<StepInfo>
    where
        F: FnMut(f64, &[C64], &mut [C64]),
    {
        if !(dt_try > 0.0) || !dt_try.is_finite() {
            return Err(invalid(
                "dt_try",
                format!("must be positive and finite, got {dt_try}"),
            ));
        }
        let m = y.len();
        rhs(t, y, &mut self.k[0][..m]);
        if self.k[0][..m].iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("right-hand side"));
        }
        let mut dt = dt_try;
        loop {
            self.stages(rhs, t, y, out, dt, false);
            let err = error_norm(y, out, &self.err[..m], ctl);
            if err <= 1.0 {
                let growth = if err == 0.0 {
                    MAX_GROWTH
                } else {
                    (SAFETY * err.powf(-0.2)).min(MAX_GROWTH)
                };
                return Ok(StepInfo {
                    dt_did: dt,
                    dt_next: (dt * growth).min(ctl.dt_max),
                    err_norm: err,
                });
            }
            let shrink = if err.is_finite() {
                (SAFETY * err.powf(-0.25)).max(MIN_SHRINK)
            } else {
                MIN_SHRINK
            };
            let next = dt * shrink;
            if next < ctl.dt_min || t + next == t {
                return Err(Error::StepUnderflow { t, dt: next });
            }
            dt = next;
        }
    }

    /// One fixed step of size `dt`; returns the error norm without acting on it.
    pub fn trial<F>(
        &mut self,
        rhs: &mut F,
        t: f64,
        y: &[C64],
        out: &mut [C64],
        dt: f64,
        ctl: &StepControl,
    ) -> f64
    where
        F: FnMut(f64, &[C64], &mut [C64]),
    {
        self.stages(rhs, t, y, out, dt, true);
        error_norm(y, out, &self.err[..y.len()], ctl)
    }

    fn stages<F>(&mut self, rhs: &mut F, t: f64, y: &[C64], out: &mut [C64], h: f64, fresh_k1: bool)
    where
        F: FnMut(f64, &[C64], &mut [C64]),
    {
        let m = y.len();
        let [k1, k2, k3, k4, k5, k6] = self.k.each_mut().map(|k| &mut k[..m]);
        let tmp = &mut self.tmp[..m];
        let err = &mut self.err[..m];
        if fresh_k1 {
            rhs(t, y, k1);
        }
        for i in 0..y.len() {
            tmp[i] = y[i] + h * B21 * k1[i];
        }
        rhs(t + A2 * h, tmp, k2);
        for i in 0..y.len() {
            tmp[i] = y[i] + h * (B31 * k1[i] + B32 * k2[i]);
        }
        rhs(t + A3 * h, tmp, k3);
        for i in 0..y.len() {
            tmp[i] = y[i] + h * (B41 * k1[i] + B42 * k2[i] + B43 * k3[i]);
        }
        rhs(t + A4 * h, tmp, k4);
        for i in 0..y.len() {
            tmp[i] = y[i] + h * (B51 * k1[i] + B52 * k2[i] + B53 * k3[i] + B54 * k4[i]);
        }
        rhs(t + A5 * h, tmp, k5);
        for i in 0..y.len() {
            tmp[i] =
                y[i] + h * (B61 * k1[i] + B62 * k2[i] + B63 * k3[i] + B64 * k4[i] + B65 * k5[i]);
        }
        rhs(t + A6 * h, tmp, k6);
        for i in 0..y.len() {
            out[i] = y[i] + h * (C1 * k1[i] + C3 * k3[i] + C4 * k4[i] + C6 * k6[i]);
            err[i] = h * (DC1 * k1[i] + DC3 * k3[i] + DC4 * k4[i] + DC5 * k5[i] + DC6 * k6[i]);
        }
    }
}

fn error_norm(y: &[C64], y_new: &[C64], e: &[C64], ctl: &StepControl) -> f64 {
    let mut worst = 0.0f64;
    for ((a, b), d) in y.iter().zip(y_new).zip(e) {
        let dn2 = d.norm_sqr();
        if dn2 == 0.0 {
            continue;
        }
        let scale = ctl.eps_abs + ctl.eps_rel * a.norm_sqr().max(b.norm_sqr()).sqrt();
        let r2 = dn2 / (scale * scale);
        if !r2.is_finite() {
            return f64::INFINITY;
        }
        if r2 > worst {
            worst = r2;
        }
    }
    if y_new.iter().any(|z| !z.is_finite()) {
        return f64::INFINITY;
    }
    worst.sqrt()
}

/// Allocating convenience wrapper around [`CashKarp::step`].
pub fn ck_step<F>(rhs: F, y: &[C64], t: f64, dt_try: f64, ctl: &StepControl) -> Result<StepResult>
where
    F: FnMut(f64, &[C64], &mut [C64]),
{
    let mut rhs = rhs;
    let mut ck = CashKarp::new(y.len());
    let mut state = vec![C64::new(0.0, 0.0); y.len()];
    let info = ck.step(&mut rhs, t, y, &mut state, dt_try, ctl)?;
    Ok(StepResult {
        state,
        dt_did: info.dt_did,
        dt_next: info.dt_next,
        err_norm: info.err_norm,
    })
}

/// Adaptive integration from `t0` to `t1`, clipping the last step to land exactly.
pub fn integrate<F>(
    rhs: F,
    y0: &[C64],
    t0: f64,
    t1: f64,
    dt_try: f64,
    ctl: &StepControl,
) -> Result<Vec<C64>>
where
    F: FnMut(f64, &[C64], &mut [C64]),
{
    let mut rhs = rhs;
    let mut ck = CashKarp::new(y0.len());
    let mut y = y0.to_vec();
    let mut out = y.clone();
    let mut t = t0;
    let mut dt = dt_try;
    while t < t1 {
        let h = dt.min(t1 - t);
        let info = ck.step(&mut rhs, t, &y, &mut out, h, ctl)?;
        std::mem::swap(&mut y, &mut out);
        t = if info.dt_did == t1 - t {
            t1
        } else {
            t + info.dt_did
        };
        if info.dt_did == h && h < dt {
            // A clipped step says nothing about the natural step size.
            dt = dt.max(info.dt_next);
        } else {
            dt = info.dt_next;
        }
    }
    Ok(y)
}

/// Fixed-step Cash-Karp fifth-order solution; used for order checks.
pub fn cash_karp_fixed<F>(rhs: F, y0: &[C64], t0: f64, t1: f64, n_steps: usize) -> Vec<C64>
where
    F: FnMut(f64, &[C64], &mut [C64]),
{
    let mut rhs = rhs;
    let mut ck = CashKarp::new(y0.len());
    let ctl = StepControl::default();
    let h = (t1 - t0) / n_steps as f64;
    let mut y = y0.to_vec();
    let mut out = y.clone();
    for i in 0..n_steps {
        ck.trial(&mut rhs, t0 + i as f64 * h, &y, &mut out, h, &ctl);
        std::mem::swap(&mut y, &mut out);
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn decay(_: f64, y: &[C64], dy: &mut [C64]) {
        dy[0] = -y[0];
    }

    #[test]
    fn exponential_decay_to_one() {
        let ctl = StepControl::new(0.0, 1e-10);
        let y = integrate(decay, &[C64::new(1.0, 0.0)], 0.0, 1.0, 0.1, &ctl).unwrap();
        assert_abs_diff_eq!(y[0].re, (-1.0f64).exp(), epsilon = 1e-8);
        assert_abs_diff_eq!(y[0].re, 0.3678794412, epsilon = 1e-8);
    }

    #[test]
    fn constant_solution() {
        let y = [C64::new(0.3, -0.2), C64::new(1.0, 0.0)];
        let r = ck_step(
            |_, _, dy: &mut [C64]| dy.fill(C64::new(0.0, 0.0)),
            &y,
            0.0,
            0.7,
            &StepControl::default(),
        )
        .unwrap();
        assert_eq!(r.state, y.to_vec());
        assert_eq!(r.dt_did, 0.7);
        assert!(r.dt_next >= 0.7);
        assert_eq!(r.err_norm, 0.0);
    }

    #[test]
    fn rotation_returns_to_start() {
        let ctl = StepControl::new(1e-12, 1e-9);
        let rot = |_: f64, y: &[C64], dy: &mut [C64]| dy[0] = C64::new(0.0, 1.0) * y[0];
        let y = integrate(
            rot,
            &[C64::new(1.0, 0.0)],
            0.0,
            2.0 * std::f64::consts::PI,
            0.1,
            &ctl,
        )
        .unwrap();
        assert_abs_diff_eq!(y[0].norm(), 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(y[0].arg(), 0.0, epsilon = 1e-5);
    }

    #[test]
    fn fifth_order_global_error() {
        let exact = (-1.0f64).exp();
        let errs: Vec<f64> = [10, 20, 40]
            .iter()
            .map(|&n| {
                (cash_karp_fixed(decay, &[C64::new(1.0, 0.0)], 0.0, 1.0, n)[0].re - exact).abs()
            })
            .collect();
        let xs = [0.1f64.ln(), 0.05f64.ln(), 0.025f64.ln()];
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let mx = xs.iter().sum::<f64>() / 3.0;
        let my = ys.iter().sum::<f64>() / 3.0;
        let slope = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope - 5.0).abs() <= 0.3, "slope {slope}");
    }

    #[test]
    fn underflow_is_reported() {
        let ctl = StepControl {
            dt_min: 1e-3,
            ..StepControl::new(0.0, 1e-14)
        };
        let stiff = |_: f64, y: &[C64], dy: &mut [C64]| dy[0] = -1e6 * y[0];
        let r = ck_step(stiff, &[C64::new(1.0, 0.0)], 0.0, 1.0, &ctl);
        assert!(matches!(r, Err(Error::StepUnderflow { .. })));
    }

    #[test]
    fn non_finite_rhs_is_reported() {
        let bad = |_: f64, _: &[C64], dy: &mut [C64]| dy[0] = C64::new(f64::NAN, 0.0);
        let r = ck_step(
            bad,
            &[C64::new(1.0, 0.0)],
            0.0,
            0.1,
            &StepControl::default(),
        );
        assert_eq!(r, Err(Error::NonFinite("right-hand side")));
    }
}
