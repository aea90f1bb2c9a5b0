//! One adaptive step of no-jump evolution, shared by both trajectory engines.

use std::ops::Range;

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::models::QuantumSystem;
use crate::ode::{CashKarp, StepControl, StepInfo};

/// Growth applied to the trial step when no ODE stepper runs.
const FREE_GROWTH: f64 = 5.0;

/// Window padding around the support, in units of the coupling bandwidth:
/// one per Cash-Karp stage.
const WINDOW_PAD: usize = 6;

/// Edge amplitudes below this fraction of the norm are dropped after a step.
const TRIM_RELATIVE: f64 = 1e-16;

/// Scratch space for stepping `d psi/dt = -i H_nH psi` in a system's picture.
#[derive(Debug, Clone)]
pub struct NoJumpStepper {
    ck: CashKarp,
    out: Vec<C64>,
}

impl NoJumpStepper {
    pub fn new(dim: usize) -> Self {
        Self {
            ck: CashKarp::new(dim),
            out: vec![C64::new(0.0, 0.0); dim],
        }
    }

    /// Advances `psi` in place from `t`. `support` bounds the nonzero
    /// amplitudes on entry and is updated on exit.
    pub fn step(
        &mut self,
        sys: &QuantumSystem,
        psi: &mut [C64],
        support: &mut Range<usize>,
        t: f64,
        dt_try: f64,
        ctl: &StepControl,
    ) -> Result<StepInfo> {
        sys.check_frame(dt_try, false)?;
        if sys.is_free() {
            sys.propagate(dt_try, psi, support.clone());
            return Ok(StepInfo {
                dt_did: dt_try,
                dt_next: (FREE_GROWTH * dt_try).min(ctl.dt_max),
                err_norm: 0.0,
            });
        }
        let pad = WINDOW_PAD * sys.coupling_bandwidth();
        let window = if support.start >= support.end {
            0..psi.len()
        } else {
            support.start.saturating_sub(pad)..(support.end + pad).min(psi.len())
        };
        let lo = window.start;
        let mut rhs =
            |s: f64, phi: &[C64], dphi: &mut [C64]| sys.coupling_rhs_window(s, lo, phi, dphi);
        let info = self
            .ck
            .step(
                &mut rhs,
                0.0,
                &psi[window.clone()],
                &mut self.out[window.clone()],
                dt_try,
                ctl,
            )
            .map_err(|e| match e {
                Error::StepUnderflow { dt, .. } => Error::StepUnderflow { t, dt },
                other => other,
            })?;
        psi[window.clone()].copy_from_slice(&self.out[window.clone()]);
        *support = trim_support(psi, window, sys.decay_rates());
        sys.propagate(info.dt_did, psi, support.clone());
        Ok(info)
    }
}

/// Zeroes amplitudes below `TRIM_RELATIVE` of the norm at both ends of
/// `window` and returns the remaining range. An edge entry is only dropped
/// when its decay rate is at least every rate in the retained range, so a
/// dropped amplitude could not have outgrown the rest.
pub fn trim_support(psi: &mut [C64], window: Range<usize>, decay: &[f64]) -> Range<usize> {
    let n2: f64 = psi[window.clone()].iter().map(|z| z.norm_sqr()).sum();
    let cut = TRIM_RELATIVE * TRIM_RELATIVE * n2;
    let (mut lo, mut hi) = (window.start, window.end);
    let mut core_lo = lo;
    while core_lo < hi && psi[core_lo].norm_sqr() <= cut {
        core_lo += 1;
    }
    let mut core_hi = hi;
    while core_hi > core_lo && psi[core_hi - 1].norm_sqr() <= cut {
        core_hi -= 1;
    }
    let fastest = decay[core_lo..core_hi]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let zero = C64::new(0.0, 0.0);
    while lo < core_lo && decay[lo] >= fastest {
        psi[lo] = zero;
        lo += 1;
    }
    while hi > core_hi && decay[hi - 1] >= fastest {
        psi[hi - 1] = zero;
        hi -= 1;
    }
    lo..hi
}

/// Smallest range holding every nonzero entry of `psi`, searched inside `hint`.
pub fn shrink_support(psi: &[C64], hint: Range<usize>) -> Range<usize> {
    let zero = C64::new(0.0, 0.0);
    let lo = (hint.start..hint.end).find(|&i| psi[i] != zero);
    match lo {
        None => hint.start..hint.start,
        Some(lo) => {
            let hi = (lo..hint.end).rev().find(|&i| psi[i] != zero).unwrap_or(lo);
            lo..hi + 1
        }
    }
}

/// Support of `psi` after applying an operator of the given bandwidth.
pub fn widen_support(psi: &[C64], support: &Range<usize>, bandwidth: usize) -> Range<usize> {
    let lo = support.start.saturating_sub(bandwidth);
    let hi = (support.end + bandwidth).min(psi.len());
    shrink_support(psi, lo..hi)
}
