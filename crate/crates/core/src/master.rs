//! Direct integration of the Lindblad master equation.
//!
//! The density matrix is stepped in the frame of the system's exact diagonal
//! part: with `v_i = exp(-i d_i s)` and `rho = V X V^dagger`,
//! `dX_ij/ds = Y_ij / (v_i conj(v_j))` where
//! `Y = -i C rho + i rho C^dagger + sum_m J_m rho J_m^dagger`.
//! The frame is reset at the start of every step.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::engine::{sample_time, sampling_intervals};
use crate::error::{Error, Result};
use crate::hilbert::{Operator, StateVector};
use crate::models::QuantumSystem;
use crate::ode::{CashKarp, StepControl};
use crate::series::TimeSeries;

const ZERO: C64 = C64::new(0.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

pub const HERMITICITY_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-8;
pub const POSITIVITY_TOL: f64 = 1e-8;

/// A density matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    dim: usize,
    data: Vec<C64>,
}

impl DensityMatrix {
    /// Validates the density-matrix invariants.
    pub fn new(dim: usize, data: Vec<C64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension(
                "density matrix needs dim >= 1".into(),
            ));
        }
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: data.len(),
            });
        }
        let rho = Self { dim, data };
        rho.check()?;
        Ok(rho)
    }

    pub fn from_pure(psi: &StateVector) -> Result<Self> {
        let a = psi.amplitudes();
        let n2 = psi.norm_sqr();
        let dim = a.len();
        let mut data = vec![ZERO; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                data[i * dim + j] = a[i] * a[j].conj() / n2;
            }
        }
        Self::new(dim, data)
    }

    /// Mixture `sum_k w_k |psi_k><psi_k|` of normalized states.
    pub fn from_mixture(states: &[(f64, &[C64])]) -> Result<Self> {
        let dim = states.first().map(|s| s.1.len()).unwrap_or(0);
        let mut data = vec![ZERO; dim * dim];
        for (w, a) in states {
            if a.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: a.len(),
                });
            }
            for i in 0..dim {
                for j in 0..dim {
                    data[i * dim + j] += *w * a[i] * a[j].conj();
                }
            }
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.dim + c]
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|i| self.data[i * (self.dim + 1)]).sum()
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|i| self.data[i * (self.dim + 1)].re)
            .collect()
    }

    /// `Tr(O rho)`.
    pub fn expectation(&self, op: &Operator) -> C64 {
        op.entries()
            .iter()
            .map(|&(r, c, v)| v * self.data[c * self.dim + r])
            .sum()
    }

    /// Largest `|rho_ij - conj(rho_ji)|`.
    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in i..d {
                worst = worst.max((self.data[i * d + j] - self.data[j * d + i].conj()).norm());
            }
        }
        worst
    }

    /// `rho <- (rho + rho^dagger) / 2`.
    pub fn hermitize(&mut self) {
        let d = self.dim;
        for i in 0..d {
            self.data[i * d + i].im = 0.0;
            for j in i + 1..d {
                let m = 0.5 * (self.data[i * d + j] + self.data[j * d + i].conj());
                self.data[i * d + j] = m;
                self.data[j * d + i] = m.conj();
            }
        }
    }

    /// True when `rho + tol I` is positive definite, tested by a Cholesky
    /// factorization of the real embedding `[[A, -B], [B, A]]` of `A + iB`.
    pub fn is_positive(&self, tol: f64) -> bool {
        let d = self.dim;
        let m = DMatrix::from_fn(2 * d, 2 * d, |r, c| {
            let (i, j) = (r % d, c % d);
            let z = 0.5 * (self.data[i * d + j] + self.data[j * d + i].conj());
            let x = match (r < d, c < d) {
                (true, true) | (false, false) => z.re,
                (true, false) => -z.im,
                (false, true) => z.im,
            };
            if r == c {
                x + tol
            } else {
                x
            }
        });
        m.cholesky().is_some()
    }

    fn check(&self) -> Result<()> {
        let herm = self.hermiticity_error();
        if herm > HERMITICITY_TOL {
            return Err(Error::InvariantViolation(format!(
                "density matrix not Hermitian: worst |rho - rho^dagger| = {herm:e}"
            )));
        }
        let tr = self.trace();
        if (tr - 1.0).norm() > TRACE_TOL {
            return Err(Error::InvariantViolation(format!(
                "density matrix trace {tr} differs from 1 by {:e}",
                (tr - 1.0).norm()
            )));
        }
        if !self.is_positive(POSITIVITY_TOL) {
            return Err(Error::InvariantViolation(
                "density matrix has an eigenvalue below -1e-8".into(),
            ));
        }
        Ok(())
    }
}

type Triplets = Vec<(usize, usize, C64)>;

/// Precomputed operator data for evaluating the Lindblad generator.
#[derive(Debug, Clone)]
struct Generator {
    dim: usize,
    coupling: Triplets,
    jumps: Vec<Triplets>,
    exact: Option<Vec<C64>>,
}

impl Generator {
    fn new(sys: &QuantumSystem, schroedinger: bool) -> Result<Self> {
        let (coupling, exact) = if schroedinger {
            (sys.nonhermitian_hamiltonian().entries(), None)
        } else {
            (
                sys.coupling_operator()?.entries(),
                sys.exact_diagonal().map(|d| d.to_vec()),
            )
        };
        Ok(Self {
            dim: sys.dim(),
            coupling,
            jumps: sys
                .jumps()
                .iter()
                .map(|j| j.entries())
                .filter(|e| !e.is_empty())
                .collect(),
            exact,
        })
    }

    /// `Y = -i C rho + i rho C^dagger + sum_m J_m rho J_m^dagger`, evaluated on
    /// the Hermitian part of `rho`, which is written into `herm`.
    fn apply(&self, rho: &[C64], y: &mut [C64], tmp: &mut [C64], herm: &mut [C64]) {
        let d = self.dim;
        for i in 0..d {
            herm[i * d + i] = C64::new(rho[i * d + i].re, 0.0);
            for j in i + 1..d {
                let s = 0.5 * (rho[i * d + j] + rho[j * d + i].conj());
                herm[i * d + j] = s;
                herm[j * d + i] = s.conj();
            }
        }
        let rho = &*herm;
        y.fill(ZERO);
        // A = -i C rho, then Y = A + A^dagger.
        for &(r, c, v) in &self.coupling {
            let f = -I * v;
            let (yr, xr) = (r * d, c * d);
            for k in 0..d {
                y[yr + k] += f * rho[xr + k];
            }
        }
        for i in 0..d {
            y[i * d + i] = C64::new(2.0 * y[i * d + i].re, 0.0);
            for j in i + 1..d {
                let s = y[i * d + j] + y[j * d + i].conj();
                y[i * d + j] = s;
                y[j * d + i] = s.conj();
            }
        }
        for jm in &self.jumps {
            // tmp = J rho
            tmp.fill(ZERO);
            for &(r, c, v) in jm {
                let (tr, xr) = (r * d, c * d);
                for k in 0..d {
                    tmp[tr + k] += v * rho[xr + k];
                }
            }
            // y += tmp J^dagger: (tmp J^dagger)_ij = sum_k tmp_ik conj(J_jk)
            for (yrow, trow) in y.chunks_exact_mut(d).zip(tmp.chunks_exact(d)) {
                for &(r, c, v) in jm {
                    yrow[r] += trow[c] * v.conj();
                }
            }
        }
    }
}

/// `d rho / dt` of the Lindblad equation in the Schroedinger frame.
pub fn lindblad_rhs(rho: &DensityMatrix, sys: &QuantumSystem) -> Result<Vec<C64>> {
    if rho.dim() != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            found: rho.dim(),
        });
    }
    let g = Generator::new(sys, true)?;
    let n = rho.dim * rho.dim;
    let mut y = vec![ZERO; n];
    let mut tmp = vec![ZERO; n];
    let mut herm = vec![ZERO; n];
    g.apply(&rho.data, &mut y, &mut tmp, &mut herm);
    Ok(y)
}

/// Master-equation time series and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterSolution {
    pub series: TimeSeries,
    /// Raw observable expectations, one block per sampling instant.
    pub raw: Vec<C64>,
    pub final_state: DensityMatrix,
    pub steps: u64,
    /// Largest Hermiticity drift seen before re-symmetrization.
    pub max_hermiticity_error: f64,
    pub max_trace_error: f64,
}

/// Integrates the master equation from `rho0` and samples observables at
/// multiples of `dt_sample` up to `t_final`.
pub fn evolve_master(
    rho0: &DensityMatrix,
    sys: &QuantumSystem,
    dt_sample: f64,
    t_final: f64,
    ode: &StepControl,
) -> Result<MasterSolution> {
    if rho0.dim() != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            found: rho0.dim(),
        });
    }
    rho0.check()?;
    ode.validate()?;
    let intervals = sampling_intervals(dt_sample, t_final)?;
    let g = Generator::new(sys, false)?;
    let d = sys.dim();
    let n = d * d;
    let obs = sys.observables();
    let k = obs.len();

    let mut rho = rho0.clone();
    let mut raw = Vec::with_capacity((intervals + 1) * k);
    let sample = |rho: &DensityMatrix, raw: &mut Vec<C64>| {
        raw.extend(obs.ops.iter().map(|o| rho.expectation(o)))
    };
    sample(&rho, &mut raw);

    let mut ck = CashKarp::new(n);
    let mut x_out = vec![ZERO; n];
    let mut rho_s = vec![ZERO; n];
    let mut tmp = vec![ZERO; n];
    let mut herm = vec![ZERO; n];
    let mut v = vec![C64::new(1.0, 0.0); d];
    let mut steps = 0u64;
    let mut max_herm = 0.0f64;
    let mut max_trace = 0.0f64;
    let mut t = 0.0;
    let mut dt_try = dt_sample;
    for u in 0..intervals {
        let boundary = sample_time(u + 1, dt_sample);
        while t < boundary {
            let dt_suggest = dt_try;
            let clipped = t + dt_try >= boundary;
            let h = if clipped { boundary - t } else { dt_try };
            if g.exact.is_some() {
                sys.check_frame(2.0 * h, true)?;
            }
            let mut rhs = |s: f64, x: &[C64], dx: &mut [C64]| match &g.exact {
                None => g.apply(x, dx, &mut tmp, &mut herm),
                Some(_) => {
                    sys.propagator_into(s, &mut v);
                    for i in 0..d {
                        for j in 0..d {
                            rho_s[i * d + j] = v[i] * x[i * d + j] * v[j].conj();
                        }
                    }
                    g.apply(&rho_s, dx, &mut tmp, &mut herm);
                    for i in 0..d {
                        for j in 0..d {
                            dx[i * d + j] /= v[i] * v[j].conj();
                        }
                    }
                }
            };
            let info = ck
                .step(&mut rhs, 0.0, &rho.data, &mut x_out, h, ode)
                .map_err(|e| match e {
                    Error::StepUnderflow { dt, .. } => Error::StepUnderflow { t, dt },
                    other => other,
                })?;
            if g.exact.is_some() {
                sys.propagator_into(info.dt_did, &mut v);
                for i in 0..d {
                    for j in 0..d {
                        x_out[i * d + j] *= v[i] * v[j].conj();
                    }
                }
            }
            std::mem::swap(&mut rho.data, &mut x_out);
            steps += 1;
            let completed = clipped && info.dt_did == h;
            t = if completed { boundary } else { t + info.dt_did };
            dt_try = if completed {
                info.dt_next.max(dt_suggest)
            } else {
                info.dt_next
            };
        }
        max_herm = max_herm.max(rho.hermiticity_error());
        rho.hermitize();
        let tr_err = (rho.trace() - 1.0).norm();
        max_trace = max_trace.max(tr_err);
        if max_herm > HERMITICITY_TOL || tr_err > TRACE_TOL || !rho.is_positive(POSITIVITY_TOL) {
            return Err(Error::InvariantViolation(format!(
                "at t = {t}: Hermiticity drift {max_herm:e}, trace error {tr_err:e}, positivity {}",
                if rho.is_positive(POSITIVITY_TOL) {
                    "ok"
                } else {
                    "violated"
                }
            )));
        }
        sample(&rho, &mut raw);
    }

    let grid = TimeSeries::uniform_grid(dt_sample, intervals);
    let names = obs.column_names().iter().map(|s| s.to_string()).collect();
    let mut columns = vec![Vec::with_capacity(intervals + 1); obs.columns.len()];
    for blk in raw.chunks_exact(k) {
        for (c, x) in columns.iter_mut().zip(obs.derive(blk)) {
            c.push(x);
        }
    }
    Ok(MasterSolution {
        series: TimeSeries::new(grid, names, columns)?,
        raw,
        final_state: rho,
        steps,
        max_hermiticity_error: max_herm,
        max_trace_error: max_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_mode_system, ModeParams, Picture};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mode(cutoff: usize, n_th: f64, eta: C64, picture: Picture) -> QuantumSystem {
        let p = ModeParams {
            cutoff,
            n_th,
            eta,
            ..ModeParams::default()
        };
        make_mode_system(&p, picture).unwrap()
    }

    #[test]
    fn vacuum_is_steady() {
        let sys = mode(10, 0.0, ZERO, Picture::Schroedinger);
        let rho = DensityMatrix::from_pure(&StateVector::fock(0, 10).unwrap()).unwrap();
        assert!(lindblad_rhs(&rho, &sys)
            .unwrap()
            .iter()
            .all(|z| z.norm() == 0.0));
    }

    #[test]
    fn single_photon_decay_rate() {
        let sys = mode(10, 0.0, ZERO, Picture::Schroedinger);
        let rho = DensityMatrix::from_pure(&StateVector::fock(1, 10).unwrap()).unwrap();
        let y = lindblad_rhs(&rho, &sys).unwrap();
        let dn: f64 = (0..10).map(|i| i as f64 * y[i * 11].re).sum();
        assert_abs_diff_eq!(dn, -2.0, epsilon = 1e-14);
    }

    #[test]
    fn thermal_relaxation_matches_closed_form() {
        let sys = mode(60, 1.0, ZERO, Picture::Interaction);
        let rho0 = DensityMatrix::from_pure(&StateVector::fock(4, 60).unwrap()).unwrap();
        let sol = evolve_master(&rho0, &sys, 0.1, 2.0, &StepControl::new(1e-13, 1e-10)).unwrap();
        for (t, n) in sol
            .series
            .grid()
            .iter()
            .zip(sol.series.column("n").unwrap())
        {
            assert!(
                (n - (1.0 + 3.0 * (-2.0 * t).exp())).abs() < 1e-7,
                "t = {t}: {n}"
            );
        }
        assert!(sol.max_trace_error < 1e-10);
    }

    #[test]
    fn driven_steady_state() {
        let sys = mode(20, 0.0, C64::new(1.0, 0.0), Picture::NonUnitaryInteraction);
        let rho0 = DensityMatrix::from_pure(&StateVector::fock(0, 20).unwrap()).unwrap();
        let sol = evolve_master(&rho0, &sys, 1.0, 20.0, &StepControl::new(1e-13, 1e-10)).unwrap();
        let last = sol.series.len() - 1;
        assert_abs_diff_eq!(
            sol.series.column("re_a").unwrap()[last],
            1.0,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(sol.series.column("n").unwrap()[last], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn steady_state_stays_put() {
        let sys = mode(20, 0.0, ZERO, Picture::Interaction);
        let rho0 = DensityMatrix::from_pure(&StateVector::fock(0, 20).unwrap()).unwrap();
        let sol = evolve_master(&rho0, &sys, 0.5, 2.0, &StepControl::default()).unwrap();
        assert!(sol.series.column("n").unwrap().iter().all(|&n| n == 0.0));
    }

    #[test]
    fn driven_thermal_mode_at_large_cutoff_stays_physical() {
        let sys = mode(80, 5.0, C64::new(1.0, 0.0), Picture::Schroedinger);
        let rho0 = DensityMatrix::from_pure(&StateVector::fock(10, 80).unwrap()).unwrap();
        let sol = evolve_master(&rho0, &sys, 0.05, 0.3, &StepControl::new(1e-12, 1e-10)).unwrap();
        assert!(sol.max_hermiticity_error < 1e-12);
        assert!(sol.max_trace_error < 1e-10);
    }

    #[test]
    fn trace_holds_at_default_tolerances() {
        let sys = mode(40, 1.0, C64::new(1.0, 0.0), Picture::Interaction);
        let rho0 = DensityMatrix::from_pure(&StateVector::fock(3, 40).unwrap()).unwrap();
        let sol = evolve_master(&rho0, &sys, 0.05, 5.0, &StepControl::default()).unwrap();
        assert!(sol.max_trace_error < 1e-8);
    }

    #[test]
    fn pictures_agree() {
        let eta = C64::new(1.0, 0.5);
        let psi = StateVector::coherent(C64::new(0.5, 0.5), 24).unwrap().state;
        let rho0 = DensityMatrix::from_pure(&psi).unwrap();
        let ode = StepControl::new(1e-13, 1e-10);
        let sols: Vec<_> = Picture::ALL
            .iter()
            .map(|&p| evolve_master(&rho0, &mode(24, 0.5, eta, p), 0.1, 1.0, &ode).unwrap())
            .collect();
        for s in &sols[1..] {
            for (a, b) in sols[0].raw.iter().zip(&s.raw) {
                assert!((a - b).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn rejects_invalid_density_matrices() {
        let mut d = vec![ZERO; 4];
        d[0] = C64::new(0.5, 0.0);
        assert!(DensityMatrix::new(2, d.clone()).is_err());
        d[3] = C64::new(0.5, 0.0);
        d[1] = C64::new(0.0, 0.1);
        assert!(DensityMatrix::new(2, d.clone()).is_err());
        d[2] = C64::new(0.0, -0.1);
        assert!(DensityMatrix::new(2, d.clone()).is_ok());
        d[1] = C64::new(0.9, 0.0);
        d[2] = C64::new(0.9, 0.0);
        assert!(DensityMatrix::new(2, d).is_err());
    }

    proptest! {
        #[test]
        fn rhs_is_traceless_and_hermitian(
            re in prop::collection::vec(-1.0f64..1.0, 16),
            im in prop::collection::vec(-1.0f64..1.0, 16),
            n_th in 0.0f64..3.0,
            eta_re in -2.0f64..2.0,
        ) {
            let d = 4;
            // rho = A A^dagger / Tr(A A^dagger) is a valid density matrix.
            let a: Vec<C64> = re.iter().zip(&im).map(|(&r, &i)| C64::new(r, i)).collect();
            let mut m = vec![ZERO; 16];
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k].conj()).sum();
                }
            }
            let tr: f64 = (0..d).map(|i| m[i * 5].re).sum();
            prop_assume!(tr > 1e-3);
            m.iter_mut().for_each(|z| *z /= tr);
            let rho = DensityMatrix::new(d, m).unwrap();
            let sys = mode(d, n_th, C64::new(eta_re, 0.3), Picture::Schroedinger);
            let y = lindblad_rhs(&rho, &sys).unwrap();
            let trace: C64 = (0..d).map(|i| y[i * 5]).sum();
            prop_assert!(trace.norm() < 1e-12);
            for i in 0..d {
                for j in 0..d {
                    prop_assert!((y[i * d + j] - y[j * d + i].conj()).norm() < 1e-12);
                }
            }
        }
    }
}
