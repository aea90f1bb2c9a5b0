//! Quantum systems: the thermal, driven, detuned mode and the moving particle
//! in a standing wave, each available in three pictures.
//!
//! A system splits its non-Hermitian Hamiltonian into an exactly propagated
//! diagonal `D` and a coupling `C`. Over one step starting at `t0` the state is
//! written as `psi = exp(-i D s) phi` with `s = t - t0`, so `phi` obeys
//! `dphi/ds = -i exp(i D s) C exp(-i D s) phi`. The frame is reset at every
//! step start, which keeps stored states in the Schroedinger frame.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64 as C64;
use smallvec::SmallVec;

use crate::error::{invalid, Error, Result};
use crate::hilbert::{Band, Operator};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Largest exponent a frame factor may reach within one step.
pub const MAX_FRAME_EXPONENT: f64 = 230.258_509_299_404_57; // ln(1e100)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Picture {
    Schroedinger,
    Interaction,
    NonUnitaryInteraction,
}

impl Picture {
    pub const ALL: [Picture; 3] = [
        Picture::Schroedinger,
        Picture::Interaction,
        Picture::NonUnitaryInteraction,
    ];
}

impl fmt::Display for Picture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Picture::Schroedinger => "schroedinger",
            Picture::Interaction => "interaction",
            Picture::NonUnitaryInteraction => "non-unitary-interaction",
        })
    }
}

impl FromStr for Picture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "schroedinger" | "S" => Ok(Picture::Schroedinger),
            "interaction" | "IP" => Ok(Picture::Interaction),
            "non-unitary-interaction" | "nonunitary" | "UIP" => Ok(Picture::NonUnitaryInteraction),
            other => Err(invalid("picture", format!("unknown picture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
enum Freq {
    Zero,
    Uniform(C64),
    /// Common frequency plus `(band index, frequency)` exceptions.
    Mixed(C64, Vec<(usize, C64)>),
}

#[derive(Debug, Clone)]
struct FramedBand {
    offset: isize,
    values: Vec<C64>,
    freq: Freq,
}

/// Diagonal `d_j`; `linear` holds `(c0, c1)` when `d_j = c0 + c1 j`.
#[derive(Debug, Clone)]
struct ExactDiagonal {
    d: Vec<C64>,
    linear: Option<(C64, C64)>,
}

/// How an observable's ensemble mean becomes an output column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Column {
    Re(usize),
    Im(usize),
    /// `mean[square] - mean[first]^2`, real parts.
    Variance {
        first: usize,
        square: usize,
    },
}

/// Operators sampled on every trajectory plus the derived output columns.
#[derive(Debug, Clone)]
pub struct ObservableSet {
    pub ops: Vec<Operator>,
    pub columns: Vec<(&'static str, Column)>,
    /// Operator used for step-level statistics such as the dt-n correlation.
    pub tracked: Option<usize>,
}

impl ObservableSet {
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn column_names(&self) -> Vec<&'static str> {
        self.columns.iter().map(|c| c.0).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.0 == name)
    }

    /// Output columns from mean raw expectation values.
    pub fn derive(&self, raw: &[C64]) -> Vec<f64> {
        self.columns
            .iter()
            .map(|(_, c)| match *c {
                Column::Re(i) => raw[i].re,
                Column::Im(i) => raw[i].im,
                Column::Variance { first, square } => {
                    raw[square].re - raw[first].re * raw[first].re
                }
            })
            .collect()
    }

    pub fn sample_into(&self, psi: &[C64], out: &mut [C64]) {
        for (o, op) in out.iter_mut().zip(&self.ops) {
            *o = op.sandwich(psi);
        }
    }

    /// [`Self::sample_into`] for `psi` vanishing outside `support`.
    pub fn sample_range_into(&self, psi: &[C64], support: std::ops::Range<usize>, out: &mut [C64]) {
        for (o, op) in out.iter_mut().zip(&self.ops) {
            *o = op.sandwich_range(psi, support.clone());
        }
    }
}

/// A Lindblad problem prepared for trajectory and master-equation evolution.
#[derive(Debug, Clone)]
pub struct QuantumSystem {
    dim: usize,
    picture: Picture,
    hamiltonian: Operator,
    h_nh: Operator,
    jumps: Vec<Operator>,
    rate_ops: Vec<Operator>,
    exact: Option<ExactDiagonal>,
    coupling: Vec<FramedBand>,
    /// Largest frame growth rate, one-sided and two-sided.
    frame_rates: [f64; 2],
    /// `-Im (H_nH)_jj`.
    decay: Vec<f64>,
    edges: Vec<usize>,
    observables: ObservableSet,
}

impl QuantumSystem {
    /// Builds a system from a Hermitian Hamiltonian and jump operators.
    pub fn new(
        hamiltonian: Operator,
        jumps: Vec<Operator>,
        picture: Picture,
        observables: ObservableSet,
        edges: Vec<usize>,
    ) -> Result<Self> {
        let dim = hamiltonian.dim();
        for j in &jumps {
            if j.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: j.dim(),
                });
            }
        }
        for op in &observables.ops {
            if op.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: op.dim(),
                });
            }
        }
        if let Some(&e) = edges.iter().find(|&&e| e >= dim) {
            return Err(Error::InvalidDimension(format!(
                "edge label {e} outside dimension {dim}"
            )));
        }
        if !hamiltonian.is_hermitian(1e-12 * (1.0 + max_abs(&hamiltonian))) {
            return Err(invalid("hamiltonian", "must be Hermitian"));
        }
        let rate_ops = jumps
            .iter()
            .map(|j| j.adjoint().compose(j))
            .collect::<Result<Vec<_>>>()?;
        let mut loss = Operator::zero(dim)?;
        for r in &rate_ops {
            loss = loss.add(r)?;
        }
        let h_nh = hamiltonian.add(&loss.scale(C64::new(0.0, -0.5)))?;

        let (diag, coupling_op) = match picture {
            Picture::Schroedinger => (None, h_nh.clone()),
            Picture::Interaction => {
                let d = hamiltonian.diagonal_values();
                let c = h_nh.sub(&Operator::diagonal(d.clone())?)?;
                (Some(d), c)
            }
            Picture::NonUnitaryInteraction => {
                (Some(h_nh.diagonal_values()), h_nh.off_diagonal_part())
            }
        };
        let exact = diag
            .filter(|d| d.iter().any(|z| *z != ZERO))
            .map(|d| ExactDiagonal {
                linear: linear_fit(&d),
                d,
            });
        let coupling = frame_bands(&coupling_op, exact.as_ref().map(|e| e.d.as_slice()));
        let decay = h_nh.diagonal_values().iter().map(|z| -z.im).collect();
        let frame_rates =
            [false, true].map(|two_sided| frame_rate(exact.as_ref(), &coupling, two_sided));
        Ok(Self {
            dim,
            picture,
            hamiltonian,
            h_nh,
            jumps,
            rate_ops,
            exact,
            coupling,
            frame_rates,
            decay,
            edges,
            observables,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn picture(&self) -> Picture {
        self.picture
    }

    pub fn hamiltonian(&self) -> &Operator {
        &self.hamiltonian
    }

    pub fn nonhermitian_hamiltonian(&self) -> &Operator {
        &self.h_nh
    }

    pub fn jumps(&self) -> &[Operator] {
        &self.jumps
    }

    /// `J_m^dagger J_m` for every channel.
    pub fn rate_operators(&self) -> &[Operator] {
        &self.rate_ops
    }

    pub fn observables(&self) -> &ObservableSet {
        &self.observables
    }

    pub fn edges(&self) -> &[usize] {
        &self.edges
    }

    /// True when nothing is left for the ODE stepper in this picture.
    pub fn is_free(&self) -> bool {
        self.coupling.is_empty()
    }

    /// The exactly propagated diagonal, if the picture has one.
    pub fn exact_diagonal(&self) -> Option<&[C64]> {
        self.exact.as_ref().map(|e| e.d.as_slice())
    }

    /// Largest population on the basis edges.
    pub fn edge_population(&self, psi: &[C64]) -> f64 {
        let n2: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        self.edges
            .iter()
            .map(|&e| psi[e].norm_sqr() / n2)
            .fold(0.0, f64::max)
    }

    /// Fails when a frame factor over a step of length `h` would exceed `1e100`.
    /// `two_sided` also guards against factors below `1e-100`.
    pub fn check_frame(&self, h: f64, two_sided: bool) -> Result<()> {
        let worst = self.frame_rates[two_sided as usize] * h;
        if worst > MAX_FRAME_EXPONENT {
            return Err(Error::PictureOverflow { exponent: worst });
        }
        Ok(())
    }

    /// Writes `exp(-i d_j h)` into `out`; all ones without an exact part.
    pub fn propagator_into(&self, h: f64, out: &mut [C64]) {
        match &self.exact {
            None => out.fill(C64::new(1.0, 0.0)),
            Some(ExactDiagonal {
                linear: Some((c0, c1)),
                ..
            }) => {
                let step = (-I * c1 * h).exp();
                let mut f = (-I * c0 * h).exp();
                for o in out.iter_mut() {
                    *o = f;
                    f *= step;
                }
            }
            Some(e) => {
                for (o, d) in out.iter_mut().zip(&e.d) {
                    *o = (-I * d * h).exp();
                }
            }
        }
    }

    /// Multiplies `psi` by `exp(-i d_j h)` on the labels in `support`.
    pub fn propagate(&self, h: f64, psi: &mut [C64], support: std::ops::Range<usize>) {
        match &self.exact {
            None => {}
            Some(ExactDiagonal {
                linear: Some((c0, c1)),
                ..
            }) => {
                let step = (-I * c1 * h).exp();
                let mut f = (-I * (c0 + c1 * support.start as f64) * h).exp();
                for z in &mut psi[support] {
                    *z *= f;
                    f *= step;
                }
            }
            Some(e) => {
                for j in support {
                    psi[j] *= (-I * e.d[j] * h).exp();
                }
            }
        }
    }

    /// `dphi/ds = -i exp(i D s) C exp(-i D s) phi`.
    pub fn coupling_rhs(&self, s: f64, phi: &[C64], dphi: &mut [C64]) {
        self.coupling_rhs_window(s, 0, phi, dphi);
    }

    /// [`Self::coupling_rhs`] restricted to labels `lo..lo + phi.len()`, with
    /// amplitudes outside the window taken as zero.
    pub fn coupling_rhs_window(&self, s: f64, lo: usize, phi: &[C64], dphi: &mut [C64]) {
        let m = phi.len();
        dphi.fill(ZERO);
        let mut seen: SmallVec<[(C64, C64); 4]> = SmallVec::new();
        let mut phase = |w: C64| -> C64 {
            if s == 0.0 {
                return C64::new(1.0, 0.0);
            }
            if let Some(&(_, e)) = seen.iter().find(|(v, _)| *v == w) {
                return e;
            }
            let e = match seen.iter().find(|(v, _)| *v == -w) {
                Some(&(_, e)) => e.inv(),
                None => (I * w * s).exp(),
            };
            seen.push((w, e));
            e
        };
        for b in &self.coupling {
            let k = b.offset.unsigned_abs();
            if m <= k {
                continue;
            }
            let len = m - k;
            let (rows, cols) = if b.offset >= 0 { (0, k) } else { (k, 0) };
            let y = &mut dphi[rows..rows + len];
            let x = &phi[cols..cols + len];
            let values = &b.values[lo..lo + len];
            match &b.freq {
                Freq::Zero => {
                    for ((yi, xi), v) in y.iter_mut().zip(x).zip(values) {
                        *yi -= I * v * xi;
                    }
                }
                Freq::Uniform(w) => {
                    let f = -I * phase(*w);
                    for ((yi, xi), v) in y.iter_mut().zip(x).zip(values) {
                        *yi += f * v * xi;
                    }
                }
                Freq::Mixed(w0, rest) => {
                    let f0 = -I * phase(*w0);
                    for ((yi, xi), v) in y.iter_mut().zip(x).zip(values) {
                        *yi += f0 * v * xi;
                    }
                    for &(i, w) in rest.iter().filter(|(i, _)| (lo..lo + len).contains(i)) {
                        let f = -I * phase(w);
                        y[i - lo] += (f - f0) * b.values[i] * x[i - lo];
                    }
                }
            }
        }
    }

    /// Diagonal decay rates `-Im (H_nH)_jj`.
    pub fn decay_rates(&self) -> &[f64] {
        &self.decay
    }

    /// Widest band offset of the coupling operator.
    pub fn coupling_bandwidth(&self) -> usize {
        self.coupling
            .iter()
            .map(|b| b.offset.unsigned_abs())
            .max()
            .unwrap_or(0)
    }

    /// `-i H_nH psi` in the Schroedinger frame.
    pub fn schroedinger_rhs(&self, psi: &[C64], dpsi: &mut [C64]) {
        self.h_nh.apply_into(psi, dpsi);
        dpsi.iter_mut().for_each(|z| *z *= -I);
    }

    /// Coupling operator `C` of the picture split (time-independent part).
    pub fn coupling_operator(&self) -> Result<Operator> {
        Operator::from_bands(
            self.dim,
            self.coupling
                .iter()
                .map(|b| Band {
                    offset: b.offset,
                    values: b.values.clone(),
                })
                .collect(),
        )
    }
}

fn frame_rate(exact: Option<&ExactDiagonal>, coupling: &[FramedBand], two_sided: bool) -> f64 {
    let mut worst = 0.0f64;
    if let Some(e) = exact {
        for z in &e.d {
            worst = worst.max(if two_sided { z.im.abs() } else { z.im });
        }
    }
    for b in coupling {
        let mut check = |w: &C64| worst = worst.max(if two_sided { w.im.abs() } else { -w.im });
        match &b.freq {
            Freq::Zero => {}
            Freq::Uniform(w) => check(w),
            Freq::Mixed(w0, rest) => {
                check(w0);
                rest.iter().for_each(|(_, w)| check(w));
            }
        }
    }
    worst
}

fn max_abs(op: &Operator) -> f64 {
    op.entries().iter().map(|e| e.2.norm()).fold(0.0, f64::max)
}

fn close(a: C64, b: C64, scale: f64) -> bool {
    (a - b).norm() <= 1e-13 * scale.max(1.0)
}

fn linear_fit(d: &[C64]) -> Option<(C64, C64)> {
    let c0 = d[0];
    let c1 = if d.len() > 1 { d[1] - d[0] } else { ZERO };
    let scale = d.iter().map(|z| z.norm()).fold(0.0, f64::max);
    d.iter()
        .enumerate()
        .all(|(j, z)| close(*z, c0 + c1 * j as f64, scale))
        .then_some((c0, c1))
}

fn frame_bands(op: &Operator, d: Option<&[C64]>) -> Vec<FramedBand> {
    let dim = op.dim();
    let bands: Vec<Band> = match op.bands() {
        Some(b) => b.to_vec(),
        None => {
            let mut by_offset: Vec<Band> = Vec::new();
            for (r, c, v) in op.entries() {
                let o = c as isize - r as isize;
                let idx = match by_offset.iter().position(|b| b.offset == o) {
                    Some(i) => i,
                    None => {
                        by_offset.push(Band {
                            offset: o,
                            values: vec![ZERO; dim - o.unsigned_abs()],
                        });
                        by_offset.len() - 1
                    }
                };
                by_offset[idx].values[r.min(c)] = v;
            }
            by_offset
        }
    };
    bands
        .into_iter()
        .map(|b| {
            let freq = match d {
                None => Freq::Zero,
                Some(_) if b.offset == 0 => Freq::Zero,
                Some(d) => {
                    let k = b.offset.unsigned_abs();
                    let ws: Vec<C64> = (0..b.values.len())
                        .map(|i| {
                            let (r, c) = if b.offset >= 0 {
                                (i, i + k)
                            } else {
                                (i + k, i)
                            };
                            d[r] - d[c]
                        })
                        .collect();
                    let scale = ws.iter().map(|z| z.norm()).fold(0.0, f64::max);
                    if ws.iter().all(|w| close(*w, ws[0], scale)) {
                        if ws[0] == ZERO {
                            Freq::Zero
                        } else {
                            Freq::Uniform(ws[0])
                        }
                    } else {
                        let w0 = ws[ws.len() / 2];
                        let rest = ws
                            .into_iter()
                            .enumerate()
                            .filter(|(_, w)| !close(*w, w0, scale))
                            .collect();
                        Freq::Mixed(w0, rest)
                    }
                }
            };
            FramedBand {
                offset: b.offset,
                values: b.values,
                freq,
            }
        })
        .collect()
}

/// Parameters of the damped, driven, detuned mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeParams {
    pub cutoff: usize,
    pub kappa: f64,
    pub n_th: f64,
    pub eta: C64,
    pub delta: f64,
}

impl Default for ModeParams {
    fn default() -> Self {
        Self {
            cutoff: 80,
            kappa: 1.0,
            n_th: 0.0,
            eta: ZERO,
            delta: 0.0,
        }
    }
}

impl ModeParams {
    pub fn validate(&self) -> Result<()> {
        if self.cutoff < 2 {
            return Err(Error::InvalidDimension(
                "mode cutoff must be at least 2".into(),
            ));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(invalid("kappa", "must be positive and finite"));
        }
        if !(self.n_th >= 0.0) || !self.n_th.is_finite() {
            return Err(invalid("nTh", "must be non-negative and finite"));
        }
        if !self.eta.is_finite() {
            return Err(invalid("eta", "must be finite"));
        }
        if !self.delta.is_finite() {
            return Err(invalid("delta", "must be finite"));
        }
        Ok(())
    }
}

/// Mode observables: `a`, `a^dagger a`, `(a^dagger a)^2`.
pub fn mode_observables(cutoff: usize) -> Result<ObservableSet> {
    let n = Operator::number(cutoff)?;
    Ok(ObservableSet {
        ops: vec![Operator::annihilation(cutoff)?, n.clone(), n.compose(&n)?],
        columns: vec![
            ("re_a", Column::Re(0)),
            ("im_a", Column::Im(0)),
            ("n", Column::Re(1)),
            (
                "var_n",
                Column::Variance {
                    first: 1,
                    square: 2,
                },
            ),
        ],
        tracked: Some(1),
    })
}

/// `H = -delta a^dagger a + i(eta a^dagger - eta^* a)`,
/// `J0 = sqrt(2 kappa (nTh+1)) a`, `J1 = sqrt(2 kappa nTh) a^dagger`.
pub fn make_mode_system(p: &ModeParams, picture: Picture) -> Result<QuantumSystem> {
    p.validate()?;
    let a = Operator::annihilation(p.cutoff)?;
    let ad = a.adjoint();
    let h = Operator::number(p.cutoff)?
        .scale(C64::new(-p.delta, 0.0))
        .add(&ad.scale(I * p.eta))?
        .add(&a.scale(-I * p.eta.conj()))?;
    let j0 = a.scale(C64::new((2.0 * p.kappa * (p.n_th + 1.0)).sqrt(), 0.0));
    let j1 = ad.scale(C64::new((2.0 * p.kappa * p.n_th).sqrt(), 0.0));
    QuantumSystem::new(
        h,
        vec![j0, j1],
        picture,
        mode_observables(p.cutoff)?,
        vec![p.cutoff - 1],
    )
}

/// Parameters of a particle on a ring in a `cos^2(Kx)` potential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleParams {
    pub k_cutoff: usize,
    pub omega_rec: f64,
    pub v: f64,
    pub k_ratio: usize,
}

impl ParticleParams {
    pub fn dim(&self) -> usize {
        2 * self.k_cutoff + 1
    }

    /// Basis index of wave number `k`.
    pub fn index(&self, k: i64) -> Option<usize> {
        let i = k + self.k_cutoff as i64;
        (0..self.dim() as i64).contains(&i).then_some(i as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_ratio == 0 {
            return Err(invalid("K_ratio", "must be at least 1"));
        }
        if self.k_cutoff < self.k_ratio {
            return Err(Error::InvalidDimension(format!(
                "wave-number cutoff {} cannot host coupling K/dk = {}",
                self.k_cutoff, self.k_ratio
            )));
        }
        if !self.omega_rec.is_finite() || !self.v.is_finite() {
            return Err(invalid("omegaRec/V", "must be finite"));
        }
        Ok(())
    }
}

fn cos2_operator(p: &ParticleParams) -> Result<Operator> {
    let dim = p.dim();
    let k = 2 * p.k_ratio;
    let quarter = vec![C64::new(0.25, 0.0); dim - k];
    Operator::from_bands(
        dim,
        vec![
            Band {
                offset: 0,
                values: vec![C64::new(0.5, 0.0); dim],
            },
            Band {
                offset: k as isize,
                values: quarter.clone(),
            },
            Band {
                offset: -(k as isize),
                values: quarter,
            },
        ],
    )
}

/// Particle observables: wave number, its square and `cos^2(Kx)`.
pub fn particle_observables(p: &ParticleParams) -> Result<ObservableSet> {
    let kk = Operator::diagonal(
        (0..p.dim())
            .map(|i| C64::new(i as f64 - p.k_cutoff as f64, 0.0))
            .collect(),
    )?;
    Ok(ObservableSet {
        ops: vec![kk.clone(), kk.compose(&kk)?, cos2_operator(p)?],
        columns: vec![
            ("k", Column::Re(0)),
            (
                "var_k",
                Column::Variance {
                    first: 0,
                    square: 1,
                },
            ),
            ("cos2", Column::Re(2)),
        ],
        tracked: Some(0),
    })
}

/// `H = omega_rec K^2 + V cos^2(Kx)` on wave numbers `-k_cutoff..=k_cutoff`.
pub fn make_particle_system(p: &ParticleParams, picture: Picture) -> Result<QuantumSystem> {
    p.validate()?;
    let dim = p.dim();
    let kinetic = Operator::diagonal(
        (0..dim)
            .map(|i| {
                let k = i as f64 - p.k_cutoff as f64;
                C64::new(p.omega_rec * k * k, 0.0)
            })
            .collect(),
    )?;
    let h = kinetic.add(&cos2_operator(p)?.scale(C64::new(p.v, 0.0)))?;
    QuantumSystem::new(
        h,
        Vec::new(),
        picture,
        particle_observables(p)?,
        vec![0, dim - 1],
    )
}
