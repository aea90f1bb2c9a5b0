//! Truncated-basis states and operators.
//!
//! Operators on the mode and particle bases are banded, so the default
//! representation stores one value array per nonzero diagonal. A dense
//! fallback covers anything else.

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Tail weight above which a truncated coherent state is refused.
pub const TRUNCATION_LIMIT: f64 = 1e-6;

/// Complex amplitudes over the basis labels `0..cutoff`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amplitudes: Vec<C64>,
}

/// A coherent state together with the weight its truncation discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherentState {
    pub state: StateVector,
    pub tail_weight: f64,
}

impl StateVector {
    pub fn new(amplitudes: Vec<C64>) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::InvalidDimension("state with zero entries".into()));
        }
        if amplitudes.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("state amplitudes"));
        }
        Ok(Self { amplitudes })
    }

    pub fn zeros(cutoff: usize) -> Result<Self> {
        if cutoff == 0 {
            return Err(Error::InvalidDimension("cutoff must be at least 1".into()));
        }
        Ok(Self {
            amplitudes: vec![ZERO; cutoff],
        })
    }

    /// The number state `|n>`.
    pub fn fock(n: usize, cutoff: usize) -> Result<Self> {
        if n >= cutoff {
            return Err(Error::InvalidDimension(format!(
                "Fock label {n} outside cutoff {cutoff}"
            )));
        }
        let mut s = Self::zeros(cutoff)?;
        s.amplitudes[n] = ONE;
        Ok(s)
    }

    /// `|alpha>` truncated to `cutoff` labels and renormalized.
    pub fn coherent(alpha: C64, cutoff: usize) -> Result<CoherentState> {
        if cutoff == 0 {
            return Err(Error::InvalidDimension("cutoff must be at least 1".into()));
        }
        if !alpha.is_finite() {
            return Err(Error::NonFinite("coherent amplitude"));
        }
        let mut amplitudes = Vec::with_capacity(cutoff);
        let mut c = C64::new((-0.5 * alpha.norm_sqr()).exp(), 0.0);
        amplitudes.push(c);
        for n in 1..cutoff {
            c = c * alpha / (n as f64).sqrt();
            amplitudes.push(c);
        }
        // Sum the discarded terms directly; 1 - sum(kept) would cancel.
        let mut tail_weight = 0.0;
        let mut n = cutoff;
        loop {
            c = c * alpha / (n as f64).sqrt();
            let w = c.norm_sqr();
            tail_weight += w;
            if (n as f64) > alpha.norm_sqr() && w <= f64::EPSILON * tail_weight.max(1e-300) {
                break;
            }
            if w == 0.0 {
                break;
            }
            n += 1;
        }
        if tail_weight >= TRUNCATION_LIMIT {
            return Err(Error::Truncation { tail_weight });
        }
        let mut state = Self::new(amplitudes)?;
        state.normalize()?;
        Ok(CoherentState { state, tail_weight })
    }

    pub fn cutoff(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        norm_sqr(&self.amplitudes)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Scales to unit norm in place and returns the norm it had before.
    pub fn normalize(&mut self) -> Result<f64> {
        normalize_slice(&mut self.amplitudes)
    }

    pub fn normalized(mut self) -> Result<(Self, f64)> {
        let norm = self.normalize()?;
        Ok((self, norm))
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &Self) -> Result<C64> {
        check_dim(self.cutoff(), other.cutoff())?;
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    pub fn populations(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|z| z.norm_sqr()).collect()
    }
}

pub(crate) fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

pub(crate) fn normalize_slice(v: &mut [C64]) -> Result<f64> {
    let n2 = norm_sqr(v);
    if !n2.is_finite() {
        return Err(Error::NonFinite("state norm"));
    }
    if n2 == 0.0 {
        return Err(Error::DegenerateState);
    }
    let norm = n2.sqrt();
    if norm != 1.0 {
        let s = 1.0 / norm;
        v.iter_mut().for_each(|z| *z *= s);
    }
    Ok(norm)
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// One nonzero diagonal. Entry `(r, r + offset)` lives at `values[min(r, r + offset)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub offset: isize,
    pub values: Vec<C64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Banded(Vec<Band>),
    Dense(Vec<C64>),
}

/// A `dim x dim` complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    dim: usize,
    repr: Repr,
}

impl Operator {
    pub fn zero(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("cutoff must be at least 1".into()));
        }
        Ok(Self {
            dim,
            repr: Repr::Banded(Vec::new()),
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::diagonal(vec![ONE; dim])
    }

    pub fn diagonal(values: Vec<C64>) -> Result<Self> {
        Self::from_bands(values.len(), vec![Band { offset: 0, values }])
    }

    /// `<n-1|a|n> = sqrt(n)`.
    pub fn annihilation(cutoff: usize) -> Result<Self> {
        if cutoff == 0 {
            return Err(Error::InvalidDimension("cutoff must be at least 1".into()));
        }
        let values = (1..cutoff)
            .map(|n| C64::new((n as f64).sqrt(), 0.0))
            .collect();
        Self::from_bands(cutoff, vec![Band { offset: 1, values }])
    }

    pub fn creation(cutoff: usize) -> Result<Self> {
        Ok(Self::annihilation(cutoff)?.adjoint())
    }

    pub fn number(cutoff: usize) -> Result<Self> {
        Self::diagonal((0..cutoff).map(|n| C64::new(n as f64, 0.0)).collect())
    }

    pub fn from_bands(dim: usize, bands: Vec<Band>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("cutoff must be at least 1".into()));
        }
        let mut merged: Vec<Band> = Vec::with_capacity(bands.len());
        for band in bands {
            let len = dim.checked_sub(band.offset.unsigned_abs()).unwrap_or(0);
            if band.offset.unsigned_abs() >= dim {
                if band.values.iter().all(|v| *v == ZERO) {
                    continue;
                }
                return Err(Error::InvalidDimension(format!(
                    "band offset {} does not fit dimension {dim}",
                    band.offset
                )));
            }
            check_dim(len, band.values.len())?;
            if band.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("operator entries"));
            }
            match merged.iter_mut().find(|b| b.offset == band.offset) {
                Some(b) => b
                    .values
                    .iter_mut()
                    .zip(&band.values)
                    .for_each(|(x, y)| *x += y),
                None => merged.push(band),
            }
        }
        merged.retain(|b| b.values.iter().any(|v| *v != ZERO));
        merged.sort_by_key(|b| b.offset);
        Ok(Self {
            dim,
            repr: Repr::Banded(merged),
        })
    }

    /// Row-major dense input, stored banded when few diagonals are occupied.
    pub fn from_dense(dim: usize, data: Vec<C64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("cutoff must be at least 1".into()));
        }
        check_dim(dim * dim, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("operator entries"));
        }
        let d = dim as isize;
        let occupied: Vec<isize> = (1 - d..d)
            .filter(|&o| {
                (0..dim).any(|r| {
                    let c = r as isize + o;
                    (0..d).contains(&c) && data[r * dim + c as usize] != ZERO
                })
            })
            .collect();
        if occupied.len() * 4 > dim {
            return Ok(Self {
                dim,
                repr: Repr::Dense(data),
            });
        }
        let bands = occupied
            .into_iter()
            .map(|o| {
                let len = dim - o.unsigned_abs();
                let values = (0..len)
                    .map(|i| {
                        let (r, c) = if o >= 0 {
                            (i, i + o as usize)
                        } else {
                            (i + o.unsigned_abs(), i)
                        };
                        data[r * dim + c]
                    })
                    .collect();
                Band { offset: o, values }
            })
            .collect();
        Self::from_bands(dim, bands)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_banded(&self) -> bool {
        matches!(self.repr, Repr::Banded(_))
    }

    pub fn bands(&self) -> Option<&[Band]> {
        match &self.repr {
            Repr::Banded(b) => Some(b),
            Repr::Dense(_) => None,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        assert!(r < self.dim && c < self.dim, "index out of range");
        match &self.repr {
            Repr::Dense(d) => d[r * self.dim + c],
            Repr::Banded(bands) => {
                let o = c as isize - r as isize;
                bands
                    .iter()
                    .find(|b| b.offset == o)
                    .map_or(ZERO, |b| b.values[r.min(c)])
            }
        }
    }

    /// Nonzero-pattern entries as `(row, col, value)`.
    pub fn entries(&self) -> Vec<(usize, usize, C64)> {
        match &self.repr {
            Repr::Dense(d) => (0..self.dim * self.dim)
                .filter(|&i| d[i] != ZERO)
                .map(|i| (i / self.dim, i % self.dim, d[i]))
                .collect(),
            Repr::Banded(bands) => bands
                .iter()
                .flat_map(|b| {
                    b.values.iter().enumerate().map(move |(i, &v)| {
                        if b.offset >= 0 {
                            (i, i + b.offset as usize, v)
                        } else {
                            (i + b.offset.unsigned_abs(), i, v)
                        }
                    })
                })
                .collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<C64> {
        match &self.repr {
            Repr::Dense(d) => d.clone(),
            Repr::Banded(_) => {
                let mut d = vec![ZERO; self.dim * self.dim];
                for (r, c, v) in self.entries() {
                    d[r * self.dim + c] = v;
                }
                d
            }
        }
    }

    pub fn adjoint(&self) -> Self {
        match &self.repr {
            Repr::Banded(bands) => Self {
                dim: self.dim,
                repr: Repr::Banded(
                    bands
                        .iter()
                        .rev()
                        .map(|b| Band {
                            offset: -b.offset,
                            values: b.values.iter().map(|v| v.conj()).collect(),
                        })
                        .collect(),
                ),
            },
            Repr::Dense(d) => {
                let n = self.dim;
                let mut out = vec![ZERO; n * n];
                for r in 0..n {
                    for c in 0..n {
                        out[c * n + r] = d[r * n + c].conj();
                    }
                }
                Self {
                    dim: n,
                    repr: Repr::Dense(out),
                }
            }
        }
    }

    pub fn scale(&self, s: C64) -> Self {
        let mut out = self.clone();
        match &mut out.repr {
            Repr::Banded(bands) => bands
                .iter_mut()
                .flat_map(|b| b.values.iter_mut())
                .for_each(|v| *v *= s),
            Repr::Dense(d) => d.iter_mut().for_each(|v| *v *= s),
        }
        if s == ZERO {
            return Self::zero(self.dim).expect("nonzero dimension");
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dim(self.dim, other.dim)?;
        match (&self.repr, &other.repr) {
            (Repr::Banded(a), Repr::Banded(b)) => {
                Self::from_bands(self.dim, a.iter().chain(b).cloned().collect())
            }
            _ => {
                let mut d = self.to_dense();
                d.iter_mut()
                    .zip(other.to_dense())
                    .for_each(|(x, y)| *x += y);
                Self::from_dense(self.dim, d)
            }
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(C64::new(-1.0, 0.0)))
    }

    /// Matrix product `self * other`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        check_dim(self.dim, other.dim)?;
        let n = self.dim;
        let mut out = vec![ZERO; n * n];
        let rhs = other.entries();
        let mut by_row: Vec<Vec<(usize, C64)>> = vec![Vec::new(); n];
        for (r, c, v) in rhs {
            by_row[r].push((c, v));
        }
        for (r, k, a) in self.entries() {
            for &(c, b) in &by_row[k] {
                out[r * n + c] += a * b;
            }
        }
        Self::from_dense(n, out)
    }

    pub fn diagonal_values(&self) -> Vec<C64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn off_diagonal_part(&self) -> Self {
        let n = self.dim;
        let mut d = self.to_dense();
        for i in 0..n {
            d[i * n + i] = ZERO;
        }
        Self::from_dense(n, d).expect("finite entries")
    }

    pub fn is_zero(&self) -> bool {
        match &self.repr {
            Repr::Banded(b) => b.is_empty(),
            Repr::Dense(d) => d.iter().all(|v| *v == ZERO),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        match &self.repr {
            Repr::Banded(b) => b.iter().all(|b| b.offset == 0),
            Repr::Dense(_) => false,
        }
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        let n = self.dim;
        let d = self.to_dense();
        (0..n).all(|r| (0..n).all(|c| (d[r * n + c] - d[c * n + r].conj()).norm() <= tol))
    }

    /// `y += s * self * x`.
    #[inline]
    pub fn apply_add(&self, x: &[C64], y: &mut [C64], s: C64) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(y.len(), self.dim);
        match &self.repr {
            Repr::Banded(bands) => {
                for b in bands {
                    let k = b.offset.unsigned_abs();
                    if b.offset >= 0 {
                        for ((yi, xi), v) in y.iter_mut().zip(&x[k..]).zip(&b.values) {
                            *yi += s * v * xi;
                        }
                    } else {
                        for ((yi, xi), v) in y[k..].iter_mut().zip(x).zip(&b.values) {
                            *yi += s * v * xi;
                        }
                    }
                }
            }
            Repr::Dense(d) => {
                for (row, yi) in d.chunks_exact(self.dim).zip(y.iter_mut()) {
                    let acc: C64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                    *yi += s * acc;
                }
            }
        }
    }

    pub fn apply_into(&self, x: &[C64], y: &mut [C64]) {
        y.iter_mut().for_each(|v| *v = ZERO);
        self.apply_add(x, y, ONE);
    }

    /// `y = self x` for `x` vanishing outside `support`. Only the returned
    /// range of `y` is written; `y` vanishes outside it.
    pub fn apply_range_into(
        &self,
        x: &[C64],
        support: std::ops::Range<usize>,
        y: &mut [C64],
    ) -> std::ops::Range<usize> {
        let Repr::Banded(bands) = &self.repr else {
            self.apply_into(x, y);
            return 0..self.dim;
        };
        let (lo, hi) = (support.start, support.end);
        let w = self.bandwidth();
        let out = lo.saturating_sub(w)..(hi + w).min(self.dim);
        y[out.clone()].fill(ZERO);
        for b in bands {
            let k = b.offset.unsigned_abs();
            if b.offset >= 0 {
                for c in lo.max(k)..hi {
                    y[c - k] += b.values[c - k] * x[c];
                }
            } else {
                for c in lo..hi.min(self.dim - k) {
                    y[c + k] += b.values[c] * x[c];
                }
            }
        }
        out
    }

    pub fn apply(&self, psi: &StateVector) -> Result<StateVector> {
        check_dim(self.dim, psi.cutoff())?;
        let mut out = vec![ZERO; self.dim];
        self.apply_into(psi.amplitudes(), &mut out);
        Ok(StateVector { amplitudes: out })
    }

    /// `<x|self|x>` without normalization or dimension checks.
    pub fn sandwich(&self, x: &[C64]) -> C64 {
        match &self.repr {
            Repr::Banded(bands) => {
                let mut acc = ZERO;
                for b in bands {
                    let k = b.offset.unsigned_abs();
                    if b.offset == 0 {
                        for (xi, v) in x.iter().zip(&b.values) {
                            acc += v * xi.norm_sqr();
                        }
                    } else if b.offset > 0 {
                        for ((xr, xc), v) in x.iter().zip(&x[k..]).zip(&b.values) {
                            acc += xr.conj() * v * xc;
                        }
                    } else {
                        for ((xr, xc), v) in x[k..].iter().zip(x).zip(&b.values) {
                            acc += xr.conj() * v * xc;
                        }
                    }
                }
                acc
            }
            Repr::Dense(d) => d
                .chunks_exact(self.dim)
                .zip(x)
                .map(|(row, xr)| xr.conj() * row.iter().zip(x).map(|(a, b)| a * b).sum::<C64>())
                .sum(),
        }
    }

    /// `<x|self|x>` for an `x` that vanishes outside `support`.
    pub fn sandwich_range(&self, x: &[C64], support: std::ops::Range<usize>) -> C64 {
        let (lo, hi) = (support.start, support.end);
        if lo == 0 && hi == self.dim {
            return self.sandwich(x);
        }
        match &self.repr {
            Repr::Banded(bands) => {
                let mut acc = ZERO;
                for b in bands {
                    let k = b.offset.unsigned_abs();
                    if b.offset == 0 {
                        for i in lo..hi {
                            acc += b.values[i] * x[i].norm_sqr();
                        }
                    } else if hi > lo + k {
                        // Both row and column must lie inside the support.
                        for i in lo..hi - k {
                            let (r, c) = if b.offset > 0 { (i, i + k) } else { (i + k, i) };
                            acc += x[r].conj() * b.values[i] * x[c];
                        }
                    }
                }
                acc
            }
            Repr::Dense(_) => self.sandwich(x),
        }
    }

    /// Largest band offset, or `dim - 1` for dense storage.
    pub fn bandwidth(&self) -> usize {
        match &self.repr {
            Repr::Banded(b) => b.iter().map(|b| b.offset.unsigned_abs()).max().unwrap_or(0),
            Repr::Dense(_) => self.dim.saturating_sub(1),
        }
    }

    pub fn expectation(&self, psi: &StateVector) -> Result<C64> {
        check_dim(self.dim, psi.cutoff())?;
        Ok(self.sandwich(psi.amplitudes()))
    }
}

/// `<psi|op|psi>` for a normalized `psi`.
pub fn expectation(op: &Operator, psi: &StateVector) -> Result<C64> {
    op.expectation(psi)
}
