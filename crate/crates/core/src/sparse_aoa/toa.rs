use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::channel::WidebandSpec;
use crate::error::{Error, Result};

const SPECTRUM_FLOOR: f64 = 1e-300;

/// Open search interval `(lo, hi)` sampled at `lo + n * step`, `n >= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToaSearch {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl ToaSearch {
    /// `(0, tau_max)`.
    pub fn full(tau_max: f64, step: f64) -> Self {
        Self { lo: 0.0, hi: tau_max, step }
    }

    /// `(center - half, center + half)`, clipped at zero.
    pub fn around(center: f64, half: f64, step: f64) -> Self {
        Self {
            lo: (center - half).max(0.0),
            hi: center + half,
            step,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.hi > self.lo + self.step) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Config(format!(
                "delay search ({}, {}) with step {} is empty",
                self.lo, self.hi, self.step
            )));
        }
        Ok(())
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (1..)
            .map(move |n| self.lo + n as f64 * self.step)
            .take_while(move |&t| t < self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToAEstimate {
    pub tau: f64,
    /// Pseudo-spectrum value at `tau`.
    pub peak: f64,
    pub step: f64,
    /// The maximum sits on the first or last search point.
    pub boundary: bool,
    /// The search interval is longer than one delay period, so the
    /// maximum may be an alias.
    pub ambiguous: bool,
}

/// Delay period of the subcarrier comb, `I / B`.
pub fn delay_period(spec: &WidebandSpec) -> f64 {
    spec.num_subcarriers as f64 / spec.bandwidth
}

/// Noise subspace of the normalized frequency snapshots: the `I - 1`
/// eigenvectors of `H^H H` with the smallest eigenvalues, where
/// `H = b e^T` and `e` carries the phases of `gains`.
pub fn noise_subspace(gains: &[Complex64], steering: &DVector<Complex64>) -> Result<DMatrix<Complex64>> {
    let n = gains.len();
    if n < 2 {
        return Err(Error::Unsupported("delay estimation needs at least two subcarriers".into()));
    }
    if gains.iter().all(|g| g.norm() == 0.0) {
        return Err(Error::NoSignal);
    }
    let e = DVector::from_iterator(
        n,
        gains.iter().map(|g| {
            let m = g.norm();
            if m > 0.0 {
                g / m
            } else {
                Complex64::new(0.0, 0.0)
            }
        }),
    );
    let h = steering * e.transpose();
    let r = h.adjoint() * h;
    let eig = r.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let cols: Vec<DVector<Complex64>> = order[..n - 1]
        .iter()
        .map(|&k| eig.eigenvectors.column(k).into_owned())
        .collect();
    Ok(DMatrix::from_columns(&cols))
}

/// MUSIC pseudo-spectrum `1 / ||U^H e*(tau)||^2`. Frequencies enter as
/// offsets from the carrier; the carrier term is a common phase and cancels.
pub fn music_spectrum(u: &DMatrix<Complex64>, spec: &WidebandSpec, tau: f64) -> f64 {
    let e_conj = DVector::from_fn(spec.num_subcarriers, |i, _| {
        Complex64::from_polar(1.0, 2.0 * PI * spec.offset(i) * tau)
    });
    let den = (u.adjoint() * e_conj).norm_squared();
    1.0 / den.max(SPECTRUM_FLOOR)
}

pub fn music_toa(
    gains: &[Complex64],
    steering: &DVector<Complex64>,
    spec: &WidebandSpec,
    search: &ToaSearch,
) -> Result<ToAEstimate> {
    if spec.num_subcarriers != gains.len() {
        return Err(Error::Config(format!(
            "{} gains for {} subcarriers",
            gains.len(),
            spec.num_subcarriers
        )));
    }
    let u = noise_subspace(gains, steering)?;
    search.validate()?;
    let mut best = (0usize, f64::NEG_INFINITY, search.lo);
    let mut count = 0usize;
    for (n, t) in search.points().enumerate() {
        let p = music_spectrum(&u, spec, t);
        if p > best.1 {
            best = (n, p, t);
        }
        count = n + 1;
    }
    Ok(ToAEstimate {
        tau: best.2,
        peak: best.1,
        step: search.step,
        boundary: best.0 == 0 || best.0 + 1 == count,
        ambiguous: search.hi - search.lo > delay_period(spec),
    })
}
