//! Reference scheme: one collocated fully digital array with 2-D DFT angle
//! estimation and MUSIC delay estimation.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::channel::{steering_vector, ChannelTensor};
use crate::error::{Error, Result};
use crate::geometry::{physical_from_virtual, ArrayLayout, Position, VirtualAnglePair};
use crate::positioning::{PositionEstimate, Stage};
use crate::sparse_aoa::{AngleEstimate, ToAEstimate};
use crate::training::complex_gaussian;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollocatedConfig {
    #[serde(rename = "M_x")]
    pub m_x: usize,
    #[serde(rename = "M_z")]
    pub m_z: usize,
    #[serde(rename = "G_x")]
    pub g_x: usize,
    #[serde(rename = "G_z")]
    pub g_z: usize,
}

impl Default for CollocatedConfig {
    fn default() -> Self {
        Self {
            m_x: 25,
            m_z: 25,
            g_x: 512,
            g_z: 512,
        }
    }
}

impl CollocatedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_x == 0 || self.m_z == 0 {
            return Err(Error::Config("collocated array needs at least one antenna per axis".into()));
        }
        if self.g_x < self.m_x || self.g_z < self.m_z {
            return Err(Error::Config("DFT grid smaller than the array".into()));
        }
        Ok(())
    }

    /// Single-tile layout of the collocated array at `origin`.
    pub fn layout(&self, origin: Position, spacing: f64) -> ArrayLayout {
        ArrayLayout {
            k_x: 1,
            k_z: 1,
            m_x: self.m_x,
            m_z: self.m_z,
            interval: 1.0,
            spacing,
            origin,
        }
    }
}

/// Per-subcarrier snapshot of the fully digital array after pilot
/// correlation: `p_t h[i]` plus white noise of variance `p_t sigma^2`.
pub fn observe_collocated<R: Rng + ?Sized>(
    channel: &ChannelTensor,
    ue: usize,
    p_t: f64,
    noise_var: f64,
    rng: &mut R,
) -> Vec<DVector<Complex64>> {
    (0..channel.num_subcarriers())
        .map(|i| {
            let h = channel.h(i, 0, ue);
            DVector::from_fn(h.len(), |m, _| {
                h[m] * p_t + complex_gaussian(rng, p_t * noise_var)
            })
        })
        .collect()
}

/// Signed normalized frequency of DFT bin `k` out of `g`, in `[-0.5, 0.5)`.
fn bin_frequency(k: usize, g: usize) -> f64 {
    let u = k as f64 / g as f64;
    if u >= 0.5 {
        u - 1.0
    } else {
        u
    }
}

/// Magnitude of the zero-padded 2-D DFT, row-major in `(k_x, k_z)`.
pub fn dft_spectrum(x: &DVector<Complex64>, cfg: &CollocatedConfig) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fz = planner.plan_fft_forward(cfg.g_z);
    let fx = planner.plan_fft_forward(cfg.g_x);
    let mut grid = vec![Complex64::new(0.0, 0.0); cfg.g_x * cfg.g_z];
    for gx in 0..cfg.m_x {
        let row = &mut grid[gx * cfg.g_z..(gx + 1) * cfg.g_z];
        for gz in 0..cfg.m_z {
            row[gz] = x[gx * cfg.m_z + gz];
        }
        fz.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); cfg.g_x];
    for kz in 0..cfg.g_z {
        for kx in 0..cfg.g_x {
            col[kx] = grid[kx * cfg.g_z + kz];
        }
        fx.process(&mut col);
        for kx in 0..cfg.g_x {
            grid[kx * cfg.g_z + kz] = col[kx];
        }
    }
    grid.iter().map(|c| c.norm()).collect()
}

/// Virtual angles of bin `(kx, kz)` at wavelength `lambda`.
pub fn bin_to_virtual(kx: usize, kz: usize, cfg: &CollocatedConfig, spacing: f64, lambda: f64) -> VirtualAnglePair {
    let s = lambda / spacing;
    VirtualAnglePair::new(-s * bin_frequency(kx, cfg.g_x), -s * bin_frequency(kz, cfg.g_z))
}

/// Peak of the physically realizable part of the spectrum, per subcarrier,
/// averaged over subcarriers in the virtual domain.
pub fn dft_aoa(
    obs: &[DVector<Complex64>],
    cfg: &CollocatedConfig,
    spacing: f64,
    wavelengths: &[f64],
) -> Result<AngleEstimate> {
    cfg.validate()?;
    if obs.is_empty() || obs.len() != wavelengths.len() {
        return Err(Error::Config("one snapshot per subcarrier expected".into()));
    }
    let mut sum = VirtualAnglePair::new(0.0, 0.0);
    let mut score = 0.0;
    let mut first_bin = 0;
    for (i, (x, &lambda)) in obs.iter().zip(wavelengths).enumerate() {
        if x.len() != cfg.m_x * cfg.m_z {
            return Err(Error::Config("snapshot length does not match the array".into()));
        }
        let spec = dft_spectrum(x, cfg);
        let mut best: Option<(usize, f64)> = None;
        let mut min = f64::INFINITY;
        for (b, &m) in spec.iter().enumerate() {
            let v = bin_to_virtual(b / cfg.g_z, b % cfg.g_z, cfg, spacing, lambda);
            if !v.is_realizable() {
                continue;
            }
            min = min.min(m);
            if best.is_none_or(|(_, bm)| m > bm) {
                best = Some((b, m));
            }
        }
        let (b, m) = best.ok_or(Error::NoSignal)?;
        if !(m > min) {
            return Err(Error::NoSignal);
        }
        if i == 0 {
            first_bin = b;
        }
        let v = bin_to_virtual(b / cfg.g_z, b % cfg.g_z, cfg, spacing, lambda);
        sum.omega += v.omega;
        sum.varphi += v.varphi;
        score += m;
    }
    let n = obs.len() as f64;
    let mut v = VirtualAnglePair::new(sum.omega / n, sum.varphi / n);
    let r = v.omega.hypot(v.varphi);
    if r > 1.0 {
        v = VirtualAnglePair::new(v.omega / r, v.varphi / r);
    }
    Ok(AngleEstimate {
        sa: 0,
        ue: 0,
        virtual_angles: v,
        angles: physical_from_virtual(v)?,
        grid_index: first_bin,
        local_index: first_bin,
        gains: Vec::new(),
        score,
    })
}

/// LoS gain per subcarrier by projection onto the estimated steering vector,
/// with the pilot power removed.
pub fn projected_gains(
    obs: &[DVector<Complex64>],
    aoa: &AngleEstimate,
    cfg: &CollocatedConfig,
    spacing: f64,
    wavelengths: &[f64],
    p_t: f64,
) -> Result<Vec<Complex64>> {
    obs.iter()
        .zip(wavelengths)
        .map(|(x, &lambda)| {
            let b = steering_vector(cfg.m_x, cfg.m_z, spacing, lambda, aoa.virtual_angles)?;
            Ok(b.dotc(x) / (b.norm_squared() * p_t))
        })
        .collect()
}

/// Position along the estimated bearing at the estimated range.
pub fn dft_music_position(
    aoa: &AngleEstimate,
    toa: &ToAEstimate,
    sa_ref: &Position,
    c: f64,
) -> PositionEstimate {
    let position = *sa_ref + aoa.angles.direction().scale(c * toa.tau);
    PositionEstimate {
        position,
        stage: Stage::Baseline,
        iterations: 0,
        converged: !toa.boundary && position.is_finite(),
        condition: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::SPEED_OF_LIGHT;
    use crate::geometry::{aoa_from_positions, virtual_from_physical, AnglePair};

    const LAMBDA: f64 = 1e-3;
    const SPACING: f64 = 2.5e-4;

    fn small() -> CollocatedConfig {
        CollocatedConfig { m_x: 8, m_z: 8, g_x: 64, g_z: 64 }
    }

    fn snapshot(cfg: &CollocatedConfig, v: VirtualAnglePair) -> DVector<Complex64> {
        steering_vector(cfg.m_x, cfg.m_z, SPACING, LAMBDA, v).unwrap()
    }

    #[test]
    fn bin_exact_angle_is_recovered() {
        let cfg = small();
        for &(kx, kz) in &[(0usize, 0usize), (3, 60), (10, 5), (58, 62)] {
            let v = bin_to_virtual(kx, kz, &cfg, SPACING, LAMBDA);
            if !v.is_realizable() {
                continue;
            }
            let est = dft_aoa(&[snapshot(&cfg, v)], &cfg, SPACING, &[LAMBDA]).unwrap();
            assert!((est.virtual_angles.omega - v.omega).abs() < 1e-12);
            assert!((est.virtual_angles.varphi - v.varphi).abs() < 1e-12);
            assert_eq!(est.grid_index, kx * cfg.g_z + kz);
        }
    }

    #[test]
    fn boresight_peaks_at_zero_bin() {
        let cfg = small();
        let est = dft_aoa(&[snapshot(&cfg, VirtualAnglePair::new(0.0, 0.0))], &cfg, SPACING, &[LAMBDA]).unwrap();
        assert_eq!(est.grid_index, 0);
        assert_eq!(est.angles, AnglePair::new(0.0, 0.0));
    }

    #[test]
    fn peak_error_within_bin_width() {
        for g in [32usize, 64, 256] {
            let cfg = CollocatedConfig { m_x: 8, m_z: 8, g_x: g, g_z: g };
            let v = VirtualAnglePair::new(0.3137, -0.2211);
            let est = dft_aoa(&[snapshot(&cfg, v)], &cfg, SPACING, &[LAMBDA]).unwrap();
            // bin width in omega is (lambda / d) / G
            let bound = 2.0 / g as f64 * LAMBDA / SPACING;
            assert!((est.virtual_angles.omega - v.omega).abs() <= bound / 2.0 + 1e-12);
        }
    }

    #[test]
    fn zero_snapshot_is_no_signal() {
        let cfg = small();
        let err = dft_aoa(&[DVector::zeros(64)], &cfg, SPACING, &[LAMBDA]);
        assert_eq!(err, Err(Error::NoSignal));
        assert!(CollocatedConfig { g_x: 4, ..small() }.validate().is_err());
    }

    #[test]
    fn projected_gain_recovers_coefficient() {
        let cfg = small();
        let v = bin_to_virtual(3, 60, &cfg, SPACING, LAMBDA);
        let g = Complex64::new(1e-5, -2e-5);
        let x = snapshot(&cfg, v) * (g * 3.0);
        let est = dft_aoa(&[x.clone()], &cfg, SPACING, &[LAMBDA]).unwrap();
        let gains = projected_gains(&[x], &est, &cfg, SPACING, &[LAMBDA], 3.0).unwrap();
        assert!((gains[0] - g).norm() < 1e-15);
    }

    fn estimate_for(angles: AnglePair) -> AngleEstimate {
        AngleEstimate {
            sa: 0,
            ue: 0,
            virtual_angles: virtual_from_physical(angles),
            angles,
            grid_index: 0,
            local_index: 0,
            gains: vec![],
            score: 1.0,
        }
    }

    fn toa(tau: f64) -> ToAEstimate {
        ToAEstimate { tau, peak: 1.0, step: 1e-12, boundary: false, ambiguous: false }
    }

    #[test]
    fn position_from_exact_angles_and_delay() {
        let ue = Position::new(-3.0, 3.0, 1.5);
        let sa = Position::new(0.5, 0.0, -0.5);
        let a = estimate_for(aoa_from_positions(&ue, &sa).unwrap());
        let tau = (ue - sa).norm() / SPEED_OF_LIGHT;
        let est = dft_music_position(&a, &toa(tau), &sa, SPEED_OF_LIGHT);
        assert!((est.position - ue).norm() < 1e-12);
        assert_eq!(est.stage, Stage::Baseline);
        assert!(est.converged);
        let twice = dft_music_position(&a, &toa(2.0 * tau), &sa, SPEED_OF_LIGHT);
        assert!(((twice.position - sa) - (ue - sa).scale(2.0)).norm() < 1e-12);
        let flat = dft_music_position(&estimate_for(AnglePair::new(0.4, 0.0)), &toa(tau), &sa, SPEED_OF_LIGHT);
        assert_eq!(flat.position.z, sa.z);
        let mut low = toa(tau);
        low.boundary = true;
        assert!(!dft_music_position(&a, &low, &sa, SPEED_OF_LIGHT).converged);
    }
}
