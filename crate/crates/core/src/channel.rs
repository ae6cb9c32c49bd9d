//! Wideband channel synthesis for the modular array.
//!
//! Per subcarrier `i`, sub-array `k` and UE `p` the channel is the sum of the
//! line-of-sight path and single-bounce paths off point scatterers, each a
//! planar wavefront over the sub-array with its own angle and delay. Paths
//! switched off in the [`VisibilityMask`] are skipped entirely.

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    aoa_from_positions, distance, virtual_from_physical, AnglePair, ArrayLayout, Position,
    VirtualAnglePair,
};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Band plan: `I` tones spread over bandwidth `B` around `f_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidebandSpec {
    #[serde(rename = "f_c")]
    pub f_c: f64,
    #[serde(rename = "B")]
    pub bandwidth: f64,
    #[serde(rename = "I")]
    pub num_subcarriers: usize,
    /// Nominal size of the OFDM grid; carried as metadata.
    #[serde(rename = "N_c")]
    pub n_c: usize,
}

impl WidebandSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_c > 0.0) || !(self.bandwidth > 0.0) || self.num_subcarriers == 0 {
            return Err(Error::Config(
                "wideband: f_c and B must be positive and I >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Offset `f_i - f_c` of tone `i` (0-based).
    pub fn offset(&self, i: usize) -> f64 {
        if self.num_subcarriers == 1 {
            return 0.0;
        }
        let i1 = (i + 1) as f64;
        self.bandwidth / self.num_subcarriers as f64 * (i1 - (self.num_subcarriers as f64 - 1.0) / 2.0)
    }

    pub fn wavelength_center(&self, c: f64) -> f64 {
        c / self.f_c
    }
}

pub fn subcarrier_frequencies(spec: &WidebandSpec) -> Vec<f64> {
    (0..spec.num_subcarriers)
        .map(|i| spec.f_c + spec.offset(i))
        .collect()
}

/// Molecular absorption coefficient `K(f)` in 1/m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Absorption {
    Zero,
    Constant { value: f64 },
    /// Piecewise-linear table of `(frequency Hz, coefficient 1/m)`, held flat
    /// outside its range.
    Table { points: Vec<[f64; 2]> },
}

impl Default for Absorption {
    fn default() -> Self {
        Absorption::Zero
    }
}

impl Absorption {
    pub fn coefficient(&self, f: f64) -> f64 {
        match self {
            Absorption::Zero => 0.0,
            Absorption::Constant { value } => *value,
            Absorption::Table { points } => {
                if points.is_empty() {
                    return 0.0;
                }
                if f <= points[0][0] {
                    return points[0][1];
                }
                for w in points.windows(2) {
                    let (a, b) = (w[0], w[1]);
                    if f <= b[0] {
                        let t = (f - a[0]) / (b[0] - a[0]);
                        return a[1] + t * (b[1] - a[1]);
                    }
                }
                points[points.len() - 1][1]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Absorption::Zero => Ok(()),
            Absorption::Constant { value } if *value >= 0.0 => Ok(()),
            Absorption::Constant { .. } => {
                Err(Error::Config("absorption must be non-negative".into()))
            }
            Absorption::Table { points } => {
                if points.iter().any(|p| !(p[1] >= 0.0)) {
                    return Err(Error::Config("absorption must be non-negative".into()));
                }
                if points.windows(2).any(|w| !(w[1][0] > w[0][0])) {
                    return Err(Error::Config(
                        "absorption table frequencies must increase".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationParams {
    /// Path-loss exponent.
    pub alpha: f64,
    #[serde(default)]
    pub absorption: Absorption,
    /// Propagation speed in m/s.
    #[serde(default = "default_c")]
    pub c: f64,
}

fn default_c() -> f64 {
    SPEED_OF_LIGHT
}

impl PropagationParams {
    pub fn free_space(alpha: f64) -> Self {
        Self {
            alpha,
            absorption: Absorption::Zero,
            c: SPEED_OF_LIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.c > 0.0) {
            return Err(Error::Config("alpha must be >= 0 and c > 0".into()));
        }
        self.absorption.validate()
    }
}

/// A point scatterer with reflection coefficient `|Gamma| e^{j vartheta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: Position,
    pub gamma_mag: f64,
    pub vartheta: f64,
}

/// Per `(SA k, path l, UE p)` indicator; path 0 is the LoS path, `1..=L` the
/// scatterer paths. Indices are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityMask {
    num_sa: usize,
    num_paths: usize,
    num_ue: usize,
    chi: Vec<bool>,
}

impl VisibilityMask {
    pub fn all_visible(num_sa: usize, num_scatterers: usize, num_ue: usize) -> Self {
        Self {
            num_sa,
            num_paths: num_scatterers + 1,
            num_ue,
            chi: vec![true; num_sa * (num_scatterers + 1) * num_ue],
        }
    }

    fn idx(&self, k: usize, l: usize, p: usize) -> usize {
        assert!(k < self.num_sa && l < self.num_paths && p < self.num_ue);
        (k * self.num_paths + l) * self.num_ue + p
    }

    pub fn get(&self, k: usize, l: usize, p: usize) -> bool {
        self.chi[self.idx(k, l, p)]
    }

    pub fn set(&mut self, k: usize, l: usize, p: usize, visible: bool) {
        let i = self.idx(k, l, p);
        self.chi[i] = visible;
    }

    pub fn num_sa(&self) -> usize {
        self.num_sa
    }

    pub fn num_scatterers(&self) -> usize {
        self.num_paths - 1
    }

    pub fn num_ue(&self) -> usize {
        self.num_ue
    }

    /// Sub-arrays with a LoS path to UE `p`.
    pub fn los_visible(&self, p: usize) -> Vec<usize> {
        (0..self.num_sa).filter(|&k| self.get(k, 0, p)).collect()
    }

    /// Every UE must see at least one sub-array in LoS.
    pub fn validate(&self) -> Result<()> {
        for p in 0..self.num_ue {
            if self.los_visible(p).is_empty() {
                return Err(Error::Config(format!(
                    "UE {} has no sub-array with a LoS path",
                    p + 1
                )));
            }
        }
        Ok(())
    }
}

pub fn los_pathloss(params: &PropagationParams, f: f64, dist: f64) -> Result<f64> {
    if !(dist > 0.0) {
        return Err(Error::Domain(format!("path length {} must be positive", dist)));
    }
    let spreading = (params.c / (4.0 * PI * f * dist)).powf(params.alpha / 2.0);
    Ok(spreading * (-0.5 * params.absorption.coefficient(f) * dist).exp())
}

pub fn nlos_pathloss(
    params: &PropagationParams,
    scat: &Scatterer,
    f: f64,
    d1: f64,
    d2: f64,
) -> Result<Complex64> {
    let g = los_pathloss(params, f, d1)? * los_pathloss(params, f, d2)?;
    Ok(Complex64::from_polar(scat.gamma_mag * g, scat.vartheta))
}

/// Response of a `G`-element axis: entry `g` is `exp(-j 2pi/lambda g d w)`.
pub fn axis_response(g: usize, spacing: f64, lambda: f64, w: f64) -> Vec<Complex64> {
    let k = 2.0 * PI / lambda * spacing * w;
    (0..g)
        .map(|n| Complex64::from_polar(1.0, -k * n as f64))
        .collect()
}

/// Kronecker product `a (x) b`, `a` major.
pub fn kron(a: &[Complex64], b: &[Complex64]) -> DVector<Complex64> {
    DVector::from_iterator(
        a.len() * b.len(),
        a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)),
    )
}

/// Sub-array steering vector `c_{M_x}(omega) (x) c_{M_z}(varphi)`.
pub fn steering_vector(
    m_x: usize,
    m_z: usize,
    spacing: f64,
    lambda: f64,
    v: VirtualAnglePair,
) -> Result<DVector<Complex64>> {
    if !v.is_realizable() {
        return Err(Error::Domain(format!(
            "virtual pair ({}, {}) is not realizable",
            v.omega, v.varphi
        )));
    }
    Ok(kron(
        &axis_response(m_x, spacing, lambda, v.omega),
        &axis_response(m_z, spacing, lambda, v.varphi),
    ))
}

/// Ground truth of one propagation path at one sub-array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathTruth {
    pub angles: AnglePair,
    pub virtual_angles: VirtualAnglePair,
    /// Virtual angles actually used in the steering vector (differs from
    /// `virtual_angles` only when LoS angles are snapped to a grid).
    pub steering_angles: VirtualAnglePair,
    /// Total path length in meters.
    pub length: f64,
    pub delay: f64,
    pub visible: bool,
}

/// Channel vectors per `(subcarrier i, SA k, UE p)` plus ground truth.
#[derive(Debug, Clone)]
pub struct ChannelTensor {
    num_sub: usize,
    num_sa: usize,
    num_ue: usize,
    antennas: usize,
    h: Vec<DVector<Complex64>>,
    los: Vec<PathTruth>,
    nlos: Vec<Vec<PathTruth>>,
    los_gain: Vec<Complex64>,
    frequencies: Vec<f64>,
}

impl ChannelTensor {
    fn idx(&self, i: usize, k: usize, p: usize) -> usize {
        (i * self.num_sa + k) * self.num_ue + p
    }

    pub fn h(&self, i: usize, k: usize, p: usize) -> &DVector<Complex64> {
        &self.h[self.idx(i, k, p)]
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_sub
    }

    pub fn num_subarrays(&self) -> usize {
        self.num_sa
    }

    pub fn num_ues(&self) -> usize {
        self.num_ue
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// LoS ground truth between SA `k` and UE `p`.
    pub fn los_truth(&self, k: usize, p: usize) -> &PathTruth {
        &self.los[k * self.num_ue + p]
    }

    /// Scatterer paths (index `l - 1`) between SA `k` and UE `p`.
    pub fn nlos_truth(&self, k: usize, p: usize) -> &[PathTruth] {
        &self.nlos[k * self.num_ue + p]
    }

    /// Complex LoS coefficient `g_LoS(f_i, d) e^{-j 2pi f_i tau}` (zero when masked).
    pub fn los_coefficient(&self, i: usize, k: usize, p: usize) -> Complex64 {
        self.los_gain[self.idx(i, k, p)]
    }
}

/// Optional map applied to the LoS virtual angles before building steering
/// vectors, e.g. snapping to a dictionary grid for on-grid experiments.
pub type AngleMap<'a> = &'a dyn Fn(VirtualAnglePair) -> VirtualAnglePair;

pub fn synthesize_channel(
    layout: &ArrayLayout,
    spec: &WidebandSpec,
    params: &PropagationParams,
    ues: &[Position],
    scatterers: &[Scatterer],
    mask: &VisibilityMask,
    los_map: Option<AngleMap<'_>>,
) -> Result<ChannelTensor> {
    let num_sa = layout.num_subarrays();
    if mask.num_sa() != num_sa || mask.num_ue() != ues.len() || mask.num_scatterers() != scatterers.len() {
        return Err(Error::Config("visibility mask dimensions do not match the scene".into()));
    }
    let freqs = subcarrier_frequencies(spec);
    let sa_pos = layout.sa_positions();
    let antennas = layout.antennas_per_subarray();

    let mut los = Vec::with_capacity(num_sa * ues.len());
    let mut nlos = Vec::with_capacity(num_sa * ues.len());
    for (k, sa) in sa_pos.iter().enumerate() {
        for (p, ue) in ues.iter().enumerate() {
            let angles = aoa_from_positions(ue, sa)?;
            let v = virtual_from_physical(angles);
            let len = distance(ue, sa);
            los.push(PathTruth {
                angles,
                virtual_angles: v,
                steering_angles: los_map.map_or(v, |f| f(v)),
                length: len,
                delay: len / params.c,
                visible: mask.get(k, 0, p),
            });
            let mut paths = Vec::with_capacity(scatterers.len());
            for (l, sc) in scatterers.iter().enumerate() {
                let angles = aoa_from_positions(&sc.position, sa)?;
                let v = virtual_from_physical(angles);
                let len = distance(ue, &sc.position) + distance(&sc.position, sa);
                paths.push(PathTruth {
                    angles,
                    virtual_angles: v,
                    steering_angles: v,
                    length: len,
                    delay: len / params.c,
                    visible: mask.get(k, l + 1, p),
                });
            }
            nlos.push(paths);
        }
    }

    let mut h = Vec::with_capacity(freqs.len() * num_sa * ues.len());
    let mut los_gain = Vec::with_capacity(h.capacity());
    for &f in &freqs {
        let lambda = params.c / f;
        for k in 0..num_sa {
            for p in 0..ues.len() {
                let mut acc = DVector::<Complex64>::zeros(antennas);
                let t = &los[k * ues.len() + p];
                let mut g_los = Complex64::new(0.0, 0.0);
                if t.visible {
                    g_los = Complex64::from_polar(
                        los_pathloss(params, f, t.length)?,
                        -2.0 * PI * f * t.delay,
                    );
                    let b = steering_vector(layout.m_x, layout.m_z, layout.spacing, lambda, t.steering_angles)?;
                    acc += b * g_los;
                }
                for (l, t) in nlos[k * ues.len() + p].iter().enumerate() {
                    if !t.visible {
                        continue;
                    }
                    let sc = &scatterers[l];
                    let d1 = distance(&ues[p], &sc.position);
                    let d2 = distance(&sc.position, &sa_pos[k]);
                    let g = nlos_pathloss(params, sc, f, d1, d2)?
                        * Complex64::from_polar(1.0, -2.0 * PI * f * t.delay);
                    let b = steering_vector(layout.m_x, layout.m_z, layout.spacing, lambda, t.steering_angles)?;
                    acc += b * g;
                }
                h.push(acc);
                los_gain.push(g_los);
            }
        }
    }

    Ok(ChannelTensor {
        num_sub: freqs.len(),
        num_sa,
        num_ue: ues.len(),
        antennas,
        h,
        los,
        nlos,
        los_gain,
        frequencies: freqs,
    })
}
