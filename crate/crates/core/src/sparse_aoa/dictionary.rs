use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{axis_response, kron};
use crate::error::{Error, Result};
use crate::geometry::{
    aoa_from_positions, virtual_from_physical, ArrayLayout, Position, VirtualAnglePair,
    VIRTUAL_TOL,
};

/// Sampling domain of the virtual-angle grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridDomain {
    /// `[-1, 1]`, the range of a virtual angle.
    #[default]
    Unit,
    /// `[-pi, pi]`; atoms outside the unit disk are kept but never selected.
    Pi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "delta_omega")]
    pub delta_omega: f64,
    #[serde(rename = "delta_varphi")]
    pub delta_varphi: f64,
    #[serde(default)]
    pub domain: GridDomain,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            delta_omega: 0.01,
            delta_varphi: 0.01,
            domain: GridDomain::Unit,
        }
    }
}

/// Points `lo + n * step` for `n = 0..len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformGrid {
    pub lo: f64,
    pub step: f64,
    pub len: usize,
}

impl UniformGrid {
    pub fn new(half_width: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::Config(format!("grid step {} must be positive", step)));
        }
        let len = (2.0 * half_width / step + 1e-9).floor() as usize + 1;
        if len == 0 {
            return Err(Error::Config("empty angular grid".into()));
        }
        Ok(Self {
            lo: -half_width,
            step,
            len,
        })
    }

    pub fn value(&self, n: usize) -> f64 {
        self.lo + n as f64 * self.step
    }

    /// Index of the grid point closest to `x`, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        let n = ((x - self.lo) / self.step).round();
        n.clamp(0.0, (self.len - 1) as f64) as usize
    }
}

impl GridConfig {
    pub fn grids(&self) -> Result<(UniformGrid, UniformGrid)> {
        let half = match self.domain {
            GridDomain::Unit => 1.0,
            GridDomain::Pi => std::f64::consts::PI,
        };
        Ok((
            UniformGrid::new(half, self.delta_omega)?,
            UniformGrid::new(half, self.delta_varphi)?,
        ))
    }

    /// Maps a virtual pair to the nearest grid point.
    pub fn snap(&self, v: VirtualAnglePair) -> Result<VirtualAnglePair> {
        let (go, gv) = self.grids()?;
        Ok(VirtualAnglePair::new(
            go.value(go.nearest(v.omega)),
            gv.value(gv.nearest(v.varphi)),
        ))
    }
}

/// Angular dictionary for one wavelength: a rectangular window of the full
/// `(omega, varphi)` grid. Column `l` of the window pairs `omega` index
/// `l / J` with `varphi` index `l % J` (`omega` major), `J` the window width
/// along `varphi`. A window covering the whole grid is the full dictionary.
#[derive(Debug, Clone)]
pub struct AngularDictionary {
    omega_grid: UniformGrid,
    varphi_grid: UniformGrid,
    omega_range: Range<usize>,
    varphi_range: Range<usize>,
    lambda: f64,
    m_x: usize,
    m_z: usize,
    omega_factors: Vec<Vec<Complex64>>,
    varphi_factors: Vec<Vec<Complex64>>,
    valid: Vec<bool>,
}

impl AngularDictionary {
    fn window(
        layout: &ArrayLayout,
        lambda: f64,
        omega_grid: UniformGrid,
        varphi_grid: UniformGrid,
        omega_range: Range<usize>,
        varphi_range: Range<usize>,
    ) -> Self {
        let omega_factors: Vec<Vec<Complex64>> = omega_range
            .clone()
            .map(|n| axis_response(layout.m_x, layout.spacing, lambda, omega_grid.value(n)))
            .collect();
        let varphi_factors: Vec<Vec<Complex64>> = varphi_range
            .clone()
            .map(|n| axis_response(layout.m_z, layout.spacing, lambda, varphi_grid.value(n)))
            .collect();
        let mut valid = Vec::with_capacity(omega_range.len() * varphi_range.len());
        for a in omega_range.clone() {
            let w = omega_grid.value(a);
            for b in varphi_range.clone() {
                let v = varphi_grid.value(b);
                valid.push(w * w + v * v <= 1.0 + VIRTUAL_TOL);
            }
        }
        Self {
            omega_grid,
            varphi_grid,
            omega_range,
            varphi_range,
            lambda,
            m_x: layout.m_x,
            m_z: layout.m_z,
            omega_factors,
            varphi_factors,
            valid,
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.omega_range.len() * self.varphi_range.len()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn omega_len(&self) -> usize {
        self.omega_range.len()
    }

    pub fn varphi_len(&self) -> usize {
        self.varphi_range.len()
    }

    pub fn antennas(&self) -> usize {
        self.m_x * self.m_z
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_valid(&self, l: usize) -> bool {
        self.valid[l]
    }

    /// Grid indices `(omega, varphi)` of column `l` in the full grid.
    pub fn grid_indices(&self, l: usize) -> (usize, usize) {
        let j = self.varphi_range.len();
        (self.omega_range.start + l / j, self.varphi_range.start + l % j)
    }

    /// Column index of window column `l` in the full dictionary
    /// (`varphi` index + `J_full * omega` index, 0-based).
    pub fn full_index(&self, l: usize) -> usize {
        let (a, b) = self.grid_indices(l);
        b + self.varphi_grid.len * a
    }

    /// Inverse of [`full_index`](Self::full_index) restricted to this window.
    pub fn local_index(&self, full: usize) -> Option<usize> {
        let a = full / self.varphi_grid.len;
        let b = full % self.varphi_grid.len;
        if self.omega_range.contains(&a) && self.varphi_range.contains(&b) {
            Some((a - self.omega_range.start) * self.varphi_range.len() + (b - self.varphi_range.start))
        } else {
            None
        }
    }

    pub fn virtual_pair(&self, l: usize) -> VirtualAnglePair {
        let (a, b) = self.grid_indices(l);
        VirtualAnglePair::new(self.omega_grid.value(a), self.varphi_grid.value(b))
    }

    pub fn omega_factor(&self, a: usize) -> &[Complex64] {
        &self.omega_factors[a]
    }

    pub fn varphi_factor(&self, b: usize) -> &[Complex64] {
        &self.varphi_factors[b]
    }

    pub fn atom(&self, l: usize) -> DVector<Complex64> {
        let j = self.varphi_range.len();
        kron(&self.omega_factors[l / j], &self.varphi_factors[l % j])
    }

    /// Dense `M_S x atoms` matrix. Only sensible for small windows.
    pub fn atoms(&self) -> DMatrix<Complex64> {
        let cols: Vec<DVector<Complex64>> = (0..self.num_atoms()).map(|l| self.atom(l)).collect();
        DMatrix::from_columns(&cols)
    }

    pub fn full_grid_len(&self) -> (usize, usize) {
        (self.omega_grid.len, self.varphi_grid.len)
    }
}

pub fn build_dictionary(
    grid: &GridConfig,
    layout: &ArrayLayout,
    lambda: f64,
) -> Result<AngularDictionary> {
    let (go, gv) = grid.grids()?;
    Ok(AngularDictionary::window(layout, lambda, go, gv, 0..go.len, 0..gv.len))
}

/// One full dictionary per subcarrier wavelength.
pub fn build_dictionaries(
    grid: &GridConfig,
    layout: &ArrayLayout,
    wavelengths: &[f64],
) -> Result<Vec<AngularDictionary>> {
    wavelengths
        .iter()
        .map(|&l| build_dictionary(grid, layout, l))
        .collect()
}

/// Window of `(2 i_bar + 1) x (2 j_bar + 1)` atoms around the grid point
/// closest to the angles predicted from `coarse` at `sa`, clipped at the grid
/// edges; one dictionary per wavelength.
pub fn reduced_dictionary(
    coarse: &Position,
    sa: &Position,
    grid: &GridConfig,
    layout: &ArrayLayout,
    wavelengths: &[f64],
    i_bar: usize,
    j_bar: usize,
) -> Result<Vec<AngularDictionary>> {
    let reference = virtual_from_physical(aoa_from_positions(coarse, sa)?);
    let (go, gv) = grid.grids()?;
    let ci = go.nearest(reference.omega);
    let cj = gv.nearest(reference.varphi);
    let omega_range = ci.saturating_sub(i_bar)..(ci + i_bar + 1).min(go.len);
    let varphi_range = cj.saturating_sub(j_bar)..(cj + j_bar + 1).min(gv.len);
    let dicts: Vec<AngularDictionary> = wavelengths
        .iter()
        .map(|&l| {
            AngularDictionary::window(layout, l, go, gv, omega_range.clone(), varphi_range.clone())
        })
        .collect();
    if dicts.first().is_some_and(|d| d.num_valid() == 0) {
        return Err(Error::Domain(format!(
            "reduced dictionary around ({:.3}, {:.3}) has no realizable atom",
            reference.omega, reference.varphi
        )));
    }
    Ok(dicts)
}
