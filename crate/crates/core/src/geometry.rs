//! Coordinate frames and the modular array layout.
//!
//! The array lies in the `xOz` plane with sub-array (SA) 1 at `origin`. SA `k`
//! (1-based) sits at `origin + (-(k_x-1)D, 0, (k_z-1)D)` where
//! `k = k_x + K_x (k_z - 1)`. Sources must lie in front of the array (`y`
//! larger than the anchor's `y`), which keeps every arctangent on its
//! principal branch.

use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `omega^2 + varphi^2 <= 1` for virtual angle pairs.
pub const VIRTUAL_TOL: f64 = 1e-9;

/// Cartesian position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(&self, other: &Position) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Position {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl Add for Position {
    type Output = Position;
    fn add(self, rhs: Position) -> Position {
        Position::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Position {
    type Output = Position;
    fn sub(self, rhs: Position) -> Position {
        Position::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

/// Layout of a modular array: `K_x x K_z` sub-arrays, each an `M_x x M_z` UPA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayLayout {
    #[serde(rename = "K_x")]
    pub k_x: usize,
    #[serde(rename = "K_z")]
    pub k_z: usize,
    #[serde(rename = "M_x")]
    pub m_x: usize,
    #[serde(rename = "M_z")]
    pub m_z: usize,
    /// Sub-array interval `D` in meters.
    #[serde(rename = "D")]
    pub interval: f64,
    /// Antenna spacing `d` inside a sub-array, in meters.
    #[serde(rename = "d")]
    pub spacing: f64,
    /// Position of SA 1.
    pub origin: Position,
}

impl ArrayLayout {
    pub fn validate(&self) -> Result<()> {
        if self.k_x == 0 || self.k_z == 0 {
            return Err(Error::Config("K_x and K_z must be positive".into()));
        }
        if self.m_x == 0 || self.m_z == 0 {
            return Err(Error::Config("M_x and M_z must be positive".into()));
        }
        if !(self.interval > 0.0) || !(self.spacing > 0.0) {
            return Err(Error::Config("D and d must be positive".into()));
        }
        if !self.origin.is_finite() {
            return Err(Error::Config("origin must be finite".into()));
        }
        Ok(())
    }

    /// Number of sub-arrays `K`.
    pub fn num_subarrays(&self) -> usize {
        self.k_x * self.k_z
    }

    /// Antennas per sub-array `M_S`.
    pub fn antennas_per_subarray(&self) -> usize {
        self.m_x * self.m_z
    }

    /// Split a 1-based SA index into 1-based `(k_x, k_z)`.
    pub fn split_index(&self, k: usize) -> Result<(usize, usize)> {
        let len = self.num_subarrays();
        if k == 0 || k > len {
            return Err(Error::IndexOutOfRange { index: k, len });
        }
        Ok(((k - 1) % self.k_x + 1, (k - 1) / self.k_x + 1))
    }

    /// Inverse of [`split_index`](Self::split_index).
    pub fn join_index(&self, k_x: usize, k_z: usize) -> Result<usize> {
        if k_x == 0 || k_x > self.k_x || k_z == 0 || k_z > self.k_z {
            return Err(Error::IndexOutOfRange {
                index: k_x + self.k_x * k_z.saturating_sub(1),
                len: self.num_subarrays(),
            });
        }
        Ok(k_x + self.k_x * (k_z - 1))
    }

    pub fn sa_position(&self, k: usize) -> Result<Position> {
        sa_position(self, k)
    }

    /// Positions of all sub-arrays, index 0 holding SA 1.
    pub fn sa_positions(&self) -> Vec<Position> {
        (1..=self.num_subarrays())
            .map(|k| sa_position(self, k).expect("index in range"))
            .collect()
    }
}

/// Azimuth `theta` and elevation `phi` in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnglePair {
    pub theta: f64,
    pub phi: f64,
}

impl AnglePair {
    pub const fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }

    /// Unit vector `(sin(theta)cos(phi), cos(theta)cos(phi), sin(phi))` pointing from
    /// the anchor to the source.
    pub fn direction(&self) -> Position {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Position::new(st * cp, ct * cp, sp)
    }
}

/// Virtual angles `omega = sin(theta)cos(phi)`, `varphi = -sin(phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualAnglePair {
    pub omega: f64,
    pub varphi: f64,
}

impl VirtualAnglePair {
    pub const fn new(omega: f64, varphi: f64) -> Self {
        Self { omega, varphi }
    }

    /// Whether the pair corresponds to a physical direction.
    pub fn is_realizable(&self) -> bool {
        self.omega * self.omega + self.varphi * self.varphi <= 1.0 + VIRTUAL_TOL
    }
}

pub fn sa_position(layout: &ArrayLayout, k: usize) -> Result<Position> {
    let (kx, kz) = layout.split_index(k)?;
    let offset = Position::new(
        -((kx - 1) as f64) * layout.interval,
        0.0,
        (kz - 1) as f64 * layout.interval,
    );
    Ok(layout.origin + offset)
}

/// Azimuth/elevation of `src` as seen from the anchor `sa`.
pub fn aoa_from_positions(src: &Position, sa: &Position) -> Result<AnglePair> {
    let dx = src.x - sa.x;
    let dy = src.y - sa.y;
    let dz = src.z - sa.z;
    if !(dy > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "source y offset {} is not in front of the array plane",
            dy
        )));
    }
    let theta = (dx / dy).atan();
    let horizontal = dx * theta.sin() + dy * theta.cos();
    let phi = (dz / horizontal).atan();
    Ok(AnglePair::new(theta, phi))
}

pub fn distance(src: &Position, sa: &Position) -> f64 {
    (*src - *sa).norm()
}

pub fn virtual_from_physical(a: AnglePair) -> VirtualAnglePair {
    VirtualAnglePair::new(a.theta.sin() * a.phi.cos(), -a.phi.sin())
}

pub fn physical_from_virtual(v: VirtualAnglePair) -> Result<AnglePair> {
    if !v.omega.is_finite() || !v.varphi.is_finite() || !v.is_realizable() {
        return Err(Error::Domain(format!(
            "virtual pair ({}, {}) is not realizable",
            v.omega, v.varphi
        )));
    }
    let phi = -v.varphi.clamp(-1.0, 1.0).asin();
    let cp = phi.cos();
    let theta = if cp > 0.0 {
        (v.omega / cp).clamp(-1.0, 1.0).asin()
    } else {
        0.0
    };
    Ok(AnglePair::new(theta, phi))
}
