//! Pseudo-linear bearing equations and their iteratively reweighted
//! least-squares solution.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnglePair, Position};
use crate::sparse_aoa::AngleEstimate;

/// Normal matrices with a larger condition number are rejected.
pub const CONDITION_LIMIT: f64 = 1e12;
const COS_PHI_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
    Baseline,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Coarse, Stage::Fine, Stage::Baseline];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
            Stage::Baseline => "baseline",
        }
    }
}

/// One sub-array's angle measurement with its error variances (rad²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bearing {
    pub anchor: Position,
    pub angles: AnglePair,
    pub var_theta: f64,
    pub var_phi: f64,
}

/// Azimuth rows first, then elevation rows, one pair per bearing.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLinearSystem {
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub bearings: Vec<Bearing>,
}

fn rows(a: AnglePair) -> (Vector3<f64>, Vector3<f64>) {
    let (st, ct) = a.theta.sin_cos();
    let (sp, cp) = a.phi.sin_cos();
    (
        Vector3::new(-ct, st, 0.0),
        Vector3::new(st * sp, ct * sp, -cp),
    )
}

impl PseudoLinearSystem {
    pub fn new(bearings: Vec<Bearing>) -> Result<Self> {
        let mut distinct: Vec<Position> = Vec::new();
        for b in &bearings {
            if !distinct.contains(&b.anchor) {
                distinct.push(b.anchor);
            }
        }
        if distinct.len() < 2 {
            return Err(Error::InsufficientAnchors {
                required: 2,
                provided: distinct.len(),
            });
        }
        let k = bearings.len();
        let mut g = DMatrix::zeros(2 * k, 3);
        let mut h = DVector::zeros(2 * k);
        for (r, b) in bearings.iter().enumerate() {
            let (gt, gp) = rows(b.angles);
            let q = Vector3::from(b.anchor.to_array());
            g.set_row(r, &gt.transpose());
            g.set_row(k + r, &gp.transpose());
            h[r] = gt.dot(&q);
            h[k + r] = gp.dot(&q);
        }
        Ok(Self { g, h, bearings })
    }

    pub fn num_bearings(&self) -> usize {
        self.bearings.len()
    }

    pub fn residual(&self, q: &Position) -> DVector<f64> {
        &self.g * Vector3::from(q.to_array()) - &self.h
    }

    /// Diagonal of `(D R D)^{-1}` evaluated at `q`.
    pub fn weights_at(&self, q: &Position) -> DVector<f64> {
        let k = self.num_bearings();
        let mut w = DVector::zeros(2 * k);
        for (r, b) in self.bearings.iter().enumerate() {
            let d = (*q - b.anchor).norm();
            let d_theta = d * b.angles.phi.cos().abs().max(COS_PHI_FLOOR);
            w[r] = 1.0 / (d_theta * d_theta * b.var_theta);
            w[k + r] = 1.0 / (d * d * b.var_phi);
        }
        w
    }

    /// Weighted least-squares solution for a fixed diagonal weight, with the
    /// condition number of the normal matrix.
    pub fn solve_weighted(&self, w: &DVector<f64>) -> Result<(Position, f64)> {
        let gw = DMatrix::from_fn(self.g.nrows(), 3, |r, c| self.g[(r, c)] * w[r]);
        let normal: Matrix3<f64> = (gw.transpose() * &self.g).fixed_view::<3, 3>(0, 0).into_owned();
        let rhs: Vector3<f64> = (gw.transpose() * &self.h).fixed_rows::<3>(0).into_owned();
        let sv = normal.singular_values();
        let condition = sv.max() / sv.min();
        if !condition.is_finite() || condition > CONDITION_LIMIT {
            return Err(Error::RankDeficient { condition });
        }
        let q = normal
            .lu()
            .solve(&rhs)
            .ok_or(Error::RankDeficient { condition })?;
        let p = Position::new(q[0], q[1], q[2]);
        if !p.is_finite() {
            return Err(Error::Numerical("non-finite position".into()));
        }
        Ok((p, condition))
    }
}

/// Angle error variances per bearing; identical across sub-arrays by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleVariance {
    pub theta: f64,
    pub phi: f64,
}

impl AngleVariance {
    /// Variance of a uniform quantization error over a grid of step `g`.
    pub fn from_grid_step(g: f64) -> Self {
        let v = g * g / 12.0;
        Self { theta: v, phi: v }
    }
}

pub fn build_system(
    estimates: &[AngleEstimate],
    sa_positions: &[Position],
    variance: AngleVariance,
) -> Result<PseudoLinearSystem> {
    let bearings = estimates
        .iter()
        .map(|e| {
            let anchor = *sa_positions.get(e.sa).ok_or(Error::IndexOutOfRange {
                index: e.sa,
                len: sa_positions.len(),
            })?;
            Ok(Bearing {
                anchor,
                angles: e.angles,
                var_theta: variance.theta,
                var_phi: variance.phi,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PseudoLinearSystem::new(bearings)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WlsOptions {
    pub max_iter: usize,
    /// Stop once successive estimates move less than this (m).
    pub tol: f64,
}

impl Default for WlsOptions {
    fn default() -> Self {
        Self {
            max_iter: 20,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionEstimate {
    pub position: Position,
    pub stage: Stage,
    pub iterations: usize,
    pub converged: bool,
    /// Condition number of the last normal matrix.
    pub condition: f64,
}

pub fn wls_solve(sys: &PseudoLinearSystem, opts: &WlsOptions, stage: Stage) -> Result<PositionEstimate> {
    let mut w = DVector::from_element(sys.g.nrows(), 1.0);
    let (mut q, mut condition) = sys.solve_weighted(&w)?;
    let mut iterations = 1;
    let mut converged = false;
    while iterations < opts.max_iter.max(1) {
        w = sys.weights_at(&q);
        if w.iter().any(|x| !x.is_finite()) {
            // estimate sits on an anchor; the unweighted fix is the best available
            break;
        }
        let (next, c) = sys.solve_weighted(&w)?;
        iterations += 1;
        condition = c;
        let step = (next - q).norm();
        q = next;
        if step < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(PositionEstimate {
        position: q,
        stage,
        iterations,
        converged,
        condition,
    })
}

/// Stage 2: bearings from the typical sub-arrays.
pub fn coarse_position(
    typical: &[AngleEstimate],
    sa_positions: &[Position],
    variance: AngleVariance,
    opts: &WlsOptions,
) -> Result<PositionEstimate> {
    let sys = build_system(typical, sa_positions, variance)?;
    wls_solve(&sys, opts, Stage::Coarse)
}

/// Stage 3: bearings from every visible sub-array.
pub fn fine_position(
    visible: &[AngleEstimate],
    sa_positions: &[Position],
    variance: AngleVariance,
    opts: &WlsOptions,
) -> Result<PositionEstimate> {
    let sys = build_system(visible, sa_positions, variance)?;
    wls_solve(&sys, opts, Stage::Fine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::aoa_from_positions;
    use proptest::prelude::*;

    fn bearing(ue: Position, anchor: Position) -> Bearing {
        Bearing {
            anchor,
            angles: aoa_from_positions(&ue, &anchor).unwrap(),
            var_theta: 1e-6,
            var_phi: 1e-6,
        }
    }

    #[test]
    fn row_examples() {
        let (gt, gp) = rows(AnglePair::new(0.0, 0.0));
        assert_eq!(gt, Vector3::new(-1.0, 0.0, 0.0));
        assert_eq!(gp, Vector3::new(0.0, 0.0, -1.0));
        let ue = Position::new(-3.0, 3.0, 1.5);
        let sys = PseudoLinearSystem::new(vec![
            bearing(ue, Position::default()),
            bearing(ue, Position::new(-1.0, 0.0, 1.0)),
        ])
        .unwrap();
        assert_eq!(sys.h[0], 0.0);
        assert_eq!(sys.h[2], 0.0);
        assert!(sys.residual(&ue).amax() < 1e-12);
    }

    #[test]
    fn recovers_known_ue() {
        let ue = Position::new(-3.0, 3.0, 1.5);
        let sys = PseudoLinearSystem::new(vec![
            bearing(ue, Position::default()),
            bearing(ue, Position::new(-1.0, 0.0, 1.0)),
        ])
        .unwrap();
        let est = wls_solve(&sys, &WlsOptions::default(), Stage::Coarse).unwrap();
        assert!((est.position - ue).norm() < 1e-9);
        assert!(est.converged);
        assert!(est.iterations <= 2);
        assert_eq!(est.stage, Stage::Coarse);
    }

    #[test]
    fn anchors_must_be_distinct() {
        let ue = Position::new(-3.0, 3.0, 1.5);
        let err = PseudoLinearSystem::new(vec![
            bearing(ue, Position::default()),
            bearing(ue, Position::default()),
        ]);
        assert_eq!(err, Err(Error::InsufficientAnchors { required: 2, provided: 1 }));
        assert!(PseudoLinearSystem::new(vec![]).is_err());
    }

    #[test]
    fn collinear_anchors_are_rank_deficient() {
        // bearings along the x axis: every equation constrains only y and z
        let angle = AnglePair::new(std::f64::consts::FRAC_PI_2, 0.0);
        let sys = PseudoLinearSystem::new(vec![
            Bearing { anchor: Position::new(0.0, 0.0, 0.0), angles: angle, var_theta: 1.0, var_phi: 1.0 },
            Bearing { anchor: Position::new(1.0, 0.0, 0.0), angles: angle, var_theta: 1.0, var_phi: 1.0 },
            Bearing { anchor: Position::new(2.0, 0.0, 0.0), angles: angle, var_theta: 1.0, var_phi: 1.0 },
        ])
        .unwrap();
        assert!(matches!(
            wls_solve(&sys, &WlsOptions::default(), Stage::Fine),
            Err(Error::RankDeficient { .. })
        ));
    }

    fn noisy_system(ue: Position, anchors: &[Position], noise: &[(f64, f64)], var: &[f64]) -> PseudoLinearSystem {
        PseudoLinearSystem::new(
            anchors
                .iter()
                .zip(noise)
                .zip(var)
                .map(|((&a, &(dt, dp)), &v)| {
                    let mut b = bearing(ue, a);
                    b.angles.theta += dt;
                    b.angles.phi += dp;
                    b.var_theta = v;
                    b.var_phi = v;
                    b
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn inflated_variance_approaches_solution_without_that_anchor() {
        let ue = Position::new(-3.0, 3.0, 1.5);
        let anchors = [
            Position::new(0.0, 0.0, 0.0),
            Position::new(-1.0, 0.0, 1.0),
            Position::new(-2.0, 0.0, 0.0),
            Position::new(-4.0, 0.0, 2.0),
        ];
        let noise = [(0.01, -0.004), (-0.006, 0.008), (0.003, 0.002), (0.05, -0.04)];
        let opts = WlsOptions::default();
        let without = wls_solve(
            &noisy_system(ue, &anchors[..3], &noise[..3], &[1e-4; 3]),
            &opts,
            Stage::Fine,
        )
        .unwrap()
        .position;
        let mut last = f64::INFINITY;
        for inflate in [1e2, 1e4, 1e6] {
            let sys = noisy_system(ue, &anchors, &noise, &[1e-4, 1e-4, 1e-4, 1e-4 * inflate]);
            let q = wls_solve(&sys, &opts, Stage::Fine).unwrap().position;
            let gap = (q - without).norm();
            assert!(gap < last, "gap {gap} did not shrink below {last}");
            last = gap;
        }
        assert!(last < 1e-4);
    }

    #[test]
    fn typical_only_fine_equals_coarse() {
        let ue = Position::new(-5.0, 5.0, 2.0);
        let sas = [Position::new(0.0, 0.0, 0.0), Position::new(-1.0, 0.0, 0.0), Position::new(0.0, 0.0, 1.0)];
        let est: Vec<AngleEstimate> = (0..3)
            .map(|k| AngleEstimate {
                sa: k,
                ue: 0,
                virtual_angles: crate::geometry::VirtualAnglePair::new(0.0, 0.0),
                angles: aoa_from_positions(&ue, &sas[k]).unwrap(),
                grid_index: 0,
                local_index: 0,
                gains: vec![],
                score: 1.0,
            })
            .collect();
        let v = AngleVariance::from_grid_step(0.01);
        let c = coarse_position(&est, &sas, v, &WlsOptions::default()).unwrap();
        let f = fine_position(&est, &sas, v, &WlsOptions::default()).unwrap();
        assert_eq!(c.position, f.position);
        assert_eq!(f.stage, Stage::Fine);
        assert!((c.position - ue).norm() < 1e-9);
        let mut bad = est.clone();
        bad[0].sa = 7;
        assert!(matches!(build_system(&bad, &sas, v), Err(Error::IndexOutOfRange { .. })));
    }

    fn coord() -> impl Strategy<Value = f64> {
        -4.0..4.0f64
    }

    proptest! {
        #[test]
        fn consistent_bearings_are_exact(
            ux in coord(), uy in 2.0..8.0f64, uz in coord(),
            anchors in prop::collection::vec((coord(), coord()), 2..6),
        ) {
            let ue = Position::new(ux, uy, uz);
            let mut sas: Vec<Position> = anchors.iter().map(|&(x, z)| Position::new(x, 0.0, z)).collect();
            sas.dedup();
            prop_assume!(sas.len() >= 2 && (sas[0] - sas[1]).norm() > 0.2);
            let sys = PseudoLinearSystem::new(sas.iter().map(|&a| bearing(ue, a)).collect()).unwrap();
            let est = wls_solve(&sys, &WlsOptions::default(), Stage::Fine).unwrap();
            prop_assert!((est.position - ue).norm() < 1e-9);
            prop_assert!(est.iterations <= 2);
        }

        #[test]
        fn weight_scale_cancels(k in -20i32..20, seed in 0u64..1000) {
            let ue = Position::new(-3.0, 3.0 + (seed % 7) as f64, 1.5);
            let anchors = [Position::new(0.0, 0.0, 0.0), Position::new(-1.0, 0.0, 1.0), Position::new(-3.0, 0.0, 3.0)];
            let sys = noisy_system(ue, &anchors, &[(0.01, 0.0), (0.0, -0.02), (0.005, 0.005)], &[1e-4, 2e-4, 5e-4]);
            let w = sys.weights_at(&ue);
            // a power of two scales every product exactly
            let scaled = &w * 2f64.powi(k);
            prop_assert_eq!(sys.solve_weighted(&w).unwrap().0, sys.solve_weighted(&scaled).unwrap().0);
        }

        #[test]
        fn translation_moves_estimate(ox in -3.0..3.0f64, oz in -3.0..3.0f64, oy in -1.0..1.0f64) {
            let ue = Position::new(-3.0, 3.0, 1.5);
            let sas = [Position::new(0.0, 0.0, 0.0), Position::new(-1.0, 0.0, 1.0), Position::new(1.0, 0.0, -1.0)];
            let noise = [(0.01, -0.01), (0.02, 0.0), (-0.01, 0.015)];
            let base = wls_solve(&noisy_system(ue, &sas, &noise, &[1e-4; 3]), &WlsOptions::default(), Stage::Fine).unwrap();
            let off = Position::new(ox, oy, oz);
            let moved: Vec<Position> = sas.iter().map(|&a| a + off).collect();
            let shifted = wls_solve(&noisy_system(ue + off, &moved, &noise, &[1e-4; 3]), &WlsOptions::default(), Stage::Fine).unwrap();
            prop_assert!((shifted.position - (base.position + off)).norm() < 1e-8);
        }
    }
}
