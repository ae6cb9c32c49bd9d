use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::dictionary::AngularDictionary;
use crate::error::{Error, Result};
use crate::geometry::{physical_from_virtual, AnglePair, VirtualAnglePair};

/// Ratio of extreme singular values above which a support Gram matrix is
/// treated as singular.
const GRAM_CONDITION_LIMIT: f64 = 1e12;

/// Column permutation taking the subcarrier-major coefficient ordering to the
/// atom-major (block) ordering. With 1-based indices, entry `[u, v]` is one
/// iff `u = i + I (j - 1)` and `v = j + A (i - 1)`, `A` the number of atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Permutation {
    pub subcarriers: usize,
    pub atoms: usize,
}

impl Permutation {
    pub fn len(&self) -> usize {
        self.subcarriers * self.atoms
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row holding the one of column `v` (0-based).
    pub fn row_of(&self, v: usize) -> usize {
        let (i, j) = (v / self.atoms, v % self.atoms);
        i + self.subcarriers * j
    }

    /// Column holding the one of row `u` (0-based).
    pub fn col_of(&self, u: usize) -> usize {
        let (j, i) = (u / self.subcarriers, u % self.subcarriers);
        j + self.atoms * i
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut p = DMatrix::zeros(n, n);
        for v in 0..n {
            p[(self.row_of(v), v)] = 1.0;
        }
        p
    }

    /// `P x`: reorders a subcarrier-major vector into blocks.
    pub fn apply(&self, x: &DVector<Complex64>) -> DVector<Complex64> {
        DVector::from_fn(self.len(), |u, _| x[self.col_of(u)])
    }

    /// `P^T x`.
    pub fn apply_transpose(&self, x: &DVector<Complex64>) -> DVector<Complex64> {
        DVector::from_fn(self.len(), |v, _| x[self.row_of(v)])
    }
}

/// Per-subcarrier observations of one (sub-array, UE) pair together with the
/// combiner and one dictionary per subcarrier.
#[derive(Debug, Clone, Copy)]
pub struct BlockSparseProblem<'a> {
    z: &'a [DVector<Complex64>],
    combiner: &'a DMatrix<Complex64>,
    dicts: &'a [AngularDictionary],
}

pub fn build_block_problem<'a>(
    z: &'a [DVector<Complex64>],
    combiner: &'a DMatrix<Complex64>,
    dicts: &'a [AngularDictionary],
) -> Result<BlockSparseProblem<'a>> {
    if z.is_empty() || z.len() != dicts.len() {
        return Err(Error::Config(format!(
            "{} observations for {} dictionaries",
            z.len(),
            dicts.len()
        )));
    }
    let atoms = dicts[0].num_atoms();
    for (zi, d) in z.iter().zip(dicts) {
        if zi.len() != combiner.ncols() || d.antennas() != combiner.nrows() || d.num_atoms() != atoms {
            return Err(Error::Config("inconsistent block problem dimensions".into()));
        }
    }
    Ok(BlockSparseProblem { z, combiner, dicts })
}

impl<'a> BlockSparseProblem<'a> {
    pub fn num_subcarriers(&self) -> usize {
        self.z.len()
    }

    pub fn num_atoms(&self) -> usize {
        self.dicts[0].num_atoms()
    }

    pub fn dictionary(&self, i: usize) -> &AngularDictionary {
        &self.dicts[i]
    }

    pub fn observations(&self) -> &[DVector<Complex64>] {
        self.z
    }

    pub fn permutation(&self) -> Permutation {
        Permutation {
            subcarriers: self.num_subcarriers(),
            atoms: self.num_atoms(),
        }
    }

    /// `z̄`: observations stacked subcarrier after subcarrier.
    pub fn stacked_observation(&self) -> DVector<Complex64> {
        let n = self.combiner.ncols();
        DVector::from_fn(n * self.z.len(), |r, _| self.z[r / n][r % n])
    }

    /// `Ξ[i] = F^H A[i]`, dense.
    pub fn sensing_block(&self, i: usize) -> DMatrix<Complex64> {
        self.combiner.adjoint() * self.dicts[i].atoms()
    }

    /// Block-diagonal `Θ̄`, dense.
    pub fn block_diagonal_sensing(&self) -> DMatrix<Complex64> {
        let n = self.combiner.ncols();
        let a = self.num_atoms();
        let sub = self.num_subcarriers();
        let mut theta = DMatrix::zeros(n * sub, a * sub);
        for i in 0..sub {
            theta
                .view_mut((i * n, i * a), (n, a))
                .copy_from(&self.sensing_block(i));
        }
        theta
    }

    /// `Θ̆ = Θ̄ P^T`, dense.
    pub fn sensing_matrix(&self) -> DMatrix<Complex64> {
        let bar = self.block_diagonal_sensing();
        let p = self.permutation();
        let mut out = DMatrix::zeros(bar.nrows(), bar.ncols());
        for u in 0..p.len() {
            out.set_column(u, &bar.column(p.col_of(u)));
        }
        out
    }

    /// `d_{l,i} = a_l[i]^H F r_i` for every window column `l`, returned as
    /// `scores[l] = sum_i |d_{l,i}|`. Exploits the Kronecker structure of the
    /// atoms; the summation order depends only on full-grid indices, so a
    /// window reproduces the full-grid values bit for bit.
    pub fn block_scores_for(&self, residual: &[DVector<Complex64>]) -> Vec<f64> {
        let dict = &self.dicts[0];
        let (ja, jb) = (dict.omega_len(), dict.varphi_len());
        let mut scores = vec![0.0; ja * jb];
        for (i, r) in residual.iter().enumerate() {
            let d = &self.dicts[i];
            let w = self.combiner * r;
            let m_z = d.varphi_factor(0).len();
            let m_x = d.omega_factor(0).len();
            let partial: Vec<Vec<Complex64>> = (0..jb)
                .map(|b| {
                    let cz = d.varphi_factor(b);
                    (0..m_x)
                        .map(|gx| {
                            let mut acc = Complex64::new(0.0, 0.0);
                            for gz in 0..m_z {
                                acc += cz[gz].conj() * w[gx * m_z + gz];
                            }
                            acc
                        })
                        .collect()
                })
                .collect();
            for a in 0..ja {
                let cx = d.omega_factor(a);
                for (b, u) in partial.iter().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for gx in 0..m_x {
                        acc += cx[gx].conj() * u[gx];
                    }
                    scores[a * jb + b] += acc.norm();
                }
            }
        }
        scores
    }

    pub fn block_scores(&self) -> Vec<f64> {
        self.block_scores_for(self.z)
    }

    /// Per-subcarrier correlation of window column `l` with the observation.
    pub fn correlation(&self, l: usize, i: usize) -> Complex64 {
        let col = self.combiner.adjoint() * self.dicts[i].atom(l);
        col.dotc(&self.z[i])
    }

    /// Least-squares coefficients of `r` on the support columns of `Ξ[i]`.
    fn support_fit(&self, i: usize, support: &[usize], r: &DVector<Complex64>) -> Result<DVector<Complex64>> {
        let cols: Vec<DVector<Complex64>> = support
            .iter()
            .map(|&l| self.combiner.adjoint() * self.dicts[i].atom(l))
            .collect();
        let xi = DMatrix::from_columns(&cols);
        let gram = xi.adjoint() * &xi;
        let sv = gram.clone().svd(false, false).singular_values;
        let (max, min) = (sv.max(), sv.min());
        if !(max > 0.0) || !(min > 0.0) || max / min > GRAM_CONDITION_LIMIT {
            return Err(Error::Numerical("singular support Gram matrix".into()));
        }
        let rhs = xi.adjoint() * r;
        gram.lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("singular support Gram matrix".into()))
    }
}

fn argmax_valid(scores: &[f64], dict: &AngularDictionary, exclude: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (l, &s) in scores.iter().enumerate() {
        if !dict.is_valid(l) || exclude.contains(&l) || !s.is_finite() {
            continue;
        }
        // strict comparison keeps the lowest index on ties
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(l);
        }
    }
    best
}

/// Greedy block support of size `iterations` with residual updates. The
/// first entry is the single block the estimator uses.
pub fn somp_support(problem: &BlockSparseProblem<'_>, iterations: usize) -> Result<Vec<usize>> {
    let dict = problem.dictionary(0);
    let mut residual: Vec<DVector<Complex64>> = problem.z.to_vec();
    let mut support = Vec::with_capacity(iterations);
    for _ in 0..iterations.max(1) {
        let scores = problem.block_scores_for(&residual);
        let Some(l) = argmax_valid(&scores, dict, &support) else {
            break;
        };
        if !(scores[l] > 0.0) {
            break;
        }
        support.push(l);
        if support.len() == iterations.max(1) {
            break;
        }
        for i in 0..problem.num_subcarriers() {
            let coef = problem.support_fit(i, &support, &problem.z[i])?;
            let mut fit = DVector::zeros(problem.z[i].len());
            for (c, &s) in coef.iter().zip(&support) {
                fit += (problem.combiner.adjoint() * problem.dicts[i].atom(s)) * *c;
            }
            residual[i] = &problem.z[i] - fit;
        }
    }
    if support.is_empty() {
        return Err(Error::NoSignal);
    }
    Ok(support)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleEstimate {
    /// 0-based sub-array index.
    pub sa: usize,
    /// 0-based UE index.
    pub ue: usize,
    pub virtual_angles: VirtualAnglePair,
    pub angles: AnglePair,
    /// Column of the full-grid dictionary (`varphi` index + `J * omega` index).
    pub grid_index: usize,
    /// Column of the dictionary window that was searched.
    pub local_index: usize,
    /// Per-subcarrier LoS gain; empty until estimated.
    pub gains: Vec<Complex64>,
    pub score: f64,
}

/// Single-block SOMP: the block with the largest summed correlation.
pub fn somp_estimate(problem: &BlockSparseProblem<'_>, sa: usize, ue: usize) -> Result<AngleEstimate> {
    let scores = problem.block_scores();
    let dict = problem.dictionary(0);
    let l = argmax_valid(&scores, dict, &[]).ok_or(Error::NoSignal)?;
    if !(scores[l] > 0.0) {
        return Err(Error::NoSignal);
    }
    let virtual_angles = dict.virtual_pair(l);
    Ok(AngleEstimate {
        sa,
        ue,
        virtual_angles,
        angles: physical_from_virtual(virtual_angles)?,
        grid_index: dict.full_index(l),
        local_index: l,
        gains: Vec::new(),
        score: scores[l],
    })
}

/// SOMP with `iterations` greedy picks; the estimate describes the first
/// block and the full support is returned alongside.
pub fn somp_estimate_iter(
    problem: &BlockSparseProblem<'_>,
    sa: usize,
    ue: usize,
    iterations: usize,
) -> Result<(AngleEstimate, Vec<usize>)> {
    if iterations <= 1 {
        let est = somp_estimate(problem, sa, ue)?;
        let support = vec![est.local_index];
        return Ok((est, support));
    }
    let support = somp_support(problem, iterations)?;
    let dict = problem.dictionary(0);
    let l = support[0];
    let virtual_angles = dict.virtual_pair(l);
    let est = AngleEstimate {
        sa,
        ue,
        virtual_angles,
        angles: physical_from_virtual(virtual_angles)?,
        grid_index: dict.full_index(l),
        local_index: l,
        gains: Vec::new(),
        score: problem.block_scores()[l],
    };
    Ok((est, support))
}

/// LoS gain per subcarrier by least squares on the support columns, with the
/// pilot power `p_t` removed. The first support column is the LoS atom.
pub fn estimate_los_gains(
    problem: &BlockSparseProblem<'_>,
    support: &[usize],
    p_t: f64,
) -> Result<Vec<Complex64>> {
    if support.is_empty() {
        return Err(Error::Numerical("empty support".into()));
    }
    (0..problem.num_subcarriers())
        .map(|i| {
            let coef = problem.support_fit(i, support, &problem.z[i])?;
            Ok(coef[0] / p_t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ArrayLayout, Position};
    use crate::sparse_aoa::{build_dictionaries, GridConfig, GridDomain};
    use crate::training::{make_combiners, CombinerKind, TrainingConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn permutation_index_example() {
        let p = Permutation { subcarriers: 2, atoms: 2 };
        let m = p.to_matrix();
        let ones: Vec<(usize, usize)> = (0..4)
            .flat_map(|u| (0..4).map(move |v| (u, v)))
            .filter(|&(u, v)| m[(u, v)] == 1.0)
            .map(|(u, v)| (u + 1, v + 1))
            .collect();
        assert_eq!(ones, vec![(1, 1), (2, 3), (3, 2), (4, 4)]);
        assert_eq!(&m * m.transpose(), DMatrix::identity(4, 4));
    }

    proptest! {
        #[test]
        fn permutation_is_bijective(sub in 1usize..6, atoms in 1usize..9) {
            let p = Permutation { subcarriers: sub, atoms };
            let m = p.to_matrix();
            prop_assert_eq!(&m * m.transpose(), DMatrix::identity(p.len(), p.len()));
            for v in 0..p.len() {
                prop_assert_eq!(p.col_of(p.row_of(v)), v);
            }
        }
    }

    pub(crate) struct Fixture {
        pub layout: ArrayLayout,
        pub dicts: Vec<AngularDictionary>,
        pub combiner: DMatrix<Complex64>,
    }

    pub(crate) fn fixture(delta: f64, wavelengths: &[f64], n: usize, kind: CombinerKind, seed: u64) -> Fixture {
        let layout = ArrayLayout {
            k_x: 1,
            k_z: 1,
            m_x: 3,
            m_z: 3,
            interval: 1.0,
            spacing: 2.5e-4,
            origin: Position::default(),
        };
        let grid = GridConfig { delta_omega: delta, delta_varphi: delta, domain: GridDomain::Unit };
        let dicts = build_dictionaries(&grid, &layout, wavelengths).unwrap();
        let cfg = TrainingConfig { blocks: n, slots: 2, p_t: 1.0, noise_var: 0.0, num_ue: 1, combiner: kind };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let combiner = make_combiners(&layout, &cfg, &mut rng).get(0).clone();
        Fixture { layout, dicts, combiner }
    }

    #[test]
    fn sensing_blocks_are_contiguous() {
        let fx = fixture(1.0, &[1e-3, 1.1e-3], 9, CombinerKind::Dft, 1);
        let z = vec![DVector::from_element(9, c(1.0, 0.0)); 2];
        let prob = build_block_problem(&z, &fx.combiner, &fx.dicts).unwrap();
        let theta = prob.sensing_matrix();
        assert_eq!(theta.ncols(), 18);
        for l in 0..9 {
            for i in 0..2 {
                let col = theta.column(l * 2 + i);
                let xi = prob.sensing_block(i);
                let block = col.rows(i * 9, 9);
                assert_eq!(block, xi.column(l));
                let other = col.rows((1 - i) * 9, 9);
                assert!(other.iter().all(|v| *v == c(0.0, 0.0)));
            }
        }
    }

    #[test]
    fn unpermuting_reproduces_block_diagonal_product() {
        let fx = fixture(1.0, &[1e-3, 1.1e-3], 9, CombinerKind::Random, 2);
        let z = vec![DVector::zeros(9); 2];
        let prob = build_block_problem(&z, &fx.combiner, &fx.dicts).unwrap();
        let mut gamma = DVector::zeros(18);
        gamma[3] = c(0.5, -1.0);
        gamma[12] = c(-2.0, 0.25);
        let p = prob.permutation();
        let lhs = prob.sensing_matrix() * p.apply(&gamma);
        let rhs = prob.block_diagonal_sensing() * &gamma;
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn fast_scores_match_dense_route() {
        let fx = fixture(0.5, &[1e-3, 1.05e-3, 1.1e-3], 9, CombinerKind::Random, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z: Vec<DVector<Complex64>> = (0..3)
            .map(|_| DVector::from_fn(9, |_, _| crate::training::complex_gaussian(&mut rng, 1.0)))
            .collect();
        let prob = build_block_problem(&z, &fx.combiner, &fx.dicts).unwrap();
        let d = prob.sensing_matrix().adjoint() * prob.stacked_observation();
        let fast = prob.block_scores();
        for l in 0..prob.num_atoms() {
            let dense: f64 = (0..3).map(|i| d[l * 3 + i].norm()).sum();
            assert!((dense - fast[l]).abs() < 1e-9 * dense.max(1.0));
            let omp: f64 = (0..3).map(|i| prob.correlation(l, i).norm()).sum();
            assert!((omp - fast[l]).abs() < 1e-9 * omp.max(1.0));
        }
    }

    #[test]
    fn matched_filter_block_wins() {
        let fx = fixture(0.5, &[1e-3, 1.1e-3], 9, CombinerKind::Dft, 4);
        for target in (0..25).filter(|&l| fx.dicts[0].is_valid(l)) {
            let z: Vec<DVector<Complex64>> = (0..2)
                .map(|i| fx.combiner.adjoint() * fx.dicts[i].atom(target))
                .collect();
            let prob = build_block_problem(&z, &fx.combiner, &fx.dicts).unwrap();
            let est = somp_estimate(&prob, 0, 0).unwrap();
            assert_eq!(est.local_index, target);
            assert_eq!(est.virtual_angles, fx.dicts[0].virtual_pair(target));
            let gains = estimate_los_gains(&prob, &[target], 2.0).unwrap();
            for g in gains {
                assert!((g - c(0.5, 0.0)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_observation_is_no_signal() {
        let fx = fixture(0.5, &[1e-3], 9, CombinerKind::Dft, 5);
        let z = vec![DVector::zeros(9)];
        let prob = build_block_problem(&z, &fx.combiner, &fx.dicts).unwrap();
        assert_eq!(somp_estimate(&prob, 0, 0), Err(Error::NoSignal));
        let gains = estimate_los_gains(&prob, &[12], 1.0).unwrap();
        assert!(gains.iter().all(|g| *g == c(0.0, 0.0)));
    }

    #[test]
    fn collinear_support_is_numerical_error() {
        let fx = fixture(0.5, &[1e-3], 9, CombinerKind::Dft, 6);
        let z = vec![DVector::from_element(9, c(1.0, 0.0))];
        let prob = build_block_problem(&z, &fx.combiner, &fx.dicts).unwrap();
        assert!(matches!(
            estimate_los_gains(&prob, &[12, 12], 1.0),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn multi_iteration_recovers_two_blocks() {
        // half-wavelength spacing keeps the two atoms well separated
        let fx = fixture(0.5, &[5e-4, 5.2e-4], 9, CombinerKind::Dft, 7);
        let z: Vec<DVector<Complex64>> = (0..2)
            .map(|i| fx.combiner.adjoint() * (fx.dicts[i].atom(12) * c(1.0, 0.0) + fx.dicts[i].atom(7) * c(0.0, 0.3)))
            .collect();
        let prob = build_block_problem(&z, &fx.combiner, &fx.dicts).unwrap();
        let s = somp_support(&prob, 2).unwrap();
        assert_eq!(s, vec![12, 7]);
        let g = estimate_los_gains(&prob, &s, 1.0).unwrap();
        assert!((g[0] - c(1.0, 0.0)).norm() < 1e-9);
        assert_eq!(somp_support(&prob, 1).unwrap(), vec![12]);
    }

    #[test]
    fn gains_scale_with_observation() {
        let fx = fixture(0.5, &[1e-3], 9, CombinerKind::Random, 8);
        let z = vec![fx.combiner.adjoint() * fx.dicts[0].atom(11) * c(0.3, 0.4)];
        let z2 = vec![&z[0] * c(2.0, 0.0)];
        let g1 = estimate_los_gains(&build_block_problem(&z, &fx.combiner, &fx.dicts).unwrap(), &[11], 1.0).unwrap();
        let g2 = estimate_los_gains(&build_block_problem(&z2, &fx.combiner, &fx.dicts).unwrap(), &[11], 2.0).unwrap();
        assert!((g1[0] - g2[0]).norm() < 1e-12);
        assert_eq!(fx.layout.antennas_per_subarray(), 9);
    }
}
