//! Training phase: orthogonal pilots, per-block analog combiners, received
//! matrices and per-UE decoupling.
//!
//! Each sub-array has a single RF chain. During block `n` its phase shifters
//! apply combiner `f_{k,n}`; over `N` blocks this yields the `M_S x N` matrix
//! `F_k`. With pilots `S` (`P x T`) the received block matrix at subcarrier `i`
//! is `Y_k[i] = F_k^H H_k[i] S + V_k[i]`, and `z_{k,p}[i] = Y_k[i] conj(s_p)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelTensor;
use crate::error::{Error, Result};
use crate::geometry::ArrayLayout;

/// Phase rule for the analog combiners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerKind {
    /// `psi_{k,n,i} = 2 pi (n-1)(i-1) / N`.
    #[default]
    Dft,
    /// Independent uniform phases per sub-array, block and antenna.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// Training blocks `N`.
    pub blocks: usize,
    /// Slots per block `T`.
    pub slots: usize,
    /// Pilot energy per UE over the `T` slots.
    pub p_t: f64,
    /// Noise variance per antenna sample on one subcarrier.
    pub noise_var: f64,
    /// Number of UEs `P`.
    pub num_ue: usize,
    pub combiner: CombinerKind,
}

impl TrainingConfig {
    pub fn validate(&self, layout: &ArrayLayout) -> Result<()> {
        if self.slots < self.num_ue {
            return Err(Error::Config(format!(
                "T = {} slots cannot carry {} orthogonal pilots",
                self.slots, self.num_ue
            )));
        }
        if self.blocks < layout.antennas_per_subarray() {
            return Err(Error::Config(format!(
                "N = {} training blocks is below M_S = {}",
                self.blocks,
                layout.antennas_per_subarray()
            )));
        }
        if !(self.p_t >= 0.0) || !(self.noise_var >= 0.0) {
            return Err(Error::Config("pilot energy and noise variance must be >= 0".into()));
        }
        Ok(())
    }
}

/// Pilot symbols, one row per UE.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    pub s: DMatrix<Complex64>,
}

impl PilotMatrix {
    /// Pilot sequence of UE `p` as a column vector.
    pub fn sequence(&self, p: usize) -> DVector<Complex64> {
        self.s.row(p).transpose()
    }
}

/// Rows of a `T`-point DFT scaled to energy `p_t`, each rotated by a random
/// common phase. Rows are exactly orthogonal.
pub fn make_pilots<R: Rng + ?Sized>(cfg: &TrainingConfig, rng: &mut R) -> Result<PilotMatrix> {
    if cfg.slots < cfg.num_ue {
        return Err(Error::Config(format!(
            "T = {} slots cannot carry {} orthogonal pilots",
            cfg.slots, cfg.num_ue
        )));
    }
    let amp = (cfg.p_t / cfg.slots as f64).sqrt();
    let t = cfg.slots as f64;
    let rot: Vec<f64> = (0..cfg.num_ue)
        .map(|_| rng.random::<f64>() * 2.0 * PI)
        .collect();
    let s = DMatrix::from_fn(cfg.num_ue, cfg.slots, |p, slot| {
        Complex64::from_polar(amp, rot[p] - 2.0 * PI * (p * slot) as f64 / t)
    });
    Ok(PilotMatrix { s })
}

/// Combiner matrices `F_k` (`M_S x N`), one per sub-array.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinerSet {
    pub f: Vec<DMatrix<Complex64>>,
}

impl CombinerSet {
    pub fn get(&self, k: usize) -> &DMatrix<Complex64> {
        &self.f[k]
    }
}

pub fn make_combiners<R: Rng + ?Sized>(
    layout: &ArrayLayout,
    cfg: &TrainingConfig,
    rng: &mut R,
) -> CombinerSet {
    let ms = layout.antennas_per_subarray();
    let scale = 1.0 / (ms as f64).sqrt();
    let n_blocks = cfg.blocks;
    let f = (0..layout.num_subarrays())
        .map(|_| match cfg.combiner {
            CombinerKind::Dft => DMatrix::from_fn(ms, n_blocks, |i, n| {
                let psi = 2.0 * PI * (n * i) as f64 / n_blocks as f64;
                Complex64::from_polar(scale, -psi)
            }),
            CombinerKind::Random => DMatrix::from_fn(ms, n_blocks, |_, _| {
                Complex64::from_polar(scale, -rng.random::<f64>() * 2.0 * PI)
            }),
        })
        .collect();
    CombinerSet { f }
}

/// Circularly-symmetric complex Gaussian sample with variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// Received block matrices `Y_k[i]` (`N x T`).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    num_sub: usize,
    num_sa: usize,
    y: Vec<DMatrix<Complex64>>,
}

impl ObservationSet {
    pub fn y(&self, k: usize, i: usize) -> &DMatrix<Complex64> {
        &self.y[k * self.num_sub + i]
    }

    pub fn num_subarrays(&self) -> usize {
        self.num_sa
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_sub
    }
}

pub fn simulate_training<R: Rng + ?Sized>(
    channel: &ChannelTensor,
    pilots: &PilotMatrix,
    combiners: &CombinerSet,
    cfg: &TrainingConfig,
    rng: &mut R,
) -> Result<ObservationSet> {
    let (num_sub, num_sa, num_ue) = (
        channel.num_subcarriers(),
        channel.num_subarrays(),
        channel.num_ues(),
    );
    let ms = channel.antennas();
    if pilots.s.nrows() != num_ue || pilots.s.ncols() != cfg.slots {
        return Err(Error::Config("pilot matrix does not match P x T".into()));
    }
    if combiners.f.len() != num_sa || combiners.f.iter().any(|f| f.nrows() != ms || f.ncols() != cfg.blocks) {
        return Err(Error::Config("combiner matrices do not match M_S x N".into()));
    }
    let mut y = Vec::with_capacity(num_sa * num_sub);
    for k in 0..num_sa {
        let fh = combiners.get(k).adjoint();
        for i in 0..num_sub {
            let hk = DMatrix::from_fn(ms, num_ue, |m, p| channel.h(i, k, p)[m]);
            let mut yk = &fh * hk * &pilots.s;
            if cfg.noise_var > 0.0 {
                // thermal noise at each antenna, then through the block's combiner
                for n in 0..cfg.blocks {
                    for t in 0..cfg.slots {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for m in 0..ms {
                            acc += fh[(n, m)] * complex_gaussian(rng, cfg.noise_var);
                        }
                        yk[(n, t)] += acc;
                    }
                }
            }
            y.push(yk);
        }
    }
    Ok(ObservationSet { num_sub, num_sa, y })
}

/// Decoupled per-UE vectors `z_{k,p}[i]` (length `N`).
#[derive(Debug, Clone, PartialEq)]
pub struct Decoupled {
    num_sub: usize,
    num_ue: usize,
    num_sa: usize,
    z: Vec<DVector<Complex64>>,
}

impl Decoupled {
    pub fn z(&self, k: usize, p: usize, i: usize) -> &DVector<Complex64> {
        &self.z[(k * self.num_ue + p) * self.num_sub + i]
    }

    /// All subcarriers of `z_{k,p}`, in tone order.
    pub fn z_all(&self, k: usize, p: usize) -> &[DVector<Complex64>] {
        let start = (k * self.num_ue + p) * self.num_sub;
        &self.z[start..start + self.num_sub]
    }

    pub fn num_subarrays(&self) -> usize {
        self.num_sa
    }

    pub fn num_ues(&self) -> usize {
        self.num_ue
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_sub
    }
}

pub fn decouple(obs: &ObservationSet, pilots: &PilotMatrix) -> Decoupled {
    let num_ue = pilots.s.nrows();
    let conj_seq: Vec<DVector<Complex64>> = (0..num_ue)
        .map(|p| pilots.sequence(p).map(|c| c.conj()))
        .collect();
    let mut z = Vec::with_capacity(obs.num_sa * num_ue * obs.num_sub);
    for k in 0..obs.num_sa {
        for s in &conj_seq {
            for i in 0..obs.num_sub {
                z.push(obs.y(k, i) * s);
            }
        }
    }
    Decoupled {
        num_sub: obs.num_sub,
        num_ue,
        num_sa: obs.num_sa,
        z,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{synthesize_channel, PropagationParams, Scatterer, VisibilityMask, WidebandSpec};
    use crate::geometry::Position;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> ArrayLayout {
        ArrayLayout {
            k_x: 2,
            k_z: 2,
            m_x: 3,
            m_z: 2,
            interval: 1.0,
            spacing: 2.34e-4,
            origin: Position::default(),
        }
    }

    fn cfg(p: usize, t: usize, noise: f64) -> TrainingConfig {
        TrainingConfig {
            blocks: 6,
            slots: t,
            p_t: 2.0,
            noise_var: noise,
            num_ue: p,
            combiner: CombinerKind::Dft,
        }
    }

    fn channel(num_ue: usize) -> ChannelTensor {
        let band = WidebandSpec { f_c: 320e9, bandwidth: 4e9, num_subcarriers: 3, n_c: 1025 };
        let ues: Vec<Position> = [Position::new(-0.4, 3.0, 0.8), Position::new(-2.0, 4.0, 1.5)][..num_ue].to_vec();
        let sc = [Scatterer { position: Position::new(2.0, 5.0, 3.0), gamma_mag: 0.9, vartheta: 0.4 }];
        let mask = VisibilityMask::all_visible(4, 1, num_ue);
        synthesize_channel(&layout(), &band, &PropagationParams::free_space(2.0), &ues, &sc, &mask, None).unwrap()
    }

    #[test]
    fn pilots_are_orthogonal_with_energy_pt() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = make_pilots(&TrainingConfig { p_t: 1.0, ..cfg(1, 1, 0.0) }, &mut rng).unwrap();
        assert_eq!(s.s.shape(), (1, 1));
        assert!((s.s[(0, 0)].norm() - 1.0).abs() < 1e-15);
        let c = cfg(2, 5, 0.0);
        let s = make_pilots(&c, &mut rng).unwrap();
        let gram = &s.s * s.s.adjoint();
        let target = DMatrix::<Complex64>::identity(2, 2) * Complex64::new(c.p_t, 0.0);
        assert!((gram - target).norm() < 1e-12);
        assert!(matches!(make_pilots(&cfg(3, 2, 0.0), &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn combiner_entries_follow_phase_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = cfg(1, 1, 0.0);
        let lay = ArrayLayout { m_x: 5, m_z: 5, ..layout() };
        c.blocks = 25;
        let f = make_combiners(&lay, &c, &mut rng);
        let f0 = f.get(0);
        let s = 1.0 / 5.0;
        for i in 0..25 {
            assert!((f0[(i, 0)] - Complex64::new(s, 0.0)).norm() < 1e-15);
        }
        // N = 25, n = 3, i = 2 -> psi = 4 pi / 25
        let expect = Complex64::from_polar(s, -4.0 * PI / 25.0);
        assert!((f0[(1, 2)] - expect).norm() < 1e-15);
        for v in f0.iter() {
            assert!((v.norm() - s).abs() < 1e-15);
        }
        // N = M_S: sqrt(M_S) F is a unitary DFT
        let gram = f0.adjoint() * f0 * Complex64::new(25.0, 0.0);
        assert!((gram - DMatrix::identity(25, 25) * Complex64::new(25.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn noiseless_observation_matches_formula() {
        let ch = channel(1);
        let c = cfg(1, 2, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = make_pilots(&c, &mut rng).unwrap();
        let f = make_combiners(&layout(), &c, &mut rng);
        let obs = simulate_training(&ch, &s, &f, &c, &mut rng).unwrap();
        for k in 0..4 {
            for i in 0..3 {
                let h = ch.h(i, k, 0);
                let expected = f.get(k).adjoint() * h * s.s.row(0);
                assert!((obs.y(k, i) - &expected).norm() <= 1e-12 * expected.norm());
                // rank one: columns are multiples of each other
                let svd = obs.y(k, i).clone().svd(false, false);
                assert!(svd.singular_values[1] <= 1e-12 * svd.singular_values[0]);
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let ch = channel(2);
        let c = cfg(2, 5, 1e-9);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let s = make_pilots(&c, &mut rng).unwrap();
            let f = make_combiners(&layout(), &c, &mut rng);
            simulate_training(&ch, &s, &f, &c, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn noiseless_decoupling_identity() {
        let ch = channel(2);
        let c = cfg(2, 5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = make_pilots(&c, &mut rng).unwrap();
        let f = make_combiners(&layout(), &c, &mut rng);
        let obs = simulate_training(&ch, &s, &f, &c, &mut rng).unwrap();
        let z = decouple(&obs, &s);
        for k in 0..4 {
            for p in 0..2 {
                for i in 0..3 {
                    let expected = f.get(k).adjoint() * ch.h(i, k, p) * Complex64::new(c.p_t, 0.0);
                    let err = (z.z(k, p, i) - &expected).norm();
                    assert!(err <= 1e-12 * expected.norm(), "leakage {}", err / expected.norm());
                }
            }
        }
        // doubling p_t doubles the decoupled vector
        let c2 = TrainingConfig { p_t: 2.0 * c.p_t, ..c.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s2 = make_pilots(&c2, &mut rng).unwrap();
        let obs2 = simulate_training(&ch, &s2, &f, &c2, &mut rng).unwrap();
        let z2 = decouple(&obs2, &s2);
        let a = z.z(1, 0, 0).norm();
        assert!((z2.z(1, 0, 0).norm() - 2.0 * a).abs() < 1e-12 * a);
    }

    #[test]
    fn combiner_inversion_recovers_channel() {
        let ch = channel(1);
        let c = cfg(1, 1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = make_pilots(&c, &mut rng).unwrap();
        for kind in [CombinerKind::Dft, CombinerKind::Random] {
            let c = TrainingConfig { combiner: kind, blocks: 8, ..c.clone() };
            let f = make_combiners(&layout(), &c, &mut rng);
            let obs = simulate_training(&ch, &s, &f, &c, &mut rng).unwrap();
            let z = decouple(&obs, &s);
            for k in 0..4 {
                let a = f.get(k).adjoint() * Complex64::new(c.p_t, 0.0);
                let h_hat = a.svd(true, true).solve(z.z(k, 0, 1), 1e-14).unwrap();
                let h = ch.h(1, k, 0);
                assert!((h_hat - h).norm() <= 1e-9 * h.norm());
            }
        }
    }

    #[test]
    fn decoupled_noise_energy_matches_second_moment() {
        // channel switched off so z carries noise only
        let mut mask = VisibilityMask::all_visible(4, 1, 1);
        for k in 0..4 {
            for l in 0..2 {
                mask.set(k, l, 0, false);
            }
        }
        let band = WidebandSpec { f_c: 320e9, bandwidth: 4e9, num_subcarriers: 1, n_c: 1025 };
        let sc = [Scatterer { position: Position::new(2.0, 5.0, 3.0), gamma_mag: 0.9, vartheta: 0.4 }];
        let ch = synthesize_channel(&layout(), &band, &PropagationParams::free_space(2.0), &[Position::new(0.0, 3.0, 0.5)], &sc, &mask, None)
            .unwrap();
        let noise = 0.7;
        let c = TrainingConfig { blocks: 6, slots: 3, p_t: 1.5, noise_var: noise, num_ue: 1, combiner: CombinerKind::Random };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = make_pilots(&c, &mut rng).unwrap();
        let f = make_combiners(&layout(), &c, &mut rng);
        let draws = 10_000 / 4;
        let mut energy = 0.0;
        for _ in 0..draws {
            let obs = simulate_training(&ch, &s, &f, &c, &mut rng).unwrap();
            let z = decouple(&obs, &s);
            energy += (0..4).map(|k| z.z(k, 0, 0).norm_squared()).sum::<f64>();
        }
        let mean = energy / (draws * 4) as f64;
        // E|z|^2 = p_t sigma^2 ||F||_F^2, averaged over sub-arrays
        let fro = (0..4).map(|k| f.get(k).norm_squared()).sum::<f64>() / 4.0;
        let expected = c.p_t * noise * fro;
        assert!((mean / expected - 1.0).abs() < 0.03, "mean {} expected {}", mean, expected);
        assert!((fro - c.blocks as f64).abs() < 1e-9);
    }
}
