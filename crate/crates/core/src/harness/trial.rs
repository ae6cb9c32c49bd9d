use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Scene;
use crate::baseline::{dft_aoa, dft_music_position, observe_collocated, projected_gains};
use crate::channel::{steering_vector, synthesize_channel, ChannelTensor, Scatterer, VisibilityMask};
use crate::error::{Error, Result};
use crate::geometry::{distance, Position, VirtualAnglePair};
use crate::positioning::{coarse_position, fine_position, PositionEstimate};
use crate::selection::{compute_power_profile, select_visible};
use crate::sparse_aoa::{
    build_block_problem, delay_period, estimate_los_gains, music_toa, reduced_dictionary,
    somp_estimate_iter, AngleEstimate, AngularDictionary, ToaSearch,
};
use crate::training::{decouple, make_combiners, make_pilots, simulate_training, CombinerSet, Decoupled};

/// Angle estimate of one sub-array next to the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleRecord {
    /// 0-based sub-array index.
    pub sa: usize,
    pub typical: bool,
    /// Geometric LoS virtual angles.
    pub truth: VirtualAnglePair,
    /// Full-grid column closest to the angles the channel was built with.
    pub true_grid_index: usize,
    pub estimate: std::result::Result<AngleEstimate, Error>,
    /// Atoms searched for this sub-array.
    pub atoms: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToaRecord {
    pub sa: usize,
    pub tau_hat: f64,
    pub tau_true: f64,
    pub step: f64,
    pub boundary: bool,
    pub ambiguous: bool,
}

impl ToaRecord {
    pub fn error(&self) -> f64 {
        self.tau_hat - self.tau_true
    }
}

pub type StageResult = std::result::Result<PositionEstimate, Error>;

#[derive(Debug, Clone, PartialEq)]
pub struct UeResult {
    pub truth: Position,
    /// 0-based sub-arrays inside the visibility region.
    pub in_vr: Vec<usize>,
    pub visible: Vec<usize>,
    pub typical: Vec<usize>,
    pub coarse: StageResult,
    pub fine: StageResult,
    pub baseline: Option<StageResult>,
    pub angles: Vec<AngleRecord>,
    /// Delay estimates at the typical sub-arrays.
    pub toa: Vec<ToaRecord>,
    pub baseline_toa: Option<ToaRecord>,
}

impl UeResult {
    pub fn atoms_stage1(&self) -> usize {
        self.angles.iter().filter(|a| a.typical).map(|a| a.atoms).sum()
    }

    pub fn atoms_stage3(&self) -> usize {
        self.angles.iter().filter(|a| !a.typical).map(|a| a.atoms).sum()
    }
}

/// Wall-clock seconds per stage for one UE.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimes {
    pub stage1: f64,
    pub stage2: f64,
    pub stage3: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: u64,
    pub ues: Vec<UeResult>,
    /// Kept apart from `ues`, which is a pure function of the seed.
    pub timing: Vec<StageTimes>,
}

/// Generator of trial `trial` under master seed `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn drop_ue<R: Rng + ?Sized>(center: Position, jitter: f64, rng: &mut R) -> Position {
    let mut u = || (rng.random::<f64>() - 0.5) * jitter;
    Position::new(center.x + u(), center.y + u(), center.z + u())
}

fn snapper(scene: &Scene) -> impl Fn(VirtualAnglePair) -> VirtualAnglePair + '_ {
    let grid = scene.cfg.estimator.grid();
    move |v| grid.snap(v).unwrap_or(v)
}

fn true_grid_index(scene: &Scene, v: VirtualAnglePair) -> usize {
    let (go, gv) = scene.cfg.estimator.grid().grids().expect("validated grid");
    gv.nearest(v.varphi) + gv.len * go.nearest(v.omega)
}

struct Context<'a> {
    scene: &'a Scene,
    channel: &'a ChannelTensor,
    decoupled: &'a Decoupled,
    combiners: &'a CombinerSet,
}

impl Context<'_> {
    fn estimate(
        &self,
        k: usize,
        p: usize,
        dicts: &[AngularDictionary],
    ) -> Result<AngleEstimate> {
        let cfg = &self.scene.cfg;
        let problem = build_block_problem(self.decoupled.z_all(k, p), self.combiners.get(k), dicts)?;
        let (mut est, support) = somp_estimate_iter(&problem, k, p, cfg.estimator.somp_iterations)?;
        est.gains = estimate_los_gains(&problem, &support, self.scene.training.p_t)?;
        Ok(est)
    }

    fn record(&self, k: usize, p: usize, typical: bool, atoms: usize, estimate: Result<AngleEstimate>) -> AngleRecord {
        let t = self.channel.los_truth(k, p);
        AngleRecord {
            sa: k,
            typical,
            truth: t.virtual_angles,
            true_grid_index: true_grid_index(self.scene, t.steering_angles),
            estimate,
            atoms,
        }
    }

    fn toa(&self, est: &AngleEstimate, coarse: &Position) -> Result<ToaRecord> {
        let cfg = &self.scene.cfg;
        let c = cfg.propagation.c;
        let sa = self.scene.sa_positions[est.sa];
        let lambda_c = cfg.wideband.wavelength_center(c);
        let b = steering_vector(cfg.layout.m_x, cfg.layout.m_z, cfg.layout.spacing, lambda_c, est.virtual_angles)?;
        let search = ToaSearch::around(
            distance(coarse, &sa) / c,
            delay_period(&cfg.wideband) / 2.0,
            cfg.estimator.tau_step(c),
        );
        let t = music_toa(&est.gains, &b, &cfg.wideband, &search)?;
        Ok(ToaRecord {
            sa: est.sa,
            tau_hat: t.tau,
            tau_true: self.channel.los_truth(est.sa, est.ue).delay,
            step: t.step,
            boundary: t.boundary,
            ambiguous: t.ambiguous,
        })
    }
}

struct Baseline {
    channel: ChannelTensor,
    origin: Position,
}

fn run_baseline<R: Rng + ?Sized>(
    scene: &Scene,
    base: &Baseline,
    p: usize,
    rng: &mut R,
) -> (StageResult, Option<ToaRecord>) {
    let cfg = &scene.cfg;
    let col = cfg.baseline.collocated();
    let c = cfg.propagation.c;
    let obs = observe_collocated(&base.channel, p, scene.training.p_t, scene.training.noise_var, rng);
    let run = || -> Result<(PositionEstimate, ToaRecord)> {
        let mut aoa = dft_aoa(&obs, &col, cfg.layout.spacing, &scene.wavelengths)?;
        aoa.ue = p;
        aoa.gains = projected_gains(&obs, &aoa, &col, cfg.layout.spacing, &scene.wavelengths, scene.training.p_t)?;
        let lambda_c = cfg.wideband.wavelength_center(c);
        let b = steering_vector(col.m_x, col.m_z, cfg.layout.spacing, lambda_c, aoa.virtual_angles)?;
        let truth = base.channel.los_truth(0, p);
        // the collocated array has no coarse fix; the delay search is
        // centered on the true range, which can only favor this scheme
        let search = ToaSearch::around(truth.delay, delay_period(&cfg.wideband) / 2.0, cfg.estimator.tau_step(c));
        let toa = music_toa(&aoa.gains, &b, &cfg.wideband, &search)?;
        let est = dft_music_position(&aoa, &toa, &base.origin, c);
        Ok((
            est,
            ToaRecord {
                sa: 0,
                tau_hat: toa.tau,
                tau_true: truth.delay,
                step: toa.step,
                boundary: toa.boundary,
                ambiguous: toa.ambiguous,
            },
        ))
    };
    match run() {
        Ok((est, rec)) => (Ok(est), Some(rec)),
        Err(e) => (Err(e), None),
    }
}

/// One Monte-Carlo realization: channel, training, selection, the three
/// estimation stages and the reference scheme. Stage failures are recorded
/// in the result.
pub fn run_trial(scene: &Scene, trial: u64) -> Result<TrialResult> {
    let cfg = &scene.cfg;
    let mut rng = trial_rng(cfg.seed, trial);
    let ues: Vec<Position> = cfg.ues.iter().map(|u| drop_ue(u.center, u.jitter, &mut rng)).collect();
    let scatterers: Vec<Scatterer> = cfg
        .scatterers
        .iter()
        .map(|s| Scatterer {
            position: s.position,
            gamma_mag: s.gamma_mag,
            vartheta: rng.random::<f64>() * std::f64::consts::TAU,
        })
        .collect();
    let in_vr = cfg.vr.members(&cfg.layout, &mut rng);
    let mask = cfg.vr.mask_for(&cfg.layout, &in_vr, scatterers.len(), ues.len());
    let snap = snapper(scene);
    let los_map: Option<&dyn Fn(VirtualAnglePair) -> VirtualAnglePair> = if cfg.on_grid { Some(&snap) } else { None };
    let channel = synthesize_channel(&cfg.layout, &cfg.wideband, &cfg.propagation, &ues, &scatterers, &mask, los_map)?;
    let pilots = make_pilots(&scene.training, &mut rng)?;
    let combiners = make_combiners(&cfg.layout, &scene.training, &mut rng);
    let obs = simulate_training(&channel, &pilots, &combiners, &scene.training, &mut rng)?;
    let decoupled = decouple(&obs, &pilots);

    let base = if cfg.baseline.enabled {
        let origin = scene.sa_positions[0];
        let layout = cfg.baseline.collocated().layout(origin, cfg.layout.spacing);
        let all = VisibilityMask::all_visible(1, scatterers.len(), ues.len());
        let ch = synthesize_channel(&layout, &cfg.wideband, &cfg.propagation, &ues, &scatterers, &all, None)?;
        Some(Baseline { channel: ch, origin })
    } else {
        None
    };

    let ctx = Context {
        scene,
        channel: &channel,
        decoupled: &decoupled,
        combiners: &combiners,
    };
    let mut results = Vec::with_capacity(ues.len());
    let mut timing = Vec::with_capacity(ues.len());
    for (p, &truth) in ues.iter().enumerate() {
        let mut times = StageTimes::default();
        let mut res = UeResult {
            truth,
            in_vr: in_vr.clone(),
            visible: Vec::new(),
            typical: Vec::new(),
            coarse: Err(Error::NoSignal),
            fine: Err(Error::NoSignal),
            baseline: None,
            angles: Vec::new(),
            toa: Vec::new(),
            baseline_toa: None,
        };
        match select_visible(&compute_power_profile(&decoupled, p), &cfg.selection) {
            Err(e) => {
                res.coarse = Err(e.clone());
                res.fine = Err(e);
            }
            Ok(sel) => {
                res.visible = sel.visible.clone();
                res.typical = sel.typical.clone();
                let t0 = Instant::now();
                let mut typical_est = Vec::new();
                for &k in &sel.typical {
                    let est = ctx.estimate(k, p, &scene.dictionaries);
                    if let Ok(e) = &est {
                        typical_est.push(e.clone());
                    }
                    res.angles.push(ctx.record(k, p, true, scene.dictionaries[0].num_atoms(), est));
                }
                times.stage1 = t0.elapsed().as_secs_f64();

                let t1 = Instant::now();
                res.coarse = coarse_position(&typical_est, &scene.sa_positions, cfg.estimator.angle_variance(), &cfg.estimator.wls);
                times.stage2 = t1.elapsed().as_secs_f64();

                match &res.coarse {
                    Err(e) => res.fine = Err(e.clone()),
                    Ok(coarse) => {
                        let q = coarse.position;
                        res.toa = typical_est.iter().filter_map(|e| ctx.toa(e, &q).ok()).collect();
                        let t2 = Instant::now();
                        let mut all_est = typical_est.clone();
                        for k in sel.non_typical() {
                            let rd = reduced_dictionary(
                                &q,
                                &scene.sa_positions[k],
                                &cfg.estimator.grid(),
                                &cfg.layout,
                                &scene.wavelengths,
                                cfg.estimator.i_bar,
                                cfg.estimator.j_bar,
                            );
                            let (atoms, est) = match rd {
                                Ok(d) => (d[0].num_atoms(), ctx.estimate(k, p, &d)),
                                Err(e) => (0, Err(e)),
                            };
                            if let Ok(e) = &est {
                                all_est.push(e.clone());
                            }
                            res.angles.push(ctx.record(k, p, false, atoms, est));
                        }
                        res.fine = fine_position(&all_est, &scene.sa_positions, cfg.estimator.angle_variance(), &cfg.estimator.wls);
                        times.stage3 = t2.elapsed().as_secs_f64();
                    }
                }
            }
        }
        if let Some(b) = &base {
            let t3 = Instant::now();
            let (est, toa) = run_baseline(scene, b, p, &mut rng);
            times.baseline = t3.elapsed().as_secs_f64();
            res.baseline = Some(est);
            res.baseline_toa = toa;
        }
        results.push(res);
        timing.push(times);
    }
    Ok(TrialResult {
        trial,
        ues: results,
        timing,
    })
}
