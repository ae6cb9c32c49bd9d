use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::CollocatedConfig;
use crate::channel::{
    subcarrier_frequencies, Absorption, PropagationParams, VisibilityMask, WidebandSpec,
    SPEED_OF_LIGHT,
};
use crate::error::{Error, Result};
use crate::geometry::{ArrayLayout, Position};
use crate::positioning::{AngleVariance, WlsOptions};
use crate::selection::SelectionConfig;
use crate::sparse_aoa::{build_dictionaries, AngularDictionary, GridConfig, GridDomain};
use crate::training::{CombinerKind, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UeSpec {
    /// Center of the region the UE is dropped in.
    pub center: Position,
    /// Side of the cube around `center` (m); zero pins the UE.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScattererSpec {
    pub position: Position,
    /// Reflection magnitude `|Gamma|`; the phase is drawn per realization.
    pub gamma_mag: f64,
}

/// Sub-arrays inside the visibility region of every UE. Sub-arrays outside
/// it see no path from the UE. Indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum VrSpec {
    #[default]
    Full,
    /// Both diagonals of a square layout.
    Diagonals,
    /// A 3 x 3 block with lower corner `(k_x, k_z)`; drawn uniformly per
    /// realization when absent.
    #[serde(rename = "square3x3")]
    Square3x3 {
        #[serde(default)]
        origin: Option<[usize; 2]>,
    },
    Explicit { visible: Vec<usize> },
}

impl VrSpec {
    pub fn validate(&self, layout: &ArrayLayout) -> Result<()> {
        match self {
            VrSpec::Full => Ok(()),
            VrSpec::Diagonals => {
                if layout.k_x != layout.k_z {
                    return Err(Error::Config("diagonal VR needs K_x = K_z".into()));
                }
                Ok(())
            }
            VrSpec::Square3x3 { origin } => {
                if layout.k_x < 3 || layout.k_z < 3 {
                    return Err(Error::Config("3x3 VR needs K_x, K_z >= 3".into()));
                }
                if let Some([ox, oz]) = origin {
                    if *ox == 0 || *oz == 0 || ox + 2 > layout.k_x || oz + 2 > layout.k_z {
                        return Err(Error::Config(format!(
                            "3x3 VR at ({}, {}) leaves the array",
                            ox, oz
                        )));
                    }
                }
                Ok(())
            }
            VrSpec::Explicit { visible } => {
                let len = layout.num_subarrays();
                if let Some(&k) = visible.iter().find(|&&k| k == 0 || k > len) {
                    return Err(Error::IndexOutOfRange { index: k, len });
                }
                if visible.is_empty() {
                    return Err(Error::Config("explicit VR lists no sub-array".into()));
                }
                Ok(())
            }
        }
    }

    /// 0-based indices of the sub-arrays inside the region.
    pub fn members<R: Rng + ?Sized>(&self, layout: &ArrayLayout, rng: &mut R) -> Vec<usize> {
        let all = 0..layout.num_subarrays();
        let idx = |kx: usize, kz: usize| kx + layout.k_x * kz;
        match self {
            VrSpec::Full => all.collect(),
            VrSpec::Diagonals => {
                let n = layout.k_x;
                let mut v: Vec<usize> = (0..n).map(|i| idx(i, i)).chain((0..n).map(|i| idx(n - 1 - i, i))).collect();
                v.sort_unstable();
                v.dedup();
                v
            }
            VrSpec::Square3x3 { origin } => {
                let [ox, oz] = origin.unwrap_or_else(|| {
                    [
                        rng.random_range(1..=layout.k_x - 2),
                        rng.random_range(1..=layout.k_z - 2),
                    ]
                });
                let mut v: Vec<usize> = (0..3)
                    .flat_map(|dz| (0..3).map(move |dx| idx(ox - 1 + dx, oz - 1 + dz)))
                    .collect();
                v.sort_unstable();
                v
            }
            VrSpec::Explicit { visible } => {
                let mut v: Vec<usize> = visible.iter().map(|k| k - 1).collect();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }

    pub fn mask<R: Rng + ?Sized>(
        &self,
        layout: &ArrayLayout,
        num_scatterers: usize,
        num_ue: usize,
        rng: &mut R,
    ) -> VisibilityMask {
        let members = self.members(layout, rng);
        self.mask_for(layout, &members, num_scatterers, num_ue)
    }

    /// Mask hiding every path of the sub-arrays not in `members`.
    pub fn mask_for(
        &self,
        layout: &ArrayLayout,
        members: &[usize],
        num_scatterers: usize,
        num_ue: usize,
    ) -> VisibilityMask {
        let mut mask = VisibilityMask::all_visible(layout.num_subarrays(), num_scatterers, num_ue);
        for k in (0..layout.num_subarrays()).filter(|k| !members.contains(k)) {
            for p in 0..num_ue {
                for l in 0..=num_scatterers {
                    mask.set(k, l, p, false);
                }
            }
        }
        mask
    }
}

/// Bandwidth over which the noise density is integrated per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseBandwidth {
    Hz(f64),
    Named(NamedBandwidth),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedBandwidth {
    /// `B / I`.
    Subcarrier,
}

impl NoiseBandwidth {
    pub fn hz(&self, spec: &WidebandSpec) -> f64 {
        match self {
            NoiseBandwidth::Hz(w) => *w,
            NoiseBandwidth::Named(NamedBandwidth::Subcarrier) => spec.bandwidth / spec.num_subcarriers as f64,
        }
    }
}

/// Default integration bandwidth for the noise density. Integrating over a
/// full sub-band leaves the default scene far below any usable SNR; this
/// value puts -20 dBm in the noise-limited regime.
pub const DEFAULT_NOISE_BANDWIDTH_HZ: f64 = 5.0;

fn default_noise_bandwidth() -> NoiseBandwidth {
    NoiseBandwidth::Hz(DEFAULT_NOISE_BANDWIDTH_HZ)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    /// Slots per block.
    #[serde(rename = "T")]
    pub t: usize,
    /// Training blocks.
    #[serde(rename = "N")]
    pub n: usize,
    /// Transmit power per UE (dBm).
    #[serde(rename = "P_t")]
    pub p_t_dbm: f64,
    /// Noise density (dBm/Hz); `-inf` disables noise.
    pub sigma2: f64,
    #[serde(default = "default_noise_bandwidth")]
    pub noise_bandwidth: NoiseBandwidth,
    #[serde(default)]
    pub combiner: CombinerKind,
}

impl TrainingSpec {
    /// Pilot energy over the `T` slots (W x slots).
    pub fn p_t(&self) -> f64 {
        self.t as f64 * dbm_to_watts(self.p_t_dbm)
    }

    pub fn noise_var(&self, spec: &WidebandSpec) -> f64 {
        dbm_to_watts(self.sigma2) * self.noise_bandwidth.hz(spec)
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub delta_omega: f64,
    pub delta_varphi: f64,
    #[serde(default)]
    pub domain: GridDomain,
    pub i_bar: usize,
    pub j_bar: usize,
    /// Blocks picked by SOMP; the first is the LoS estimate.
    #[serde(default = "one")]
    pub somp_iterations: usize,
    /// Largest UE range considered by the delay search (m).
    #[serde(default = "default_d_max")]
    pub d_max: f64,
    /// Delay grid points over `(0, 2 d_max / c)`.
    #[serde(default = "default_toa_steps")]
    pub toa_steps: usize,
    #[serde(default)]
    pub wls: WlsOptions,
    /// Overrides the quantization-derived angle variances.
    #[serde(default)]
    pub angle_variance: Option<AngleVariance>,
}

fn one() -> usize {
    1
}

fn default_d_max() -> f64 {
    100.0
}

fn default_toa_steps() -> usize {
    10_000
}

impl EstimatorConfig {
    pub fn grid(&self) -> GridConfig {
        GridConfig {
            delta_omega: self.delta_omega,
            delta_varphi: self.delta_varphi,
            domain: self.domain,
        }
    }

    pub fn tau_max(&self, c: f64) -> f64 {
        2.0 * self.d_max / c
    }

    pub fn tau_step(&self, c: f64) -> f64 {
        self.tau_max(c) / self.toa_steps as f64
    }

    pub fn angle_variance(&self) -> AngleVariance {
        self.angle_variance
            .unwrap_or_else(|| AngleVariance::from_grid_step(self.delta_omega.max(self.delta_varphi).asin()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(rename = "M_x")]
    pub m_x: usize,
    #[serde(rename = "M_z")]
    pub m_z: usize,
    #[serde(rename = "G_x")]
    pub g_x: usize,
    #[serde(rename = "G_z")]
    pub g_z: usize,
}

fn yes() -> bool {
    true
}

impl BaselineSpec {
    pub fn collocated(&self) -> CollocatedConfig {
        CollocatedConfig {
            m_x: self.m_x,
            m_z: self.m_z,
            g_x: self.g_x,
            g_z: self.g_z,
        }
    }
}

impl Default for BaselineSpec {
    fn default() -> Self {
        let c = CollocatedConfig::default();
        Self {
            enabled: true,
            m_x: c.m_x,
            m_z: c.m_z,
            g_x: c.g_x,
            g_z: c.g_z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Replace each LoS angle pair by its nearest grid point, so that the
    /// true angles are exactly representable by the dictionary.
    #[serde(default)]
    pub on_grid: bool,
    pub layout: ArrayLayout,
    pub wideband: WidebandSpec,
    pub propagation: PropagationParams,
    pub ues: Vec<UeSpec>,
    #[serde(default)]
    pub scatterers: Vec<ScattererSpec>,
    #[serde(default)]
    pub vr: VrSpec,
    pub training: TrainingSpec,
    #[serde(default)]
    pub selection: SelectionConfig,
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub baseline: BaselineSpec,
}

fn default_trials() -> usize {
    200
}

impl SceneConfig {
    /// Default simulation parameters.
    pub fn table1() -> Self {
        let wideband = WidebandSpec {
            f_c: 320e9,
            bandwidth: 4e9,
            num_subcarriers: 5,
            n_c: 1025,
        };
        let lambda_c = SPEED_OF_LIGHT / wideband.f_c;
        Self {
            seed: 1,
            trials: 200,
            on_grid: false,
            layout: ArrayLayout {
                k_x: 5,
                k_z: 5,
                m_x: 5,
                m_z: 5,
                interval: 1.0,
                spacing: lambda_c / 4.0,
                origin: Position::default(),
            },
            wideband,
            propagation: PropagationParams {
                alpha: 2.0,
                absorption: Absorption::Constant { value: 0.0033 },
                c: SPEED_OF_LIGHT,
            },
            ues: vec![
                UeSpec { center: Position::new(-3.0, 3.0, 1.5), jitter: 1.0 },
                UeSpec { center: Position::new(-5.0, 5.0, 2.0), jitter: 1.0 },
            ],
            scatterers: vec![
                ScattererSpec { position: Position::new(5.0, 5.0, 5.0), gamma_mag: 0.5 },
                ScattererSpec { position: Position::new(-20.0, 5.0, 15.0), gamma_mag: 0.5 },
            ],
            vr: VrSpec::Full,
            training: TrainingSpec {
                t: 5,
                n: 25,
                p_t_dbm: 0.0,
                sigma2: -120.0,
                noise_bandwidth: default_noise_bandwidth(),
                combiner: CombinerKind::Dft,
            },
            selection: SelectionConfig::default(),
            estimator: EstimatorConfig {
                delta_omega: 0.01,
                delta_varphi: 0.01,
                domain: GridDomain::Unit,
                i_bar: 8,
                j_bar: 8,
                somp_iterations: 1,
                d_max: default_d_max(),
                toa_steps: default_toa_steps(),
                wls: WlsOptions::default(),
                angle_variance: None,
            },
            baseline: BaselineSpec::default(),
        }
    }

    /// Coarser grids and fewer trials for quick runs.
    pub fn smoke() -> Self {
        let mut cfg = Self::table1();
        cfg.trials = 50;
        cfg.estimator.delta_omega = 0.05;
        cfg.estimator.delta_varphi = 0.05;
        cfg.estimator.i_bar = 2;
        cfg.estimator.j_bar = 2;
        cfg
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        self.wideband.validate()?;
        self.propagation.validate()?;
        if self.ues.is_empty() {
            return Err(Error::Config("no UE in the scene".into()));
        }
        for (p, ue) in self.ues.iter().enumerate() {
            if !(ue.jitter >= 0.0) || !ue.center.is_finite() {
                return Err(Error::Config(format!("UE {} has an invalid drop region", p + 1)));
            }
            if ue.center.y - ue.jitter / 2.0 <= self.layout.origin.y {
                return Err(Error::Config(format!(
                    "UE {} drop region reaches the array plane",
                    p + 1
                )));
            }
        }
        for (l, sc) in self.scatterers.iter().enumerate() {
            if !(sc.gamma_mag > 0.0 && sc.gamma_mag <= 1.0) {
                return Err(Error::Config(format!("scatterer {} needs |Gamma| in (0, 1]", l + 1)));
            }
            if sc.position.y <= self.layout.origin.y {
                return Err(Error::Config(format!("scatterer {} is behind the array", l + 1)));
            }
        }
        self.vr.validate(&self.layout)?;
        self.training_config().validate(&self.layout)?;
        self.selection.validate(self.layout.num_subarrays())?;
        let grid = self.estimator.grid();
        grid.grids()?;
        if self.estimator.somp_iterations == 0 || self.estimator.toa_steps < 2 || !(self.estimator.d_max > 0.0) {
            return Err(Error::Config("estimator settings out of range".into()));
        }
        if self.estimator.wls.max_iter == 0 || !(self.estimator.wls.tol > 0.0) {
            return Err(Error::Config("WLS settings out of range".into()));
        }
        if self.baseline.enabled {
            self.baseline.collocated().validate()?;
        }
        if self.training.noise_var(&self.wideband).is_nan() {
            return Err(Error::Config("noise variance is undefined".into()));
        }
        Ok(())
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            blocks: self.training.n,
            slots: self.training.t,
            p_t: self.training.p_t(),
            noise_var: self.training.noise_var(&self.wideband),
            num_ue: self.ues.len(),
            combiner: self.training.combiner,
        }
    }

    /// Validates and precomputes what every trial shares.
    pub fn prepare(&self) -> Result<Scene> {
        self.validate()?;
        let freqs = subcarrier_frequencies(&self.wideband);
        let wavelengths: Vec<f64> = freqs.iter().map(|f| self.propagation.c / f).collect();
        let dictionaries = build_dictionaries(&self.estimator.grid(), &self.layout, &wavelengths)?;
        Ok(Scene {
            cfg: self.clone(),
            sa_positions: self.layout.sa_positions(),
            wavelengths,
            dictionaries,
            training: self.training_config(),
        })
    }
}

/// A validated configuration with the full-grid dictionaries built.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cfg: SceneConfig,
    pub sa_positions: Vec<Position>,
    pub wavelengths: Vec<f64>,
    pub dictionaries: Vec<AngularDictionary>,
    pub training: TrainingConfig,
}

/// Sets the value at a dotted path in a TOML tree. Numbers are coerced to
/// the type already stored there.
pub fn set_path(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (n, key) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("unknown parameter path {}", path)))?;
        if n + 1 == parts.len() {
            let old = table
                .get(*key)
                .ok_or_else(|| Error::Config(format!("unknown parameter path {}", path)))?;
            let new = parse_like(old, raw)
                .ok_or_else(|| Error::Config(format!("cannot set {} to {}", path, raw)))?;
            table.insert((*key).to_string(), new);
            return Ok(());
        }
        node = table
            .get_mut(*key)
            .ok_or_else(|| Error::Config(format!("unknown parameter path {}", path)))?;
    }
    Err(Error::Config("empty parameter path".into()))
}

fn parse_like(old: &toml::Value, raw: &str) -> Option<toml::Value> {
    let raw = raw.trim();
    match old {
        toml::Value::Float(_) => raw.parse::<f64>().ok().map(toml::Value::Float),
        toml::Value::Integer(_) => raw.parse::<i64>().ok().map(toml::Value::Integer),
        toml::Value::Boolean(_) => raw.parse::<bool>().ok().map(toml::Value::Boolean),
        toml::Value::String(_) => Some(toml::Value::String(raw.to_string())),
        _ => toml::from_str::<toml::Table>(&format!("v = {}", raw))
            .ok()
            .and_then(|t| t.get("v").cloned()),
    }
}

impl SceneConfig {
    /// Copy with the given dotted parameters overridden. Several
    /// comma-separated paths take as many `:`-separated values.
    pub fn with_override(&self, param: &str, value: &str) -> Result<Self> {
        let paths: Vec<&str> = param.split(',').map(str::trim).collect();
        let values: Vec<&str> = value.split(':').collect();
        if paths.len() != values.len() {
            return Err(Error::Config(format!(
                "{} parameters but {} values in {}",
                paths.len(),
                values.len(),
                value
            )));
        }
        let mut tree = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (p, v) in paths.iter().zip(values) {
            set_path(&mut tree, p, v)?;
        }
        tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}
