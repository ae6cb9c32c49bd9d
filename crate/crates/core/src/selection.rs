//! Visible sub-array detection by normalized received power, and the shortlist
//! of "typical" sub-arrays used for the full-dictionary stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::Decoupled;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    /// Normalized power threshold in `(0, 1)`.
    pub psi: f64,
    /// Number of typical sub-arrays.
    #[serde(rename = "K_Ref")]
    pub k_ref: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { psi: 0.5, k_ref: 3 }
    }
}

impl SelectionConfig {
    pub fn validate(&self, num_sa: usize) -> Result<()> {
        if !(self.psi > 0.0 && self.psi < 1.0) {
            return Err(Error::Config("psi must lie in (0, 1)".into()));
        }
        if self.k_ref < 2 || self.k_ref > num_sa {
            return Err(Error::Config(format!(
                "K_Ref = {} must lie in 2..={}",
                self.k_ref, num_sa
            )));
        }
        Ok(())
    }
}

/// Outcome of the selection for one UE. SA indices are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct SaSelection {
    /// Visible sub-arrays, ascending.
    pub visible: Vec<usize>,
    /// Typical sub-arrays, strongest first.
    pub typical: Vec<usize>,
    pub power: Vec<f64>,
}

impl SaSelection {
    /// Visible sub-arrays that are not typical, ascending.
    pub fn non_typical(&self) -> Vec<usize> {
        self.visible
            .iter()
            .copied()
            .filter(|k| !self.typical.contains(k))
            .collect()
    }
}

/// Root-sum-square of `||z_{k,p}[i]||` over subcarriers, per sub-array.
pub fn compute_power_profile(obs: &Decoupled, p: usize) -> Vec<f64> {
    (0..obs.num_subarrays())
        .map(|k| {
            obs.z_all(k, p)
                .iter()
                .map(|z| z.norm_squared())
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

pub fn select_visible(power: &[f64], cfg: &SelectionConfig) -> Result<SaSelection> {
    let max = power.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = power.iter().copied().fold(f64::INFINITY, f64::min);
    if power.is_empty() || !(max > min) {
        return Err(Error::FlatPowerProfile);
    }
    let span = max - min;
    let visible: Vec<usize> = (0..power.len())
        .filter(|&k| (power[k] - min) / span > cfg.psi)
        .collect();
    let mut ranked = visible.clone();
    // stable sort keeps ascending index among equal powers
    ranked.sort_by(|&a, &b| power[b].partial_cmp(&power[a]).expect("finite power"));
    ranked.truncate(cfg.k_ref);
    Ok(SaSelection {
        visible,
        typical: ranked,
        power: power.to_vec(),
    })
}
