use std::io::Write;

use rayon::prelude::*;

use super::config::{Scene, SceneConfig};
use super::trial::{run_trial, TrialResult, UeResult};
use crate::error::{Error, Result};
use crate::geometry::Position;
use crate::positioning::Stage;

/// Root mean square of the norms of the error vectors.
pub fn rmse(errors: &[Position]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    let ms = errors.iter().map(|e| e.dot(e)).sum::<f64>() / errors.len() as f64;
    Ok(ms.sqrt())
}

/// Runs trials `0..trials` in parallel; the output order and content do not
/// depend on scheduling.
pub fn run_trials(scene: &Scene, trials: usize) -> Result<Vec<TrialResult>> {
    (0..trials as u64)
        .into_par_iter()
        .map(|t| run_trial(scene, t))
        .collect()
}

fn stage_outcome(ue: &UeResult, stage: Stage) -> Option<&super::trial::StageResult> {
    match stage {
        Stage::Coarse => Some(&ue.coarse),
        Stage::Fine => Some(&ue.fine),
        Stage::Baseline => ue.baseline.as_ref(),
    }
}

/// Error vector of a converged estimate, `None` for a failed sample.
pub fn stage_error(ue: &UeResult, stage: Stage) -> Option<Position> {
    match stage_outcome(ue, stage)? {
        Ok(est) if est.converged && est.position.is_finite() => Some(est.position - ue.truth),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    /// `None` when no sample converged.
    pub rmse: Option<f64>,
    pub trials: usize,
    /// Samples (trial x UE) that produced no converged estimate.
    pub failures: usize,
    pub samples: usize,
    pub mean_runtime_s: f64,
    pub mean_atoms: f64,
}

pub fn summarize(results: &[TrialResult], stage: Stage) -> StageSummary {
    let mut errors = Vec::new();
    let mut samples = 0;
    let mut runtime = 0.0;
    let mut atoms = 0.0;
    for r in results {
        for (ue, t) in r.ues.iter().zip(&r.timing) {
            if stage_outcome(ue, stage).is_none() {
                continue;
            }
            samples += 1;
            if let Some(e) = stage_error(ue, stage) {
                errors.push(e);
            }
            let (s, a) = match stage {
                Stage::Coarse => (t.stage1 + t.stage2, ue.atoms_stage1()),
                Stage::Fine => (t.stage1 + t.stage2 + t.stage3, ue.atoms_stage1() + ue.atoms_stage3()),
                Stage::Baseline => (t.baseline, 0),
            };
            runtime += s;
            atoms += a as f64;
        }
    }
    let n = samples.max(1) as f64;
    StageSummary {
        stage,
        rmse: rmse(&errors).ok(),
        trials: results.len(),
        failures: samples - errors.len(),
        samples,
        mean_runtime_s: runtime / n,
        mean_atoms: atoms / n,
    }
}

/// Summaries for the stages the configuration runs. The baseline atom count
/// is the size of its DFT search grid.
pub fn summarize_all(results: &[TrialResult], cfg: &SceneConfig) -> Vec<StageSummary> {
    Stage::ALL
        .iter()
        .filter(|&&s| s != Stage::Baseline || cfg.baseline.enabled)
        .map(|&s| {
            let mut sum = summarize(results, s);
            if s == Stage::Baseline {
                sum.mean_atoms = (cfg.baseline.g_x * cfg.baseline.g_z) as f64;
            }
            sum
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Empty for a single-point run.
    pub value: String,
    pub summary: StageSummary,
}

pub fn simulate(cfg: &SceneConfig, trials: usize) -> Result<Vec<SweepRow>> {
    let scene = cfg.prepare()?;
    let results = run_trials(&scene, trials)?;
    Ok(summarize_all(&results, cfg)
        .into_iter()
        .map(|summary| SweepRow { value: String::new(), summary })
        .collect())
}

/// One block of rows per value of `param` (dotted path, or comma-separated
/// paths with `:`-separated values).
pub fn run_sweep(cfg: &SceneConfig, param: &str, values: &[String], trials: usize) -> Result<Vec<SweepRow>> {
    // validate every point before spending time on any of them
    let configs: Vec<SceneConfig> = values
        .iter()
        .map(|v| {
            let c = cfg.with_override(param, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (v, c) in values.iter().zip(&configs) {
        let scene = c.prepare()?;
        let results = run_trials(&scene, trials)?;
        rows.extend(summarize_all(&results, c).into_iter().map(|summary| SweepRow {
            value: v.clone(),
            summary,
        }));
    }
    Ok(rows)
}

pub const CSV_HEADER: [&str; 7] = [
    "sweep_value",
    "stage",
    "rmse_m",
    "trials",
    "failures",
    "mean_runtime_s",
    "mean_atoms",
];

/// Writes the fixed-schema table; an undefined RMSE is an empty field.
pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Config(format!("writing CSV: {}", e));
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.value.clone(),
            s.stage.as_str().to_string(),
            s.rmse.map(|x| x.to_string()).unwrap_or_default(),
            s.trials.to_string(),
            s.failures.to_string(),
            s.mean_runtime_s.to_string(),
            s.mean_atoms.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::Config(format!("writing CSV: {}", e)))?;
    Ok(())
}

/// True when no stage of any row has a converged sample.
pub fn all_failed(rows: &[SweepRow]) -> bool {
    rows.iter().all(|r| r.summary.rmse.is_none())
}
