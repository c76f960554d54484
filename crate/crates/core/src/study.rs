//! Simulation studies: deform, fit and rank by CLAIC over repeated samples.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{anchor_order, fit_deformation_with, DeformConfig, DeformMethod, DeformObjective};
use crate::likelihood::{fit_pairwise_model_with, Family, FitOptions};
use crate::simulate::{derive_seed, ProcessSpec};
use crate::{Error, Result};

/// Label of the undeformed baseline in study tables.
pub const NONE_LABEL: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub process: ProcessSpec,
    pub repetitions: usize,
    pub methods: Vec<DeformMethod>,
    /// Fitted family; `None` picks BR for asymptotically dependent processes and IBR otherwise.
    pub family: Option<Family>,
    /// Deformation settings shared by every method (the method field is overridden).
    pub deform: DeformConfig,
    pub fit: FitOptions,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            process: ProcessSpec::nonstationary_br(0),
            repetitions: 10,
            methods: DeformMethod::ALL.to_vec(),
            family: None,
            deform: DeformConfig::default(),
            fit: FitOptions::default(),
            seed: 1,
        }
    }
}

impl StudyConfig {
    pub fn family(&self) -> Family {
        self.family.unwrap_or(if self.process.asymptotically_dependent() { Family::Br } else { Family::Ibr })
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one deformation method is needed".into()));
        }
        if self.fit.block_b == 0 || self.fit.block_b >= self.process.n_obs {
            return Err(Error::Config(format!("block_b = {} must lie in [1, N)", self.fit.block_b)));
        }
        let d = self.process.grid.n * self.process.grid.n;
        self.deform.validate(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: String,
    pub claic: f64,
    pub lambda_hat: f64,
    pub kappa_hat: f64,
    pub deformation_objective: Option<f64>,
    pub n_anchors: usize,
    /// Objective never increased over the accepted anchor stages.
    pub stages_monotone: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub repetition: usize,
    pub seed: u64,
    pub family: Family,
    pub outcomes: Vec<MethodOutcome>,
    pub winner: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub repetitions: Vec<RepetitionResult>,
    /// Share of repetitions in which each method had the lowest CLAIC.
    pub proportions: BTreeMap<String, f64>,
}

impl StudyResult {
    pub fn proportion(&self, label: &str) -> f64 {
        self.proportions.get(label).copied().unwrap_or(0.0)
    }

    pub fn write_proportions(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "proportion"])?;
        for (m, p) in &self.proportions {
            w.write_record([m.clone(), p.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn stages_monotone(stages: &[crate::deform::StageLog]) -> bool {
    let accepted: Vec<f64> = stages.iter().filter(|s| s.bijective).map(|s| s.objective).collect();
    accepted.windows(2).all(|w| w[1] <= w[0])
}

/// One repetition: simulate, deform with every method from a shared anchor
/// order, fit the family on each plane and record CLAIC.
pub fn run_repetition(config: &StudyConfig, repetition: usize) -> Result<RepetitionResult> {
    let seed = derive_seed(config.seed, repetition as u64);
    let process = ProcessSpec { seed, ..config.process.clone() };
    let g_sites = process.grid.sites()?;
    let obs = process.simulate(&g_sites)?;
    let family = config.family();
    let order = anchor_order(&g_sites, derive_seed(seed, 1))?;

    let base = fit_pairwise_model_with(&obs, &g_sites, family, &config.fit)?;
    let mut outcomes = vec![MethodOutcome {
        method: NONE_LABEL.into(),
        claic: base.claic,
        lambda_hat: base.lambda_hat,
        kappa_hat: base.kappa_hat,
        deformation_objective: None,
        n_anchors: 0,
        stages_monotone: true,
        warning: None,
    }];
    for &method in &config.methods {
        let dc = DeformConfig { method, ..config.deform.clone() };
        let objective = DeformObjective::from_data(&obs, method, dc.q)?;
        let def = fit_deformation_with(&objective, &g_sites, &dc, &order)?;
        let fit = fit_pairwise_model_with(&obs, &def.d_sites, family, &config.fit)?;
        outcomes.push(MethodOutcome {
            method: method.name().into(),
            claic: fit.claic,
            lambda_hat: fit.lambda_hat,
            kappa_hat: fit.kappa_hat,
            deformation_objective: Some(def.objective),
            n_anchors: def.params.n_anchors(),
            stages_monotone: stages_monotone(&def.stages),
            warning: def.warning,
        });
    }
    let winner =
        outcomes.iter().min_by(|a, b| a.claic.total_cmp(&b.claic)).map(|o| o.method.clone()).unwrap_or_default();
    Ok(RepetitionResult { repetition, seed, family, outcomes, winner })
}

fn row_header(methods: &[DeformMethod]) -> Vec<String> {
    let mut h = vec!["repetition".to_string(), "seed".into(), "family".into(), "winner".into()];
    h.push(format!("claic_{NONE_LABEL}"));
    for m in methods {
        h.push(format!("claic_{}", m.name()));
    }
    h
}

fn row_record(r: &RepetitionResult) -> Vec<String> {
    let mut v = vec![r.repetition.to_string(), r.seed.to_string(), r.family.to_string(), r.winner.clone()];
    v.extend(r.outcomes.iter().map(|o| o.claic.to_string()));
    v
}

/// Runs every repetition on `workers` threads. When `rows_path` is given,
/// each finished repetition is appended there immediately.
pub fn run_study(config: &StudyConfig, workers: usize, rows_path: Option<&Path>) -> Result<StudyResult> {
    config.validate()?;
    let sink = match rows_path {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            writeln!(f, "{}", row_header(&config.methods).join(","))?;
            Some(std::sync::Mutex::new(f))
        }
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let reps: Vec<RepetitionResult> = pool.install(|| {
        (0..config.repetitions)
            .into_par_iter()
            .map(|r| {
                let res = run_repetition(config, r)?;
                log::info!("repetition {r}: winner {}", res.winner);
                if let Some(s) = &sink {
                    let mut f = s.lock().expect("row sink poisoned");
                    writeln!(f, "{}", row_record(&res).join(","))?;
                    f.flush()?;
                }
                Ok(res)
            })
            .collect::<Result<_>>()
    })?;
    let mut proportions: BTreeMap<String, f64> = BTreeMap::new();
    proportions.insert(NONE_LABEL.into(), 0.0);
    for m in &config.methods {
        proportions.insert(m.name().into(), 0.0);
    }
    for r in &reps {
        *proportions.entry(r.winner.clone()).or_default() += 1.0 / reps.len() as f64;
    }
    Ok(StudyResult { repetitions: reps, proportions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerSettings;
    use crate::simulate::GridSpec;

    fn tiny() -> StudyConfig {
        let mut process = ProcessSpec::nonstationary_br(0);
        process.grid = GridSpec { n: 4, lo: -1.0, hi: 1.0 };
        process.n_obs = 300;
        StudyConfig {
            process,
            repetitions: 2,
            deform: DeformConfig {
                m0: 3,
                m_star: Some(4),
                optimizer: OptimizerSettings { max_evals: 150, ..Default::default() },
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn tiny_study_runs_and_is_reproducible() {
        let c = tiny();
        let a = run_study(&c, 1, None).unwrap();
        let b = run_study(&c, 2, None).unwrap();
        assert_eq!(a, b);
        let total: f64 = a.proportions.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(a.repetitions[0].outcomes.len(), 5);
        assert!(a.repetitions.iter().all(|r| r.outcomes.iter().all(|o| o.stages_monotone)));
    }

    #[test]
    fn family_defaults_follow_process() {
        assert_eq!(StudyConfig::default().family(), Family::Br);
        let c = StudyConfig { process: ProcessSpec::gaussian_mixture(0), ..Default::default() };
        assert_eq!(c.family(), Family::Ibr);
        let bad = StudyConfig { repetitions: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
