//! Deformation objectives and the incremental anchor-point fit.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ObservationMatrix, SiteSet};
use crate::dependence::{empirical_chi_matrix, empirical_corr_matrix, DependenceKind, DependenceMatrix, Matern};
use crate::optim::{logit, nelder_mead, sigmoid, OptimizerSettings};
use crate::special::norm_cdf;
use crate::tps::{apply_deformation, check_bijectivity, collinear, Domain, SplineParams, DEFAULT_FOLD_RESOLUTION};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeformMethod {
    ChiBr,
    ChiIbr,
    CorrFrob,
    SmithGauss,
}

impl DeformMethod {
    pub const ALL: [DeformMethod; 4] =
        [DeformMethod::ChiBr, DeformMethod::ChiIbr, DeformMethod::CorrFrob, DeformMethod::SmithGauss];

    pub fn name(&self) -> &'static str {
        match self {
            DeformMethod::ChiBr => "chi_br",
            DeformMethod::ChiIbr => "chi_ibr",
            DeformMethod::CorrFrob => "corr_frob",
            DeformMethod::SmithGauss => "smith_gauss",
        }
    }

    /// True for the χ-based objectives, whose shape parameter is κ ∈ (0, 2].
    pub fn is_chi(&self) -> bool {
        matches!(self, DeformMethod::ChiBr | DeformMethod::ChiIbr)
    }
}

impl std::str::FromStr for DeformMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DeformMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown deformation method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformConfig {
    pub method: DeformMethod,
    /// Threshold quantile for the χ-based methods.
    pub q: f64,
    pub m0: usize,
    /// Final number of anchors; `None` means about a quarter of the sites.
    pub m_star: Option<usize>,
    #[serde(alias = "initial_anchor_seed")]
    pub seed: u64,
    /// Settings for each anchor stage.
    pub optimizer: OptimizerSettings,
    pub fold_resolution: usize,
    /// Alternative anchors tried when a stage folds.
    pub anchor_retries: usize,
}

impl Default for DeformConfig {
    fn default() -> Self {
        DeformConfig {
            method: DeformMethod::ChiBr,
            q: 0.9,
            m0: 4,
            m_star: None,
            seed: 1,
            optimizer: OptimizerSettings { max_evals: 1500, xtol: 1e-6, ftol: 1e-9, restarts: 1 },
            fold_resolution: DEFAULT_FOLD_RESOLUTION,
            anchor_retries: 5,
        }
    }
}

impl DeformConfig {
    pub fn m_star_for(&self, d: usize) -> usize {
        self.m_star.unwrap_or_else(|| ((d as f64 / 4.0).round() as usize).max(self.m0))
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.m0 < 3 {
            return Err(Error::Config(format!("m0 = {} must be at least 3", self.m0)));
        }
        let m_star = self.m_star_for(d);
        if m_star < self.m0 {
            return Err(Error::Config(format!("m_star = {m_star} is below m0 = {}", self.m0)));
        }
        if m_star > d {
            return Err(Error::Config(format!("m_star = {m_star} exceeds the number of sites {d}")));
        }
        if self.method.is_chi() && !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::Config(format!("q = {} outside (0, 1)", self.q)));
        }
        Ok(())
    }
}

#[inline]
fn chi_br_unit(h: f64, kappa: f64) -> f64 {
    // λ = 1
    2.0 - 2.0 * norm_cdf((0.5 * h.powf(kappa)).sqrt())
}

fn d_distances(params: &SplineParams, g_sites: &SiteSet) -> Option<Vec<f64>> {
    let mapped = params.map_coords(&g_sites.coords());
    if mapped.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return None;
    }
    let d = mapped.len();
    let mut out = Vec::with_capacity(d * (d - 1) / 2);
    for i in 0..d {
        for j in (i + 1)..d {
            out.push((mapped[i].0 - mapped[j].0).hypot(mapped[i].1 - mapped[j].1));
        }
    }
    Some(out)
}

/// Frobenius discrepancy over ordered off-diagonal pairs.
fn frobenius(target: &DMatrix<f64>, dists: &[f64], model: impl Fn(f64) -> f64) -> f64 {
    let d = target.nrows();
    let mut k = 0;
    let mut s = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            let m = model(dists[k]);
            k += 1;
            s += (m - target[(i, j)]).powi(2) + (m - target[(j, i)]).powi(2);
        }
    }
    let v = s.sqrt();
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// `‖χ(h*) − χ̂‖_F` with λ = 1, using `params.kappa` as the shape.
pub fn chi_frobenius_objective(
    params: &SplineParams,
    chi_hat: &DependenceMatrix,
    g_sites: &SiteSet,
    method: DeformMethod,
    q: f64,
) -> Result<f64> {
    if chi_hat.kind != DependenceKind::ChiQ {
        return Err(Error::Config("chi objective needs a chi_q matrix".into()));
    }
    if !method.is_chi() {
        return Err(Error::Config(format!("{} is not a chi method", method.name())));
    }
    Ok(chi_objective(params, &chi_hat.values, g_sites, method, q))
}

fn chi_objective(params: &SplineParams, target: &DMatrix<f64>, g_sites: &SiteSet, method: DeformMethod, q: f64) -> f64 {
    let Some(dists) = d_distances(params, g_sites) else {
        return f64::INFINITY;
    };
    let kappa = params.kappa;
    match method {
        DeformMethod::ChiIbr => {
            let log_tail = (1.0 - q).ln();
            frobenius(target, &dists, |h| {
                let theta = 2.0 - chi_br_unit(h, kappa);
                ((theta - 1.0) * log_tail).exp()
            })
        }
        _ => frobenius(target, &dists, |h| chi_br_unit(h, kappa)),
    }
}

/// `‖Matérn(h*; 1, θ2) − ρ̂‖_F` with `θ2 = params.kappa`.
pub fn corr_frobenius_objective(
    params: &SplineParams,
    rho_hat: &DependenceMatrix,
    g_sites: &SiteSet,
    theta2: f64,
) -> Result<f64> {
    if rho_hat.kind != DependenceKind::Correlation {
        return Err(Error::Config("correlation objective needs a correlation matrix".into()));
    }
    Ok(corr_objective(params, &rho_hat.values, g_sites, theta2))
}

fn corr_objective(params: &SplineParams, target: &DMatrix<f64>, g_sites: &SiteSet, theta2: f64) -> f64 {
    let Ok(m) = Matern::new(1.0, theta2) else {
        return f64::INFINITY;
    };
    let Some(dists) = d_distances(params, g_sites) else {
        return f64::INFINITY;
    };
    frobenius(target, &dists, |h| m.corr(h))
}

/// Gaussian negative log-likelihood `(N/2) log|Ω| + ((N−1)/2) tr(Ω⁻¹Ω̂)` with Ω Matérn(1, θ2) at D-plane distances.
pub fn smith_gaussian_objective(
    params: &SplineParams,
    sample_corr: &DependenceMatrix,
    g_sites: &SiteSet,
    theta2: f64,
    n_obs: usize,
) -> Result<f64> {
    if sample_corr.kind != DependenceKind::Correlation {
        return Err(Error::Config("Gaussian objective needs a correlation matrix".into()));
    }
    Ok(smith_objective(params, &sample_corr.values, g_sites, theta2, n_obs))
}

fn smith_objective(params: &SplineParams, target: &DMatrix<f64>, g_sites: &SiteSet, theta2: f64, n: usize) -> f64 {
    let Ok(m) = Matern::new(1.0, theta2) else {
        return f64::INFINITY;
    };
    let Some(dists) = d_distances(params, g_sites) else {
        return f64::INFINITY;
    };
    let d = target.nrows();
    let mut omega = DMatrix::identity(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in (i + 1)..d {
            let c = m.corr(dists[k]);
            k += 1;
            omega[(i, j)] = c;
            omega[(j, i)] = c;
        }
    }
    gaussian_nll(&omega, target, n)
}

/// `(N/2) log|Ω| + ((N−1)/2) tr(Ω⁻¹S)`; +∞ when Ω is not numerically positive definite.
pub fn gaussian_nll(omega: &DMatrix<f64>, sample: &DMatrix<f64>, n: usize) -> f64 {
    let Some(chol) = Cholesky::<f64, Dyn>::new(omega.clone()) else {
        return f64::INFINITY;
    };
    let l = chol.l_dirty();
    let mut logdet = 0.0;
    for i in 0..l.nrows() {
        let v = l[(i, i)];
        if !(v > 1e-10) {
            return f64::INFINITY;
        }
        logdet += 2.0 * v.ln();
    }
    let tr = chol.solve(sample).trace();
    let v = 0.5 * n as f64 * logdet + 0.5 * (n as f64 - 1.0) * tr;
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Prepared objective: target matrix plus the method-specific constants.
#[derive(Debug, Clone)]
pub struct DeformObjective {
    pub method: DeformMethod,
    pub target: DMatrix<f64>,
    pub q: f64,
    pub n_obs: usize,
}

impl DeformObjective {
    pub fn from_data(obs: &ObservationMatrix, method: DeformMethod, q: f64) -> Result<Self> {
        let target =
            if method.is_chi() { empirical_chi_matrix(obs, q)?.values } else { empirical_corr_matrix(obs)?.values };
        Ok(DeformObjective { method, target, q, n_obs: obs.n_obs() })
    }

    /// Model χ or correlation at distance `h` (λ = θ1 = 1).
    pub fn model_at(&self, h: f64, shape: f64) -> f64 {
        match self.method {
            DeformMethod::ChiBr => chi_br_unit(h, shape),
            DeformMethod::ChiIbr => ((1.0 - chi_br_unit(h, shape)) * (1.0 - self.q).ln()).exp(),
            _ => Matern::new(1.0, shape).map(|m| m.corr(h)).unwrap_or(f64::NAN),
        }
    }

    /// Objective value; `params.kappa` is κ for χ methods and θ2 for the Matérn methods.
    pub fn value(&self, params: &SplineParams, g_sites: &SiteSet) -> f64 {
        match self.method {
            DeformMethod::ChiBr | DeformMethod::ChiIbr => {
                chi_objective(params, &self.target, g_sites, self.method, self.q)
            }
            DeformMethod::CorrFrob => corr_objective(params, &self.target, g_sites, params.kappa),
            DeformMethod::SmithGauss => smith_objective(params, &self.target, g_sites, params.kappa, self.n_obs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    /// Id of the anchor added at this stage (empty for the initial set).
    pub anchor_added: String,
    pub n_anchors: usize,
    pub objective: f64,
    pub bijective: bool,
    /// Objective at the warm start, before optimisation.
    pub start_objective: f64,
    pub evals: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeformationResult {
    pub method: DeformMethod,
    pub params: SplineParams,
    pub anchor_ids: Vec<String>,
    pub d_sites: SiteSet,
    pub objective: f64,
    pub bijective: bool,
    /// Every attempted stage, accepted or not.
    pub stages: Vec<StageLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl DeformationResult {
    /// κ for χ methods, Matérn θ2 otherwise.
    pub fn shape(&self) -> f64 {
        self.params.kappa
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    pub fn write_stage_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["stage", "anchor_added", "n_anchors", "start_objective", "objective", "bijective", "evals"])?;
        for s in &self.stages {
            w.write_record([
                s.stage.to_string(),
                s.anchor_added.clone(),
                s.n_anchors.to_string(),
                s.start_objective.to_string(),
                s.objective.to_string(),
                s.bijective.to_string(),
                s.evals.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seeded anchor order: a permutation of `0..d` whose first three sites are not collinear.
pub fn anchor_order(g_sites: &SiteSet, seed: u64) -> Result<Vec<usize>> {
    let d = g_sites.len();
    let mut order: Vec<usize> = (0..d).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    if d < 3 {
        return Ok(order);
    }
    let c = |k: usize| g_sites.coord(order[k]);
    if collinear(c(0), c(1), c(2)) {
        let pos = (3..d)
            .find(|&k| !collinear(c(0), c(1), g_sites.coord(order[k])))
            .ok_or_else(|| Error::Config("all sites are collinear".into()))?;
        order.swap(2, pos);
    }
    Ok(order)
}

/// Packing of the optimisation vector:
/// `[ln b1, ln b2, atanh ρ, shape transform, free δ¹..., free δ²...]`.
struct Packing<'a> {
    method: DeformMethod,
    anchors: &'a [usize],
    g_sites: &'a SiteSet,
}

impl Packing<'_> {
    fn n_free_deltas(&self) -> usize {
        self.anchors.len().saturating_sub(3)
    }

    fn shape_to(&self, s: f64) -> f64 {
        if self.method.is_chi() {
            2.0 * sigmoid(s)
        } else {
            s.exp()
        }
    }

    fn shape_from(&self, v: f64) -> f64 {
        if self.method.is_chi() {
            logit((v / 2.0).clamp(1e-9, 1.0 - 1e-9))
        } else {
            v.ln()
        }
    }

    fn unpack(&self, t: &[f64]) -> Option<SplineParams> {
        let k = self.n_free_deltas();
        let (b1, b2, rho) = (t[0].exp(), t[1].exp(), t[2].tanh());
        let kappa = self.shape_to(t[3]);
        if !(b1.is_finite() && b2.is_finite() && kappa.is_finite() && kappa > 0.0) {
            return None;
        }
        if self.anchors.is_empty() {
            let mut p = SplineParams::affine(b1, b2, rho);
            p.kappa = kappa;
            return Some(p);
        }
        SplineParams::from_free(b1, b2, rho, kappa, self.anchors, self.g_sites, &t[4..4 + k], &t[4 + k..4 + 2 * k]).ok()
    }

    fn pack(&self, p: &SplineParams) -> Vec<f64> {
        let k = self.n_free_deltas();
        let mut t = vec![p.b1.ln(), p.b2.ln(), p.rho.clamp(-0.999_999, 0.999_999).atanh(), self.shape_from(p.kappa)];
        for src in [&p.delta1, &p.delta2] {
            for i in 0..k {
                t.push(src.get(3 + i).copied().unwrap_or(0.0));
            }
        }
        t
    }
}

fn median_distance(g_sites: &SiteSet) -> f64 {
    let d = g_sites.len();
    let mut v = Vec::with_capacity(d * (d - 1) / 2);
    for i in 0..d {
        for j in (i + 1)..d {
            v.push(g_sites.distance(i, j));
        }
    }
    v.sort_by(f64::total_cmp);
    v.get(v.len() / 2).copied().filter(|x| *x > 0.0).unwrap_or(1.0)
}

/// Fits the restricted spline by the incremental anchor procedure.
pub fn fit_deformation(obs: &ObservationMatrix, g_sites: &SiteSet, config: &DeformConfig) -> Result<DeformationResult> {
    obs.check_sites(g_sites)?;
    config.validate(g_sites.len())?;
    let objective = DeformObjective::from_data(obs, config.method, config.q)?;
    let order = anchor_order(g_sites, config.seed)?;
    fit_deformation_with(&objective, g_sites, config, &order)
}

/// Incremental fit for a prepared objective and a given anchor order.
pub fn fit_deformation_with(
    objective: &DeformObjective,
    g_sites: &SiteSet,
    config: &DeformConfig,
    order: &[usize],
) -> Result<DeformationResult> {
    let d = g_sites.len();
    config.validate(d)?;
    if objective.target.nrows() != d {
        return Err(Error::DimensionMismatch(format!(
            "dependence matrix is {}x{} for {} sites",
            objective.target.nrows(),
            objective.target.ncols(),
            d
        )));
    }
    let m_star = config.m_star_for(d);
    let domain = Domain::around(g_sites);
    let ids = g_sites.ids();
    let med = median_distance(g_sites);
    let b0 = 1.0 / med.sqrt();
    // typical |g| at G-plane distances sets the delta step
    let g_typ = (med * med * med.ln()).abs().max(med * med * 0.1);
    let delta_step = 0.05 * b0 * b0 * med / g_typ;

    let run = |anchors: &[usize], x0: &[f64]| -> (Option<SplineParams>, f64, f64, usize, Vec<f64>) {
        let pk = Packing { method: config.method, anchors, g_sites };
        let f = |t: &[f64]| match pk.unpack(t) {
            Some(p) => objective.value(&p, g_sites),
            None => f64::INFINITY,
        };
        let start_value = f(x0);
        let mut step = vec![0.2, 0.2, 0.2, 0.4];
        step.resize(x0.len(), delta_step);
        let m = nelder_mead(f, x0, &step, &config.optimizer);
        (pk.unpack(&m.x), m.value, start_value, m.evals, m.x)
    };
    let pack = |anchors: &[usize], p: &SplineParams| Packing { method: config.method, anchors, g_sites }.pack(p);

    let mut start = SplineParams::affine(b0, b0, 0.0);
    start.kappa = 1.0;
    let mut stages = Vec::new();
    let mut warning = None;

    // initial set, replacing its last member on failure
    let mut pool: Vec<usize> = order[config.m0..].to_vec();
    let mut anchors: Vec<usize> = order[..config.m0].to_vec();
    let mut accepted: Option<(SplineParams, f64, Vec<f64>)> = None;
    for attempt in 0..=config.anchor_retries {
        let (p, v, sv, ev, x) = run(&anchors, &pack(&anchors, &start));
        let p = p.unwrap_or_else(|| start.clone());
        let bij = check_bijectivity(&p, &domain, config.fold_resolution);
        stages.push(StageLog {
            stage: 0,
            anchor_added: String::new(),
            n_anchors: anchors.len(),
            objective: v,
            bijective: bij,
            start_objective: sv,
            evals: ev,
        });
        if bij {
            accepted = Some((p, v, x));
            break;
        }
        if attempt == config.anchor_retries || pool.is_empty() {
            break;
        }
        let last = anchors.len() - 1;
        let replaced = std::mem::replace(&mut anchors[last], pool.remove(0));
        pool.push(replaced);
    }
    let (mut best, mut best_value, mut best_x) = match accepted {
        Some(a) => a,
        None => {
            // affine maps with |ρ| < 1 never fold
            anchors.clear();
            let (p, v, sv, ev, _) = run(&[], &pack(&[], &start));
            let p = p.unwrap_or(start);
            stages.push(StageLog {
                stage: 0,
                anchor_added: String::new(),
                n_anchors: 0,
                objective: v,
                bijective: true,
                start_objective: sv,
                evals: ev,
            });
            warning = Some("no bijective deformation with the initial anchors; returning the affine fit".into());
            return finish(config.method, p, v, g_sites, &ids, stages, warning);
        }
    };

    let mut stage = 0;
    while anchors.len() < m_star && !pool.is_empty() {
        stage += 1;
        let mut ok = false;
        for (tries, k) in (0..pool.len()).enumerate() {
            if tries > config.anchor_retries {
                break;
            }
            let candidate = pool[k];
            let mut trial = anchors.clone();
            trial.push(candidate);
            // the previous optimum with a zero delta at the new anchor
            let k = anchors.len().saturating_sub(3);
            let mut x0 = best_x[..4 + k].to_vec();
            x0.push(0.0);
            x0.extend_from_slice(&best_x[4 + k..]);
            x0.push(0.0);
            let (p, v, sv, ev, x) = run(&trial, &x0);
            let (p, v, x) = match p {
                Some(p) if v < best_value => (p, v, x),
                _ => {
                    let mut same = best.clone();
                    same.anchors = trial.clone();
                    same.anchor_coords.push(g_sites.coord(candidate));
                    same.delta1.push(0.0);
                    same.delta2.push(0.0);
                    (same, best_value, x0)
                }
            };
            let bij = check_bijectivity(&p, &domain, config.fold_resolution);
            stages.push(StageLog {
                stage,
                anchor_added: ids[candidate].clone(),
                n_anchors: trial.len(),
                objective: v,
                bijective: bij,
                start_objective: sv,
                evals: ev,
            });
            if bij {
                pool.remove(k);
                anchors = trial;
                best = p;
                best_value = v;
                best_x = x;
                ok = true;
                break;
            }
        }
        if !ok {
            warning = Some(format!(
                "stage {stage}: no bijective deformation after {} anchor attempts; returning {} anchors",
                config.anchor_retries + 1,
                anchors.len()
            ));
            log::warn!("{}", warning.as_deref().unwrap_or_default());
            break;
        }
    }
    finish(config.method, best, best_value, g_sites, &ids, stages, warning)
}

fn finish(
    method: DeformMethod,
    params: SplineParams,
    objective: f64,
    g_sites: &SiteSet,
    ids: &[String],
    stages: Vec<StageLog>,
    warning: Option<String>,
) -> Result<DeformationResult> {
    let d_sites = apply_deformation(&params, g_sites)?;
    Ok(DeformationResult {
        method,
        anchor_ids: params.anchors.iter().map(|&i| ids[i].clone()).collect(),
        params,
        d_sites,
        objective,
        bijective: true,
        stages,
        warning,
    })
}

/// Best isotropic rescaling without deformation, for before/after comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub objective: f64,
    /// Distances are multiplied by `scale²`.
    pub scale: f64,
    pub shape: f64,
}

pub fn baseline_objective(objective: &DeformObjective, g_sites: &SiteSet) -> Baseline {
    let is_chi = objective.method.is_chi();
    let med = median_distance(g_sites);
    let f = |t: &[f64]| {
        let b = t[0].exp();
        let mut p = SplineParams::affine(b, b, 0.0);
        p.kappa = if is_chi { 2.0 * sigmoid(t[1]) } else { t[1].exp() };
        objective.value(&p, g_sites)
    };
    let settings = OptimizerSettings { max_evals: 400, xtol: 1e-8, ftol: 1e-12, restarts: 1 };
    let m = nelder_mead(f, &[-0.5 * med.ln(), 0.0], &[0.3, 0.4], &settings);
    let shape = if is_chi { 2.0 * sigmoid(m.x[1]) } else { m.x[1].exp() };
    Baseline { objective: m.value, scale: m.x[0].exp(), shape }
}
