//! Triple-wise χ with stationary-bootstrap intervals, and pairwise
//! conditional-extremes fits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ObservationMatrix, Plane, Scale, SiteSet};
use crate::dependence::{extremal_coefficient, power_variogram};
use crate::likelihood::{exp_threshold, Family, ModelFit};
use crate::optim::{bfgs, sigmoid};
use crate::simulate::{derive_seed, seeded_rng};
use crate::special::{norm_cdf, norm_quantile};
use crate::{Error, Result};

const DIAG_STREAM: u64 = 11;

fn check_triple(d: usize, i: usize, j: usize, k: usize) -> Result<()> {
    if i == j || i == k || j == k {
        return Err(Error::Config(format!("triple ({i}, {j}, {k}) is not three distinct sites")));
    }
    if i.max(j).max(k) >= d {
        return Err(Error::DimensionMismatch(format!("triple ({i}, {j}, {k}) out of range for {d} sites")));
    }
    Ok(())
}

fn conditional_frequency(u: &[[f64; 3]], rows: impl Iterator<Item = usize>, q: f64) -> Option<f64> {
    let (mut cond, mut joint) = (0usize, 0usize);
    for t in rows {
        let r = u[t];
        if r[2] > q {
            cond += 1;
            if r[0] > q && r[1] > q {
                joint += 1;
            }
        }
    }
    (cond > 0).then(|| joint as f64 / cond as f64)
}

fn uniform_triple(obs: &ObservationMatrix, i: usize, j: usize, k: usize) -> Result<Vec<[f64; 3]>> {
    check_triple(obs.n_sites(), i, j, k)?;
    let u = obs.to_scale(Scale::Uniform)?;
    let v = u.values();
    Ok((0..u.n_obs()).map(|t| [v[(t, i)], v[(t, j)], v[(t, k)]]).collect())
}

/// `P(U_i > q, U_j > q | U_k > q)` on rank-based uniform margins.
pub fn triple_chi_empirical(obs: &ObservationMatrix, i: usize, j: usize, k: usize, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("q = {q} outside (0, 1)")));
    }
    let u = uniform_triple(obs, i, j, k)?;
    conditional_frequency(&u, 0..u.len(), q).ok_or_else(|| Error::NoExceedances { site: obs.site_ids()[k].clone(), q })
}

/// Row indices of one stationary-bootstrap series: blocks of geometric
/// length with mean `mean_block`, uniform starts, circular wrap, cut to `n`.
pub fn stationary_bootstrap_indices<R: Rng>(n: usize, mean_block: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(mean_block >= 1.0) {
        return Err(Error::Config(format!("mean block length {mean_block} must be at least 1")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let geom = Geometric::new(1.0 / mean_block).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let start = rng.gen_range(0..n);
        let len = 1 + geom.sample(rng) as usize;
        for s in 0..len.min(n - out.len()) {
            out.push((start + s) % n);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapSettings {
    pub mean_block: f64,
    pub n_boot: usize,
    pub levels: (f64, f64),
    pub seed: u64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        BootstrapSettings { mean_block: 14.0, n_boot: 1000, levels: (0.025, 0.975), seed: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    /// Resamples with at least one conditioning exceedance.
    pub n_valid: usize,
}

/// Linear-interpolation sample quantile of sorted data.
fn quantile_sorted(xs: &[f64], p: f64) -> f64 {
    let h = p * (xs.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(xs.len() - 1);
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

/// Stationary-bootstrap percentile interval for the empirical triple χ.
/// Margins are ranked once on the full sample and rows are resampled.
pub fn stationary_bootstrap_ci(
    obs: &ObservationMatrix,
    i: usize,
    j: usize,
    k: usize,
    q: f64,
    settings: &BootstrapSettings,
) -> Result<BootstrapCi> {
    if settings.n_boot < 100 {
        return Err(Error::Config(format!("n_boot = {} is below 100", settings.n_boot)));
    }
    let (lo, hi) = settings.levels;
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::Config(format!("invalid interval levels ({lo}, {hi})")));
    }
    let u = uniform_triple(obs, i, j, k)?;
    let n = u.len();
    let draws: Vec<Option<f64>> = (0..settings.n_boot)
        .into_par_iter()
        .map(|b| -> Result<Option<f64>> {
            let mut rng = seeded_rng(derive_seed(settings.seed, b as u64), DIAG_STREAM);
            let idx = stationary_bootstrap_indices(n, settings.mean_block, &mut rng)?;
            Ok(conditional_frequency(&u, idx.into_iter(), q))
        })
        .collect::<Result<_>>()?;
    let mut vals: Vec<f64> = draws.into_iter().flatten().collect();
    if vals.is_empty() {
        return Err(Error::NoExceedances { site: obs.site_ids()[k].clone(), q });
    }
    vals.sort_by(f64::total_cmp);
    Ok(BootstrapCi { low: quantile_sorted(&vals, lo), high: quantile_sorted(&vals, hi), n_valid: vals.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McSettings {
    pub samples: usize,
    pub seed: u64,
    /// Standard error above which the result carries a warning.
    pub tolerance: f64,
}

impl Default for McSettings {
    fn default() -> Self {
        McSettings { samples: 100_000, seed: 1, tolerance: 5e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleTheory {
    pub chi: f64,
    /// Trivariate exponent `V_3(1, 1, 1)`.
    pub v3: f64,
    pub std_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// `V_3(1,1,1)` for a Brown–Resnick field with semivariogram `gamma`, by
/// conditional Monte Carlo over the spectral functions tilted at each site.
///
/// For conditioning site `k` the term is
/// `P(W_l − W_k ≤ γ_lk, W_m − W_k ≤ γ_mk)`; the first coordinate is drawn from
/// its truncated law and the second integrated out exactly.
pub fn br_v3_monte_carlo(gamma: [[f64; 3]; 3], settings: &McSettings) -> Result<(f64, f64)> {
    if settings.samples < 2 {
        return Err(Error::Config("Monte Carlo needs at least 2 samples".into()));
    }
    struct Term {
        p_first: f64,
        sd_first: f64,
        a_first: f64,
        slope: f64,
        sd_cond: f64,
        a_second: f64,
    }
    let terms: Vec<Term> = (0..3)
        .map(|k| {
            let (l, m) = ((k + 1) % 3, (k + 2) % 3);
            let s_ll = 2.0 * gamma[l][k];
            let s_mm = 2.0 * gamma[m][k];
            let s_lm = gamma[l][k] + gamma[m][k] - gamma[l][m];
            let sd_first = s_ll.sqrt();
            let slope = s_lm / s_ll;
            let sd_cond = (s_mm - s_lm * slope).max(0.0).sqrt();
            Term {
                p_first: norm_cdf(gamma[l][k] / sd_first),
                sd_first,
                a_first: gamma[l][k],
                slope,
                sd_cond,
                a_second: gamma[m][k],
            }
        })
        .collect();
    for t in &terms {
        if !(t.sd_first > 0.0 && t.sd_first.is_finite()) {
            return Err(Error::Domain("coincident sites in trivariate exponent".into()));
        }
    }
    let mut rng = seeded_rng(settings.seed, DIAG_STREAM + 1);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..settings.samples {
        let v: f64 = rng.gen();
        let mut s = 0.0;
        for t in &terms {
            let p = (v * t.p_first).max(f64::MIN_POSITIVE);
            let x = (t.sd_first * norm_quantile(p)).min(t.a_first);
            let rest = t.a_second - t.slope * x;
            let inner = if t.sd_cond > 1e-12 * t.sd_first {
                norm_cdf(rest / t.sd_cond)
            } else if rest >= 0.0 {
                1.0
            } else {
                0.0
            };
            s += t.p_first * inner;
        }
        sum += s;
        sum_sq += s * s;
    }
    let n = settings.samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Theoretical triple χ for a fitted stationary model at three coordinates in
/// the fitting plane; the third coordinate is the conditioning site.
pub fn triple_chi_model(
    family: Family,
    lambda: f64,
    kappa: f64,
    coords: [(f64, f64); 3],
    q: f64,
    settings: &McSettings,
) -> Result<TripleTheory> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("q = {q} outside (0, 1)")));
    }
    let dist = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).hypot(a.1 - b.1);
    // coincident coordinates collapse to one site
    let mut unique: Vec<(f64, f64)> = Vec::new();
    for c in coords {
        if !unique.iter().any(|&u| dist(u, c) <= 1e-12) {
            unique.push(c);
        }
    }
    let (v3, se) = match unique.len() {
        1 => (1.0, 0.0),
        2 => (extremal_coefficient(dist(unique[0], unique[1]), kappa, lambda)?, 0.0),
        _ => {
            let mut g = [[0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    g[a][b] = power_variogram(dist(unique[a], unique[b]), kappa, lambda);
                }
            }
            br_v3_monte_carlo(g, settings)?
        }
    };
    let (chi, se_chi) = match family {
        Family::Br => {
            let mut v2 = 0.0;
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                v2 += extremal_coefficient(dist(coords[a], coords[b]), kappa, lambda)?;
            }
            (3.0 - v2 + v3, se)
        }
        Family::Ibr => {
            let c = ((v3 - 1.0) * (1.0 - q).ln()).exp();
            (c, c * (1.0 - q).ln().abs() * se)
        }
    };
    let warning = (se_chi > settings.tolerance)
        .then(|| format!("Monte Carlo standard error {se_chi:.2e} exceeds tolerance {:.2e}", settings.tolerance));
    Ok(TripleTheory { chi, v3, std_error: se_chi, warning })
}

/// Theoretical triple χ from a fitted model at sites `i`, `j`, `k` of `sites`
/// (which must be the plane the model was fitted in).
pub fn triple_chi_theoretical(
    fit: &ModelFit,
    sites: &SiteSet,
    (i, j, k): (usize, usize, usize),
    q: f64,
    settings: &McSettings,
) -> Result<TripleTheory> {
    check_triple(sites.len(), i, j, k)?;
    if settings.samples < 100_000 {
        return Err(Error::Config(format!("mc_samples = {} is below 100000", settings.samples)));
    }
    let coords = [sites.coord(i), sites.coord(j), sites.coord(k)];
    triple_chi_model(fit.family, fit.lambda_hat, fit.kappa_hat, coords, q, settings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transect {
    EastWest,
    NorthSouth,
}

impl std::str::FromStr for Transect {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "east_west" | "ew" => Ok(Transect::EastWest),
            "north_south" | "ns" => Ok(Transect::NorthSouth),
            _ => Err(Error::Config(format!("unknown transect '{s}'"))),
        }
    }
}

/// Runs of three equally spaced neighbours along rows (east–west) or columns
/// (north–south). Each triple is `(i, j, k)` with the middle site as `k`.
pub fn transect_triples(sites: &SiteSet, transect: Transect) -> Vec<(usize, usize, usize)> {
    let key = |v: f64| (v * 1e9).round() as i64;
    let mut lines: BTreeMap<i64, Vec<(f64, usize)>> = BTreeMap::new();
    for (idx, &(x, y)) in sites.coords().iter().enumerate() {
        let (line, pos) = match transect {
            Transect::EastWest => (y, x),
            Transect::NorthSouth => (x, y),
        };
        lines.entry(key(line)).or_default().push((pos, idx));
    }
    let mut out = Vec::new();
    for mut members in lines.into_values() {
        members.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in members.windows(3) {
            let (s1, s2) = (w[1].0 - w[0].0, w[2].0 - w[1].0);
            if (s1 - s2).abs() <= 1e-9 * s1.abs().max(s2.abs()) {
                out.push((w[0].1, w[2].1, w[1].1));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleChiReport {
    pub sites: (String, String, String),
    pub empirical: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub theoretical: f64,
    pub theoretical_se: f64,
    pub q: f64,
}

pub fn write_triple_reports(rows: &[TripleChiReport], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "site_i",
        "site_j",
        "site_k",
        "q",
        "empirical",
        "ci_low",
        "ci_high",
        "theoretical",
        "theoretical_se",
    ])?;
    for r in rows {
        w.write_record([
            r.sites.0.clone(),
            r.sites.1.clone(),
            r.sites.2.clone(),
            r.q.to_string(),
            r.empirical.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            r.theoretical.to_string(),
            r.theoretical_se.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Smallest residual scale reported by the conditional-extremes fit.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondExtFit {
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub threshold_u: f64,
    pub pair: (String, String),
    pub n_exceed: usize,
    /// Some parameter sits on the edge of its box or σ̂ on the floor.
    pub at_boundary: bool,
    pub loglik: f64,
}

struct Profile {
    alpha: f64,
    beta: f64,
    mu: f64,
    sigma: f64,
    loglik: f64,
}

fn profile(x: &[f64], y: &[f64], alpha: f64, beta: f64) -> Profile {
    let n = x.len() as f64;
    let z: Vec<f64> = x.iter().zip(y).map(|(&a, &b)| (b - alpha * a) / a.powf(beta)).collect();
    let mu = z.iter().sum::<f64>() / n;
    let ss: f64 = z.iter().map(|v| (v - mu).powi(2)).sum();
    let sigma = (ss / n).sqrt().max(SIGMA_FLOOR);
    let log_x: f64 = x.iter().map(|a| a.ln()).sum();
    let loglik =
        -beta * log_x - n * sigma.ln() - 0.5 * ss / (sigma * sigma) - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    Profile { alpha, beta, mu, sigma, loglik }
}

/// Gaussian working-likelihood fit of `y = αx + x^β Z`, `Z ~ N(μ, σ²)`, on
/// conditioning values `x > u`. μ and σ are profiled out.
pub fn fit_condext(x: &[f64], y: &[f64], u: f64, seed: u64) -> Result<(f64, f64, f64, f64, bool, f64)> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch("conditioning and response lengths differ".into()));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = x.iter().zip(y).filter(|(a, _)| **a > u).map(|(a, b)| (*a, *b)).unzip();
    if xs.len() < 10 {
        return Err(Error::Config(format!("only {} exceedances of u = {u}; at least 10 needed", xs.len())));
    }
    if xs.iter().any(|&a| a <= 0.0) {
        return Err(Error::Domain("conditioning values must be positive above the threshold".into()));
    }
    let obj = |t: &[f64]| -profile(&xs, &ys, sigmoid(t[0]), sigmoid(t[1])).loglik;
    let mut rng = seeded_rng(seed, DIAG_STREAM + 2);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..5 {
        let x0 = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let m = bfgs(obj, &x0, 200, 1e-7);
        if best.as_ref().is_none_or(|b| m.value < b.1) {
            best = Some((m.x, m.value));
        }
    }
    let (t, _) = best.expect("five restarts");
    let p = profile(&xs, &ys, sigmoid(t[0]), sigmoid(t[1]));
    if !p.loglik.is_finite() {
        return Err(Error::Convergence("conditional-extremes likelihood is not finite".into()));
    }
    let edge = 1e-6;
    let at_boundary = p.sigma <= SIGMA_FLOOR * (1.0 + 1e-9)
        || p.alpha < edge
        || p.alpha > 1.0 - edge
        || p.beta < edge
        || p.beta > 1.0 - edge;
    Ok((p.alpha, p.beta, p.mu, p.sigma, at_boundary, p.loglik))
}

/// Conditional-extremes fit of site `j` given site `i` exceeding its
/// `u_quantile` on exponential margins.
pub fn fit_condext_pair(obs: &ObservationMatrix, i: usize, j: usize, u_quantile: f64, seed: u64) -> Result<CondExtFit> {
    if i == j || i.max(j) >= obs.n_sites() {
        return Err(Error::Config(format!("invalid pair ({i}, {j})")));
    }
    let e = obs.to_scale(Scale::Exponential)?;
    if !(u_quantile > 0.0 && u_quantile < 1.0) {
        return Err(Error::Domain(format!("u_quantile = {u_quantile} outside (0, 1)")));
    }
    let u = exp_threshold(u_quantile);
    let (x, y) = (e.column(i), e.column(j));
    let n_exceed = x.iter().filter(|&&v| v > u).count();
    let (alpha, beta, mu, sigma, at_boundary, loglik) = fit_condext(&x, &y, u, seed)?;
    Ok(CondExtFit {
        alpha,
        beta,
        mu,
        sigma,
        threshold_u: u,
        pair: (obs.site_ids()[i].clone(), obs.site_ids()[j].clone()),
        n_exceed,
        at_boundary,
        loglik,
    })
}

/// `E[X_j | X_i = u] = αu + u^β μ`.
pub fn condext_expectation(fit: &CondExtFit, u: f64) -> f64 {
    fit.alpha * u + u.powf(fit.beta) * fit.mu
}

/// Rescales distances so that their mean equals `target_mean`.
pub fn normalise_mean_distance(dists: &[f64], target_mean: f64) -> Vec<f64> {
    let mean = dists.iter().sum::<f64>() / dists.len().max(1) as f64;
    if mean > 0.0 {
        dists.iter().map(|h| h * target_mean / mean).collect()
    } else {
        dists.to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondExpRow {
    pub site_i: String,
    pub site_j: String,
    pub plane: Plane,
    pub distance: f64,
    pub expectation: f64,
}

/// Conditional expectations at level `u_eval` for every pair, reported against
/// G-plane distance and, when given, D-plane distance (both scaled to mean 1).
pub fn condext_report(
    obs: &ObservationMatrix,
    g_sites: &SiteSet,
    d_sites: Option<&SiteSet>,
    u_quantile: f64,
    u_eval: f64,
    seed: u64,
) -> Result<Vec<CondExpRow>> {
    obs.check_sites(g_sites)?;
    let d = g_sites.len();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| ((i + 1)..d).map(move |j| (i, j))).collect();
    let e = obs.to_scale(Scale::Exponential)?;
    let fits: Vec<CondExtFit> = pairs
        .par_iter()
        .enumerate()
        .map(|(p, &(i, j))| fit_condext_pair(&e, i, j, u_quantile, derive_seed(seed, p as u64)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let planes: Vec<(Plane, &SiteSet)> =
        std::iter::once((Plane::G, g_sites)).chain(d_sites.map(|s| (Plane::D, s))).collect();
    for (plane, s) in planes {
        let raw: Vec<f64> = pairs.iter().map(|&(i, j)| s.distance(i, j)).collect();
        let h = normalise_mean_distance(&raw, 1.0);
        for ((&(i, j), fit), h) in pairs.iter().zip(&fits).zip(h) {
            rows.push(CondExpRow {
                site_i: g_sites.sites()[i].id.clone(),
                site_j: g_sites.sites()[j].id.clone(),
                plane,
                distance: h,
                expectation: condext_expectation(fit, u_eval),
            });
        }
    }
    Ok(rows)
}

pub fn write_condext_rows(rows: &[CondExpRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["site_i", "site_j", "plane", "distance", "expectation"])?;
    for r in rows {
        let plane = match r.plane {
            Plane::G => "G",
            Plane::D => "D",
        };
        w.write_record([
            r.site_i.clone(),
            r.site_j.clone(),
            plane.to_string(),
            r.distance.to_string(),
            r.expectation.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
