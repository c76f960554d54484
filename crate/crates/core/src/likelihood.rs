//! Censored pairwise composite likelihood for stationary Brown–Resnick (BR)
//! and inverted Brown–Resnick (IBR) models on exponential margins, and the
//! composite-likelihood information criterion.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ObservationMatrix, Plane, Scale, SiteSet};
use crate::dependence::power_variogram;
use crate::optim::{logit, nelder_mead, sigmoid, OptimizerSettings};
use crate::special::{norm_cdf, norm_pdf};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "BR")]
    Br,
    #[serde(rename = "IBR")]
    Ibr,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Br => "BR",
            Family::Ibr => "IBR",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BR" => Ok(Family::Br),
            "IBR" => Ok(Family::Ibr),
            other => Err(Error::Config(format!("unknown model family '{other}'"))),
        }
    }
}

/// κ values above this are reported as the boundary value 2.
pub const KAPPA_BOUNDARY: f64 = 1.999;

/// Brown–Resnick exponent `V(x, y)` on unit Fréchet margins for variogram value `gamma`.
pub fn br_exponent(x: f64, y: f64, gamma: f64) -> f64 {
    let a = (2.0 * gamma).sqrt();
    v_frechet(x, y, a)
}

#[inline]
fn v_frechet(x: f64, y: f64, a: f64) -> f64 {
    if a == 0.0 {
        return 1.0 / x.min(y);
    }
    if a == f64::INFINITY {
        return 1.0 / x + 1.0 / y;
    }
    let r = (y / x).ln() / a;
    norm_cdf(0.5 * a + r) / x + norm_cdf(0.5 * a - r) / y
}

/// `V(1/y1, 1/y2)`, the exponent written in the exponential-scale arguments.
#[inline]
fn v_inverted(y1: f64, y2: f64, a: f64) -> f64 {
    if a == 0.0 {
        return y1.max(y2);
    }
    if a == f64::INFINITY {
        return y1 + y2;
    }
    let r = (y1 / y2).ln() / a;
    y1 * norm_cdf(0.5 * a + r) + y2 * norm_cdf(0.5 * a - r)
}

/// Unit Fréchet value of a standard exponential `z`.
#[inline]
pub fn exp_to_frechet(z: f64) -> f64 {
    -1.0 / (-(-z).exp()).ln_1p()
}

/// log dzF/dz for the exponential-to-Fréchet transform.
#[inline]
fn exp_to_frechet_log_jac(z: f64) -> f64 {
    let w = (-(-z).exp()).ln_1p();
    -z - (-(-z).exp_m1()).ln() - 2.0 * w.abs().ln()
}

fn check_model_params(lambda: f64, kappa: f64, h: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("lambda = {lambda} must be positive")));
    }
    if !(kappa > 0.0 && kappa <= 2.0) {
        return Err(Error::Domain(format!("kappa = {kappa} outside (0, 2]")));
    }
    if !(h >= 0.0) {
        return Err(Error::Domain(format!("distance h = {h} must be nonnegative")));
    }
    Ok(())
}

fn check_margin(z: f64, name: &str) -> Result<()> {
    if !(z >= 0.0) {
        return Err(Error::Domain(format!("{name} = {z} must be nonnegative")));
    }
    Ok(())
}

#[inline]
fn a_of(h: f64, lambda: f64, kappa: f64) -> f64 {
    (2.0 * power_variogram(h, kappa, lambda)).sqrt()
}

/// Joint CDF of a stationary BR pair with standard exponential margins.
pub fn br_pair_cdf(z1: f64, z2: f64, lambda: f64, kappa: f64, h: f64) -> Result<f64> {
    check_margin(z1, "z1")?;
    check_margin(z2, "z2")?;
    check_model_params(lambda, kappa, h)?;
    if z1 == 0.0 || z2 == 0.0 {
        return Ok(0.0);
    }
    let a = a_of(h, lambda, kappa);
    Ok((-v_frechet(exp_to_frechet(z1), exp_to_frechet(z2), a)).exp())
}

/// Joint survivor function `exp(−V(1/y1, 1/y2))` of a stationary IBR pair on exponential margins.
pub fn ibr_pair_survival(y1: f64, y2: f64, lambda: f64, kappa: f64, h: f64) -> Result<f64> {
    check_margin(y1, "y1")?;
    check_margin(y2, "y2")?;
    check_model_params(lambda, kappa, h)?;
    if y1 == 0.0 {
        return Ok((-y2).exp());
    }
    if y2 == 0.0 {
        return Ok((-y1).exp());
    }
    Ok((-v_inverted(y1, y2, a_of(h, lambda, kappa))).exp())
}

/// Joint CDF of a stationary IBR pair, by inclusion–exclusion from the survivor function.
pub fn ibr_pair_cdf(y1: f64, y2: f64, lambda: f64, kappa: f64, h: f64) -> Result<f64> {
    let s = ibr_pair_survival(y1, y2, lambda, kappa, h)?;
    Ok(1.0 - (-y1).exp() - (-y2).exp() + s)
}

// ---- branch log-contributions, parametrised by a = √(2γ) ----

#[inline]
fn br_log_below(uf: f64, a: f64) -> f64 {
    -v_frechet(uf, uf, a)
}

/// log ∂F/∂z1 at (z1, u): `x` exceeds, `uf` is the threshold, both Fréchet.
#[inline]
fn br_log_one(x: f64, lx: f64, lj: f64, uf: f64, luf: f64, a: f64) -> f64 {
    let r = (luf - lx) / a;
    let w1 = 0.5 * a + r;
    let p1 = norm_cdf(w1);
    let v = p1 / x + norm_cdf(0.5 * a - r) / uf;
    -v + p1.ln() - 2.0 * lx + lj
}

#[inline]
fn br_log_density(x: f64, lx: f64, lj1: f64, y: f64, ly: f64, lj2: f64, a: f64) -> f64 {
    let r = (ly - lx) / a;
    let w1 = 0.5 * a + r;
    let w2 = 0.5 * a - r;
    let (p1, p2) = (norm_cdf(w1), norm_cdf(w2));
    let v = p1 / x + p2 / y;
    let inner = p1 * p2 / y + norm_pdf(w1) / a;
    -v + inner.ln() - 2.0 * lx - ly + lj1 + lj2
}

#[inline]
fn ibr_log_below(u: f64, a: f64) -> f64 {
    let s = (-v_inverted(u, u, a)).exp();
    (1.0 - 2.0 * (-u).exp() + s).ln()
}

/// log ∂F/∂y1 at (y1, u) = log(e^{−y1} − e^{−V}Φ(w1)), evaluated without cancellation.
#[inline]
fn ibr_log_one(y1: f64, ly1: f64, u: f64, lu: f64, a: f64) -> f64 {
    let r = (ly1 - lu) / a;
    let w1 = 0.5 * a + r;
    let v = y1 * norm_cdf(w1) + u * norm_cdf(0.5 * a - r);
    let gap = (v - y1).max(0.0);
    let tail = -(-gap).exp_m1() + (-gap).exp() * norm_cdf(-w1);
    -y1 + tail.ln()
}

#[inline]
fn ibr_log_density(y1: f64, ly1: f64, y2: f64, ly2: f64, a: f64) -> f64 {
    let r = (ly1 - ly2) / a;
    let w1 = 0.5 * a + r;
    let w2 = 0.5 * a - r;
    let (p1, p2) = (norm_cdf(w1), norm_cdf(w2));
    let v = y1 * p1 + y2 * p2;
    -v + (p1 * p2 + norm_pdf(w1) / (a * y2)).ln()
}

/// Log censored-likelihood contribution of one pair observation on exponential margins.
pub fn censored_pair_loglik(
    z_i: f64,
    z_j: f64,
    u: f64,
    family: Family,
    lambda: f64,
    kappa: f64,
    h: f64,
) -> Result<f64> {
    if !(u > 0.0) {
        return Err(Error::Domain(format!("threshold u = {u} must be positive")));
    }
    check_margin(z_i, "z_i")?;
    check_margin(z_j, "z_j")?;
    check_model_params(lambda, kappa, h)?;
    let a = a_of(h, lambda, kappa);
    let (value, branch) = branch_value(z_i, z_j, u, family, a);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { i: 0, j: 1, branch })
    }
}

fn branch_value(z_i: f64, z_j: f64, u: f64, family: Family, a: f64) -> (f64, &'static str) {
    let (hi_i, hi_j) = (z_i > u, z_j > u);
    match family {
        Family::Br => {
            let uf = exp_to_frechet(u);
            match (hi_i, hi_j) {
                (false, false) => (br_log_below(uf, a), "both-below"),
                (true, false) => {
                    let x = exp_to_frechet(z_i);
                    (br_log_one(x, x.ln(), exp_to_frechet_log_jac(z_i), uf, uf.ln(), a), "one-exceeds")
                }
                (false, true) => {
                    let x = exp_to_frechet(z_j);
                    (br_log_one(x, x.ln(), exp_to_frechet_log_jac(z_j), uf, uf.ln(), a), "one-exceeds")
                }
                (true, true) => {
                    let (x, y) = (exp_to_frechet(z_i), exp_to_frechet(z_j));
                    let (lx, ly) = (exp_to_frechet_log_jac(z_i), exp_to_frechet_log_jac(z_j));
                    (br_log_density(x, x.ln(), lx, y, y.ln(), ly, a), "density")
                }
            }
        }
        Family::Ibr => match (hi_i, hi_j) {
            (false, false) => (ibr_log_below(u, a), "both-below"),
            (true, false) => (ibr_log_one(z_i, z_i.ln(), u, u.ln(), a), "one-exceeds"),
            (false, true) => (ibr_log_one(z_j, z_j.ln(), u, u.ln(), a), "one-exceeds"),
            (true, true) => (ibr_log_density(z_i, z_i.ln(), z_j, z_j.ln(), a), "density"),
        },
    }
}

/// Exponential-scale threshold for marginal quantile `q`.
pub fn exp_threshold(q: f64) -> f64 {
    -(-q).ln_1p()
}

#[derive(Debug, Clone)]
struct PairBlock {
    i: usize,
    j: usize,
    h: f64,
    n_below: usize,
    start: usize,
    end: usize,
}

/// Pre-processed data for repeated evaluation of the censored pairwise composite likelihood.
///
/// Observations where both members of a pair are censored contribute the same
/// term, so only counts are kept for them.
#[derive(Debug, Clone)]
pub struct CompositeLikelihood {
    family: Family,
    u: f64,
    uf: f64,
    lu: f64,
    luf: f64,
    n_obs: usize,
    pairs: Vec<PairBlock>,
    // per exceedance entry: row, and (value, log-jacobian) for each member
    rows: Vec<u32>,
    xi: Vec<f64>,
    xj: Vec<f64>,
    lxi: Vec<f64>,
    lxj: Vec<f64>,
    lji: Vec<f64>,
    ljj: Vec<f64>,
}

impl CompositeLikelihood {
    /// Builds the likelihood over all site pairs. Data not on exponential margins are rank-transformed.
    pub fn new(obs: &ObservationMatrix, sites: &SiteSet, family: Family, u_quantile: f64) -> Result<Self> {
        if !(u_quantile > 0.0 && u_quantile < 1.0) {
            return Err(Error::Config(format!("u_quantile = {u_quantile} outside (0,1)")));
        }
        obs.check_sites(sites)?;
        let exp_obs = obs.to_scale(Scale::Exponential)?;
        let z = exp_obs.values();
        let (n, d) = (z.nrows(), z.ncols());
        let u = exp_threshold(u_quantile);
        let uf = exp_to_frechet(u);

        // per-cell transformed values
        let mut val = DMatrix::zeros(n, d);
        let mut lj = DMatrix::zeros(n, d);
        for c in 0..d {
            for t in 0..n {
                let v = z[(t, c)];
                match family {
                    Family::Br => {
                        val[(t, c)] = exp_to_frechet(v);
                        lj[(t, c)] = exp_to_frechet_log_jac(v);
                    }
                    Family::Ibr => val[(t, c)] = v,
                }
            }
        }
        let mut pairs = Vec::with_capacity(d * (d - 1) / 2);
        let (mut rows, mut xi, mut xj, mut lji, mut ljj) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..d {
            for j in (i + 1)..d {
                let start = rows.len();
                let mut n_below = 0;
                for t in 0..n {
                    if z[(t, i)] > u || z[(t, j)] > u {
                        rows.push(t as u32);
                        xi.push(val[(t, i)]);
                        xj.push(val[(t, j)]);
                        lji.push(lj[(t, i)]);
                        ljj.push(lj[(t, j)]);
                    } else {
                        n_below += 1;
                    }
                }
                pairs.push(PairBlock { i, j, h: sites.distance(i, j), n_below, start, end: rows.len() });
            }
        }
        let lxi = xi.iter().map(|v: &f64| v.ln()).collect();
        let lxj = xj.iter().map(|v: &f64| v.ln()).collect();
        Ok(CompositeLikelihood {
            family,
            u,
            uf,
            lu: u.ln(),
            luf: uf.ln(),
            n_obs: n,
            pairs,
            rows,
            xi,
            xj,
            lxi,
            lxj,
            lji,
            ljj,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn threshold(&self) -> f64 {
        self.u
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    #[inline]
    fn below(&self, a: f64) -> f64 {
        match self.family {
            Family::Br => br_log_below(self.uf, a),
            Family::Ibr => ibr_log_below(self.u, a),
        }
    }

    #[inline]
    fn entry(&self, k: usize, a: f64) -> (f64, &'static str) {
        let (x, y) = (self.xi[k], self.xj[k]);
        let (lx, ly) = (self.lxi[k], self.lxj[k]);
        match self.family {
            Family::Br => {
                let (hx, hy) = (x > self.uf, y > self.uf);
                match (hx, hy) {
                    (true, true) => (br_log_density(x, lx, self.lji[k], y, ly, self.ljj[k], a), "density"),
                    (true, false) => (br_log_one(x, lx, self.lji[k], self.uf, self.luf, a), "one-exceeds"),
                    _ => (br_log_one(y, ly, self.ljj[k], self.uf, self.luf, a), "one-exceeds"),
                }
            }
            Family::Ibr => {
                let (hx, hy) = (x > self.u, y > self.u);
                match (hx, hy) {
                    (true, true) => (ibr_log_density(x, lx, y, ly, a), "density"),
                    (true, false) => (ibr_log_one(x, lx, self.u, self.lu, a), "one-exceeds"),
                    _ => (ibr_log_one(y, ly, self.u, self.lu, a), "one-exceeds"),
                }
            }
        }
    }

    fn pair_loglik(&self, p: &PairBlock, lambda: f64, kappa: f64) -> Result<f64> {
        let a = a_of(p.h, lambda, kappa);
        let mut s = 0.0;
        if p.n_below > 0 {
            let c = self.below(a);
            if !c.is_finite() {
                return Err(Error::NonFinite { i: p.i, j: p.j, branch: "both-below" });
            }
            s += p.n_below as f64 * c;
        }
        for k in p.start..p.end {
            let (v, branch) = self.entry(k, a);
            if !v.is_finite() {
                return Err(Error::NonFinite { i: p.i, j: p.j, branch });
            }
            s += v;
        }
        Ok(s)
    }

    /// Composite log-likelihood at (λ, κ). κ slightly above 2 is accepted for numerical differentiation.
    pub fn loglik(&self, lambda: f64, kappa: f64) -> Result<f64> {
        if !(lambda > 0.0 && kappa > 0.0) {
            return Err(Error::Domain(format!("invalid parameters ({lambda}, {kappa})")));
        }
        let parts: Vec<Result<f64>> = self.pairs.par_iter().map(|p| self.pair_loglik(p, lambda, kappa)).collect();
        let mut total = 0.0;
        for r in parts {
            total += r?;
        }
        Ok(total)
    }

    /// Per-observation composite log-likelihood contributions `log L_CL(λ, κ; z_t)`.
    pub fn per_obs_loglik(&self, lambda: f64, kappa: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_obs];
        let mut common = 0.0;
        for p in &self.pairs {
            let a = a_of(p.h, lambda, kappa);
            let c = self.below(a);
            if !c.is_finite() {
                return Err(Error::NonFinite { i: p.i, j: p.j, branch: "both-below" });
            }
            common += c;
            for k in p.start..p.end {
                let (v, branch) = self.entry(k, a);
                if !v.is_finite() {
                    return Err(Error::NonFinite { i: p.i, j: p.j, branch });
                }
                out[self.rows[k] as usize] += v - c;
            }
        }
        for o in &mut out {
            *o += common;
        }
        Ok(out)
    }

    /// Per-observation scores (N×2, columns λ then κ) by central differences.
    pub fn scores(&self, lambda: f64, kappa: f64) -> Result<DMatrix<f64>> {
        let mut s = DMatrix::zeros(self.n_obs, 2);
        for (col, (dl, dk)) in [(1.0, 0.0), (0.0, 1.0)].into_iter().enumerate() {
            let step = FD_REL * if col == 0 { lambda } else { kappa };
            let plus = self.per_obs_loglik(lambda + dl * step, kappa + dk * step)?;
            let minus = self.per_obs_loglik(lambda - dl * step, kappa - dk * step)?;
            for t in 0..self.n_obs {
                s[(t, col)] = (plus[t] - minus[t]) / (2.0 * step);
            }
        }
        Ok(s)
    }

    /// Negative Hessian of the composite log-likelihood in (λ, κ) by central differences.
    pub fn neg_hessian(&self, lambda: f64, kappa: f64) -> Result<DMatrix<f64>> {
        let p = [lambda, kappa];
        let h = [FD_REL * lambda, FD_REL * kappa];
        let f = |x: [f64; 2]| self.loglik(x[0], x[1]);
        let f0 = f(p)?;
        let mut out = DMatrix::zeros(2, 2);
        for r in 0..2 {
            let mut xp = p;
            xp[r] += h[r];
            let mut xm = p;
            xm[r] -= h[r];
            out[(r, r)] = -(f(xp)? - 2.0 * f0 + f(xm)?) / (h[r] * h[r]);
        }
        let corner = |sr: f64, sc: f64| f([p[0] + sr * h[0], p[1] + sc * h[1]]);
        let cross =
            (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?) / (4.0 * h[0] * h[1]);
        out[(0, 1)] = -cross;
        out[(1, 0)] = -cross;
        Ok(out)
    }
}

/// Relative step for score and Hessian differences.
const FD_REL: f64 = 1e-5;

/// Fitted stationary pairwise dependence model.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub family: Family,
    pub plane: Plane,
    pub lambda_hat: f64,
    pub kappa_hat: f64,
    /// κ̂ was pinned at the upper bound 2.
    pub kappa_at_boundary: bool,
    /// Negative composite log-likelihood at the estimate.
    pub ncll: f64,
    /// CLAIC computed with `block_b`.
    pub claic: f64,
    pub block_b: usize,
    /// Per-observation score vectors, N×2 (λ, κ).
    pub scores: DMatrix<f64>,
    /// Negative Hessian of the composite log-likelihood, 2×2 (λ, κ).
    pub hessian: DMatrix<f64>,
    pub threshold_u: f64,
    pub u_quantile: f64,
    pub evals: usize,
}

/// Summary written to fit reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub family: Family,
    pub plane: Plane,
    pub lambda_hat: f64,
    pub kappa_hat: f64,
    pub kappa_at_boundary: bool,
    pub ncll: f64,
    pub claic: f64,
    pub u_quantile: f64,
    pub block_b: usize,
}

impl ModelFit {
    pub fn report(&self) -> FitReport {
        FitReport {
            family: self.family,
            plane: self.plane,
            lambda_hat: self.lambda_hat,
            kappa_hat: self.kappa_hat,
            kappa_at_boundary: self.kappa_at_boundary,
            ncll: self.ncll,
            claic: self.claic,
            u_quantile: self.u_quantile,
            block_b: self.block_b,
        }
    }

    /// Recomputes the stored CLAIC for another block length.
    pub fn with_block(mut self, block_b: usize) -> Result<Self> {
        self.claic = claic(&self, block_b)?;
        self.block_b = block_b;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub u_quantile: f64,
    pub block_b: usize,
    pub optimizer: OptimizerSettings,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            u_quantile: 0.9,
            block_b: 1,
            optimizer: OptimizerSettings { max_evals: 600, xtol: 1e-7, ftol: 1e-12, restarts: 2 },
        }
    }
}

/// Maximises the censored pairwise composite likelihood over (λ, κ) using all site pairs.
pub fn fit_pairwise_model(
    obs: &ObservationMatrix,
    sites: &SiteSet,
    family: Family,
    u_quantile: f64,
) -> Result<ModelFit> {
    fit_pairwise_model_with(obs, sites, family, &FitOptions { u_quantile, ..Default::default() })
}

pub fn fit_pairwise_model_with(
    obs: &ObservationMatrix,
    sites: &SiteSet,
    family: Family,
    options: &FitOptions,
) -> Result<ModelFit> {
    let cl = CompositeLikelihood::new(obs, sites, family, options.u_quantile)?;
    fit_likelihood(&cl, sites.plane(), options)
}

fn unpack(t: &[f64]) -> (f64, f64) {
    (t[0].exp(), 2.0 * sigmoid(t[1]))
}

/// Fits a prepared likelihood.
pub fn fit_likelihood(cl: &CompositeLikelihood, plane: Plane, options: &FitOptions) -> Result<ModelFit> {
    if cl.n_pairs() == 0 {
        return Err(Error::DimensionMismatch("at least two sites are needed".into()));
    }
    let objective = |t: &[f64]| {
        let (l, k) = unpack(t);
        match cl.loglik(l, k) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        }
    };
    let mut hs: Vec<f64> = cl.pairs.iter().map(|p| p.h).filter(|h| *h > 0.0).collect();
    hs.sort_by(f64::total_cmp);
    let h_med = hs.get(hs.len() / 2).copied().unwrap_or(1.0);

    // coarse start
    let mut start = [h_med.ln(), 0.0];
    let mut best = f64::INFINITY;
    let mut evals = 0;
    for lf in [0.25, 0.5, 1.0, 2.0, 4.0] {
        for k in [0.5, 1.0, 1.5] {
            let t = [(lf * h_med).ln(), logit(k / 2.0)];
            let v = objective(&t);
            evals += 1;
            if v < best {
                best = v;
                start = t;
            }
        }
    }
    if !best.is_finite() {
        return Err(Error::Convergence(format!("{} likelihood is not finite at any starting value", cl.family)));
    }
    let m = nelder_mead(objective, &start, &[0.3, 0.5], &options.optimizer);
    evals += m.evals;
    if !m.converged {
        return Err(Error::Convergence(format!(
            "{} fit stopped after {} evaluations at (lambda, kappa) = {:?}, ncll = {}",
            cl.family,
            evals,
            unpack(&m.x),
            m.value
        )));
    }
    let (lambda_hat, mut kappa_hat) = unpack(&m.x);
    let mut boundary = false;
    if kappa_hat > KAPPA_BOUNDARY {
        kappa_hat = 2.0;
        boundary = true;
    }
    let ncll = -cl.loglik(lambda_hat, kappa_hat)?;
    let scores = cl.scores(lambda_hat, kappa_hat)?;
    let hessian = cl.neg_hessian(lambda_hat, kappa_hat)?;
    let mut fit = ModelFit {
        family: cl.family,
        plane,
        lambda_hat,
        kappa_hat,
        kappa_at_boundary: boundary,
        ncll,
        claic: f64::NAN,
        block_b: options.block_b,
        scores,
        hessian,
        threshold_u: cl.u,
        u_quantile: options.u_quantile,
        evals,
    };
    fit.claic = claic(&fit, options.block_b)?;
    Ok(fit)
}

/// Block estimate of the score variance: `(N/b)` times the covariance of
/// non-overlapping block sums (a trailing partial block is dropped).
pub fn score_variance(scores: &DMatrix<f64>, block_b: usize) -> Result<DMatrix<f64>> {
    let n = scores.nrows();
    let p = scores.ncols();
    if block_b < 1 || block_b >= n {
        return Err(Error::Config(format!("block length {block_b} must satisfy 1 <= b < N = {n}")));
    }
    let nb = n / block_b;
    if nb < 2 {
        return Err(Error::Config(format!("block length {block_b} leaves fewer than two blocks")));
    }
    let mut sums = DMatrix::<f64>::zeros(nb, p);
    for k in 0..nb {
        for t in (k * block_b)..((k + 1) * block_b) {
            for c in 0..p {
                sums[(k, c)] += scores[(t, c)];
            }
        }
    }
    let means: Vec<f64> = (0..p).map(|c| sums.column(c).sum() / nb as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for k in 0..nb {
        for r in 0..p {
            for c in 0..p {
                cov[(r, c)] += (sums[(k, r)] - means[r]) * (sums[(k, c)] - means[c]);
            }
        }
    }
    cov /= (nb - 1) as f64;
    Ok(cov * (n as f64 / block_b as f64))
}

/// CLAIC `2·ncll + 2·tr(J H⁻¹)` with J from block length `block_b`.
pub fn claic(fit: &ModelFit, block_b: usize) -> Result<f64> {
    let j = score_variance(&fit.scores, block_b)?;
    let h = &fit.hessian;
    let hinv = match h.clone().try_inverse().filter(|m| m.iter().all(|v| v.is_finite())) {
        Some(m) => m,
        None => {
            log::warn!("Hessian singular; retrying with ridge 1e-8");
            let ridged = h + DMatrix::identity(h.nrows(), h.ncols()) * 1e-8;
            ridged.try_inverse().filter(|m| m.iter().all(|v| v.is_finite())).ok_or_else(|| {
                Error::Singular(
                    "composite-likelihood Hessian is singular even with ridge 1e-8; use more observations".into(),
                )
            })?
        }
    };
    let penalty = (j * hinv).trace();
    Ok(2.0 * fit.ncll + 2.0 * penalty)
}
