//! Pairwise dependence: empirical χ_q and correlation matrices, and the
//! parametric χ and Matérn forms they are compared against.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, ObservationMatrix, Scale, SiteSet};
use crate::error::{Error, Result};
use crate::special::{bessel_k, gamma, norm_cdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependenceKind {
    ChiQ,
    Correlation,
}

/// Symmetric matrix of pairwise dependence estimates with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DependenceMatrix {
    pub values: DMatrix<f64>,
    pub kind: DependenceKind,
    /// Threshold used for χ_q estimates.
    pub threshold_q: Option<f64>,
}

impl DependenceMatrix {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Writes `id_i,id_j,h,value` for every unordered pair, with `h` under the sites' metric.
    pub fn write_long_csv(&self, sites: &SiteSet, path: impl AsRef<Path>) -> Result<()> {
        if sites.len() != self.dim() {
            return Err(Error::DimensionMismatch("site set does not match matrix".into()));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id_i", "id_j", "h", "value"])?;
        let ids = sites.ids();
        for i in 0..self.dim() {
            for j in (i + 1)..self.dim() {
                w.write_record([
                    ids[i].clone(),
                    ids[j].clone(),
                    fmt_f64(sites.distance(i, j)),
                    fmt_f64(self.values[(i, j)]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Empirical χ_q: entry `(i, j)` is the fraction of exceedances at `j` that
/// are joint exceedances with `i`.
pub fn empirical_chi_matrix(obs: &ObservationMatrix, q: f64) -> Result<DependenceMatrix> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("threshold q = {q} outside (0,1)")));
    }
    let u = obs.to_scale(Scale::Uniform)?;
    let (n, d) = (u.n_obs(), u.n_sites());
    let exceed: Vec<Vec<bool>> = (0..d).map(|j| (0..n).map(|t| u.values()[(t, j)] > q).collect()).collect();
    let counts: Vec<usize> = exceed.iter().map(|c| c.iter().filter(|&&b| b).count()).collect();
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::NoExceedances { site: obs.site_ids()[j].clone(), q });
    }
    let mut values = DMatrix::from_element(d, d, 1.0);
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let joint = exceed[i].iter().zip(&exceed[j]).filter(|(a, b)| **a && **b).count();
            values[(i, j)] = joint as f64 / counts[j] as f64;
        }
    }
    Ok(DependenceMatrix { values, kind: DependenceKind::ChiQ, threshold_q: Some(q) })
}

/// Pearson correlation of Gaussian-score columns.
pub fn empirical_corr_matrix(obs: &ObservationMatrix) -> Result<DependenceMatrix> {
    let g = obs.to_scale(Scale::Gaussian)?;
    Ok(DependenceMatrix { values: pearson_matrix(g.values()), kind: DependenceKind::Correlation, threshold_q: None })
}

pub(crate) fn pearson_matrix(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    let centred: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mean = x.column(j).sum() / n as f64;
            x.column(j).iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centred.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut out = DMatrix::from_element(d, d, 1.0);
    for i in 0..d {
        for j in (i + 1)..d {
            let dot: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[(i, j)] = r;
            out[(j, i)] = r;
        }
    }
    out
}

fn check_chi_params(h: f64, kappa: f64, lambda: f64) -> Result<()> {
    if !(h >= 0.0) {
        return Err(Error::Domain(format!("distance h = {h} must be nonnegative")));
    }
    if !(kappa > 0.0 && kappa <= 2.0) {
        return Err(Error::Domain(format!("kappa = {kappa} outside (0,2]")));
    }
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda = {lambda} must be positive")));
    }
    Ok(())
}

/// Power semivariogram `(h/λ)^κ`.
#[inline]
pub fn power_variogram(h: f64, kappa: f64, lambda: f64) -> f64 {
    (h / lambda).powf(kappa)
}

/// Extremal coefficient `2Φ(√(2γ)/2)` of a Brown–Resnick pair, unchecked.
#[inline]
pub(crate) fn theta_from_variogram(gamma_h: f64) -> f64 {
    2.0 * norm_cdf((0.5 * gamma_h).sqrt())
}

/// Extremal coefficient θ(h) of the stationary Brown–Resnick model.
pub fn extremal_coefficient(h: f64, kappa: f64, lambda: f64) -> Result<f64> {
    check_chi_params(h, kappa, lambda)?;
    Ok(theta_from_variogram(power_variogram(h, kappa, lambda)))
}

/// χ of the stationary Brown–Resnick model: `2 − θ(h)`.
pub fn chi_br(h: f64, kappa: f64, lambda: f64) -> Result<f64> {
    Ok(2.0 - extremal_coefficient(h, kappa, lambda)?)
}

/// χ_q of the stationary inverted Brown–Resnick model: `(1 − q)^{θ(h) − 1}`.
pub fn chi_ibr(h: f64, kappa: f64, lambda: f64, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("q = {q} outside (0,1)")));
    }
    let theta = extremal_coefficient(h, kappa, lambda)?;
    Ok((1.0 - q).powf(theta - 1.0))
}

/// Matérn correlation with range `theta1` and smoothness `theta2`,
/// normalised so that the scaled argument is `2h√θ2/θ1`.
#[derive(Debug, Clone, Copy)]
pub struct Matern {
    theta1: f64,
    theta2: f64,
    scale: f64,
    norm: f64,
}

impl Matern {
    pub fn new(theta1: f64, theta2: f64) -> Result<Self> {
        if !(theta1 > 0.0 && theta2 > 0.0) || !theta1.is_finite() || !theta2.is_finite() {
            return Err(Error::Domain(format!("Matérn parameters ({theta1}, {theta2}) must be positive")));
        }
        Ok(Matern {
            theta1,
            theta2,
            scale: 2.0 * theta2.sqrt() / theta1,
            norm: 1.0 / (2f64.powf(theta2 - 1.0) * gamma(theta2)),
        })
    }

    pub fn theta1(&self) -> f64 {
        self.theta1
    }

    pub fn theta2(&self) -> f64 {
        self.theta2
    }

    #[inline]
    pub fn corr(&self, h: f64) -> f64 {
        if h <= 0.0 {
            return 1.0;
        }
        let z = self.scale * h;
        if z > 700.0 {
            return 0.0;
        }
        let v = self.norm * z.powf(self.theta2) * bessel_k(self.theta2, z);
        if v.is_finite() {
            v.min(1.0)
        } else {
            1.0
        }
    }
}

/// Matérn correlation at distance `h`.
pub fn matern_corr(h: f64, theta1: f64, theta2: f64) -> Result<f64> {
    if !(h >= 0.0) {
        return Err(Error::Domain(format!("distance h = {h} must be nonnegative")));
    }
    Ok(Matern::new(theta1, theta2)?.corr(h))
}
