//! Seeded simulators for the study processes.
//!
//! Randomness: every simulator takes a `u64` seed and draws from
//! `ChaCha8Rng::seed_from_u64(seed)` on a fixed stream per component
//! (see [`seeded_rng`]), so a seed fully determines the output.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ObservationMatrix, Scale, SiteSet};
use crate::dependence::Matern;
use crate::special::norm_cdf;
use crate::{Error, Result};

/// Stream numbers used with [`seeded_rng`].
pub mod streams {
    pub const GAUSSIAN: u64 = 1;
    pub const BR: u64 = 2;
    pub const MIXTURE_GAUSSIAN: u64 = 3;
    pub const GAUSSIAN_MIXTURE: u64 = 4;
}

/// `ChaCha8Rng` seeded from `seed` and switched to `stream`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed for replicate or job `index` of a master seed (SplitMix64 finaliser).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Radial warp `ψ(s) = o + (s − o)‖s − o‖`.
#[inline]
pub fn psi(s: (f64, f64), o: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (s.0 - o.0, s.1 - o.1);
    let r = dx.hypot(dy);
    (o.0 + dx * r, o.1 + dy * r)
}

/// `(‖ψ(s_i) − ψ(s_j)‖/λ)^κ`.
pub fn nonstationary_variogram(s_i: (f64, f64), s_j: (f64, f64), o: (f64, f64), lambda: f64, kappa: f64) -> f64 {
    let (a, b) = (psi(s_i, o), psi(s_j, o));
    ((a.0 - b.0).hypot(a.1 - b.1) / lambda).powf(kappa)
}

/// Power variogram, optionally on ψ-warped coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramSpec {
    pub lambda: f64,
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centre: Option<(f64, f64)>,
}

impl VariogramSpec {
    pub fn stationary(lambda: f64, kappa: f64) -> Self {
        VariogramSpec { lambda, kappa, centre: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("variogram lambda = {} must be positive", self.lambda)));
        }
        if !(self.kappa > 0.0 && self.kappa <= 2.0) {
            return Err(Error::Config(format!("variogram kappa = {} outside (0, 2]", self.kappa)));
        }
        Ok(())
    }

    pub fn gamma(&self, s_i: (f64, f64), s_j: (f64, f64)) -> f64 {
        match self.centre {
            Some(o) => nonstationary_variogram(s_i, s_j, o, self.lambda, self.kappa),
            None => ((s_i.0 - s_j.0).hypot(s_i.1 - s_j.1) / self.lambda).powf(self.kappa),
        }
    }
}

/// Matérn correlation, optionally on ψ-warped coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSpec {
    pub theta1: f64,
    pub theta2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centre: Option<(f64, f64)>,
}

impl CorrelationSpec {
    pub fn matern(theta1: f64, theta2: f64) -> Self {
        CorrelationSpec { theta1, theta2, centre: None }
    }

    fn distance(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        let (a, b) = match self.centre {
            Some(o) => (psi(a, o), psi(b, o)),
            None => (a, b),
        };
        (a.0 - b.0).hypot(a.1 - b.1)
    }

    pub fn matrix(&self, coords: &[(f64, f64)]) -> Result<DMatrix<f64>> {
        let m = Matern::new(self.theta1, self.theta2).map_err(|e| Error::Config(e.to_string()))?;
        let d = coords.len();
        Ok(DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { m.corr(self.distance(coords[i], coords[j])) }))
    }
}

/// Lower Cholesky factor, retrying once with jitter 1e-10 on the diagonal.
fn factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = Cholesky::<f64, Dyn>::new(cov.clone()) {
        return Ok(c.l());
    }
    let jittered = cov + DMatrix::identity(cov.nrows(), cov.ncols()) * 1e-10;
    Cholesky::<f64, Dyn>::new(jittered).map(|c| c.l()).ok_or_else(|| {
        Error::Singular(
            "covariance not positive definite after jitter 1e-10; check for duplicate or degenerate sites".into(),
        )
    })
}

/// Maps coordinates to the first index of an identical coordinate.
fn dedupe(coords: &[(f64, f64)]) -> (Vec<(f64, f64)>, Vec<usize>) {
    let mut uniq: Vec<(f64, f64)> = Vec::new();
    let mut map = Vec::with_capacity(coords.len());
    for &c in coords {
        match uniq.iter().position(|u| *u == c) {
            Some(k) => map.push(k),
            None => {
                map.push(uniq.len());
                uniq.push(c);
            }
        }
    }
    (uniq, map)
}

fn gaussian_rows<R: Rng>(coords: &[(f64, f64)], corr: &CorrelationSpec, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let (uniq, map) = dedupe(coords);
    let l = factor(&corr.matrix(&uniq)?)?;
    let k = uniq.len();
    let eps = DMatrix::<f64>::from_fn(n, k, |_, _| rng.sample(StandardNormal));
    let draws = eps * l.transpose();
    Ok(DMatrix::from_fn(n, coords.len(), |t, c| draws[(t, map[c])]))
}

/// `n` independent draws of a unit-variance Gaussian field with Matérn correlation; Gaussian scale.
pub fn simulate_gaussian(sites: &SiteSet, corr: &CorrelationSpec, n: usize, seed: u64) -> Result<ObservationMatrix> {
    let mut rng = seeded_rng(seed, streams::GAUSSIAN);
    let values = gaussian_rows(&sites.coords(), corr, n, &mut rng)?;
    ObservationMatrix::new(values, Scale::Gaussian, sites.ids())
}

/// Exact Brown–Resnick sampler on a finite site set (extremal functions).
struct BrSampler {
    gamma: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl BrSampler {
    fn new(coords: &[(f64, f64)], vario: &VariogramSpec) -> Result<Self> {
        vario.validate()?;
        let d = coords.len();
        let gamma = DMatrix::from_fn(d, d, |i, j| if i == j { 0.0 } else { vario.gamma(coords[i], coords[j]) });
        let chol = if d > 1 {
            let cov =
                DMatrix::from_fn(d - 1, d - 1, |i, j| gamma[(i + 1, 0)] + gamma[(j + 1, 0)] - gamma[(i + 1, j + 1)]);
            factor(&cov)?
        } else {
            DMatrix::zeros(0, 0)
        };
        Ok(BrSampler { gamma, chol })
    }

    /// Gaussian field with `W(site 0) = 0` and semivariogram `gamma`.
    fn field<R: Rng>(&self, rng: &mut R, w: &mut [f64], eps: &mut [f64]) {
        let k = self.chol.nrows();
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        w[0] = 0.0;
        for i in 0..k {
            let row = self.chol.row(i);
            let mut s = 0.0;
            for c in 0..=i {
                s += row[c] * eps[c];
            }
            w[i + 1] = s;
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R, z: &mut [f64]) {
        let d = z.len();
        let mut w = vec![0.0; d];
        let mut eps = vec![0.0; d.saturating_sub(1)];
        let mut y = vec![0.0; d];
        z.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..d {
            let mut e: f64 = rng.sample(Exp1);
            let mut zeta = 1.0 / e;
            while zeta > z[j] {
                self.field(rng, &mut w, &mut eps);
                for k in 0..d {
                    y[k] = (w[k] - w[j] - self.gamma[(k, j)]).exp();
                }
                if (0..j).all(|k| zeta * y[k] < z[k]) {
                    for k in 0..d {
                        z[k] = z[k].max(zeta * y[k]);
                    }
                }
                e += rng.sample::<f64, _>(Exp1);
                zeta = 1.0 / e;
            }
        }
    }
}

fn br_rows<R: Rng>(coords: &[(f64, f64)], vario: &VariogramSpec, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let sampler = BrSampler::new(coords, vario)?;
    let d = coords.len();
    let mut out = DMatrix::zeros(n, d);
    let mut z = vec![0.0; d];
    for t in 0..n {
        sampler.sample(rng, &mut z);
        for c in 0..d {
            out[(t, c)] = z[c];
        }
    }
    Ok(out)
}

/// `n` replicates of a Brown–Resnick process on unit Fréchet margins.
pub fn simulate_br(sites: &SiteSet, vario: &VariogramSpec, n: usize, seed: u64) -> Result<ObservationMatrix> {
    let mut rng = seeded_rng(seed, streams::BR);
    let values = br_rows(&sites.coords(), vario, n, &mut rng)?;
    ObservationMatrix::new(values, Scale::Frechet, sites.ids())
}

/// Reciprocal of a Fréchet-scale process, giving exponential margins.
pub fn invert_process(obs: &ObservationMatrix) -> Result<ObservationMatrix> {
    if obs.scale() != Scale::Frechet {
        return Err(Error::Domain(format!("invert_process needs Fréchet margins, got {:?}", obs.scale())));
    }
    if obs.values().iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("invert_process needs strictly positive values".into()));
    }
    ObservationMatrix::new(obs.values().map(|v| 1.0 / v), Scale::Exponential, obs.site_ids().to_vec())
}

#[inline]
fn gaussian_to_frechet(g: f64) -> f64 {
    -1.0 / (-norm_cdf(-g)).ln_1p()
}

/// `max{ωX, (1−ω)Y}` with X Brown–Resnick and Y a Fréchet-transformed Gaussian field.
pub fn simulate_max_mixture(
    sites: &SiteSet,
    omega: f64,
    br: &VariogramSpec,
    gauss: &CorrelationSpec,
    n: usize,
    seed: u64,
) -> Result<ObservationMatrix> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::Config(format!("omega = {omega} outside [0, 1]")));
    }
    let coords = sites.coords();
    let x = br_rows(&coords, br, n, &mut seeded_rng(seed, streams::BR))?;
    let y = gaussian_rows(&coords, gauss, n, &mut seeded_rng(seed, streams::MIXTURE_GAUSSIAN))?;
    let h = x.zip_map(&y, |xv, yv| (omega * xv).max((1.0 - omega) * gaussian_to_frechet(yv)));
    ObservationMatrix::new(h, Scale::Frechet, sites.ids())
}

/// Conditional Gaussian field given the value at one site.
struct Conditional {
    weights: Vec<f64>,
    chol: DMatrix<f64>,
    others: Vec<usize>,
}

impl Conditional {
    fn new(coords: &[(f64, f64)], corr: &CorrelationSpec, s0: usize) -> Result<Self> {
        let c = corr.matrix(coords)?;
        let others: Vec<usize> = (0..coords.len()).filter(|&k| k != s0).collect();
        let weights: Vec<f64> = others.iter().map(|&k| c[(k, s0)]).collect();
        let m = others.len();
        let cov = DMatrix::from_fn(m, m, |a, b| c[(others[a], others[b])] - weights[a] * weights[b]);
        let chol = if m > 0 { factor(&cov)? } else { DMatrix::zeros(0, 0) };
        Ok(Conditional { weights, chol, others })
    }

    fn fill<R: Rng>(&self, y0: f64, rng: &mut R, row: &mut [f64]) {
        let m = self.others.len();
        let eps: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        for a in 0..m {
            let mut s = self.weights[a] * y0;
            for b in 0..=a {
                s += self.chol[(a, b)] * eps[b];
            }
            row[self.others[a]] = s;
        }
    }
}

/// Gaussian mixture: stationary field when `Φ(Y(s0)) ≤ p`, non-stationary otherwise, each conditioned on `Y(s0)`.
pub fn simulate_gaussian_mixture(
    sites: &SiteSet,
    s0: usize,
    p: f64,
    spec_s: &CorrelationSpec,
    spec_ns: &CorrelationSpec,
    n: usize,
    seed: u64,
) -> Result<ObservationMatrix> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("p = {p} outside [0, 1]")));
    }
    if s0 >= sites.len() {
        return Err(Error::Config(format!("s0 index {s0} outside the site set")));
    }
    let coords = sites.coords();
    let cond_s = Conditional::new(&coords, spec_s, s0)?;
    let cond_ns = Conditional::new(&coords, spec_ns, s0)?;
    let mut rng = seeded_rng(seed, streams::GAUSSIAN_MIXTURE);
    let d = coords.len();
    let mut out = DMatrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for t in 0..n {
        let y0: f64 = rng.sample(StandardNormal);
        row[s0] = y0;
        if norm_cdf(y0) <= p {
            cond_s.fill(y0, &mut rng, &mut row);
        } else {
            cond_ns.fill(y0, &mut rng, &mut row);
        }
        for c in 0..d {
            out[(t, c)] = row[c];
        }
    }
    ObservationMatrix::new(out, Scale::Gaussian, sites.ids())
}

/// Regular square grid of sites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
}

impl GridSpec {
    pub fn sites(&self) -> Result<SiteSet> {
        if self.n < 1 || !(self.hi > self.lo) {
            return Err(Error::Config(format!("invalid grid {:?}", self)));
        }
        Ok(SiteSet::grid(self.n, self.lo, self.hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessKind {
    Gaussian {
        correlation: CorrelationSpec,
    },
    Br {
        variogram: VariogramSpec,
    },
    InvertedBr {
        variogram: VariogramSpec,
    },
    MaxMixture {
        omega: f64,
        variogram: VariogramSpec,
        correlation: CorrelationSpec,
        /// Reciprocal of the mixture (asymptotically independent version).
        #[serde(default)]
        inverted: bool,
    },
    GaussianMixture {
        p: f64,
        /// Coordinates of the conditioning site; must coincide with a site.
        s0: (f64, f64),
        stationary: CorrelationSpec,
        nonstationary: CorrelationSpec,
    },
}

/// A simulation request: process, sample size, geometry and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    #[serde(flatten)]
    pub process: ProcessKind,
    #[serde(default = "default_n_obs")]
    pub n_obs: usize,
    #[serde(default = "default_grid")]
    pub grid: GridSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_obs() -> usize {
    1000
}

fn default_grid() -> GridSpec {
    GridSpec { n: 8, lo: -1.0, hi: 1.0 }
}

impl ProcessSpec {
    /// Non-stationary Brown–Resnick on the 8×8 grid: λ = 2, κ = 0.8, centre at the origin.
    pub fn nonstationary_br(seed: u64) -> Self {
        ProcessSpec { process: ProcessKind::Br { variogram: ns_variogram() }, n_obs: 1000, grid: default_grid(), seed }
    }

    pub fn nonstationary_ibr(seed: u64) -> Self {
        ProcessSpec { process: ProcessKind::InvertedBr { variogram: ns_variogram() }, ..Self::nonstationary_br(seed) }
    }

    /// Max-mixture with ω = 0.3 and Matérn (1, 1.2) Gaussian part.
    pub fn max_mixture(seed: u64, inverted: bool) -> Self {
        ProcessSpec {
            process: ProcessKind::MaxMixture {
                omega: 0.3,
                variogram: ns_variogram(),
                correlation: CorrelationSpec::matern(1.0, 1.2),
                inverted,
            },
            ..Self::nonstationary_br(seed)
        }
    }

    /// Gaussian mixture on the 9×9 grid with p = 0.9 and s0 at the origin.
    pub fn gaussian_mixture(seed: u64) -> Self {
        ProcessSpec {
            process: ProcessKind::GaussianMixture {
                p: 0.9,
                s0: (0.0, 0.0),
                stationary: CorrelationSpec::matern(2.0, 1.0),
                nonstationary: CorrelationSpec { theta1: 2.0, theta2: 0.8, centre: Some((0.0, 0.0)) },
            },
            n_obs: 1000,
            grid: GridSpec { n: 9, lo: -1.0, hi: 1.0 },
            seed,
        }
    }

    /// True when the process is asymptotically dependent.
    pub fn asymptotically_dependent(&self) -> bool {
        match &self.process {
            ProcessKind::Br { .. } => true,
            ProcessKind::MaxMixture { inverted, omega, .. } => !inverted && *omega > 0.0,
            _ => false,
        }
    }

    pub fn simulate(&self, sites: &SiteSet) -> Result<ObservationMatrix> {
        if self.n_obs < 2 {
            return Err(Error::Config(format!("n_obs = {} must be at least 2", self.n_obs)));
        }
        let n = self.n_obs;
        match &self.process {
            ProcessKind::Gaussian { correlation } => simulate_gaussian(sites, correlation, n, self.seed),
            ProcessKind::Br { variogram } => simulate_br(sites, variogram, n, self.seed),
            ProcessKind::InvertedBr { variogram } => invert_process(&simulate_br(sites, variogram, n, self.seed)?),
            ProcessKind::MaxMixture { omega, variogram, correlation, inverted } => {
                let h = simulate_max_mixture(sites, *omega, variogram, correlation, n, self.seed)?;
                if *inverted {
                    invert_process(&h)
                } else {
                    Ok(h)
                }
            }
            ProcessKind::GaussianMixture { p, s0, stationary, nonstationary } => {
                let idx = (0..sites.len())
                    .find(|&k| {
                        let c = sites.coord(k);
                        (c.0 - s0.0).abs() < 1e-9 && (c.1 - s0.1).abs() < 1e-9
                    })
                    .ok_or_else(|| Error::Config(format!("s0 = {:?} is not one of the sites", s0)))?;
                simulate_gaussian_mixture(sites, idx, *p, stationary, nonstationary, n, self.seed)
            }
        }
    }
}

fn ns_variogram() -> VariogramSpec {
    VariogramSpec { lambda: 2.0, kappa: 0.8, centre: Some((0.0, 0.0)) }
}

/// One realisation on an `n × n` grid over `[lo, hi]²`, as (x, y, value) rows.
///
/// Cost grows like `n⁶` for the max-stable kinds; keep `n` modest.
pub fn render_grid(spec: &ProcessSpec, n: usize, lo: f64, hi: f64) -> Result<Vec<(f64, f64, f64)>> {
    let sites = SiteSet::grid(n, lo, hi);
    let one = ProcessSpec { n_obs: 2, ..spec.clone() };
    let obs = one.simulate(&sites)?;
    Ok((0..sites.len())
        .map(|k| {
            let (x, y) = sites.coord(k);
            (x, y, obs.values()[(0, k)])
        })
        .collect())
}
