//! Observations, site coordinates and rank-based marginal transforms.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::norm_quantile;

/// Mean Earth radius in kilometres used for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Plane {
    G,
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    Euclidean,
    /// Haversine distance on lon/lat degrees (`x` = longitude, `y` = latitude).
    GreatEarth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

/// Ordered sampling locations in either the geographic or the deformed plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSet {
    sites: Vec<Site>,
    plane: Plane,
    metric: Metric,
}

impl SiteSet {
    pub fn new(sites: Vec<Site>, plane: Plane, metric: Metric) -> Result<Self> {
        let mut seen = HashMap::with_capacity(sites.len());
        for (k, s) in sites.iter().enumerate() {
            if !s.x.is_finite() || !s.y.is_finite() {
                return Err(Error::Format(format!("site '{}' has non-finite coordinates", s.id)));
            }
            if let Some(prev) = seen.insert(s.id.as_str(), k) {
                return Err(Error::Format(format!("duplicate site id '{}' (rows {} and {})", s.id, prev, k)));
            }
        }
        let set = SiteSet { sites, plane, metric };
        set.validate_metric()?;
        Ok(set)
    }

    /// Builds a planar Euclidean G-plane site set with ids `s0, s1, ...`.
    pub fn from_coords(coords: &[(f64, f64)]) -> Result<Self> {
        let sites = coords.iter().enumerate().map(|(k, &(x, y))| Site { id: format!("s{k}"), x, y }).collect();
        Self::new(sites, Plane::G, Metric::Euclidean)
    }

    /// Regular `n × n` grid on `[lo, hi]²`, row-major from the bottom-left corner.
    pub fn grid(n: usize, lo: f64, hi: f64) -> Self {
        let step = if n > 1 { (hi - lo) / (n as f64 - 1.0) } else { 0.0 };
        let mut coords = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                coords.push((lo + c as f64 * step, lo + r as f64 * step));
            }
        }
        Self::from_coords(&coords).expect("grid coordinates are finite and unique")
    }

    fn validate_metric(&self) -> Result<()> {
        if self.metric == Metric::GreatEarth {
            if self.plane != Plane::G {
                return Err(Error::Config("great-earth metric is only valid on the G-plane".into()));
            }
            for s in &self.sites {
                if !(-180.0..=360.0).contains(&s.x) || !(-90.0..=90.0).contains(&s.y) {
                    return Err(Error::Config(format!(
                        "site '{}' is not a lon/lat coordinate ({}, {})",
                        s.id, s.x, s.y
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn with_metric(mut self, metric: Metric) -> Result<Self> {
        self.metric = metric;
        self.validate_metric()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn ids(&self) -> Vec<String> {
        self.sites.iter().map(|s| s.id.clone()).collect()
    }

    pub fn coord(&self, i: usize) -> (f64, f64) {
        (self.sites[i].x, self.sites[i].y)
    }

    pub fn coords(&self) -> Vec<(f64, f64)> {
        self.sites.iter().map(|s| (s.x, s.y)).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.id == id)
    }

    /// Distance between sites `i` and `j` under the set's metric.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.sites[i], &self.sites[j]);
        match self.metric {
            Metric::Euclidean => (a.x - b.x).hypot(a.y - b.y),
            Metric::GreatEarth => haversine_km((a.x, a.y), (b.x, b.y)),
        }
    }

    /// Full symmetric distance matrix.
    pub fn distance_matrix(&self) -> DMatrix<f64> {
        let d = self.len();
        DMatrix::from_fn(d, d, |i, j| if i == j { 0.0 } else { self.distance(i, j) })
    }

    /// Axis-aligned bounding box `(xmin, xmax, ymin, ymax)`.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        self.sites
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY), |(x0, x1, y0, y1), s| {
                (x0.min(s.x), x1.max(s.x), y0.min(s.y), y1.max(s.y))
            })
    }

    /// Copy with the same ids and order but new coordinates and plane.
    pub fn relocated(&self, coords: &[(f64, f64)], plane: Plane, metric: Metric) -> Result<Self> {
        if coords.len() != self.len() {
            return Err(Error::DimensionMismatch(format!("{} coordinates for {} sites", coords.len(), self.len())));
        }
        let sites = self.sites.iter().zip(coords).map(|(s, &(x, y))| Site { id: s.id.clone(), x, y }).collect();
        SiteSet::new(sites, plane, metric)
    }

    /// Coordinates affinely rescaled into `[0,1]²` preserving aspect ratio.
    pub fn rescaled_unit(&self) -> Vec<(f64, f64)> {
        let (x0, x1, y0, y1) = self.bounding_box();
        let span = (x1 - x0).max(y1 - y0);
        let span = if span > 0.0 { span } else { 1.0 };
        self.sites.iter().map(|s| ((s.x - x0) / span, (s.y - y0) / span)).collect()
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::Format(format!("sites file lacks column '{name}'")))
        };
        let (ci, cx, cy) = (col("id")?, col("x")?, col("y")?);
        let mut sites = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |c: usize| parse_cell(rec.get(c).unwrap_or(""), row + 1, c + 1);
            sites.push(Site { id: rec.get(ci).unwrap_or("").to_string(), x: num(cx)?, y: num(cy)? });
        }
        SiteSet::new(sites, Plane::G, Metric::Euclidean)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_coords_csv(path, &self.coords())
    }

    /// Writes `id,x,y` rows with the given coordinates (e.g. rescaled copies).
    pub fn write_coords_csv(&self, path: impl AsRef<Path>, coords: &[(f64, f64)]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "x", "y"])?;
        for (s, (x, y)) in self.sites.iter().zip(coords) {
            w.write_record([s.id.clone(), fmt_f64(*x), fmt_f64(*y)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Great-circle distance between two (lon, lat) points in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lon1, lat1) = (a.0.to_radians(), a.1.to_radians());
    let (lon2, lat2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Raw,
    Uniform,
    Exponential,
    Frechet,
    Gaussian,
}

/// `N × d` observations, rows in time order and columns matching a [`SiteSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    values: DMatrix<f64>,
    scale: Scale,
    site_ids: Vec<String>,
}

impl ObservationMatrix {
    pub fn new(values: DMatrix<f64>, scale: Scale, site_ids: Vec<String>) -> Result<Self> {
        if values.ncols() != site_ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} columns but {} site ids",
                values.ncols(),
                site_ids.len()
            )));
        }
        if values.nrows() < 2 {
            return Err(Error::Format("at least two observations are required".into()));
        }
        for c in 0..values.ncols() {
            for r in 0..values.nrows() {
                let v = values[(r, c)];
                let ok = v.is_finite()
                    && match scale {
                        Scale::Uniform => v > 0.0 && v < 1.0,
                        Scale::Exponential => v >= 0.0,
                        Scale::Frechet => v > 0.0,
                        _ => true,
                    };
                if !ok {
                    return Err(Error::Domain(format!(
                        "value {v} at row {}, column {} invalid for {scale:?} scale",
                        r + 1,
                        c + 1
                    )));
                }
            }
        }
        Ok(ObservationMatrix { values, scale, site_ids })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn n_obs(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_sites(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }

    /// Sub-matrix of the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> ObservationMatrix {
        let values = DMatrix::from_fn(self.n_obs(), cols.len(), |r, c| self.values[(r, cols[c])]);
        let ids = cols.iter().map(|&c| self.site_ids[c].clone()).collect();
        ObservationMatrix { values, scale: self.scale, site_ids: ids }
    }

    /// Sub-matrix of the given rows (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> ObservationMatrix {
        let values = DMatrix::from_fn(rows.len(), self.n_sites(), |r, c| self.values[(rows[r], c)]);
        ObservationMatrix { values, scale: self.scale, site_ids: self.site_ids.clone() }
    }

    /// Checks that the column ids agree with a site set, in order.
    pub fn check_sites(&self, sites: &SiteSet) -> Result<()> {
        if self.site_ids.len() != sites.len() || self.site_ids.iter().zip(sites.sites()).any(|(a, s)| *a != s.id) {
            return Err(Error::DimensionMismatch("observation columns do not match the site set".into()));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.site_ids)?;
        for row in self.values.row_iter() {
            w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Transforms to `target` margins, applying the empirical rank transform
    /// first when the data are not already on that scale.
    pub fn to_scale(&self, target: Scale) -> Result<ObservationMatrix> {
        if self.scale == target {
            return Ok(self.clone());
        }
        rank_transform(self, target)
    }
}

fn parse_cell(cell: &str, row: usize, column: usize) -> Result<f64> {
    let v: f64 =
        cell.trim().parse().map_err(|_| Error::Parse { row, column, message: format!("'{cell}' is not a number") })?;
    if !v.is_finite() {
        return Err(Error::Parse { row, column, message: format!("non-finite value '{cell}'") });
    }
    Ok(v)
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Reads the observations CSV (header = site ids) and the sites CSV (`id,x,y`).
/// Columns are returned in site-file order with `scale = raw`.
pub fn load_observations(path: impl AsRef<Path>, sites_path: impl AsRef<Path>) -> Result<(ObservationMatrix, SiteSet)> {
    let sites = SiteSet::read_csv(sites_path)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() != sites.len() {
        return Err(Error::DimensionMismatch(format!(
            "observations have {} columns but the sites file lists {} sites",
            header.len(),
            sites.len()
        )));
    }
    // column k of the output reads file column order[k]
    let mut order = Vec::with_capacity(sites.len());
    for s in sites.sites() {
        let pos = header
            .iter()
            .position(|h| *h == s.id)
            .ok_or_else(|| Error::Format(format!("site '{}' missing from observation header", s.id)))?;
        order.push(pos);
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Format(format!("row {} has {} cells", r + 1, rec.len())));
        }
        let mut row = Vec::with_capacity(order.len());
        for &c in &order {
            row.push(parse_cell(&rec[c], r + 1, c + 1)?);
        }
        rows.push(row);
    }
    let n = rows.len();
    let d = sites.len();
    let values = DMatrix::from_fn(n, d, |r, c| rows[r][c]);
    let obs = ObservationMatrix::new(values, Scale::Raw, sites.ids())?;
    Ok((obs, sites))
}

/// Average ranks (1-based) of a slice.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && xs[idx[end]] == xs[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

/// Maps a uniform value to the target margin.
#[inline]
pub fn uniform_to(u: f64, target: Scale) -> f64 {
    match target {
        Scale::Uniform | Scale::Raw => u,
        Scale::Exponential => -(-u).ln_1p(),
        Scale::Frechet => -1.0 / u.ln(),
        Scale::Gaussian => norm_quantile(u),
    }
}

/// Site-wise empirical transform: rank `r` maps to `u = r/(N+1)`, then to the target margin.
pub fn rank_transform(obs: &ObservationMatrix, target: Scale) -> Result<ObservationMatrix> {
    // Ranks are invariant under the monotone maps between margins, so any
    // input scale is accepted.
    if target == Scale::Raw {
        return Err(Error::Config("cannot rank-transform to the raw scale".into()));
    }
    let n = obs.n_obs();
    let d = obs.n_sites();
    let mut out = DMatrix::zeros(n, d);
    for j in 0..d {
        let col = obs.column(j);
        if col.iter().all(|&v| v == col[0]) {
            return Err(Error::Domain(format!("column '{}' is constant", obs.site_ids[j])));
        }
        let ranks = average_ranks(&col);
        for (r, rank) in ranks.into_iter().enumerate() {
            out[(r, j)] = uniform_to(rank / (n as f64 + 1.0), target);
        }
    }
    Ok(ObservationMatrix { values: out, scale: target, site_ids: obs.site_ids.clone() })
}
