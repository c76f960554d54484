//! Restricted thin-plate-spline map from the G-plane to the D-plane.
//!
//! Each output coordinate is an affine term plus `m` radial basis functions
//! `h² log h` centred at anchor sites:
//!
//! ```text
//! x* = b1² x + ρ b1 b2 y + Σ δ¹_k g_k(x, y)
//! y* = b2² y + ρ b1 b2 x + Σ δ²_k g_k(x, y)
//! ```
//!
//! Both δ-vectors satisfy `Σδ = Σδx = Σδy = 0` over the anchor coordinates.
//! The first three entries of each vector are solved from the remaining
//! `m − 3`, so a spline with `m` anchors has `2m − 3` free parameters
//! (the affine `b1, b2, ρ` plus `2(m − 3)` deltas).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::{Metric, Plane, SiteSet};
use crate::error::{Error, Result};

/// Default resolution of the fold-check grid.
pub const DEFAULT_FOLD_RESOLUTION: usize = 64;

/// Radial basis `h² log h`, zero at the origin.
#[inline]
pub fn tps_basis(h: f64) -> f64 {
    if h <= 0.0 {
        0.0
    } else {
        h * h * h.ln()
    }
}

/// Basis evaluated from a squared distance: `½ r² log r²`.
#[inline]
fn basis_sq(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Solves for the first three deltas so the full vector satisfies the moment constraints.
///
/// `anchor_coords` holds all `m` anchor locations; `free` holds deltas `4..=m`.
pub fn complete_deltas(free: &[f64], anchor_coords: &[(f64, f64)]) -> Result<Vec<f64>> {
    let m = anchor_coords.len();
    if m < 3 {
        return Err(Error::Config(format!("need at least three anchors, got {m}")));
    }
    if free.len() != m - 3 {
        return Err(Error::DimensionMismatch(format!("{} free deltas for {} anchors", free.len(), m)));
    }
    let system = Matrix3::new(
        1.0,
        1.0,
        1.0,
        anchor_coords[0].0,
        anchor_coords[1].0,
        anchor_coords[2].0,
        anchor_coords[0].1,
        anchor_coords[1].1,
        anchor_coords[2].1,
    );
    let mut rhs = Vector3::zeros();
    for (&delta, &(x, y)) in free.iter().zip(&anchor_coords[3..]) {
        rhs[0] -= delta;
        rhs[1] -= delta * x;
        rhs[2] -= delta * y;
    }
    let scale = system.abs().max();
    if system.determinant().abs() <= 1e-12 * scale * scale * scale.max(1.0) {
        return Err(Error::Singular("first three anchors are collinear".into()));
    }
    let head = system.lu().solve(&rhs).ok_or_else(|| Error::Singular("first three anchors are collinear".into()))?;
    let mut out = Vec::with_capacity(m);
    out.extend_from_slice(head.as_slice());
    out.extend_from_slice(free);
    Ok(out)
}

/// Whether three points are (numerically) collinear.
pub fn collinear(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let scale = ((b.0 - a.0).hypot(b.1 - a.1)) * ((c.0 - a.0).hypot(c.1 - a.1));
    cross.abs() <= 1e-9 * scale.max(f64::MIN_POSITIVE)
}

/// Restricted thin-plate-spline parameters plus the carried dependence shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineParams {
    pub b1: f64,
    pub b2: f64,
    pub rho: f64,
    /// Indices into the G-plane site set.
    pub anchors: Vec<usize>,
    /// G-plane coordinates of the anchors (fixed centres).
    pub anchor_coords: Vec<(f64, f64)>,
    pub delta1: Vec<f64>,
    pub delta2: Vec<f64>,
    /// Dependence-model shape carried through the joint fit (κ or the Matérn θ2).
    pub kappa: f64,
}

impl SplineParams {
    /// Affine-only map (`m = 0`).
    pub fn affine(b1: f64, b2: f64, rho: f64) -> Self {
        SplineParams {
            b1,
            b2,
            rho,
            anchors: Vec::new(),
            anchor_coords: Vec::new(),
            delta1: Vec::new(),
            delta2: Vec::new(),
            kappa: 1.0,
        }
    }

    pub fn identity() -> Self {
        Self::affine(1.0, 1.0, 0.0)
    }

    /// Builds parameters from free deltas, completing the constrained ones.
    pub fn from_free(
        b1: f64,
        b2: f64,
        rho: f64,
        kappa: f64,
        anchors: &[usize],
        sites: &SiteSet,
        free1: &[f64],
        free2: &[f64],
    ) -> Result<Self> {
        let anchor_coords: Vec<(f64, f64)> = anchors.iter().map(|&i| sites.coord(i)).collect();
        let (delta1, delta2) = if anchors.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            (complete_deltas(free1, &anchor_coords)?, complete_deltas(free2, &anchor_coords)?)
        };
        Ok(SplineParams { b1, b2, rho, anchors: anchors.to_vec(), anchor_coords, delta1, delta2, kappa })
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Number of free spline parameters (`2m − 3` when `m ≥ 3`, else 3).
    pub fn n_free(&self) -> usize {
        let m = self.n_anchors();
        if m >= 3 {
            2 * m - 3
        } else {
            3
        }
    }

    /// Maps one G-plane point to the D-plane.
    #[inline]
    pub fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        let cross = self.rho * self.b1 * self.b2;
        let mut ox = self.b1 * self.b1 * x + cross * y;
        let mut oy = self.b2 * self.b2 * y + cross * x;
        for (k, &(ax, ay)) in self.anchor_coords.iter().enumerate() {
            let (dx, dy) = (x - ax, y - ay);
            let g = basis_sq(dx * dx + dy * dy);
            ox += self.delta1[k] * g;
            oy += self.delta2[k] * g;
        }
        (ox, oy)
    }

    /// Analytic Jacobian `[[∂x*/∂x, ∂x*/∂y], [∂y*/∂x, ∂y*/∂y]]`.
    pub fn jacobian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let cross = self.rho * self.b1 * self.b2;
        let mut j = [[self.b1 * self.b1, cross], [cross, self.b2 * self.b2]];
        for (k, &(ax, ay)) in self.anchor_coords.iter().enumerate() {
            let (dx, dy) = (x - ax, y - ay);
            let r2 = dx * dx + dy * dy;
            if r2 <= 0.0 {
                continue;
            }
            // d/dx of ½ r² log r² = dx (log r² + 1)
            let common = r2.ln() + 1.0;
            let (gx, gy) = (dx * common, dy * common);
            j[0][0] += self.delta1[k] * gx;
            j[0][1] += self.delta1[k] * gy;
            j[1][0] += self.delta2[k] * gx;
            j[1][1] += self.delta2[k] * gy;
        }
        j
    }

    pub fn jacobian_det(&self, x: f64, y: f64) -> f64 {
        let j = self.jacobian(x, y);
        j[0][0] * j[1][1] - j[0][1] * j[1][0]
    }

    /// Maps a list of coordinates.
    pub fn map_coords(&self, coords: &[(f64, f64)]) -> Vec<(f64, f64)> {
        coords.iter().map(|&(x, y)| self.map_point(x, y)).collect()
    }
}

/// Applies the spline to every site, producing a Euclidean D-plane site set.
pub fn apply_deformation(params: &SplineParams, sites: &SiteSet) -> Result<SiteSet> {
    let coords = params.map_coords(&sites.coords());
    if coords.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Domain("deformation produced non-finite coordinates".into()));
    }
    sites.relocated(&coords, Plane::D, Metric::Euclidean)
}

/// Rectangle `(xmin, xmax, ymin, ymax)` over which the fold check runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Domain {
    /// Bounding box of the sites expanded by 5% of its extent on each side.
    pub fn around(sites: &SiteSet) -> Self {
        let (x0, x1, y0, y1) = sites.bounding_box();
        let ex = 0.05 * (x1 - x0).max(f64::EPSILON);
        let ey = 0.05 * (y1 - y0).max(f64::EPSILON);
        Domain { xmin: x0 - ex, xmax: x1 + ex, ymin: y0 - ey, ymax: y1 + ey }
    }
}

/// True iff the Jacobian determinant is strictly positive on a `resolution²` grid.
///
/// The identity has positive determinant, so maps reached from it without a
/// fold keep that orientation; reflected affine parts (`|rho| > 1`) are rejected.
pub fn check_bijectivity(params: &SplineParams, domain: &Domain, resolution: usize) -> bool {
    let res = resolution.max(16);
    let step_x = (domain.xmax - domain.xmin) / (res - 1) as f64;
    let step_y = (domain.ymax - domain.ymin) / (res - 1) as f64;
    for r in 0..res {
        let y = domain.ymin + r as f64 * step_y;
        for c in 0..res {
            let x = domain.xmin + c as f64 * step_x;
            let det = params.jacobian_det(x, y);
            if !(det > 0.0) || !det.is_finite() {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_square() -> Vec<(f64, f64)> {
        vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
    }

    fn square_params(d1: f64, d2: f64) -> SplineParams {
        let sites = SiteSet::from_coords(&unit_square()).unwrap();
        SplineParams::from_free(1.0, 1.0, 0.0, 1.0, &[0, 1, 2, 3], &sites, &[d1], &[d2]).unwrap()
    }

    #[test]
    fn basis_values() {
        assert_eq!(tps_basis(1.0), 0.0);
        assert_eq!(tps_basis(0.0), 0.0);
        let e = std::f64::consts::E;
        assert!((tps_basis(e) - e * e).abs() < 1e-12);
        assert!((basis_sq(e * e) - e * e).abs() < 1e-12);
    }

    #[test]
    fn complete_deltas_examples() {
        assert_eq!(complete_deltas(&[0.0], &unit_square()).unwrap(), vec![0.0; 4]);
        let full = complete_deltas(&[1.0], &unit_square()).unwrap();
        for (got, want) in full.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn complete_deltas_permutation_consistent() {
        let anchors = vec![(0.0, 0.0), (2.0, 0.0), (0.0, 1.5), (1.0, 1.0), (0.3, 2.0)];
        let a = complete_deltas(&[0.4, -1.1], &anchors).unwrap();
        let mut swapped = anchors.clone();
        swapped.swap(3, 4);
        let b = complete_deltas(&[-1.1, 0.4], &swapped).unwrap();
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
        assert_eq!((a[3], a[4]), (b[4], b[3]));
    }

    #[test]
    fn collinear_anchors_rejected() {
        let anchors = vec![(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (0.0, 1.0)];
        assert!(matches!(complete_deltas(&[1.0], &anchors), Err(Error::Singular(_))));
    }

    #[test]
    fn affine_maps() {
        let id = SplineParams::identity();
        assert_eq!(id.map_point(0.3, -0.7), (0.3, -0.7));
        let sheared = SplineParams::affine(1.0, 1.0, 0.5);
        assert_eq!(sheared.map_point(2.0, 4.0), (4.0, 5.0));
    }

    #[test]
    fn identity_preserves_distances() {
        let sites = SiteSet::grid(5, -1.0, 1.0);
        let out = apply_deformation(&SplineParams::identity(), &sites).unwrap();
        assert_eq!(out.plane(), Plane::D);
        assert_eq!(out.ids(), sites.ids());
        for i in 0..sites.len() {
            for j in 0..sites.len() {
                assert_eq!(out.distance(i, j), sites.distance(i, j));
            }
        }
    }

    #[test]
    fn radial_terms_match_scalar_formula() {
        // δ = (1, −1, −1, 1) in x*, zero in y*, evaluated at (0.5, 0.5):
        // every anchor is at distance √0.5, so g = 0.5 log √0.5 for all four.
        let p = square_params(1.0, 0.0);
        let g = 0.5 * 0.5f64.sqrt().ln();
        let want_x = 0.5 + (1.0 - 1.0 - 1.0 + 1.0) * g;
        let (x, y) = p.map_point(0.5, 0.5);
        assert!((x - want_x).abs() < 1e-14);
        assert!((y - 0.5).abs() < 1e-14);
        // off-centre point: explicit sum over anchors
        let (px, py) = (0.2, 0.9);
        let dl = [1.0, -1.0, -1.0, 1.0];
        let mut sx = px;
        for (k, &(ax, ay)) in unit_square().iter().enumerate() {
            sx += dl[k] * tps_basis((px - ax).hypot(py - ay));
        }
        assert!((p.map_point(px, py).0 - sx).abs() < 1e-13);
    }

    #[test]
    fn bijectivity_affine_cases() {
        let dom = Domain { xmin: -1.0, xmax: 1.0, ymin: -1.0, ymax: 1.0 };
        assert!(check_bijectivity(&SplineParams::identity(), &dom, 64));
        assert!(check_bijectivity(&SplineParams::affine(1.3, 0.7, 0.9), &dom, 32));
        assert!(!check_bijectivity(&SplineParams::affine(1.0, 1.0, 1.0), &dom, 32));
        assert!(!check_bijectivity(&SplineParams::affine(1.0, 2.0, -1.5), &dom, 32));
        for &(b1, b2, rho) in &[(1.0, 1.0, 0.3), (0.4, 2.2, -0.8), (1.7, 0.9, 1.4)] {
            let p = SplineParams::affine(b1, b2, rho);
            let want = b1 * b1 * b2 * b2 * (1.0 - rho * rho);
            assert!((p.jacobian_det(0.37, -0.2) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn large_delta_folds() {
        let sites = SiteSet::from_coords(&unit_square()).unwrap();
        let dom = Domain::around(&sites);
        assert!(check_bijectivity(&square_params(0.0, 0.0), &dom, 64));
        let mut fold_at = None;
        for k in 1..200 {
            let d = 0.05 * k as f64;
            if !check_bijectivity(&square_params(d, 0.0), &dom, 64) {
                fold_at = Some(d);
                break;
            }
        }
        let d = fold_at.expect("increasing a single delta must eventually fold");
        let p = square_params(d, 0.0);
        let mut signs = (false, false);
        for r in 0..64 {
            for c in 0..64 {
                let x = dom.xmin + (dom.xmax - dom.xmin) * c as f64 / 63.0;
                let y = dom.ymin + (dom.ymax - dom.ymin) * r as f64 / 63.0;
                let det = p.jacobian_det(x, y);
                signs.0 |= det > 0.0;
                signs.1 |= det <= 0.0;
            }
        }
        assert!(signs.0 && signs.1);
    }

    proptest! {
        #[test]
        fn completed_deltas_satisfy_constraints(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..12),
            seed in proptest::collection::vec(-3.0f64..3.0, 12),
        ) {
            prop_assume!(!collinear(pts[0], pts[1], pts[2]));
            let area = ((pts[1].0 - pts[0].0) * (pts[2].1 - pts[0].1)
                - (pts[1].1 - pts[0].1) * (pts[2].0 - pts[0].0)).abs();
            prop_assume!(area > 0.5);
            let free = &seed[..pts.len() - 3];
            let full = complete_deltas(free, &pts).unwrap();
            let s0: f64 = full.iter().sum();
            let sx: f64 = full.iter().zip(&pts).map(|(d, p)| d * p.0).sum();
            let sy: f64 = full.iter().zip(&pts).map(|(d, p)| d * p.1).sum();
            prop_assert!(s0.abs() < 1e-10 && sx.abs() < 1e-10 && sy.abs() < 1e-10);
        }

        #[test]
        fn jacobian_matches_finite_differences(
            d1 in -0.5f64..0.5, d2 in -0.5f64..0.5,
            x in -0.2f64..1.2, y in -0.2f64..1.2,
            rho in -0.9f64..0.9,
        ) {
            let mut p = square_params(d1, d2);
            p.rho = rho;
            let h = 1e-6;
            let (xp, yp) = p.map_point(x + h, y);
            let (xm, ym) = p.map_point(x - h, y);
            let (xq, yq) = p.map_point(x, y + h);
            let (xr, yr) = p.map_point(x, y - h);
            let j = p.jacobian(x, y);
            let fd = [[(xp - xm) / (2.0 * h), (xq - xr) / (2.0 * h)],
                      [(yp - ym) / (2.0 * h), (yq - yr) / (2.0 * h)]];
            for a in 0..2 {
                for b in 0..2 {
                    prop_assert!((j[a][b] - fd[a][b]).abs() < 1e-6, "{:?} vs {:?}", j, fd);
                }
            }
        }
    }
}
