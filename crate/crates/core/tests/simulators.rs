use extremal_deform::data::{ObservationMatrix, Scale, SiteSet};
use extremal_deform::dependence::{chi_br, empirical_chi_matrix, empirical_corr_matrix, matern_corr};
use extremal_deform::simulate::{
    invert_process, nonstationary_variogram, simulate_br, simulate_gaussian, simulate_gaussian_mixture,
    simulate_max_mixture, CorrelationSpec, VariogramSpec,
};
use nalgebra::DMatrix;

fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = cdf(x);
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

const KS_CRIT_1PCT: f64 = 1.628;

#[test]
fn br_single_site_is_unit_frechet() {
    let sites = SiteSet::from_coords(&[(0.0, 0.0)]).unwrap();
    let obs = simulate_br(&sites, &VariogramSpec::stationary(1.0, 1.0), 4000, 11).unwrap();
    let d = ks_statistic(obs.column(0), |x| (-1.0 / x).exp());
    assert!(d * 4000f64.sqrt() < KS_CRIT_1PCT, "KS D = {d}");
}

#[test]
fn br_margins_and_inversion() {
    let sites = SiteSet::grid(3, 0.0, 2.0);
    let obs = simulate_br(&sites, &VariogramSpec::stationary(1.0, 1.0), 3000, 12).unwrap();
    for c in [0, 4, 8] {
        let d = ks_statistic(obs.column(c), |x| (-1.0 / x).exp());
        assert!(d * 3000f64.sqrt() < KS_CRIT_1PCT, "site {c}: KS D = {d}");
    }
    let inv = invert_process(&obs).unwrap();
    let d = ks_statistic(inv.column(3), |y| 1.0 - (-y).exp());
    assert!(d * 3000f64.sqrt() < KS_CRIT_1PCT, "inverted KS D = {d}");
}

#[test]
fn stationary_br_pairwise_chi_matches_formula() {
    let sites = SiteSet::grid(4, 0.0, 3.0);
    let n = 5000;
    let q = 0.95;
    let obs = simulate_br(&sites, &VariogramSpec::stationary(1.0, 1.0), n, 2024).unwrap();
    let chi = empirical_chi_matrix(&obs, q).unwrap();
    let n_exc = (1.0 - q) * n as f64;
    let (mut inside, mut total) = (0, 0);
    for i in 0..sites.len() {
        for j in (i + 1)..sites.len() {
            let want = chi_br(sites.distance(i, j), 1.0, 1.0).unwrap();
            let se = (want * (1.0 - want) / n_exc).sqrt();
            total += 1;
            if (chi.values[(i, j)] - want).abs() <= 3.0 * se {
                inside += 1;
            }
        }
    }
    assert!(inside as f64 >= 0.9 * total as f64, "{inside}/{total}");
}

#[test]
fn nonstationary_br_stronger_near_centre() {
    let sites = SiteSet::grid(8, -1.0, 1.0);
    let v = VariogramSpec { lambda: 2.0, kappa: 0.8, centre: Some((0.0, 0.0)) };
    let obs = simulate_br(&sites, &v, 1500, 5).unwrap();
    let chi = empirical_chi_matrix(&obs, 0.9).unwrap();
    // horizontal neighbours straddling the centre versus along the bottom edge
    let near = chi.values[(3 * 8 + 3, 3 * 8 + 4)];
    let far = chi.values[(0, 1)];
    assert!(near > far + 0.1, "near {near}, far {far}");
    let g_near = nonstationary_variogram(sites.coord(27), sites.coord(28), (0.0, 0.0), 2.0, 0.8);
    let g_far = nonstationary_variogram(sites.coord(0), sites.coord(1), (0.0, 0.0), 2.0, 0.8);
    assert!(g_near < g_far);
}

#[test]
fn max_stability_spot_check() {
    // maxima of k replicates divided by k share the replicate law
    let sites = SiteSet::grid(2, 0.0, 1.0);
    let v = VariogramSpec::stationary(1.0, 1.0);
    let k = 5;
    let n = 2000;
    let raw = simulate_br(&sites, &v, n * k, 77).unwrap();
    let maxima = DMatrix::from_fn(n, sites.len(), |t, c| {
        (0..k).map(|r| raw.values()[(t * k + r, c)]).fold(0.0, f64::max) / k as f64
    });
    let m = ObservationMatrix::new(maxima, Scale::Frechet, sites.ids()).unwrap();
    let d = ks_statistic(m.column(1), |x| (-1.0 / x).exp());
    assert!(d * (n as f64).sqrt() < KS_CRIT_1PCT, "KS D = {d}");
    let single = simulate_br(&sites, &v, n, 78).unwrap();
    let a = empirical_chi_matrix(&m, 0.9).unwrap().values[(0, 1)];
    let b = empirical_chi_matrix(&single, 0.9).unwrap().values[(0, 1)];
    let se = (2.0 * a * (1.0 - a) / (0.1 * n as f64)).sqrt();
    assert!((a - b).abs() < 3.0 * se, "{a} vs {b}");
}

#[test]
fn gaussian_correlation_matches_matern() {
    let sites = SiteSet::grid(3, -1.0, 1.0);
    let n = 4000;
    let obs = simulate_gaussian(&sites, &CorrelationSpec::matern(1.0, 1.2), n, 31).unwrap();
    let rho = empirical_corr_matrix(&obs).unwrap();
    for i in 0..sites.len() {
        for j in (i + 1)..sites.len() {
            let want = matern_corr(sites.distance(i, j), 1.0, 1.2).unwrap();
            let se = (1.0 - want * want) / (n as f64).sqrt();
            assert!((rho.values[(i, j)] - want).abs() < 3.0 * se + 1e-3, "({i},{j})");
        }
    }
}

#[test]
fn max_mixture_chi_is_scaled_by_omega() {
    let sites = SiteSet::grid(3, -1.0, 1.0);
    let v = VariogramSpec { lambda: 2.0, kappa: 0.8, centre: Some((0.0, 0.0)) };
    let g = CorrelationSpec::matern(1.0, 1.2);
    let n = 20_000;
    let q = 0.98;
    let h = simulate_max_mixture(&sites, 0.3, &v, &g, n, 8).unwrap();
    let x = simulate_br(&sites, &v, n, 8).unwrap();
    let ch = empirical_chi_matrix(&h, q).unwrap();
    let cx = empirical_chi_matrix(&x, q).unwrap();
    let n_exc = (1.0 - q) * n as f64;
    let mut inside = 0;
    let mut total = 0;
    for i in 0..sites.len() {
        for j in (i + 1)..sites.len() {
            let (a, b) = (ch.values[(i, j)], cx.values[(i, j)]);
            let se = ((a * (1.0 - a) + 0.09 * b * (1.0 - b)) / n_exc).sqrt();
            total += 1;
            if (a - 0.3 * b).abs() <= 3.0 * se {
                inside += 1;
            }
        }
    }
    assert!(inside as f64 >= 0.9 * total as f64, "{inside}/{total}");
}

#[test]
fn gaussian_mixture_tail_and_body_differ() {
    let sites = SiteSet::grid(9, -1.0, 1.0);
    let s = CorrelationSpec::matern(2.0, 1.0);
    let ns = CorrelationSpec { theta1: 2.0, theta2: 0.8, centre: Some((0.0, 0.0)) };
    let obs = simulate_gaussian_mixture(&sites, 40, 0.9, &s, &ns, 3000, 4).unwrap();
    let rho = empirical_corr_matrix(&obs).unwrap();
    let chi = empirical_chi_matrix(&obs, 0.9).unwrap();
    // an edge pair at spacing 0.25: the stationary body keeps correlation high,
    // the non-stationary tail (warped distance ~0.47) weakens joint exceedances
    let (i, j) = (0, 1);
    let rho_s = matern_corr(0.25, 2.0, 1.0).unwrap();
    assert!((rho.values[(i, j)] - rho_s).abs() < 0.05, "{}", rho.values[(i, j)]);
    let chi_centre = chi.values[(40, 41)];
    assert!(chi_centre > chi.values[(i, j)], "{chi_centre} vs {}", chi.values[(i, j)]);
}
