use extremal_deform::data::SiteSet;
use extremal_deform::likelihood::{claic, fit_pairwise_model, CompositeLikelihood, Family};
use extremal_deform::simulate::{invert_process, simulate_br, VariogramSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid16() -> SiteSet {
    SiteSet::grid(4, 0.0, 3.0)
}

#[test]
fn br_fit_recovers_parameters() {
    let sites = grid16();
    let mut fits = Vec::new();
    for seed in 0..4u64 {
        let obs = simulate_br(&sites, &VariogramSpec::stationary(1.0, 1.0), 1000, 500 + seed).unwrap();
        let fit = fit_pairwise_model(&obs, &sites, Family::Br, 0.9).unwrap();
        fits.push((fit.lambda_hat, fit.kappa_hat));
    }
    let ml = fits.iter().map(|f| f.0).sum::<f64>() / fits.len() as f64;
    let mk = fits.iter().map(|f| f.1).sum::<f64>() / fits.len() as f64;
    assert!((ml - 1.0).abs() < 0.2 && (mk - 1.0).abs() < 0.2, "{ml} {mk}");
}

#[test]
fn fitted_optimum_is_local_maximum() {
    let sites = grid16();
    let obs = invert_process(&simulate_br(&sites, &VariogramSpec::stationary(1.5, 0.8), 600, 3).unwrap()).unwrap();
    let fit = fit_pairwise_model(&obs, &sites, Family::Ibr, 0.9).unwrap();
    let cl = CompositeLikelihood::new(&obs, &sites, Family::Ibr, 0.9).unwrap();
    let best = cl.loglik(fit.lambda_hat, fit.kappa_hat).unwrap();
    assert!((best + fit.ncll).abs() < 1e-9 * best.abs());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = 0.03;
        let l = fit.lambda_hat * (1.0 + r * angle.cos());
        let k = (fit.kappa_hat * (1.0 + r * angle.sin())).min(2.0);
        assert!(cl.loglik(l, k).unwrap() <= best + 1e-9 * best.abs());
    }
}

#[test]
fn ibr_fit_on_smith_data_reports_boundary() {
    let sites = grid16();
    let mut pinned = 0;
    for seed in 0..3u64 {
        let obs = invert_process(&simulate_br(&sites, &VariogramSpec::stationary(1.0, 2.0), 800, 70 + seed).unwrap())
            .unwrap();
        let fit = fit_pairwise_model(&obs, &sites, Family::Ibr, 0.9).unwrap();
        assert!(fit.kappa_hat > 1.7, "{}", fit.kappa_hat);
        if fit.kappa_at_boundary {
            assert_eq!(fit.kappa_hat, 2.0);
            pinned += 1;
        } else {
            assert!(fit.kappa_hat <= 1.999);
        }
    }
    assert!(pinned >= 1);
}

// Independent CLAIC: scores by forward differences of per-observation
// likelihoods, J by explicit block loops, H by differencing the summed scores.
fn claic_reference(cl: &CompositeLikelihood, lambda: f64, kappa: f64, b: usize) -> f64 {
    let n = cl.n_obs();
    let step = [2e-6 * lambda, 2e-6 * kappa];
    let grad_obs = |l: f64, k: f64| -> DMatrix<f64> {
        let pl = cl.per_obs_loglik(l + step[0], k).unwrap();
        let ml = cl.per_obs_loglik(l - step[0], k).unwrap();
        let pk = cl.per_obs_loglik(l, k + step[1]).unwrap();
        let mk = cl.per_obs_loglik(l, k - step[1]).unwrap();
        DMatrix::from_fn(n, 2, |t, c| {
            if c == 0 {
                (pl[t] - ml[t]) / (2.0 * step[0])
            } else {
                (pk[t] - mk[t]) / (2.0 * step[1])
            }
        })
    };
    let s = grad_obs(lambda, kappa);
    let nb = n / b;
    let mut blocks = vec![[0.0f64; 2]; nb];
    for (k, blk) in blocks.iter_mut().enumerate() {
        for t in k * b..(k + 1) * b {
            blk[0] += s[(t, 0)];
            blk[1] += s[(t, 1)];
        }
    }
    let mean =
        [blocks.iter().map(|x| x[0]).sum::<f64>() / nb as f64, blocks.iter().map(|x| x[1]).sum::<f64>() / nb as f64];
    let mut j = [[0.0; 2]; 2];
    for x in &blocks {
        for r in 0..2 {
            for c in 0..2 {
                j[r][c] += (x[r] - mean[r]) * (x[c] - mean[c]) / (nb as f64 - 1.0) * n as f64 / b as f64;
            }
        }
    }
    let total = |l: f64, k: f64| -> [f64; 2] {
        let g = grad_obs(l, k);
        [g.column(0).sum(), g.column(1).sum()]
    };
    let hstep = [1e-4 * lambda, 1e-4 * kappa];
    let gl_p = total(lambda + hstep[0], kappa);
    let gl_m = total(lambda - hstep[0], kappa);
    let gk_p = total(lambda, kappa + hstep[1]);
    let gk_m = total(lambda, kappa - hstep[1]);
    let h00 = -(gl_p[0] - gl_m[0]) / (2.0 * hstep[0]);
    let h11 = -(gk_p[1] - gk_m[1]) / (2.0 * hstep[1]);
    let h01 = -0.5 * ((gl_p[1] - gl_m[1]) / (2.0 * hstep[0]) + (gk_p[0] - gk_m[0]) / (2.0 * hstep[1]));
    let det = h00 * h11 - h01 * h01;
    let inv = [[h11 / det, -h01 / det], [-h01 / det, h00 / det]];
    let mut tr = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            tr += j[r][c] * inv[c][r];
        }
    }
    -2.0 * (cl.loglik(lambda, kappa).unwrap() - tr)
}

#[test]
fn claic_matches_independent_recomputation() {
    let sites = SiteSet::grid(3, 0.0, 2.0);
    let obs = simulate_br(&sites, &VariogramSpec::stationary(1.0, 1.2), 400, 19).unwrap();
    let fit = fit_pairwise_model(&obs, &sites, Family::Br, 0.9).unwrap();
    let cl = CompositeLikelihood::new(&obs, &sites, Family::Br, 0.9).unwrap();
    for b in [1, 5] {
        let got = claic(&fit, b).unwrap();
        let want = claic_reference(&cl, fit.lambda_hat, fit.kappa_hat, b);
        let pen_got = got - 2.0 * fit.ncll;
        let pen_want = want - 2.0 * fit.ncll;
        assert!((pen_got - pen_want).abs() < 1e-3 * pen_want.abs(), "b={b}: {pen_got} vs {pen_want}");
        assert!(got >= 2.0 * fit.ncll);
    }
    assert!(claic(&fit, 400).is_err());
}
