//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the test log. Failures are reported in
//! the summary line; set `ACCEPTANCE_STRICT=1` to also fail the process.

use std::time::Instant;

use extremal_deform::data::{ObservationMatrix, Scale, SiteSet};
use extremal_deform::deform::DeformMethod;
use extremal_deform::dependence::{chi_br, empirical_chi_matrix, matern_corr};
use extremal_deform::diagnostics::{stationary_bootstrap_ci, triple_chi_empirical, BootstrapSettings};
use extremal_deform::likelihood::{br_exponent, fit_pairwise_model, ibr_pair_cdf, ibr_pair_survival, Family};
use extremal_deform::simulate::{
    seeded_rng, simulate_br, simulate_max_mixture, CorrelationSpec, ProcessSpec, VariogramSpec,
};
use extremal_deform::study::{run_study, StudyConfig, StudyResult, NONE_LABEL};
use extremal_deform::tps::{check_bijectivity, Domain, SplineParams};
use nalgebra::DMatrix;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn shares(study: &StudyResult) -> String {
    study.proportions.iter().map(|(m, p)| format!("{m} {p:.2}")).collect::<Vec<_>>().join(", ")
}

fn criterion_1(study: &StudyResult) -> Outcome {
    let p = study.proportion(NONE_LABEL);
    let wins = (p * study.repetitions.len() as f64).round();
    outcome(
        wins == 0.0,
        format!("baseline lowest CLAIC in {wins}/{} repetitions; {}", study.repetitions.len(), shares(study)),
    )
}

fn criterion_2(study: &StudyResult) -> Outcome {
    let n = study.repetitions.len();
    let wins = study
        .repetitions
        .iter()
        .filter(|r| r.winner == DeformMethod::ChiBr.name() || r.winner == DeformMethod::ChiIbr.name())
        .count();
    outcome(wins >= 8, format!("chi methods lowest CLAIC in {wins}/{n} repetitions; {}", shares(study)))
}

fn criterion_3() -> Outcome {
    let sites = SiteSet::grid(4, 0.0, 3.0);
    let n = 5000;
    let q = 0.95;
    let obs = simulate_br(&sites, &VariogramSpec::stationary(1.0, 1.0), n, 3).unwrap();
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
    let frac = inside as f64 / total as f64;
    outcome(frac >= 0.9, format!("{inside}/{total} pairs within 3 standard errors ({:.1}%)", 100.0 * frac))
}

fn criterion_4() -> Outcome {
    let sites = SiteSet::grid(4, 0.0, 3.0);
    let seeds = 10;
    let (mut sl, mut sk) = (0.0, 0.0);
    for s in 0..seeds {
        let obs = simulate_br(&sites, &VariogramSpec::stationary(1.0, 1.0), 1000, 4000 + s).unwrap();
        let fit = fit_pairwise_model(&obs, &sites, Family::Br, 0.9).unwrap();
        sl += fit.lambda_hat;
        sk += fit.kappa_hat;
    }
    let (bl, bk) = (sl / seeds as f64 - 1.0, sk / seeds as f64 - 1.0);
    outcome(bl.abs() <= 0.15 && bk.abs() <= 0.15, format!("mean bias lambda {bl:+.4}, kappa {bk:+.4}"))
}

fn criterion_5() -> Outcome {
    let sites = SiteSet::grid(3, -1.0, 1.0);
    let v = VariogramSpec { lambda: 2.0, kappa: 0.8, centre: Some((0.0, 0.0)) };
    let g = CorrelationSpec::matern(1.0, 1.2);
    let (n, q, omega) = (20_000, 0.98, 0.3);
    let h = simulate_max_mixture(&sites, omega, &v, &g, n, 51).unwrap();
    let x = simulate_br(&sites, &v, n, 52).unwrap();
    let ch = empirical_chi_matrix(&h, q).unwrap();
    let cx = empirical_chi_matrix(&x, q).unwrap();
    let n_exc = (1.0 - q) * n as f64;
    let (mut inside, mut total, mut worst) = (0, 0, 0.0f64);
    for i in 0..sites.len() {
        for j in (i + 1)..sites.len() {
            let (a, b) = (ch.values[(i, j)], cx.values[(i, j)]);
            let se = ((a * (1.0 - a) + omega * omega * b * (1.0 - b)) / n_exc).sqrt();
            let z = (a - omega * b).abs() / se;
            worst = worst.max(z);
            total += 1;
            if z <= 3.0 {
                inside += 1;
            }
        }
    }
    outcome(inside == total, format!("{inside}/{total} pairs within 3 standard errors (max |z| = {worst:.2})"))
}

fn criterion_6() -> Outcome {
    let mut worst = [0.0f64; 4];
    let mut rng = seeded_rng(6, 0);
    for _ in 0..2000 {
        let h: f64 = rng.gen_range(0.0..5.0);
        let t1: f64 = rng.gen_range(0.1..4.0);
        let m = matern_corr(h, t1, 0.5).unwrap();
        worst[0] = worst[0].max((m - (-(2f64.sqrt()) * h / t1).exp()).abs());

        let (x, y, t) = (rng.gen_range(0.05..20.0), rng.gen_range(0.05..20.0), rng.gen_range(0.1..10.0));
        let gamma: f64 = rng.gen_range(0.0..6.0);
        let v = br_exponent(x, y, gamma);
        worst[1] = worst[1].max(((br_exponent(t * x, t * y, gamma) - v / t) / (v / t)).abs());

        let (u, l, k, d) =
            (rng.gen_range(0.05..6.0), rng.gen_range(0.2..3.0), rng.gen_range(0.1..2.0), rng.gen_range(0.0..4.0));
        let theta = ibr_pair_survival(1.0, 1.0, l, k, d).unwrap().ln().abs();
        let f = ibr_pair_cdf(u, u, l, k, d).unwrap();
        worst[2] = worst[2].max((f - (1.0 - 2.0 * (-u).exp() + (-theta * u).exp())).abs());

        let (b1, b2, r) = (rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0), rng.gen_range(-0.99..0.99));
        let p = SplineParams::affine(b1, b2, r);
        let det = p.jacobian_det(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let want = b1 * b1 * b2 * b2 * (1.0 - r * r);
        worst[3] = worst[3].max((det - want).abs() / want);
    }
    let reflected = !check_bijectivity(
        &SplineParams::affine(1.0, 1.0, 1.2),
        &Domain { xmin: 0.0, xmax: 1.0, ymin: 0.0, ymax: 1.0 },
        16,
    );
    let pass = worst[0] <= 1e-12 && worst[1] <= 1e-10 && worst[2] <= 1e-10 && worst[3] <= 1e-12 && reflected;
    outcome(
        pass,
        format!(
            "matern {:.1e}, homogeneity {:.1e}, inclusion-exclusion {:.1e}, affine jacobian {:.1e}, |rho|>1 rejected {}",
            worst[0], worst[1], worst[2], worst[3], reflected
        ),
    )
}

fn criterion_7(studies: &[&StudyResult]) -> Outcome {
    let (mut good, mut total, mut bad) = (0, 0, Vec::new());
    for s in studies {
        for r in &s.repetitions {
            for o in r.outcomes.iter().filter(|o| o.deformation_objective.is_some()) {
                total += 1;
                if o.stages_monotone {
                    good += 1;
                } else {
                    bad.push(format!("{} rep {}", o.method, r.repetition));
                }
            }
        }
    }
    outcome(
        good == total && total > 0,
        format!(
            "{good}/{total} deformation runs non-increasing across stages{}",
            if bad.is_empty() { String::new() } else { format!("; increases in {}", bad.join(", ")) }
        ),
    )
}

fn iid_uniform(n: usize, seed: u64) -> ObservationMatrix {
    let mut rng = seeded_rng(seed, 0);
    let ids = vec!["a".into(), "b".into(), "c".into()];
    ObservationMatrix::new(DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>()), Scale::Raw, ids).unwrap()
}

fn criterion_8() -> Outcome {
    let q = 0.8;
    let want = (1.0 - q) * (1.0 - q);
    let n = 2000;
    let big = 200_000;
    let est = triple_chi_empirical(&iid_uniform(big, 80), 0, 1, 2, q).unwrap();
    let se = (want * (1.0 - want) / ((1.0 - q) * big as f64)).sqrt();
    let point_ok = (est - want).abs() <= 3.0 * se;
    let reps = 200;
    let mut covered = 0;
    for r in 0..reps {
        let obs = iid_uniform(n, 8000 + r);
        let settings = BootstrapSettings { mean_block: 1.0, n_boot: 1000, levels: (0.025, 0.975), seed: r };
        let ci = stationary_bootstrap_ci(&obs, 0, 1, 2, q, &settings).unwrap();
        if ci.low <= want && want <= ci.high {
            covered += 1;
        }
    }
    let cov = covered as f64 / reps as f64;
    let cov_ok = (cov - 0.95).abs() <= 0.05;
    outcome(
        point_ok && cov_ok,
        format!(
            "triple chi {est:.5} vs {want:.5} (3 se = {:.5}); coverage {covered}/{reps} = {:.1}%",
            3.0 * se,
            100.0 * cov
        ),
    )
}

fn study(process: ProcessSpec, seed: u64) -> StudyResult {
    let config = StudyConfig { process, repetitions: 10, seed, ..Default::default() };
    run_study(&config, 1, None).unwrap()
}

fn report(id: usize, name: &str, start: Instant, o: &Outcome) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {id} [{status}] {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
}

fn main() {
    let mut failed = Vec::new();
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        report(id, name, t, &o);
        if !o.pass {
            failed.push(id);
        }
    };
    run(3, "simulator fidelity", &mut criterion_3);
    run(4, "parameter recovery", &mut criterion_4);
    run(5, "max-mixture chi scaling", &mut criterion_5);
    run(6, "formula identities", &mut criterion_6);
    run(8, "triple chi and bootstrap coverage", &mut criterion_8);

    let t = Instant::now();
    let ns_br = study(ProcessSpec::nonstationary_br(0), 101);
    report(1, "non-stationary BR study", t, &criterion_1(&ns_br));
    if !criterion_1(&ns_br).pass {
        failed.push(1);
    }
    let t = Instant::now();
    let gm = study(ProcessSpec::gaussian_mixture(0), 303);
    report(2, "Gaussian mixture study", t, &criterion_2(&gm));
    if !criterion_2(&gm).pass {
        failed.push(2);
    }
    let t = Instant::now();
    let c7 = criterion_7(&[&ns_br, &gm]);
    report(7, "deformation monotonicity", t, &c7);
    if !c7.pass {
        failed.push(7);
    }
    println!("criterion 9 [WAIVED] case-study regression: the accompanying temperature dataset is not available");

    failed.sort();
    if failed.is_empty() {
        println!("acceptance: all attainable criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        if std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
