use std::path::{Path, PathBuf};

use extremal_deform::data::{load_observations, Metric, ObservationMatrix, Plane, SiteSet};
use extremal_deform::deform::{baseline_objective, fit_deformation, DeformConfig, DeformMethod, DeformObjective};
use extremal_deform::diagnostics::{
    condext_report, stationary_bootstrap_ci, transect_triples, triple_chi_empirical, triple_chi_model,
    write_condext_rows, write_triple_reports, BootstrapSettings, McSettings, Transect, TripleChiReport,
};
use extremal_deform::likelihood::{fit_pairwise_model_with, Family, FitOptions, FitReport};
use extremal_deform::simulate::{derive_seed, render_grid, ProcessSpec};
use extremal_deform::study::{run_study, StudyConfig};
use extremal_deform::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{
    Cli, Command, DataArgs, DeformArgs, DiagnoseArgs, FamilyArg, FitArgs, MethodArg, Preset, SimulateArgs, StudyArgs,
    TransectArg,
};

pub fn run(cli: &Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(cli.workers.max(1)).build_global().ok();
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Deform(a) => deform(cli, a),
        Command::Fit(a) => fit(cli, a),
        Command::Diagnose(a) => diagnose(cli, a),
        Command::Study(a) => study(cli, a),
    }
}

/// Reads the configuration block for `name`: either the value under that key
/// or, failing that, the whole document.
fn config_block<T: DeserializeOwned>(path: &Option<PathBuf>, name: &str) -> Result<Option<T>> {
    let Some(path) = path else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path)?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)?;
    let block = match doc.get_mut(name) {
        Some(v) => v.take(),
        None => doc,
    };
    serde_json::from_value(block).map(Some).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn preset(p: Preset) -> ProcessSpec {
    match p {
        Preset::NsBr => ProcessSpec::nonstationary_br(0),
        Preset::NsIbr => ProcessSpec::nonstationary_ibr(0),
        Preset::MaxMixture => ProcessSpec::max_mixture(0, false),
        Preset::InvertedMaxMixture => ProcessSpec::max_mixture(0, true),
        Preset::GaussianMixture => ProcessSpec::gaussian_mixture(0),
    }
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let mut spec: ProcessSpec = config_block(&cli.config, "simulate")?.unwrap_or_else(|| preset(a.preset));
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(n) = a.n_obs {
        spec.n_obs = n;
    }
    let sites = spec.grid.sites()?;
    let obs = spec.simulate(&sites)?;
    obs.write_csv(cli.out.join("observations.csv"))?;
    sites.write_csv(cli.out.join("sites.csv"))?;
    write_json(&spec, cli.out.join("process.json"))?;
    if let Some(n) = a.render {
        let field = render_grid(&spec, n, spec.grid.lo, spec.grid.hi)?;
        let mut w = csv::Writer::from_path(cli.out.join("field.csv"))?;
        w.write_record(["x", "y", "value"])?;
        for (x, y, v) in field {
            w.write_record([x.to_string(), y.to_string(), v.to_string()])?;
        }
        w.flush()?;
    }
    log::info!("simulated {} x {} observations", obs.n_obs(), obs.n_sites());
    Ok(())
}

fn load(data: &DataArgs) -> Result<(ObservationMatrix, SiteSet)> {
    load_observations(&data.obs, &data.sites)
}

/// Reads D-plane coordinates and orders them like the G-plane sites.
fn load_d_sites(path: &Path, g_sites: &SiteSet) -> Result<SiteSet> {
    let d = SiteSet::read_csv(path)?;
    let coords = g_sites
        .ids()
        .iter()
        .map(|id| {
            d.index_of(id)
                .map(|k| d.coord(k))
                .ok_or_else(|| Error::Format(format!("site '{id}' missing from {}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    if d.len() != g_sites.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} lists {} sites, expected {}",
            path.display(),
            d.len(),
            g_sites.len()
        )));
    }
    g_sites.relocated(&coords, Plane::D, Metric::Euclidean)
}

fn method_of(m: MethodArg) -> DeformMethod {
    match m {
        MethodArg::ChiBr => DeformMethod::ChiBr,
        MethodArg::ChiIbr => DeformMethod::ChiIbr,
        MethodArg::CorrFrob => DeformMethod::CorrFrob,
        MethodArg::SmithGauss => DeformMethod::SmithGauss,
    }
}

#[derive(Serialize)]
struct DeformSummary {
    method: DeformMethod,
    objective: f64,
    baseline_objective: f64,
    residual_rms_g: f64,
    residual_rms_d: f64,
    shape: f64,
    n_anchors: usize,
    warning: Option<String>,
}

/// Writes `site_i,site_j,distance,empirical,model` and returns the residual RMS.
fn write_dependence_curve(
    path: &Path,
    objective: &DeformObjective,
    sites: &SiteSet,
    dist_scale: f64,
    shape: f64,
) -> Result<f64> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["site_i", "site_j", "distance", "empirical", "model"])?;
    let ids = sites.ids();
    let (mut ss, mut n) = (0.0, 0usize);
    for i in 0..sites.len() {
        for j in (i + 1)..sites.len() {
            let h = dist_scale * sites.distance(i, j);
            let emp = 0.5 * (objective.target[(i, j)] + objective.target[(j, i)]);
            let model = objective.model_at(h, shape);
            ss += (emp - model).powi(2);
            n += 1;
            w.write_record([ids[i].clone(), ids[j].clone(), h.to_string(), emp.to_string(), model.to_string()])?;
        }
    }
    w.flush()?;
    Ok((ss / n.max(1) as f64).sqrt())
}

fn deform(cli: &Cli, a: &DeformArgs) -> Result<()> {
    let (obs, g_sites) = load(&a.data)?;
    let mut config: DeformConfig = config_block(&cli.config, "deform")?.unwrap_or_default();
    if let Some(m) = a.method {
        config.method = method_of(m);
    }
    if let Some(q) = a.q {
        config.q = q;
    }
    if let Some(m) = a.m0 {
        config.m0 = m;
    }
    if a.m_star.is_some() {
        config.m_star = a.m_star;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let result = fit_deformation(&obs, &g_sites, &config)?;
    if let Some(w) = &result.warning {
        log::warn!("{w}");
    }
    let objective = DeformObjective::from_data(&obs, config.method, config.q)?;
    let base = baseline_objective(&objective, &g_sites);
    let rms_g = write_dependence_curve(
        &cli.out.join("dependence_g.csv"),
        &objective,
        &g_sites,
        base.scale * base.scale,
        base.shape,
    )?;
    let rms_d =
        write_dependence_curve(&cli.out.join("dependence_d.csv"), &objective, &result.d_sites, 1.0, result.shape())?;
    result.write_json(cli.out.join("deformation.json"))?;
    result.write_stage_log(cli.out.join("stages.csv"))?;
    result.d_sites.write_csv(cli.out.join("d_sites.csv"))?;
    result.d_sites.write_coords_csv(cli.out.join("d_sites_unit.csv"), &result.d_sites.rescaled_unit())?;
    let summary = DeformSummary {
        method: result.method,
        objective: result.objective,
        baseline_objective: base.objective,
        residual_rms_g: rms_g,
        residual_rms_d: rms_d,
        shape: result.shape(),
        n_anchors: result.params.n_anchors(),
        warning: result.warning.clone(),
    };
    write_json(&summary, cli.out.join("deform_summary.json"))
}

fn families(f: FamilyArg) -> Vec<Family> {
    match f {
        FamilyArg::Br => vec![Family::Br],
        FamilyArg::Ibr => vec![Family::Ibr],
        FamilyArg::Both => vec![Family::Br, Family::Ibr],
    }
}

fn fit(cli: &Cli, a: &FitArgs) -> Result<()> {
    let (obs, g_sites) = load(&a.data)?;
    let mut options: FitOptions = config_block(&cli.config, "fit")?.unwrap_or_default();
    options.u_quantile = a.u_quantile;
    options.block_b = a.block_b;
    if options.block_b == 0 || options.block_b >= obs.n_obs() {
        return Err(Error::Config(format!("block_b = {} must satisfy 1 <= b < N = {}", options.block_b, obs.n_obs())));
    }
    let mut planes = vec![g_sites.clone()];
    if let Some(p) = &a.d_sites {
        planes.push(load_d_sites(p, &g_sites)?);
    }
    let mut reports: Vec<FitReport> = Vec::new();
    for family in families(a.family) {
        for sites in &planes {
            let fit = fit_pairwise_model_with(&obs, sites, family, &options)?;
            reports.push(fit.report());
        }
    }
    write_json(&reports, cli.out.join("fit_report.json"))?;
    let mut w = csv::Writer::from_path(cli.out.join("fit_table.csv"))?;
    w.write_record(["family", "plane", "kappa_hat", "lambda_hat", "kappa_at_boundary", "ncll", "claic"])?;
    for r in &reports {
        let plane = if r.plane == Plane::D { "D" } else { "G" };
        w.write_record([
            r.family.to_string(),
            plane.to_string(),
            format!("{:.4}", r.kappa_hat),
            format!("{:.4}", r.lambda_hat),
            r.kappa_at_boundary.to_string(),
            format!("{:.3}", r.ncll),
            format!("{:.3}", r.claic),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Evenly spread selection of at most `k` items.
fn spread<T: Copy>(items: &[T], k: usize) -> Vec<T> {
    if items.len() <= k {
        return items.to_vec();
    }
    (0..k).map(|t| items[t * items.len() / k]).collect()
}

fn diagnose(cli: &Cli, a: &DiagnoseArgs) -> Result<()> {
    let (obs, g_sites) = load(&a.data)?;
    let text = std::fs::read_to_string(&a.fit)?;
    let reports: Vec<FitReport> = match serde_json::from_str::<Vec<FitReport>>(&text) {
        Ok(v) => v,
        Err(_) => vec![serde_json::from_str::<FitReport>(&text)?],
    };
    let best = reports
        .iter()
        .min_by(|x, y| x.claic.total_cmp(&y.claic))
        .ok_or_else(|| Error::Format(format!("{} holds no fits", a.fit.display())))?;
    let d_sites = match &a.d_sites {
        Some(p) => Some(load_d_sites(p, &g_sites)?),
        None => None,
    };
    let model_sites = match best.plane {
        Plane::G => &g_sites,
        Plane::D => d_sites
            .as_ref()
            .ok_or_else(|| Error::Config("the selected fit is on the D-plane; pass --d-sites".into()))?,
    };
    let seed = cli.seed.unwrap_or(1);
    let transect = match a.transect {
        TransectArg::EastWest => Transect::EastWest,
        TransectArg::NorthSouth => Transect::NorthSouth,
    };
    let triples = spread(&transect_triples(&g_sites, transect), a.n_triples);
    if triples.is_empty() {
        return Err(Error::Config("no equally spaced triples along the transect".into()));
    }
    let ids = g_sites.ids();
    let boot = BootstrapSettings { mean_block: a.block_mean, n_boot: a.n_boot, levels: (0.025, 0.975), seed };
    let mc = McSettings { samples: a.mc_samples, seed: derive_seed(seed, 1), ..Default::default() };
    let mut rows = Vec::with_capacity(triples.len());
    for (t, &(i, j, k)) in triples.iter().enumerate() {
        let empirical = triple_chi_empirical(&obs, i, j, k, a.q)?;
        let ci = stationary_bootstrap_ci(
            &obs,
            i,
            j,
            k,
            a.q,
            &BootstrapSettings { seed: derive_seed(seed, 100 + t as u64), ..boot },
        )?;
        let coords = [model_sites.coord(i), model_sites.coord(j), model_sites.coord(k)];
        let th = triple_chi_model(best.family, best.lambda_hat, best.kappa_hat, coords, a.q, &mc)?;
        if let Some(w) = &th.warning {
            log::warn!("triple ({}, {}, {}): {w}", ids[i], ids[j], ids[k]);
        }
        rows.push(TripleChiReport {
            sites: (ids[i].clone(), ids[j].clone(), ids[k].clone()),
            empirical,
            ci_low: ci.low,
            ci_high: ci.high,
            theoretical: th.chi,
            theoretical_se: th.std_error,
            q: a.q,
        });
    }
    write_triple_reports(&rows, cli.out.join("triples.csv"))?;
    let u_eval = a.u_eval.unwrap_or_else(|| -(1.0f64 - a.q).ln());
    let ce = condext_report(&obs, &g_sites, d_sites.as_ref(), a.u_quantile, u_eval, derive_seed(seed, 2))?;
    write_condext_rows(&ce, cli.out.join("condext.csv"))
}

fn study(cli: &Cli, a: &StudyArgs) -> Result<()> {
    let mut config: StudyConfig = config_block(&cli.config, "study")?
        .unwrap_or_else(|| StudyConfig { process: preset(a.preset), ..Default::default() });
    if let Some(r) = a.repetitions {
        config.repetitions = r;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let result = run_study(&config, cli.workers, Some(&cli.out.join("study_rows.csv")))?;
    result.write_proportions(cli.out.join("proportions.csv"))?;
    write_json(&result, cli.out.join("study.json"))
}
