use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use mcsa_dtr::confound::PriorSpec;
use mcsa_dtr::mnboot::{self, CiConfig};
use mcsa_dtr::panel::Table;
use mcsa_dtr::simlab::plasmode::{self, PlasmodeStudyConfig};
use mcsa_dtr::simlab::study::{self, AnalysisSettings, RepFailure, RepRecord};
use mcsa_dtr::simlab::{truth, ArmMetrics, Dgp, OneStageDgp, Scenario, StudyConfig, TwoStageDgp};
use mcsa_dtr::specfile::{self, DgpFile, ModelFile, PlasmodeFile, SensitivityFile};
use mcsa_dtr::{dwols, mcsa, rng, Error, McsaConfig, Panel, PanelLayout, Result, Term, Tolerances};
use serde::Serialize;
use serde_json::json;

use crate::output::{coef_name, fixed, num, opt, write_atomic, Bundle, CsvTable};
use crate::{AnalysisArgs, DgpArgs, FitArgs, PlasmodeArgs, SensaArgs, SimulateArgs, StudyArgs};

const DEFAULT_B: usize = 200;

fn load_dgp(a: &DgpArgs) -> Result<Dgp> {
    let dgp = match (&a.dgp, &a.dgp_file) {
        (_, Some(path)) => specfile::load::<DgpFile>(path)?.dgp,
        (Some(kind), None) if kind == "two-stage" => Dgp::TwoStage(TwoStageDgp::default()),
        (Some(_), None) => Dgp::OneStage(OneStageDgp::default()),
        (None, None) => return Err(Error::InvalidSpec("one of --dgp or --dgp-file is required".into())),
    };
    dgp.validate()?;
    Ok(dgp)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_panel(path: &Path, layout: PanelLayout) -> Result<Panel> {
    Panel::read_csv(open(path)?, layout)
}

fn load_model(path: &Path) -> Result<ModelFile> {
    let m: ModelFile = specfile::load(path)?;
    m.validate()?;
    Ok(m)
}

fn term_names(terms: &[Term]) -> Vec<String> {
    std::iter::once("(intercept)".to_string())
        .chain(terms.iter().map(Term::to_string))
        .collect()
}

fn latent_path(out: &Path) -> PathBuf {
    out.with_extension("latent.csv")
}

impl AnalysisArgs {
    fn settings(&self, default_b: usize) -> AnalysisSettings {
        AnalysisSettings {
            b: self.b.unwrap_or(default_b),
            scheme: self.weights,
            kappa: self.kappa,
            nu: self.nu,
            vartheta: self.vartheta.clone(),
            covariance: self.covariance,
            intervals: !self.no_intervals,
            tolerances: Tolerances::default(),
        }
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let dgp = load_dgp(&a.dgp)?;
    let sim = dgp.generate(a.n, a.seed)?;
    let mut buf = Vec::new();
    sim.panel.write_csv(&mut buf)?;
    write_atomic(&a.out, &buf)?;
    println!("wrote {} rows to {}", sim.panel.n(), a.out.display());

    if a.emit_latent {
        let mut t = CsvTable::new(["id", "u"]);
        for (id, u) in sim.panel.ids().iter().zip(&sim.u) {
            t.push(vec![id.to_string(), num(*u)]);
        }
        let path = latent_path(&a.out);
        t.write(&path)?;
        println!("wrote latent confounder to {}", path.display());
    }

    if let Some(dir) = &a.spec_dir {
        let model = ModelFile::new(dgp.layout(), dgp.model_spec());
        let zeta = truth::pseudo_true_zeta(&dgp, 1_000_000, rng::derive_seed(a.seed, &[rng::tag::ORACLE]))?;
        let prior = Scenario::NarrowCentered.prior(&zeta, dgp.beta_u());
        let sens = SensitivityFile::new(dgp.confounder_model(), prior);
        write_atomic(&dir.join("model.json"), specfile::to_string(&model)?.as_bytes())?;
        write_atomic(&dir.join("sensitivity.json"), specfile::to_string(&sens)?.as_bytes())?;
        println!("wrote spec files to {}", dir.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct StageSummary {
    stage: usize,
    blip_terms: Vec<String>,
    psi: Vec<f64>,
    beta: Vec<f64>,
    propensity: Vec<f64>,
    propensity_converged: bool,
    ridge_used: bool,
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let panel = read_panel(&a.data, model.layout.clone())?;
    let fit = dwols::fit(&panel, &model.spec(), a.weights)?;
    let k = fit.stages.len();
    let mut table = CsvTable::new(["coefficient", "term", "estimate"]);
    let mut summary = Vec::new();
    for (s, st) in fit.stages.iter().enumerate() {
        let names = term_names(&model.stages[s].blip);
        for (j, v) in st.psi.iter().enumerate() {
            table.push(vec![coef_name(k, s + 1, j), names[j].clone(), fixed(*v)]);
        }
        summary.push(StageSummary {
            stage: s + 1,
            blip_terms: names,
            psi: st.psi.clone(),
            beta: st.beta.clone(),
            propensity: st.xi.clone(),
            propensity_converged: st.propensity_converged,
            ridge_used: st.ridge_used,
        });
    }
    print!("{}", table.render());
    if let Some(out) = &a.out {
        let config = json!({
            "data": a.data,
            "model": model,
            "weights": a.weights,
            "n": panel.n(),
        });
        Bundle::new("fit", None, &config, &json!({ "stages": summary }))?.write(out)?;
    }
    Ok(())
}

pub fn sensa(a: &SensaArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let sens: SensitivityFile = specfile::load(&a.sensitivity)?;
    sens.validate()?;
    let panel = read_panel(&a.data, model.layout.clone())?;
    let spec = model.spec();
    let settings = a.analysis.settings(DEFAULT_B);

    let unadjusted = dwols::fit(&panel, &spec, settings.scheme)?;
    let cfg = McsaConfig {
        b: settings.b,
        seed: a.seed,
        scheme: settings.scheme,
        prior: sens.prior.clone(),
        confounder: sens.confounder.clone(),
        tolerances: settings.tolerances,
    };
    let (fit, report) = if settings.intervals {
        let ci = CiConfig {
            kappa: settings.kappa,
            nu: settings.nu,
            vartheta: settings.vartheta.clone(),
            b: settings.b,
            seed: rng::derive_seed(a.seed, &[rng::tag::CI_FINAL]),
            covariance: settings.covariance,
        };
        let (f, r) = mnboot::intervals(&panel, &spec, &cfg, &ci)?;
        (f, Some(r))
    } else {
        (mcsa::run(&panel, &spec, &cfg)?, None)
    };

    let k = spec.stages.len();
    let mut summary = CsvTable::new(["coefficient", "term", "unadjusted", "adjusted", "ci_low", "ci_high"]);
    for s in 0..k {
        let names = term_names(&spec.stages[s].blip);
        for j in 0..fit.mean[s].len() {
            let iv = report.as_ref().map(|r| r.intervals[s][j]);
            summary.push(vec![
                coef_name(k, s + 1, j),
                names[j].clone(),
                fixed(unadjusted.stages[s].psi[j]),
                fixed(fit.mean[s][j]),
                iv.map(|i| fixed(i.lower)).unwrap_or_default(),
                iv.map(|i| fixed(i.upper)).unwrap_or_default(),
            ]);
        }
    }
    print!("{}", summary.render());

    let check = sens.prior.is_zero_effect().then(|| {
        let max_diff = fit
            .mean
            .iter()
            .zip(&unadjusted.stages)
            .flat_map(|(m, st)| m.iter().zip(&st.psi).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        println!(
            "no-confounding check: beta_u prior is a point mass at 0, so the adjusted column is a bootstrap mean of the unadjusted fit (max difference {max_diff:.4})"
        );
        json!({ "zero_effect_prior": true, "max_abs_difference": max_diff })
    });
    if let Some(r) = &report {
        println!("p_hat = {:.4}, m = {} of n = {}", r.p_hat, r.m, panel.n());
    }

    std::fs::create_dir_all(&a.out_dir)?;
    summary.write(&a.out_dir.join("summary.csv"))?;

    let mut header = vec!["rep".to_string(), "beta_u".to_string()];
    header.extend((0..sens.confounder.n_params()).map(|j| format!("zeta{j}")));
    for s in 0..k {
        header.extend((0..fit.mean[s].len()).map(|j| coef_name(k, s + 1, j)));
    }
    let mut draws = CsvTable::new(header);
    for b in 0..fit.b() {
        let mut row = vec![b.to_string(), num(fit.draws[b].beta_u)];
        row.extend(fit.draws[b].zeta.iter().map(|v| num(*v)));
        for s in 0..k {
            row.extend(fit.adjusted[s][b].iter().map(|v| num(*v)));
        }
        draws.push(row);
    }
    draws.write(&a.out_dir.join("draws.csv"))?;

    let config = json!({
        "data": a.data,
        "model": model,
        "sensitivity": sens,
        "seed": a.seed,
        "settings": settings,
    });
    let results = json!({
        "n": panel.n(),
        "unadjusted": unadjusted.stages.iter().map(|s| s.psi.clone()).collect::<Vec<_>>(),
        "adjusted": fit.mean,
        "intervals": report,
        "mcsa_failures": fit.failures.len(),
        "no_confounding_check": check,
    });
    Bundle::new("sensa", Some(a.seed), &config, &results)?.write(&a.out_dir.join("bundle.json"))?;
    println!("wrote results to {}", a.out_dir.display());
    Ok(())
}

fn coefficient_columns(metrics: &[ArmMetrics], n_stages: usize) -> Vec<(usize, usize, String)> {
    metrics
        .first()
        .map(|m| {
            m.coefficients
                .iter()
                .map(|c| (c.stage, c.index, coef_name(n_stages, c.stage, c.index)))
                .collect()
        })
        .unwrap_or_default()
}

/// Tidy metrics plus wide tables with one row per arm.
fn write_metrics(dir: &Path, label: &str, metrics: &[ArmMetrics], n_stages: usize, proportions: bool) -> Result<CsvTable> {
    let cols = coefficient_columns(metrics, n_stages);

    let mut tidy = CsvTable::new([
        label, "coefficient", "stage", "index", "truth", "mean", "bias", "rmse", "coverage", "width", "completed", "failed",
    ]);
    for m in metrics {
        for c in &m.coefficients {
            tidy.push(vec![
                m.arm.clone(),
                coef_name(n_stages, c.stage, c.index),
                c.stage.to_string(),
                c.index.to_string(),
                num(c.truth),
                num(c.mean),
                num(c.bias),
                num(c.rmse),
                opt(c.coverage),
                opt(c.width),
                m.completed.to_string(),
                m.failed.to_string(),
            ]);
        }
    }
    tidy.write(&dir.join("metrics.csv"))?;

    let wide = |metric: &str, a: fn(&mcsa_dtr::simlab::CoefMetrics) -> Option<f64>, b: fn(&mcsa_dtr::simlab::CoefMetrics) -> Option<f64>, names: [&str; 2]| {
        let mut header = vec![label.to_string()];
        for (_, _, name) in &cols {
            header.push(format!("{name}_{}", names[0]));
            header.push(format!("{name}_{}", names[1]));
        }
        let mut t = CsvTable::new(header);
        for m in metrics {
            let mut row = vec![m.arm.clone()];
            for (s, j, _) in &cols {
                let c = m.coef(*s, *j);
                row.push(c.and_then(a).map(fixed).unwrap_or_default());
                row.push(c.and_then(b).map(fixed).unwrap_or_default());
            }
            t.push(row);
        }
        t.write(&dir.join(format!("table_{metric}.csv"))).map(|_| t)
    };
    wide("estimates", |c| Some(c.mean), |c| Some(c.rmse), ["mean", "rmse"])?;
    let coverage = wide("coverage", |c| c.coverage, |c| c.width, ["coverage", "width"])?;

    if proportions {
        let mut header = vec![label.to_string()];
        header.extend((1..=n_stages).map(|s| format!("stage{s}")));
        let mut t = CsvTable::new(header);
        for m in metrics {
            let mut row = vec![m.arm.clone()];
            row.extend(m.proportion_optimal.iter().map(|v| fixed(*v)));
            t.push(row);
        }
        t.write(&dir.join("table_proportion.csv"))?;
        print!("{}", t.render());
    }
    Ok(coverage)
}

fn write_estimates(path: &Path, label: &str, records: &[RepRecord], n_stages: usize) -> Result<()> {
    let mut t = CsvTable::new(["rep", label, "coefficient", "stage", "index", "estimate", "lower", "upper"]);
    for r in records {
        for (s, est) in r.estimate.iter().enumerate() {
            for (j, v) in est.iter().enumerate() {
                let iv = r.intervals.as_ref().map(|iv| iv[s][j]);
                t.push(vec![
                    r.rep.to_string(),
                    r.arm.clone(),
                    coef_name(n_stages, s + 1, j),
                    (s + 1).to_string(),
                    j.to_string(),
                    num(*v),
                    opt(iv.map(|i| i.lower)),
                    opt(iv.map(|i| i.upper)),
                ]);
            }
        }
    }
    t.write(path)
}

#[derive(Serialize)]
struct StudySummary<'a> {
    truth: &'a truth::TrueRegime,
    zeta_true: &'a [f64],
    metrics: &'a [ArmMetrics],
    failures: &'a [RepFailure],
    mean_p_hat: Option<f64>,
}

pub fn study(a: &StudyArgs) -> Result<()> {
    let dgp = load_dgp(&a.dgp)?;
    let n_stages = dgp.n_stages();
    let mut cfg = if a.full_paper_scale {
        StudyConfig::full_scale(dgp, a.seed)
    } else {
        StudyConfig::desk(dgp, a.seed)
    };
    if let Some(r) = a.reps {
        cfg.reps = r;
    }
    let settings = a.analysis.settings(cfg.b);
    cfg.b = settings.b;
    cfg.n = a.n;
    cfg.scheme = settings.scheme;
    cfg.kappa = settings.kappa;
    cfg.nu = settings.nu;
    cfg.vartheta = settings.vartheta;
    cfg.covariance = settings.covariance;
    cfg.intervals = settings.intervals;
    if let Some(s) = &a.scenarios {
        cfg.scenarios = s.clone();
    }
    cfg.n_eval = a.n_eval;
    cfg.rollout = a.rollout;
    cfg.zeta_n = a.zeta_n;

    let res = study::run_study(&cfg)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let coverage = write_metrics(&a.out_dir, "scenario", &res.metrics, n_stages, true)?;
    if cfg.intervals {
        print!("{}", coverage.render());
    }
    write_estimates(&a.out_dir.join("estimates.csv"), "scenario", &res.records, n_stages)?;

    let p: Vec<f64> = res.records.iter().filter_map(|r| r.p_hat).collect();
    let summary = StudySummary {
        truth: &res.truth,
        zeta_true: &res.zeta_true,
        metrics: &res.metrics,
        failures: &res.failures,
        mean_p_hat: (!p.is_empty()).then(|| p.iter().sum::<f64>() / p.len() as f64),
    };
    Bundle::new("study", Some(cfg.seed), &cfg, &summary)?.write(&a.out_dir.join("bundle.json"))?;
    println!("wrote results to {}", a.out_dir.display());
    Ok(())
}

pub fn plasmode(a: &PlasmodeArgs) -> Result<()> {
    let table = match (&a.covariates, a.synthetic) {
        (Some(p), _) => Table::from_csv(open(p)?)?,
        (None, Some(n)) => plasmode::synthetic_covariates(n, a.seed)?,
        (None, None) => return Err(Error::InvalidSpec("one of --covariates or --synthetic is required".into())),
    };
    let model = match &a.model {
        Some(p) => specfile::load::<PlasmodeFile>(p)?.model,
        None => plasmode::stand_in_model(),
    };
    model.validate()?;
    std::fs::create_dir_all(&a.out_dir)?;

    if a.generate_only {
        let sets = model.generate_sets(&table, a.reps, a.seed)?;
        for (i, set) in sets.iter().enumerate() {
            let mut buf = Vec::new();
            set.panel.write_csv(&mut buf)?;
            write_atomic(&a.out_dir.join(format!("set_{:04}.csv", i + 1)), &buf)?;
        }
        let analysis = ModelFile::new(model.layout(), model.model_spec());
        let sens = SensitivityFile::new(model.confounder.model.clone(), model.centred_prior(a.sd_main, a.sd_other));
        write_atomic(&a.out_dir.join("model.json"), specfile::to_string(&analysis)?.as_bytes())?;
        write_atomic(&a.out_dir.join("sensitivity.json"), specfile::to_string(&sens)?.as_bytes())?;
        let config = json!({ "model": model, "n_sets": a.reps, "seed": a.seed, "rows": table.nrows() });
        Bundle::new("plasmode", Some(a.seed), &config, &json!({ "psi": model.psi }))?
            .write(&a.out_dir.join("bundle.json"))?;
        println!("wrote {} data sets to {}", sets.len(), a.out_dir.display());
        return Ok(());
    }

    let cfg = PlasmodeStudyConfig {
        model,
        n_sets: a.reps,
        b: a.analysis.b.unwrap_or(DEFAULT_B),
        seed: a.seed,
        sd_main: a.sd_main,
        sd_other: a.sd_other,
        settings: a.analysis.settings(DEFAULT_B),
    };
    let res = plasmode::run_plasmode_study(&table, &cfg)?;
    let coverage = write_metrics(&a.out_dir, "analysis", &res.metrics, 1, false)?;
    print!("{}", coverage.render());
    write_estimates(&a.out_dir.join("estimates.csv"), "analysis", &res.records, 1)?;
    let prior: PriorSpec = cfg.model.centred_prior(cfg.sd_main, cfg.sd_other);
    let config = json!({ "study": cfg, "prior": prior, "rows": table.nrows() });
    let results = json!({ "truth": res.truth, "metrics": res.metrics, "failures": res.failures });
    Bundle::new("plasmode", Some(a.seed), &config, &results)?.write(&a.out_dir.join("bundle.json"))?;
    println!("wrote results to {}", a.out_dir.display());
    Ok(())
}
