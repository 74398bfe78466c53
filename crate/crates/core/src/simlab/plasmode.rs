//! Plasmode simulation: real (or stand-in) covariates and treatment are kept
//! fixed while a binary confounder and the outcome are simulated from known
//! models.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confound::{self, ConfounderSpec, NormalPrior, PriorSpec};
use crate::dwols::{StageModelSpec, StageTerms};
use crate::error::{Error, Result};
use crate::linmodel::expit;
use crate::mcsa::McsaData;
use crate::panel::{terms, Panel, PanelLayout, StageLayout, Table, Term};
use crate::rng;

use super::study::{self, AnalysisSettings, Arm, ArmMetrics, RepFailure, RepRecord};

/// Known outcome and confounder models for a one-stage plasmode design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlasmodeModel {
    pub treatment: String,
    /// Treatment-free outcome terms; coefficients start with the intercept.
    pub outcome_terms: Vec<Term>,
    pub beta: Vec<f64>,
    pub blip_terms: Vec<Term>,
    pub psi: Vec<f64>,
    /// Propensity terms used by the analysis.
    pub propensity_terms: Vec<Term>,
    /// Confounder model, its true parameters and its outcome effect.
    pub confounder: ConfounderSpec,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
}

fn default_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlasmodeSet {
    pub panel: Panel,
    pub confounder: Vec<f64>,
}

impl PlasmodeModel {
    pub fn validate(&self) -> Result<()> {
        if self.beta.len() != self.outcome_terms.len() + 1 || self.psi.len() != self.blip_terms.len() + 1 {
            return Err(Error::InvalidSpec("outcome coefficients do not match their terms".into()));
        }
        if self.confounder.zeta.len() != self.confounder.model.n_params() {
            return Err(Error::InvalidSpec("confounder coefficients do not match its terms".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidSpec(format!("noise_sd must be >= 0, got {}", self.noise_sd)));
        }
        Ok(())
    }

    /// Covariate columns referenced by any model, in order of first use.
    pub fn covariate_columns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let all = self
            .outcome_terms
            .iter()
            .chain(&self.blip_terms)
            .chain(&self.propensity_terms)
            .chain(&self.confounder.model.terms);
        for t in all {
            for f in t.factors() {
                if f != &self.treatment && !out.contains(f) {
                    out.push(f.clone());
                }
            }
        }
        out
    }

    pub fn layout(&self) -> PanelLayout {
        PanelLayout::new(vec![StageLayout {
            covariates: self.covariate_columns(),
            treatment: self.treatment.clone(),
        }])
    }

    /// Analysis model: the true outcome terms without the confounder.
    pub fn model_spec(&self) -> StageModelSpec {
        StageModelSpec {
            stages: vec![StageTerms {
                blip: self.blip_terms.clone(),
                treatment_free: self.outcome_terms.clone(),
                propensity: self.propensity_terms.clone(),
            }],
        }
    }

    /// Panel of the fixed covariates and treatment with a placeholder outcome.
    pub fn base_panel(&self, table: &Table) -> Result<Panel> {
        self.validate()?;
        let layout = self.layout();
        let mut needed = layout.data_columns();
        needed.retain(|c| table.column(c).is_none());
        if !needed.is_empty() {
            return Err(Error::SchemaMismatch(needed));
        }
        let columns = layout
            .data_columns()
            .into_iter()
            .map(|c| {
                let v = table.column(&c).unwrap_or_default().to_vec();
                (c, v)
            })
            .collect();
        Panel::from_columns(layout, columns, vec![0.0; table.nrows()])
    }

    fn linear(&self, panel: &Panel, ts: &[Term], coef: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![coef[0]; panel.n()];
        for (t, c) in ts.iter().zip(&coef[1..]) {
            for (o, v) in out.iter_mut().zip(panel.term_values(t)?) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    /// One plasmode data set from the stream `(seed, [PLASMODE, index])`.
    pub fn simulate(&self, base: &Panel, seed: u64, index: u64) -> Result<PlasmodeSet> {
        let mut r = rng::stream(seed, &[rng::tag::PLASMODE, index]);
        let mean_u = confound::impute(base, &self.confounder)?;
        let u: Vec<f64> = match self.confounder.model.link {
            confound::Link::Logit => mean_u.iter().map(|&p| f64::from(r.random::<f64>() < p)).collect(),
            confound::Link::Identity => mean_u.iter().map(|&m| m + r.sample::<f64, _>(StandardNormal)).collect(),
        };
        let tf = self.linear(base, &self.outcome_terms, &self.beta)?;
        let blip = self.linear(base, &self.blip_terms, &self.psi)?;
        let a = base.column(&self.treatment)?;
        let y = (0..base.n())
            .map(|i| {
                let eps: f64 = r.sample(StandardNormal);
                tf[i] + self.confounder.beta_u * u[i] + a[i] * blip[i] + self.noise_sd * eps
            })
            .collect();
        Ok(PlasmodeSet {
            panel: base.with_outcome(y)?,
            confounder: u,
        })
    }

    pub fn generate_sets(&self, table: &Table, n_sets: usize, seed: u64) -> Result<Vec<PlasmodeSet>> {
        let base = self.base_panel(table)?;
        (0..n_sets as u64).map(|i| self.simulate(&base, seed, i)).collect()
    }

    /// Normal priors centred at the true values with standard deviation
    /// `sd_main` for `beta_u` and the confounder intercept and `sd_other` for
    /// the remaining confounder coefficients.
    pub fn centred_prior(&self, sd_main: f64, sd_other: f64) -> PriorSpec {
        let zeta = self
            .confounder
            .zeta
            .iter()
            .enumerate()
            .map(|(j, &z)| {
                let sd = if j == 0 { sd_main } else { sd_other };
                NormalPrior::new(z, sd * sd)
            })
            .collect();
        PriorSpec {
            zeta,
            beta_u: NormalPrior::new(self.confounder.beta_u, sd_main * sd_main),
        }
    }
}

/// Race categories of the stand-in cohort; the first is the reference level.
pub const RACE_LEVELS: [&str; 8] = ["asian", "black", "hispanic", "nhpi", "aian", "white", "other", "unknown"];
const RACE_PROBS: [f64; 8] = [0.08, 0.06, 0.05, 0.01, 0.01, 0.72, 0.03, 0.04];

/// Synthetic cohort with the covariate structure of an antidepressant study:
/// `sex`, standardized `age` and baseline `phq`, race dummies `race_*`
/// (reference `asian`), `edu`, `anx` and a treatment `a` assigned from a
/// logistic model in the other covariates.
pub fn synthetic_covariates(n: usize, seed: u64) -> Result<Table> {
    if n == 0 {
        return Err(Error::InvalidSpec("synthetic cohort needs at least one row".into()));
    }
    let mut r = rng::stream(seed, &[rng::tag::PLASMODE, u64::MAX]);
    let mut sex = Vec::with_capacity(n);
    let mut age = Vec::with_capacity(n);
    let mut phq = Vec::with_capacity(n);
    let mut race = vec![Vec::with_capacity(n); RACE_LEVELS.len() - 1];
    let mut edu = Vec::with_capacity(n);
    let mut anx = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    for _ in 0..n {
        let s = f64::from(r.random::<f64>() < 0.68);
        let ag: f64 = r.sample(StandardNormal);
        let ph: f64 = 0.2 * s + r.sample::<f64, _>(StandardNormal);
        let draw: f64 = r.random();
        let mut acc = 0.0;
        let mut level = RACE_LEVELS.len() - 1;
        for (l, p) in RACE_PROBS.iter().enumerate() {
            acc += p;
            if draw < acc {
                level = l;
                break;
            }
        }
        for (j, col) in race.iter_mut().enumerate() {
            col.push(f64::from(level == j + 1));
        }
        let e = f64::from(r.random::<f64>() < 0.35);
        let x = f64::from(r.random::<f64>() < expit(-1.0 + 0.4 * s + 0.5 * ph));
        let p = expit(0.6 + 0.2 * s - 0.3 * ag + 0.2 * ph + 0.3 * x);
        sex.push(s);
        age.push(ag);
        phq.push(ph);
        edu.push(e);
        anx.push(x);
        a.push(f64::from(r.random::<f64>() < p));
    }
    let mut cols = vec![("sex".to_string(), sex), ("age".to_string(), age), ("phq".to_string(), phq)];
    for (name, col) in RACE_LEVELS[1..].iter().zip(race) {
        cols.push((format!("race_{name}"), col));
    }
    cols.push(("edu".into(), edu));
    cols.push(("anx".into(), anx));
    cols.push(("a".into(), a));
    Table::new(cols)
}

/// Models matched to [`synthetic_covariates`]. The omitted binary confounder
/// shifts the unadjusted blip intercept by about 0.12.
pub fn stand_in_model() -> PlasmodeModel {
    let mut conf_terms = vec!["age", "phq"];
    let race: Vec<String> = RACE_LEVELS[1..].iter().map(|l| format!("race_{l}")).collect();
    conf_terms.extend(race.iter().map(String::as_str));
    conf_terms.extend(["edu", "anx", "a"]);
    let mut zeta = vec![-0.9, 0.2, 0.3];
    zeta.extend([0.4, 0.3, 0.5, 0.2, 0.1, 0.0, 0.0]);
    zeta.extend([0.3, 0.2, 0.35]);
    let main = ["sex", "age", "phq"];
    let mut prop = main.to_vec();
    prop.extend(["anx"]);
    PlasmodeModel {
        treatment: "a".into(),
        outcome_terms: terms(&main).expect("static terms"),
        beta: vec![-10.0, 0.5, 0.3, -2.0],
        blip_terms: terms(&main).expect("static terms"),
        psi: vec![1.59, -0.72, 0.0, -0.12],
        propensity_terms: terms(&prop).expect("static terms"),
        confounder: ConfounderSpec {
            model: crate::confound::ConfounderModel {
                terms: terms(&conf_terms).expect("static terms"),
                link: crate::confound::Link::Logit,
            },
            zeta,
            beta_u: -1.5,
        },
        noise_sd: 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlasmodeStudyConfig {
    pub model: PlasmodeModel,
    pub n_sets: usize,
    pub b: usize,
    pub seed: u64,
    /// Prior standard deviation for `beta_u` and the confounder intercept.
    #[serde(default = "default_sd_main")]
    pub sd_main: f64,
    /// Prior standard deviation for the other confounder coefficients.
    #[serde(default = "default_sd_other")]
    pub sd_other: f64,
    /// Analysis settings; `b` above takes precedence over `settings.b`.
    #[serde(default)]
    pub settings: AnalysisSettings,
}

impl PlasmodeStudyConfig {
    /// 200 data sets analysed with `B = 200`.
    pub fn desk(model: PlasmodeModel, seed: u64) -> Self {
        Self {
            model,
            n_sets: 200,
            b: 200,
            seed,
            sd_main: default_sd_main(),
            sd_other: default_sd_other(),
            settings: AnalysisSettings::default(),
        }
    }
}

fn default_sd_main() -> f64 {
    0.05
}

fn default_sd_other() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlasmodeStudyResult {
    pub truth: Vec<f64>,
    pub metrics: Vec<ArmMetrics>,
    pub records: Vec<RepRecord>,
    pub failures: Vec<RepFailure>,
}

pub const UNADJUSTED: &str = "Unadjusted";
pub const ADJUSTED: &str = "Adjusted";

/// Unadjusted dWOLS and MCSA with centred priors on every plasmode set.
pub fn run_plasmode_study(table: &Table, cfg: &PlasmodeStudyConfig) -> Result<PlasmodeStudyResult> {
    cfg.model.validate()?;
    if cfg.n_sets == 0 {
        return Err(Error::InvalidSpec("plasmode study needs at least one data set".into()));
    }
    let base = cfg.model.base_panel(table)?;
    let spec = cfg.model.model_spec();
    let model = &cfg.model.confounder.model;
    let arms = [
        Arm {
            label: UNADJUSTED.into(),
            prior: None,
        },
        Arm {
            label: ADJUSTED.into(),
            prior: Some(cfg.model.centred_prior(cfg.sd_main, cfg.sd_other)),
        },
    ];
    let settings = AnalysisSettings {
        b: cfg.b,
        ..cfg.settings.clone()
    };
    let per_set: Vec<Result<Vec<std::result::Result<RepRecord, RepFailure>>>> = (0..cfg.n_sets)
        .into_par_iter()
        .map(|i| {
            let set = cfg.model.simulate(&base, cfg.seed, i as u64)?;
            let data = McsaData::new(&set.panel, &spec, model)?;
            Ok(arms
                .iter()
                .enumerate()
                .map(|(a, arm)| {
                    let seed = rng::derive_seed(cfg.seed, &[rng::tag::MCSA, i as u64, a as u64]);
                    study::analyse_arm(&data, arm, model, cfg.model.confounder.zeta.len(), &settings, seed)
                        .map(|out| RepRecord {
                            rep: i,
                            arm: arm.label.clone(),
                            intervals: out.report.as_ref().map(|c| c.intervals.clone()),
                            p_hat: out.report.as_ref().map(|c| c.p_hat),
                            m: out.report.as_ref().map(|c| c.m),
                            estimate: out.estimate,
                            proportion_optimal: Vec::new(),
                        })
                        .map_err(|e| RepFailure {
                            rep: i,
                            arm: arm.label.clone(),
                            message: e.to_string(),
                        })
                })
                .collect())
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for set in per_set {
        for out in set? {
            match out {
                Ok(r) => records.push(r),
                Err(f) => failures.push(f),
            }
        }
    }
    let truth = vec![cfg.model.psi.clone()];
    let labels = [UNADJUSTED.to_string(), ADJUSTED.to_string()];
    let metrics = study::aggregate(&labels, &records, &failures, cfg.n_sets, &truth)?;
    Ok(PlasmodeStudyResult {
        truth: cfg.model.psi.clone(),
        metrics,
        records,
        failures,
    })
}
