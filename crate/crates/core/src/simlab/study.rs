//! Repeated-sampling studies: generate, analyse under each prior scenario,
//! score against the truth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confound::{NormalPrior, PriorSpec};
use crate::dwols::{self, Regime};
use crate::error::{Error, Result};
use crate::linmodel::{Tolerances, WeightScheme};
use crate::mcsa::{self, McsaConfig, McsaData};
use crate::mnboot::{self, CiConfig, CiReport, CovarianceEstimator, Interval};
use crate::rng;

use super::dgp::Dgp;
use super::truth::{self, EvalSet, Rollout, TrueRegime};

/// Share of failed repetitions above which a study is abandoned.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Unadjusted,
    NarrowCentered,
    WideCentered,
    NarrowOffCenter,
    WideOffCenter,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Unadjusted,
        Scenario::NarrowCentered,
        Scenario::WideCentered,
        Scenario::NarrowOffCenter,
        Scenario::WideOffCenter,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::Unadjusted => "Unadjusted",
            Scenario::NarrowCentered => "Narrow, Centered",
            Scenario::WideCentered => "Wide, Centered",
            Scenario::NarrowOffCenter => "Narrow, Off-center",
            Scenario::WideOffCenter => "Wide, Off-center",
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Scenario::Unadjusted => "unadjusted",
            Scenario::NarrowCentered => "narrow-centered",
            Scenario::WideCentered => "wide-centered",
            Scenario::NarrowOffCenter => "narrow-off-center",
            Scenario::WideOffCenter => "wide-off-center",
        }
    }

    /// Normal priors around the true bias parameters: variance 0.1 (narrow) or
    /// 0.5 (wide), means shifted by +0.1 when off-center. Unadjusted is a point
    /// mass at `beta_u = 0`.
    pub fn prior(self, zeta: &[f64], beta_u: f64) -> PriorSpec {
        let (var, shift) = match self {
            Scenario::Unadjusted => return PriorSpec::degenerate(zeta, 0.0),
            Scenario::NarrowCentered => (0.1, 0.0),
            Scenario::WideCentered => (0.5, 0.0),
            Scenario::NarrowOffCenter => (0.1, 0.1),
            Scenario::WideOffCenter => (0.5, 0.1),
        };
        PriorSpec {
            zeta: zeta.iter().map(|&z| NormalPrior::new(z + shift, var)).collect(),
            beta_u: NormalPrior::new(beta_u + shift, var),
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.id() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown scenario `{s}`")))
    }
}

/// One analysis applied to every simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    /// `None` is plain dWOLS on the full sample.
    pub prior: Option<PriorSpec>,
}

/// Settings shared by every arm of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSettings {
    pub b: usize,
    pub scheme: WeightScheme,
    pub kappa: f64,
    pub nu: f64,
    pub vartheta: Vec<f64>,
    pub covariance: CovarianceEstimator,
    pub intervals: bool,
    pub tolerances: Tolerances,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            b: 200,
            scheme: default_scheme(),
            kappa: default_level(),
            nu: default_level(),
            vartheta: default_vartheta(),
            covariance: default_covariance(),
            intervals: true,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub estimate: Vec<Vec<f64>>,
    pub report: Option<CiReport>,
}

/// Point estimate (MCSA mean, or dWOLS for an unadjusted arm) and intervals.
pub fn analyse_arm(
    data: &McsaData,
    arm: &Arm,
    model: &crate::confound::ConfounderModel,
    zeta_len: usize,
    settings: &AnalysisSettings,
    seed: u64,
) -> Result<ArmOutcome> {
    let prior = arm
        .prior
        .clone()
        .unwrap_or_else(|| PriorSpec::degenerate(&vec![0.0; zeta_len], 0.0));
    let cfg = McsaConfig {
        b: settings.b,
        seed: rng::derive_seed(seed, &[rng::tag::MCSA]),
        scheme: settings.scheme,
        prior,
        confounder: model.clone(),
        tolerances: settings.tolerances,
    };
    cfg.validate()?;
    let (estimate, draws) = match arm.prior {
        None => {
            let fit = dwols::fit_prepared(data.prepared(), settings.scheme, &settings.tolerances, &mut ())?;
            (fit.stages.into_iter().map(|s| s.psi).collect::<Vec<_>>(), None)
        }
        Some(_) => {
            let fit = mcsa::run_prepared(data, &cfg)?;
            let last = fit.adjusted.last().cloned();
            (fit.mean, last)
        }
    };
    let report = if settings.intervals {
        let ci = CiConfig {
            kappa: settings.kappa,
            nu: settings.nu,
            vartheta: settings.vartheta.clone(),
            b: settings.b,
            seed: rng::derive_seed(seed, &[rng::tag::CI_FINAL]),
            covariance: settings.covariance,
        };
        Some(mnboot::intervals_with_point(data, &cfg, &ci, &estimate, draws.as_deref())?)
    } else {
        None
    };
    Ok(ArmOutcome { estimate, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub arm: String,
    pub estimate: Vec<Vec<f64>>,
    pub intervals: Option<Vec<Vec<Interval>>>,
    pub p_hat: Option<f64>,
    pub m: Option<usize>,
    /// Per stage; empty when the study has no evaluation patients.
    pub proportion_optimal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepFailure {
    pub rep: usize,
    pub arm: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefMetrics {
    /// 1-based stage.
    pub stage: usize,
    /// 0-based coefficient index within the stage blip.
    pub index: usize,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: Option<f64>,
    pub width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub arm: String,
    pub completed: usize,
    pub failed: usize,
    pub coefficients: Vec<CoefMetrics>,
    pub proportion_optimal: Vec<f64>,
}

impl ArmMetrics {
    pub fn coef(&self, stage: usize, index: usize) -> Option<&CoefMetrics> {
        self.coefficients.iter().find(|c| c.stage == stage && c.index == index)
    }
}

/// Aggregates the records of one arm against the true blip coefficients.
pub fn summarize(arm: &str, records: &[&RepRecord], failed: usize, truth: &[Vec<f64>]) -> ArmMetrics {
    let r = records.len() as f64;
    let mut coefficients = Vec::new();
    for (k, stage_truth) in truth.iter().enumerate() {
        for (j, &t) in stage_truth.iter().enumerate() {
            let est: Vec<f64> = records.iter().map(|rec| rec.estimate[k][j]).collect();
            let mean = est.iter().sum::<f64>() / r;
            let mse = est.iter().map(|e| (e - t).powi(2)).sum::<f64>() / r;
            let ivs: Option<Vec<Interval>> = records
                .iter()
                .map(|rec| rec.intervals.as_ref().map(|iv| iv[k][j]))
                .collect();
            let (coverage, width) = match ivs {
                Some(iv) if !iv.is_empty() => (
                    Some(iv.iter().filter(|i| i.contains(t)).count() as f64 / r),
                    Some(iv.iter().map(Interval::width).sum::<f64>() / r),
                ),
                _ => (None, None),
            };
            coefficients.push(CoefMetrics {
                stage: k + 1,
                index: j,
                truth: t,
                mean,
                bias: mean - t,
                rmse: mse.sqrt(),
                coverage,
                width,
            });
        }
    }
    let n_stages = records.first().map_or(0, |rec| rec.proportion_optimal.len());
    let proportion_optimal = (0..n_stages)
        .map(|k| records.iter().map(|rec| rec.proportion_optimal[k]).sum::<f64>() / r)
        .collect();
    ArmMetrics {
        arm: arm.to_string(),
        completed: records.len(),
        failed,
        coefficients,
        proportion_optimal,
    }
}

/// Groups per-repetition outcomes by arm, enforcing the failure budget.
pub fn aggregate(
    arms: &[String],
    records: &[RepRecord],
    failures: &[RepFailure],
    reps: usize,
    truth: &[Vec<f64>],
) -> Result<Vec<ArmMetrics>> {
    arms.iter()
        .map(|label| {
            let ok: Vec<&RepRecord> = records.iter().filter(|r| &r.arm == label).collect();
            let failed = failures.iter().filter(|f| &f.arm == label).count();
            if failed as f64 > MAX_FAILURE_RATE * reps as f64 || ok.is_empty() {
                return Err(Error::StudyAborted { failures: failed, total: reps });
            }
            Ok(summarize(label, &ok, failed, truth))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub dgp: Dgp,
    #[serde(default = "all_scenarios")]
    pub scenarios: Vec<Scenario>,
    pub reps: usize,
    pub n: usize,
    pub b: usize,
    pub seed: u64,
    #[serde(default = "default_scheme")]
    pub scheme: WeightScheme,
    #[serde(default = "default_level")]
    pub kappa: f64,
    #[serde(default = "default_level")]
    pub nu: f64,
    #[serde(default = "default_vartheta")]
    pub vartheta: Vec<f64>,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default)]
    pub rollout: Rollout,
    /// Sample size for the pseudo-true confounder parameters.
    #[serde(default = "default_zeta_n")]
    pub zeta_n: usize,
    #[serde(default = "default_true")]
    pub intervals: bool,
    #[serde(default = "default_covariance")]
    pub covariance: CovarianceEstimator,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn all_scenarios() -> Vec<Scenario> {
    Scenario::ALL.to_vec()
}
fn default_scheme() -> WeightScheme {
    WeightScheme::Overlap
}
fn default_level() -> f64 {
    0.05
}
fn default_vartheta() -> Vec<f64> {
    vec![0.05]
}
fn default_n_eval() -> usize {
    10_000
}
fn default_zeta_n() -> usize {
    1_000_000
}
fn default_true() -> bool {
    true
}
fn default_covariance() -> CovarianceEstimator {
    CovarianceEstimator::Sandwich
}

impl StudyConfig {
    /// Desk-scale settings: 200 repetitions of `n = 1000` with `B = 200`.
    pub fn desk(dgp: Dgp, seed: u64) -> Self {
        Self {
            dgp,
            scenarios: all_scenarios(),
            reps: 200,
            n: 1000,
            b: 200,
            seed,
            scheme: default_scheme(),
            kappa: default_level(),
            nu: default_level(),
            vartheta: default_vartheta(),
            n_eval: default_n_eval(),
            rollout: Rollout::default(),
            zeta_n: default_zeta_n(),
            intervals: true,
            covariance: default_covariance(),
            tolerances: Tolerances::default(),
        }
    }

    /// 1000 repetitions with `B = 500`.
    pub fn full_scale(dgp: Dgp, seed: u64) -> Self {
        Self {
            reps: 1000,
            b: 500,
            ..Self::desk(dgp, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.reps == 0 || self.n < 2 || self.n_eval == 0 || self.scenarios.is_empty() {
            return Err(Error::InvalidSpec(
                "study needs reps >= 1, n >= 2, n_eval >= 1 and at least one scenario".into(),
            ));
        }
        let probe = CiConfig {
            kappa: self.kappa,
            nu: self.nu,
            vartheta: self.vartheta.clone(),
            b: if self.intervals { self.b } else { mnboot::MIN_B },
            seed: 0,
            covariance: self.covariance,
        };
        probe.validate(self.dgp.n_stages())?;
        if self.b == 0 {
            return Err(Error::InvalidSpec("B must be positive".into()));
        }
        Ok(())
    }

    fn settings(&self) -> AnalysisSettings {
        AnalysisSettings {
            b: self.b,
            scheme: self.scheme,
            kappa: self.kappa,
            nu: self.nu,
            vartheta: self.vartheta.clone(),
            covariance: self.covariance,
            intervals: self.intervals,
            tolerances: self.tolerances,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub truth: TrueRegime,
    pub zeta_true: Vec<f64>,
    pub metrics: Vec<ArmMetrics>,
    pub records: Vec<RepRecord>,
    pub failures: Vec<RepFailure>,
}

impl StudyResult {
    pub fn arm(&self, scenario: Scenario) -> Option<&ArmMetrics> {
        self.metrics.iter().find(|m| m.arm == scenario.label())
    }
}

pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let truth = truth::true_regime(&cfg.dgp)?;
    let zeta_true = truth::pseudo_true_zeta(&cfg.dgp, cfg.zeta_n, rng::derive_seed(cfg.seed, &[rng::tag::ORACLE]))?;
    let beta_u = cfg.dgp.beta_u();
    let arms: Vec<Arm> = cfg
        .scenarios
        .iter()
        .map(|s| Arm {
            label: s.label().to_string(),
            prior: (*s != Scenario::Unadjusted).then(|| s.prior(&zeta_true, beta_u)),
        })
        .collect();
    let settings = cfg.settings();
    let spec = cfg.dgp.model_spec();
    let model = cfg.dgp.confounder_model();

    let per_rep: Vec<Result<Vec<std::result::Result<RepRecord, RepFailure>>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let r = rep as u64;
            let sim = cfg.dgp.generate(cfg.n, rng::derive_seed(cfg.seed, &[rng::tag::DATA, r]))?;
            let eval = EvalSet::new(
                &cfg.dgp,
                &truth.regime,
                cfg.n_eval,
                rng::derive_seed(cfg.seed, &[rng::tag::EVAL, r]),
                cfg.rollout,
            )?;
            let data = McsaData::new(&sim.panel, &spec, &model)?;
            Ok(arms
                .iter()
                .enumerate()
                .map(|(a, arm)| {
                    let seed = rng::derive_seed(cfg.seed, &[rng::tag::MCSA, r, a as u64]);
                    analyse_arm(&data, arm, &model, zeta_true.len(), &settings, seed)
                        .and_then(|out| {
                            let prop = eval.proportion_optimal(&Regime {
                                psi: out.estimate.clone(),
                            })?;
                            Ok(RepRecord {
                                rep,
                                arm: arm.label.clone(),
                                intervals: out.report.as_ref().map(|c| c.intervals.clone()),
                                p_hat: out.report.as_ref().map(|c| c.p_hat),
                                m: out.report.as_ref().map(|c| c.m),
                                estimate: out.estimate,
                                proportion_optimal: prop,
                            })
                        })
                        .map_err(|e| RepFailure {
                            rep,
                            arm: arm.label.clone(),
                            message: e.to_string(),
                        })
                })
                .collect())
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for rep in per_rep {
        for out in rep? {
            match out {
                Ok(r) => records.push(r),
                Err(f) => failures.push(f),
            }
        }
    }
    let labels: Vec<String> = arms.into_iter().map(|a| a.label).collect();
    let metrics = aggregate(&labels, &records, &failures, cfg.reps, &truth.regime.psi)?;
    Ok(StudyResult {
        truth,
        zeta_true,
        metrics,
        records,
        failures,
    })
}
