//! Confidence intervals for the adjusted blip coefficients by an adaptive
//! m-out-of-n bootstrap.
//!
//! The resample size shrinks from `n` toward `n^{1/(1+kappa)}` as the
//! estimated share of patients with a blip indistinguishable from zero grows.
//! That share is estimated at the last stage from a Wald-type pretest and at
//! earlier stages from per-patient bootstrap intervals for the blip.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dwols::{self, StageModelSpec};
use crate::error::{Error, Result};
use crate::linmodel::{self, DesignMatrix};
use crate::mcsa::{self, FailureRecord, McsaConfig, McsaData, McsaFit};
use crate::panel::Panel;
use crate::rng;

/// Fewer resamples than this make tail percentiles unreliable.
pub const MIN_B: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceEstimator {
    /// Robust covariance of the last-stage weighted regression.
    Sandwich,
    /// `n` times the covariance of the MCSA repetitions at the last stage.
    Bootstrap,
}

impl std::str::FromStr for CovarianceEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sandwich" => Ok(CovarianceEstimator::Sandwich),
            "bootstrap" => Ok(CovarianceEstimator::Bootstrap),
            other => Err(Error::InvalidSpec(format!("unknown covariance estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CiConfig {
    #[serde(default = "default_level")]
    pub kappa: f64,
    #[serde(default = "default_level")]
    pub nu: f64,
    /// Interval level per stage; a single value applies to every stage.
    #[serde(default = "default_vartheta")]
    pub vartheta: Vec<f64>,
    pub b: usize,
    pub seed: u64,
    #[serde(default = "default_covariance")]
    pub covariance: CovarianceEstimator,
}

fn default_level() -> f64 {
    0.05
}

fn default_vartheta() -> Vec<f64> {
    vec![0.05]
}

fn default_covariance() -> CovarianceEstimator {
    CovarianceEstimator::Sandwich
}

impl CiConfig {
    pub fn new(b: usize, seed: u64) -> Self {
        Self {
            kappa: default_level(),
            nu: default_level(),
            vartheta: default_vartheta(),
            b,
            seed,
            covariance: default_covariance(),
        }
    }

    pub fn validate(&self, n_stages: usize) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidSpec(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return Err(Error::InvalidSpec(format!("nu must lie in (0, 1), got {}", self.nu)));
        }
        if self.vartheta.len() != 1 && self.vartheta.len() != n_stages {
            return Err(Error::InvalidSpec(format!(
                "vartheta needs 1 or {n_stages} values, got {}",
                self.vartheta.len()
            )));
        }
        if let Some(v) = self.vartheta.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::InvalidSpec(format!("vartheta must lie in (0, 1), got {v}")));
        }
        if self.b < MIN_B {
            return Err(Error::InsufficientB(self.b));
        }
        Ok(())
    }

    pub fn level(&self, k: usize) -> f64 {
        if self.vartheta.len() == 1 {
            self.vartheta[0]
        } else {
            self.vartheta[k]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiReport {
    /// Share of patients with a blip indistinguishable from zero, per stage.
    pub p_hat_stage: Vec<f64>,
    pub p_hat: f64,
    pub m_stage: Vec<usize>,
    pub m: usize,
    /// Adjusted point estimates the intervals are centred on.
    pub point: Vec<Vec<f64>>,
    /// `[stage][coefficient]`.
    pub intervals: Vec<Vec<Interval>>,
    /// Estimate of `n Cov` of the last-stage blip coefficients.
    pub sigma: Vec<Vec<f64>>,
    pub failures: Vec<FailureRecord>,
}

/// Empirical fraction of rows whose blip passes
/// `n (h' psi)^2 <= h' Sigma h * chi2_{1, 1-nu}`.
pub fn pretest_pk(h_psi: &DMatrix<f64>, psi: &[f64], sigma: &DMatrix<f64>, nu: f64) -> Result<f64> {
    let (n, p) = h_psi.shape();
    if psi.len() != p || sigma.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!(
            "pretest: {p} blip columns, {} coefficients, sigma {}x{}",
            psi.len(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if n == 0 {
        return Err(Error::DimensionMismatch("pretest on zero rows".into()));
    }
    let crit = linmodel::chisq_quantile(1.0 - nu)?;
    let mut hits = 0usize;
    for i in 0..n {
        let h = h_psi.row(i).transpose();
        let est: f64 = h.iter().zip(psi).map(|(a, b)| a * b).sum();
        let var = (h.transpose() * sigma * &h)[(0, 0)];
        if n as f64 * est * est <= var * crit {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// `round(n^{(1 + kappa (1 - p_hat)) / (1 + kappa)})`.
pub fn resample_size(p_hat: f64, n: usize, kappa: f64) -> usize {
    let e = (1.0 + kappa * (1.0 - p_hat)) / (1.0 + kappa);
    (n as f64).powf(e).round() as usize
}

/// Sample quantile with linear interpolation between order statistics
/// (the default definition in R and NumPy). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// `(psi - u / sqrt(m), psi - l / sqrt(m))` with `l`, `u` the lower and upper
/// percentiles of the scaled deviations `sqrt(m) (psi_b - psi)`.
pub fn basic_interval(point: f64, scaled_devs: Vec<f64>, level: f64, m: usize) -> Interval {
    let s = sorted(scaled_devs);
    let l = quantile_sorted(&s, level / 2.0);
    let u = quantile_sorted(&s, 1.0 - level / 2.0);
    let root = (m as f64).sqrt();
    Interval {
        lower: point - u / root,
        upper: point - l / root,
    }
}

fn last_stage_sigma(
    data: &McsaData,
    cfg: &McsaConfig,
    ci: &CiConfig,
    last_stage_draws: Option<&[Vec<f64>]>,
) -> Result<DMatrix<f64>> {
    let prep = data.prepared();
    let big_k = prep.n_stages();
    match ci.covariance {
        CovarianceEstimator::Sandwich => {
            let fit = dwols::fit_prepared(prep, cfg.scheme, &cfg.tolerances, &mut ())?;
            let sf = &fit.stages[big_k - 1];
            let sd = prep.stage(big_k - 1);
            let design: DesignMatrix = dwols::blip_design(&sd.h_beta, &sd.h_psi, &sd.a)?;
            let coef: Vec<f64> = sf.beta.iter().chain(&sf.psi).copied().collect();
            let full = linmodel::sandwich_cov(&design, prep.outcome(), &sf.weights, &coef)?;
            let nb = sf.beta.len();
            let p = sf.psi.len();
            Ok(full.view((nb, nb), (p, p)).into_owned())
        }
        CovarianceEstimator::Bootstrap => {
            let draws = last_stage_draws
                .filter(|d| d.len() >= 2)
                .ok_or_else(|| Error::InvalidSpec("bootstrap covariance needs repetition draws".into()))?;
            let p = draws[0].len();
            let mean = mcsa::column_mean(draws);
            let denom = (draws.len().max(2) - 1) as f64;
            let n = data.n() as f64;
            Ok(DMatrix::from_fn(p, p, |i, j| {
                draws.iter().map(|d| (d[i] - mean[i]) * (d[j] - mean[j])).sum::<f64>() / denom * n
            }))
        }
    }
}

/// Intervals around an existing point estimate computed on `data`.
///
/// `last_stage_draws` are per-repetition last-stage estimates, needed only by
/// the bootstrap covariance estimator.
pub fn intervals_with_point(
    data: &McsaData,
    cfg: &McsaConfig,
    ci: &CiConfig,
    point: &[Vec<f64>],
    last_stage_draws: Option<&[Vec<f64>]>,
) -> Result<CiReport> {
    let prep = data.prepared();
    let big_k = prep.n_stages();
    let n = data.n();
    ci.validate(big_k)?;
    let boot_cfg = McsaConfig {
        seed: ci.seed,
        ..cfg.clone()
    };

    if point.len() != big_k {
        return Err(Error::DimensionMismatch(format!(
            "point estimate has {} stages, panel has {big_k}",
            point.len()
        )));
    }
    let sigma = last_stage_sigma(data, cfg, ci, last_stage_draws)?;
    let mut p_hat_stage = vec![0.0; big_k];
    let mut m_stage = vec![0; big_k];
    p_hat_stage[big_k - 1] = pretest_pk(&prep.stage(big_k - 1).h_psi, &point[big_k - 1], &sigma, ci.nu)?;
    m_stage[big_k - 1] = resample_size(p_hat_stage[big_k - 1], n, ci.kappa);

    let mut failures = Vec::new();
    for k in (0..big_k.saturating_sub(1)).rev() {
        let batch = mcsa::run_batch(data, &boot_cfg, ci.b, m_stage[k + 1], &[rng::tag::CI_STAGE, k as u64])?;
        let h = &prep.stage(k).h_psi;
        let mut zero_inside = 0usize;
        for i in 0..n {
            let blips: Vec<f64> = batch
                .reps
                .iter()
                .map(|r| h.row(i).iter().zip(&r.adjusted[k]).map(|(x, c)| x * c).sum())
                .collect();
            let s = sorted(blips);
            let lo = quantile_sorted(&s, ci.nu / 2.0);
            let hi = quantile_sorted(&s, 1.0 - ci.nu / 2.0);
            if lo <= 0.0 && 0.0 <= hi {
                zero_inside += 1;
            }
        }
        p_hat_stage[k] = zero_inside as f64 / n as f64;
        m_stage[k] = resample_size(p_hat_stage[k], n, ci.kappa);
        failures.extend(batch.failures);
    }

    let p_hat = p_hat_stage.iter().copied().fold(0.0, f64::max);
    let m = resample_size(p_hat, n, ci.kappa);
    let batch = mcsa::run_batch(data, &boot_cfg, ci.b, m, &[rng::tag::CI_FINAL])?;
    let root = (m as f64).sqrt();
    let intervals = (0..big_k)
        .map(|k| {
            (0..point[k].len())
                .map(|j| {
                    let centre = point[k][j];
                    let devs = batch.reps.iter().map(|r| root * (r.adjusted[k][j] - centre)).collect();
                    basic_interval(centre, devs, ci.level(k), m)
                })
                .collect()
        })
        .collect();
    failures.extend(batch.failures);

    Ok(CiReport {
        p_hat_stage,
        p_hat,
        m_stage,
        m,
        point: point.to_vec(),
        intervals,
        sigma: sigma.row_iter().map(|r| r.iter().copied().collect()).collect(),
        failures,
    })
}

/// Runs the MCSA point estimate and then the intervals around it.
pub fn intervals(panel: &Panel, spec: &StageModelSpec, cfg: &McsaConfig, ci: &CiConfig) -> Result<(McsaFit, CiReport)> {
    cfg.validate()?;
    ci.validate(panel.n_stages())?;
    let data = McsaData::new(panel, spec, &cfg.confounder)?;
    let point = mcsa::run_prepared(&data, cfg)?;
    let big_k = panel.n_stages();
    let report = intervals_with_point(&data, cfg, ci, &point.mean, Some(&point.adjusted[big_k - 1]))?;
    Ok((point, report))
}
