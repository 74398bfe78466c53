//! Monte Carlo sensitivity analysis.
//!
//! Each repetition draws a bootstrap resample and one set of bias parameters
//! `(zeta, beta_u)`, imputes the confounder once from the final-stage history,
//! and runs the bias-adjusted backward recursion: at every stage the fitted
//! blip is corrected by the plug-in bias, and earlier stages see pseudo-outcomes
//! built from the corrected coefficients. The adjusted estimate is the average
//! over repetitions.
//!
//! Repetition `b` draws from the stream `(seed, [tag, b, attempt])`, so results
//! do not depend on how repetitions are scheduled across threads. A repetition
//! that fails numerically (one-class treatment or singular design in the
//! resample) is redrawn with the next attempt index.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confound::{self, ConfounderCorrection, ConfounderModel, PriorDraw, PriorSpec};
use crate::dwols::{self, PreparedPanel, Regime, StageModelSpec};
use crate::error::{Error, Result};
use crate::linmodel::{Tolerances, WeightScheme};
use crate::panel::Panel;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McsaConfig {
    /// Number of Monte Carlo/bootstrap repetitions.
    pub b: usize,
    pub seed: u64,
    pub scheme: WeightScheme,
    pub prior: PriorSpec,
    pub confounder: ConfounderModel,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl McsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::InvalidSpec("MCSA needs at least one repetition".into()));
        }
        self.prior.validate(&self.confounder)
    }
}

/// Designs and confounder design evaluated once on the analysis panel.
#[derive(Debug, Clone)]
pub struct McsaData {
    prep: PreparedPanel,
    u_design: DMatrix<f64>,
}

impl McsaData {
    pub fn new(panel: &Panel, spec: &StageModelSpec, model: &ConfounderModel) -> Result<Self> {
        Ok(Self {
            prep: PreparedPanel::new(panel, spec)?,
            u_design: model.design(panel)?,
        })
    }

    pub fn prepared(&self) -> &PreparedPanel {
        &self.prep
    }

    pub fn confounder_design(&self) -> &DMatrix<f64> {
        &self.u_design
    }

    pub fn n(&self) -> usize {
        self.prep.n()
    }

    fn subset(&self, rows: &[usize]) -> (PreparedPanel, DMatrix<f64>) {
        let u = DMatrix::from_fn(rows.len(), self.u_design.ncols(), |i, j| self.u_design[(rows[i], j)]);
        (self.prep.subset(rows), u)
    }
}

/// Per-stage blip estimates on one resample for one draw of the bias parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repetition {
    pub index: usize,
    pub attempt: usize,
    pub rows: Vec<usize>,
    pub draw: PriorDraw,
    /// Stage regressions before the bias correction at that stage.
    pub fitted: Vec<Vec<f64>>,
    pub adjusted: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub repetition: usize,
    pub attempt: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionBatch {
    pub reps: Vec<Repetition>,
    pub failures: Vec<FailureRecord>,
}

impl RepetitionBatch {
    pub fn attempts(&self) -> usize {
        self.reps.len() + self.failures.len()
    }
}

/// Bias-adjusted backward fit on an already-selected sample.
pub fn adjusted_fit(
    prep: &PreparedPanel,
    u_design: &DMatrix<f64>,
    model: &ConfounderModel,
    draw: &PriorDraw,
    scheme: WeightScheme,
    tol: &Tolerances,
) -> Result<dwols::DwolsFit> {
    let u_hat = confound::impute_design(u_design, model.link, &draw.zeta)?;
    let mut corr = ConfounderCorrection {
        u_hat: &u_hat,
        beta_u: draw.beta_u,
        tol: *tol,
    };
    dwols::fit_prepared(prep, scheme, tol, &mut corr)
}

/// Runs `count` independent repetitions with resamples of `resample_size` rows.
pub fn run_batch(
    data: &McsaData,
    cfg: &McsaConfig,
    count: usize,
    resample_size: usize,
    path: &[u64],
) -> Result<RepetitionBatch> {
    let n = data.n();
    if resample_size == 0 || n == 0 {
        return Err(Error::InvalidSpec("empty resample".into()));
    }
    let budget = 10 * count;
    let failed = AtomicUsize::new(0);

    let results: Vec<(Option<Repetition>, Vec<FailureRecord>)> = (0..count)
        .into_par_iter()
        .map(|b| {
            let mut failures = Vec::new();
            for attempt in 0..budget {
                if failed.load(Ordering::Relaxed) + count > budget {
                    break;
                }
                let mut full_path = path.to_vec();
                full_path.extend([b as u64, attempt as u64]);
                let mut r = rng::stream(cfg.seed, &full_path);
                let rows: Vec<usize> = (0..resample_size).map(|_| r.random_range(0..n)).collect();
                let draw = cfg.prior.sample(&mut r);
                let (prep, u_design) = data.subset(&rows);
                match adjusted_fit(&prep, &u_design, &cfg.confounder, &draw, cfg.scheme, &cfg.tolerances) {
                    Ok(fit) => {
                        let rep = Repetition {
                            index: b,
                            attempt,
                            rows,
                            draw,
                            fitted: fit.stages.iter().map(|s| s.psi.clone()).collect(),
                            adjusted: fit.stages.iter().map(|s| s.psi_adjusted()).collect(),
                        };
                        return (Some(rep), failures);
                    }
                    Err(e) => {
                        failed.fetch_add(1, Ordering::Relaxed);
                        failures.push(FailureRecord {
                            repetition: b,
                            attempt,
                            message: e.to_string(),
                        });
                    }
                }
            }
            (None, failures)
        })
        .collect();

    let mut reps = Vec::with_capacity(count);
    let mut failures = Vec::new();
    let mut incomplete = false;
    for (rep, f) in results {
        failures.extend(f);
        match rep {
            Some(r) => reps.push(r),
            None => incomplete = true,
        }
    }
    if incomplete || count + failures.len() > budget {
        return Err(Error::ResampleExhausted {
            attempts: reps.len() + failures.len(),
            failures: failures.len(),
        });
    }
    Ok(RepetitionBatch { reps, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsaFit {
    /// `[stage][repetition][coefficient]` adjusted estimates.
    pub adjusted: Vec<Vec<Vec<f64>>>,
    /// Same layout, before the stage's own bias correction.
    pub fitted: Vec<Vec<Vec<f64>>>,
    /// Column means of `adjusted`, per stage.
    pub mean: Vec<Vec<f64>>,
    pub draws: Vec<PriorDraw>,
    pub indices: Vec<Vec<usize>>,
    pub failures: Vec<FailureRecord>,
}

impl McsaFit {
    pub fn from_batch(batch: RepetitionBatch) -> Self {
        let n_stages = batch.reps.first().map_or(0, |r| r.adjusted.len());
        let per_stage = |pick: fn(&Repetition) -> &Vec<Vec<f64>>| -> Vec<Vec<Vec<f64>>> {
            (0..n_stages)
                .map(|k| batch.reps.iter().map(|r| pick(r)[k].clone()).collect())
                .collect()
        };
        let adjusted = per_stage(|r| &r.adjusted);
        let fitted = per_stage(|r| &r.fitted);
        let mean = adjusted.iter().map(|rows| column_mean(rows)).collect();
        let draws = batch.reps.iter().map(|r| r.draw.clone()).collect();
        let indices = batch.reps.into_iter().map(|r| r.rows).collect();
        Self {
            adjusted,
            fitted,
            mean,
            draws,
            indices,
            failures: batch.failures,
        }
    }

    pub fn b(&self) -> usize {
        self.draws.len()
    }

    pub fn regime(&self) -> Regime {
        Regime { psi: self.mean.clone() }
    }
}

pub(crate) fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let p = rows.first().map_or(0, Vec::len);
    let mut m = vec![0.0; p];
    for r in rows {
        for (acc, v) in m.iter_mut().zip(r) {
            *acc += v;
        }
    }
    let b = rows.len() as f64;
    m.iter_mut().for_each(|v| *v /= b);
    m
}

pub fn run_prepared(data: &McsaData, cfg: &McsaConfig) -> Result<McsaFit> {
    cfg.validate()?;
    let batch = run_batch(data, cfg, cfg.b, data.n(), &[rng::tag::MCSA])?;
    Ok(McsaFit::from_batch(batch))
}

pub fn run(panel: &Panel, spec: &StageModelSpec, cfg: &McsaConfig) -> Result<McsaFit> {
    cfg.validate()?;
    let data = McsaData::new(panel, spec, &cfg.confounder)?;
    run_prepared(&data, cfg)
}
