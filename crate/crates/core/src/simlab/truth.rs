//! True optimal regimes and related oracles for the simulation DGPs.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dwols::{decide, PreparedPanel, Regime};
use crate::error::{Error, Result};
use crate::linmodel::{self, DesignMatrix};
use crate::rng;

use super::dgp::{Assignment, Dgp, TwoStageDgp};

/// Potential-outcome draws behind the stage-1 truth of the two-stage DGP.
pub const STAGE1_DRAWS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueRegime {
    pub regime: Regime,
    /// Monte Carlo standard errors, zero where the value is exact.
    pub mc_se: Vec<Vec<f64>>,
}

/// Regresses `Y*(1, d2opt) - Y*(0, d2opt)` on `(1, x11, x12)` over `draws`
/// simulated patients, using common random numbers for both arms.
/// Returns coefficients and their Monte Carlo standard errors.
pub fn stage1_contrast_regression(dgp: &TwoStageDgp, draws: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    dgp.validate()?;
    if draws < 10 {
        return Err(Error::InvalidSpec("stage-1 truth needs at least 10 draws".into()));
    }
    let mut r = rng::stream(seed, &[rng::tag::ORACLE]);
    let mut xtx = Matrix3::<f64>::zeros();
    let mut xty = Vector3::<f64>::zeros();
    let mut yty = 0.0;
    let sd = |v: f64| v.sqrt();
    for _ in 0..draws {
        let u = sd(dgp.var_u) * r.sample::<f64, _>(StandardNormal);
        let x11 = dgp.phi1[0] + dgp.phi1[1] * u + sd(dgp.var_x11) * r.sample::<f64, _>(StandardNormal);
        let x12 = dgp.phi2[0] + dgp.phi2[1] * u + sd(dgp.var_x12) * r.sample::<f64, _>(StandardNormal);
        let e2 = sd(dgp.var_x2) * r.sample::<f64, _>(StandardNormal);
        let arm = |a1: f64| {
            let x2 = dgp.x2_mean(x11, x12) + e2;
            let gain = dgp.blip2(x11, x12, x2).max(0.0);
            dgp.treatment_free(x11, x12, a1, x2, u) + gain
        };
        let c = arm(1.0) - arm(0.0);
        let h = Vector3::new(1.0, x11, x12);
        xtx += h * h.transpose();
        xty += h * c;
        yty += c * c;
    }
    let chol = xtx
        .cholesky()
        .ok_or(Error::SingularDesign { rcond: 0.0, threshold: 0.0 })?;
    let coef = chol.solve(&xty);
    let rss = (yty - coef.dot(&xty)).max(0.0);
    let sigma2 = rss / (draws - 3) as f64;
    let inv = chol.inverse();
    let se = (0..3).map(|j| (sigma2 * inv[(j, j)]).sqrt()).collect();
    Ok((coef.iter().copied().collect(), se))
}

fn cache() -> &'static Mutex<HashMap<u64, TrueRegime>> {
    static CACHE: OnceLock<Mutex<HashMap<u64, TrueRegime>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// True regime in the blip terms of `dgp.model_spec()`. Stage-1 values of the
/// two-stage DGP are computed once per parameter set and cached.
pub fn true_regime(dgp: &Dgp) -> Result<TrueRegime> {
    match dgp {
        Dgp::OneStage(d) => Ok(TrueRegime {
            regime: Regime { psi: vec![d.psi.to_vec()] },
            mc_se: vec![vec![0.0; 3]],
        }),
        Dgp::TwoStage(d) => {
            let key = dgp.fingerprint();
            if let Some(t) = cache().lock().expect("truth cache").get(&key) {
                return Ok(t.clone());
            }
            let (psi1, se1) = stage1_contrast_regression(d, STAGE1_DRAWS, key)?;
            let t = TrueRegime {
                regime: Regime {
                    psi: vec![psi1, d.psi2.to_vec()],
                },
                mc_se: vec![se1, vec![0.0; 4]],
            };
            cache().lock().expect("truth cache").insert(key, t.clone());
            Ok(t)
        }
    }
}

/// Least-squares projection of the latent confounder on the DGP's confounder
/// model terms, from one large observational sample.
pub fn pseudo_true_zeta(dgp: &Dgp, n: usize, seed: u64) -> Result<Vec<f64>> {
    let sim = dgp.generate(n, seed)?;
    let x = DesignMatrix::new(dgp.confounder_model().design(&sim.panel)?)?;
    Ok(linmodel::wls(&x, &sim.u, &vec![1.0; n])?.coefficients)
}

/// Which stage-1 treatments generate the later-stage histories of the
/// evaluation patients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rollout {
    /// Follow the true stage-1 rule.
    #[default]
    Truth,
    /// Use the DGP's observational treatment model.
    Observed,
}

impl std::str::FromStr for Rollout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truth" => Ok(Rollout::Truth),
            "observed" => Ok(Rollout::Observed),
            other => Err(Error::InvalidSpec(format!("unknown rollout `{other}`"))),
        }
    }
}

/// Fresh patients with their true recommendations, for scoring estimated regimes.
#[derive(Debug, Clone)]
pub struct EvalSet {
    prep: PreparedPanel,
    truth: Vec<Vec<u8>>,
}

impl EvalSet {
    pub fn new(dgp: &Dgp, truth: &Regime, n: usize, seed: u64, rollout: Rollout) -> Result<Self> {
        let mut r = rng::stream(seed, &[rng::tag::EVAL]);
        let psi1 = truth.psi[0].clone();
        let rule = move |x: &[f64]| decide(psi1[0] + psi1[1] * x[0] + psi1[2] * x[1]);
        let assign = match rollout {
            Rollout::Truth => Assignment::Rule(&rule),
            Rollout::Observed => Assignment::Observed,
        };
        let sim = dgp.generate_with(n, &mut r, assign)?;
        let prep = PreparedPanel::new(&sim.panel, &dgp.model_spec())?;
        let truth = (0..prep.n_stages())
            .map(|k| truth.recommend_all(k, prep.stage(k)))
            .collect::<Result<_>>()?;
        Ok(Self { prep, truth })
    }

    /// Per-stage share of patients whose recommendation matches the truth.
    pub fn proportion_optimal(&self, est: &Regime) -> Result<Vec<f64>> {
        (0..self.prep.n_stages())
            .map(|k| {
                let rec = est.recommend_all(k, self.prep.stage(k))?;
                let agree = rec.iter().zip(&self.truth[k]).filter(|(a, b)| a == b).count();
                Ok(agree as f64 / rec.len() as f64)
            })
            .collect()
    }
}

/// Proportion of `n_eval` fresh patients for whom `est` and `truth` agree, per stage.
pub fn proportion_optimal(
    est: &Regime,
    truth: &Regime,
    dgp: &Dgp,
    n_eval: usize,
    seed: u64,
    rollout: Rollout,
) -> Result<Vec<f64>> {
    EvalSet::new(dgp, truth, n_eval, seed, rollout)?.proportion_optimal(est)
}
