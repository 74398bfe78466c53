//! Posited unmeasured-confounder model and the plug-in confounding bias.
//!
//! With `B = [H_beta, A H_psi]`, weights `w` and an additive confounder effect
//! `beta_u U`, the bias of the weighted least-squares blip estimate is the
//! `H_psi` block of the weighted regression of `beta_u U` on `B`. This is the
//! partitioned-inverse form
//!
//! ```text
//! [M_psipsi - M_psibeta M_betabeta^-1 M_psibeta']^-1 [v_psi - M_psibeta M_betabeta^-1 v_beta]
//! ```
//!
//! written as a single regression, so the same solver is used for the fit and
//! its correction. `U` is replaced by its imputed conditional mean.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dwols::{blip_design, BiasCorrection, StageContext, StageFit};
use crate::error::{Error, Result};
use crate::linmodel::{self, expit, DesignMatrix, Tolerances};
use crate::panel::{check_terms, Panel, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    /// Continuous confounder; `E(U | H, A)` is the linear predictor.
    Identity,
    /// Binary confounder; `E(U | H, A)` is the inverse logit of the linear predictor.
    Logit,
}

impl Link {
    #[inline]
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => expit(eta),
        }
    }
}

/// Terms and link of the posited mean model `E(U | H_K, A_K; zeta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfounderModel {
    /// Without the implied intercept; may reference any history column and any treatment.
    pub terms: Vec<Term>,
    pub link: Link,
}

impl ConfounderModel {
    pub fn n_params(&self) -> usize {
        self.terms.len() + 1
    }

    pub fn design(&self, panel: &Panel) -> Result<DMatrix<f64>> {
        check_terms(&self.terms, &panel.layout().full_history(), "confounder")?;
        crate::dwols::term_design(panel, &self.terms)
    }
}

/// A fully specified confounder: mean model, its coefficients and the outcome effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfounderSpec {
    #[serde(flatten)]
    pub model: ConfounderModel,
    pub zeta: Vec<f64>,
    pub beta_u: f64,
}

/// Normal distribution descriptor. A zero variance is a point mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalPrior {
    pub mean: f64,
    pub variance: f64,
}

impl NormalPrior {
    pub fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }

    pub fn point(mean: f64) -> Self {
        Self { mean, variance: 0.0 }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean + self.variance.sqrt() * z
    }
}

/// Independent normal sampling distributions for `zeta` and `beta_u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub zeta: Vec<NormalPrior>,
    pub beta_u: NormalPrior,
}

/// One draw of the bias parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorDraw {
    pub zeta: Vec<f64>,
    pub beta_u: f64,
}

impl PriorSpec {
    pub fn validate(&self, model: &ConfounderModel) -> Result<()> {
        if self.zeta.len() != model.n_params() {
            return Err(Error::InvalidSpec(format!(
                "prior has {} zeta entries, confounder model has {} coefficients",
                self.zeta.len(),
                model.n_params()
            )));
        }
        for p in self.zeta.iter().chain(std::iter::once(&self.beta_u)) {
            if !(p.mean.is_finite() && p.variance.is_finite() && p.variance >= 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "prior N({}, {}) is not a valid normal",
                    p.mean, p.variance
                )));
            }
        }
        Ok(())
    }

    /// Draws `zeta` in order, then `beta_u`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PriorDraw {
        let zeta = self.zeta.iter().map(|p| p.sample(rng)).collect();
        PriorDraw {
            zeta,
            beta_u: self.beta_u.sample(rng),
        }
    }

    /// Point masses at the given values.
    pub fn degenerate(zeta: &[f64], beta_u: f64) -> Self {
        Self {
            zeta: zeta.iter().map(|&m| NormalPrior::point(m)).collect(),
            beta_u: NormalPrior::point(beta_u),
        }
    }

    pub fn is_zero_effect(&self) -> bool {
        self.beta_u.mean == 0.0 && self.beta_u.variance == 0.0
    }
}

/// Imputed confounder from a precomputed design.
pub fn impute_design(design: &DMatrix<f64>, link: Link, zeta: &[f64]) -> Result<Vec<f64>> {
    if design.ncols() != zeta.len() {
        return Err(Error::DimensionMismatch(format!(
            "confounder design has {} columns, zeta has {}",
            design.ncols(),
            zeta.len()
        )));
    }
    Ok((0..design.nrows())
        .map(|i| {
            let eta: f64 = zeta.iter().enumerate().map(|(j, z)| design[(i, j)] * z).sum();
            link.mean(eta)
        })
        .collect())
}

/// `U_hat_i = E(U | H_K, A_K; zeta)` for every row.
pub fn impute(panel: &Panel, spec: &ConfounderSpec) -> Result<Vec<f64>> {
    impute_design(&spec.model.design(panel)?, spec.model.link, &spec.zeta)
}

/// Estimated bias in the blip coefficients, one entry per `H_psi` column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEstimate(pub Vec<f64>);

/// Bias on a prepared stage design `B = [H_beta, A H_psi]` whose first
/// `n_beta` columns are `H_beta`.
pub fn bias_hat_design(
    design: &DesignMatrix,
    n_beta: usize,
    w: &[f64],
    u_hat: &[f64],
    beta_u: f64,
    tol: &Tolerances,
) -> Result<BiasEstimate> {
    let p = design.ncols();
    if n_beta >= p || u_hat.len() != design.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "bias design {}x{p} with {n_beta} beta columns and {} imputed values",
            design.nrows(),
            u_hat.len()
        )));
    }
    if beta_u == 0.0 {
        return Ok(BiasEstimate(vec![0.0; p - n_beta]));
    }
    let target: Vec<f64> = u_hat.iter().map(|u| beta_u * u).collect();
    let theta = linmodel::wls_with(design, &target, w, tol)?.coefficients;
    Ok(BiasEstimate(theta[n_beta..].to_vec()))
}

/// Plug-in confounding bias of the stage blip estimate.
pub fn bias_hat(
    h_beta: &DMatrix<f64>,
    h_psi: &DMatrix<f64>,
    a: &[f64],
    w: &[f64],
    u_hat: &[f64],
    beta_u: f64,
) -> Result<BiasEstimate> {
    let design = blip_design(h_beta, h_psi, a)?;
    bias_hat_design(&design, h_beta.ncols(), w, u_hat, beta_u, &Tolerances::default())
}

/// `psi - bias`.
pub fn adjust(fit: &StageFit, bias: &BiasEstimate) -> Result<Vec<f64>> {
    if fit.psi.len() != bias.0.len() {
        return Err(Error::DimensionMismatch(format!(
            "psi has {} entries, bias has {}",
            fit.psi.len(),
            bias.0.len()
        )));
    }
    Ok(fit.psi.iter().zip(&bias.0).map(|(p, b)| p - b).collect())
}

/// Applies the plug-in bias at every stage of a backward fit, reusing one
/// imputed confounder for all stages.
pub struct ConfounderCorrection<'a> {
    pub u_hat: &'a [f64],
    pub beta_u: f64,
    pub tol: Tolerances,
}

impl BiasCorrection for ConfounderCorrection<'_> {
    fn bias(&mut self, ctx: &StageContext<'_>) -> Result<Option<Vec<f64>>> {
        let b = bias_hat_design(ctx.design, ctx.n_beta, ctx.weights, self.u_hat, self.beta_u, &self.tol)?;
        Ok(Some(b.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_stage(n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let h_beta = DMatrix::from_fn(n, 3, |i, j| [1.0, x1[i], x2[i]][j]);
        let h_psi = DMatrix::from_fn(n, 2, |i, j| [1.0, x1[i]][j]);
        let a: Vec<f64> = (0..n).map(|i| f64::from(i % 3 != 0)).collect();
        let w: Vec<f64> = (0..n).map(|_| 0.1 + rng.random::<f64>()).collect();
        let u: Vec<f64> = (0..n).map(|i| x1[i] - 0.5 * a[i] + rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..n).map(|i| x2[i] + a[i] * (1.0 + x1[i]) + 2.0 * u[i]).collect();
        (h_beta, h_psi, a, w, u, y)
    }

    #[test]
    fn zero_effect_gives_zero_bias() {
        let (hb, hp, a, w, u, _) = random_stage(40, 1);
        assert_eq!(bias_hat(&hb, &hp, &a, &w, &u, 0.0).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn constant_confounder_is_absorbed() {
        let (hb, hp, a, w, _, _) = random_stage(40, 2);
        let b = bias_hat(&hb, &hp, &a, &w, &[3.7; 40], 1.5).unwrap();
        for v in b.0 {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn adjusted_fit_equals_regression_on_corrected_outcome() {
        let (hb, hp, a, w, u, y) = random_stage(50, 3);
        let design = blip_design(&hb, &hp, &a).unwrap();
        let theta = linmodel::wls(&design, &y, &w).unwrap().coefficients;
        let fit = StageFit {
            stage: 1,
            psi: theta[3..].to_vec(),
            beta: theta[..3].to_vec(),
            xi: vec![],
            weights: w.clone(),
            propensity_converged: true,
            ridge_used: false,
            bias: None,
        };
        let bias = bias_hat(&hb, &hp, &a, &w, &u, 2.0).unwrap();
        let adj = adjust(&fit, &bias).unwrap();
        let y_corr: Vec<f64> = y.iter().zip(&u).map(|(y, u)| y - 2.0 * u).collect();
        let oracle = linmodel::wls(&design, &y_corr, &w).unwrap().coefficients;
        for j in 0..2 {
            assert_abs_diff_eq!(adj[j], oracle[3 + j], epsilon = 1e-8);
        }
        // y has no noise beyond U, so the corrected fit recovers the blip exactly
        assert_abs_diff_eq!(adj[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(adj[1], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn adjust_arithmetic() {
        let fit = StageFit {
            stage: 1,
            psi: vec![-2.1, 0.5],
            beta: vec![],
            xi: vec![],
            weights: vec![],
            propensity_converged: true,
            ridge_used: false,
            bias: None,
        };
        let out = adjust(&fit, &BiasEstimate(vec![-1.1, 0.0])).unwrap();
        assert_abs_diff_eq!(out[0], -1.0, epsilon = 1e-12);
        assert_eq!(out[1], 0.5);
        assert_eq!(adjust(&fit, &BiasEstimate(vec![0.0, 0.0])).unwrap(), fit.psi);
        assert!(adjust(&fit, &BiasEstimate(vec![0.0])).is_err());
    }

    #[test]
    fn bias_is_linear_and_weight_scale_invariant() {
        let (hb, hp, a, w, u, _) = random_stage(60, 4);
        let b1 = bias_hat(&hb, &hp, &a, &w, &u, 1.0).unwrap().0;
        let b3 = bias_hat(&hb, &hp, &a, &w, &u, 3.0).unwrap().0;
        let u2: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
        let bu2 = bias_hat(&hb, &hp, &a, &w, &u2, 1.0).unwrap().0;
        let w7: Vec<f64> = w.iter().map(|v| 7.0 * v).collect();
        let bw = bias_hat(&hb, &hp, &a, &w7, &u, 1.0).unwrap().0;
        for j in 0..2 {
            assert_abs_diff_eq!(b3[j], 3.0 * b1[j], epsilon = 1e-10);
            assert_abs_diff_eq!(bu2[j], 2.0 * b1[j], epsilon = 1e-10);
            assert_abs_diff_eq!(bw[j], b1[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn impute_links() {
        let d = DMatrix::from_fn(4, 3, |i, j| if j == 0 { 1.0 } else { (i + j) as f64 });
        assert!(impute_design(&d, Link::Identity, &[0.0; 3]).unwrap().iter().all(|&v| v == 0.0));
        assert!(impute_design(&d, Link::Logit, &[0.0; 3]).unwrap().iter().all(|&v| v == 0.5));
        assert!(impute_design(&d, Link::Logit, &[0.0; 2]).is_err());
        let lin = impute_design(&d, Link::Identity, &[1.0, 2.0, -1.0]).unwrap();
        assert_eq!(lin[0], 1.0 + 2.0 * 1.0 - 2.0);
    }

    #[test]
    fn prior_validation_and_point_mass() {
        let model = ConfounderModel { terms: vec!["x1".parse().unwrap()], link: Link::Identity };
        let p = PriorSpec::degenerate(&[0.0, 1.0], 2.0);
        p.validate(&model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(p.sample(&mut rng), PriorDraw { zeta: vec![0.0, 1.0], beta_u: 2.0 });
        let bad = PriorSpec { zeta: vec![NormalPrior::new(0.0, -1.0); 2], beta_u: NormalPrior::point(0.0) };
        assert!(bad.validate(&model).is_err());
        assert!(PriorSpec::degenerate(&[0.0], 0.0).validate(&model).is_err());
    }
}
