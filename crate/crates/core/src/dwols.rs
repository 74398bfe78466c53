//! Dynamic weighted ordinary least squares.
//!
//! Stages are fitted backwards. At stage `k` the propensity model is fitted by
//! logistic regression, balancing weights are formed from it, and the response
//! (the outcome at the last stage, the pseudo-outcome before that) is regressed
//! on `[H_beta, A_k H_psi]`. The `H_psi` block of the solution is the blip
//! estimate. Stage indices are 0-based in the API; error messages and reports
//! number stages from 1.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{self, DesignMatrix, Tolerances, WeightScheme};
use crate::panel::{check_terms, Panel, PanelLayout, Term};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTerms {
    /// `h_psi` without the implied intercept.
    pub blip: Vec<Term>,
    /// `h_beta` without the implied intercept; must contain every blip term.
    pub treatment_free: Vec<Term>,
    pub propensity: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageModelSpec {
    pub stages: Vec<StageTerms>,
}

impl StageModelSpec {
    pub fn validate(&self, layout: &PanelLayout) -> Result<()> {
        if self.stages.len() != layout.n_stages() {
            return Err(Error::InvalidSpec(format!(
                "model has {} stages, data layout has {}",
                self.stages.len(),
                layout.n_stages()
            )));
        }
        for (k, st) in self.stages.iter().enumerate() {
            let hist = layout.history(k);
            let at = |what: &str| format!("stage {} {what}", k + 1);
            check_terms(&st.blip, &hist, &at("blip"))?;
            check_terms(&st.treatment_free, &hist, &at("treatment-free"))?;
            check_terms(&st.propensity, &hist, &at("propensity"))?;
            if let Some(t) = st
                .blip
                .iter()
                .find(|b| !st.treatment_free.iter().any(|t| t.same_as(b)))
            {
                return Err(Error::InvalidSpec(format!(
                    "stage {} blip term `{t}` is missing from the treatment-free model",
                    k + 1
                )));
            }
        }
        Ok(())
    }
}

/// Builds `[1, t_1, ..., t_q]` for the given terms.
pub fn term_design(panel: &Panel, terms: &[Term]) -> Result<DMatrix<f64>> {
    let n = panel.n();
    let mut m = DMatrix::from_element(n, terms.len() + 1, 1.0);
    for (j, t) in terms.iter().enumerate() {
        let v = panel.term_values(t)?;
        m.column_mut(j + 1).copy_from_slice(&v);
    }
    Ok(m)
}

fn gather_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Design blocks for one stage, evaluated on every row of a panel.
#[derive(Debug, Clone)]
pub struct StageDesign {
    pub h_beta: DMatrix<f64>,
    pub h_psi: DMatrix<f64>,
    pub propensity: DMatrix<f64>,
    pub a: Vec<f64>,
}

impl StageDesign {
    fn subset(&self, rows: &[usize]) -> Self {
        Self {
            h_beta: gather_rows(&self.h_beta, rows),
            h_psi: gather_rows(&self.h_psi, rows),
            propensity: gather_rows(&self.propensity, rows),
            a: rows.iter().map(|&r| self.a[r]).collect(),
        }
    }

    /// `H_psi' psi` for every row.
    pub fn blip_scores(&self, psi: &[f64]) -> Vec<f64> {
        let p = self.h_psi.ncols();
        (0..self.h_psi.nrows())
            .map(|i| (0..p).map(|j| self.h_psi[(i, j)] * psi[j]).sum())
            .collect()
    }
}

/// Numeric designs for every stage of a panel under a model spec.
#[derive(Debug, Clone)]
pub struct PreparedPanel {
    stages: Vec<StageDesign>,
    y: Vec<f64>,
}

impl PreparedPanel {
    pub fn new(panel: &Panel, spec: &StageModelSpec) -> Result<Self> {
        spec.validate(panel.layout())?;
        let stages = spec
            .stages
            .iter()
            .enumerate()
            .map(|(k, st)| {
                Ok(StageDesign {
                    h_beta: term_design(panel, &st.treatment_free)?,
                    h_psi: term_design(panel, &st.blip)?,
                    propensity: term_design(panel, &st.propensity)?,
                    a: panel.treatment(k).to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stages,
            y: panel.outcome().to_vec(),
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, k: usize) -> &StageDesign {
        &self.stages[k]
    }

    pub fn outcome(&self) -> &[f64] {
        &self.y
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            stages: self.stages.iter().map(|s| s.subset(rows)).collect(),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }
}

/// Linear blip `a * h_psi' psi`.
pub fn blip(h_psi: &[f64], a: f64, psi: &[f64]) -> Result<f64> {
    if h_psi.len() != psi.len() {
        return Err(Error::DimensionMismatch(format!(
            "blip row has {} entries, psi has {}",
            h_psi.len(),
            psi.len()
        )));
    }
    Ok(a * h_psi.iter().zip(psi).map(|(h, p)| h * p).sum::<f64>())
}

/// Optimal treatment for a blip value; a blip of exactly zero recommends 0.
#[inline]
pub fn decide(blip_value: f64) -> u8 {
    u8::from(blip_value > 0.0)
}

/// Per-stage blip coefficients indexing a decision rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub psi: Vec<Vec<f64>>,
}

impl Regime {
    pub fn recommend(&self, k: usize, h_psi: &[f64]) -> Result<u8> {
        let psi = self
            .psi
            .get(k)
            .ok_or_else(|| Error::DimensionMismatch(format!("regime has no stage {}", k + 1)))?;
        Ok(decide(blip(h_psi, 1.0, psi)?))
    }

    /// Recommendations for every row of a stage design.
    pub fn recommend_all(&self, k: usize, stage: &StageDesign) -> Result<Vec<u8>> {
        let psi = self
            .psi
            .get(k)
            .ok_or_else(|| Error::DimensionMismatch(format!("regime has no stage {}", k + 1)))?;
        if psi.len() != stage.h_psi.ncols() {
            return Err(Error::DimensionMismatch("regime/design blip width".into()));
        }
        Ok(stage.blip_scores(psi).into_iter().map(decide).collect())
    }
}

/// Free-function form of [`Regime::recommend`].
pub fn recommend(regime: &Regime, k: usize, h_psi: &[f64]) -> Result<u8> {
    regime.recommend(k, h_psi)
}

/// `Y + sum_{j>k} [gamma_j(h_j, d_j(h_j)) - gamma_j(h_j, a_j)]`, where `later[i]`
/// holds the coefficients of stage `k + 1 + i`.
pub fn pseudo_outcome_prepared(prep: &PreparedPanel, k: usize, later: &[Vec<f64>]) -> Result<Vec<f64>> {
    let big_k = prep.n_stages();
    if k >= big_k || later.len() != big_k - k - 1 {
        return Err(Error::DimensionMismatch(format!(
            "stage {} of {big_k} needs {} later coefficient sets, got {}",
            k + 1,
            big_k.saturating_sub(k + 1),
            later.len()
        )));
    }
    let mut out = prep.y.clone();
    for (i, psi) in later.iter().enumerate() {
        let st = &prep.stages[k + 1 + i];
        if psi.len() != st.h_psi.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "stage {} blip has {} coefficients, got {}",
                k + 2 + i,
                st.h_psi.ncols(),
                psi.len()
            )));
        }
        for ((o, s), a) in out.iter_mut().zip(st.blip_scores(psi)).zip(&st.a) {
            *o += f64::from(decide(s)) * s - a * s;
        }
    }
    Ok(out)
}

pub fn pseudo_outcome(panel: &Panel, spec: &StageModelSpec, k: usize, later: &[Vec<f64>]) -> Result<Vec<f64>> {
    pseudo_outcome_prepared(&PreparedPanel::new(panel, spec)?, k, later)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFit {
    /// 1-based stage number.
    pub stage: usize,
    pub psi: Vec<f64>,
    pub beta: Vec<f64>,
    pub xi: Vec<f64>,
    pub weights: Vec<f64>,
    pub propensity_converged: bool,
    pub ridge_used: bool,
    /// Estimated confounding bias in `psi`, when a correction was applied.
    pub bias: Option<Vec<f64>>,
}

impl StageFit {
    /// `psi - bias`, or `psi` when no correction was applied.
    pub fn psi_adjusted(&self) -> Vec<f64> {
        match &self.bias {
            Some(b) => self.psi.iter().zip(b).map(|(p, b)| p - b).collect(),
            None => self.psi.clone(),
        }
    }
}

/// What a bias correction sees at each stage.
pub struct StageContext<'a> {
    pub k: usize,
    pub design: &'a DesignMatrix,
    /// Number of leading `H_beta` columns in `design`.
    pub n_beta: usize,
    pub weights: &'a [f64],
}

/// Hook called after each stage regression; returns the estimated bias in the
/// stage's blip coefficients, or `None` to leave them as fitted.
pub trait BiasCorrection {
    fn bias(&mut self, ctx: &StageContext<'_>) -> Result<Option<Vec<f64>>>;
}

impl BiasCorrection for () {
    fn bias(&mut self, _: &StageContext<'_>) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

/// `[H_beta, a H_psi]`.
pub fn blip_design(h_beta: &DMatrix<f64>, h_psi: &DMatrix<f64>, a: &[f64]) -> Result<DesignMatrix> {
    let n = h_beta.nrows();
    if h_psi.nrows() != n || a.len() != n {
        return Err(Error::DimensionMismatch("stage design blocks differ in rows".into()));
    }
    let pb = h_beta.ncols();
    let m = DMatrix::from_fn(n, pb + h_psi.ncols(), |i, j| {
        if j < pb {
            h_beta[(i, j)]
        } else {
            a[i] * h_psi[(i, j - pb)]
        }
    });
    DesignMatrix::new(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwolsFit {
    pub stages: Vec<StageFit>,
}

impl DwolsFit {
    /// Regime indexed by the (adjusted, when corrected) blip coefficients.
    pub fn regime(&self) -> Regime {
        Regime {
            psi: self.stages.iter().map(StageFit::psi_adjusted).collect(),
        }
    }
}

fn fit_stage(
    k: usize,
    sd: &StageDesign,
    response: &[f64],
    scheme: WeightScheme,
    tol: &Tolerances,
    correction: &mut dyn BiasCorrection,
) -> Result<StageFit> {
    let prop = DesignMatrix::new(sd.propensity.clone())?;
    let pfit = linmodel::logistic_fit_with(&prop, &sd.a, tol)?;
    let pi = linmodel::predict_proba(&prop, &pfit.coefficients);
    let weights = linmodel::balance_weights(&pi, &sd.a, scheme)?;
    let design = blip_design(&sd.h_beta, &sd.h_psi, &sd.a)?;
    let theta = linmodel::wls_with(&design, response, &weights, tol)?.coefficients;
    let n_beta = sd.h_beta.ncols();
    let bias = correction.bias(&StageContext {
        k,
        design: &design,
        n_beta,
        weights: &weights,
    })?;
    Ok(StageFit {
        stage: k + 1,
        psi: theta[n_beta..].to_vec(),
        beta: theta[..n_beta].to_vec(),
        xi: pfit.coefficients,
        weights,
        propensity_converged: pfit.converged,
        ridge_used: pfit.ridge_used,
        bias,
    })
}

/// Backward dWOLS on prepared designs. Pseudo-outcomes use the adjusted
/// coefficients of later stages, so with a correction this is the
/// bias-adjusted recursion and without one it is plain dWOLS.
pub fn fit_prepared(
    prep: &PreparedPanel,
    scheme: WeightScheme,
    tol: &Tolerances,
    correction: &mut dyn BiasCorrection,
) -> Result<DwolsFit> {
    let big_k = prep.n_stages();
    let mut fits: Vec<StageFit> = Vec::with_capacity(big_k);
    for k in (0..big_k).rev() {
        let later: Vec<Vec<f64>> = fits.iter().rev().map(StageFit::psi_adjusted).collect();
        let response = pseudo_outcome_prepared(prep, k, &later).map_err(|e| e.at_stage(k + 1))?;
        let fit = fit_stage(k, &prep.stages[k], &response, scheme, tol, correction)
            .map_err(|e| e.at_stage(k + 1))?;
        fits.push(fit);
    }
    fits.reverse();
    Ok(DwolsFit { stages: fits })
}

pub fn fit(panel: &Panel, spec: &StageModelSpec, scheme: WeightScheme) -> Result<DwolsFit> {
    let prep = PreparedPanel::new(panel, spec)?;
    fit_prepared(&prep, scheme, &Tolerances::default(), &mut ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{terms, StageLayout};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn one_stage_layout() -> PanelLayout {
        PanelLayout::new(vec![StageLayout {
            covariates: vec!["x1".into(), "x2".into()],
            treatment: "a1".into(),
        }])
    }

    fn one_stage_spec() -> StageModelSpec {
        StageModelSpec {
            stages: vec![StageTerms {
                blip: terms(&["x1", "x2"]).unwrap(),
                treatment_free: terms(&["x1", "x2"]).unwrap(),
                propensity: terms(&["x1", "x2"]).unwrap(),
            }],
        }
    }

    #[test]
    fn blip_examples() {
        let psi = [-1.0, 0.5, 0.5];
        assert_eq!(blip(&[1.0, 3.0, -2.0], 0.0, &psi).unwrap(), 0.0);
        assert_eq!(blip(&[1.0, 1.0, 1.0], 1.0, &psi).unwrap(), 0.0);
        assert_eq!(blip(&[1.0, 2.0, 0.0], 1.0, &psi).unwrap(), 0.0);
        assert!(matches!(blip(&[1.0], 1.0, &psi), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn recommend_examples_and_tie_rule() {
        let r = Regime { psi: vec![vec![1.0]] };
        assert_eq!(r.recommend(0, &[0.3]).unwrap(), 1);
        assert_eq!(r.recommend(0, &[-0.3]).unwrap(), 0);
        assert_eq!(r.recommend(0, &[0.0]).unwrap(), 0);
        assert!(r.recommend(1, &[0.0]).is_err());
    }

    #[test]
    fn recommend_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let psi: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let h: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let c = rng.random::<f64>() * 10.0 + 1e-3;
            let r1 = Regime { psi: vec![psi.clone()] };
            let r2 = Regime { psi: vec![psi.iter().map(|p| p * c).collect()] };
            assert_eq!(r1.recommend(0, &h).unwrap(), r2.recommend(0, &h).unwrap());
        }
    }

    fn two_stage_toy() -> (Panel, StageModelSpec) {
        let layout = PanelLayout::new(vec![
            StageLayout { covariates: vec!["x1".into()], treatment: "a1".into() },
            StageLayout { covariates: vec!["x2".into()], treatment: "a2".into() },
        ]);
        let panel = Panel::from_columns(
            layout,
            vec![
                ("x1".into(), vec![0.5, -1.0]),
                ("a1".into(), vec![1.0, 0.0]),
                ("x2".into(), vec![2.0, 0.1]),
                ("a2".into(), vec![0.0, 1.0]),
            ],
            vec![3.0, 7.0],
        )
        .unwrap();
        let spec = StageModelSpec {
            stages: vec![
                StageTerms { blip: vec![], treatment_free: terms(&["x1"]).unwrap(), propensity: vec![] },
                StageTerms { blip: vec![], treatment_free: terms(&["x2"]).unwrap(), propensity: vec![] },
            ],
        };
        (panel, spec)
    }

    #[test]
    fn pseudo_outcome_examples() {
        let (panel, spec) = two_stage_toy();
        // last stage: unchanged outcome
        assert_eq!(pseudo_outcome(&panel, &spec, 1, &[]).unwrap(), vec![3.0, 7.0]);
        // psi_2 = (1): optimal is treat; patient 1 untreated gains 1, patient 2 already optimal
        assert_eq!(pseudo_outcome(&panel, &spec, 0, &[vec![1.0]]).unwrap(), vec![4.0, 7.0]);
        // psi_2 = (-2): optimal is no treatment; patient 2 treated gains 2
        assert_eq!(pseudo_outcome(&panel, &spec, 0, &[vec![-2.0]]).unwrap(), vec![3.0, 9.0]);
        assert!(pseudo_outcome(&panel, &spec, 0, &[]).is_err());
    }

    #[test]
    fn spec_validation() {
        let layout = one_stage_layout();
        let mut spec = one_stage_spec();
        spec.validate(&layout).unwrap();
        spec.stages[0].treatment_free = terms(&["x1"]).unwrap();
        assert!(spec.validate(&layout).is_err());
        let mut spec = one_stage_spec();
        spec.stages[0].propensity = terms(&["a1"]).unwrap();
        assert!(spec.validate(&layout).is_err(), "current treatment is not history");
    }

    fn simulate_one_stage(n: usize, seed: u64, randomized: bool) -> Panel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        let mut a = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let u: f64 = rng.sample(StandardNormal);
            let v1: f64 = u + rng.sample::<f64, _>(StandardNormal);
            let v2: f64 = -u + rng.sample::<f64, _>(StandardNormal);
            let p = if randomized { 0.5 } else { linmodel::expit(v1 + v2) };
            let ai = f64::from(rng.random::<f64>() < p);
            let yi = 1.0 + v1 + v2 + (v1 * v1) + ai * (-1.0 + 0.5 * v1 + 0.5 * v2)
                + rng.sample::<f64, _>(StandardNormal);
            x1.push(v1);
            x2.push(v2);
            a.push(ai);
            y.push(yi);
        }
        Panel::from_columns(one_stage_layout(), vec![("x1".into(), x1), ("x2".into(), x2), ("a1".into(), a)], y)
            .unwrap()
    }

    #[test]
    fn single_stage_constant_weights_is_ols() {
        // exactly half treated and an intercept-only propensity give pi = 0.5 everywhere
        let mut panel = simulate_one_stage(400, 1, true);
        let a: Vec<f64> = (0..400).map(|i| f64::from(i % 2 == 0)).collect();
        let cols = vec![
            ("x1".to_string(), panel.column("x1").unwrap().to_vec()),
            ("x2".to_string(), panel.column("x2").unwrap().to_vec()),
            ("a1".to_string(), a),
        ];
        panel = Panel::from_columns(one_stage_layout(), cols, panel.outcome().to_vec()).unwrap();
        let mut spec = one_stage_spec();
        spec.stages[0].propensity.clear();
        let fit = fit(&panel, &spec, WeightScheme::Overlap).unwrap();
        assert!(fit.stages[0].weights.iter().all(|&w| (w - 0.5).abs() < 1e-9));

        let prep = PreparedPanel::new(&panel, &spec).unwrap();
        let sd = prep.stage(0);
        let design = blip_design(&sd.h_beta, &sd.h_psi, &sd.a).unwrap();
        let ols = linmodel::wls(&design, panel.outcome(), &[1.0; 400]).unwrap().coefficients;
        for j in 0..3 {
            assert_abs_diff_eq!(fit.stages[0].psi[j], ols[3 + j], epsilon = 1e-9);
        }
    }

    #[test]
    fn fit_is_row_permutation_invariant() {
        let panel = simulate_one_stage(300, 2, false);
        let spec = one_stage_spec();
        let f1 = fit(&panel, &spec, WeightScheme::Iptw).unwrap();
        let rows: Vec<usize> = (0..300).rev().collect();
        let f2 = fit(&panel.select(&rows), &spec, WeightScheme::Iptw).unwrap();
        for (a, b) in f1.stages[0].psi.iter().zip(&f2.stages[0].psi) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_class_reports_stage() {
        let panel = simulate_one_stage(50, 4, true);
        let rows: Vec<usize> = (0..50).filter(|&i| panel.treatment(0)[i] == 1.0).collect();
        let err = fit(&panel.select(&rows), &one_stage_spec(), WeightScheme::Overlap).unwrap_err();
        match err {
            Error::Stage { stage, source } => {
                assert_eq!(stage, 1);
                assert!(matches!(*source, Error::SingleClass));
            }
            other => panic!("{other:?}"),
        }
    }
}
