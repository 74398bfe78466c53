//! One- and two-stage data-generating processes with a latent normal confounder.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::confound::{ConfounderModel, Link};
use crate::dwols::{StageModelSpec, StageTerms};
use crate::error::{Error, Result};
use crate::linmodel::expit;
use crate::panel::{terms, Panel, PanelLayout, StageLayout};
use crate::rng::{self, StreamRng};

/// `U ~ N(0, var_u)`, `X_j = phi_j0 + phi_j1 U + e_j`, logistic treatment in
/// `(1, x1, x2, u)`, and a linear outcome with blip `psi' (1, x1, x2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneStageDgp {
    pub phi1: [f64; 2],
    pub phi2: [f64; 2],
    pub alpha: [f64; 4],
    pub beta: [f64; 3],
    pub beta_u: f64,
    pub psi: [f64; 3],
    pub var_u: f64,
    pub var_x1: f64,
    pub var_x2: f64,
    pub var_y: f64,
}

impl Default for OneStageDgp {
    fn default() -> Self {
        Self {
            phi1: [0.0, 1.0],
            phi2: [0.0, -1.0],
            alpha: [0.0, 1.0, 1.0, 2.0],
            beta: [1.0, 1.0, 1.0],
            beta_u: 2.0,
            psi: [-1.0, 0.5, 0.5],
            var_u: 1.0,
            var_x1: 1.0,
            var_x2: 1.0,
            var_y: 1.0,
        }
    }
}

/// Two stages sharing one latent confounder. `X_2` depends on the baseline
/// covariates only; stage-2 treatment also depends on `a1` and `x2`.
///
/// `beta2` holds the treatment-free outcome coefficients on
/// `(1, x11, x12, a1, a1 x11, a1 x12, x2)`; `psi2` the stage-2 blip on
/// `(1, x11, x12, x2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageDgp {
    pub phi1: [f64; 2],
    pub phi2: [f64; 2],
    pub varpi: [f64; 3],
    pub alpha1: [f64; 4],
    pub alpha2: [f64; 6],
    pub beta2: [f64; 7],
    pub beta_u: f64,
    pub psi2: [f64; 4],
    pub var_u: f64,
    pub var_x11: f64,
    pub var_x12: f64,
    pub var_x2: f64,
    pub var_y: f64,
}

impl Default for TwoStageDgp {
    fn default() -> Self {
        Self {
            phi1: [0.0, 1.0],
            phi2: [0.0, -1.0],
            varpi: [0.0, 1.0, 1.0],
            alpha1: [0.0, 1.0, 1.0, 2.0],
            alpha2: [0.0, 1.0, 1.0, 1.0, 1.0, 3.0],
            beta2: [1.0, -1.0, 1.0, -1.0, 1.0, 1.0, 1.0],
            beta_u: 2.0,
            psi2: [-1.0, 0.5, 0.5, 0.5],
            var_u: 1.0,
            var_x11: 1.0,
            var_x12: 1.0,
            var_x2: 1.0,
            var_y: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dgp {
    OneStage(OneStageDgp),
    TwoStage(TwoStageDgp),
}

/// A generated panel and the latent confounder, which is never a panel column.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub panel: Panel,
    pub u: Vec<f64>,
}

/// How stage-1 treatment is assigned when generating data.
#[derive(Clone, Copy)]
pub enum Assignment<'a> {
    /// The DGP's own treatment model (observational data).
    Observed,
    /// A deterministic rule applied to the baseline covariates.
    Rule(&'a dyn Fn(&[f64]) -> u8),
}

fn normal(r: &mut StreamRng, var: f64) -> f64 {
    let z: f64 = r.sample(StandardNormal);
    z * var.sqrt()
}

fn bernoulli(r: &mut StreamRng, p: f64) -> f64 {
    if r.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

fn check_variances(vars: &[(&str, f64)]) -> Result<()> {
    for (name, v) in vars {
        if !(*v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidSpec(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(())
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidSpec("sample size must be at least 1".into()));
    }
    Ok(())
}

fn stage(covariates: &[&str], treatment: &str) -> StageLayout {
    StageLayout {
        covariates: covariates.iter().map(|s| s.to_string()).collect(),
        treatment: treatment.into(),
    }
}

fn stage_terms(blip: &[&str], treatment_free: &[&str], propensity: &[&str]) -> StageTerms {
    StageTerms {
        blip: terms(blip).expect("static terms"),
        treatment_free: terms(treatment_free).expect("static terms"),
        propensity: terms(propensity).expect("static terms"),
    }
}

impl OneStageDgp {
    pub fn validate(&self) -> Result<()> {
        check_variances(&[
            ("var_u", self.var_u),
            ("var_x1", self.var_x1),
            ("var_x2", self.var_x2),
            ("var_y", self.var_y),
        ])
    }

    pub fn layout() -> PanelLayout {
        PanelLayout::new(vec![stage(&["x1", "x2"], "a1")])
    }

    pub fn blip(&self, x1: f64, x2: f64) -> f64 {
        self.psi[0] + self.psi[1] * x1 + self.psi[2] * x2
    }

    pub fn generate_with(&self, n: usize, r: &mut StreamRng, assign: Assignment) -> Result<Simulated> {
        self.validate()?;
        check_n(n)?;
        let mut cols: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(n)).collect();
        let mut y = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(n);
        for _ in 0..n {
            let ui = normal(r, self.var_u);
            let x1 = self.phi1[0] + self.phi1[1] * ui + normal(r, self.var_x1);
            let x2 = self.phi2[0] + self.phi2[1] * ui + normal(r, self.var_x2);
            let p = expit(self.alpha[0] + self.alpha[1] * x1 + self.alpha[2] * x2 + self.alpha[3] * ui);
            let drawn = bernoulli(r, p);
            let a = match assign {
                Assignment::Observed => drawn,
                Assignment::Rule(f) => f64::from(f(&[x1, x2])),
            };
            let eps = normal(r, self.var_y);
            let yi = self.beta[0] + self.beta[1] * x1 + self.beta[2] * x2 + self.beta_u * ui + a * self.blip(x1, x2) + eps;
            cols[0].push(x1);
            cols[1].push(x2);
            cols[2].push(a);
            y.push(yi);
            u.push(ui);
        }
        let names = ["x1", "x2", "a1"];
        let columns = names.iter().map(|s| s.to_string()).zip(cols).collect();
        Ok(Simulated {
            panel: Panel::from_columns(Self::layout(), columns, y)?,
            u,
        })
    }

    /// Analysis model with the DGP's blip terms and main-effect nuisance models.
    pub fn model_spec() -> StageModelSpec {
        let main = ["x1", "x2"];
        StageModelSpec {
            stages: vec![stage_terms(&main, &main, &main)],
        }
    }

    /// Linear confounder mean model in the covariates and treatment.
    pub fn confounder_model() -> ConfounderModel {
        ConfounderModel {
            terms: terms(&["x1", "x2", "a1"]).expect("static terms"),
            link: Link::Identity,
        }
    }
}

impl TwoStageDgp {
    pub fn validate(&self) -> Result<()> {
        check_variances(&[
            ("var_u", self.var_u),
            ("var_x11", self.var_x11),
            ("var_x12", self.var_x12),
            ("var_x2", self.var_x2),
            ("var_y", self.var_y),
        ])
    }

    pub fn layout() -> PanelLayout {
        PanelLayout::new(vec![stage(&["x11", "x12"], "a1"), stage(&["x2"], "a2")])
    }

    pub fn blip2(&self, x11: f64, x12: f64, x2: f64) -> f64 {
        self.psi2[0] + self.psi2[1] * x11 + self.psi2[2] * x12 + self.psi2[3] * x2
    }

    /// Outcome without the stage-2 blip.
    pub fn treatment_free(&self, x11: f64, x12: f64, a1: f64, x2: f64, u: f64) -> f64 {
        let b = &self.beta2;
        b[0] + b[1] * x11 + b[2] * x12 + a1 * (b[3] + b[4] * x11 + b[5] * x12) + b[6] * x2 + self.beta_u * u
    }

    pub fn x2_mean(&self, x11: f64, x12: f64) -> f64 {
        self.varpi[0] + self.varpi[1] * x11 + self.varpi[2] * x12
    }

    pub fn generate_with(&self, n: usize, r: &mut StreamRng, assign: Assignment) -> Result<Simulated> {
        self.validate()?;
        check_n(n)?;
        let mut cols: Vec<Vec<f64>> = (0..5).map(|_| Vec::with_capacity(n)).collect();
        let mut y = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(n);
        let (a1c, a2c) = (&self.alpha1, &self.alpha2);
        for _ in 0..n {
            let ui = normal(r, self.var_u);
            let x11 = self.phi1[0] + self.phi1[1] * ui + normal(r, self.var_x11);
            let x12 = self.phi2[0] + self.phi2[1] * ui + normal(r, self.var_x12);
            let p1 = expit(a1c[0] + a1c[1] * x11 + a1c[2] * x12 + a1c[3] * ui);
            let drawn = bernoulli(r, p1);
            let a1 = match assign {
                Assignment::Observed => drawn,
                Assignment::Rule(f) => f64::from(f(&[x11, x12])),
            };
            let x2 = self.x2_mean(x11, x12) + normal(r, self.var_x2);
            let p2 = expit(a2c[0] + a2c[1] * x11 + a2c[2] * x12 + a2c[3] * a1 + a2c[4] * x2 + a2c[5] * ui);
            let a2 = bernoulli(r, p2);
            let eps = normal(r, self.var_y);
            let yi = self.treatment_free(x11, x12, a1, x2, ui) + a2 * self.blip2(x11, x12, x2) + eps;
            for (c, v) in cols.iter_mut().zip([x11, x12, a1, x2, a2]) {
                c.push(v);
            }
            y.push(yi);
            u.push(ui);
        }
        let names = ["x11", "x12", "a1", "x2", "a2"];
        let columns = names.iter().map(|s| s.to_string()).zip(cols).collect();
        Ok(Simulated {
            panel: Panel::from_columns(Self::layout(), columns, y)?,
            u,
        })
    }

    /// Stage 2 uses the DGP's outcome terms; stage 1 uses main effects.
    pub fn model_spec() -> StageModelSpec {
        let s1 = ["x11", "x12"];
        StageModelSpec {
            stages: vec![
                stage_terms(&s1, &s1, &s1),
                stage_terms(
                    &["x11", "x12", "x2"],
                    &["x11", "x12", "a1", "a1:x11", "a1:x12", "x2"],
                    &["x11", "x12", "a1", "x2"],
                ),
            ],
        }
    }

    pub fn confounder_model() -> ConfounderModel {
        ConfounderModel {
            terms: terms(&["x11", "x12", "a1", "x2", "a2"]).expect("static terms"),
            link: Link::Identity,
        }
    }
}

impl Dgp {
    pub fn n_stages(&self) -> usize {
        match self {
            Dgp::OneStage(_) => 1,
            Dgp::TwoStage(_) => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Dgp::OneStage(d) => d.validate(),
            Dgp::TwoStage(d) => d.validate(),
        }
    }

    pub fn layout(&self) -> PanelLayout {
        match self {
            Dgp::OneStage(_) => OneStageDgp::layout(),
            Dgp::TwoStage(_) => TwoStageDgp::layout(),
        }
    }

    pub fn model_spec(&self) -> StageModelSpec {
        match self {
            Dgp::OneStage(_) => OneStageDgp::model_spec(),
            Dgp::TwoStage(_) => TwoStageDgp::model_spec(),
        }
    }

    pub fn confounder_model(&self) -> ConfounderModel {
        match self {
            Dgp::OneStage(_) => OneStageDgp::confounder_model(),
            Dgp::TwoStage(_) => TwoStageDgp::confounder_model(),
        }
    }

    pub fn beta_u(&self) -> f64 {
        match self {
            Dgp::OneStage(d) => d.beta_u,
            Dgp::TwoStage(d) => d.beta_u,
        }
    }

    pub fn generate_with(&self, n: usize, r: &mut StreamRng, assign: Assignment) -> Result<Simulated> {
        match self {
            Dgp::OneStage(d) => d.generate_with(n, r, assign),
            Dgp::TwoStage(d) => d.generate_with(n, r, assign),
        }
    }

    /// Observational sample drawn from the stream `(seed, [DATA])`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Simulated> {
        let mut r = rng::stream(seed, &[rng::tag::DATA]);
        self.generate_with(n, &mut r, Assignment::Observed)
    }

    /// Stable within a process; used as a cache key.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_string(self).expect("dgp serializes");
        let mut h = DefaultHasher::new();
        json.hash(&mut h);
        h.finish()
    }
}

impl Default for Dgp {
    fn default() -> Self {
        Dgp::OneStage(OneStageDgp::default())
    }
}
