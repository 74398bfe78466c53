use approx::assert_abs_diff_eq;
use mcsa_dtr::dwols;
use mcsa_dtr::mnboot::Interval;
use mcsa_dtr::panel::Table;
use mcsa_dtr::simlab::plasmode::{self, synthetic_covariates, PlasmodeStudyConfig};
use mcsa_dtr::simlab::study::{self, RepFailure, RepRecord};
use mcsa_dtr::simlab::truth::{self, stage1_contrast_regression};
use mcsa_dtr::simlab::{Dgp, OneStageDgp, Rollout, Scenario, StudyConfig, TwoStageDgp};
use mcsa_dtr::{ErrorKind, Regime, WeightScheme};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

#[test]
fn one_stage_moments() {
    let dgp = OneStageDgp::default();
    let sim = Dgp::OneStage(dgp.clone()).generate(200_000, 3).unwrap();
    let x1 = sim.panel.column("x1").unwrap();
    let x2 = sim.panel.column("x2").unwrap();
    let a = sim.panel.column("a1").unwrap();
    // x1 = u + e1, x2 = -u + e2 with unit variances
    assert_abs_diff_eq!(mean(x1), 0.0, epsilon = 0.02);
    assert_abs_diff_eq!(cov(x1, x1), 2.0, epsilon = 0.04);
    assert_abs_diff_eq!(cov(x1, x2), -1.0, epsilon = 0.03);
    assert_abs_diff_eq!(cov(x1, &sim.u), 1.0, epsilon = 0.02);
    assert_abs_diff_eq!(cov(x2, &sim.u), -1.0, epsilon = 0.02);
    // the linear predictor x1 + x2 + 2u is symmetric about zero
    assert_abs_diff_eq!(mean(a), 0.5, epsilon = 0.01);
    // treated patients have larger u
    let treated: Vec<f64> = sim.u.iter().zip(a).filter(|(_, &ai)| ai == 1.0).map(|(u, _)| *u).collect();
    assert!(mean(&treated) > 0.3);
}

#[test]
fn one_stage_outcome_residual_is_noise() {
    let dgp = OneStageDgp::default();
    let sim = Dgp::OneStage(dgp.clone()).generate(50_000, 4).unwrap();
    let x1 = sim.panel.column("x1").unwrap();
    let x2 = sim.panel.column("x2").unwrap();
    let a = sim.panel.column("a1").unwrap();
    let resid: Vec<f64> = (0..x1.len())
        .map(|i| {
            sim.panel.outcome()[i] - (1.0 + x1[i] + x2[i] + 2.0 * sim.u[i] + a[i] * (-1.0 + 0.5 * x1[i] + 0.5 * x2[i]))
        })
        .collect();
    assert_abs_diff_eq!(mean(&resid), 0.0, epsilon = 0.03);
    assert_abs_diff_eq!(cov(&resid, &resid), 1.0, epsilon = 0.03);
    assert_abs_diff_eq!(cov(&resid, &sim.u), 0.0, epsilon = 0.03);
}

#[test]
fn pseudo_true_zeta_under_randomized_treatment() {
    // With no treatment dependence on u, U | x1, x2 is normal with slopes
    // Sigma^{-1} c = (1/3, -1/3) and no treatment effect.
    let dgp = Dgp::OneStage(OneStageDgp {
        alpha: [0.0; 4],
        ..OneStageDgp::default()
    });
    let zeta = truth::pseudo_true_zeta(&dgp, 400_000, 6).unwrap();
    let expected = [0.0, 1.0 / 3.0, -1.0 / 3.0, 0.0];
    for (z, e) in zeta.iter().zip(expected) {
        assert_abs_diff_eq!(*z, e, epsilon = 0.01);
    }
}

#[test]
fn pseudo_true_zeta_picks_up_treatment_under_confounding() {
    let zeta = truth::pseudo_true_zeta(&Dgp::OneStage(OneStageDgp::default()), 200_000, 7).unwrap();
    assert!(zeta[3] > 0.2, "{zeta:?}");
}

#[test]
fn two_stage_stage1_truth_matches_closed_form() {
    // The stage-2 gain does not depend on a1, so the stage-1 contrast is the
    // a1 part of the treatment-free model.
    let dgp = TwoStageDgp::default();
    let (coef, se) = stage1_contrast_regression(&dgp, 100_000, 1).unwrap();
    let expected = [dgp.beta2[3], dgp.beta2[4], dgp.beta2[5]];
    for j in 0..3 {
        assert_abs_diff_eq!(coef[j], expected[j], epsilon = 1e-9 + 4.0 * se[j]);
    }
}

#[test]
fn stage1_truth_tracks_treatment_free_interactions() {
    // The contrast is exactly linear in (x11, x12), so the regression is exact.
    let dgp = TwoStageDgp {
        beta2: [0.3, -1.0, 2.0, 0.5, -2.0, 0.3, 1.5],
        psi2: [0.2, -0.5, 1.0, -0.7],
        ..TwoStageDgp::default()
    };
    let (coef, _) = stage1_contrast_regression(&dgp, 20_000, 2).unwrap();
    for (c, e) in coef.iter().zip([0.5, -2.0, 0.3]) {
        assert_abs_diff_eq!(*c, e, epsilon = 1e-8);
    }
}

#[test]
fn one_stage_truth_is_the_blip() {
    let t = truth::true_regime(&Dgp::OneStage(OneStageDgp::default())).unwrap();
    assert_eq!(t.regime.psi, vec![vec![-1.0, 0.5, 0.5]]);
}

#[test]
fn proportion_optimal_of_truth_is_one() {
    for dgp in [Dgp::OneStage(OneStageDgp::default()), Dgp::TwoStage(TwoStageDgp::default())] {
        let truth = Regime {
            psi: match &dgp {
                Dgp::OneStage(d) => vec![d.psi.to_vec()],
                Dgp::TwoStage(d) => vec![vec![-1.0, 1.0, 1.0], d.psi2.to_vec()],
            },
        };
        for rollout in [Rollout::Truth, Rollout::Observed] {
            let p = truth::proportion_optimal(&truth, &truth, &dgp, 2_000, 3, rollout).unwrap();
            assert!(p.iter().all(|&v| v == 1.0), "{p:?}");
        }
        let flipped = Regime {
            psi: truth.psi.iter().map(|s| s.iter().map(|v| -v).collect()).collect(),
        };
        let p = truth::proportion_optimal(&flipped, &truth, &dgp, 2_000, 3, Rollout::Truth).unwrap();
        assert!(p.iter().all(|&v| v < 0.01), "{p:?}");
    }
}

#[test]
fn scenario_priors() {
    let zeta = [0.0, 0.3, -0.3, 0.5];
    let nc = Scenario::NarrowCentered.prior(&zeta, 2.0);
    assert_eq!(nc.beta_u.mean, 2.0);
    assert_eq!(nc.beta_u.variance, 0.1);
    let wo = Scenario::WideOffCenter.prior(&zeta, 2.0);
    assert_abs_diff_eq!(wo.beta_u.mean, 2.1, epsilon = 1e-12);
    assert_eq!(wo.zeta[1].variance, 0.5);
    assert_abs_diff_eq!(wo.zeta[2].mean, -0.2, epsilon = 1e-12);
    assert!(Scenario::Unadjusted.prior(&zeta, 2.0).is_zero_effect());
    for s in Scenario::ALL {
        assert_eq!(s.id().parse::<Scenario>().unwrap(), s);
    }
}

fn record(arm: &str, est: f64, lo: f64, hi: f64) -> RepRecord {
    RepRecord {
        rep: 0,
        arm: arm.into(),
        estimate: vec![vec![est]],
        intervals: Some(vec![vec![Interval { lower: lo, upper: hi }]]),
        p_hat: None,
        m: None,
        proportion_optimal: vec![0.5],
    }
}

#[test]
fn aggregate_metrics_by_hand() {
    let recs = vec![record("A", 1.0, 0.0, 2.0), record("A", 3.0, 2.5, 3.5), record("A", 2.0, 1.0, 4.0)];
    let m = study::aggregate(&["A".into()], &recs, &[], 3, &[vec![2.0]]).unwrap();
    let c = m[0].coef(1, 0).unwrap();
    assert_abs_diff_eq!(c.mean, 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(c.bias, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(c.rmse, (2.0f64 / 3.0).sqrt(), epsilon = 1e-12);
    assert_abs_diff_eq!(c.coverage.unwrap(), 2.0 / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(c.width.unwrap(), 2.0, epsilon = 1e-12);
    assert_eq!(m[0].proportion_optimal, vec![0.5]);
}

#[test]
fn aggregate_aborts_on_failures() {
    let recs = vec![record("A", 1.0, 0.0, 2.0)];
    let fails: Vec<RepFailure> = (0..2)
        .map(|rep| RepFailure {
            rep,
            arm: "A".into(),
            message: "x".into(),
        })
        .collect();
    let err = study::aggregate(&["A".into()], &recs, &fails, 3, &[vec![2.0]]).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Numerical);
}

#[test]
fn small_study_runs_and_is_reproducible() {
    let mut cfg = StudyConfig::desk(Dgp::OneStage(OneStageDgp::default()), 11);
    cfg.reps = 4;
    cfg.n = 300;
    cfg.b = 40;
    cfg.n_eval = 500;
    cfg.zeta_n = 20_000;
    let a = study::run_study(&cfg).unwrap();
    let b = study::run_study(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.metrics.len(), 5);
    assert!(a.failures.is_empty());
    assert_eq!(a.records.len(), 20);
    assert!(a.metrics.iter().all(|m| m.completed == 4));
}

#[test]
fn plasmode_noiseless_recovery() {
    let table = synthetic_covariates(800, 2).unwrap();
    let mut model = plasmode::stand_in_model();
    model.noise_sd = 0.0;
    model.confounder.beta_u = 0.0;
    let set = model.generate_sets(&table, 1, 9).unwrap().remove(0);
    let fit = dwols::fit(&set.panel, &model.model_spec(), WeightScheme::Iptw).unwrap();
    for (e, t) in fit.stages[0].psi.iter().zip(&model.psi) {
        assert_abs_diff_eq!(*e, *t, epsilon = 1e-8);
    }
}

#[test]
fn plasmode_confounder_prevalence_matches_model() {
    let table = synthetic_covariates(20_000, 3).unwrap();
    let model = plasmode::stand_in_model();
    let base = model.base_panel(&table).unwrap();
    let p = mcsa_dtr::confound::impute(&base, &model.confounder).unwrap();
    let set = model.simulate(&base, 5, 0).unwrap();
    let sd = (mean(&p) * (1.0 - mean(&p)) / p.len() as f64).sqrt();
    assert_abs_diff_eq!(mean(&set.confounder), mean(&p), epsilon = 4.0 * sd);
    assert!(set.confounder.iter().all(|&u| u == 0.0 || u == 1.0));
    let again = model.simulate(&base, 5, 0).unwrap();
    assert_eq!(set, again);
}

#[test]
fn intercept_only_binary_confounder_has_target_prevalence() {
    let table = synthetic_covariates(100_000, 9).unwrap();
    let mut model = plasmode::stand_in_model();
    model.confounder.model.terms.clear();
    model.confounder.zeta = vec![(0.3f64 / 0.7).ln()];
    let base = model.base_panel(&table).unwrap();
    let set = model.simulate(&base, 2, 0).unwrap();
    let sd = (0.3f64 * 0.7 / 1e5).sqrt();
    assert_abs_diff_eq!(mean(&set.confounder), 0.3, epsilon = 4.0 * sd);
}

#[test]
fn plasmode_reports_missing_columns() {
    let table = Table::new(vec![("sex".into(), vec![0.0, 1.0]), ("a".into(), vec![1.0, 0.0])]).unwrap();
    let err = plasmode::stand_in_model().base_panel(&table).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    assert!(err.to_string().contains("phq"));
}

#[test]
fn small_plasmode_study() {
    let table = synthetic_covariates(600, 4).unwrap();
    let mut cfg = PlasmodeStudyConfig::desk(plasmode::stand_in_model(), 3);
    cfg.n_sets = 3;
    cfg.b = 40;
    let res = plasmode::run_plasmode_study(&table, &cfg).unwrap();
    assert_eq!(res.metrics.len(), 2);
    assert_eq!(res.records.len(), 6);
    assert_eq!(res.truth, cfg.model.psi);
}
