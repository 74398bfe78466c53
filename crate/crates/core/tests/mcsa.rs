use approx::assert_relative_eq;
use mcsa_dtr::confound::PriorSpec;
use mcsa_dtr::dwols;
use mcsa_dtr::mcsa::{self, McsaConfig};
use mcsa_dtr::simlab::{Dgp, OneStageDgp, TwoStageDgp};
use mcsa_dtr::{NormalPrior, WeightScheme};
use nalgebra::{DMatrix, DVector};

fn config(dgp: &Dgp, prior: PriorSpec, b: usize, seed: u64) -> McsaConfig {
    McsaConfig {
        b,
        seed,
        scheme: WeightScheme::Overlap,
        prior,
        confounder: dgp.confounder_model(),
        tolerances: Default::default(),
    }
}

fn vague_prior(n_zeta: usize) -> PriorSpec {
    PriorSpec {
        zeta: (0..n_zeta).map(|j| NormalPrior::new(0.2 * j as f64 - 0.3, 0.1)).collect(),
        beta_u: NormalPrior::new(1.5, 0.1),
    }
}

#[test]
fn zero_effect_prior_reproduces_bootstrap_dwols() {
    for dgp in [Dgp::OneStage(OneStageDgp::default()), Dgp::TwoStage(TwoStageDgp::default())] {
        let sim = dgp.generate(300, 5).unwrap();
        let n_zeta = dgp.confounder_model().n_params();
        let prior = PriorSpec::degenerate(&vec![0.4; n_zeta], 0.0);
        let fit = mcsa::run(&sim.panel, &dgp.model_spec(), &config(&dgp, prior, 12, 9)).unwrap();
        assert_eq!(fit.b(), 12);
        for (b, rows) in fit.indices.iter().enumerate() {
            let plain = dwols::fit(&sim.panel.select(rows), &dgp.model_spec(), WeightScheme::Overlap).unwrap();
            for (k, stage) in plain.stages.iter().enumerate() {
                assert_eq!(fit.adjusted[k][b], stage.psi, "stage {k} rep {b}");
            }
        }
    }
}

#[test]
fn adjusted_equals_fitted_minus_projected_bias() {
    let dgp = Dgp::OneStage(OneStageDgp::default());
    let sim = dgp.generate(400, 21).unwrap();
    let model = dgp.confounder_model();
    let cfg = config(&dgp, vague_prior(model.n_params()), 6, 3);
    let fit = mcsa::run(&sim.panel, &dgp.model_spec(), &cfg).unwrap();

    for b in 0..fit.b() {
        let rows = &fit.indices[b];
        let sub = sim.panel.select(rows);
        let plain = dwols::fit(&sub, &dgp.model_spec(), WeightScheme::Overlap).unwrap();
        let w = &plain.stages[0].weights;
        let x1 = sub.column("x1").unwrap();
        let x2 = sub.column("x2").unwrap();
        let a = sub.column("a1").unwrap();
        let n = rows.len();
        let design = DMatrix::from_fn(n, 6, |i, j| match j {
            0 => 1.0,
            1 => x1[i],
            2 => x2[i],
            3 => a[i],
            4 => a[i] * x1[i],
            _ => a[i] * x2[i],
        });
        let z = &fit.draws[b].zeta;
        let u_hat = DVector::from_fn(n, |i, _| z[0] + z[1] * x1[i] + z[2] * x2[i] + z[3] * a[i]);
        let wd = DMatrix::from_fn(n, 6, |i, j| w[i] * design[(i, j)]);
        let coef = (design.transpose() * &wd).lu().solve(&(wd.transpose() * u_hat)).unwrap();

        assert_eq!(fit.fitted[0][b], plain.stages[0].psi);
        for j in 0..3 {
            let expected = plain.stages[0].psi[j] - fit.draws[b].beta_u * coef[3 + j];
            assert_relative_eq!(fit.adjusted[0][b][j], expected, epsilon = 1e-9, max_relative = 1e-9);
        }
    }
}

#[test]
fn mean_is_average_of_repetitions() {
    let dgp = Dgp::TwoStage(TwoStageDgp::default());
    let sim = dgp.generate(300, 2).unwrap();
    let cfg = config(&dgp, vague_prior(dgp.confounder_model().n_params()), 10, 77);
    let fit = mcsa::run(&sim.panel, &dgp.model_spec(), &cfg).unwrap();
    for k in 0..2 {
        for j in 0..fit.mean[k].len() {
            let avg = fit.adjusted[k].iter().map(|r| r[j]).sum::<f64>() / 10.0;
            assert_relative_eq!(fit.mean[k][j], avg, epsilon = 1e-12);
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dgp = Dgp::TwoStage(TwoStageDgp::default());
    let sim = dgp.generate(250, 8).unwrap();
    let cfg = config(&dgp, vague_prior(dgp.confounder_model().n_params()), 16, 4);
    let run_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| mcsa::run(&sim.panel, &dgp.model_spec(), &cfg).unwrap())
    };
    let one = run_with(1);
    let three = run_with(3);
    assert_eq!(one, three);

    let other = mcsa::run(&sim.panel, &dgp.model_spec(), &McsaConfig { seed: 5, ..cfg.clone() }).unwrap();
    assert_ne!(one.mean, other.mean);
}

#[test]
fn rejects_prior_of_wrong_length() {
    let dgp = Dgp::OneStage(OneStageDgp::default());
    let sim = dgp.generate(100, 1).unwrap();
    let cfg = config(&dgp, vague_prior(2), 5, 1);
    let err = mcsa::run(&sim.panel, &dgp.model_spec(), &cfg).unwrap_err();
    assert_eq!(err.kind(), mcsa_dtr::ErrorKind::Config);
}
