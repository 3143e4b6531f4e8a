use fedtop::cli::experiment::{federation_for, prepare_data, run_params, PreparedData};
use fedtop::cli::{DatasetSpec, ExperimentConfig};
use fedtop::data::{Scaling, SynthLabels};
use fedtop::fedsim::{aggregate, run, Engine, Federation, VariantKind};
use fedtop::numkit::DenseVector;
use fedtop::prox::Regularizer;
use proptest::prelude::*;

fn toy_config(kind: VariantKind, m: usize, s: usize, j: usize, i: usize) -> ExperimentConfig {
    ExperimentConfig {
        algorithm: kind,
        m,
        s,
        j,
        i,
        dataset: DatasetSpec::Synthetic {
            n: 8,
            d: 60 * (m + 1),
            density: 0.5,
            labels: SynthLabels::Bernoulli,
            holdout: 0.1,
        },
        scaling: Scaling::None,
        kappa: 0.01,
        ..ExperimentConfig::default()
    }
}

fn setup(cfg: &ExperimentConfig) -> (PreparedData, Federation) {
    let data = prepare_data(cfg, None).unwrap();
    let fed = federation_for(cfg, &data).unwrap();
    (data, fed)
}

#[test]
fn u_equals_rho_w_plus_lambda_after_every_step() {
    for kind in [
        VariantKind::FedTopAdmmI,
        VariantKind::FedTopAdmmII,
        VariantKind::FedAdmm,
    ] {
        let cfg = toy_config(kind, 6, 3, 4, 40);
        let (_, fed) = setup(&cfg);
        let mut engine = Engine::new(&fed, run_params(&cfg)).unwrap();
        for _ in 0..cfg.i {
            engine.step().unwrap();
            for c in engine.clients() {
                for k in 0..c.w.len() {
                    assert_eq!(c.u[k], c.rho * c.w[k] + c.lambda[k], "{}", kind.name());
                }
            }
        }
    }
}

#[test]
fn inactive_clients_are_frozen() {
    let cfg = toy_config(VariantKind::FedTopAdmmI, 8, 3, 5, 60);
    let (_, fed) = setup(&cfg);
    let mut engine = Engine::new(&fed, run_params(&cfg)).unwrap();
    for _ in 0..cfg.i {
        let before = engine.clients().to_vec();
        engine.step().unwrap();
        let active = engine.active().to_vec();
        for (m, (old, new)) in before.iter().zip(engine.clients()).enumerate() {
            if !active.contains(&m) {
                assert_eq!(old.w, new.w);
                assert_eq!(old.lambda, new.lambda);
                assert_eq!(old.u, new.u);
            }
        }
    }
}

#[test]
fn modified_fedadmm_aggregates_with_prox_of_sum() {
    let mut cfg = toy_config(VariantKind::FedAdmmModified, 5, 5, 1, 30);
    cfg.upsilon = 0.02;
    let (_, fed) = setup(&cfg);
    let mut engine = Engine::new(&fed, run_params(&cfg)).unwrap();
    assert_eq!(engine.regularizer(), Regularizer::L1(0.02));
    for _ in 0..cfg.i {
        engine.step().unwrap();
        let server = engine.server();
        let zero = DenseVector::zeros(server.w.len());
        let expected = aggregate(&server.v, &zero, server.nu, Regularizer::L1(0.02));
        assert_eq!(server.w, expected);
        let rho_sum: f64 = engine.clients().iter().map(|c| c.rho).sum();
        assert_eq!(server.nu, 1.0 / rho_sum);
    }
}

#[test]
fn schedules_never_increase() {
    let cfg = toy_config(VariantKind::FedTopAdmmI, 4, 4, 1, 100);
    let (_, fed) = setup(&cfg);
    let mut engine = Engine::new(&fed, run_params(&cfg)).unwrap();
    let (mut tau, mut zeta) = (engine.server().tau_i, engine.server().zeta_i);
    for _ in 0..cfg.i {
        engine.step().unwrap();
        assert!(engine.server().tau_i <= tau);
        assert!(engine.server().zeta_i <= zeta);
        tau = engine.server().tau_i;
        zeta = engine.server().zeta_i;
    }
}

#[test]
fn all_active_run_converges() {
    let mut cfg = toy_config(VariantKind::FedTopAdmmI, 5, 5, 1, 2000);
    cfg.penalty = fedtop::fedsim::PenaltyRule::MeanRho(0.5);
    let (_, fed) = setup(&cfg);
    let rows = run(&fed, &run_params(&cfg), 1).unwrap();
    let settled = rows
        .iter()
        .position(|r| r.iteration > 0 && r.primal_residual < 1e-4 && r.dual_residual < 1e-4);
    assert!(settled.is_some(), "last row: {:?}", rows.last());
}

#[test]
fn virtual_client_joins_every_selection() {
    let cfg = toy_config(VariantKind::FedAdmmVc, 6, 2, 3, 30);
    let (_, fed) = setup(&cfg);
    assert_eq!(fed.clients.len(), 7);
    let total: f64 = fed.clients.iter().map(|c| c.alpha * c.loss_scale).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let mut engine = Engine::new(&fed, run_params(&cfg)).unwrap();
    for _ in 0..cfg.i {
        engine.step().unwrap();
        assert!(engine.active().contains(&6));
        assert_eq!(engine.active().len(), 3);
    }
}

#[test]
fn zero_iterations_yield_no_rows() {
    let cfg = toy_config(VariantKind::FedTopAdmmI, 3, 3, 2, 0);
    let (_, fed) = setup(&cfg);
    assert!(run(&fed, &run_params(&cfg), 1).unwrap().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn one_row_per_round(j in 1usize..6, i in 1usize..40, seed in 0u64..1000) {
        let mut cfg = toy_config(VariantKind::FedTopAdmmII, 4, 2, j, i);
        cfg.seed = seed;
        let (_, fed) = setup(&cfg);
        let rows = run(&fed, &run_params(&cfg), 1).unwrap();
        let expected = (i - 1) / j + 1 + usize::from(i % j == 0);
        prop_assert_eq!(rows.len(), expected);
        prop_assert!(rows.windows(2).all(|w| w[0].round < w[1].round));
    }

    #[test]
    fn output_independent_of_workers(seed in 0u64..1000, kind_index in 0usize..7) {
        let kind = VariantKind::ALL[kind_index];
        let mut cfg = toy_config(kind, 5, 2, 3, 20);
        cfg.seed = seed;
        let (_, fed) = setup(&cfg);
        let one = run(&fed, &run_params(&cfg), 1).unwrap();
        let three = run(&fed, &run_params(&cfg), 3).unwrap();
        prop_assert_eq!(one, three);
    }
}
