use sqfam::estimation::{
    experiment_approximation, experiment_asymptotic_normality, experiment_misspecified_rate, fit_mle, ApproxConfig,
    FamilySpec, FitConfig, MisspecConfig, NormalityConfig,
};
use sqfam::experiments::{run_suite, AcceptanceConfig, Suite};
use sqfam::geometry::fisher_augmented;
use sqfam::measure::IntegrationScheme;
use sqfam::model::{canonicalize, ModelBundle};
use sqfam::sampling::{rejection_sample, DEFAULT_SAFETY};
use sqfam::Error;

const BUNDLE: &str = r#"{
  "features": {"input_dim": 1, "output_dim": 2, "kind": {"type": "polynomial", "degree": 1}},
  "measure": {"type": "box_lebesgue", "lower": [0.0], "upper": [1.0]},
  "theta": [1.0, 1.0]
}"#;

#[test]
fn bundle_sample_fit_fisher() {
    let bundle: ModelBundle = serde_json::from_str(BUNDLE).unwrap();
    let model = bundle.into_model(&"quad:64".parse().unwrap()).unwrap();
    assert!((model.normalizer() - 7.0 / 3.0).abs() < 1e-12);

    let x = rejection_sample(&model, 4000, 11, DEFAULT_SAFETY).unwrap().samples;
    let family = FamilySpec::from_parts(model.features().clone(), model.measure().clone(), model.kernel().clone()).unwrap();
    let fit = fit_mle(&x, &family, &FitConfig::multistart(3, 5)).unwrap();
    assert!(fit.converged);
    let est = canonicalize(&fit.theta(), &family.kernel).unwrap();
    let truth = canonicalize(model.theta().unwrap(), &family.kernel).unwrap();
    let d = &est - &truth;
    // sd of each coordinate is about sqrt(K^{-1}/4 / N) < 0.03
    assert!(d.amax() < 0.15, "{d}");

    let fitted = model.with_theta(fit.theta()).unwrap();
    assert!(fisher_augmented(&fitted, 1.0).unwrap().min_eigenvalue() > 0.0);

    let round: ModelBundle = serde_json::from_str(&serde_json::to_string(&ModelBundle::from_model(&fitted)).unwrap()).unwrap();
    let again = round.into_model(&IntegrationScheme::default()).unwrap();
    assert_eq!(again.normalizer(), fitted.normalizer());
}

#[test]
fn unknown_keys_are_rejected() {
    let bad = BUNDLE.replace("\"theta\"", "\"thetta\"");
    assert!(serde_json::from_str::<ModelBundle>(&bad).is_err());
    let err = serde_json::from_str::<FitConfig>(r#"{"epsilon": 0.01, "bogus": 1}"#).unwrap_err();
    assert!(err.to_string().contains("bogus"));
    assert!(serde_json::from_str::<AcceptanceConfig>(r#"{"seed": 1}"#).is_err());
}

#[test]
fn fit_config_defaults_and_validation() {
    let c: FitConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(c, FitConfig::default());
    assert_eq!(c.radius, 10.0);
    let bad: FitConfig = serde_json::from_str(r#"{"sigma": 2.0}"#).unwrap();
    assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))));
}

#[test]
fn small_experiments_are_deterministic() {
    let n: NormalityConfig = serde_json::from_value(serde_json::json!({
        "theta_star": [1.0, 1.0], "n_list": [100, 200], "reps": 8, "master_seed": 3
    }))
    .unwrap();
    let a = experiment_asymptotic_normality(&n).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&experiment_asymptotic_normality(&n).unwrap()).unwrap());
    assert_eq!(a.replications.len(), 16);

    let m: MisspecConfig = serde_json::from_value(serde_json::json!({
        "n_list": [100], "reps": 4, "master_seed": 9, "starts": 2
    }))
    .unwrap();
    let r = experiment_misspecified_rate(&m).unwrap();
    assert!(r.kl_star > 0.0);
    assert!(r.rows[0].min_excess >= -1e-9);

    let ap: ApproxConfig = serde_json::from_value(serde_json::json!({
        "n_list": [4, 8], "feature_seeds": [1, 2]
    }))
    .unwrap();
    let rep = experiment_approximation(&ap).unwrap();
    for seed in 0..2 {
        assert!(rep.rows[1].kl[seed] <= rep.rows[0].kl[seed] + 1e-12);
    }
}

#[test]
fn fast_suites_pass_at_pinned_seed() {
    let seed = AcceptanceConfig::pinned().seed;
    for s in [Suite::Factorisation, Suite::Singularity, Suite::Bregman, Suite::Marginals, Suite::Orthogonality, Suite::Sandwich] {
        let r = run_suite(s, seed).unwrap();
        assert!(r.passed, "{s}: {}", r.summary());
    }
}

#[test]
fn supplied_init_is_used() {
    let bundle: ModelBundle = serde_json::from_str(BUNDLE).unwrap();
    let model = bundle.into_model(&IntegrationScheme::default()).unwrap();
    let family = FamilySpec::from_parts(model.features().clone(), model.measure().clone(), model.kernel().clone()).unwrap();
    let x = vec![vec![0.2], vec![0.7]];
    let cfg: FitConfig = serde_json::from_str(r#"{"init": {"type": "supplied", "theta": [1.0, 0.0]}, "max_iters": 1}"#).unwrap();
    let r = fit_mle(&x, &family, &cfg).unwrap();
    assert_eq!(r.iterations, 1);
    assert!(r.theta_hat[0] >= cfg.epsilon);
}
