use bayesmap::experiments::{
    self, run_gamma_poisson, run_logistic_sim, run_sparse_threshold, run_spectral_staging,
    stage_loss_matrix, GammaPoissonConfig, LogisticConfig, SparseThresholdConfig, SpectralConfig,
};
use bayesmap::{run_experiment, ExperimentConfig, ExperimentError, FitOptions, InferenceError};

#[test]
fn zero_count_posterior_passes_ks() {
    let cfg = GammaPoissonConfig {
        seed: 1,
        y: 0,
        n_train: vec![1000],
        replicates: 1,
        ..Default::default()
    };
    let rep = run_gamma_poisson(&cfg).unwrap();
    assert_eq!(rep.n_failed, 0);
    assert!(rep.metrics.get("ks").unwrap() < 0.05, "{:?}", rep.metrics);
    // Gamma(2, 1/2) prior, y = 0: evidence (1 + 1/2)^-2
    assert!((rep.metrics.get("log_beta_true").unwrap() + 2.0 * 1.5f64.ln()).abs() < 1e-12);
}

#[test]
fn sparse_threshold_tau_follows_the_mass_rule() {
    let cfg = SparseThresholdConfig {
        trials: 2,
        n_train_base: 500,
        n_train: 300,
        n_eval: 200,
        ..Default::default()
    };
    let rep = run_sparse_threshold(&cfg).unwrap();
    let tau = rep.metrics.get("tau").unwrap();
    assert!((tau - 2.118).abs() < 1e-3);
    assert!((tau + std::f64::consts::FRAC_1_SQRT_2 * 0.05f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_noise_decisions_agree() {
    let cfg = SparseThresholdConfig {
        seed: 2,
        noise_var: 1e-6,
        trials: 20,
        n_eval: 1000,
        ..Default::default()
    };
    let rep = run_sparse_threshold(&cfg).unwrap();
    assert_eq!(rep.n_failed, 0, "{:?}", rep.failures);
    assert!(
        rep.metrics.get("agreement").unwrap() >= 0.99,
        "{:?}",
        rep.metrics
    );
}

#[test]
fn logistic_with_one_test_class_is_an_error() {
    let cfg = LogisticConfig {
        n_test_neg: 0,
        n_train: 300,
        ..Default::default()
    };
    assert!(matches!(
        run_logistic_sim(&cfg),
        Err(ExperimentError::Inference(InferenceError::SingleClass))
    ));
}

#[test]
fn well_separated_clouds_are_ranked_correctly() {
    let cfg = LogisticConfig {
        seed: 4,
        mean_pos: vec![4.0, 4.0],
        mean_neg: vec![-4.0, -4.0],
        n_train: 500,
        ..Default::default()
    };
    let rep = run_logistic_sim(&cfg).unwrap();
    assert!(rep.metrics.get("bayes_auc").unwrap() > 0.95);
    assert!(rep.metrics.get("map_auc").unwrap() > 0.95);
}

#[test]
fn noiseless_template_windows_give_matching_decisions() {
    let cfg = SpectralConfig {
        seed: 5,
        windows: 8,
        sigma2: 100.0,
        generation_noise_std: 0.0,
        variability: 0.0,
        n_train: 200,
        n_eval: 300,
        // the 8-d map contracts each axis about 50-fold, so det(W J) is near
        // 1e-14, under the default floor
        fit: FitOptions {
            eps_det: 1e-300,
            ..FitOptions::default()
        },
        ..Default::default()
    };
    let rep = run_spectral_staging(&cfg).unwrap();
    assert_eq!(rep.n_failed, 0, "{:?}", rep.failures);
    let loss = stage_loss_matrix();
    for row in &rep.trials {
        let stage = row.get("template_stage").unwrap() as usize;
        // the action minimising expected loss under the label model at the template
        let p = cfg.rule.probabilities(&cfg.templates[stage]);
        let risk = |a: usize| p.iter().zip(&loss[a]).map(|(pi, l)| pi * l).sum::<f64>();
        let best = (0..4).min_by(|a, b| risk(*a).total_cmp(&risk(*b))).unwrap();
        assert_eq!(row.get("bayes_action"), Some(best as f64));
        assert_eq!(row.get("map_action"), Some(best as f64));
    }
}

#[test]
fn same_seed_same_report() {
    let cfg = ExperimentConfig::GammaPoisson(GammaPoissonConfig {
        seed: 6,
        n_train: vec![100, 200],
        replicates: 2,
        n_eval: 2000,
        ..Default::default()
    });
    let (a, b) = (run_experiment(&cfg).unwrap(), run_experiment(&cfg).unwrap());
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.trials_csv(), b.trials_csv());
    let mut other = cfg.clone();
    other.set_seed(7);
    assert_ne!(run_experiment(&other).unwrap().metrics, a.metrics);
}

#[test]
fn configs_round_trip_through_json() {
    for name in experiments::SCENARIOS {
        let cfg = ExperimentConfig::default_for(name).unwrap();
        assert_eq!(cfg.scenario(), name);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains(&format!("\"scenario\":\"{name}\"")));
        assert_eq!(
            serde_json::from_str::<ExperimentConfig>(&text).unwrap(),
            cfg
        );
    }
    assert!(matches!(
        ExperimentConfig::default_for("nope"),
        Err(ExperimentError::UnknownScenario(_))
    ));
    let typo = r#"{"scenario":"gamma_poisson","replicats":3}"#;
    assert!(serde_json::from_str::<ExperimentConfig>(typo).is_err());
}

#[test]
fn report_serialises_non_finite_metrics_as_strings() {
    let mut rep = run_gamma_poisson(&GammaPoissonConfig {
        n_train: vec![100],
        replicates: 1,
        n_eval: 1000,
        ks_samples: 200,
        ..Default::default()
    })
    .unwrap();
    rep.metrics.set("kl", f64::INFINITY);
    let json = serde_json::to_value(&rep).unwrap();
    assert_eq!(json["metrics"]["kl"], "inf");
    let back: bayesmap::ExperimentReport = serde_json::from_value(json).unwrap();
    assert_eq!(back.metrics.get("kl"), Some(f64::INFINITY));
}
