use dualframe::dataset::{read_csv, split_folds, write_csv, ColumnSchema, FoldPartition};
use dualframe::dml::{estimate, DmlConfig, DmlVariant, Estimation, Estimator, ModelSpec};
use dualframe::scores::MeanTarget;
use dualframe::simgen::{
    gen_population, gen_replication, gen_samples, pi_np_true, pi_p_true, run_replication, run_scenario, summarize,
    Scenario, ScenarioConfig,
};

fn small(scenario: Scenario, n_pop: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::for_scenario(scenario);
    cfg.n_pop = n_pop;
    cfg
}

#[test]
fn csv_round_trip_is_exact() {
    for sc in [Scenario::S3, Scenario::S4] {
        let ds = gen_replication(&small(sc, 3000), 4).unwrap();
        let mut first = Vec::new();
        write_csv(&ds, &mut first).unwrap();
        let back = read_csv(first.as_slice(), &ColumnSchema::default()).unwrap();
        assert_eq!(back, ds);
        let mut second = Vec::new();
        write_csv(&back, &mut second).unwrap();
        assert_eq!(first, second);
    }
}

#[test]
fn replications_are_bit_reproducible() {
    let cfg = small(Scenario::S1, 2500);
    assert_eq!(gen_replication(&cfg, 3).unwrap(), gen_replication(&cfg, 3).unwrap());
    assert_ne!(gen_replication(&cfg, 3).unwrap(), gen_replication(&cfg, 4).unwrap());

    let est = [Estimator::P, Estimator::Subeff, Estimator::Eff];
    let dml = DmlConfig::default();
    let spec = Scenario::S1.model_spec();
    let a = run_replication(&cfg, 3, &est, &dml, &spec).unwrap();
    let b = run_replication(&cfg, 3, &est, &dml, &spec).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn parallel_run_matches_sequential() {
    let mut cfg = small(Scenario::S2, 2000);
    cfg.replications = 3;
    let est = [Estimator::P, Estimator::Subeff];
    let dml = DmlConfig::default();
    let spec = Scenario::S2.model_spec();
    let run = run_scenario(&cfg, &est, &dml, &spec).unwrap();
    let seq: Vec<_> = (0..3).map(|r| run_replication(&cfg, r, &est, &dml, &spec).unwrap()).collect();
    assert_eq!(serde_json::to_string(&run.replications).unwrap(), serde_json::to_string(&seq).unwrap());
    assert_eq!(
        serde_json::to_string(&run.summaries).unwrap(),
        serde_json::to_string(&summarize(Scenario::S2, &seq)).unwrap()
    );
}

#[test]
fn o1_population_mean_is_zero() {
    let cfg = small(Scenario::S1, 1_000_000);
    let pop = gen_population(&cfg, &mut cfg.rng(0));
    let mean = pop.y.iter().sum::<f64>() / pop.len() as f64;
    assert!(mean.abs() < 0.005, "mean {mean}");
}

/// Under independent sampling, `(d_np - pi_np)(d_p - pi_p)` has mean zero
/// overall and inside every covariate cell.
#[test]
fn frames_are_sampled_independently() {
    let cfg = small(Scenario::S1, 400_000);
    let mut rng = cfg.rng(0);
    let pop = gen_population(&cfg, &mut rng);
    let ds = gen_samples(&pop, &cfg, &mut rng).unwrap();
    let cells: [(f64, f64); 4] = [(f64::NEG_INFINITY, -0.67), (-0.67, 0.0), (0.0, 0.67), (0.67, f64::INFINITY)];
    for (lo, hi) in cells {
        let prods: Vec<f64> = ds
            .records()
            .iter()
            .enumerate()
            .filter(|(i, _)| pop.x[*i] >= lo && pop.x[*i] < hi)
            .map(|(i, r)| {
                let a = f64::from(u8::from(r.pattern.delta_np)) - pi_np_true(cfg.np_mech(), pop.x[i], pop.y[i]);
                let b = f64::from(u8::from(r.pattern.delta_p)) - pi_p_true(pop.x[i]);
                a * b
            })
            .collect();
        let n = prods.len() as f64;
        let m = prods.iter().sum::<f64>() / n;
        let sd = (prods.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(m.abs() < 3.0 * sd / n.sqrt(), "cell [{lo}, {hi}): {m} vs se {}", sd / n.sqrt());
    }
}

#[test]
fn dml1_and_dml2_agree_within_two_se() {
    let ds = gen_replication(&small(Scenario::S1, 10_000), 0).unwrap();
    let spec = Scenario::S1.model_spec();
    let mut cfg = DmlConfig { estimator: Estimator::Eff, ..DmlConfig::default() };
    let two = estimate(&ds, &cfg, &spec, &MeanTarget).unwrap();
    cfg.variant = DmlVariant::Dml1;
    let one = estimate(&ds, &cfg, &spec, &MeanTarget).unwrap();
    assert!(one.diagnostics.converged && two.diagnostics.converged);
    let gap = (one.theta_hat[0] - two.theta_hat[0]).abs();
    assert!(gap < 2.0 * two.theta_se()[0], "gap {gap}, se {}", two.theta_se()[0]);
}

#[test]
fn dml2_ignores_fold_labels() {
    let ds = gen_replication(&small(Scenario::S1, 3000), 1).unwrap();
    let spec = Scenario::S1.model_spec();
    let cfg = DmlConfig::default();
    let part = split_folds(&ds, cfg.k, 9).unwrap();
    let shifted = FoldPartition::from_assignments(part.assignments().iter().map(|f| (f + 2) % cfg.k).collect(), cfg.k).unwrap();
    for est in [Estimator::Subeff, Estimator::Eff] {
        let a = Estimation::new(&ds, cfg.clone(), &spec, &MeanTarget).unwrap().with_partition(part.clone()).unwrap().run(est).unwrap();
        let b = Estimation::new(&ds, cfg.clone(), &spec, &MeanTarget).unwrap().with_partition(shifted.clone()).unwrap().run(est).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!((x - y).abs() < 1e-9, "{est:?}: {x} vs {y}");
        }
    }
}

/// Every converged estimator satisfies its own equations at the reported root.
#[test]
fn converged_roots_meet_tolerance() {
    let ds = gen_replication(&small(Scenario::S1, 4000), 2).unwrap();
    let spec = Scenario::S1.model_spec();
    let cfg = DmlConfig::default();
    let mut run = Estimation::new(&ds, cfg.clone(), &spec, &MeanTarget).unwrap();
    for est in Estimator::ALL {
        let r = run.run(est).unwrap();
        if r.diagnostics.converged {
            assert!(r.diagnostics.final_norm <= cfg.solver.tol, "{est:?}: {}", r.diagnostics.final_norm);
        }
        for (j, (lo, hi)) in r.ci.iter().enumerate() {
            assert!(*lo <= r.params()[j] && r.params()[j] <= *hi);
        }
    }
}

#[test]
fn model_spec_json_round_trip() {
    let spec = Scenario::S3.model_spec();
    let text = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<ModelSpec>(&text).unwrap(), spec);
    let partial: ModelSpec = serde_json::from_str(r#"{"features": ["1", "x"]}"#).unwrap();
    assert_eq!(partial.g, ModelSpec::default().g);
}
