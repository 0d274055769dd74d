use lowrank::geosgd::{geo_sgd, realign_polynomial, subspace_descent, BoostConfig};
use lowrank::harness::{run_experiment, ExperimentConfig, Phase};
use lowrank::model::{random_instance, sample_batch, InstanceOracle, ReplayOracle, SampleOracle};
use lowrank::subspace::procrustes_distance;
use lowrank::trimmed_pca::{trimmed_pca, TrimConfig};
use lowrank::Error;

fn boost(t_outer: usize) -> BoostConfig {
    let mut cfg = ExperimentConfig::phase_retrieval(0, 1).boost.unwrap();
    cfg.t_outer = t_outer;
    cfg
}

#[test]
fn warm_start_then_boost_recovers_rank_one() {
    let inst = random_instance(20, 1, 2, 12, 0.5).unwrap();
    let mut oracle = InstanceOracle::new(&inst, 1);
    let warm = TrimConfig {
        samples_per_round: 100_000,
        ..TrimConfig::default()
    };
    let v0 = trimmed_pca(&mut oracle, 1, &warm).unwrap();
    let d0 = procrustes_distance(&v0, &inst.truth.frame).unwrap();
    assert!(d0 < 0.2, "{d0}");
    let theta = geo_sgd(&mut oracle, &v0, 2, &boost(10)).unwrap();
    assert!(procrustes_distance(&theta.frame, &inst.truth.frame).unwrap() < 1e-6);
    assert!(inst.coef_error(&theta).unwrap() < 1e-6);
    let batch = sample_batch(&inst, 10_000, 77);
    assert!(inst.prediction_error(&theta, &batch).unwrap() < 1e-10);
}

#[test]
fn subspace_descent_contracts_from_a_warm_start() {
    let inst = random_instance(30, 1, 2, 4, 0.5).unwrap();
    let mut oracle = InstanceOracle::new(&inst, 2);
    let v0 = trimmed_pca(&mut oracle, 1, &TrimConfig::default()).unwrap();
    let cfg = boost(1);
    let c = realign_polynomial(&mut oracle, &v0, 2, &cfg).unwrap();
    let v1 = subspace_descent(&mut oracle, &v0, &c, &cfg).unwrap();
    let before = procrustes_distance(&v0, &inst.truth.frame).unwrap();
    let after = procrustes_distance(&v1, &inst.truth.frame).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn replayed_batches_run_out_cleanly() {
    let inst = random_instance(10, 1, 2, 3, 0.5).unwrap();
    let mut oracle = ReplayOracle::new(sample_batch(&inst, 1_000, 1));
    let v0 = inst.truth.frame.clone();
    let err = geo_sgd(&mut oracle, &v0, 2, &boost(2)).unwrap_err();
    assert!(matches!(err, Error::OracleExhausted { .. }));
    assert!(oracle.samples_drawn() <= 1_000);
}

#[test]
fn experiment_trace_is_reproducible_and_converges() {
    let mut cfg = ExperimentConfig::phase_retrieval(21, 3);
    cfg.n = 20;
    cfg.warm.samples_per_round = 100_000;
    cfg.record_wall_time = false;
    cfg.boost.as_mut().unwrap().t_outer = 8;
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert!(a.failures.is_empty());
    assert_eq!(a.records, b.records);
    for trial in 0..3 {
        let rows: Vec<_> = a.records.iter().filter(|r| r.trial == trial).collect();
        assert_eq!(rows[0].phase, Phase::Warmstart);
        assert!(rows.windows(2).all(|w| w[0].samples_used <= w[1].samples_used));
        let last = rows.last().unwrap();
        assert!(last.procrustes < 1e-6 && last.pred_error < 1e-10, "{last:?}");
    }
}
