use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use monitor_core::chain::{presets, random_chain, sample_row};
use monitor_core::harness::{run_learning, ExperimentConfig};
use monitor_core::learning::{pg_decide, EstimatorState, QueryObservation};
use monitor_core::policies::greedy_decide;
use monitor_core::predictor::{MonitorState, PredictionTable};
use monitor_core::PolicyConfig;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn distance_trend_is_downward() {
    let mut cfg = ExperimentConfig::default();
    cfg.max_inter_query = 5;
    cfg.learn.gaps = vec![1, 2, 3, 4, 5];
    cfg.learn.updates = 50_000;
    cfg.learn.record_every = 500;
    let (_, rows) = run_learning(&cfg).unwrap();
    let medians: Vec<f64> = rows[1..]
        .chunks(20)
        .map(|w| median(w.iter().map(|r| r.frobenius_dist).collect()))
        .collect();
    assert!(medians.windows(2).all(|w| w[1] <= w[0] + 1e-3), "{medians:?}");
    assert!(medians.last().unwrap() < &rows[0].frobenius_dist);
}

#[test]
fn one_step_queries_recover_the_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth = random_chain(3, &mut rng).unwrap();
    let mut est = EstimatorState::new(3, 1).unwrap();
    let mut s = 0;
    for _ in 0..100_000 {
        let next = sample_row(truth.row(s), &mut rng);
        est.update(&QueryObservation::new(s, 1, next)).unwrap();
        s = next;
    }
    assert!(est.distance_to(&truth) < 0.1, "{}", est.distance_to(&truth));
}

#[test]
fn estimate_stays_stochastic_under_random_observations() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut est = EstimatorState::new(4, 6).unwrap();
    for _ in 0..2000 {
        let obs = QueryObservation::new(rng.random_range(0..4), rng.random_range(1..=6), rng.random_range(0..4));
        est.update(&obs).unwrap();
        for row in est.estimate().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn true_estimate_reduces_to_greedy() {
    let spec = presets::recurrent_five_state();
    let n = 10;
    let preds = PredictionTable::build(&spec.n_step_table(n).unwrap(), spec.loss());
    let est = EstimatorState::with_estimate(spec.transition().clone(), n).unwrap();
    for c in [0.0, 0.3, 0.9, 1.2, 1.4, 2.0, 4.5] {
        let cfg = PolicyConfig::new(c, n).unwrap();
        for i in 0..5 {
            for elapsed in 0..=n {
                let ms = MonitorState::new(i, elapsed);
                assert_eq!(
                    pg_decide(&est, spec.loss(), &cfg, ms).unwrap(),
                    greedy_decide(&preds, &cfg, ms).unwrap()
                );
            }
        }
    }
}
