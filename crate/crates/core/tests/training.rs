mod common;

use common::*;
use proptest::prelude::*;
use rest_core::market_data::{RelationKind, RelationSpec, SyntheticSpec};
use rest_core::model::{ModelConfig, RestModel, Variant};
use rest_core::numerics::{ModelParams, SgdConfig, Tensor};
use rest_core::training::{predict_batches, rest_loss, train, DateSplit};

fn small(variant: Variant) -> ModelConfig {
    ModelConfig { variant, hops: 2, embed_dim: 4, heads: 2, hidden: 4, ..ModelConfig::default() }
}

proptest! {
    #[test]
    fn loss_matches_direct_sum(
        dates in prop::collection::vec(prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..6), 1..5),
        theta in prop::collection::vec(-2.0f64..2.0, 1..8),
        lambda in 0.0f64..2.0,
    ) {
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = dates.iter().map(|d| d.iter().copied().unzip()).collect();
        let mut params = ModelParams::new();
        params.insert("theta", Tensor::vector(theta.clone()));
        let mut per_date = 0.0;
        for d in &dates {
            let mut s = 0.0;
            for &(p, l) in d {
                s += (p - l) * (p - l);
            }
            per_date += s / d.len() as f64;
        }
        let expected = per_date / dates.len() as f64 + lambda * theta.iter().map(|x| x * x).sum::<f64>();
        let got = rest_loss(&pairs, &params, lambda).unwrap();
        prop_assert!((got - expected).abs() < 1e-12 * expected.max(1.0));
    }
}

#[test]
fn loss_rejects_misaligned_dates() {
    let p = ModelParams::new();
    assert!(rest_loss(&[(vec![1.0], vec![1.0, 2.0])], &p, 0.0).is_err());
    assert!(rest_loss(&[(vec![], vec![])], &p, 0.0).is_err());
}

#[test]
fn model_loss_is_mean_squared_error_of_labeled_rows() {
    let exp = three_stock_market();
    let model = RestModel::for_frames(small(Variant::Rest), &exp.frames).unwrap();
    let params = model.init_params(3);
    for batch in exp.batches.values().take(12) {
        let p = model.predict(&params, batch).unwrap();
        let d: Vec<(f64, f64)> = batch
            .labels
            .iter()
            .zip(&p)
            .filter_map(|(l, &p)| l.map(|l| (p, l.normalized)))
            .collect();
        let want = d.iter().map(|(p, l)| (p - l).powi(2)).sum::<f64>() / d.len() as f64;
        assert!((model.loss(&params, batch).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let exp = three_stock_market();
    assert_eq!(exp.frames.graph.relations().len(), 2);
    let (report, groups) = full_model_gradcheck(&exp);
    assert!(report.entries.len() >= 50);
    assert_eq!(report.groups().len(), groups, "every parameter group probed");
    assert!(report.passed, "max relative error {:e}", report.max_rel_error);
}

#[test]
fn equal_seeds_give_identical_runs() {
    let exp = prepare(&SyntheticSpec::default(), 0.6, 0.2);
    let model = RestModel::for_frames(small(Variant::Rest), &exp.frames).unwrap();
    let sgd = SgdConfig { learning_rate: 0.02, epochs: 3, momentum: 0.9, seed: 5, ..SgdConfig::default() };
    let runs: Vec<_> = (0..2)
        .map(|_| train(&model, &exp.train_batches(), &exp.valid_batches(), &sgd, "h").unwrap())
        .collect();
    let bits = |r: &rest_core::training::TrainRun| -> Vec<u64> {
        r.epochs.iter().flat_map(|e| [e.train_mse.to_bits(), e.objective.to_bits(), e.valid_rmse.unwrap().to_bits()]).collect()
    };
    assert_eq!(bits(&runs[0]), bits(&runs[1]));
    assert_eq!(runs[0].best_params, runs[1].best_params);
    let other = train(&model, &exp.train_batches(), &exp.valid_batches(), &SgdConfig { seed: 6, ..sgd }, "h").unwrap();
    assert_ne!(bits(&runs[0]), bits(&other));
}

#[test]
fn large_lambda_shrinks_parameters() {
    let exp = prepare(&SyntheticSpec::default(), 0.6, 0.2);
    let model = RestModel::for_frames(small(Variant::RestL1), &exp.frames).unwrap();
    let norm = |lambda: f64| {
        let sgd = SgdConfig { learning_rate: 0.01, epochs: 3, l2_lambda: lambda, seed: 1, ..SgdConfig::default() };
        let run = train(&model, &exp.train_batches(), &[], &sgd, "").unwrap();
        run.best_params.squared_norm()
    };
    let (free, tied) = (norm(0.0), norm(1.0));
    assert!(tied < 0.5 * free, "{tied} vs {free}");
}

#[test]
fn noise_free_linear_market_is_learned() {
    // Own effects only: no propagation, constant sensitivities, no noise,
    // tokens that always name their event type. Every stock has an event
    // every day so the per-date label moments barely move.
    let spec = SyntheticSpec {
        n_stocks: 30,
        n_days: 150,
        event_rate: 1.0,
        relations: vec![RelationSpec { kind: RelationKind::Industry, density: 0.2, attenuation: 0.0, reverse_attenuation: 0.0 }],
        sensitivity_range: (1.0, 1.0),
        fragile_boost: 0.0,
        noise_std: 0.0,
        signature_prob: 1.0,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let exp = prepare(&spec, 0.8, 0.1);
    let cfg = ModelConfig { variant: Variant::EventDriven, embed_dim: 8, heads: 2, hidden: 8, ..ModelConfig::default() };
    let model = RestModel::for_frames(cfg, &exp.frames).unwrap();
    let batches = exp.train_batches();
    let sgd = SgdConfig { learning_rate: 0.03, epochs: 30, momentum: 0.9, l2_lambda: 0.0, seed: 0, ..SgdConfig::default() };
    let init = model.init_params(sgd.seed);
    let initial = batches.iter().map(|b| model.loss(&init, b).unwrap()).sum::<f64>() / batches.len() as f64;
    let run = train(&model, &batches, &[], &sgd, "").unwrap();
    let last = batches.iter().map(|b| model.loss(&run.best_params, b).unwrap()).sum::<f64>() / batches.len() as f64;
    assert!(last < 0.1 * initial, "loss {initial} -> {last}");
}

#[test]
fn best_checkpoint_is_the_validation_minimum() {
    let exp = prepare(&SyntheticSpec::default(), 0.6, 0.2);
    let model = RestModel::for_frames(small(Variant::EventDrivenSd), &exp.frames).unwrap();
    let sgd = SgdConfig { learning_rate: 0.05, epochs: 4, momentum: 0.9, seed: 2, ..SgdConfig::default() };
    let run = train(&model, &exp.train_batches(), &exp.valid_batches(), &sgd, "").unwrap();
    let best = run.epochs.iter().map(|e| e.valid_rmse.unwrap()).fold(f64::INFINITY, f64::min);
    assert_eq!(run.best_valid_rmse, Some(best));
    assert_eq!(run.epochs[run.best_epoch - 1].valid_rmse, Some(best));
    let report = rest_core::evaluation::evaluate(&predict_batches(&model, &run.best_params, &exp.valid_batches()).unwrap()).unwrap();
    assert_eq!(report.raw.rmse, best);
}

#[test]
fn split_ranges_are_contiguous_and_ordered() {
    let days: Vec<usize> = (3..103).collect();
    let s = DateSplit::by_fraction(&days, 0.7, 0.1).unwrap();
    assert_eq!(s.train, (3, 73));
    assert_eq!(s.valid, (73, 83));
    assert_eq!(s.test, (83, 103));
    assert!(DateSplit::by_fraction(&days, 0.9, 0.2).is_err());
    assert!(DateSplit::by_fraction(&days[..2], 0.5, 0.2).is_err());
}
