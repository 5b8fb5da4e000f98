mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rest_core::evaluation::*;

/// Five stocks over 21 closes with scores for the first 20.
fn fixture() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let prices: Vec<Vec<f64>> = (0..5)
        .map(|s| {
            let mut p = 10.0 + 3.0 * s as f64;
            (0..21)
                .map(|d| {
                    let out = p;
                    p *= 1.0 + 0.03 * ((d * (s + 2)) as f64 * 0.7).sin() - 0.004 * s as f64;
                    out
                })
                .collect()
        })
        .collect();
    let scores: Vec<Vec<f64>> = (0..20).map(|d| (0..5).map(|s| ((d * 7 + s * 3) % 11) as f64 - 0.1 * s as f64).collect()).collect();
    (prices, scores)
}

fn as_inputs<'a>(prices: &'a [Vec<f64>], scores: &[Vec<f64>]) -> (BTreeMap<usize, Vec<(usize, f64)>>, impl Fn(usize, usize) -> f64 + 'a) {
    let map = scores.iter().enumerate().map(|(d, s)| (d, s.iter().copied().enumerate().collect())).collect();
    (map, move |s: usize, d: usize| prices[s][d + 1] / prices[s][d] - 1.0)
}

#[test]
fn error_list_oracles() {
    let m = regression_metrics(&[0.1, 0.2, 0.7], &[0.0; 3]).unwrap();
    assert!((m.rmse - (0.54f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((m.mae - 1.0 / 3.0).abs() < 1e-12);
    assert!((m.medae - 0.2).abs() < 1e-12);
    let m = regression_metrics(&[0.4, -0.1, 0.3, 0.0], &[0.0; 4]).unwrap();
    assert!((m.medae - 0.2).abs() < 1e-12);
    assert!(regression_metrics(&[], &[]).is_err());
    assert!(regression_metrics(&[1.0], &[1.0, 2.0]).is_err());
}

proptest! {
    #[test]
    fn rmse_squared_is_mean_squared_error(errs in prop::collection::vec(-1.0f64..1.0, 1..40)) {
        let m = regression_metrics(&errs, &vec![0.0; errs.len()]).unwrap();
        let mse = errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64;
        prop_assert!((m.rmse * m.rmse - mse).abs() < 1e-12);
        prop_assert!(m.rmse >= 0.0 && m.mae >= 0.0 && m.medae >= 0.0);
    }

    #[test]
    fn shifting_scores_keeps_every_trade(shift in -5.0f64..5.0, k in 1usize..6) {
        let (prices, scores) = fixture();
        let shifted: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().map(|x| x + shift).collect()).collect();
        let cfg = BacktestConfig { k, ..BacktestConfig::default() };
        let (a, r) = as_inputs(&prices, &scores);
        let (b, _) = as_inputs(&prices, &shifted);
        let (x, y) = (backtest(&a, &r, &cfg).unwrap(), backtest(&b, &r, &cfg).unwrap());
        for (p, q) in x.steps.iter().zip(&y.steps) {
            prop_assert_eq!(&p.selected, &q.selected);
        }
        prop_assert_eq!(x.values, y.values);
    }
}

#[test]
fn backtest_matches_share_ledger() {
    let (prices, scores) = fixture();
    let (map, returns) = as_inputs(&prices, &scores);
    for k in 1..=5 {
        let got = backtest(&map, &returns, &BacktestConfig { k, ..BacktestConfig::default() }).unwrap();
        let want = share_ledger(&prices, &scores, k, 0.0015, 0.0025);
        assert_eq!(got.steps.len(), 20);
        for (g, w) in got.steps.iter().zip(&want) {
            let mut sel = g.selected.clone();
            sel.sort_unstable();
            assert_eq!(sel, w.selected);
            assert!((g.value_before - w.value_before).abs() < 1e-10);
            assert!((g.cost - w.cost).abs() < 1e-10, "k {k} day {}: {} vs {}", g.day, g.cost, w.cost);
            assert!((g.value_after - w.value_after).abs() < 1e-10);
            // V_{t+1} = V_t (1 + r_p) - cost
            assert!((g.value_before * (1.0 + g.portfolio_return) - g.cost - g.value_after).abs() < 1e-12);
        }
        assert!((got.values[20] - want[19].value_after).abs() < 1e-10);
    }
}

#[test]
fn costed_two_day_hand_case() {
    let scores: BTreeMap<usize, Vec<(usize, f64)>> =
        [(0, vec![(0, 1.0), (1, 0.0)]), (1, vec![(0, 0.0), (1, 1.0)])].into_iter().collect();
    let r = |s: usize, d: usize| [[0.10, 0.0], [0.0, -0.05]][s][d];
    let out = backtest(&scores, r, &BacktestConfig { k: 1, ..BacktestConfig::default() }).unwrap();
    // Day 0: buy 1.0 of stock 0 for 0.0015; 1.1 - 0.0015 = 1.0985.
    // Day 1: sell 1.0985 of stock 0, buy 1.0985 of stock 1 for 0.004 * 1.0985;
    // 1.0985 * 0.95 - 0.004394 = 1.039181.
    assert!((out.values[1] - 1.0985).abs() < 1e-12);
    assert!((out.steps[1].cost - 0.004394).abs() < 1e-12);
    assert!((out.values[2] - 1.039181).abs() < 1e-12);
    let free = BacktestConfig { k: 1, buy_cost: 0.0, sell_cost: 0.0, ..BacktestConfig::default() };
    assert!((backtest(&scores, r, &free).unwrap().values[2] - 1.045).abs() < 1e-12);
}

#[test]
fn all_stocks_without_costs_earn_the_mean_return() {
    let (prices, scores) = fixture();
    let (map, returns) = as_inputs(&prices, &scores);
    let cfg = BacktestConfig { k: 5, buy_cost: 0.0, sell_cost: 0.0, ..BacktestConfig::default() };
    let out = backtest(&map, &returns, &cfg).unwrap();
    for (d, r) in out.daily_returns.iter().enumerate() {
        let mean = (0..5).map(|s| returns(s, d)).sum::<f64>() / 5.0;
        assert!((r - mean).abs() < 1e-12);
    }
    assert!(out.values.iter().all(|&v| v > 0.0));
}

#[test]
fn short_dates_hold_everything_available() {
    let scores: BTreeMap<usize, Vec<(usize, f64)>> = [(0, vec![(3, 0.2), (1, 0.5)])].into_iter().collect();
    let out = backtest(&scores, |_, _| 0.0, &BacktestConfig { k: 4, ..BacktestConfig::default() }).unwrap();
    assert_eq!(out.short_days, vec![0]);
    assert_eq!(out.steps[0].selected, vec![1, 3]);
    assert!(backtest(&scores, |_, _| 0.0, &BacktestConfig { k: 0, ..BacktestConfig::default() }).is_err());
}

#[test]
fn sharpe_matches_moment_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let r: Vec<f64> = (0..100).map(|_| rng.gen_range(-0.03..0.035)).collect();
    let n = r.len() as f64;
    let m1 = r.iter().sum::<f64>() / n;
    let m2 = r.iter().map(|x| x * x).sum::<f64>() / n;
    let want = m1 / (m2 - m1 * m1).sqrt() * 252f64.sqrt();
    assert!((sharpe_ratio(&r, 0.0) - want).abs() < 1e-10);
    let alt: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 0.01 } else { -0.01 }).collect();
    assert!(sharpe_ratio(&alt, 0.0).abs() < 1e-12);
    assert!(sharpe_ratio(&[0.002; 30], 0.0).is_nan());
}

#[test]
fn annual_return_hand_cases() {
    assert_eq!(annual_return(&[1.0; 10]).unwrap(), 0.0);
    let doubling: Vec<f64> = (0..=252).map(|d| 2f64.powf(d as f64 / 252.0)).collect();
    assert!((annual_return(&doubling).unwrap() - 1.0).abs() < 1e-12);
    let steady: Vec<f64> = (0..=252).map(|d| 1.001f64.powi(d)).collect();
    assert!((annual_return(&steady).unwrap() - 0.2865).abs() < 1e-4);
    assert!(annual_return(&[1.0]).is_err());
}
