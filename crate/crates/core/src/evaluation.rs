//! Regression metrics and the top-k investment simulation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub medae: f64,
    pub count: usize,
}

/// RMSE, MAE and median absolute error of `prediction - label` pairs.
/// An even count takes the mean of the two central absolute errors.
pub fn regression_metrics(predictions: &[f64], labels: &[f64]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Invalid("no predictions to evaluate".into()));
    }
    let n = predictions.len() as f64;
    let errors: Vec<f64> = predictions.iter().zip(labels).map(|(p, l)| p - l).collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    let mae = abs.iter().sum::<f64>() / n;
    abs.sort_by(f64::total_cmp);
    let mid = abs.len() / 2;
    let medae = if abs.len() % 2 == 0 {
        0.5 * (abs[mid - 1] + abs[mid])
    } else {
        abs[mid]
    };
    Ok(Metrics {
        rmse,
        mae,
        medae,
        count: predictions.len(),
    })
}

/// One scored stock on one date.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub day: usize,
    pub stock: usize,
    /// Model output on the normalized label scale.
    pub prediction: f64,
    /// Output mapped back to a change rate with the date's label moments.
    pub raw_prediction: f64,
    pub label: f64,
    pub normalized_label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DateMetrics {
    pub day: usize,
    pub raw: Metrics,
    pub normalized: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub raw: Metrics,
    pub normalized: Metrics,
    pub per_date: Vec<DateMetrics>,
}

pub fn evaluate(predictions: &[Prediction]) -> Result<MetricsReport> {
    let split = |ps: &[&Prediction]| -> Result<(Metrics, Metrics)> {
        let raw_p: Vec<f64> = ps.iter().map(|p| p.raw_prediction).collect();
        let raw_l: Vec<f64> = ps.iter().map(|p| p.label).collect();
        let norm_p: Vec<f64> = ps.iter().map(|p| p.prediction).collect();
        let norm_l: Vec<f64> = ps.iter().map(|p| p.normalized_label).collect();
        Ok((regression_metrics(&raw_p, &raw_l)?, regression_metrics(&norm_p, &norm_l)?))
    };
    let all: Vec<&Prediction> = predictions.iter().collect();
    let (raw, normalized) = split(&all)?;
    let mut by_day: BTreeMap<usize, Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        by_day.entry(p.day).or_default().push(p);
    }
    let per_date = by_day
        .into_iter()
        .map(|(day, ps)| {
            let (raw, normalized) = split(&ps)?;
            Ok(DateMetrics { day, raw, normalized })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        raw,
        normalized,
        per_date,
    })
}

/// `(V_T / V_0)^(252 / T) - 1` with `T` daily steps.
pub fn annual_return(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Invalid("annual return needs at least two values".into()));
    }
    let steps = (values.len() - 1) as f64;
    Ok((values[values.len() - 1] / values[0]).powf(TRADING_DAYS_PER_YEAR / steps) - 1.0)
}

/// Annualized Sharpe ratio of daily returns over a daily risk-free rate,
/// using the population standard deviation. NaN when the excess returns
/// have no spread.
pub fn sharpe_ratio(returns: &[f64], risk_free: f64) -> f64 {
    if returns.len() < 2 {
        return f64::NAN;
    }
    let n = returns.len() as f64;
    let excess: Vec<f64> = returns.iter().map(|r| r - risk_free).collect();
    let mean = excess.iter().sum::<f64>() / n;
    let var = excess.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    let scale = excess.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
    if var.sqrt() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return f64::NAN;
    }
    mean / var.sqrt() * TRADING_DAYS_PER_YEAR.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub k: usize,
    pub buy_cost: f64,
    pub sell_cost: f64,
    pub initial_value: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            k: 10,
            buy_cost: 0.0015,
            sell_cost: 0.0025,
            initial_value: 1.0,
        }
    }
}

/// One rebalancing date of the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestStep {
    pub day: usize,
    pub selected: Vec<usize>,
    pub value_before: f64,
    pub bought: f64,
    pub sold: f64,
    pub cost: f64,
    pub portfolio_return: f64,
    pub value_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub k: usize,
    /// Value at the start and after each step.
    pub values: Vec<f64>,
    pub daily_returns: Vec<f64>,
    pub annual_return: f64,
    /// NaN (written as null) when undefined.
    pub sharpe_ratio: f64,
    pub sharpe_defined: bool,
    /// Mean of `(bought + sold) / value` per step.
    pub turnover: f64,
    pub total_cost: f64,
    /// Dates on which fewer than `k` stocks were available.
    pub short_days: Vec<usize>,
    pub steps: Vec<BacktestStep>,
}

/// Daily top-k equal-weight simulation.
///
/// On each date the `k` highest-scored stocks are targeted at `V_t / k`
/// each and all others are sold, at that date's close. Trades are charged
/// `buy_cost` and `sell_cost` on their value and settled at the next close,
/// so `V_{t+1} = V_t (1 + r_p) - cost` with `r_p` the mean next-day return of
/// the selection. Positions drift with their own returns between dates.
///
/// `scores[day]` lists `(stock, prediction)`; `returns(stock, day)` is the
/// close-to-close return from `day` to the next trading day (0 if unknown).
/// Ties in score break towards the lower stock id.
pub fn backtest<F>(scores: &BTreeMap<usize, Vec<(usize, f64)>>, returns: F, cfg: &BacktestConfig) -> Result<BacktestResult>
where
    F: Fn(usize, usize) -> f64,
{
    if cfg.k == 0 {
        return Err(Error::Invalid("k must be positive".into()));
    }
    if !(cfg.buy_cost >= 0.0 && cfg.sell_cost >= 0.0 && cfg.buy_cost < 1.0 && cfg.sell_cost < 1.0) {
        return Err(Error::Invalid("costs must lie in [0, 1)".into()));
    }
    if scores.is_empty() {
        return Err(Error::Invalid("no dates to trade".into()));
    }
    let mut value = cfg.initial_value;
    let mut holdings: BTreeMap<usize, f64> = BTreeMap::new();
    let mut values = vec![value];
    let mut steps = Vec::with_capacity(scores.len());
    let mut short_days = Vec::new();
    for (&day, day_scores) in scores {
        let selected = top_k(day_scores, cfg.k);
        if selected.len() < cfg.k {
            short_days.push(day);
        }
        if selected.is_empty() {
            values.push(value);
            continue;
        }
        let target = value / selected.len() as f64;
        let chosen: BTreeSet<usize> = selected.iter().copied().collect();
        let (mut bought, mut sold) = (0.0, 0.0);
        for (&stock, &held) in &holdings {
            if !chosen.contains(&stock) {
                sold += held;
            }
        }
        for &stock in &selected {
            let held = holdings.get(&stock).copied().unwrap_or(0.0);
            if target > held {
                bought += target - held;
            } else {
                sold += held - target;
            }
        }
        let cost = cfg.buy_cost * bought + cfg.sell_cost * sold;
        let grown: Vec<(usize, f64)> = selected.iter().map(|&s| (s, target * (1.0 + returns(s, day)))).collect();
        let gross: f64 = grown.iter().map(|g| g.1).sum();
        let portfolio_return = gross / value - 1.0;
        let next = gross - cost;
        if !(next > 0.0) {
            return Err(Error::Numerical(format!("portfolio value {next} on day {day}")));
        }
        holdings = grown.into_iter().map(|(s, v)| (s, v * next / gross)).collect();
        steps.push(BacktestStep {
            day,
            selected,
            value_before: value,
            bought,
            sold,
            cost,
            portfolio_return,
            value_after: next,
        });
        value = next;
        values.push(value);
    }
    let daily_returns: Vec<f64> = values.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    let sharpe = sharpe_ratio(&daily_returns, 0.0);
    let turnover = steps.iter().map(|s| (s.bought + s.sold) / s.value_before).sum::<f64>() / steps.len().max(1) as f64;
    Ok(BacktestResult {
        k: cfg.k,
        annual_return: annual_return(&values)?,
        sharpe_ratio: sharpe,
        sharpe_defined: sharpe.is_finite(),
        turnover,
        total_cost: steps.iter().map(|s| s.cost).sum(),
        values,
        daily_returns,
        short_days,
        steps,
    })
}

fn top_k(scores: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|r| r.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_hand_cases() {
        let m = regression_metrics(&[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!((m.rmse, m.mae, m.medae), (0.0, 0.0, 0.0));
        let m = regression_metrics(&[1.0, -1.0, 1.0, -1.0], &[0.0; 4]).unwrap();
        assert_eq!((m.rmse, m.mae, m.medae), (1.0, 1.0, 1.0));
        let m = regression_metrics(&[0.1, 0.2, 0.7], &[0.0; 3]).unwrap();
        assert!((m.rmse - (0.54f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((m.mae - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.medae - 0.2).abs() < 1e-15);
        assert!((m.rmse - 0.4243).abs() < 1e-4);
    }

    #[test]
    fn annual_return_cases() {
        assert_eq!(annual_return(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        let doubling: Vec<f64> = (0..=252).map(|t| 2f64.powf(t as f64 / 252.0)).collect();
        assert!((annual_return(&doubling).unwrap() - 1.0).abs() < 1e-12);
        let steady: Vec<f64> = (0..=252).map(|t| 1.001f64.powi(t)).collect();
        assert!((annual_return(&steady).unwrap() - 0.2865).abs() < 1e-4);
    }

    #[test]
    fn sharpe_cases() {
        assert!(sharpe_ratio(&[0.01; 10], 0.0).is_nan());
        assert_eq!(sharpe_ratio(&[0.01, -0.01, 0.01, -0.01], 0.0), 0.0);
    }

    #[test]
    fn flat_prices_keep_value_and_hand_compounding() {
        let mut scores = BTreeMap::new();
        scores.insert(0, vec![(0, 1.0), (1, 0.0)]);
        scores.insert(1, vec![(0, 1.0), (1, 0.0)]);
        let free = BacktestConfig {
            k: 1,
            buy_cost: 0.0,
            sell_cost: 0.0,
            initial_value: 1.0,
        };
        let r = backtest(&scores, |_, _| 0.0, &free).unwrap();
        assert_eq!(r.values, vec![1.0, 1.0, 1.0]);
        let r = backtest(&scores, |s, d| if s == 0 { [0.10, -0.05][d] } else { 0.0 }, &free).unwrap();
        assert!((r.values[2] - 1.045).abs() < 1e-12);
    }

    #[test]
    fn k_beyond_universe_holds_everything() {
        let mut scores = BTreeMap::new();
        scores.insert(3, vec![(0, 0.2), (1, 0.1)]);
        let cfg = BacktestConfig {
            k: 5,
            ..BacktestConfig::default()
        };
        let r = backtest(&scores, |_, _| 0.01, &cfg).unwrap();
        assert_eq!(r.short_days, vec![3]);
        assert_eq!(r.steps[0].selected, vec![0, 1]);
    }
}
