//! Objective, date splits and the SGD training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Prediction};
use crate::market_data::label_moments;
use crate::model::{FrameBatch, RestModel};
use crate::numerics::{ModelParams, Sgd, SgdConfig};

/// `(1/|T|) sum_t (1/|S_t|) sum_i (p - d)^2 + lambda ||Theta||^2` over dates
/// given as `(predictions, labels)` pairs.
pub fn rest_loss(dates: &[(Vec<f64>, Vec<f64>)], params: &ModelParams, lambda: f64) -> Result<f64> {
    if dates.is_empty() {
        return Err(Error::Invalid("loss over an empty set of dates".into()));
    }
    let mut total = 0.0;
    for (p, d) in dates {
        if p.len() != d.len() || p.is_empty() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels on a date",
                p.len(),
                d.len()
            )));
        }
        total += p.iter().zip(d).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
    }
    Ok(total / dates.len() as f64 + lambda * params.squared_norm())
}

/// Contiguous half-open day ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateSplit {
    pub train: (usize, usize),
    pub valid: (usize, usize),
    pub test: (usize, usize),
}

impl DateSplit {
    /// Splits the ordered frame days by fraction; the test range takes the rest.
    pub fn by_fraction(days: &[usize], train: f64, valid: f64) -> Result<Self> {
        if days.len() < 3 {
            return Err(Error::Invalid(format!("{} dates cannot be split three ways", days.len())));
        }
        if !(train > 0.0 && valid >= 0.0 && train + valid < 1.0) {
            return Err(Error::Invalid(format!("bad split fractions {train} / {valid}")));
        }
        let n = days.len();
        let n_train = ((n as f64 * train).round() as usize).clamp(1, n - 1);
        let n_valid = ((n as f64 * valid).round() as usize).min(n - n_train - 1);
        let end = days[n - 1] + 1;
        let valid_start = days[n_train];
        let test_start = days[n_train + n_valid];
        Ok(Self {
            train: (days[0], valid_start),
            valid: (valid_start, test_start),
            test: (test_start, end),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.train, self.valid, self.test];
        if ranges.iter().any(|r| r.0 > r.1) || self.train.1 > self.valid.0 || self.valid.1 > self.test.0 {
            return Err(Error::Invalid(format!("date ranges must be ordered and disjoint: {self:?}")));
        }
        if self.train.0 == self.train.1 || self.test.0 == self.test.1 {
            return Err(Error::Invalid("train and test ranges must be non-empty".into()));
        }
        Ok(())
    }

    /// Last day whose information may shape vocabularies.
    pub fn last_train_day(&self) -> usize {
        self.train.1.saturating_sub(1)
    }

    pub fn select<'a>(range: (usize, usize), batches: &'a BTreeMap<usize, FrameBatch>) -> Vec<&'a FrameBatch> {
        batches.range(range.0..range.1).map(|(_, b)| b).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-date MSE over the epoch's steps.
    pub train_mse: f64,
    /// `train_mse + lambda ||Theta||^2` at the end of the epoch.
    pub objective: f64,
    pub valid_rmse: Option<f64>,
    pub valid_rmse_normalized: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) of the kept parameters.
    pub best_epoch: usize,
    pub best_valid_rmse: Option<f64>,
    #[serde(skip)]
    pub best_params: ModelParams,
}

/// Trains from fresh parameters seeded with `cfg.seed`.
///
/// Every epoch visits the training dates in a seeded random order with one
/// step per date. The parameters with the lowest validation RMSE on raw
/// labels are kept; without validation dates the last epoch is kept.
pub fn train(
    model: &RestModel,
    train_batches: &[&FrameBatch],
    valid_batches: &[&FrameBatch],
    cfg: &SgdConfig,
    config_hash: &str,
) -> Result<TrainRun> {
    cfg.validate()?;
    if train_batches.is_empty() {
        return Err(Error::Invalid("no training dates".into()));
    }
    let mut params = model.init_params(cfg.seed);
    let mut sgd = Sgd::new(cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_batches.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=cfg.epochs {
        let last_stable = epoch.checked_sub(1).filter(|&e| e > 0);
        let diverged = |detail: String| Error::Diverged {
            epoch,
            last_stable,
            detail,
        };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let (loss, grads) = model.loss_and_gradients(&params, train_batches[k])?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss} on day {}", train_batches[k].day)));
            }
            sgd.step(&mut params, &grads).map_err(|e| match e {
                Error::Numerical(d) => diverged(d),
                other => other,
            })?;
            total += loss;
        }
        let train_mse = total / order.len() as f64;
        let objective = train_mse + cfg.l2_lambda * params.squared_norm();
        let (valid_rmse, valid_rmse_normalized) = if valid_batches.is_empty() {
            (None, None)
        } else {
            let report = evaluate(&predict_batches(model, &params, valid_batches)?)?;
            (Some(report.raw.rmse), Some(report.normalized.rmse))
        };
        if !objective.is_finite() || valid_rmse.is_some_and(|v| !v.is_finite()) {
            return Err(diverged("non-finite objective or validation error".into()));
        }
        log::info!(
            "epoch {epoch}: train mse {train_mse:.6}, valid rmse {}",
            valid_rmse.map_or("-".to_owned(), |v| format!("{v:.6}"))
        );
        let score = valid_rmse.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().map_or(true, |b| score < b.0 || valid_rmse.is_none()) {
            best = Some((score, epoch, params.clone()));
        }
        epochs.push(EpochRecord {
            epoch,
            train_mse,
            objective,
            valid_rmse,
            valid_rmse_normalized,
        });
    }
    let (score, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainRun {
        seed: cfg.seed,
        config_hash: config_hash.to_owned(),
        epochs,
        best_epoch,
        best_valid_rmse: score.is_finite().then_some(score),
        best_params,
    })
}

/// Predictions for the labeled stocks of each batch. Raw predictions map the
/// normalized output back with the date's realized label mean and spread.
pub fn predict_batches(model: &RestModel, params: &ModelParams, batches: &[&FrameBatch]) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for batch in batches {
        let p = model.predict(params, batch)?;
        let raw: Vec<f64> = batch.labels.iter().flatten().map(|l| l.raw).collect();
        let (mean, std) = label_moments(&raw);
        for (row, label) in batch.labels.iter().enumerate() {
            if let Some(l) = label {
                out.push(Prediction {
                    day: batch.day,
                    stock: batch.stocks[row],
                    prediction: p[row],
                    raw_prediction: mean + std * p[row],
                    label: l.raw,
                    normalized_label: l.normalized,
                });
            }
        }
    }
    Ok(out)
}

/// Scores of every stock in each batch, for ranking.
pub fn score_batches(
    model: &RestModel,
    params: &ModelParams,
    batches: &[&FrameBatch],
) -> Result<BTreeMap<usize, Vec<(usize, f64)>>> {
    batches
        .iter()
        .map(|b| {
            let p = model.predict(params, b)?;
            Ok((b.day, b.stocks.iter().copied().zip(p).collect()))
        })
        .collect()
}
