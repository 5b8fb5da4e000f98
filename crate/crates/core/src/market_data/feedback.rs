use serde::{Deserialize, Serialize};

use super::PriceBar;
use crate::error::{Error, Result};

/// Relative change of the six daily fields from the event day to the next
/// trading day, ordered open, close, high, low, volume, VWAP.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeedbackVector(pub [f64; 6]);

impl FeedbackVector {
    pub const FIELDS: [&'static str; 6] = ["open", "close", "high", "low", "volume", "vwap"];

    pub fn zero() -> Self {
        Self([0.0; 6])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Feedback between two consecutive trading-day bars of one stock.
pub fn compute_feedback(current: &PriceBar, next: &PriceBar) -> Result<FeedbackVector> {
    feedback_within_gap(current, next, 1)
}

/// Like [`compute_feedback`] but accepts a next bar up to `max_gap` trading
/// days later (trading suspensions).
pub fn feedback_within_gap(current: &PriceBar, next: &PriceBar, max_gap: usize) -> Result<FeedbackVector> {
    if current.stock != next.stock {
        return Err(Error::Invalid(format!(
            "feedback bars belong to different stocks ({} and {})",
            current.stock, next.stock
        )));
    }
    if next.day <= current.day || next.day - current.day > max_gap {
        return Err(Error::Invalid(format!(
            "feedback bars on days {} and {} are not consecutive",
            current.day, next.day
        )));
    }
    if current.volume <= 0.0 {
        return Err(Error::Invalid(format!(
            "zero volume for stock {} on day {}",
            current.stock, current.day
        )));
    }
    let a = current.fields();
    let b = next.fields();
    let mut out = [0.0; 6];
    for k in 0..6 {
        if a[k] <= 0.0 {
            return Err(Error::Invalid(format!(
                "non-positive {} for stock {} on day {}",
                FeedbackVector::FIELDS[k],
                current.stock,
                current.day
            )));
        }
        out[k] = (b[k] - a[k]) / a[k];
    }
    Ok(FeedbackVector(out))
}
