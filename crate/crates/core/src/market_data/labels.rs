use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PriceBar;

/// Next-day close change rate and its per-date z-score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendLabel {
    pub raw: f64,
    pub normalized: f64,
}

/// Raw labels `(close[t+1] - close[t]) / close[t]` for one stock's bars,
/// keyed by day. Days whose next trading day has no bar get no label.
pub fn compute_labels(bars: &[PriceBar]) -> Vec<(usize, f64)> {
    let mut sorted: Vec<&PriceBar> = bars.iter().collect();
    sorted.sort_by_key(|b| b.day);
    sorted
        .windows(2)
        .filter(|w| w[1].day == w[0].day + 1)
        .map(|w| (w[0].day, (w[1].close - w[0].close) / w[0].close))
        .collect()
}

/// Z-scores each date's labels with the population standard deviation.
/// Dates with a single stock or zero spread map to 0.
pub fn normalize_labels_per_date(labels: &BTreeMap<usize, Vec<(usize, f64)>>) -> BTreeMap<usize, Vec<(usize, TrendLabel)>> {
    labels
        .iter()
        .map(|(&day, entries)| {
            let n = entries.len() as f64;
            let mean = entries.iter().map(|e| e.1).sum::<f64>() / n;
            let var = entries.iter().map(|e| (e.1 - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            // Rounding residue of identical labels, not a real spread.
            let degenerate = entries.len() < 2 || std < 1e-12;
            let out = entries
                .iter()
                .map(|&(stock, raw)| {
                    let normalized = if degenerate { 0.0 } else { (raw - mean) / std };
                    (stock, TrendLabel { raw, normalized })
                })
                .collect();
            (day, out)
        })
        .collect()
}

/// Per-date mean and population standard deviation of raw labels.
pub fn label_moments(entries: &[f64]) -> (f64, f64) {
    if entries.is_empty() {
        return (0.0, 0.0);
    }
    let n = entries.len() as f64;
    let mean = entries.iter().sum::<f64>() / n;
    let var = entries.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
