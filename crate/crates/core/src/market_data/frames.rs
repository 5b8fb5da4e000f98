//! Per-date model inputs.

use std::collections::BTreeMap;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use super::feedback::{feedback_within_gap, FeedbackVector};
use super::graph::StockGraph;
use super::ingest::{Dataset, Vocabulary, PAD};
use super::labels::{compute_labels, normalize_labels_per_date, TrendLabel};
use super::Event;
use crate::error::{Error, Result};

/// Index of the padding event in [`FrameSet::events`].
pub const PADDING_EVENT: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowUnit {
    #[default]
    TradingDays,
    CalendarDays,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    /// Days `t-w+1 ..= t` feed the event sequence.
    pub event_window: usize,
    /// Days `t-w ..= t-1` feed the context.
    pub context_window: usize,
    /// Events whose next bar is further away than this get no feedback.
    pub max_feedback_gap: usize,
    pub unit: WindowUnit,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            event_window: 3,
            context_window: 30,
            max_feedback_gap: 5,
            unit: WindowUnit::TradingDays,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.event_window == 0 || self.context_window == 0 || self.max_feedback_gap == 0 {
            return Err(Error::Invalid("frame windows and feedback gap must be positive".into()));
        }
        Ok(())
    }
}

/// One stock's inputs on one date. Event lists index [`FrameSet::events`]
/// and hold [`PADDING_EVENT`] alone when the window is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StockSlot {
    pub stock: usize,
    pub events: Vec<usize>,
    pub context_events: Vec<usize>,
    pub context_feedback: Vec<FeedbackVector>,
    pub label: Option<TrendLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketFrame {
    pub day: usize,
    /// Stocks with a bar on `day`, ascending.
    pub stocks: Vec<StockSlot>,
}

impl MarketFrame {
    pub fn num_labeled(&self) -> usize {
        self.stocks.iter().filter(|s| s.label.is_some()).count()
    }
}

#[derive(Debug, Clone)]
pub struct FrameSet {
    /// Encoded events; slot 0 is the padding event.
    pub events: Vec<Event>,
    pub frames: Vec<MarketFrame>,
    pub graph: StockGraph,
    pub vocabulary: Vocabulary,
}

impl FrameSet {
    /// Frames whose day lies in `[from, to)`.
    pub fn frames_between(&self, from: usize, to: usize) -> Vec<&MarketFrame> {
        self.frames.iter().filter(|f| f.day >= from && f.day < to).collect()
    }
}

/// Assembles one frame per trading date with at least one labeled stock.
pub fn build_frames(data: &Dataset, vocabulary: &Vocabulary, cfg: &FrameConfig) -> Result<FrameSet> {
    cfg.validate()?;
    let mut events = vec![Event {
        stock: 0,
        day: 0,
        type_id: PAD,
        tokens: vec![PAD],
    }];
    // (stock, day) -> event ids in order
    let mut by_stock: Vec<BTreeMap<usize, Vec<usize>>> = vec![BTreeMap::new(); data.num_stocks()];
    // feedback and the day of the bar it was measured on
    let mut feedback: Vec<Option<(FeedbackVector, usize)>> = vec![None];
    for e in &data.events {
        let id = events.len();
        events.push(vocabulary.encode(e));
        by_stock[e.stock].entry(e.day).or_default().push(id);
        feedback.push(event_feedback(data, e.stock, e.day, cfg.max_feedback_gap));
    }

    let mut raw: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for stock in 0..data.num_stocks() {
        let bars: Vec<_> = data.stock_bars(stock).copied().collect();
        for (day, label) in compute_labels(&bars) {
            raw.entry(day).or_default().push((stock, label));
        }
    }
    let labels = normalize_labels_per_date(&raw);

    let mut frames = Vec::with_capacity(labels.len());
    for (&day, day_labels) in &labels {
        let label_of: BTreeMap<usize, TrendLabel> = day_labels.iter().copied().collect();
        let event_from = window_start(data, day, cfg.event_window - 1, cfg.unit);
        let context_from = window_start(data, day, cfg.context_window, cfg.unit);
        let mut stocks = Vec::new();
        for stock in 0..data.num_stocks() {
            if data.bar(stock, day).is_none() {
                continue;
            }
            let mut window: Vec<usize> = by_stock[stock].range(event_from..=day).flat_map(|(_, ids)| ids.iter().copied()).collect();
            if window.is_empty() {
                window.push(PADDING_EVENT);
            }
            let mut context_events = Vec::new();
            let mut context_feedback = Vec::new();
            for (_, ids) in by_stock[stock].range(context_from..day) {
                for &id in ids {
                    if let Some((f, measured)) = feedback[id] {
                        if measured <= day {
                            context_events.push(id);
                            context_feedback.push(f);
                        }
                    }
                }
            }
            if context_events.is_empty() {
                context_events.push(PADDING_EVENT);
                context_feedback.push(FeedbackVector::zero());
            }
            stocks.push(StockSlot {
                stock,
                events: window,
                context_events,
                context_feedback,
                label: label_of.get(&stock).copied(),
            });
        }
        frames.push(MarketFrame { day, stocks });
    }
    Ok(FrameSet {
        events,
        frames,
        graph: data.graph.clone(),
        vocabulary: vocabulary.clone(),
    })
}

fn event_feedback(data: &Dataset, stock: usize, day: usize, max_gap: usize) -> Option<(FeedbackVector, usize)> {
    let current = data.bar(stock, day)?;
    let next = (day + 1..=day + max_gap).find_map(|d| data.bar(stock, d));
    let Some(next) = next else {
        log::debug!("no bar within {max_gap} days after event of stock {stock} on day {day}");
        return None;
    };
    match feedback_within_gap(current, next, max_gap) {
        Ok(f) => Some((f, next.day)),
        Err(e) => {
            log::warn!("event feedback skipped: {e}");
            None
        }
    }
}

/// First day index covered by a window reaching `span` units back from `day`.
fn window_start(data: &Dataset, day: usize, span: usize, unit: WindowUnit) -> usize {
    match unit {
        WindowUnit::TradingDays => day.saturating_sub(span),
        WindowUnit::CalendarDays => {
            let first = data.calendar[day] - Duration::days(span as i64);
            data.calendar.partition_point(|d| *d < first)
        }
    }
}
