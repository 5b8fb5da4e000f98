//! Market data model: ingestion, derived quantities, frames and the
//! synthetic market generator.

mod feedback;
mod frames;
mod graph;
mod ingest;
mod labels;
mod synthetic;

pub use feedback::{compute_feedback, feedback_within_gap, FeedbackVector};
pub use frames::{build_frames, FrameConfig, FrameSet, MarketFrame, StockSlot, WindowUnit, PADDING_EVENT};
pub use graph::{
    build_adjacency, normalize_adjacency, normalized_edge_weights, RelationKind, RelationRecord, StockGraph,
};
pub use ingest::{
    load_dataset, read_events, read_prices, read_relations, write_dataset, Dataset, DatedEvent, PriceRecord, RawEvent,
    Vocabulary, VocabularyConfig, PAD, UNK,
};
pub use labels::{compute_labels, label_moments, normalize_labels_per_date, TrendLabel};
pub use synthetic::{
    generate_synthetic_market, PlantedEvent, PlantedProcess, RelationSpec, SyntheticMarket, SyntheticSpec, SyntheticTruth,
};

use serde::{Deserialize, Serialize};

/// One daily bar. `day` is the trading-day ordinal in the dataset calendar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBar {
    pub stock: usize,
    pub day: usize,
    pub open: f64,
    pub close: f64,
    pub high: f64,
    pub low: f64,
    pub volume: f64,
    pub vwap: f64,
}

impl PriceBar {
    /// Fields in feedback order: open, close, high, low, volume, vwap.
    pub fn fields(&self) -> [f64; 6] {
        [self.open, self.close, self.high, self.low, self.volume, self.vwap]
    }
}

/// An event after vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub stock: usize,
    pub day: usize,
    pub type_id: usize,
    pub tokens: Vec<usize>,
}
