//! Relational event-driven stock trend forecasting.
//!
//! Events are encoded with type-specific multi-head attention and an LSTM,
//! gated by a per-stock context learned from past events and their market
//! feedback, then propagated over a multi-relation stock graph before a linear
//! head predicts each stock's next-day return.

pub mod context_encoder;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod event_encoder;
pub mod market_data;
pub mod model;
pub mod numerics;
pub mod propagation;
pub mod training;

pub use error::{Error, Result};
