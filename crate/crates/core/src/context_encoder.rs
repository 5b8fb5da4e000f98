//! Stock context: the last hidden states of two LSTMs, one over the events
//! of the past window and one over the market feedback each event drew,
//! concatenated as `[h_events | h_feedback]`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_encoder::{encode_events, EncoderSpec, EncoderVars, TokenLayout};
use crate::market_data::{Event, FeedbackVector};
use crate::numerics::{lstm_batch, LstmSpec, LstmVars, Tape, Tensor, Var};

pub const FEEDBACK_DIM: usize = 6;

/// Which halves of the context are kept; the dropped half is zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    #[default]
    Both,
    EventOnly,
    FeedbackOnly,
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ContextMode::Both),
            "event-only" => Ok(ContextMode::EventOnly),
            "feedback-only" => Ok(ContextMode::FeedbackOnly),
            other => Err(Error::Invalid(format!(
                "unknown context mode '{other}' (expected both, event-only, feedback-only)"
            ))),
        }
    }
}

pub fn context_lstm_specs(encoder: &EncoderSpec, hidden: usize) -> (LstmSpec, LstmSpec) {
    (
        LstmSpec::new("context_event_lstm", encoder.event_dim(), hidden),
        LstmSpec::new("context_feedback_lstm", FEEDBACK_DIM, hidden),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct ContextVars {
    pub events: LstmVars,
    pub feedback: LstmVars,
    pub mode: ContextMode,
}

/// Contexts of many stocks at once (`S x 2h`).
///
/// Entry `c` of the history pairs embedding row `event_rows[c]` with row `c`
/// of `feedback`; `sequences[s]` lists the entries of stock `s` in order.
pub fn encode_contexts(
    tape: &mut Tape,
    ctx: &ContextVars,
    embeddings: Var,
    event_rows: Rc<Vec<usize>>,
    feedback: Var,
    sequences: &[Vec<usize>],
) -> Result<Var> {
    if tape.value(feedback).rows() != event_rows.len() {
        return Err(Error::Shape(format!(
            "{} history events but {} feedback vectors",
            event_rows.len(),
            tape.value(feedback).rows()
        )));
    }
    let n = sequences.len();
    let zeros = |tape: &mut Tape, h: usize| tape.constant(Tensor::zeros(&[n, h]));
    let h_events = match ctx.mode {
        ContextMode::FeedbackOnly => zeros(tape, ctx.events.hidden),
        _ => {
            let inputs = tape.gather_rows(embeddings, event_rows)?;
            lstm_batch(tape, &ctx.events, inputs, sequences)?
        }
    };
    let h_feedback = match ctx.mode {
        ContextMode::EventOnly => zeros(tape, ctx.feedback.hidden),
        _ => lstm_batch(tape, &ctx.feedback, feedback, sequences)?,
    };
    tape.concat(&[h_events, h_feedback], 1)
}

/// Context of one stock from its ordered history (`1 x 2h`).
pub fn encode_context(
    tape: &mut Tape,
    enc: &EncoderVars,
    ctx: &ContextVars,
    history_events: &[Event],
    history_feedback: &[FeedbackVector],
    slope: f64,
) -> Result<Var> {
    if history_events.len() != history_feedback.len() {
        return Err(Error::Invalid(format!(
            "{} history events but {} feedback vectors",
            history_events.len(),
            history_feedback.len()
        )));
    }
    let layout = TokenLayout::new(history_events, enc.spec.num_tokens, enc.spec.num_types)?;
    let embeddings = encode_events(tape, enc, &layout, slope)?;
    let m = history_events.len();
    let fb: Vec<f64> = history_feedback.iter().flat_map(|f| f.0).collect();
    let feedback = tape.constant(Tensor::new(vec![m, FEEDBACK_DIM], fb)?);
    encode_contexts(tape, ctx, embeddings, Rc::new((0..m).collect()), feedback, &[(0..m).collect()])
}
