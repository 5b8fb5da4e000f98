//! Type-specific multi-head attention over an event's tokens, and the LSTM
//! over the events of the recent window.
//!
//! For head `k` and token embedding `w_x` of an event with type embedding `t`:
//!
//! ```text
//! u_x   = LeakyReLU(w_x W_k + b_k)
//! alpha = softmax over x of t . u_x
//! e_k   = sum_x alpha_x w_x
//! e     = [e_1 | ... | e_K]
//! ```
//!
//! Weights use the row-vector convention, so `W_k` is the transpose of the
//! column-vector form. The weighted sum runs over raw token embeddings, not
//! the projected `u_x`. There is no positional term and no score scaling.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::Event;
use crate::numerics::{init_uniform, lstm_batch, BoundParams, LstmSpec, LstmVars, ModelParams, Tape, Var};

pub const TOKEN_EMBEDDING: &str = "encoder.token_embedding";
pub const TYPE_EMBEDDING: &str = "encoder.type_embedding";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub num_tokens: usize,
    pub num_types: usize,
    /// Width of token and type embeddings.
    pub embed_dim: usize,
    pub heads: usize,
}

impl EncoderSpec {
    pub fn event_dim(&self) -> usize {
        self.embed_dim * self.heads
    }

    pub fn head_weight(k: usize) -> String {
        format!("encoder.head{k}.weight")
    }

    pub fn head_bias(k: usize) -> String {
        format!("encoder.head{k}.bias")
    }

    /// Embedding rows are one-hot lookups, so they are drawn with fan-in 1.
    pub fn init(&self, params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        let d = self.embed_dim;
        params.insert(TOKEN_EMBEDDING, init_uniform(&[self.num_tokens, d], 1, rng));
        params.insert(TYPE_EMBEDDING, init_uniform(&[self.num_types, d], 1, rng));
        for k in 0..self.heads {
            params.insert(Self::head_weight(k), init_uniform(&[d, d], d, rng));
            params.insert(Self::head_bias(k), init_uniform(&[d], d, rng));
        }
    }

    pub fn bind(&self, bound: &BoundParams) -> Result<EncoderVars> {
        let heads = (0..self.heads)
            .map(|k| Ok((bound.var(&Self::head_weight(k))?, bound.var(&Self::head_bias(k))?)))
            .collect::<Result<_>>()?;
        Ok(EncoderVars {
            tokens: bound.var(TOKEN_EMBEDDING)?,
            types: bound.var(TYPE_EMBEDDING)?,
            heads,
            spec: *self,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub tokens: Var,
    pub types: Var,
    pub heads: Vec<(Var, Var)>,
    pub spec: EncoderSpec,
}

/// Flattened token layout of a list of events.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLayout {
    pub token_ids: Rc<Vec<usize>>,
    /// Type id of the event owning each token.
    pub token_types: Rc<Vec<usize>>,
    /// Event `e` owns tokens `offsets[e]..offsets[e + 1]`.
    pub offsets: Rc<Vec<usize>>,
}

impl TokenLayout {
    pub fn new<'a>(events: impl IntoIterator<Item = &'a Event>, num_tokens: usize, num_types: usize) -> Result<Self> {
        let mut token_ids = Vec::new();
        let mut token_types = Vec::new();
        let mut offsets = vec![0];
        for e in events {
            if e.tokens.is_empty() {
                return Err(Error::Invalid(format!(
                    "event of stock {} on day {} has no tokens",
                    e.stock, e.day
                )));
            }
            if e.type_id >= num_types {
                return Err(Error::Invalid(format!("type id {} outside vocabulary", e.type_id)));
            }
            if let Some(t) = e.tokens.iter().find(|&&t| t >= num_tokens) {
                return Err(Error::Invalid(format!("token id {t} outside vocabulary")));
            }
            token_ids.extend_from_slice(&e.tokens);
            token_types.extend(std::iter::repeat(e.type_id).take(e.tokens.len()));
            offsets.push(token_ids.len());
        }
        if offsets.len() == 1 {
            return Err(Error::Invalid("no events to encode".into()));
        }
        Ok(Self {
            token_ids: Rc::new(token_ids),
            token_types: Rc::new(token_types),
            offsets: Rc::new(offsets),
        })
    }

    pub fn num_events(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Event embeddings, one row per event of `layout` (`n x K*d`).
pub fn encode_events(tape: &mut Tape, enc: &EncoderVars, layout: &TokenLayout, slope: f64) -> Result<Var> {
    let w = tape.gather_rows(enc.tokens, layout.token_ids.clone())?;
    let t = tape.gather_rows(enc.types, layout.token_types.clone())?;
    let mut heads = Vec::with_capacity(enc.heads.len());
    for &(weight, bias) in &enc.heads {
        let alpha = head_attention(tape, w, t, (weight, bias), layout, slope)?;
        let weighted = tape.scale_rows(w, alpha)?;
        heads.push(tape.segment_sum(weighted, layout.offsets.clone())?);
    }
    tape.concat(&heads, 1)
}

/// Per-token attention weights of one head (`tokens x 1`).
fn head_attention(tape: &mut Tape, w: Var, t: Var, head: (Var, Var), layout: &TokenLayout, slope: f64) -> Result<Var> {
    let u = tape.matmul(w, head.0)?;
    let u = tape.add_row(u, head.1)?;
    let u = tape.leaky_relu(u, slope);
    let tu = tape.mul(t, u)?;
    let scores = tape.row_sum(tu);
    tape.segment_softmax(scores, layout.offsets.clone())
}

/// Embedding of a single event (`1 x K*d`).
pub fn encode_event(tape: &mut Tape, enc: &EncoderVars, event: &Event, slope: f64) -> Result<Var> {
    let layout = TokenLayout::new([event], enc.spec.num_tokens, enc.spec.num_types)?;
    encode_events(tape, enc, &layout, slope)
}

/// Attention weights of every head for one event, `heads x tokens`.
pub fn attention_weights(tape: &mut Tape, enc: &EncoderVars, event: &Event, slope: f64) -> Result<Vec<Vec<f64>>> {
    let layout = TokenLayout::new([event], enc.spec.num_tokens, enc.spec.num_types)?;
    let w = tape.gather_rows(enc.tokens, layout.token_ids.clone())?;
    let t = tape.gather_rows(enc.types, layout.token_types.clone())?;
    let mut out = Vec::new();
    for &head in &enc.heads {
        let alpha = head_attention(tape, w, t, head, &layout, slope)?;
        out.push(tape.value(alpha).data().to_vec());
    }
    Ok(out)
}

pub fn event_lstm_spec(spec: &EncoderSpec, hidden: usize) -> LstmSpec {
    LstmSpec::new("event_lstm", spec.event_dim(), hidden)
}

/// Event information `h` for one ordered window of events (`1 x h`).
pub fn encode_event_sequence(
    tape: &mut Tape,
    enc: &EncoderVars,
    lstm: &LstmVars,
    events: &[Event],
    slope: f64,
) -> Result<Var> {
    let layout = TokenLayout::new(events, enc.spec.num_tokens, enc.spec.num_types)?;
    let embeddings = encode_events(tape, enc, &layout, slope)?;
    lstm_batch(tape, lstm, embeddings, &[(0..events.len()).collect()])
}
