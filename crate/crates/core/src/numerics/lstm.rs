//! Single-layer LSTM with zero initial state.
//!
//! Gate blocks are ordered input, forget, candidate, output:
//!
//! ```text
//! z = x W_in + h W_hid + b
//! i = sigmoid(z_i), f = sigmoid(z_f), g = tanh(z_g), o = sigmoid(z_o)
//! c' = f * c + i * g
//! h' = o * tanh(c')
//! ```

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::params::{init_uniform, BoundParams, ModelParams};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Parameter names and sizes of one LSTM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmSpec {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl LstmSpec {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn w_input(&self) -> String {
        format!("{}.w_input", self.prefix)
    }

    pub fn w_hidden(&self) -> String {
        format!("{}.w_hidden", self.prefix)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        let h4 = 4 * self.hidden;
        params.insert(self.w_input(), init_uniform(&[self.input, h4], self.input, rng));
        params.insert(self.w_hidden(), init_uniform(&[self.hidden, h4], self.hidden, rng));
        params.insert(self.bias(), init_uniform(&[h4], self.hidden, rng));
    }

    pub fn bind(&self, bound: &BoundParams) -> Result<LstmVars> {
        Ok(LstmVars {
            w_input: bound.var(&self.w_input())?,
            w_hidden: bound.var(&self.w_hidden())?,
            bias: bound.var(&self.bias())?,
            hidden: self.hidden,
        })
    }
}

/// LSTM weights bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden: usize,
}

/// Runs many variable-length sequences in lockstep and returns the final
/// hidden state of each as the rows of an `S x h` matrix.
///
/// `inputs` holds one input vector per row; `sequences[s]` lists the rows
/// forming sequence `s` in time order. Sequences that have ended keep their
/// state frozen while longer ones continue.
pub fn lstm_batch(tape: &mut Tape, lstm: &LstmVars, inputs: Var, sequences: &[Vec<usize>]) -> Result<Var> {
    if sequences.is_empty() {
        return Err(Error::Invalid("lstm over zero sequences".into()));
    }
    if let Some(s) = sequences.iter().position(Vec::is_empty) {
        return Err(Error::Invalid(format!(
            "lstm sequence {s} is empty; substitute the padding event"
        )));
    }
    let w_in_rows = tape.value(lstm.w_input).rows();
    if tape.value(inputs).cols() != w_in_rows {
        return Err(Error::Shape(format!(
            "lstm input width {} does not match weight rows {}",
            tape.value(inputs).cols(),
            w_in_rows
        )));
    }
    let n = sequences.len();
    let h = lstm.hidden;
    let steps = sequences.iter().map(Vec::len).max().unwrap_or(0);

    let mut hidden: Option<Var> = None;
    let mut cell = tape.constant(Tensor::zeros(&[n, h]));
    for t in 0..steps {
        let mask: Vec<bool> = sequences.iter().map(|s| t < s.len()).collect();
        let idx: Vec<usize> = sequences.iter().map(|s| s.get(t).copied().unwrap_or(s[0])).collect();
        let x = tape.gather_rows(inputs, Rc::new(idx))?;
        let mut z = tape.matmul(x, lstm.w_input)?;
        if let Some(hv) = hidden {
            let zh = tape.matmul(hv, lstm.w_hidden)?;
            z = tape.add(z, zh)?;
        }
        let z = tape.add_row(z, lstm.bias)?;
        let prev_c = cell;
        let hc = tape.lstm_cell(z, prev_c)?;
        let mut new_h = tape.slice_cols(hc, 0, h)?;
        let mut new_c = tape.slice_cols(hc, h, 2 * h)?;
        if mask.iter().any(|m| !m) {
            let mask = Rc::new(mask);
            let old_h = match hidden {
                Some(v) => v,
                None => tape.constant(Tensor::zeros(&[n, h])),
            };
            new_h = tape.select_rows(new_h, old_h, mask.clone())?;
            new_c = tape.select_rows(new_c, prev_c, mask)?;
        }
        hidden = Some(new_h);
        cell = new_c;
    }
    hidden.ok_or_else(|| Error::Invalid("lstm produced no steps".into()))
}

/// Final hidden state (`1 x h`) of one sequence of input vectors.
pub fn lstm_forward(tape: &mut Tape, lstm: &LstmVars, inputs: &[Var]) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::Invalid(
            "lstm over an empty sequence; substitute the padding event".into(),
        ));
    }
    let d = tape.value(inputs[0]).len();
    let rows: Vec<Var> = inputs
        .iter()
        .map(|&v| tape.reshape(v, vec![1, d]))
        .collect::<Result<_>>()?;
    let stacked = tape.concat(&rows, 0)?;
    lstm_batch(tape, lstm, stacked, &[(0..inputs.len()).collect()])
}
