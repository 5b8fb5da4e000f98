//! Model assembly: the six variants over shared encoder modules, and the
//! per-frame input batches they consume.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context_encoder::{context_lstm_specs, encode_contexts, ContextMode, ContextVars, FEEDBACK_DIM};
use crate::error::{Error, Result};
use crate::event_encoder::{encode_events, event_lstm_spec, EncoderSpec, TokenLayout};
use crate::market_data::{FrameSet, MarketFrame, TrendLabel};
use crate::numerics::{
    init_uniform, lstm_batch, BoundParams, GradientMap, LstmSpec, ModelParams, Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE,
};
use crate::propagation::{
    aggregate_and_predict, dynamic_weights, propagate_dynamic, propagate_gcn, propagate_rgcn, stock_dependent_effect,
    LocalGraph,
};

pub const EFFECT_SCORER: &str = "effect.scorer";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Head over the event information alone.
    EventDriven,
    /// Head over the context-gated event information.
    EventDrivenSd,
    /// One hop of normalized propagation over the union graph.
    Gcn,
    /// One hop of normalized per-relation propagation with mappings.
    Rgcn,
    /// Dynamic weights, one hop.
    RestL1,
    /// Dynamic weights with the configured hop count.
    Rest,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::EventDriven,
        Variant::EventDrivenSd,
        Variant::Gcn,
        Variant::Rgcn,
        Variant::RestL1,
        Variant::Rest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::EventDriven => "event-driven",
            Variant::EventDrivenSd => "event-driven-sd",
            Variant::Gcn => "gcn",
            Variant::Rgcn => "rgcn",
            Variant::RestL1 => "rest-l1",
            Variant::Rest => "rest",
        }
    }

    pub fn uses_context(self) -> bool {
        self != Variant::EventDriven
    }

    pub fn uses_mappings(self) -> bool {
        matches!(self, Variant::Rgcn | Variant::RestL1 | Variant::Rest)
    }

    pub fn uses_dynamic_weights(self) -> bool {
        matches!(self, Variant::RestL1 | Variant::Rest)
    }

    /// Number of propagation hops for a configured hop count.
    pub fn hops(self, configured: usize) -> usize {
        match self {
            Variant::EventDriven | Variant::EventDrivenSd => 0,
            Variant::Gcn | Variant::Rgcn | Variant::RestL1 => 1,
            Variant::Rest => configured,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Invalid(format!("unknown variant '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hops: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub context_mode: ContextMode,
    /// Separate `W_r` per hop instead of one shared across hops.
    pub per_hop_mapping: bool,
    /// Softmax the dynamic weights over each receiver's neighbours.
    pub neighbor_softmax: bool,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Rest,
            hops: 2,
            embed_dim: 128,
            heads: 4,
            hidden: 512,
            context_mode: ContextMode::Both,
            per_hop_mapping: false,
            neighbor_softmax: false,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(1..=4).contains(&self.hops) {
            problems.push(format!("hops {} outside 1..=4", self.hops));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.hidden == 0 {
            problems.push("embed_dim, heads and hidden must be positive".to_owned());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            problems.push(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(format!("model config: {}", problems.join("; "))))
        }
    }
}

/// A configured variant with its parameter layout.
#[derive(Debug, Clone)]
pub struct RestModel {
    pub config: ModelConfig,
    pub encoder: EncoderSpec,
    pub event_lstm: LstmSpec,
    pub context_lstms: (LstmSpec, LstmSpec),
    pub num_relations: usize,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub predictions: Var,
    pub event_info: Var,
    pub contexts: Option<Var>,
    pub strength: Option<Var>,
    pub layers: Vec<Var>,
}

impl RestModel {
    pub fn new(config: ModelConfig, num_tokens: usize, num_types: usize, num_relations: usize) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderSpec {
            num_tokens,
            num_types,
            embed_dim: config.embed_dim,
            heads: config.heads,
        };
        Ok(Self {
            event_lstm: event_lstm_spec(&encoder, config.hidden),
            context_lstms: context_lstm_specs(&encoder, config.hidden),
            config,
            encoder,
            num_relations,
        })
    }

    /// Sized for the vocabulary and graph of a frame set.
    pub fn for_frames(config: ModelConfig, frames: &FrameSet) -> Result<Self> {
        Self::new(
            config,
            frames.vocabulary.num_tokens(),
            frames.vocabulary.num_types(),
            frames.graph.relations().len(),
        )
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn hops(&self) -> usize {
        self.config.variant.hops(self.config.hops)
    }

    pub fn head_width(&self) -> usize {
        self.config.hidden * (self.hops() + 1)
    }

    pub fn mapping_name(&self, relation: usize, hop: usize) -> String {
        if self.config.per_hop_mapping && hop > 1 {
            format!("propagation.relation{relation}.mapping.hop{hop}")
        } else {
            format!("propagation.relation{relation}.mapping")
        }
    }

    pub fn scorer_name(relation: usize) -> String {
        format!("propagation.relation{relation}.scorer")
    }

    /// Fresh parameters; earlier groups draw first, so the hop count only
    /// affects the head.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let h = self.config.hidden;
        let v = self.config.variant;
        self.encoder.init(&mut p, &mut rng);
        self.event_lstm.init(&mut p, &mut rng);
        if v.uses_context() {
            self.context_lstms.0.init(&mut p, &mut rng);
            self.context_lstms.1.init(&mut p, &mut rng);
            p.insert(EFFECT_SCORER, init_uniform(&[3 * h, 1], 3 * h, &mut rng));
        }
        if v.uses_mappings() {
            let hops = if self.config.per_hop_mapping { self.hops() } else { 1 };
            for r in 0..self.num_relations {
                for hop in 1..=hops {
                    p.insert(self.mapping_name(r, hop), init_uniform(&[h, h], h, &mut rng));
                }
            }
        }
        if v.uses_dynamic_weights() {
            for r in 0..self.num_relations {
                p.insert(Self::scorer_name(r), init_uniform(&[4 * h, 1], 4 * h, &mut rng));
            }
        }
        let width = self.head_width();
        p.insert(HEAD_WEIGHT, init_uniform(&[width, 1], width, &mut rng));
        p.insert(HEAD_BIAS, init_uniform(&[1], width, &mut rng));
        p
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, batch: &FrameBatch) -> Result<Forward> {
        let slope = self.config.leaky_slope;
        let enc = self.encoder.bind(bound)?;
        let embeddings = encode_events(tape, &enc, &batch.layout, slope)?;
        let event_lstm = self.event_lstm.bind(bound)?;
        let info = lstm_batch(tape, &event_lstm, embeddings, &batch.windows)?;
        let head_w = bound.var(HEAD_WEIGHT)?;
        let head_b = bound.var(HEAD_BIAS)?;
        let variant = self.config.variant;
        if !variant.uses_context() {
            let predictions = aggregate_and_predict(tape, &[info], head_w, head_b)?;
            return Ok(Forward {
                predictions,
                event_info: info,
                contexts: None,
                strength: None,
                layers: vec![info],
            });
        }

        let ctx = ContextVars {
            events: self.context_lstms.0.bind(bound)?,
            feedback: self.context_lstms.1.bind(bound)?,
            mode: self.config.context_mode,
        };
        let feedback = tape.constant(batch.context_feedback.clone());
        let contexts = encode_contexts(tape, &ctx, embeddings, batch.context_rows.clone(), feedback, &batch.context_seqs)?;
        let (h0, strength) = stock_dependent_effect(tape, bound.var(EFFECT_SCORER)?, contexts, info, slope)?;
        let mut layers = vec![h0];
        let mappings = |hop: usize| -> Result<Vec<Var>> {
            (0..self.num_relations).map(|r| bound.var(&self.mapping_name(r, hop))).collect()
        };
        match variant {
            Variant::EventDriven | Variant::EventDrivenSd => {}
            Variant::Gcn => layers.push(propagate_gcn(tape, h0, &batch.graph)?),
            Variant::Rgcn => layers.push(propagate_rgcn(tape, h0, &batch.graph, &mappings(1)?)?),
            Variant::RestL1 | Variant::Rest => {
                let scorers: Vec<Var> = (0..self.num_relations)
                    .map(|r| bound.var(&Self::scorer_name(r)))
                    .collect::<Result<_>>()?;
                let weights = dynamic_weights(tape, contexts, &batch.graph, &scorers, slope, self.config.neighbor_softmax)?;
                let mut h = h0;
                for hop in 1..=self.hops() {
                    h = propagate_dynamic(tape, h, &batch.graph, &weights, &mappings(hop)?)?;
                    layers.push(h);
                }
            }
        }
        let predictions = aggregate_and_predict(tape, &layers, head_w, head_b)?;
        Ok(Forward {
            predictions,
            event_info: info,
            contexts: Some(contexts),
            strength: Some(strength),
            layers,
        })
    }

    /// Predictions for every stock of the batch, no gradients recorded.
    pub fn predict(&self, params: &ModelParams, batch: &FrameBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, batch)?;
        Ok(tape.value(out.predictions).data().to_vec())
    }

    /// Builds the per-date mean squared error against normalized labels.
    pub fn batch_loss(&self, tape: &mut Tape, bound: &BoundParams, batch: &FrameBatch) -> Result<Var> {
        if batch.labeled_rows.is_empty() {
            return Err(Error::Invalid(format!("frame on day {} has no labels", batch.day)));
        }
        let out = self.forward(tape, bound, batch)?;
        let p = tape.gather_rows(out.predictions, batch.labeled_rows.clone())?;
        let target = tape.constant(batch.targets.clone());
        let diff = tape.sub(p, target)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq);
        Ok(tape.scale(total, 1.0 / batch.labeled_rows.len() as f64))
    }

    /// Mean squared error of one frame and its gradient.
    pub fn loss_and_gradients(&self, params: &ModelParams, batch: &FrameBatch) -> Result<(f64, GradientMap)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let loss = self.batch_loss(&mut tape, &bound, batch)?;
        let value = tape.value(loss).item()?;
        let mut grads = tape.backward(loss)?;
        Ok((value, bound.gradients(&tape, &mut grads)))
    }

    pub fn loss(&self, params: &ModelParams, batch: &FrameBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let loss = self.batch_loss(&mut tape, &bound, batch)?;
        tape.value(loss).item()
    }
}

/// Everything the model needs for one frame, with indices resolved.
#[derive(Debug, Clone)]
pub struct FrameBatch {
    pub day: usize,
    pub stocks: Vec<usize>,
    pub labels: Vec<Option<TrendLabel>>,
    pub layout: TokenLayout,
    /// Rows of `layout` forming each stock's event window.
    pub windows: Vec<Vec<usize>>,
    /// Row of `layout` for each history entry.
    pub context_rows: Rc<Vec<usize>>,
    /// `C x 6` feedback of each history entry.
    pub context_feedback: Tensor,
    pub context_seqs: Vec<Vec<usize>>,
    pub graph: LocalGraph,
    pub labeled_rows: Rc<Vec<usize>>,
    /// Normalized labels of `labeled_rows` (`L x 1`).
    pub targets: Tensor,
}

impl FrameBatch {
    pub fn new(set: &FrameSet, frame: &MarketFrame) -> Result<Self> {
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut order = Vec::new();
        let mut row_of = |id: usize| {
            *local.entry(id).or_insert_with(|| {
                order.push(id);
                order.len() - 1
            })
        };
        let mut windows = Vec::with_capacity(frame.stocks.len());
        let mut context_rows = Vec::new();
        let mut feedback = Vec::new();
        let mut context_seqs = Vec::with_capacity(frame.stocks.len());
        for slot in &frame.stocks {
            windows.push(slot.events.iter().map(|&e| row_of(e)).collect());
            let start = context_rows.len();
            for (&e, f) in slot.context_events.iter().zip(&slot.context_feedback) {
                context_rows.push(row_of(e));
                feedback.extend_from_slice(&f.0);
            }
            context_seqs.push((start..context_rows.len()).collect());
        }
        let layout = TokenLayout::new(
            order.iter().map(|&id| &set.events[id]),
            set.vocabulary.num_tokens(),
            set.vocabulary.num_types(),
        )?;
        let stocks: Vec<usize> = frame.stocks.iter().map(|s| s.stock).collect();
        let graph = LocalGraph::from_graph(&set.graph.subgraph(&stocks));
        let labels: Vec<Option<TrendLabel>> = frame.stocks.iter().map(|s| s.label).collect();
        let labeled_rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        let targets = Tensor::column(labeled_rows.iter().filter_map(|&i| labels[i].map(|l| l.normalized)).collect());
        let c = context_rows.len();
        Ok(Self {
            day: frame.day,
            stocks,
            labels,
            layout,
            windows,
            context_rows: Rc::new(context_rows),
            context_feedback: Tensor::new(vec![c, FEEDBACK_DIM], feedback)?,
            context_seqs,
            graph,
            labeled_rows: Rc::new(labeled_rows),
            targets,
        })
    }

    /// Batches for every frame of the set, keyed by day.
    pub fn all(set: &FrameSet) -> Result<BTreeMap<usize, FrameBatch>> {
        set.frames.iter().map(|f| Ok((f.day, FrameBatch::new(set, f)?))).collect()
    }
}
