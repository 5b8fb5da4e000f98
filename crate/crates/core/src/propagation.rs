//! Stock-dependent effect gating, graph propagation and the prediction head.
//!
//! ```text
//! D_ii  = LeakyReLU(a . [h_i^c | h_i])         H_0 = D H
//! gcn   H_1 = Ã H_0                             (Ã normalized over the union of relations)
//! rgcn  H_1 = sum_r Ã^r H_0 W_r
//! rest  Ā^r_ij = LeakyReLU(b_r . [h_i^c | h_j^c])  on edges j -> i
//!       H_l = sum_r Ā^r H_{l-1} W_r
//! head  p = [H_0 | ... | H_l] w + b
//! ```
//!
//! `D` here is the effect-strength diagonal, unrelated to the degree matrix
//! inside `Ã`. Adjacency stays sparse: every product with a graph matrix is
//! an edge-list aggregation. Hops share `W_r` and `Ā^r` unless a per-hop
//! mapping is configured, and no nonlinearity sits between hops.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::market_data::{normalized_edge_weights, StockGraph};
use crate::numerics::{Tape, Tensor, Var};

/// Edge lists of one relation over the stocks of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationEdges {
    /// `(receiver, sender)`, sorted by receiver.
    pub edges: Rc<Vec<(usize, usize)>>,
    pub receivers: Rc<Vec<usize>>,
    pub senders: Rc<Vec<usize>>,
    /// `1/sqrt(deg_i deg_j)` per edge (`E x 1`).
    pub normalized: Tensor,
    /// Segment boundaries of edges sharing a receiver.
    pub receiver_offsets: Rc<Vec<usize>>,
}

impl RelationEdges {
    pub fn new(mut edges: Vec<(usize, usize)>, num_nodes: usize) -> Self {
        edges.sort_unstable();
        edges.dedup();
        let normalized = Tensor::column(normalized_edge_weights(&edges, num_nodes));
        let mut offsets = vec![0];
        for k in 1..edges.len() {
            if edges[k].0 != edges[k - 1].0 {
                offsets.push(k);
            }
        }
        if !edges.is_empty() {
            offsets.push(edges.len());
        }
        Self {
            receivers: Rc::new(edges.iter().map(|e| e.0).collect()),
            senders: Rc::new(edges.iter().map(|e| e.1).collect()),
            edges: Rc::new(edges),
            normalized,
            receiver_offsets: Rc::new(offsets),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Propagation structure of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGraph {
    pub num_nodes: usize,
    pub relations: Vec<RelationEdges>,
    pub union: RelationEdges,
}

impl LocalGraph {
    pub fn from_graph(graph: &StockGraph) -> Self {
        let n = graph.num_stocks();
        let relations = (0..graph.relations().len())
            .map(|r| RelationEdges::new(graph.edges(r).collect(), n))
            .collect();
        Self {
            num_nodes: n,
            relations,
            union: RelationEdges::new(graph.union_edges(), n),
        }
    }
}

fn zeros_like(tape: &mut Tape, x: Var) -> Var {
    let shape = tape.value(x).shape().to_vec();
    tape.constant(Tensor::zeros(&shape))
}

fn sum_all(tape: &mut Tape, parts: Vec<Var>, fallback: Var) -> Result<Var> {
    let mut it = parts.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(fallback);
    };
    for p in it {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

/// Returns `(H_0, D)` where `D` is the `S x 1` effect strength.
pub fn stock_dependent_effect(tape: &mut Tape, scorer: Var, contexts: Var, infos: Var, slope: f64) -> Result<(Var, Var)> {
    let (cv, iv) = (tape.value(contexts), tape.value(infos));
    if cv.rows() != iv.rows() {
        return Err(Error::Shape(format!(
            "{} contexts but {} event infos",
            cv.rows(),
            iv.rows()
        )));
    }
    let joined = tape.concat(&[contexts, infos], 1)?;
    let score = tape.matmul(joined, scorer)?;
    let strength = tape.leaky_relu(score, slope);
    let h0 = tape.scale_rows(infos, strength)?;
    Ok((h0, strength))
}

/// `Ã H` over the union of all relations.
pub fn propagate_gcn(tape: &mut Tape, h_prev: Var, graph: &LocalGraph) -> Result<Var> {
    if graph.union.is_empty() {
        return Ok(zeros_like(tape, h_prev));
    }
    let w = tape.constant(graph.union.normalized.clone());
    tape.edge_aggregate(w, h_prev, graph.union.edges.clone())
}

/// `sum_r Ã^r H W_r`.
pub fn propagate_rgcn(tape: &mut Tape, h_prev: Var, graph: &LocalGraph, mappings: &[Var]) -> Result<Var> {
    check_relations(graph, mappings.len())?;
    let mut parts = Vec::new();
    for (rel, &w_r) in graph.relations.iter().zip(mappings) {
        if rel.is_empty() {
            continue;
        }
        let mapped = tape.matmul(h_prev, w_r)?;
        let weights = tape.constant(rel.normalized.clone());
        parts.push(tape.edge_aggregate(weights, mapped, rel.edges.clone())?);
    }
    let zero = zeros_like(tape, h_prev);
    sum_all(tape, parts, zero)
}

/// `Ā^r` on the edges of each relation (`E_r x 1`); `None` for relations
/// without edges in this frame.
pub fn dynamic_weights(
    tape: &mut Tape,
    contexts: Var,
    graph: &LocalGraph,
    scorers: &[Var],
    slope: f64,
    neighbor_softmax: bool,
) -> Result<Vec<Option<Var>>> {
    check_relations(graph, scorers.len())?;
    let mut out = Vec::with_capacity(scorers.len());
    for (rel, &b_r) in graph.relations.iter().zip(scorers) {
        if rel.is_empty() {
            out.push(None);
            continue;
        }
        let receiver = tape.gather_rows(contexts, rel.receivers.clone())?;
        let sender = tape.gather_rows(contexts, rel.senders.clone())?;
        let pair = tape.concat(&[receiver, sender], 1)?;
        let score = tape.matmul(pair, b_r)?;
        let mut w = tape.leaky_relu(score, slope);
        if neighbor_softmax {
            w = tape.segment_softmax(w, rel.receiver_offsets.clone())?;
        }
        out.push(Some(w));
    }
    Ok(out)
}

/// One hop `sum_r Ā^r H W_r`.
pub fn propagate_dynamic(
    tape: &mut Tape,
    h_prev: Var,
    graph: &LocalGraph,
    weights: &[Option<Var>],
    mappings: &[Var],
) -> Result<Var> {
    check_relations(graph, mappings.len())?;
    check_relations(graph, weights.len())?;
    let mut parts = Vec::new();
    for ((rel, w), &w_r) in graph.relations.iter().zip(weights).zip(mappings) {
        let Some(w) = *w else { continue };
        let mapped = tape.matmul(h_prev, w_r)?;
        parts.push(tape.edge_aggregate(w, mapped, rel.edges.clone())?);
    }
    let zero = zeros_like(tape, h_prev);
    sum_all(tape, parts, zero)
}

/// `[H_0 | ... | H_l] w + b`, one prediction per row (`S x 1`).
pub fn aggregate_and_predict(tape: &mut Tape, layers: &[Var], weight: Var, bias: Var) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Invalid("no effect matrices to aggregate".into()));
    }
    let joined = tape.concat(layers, 1)?;
    let (width, rows) = (tape.value(joined).cols(), tape.value(weight).rows());
    if width != rows {
        return Err(Error::Shape(format!(
            "head expects width {rows} but {} layers give {width}",
            layers.len()
        )));
    }
    let p = tape.matmul(joined, weight)?;
    tape.add_row(p, bias)
}

fn check_relations(graph: &LocalGraph, n: usize) -> Result<()> {
    if graph.relations.len() != n {
        return Err(Error::Shape(format!(
            "graph has {} relations but {} parameter sets were given",
            graph.relations.len(),
            n
        )));
    }
    Ok(())
}
