//! Multi-relation stock graph.
//!
//! `A^r[i][j] = 1` means relation `r` runs from stock `j` to stock `i`, so
//! row `i` lists the stocks whose events can reach `i`. Edges are stored as
//! `(receiver, sender)` pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Industry,
    Business,
    Shareholder,
    /// Supplier to customer.
    Upstream,
    /// Customer to supplier; derived from every upstream record.
    Downstream,
}

impl RelationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::Industry => "industry",
            RelationKind::Business => "business",
            RelationKind::Shareholder => "shareholder",
            RelationKind::Upstream => "upstream",
            RelationKind::Downstream => "downstream",
        }
    }

    pub fn is_symmetric(self) -> bool {
        matches!(self, RelationKind::Industry | RelationKind::Business | RelationKind::Shareholder)
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Names accepted in `relations.csv`; downstream edges are implied.
impl FromStr for RelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "industry" => Ok(RelationKind::Industry),
            "business" => Ok(RelationKind::Business),
            "shareholder" => Ok(RelationKind::Shareholder),
            "upstream" => Ok(RelationKind::Upstream),
            other => Err(Error::Ingest(format!("unknown relation '{other}'"))),
        }
    }
}

/// One row of `relations.csv`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationRecord {
    pub relation: String,
    pub src: String,
    pub dst: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StockGraph {
    num_stocks: usize,
    relations: Vec<RelationKind>,
    edges: Vec<BTreeSet<(usize, usize)>>,
}

impl StockGraph {
    pub fn empty(num_stocks: usize, relations: Vec<RelationKind>) -> Self {
        let edges = vec![BTreeSet::new(); relations.len()];
        Self {
            num_stocks,
            relations,
            edges,
        }
    }

    pub fn num_stocks(&self) -> usize {
        self.num_stocks
    }

    pub fn relations(&self) -> &[RelationKind] {
        &self.relations
    }

    pub fn relation_index(&self, kind: RelationKind) -> Option<usize> {
        self.relations.iter().position(|&k| k == kind)
    }

    /// Adds `sender -> receiver` for relation slot `r`. Self-loops are dropped.
    pub fn add_edge(&mut self, r: usize, receiver: usize, sender: usize) {
        if receiver != sender {
            self.edges[r].insert((receiver, sender));
        }
    }

    pub fn has_edge(&self, r: usize, receiver: usize, sender: usize) -> bool {
        self.edges[r].contains(&(receiver, sender))
    }

    /// `(receiver, sender)` pairs of relation slot `r`, sorted.
    pub fn edges(&self, r: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges[r].iter().copied()
    }

    pub fn num_edges(&self, r: usize) -> usize {
        self.edges[r].len()
    }

    /// Edges of the union over relations.
    pub fn union_edges(&self) -> Vec<(usize, usize)> {
        let all: BTreeSet<(usize, usize)> = self.edges.iter().flatten().copied().collect();
        all.into_iter().collect()
    }

    pub fn dense(&self, r: usize) -> Vec<Vec<bool>> {
        let mut m = vec![vec![false; self.num_stocks]; self.num_stocks];
        for &(i, j) in &self.edges[r] {
            m[i][j] = true;
        }
        m
    }

    pub fn dense_union(&self) -> Vec<Vec<bool>> {
        let mut m = vec![vec![false; self.num_stocks]; self.num_stocks];
        for (i, j) in self.union_edges() {
            m[i][j] = true;
        }
        m
    }

    /// Graph induced on `stocks`, renumbered to positions in that list.
    pub fn subgraph(&self, stocks: &[usize]) -> StockGraph {
        let local: BTreeMap<usize, usize> = stocks.iter().enumerate().map(|(k, &s)| (s, k)).collect();
        let mut g = StockGraph::empty(stocks.len(), self.relations.clone());
        for r in 0..self.relations.len() {
            for &(i, j) in &self.edges[r] {
                if let (Some(&li), Some(&lj)) = (local.get(&i), local.get(&j)) {
                    g.add_edge(r, li, lj);
                }
            }
        }
        g
    }
}

/// Builds the graph from relation records.
///
/// Symmetric relations add both directions. An upstream record `src -> dst`
/// adds `A^upstream[dst][src]` and the reverse `A^downstream[src][dst]`.
/// Relation slots follow [`RelationKind`] order and only include kinds that
/// occur. Unknown names or stock ids are reported together.
pub fn build_adjacency(stocks: &[String], records: &[RelationRecord]) -> Result<StockGraph> {
    let index: BTreeMap<&str, usize> = stocks.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let mut problems = Vec::new();
    let mut parsed = Vec::new();
    for (row, rec) in records.iter().enumerate() {
        let kind = rec.relation.parse::<RelationKind>();
        let src = index.get(rec.src.trim()).copied();
        let dst = index.get(rec.dst.trim()).copied();
        match (kind, src, dst) {
            (Ok(k), Some(s), Some(d)) => parsed.push((k, s, d)),
            (k, s, d) => {
                let mut why = Vec::new();
                if k.is_err() {
                    why.push(format!("unknown relation '{}'", rec.relation));
                }
                if s.is_none() {
                    why.push(format!("unknown stock '{}'", rec.src));
                }
                if d.is_none() {
                    why.push(format!("unknown stock '{}'", rec.dst));
                }
                problems.push(format!("row {}: {}", row + 1, why.join(", ")));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Ingest(format!("relations: {}", problems.join("; "))));
    }

    let mut kinds: BTreeSet<RelationKind> = parsed.iter().map(|p| p.0).collect();
    if kinds.contains(&RelationKind::Upstream) {
        kinds.insert(RelationKind::Downstream);
    }
    let mut graph = StockGraph::empty(stocks.len(), kinds.into_iter().collect());
    for (kind, src, dst) in parsed {
        let r = graph.relation_index(kind).expect("kind registered above");
        graph.add_edge(r, dst, src);
        if kind.is_symmetric() {
            graph.add_edge(r, src, dst);
        } else {
            let down = graph.relation_index(RelationKind::Downstream).expect("implied by upstream");
            graph.add_edge(down, src, dst);
        }
    }
    Ok(graph)
}

/// `D^{-1/2} A D^{-1/2}` with row degrees `deg_i = sum_j A[i][j]`; a zero
/// degree contributes 0 instead of infinity.
pub fn normalize_adjacency(a: &[Vec<bool>]) -> Vec<Vec<f64>> {
    let inv_sqrt = inverse_sqrt_degrees(a.iter().map(|row| row.iter().filter(|&&x| x).count()));
    a.iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &x)| if x { inv_sqrt[i] * inv_sqrt[j] } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Symmetric-normalized weight for each `(receiver, sender)` edge, same
/// convention as [`normalize_adjacency`].
pub fn normalized_edge_weights(edges: &[(usize, usize)], num_nodes: usize) -> Vec<f64> {
    let mut deg = vec![0usize; num_nodes];
    for &(i, _) in edges {
        deg[i] += 1;
    }
    let inv_sqrt = inverse_sqrt_degrees(deg.into_iter());
    edges.iter().map(|&(i, j)| inv_sqrt[i] * inv_sqrt[j]).collect()
}

fn inverse_sqrt_degrees(degrees: impl Iterator<Item = usize>) -> Vec<f64> {
    degrees
        .map(|d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(r: &str, s: &str, d: &str) -> RelationRecord {
        RelationRecord {
            relation: r.into(),
            src: s.into(),
            dst: d.into(),
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("S{k}")).collect()
    }

    #[test]
    fn shared_industry_is_symmetric() {
        let g = build_adjacency(&names(3), &[rec("industry", "S0", "S2")]).unwrap();
        assert_eq!(g.relations(), &[RelationKind::Industry]);
        assert!(g.has_edge(0, 0, 2) && g.has_edge(0, 2, 0));
        assert_eq!(g.num_edges(0), 2);
    }

    #[test]
    fn upstream_implies_downstream() {
        let g = build_adjacency(&names(2), &[rec("upstream", "S0", "S1")]).unwrap();
        let up = g.relation_index(RelationKind::Upstream).unwrap();
        let down = g.relation_index(RelationKind::Downstream).unwrap();
        assert!(g.has_edge(up, 1, 0) && !g.has_edge(up, 0, 1));
        assert!(g.has_edge(down, 0, 1) && !g.has_edge(down, 1, 0));
    }

    #[test]
    fn empty_records_give_zero_adjacency() {
        let g = build_adjacency(&names(4), &[]).unwrap();
        assert!(g.dense_union().iter().flatten().all(|&x| !x));
    }

    #[test]
    fn duplicates_collapse_and_offenders_are_listed() {
        let g = build_adjacency(
            &names(2),
            &[rec("business", "S0", "S1"), rec("business", "S1", "S0"), rec("business", "S0", "S1")],
        )
        .unwrap();
        assert_eq!(g.num_edges(0), 2);

        let err = build_adjacency(&names(2), &[rec("rival", "S0", "S1"), rec("industry", "S0", "S9")])
            .unwrap_err()
            .to_string();
        assert!(err.contains("rival") && err.contains("S9"), "{err}");
    }

    #[test]
    fn normalization_small_cases() {
        let a = vec![vec![false, true], vec![true, false]];
        assert_eq!(normalize_adjacency(&a), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let a = vec![vec![false, false, false], vec![true, false, true], vec![false, true, false]];
        let n = normalize_adjacency(&a);
        assert!(n[0].iter().all(|&x| x == 0.0));
        // sender 0 has zero row degree, so its edge carries nothing
        assert_eq!(n[1][0], 0.0);
        assert!((n[1][2] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }
}
