//! Dense reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rest_core::market_data::{RelationKind, StockGraph};

pub type Dense = Vec<Vec<f64>>;

pub fn random_dense(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Dense {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, m) = (a.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for k in 0..b.len() {
            for j in 0..m {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn zeros(rows: usize, cols: usize) -> Dense {
    vec![vec![0.0; cols]; rows]
}

pub fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// `D^{-1/2} A D^{-1/2}` with row degrees; zero-degree nodes contribute 0.
pub fn sym_normalize(a: &[Vec<bool>]) -> Dense {
    let n = a.len();
    let deg: Vec<f64> = a.iter().map(|r| r.iter().filter(|&&x| x).count() as f64).collect();
    let mut out = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if a[i][j] && deg[i] > 0.0 && deg[j] > 0.0 {
                out[i][j] = 1.0 / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    out
}

/// Random multi-relation graph; symmetric kinds get mirrored edges.
pub fn random_graph(n: usize, kinds: &[RelationKind], density: f64, rng: &mut ChaCha8Rng) -> StockGraph {
    let mut g = StockGraph::empty(n, kinds.to_vec());
    for (r, kind) in kinds.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                if i == j || rng.gen::<f64>() >= density {
                    continue;
                }
                g.add_edge(r, i, j);
                if kind.is_symmetric() {
                    g.add_edge(r, j, i);
                }
            }
        }
    }
    g
}

pub fn to_dense(t: &rest_core::numerics::Tensor) -> Dense {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_diff(a: &Dense, b: &Dense) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// `Ā^r` as a dense matrix: LeakyReLU of `b_r . [c_i | c_j]` on edges.
pub fn dense_dynamic_weights(a: &[Vec<bool>], contexts: &Dense, scorer: &[f64], slope: f64) -> Dense {
    let n = a.len();
    let mut out = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if a[i][j] {
                let pair: Vec<f64> = contexts[i].iter().chain(&contexts[j]).copied().collect();
                let s: f64 = pair.iter().zip(scorer).map(|(x, y)| x * y).sum();
                out[i][j] = leaky(s, slope);
            }
        }
    }
    out
}

use rest_core::experiments::Experiment;
use rest_core::market_data::{generate_synthetic_market, FrameConfig, RelationSpec, SyntheticSpec, VocabularyConfig};
use rest_core::model::{FrameBatch, ModelConfig, RestModel, Variant};
use rest_core::numerics::{finite_difference_check, GradCheckConfig, GradCheckReport, Tape, Tensor, Var};
use rest_core::propagation::{dynamic_weights, propagate_dynamic, LocalGraph};
use rand::SeedableRng;
use rest_core::training::DateSplit;

pub fn prepare(spec: &SyntheticSpec, train: f64, valid: f64) -> Experiment {
    let market = generate_synthetic_market(spec).unwrap();
    Experiment::prepare(&market.dataset().unwrap(), &FrameConfig::default(), &VocabularyConfig::default(), |d| {
        DateSplit::by_fraction(d, train, valid)
    })
    .unwrap()
}

/// Three fully linked stocks under two relations, busy enough that every
/// frame has events, histories and labels.
pub fn three_stock_market() -> Experiment {
    let spec = SyntheticSpec {
        n_stocks: 3,
        n_days: 45,
        event_rate: 0.6,
        relations: vec![
            RelationSpec { kind: RelationKind::Industry, density: 1.0, attenuation: 0.4, reverse_attenuation: 0.0 },
            RelationSpec { kind: RelationKind::Business, density: 1.0, attenuation: 0.3, reverse_attenuation: 0.0 },
        ],
        seed: 7,
        ..SyntheticSpec::default()
    };
    prepare(&spec, 0.6, 0.2)
}

/// A late frame in which every stock has events in its window and history.
pub fn busy_batch(exp: &Experiment) -> &FrameBatch {
    exp.batches
        .values()
        .rev()
        .find(|b| {
            b.stocks.len() == 3
                && b.labeled_rows.len() == 3
                && b.windows.iter().all(|w| !w.is_empty())
                && b.context_seqs.iter().all(|c| c.len() >= 2)
        })
        .expect("a busy frame")
}

/// End-to-end finite-difference check of the full model, two hops.
pub fn full_model_gradcheck(exp: &Experiment) -> (GradCheckReport, usize) {
    let batch = busy_batch(exp);
    let cfg = ModelConfig {
        variant: Variant::Rest,
        hops: 2,
        embed_dim: 4,
        heads: 2,
        hidden: 3,
        ..ModelConfig::default()
    };
    let model = RestModel::for_frames(cfg, &exp.frames).unwrap();
    let params = model.init_params(21);
    let (_, analytic) = model.loss_and_gradients(&params, batch).unwrap();
    let report = finite_difference_check(
        |p| model.loss(p, batch),
        &params,
        &analytic,
        &GradCheckConfig { samples: 80, ..GradCheckConfig::default() },
    )
    .unwrap();
    (report, params.len())
}

/// One rebalancing date of the share-level ledger.
#[derive(Debug, Clone)]
pub struct LedgerDay {
    pub value_before: f64,
    pub cost: f64,
    pub value_after: f64,
    pub selected: Vec<usize>,
}

/// Share-level accounting against closing prices: on each date buy the top-k
/// at equal value, pay the costs at the next close out of the positions.
/// `prices[stock][day]` spans one more day than `scores`.
pub fn share_ledger(prices: &[Vec<f64>], scores: &[Vec<f64>], k: usize, buy: f64, sell: f64) -> Vec<LedgerDay> {
    let n = prices.len();
    let mut shares = vec![0.0; n];
    let mut value = 1.0;
    let mut out = Vec::new();
    for (day, s) in scores.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        let picked: Vec<usize> = order[..k.min(n)].to_vec();
        let mut target = vec![0.0; n];
        for &i in &picked {
            target[i] = value / picked.len() as f64 / prices[i][day];
        }
        let mut cost = 0.0;
        for i in 0..n {
            let traded = (target[i] - shares[i]) * prices[i][day];
            cost += if traded > 0.0 { buy * traded } else { -sell * traded };
        }
        let gross: f64 = (0..n).map(|i| target[i] * prices[i][day + 1]).sum();
        let after = gross - cost;
        for i in 0..n {
            shares[i] = target[i] * after / gross;
        }
        let mut selected = picked.clone();
        selected.sort_unstable();
        out.push(LedgerDay { value_before: value, cost, value_after: after, selected });
        value = after;
    }
    out
}

pub const SLOPE: f64 = 0.01;

pub fn t(rows: &Dense) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn col(v: &[f64]) -> Tensor {
    Tensor::column(v.to_vec())
}

pub struct Setup {
    pub graph: StockGraph,
    pub h0: Dense,
    pub contexts: Dense,
    pub mappings: Vec<Dense>,
    pub scorers: Vec<Vec<f64>>,
}

pub fn setup(n: usize, d: usize, c: usize, kinds: &[RelationKind], density: f64, seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = random_graph(n, kinds, density, &mut rng);
    Setup {
        h0: random_dense(n, d, &mut rng),
        contexts: random_dense(n, c, &mut rng),
        mappings: kinds.iter().map(|_| random_dense(d, d, &mut rng)).collect(),
        scorers: kinds.iter().map(|_| random_dense(2 * c, 1, &mut rng).concat()).collect(),
        graph,
    }
}

/// Runs `hops` dynamic hops on the tape and returns every `H_l`.
pub fn run_dynamic(s: &Setup, hops: usize, softmax: bool) -> Vec<Dense> {
    let mut tape = Tape::new();
    let local = LocalGraph::from_graph(&s.graph);
    let ctx = tape.constant(t(&s.contexts));
    let scorers: Vec<Var> = s.scorers.iter().map(|b| tape.constant(col(b))).collect();
    let maps: Vec<Var> = s.mappings.iter().map(|w| tape.constant(t(w))).collect();
    let weights = dynamic_weights(&mut tape, ctx, &local, &scorers, SLOPE, softmax).unwrap();
    let mut h = tape.constant(t(&s.h0));
    let mut out = vec![s.h0.clone()];
    for _ in 0..hops {
        h = propagate_dynamic(&mut tape, h, &local, &weights, &maps).unwrap();
        out.push(to_dense(tape.value(h)));
    }
    out
}

pub fn dense_dynamic_hops(s: &Setup, hops: usize) -> Vec<Dense> {
    let n = s.h0.len();
    let abar: Vec<Dense> = (0..s.graph.relations().len())
        .map(|r| dense_dynamic_weights(&s.graph.dense(r), &s.contexts, &s.scorers[r], SLOPE))
        .collect();
    let mut out = vec![s.h0.clone()];
    for _ in 0..hops {
        let prev = out.last().unwrap();
        let mut next = zeros(n, prev[0].len());
        for (a, w) in abar.iter().zip(&s.mappings) {
            next = add(&next, &matmul(a, &matmul(prev, w)));
        }
        out.push(next);
    }
    out
}

pub fn kinds(r: usize) -> Vec<RelationKind> {
    [RelationKind::Industry, RelationKind::Upstream, RelationKind::Business][..r].to_vec()
}

