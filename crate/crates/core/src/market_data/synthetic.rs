//! Synthetic markets with planted own-event and cross-stock effects.
//!
//! Return of stock `i` from day `t` to `t+1`:
//!
//! ```text
//! E_i    = sum of base effects of i's events on days t-P+1 ..= t
//! s_i^t  = s_i + boost   if a fragile event hit i on days t-30 ..= t-1
//! own_i  = s_i^t * E_i
//! M      = sum_r alpha_r A^r
//! cross  = M own (+ M M own with two hops), times s_i^t when receiver scaling is on
//! r_i    = own_i + cross_i + N(0, sigma^2)
//! ```

use std::collections::BTreeSet;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{build_adjacency, RelationKind, RelationRecord, StockGraph};
use super::ingest::{Dataset, PriceRecord, RawEvent};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub kind: RelationKind,
    /// Probability that a given pair (ordered pair for upstream) is linked.
    pub density: f64,
    pub attenuation: f64,
    /// Attenuation of the implied downstream edges; upstream only.
    #[serde(default)]
    pub reverse_attenuation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_stocks: usize,
    pub n_days: usize,
    pub n_event_types: usize,
    /// Probability that a stock has an event on a given day.
    pub event_rate: f64,
    pub relations: Vec<RelationSpec>,
    /// Base effects are drawn with magnitude in `[0.3, 1.0] * effect_scale`.
    pub effect_scale: f64,
    pub sensitivity_range: (f64, f64),
    /// Number of event types that raise a stock's sensitivity for the
    /// following 30 days.
    pub fragile_types: usize,
    pub fragile_boost: f64,
    /// 1 or 2.
    pub hops: usize,
    pub persistence_days: usize,
    pub noise_std: f64,
    pub receiver_scaling: bool,
    /// Volume jumps by `volume_response * s_i^t` on an event day.
    pub volume_response: f64,
    pub volume_noise: f64,
    pub tokens_per_type: usize,
    pub shared_tokens: usize,
    pub tokens_per_event: (usize, usize),
    /// Probability that a token comes from the event type's own set.
    pub signature_prob: f64,
    pub start_date: NaiveDate,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_stocks: 8,
            n_days: 60,
            n_event_types: 4,
            event_rate: 0.15,
            relations: vec![
                RelationSpec {
                    kind: RelationKind::Industry,
                    density: 0.3,
                    attenuation: 0.4,
                    reverse_attenuation: 0.0,
                },
                RelationSpec {
                    kind: RelationKind::Business,
                    density: 0.2,
                    attenuation: 0.25,
                    reverse_attenuation: 0.0,
                },
            ],
            effect_scale: 0.02,
            sensitivity_range: (0.5, 1.5),
            fragile_types: 1,
            fragile_boost: 0.5,
            hops: 2,
            persistence_days: 3,
            noise_std: 0.005,
            receiver_scaling: true,
            volume_response: 0.5,
            volume_noise: 0.05,
            tokens_per_type: 6,
            shared_tokens: 30,
            tokens_per_event: (3, 8),
            signature_prob: 0.6,
            start_date: NaiveDate::from_ymd_opt(2013, 1, 1).expect("valid date"),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_stocks < 2 {
            problems.push("need at least 2 stocks".to_owned());
        }
        if self.n_days < 2 {
            problems.push("need at least 2 days".to_owned());
        }
        if self.n_event_types < 2 {
            problems.push("need at least 2 event types".to_owned());
        }
        if self.relations.is_empty() {
            problems.push("need at least 1 relation".to_owned());
        }
        if !(0.0..=1.0).contains(&self.event_rate) {
            problems.push(format!("event_rate {} outside [0, 1]", self.event_rate));
        }
        let mut kinds = BTreeSet::new();
        for r in &self.relations {
            if !(0.0..=1.0).contains(&r.density) {
                problems.push(format!("{} density {} outside [0, 1]", r.kind, r.density));
            }
            if r.kind == RelationKind::Downstream {
                problems.push("downstream edges come from upstream relations".to_owned());
            }
            if !kinds.insert(r.kind) {
                problems.push(format!("relation {} listed twice", r.kind));
            }
        }
        if !(1..=2).contains(&self.hops) {
            problems.push(format!("hops {} must be 1 or 2", self.hops));
        }
        if self.persistence_days == 0 {
            problems.push("persistence_days must be positive".to_owned());
        }
        if self.noise_std < 0.0 || self.volume_noise < 0.0 {
            problems.push("noise levels must be non-negative".to_owned());
        }
        let (lo, hi) = self.sensitivity_range;
        if lo > hi {
            problems.push("sensitivity_range is reversed".to_owned());
        }
        if self.fragile_types > self.n_event_types {
            problems.push("more fragile types than event types".to_owned());
        }
        let (tmin, tmax) = self.tokens_per_event;
        if tmin == 0 || tmin > tmax {
            problems.push("tokens_per_event must satisfy 1 <= min <= max".to_owned());
        }
        if !(0.0..=1.0).contains(&self.signature_prob) {
            problems.push("signature_prob outside [0, 1]".to_owned());
        }
        if self.tokens_per_type == 0 && self.signature_prob > 0.0 || self.shared_tokens == 0 && self.signature_prob < 1.0 {
            problems.push("token pools cannot be empty".to_owned());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(format!("synthetic spec: {}", problems.join("; "))))
        }
    }
}

/// Planted coefficients, written as `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub stocks: Vec<String>,
    pub event_types: Vec<String>,
    pub base_effects: Vec<f64>,
    pub fragile: Vec<bool>,
    pub fragile_boost: f64,
    pub sensitivities: Vec<f64>,
    /// Relation name and attenuation, one per graph relation slot.
    pub attenuation: Vec<(RelationKind, f64)>,
    pub hops: usize,
    pub persistence_days: usize,
    pub receiver_scaling: bool,
    pub noise_std: f64,
    /// Standard normal draws scaled by `noise_std`, per day then stock.
    pub noise: Vec<Vec<f64>>,
}

/// The noise-free part of the return equation.
#[derive(Debug, Clone)]
pub struct PlantedProcess {
    truth: SyntheticTruth,
    mixing: Vec<Vec<f64>>,
}

/// `(stock, day, type index)` of one event.
pub type PlantedEvent = (usize, usize, usize);

impl PlantedProcess {
    pub fn new(truth: SyntheticTruth, graph: &StockGraph) -> Result<Self> {
        let n = graph.num_stocks();
        let mut mixing = vec![vec![0.0; n]; n];
        for (r, &kind) in graph.relations().iter().enumerate() {
            let alpha = truth
                .attenuation
                .iter()
                .find(|a| a.0 == kind)
                .map(|a| a.1)
                .ok_or_else(|| Error::Invalid(format!("no attenuation for relation {kind}")))?;
            for (i, j) in graph.edges(r) {
                mixing[i][j] += alpha;
            }
        }
        Ok(Self { truth, mixing })
    }

    pub fn truth(&self) -> &SyntheticTruth {
        &self.truth
    }

    /// Sensitivity of every stock on `day` given all events.
    pub fn sensitivities(&self, events: &[PlantedEvent], day: usize) -> Vec<f64> {
        let mut s = self.truth.sensitivities.clone();
        let mut hit = vec![false; s.len()];
        for &(stock, d, ty) in events {
            if self.truth.fragile[ty] && d < day && d + 30 >= day {
                hit[stock] = true;
            }
        }
        for (v, h) in s.iter_mut().zip(hit) {
            if h {
                *v += self.truth.fragile_boost;
            }
        }
        s
    }

    /// Expected returns from `day` to `day + 1` for every stock.
    pub fn expected_returns(&self, events: &[PlantedEvent], day: usize) -> Vec<f64> {
        let n = self.mixing.len();
        let s = self.sensitivities(events, day);
        let p = self.truth.persistence_days;
        let mut effect = vec![0.0; n];
        for &(stock, d, ty) in events {
            if d <= day && d + p > day {
                effect[stock] += self.truth.base_effects[ty];
            }
        }
        let own: Vec<f64> = (0..n).map(|i| s[i] * effect[i]).collect();
        let one = mix(&self.mixing, &own);
        let mut cross = one.clone();
        if self.truth.hops >= 2 {
            for (c, v) in cross.iter_mut().zip(mix(&self.mixing, &one)) {
                *c += v;
            }
        }
        (0..n)
            .map(|i| {
                let scale = if self.truth.receiver_scaling { s[i] } else { 1.0 };
                own[i] + scale * cross[i]
            })
            .collect()
    }
}

fn mix(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticMarket {
    pub events: Vec<RawEvent>,
    pub prices: Vec<PriceRecord>,
    pub relations: Vec<RelationRecord>,
    pub truth: SyntheticTruth,
}

impl SyntheticMarket {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::from_records(self.events.clone(), self.prices.clone(), self.relations.clone())
    }

    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        super::ingest::write_dataset(dir, &self.events, &self.prices, &self.relations)?;
        let truth = serde_json::to_string_pretty(&self.truth)?;
        std::fs::write(dir.join("truth.json"), truth)?;
        Ok(())
    }
}

fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

pub fn generate_synthetic_market(spec: &SyntheticSpec) -> Result<SyntheticMarket> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_stocks;
    let stocks: Vec<String> = (0..n).map(|k| format!("S{k:03}")).collect();
    let type_names: Vec<String> = (0..spec.n_event_types).map(|k| format!("type{k:02}")).collect();

    let base_effects: Vec<f64> = (0..spec.n_event_types)
        .map(|k| {
            let magnitude = rng.gen_range(0.3..=1.0) * spec.effect_scale;
            if k % 2 == 0 {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect();
    let fragile: Vec<bool> = (0..spec.n_event_types).map(|k| k < spec.fragile_types).collect();
    let (lo, hi) = spec.sensitivity_range;
    let sensitivities: Vec<f64> = (0..n).map(|_| if hi > lo { rng.gen_range(lo..hi) } else { lo }).collect();

    let mut relations = Vec::new();
    let mut attenuation = Vec::new();
    for r in &spec.relations {
        attenuation.push((r.kind, r.attenuation));
        if r.kind == RelationKind::Upstream {
            attenuation.push((RelationKind::Downstream, r.reverse_attenuation));
        }
        for a in 0..n {
            for b in 0..n {
                let candidate = if r.kind.is_symmetric() { a < b } else { a != b };
                if candidate && rng.gen_bool(r.density) {
                    relations.push(RelationRecord {
                        relation: r.kind.as_str().to_owned(),
                        src: stocks[a].clone(),
                        dst: stocks[b].clone(),
                    });
                }
            }
        }
    }
    attenuation.sort_by_key(|a| a.0);
    let graph = build_adjacency(&stocks, &relations)?;
    // Slots without any edge are dropped by build_adjacency.
    attenuation.retain(|a| graph.relation_index(a.0).is_some());

    let mut planted = Vec::new();
    let mut events = Vec::new();
    let dates = business_days(spec.start_date, spec.n_days);
    let (tmin, tmax) = spec.tokens_per_event;
    for (day, date) in dates.iter().enumerate() {
        for (stock, name) in stocks.iter().enumerate() {
            if !rng.gen_bool(spec.event_rate) {
                continue;
            }
            let ty = rng.gen_range(0..spec.n_event_types);
            let count = rng.gen_range(tmin..=tmax);
            let tokens = (0..count)
                .map(|_| {
                    if rng.gen_bool(spec.signature_prob) {
                        format!("k{ty:02}_{}", rng.gen_range(0..spec.tokens_per_type))
                    } else {
                        format!("w{}", rng.gen_range(0..spec.shared_tokens))
                    }
                })
                .collect();
            planted.push((stock, day, ty));
            events.push(RawEvent {
                stock: name.clone(),
                date: *date,
                event_type: type_names[ty].clone(),
                tokens,
            });
        }
    }

    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let noise: Vec<Vec<f64>> = (0..spec.n_days)
        .map(|_| (0..n).map(|_| spec.noise_std * standard.sample(&mut rng)).collect())
        .collect();
    let truth = SyntheticTruth {
        stocks: stocks.clone(),
        event_types: type_names,
        base_effects,
        fragile,
        fragile_boost: spec.fragile_boost,
        sensitivities,
        attenuation,
        hops: spec.hops,
        persistence_days: spec.persistence_days,
        receiver_scaling: spec.receiver_scaling,
        noise_std: spec.noise_std,
        noise,
    };
    let process = PlantedProcess::new(truth.clone(), &graph)?;

    let mut event_today = vec![vec![false; n]; spec.n_days];
    for &(stock, day, _) in &planted {
        event_today[day][stock] = true;
    }
    let mut close: Vec<f64> = (0..n).map(|_| rng.gen_range(5.0..50.0)).collect();
    let base_volume: Vec<f64> = (0..n).map(|_| rng.gen_range(1e5..1e6_f64).round()).collect();
    let wiggle = Normal::new(0.0, spec.noise_std / 2.0 + f64::MIN_POSITIVE).expect("finite std");
    let volume_wiggle = Normal::new(0.0, spec.volume_noise + f64::MIN_POSITIVE).expect("finite std");
    let mut prices = Vec::with_capacity(n * spec.n_days);
    let mut open = close.clone();
    for day in 0..spec.n_days {
        let s = process.sensitivities(&planted, day);
        for stock in 0..n {
            let (o, c) = (open[stock], close[stock]);
            let vwap = 0.5 * (o + c);
            let high = o.max(c) * (1.0 + wiggle.sample(&mut rng).abs());
            let low = o.min(c) * (1.0 - wiggle.sample(&mut rng).abs().min(0.5));
            let mut volume = base_volume[stock] * volume_wiggle.sample(&mut rng).exp();
            if event_today[day][stock] {
                volume *= 1.0 + spec.volume_response * s[stock];
            }
            prices.push(PriceRecord {
                stock: stocks[stock].clone(),
                date: dates[day],
                open: o,
                close: c,
                high,
                low,
                volume: volume.round().max(1.0),
                vwap,
            });
        }
        if day + 1 == spec.n_days {
            break;
        }
        let expected = process.expected_returns(&planted, day);
        for stock in 0..n {
            let r = expected[stock] + truth.noise[day][stock];
            if r <= -0.9 {
                return Err(Error::Invalid(format!(
                    "planted return {r} for stock {stock} on day {day} wipes out the price; lower effect_scale"
                )));
            }
            let next_close = close[stock] * (1.0 + r);
            open[stock] = close[stock] * (1.0 + wiggle.sample(&mut rng) * 0.5);
            close[stock] = next_close;
        }
    }

    let mut shuffled_relations = relations;
    shuffled_relations.shuffle(&mut rng);
    Ok(SyntheticMarket {
        events,
        prices,
        relations: shuffled_relations,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(n_stocks: usize) -> SyntheticSpec {
        SyntheticSpec {
            n_stocks,
            n_days: 10,
            event_rate: 0.0,
            noise_std: 0.0,
            volume_noise: 0.0,
            fragile_types: 0,
            persistence_days: 1,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn infeasible_density_is_rejected() {
        let mut spec = SyntheticSpec::default();
        spec.relations[0].density = 1.5;
        assert!(generate_synthetic_market(&spec).unwrap_err().to_string().contains("density"));
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic_market(&spec).unwrap();
        let b = generate_synthetic_market(&spec).unwrap();
        assert_eq!(a.prices, b.prices);
        assert_eq!(a.events, b.events);
        assert_eq!(a.relations, b.relations);
    }

    #[test]
    fn quiet_market_has_flat_closes_and_valid_bars() {
        let m = generate_synthetic_market(&quiet(3)).unwrap();
        let ds = m.dataset().unwrap();
        for s in 0..3 {
            let closes: Vec<f64> = ds.stock_bars(s).map(|b| b.close).collect();
            assert!(closes.windows(2).all(|w| w[0] == w[1]));
        }
    }
}
