//! Reading and writing `events.jsonl`, `prices.csv` and `relations.csv`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::graph::{build_adjacency, RelationRecord, StockGraph};
use super::{Event, PriceBar};
use crate::error::{Error, Result};

/// Vocabulary slot of the padding type and token.
pub const PAD: usize = 0;
/// Vocabulary slot for anything not seen often enough in training.
pub const UNK: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub stock: String,
    pub date: NaiveDate,
    #[serde(rename = "type")]
    pub event_type: String,
    pub tokens: Vec<String>,
}

#[derive(Deserialize)]
struct EventLine {
    stock: String,
    date: NaiveDate,
    #[serde(rename = "type")]
    event_type: String,
    tokens: Option<Vec<String>>,
    text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceRecord {
    pub stock: String,
    pub date: NaiveDate,
    pub open: f64,
    pub close: f64,
    pub high: f64,
    pub low: f64,
    pub volume: f64,
    pub vwap: f64,
}

/// An event aligned to the trading calendar, still in string form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatedEvent {
    pub stock: usize,
    pub day: usize,
    pub event_type: String,
    pub tokens: Vec<String>,
}

/// Validated market data on a shared trading calendar.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub stocks: Vec<String>,
    pub calendar: Vec<NaiveDate>,
    /// Events sorted by day, ties kept in file order.
    pub events: Vec<DatedEvent>,
    pub graph: StockGraph,
    pub relations: Vec<RelationRecord>,
    bars: Vec<Vec<Option<PriceBar>>>,
}

impl Dataset {
    pub fn from_records(events: Vec<RawEvent>, prices: Vec<PriceRecord>, relations: Vec<RelationRecord>) -> Result<Self> {
        let stocks: Vec<String> = prices
            .iter()
            .map(|p| p.stock.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let calendar: Vec<NaiveDate> = prices.iter().map(|p| p.date).collect::<BTreeSet<_>>().into_iter().collect();
        let stock_index: HashMap<&str, usize> = stocks.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        let day_index: HashMap<NaiveDate, usize> = calendar.iter().enumerate().map(|(k, d)| (*d, k)).collect();

        let mut bars = vec![vec![None; calendar.len()]; stocks.len()];
        let mut problems = Vec::new();
        for (row, p) in prices.iter().enumerate() {
            let stock = stock_index[p.stock.as_str()];
            let day = day_index[&p.date];
            let bar = PriceBar {
                stock,
                day,
                open: p.open,
                close: p.close,
                high: p.high,
                low: p.low,
                volume: p.volume,
                vwap: p.vwap,
            };
            if let Err(why) = check_bar(&bar) {
                problems.push(format!("row {} ({} {}): {why}", row + 2, p.stock, p.date));
            } else if bars[stock][day].replace(bar).is_some() {
                problems.push(format!("row {}: duplicate bar for {} on {}", row + 2, p.stock, p.date));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Ingest(format!("prices: {}", problems.join("; "))));
        }

        let mut dated = Vec::with_capacity(events.len());
        let mut unknown = BTreeSet::new();
        for e in events {
            let Some(&stock) = stock_index.get(e.stock.as_str()) else {
                unknown.insert(e.stock.clone());
                continue;
            };
            // Non-trading dates roll forward to the next session.
            let day = calendar.partition_point(|d| *d < e.date);
            if day == calendar.len() {
                log::warn!("event for {} on {} is after the last trading day; dropped", e.stock, e.date);
                continue;
            }
            dated.push(DatedEvent {
                stock,
                day,
                event_type: e.event_type,
                tokens: e.tokens,
            });
        }
        if !unknown.is_empty() {
            return Err(Error::Ingest(format!(
                "events reference unknown stocks: {}",
                unknown.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
        dated.sort_by_key(|e| e.day);

        let graph = build_adjacency(&stocks, &relations)?;
        Ok(Self {
            stocks,
            calendar,
            events: dated,
            graph,
            relations,
            bars,
        })
    }

    pub fn num_stocks(&self) -> usize {
        self.stocks.len()
    }

    pub fn num_days(&self) -> usize {
        self.calendar.len()
    }

    pub fn bar(&self, stock: usize, day: usize) -> Option<&PriceBar> {
        self.bars.get(stock)?.get(day)?.as_ref()
    }

    /// Bars of one stock in day order.
    pub fn stock_bars(&self, stock: usize) -> impl Iterator<Item = &PriceBar> + '_ {
        self.bars[stock].iter().flatten()
    }

    /// Close-to-close return from `day` to the next trading day, when both
    /// bars exist.
    pub fn close_return(&self, stock: usize, day: usize) -> Option<f64> {
        let (a, b) = (self.bar(stock, day)?, self.bar(stock, day + 1)?);
        Some((b.close - a.close) / a.close)
    }

    /// Records that reproduce this dataset when read back.
    pub fn to_records(&self) -> (Vec<RawEvent>, Vec<PriceRecord>) {
        let events = self
            .events
            .iter()
            .map(|e| RawEvent {
                stock: self.stocks[e.stock].clone(),
                date: self.calendar[e.day],
                event_type: e.event_type.clone(),
                tokens: e.tokens.clone(),
            })
            .collect();
        let mut prices = Vec::new();
        for day in 0..self.num_days() {
            for stock in 0..self.num_stocks() {
                if let Some(b) = self.bar(stock, day) {
                    prices.push(PriceRecord {
                        stock: self.stocks[stock].clone(),
                        date: self.calendar[day],
                        open: b.open,
                        close: b.close,
                        high: b.high,
                        low: b.low,
                        volume: b.volume,
                        vwap: b.vwap,
                    });
                }
            }
        }
        (events, prices)
    }
}

fn check_bar(b: &PriceBar) -> std::result::Result<(), String> {
    let prices = [b.open, b.close, b.high, b.low, b.vwap];
    if prices.iter().chain([&b.volume]).any(|v| !v.is_finite()) {
        return Err("non-finite field".into());
    }
    if prices.iter().any(|&p| p <= 0.0) {
        return Err("non-positive price".into());
    }
    if b.volume < 0.0 {
        return Err("negative volume".into());
    }
    if [b.open, b.close, b.vwap].iter().any(|&p| p < b.low || p > b.high) {
        return Err("open/close/vwap outside [low, high]".into());
    }
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<RawEvent>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventLine = serde_json::from_str(&line)
            .map_err(|e| Error::Ingest(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let tokens = match (rec.tokens, rec.text) {
            (Some(t), _) => t,
            (None, Some(text)) => text.split_whitespace().map(str::to_owned).collect(),
            (None, None) => {
                return Err(Error::Ingest(format!(
                    "{}:{}: event needs 'tokens' or 'text'",
                    path.display(),
                    n + 1
                )))
            }
        };
        out.push(RawEvent {
            stock: rec.stock,
            date: rec.date,
            event_type: rec.event_type,
            tokens,
        });
    }
    Ok(out)
}

pub fn read_prices(path: &Path) -> Result<Vec<PriceRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let expected = ["stock", "date", "open", "close", "high", "low", "volume", "vwap"];
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    if header != expected {
        return Err(Error::Ingest(format!(
            "{}: header must be {}, found {}",
            path.display(),
            expected.join(","),
            header.join(",")
        )));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn read_relations(path: &Path) -> Result<Vec<RelationRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Loads `events.jsonl`, `prices.csv` and `relations.csv` from `dir`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let events = read_events(&dir.join("events.jsonl"))?;
    let prices = read_prices(&dir.join("prices.csv"))?;
    let relations = read_relations(&dir.join("relations.csv"))?;
    Dataset::from_records(events, prices, relations)
}

pub fn write_dataset(dir: &Path, events: &[RawEvent], prices: &[PriceRecord], relations: &[RelationRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(File::create(dir.join("events.jsonl"))?);
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let mut w = csv::Writer::from_path(dir.join("prices.csv"))?;
    for p in prices {
        w.serialize(p)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("relations.csv"))?;
    w.write_record(["relation", "src", "dst"])?;
    for r in relations {
        w.write_record([&r.relation, &r.src, &r.dst])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabularyConfig {
    pub min_token_freq: usize,
    pub max_tokens: usize,
}

impl Default for VocabularyConfig {
    fn default() -> Self {
        Self {
            min_token_freq: 5,
            max_tokens: 128,
        }
    }
}

/// Type and token vocabularies. Slot 0 is padding, slot 1 is unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub types: Vec<String>,
    pub tokens: Vec<String>,
    pub max_tokens: usize,
    #[serde(skip)]
    type_index: HashMap<String, usize>,
    #[serde(skip)]
    token_index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from events dated on or before `last_day`; tokens below the
    /// frequency floor map to the unknown slot.
    pub fn build(events: &[DatedEvent], last_day: usize, cfg: &VocabularyConfig) -> Self {
        let mut type_set = BTreeSet::new();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for e in events.iter().filter(|e| e.day <= last_day) {
            type_set.insert(e.event_type.as_str());
            for t in &e.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let reserved = ["<pad>".to_owned(), "<unk>".to_owned()];
        let types = reserved.iter().cloned().chain(type_set.into_iter().map(str::to_owned)).collect();
        let tokens = reserved
            .iter()
            .cloned()
            .chain(
                counts
                    .into_iter()
                    .filter(|&(_, c)| c >= cfg.min_token_freq)
                    .map(|(t, _)| t.to_owned()),
            )
            .collect();
        Self::from_lists(types, tokens, cfg.max_tokens)
    }

    pub fn from_lists(types: Vec<String>, tokens: Vec<String>, max_tokens: usize) -> Self {
        let type_index = types.iter().enumerate().skip(2).map(|(k, s)| (s.clone(), k)).collect();
        let token_index = tokens.iter().enumerate().skip(2).map(|(k, s)| (s.clone(), k)).collect();
        Self {
            types,
            tokens,
            max_tokens,
            type_index,
            token_index,
        }
    }

    /// Restores lookup tables after deserialization.
    pub fn reindex(self) -> Self {
        Self::from_lists(self.types, self.tokens, self.max_tokens)
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn type_id(&self, name: &str) -> usize {
        self.type_index.get(name).copied().unwrap_or(UNK)
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.token_index.get(token).copied().unwrap_or(UNK)
    }

    /// Truncates to `max_tokens`; an event without tokens gets one unknown token.
    pub fn encode(&self, e: &DatedEvent) -> Event {
        let mut tokens: Vec<usize> = e.tokens.iter().take(self.max_tokens.max(1)).map(|t| self.token_id(t)).collect();
        if tokens.is_empty() {
            tokens.push(UNK);
        }
        Event {
            stock: e.stock,
            day: e.day,
            type_id: self.type_id(&e.event_type),
            tokens,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, d).unwrap()
    }

    fn price(stock: &str, d: u32, c: f64) -> PriceRecord {
        PriceRecord {
            stock: stock.into(),
            date: date(d),
            open: c,
            close: c,
            high: c * 1.01,
            low: c * 0.99,
            volume: 100.0,
            vwap: c,
        }
    }

    fn event(stock: &str, d: u32, ty: &str, tokens: &[&str]) -> RawEvent {
        RawEvent {
            stock: stock.into(),
            date: date(d),
            event_type: ty.into(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
        }
    }

    #[test]
    fn weekend_events_roll_forward_and_keep_file_order() {
        // Trading days 2, 3, 6; the event on the 4th lands on the 6th.
        let prices = vec![price("A", 2, 10.0), price("A", 3, 10.0), price("A", 6, 10.0)];
        let events = vec![event("A", 6, "x", &["late"]), event("A", 4, "y", &["early"]), event("A", 9, "z", &[])];
        let ds = Dataset::from_records(events, prices, vec![]).unwrap();
        assert_eq!(ds.events.len(), 2);
        assert_eq!(ds.events[0].day, 2);
        assert_eq!(ds.events[0].event_type, "x");
        assert_eq!(ds.events[1].event_type, "y");
    }

    #[test]
    fn bad_bars_and_unknown_stocks_are_reported() {
        let mut bad = price("A", 2, 10.0);
        bad.close = 20.0;
        let err = Dataset::from_records(vec![], vec![bad], vec![]).unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
        let err = Dataset::from_records(vec![event("Q", 2, "x", &["a"])], vec![price("A", 2, 10.0)], vec![]).unwrap_err();
        assert!(err.to_string().contains('Q'));
    }

    #[test]
    fn vocabulary_prunes_rare_tokens_and_truncates() {
        let mk = |day, toks: &[&str]| DatedEvent {
            stock: 0,
            day,
            event_type: "t".into(),
            tokens: toks.iter().map(|t| t.to_string()).collect(),
        };
        let events = vec![mk(0, &["a", "a", "b"]), mk(1, &["a", "c"]), mk(9, &["c", "c", "c"])];
        let cfg = VocabularyConfig {
            min_token_freq: 2,
            max_tokens: 2,
        };
        let v = Vocabulary::build(&events, 1, &cfg);
        assert_eq!(v.tokens, vec!["<pad>", "<unk>", "a"]);
        let e = v.encode(&mk(3, &["b", "a", "a"]));
        assert_eq!(e.tokens, vec![UNK, 2]);
        assert_eq!(v.encode(&mk(3, &[])).tokens, vec![UNK]);
        assert_eq!(v.type_id("never"), UNK);
    }

    #[test]
    fn text_field_is_whitespace_tokenized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        fs::write(&path, "{\"stock\":\"A\",\"date\":\"2020-01-02\",\"type\":\"x\",\"text\":\"profit  rises\"}\n").unwrap();
        let ev = read_events(&path).unwrap();
        assert_eq!(ev[0].tokens, vec!["profit", "rises"]);
    }
}
