//! Declarative run configuration (TOML) with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use rest_core::evaluation::BacktestConfig;
use rest_core::market_data::{FrameConfig, SyntheticSpec, VocabularyConfig};
use rest_core::model::{ModelConfig, Variant};
use rest_core::numerics::{GradCheckConfig, SgdConfig};
use rest_core::training::DateSplit;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding events.jsonl, prices.csv and relations.csv.
    pub data_dir: Option<PathBuf>,
    /// Generate the market in memory instead of reading `data_dir`.
    pub synthetic: Option<SyntheticSpec>,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub sgd: SgdConfig,
    pub split: SplitConfig,
    pub frames: FrameConfig,
    pub vocabulary: VocabularyConfig,
    pub backtest: BacktestSettings,
    pub ablation: AblationSettings,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            synthetic: None,
            out: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            sgd: SgdConfig::default(),
            split: SplitConfig::default(),
            frames: FrameConfig::default(),
            vocabulary: VocabularyConfig::default(),
            backtest: BacktestSettings::default(),
            ablation: AblationSettings::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

/// Fractions of the labeled dates, or explicit end dates (exclusive) that
/// take precedence when given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub train_end: Option<NaiveDate>,
    pub valid_end: Option<NaiveDate>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            valid_fraction: 0.1,
            train_end: None,
            valid_end: None,
        }
    }
}

impl SplitConfig {
    pub fn resolve(&self, calendar: &[NaiveDate], labeled_days: &[usize]) -> rest_core::Result<DateSplit> {
        match (self.train_end, self.valid_end) {
            (Some(train_end), Some(valid_end)) => {
                let (Some(&first), Some(&last)) = (labeled_days.first(), labeled_days.last()) else {
                    return Err(rest_core::Error::Invalid("no labeled dates".into()));
                };
                let cut = |date: NaiveDate| calendar.partition_point(|d| *d < date).clamp(first, last + 1);
                let (a, b) = (cut(train_end), cut(valid_end));
                Ok(DateSplit {
                    train: (first, a),
                    valid: (a, b),
                    test: (b, last + 1),
                })
            }
            _ => DateSplit::by_fraction(labeled_days, self.train_fraction, self.valid_fraction),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSettings {
    pub k: Vec<usize>,
    pub buy_cost: f64,
    pub sell_cost: f64,
}

impl Default for BacktestSettings {
    fn default() -> Self {
        Self {
            k: vec![10, 20, 30, 40],
            buy_cost: 0.0015,
            sell_cost: 0.0025,
        }
    }
}

impl BacktestSettings {
    pub fn configs(&self) -> Vec<BacktestConfig> {
        self.k
            .iter()
            .map(|&k| BacktestConfig {
                k,
                buy_cost: self.buy_cost,
                sell_cost: self.sell_cost,
                ..BacktestConfig::default()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub hops: Vec<usize>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            variants: Variant::ALL.to_vec(),
            hops: vec![1, 2, 3, 4],
        }
    }
}

/// Flag values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub hops: Option<usize>,
    pub topk: Option<Vec<usize>>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                // Relative data paths are taken from the config's directory.
                if let (Some(dir), Some(base)) = (cfg.data_dir.as_mut(), p.parent()) {
                    if dir.is_relative() {
                        *dir = base.join(&*dir);
                    }
                }
                cfg
            }
            None => RunConfig::default(),
        };
        cfg.apply(overrides);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.sgd.seed = seed;
        }
        if let Some(v) = o.variant {
            self.model.variant = v;
        }
        if let Some(h) = o.hops {
            self.model.hops = h;
        }
        if let Some(k) = &o.topk {
            self.backtest.k = k.clone();
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    /// Every problem at once, before any compute.
    pub fn validate(&self, needs_data: bool) -> Result<()> {
        let mut problems = Vec::new();
        if needs_data {
            match (&self.data_dir, &self.synthetic) {
                (None, None) => problems.push("set either data_dir or [synthetic]".to_owned()),
                (Some(_), Some(_)) => problems.push("data_dir and [synthetic] are mutually exclusive".to_owned()),
                _ => {}
            }
        }
        let mut check = |what: &str, r: rest_core::Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{what}: {e}"));
            }
        };
        check("model", self.model.validate());
        check("sgd", self.sgd.validate());
        check("frames", self.frames.validate());
        if let Some(s) = &self.synthetic {
            check("synthetic", s.validate());
        }
        let s = &self.split;
        if s.train_end.is_some() != s.valid_end.is_some() {
            problems.push("split: train_end and valid_end go together".to_owned());
        }
        if let (Some(a), Some(b)) = (s.train_end, s.valid_end) {
            if a > b {
                problems.push("split: train_end is after valid_end".to_owned());
            }
        }
        if self.backtest.k.is_empty() || self.backtest.k.contains(&0) {
            problems.push("backtest: k must be a non-empty list of positive sizes".to_owned());
        }
        if !(0.0..1.0).contains(&self.backtest.buy_cost) || !(0.0..1.0).contains(&self.backtest.sell_cost) {
            problems.push("backtest: costs must lie in [0, 1)".to_owned());
        }
        if self.ablation.seeds.is_empty() {
            problems.push("ablation: no seeds".to_owned());
        }
        if self.ablation.hops.contains(&0) {
            problems.push("ablation: hop counts must be positive".to_owned());
        }
        if self.gradcheck.samples == 0 || !(self.gradcheck.step > 0.0) || !(self.gradcheck.tolerance > 0.0) {
            problems.push("gradcheck: samples, step and tolerance must be positive".to_owned());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            bail!(ConfigError(problems))
        }
    }
}

/// Rejected configuration; maps to the usage exit code.
#[derive(Debug)]
pub struct ConfigError(pub Vec<String>);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for p in &self.0 {
            writeln!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}
