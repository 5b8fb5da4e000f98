//! Variant, hop-distance and context comparisons on one dataset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::context_encoder::ContextMode;
use crate::error::Result;
use crate::evaluation::{evaluate, Metrics, MetricsReport};
use crate::market_data::{build_frames, Dataset, FrameConfig, FrameSet, Vocabulary, VocabularyConfig};
use crate::model::{FrameBatch, ModelConfig, RestModel, Variant};
use crate::numerics::SgdConfig;
use crate::training::{predict_batches, train, DateSplit, TrainRun};

/// Frames and batches of one dataset under a fixed split.
pub struct Experiment {
    pub frames: FrameSet,
    pub batches: BTreeMap<usize, FrameBatch>,
    pub split: DateSplit,
}

impl Experiment {
    /// Builds frames with a vocabulary drawn from the training range only.
    pub fn prepare(
        data: &Dataset,
        frame_cfg: &FrameConfig,
        vocab_cfg: &VocabularyConfig,
        split: impl FnOnce(&[usize]) -> Result<DateSplit>,
    ) -> Result<Self> {
        let labeled_days: Vec<usize> = (0..data.num_days().saturating_sub(1))
            .filter(|&d| (0..data.num_stocks()).any(|s| data.bar(s, d).is_some() && data.bar(s, d + 1).is_some()))
            .collect();
        let split = split(&labeled_days)?;
        split.validate()?;
        let vocab = Vocabulary::build(&data.events, split.last_train_day(), vocab_cfg);
        let frames = build_frames(data, &vocab, frame_cfg)?;
        let batches = FrameBatch::all(&frames)?;
        Ok(Self { frames, batches, split })
    }

    pub fn train_batches(&self) -> Vec<&FrameBatch> {
        DateSplit::select(self.split.train, &self.batches)
    }

    pub fn valid_batches(&self) -> Vec<&FrameBatch> {
        DateSplit::select(self.split.valid, &self.batches)
    }

    pub fn test_batches(&self) -> Vec<&FrameBatch> {
        DateSplit::select(self.split.test, &self.batches)
    }

    /// Trains one configuration and evaluates its kept parameters on the
    /// test range.
    pub fn run(&self, model_cfg: &ModelConfig, sgd: &SgdConfig) -> Result<RunOutcome> {
        let model = RestModel::for_frames(*model_cfg, &self.frames)?;
        let run = train(&model, &self.train_batches(), &self.valid_batches(), sgd, "")?;
        let test = evaluate(&predict_batches(&model, &run.best_params, &self.test_batches())?)?;
        Ok(RunOutcome {
            variant: model_cfg.variant,
            hops: model.hops(),
            context_mode: model_cfg.context_mode,
            seed: sgd.seed,
            test,
            run,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub variant: Variant,
    pub hops: usize,
    pub context_mode: ContextMode,
    pub seed: u64,
    pub test: MetricsReport,
    pub run: TrainRun,
}

/// Seed-averaged test metrics of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: Variant,
    pub hops: usize,
    pub context_mode: ContextMode,
    pub raw: Metrics,
    pub normalized: Metrics,
    /// Raw test RMSE of each seed, in seed order.
    pub seed_rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// Every variant at the configured hop count.
    pub variants: Vec<AblationRow>,
    /// The full model at each hop count.
    pub hops: Vec<AblationRow>,
    /// The one-hop model under each context mode.
    pub context: Vec<AblationRow>,
}

fn mean_metrics(ms: &[Metrics]) -> Metrics {
    let n = ms.len().max(1) as f64;
    Metrics {
        rmse: ms.iter().map(|m| m.rmse).sum::<f64>() / n,
        mae: ms.iter().map(|m| m.mae).sum::<f64>() / n,
        medae: ms.iter().map(|m| m.medae).sum::<f64>() / n,
        count: ms.first().map_or(0, |m| m.count),
    }
}

/// Trains `cfg` once per seed and averages the test metrics.
pub fn seed_average(exp: &Experiment, label: &str, cfg: &ModelConfig, sgd: &SgdConfig, seeds: &[u64]) -> Result<AblationRow> {
    let mut raw = Vec::new();
    let mut normalized = Vec::new();
    let mut hops = 0;
    for &seed in seeds {
        let out = exp.run(cfg, &SgdConfig { seed, ..sgd.clone() })?;
        log::info!("{label} seed {seed}: test rmse {:.6}", out.test.raw.rmse);
        hops = out.hops;
        raw.push(out.test.raw);
        normalized.push(out.test.normalized);
    }
    Ok(AblationRow {
        label: label.to_owned(),
        variant: cfg.variant,
        hops,
        context_mode: cfg.context_mode,
        seed_rmse: raw.iter().map(|m| m.rmse).collect(),
        raw: mean_metrics(&raw),
        normalized: mean_metrics(&normalized),
    })
}

/// Runs the variant, hop-distance and context comparisons with shared seeds.
pub fn run_ablations(
    exp: &Experiment,
    base: &ModelConfig,
    sgd: &SgdConfig,
    variants: &[Variant],
    hop_range: &[usize],
    seeds: &[u64],
) -> Result<AblationTable> {
    let mut table = AblationTable {
        seeds: seeds.to_vec(),
        variants: Vec::new(),
        hops: Vec::new(),
        context: Vec::new(),
    };
    for &variant in variants {
        let cfg = ModelConfig { variant, ..*base };
        table.variants.push(seed_average(exp, variant.name(), &cfg, sgd, seeds)?);
    }
    for &hops in hop_range {
        let cfg = ModelConfig {
            variant: Variant::Rest,
            hops,
            ..*base
        };
        table.hops.push(seed_average(exp, &format!("rest l={hops}"), &cfg, sgd, seeds)?);
    }
    for mode in [ContextMode::EventOnly, ContextMode::FeedbackOnly, ContextMode::Both] {
        let cfg = ModelConfig {
            variant: Variant::RestL1,
            context_mode: mode,
            ..*base
        };
        let label = format!("rest-l1 context={}", serde_json::to_value(mode)?.as_str().unwrap_or("?"));
        table.context.push(seed_average(exp, &label, &cfg, sgd, seeds)?);
    }
    Ok(table)
}

impl AblationTable {
    /// Plain-text rendering with one row per configuration.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (title, rows) in [("variants", &self.variants), ("hops", &self.hops), ("context", &self.context)] {
            out.push_str(&format!("[{title}]\n{:<28} {:>10} {:>10} {:>10}\n", "model", "RMSE", "MAE", "MedAE"));
            for r in rows.iter() {
                out.push_str(&format!(
                    "{:<28} {:>10.6} {:>10.6} {:>10.6}\n",
                    r.label, r.raw.rmse, r.raw.mae, r.raw.medae
                ));
            }
        }
        out
    }
}
