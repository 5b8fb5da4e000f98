use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rest_core::evaluation::{backtest, evaluate, BacktestResult};
use rest_core::experiments::{run_ablations, Experiment};
use rest_core::market_data::{generate_synthetic_market, load_dataset, Dataset};
use rest_core::model::{FrameBatch, RestModel};
use rest_core::numerics::{finite_difference_check, Checkpoint, ModelParams};
use rest_core::training::{predict_batches, score_batches, train};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RunConfig};

const DATA_FILES: [&str; 3] = ["events.jsonl", "prices.csv", "relations.csv"];

/// Loaded market data and a content hash of where it came from.
pub struct Inputs {
    pub data: Dataset,
    pub hash: String,
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    if let Some(dir) = &cfg.data_dir {
        let mut blobs = Vec::new();
        for name in DATA_FILES {
            let path = dir.join(name);
            blobs.push(fs::read(&path).with_context(|| format!("reading {}", path.display()))?);
        }
        let data = load_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
        let parts: Vec<&[u8]> = blobs.iter().map(Vec::as_slice).collect();
        return Ok(Inputs { data, hash: sha256_hex(&parts) });
    }
    let spec = cfg.synthetic.as_ref().ok_or_else(|| anyhow!(ConfigError(vec!["no data source".into()])))?;
    let data = generate_synthetic_market(spec)?.dataset()?;
    let json = serde_json::to_vec(spec)?;
    Ok(Inputs {
        data,
        hash: sha256_hex(&[b"synthetic", &json]),
    })
}

pub fn prepare(cfg: &RunConfig, inputs: &Inputs) -> Result<Experiment> {
    let calendar = inputs.data.calendar.clone();
    Ok(Experiment::prepare(&inputs.data, &cfg.frames, &cfg.vocabulary, |days| {
        cfg.split.resolve(&calendar, days)
    })?)
}

pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    Ok(sha256_hex(&[&serde_json::to_vec(cfg)?]))
}

/// Hash of everything that determines the trained parameters.
pub fn model_hash(cfg: &RunConfig, inputs: &Inputs) -> Result<String> {
    let parts = serde_json::to_vec(&(&cfg.model, &cfg.sgd, &cfg.split, &cfg.frames, &cfg.vocabulary))?;
    Ok(sha256_hex(&[inputs.hash.as_bytes(), &parts]))
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a str,
    config: &'a RunConfig,
    config_hash: String,
    input_hash: &'a str,
    result: T,
}

fn write_report<T: Serialize>(cfg: &RunConfig, inputs: &Inputs, command: &str, file: &str, result: T) -> Result<PathBuf> {
    let report = Report {
        command,
        config: cfg,
        config_hash: config_hash(cfg)?,
        input_hash: &inputs.hash,
        result,
    };
    let path = cfg.out.join(file);
    fs::write(&path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating output directory {}", cfg.out.display()))
}

pub fn synth_gen(cfg: &RunConfig) -> Result<()> {
    let Some(spec) = &cfg.synthetic else {
        bail!(ConfigError(vec!["synth-gen needs a [synthetic] section".into()]));
    };
    ensure_out(cfg)?;
    let market = generate_synthetic_market(spec)?;
    market.write(&cfg.out).with_context(|| format!("writing dataset to {}", cfg.out.display()))?;
    println!(
        "wrote {} stocks, {} days, {} events to {}",
        spec.n_stocks,
        spec.n_days,
        market.events.len(),
        cfg.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model_hash: &'a str,
    run: &'a rest_core::training::TrainRun,
    parameters: BTreeMap<&'a str, Vec<usize>>,
    train_dates: usize,
    valid_dates: usize,
}

pub fn train_cmd(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let exp = prepare(cfg, &inputs)?;
    let model = RestModel::for_frames(cfg.model, &exp.frames)?;
    let hash = model_hash(cfg, &inputs)?;
    ensure_out(cfg)?;
    let (train_b, valid_b) = (exp.train_batches(), exp.valid_batches());
    let run = train(&model, &train_b, &valid_b, &cfg.sgd, &hash)?;
    Checkpoint {
        seed: cfg.sgd.seed,
        config_hash: hash.clone(),
        params: run.best_params.clone(),
    }
    .save(checkpoint)
    .with_context(|| format!("saving checkpoint {}", checkpoint.display()))?;
    let summary = TrainSummary {
        model_hash: &hash,
        run: &run,
        parameters: run.best_params.iter().map(|(n, t)| (n, t.shape().to_vec())).collect(),
        train_dates: train_b.len(),
        valid_dates: valid_b.len(),
    };
    let path = write_report(cfg, &inputs, "train", "train_report.json", summary)?;
    let last = run.epochs.last().expect("at least one epoch");
    println!(
        "{}: {} epochs, final train mse {:.6}, best epoch {} (valid rmse {}); report {}",
        cfg.model.variant,
        run.epochs.len(),
        last.train_mse,
        run.best_epoch,
        run.best_valid_rmse.map_or("-".into(), |v| format!("{v:.6}")),
        path.display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, inputs: &Inputs, exp: &Experiment, checkpoint: &Path) -> Result<(RestModel, ModelParams)> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let hash = model_hash(cfg, inputs)?;
    if ckpt.config_hash != hash {
        bail!(ConfigError(vec![format!(
            "checkpoint {} was trained under a different configuration or dataset",
            checkpoint.display()
        )]));
    }
    Ok((RestModel::for_frames(cfg.model, &exp.frames)?, ckpt.params))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionLine {
    pub date: chrono::NaiveDate,
    pub stock: String,
    pub prediction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_prediction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<f64>,
}

pub fn evaluate_cmd(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let exp = prepare(cfg, &inputs)?;
    let (model, params) = load_model(cfg, &inputs, &exp, checkpoint)?;
    ensure_out(cfg)?;
    let preds = predict_batches(&model, &params, &exp.test_batches())?;
    let report = evaluate(&preds)?;
    let path = cfg.out.join("predictions.jsonl");
    let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    for p in &preds {
        let line = PredictionLine {
            date: inputs.data.calendar[p.day],
            stock: inputs.data.stocks[p.stock].clone(),
            prediction: p.prediction,
            raw_prediction: Some(p.raw_prediction),
            label: Some(p.label),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_report(cfg, &inputs, "evaluate", "metrics.json", &report)?;
    println!(
        "test: {} predictions, rmse {:.6} mae {:.6} medae {:.6} (normalized rmse {:.4})",
        report.raw.count, report.raw.rmse, report.raw.mae, report.raw.medae, report.normalized.rmse
    );
    Ok(())
}

fn read_predictions(path: &Path, data: &Dataset) -> Result<BTreeMap<usize, Vec<(usize, f64)>>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for (k, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), k + 1))?;
        let day = data
            .calendar
            .binary_search(&p.date)
            .map_err(|_| anyhow!("{} line {}: {} is not a trading day", path.display(), k + 1, p.date))?;
        let stock = data
            .stocks
            .iter()
            .position(|s| *s == p.stock)
            .ok_or_else(|| anyhow!("{} line {}: unknown stock {}", path.display(), k + 1, p.stock))?;
        out.entry(day).or_default().push((stock, p.prediction));
    }
    Ok(out)
}

/// Top-k simulations for every configured k on test-range scores.
pub fn run_backtests(cfg: &RunConfig, data: &Dataset, scores: &BTreeMap<usize, Vec<(usize, f64)>>) -> Result<Vec<BacktestResult>> {
    let returns = |s: usize, d: usize| data.close_return(s, d).unwrap_or(0.0);
    let mut out = Vec::new();
    for bt in cfg.backtest.configs() {
        let result = backtest(scores, returns, &bt)?;
        if !result.short_days.is_empty() {
            log::warn!(
                "k = {}: {} of {} dates had fewer stocks available; held all of them",
                bt.k,
                result.short_days.len(),
                result.steps.len()
            );
        }
        out.push(result);
    }
    Ok(out)
}

pub fn backtest_cmd(cfg: &RunConfig, checkpoint: &Path, predictions: Option<&Path>) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let scores = match predictions {
        Some(p) => read_predictions(p, &inputs.data)?,
        None => {
            let exp = prepare(cfg, &inputs)?;
            let (model, params) = load_model(cfg, &inputs, &exp, checkpoint)?;
            score_batches(&model, &params, &exp.test_batches())?
        }
    };
    if scores.is_empty() {
        bail!("no predictions to trade");
    }
    ensure_out(cfg)?;
    let results = run_backtests(cfg, &inputs.data, &scores)?;
    write_report(cfg, &inputs, "backtest", "backtest.json", &results)?;
    let path = cfg.out.join("backtest_values.csv");
    let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "date,k,value")?;
    let cal = &inputs.data.calendar;
    for r in &results {
        for s in &r.steps {
            writeln!(w, "{},{},{}", cal[s.day], r.k, s.value_before)?;
        }
        if let Some(last) = r.steps.last() {
            let date = cal.get(last.day + 1).unwrap_or(&cal[last.day]);
            writeln!(w, "{},{},{}", date, r.k, last.value_after)?;
        }
    }
    w.flush()?;
    for r in &results {
        let sharpe = if r.sharpe_defined { format!("{:.3}", r.sharpe_ratio) } else { "undefined".into() };
        println!(
            "k={:<3} annual return {:>8.4}  sharpe {:>9}  final value {:.4}",
            r.k,
            r.annual_return,
            sharpe,
            r.values.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

/// The labeled frame with the most events in windows and histories.
fn busiest(exp: &Experiment) -> Result<&FrameBatch> {
    exp.batches
        .values()
        .filter(|b| !b.labeled_rows.is_empty())
        .max_by_key(|b| (b.windows.iter().map(Vec::len).sum::<usize>() + b.context_rows.len(), std::cmp::Reverse(b.day)))
        .ok_or_else(|| anyhow!("no labeled frames to check"))
}

pub fn gradcheck_cmd(cfg: &RunConfig) -> Result<bool> {
    let inputs = load_inputs(cfg)?;
    let exp = prepare(cfg, &inputs)?;
    let model = RestModel::for_frames(cfg.model, &exp.frames)?;
    let batch = busiest(&exp)?;
    let params = model.init_params(cfg.sgd.seed);
    let (_, analytic) = model.loss_and_gradients(&params, batch)?;
    let report = finite_difference_check(|p| model.loss(p, batch), &params, &analytic, &cfg.gradcheck)?;
    ensure_out(cfg)?;
    write_report(cfg, &inputs, "gradcheck", "gradcheck.json", &report)?;
    println!(
        "{} entries over {} groups, max relative error {:.3e} (tolerance {:e}): {}",
        report.entries.len(),
        report.groups().len(),
        report.max_rel_error,
        report.tolerance,
        if report.passed { "passed" } else { "FAILED" }
    );
    Ok(report.passed)
}

pub fn ablate_cmd(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let exp = prepare(cfg, &inputs)?;
    let a = &cfg.ablation;
    let table = run_ablations(&exp, &cfg.model, &cfg.sgd, &a.variants, &a.hops, &a.seeds)?;
    ensure_out(cfg)?;
    write_report(cfg, &inputs, "ablate", "ablation.json", &table)?;
    let text = table.render();
    fs::write(cfg.out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}
