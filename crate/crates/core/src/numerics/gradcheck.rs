//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{GradientMap, ModelParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Total entries to probe, spread evenly over parameter tensors.
    pub samples: usize,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples: 60,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn groups(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.entries.iter().map(|e| e.name.as_str()).collect();
        names.dedup();
        names
    }
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(abs_floor)
}

/// Compares `analytic` against central differences of `f` at sampled entries
/// of every parameter tensor.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &ModelParams,
    analytic: &GradientMap,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let groups = params.len().max(1);
    let per_group = cfg.samples.div_ceil(groups).max(1);
    let mut probe = params.clone();
    let mut entries = Vec::new();

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.require(&name)?.len();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Invalid(format!("no analytic gradient for '{name}'")))?;
        let mut picks = sample(&mut rng, len, per_group.min(len)).into_vec();
        picks.sort_unstable();
        for idx in picks {
            let orig = params.require(&name)?.data()[idx];
            set(&mut probe, &name, idx, orig + cfg.step);
            let plus = f(&probe)?;
            set(&mut probe, &name, idx, orig - cfg.step);
            let minus = f(&probe)?;
            set(&mut probe, &name, idx, orig);
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[idx];
            entries.push(GradCheckEntry {
                name: name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, cfg.abs_floor),
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= cfg.tolerance && entries.iter().all(|e| e.rel_error.is_finite()),
        entries,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}

fn set(params: &mut ModelParams, name: &str, idx: usize, value: f64) {
    if let Some(t) = params.get_mut(name) {
        t.data_mut()[idx] = value;
    }
}
