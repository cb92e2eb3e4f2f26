//! Model diagnosis built on counterfactual search: sensitivity histograms,
//! the attribute confusion matrix, flip statistics, image-quality tables,
//! threshold sweeps and prompt-phrasing stability.

mod quality;
mod stability;
mod sweep;

use serde::{Deserialize, Serialize};

pub use quality::{ablate_optimizers, quality_table, AblationReport, AblationRow, AblationTarget, QualityRow, QualityTable};
pub use stability::{prompt_stability, spearman, StabilityReport};
pub use sweep::{lambda_sweep, LambdaEntry, LambdaSweep, STRIP_WEIGHTS};

use crate::direction::AttributeSpace;
use crate::engine::{attribute_distribution, search_counterfactual, CounterfactualResult, SearchConfig, SpaceKind};
use crate::error::{Error, Result};
use crate::parallel;
use crate::report::{canonical_hash, csv_text, fmt_real};
use crate::rng::{self, Stream};
use crate::world::{StyleVector, TargetModel, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosisConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub search: SearchConfig,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        Self { n_samples: 200, seed: 0, search: SearchConfig::default() }
    }
}

/// `n` prior samples addressed by `(seed, stream, index)`.
pub fn population(world: &World, seed: u64, stream: Stream, n: usize) -> Vec<StyleVector> {
    (0..n).map(|i| world.sample_style_with(&mut rng::derive(seed, stream, i as u64))).collect()
}

/// Runs one search per style, in parallel, returning results in input order.
pub fn run_searches(
    world: &World,
    model: &TargetModel,
    space: &AttributeSpace,
    styles: &[StyleVector],
    config: &SearchConfig,
) -> Result<Vec<CounterfactualResult>> {
    parallel::try_map_indexed(styles.len(), |i| search_counterfactual(world, model, space, &styles[i], config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub names: Vec<String>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    /// All raw scores were zero; `normalized` is uniform.
    pub degenerate: bool,
    pub n_samples: usize,
    pub space: SpaceKind,
    /// `flips[i][k]`: whether bar `i`'s search flipped sample `k`.
    pub flips: Vec<Vec<bool>>,
    pub config_hash: String,
    pub world_hash: String,
    pub model_hash: String,
}

impl SensitivityReport {
    /// Index of the highest bar (first on ties).
    pub fn top(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.raw.iter().enumerate() {
            if v > self.raw[best] {
                best = i;
            }
        }
        best
    }

    pub fn top_name(&self) -> &str {
        &self.names[self.top()]
    }

    pub fn csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .names
            .iter()
            .zip(self.raw.iter().zip(&self.normalized))
            .map(|(n, (r, s))| vec![n.clone(), fmt_real(*r), fmt_real(*s)])
            .collect();
        csv_text(&["attribute", "raw", "normalized"], &rows)
    }
}

/// Sum-normalizes nonnegative scores; all-zero input gives a uniform, degenerate result.
pub fn normalize_scores(raw: &[f64]) -> (Vec<f64>, bool) {
    let total: f64 = raw.iter().sum();
    if raw.is_empty() {
        return (Vec::new(), true);
    }
    if total > 0.0 {
        (raw.iter().map(|r| r / total).collect(), false)
    } else {
        (vec![1.0 / raw.len() as f64; raw.len()], true)
    }
}

fn histogram(
    world: &World,
    model: &TargetModel,
    bars: Vec<(String, AttributeSpace)>,
    config: &DiagnosisConfig,
    space_kind: SpaceKind,
) -> Result<SensitivityReport> {
    if config.n_samples == 0 {
        return Err(Error::precondition("histograms need at least one sample"));
    }
    let search = SearchConfig { space: space_kind, ..config.search.clone() };
    let styles = population(world, config.seed, Stream::Diagnosis, config.n_samples);
    let mut names = Vec::with_capacity(bars.len());
    let mut raw = Vec::with_capacity(bars.len());
    let mut flips = Vec::with_capacity(bars.len());
    for (name, sub) in bars {
        let results = run_searches(world, model, &sub, &styles, &search)?;
        let total: f64 = results.iter().map(|r| r.output_change()).sum();
        raw.push(total / results.len() as f64);
        flips.push(results.iter().map(|r| r.flipped).collect());
        names.push(name);
    }
    let (normalized, degenerate) = normalize_scores(&raw);
    Ok(SensitivityReport {
        names,
        raw,
        normalized,
        degenerate,
        n_samples: config.n_samples,
        space: space_kind,
        flips,
        config_hash: canonical_hash(&search)?,
        world_hash: world.hash().to_string(),
        model_hash: canonical_hash(model)?,
    })
}

fn single_bars(space: &AttributeSpace) -> Result<Vec<(String, AttributeSpace)>> {
    (0..space.len())
        .map(|i| Ok((space.directions[i].attribute.clone(), space.select(&[i])?)))
        .collect()
}

/// Mean absolute output change under single-attribute search, per attribute.
pub fn sensitivity_histogram(
    world: &World,
    model: &TargetModel,
    space: &AttributeSpace,
    config: &DiagnosisConfig,
) -> Result<SensitivityReport> {
    histogram(world, model, single_bars(space)?, config, SpaceKind::Attribute)
}

/// Same protocol as [`sensitivity_histogram`], searching the ground-truth intensities directly.
pub fn oracle_histogram(
    world: &World,
    model: &TargetModel,
    space: &AttributeSpace,
    config: &DiagnosisConfig,
) -> Result<SensitivityReport> {
    histogram(world, model, single_bars(space)?, config, SpaceKind::Oracle)
}

/// One bar per attribute pair, each searched jointly.
pub fn combination_histogram(
    world: &World,
    model: &TargetModel,
    space: &AttributeSpace,
    pairs: &[(String, String)],
    config: &DiagnosisConfig,
) -> Result<SensitivityReport> {
    let bars = pairs
        .iter()
        .map(|(a, b)| {
            if a == b {
                return Err(Error::DuplicateAttribute(a.clone()));
            }
            Ok((format!("{a}+{b}"), space.select_names(&[a, b])?))
        })
        .collect::<Result<Vec<_>>>()?;
    histogram(world, model, bars, config, SpaceKind::Attribute)
}

/// Columns: optimized attribute; rows: scored attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub optimized: Vec<String>,
    pub scored: Vec<String>,
    /// Row-major `[scored, optimized]`.
    pub entries: Vec<f64>,
    pub n_samples: usize,
    pub config_hash: String,
}

impl ConfusionMatrix {
    pub fn get(&self, scored: usize, optimized: usize) -> f64 {
        self.entries[scored * self.optimized.len() + optimized]
    }

    /// Columns whose diagonal entry is at least `factor` times every other entry in the column.
    pub fn dominant_columns(&self, factor: f64) -> usize {
        (0..self.optimized.len())
            .filter(|&c| {
                let Some(r) = self.scored.iter().position(|s| *s == self.optimized[c]) else {
                    return false;
                };
                let diag = self.get(r, c);
                (0..self.scored.len()).filter(|&k| k != r).all(|k| diag >= factor * self.get(k, c))
            })
            .count()
    }

    pub fn csv(&self) -> String {
        let mut header = vec!["scored".to_string()];
        header.extend(self.optimized.iter().cloned());
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = (0..self.scored.len())
            .map(|r| {
                let mut row = vec![self.scored[r].clone()];
                row.extend((0..self.optimized.len()).map(|c| fmt_real(self.get(r, c))));
                row
            })
            .collect();
        csv_text(&refs, &rows)
    }
}

/// Mean absolute change of each attribute's embedding score when one attribute is optimized.
pub fn confusion_matrix(
    world: &World,
    model: &TargetModel,
    space: &AttributeSpace,
    config: &DiagnosisConfig,
) -> Result<ConfusionMatrix> {
    let search = SearchConfig { space: SpaceKind::Attribute, ..config.search.clone() };
    let styles = population(world, config.seed, Stream::Diagnosis, config.n_samples);
    let names: Vec<String> = space.names().iter().map(|s| s.to_string()).collect();
    let (rows, cols) = (names.len(), names.len());
    let mut entries = vec![0.0; rows * cols];
    let tau = search.temperature;
    for c in 0..cols {
        let sub = space.select(&[c])?;
        let changes = parallel::try_map_indexed(styles.len(), |k| {
            let r = search_counterfactual(world, model, &sub, &styles[k], &search)?;
            names
                .iter()
                .map(|n| {
                    let before = attribute_distribution(world, n, &r.original_image, tau)?[0];
                    let after = attribute_distribution(world, n, &r.counterfactual_image, tau)?[0];
                    Ok((after - before).abs())
                })
                .collect::<Result<Vec<f64>>>()
        })?;
        for r in 0..rows {
            let total: f64 = changes.iter().map(|ch| ch[r]).sum();
            entries[r * cols + c] = if changes.is_empty() { 0.0 } else { total / changes.len() as f64 };
        }
    }
    Ok(ConfusionMatrix {
        optimized: names.clone(),
        scored: names,
        entries,
        n_samples: config.n_samples,
        config_hash: canonical_hash(&search)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipStats {
    pub flip_rate: f64,
    pub flip_resistance: f64,
    pub budget: usize,
    pub n_samples: usize,
}

/// Fraction of searches that flipped the model within the first `budget` iterates.
pub fn flip_stats(results: &[CounterfactualResult], budget: usize) -> Result<FlipStats> {
    if results.is_empty() {
        return Err(Error::precondition("flip statistics need at least one result"));
    }
    let flipped = results.iter().filter(|r| r.flipped_within(budget)).count();
    let rate = flipped as f64 / results.len() as f64;
    Ok(FlipStats { flip_rate: rate, flip_resistance: 1.0 - rate, budget, n_samples: results.len() })
}
