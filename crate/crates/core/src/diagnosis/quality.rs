use serde::{Deserialize, Serialize};

use super::{flip_stats, population, run_searches, DiagnosisConfig};
use crate::direction::AttributeSpace;
use crate::engine::{CounterfactualResult, OptimizerKind, SearchConfig, SpaceKind};
use crate::error::Result;
use crate::report::{canonical_hash, csv_text, fmt_real};
use crate::rng::Stream;
use crate::world::{TargetModel, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub space: SpaceKind,
    pub n_total: usize,
    pub n_flipped: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityTable {
    pub rows: Vec<QualityRow>,
    /// Attribute-space mean SSIM is at least the raw-style mean; `None` when either has no flips.
    pub attribute_ssim_not_lower: Option<bool>,
    pub config_hash: String,
}

impl QualityTable {
    pub fn csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    format!("{:?}", r.space).to_lowercase(),
                    r.n_total.to_string(),
                    r.n_flipped.to_string(),
                    fmt_real(r.psnr_mean),
                    fmt_real(r.psnr_std),
                    fmt_real(r.ssim_mean),
                    fmt_real(r.ssim_std),
                ]
            })
            .collect();
        csv_text(&["space", "n", "flipped", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"], &rows)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn quality_row(space: SpaceKind, results: &[CounterfactualResult]) -> QualityRow {
    let flipped: Vec<&CounterfactualResult> = results.iter().filter(|r| r.flipped).collect();
    let (psnr_mean, psnr_std) = mean_std(&flipped.iter().map(|r| r.psnr).collect::<Vec<_>>());
    let (ssim_mean, ssim_std) = mean_std(&flipped.iter().map(|r| r.ssim).collect::<Vec<_>>());
    QualityRow { space, n_total: results.len(), n_flipped: flipped.len(), psnr_mean, psnr_std, ssim_mean, ssim_std }
}

/// PSNR and SSIM of flipped counterfactuals, attribute space versus raw style space.
pub fn quality_table(
    world: &World,
    model: &TargetModel,
    space: &AttributeSpace,
    config: &DiagnosisConfig,
) -> Result<QualityTable> {
    let config_hash = canonical_hash(config)?;
    if config.n_samples == 0 {
        return Ok(QualityTable { rows: Vec::new(), attribute_ssim_not_lower: None, config_hash });
    }
    let styles = population(world, config.seed, Stream::Diagnosis, config.n_samples);
    let mut rows = Vec::new();
    for kind in [SpaceKind::Attribute, SpaceKind::RawStyle] {
        let search = SearchConfig { space: kind, ..config.search.clone() };
        let results = run_searches(world, model, space, &styles, &search)?;
        rows.push(quality_row(kind, &results));
    }
    let flag = if rows.iter().all(|r| r.n_flipped > 0) { Some(rows[0].ssim_mean >= rows[1].ssim_mean) } else { None };
    Ok(QualityTable { rows, attribute_ssim_not_lower: flag, config_hash })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub optimizer: OptimizerKind,
    pub mean_ssim: f64,
    pub flip_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Per model: signed search kept SSIM at least as high as plain search.
    pub signed_ssim_not_lower: Vec<bool>,
    /// Per model: plain search flipped at least as often as signed search.
    pub plain_flip_not_lower: Vec<bool>,
    pub n_samples: usize,
    pub config_hash: String,
}

impl AblationReport {
    pub fn csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.model.clone(),
                    format!("{:?}", r.optimizer).to_lowercase(),
                    fmt_real(r.mean_ssim),
                    fmt_real(r.flip_rate),
                ]
            })
            .collect();
        csv_text(&["model", "optimizer", "mean_ssim", "flip_rate"], &rows)
    }

    /// Both trends hold for every model.
    pub fn trend_holds(&self) -> bool {
        self.signed_ssim_not_lower.iter().chain(&self.plain_flip_not_lower).all(|&b| b)
    }
}

/// Model under ablation, with the attribute it predicts.
#[derive(Clone, Debug)]
pub struct AblationTarget {
    pub name: String,
    pub model: TargetModel,
    pub diag_attribute: Option<String>,
}

/// Plain versus signed gradient updates on each model, in the attribute space
/// minus the model's own attribute.
pub fn ablate_optimizers(
    world: &World,
    targets: &[AblationTarget],
    space: &AttributeSpace,
    config: &DiagnosisConfig,
) -> Result<AblationReport> {
    let styles = population(world, config.seed, Stream::Diagnosis, config.n_samples);
    let mut rows = Vec::new();
    let (mut ssim_flags, mut flip_flags) = (Vec::new(), Vec::new());
    for t in targets {
        let sub = match &t.diag_attribute {
            Some(a) => space.without(a),
            None => space.clone(),
        };
        let mut pair = Vec::new();
        for optimizer in [OptimizerKind::Plain, OptimizerKind::Signed] {
            let search = SearchConfig {
                optimizer,
                space: SpaceKind::Attribute,
                diag_attribute: t.diag_attribute.clone(),
                ..config.search.clone()
            };
            let results = run_searches(world, &t.model, &sub, &styles, &search)?;
            let mean_ssim = results.iter().map(|r| r.ssim).sum::<f64>() / results.len().max(1) as f64;
            let flip_rate = if results.is_empty() { 0.0 } else { flip_stats(&results, search.iterations)?.flip_rate };
            pair.push((mean_ssim, flip_rate));
            rows.push(AblationRow { model: t.name.clone(), optimizer, mean_ssim, flip_rate });
        }
        ssim_flags.push(pair[1].0 >= pair[0].0);
        flip_flags.push(pair[0].1 >= pair[1].1);
    }
    Ok(AblationReport {
        rows,
        signed_ssim_not_lower: ssim_flags,
        plain_flip_not_lower: flip_flags,
        n_samples: config.n_samples,
        config_hash: canonical_hash(config)?,
    })
}
