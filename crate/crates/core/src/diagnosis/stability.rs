use serde::{Deserialize, Serialize};

use super::{sensitivity_histogram, DiagnosisConfig, SensitivityReport};
use crate::direction::{AttributeSpace, Filter, RelevanceMatrix};
use crate::error::{Error, Result};
use crate::world::{TargetModel, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub phrasing_sets: Vec<Vec<String>>,
    pub histograms: Vec<SensitivityReport>,
    /// Every phrasing set ranks the same attribute first.
    pub top1_agreement: bool,
    /// Pairwise Spearman correlation between the sets' raw scores, row-major.
    pub spearman: Vec<f64>,
    pub min_spearman: f64,
    /// Fewer than two attributes, so rank correlation is vacuous.
    pub degenerate: bool,
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
///
/// Vectors shorter than two, or two constant vectors, correlate at 1; one
/// constant against a varying vector gives 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("spearman", format!("{} vs {} entries", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Ok(1.0);
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    Ok(match (va == 0.0, vb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => cov / (va * vb).sqrt(),
    })
}

/// Sensitivity histograms for several phrasings of the same attributes, and
/// how well their rankings agree.
///
/// Each set holds one phrase per attribute, in the same attribute order.
pub fn prompt_stability(
    world: &World,
    model: &TargetModel,
    m: &RelevanceMatrix,
    phrasing_sets: &[Vec<String>],
    filter: Filter,
    config: &DiagnosisConfig,
) -> Result<StabilityReport> {
    if phrasing_sets.len() < 2 {
        return Err(Error::precondition("prompt stability needs at least two phrasing sets"));
    }
    let mut attribute_order: Option<Vec<usize>> = None;
    for set in phrasing_sets {
        let attrs = set
            .iter()
            .map(|p| world.prompts().attribute_of_phrase(p).ok_or_else(|| Error::UnknownAttribute(p.clone())))
            .collect::<Result<Vec<_>>>()?;
        match &attribute_order {
            None => attribute_order = Some(attrs),
            Some(o) if *o != attrs => {
                return Err(Error::precondition("phrasing sets must name the same attributes in the same order"));
            }
            _ => {}
        }
    }
    let histograms = phrasing_sets
        .iter()
        .map(|set| {
            let phrases: Vec<&str> = set.iter().map(String::as_str).collect();
            let space = AttributeSpace::from_phrases(world, m, &phrases, filter)?;
            sensitivity_histogram(world, model, &space, config)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = histograms.len();
    let mut corr = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            corr[i * k + j] = spearman(&histograms[i].raw, &histograms[j].raw)?;
        }
    }
    let top = histograms[0].top();
    Ok(StabilityReport {
        phrasing_sets: phrasing_sets.to_vec(),
        top1_agreement: histograms.iter().all(|h| h.top() == top),
        min_spearman: corr.iter().cloned().fold(1.0, f64::min),
        degenerate: histograms[0].names.len() < 2,
        spearman: corr,
        histograms,
    })
}
