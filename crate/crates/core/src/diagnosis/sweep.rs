use serde::{Deserialize, Serialize};

use crate::direction::{direction_for_phrase, Filter, RelevanceMatrix};
use crate::error::{Error, Result};
use crate::world::{ImageTensor, StyleVector, World};

/// Edit strengths of each rendered strip.
pub const STRIP_WEIGHTS: [f64; 5] = [-30.0, -15.0, 0.0, 15.0, 30.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaEntry {
    pub lambda: f64,
    pub survivors: usize,
    pub surviving: Vec<usize>,
    /// Norm of the thresholded direction before normalization.
    pub norm: f64,
    /// Images of `s + w d` for each of [`STRIP_WEIGHTS`]; empty when nothing survived.
    pub strip: Vec<ImageTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub attribute: String,
    pub phrase: String,
    pub base_style: StyleVector,
    pub entries: Vec<LambdaEntry>,
}

impl LambdaSweep {
    pub fn csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .entries
            .iter()
            .map(|e| {
                let chans: Vec<String> = e.surviving.iter().map(|c| c.to_string()).collect();
                vec![
                    crate::report::fmt_real(e.lambda),
                    e.survivors.to_string(),
                    crate::report::fmt_real(e.norm),
                    chans.join(" "),
                ]
            })
            .collect();
        crate::report::csv_text(&["lambda", "survivors", "norm", "channels"], &rows)
    }
}

/// Direction summary and edit strip for each threshold in ascending `lambdas`.
pub fn lambda_sweep(
    world: &World,
    m: &RelevanceMatrix,
    phrase: &str,
    lambdas: &[f64],
    filter: Filter,
    base_style: &StyleVector,
) -> Result<LambdaSweep> {
    if lambdas.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::precondition("lambda values must be sorted ascending"));
    }
    let mut entries = Vec::with_capacity(lambdas.len());
    let mut attribute = None;
    let mut last_err = None;
    for &lambda in lambdas {
        match direction_for_phrase(world, m, phrase, Some(lambda), filter) {
            Ok(d) => {
                let strip = STRIP_WEIGHTS
                    .iter()
                    .map(|&w| {
                        let delta: Vec<f64> = d.normalized.iter().map(|x| w * x).collect();
                        world.render(&base_style.shifted(&delta))
                    })
                    .collect::<Result<Vec<_>>>()?;
                attribute = Some(d.attribute.clone());
                entries.push(LambdaEntry {
                    lambda,
                    survivors: d.surviving.len(),
                    norm: d.filtered.iter().map(|x| x * x).sum::<f64>().sqrt(),
                    surviving: d.surviving,
                    strip,
                });
            }
            Err(e @ Error::EmptyDirection { .. }) => {
                last_err = Some(e);
                entries.push(LambdaEntry { lambda, survivors: 0, surviving: Vec::new(), norm: 0.0, strip: Vec::new() });
            }
            Err(e) => return Err(e),
        }
    }
    let Some(attribute) = attribute else {
        return Err(last_err.unwrap_or_else(|| Error::precondition("empty lambda sweep")));
    };
    Ok(LambdaSweep { attribute, phrase: phrase.to_string(), base_style: base_style.clone(), entries })
}
