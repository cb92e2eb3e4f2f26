//! Text-guided edit directions in style space.
//!
//! A relevance matrix maps text-embedding deltas to style-channel
//! sensitivities; thresholding the mapped delta leaves the channels an edit
//! should touch.

use serde::{Deserialize, Serialize};

use crate::autodiff::matvec_values;
use crate::error::{Error, Result};
use crate::parallel;
use crate::report::canonical_hash;
use crate::rng::{self, Stream};
use crate::world::{compose_prompt, Embedding, StyleVector, World};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_samples: usize,
    pub delta: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { n_samples: 64, delta: 0.5, seed: 0 }
    }
}

/// `c_S x c_T` style-to-embedding sensitivity, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMatrix {
    pub style_dim: usize,
    pub embed_dim: usize,
    pub entries: Vec<f64>,
    pub probe: ProbeConfig,
    pub world_hash: String,
}

impl RelevanceMatrix {
    pub fn row(&self, channel: usize) -> &[f64] {
        &self.entries[channel * self.embed_dim..(channel + 1) * self.embed_dim]
    }

    pub fn hash(&self) -> Result<String> {
        canonical_hash(self)
    }

    /// `M . dt`, one value per style channel.
    pub fn apply(&self, dt: &Embedding) -> Result<Vec<f64>> {
        if dt.values().len() != self.embed_dim {
            return Err(Error::shape(
                "relevance",
                format!("delta has {} entries, matrix has {} columns", dt.values().len(), self.embed_dim),
            ));
        }
        Ok(matvec_values(&self.entries, self.style_dim, self.embed_dim, dt.values()))
    }
}

/// Forward-difference estimate of how each style channel moves the image embedding.
pub fn probe_relevance(world: &World, probe: &ProbeConfig) -> Result<RelevanceMatrix> {
    if probe.n_samples == 0 {
        return Err(Error::precondition("probe needs at least one sample"));
    }
    if !(probe.delta > 0.0) {
        return Err(Error::precondition(format!("probe step must be positive, got {}", probe.delta)));
    }
    let (c_s, c_t) = (world.style_dim(), world.embed_dim());
    let styles: Vec<StyleVector> = (0..probe.n_samples)
        .map(|i| world.sample_style_with(&mut rng::derive(probe.seed, Stream::Probe, i as u64)))
        .collect();
    let base = parallel::try_map_indexed(styles.len(), |i| world.embed_image(&world.render(&styles[i])?))?;
    let rows = parallel::try_map_indexed(c_s, |c| {
        let mut acc = vec![0.0; c_t];
        for (s, e0) in styles.iter().zip(&base) {
            let mut shifted = s.clone();
            shifted.0[c] += probe.delta;
            let e1 = world.embed_image(&world.render(&shifted)?)?;
            for ((a, x1), x0) in acc.iter_mut().zip(e1.values()).zip(e0.values()) {
                *a += (x1 - x0) / probe.delta;
            }
        }
        let n = probe.n_samples as f64;
        Ok(acc.into_iter().map(|a| a / n).collect::<Vec<f64>>())
    })?;
    Ok(RelevanceMatrix {
        style_dim: c_s,
        embed_dim: c_t,
        entries: rows.concat(),
        probe: *probe,
        world_hash: world.hash().to_string(),
    })
}

/// `embed_text(p + phrase) - embed_text(p)` for the world's neutral prefix `p`.
pub fn text_delta(world: &World, phrase: &str) -> Result<Embedding> {
    let prefix = world.neutral_prefix();
    let neutral = world.embed_text(prefix)?;
    let prompt = compose_prompt(prefix, phrase);
    let edited = world.embed_text(&prompt).map_err(|_| {
        if world.prompts().attribute_of_phrase(phrase).is_none() {
            Error::UnknownAttribute(phrase.to_string())
        } else {
            Error::UnknownPrompt(prompt.clone())
        }
    })?;
    Ok(edited.sub(&neutral))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    /// Keep channels with `M dt > lambda`.
    #[default]
    OneSided,
    /// Keep channels with `|M dt| > lambda`.
    Symmetric,
}

/// Default threshold: the 95th percentile (linear interpolation) of the
/// filter statistic over channels.
pub fn default_lambda(raw: &[f64], filter: Filter) -> f64 {
    let mut v: Vec<f64> = raw
        .iter()
        .map(|&x| match filter {
            Filter::OneSided => x,
            Filter::Symmetric => x.abs(),
        })
        .collect();
    percentile(&mut v, 0.95)
}

fn percentile(v: &mut [f64], q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditDirection {
    /// Canonical attribute name.
    pub attribute: String,
    /// Phrase whose text delta produced this direction.
    pub phrase: String,
    pub raw: Vec<f64>,
    pub filtered: Vec<f64>,
    pub normalized: Vec<f64>,
    pub lambda: f64,
    pub filter: Filter,
    pub surviving: Vec<usize>,
}

impl EditDirection {
    /// Channel table with columns `channel, raw, survived, normalized`.
    pub fn channel_table_csv(&self) -> String {
        let rows: Vec<Vec<String>> = (0..self.raw.len())
            .map(|c| {
                vec![
                    c.to_string(),
                    crate::report::fmt_real(self.raw[c]),
                    (self.surviving.contains(&c) as u8).to_string(),
                    crate::report::fmt_real(self.normalized[c]),
                ]
            })
            .collect();
        crate::report::csv_text(&["channel", "raw", "survived", "normalized"], &rows)
    }
}

/// Thresholds `M dt` at `lambda`, strictly.
pub fn edit_direction(
    m: &RelevanceMatrix,
    attribute: &str,
    phrase: &str,
    dt: &Embedding,
    lambda: f64,
    filter: Filter,
) -> Result<EditDirection> {
    if !(lambda >= 0.0) {
        return Err(Error::precondition(format!("lambda must be nonnegative, got {lambda}")));
    }
    let raw = m.apply(dt)?;
    let keep = |x: f64| match filter {
        Filter::OneSided => x > lambda,
        Filter::Symmetric => x.abs() > lambda,
    };
    let surviving: Vec<usize> = (0..raw.len()).filter(|&c| keep(raw[c])).collect();
    if surviving.is_empty() {
        let max_entry = raw.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        return Err(Error::EmptyDirection { attribute: attribute.to_string(), lambda, max_entry });
    }
    let filtered: Vec<f64> = raw.iter().map(|&x| if keep(x) { x } else { 0.0 }).collect();
    let norm = filtered.iter().map(|x| x * x).sum::<f64>().sqrt();
    let normalized = filtered.iter().map(|x| x / norm).collect();
    Ok(EditDirection {
        attribute: attribute.to_string(),
        phrase: phrase.to_string(),
        raw,
        filtered,
        normalized,
        lambda,
        filter,
        surviving,
    })
}

/// Direction for a phrase (canonical or synonym), with an optional explicit threshold.
pub fn direction_for_phrase(
    world: &World,
    m: &RelevanceMatrix,
    phrase: &str,
    lambda: Option<f64>,
    filter: Filter,
) -> Result<EditDirection> {
    let index = world
        .prompts()
        .attribute_of_phrase(phrase)
        .ok_or_else(|| Error::UnknownAttribute(phrase.to_string()))?;
    let attribute = world.feature_names()[index].to_string();
    let dt = text_delta(world, phrase)?;
    let lambda = match lambda {
        Some(l) => l,
        None => default_lambda(&m.apply(&dt)?, filter),
    };
    edit_direction(m, &attribute, phrase, &dt, lambda, filter)
}

/// Ordered set of edit directions sharing one world and relevance matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpace {
    pub directions: Vec<EditDirection>,
    pub prompt_hash: String,
    pub relevance_hash: String,
}

impl AttributeSpace {
    pub fn new(world: &World, m: &RelevanceMatrix, directions: Vec<EditDirection>) -> Result<Self> {
        if m.world_hash != world.hash() {
            return Err(Error::precondition("relevance matrix was probed on a different world"));
        }
        for (i, d) in directions.iter().enumerate() {
            if directions[..i].iter().any(|e| e.attribute == d.attribute) {
                return Err(Error::DuplicateAttribute(d.attribute.clone()));
            }
            if d.normalized.len() != world.style_dim() {
                return Err(Error::shape("attribute_space", format!("direction '{}' has wrong length", d.attribute)));
            }
        }
        Ok(Self {
            directions,
            prompt_hash: canonical_hash(world.prompts())?,
            relevance_hash: m.hash()?,
        })
    }

    /// Builds directions for each phrase with the default threshold.
    pub fn from_phrases(world: &World, m: &RelevanceMatrix, phrases: &[&str], filter: Filter) -> Result<Self> {
        let dirs = phrases
            .iter()
            .map(|p| direction_for_phrase(world, m, p, None, filter))
            .collect::<Result<Vec<_>>>()?;
        Self::new(world, m, dirs)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.directions.iter().map(|d| d.attribute.as_str()).collect()
    }

    /// Sub-space with the directions at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut directions = Vec::with_capacity(indices.len());
        for &i in indices {
            let d = self
                .directions
                .get(i)
                .ok_or_else(|| Error::precondition(format!("direction index {i} out of range")))?;
            if directions.iter().any(|e: &EditDirection| e.attribute == d.attribute) {
                return Err(Error::DuplicateAttribute(d.attribute.clone()));
            }
            directions.push(d.clone());
        }
        Ok(Self { directions, ..self.clone() })
    }

    /// Sub-space keeping the named attributes, in the given order.
    pub fn select_names(&self, names: &[&str]) -> Result<Self> {
        let indices = names
            .iter()
            .map(|n| {
                self.directions
                    .iter()
                    .position(|d| d.attribute == *n)
                    .ok_or_else(|| Error::UnknownAttribute(n.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        self.select(&indices)
    }

    /// Sub-space without the named attribute.
    pub fn without(&self, name: &str) -> Self {
        let directions = self.directions.iter().filter(|d| d.attribute != name).cloned().collect();
        Self { directions, ..self.clone() }
    }

    /// Normalized directions as a row-major `[c_S, N]` matrix.
    pub fn direction_matrix(&self) -> Vec<f64> {
        let n = self.len();
        let c_s = self.directions.first().map_or(0, |d| d.normalized.len());
        let mut out = vec![0.0; c_s * n];
        for (i, d) in self.directions.iter().enumerate() {
            for (c, &v) in d.normalized.iter().enumerate() {
                out[c * n + i] = v;
            }
        }
        out
    }

    pub fn style_dim(&self) -> usize {
        self.directions.first().map_or(0, |d| d.normalized.len())
    }
}

/// Edit strengths with their bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditWeights {
    pub w: Vec<f64>,
    pub bound: f64,
}

impl EditWeights {
    pub fn new(w: Vec<f64>, bound: f64) -> Result<Self> {
        if let Some(x) = w.iter().find(|x| !(x.abs() <= bound)) {
            return Err(Error::precondition(format!("weight {x} exceeds bound {bound}")));
        }
        Ok(Self { w, bound })
    }
}

/// `sum_i w_i ds_i / ||ds_i||`.
pub fn combine_edits(space: &AttributeSpace, w: &[f64]) -> Result<Vec<f64>> {
    if w.len() != space.len() {
        return Err(Error::shape("combine_edits", format!("{} weights for {} directions", w.len(), space.len())));
    }
    Ok(matvec_values(&space.direction_matrix(), space.style_dim(), space.len(), w))
}
