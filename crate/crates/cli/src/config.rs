//! Run configuration: one versioned TOML file per run, with scalar overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use semcf::direction::{Filter, ProbeConfig};
use semcf::engine::SearchConfig;
use semcf::training::CTConfig;
use semcf::world::{CellCounts, DatasetDesign, ModelKind, TrainHyper, WorldConfig};
use semcf::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub world: WorldConfig,
    pub target: TargetConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    pub attributes: AttributeConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub diagnosis: DiagnosisSection,
    #[serde(default)]
    pub ct: CTConfig,
    #[serde(default)]
    pub ablation: AblationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confound: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<CellCounts>,
    /// Training-set size for keypoint models.
    #[serde(default = "default_keypoint_samples")]
    pub keypoint_samples: usize,
    #[serde(default)]
    pub train: TrainHyper,
}

fn default_keypoint_samples() -> usize {
    2000
}

impl TargetConfig {
    /// Dataset design of a classifier target.
    pub fn design(&self) -> Result<DatasetDesign> {
        let missing = |field: &str| Error::Config(format!("target.{field} is required for a classifier"));
        Ok(DatasetDesign {
            label: self.label.clone().ok_or_else(|| missing("label"))?,
            confound: self.confound.clone().ok_or_else(|| missing("confound"))?,
            cells: self.cells.ok_or_else(|| missing("cells"))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeConfig {
    /// One phrase per attribute; the phrase selects the attribute and its prompt.
    pub phrases: Vec<String>,
    #[serde(default)]
    pub filter: Filter,
    /// Threshold overrides keyed by phrase; others use the default percentile.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub lambda: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosisSection {
    pub n_samples: usize,
    pub seed: u64,
    /// Diagnosis-population member used by `counterfactual` and `sweep-lambda`.
    pub sample_index: usize,
    /// Attribute pairs for `combine`.
    pub pairs: Vec<[String; 2]>,
    /// Phrasing sets for `stability`, one phrase per attribute each.
    pub phrasing_sets: Vec<Vec<String>>,
    /// Phrase swept by `sweep-lambda`; defaults to the first attribute phrase.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_phrase: Option<String>,
    /// Thresholds for `sweep-lambda`; defaults to six even steps from 0 to the largest entry.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_lambdas: Option<Vec<f64>>,
}

impl Default for DiagnosisSection {
    fn default() -> Self {
        Self {
            n_samples: 200,
            seed: 0,
            sample_index: 0,
            pairs: Vec::new(),
            phrasing_sets: Vec::new(),
            sweep_phrase: None,
            sweep_lambdas: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Extra classifiers compared alongside the configured target.
    pub classifiers: Vec<AblationClassifier>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationClassifier {
    pub name: String,
    pub label: String,
    pub confound: String,
    pub cells: CellCounts,
    #[serde(default)]
    pub train: TrainHyper,
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides, validates and resolves defaults.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut config: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        config.resolve();
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.world.validate()?;
        self.search.validate()?;
        self.ct.search.validate()?;
        if self.attributes.phrases.is_empty() {
            return Err(Error::Config("attributes.phrases must name at least one attribute".into()));
        }
        for (phrase, lambda) in &self.attributes.lambda {
            if !self.attributes.phrases.contains(phrase) {
                return Err(Error::Config(format!("attributes.lambda names `{phrase}`, which is not in attributes.phrases")));
            }
            if !lambda.is_finite() {
                return Err(Error::Config(format!("attributes.lambda.{phrase} must be finite")));
            }
        }
        if self.target.kind == ModelKind::Classifier {
            self.target.design()?;
        }
        if self.probe.n_samples == 0 || !(self.probe.delta > 0.0) {
            return Err(Error::Config("probe.n_samples and probe.delta must be positive".into()));
        }
        Ok(())
    }

    /// The diagnosed attribute defaults to the classifier label, for both the
    /// diagnosis search and the counterfactual-training search.
    fn resolve(&mut self) {
        if self.target.kind != ModelKind::Classifier {
            return;
        }
        let label = self.target.label.clone();
        if self.search.diag_attribute.is_none() {
            self.search.diag_attribute = label.clone();
        }
        if self.ct.search.diag_attribute.is_none() {
            self.ct.search.diag_attribute = label;
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.world.seed
    }
}

/// Sets one scalar field, `dotted.path=value`. The value is read as a TOML
/// scalar when it parses as one and as a bare string otherwise.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key `{path}` is malformed")));
    }
    let mut value = parse_scalar(raw.trim())?;
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut table = root;
    for key in parents {
        let entry = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{path}`: `{key}` is not a section"))),
        };
    }
    match table.get(*last) {
        Some(toml::Value::Table(_) | toml::Value::Array(_)) => {
            return Err(Error::Config(format!("override `{path}` targets a section or list; only scalar fields can be set")));
        }
        Some(toml::Value::Float(_)) => {
            if let toml::Value::Integer(i) = value {
                value = toml::Value::Float(i as f64);
            }
        }
        _ => {}
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_scalar(raw: &str) -> Result<toml::Value> {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => match t.remove("v") {
            Some(v @ (toml::Value::Table(_) | toml::Value::Array(_))) => {
                Err(Error::Config(format!("override value `{raw}` is not a scalar ({})", v.type_str())))
            }
            Some(v) => Ok(v),
            None => Ok(toml::Value::String(raw.to_string())),
        },
        Err(_) => Ok(toml::Value::String(raw.to_string())),
    }
}
