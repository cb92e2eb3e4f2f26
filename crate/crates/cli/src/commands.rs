//! One function per command. Each reads its upstream artifacts, runs a single
//! library operation, and returns the files to write; the files are written
//! serially, in the order they were produced, followed by the manifest.

use std::path::{Path, PathBuf};

use semcf::diagnosis::{
    ablate_optimizers, combination_histogram, confusion_matrix, lambda_sweep, oracle_histogram, population,
    prompt_stability, quality_table, sensitivity_histogram, spearman, AblationTarget, DiagnosisConfig,
    SensitivityReport, STRIP_WEIGHTS,
};
use semcf::direction::{direction_for_phrase, probe_relevance, AttributeSpace, Filter, RelevanceMatrix};
use semcf::engine::search_counterfactual;
use semcf::report::{
    bar_chart_svg, canonical_hash, csv_text, fmt_real, parse_document, sha256_hex, to_canonical_json, write_pgm,
    Document,
};
use semcf::rng::Stream;
use semcf::training::ct_train;
use semcf::world::{
    make_dataset, make_keypoint_dataset, DatasetDesign, LabeledDataset, ModelKind, StyleVector, TargetModel,
    TrainHyper, TrainingSummary, World, WorldConfig,
};
use semcf::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::{ArtifactHashes, FileHash, RunManifest};

pub const WORLD_FILE: &str = "world.json";
pub const TARGET_FILE: &str = "target.json";
pub const RELEVANCE_FILE: &str = "relevance.json";
pub const DIRECTIONS_FILE: &str = "directions.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    WorldInit,
    TrainTarget,
    Probe,
    Direction,
    Counterfactual,
    Diagnose,
    Combine,
    Confusion,
    Quality,
    Ct,
    AblateOpt,
    SweepLambda,
    Stability,
}

impl Step {
    pub const ALL: [Step; 13] = [
        Step::WorldInit,
        Step::TrainTarget,
        Step::Probe,
        Step::Direction,
        Step::Counterfactual,
        Step::Diagnose,
        Step::Combine,
        Step::Confusion,
        Step::Quality,
        Step::Ct,
        Step::AblateOpt,
        Step::SweepLambda,
        Step::Stability,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::WorldInit => "world-init",
            Step::TrainTarget => "train-target",
            Step::Probe => "probe",
            Step::Direction => "direction",
            Step::Counterfactual => "counterfactual",
            Step::Diagnose => "diagnose",
            Step::Combine => "combine",
            Step::Confusion => "confusion",
            Step::Quality => "quality",
            Step::Ct => "ct",
            Step::AblateOpt => "ablate-opt",
            Step::SweepLambda => "sweep-lambda",
            Step::Stability => "stability",
        }
    }

    pub fn from_name(name: &str) -> Option<Step> {
        Step::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldArtifact {
    pub config: WorldConfig,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetArtifact {
    pub kind: ModelKind,
    pub design: Option<DatasetDesign>,
    pub keypoint_samples: Option<usize>,
    pub train: TrainHyper,
    pub summary: TrainingSummary,
    pub world_hash: String,
    pub model_hash: String,
    pub model: TargetModel,
}

#[derive(Serialize)]
struct DiagnoseSummary<'a> {
    attributes: &'a [String],
    top: &'a str,
    oracle_top: &'a str,
    top1_agreement: bool,
    spearman: f64,
    degenerate: bool,
}

#[derive(Serialize)]
struct ConfusionSummary<'a> {
    matrix: &'a semcf::diagnosis::ConfusionMatrix,
    dominant_columns: usize,
    columns: usize,
}

/// Inputs read and outputs produced by one command run.
pub struct Context {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    inputs: Vec<FileHash>,
    outputs: Vec<(String, Vec<u8>)>,
    hashes: ArtifactHashes,
}

impl Context {
    pub fn new(config: RunConfig, out_dir: PathBuf) -> Self {
        Self { config, out_dir, inputs: Vec::new(), outputs: Vec::new(), hashes: ArtifactHashes::default() }
    }

    fn read_artifact<T: DeserializeOwned>(&mut self, file: &str, format: &str, producer: Step) -> Result<T> {
        let path = self.out_dir.join(file);
        let bytes = std::fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Precondition(format!(
                    "missing {} in {}; run `semcf {}` first",
                    file,
                    self.out_dir.display(),
                    producer.name()
                ))
            } else {
                Error::io(&path, e)
            }
        })?;
        self.inputs.push(FileHash { path: file.to_string(), sha256: sha256_hex(&bytes) });
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
        parse_document(&text, format).map_err(|detail| Error::Format { path: path.display().to_string(), detail })
    }

    fn emit_text(&mut self, rel: impl Into<String>, text: String) {
        self.outputs.push((rel.into(), text.into_bytes()));
    }

    fn emit_json<T: Serialize>(&mut self, rel: impl Into<String>, format: &str, content: &T) -> Result<()> {
        let text = to_canonical_json(&Document::new(format, content))?;
        self.emit_text(rel, text);
        Ok(())
    }

    fn world(&mut self) -> Result<World> {
        let art: WorldArtifact = self.read_artifact(WORLD_FILE, "world", Step::WorldInit)?;
        if art.config != self.config.world {
            return Err(Error::Precondition(format!(
                "the [world] section differs from {WORLD_FILE}; run `semcf world-init` again"
            )));
        }
        let world = World::new(art.config)?;
        if world.hash() != art.hash {
            return Err(Error::Precondition(format!("{WORLD_FILE} does not match its recorded hash")));
        }
        self.hashes.world = Some(art.hash);
        Ok(world)
    }

    fn target(&mut self, world: &World) -> Result<TargetArtifact> {
        let art: TargetArtifact = self.read_artifact(TARGET_FILE, "target", Step::TrainTarget)?;
        let t = &self.config.target;
        let design = match t.kind {
            ModelKind::Classifier => Some(t.design()?),
            ModelKind::Keypoint => None,
        };
        let keypoint_samples = (t.kind == ModelKind::Keypoint).then_some(t.keypoint_samples);
        if art.kind != t.kind || art.design != design || art.keypoint_samples != keypoint_samples || art.train != t.train {
            return Err(Error::Precondition(format!(
                "the [target] section differs from {TARGET_FILE}; run `semcf train-target` again"
            )));
        }
        if art.world_hash != world.hash() {
            return Err(Error::Precondition(format!("{TARGET_FILE} was trained in a different world")));
        }
        if canonical_hash(&art.model)? != art.model_hash {
            return Err(Error::Precondition(format!("{TARGET_FILE} does not match its recorded model hash")));
        }
        art.model.validate()?;
        self.hashes.model = Some(art.model_hash.clone());
        Ok(art)
    }

    fn relevance(&mut self, world: &World) -> Result<RelevanceMatrix> {
        let m: RelevanceMatrix = self.read_artifact(RELEVANCE_FILE, "relevance", Step::Probe)?;
        if m.world_hash != world.hash() {
            return Err(Error::Precondition(format!("{RELEVANCE_FILE} was probed in a different world")));
        }
        if m.probe != self.config.probe {
            return Err(Error::Precondition(format!(
                "the [probe] section differs from {RELEVANCE_FILE}; run `semcf probe` again"
            )));
        }
        self.hashes.relevance = Some(m.hash()?);
        Ok(m)
    }

    fn space(&mut self, world: &World) -> Result<(RelevanceMatrix, AttributeSpace)> {
        let m = self.relevance(world)?;
        let space: AttributeSpace = self.read_artifact(DIRECTIONS_FILE, "directions", Step::Direction)?;
        let phrases: Vec<&str> = space.directions.iter().map(|d| d.phrase.as_str()).collect();
        if space.relevance_hash != m.hash()? || phrases != self.config.attributes.phrases {
            return Err(Error::Precondition(format!(
                "{DIRECTIONS_FILE} is stale for this config; run `semcf direction` again"
            )));
        }
        self.hashes.directions = Some(canonical_hash(&space)?);
        Ok((m, space))
    }

    fn diagnosis(&self) -> DiagnosisConfig {
        DiagnosisConfig {
            n_samples: self.config.diagnosis.n_samples,
            seed: self.config.diagnosis.seed,
            search: self.config.search.clone(),
        }
    }

    /// The configured attributes minus the one the model predicts.
    fn search_space(&self, space: &AttributeSpace, diag: &Option<String>) -> Result<AttributeSpace> {
        let sub = match diag {
            Some(a) => space.without(a),
            None => space.clone(),
        };
        if sub.is_empty() {
            return Err(Error::Precondition(
                "no attributes left to search once the diagnosed attribute is removed".into(),
            ));
        }
        Ok(sub)
    }

    fn sample_style(&self, world: &World) -> StyleVector {
        let d = &self.config.diagnosis;
        population(world, d.seed, Stream::Diagnosis, d.sample_index + 1).swap_remove(d.sample_index)
    }

    /// Writes all outputs and then the manifest.
    pub fn finish(self, step: Step) -> Result<RunManifest> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for (rel, bytes) in &self.outputs {
            let path = self.out_dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            outputs.push(FileHash { path: rel.clone(), sha256: sha256_hex(bytes) });
        }
        let mut config = self.config;
        config.output_dir = None;
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: step.name().to_string(),
            master_seed: config.master_seed(),
            config,
            hashes: self.hashes,
            inputs: self.inputs,
            outputs,
        };
        manifest.write(&self.out_dir)?;
        Ok(manifest)
    }
}

/// Runs `step` with `config`, reading and writing under `out_dir`.
pub fn run(step: Step, config: RunConfig, out_dir: &Path) -> Result<RunManifest> {
    let mut cx = Context::new(config, out_dir.to_path_buf());
    match step {
        Step::WorldInit => world_init(&mut cx)?,
        Step::TrainTarget => train(&mut cx)?,
        Step::Probe => probe(&mut cx)?,
        Step::Direction => direction(&mut cx)?,
        Step::Counterfactual => counterfactual(&mut cx)?,
        Step::Diagnose => diagnose(&mut cx)?,
        Step::Combine => combine(&mut cx)?,
        Step::Confusion => confusion(&mut cx)?,
        Step::Quality => quality(&mut cx)?,
        Step::Ct => ct(&mut cx)?,
        Step::AblateOpt => ablate(&mut cx)?,
        Step::SweepLambda => sweep(&mut cx)?,
        Step::Stability => stability(&mut cx)?,
    }
    cx.finish(step)
}

fn world_init(cx: &mut Context) -> Result<()> {
    let world = World::new(cx.config.world.clone())?;
    let art = WorldArtifact { config: world.config().clone(), hash: world.hash().to_string() };
    cx.hashes.world = Some(art.hash.clone());
    cx.emit_json(WORLD_FILE, "world", &art)?;
    let rows: Vec<Vec<String>> = world
        .prompts()
        .attributes()
        .iter()
        .flat_map(|a| {
            std::iter::once(&a.canonical).chain(&a.synonyms).map(|p| vec![a.canonical.clone(), p.clone()])
        })
        .collect();
    cx.emit_text("world/prompts.csv", csv_text(&["attribute", "phrase"], &rows));
    Ok(())
}

fn training_set(world: &World, config: &RunConfig) -> Result<LabeledDataset> {
    match config.target.kind {
        ModelKind::Classifier => make_dataset(world, &config.target.design()?, Stream::TrainSet),
        ModelKind::Keypoint => make_keypoint_dataset(world, config.target.keypoint_samples, Stream::TrainSet),
    }
}

fn train(cx: &mut Context) -> Result<()> {
    let world = cx.world()?;
    let t = cx.config.target.clone();
    let dataset = training_set(&world, &cx.config)?;
    let trained = semcf::world::train_target(&dataset, t.kind, &t.train)?;
    let model_hash = canonical_hash(&trained.model)?;
    cx.hashes.model = Some(model_hash.clone());
    let art = TargetArtifact {
        kind: t.kind,
        design: match t.kind {
            ModelKind::Classifier => Some(t.design()?),
            ModelKind::Keypoint => None,
        },
        keypoint_samples: (t.kind == ModelKind::Keypoint).then_some(t.keypoint_samples),
        train: t.train,
        summary: trained.summary,
        world_hash: world.hash().to_string(),
        model_hash,
        model: trained.model,
    };
    cx.emit_json(TARGET_FILE, "target", &art)
}

fn probe(cx: &mut Context) -> Result<()> {
    let world = cx.world()?;
    let m = probe_relevance(&world, &cx.config.probe)?;
    cx.hashes.relevance = Some(m.hash()?);
    cx.emit_json(RELEVANCE_FILE, "relevance", &m)
}

fn direction(cx: &mut Context) -> Result<()> {
    let world = cx.world()?;
    let m = cx.relevance(&world)?;
    let a = cx.config.attributes.clone();
    let directions = a
        .phrases
        .iter()
        .map(|p| direction_for_phrase(&world, &m, p, a.lambda.get(p).copied(), a.filter))
        .collect::<Result<Vec<_>>>()?;
    let space = AttributeSpace::new(&world, &m, directions)?;
    cx.hashes.directions = Some(canonical_hash(&space)?);
    cx.emit_json(DIRECTIONS_FILE, "directions", &space)?;
    for d in &space.directions {
        cx.emit_text(format!("directions/{}.csv", d.attribute), d.channel_table_csv());
    }
    Ok(())
}

fn counterfactual(cx: &mut Context) -> Result<()> {
    let world = cx.world()?;
    let target = cx.target(&world)?;
    let (_, space) = cx.space(&world)?;
    let sub = cx.search_space(&space, &cx.config.search.diag_attribute)?;
    let style = cx.sample_style(&world);
    let r = search_counterfactual(&world, &target.model, &sub, &style, &cx.config.search)?;
    cx.emit_json("counterfactual/result.json", "counterfactual", &r)?;
    cx.emit_text("counterfactual/trace.csv", r.trace_csv());
    cx.emit_text("counterfactual/original.pgm", write_pgm(&r.original_image));
    cx.emit_text("counterfactual/counterfactual.pgm", write_pgm(&r.counterfactual_image));
    Ok(())
}

fn emit_histogram(cx: &mut Context, stem: &str, title: &str, h: &SensitivityReport) -> Result<()> {
    cx.emit_json(format!("{stem}.json"), "sensitivity", h)?;
    cx.emit_text(format!("{stem}.csv"), h.csv());
    cx.emit_text(format!("{stem}.svg"), bar_chart_svg(title, &h.names, &h.normalized));
    Ok(())
}

fn diagnose(cx: &mut Context) -> Result<()> {
    let world = cx.world()?;
    let target = cx.target(&world)?;
    let (_, space) = cx.space(&world)?;
    let sub = cx.search_space(&space, &cx.config.search.diag_attribute)?;
    let config = cx.diagnosis();
    let zoom = sensitivity_histogram(&world, &target.model, &sub, &config)?;
    let oracle = oracle_histogram(&world, &target.model, &sub, &config)?;
    let summary = DiagnoseSummary {
        attributes: &zoom.names,
        top: zoom.top_name(),
        oracle_top: oracle.top_name(),
        top1_agreement: zoom.top() == oracle.top(),
        spearman: spearman(&zoom.raw, &oracle.raw)?,
        degenerate: zoom.degenerate,
    };
    let summary = to_canonical_json(&Document::new("diagnosis-summary", &summary))?;
    emit_histogram(cx, "diagnose/sensitivity", "Attribute sensitivity", &zoom)?;
    emit_histogram(cx, "diagnose/oracle", "Attribute sensitivity (ground-truth intensities)", &oracle)?;
    cx.emit_text("diagnose/summary.json", summary);
    Ok(())
}

fn combine(cx: &mut Context) -> Result<()> {
    if cx.config.diagnosis.pairs.is_empty() {
        return Err(Error::Config("diagnosis.pairs must list at least one attribute pair".into()));
    }
    let world = cx.world()?;
    let target = cx.target(&world)?;
    let (_, space) = cx.space(&world)?;
    let sub = cx.search_space(&space, &cx.config.search.diag_attribute)?;
    let pairs: Vec<(String, String)> = cx.config.diagnosis.pairs.iter().map(|[a, b]| (a.clone(), b.clone())).collect();
    let h = combination_histogram(&world, &target.model, &sub, &pairs, &cx.diagnosis())?;
    emit_histogram(cx, "combine/pairs", "Joint attribute sensitivity", &h)
}

fn confusion(cx: &mut Context) -> Result<()> {
    let world = cx.world()?;
    let target = cx.target(&world)?;
    let (_, space) = cx.space(&world)?;
    let mut config = cx.diagnosis();
    config.search.diag_attribute = None;
    let matrix = confusion_matrix(&world, &target.model, &space, &config)?;
    let summary =
        ConfusionSummary { matrix: &matrix, dominant_columns: matrix.dominant_columns(2.0), columns: matrix.optimized.len() };
    cx.emit_json("confusion/matrix.json", "confusion", &summary)?;
    cx.emit_text("confusion/matrix.csv", matrix.csv());
    Ok(())
}

fn quality(cx: &mut Context) -> Result<()> {
    let world = cx.world()?;
    let target = cx.target(&world)?;
    let (_, space) = cx.space(&world)?;
    let sub = cx.search_space(&space, &cx.config.search.diag_attribute)?;
    let table = quality_table(&world, &target.model, &sub, &cx.diagnosis())?;
    cx.emit_json("quality/table.json", "quality", &table)?;
    cx.emit_text("quality/table.csv", table.csv());
    Ok(())
}

fn ct(cx: &mut Context) -> Result<()> {
    let world = cx.world()?;
    let target = cx.target(&world)?;
    if target.kind != ModelKind::Classifier {
        return Err(Error::Precondition("counterfactual training needs a classifier target".into()));
    }
    let (_, space) = cx.space(&world)?;
    let config = cx.config.ct.clone();
    let sub = cx.search_space(&space, &config.search.diag_attribute)?;
    let dataset = training_set(&world, &cx.config)?;
    let outcome = ct_train(&world, &target.model, &sub, &dataset, &config)?;
    let r = &outcome.report;
    cx.emit_json("ct/report.json", "ct-report", r)?;
    let rows: Vec<Vec<String>> = r
        .rounds
        .iter()
        .map(|s| {
            vec![
                s.round.to_string(),
                fmt_real(s.monitor_flip_rate),
                fmt_real(s.batch_flip_rate),
                fmt_real(s.train_loss),
                s.n_counterfactual.to_string(),
                s.n_original.to_string(),
            ]
        })
        .collect();
    cx.emit_text(
        "ct/rounds.csv",
        csv_text(&["round", "monitor_flip_rate", "batch_flip_rate", "train_loss", "n_counterfactual", "n_original"], &rows),
    );
    let summary = csv_text(
        &["metric", "before", "after"],
        &[
            vec!["heldout_accuracy".into(), fmt_real(r.heldout_accuracy_before), fmt_real(r.heldout_accuracy_after)],
            vec!["fr25".into(), fmt_real(r.fr25_before), fmt_real(r.fr25_after)],
            vec!["fr100".into(), fmt_real(r.fr100_before), fmt_real(r.fr100_after)],
        ],
    );
    cx.emit_text("ct/summary.csv", summary);
    cx.emit_json("ct/model.json", "target-model", &outcome.model)?;
    for (i, m) in outcome.checkpoints.iter().enumerate() {
        cx.emit_json(format!("ct/checkpoint_{i}.json"), "target-model", m)?;
    }
    Ok(())
}

fn ablate(cx: &mut Context) -> Result<()> {
    let world = cx.world()?;
    let target = cx.target(&world)?;
    let (_, space) = cx.space(&world)?;
    let mut targets = Vec::new();
    if target.kind == ModelKind::Classifier {
        targets.push(AblationTarget {
            name: "target".into(),
            model: target.model,
            diag_attribute: cx.config.search.diag_attribute.clone(),
        });
    }
    for c in &cx.config.ablation.classifiers {
        let design = DatasetDesign { label: c.label.clone(), confound: c.confound.clone(), cells: c.cells };
        let dataset = make_dataset(&world, &design, Stream::TrainSet)?;
        let model = semcf::world::train_target(&dataset, ModelKind::Classifier, &c.train)?.model;
        targets.push(AblationTarget { name: c.name.clone(), model, diag_attribute: Some(c.label.clone()) });
    }
    if targets.is_empty() {
        return Err(Error::Precondition("ablate-opt needs a classifier target or [[ablation.classifiers]]".into()));
    }
    let report = ablate_optimizers(&world, &targets, &space, &cx.diagnosis())?;
    cx.emit_json("ablation/report.json", "ablation", &report)?;
    cx.emit_text("ablation/report.csv", report.csv());
    Ok(())
}

fn sweep(cx: &mut Context) -> Result<()> {
    let world = cx.world()?;
    let (m, _) = cx.space(&world)?;
    let filter = cx.config.attributes.filter;
    let d = &cx.config.diagnosis;
    let phrase = d.sweep_phrase.clone().unwrap_or_else(|| cx.config.attributes.phrases[0].clone());
    let lambdas = match &d.sweep_lambdas {
        Some(l) => l.clone(),
        None => {
            let raw = direction_for_phrase(&world, &m, &phrase, Some(0.0), Filter::Symmetric)?.raw;
            let top = raw
                .iter()
                .map(|&x| if filter == Filter::Symmetric { x.abs() } else { x })
                .fold(0.0f64, f64::max);
            (0..6).map(|k| top * k as f64 / 5.0).collect()
        }
    };
    let style = cx.sample_style(&world);
    let s = lambda_sweep(&world, &m, &phrase, &lambdas, filter, &style)?;
    cx.emit_json("sweep/sweep.json", "lambda-sweep", &s)?;
    cx.emit_text("sweep/sweep.csv", s.csv());
    for (i, e) in s.entries.iter().enumerate() {
        for (img, w) in e.strip.iter().zip(STRIP_WEIGHTS) {
            cx.emit_text(format!("sweep/lambda{i}_w{w:+}.pgm"), write_pgm(img));
        }
    }
    Ok(())
}

fn stability(cx: &mut Context) -> Result<()> {
    let sets = cx.config.diagnosis.phrasing_sets.clone();
    if sets.len() < 2 {
        return Err(Error::Config("diagnosis.phrasing_sets must list at least two phrasing sets".into()));
    }
    let world = cx.world()?;
    let target = cx.target(&world)?;
    let (m, _) = cx.space(&world)?;
    let report = prompt_stability(&world, &target.model, &m, &sets, cx.config.attributes.filter, &cx.diagnosis())?;
    cx.emit_json("stability/report.json", "stability", &report)?;
    let k = report.histograms.len();
    let header: Vec<String> = std::iter::once("set".to_string()).chain((0..k).map(|j| format!("set{j}"))).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..k)
        .map(|i| {
            std::iter::once(format!("set{i}")).chain((0..k).map(|j| fmt_real(report.spearman[i * k + j]))).collect()
        })
        .collect();
    cx.emit_text("stability/spearman.csv", csv_text(&header, &rows));
    for (i, h) in report.histograms.iter().enumerate() {
        cx.emit_text(format!("stability/set{i}.csv"), h.csv());
    }
    Ok(())
}
