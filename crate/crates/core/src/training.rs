//! Counterfactual training: the model is repeatedly fine-tuned on its own
//! counterfactuals, each labeled with the model's prediction on the original
//! image, mixed with ordinary labeled data.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diagnosis::{flip_stats, population, run_searches};
use crate::direction::AttributeSpace;
use crate::engine::SearchConfig;
use crate::error::{Error, Result};
use crate::report::canonical_hash;
use crate::rng::{self, Stream};
use crate::world::{accuracy, LabeledDataset, Sample, StyleVector, TargetModel, TrainHyper, Trainer, World};

/// Counterfactual to original sample ratio within a round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixRatio {
    pub counterfactual: usize,
    pub original: usize,
}

impl Default for MixRatio {
    fn default() -> Self {
        Self { counterfactual: 1, original: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CTConfig {
    pub rounds: usize,
    /// Counterfactuals generated per round.
    pub batch_size: usize,
    pub mix: MixRatio,
    pub search: SearchConfig,
    /// Learning rate and minibatch size are used; the split follows `holdout_every`.
    pub trainer: TrainHyper,
    pub seed: u64,
    /// Fixed styles used to track the per-round flip rate.
    pub monitor_size: usize,
    pub monitor_budget: usize,
    /// Fresh population for the before/after flip rates.
    pub eval_size: usize,
}

impl Default for CTConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            batch_size: 100,
            mix: MixRatio::default(),
            search: SearchConfig::default(),
            trainer: TrainHyper { learning_rate: 3e-3, ..TrainHyper::default() },
            seed: 0,
            monitor_size: 50,
            monitor_budget: 25,
            eval_size: 500,
        }
    }
}

impl CTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::precondition("counterfactual training needs at least one round"));
        }
        if self.mix.counterfactual == 0 || self.mix.original == 0 {
            return Err(Error::Config("mix ratio components must be positive".into()));
        }
        if self.batch_size == 0 || self.trainer.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.trainer.learning_rate.is_finite() && self.trainer.learning_rate > 0.0) {
            return Err(Error::Config("trainer.learning_rate must be positive".into()));
        }
        self.search.validate()
    }
}

/// A generated training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtExample {
    pub style: StyleVector,
    pub pixels: Vec<f64>,
    /// The pre-update model's output on the original image.
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    /// Monitor-set flip rate against the model the round started from.
    pub monitor_flip_rate: f64,
    /// Flip rate of this round's own counterfactual searches.
    pub batch_flip_rate: f64,
    pub train_loss: f64,
    pub n_counterfactual: usize,
    pub n_original: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CTReport {
    pub rounds: Vec<RoundStats>,
    pub heldout_accuracy_before: f64,
    pub heldout_accuracy_after: f64,
    /// Flip resistance within 25 and 100 iterations.
    pub fr25_before: f64,
    pub fr25_after: f64,
    pub fr100_before: f64,
    pub fr100_after: f64,
    pub mix: MixRatio,
    pub eval_size: usize,
    pub config_hash: String,
    pub model_hash_before: String,
    pub model_hash_after: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtOutcome {
    pub model: TargetModel,
    pub report: CTReport,
    /// Model after each round.
    pub checkpoints: Vec<TargetModel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutput {
    pub stats: RoundStats,
    pub examples: Vec<CtExample>,
}

fn check_classifier(model: &TargetModel) -> Result<()> {
    if !model.is_classifier() {
        return Err(Error::precondition("counterfactual training needs a binary classifier"));
    }
    model.validate()
}

/// Counterfactuals for round `round` against a read-only snapshot, each labeled
/// with the snapshot's own prediction on the unedited image.
pub fn counterfactual_batch(
    world: &World,
    model: &TargetModel,
    space: &AttributeSpace,
    config: &CTConfig,
    round: usize,
) -> Result<(Vec<CtExample>, f64)> {
    let styles = population(world, config.seed, Stream::CtRound(round as u32), config.batch_size);
    let results = run_searches(world, model, space, &styles, &config.search)?;
    let flip_rate = flip_stats(&results, config.search.iterations)?.flip_rate;
    let examples = styles
        .into_iter()
        .zip(results)
        .map(|(style, r)| CtExample {
            style,
            pixels: r.counterfactual_image.pixels().to_vec(),
            label: r.original_output[0],
        })
        .collect();
    Ok((examples, flip_rate))
}

/// Training and held-out parts, split the same way as initial target training.
pub fn split<'a>(dataset: &'a LabeledDataset, hyper: &TrainHyper) -> (Vec<&'a Sample>, Vec<&'a Sample>) {
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if hyper.holdout_every > 1 && i % hyper.holdout_every == hyper.holdout_every - 1 {
            heldout.push(s);
        } else {
            train.push(s);
        }
    }
    (train, heldout)
}

fn monitor_flip_rate(world: &World, model: &TargetModel, space: &AttributeSpace, config: &CTConfig) -> Result<f64> {
    if config.monitor_size == 0 {
        return Ok(0.0);
    }
    let styles = population(world, config.seed, Stream::CtMonitor, config.monitor_size);
    let results = run_searches(world, model, space, &styles, &config.search)?;
    Ok(flip_stats(&results, config.monitor_budget)?.flip_rate)
}

/// One round: generate counterfactuals with the trainer's current model, then
/// run one epoch over them interleaved with original training samples.
pub fn ct_round(
    world: &World,
    trainer: &mut Trainer,
    space: &AttributeSpace,
    originals: &[&Sample],
    config: &CTConfig,
    round: usize,
) -> Result<RoundOutput> {
    check_classifier(trainer.model())?;
    if originals.is_empty() {
        return Err(Error::precondition("counterfactual training needs original training samples"));
    }
    let snapshot = trainer.model().clone();
    let monitor = monitor_flip_rate(world, &snapshot, space, config)?;
    let (examples, batch_flip_rate) = counterfactual_batch(world, &snapshot, space, config, round)?;

    let n_orig = (examples.len() * config.mix.original).div_ceil(config.mix.counterfactual);
    let mut order: Vec<usize> = (0..originals.len()).collect();
    order.shuffle(&mut rng::derive(config.seed, Stream::CtRound(round as u32), u64::MAX));
    let labels: Vec<[f64; 1]> = examples.iter().map(|e| [e.label]).collect();
    let cf: Vec<(&[f64], &[f64])> = examples.iter().zip(&labels).map(|(e, l)| (e.pixels.as_slice(), &l[..])).collect();
    let orig: Vec<(&[f64], &[f64])> = (0..n_orig)
        .map(|k| {
            let s = originals[order[k % order.len()]];
            (s.image.pixels(), s.target.as_slice())
        })
        .collect();

    let cf_batch = config.trainer.batch_size;
    let orig_batch = (cf_batch * config.mix.original).div_ceil(config.mix.counterfactual);
    let mut cf_chunks = cf.chunks(cf_batch);
    let mut orig_chunks = orig.chunks(orig_batch.max(1));
    let (mut total, mut count) = (0.0, 0usize);
    loop {
        let a = cf_chunks.next();
        let b = orig_chunks.next();
        if a.is_none() && b.is_none() {
            break;
        }
        for chunk in [a, b].into_iter().flatten() {
            total += trainer.step_batch(chunk)? * chunk.len() as f64;
            count += chunk.len();
        }
    }
    Ok(RoundOutput {
        stats: RoundStats {
            round,
            monitor_flip_rate: monitor,
            batch_flip_rate,
            train_loss: total / count.max(1) as f64,
            n_counterfactual: cf.len(),
            n_original: orig.len(),
        },
        examples,
    })
}

/// Flip resistance after 25 and 100 iterations (FR-25, FR-100) on the fresh
/// evaluation population.
pub fn evaluation_flip_rates(
    world: &World,
    model: &TargetModel,
    space: &AttributeSpace,
    config: &CTConfig,
) -> Result<(f64, f64)> {
    let styles = population(world, config.seed, Stream::CtEvaluation, config.eval_size);
    let search = SearchConfig { iterations: config.search.iterations.max(100), ..config.search.clone() };
    let results = run_searches(world, model, space, &styles, &search)?;
    Ok((flip_stats(&results, 25)?.flip_resistance, flip_stats(&results, 100)?.flip_resistance))
}

/// Runs `config.rounds` rounds starting from `model`, evaluating flip rates
/// and held-out accuracy before and after.
///
/// `dataset` is split with `config.trainer.holdout_every`; the training part
/// supplies the original samples and the held-out part the accuracy.
pub fn ct_train(
    world: &World,
    model: &TargetModel,
    space: &AttributeSpace,
    dataset: &LabeledDataset,
    config: &CTConfig,
) -> Result<CtOutcome> {
    config.validate()?;
    check_classifier(model)?;
    let (train, heldout) = split(dataset, &config.trainer);
    if heldout.is_empty() {
        return Err(Error::precondition("counterfactual training needs held-out samples"));
    }
    let acc_before = accuracy(model, &heldout)?;
    let (fr25_before, fr100_before) = evaluation_flip_rates(world, model, space, config)?;

    let mut trainer = Trainer::new(model.clone(), config.trainer.learning_rate);
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut checkpoints = Vec::with_capacity(config.rounds);
    for r in 0..config.rounds {
        let out = ct_round(world, &mut trainer, space, &train, config, r)?;
        rounds.push(out.stats);
        checkpoints.push(trainer.model().clone());
    }
    let robust = trainer.into_model();
    let acc_after = accuracy(&robust, &heldout)?;
    let (fr25_after, fr100_after) = evaluation_flip_rates(world, &robust, space, config)?;
    let report = CTReport {
        rounds,
        heldout_accuracy_before: acc_before,
        heldout_accuracy_after: acc_after,
        fr25_before,
        fr25_after,
        fr100_before,
        fr100_after,
        mix: config.mix,
        eval_size: config.eval_size,
        config_hash: canonical_hash(config)?,
        model_hash_before: canonical_hash(model)?,
        model_hash_after: canonical_hash(&robust)?,
    };
    Ok(CtOutcome { model: robust, report, checkpoints })
}
